use proptest::prelude::*;

use mlalign::corpus::{Corpus, CorpusConfig};
use mlalign::inputs::build_vocabs;
use mlalign::trainer::{
    lr_at, warmup_steps, StageConfig, TrainConfig, TrainError, Trainer, Variant,
};

fn desk_trainer(n_pairs: usize, config: TrainConfig) -> Result<Trainer, TrainError> {
    let corpus = Corpus::generate(CorpusConfig {
        n_pairs,
        ..CorpusConfig::default()
    })
    .unwrap();
    let vocabs = build_vocabs(&corpus, config.min_phrase_freq).unwrap();
    Trainer::new(config, &corpus, vocabs)
}

#[test]
fn first_stage_one_loss_is_near_the_uniform_baseline() {
    let t = desk_trainer(640, TrainConfig::default()).unwrap();
    let mut state = t.init_state::<f32>().unwrap();
    let r = t.train_step(&mut state).unwrap();
    let v = &t.vocabs;
    let baseline = (t.batch_size(1) as f64).ln()
        + (v.tokens.num_tags() as f64).ln()
        + (v.phrases.len() as f64).ln();
    let rel = (r.total - baseline).abs() / baseline;
    assert!(rel <= 0.2, "step-0 loss {} vs baseline {baseline}", r.total);
    assert!(r.itm.is_none() && r.wpg.is_none() && r.mlm.is_none());
    assert!(r.all_finite());
}

#[test]
fn stage_two_reports_every_objective() {
    let config = TrainConfig {
        stage1: StageConfig {
            max_steps: Some(2),
            batch_size: 8,
            ..StageConfig::default()
        },
        stage2: StageConfig {
            max_steps: Some(2),
            batch_size: 8,
            ..StageConfig::default()
        },
        ..TrainConfig::default()
    };
    let t = desk_trainer(64, config).unwrap();
    let mut state = t.init_state::<f32>().unwrap();
    t.run_stage::<f32, Vec<u8>>(&mut state, None).unwrap();
    t.begin_stage2(&mut state);
    let r = t.train_step(&mut state).unwrap();
    assert_eq!(r.stage, 2);
    assert!(r
        .components()
        .iter()
        .all(|(_, v)| v.is_some_and(|x| x >= 0.0)));
    assert_eq!(r.counts.itm_pairs, 16);
}

#[test]
fn merged_variant_skips_stage_one() {
    let mut config = TrainConfig::default();
    config.variant = Variant::ablation_rows()
        .into_iter()
        .find(|v| v.merged)
        .unwrap();
    config.stage2.max_steps = Some(1);
    config.stage2.batch_size = 4;
    let t = desk_trainer(32, config).unwrap();
    assert_eq!(t.first_stage(), 2);
    let state = t.run::<f32, Vec<u8>>(None).unwrap();
    assert_eq!(state.global_step, 1);
}

#[test]
fn invalid_stage_configs_are_rejected() {
    for stage in [
        StageConfig {
            batch_size: 1,
            ..StageConfig::default()
        },
        StageConfig {
            warmup_fraction: 1.0,
            ..StageConfig::default()
        },
        StageConfig {
            peak_lr: 0.0,
            ..StageConfig::default()
        },
    ] {
        let config = TrainConfig {
            stage1: stage,
            ..TrainConfig::default()
        };
        assert!(matches!(
            desk_trainer(16, config),
            Err(TrainError::InvalidConfig(_))
        ));
    }
}

proptest! {
    #[test]
    fn schedule_rises_then_falls(total in 2u64..3000, frac in 0.01f64..0.99, peak in 1e-5f64..1.0) {
        let c = StageConfig { warmup_fraction: frac, peak_lr: peak, ..StageConfig::default() };
        let w = warmup_steps(total, frac);
        let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, total, &c)).collect();
        for s in 0..total as usize {
            if (s as u64) < w {
                prop_assert!(lrs[s + 1] >= lrs[s]);
            } else {
                prop_assert!(lrs[s + 1] <= lrs[s]);
            }
        }
        prop_assert!(lrs.iter().all(|&l| (0.0..=peak).contains(&l)));
        prop_assert_eq!(lrs[total as usize], 0.0);
    }
}

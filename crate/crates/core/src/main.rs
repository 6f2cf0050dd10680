use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mlalign::corpus::{read_corpus, write_corpus, Corpus, CorpusConfig};
use mlalign::eval::{
    ablation_run, eval_pairs, export_embeddings, grounding_eval, retrieval_eval, AblationMatrix,
    GroundingMode, RerankDepths,
};
use mlalign::inputs::{build_vocabs, Vocabs};
use mlalign::scalar::Scalar;
use mlalign::trainer::{checkpoint_load, checkpoint_save, TrainConfig, Trainer};

/// Forces 64-bit arithmetic when set to `1`.
const F64_ENV: &str = "MLALIGN_F64";

#[derive(Parser)]
#[command(
    name = "mlalign",
    version,
    about = "Multi-level vision-language alignment pre-training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Token,
    Concept,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus as JSONL.
    GenCorpus {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        n_pairs: usize,
        /// Corpus config JSON; `--seed` and `--n-pairs` override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Extra held-out pairs from the same generator, written to `--eval-out`.
        #[arg(long, default_value_t = 0, requires = "eval_out")]
        eval_pairs: usize,
        #[arg(long)]
        eval_out: Option<PathBuf>,
    },
    /// Build token, tag and phrase vocabularies from a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_freq: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run stage 1, stage 2 or both.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Training config JSON (architecture, stages, masking, variant).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Vocabulary directory; built from the corpus when absent.
        #[arg(long)]
        vocab_dir: Option<PathBuf>,
        /// Checkpoint to continue from (required for `--stage 2`).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Retrieval with coarse ranking and cross-encoder reranking.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 16)]
        kc: usize,
        #[arg(long, default_value_t = 16)]
        ki: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Phrase grounding accuracy.
    Ground {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "concept")]
        mode: ModeArg,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write global and concept embeddings as JSONL.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a matrix of variants.
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn use_f64() -> bool {
    std::env::var(F64_ENV).is_ok_and(|v| v == "1")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn pretrain<T: Scalar>(
    corpus: &Corpus,
    stage: StageArg,
    config: TrainConfig,
    vocabs: Vocabs,
    resume: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let (trainer, mut state) = match resume {
        Some(p) => {
            let ck = checkpoint_load::<T>(p).with_context(|| format!("loading {}", p.display()))?;
            let trainer = Trainer::new(ck.train_config, corpus, ck.vocabs)?;
            (trainer, ck.state)
        }
        None => {
            let trainer = Trainer::new(config, corpus, vocabs)?;
            let state = trainer.init_state::<T>()?;
            (trainer, state)
        }
    };
    if matches!(stage, StageArg::Two) && resume.is_none() && trainer.first_stage() == 1 {
        bail!("--stage 2 needs --resume with a stage-1 checkpoint");
    }
    trainer.vocabs.write_dir(&out_dir.join("vocab"))?;
    fs::write(
        out_dir.join("model_config.json"),
        serde_json::to_string_pretty(&trainer.model_config())?,
    )?;
    let metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("metrics.jsonl"))?;
    let mut metrics = BufWriter::new(metrics);

    let run_one = matches!(stage, StageArg::One) || matches!(stage, StageArg::Both);
    if state.stage == 1 && run_one {
        trainer.run_stage(&mut state, Some(&mut metrics))?;
        metrics.flush()?;
        checkpoint_save(
            &state,
            &trainer.config,
            &trainer.vocabs,
            &out_dir.join("stage1.ckpt"),
        )?;
        eprintln!("stage 1 done after {} steps", state.global_step);
    }
    if matches!(stage, StageArg::One) {
        return Ok(());
    }
    if state.stage == 1 {
        if !trainer.stage_done(&state) {
            bail!("stage 1 is not finished in the resumed checkpoint");
        }
        trainer.begin_stage2(&mut state);
    }
    trainer.run_stage(&mut state, Some(&mut metrics))?;
    metrics.flush()?;
    checkpoint_save(
        &state,
        &trainer.config,
        &trainer.vocabs,
        &out_dir.join("stage2.ckpt"),
    )?;
    eprintln!("stage 2 done after {} steps", state.global_step);
    Ok(())
}

fn evaluate<T: Scalar>(
    checkpoint: &Path,
    corpus: &Corpus,
    depths: RerankDepths,
    report: Option<&Path>,
) -> Result<()> {
    let ck = checkpoint_load::<T>(checkpoint)?;
    let pairs = eval_pairs(
        corpus,
        &ck.vocabs,
        &ck.train_config.arch.caps,
        &ck.train_config.variant,
    )?;
    let r = retrieval_eval(&ck.state.model, &pairs, depths)?;
    emit(&r, report)
}

fn ground<T: Scalar>(
    checkpoint: &Path,
    corpus: &Corpus,
    mode: GroundingMode,
    report: Option<&Path>,
) -> Result<()> {
    let ck = checkpoint_load::<T>(checkpoint)?;
    let pairs = eval_pairs(
        corpus,
        &ck.vocabs,
        &ck.train_config.arch.caps,
        &ck.train_config.variant,
    )?;
    let r = grounding_eval(&ck.state.model, corpus, &pairs, mode)?;
    eprintln!(
        "accuracy {:.4} over {} phrases (chance 1/K = {:.4})",
        r.accuracy, r.phrases, r.chance_baseline
    );
    emit(&r, report)
}

fn export<T: Scalar>(checkpoint: &Path, corpus: &Corpus, out: &Path) -> Result<()> {
    let ck = checkpoint_load::<T>(checkpoint)?;
    let pairs = eval_pairs(
        corpus,
        &ck.vocabs,
        &ck.train_config.arch.caps,
        &ck.train_config.variant,
    )?;
    let records = export_embeddings(&ck.state.model, corpus, &ck.vocabs, &pairs)?;
    let mut w = BufWriter::new(File::create(out)?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    eprintln!("wrote {} embeddings to {}", records.len(), out.display());
    Ok(())
}

fn ablate<T: Scalar>(matrix: &AblationMatrix, report: Option<&Path>) -> Result<()> {
    let corpus = Corpus::generate(CorpusConfig {
        n_pairs: matrix.corpus.n_pairs + matrix.n_eval,
        ..matrix.corpus.clone()
    })?;
    let n = matrix.corpus.n_pairs;
    let train = corpus.subset(0..n);
    let eval = corpus.subset(n..corpus.len());
    let vocabs = build_vocabs(&train, matrix.train.min_phrase_freq)?;
    let variants = matrix
        .variants
        .iter()
        .map(|v| v.resolve())
        .collect::<Result<Vec<_>, _>>()?;
    let r = ablation_run::<T>(
        &variants,
        &matrix.train,
        &train,
        &eval,
        &vocabs,
        matrix.step_budget,
        matrix.depths,
    )?;
    eprint!("{}", r.table());
    emit(&r, report)
}

macro_rules! dispatch {
    ($f:ident($($arg:expr),*)) => {
        if use_f64() { $f::<f64>($($arg),*) } else { $f::<f32>($($arg),*) }
    };
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenCorpus {
            seed,
            n_pairs,
            config,
            out,
            eval_pairs,
            eval_out,
        } => {
            let base = match config {
                Some(p) => read_json::<CorpusConfig>(&p)?,
                None => CorpusConfig::default(),
            };
            let corpus = Corpus::generate(CorpusConfig {
                seed,
                n_pairs: n_pairs + eval_pairs,
                ..base
            })?;
            write_corpus(&corpus.subset(0..n_pairs), &out)?;
            eprintln!("wrote {} pairs to {}", n_pairs, out.display());
            if let Some(p) = eval_out {
                write_corpus(&corpus.subset(n_pairs..corpus.len()), &p)?;
                eprintln!("wrote {} held-out pairs to {}", eval_pairs, p.display());
            }
        }
        Command::BuildVocab {
            corpus,
            min_freq,
            out_dir,
        } => {
            let vocabs = build_vocabs(&load_corpus(&corpus)?, min_freq)?;
            vocabs.write_dir(&out_dir)?;
            eprintln!(
                "{} tokens ({} tags), {} phrases",
                vocabs.tokens.len(),
                vocabs.tokens.num_tags(),
                vocabs.phrases.len()
            );
        }
        Command::Pretrain {
            corpus,
            stage,
            config,
            vocab_dir,
            resume,
            out_dir,
        } => {
            let corpus = load_corpus(&corpus)?;
            let config = match config {
                Some(p) => read_json::<TrainConfig>(&p)?,
                None => TrainConfig::default(),
            };
            let vocabs = match vocab_dir {
                Some(d) => Vocabs::read_dir(&d, config.min_phrase_freq)?,
                None => build_vocabs(&corpus, config.min_phrase_freq)?,
            };
            dispatch!(pretrain(
                &corpus,
                stage,
                config,
                vocabs,
                resume.as_deref(),
                &out_dir
            ))?;
        }
        Command::Evaluate {
            checkpoint,
            corpus,
            kc,
            ki,
            report,
        } => {
            let corpus = load_corpus(&corpus)?;
            dispatch!(evaluate(
                &checkpoint,
                &corpus,
                RerankDepths { kc, ki },
                report.as_deref()
            ))?;
        }
        Command::Ground {
            checkpoint,
            corpus,
            mode,
            report,
        } => {
            let corpus = load_corpus(&corpus)?;
            let mode = match mode {
                ModeArg::Token => GroundingMode::Token,
                ModeArg::Concept => GroundingMode::Concept,
            };
            dispatch!(ground(&checkpoint, &corpus, mode, report.as_deref()))?;
        }
        Command::ExportEmbeddings {
            checkpoint,
            corpus,
            out,
        } => {
            let corpus = load_corpus(&corpus)?;
            dispatch!(export(&checkpoint, &corpus, &out))?;
        }
        Command::Ablate { matrix, report } => {
            let matrix: AblationMatrix = read_json(&matrix)?;
            dispatch!(ablate(&matrix, report.as_deref()))?;
        }
    }
    Ok(())
}

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::encoders::{MmOut, Model};
use crate::inputs::{
    build_text_sequence, build_visual_sequence, MaskKind, MaskedView, Masker, SequenceCaps,
    TextSequence, VisualSequence, Vocabs,
};
use crate::losses::{
    mcr_loss_graph, sample_hard_negatives, sample_uniform_negatives, vsc_loss_graph,
    wpg_loss_graph, wpg_similarity_graph, LossCounts, LossReport, Negatives,
};
use crate::nn::{Graph, Var};
use crate::scalar::Scalar;

use super::{LossToggles, TrainError, Variant};

/// Model inputs of one corpus pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPair {
    pub index: usize,
    pub text: TextSequence,
    pub visual: VisualSequence,
}

/// Builds sequences for every pair, dropping tags or phrases when the
/// variant leaves them out.
pub fn prepare_pairs(
    corpus: &Corpus,
    vocabs: &Vocabs,
    caps: &SequenceCaps,
    variant: &Variant,
) -> Vec<PreparedPair> {
    corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let mut text = build_text_sequence(p, vocabs, caps);
            let mut visual = build_visual_sequence(p, vocabs, caps);
            if !variant.phrases {
                let n = text.tokens.len();
                text.phrases.clear();
                text.phrase_sources.clear();
                text.positions.truncate(n);
                text.segments.truncate(n);
            }
            if !variant.tags {
                visual.tags.clear();
            }
            PreparedPair {
                index,
                text,
                visual,
            }
        })
        .collect()
}

/// Random choices of one step that precede the forward pass.
#[derive(Clone, Debug, Default)]
pub struct BatchPlan {
    pub phrase_masks: Vec<Option<(TextSequence, MaskedView)>>,
    pub tag_masks: Vec<Option<(VisualSequence, MaskedView)>>,
    pub mlm_masks: Vec<Option<(TextSequence, MaskedView)>>,
    /// Per pair: the matching negative replaces the image (else the text).
    pub replace_image: Vec<bool>,
}

pub fn plan_batch(
    batch: &[&PreparedPair],
    masker: &Masker,
    losses: &LossToggles,
    rng: &mut ChaCha8Rng,
) -> BatchPlan {
    let mut plan = BatchPlan::default();
    for p in batch {
        plan.phrase_masks.push(if losses.mcr_s {
            masker.mask_text(&p.text, MaskKind::McrPhrases, rng)
        } else {
            None
        });
        plan.tag_masks.push(if losses.mcr_v {
            masker.mask_tags(&p.visual, rng)
        } else {
            None
        });
        plan.mlm_masks.push(if losses.mlm {
            masker.mask_text(&p.text, MaskKind::Mlm, rng)
        } else {
            None
        });
        plan.replace_image.push(rng.random::<bool>());
    }
    plan
}

/// Tape and per-objective values of one batch.
pub struct Forward<T: Scalar> {
    pub graph: Graph<T>,
    pub total: Var,
    pub report: LossReport,
    pub negatives: Option<Negatives>,
}

struct Items {
    list: Vec<(usize, usize)>,
    index: HashMap<(usize, usize), usize>,
}

impl Items {
    fn get(&mut self, text: usize, visual: usize) -> usize {
        *self.index.entry((text, visual)).or_insert_with(|| {
            self.list.push((text, visual));
            self.list.len() - 1
        })
    }
}

/// Rows and per-set labels for a masked-concept loss.
#[derive(Default)]
struct McrRows {
    rows: Vec<usize>,
    sets: Vec<(usize, Vec<usize>)>,
}

impl McrRows {
    fn push(
        &mut self,
        first_slot_row: usize,
        view: &MaskedView,
        label: impl Fn(usize) -> Option<usize>,
    ) {
        let start = self.rows.len();
        let mut labels = Vec::new();
        for (&pos, &orig) in view.positions.iter().zip(&view.originals) {
            if let Some(l) = label(orig) {
                self.rows.push(first_slot_row + pos - view.offset);
                labels.push(l);
            }
        }
        if !labels.is_empty() {
            self.sets.push((start, labels));
        }
    }

    fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        hidden: Var,
        head: impl Fn(&mut Graph<T>, Var) -> Result<Var, crate::nn::NnError>,
    ) -> Result<Option<Var>, TrainError> {
        if self.rows.is_empty() {
            return Ok(None);
        }
        let x = g.gather_rows(hidden, &self.rows)?;
        let logits = head(g, x)?;
        Ok(Some(mcr_loss_graph(g, logits, &self.sets)?))
    }
}

/// Evaluates the enabled objectives on one batch. `losses` must already be
/// restricted to the current stage. With `fixed` negatives no sampling
/// happens, which makes the result a deterministic function of the
/// parameters.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch<T: Scalar>(
    model: &Model<T>,
    vocabs: &Vocabs,
    batch: &[&PreparedPair],
    plan: &BatchPlan,
    losses: &LossToggles,
    fixed: Option<&Negatives>,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<Forward<T>, TrainError> {
    let n = batch.len();
    if n < 2 {
        return Err(TrainError::BatchTooSmall(n));
    }
    let merged = model.config.merged;
    let mut g = if training {
        Graph::training()
    } else {
        Graph::new()
    };
    let mut report = LossReport {
        tau: model.tau().as_f64(),
        counts: LossCounts {
            pairs: n,
            phrase_free: batch.iter().filter(|p| p.text.phrases.is_empty()).count(),
            ..LossCounts::default()
        },
        ..LossReport::default()
    };

    let mut texts: Vec<&TextSequence> = batch.iter().map(|p| &p.text).collect();
    let mut visuals: Vec<&VisualSequence> = batch.iter().map(|p| &p.visual).collect();
    let mut phrase_idx = vec![None; n];
    let mut mlm_idx = vec![None; n];
    let mut tag_idx = vec![None; n];
    for i in 0..n {
        if let (true, Some((t, _))) = (losses.mcr_s, &plan.phrase_masks[i]) {
            phrase_idx[i] = Some(texts.len());
            texts.push(t);
        }
        if let (true, Some((t, _))) = (losses.mlm, &plan.mlm_masks[i]) {
            mlm_idx[i] = Some(texts.len());
            texts.push(t);
        }
        if let (true, Some((v, _))) = (losses.mcr_v, &plan.tag_masks[i]) {
            tag_idx[i] = Some(visuals.len());
            visuals.push(v);
        }
    }

    let mut parts: Vec<(&'static str, Var)> = Vec::new();
    let need_mm =
        losses.itm || losses.wpg || losses.mlm || (merged && (losses.mcr_v || losses.mcr_s));

    let uni = if merged {
        None
    } else {
        let t = model.encode_text(&mut g, &texts, None, rng)?;
        let v = model.encode_visual(&mut g, &visuals, rng)?;
        Some((t, v))
    };

    let mut block = None;
    if let Some((t, v)) = &uni {
        let mut tag_rows = McrRows::default();
        let mut phrase_rows = McrRows::default();
        for i in 0..n {
            if let (Some(vi), Some((_, view))) = (tag_idx[i], &plan.tag_masks[i]) {
                tag_rows.push(v.spans[vi].start + 1, view, |o| vocabs.tokens.tag_class(o));
            }
            if let (Some(ti), Some((_, view))) = (phrase_idx[i], &plan.phrase_masks[i]) {
                let s = t.spans[ti];
                phrase_rows.push(s.start + s.tokens, view, |o| vocabs.phrases.class_of(o));
            }
        }
        if let Some(l) = tag_rows.loss(&mut g, v.hidden, |g, x| model.mcr_visual_logits(g, x))? {
            report.counts.mcr_v_slots = tag_rows.rows.len();
            parts.push(("mcr_v", l));
        }
        if let Some(l) =
            phrase_rows.loss(&mut g, t.hidden, |g, x| model.mcr_textual_logits(g, x))?
        {
            report.counts.mcr_s_slots = phrase_rows.rows.len();
            parts.push(("mcr_s", l));
        }
        if losses.vsc {
            let cls: Vec<usize> = (0..n).map(|i| t.spans[i].start).collect();
            let tg = model.global_embeddings(&mut g, t.hidden, &cls)?;
            let cls: Vec<usize> = (0..n).map(|i| v.spans[i].start).collect();
            let vg = model.global_embeddings(&mut g, v.hidden, &cls)?;
            let tau = model.tau_var(&mut g);
            let (l, b) = vsc_loss_graph(&mut g, vg, tg, tau, model.config.arch.tau_min)?;
            parts.push(("vsc", l));
            block = Some(b);
        }
    }

    let mut negatives = None;
    if need_mm {
        let neg = match (fixed, &block) {
            (Some(f), _) => f.clone(),
            (None, Some(b)) => sample_hard_negatives(b, rng),
            (None, None) => sample_uniform_negatives(n, rng),
        };
        let mut items = Items {
            list: Vec::new(),
            index: HashMap::new(),
        };
        let pos: Vec<usize> = (0..n).map(|i| items.get(i, i)).collect();
        let itm_neg: Vec<usize> = (0..n)
            .map(|i| {
                if plan.replace_image[i] {
                    items.get(i, neg.image_for_text[i])
                } else {
                    items.get(neg.text_for_image[i], i)
                }
            })
            .collect();
        let grounded: Vec<usize> = (0..n)
            .filter(|&i| {
                !batch[i].text.phrases.is_empty()
                    && batch[neg.image_for_text[i]].visual.num_regions() > 0
            })
            .collect();
        let wpg_neg: Vec<usize> = if losses.wpg {
            grounded
                .iter()
                .map(|&i| items.get(i, neg.image_for_text[i]))
                .collect()
        } else {
            Vec::new()
        };
        let mlm_items: Vec<(usize, usize)> = (0..n)
            .filter_map(|i| mlm_idx[i].map(|ti| (i, items.get(ti, i))))
            .collect();
        let mcr_items: Vec<(usize, usize)> = if merged {
            (0..n)
                .filter(|&i| phrase_idx[i].is_some() || tag_idx[i].is_some())
                .map(|i| {
                    (
                        i,
                        items.get(phrase_idx[i].unwrap_or(i), tag_idx[i].unwrap_or(i)),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };

        let mm: MmOut = match &uni {
            Some((t, v)) => model.encode_multimodal(&mut g, t, v, &items.list, rng)?,
            None => {
                let refs: Vec<(&TextSequence, &VisualSequence)> = items
                    .list
                    .iter()
                    .map(|&(t, v)| (texts[t], visuals[v]))
                    .collect();
                model.encode_merged(&mut g, &refs, rng)?
            }
        };

        if merged {
            let mut tag_rows = McrRows::default();
            let mut phrase_rows = McrRows::default();
            for &(i, it) in &mcr_items {
                let s = mm.spans[it];
                if let (Some(_), Some((_, view))) = (tag_idx[i], &plan.tag_masks[i]) {
                    tag_rows.push(s.tag_rows().start, view, |o| vocabs.tokens.tag_class(o));
                }
                if let (Some(_), Some((_, view))) = (phrase_idx[i], &plan.phrase_masks[i]) {
                    phrase_rows.push(s.phrase_rows().start, view, |o| vocabs.phrases.class_of(o));
                }
            }
            if let Some(l) =
                tag_rows.loss(&mut g, mm.hidden, |g, x| model.mcr_visual_logits(g, x))?
            {
                report.counts.mcr_v_slots = tag_rows.rows.len();
                parts.push(("mcr_v", l));
            }
            if let Some(l) =
                phrase_rows.loss(&mut g, mm.hidden, |g, x| model.mcr_textual_logits(g, x))?
            {
                report.counts.mcr_s_slots = phrase_rows.rows.len();
                parts.push(("mcr_s", l));
            }
        }

        if losses.wpg && !grounded.is_empty() {
            let mut p = Vec::with_capacity(grounded.len());
            let mut q = Vec::with_capacity(grounded.len());
            for (k, &i) in grounded.iter().enumerate() {
                let sp = mm.spans[pos[i]];
                let sn = mm.spans[wpg_neg[k]];
                p.push(wpg_similarity_graph(
                    &mut g,
                    mm.grounding,
                    sp.phrase_rows(),
                    sp.region_rows(),
                )?);
                q.push(wpg_similarity_graph(
                    &mut g,
                    mm.grounding,
                    sn.phrase_rows(),
                    sn.region_rows(),
                )?);
            }
            report.counts.wpg_pairs = grounded.len();
            parts.push(("wpg", wpg_loss_graph(&mut g, &p, &q)?));
        }

        if losses.itm {
            let rows: Vec<usize> = pos
                .iter()
                .chain(&itm_neg)
                .map(|&it| mm.spans[it].start)
                .collect();
            let cls = g.gather_rows(mm.hidden, &rows)?;
            let logits = model.itm_logits(&mut g, cls)?;
            let labels: Vec<usize> = (0..2 * n).map(|k| usize::from(k < n)).collect();
            report.counts.itm_pairs = 2 * n;
            parts.push(("itm", g.cross_entropy(logits, &labels)?));
        }

        if losses.mlm && !mlm_items.is_empty() {
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            for &(i, it) in &mlm_items {
                let view = &plan.mlm_masks[i].as_ref().expect("planned mask").1;
                let s = mm.spans[it];
                for (&pos, &orig) in view.positions.iter().zip(&view.originals) {
                    rows.push(s.start + pos);
                    targets.push(orig);
                }
            }
            let x = g.gather_rows(mm.hidden, &rows)?;
            let logits = model.mlm_logits(&mut g, x)?;
            report.counts.mlm_tokens = rows.len();
            parts.push(("mlm", g.cross_entropy(logits, &targets)?));
        }
        negatives = Some(neg);
    }

    if parts.is_empty() {
        return Err(TrainError::NoObjective);
    }
    let mut total = parts[0].1;
    for &(_, v) in &parts[1..] {
        total = g.add(total, v)?;
    }
    for &(name, v) in &parts {
        let x = Some(g.scalar(v).as_f64());
        match name {
            "mcr_v" => report.mcr_v = x,
            "mcr_s" => report.mcr_s = x,
            "vsc" => report.vsc = x,
            "wpg" => report.wpg = x,
            "itm" => report.itm = x,
            _ => report.mlm = x,
        }
    }
    report.total = g.scalar(total).as_f64();
    Ok(Forward {
        graph: g,
        total,
        report,
        negatives,
    })
}

use rand::Rng;
use serde::Serialize;

use crate::nn::{Graph, NnError, Tensor, Var};
use crate::scalar::Scalar;

use super::{hungarian_match, LossError};

/// Hinge margin of the grounding objective.
pub const WPG_MARGIN: f64 = 0.2;

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Order-invariant targets: slot `i` is trained towards `labels[perm[i]]`
/// where `perm` minimizes `Σ 1 − p_i(label_perm(i))`.
pub fn mcr_targets(probs: &[Vec<f64>], labels: &[usize]) -> Result<Vec<usize>, LossError> {
    let m = labels.len();
    if m == 0 {
        return Err(LossError::InvalidInput("no masked slots".into()));
    }
    if probs.len() != m {
        return Err(LossError::InvalidInput(format!(
            "{} distributions for {m} labels",
            probs.len()
        )));
    }
    for (i, p) in probs.iter().enumerate() {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 || p.iter().any(|&x| !(x >= 0.0)) {
            return Err(LossError::InvalidInput(format!(
                "slot {i} distribution sums to {s}"
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= p.len()) {
            return Err(LossError::InvalidInput(format!(
                "label {l} outside {} classes",
                p.len()
            )));
        }
    }
    let cost: Vec<Vec<f64>> = probs
        .iter()
        .map(|p| labels.iter().map(|&l| 1.0 - p[l]).collect())
        .collect();
    let a = hungarian_match(&cost)?;
    Ok(a.perm.iter().map(|&j| labels[j]).collect())
}

/// Masked concept recovery loss over explicit distributions.
pub fn mcr_loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64, LossError> {
    let targets = mcr_targets(probs, labels)?;
    let m = targets.len() as f64;
    Ok(probs
        .iter()
        .zip(&targets)
        .map(|(p, &t)| -p[t].ln())
        .sum::<f64>()
        / m)
}

/// MCR on the tape: `logits` rows are the masked slots; `sets` gives each
/// masked set as `(first row, labels)` so matching happens within a set.
pub fn mcr_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    sets: &[(usize, Vec<usize>)],
) -> Result<Var, LossError> {
    let values = g.value(logits);
    let mut targets = vec![usize::MAX; values.rows()];
    for (start, labels) in sets {
        let probs: Vec<Vec<f64>> = (0..labels.len())
            .map(|i| {
                softmax_row(
                    &values
                        .row(start + i)
                        .iter()
                        .map(|v| v.as_f64())
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        for (i, t) in mcr_targets(&probs, labels)?.into_iter().enumerate() {
            targets[start + i] = t;
        }
    }
    if targets.contains(&usize::MAX) {
        return Err(LossError::InvalidInput(
            "masked sets do not cover every logit row".into(),
        ));
    }
    Ok(g.cross_entropy(logits, &targets)?)
}

/// In-batch similarity `U[i][k] = ⟨image_i, text_k⟩` with both softmax views.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityBlock {
    pub u: Vec<Vec<f64>>,
    pub tau: f64,
    /// `v2s[i][k]`: probability of text `k` for image `i` (row softmax).
    pub v2s: Vec<Vec<f64>>,
    /// `s2v[j][k]`: probability of image `k` for text `j` (column softmax).
    pub s2v: Vec<Vec<f64>>,
}

impl SimilarityBlock {
    pub fn n(&self) -> usize {
        self.u.len()
    }
}

pub fn vsc_distributions(
    u: &[Vec<f64>],
    tau: f64,
    tau_min: f64,
) -> Result<SimilarityBlock, LossError> {
    let n = u.len();
    if n < 2 {
        return Err(LossError::InvalidInput(
            "contrastive loss needs at least 2 pairs".into(),
        ));
    }
    if u.iter().any(|r| r.len() != n) {
        return Err(LossError::InvalidInput(
            "similarity matrix is not square".into(),
        ));
    }
    if !(tau >= tau_min) || tau_min <= 0.0 {
        return Err(LossError::InvalidInput(format!(
            "temperature {tau} below floor {tau_min}"
        )));
    }
    let v2s = u
        .iter()
        .map(|r| softmax_row(&r.iter().map(|&x| x / tau).collect::<Vec<_>>()))
        .collect();
    let s2v = (0..n)
        .map(|j| softmax_row(&(0..n).map(|i| u[i][j] / tau).collect::<Vec<_>>()))
        .collect();
    Ok(SimilarityBlock {
        u: u.to_vec(),
        tau,
        v2s,
        s2v,
    })
}

/// Symmetric contrastive loss with diagonal positives.
pub fn vsc_loss(block: &SimilarityBlock) -> f64 {
    let n = block.n() as f64;
    let a: f64 = block.v2s.iter().enumerate().map(|(i, r)| r[i].ln()).sum();
    let b: f64 = block.s2v.iter().enumerate().map(|(j, r)| r[j].ln()).sum();
    -(a + b) / (2.0 * n)
}

/// Contrastive loss on the tape over unit-norm `[n, d]` image and text globals.
pub fn vsc_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    images: Var,
    texts: Var,
    tau: Var,
    tau_min: f64,
) -> Result<(Var, SimilarityBlock), LossError> {
    let u = g.matmul_nt(images, texts)?;
    let block = vsc_distributions(
        &g.value(u)
            .to_rows()
            .iter()
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect::<Vec<_>>(),
        g.scalar(tau).as_f64(),
        T::lit(tau_min).as_f64(),
    )?;
    let n = block.n();
    let logits = g.div_scalar(u, tau)?;
    let diag: Vec<usize> = (0..n).collect();
    let a = g.cross_entropy(logits, &diag)?;
    let lt = g.transpose(logits)?;
    let b = g.cross_entropy(lt, &diag)?;
    let s = g.add(a, b)?;
    Ok((g.scale(s, T::lit(0.5)), block))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean over phrases of the best region cosine, with the argmax region per phrase.
/// Zero region vectors never win the maximum.
pub fn wpg_similarity(
    phrases: &[Vec<f64>],
    regions: &[Vec<f64>],
) -> Result<(f64, Vec<usize>), LossError> {
    if phrases.is_empty() {
        return Err(LossError::InvalidInput("no phrases".into()));
    }
    let valid: Vec<bool> = regions
        .iter()
        .map(|r| r.iter().any(|&x| x != 0.0))
        .collect();
    if !valid.contains(&true) {
        return Err(LossError::InvalidInput("no non-zero regions".into()));
    }
    let mut total = 0.0;
    let mut arg = Vec::with_capacity(phrases.len());
    for p in phrases {
        let (j, s) = regions
            .iter()
            .enumerate()
            .filter(|&(j, _)| valid[j])
            .map(|(j, r)| (j, dot(p, r)))
            .fold((usize::MAX, f64::NEG_INFINITY), |b, c| {
                if c.1 > b.1 {
                    c
                } else {
                    b
                }
            });
        total += s;
        arg.push(j);
    }
    Ok((total / phrases.len() as f64, arg))
}

pub fn wpg_hinge(positive: f64, negative: f64) -> f64 {
    (WPG_MARGIN + negative - positive).max(0.0)
}

/// `S^wpg` on the tape from grounding rows of one multi-modal item.
pub fn wpg_similarity_graph<T: Scalar>(
    g: &mut Graph<T>,
    grounding: Var,
    phrase_rows: std::ops::Range<usize>,
    region_rows: std::ops::Range<usize>,
) -> Result<Var, LossError> {
    if phrase_rows.is_empty() || region_rows.is_empty() {
        return Err(LossError::InvalidInput(
            "grounding needs phrases and regions".into(),
        ));
    }
    let valid: Vec<bool> = {
        let v = g.value(grounding);
        region_rows
            .clone()
            .map(|r| v.row(r).iter().any(|&x| x != T::zero()))
            .collect()
    };
    let p = g.gather_rows(grounding, &phrase_rows.collect::<Vec<_>>())?;
    let r = g.gather_rows(grounding, &region_rows.collect::<Vec<_>>())?;
    let s = g.matmul_nt(p, r)?;
    let best = g.row_max(s, Some(&valid))?;
    Ok(g.mean(best))
}

/// Mean hinge over paired positive/negative `S^wpg` scalars.
pub fn wpg_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    positives: &[Var],
    negatives: &[Var],
) -> Result<Var, LossError> {
    if positives.is_empty() || positives.len() != negatives.len() {
        return Err(LossError::InvalidInput(
            "grounding loss needs matched positive/negative lists".into(),
        ));
    }
    let pos = g.concat_rows(positives)?;
    let neg = g.concat_rows(negatives)?;
    let diff = g.sub(neg, pos)?;
    let shifted = g.add_scalar(diff, T::lit(WPG_MARGIN));
    let h = g.relu(shifted);
    Ok(g.mean(h))
}

/// Negative indices drawn from the similarity distributions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Negatives {
    /// For text `i`, an image drawn from `p^s2v(S_i, ·)`.
    pub image_for_text: Vec<usize>,
    /// For image `i`, a text drawn from `p^v2s(V_i, ·)`.
    pub text_for_image: Vec<usize>,
}

fn draw_excluding<R: Rng + ?Sized>(p: &[f64], skip: usize, rng: &mut R) -> usize {
    let mass: f64 = p
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != skip)
        .map(|(_, &x)| x)
        .sum();
    let others = p.len() - 1;
    if !(mass > 0.0) || !mass.is_finite() {
        let k = rng.random_range(0..others);
        return if k >= skip { k + 1 } else { k };
    }
    let target = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    let mut last = None;
    for (k, &x) in p.iter().enumerate() {
        if k == skip || x <= 0.0 {
            continue;
        }
        acc += x;
        last = Some(k);
        if target < acc {
            return k;
        }
    }
    last.expect("positive mass outside the diagonal")
}

/// Hard negatives for every pair, diagonal excluded and renormalized.
pub fn sample_hard_negatives<R: Rng + ?Sized>(block: &SimilarityBlock, rng: &mut R) -> Negatives {
    let n = block.n();
    let image_for_text = (0..n)
        .map(|i| draw_excluding(&block.s2v[i], i, rng))
        .collect();
    let text_for_image = (0..n)
        .map(|i| draw_excluding(&block.v2s[i], i, rng))
        .collect();
    Negatives {
        image_for_text,
        text_for_image,
    }
}

/// Uniform in-batch negatives (used when no similarity is available).
pub fn sample_uniform_negatives<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Negatives {
    let uniform = vec![1.0; n];
    let image_for_text = (0..n).map(|i| draw_excluding(&uniform, i, rng)).collect();
    let text_for_image = (0..n).map(|i| draw_excluding(&uniform, i, rng)).collect();
    Negatives {
        image_for_text,
        text_for_image,
    }
}

/// Mean cross entropy of explicit class distributions.
pub fn cross_entropy_values(probs: &[Vec<f64>], targets: &[usize]) -> Result<f64, LossError> {
    if probs.is_empty() || probs.len() != targets.len() {
        return Err(LossError::InvalidInput("empty or mismatched batch".into()));
    }
    Ok(probs
        .iter()
        .zip(targets)
        .map(|(p, &t)| -p[t].ln())
        .sum::<f64>()
        / probs.len() as f64)
}

/// Image-text matching loss from `p(match)` and labels.
pub fn itm_loss(p_match: &[f64], matched: &[bool]) -> Result<f64, LossError> {
    let probs: Vec<Vec<f64>> = p_match.iter().map(|&p| vec![1.0 - p, p]).collect();
    let targets: Vec<usize> = matched.iter().map(|&m| m as usize).collect();
    cross_entropy_values(&probs, &targets)
}

/// Class-1 probability of each row of two-way logits.
pub fn match_probabilities<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let r = logits.row(i);
            let (a, b) = (r[0].as_f64(), r[1].as_f64());
            1.0 / (1.0 + (a - b).exp())
        })
        .collect()
}

impl From<NnError> for LossError {
    fn from(e: NnError) -> Self {
        LossError::Nn(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mcr_certain_slot_has_zero_loss() {
        assert_eq!(mcr_loss(&[vec![0.0, 1.0, 0.0]], &[1]).unwrap(), 0.0);
    }

    #[test]
    fn mcr_swapped_labels_are_matched() {
        let probs = vec![vec![0.1, 0.9], vec![0.8, 0.2]];
        let a = mcr_loss(&probs, &[0, 1]).unwrap();
        let b = mcr_loss(&probs, &[1, 0]).unwrap();
        assert_eq!(a, b);
        assert!((a - (-(0.9f64.ln() + 0.8f64.ln()) / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn mcr_uniform_is_ln_v() {
        let v = 7;
        let probs = vec![vec![1.0 / v as f64; v]; 3];
        let l = mcr_loss(&probs, &[0, 4, 4]).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mcr_rejects_unnormalized() {
        assert!(mcr_loss(&[vec![0.5, 0.4]], &[0]).is_err());
        assert!(mcr_loss(&[], &[]).is_err());
    }

    #[test]
    fn vsc_worked_example() {
        let b = vsc_distributions(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0, 0.01).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((vsc_loss(&b) - want).abs() < 1e-12);
        assert!((vsc_loss(&b) - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn vsc_constant_matrix_is_ln_n() {
        let b = vsc_distributions(&vec![vec![0.3; 5]; 5], 0.07, 0.01).unwrap();
        assert!((vsc_loss(&b) - 5f64.ln()).abs() < 1e-12);
        assert!(vsc_distributions(&[vec![1.0]], 1.0, 0.01).is_err());
        assert!(vsc_distributions(&vec![vec![0.0; 2]; 2], 0.001, 0.01).is_err());
    }

    #[test]
    fn wpg_examples() {
        let e = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            v
        };
        assert_eq!(
            wpg_similarity(&[e(0)], &[e(1), e(0)]).unwrap(),
            (1.0, vec![1])
        );
        assert_eq!(wpg_similarity(&[e(0)], &[e(1), e(2)]).unwrap().0, 0.0);
        let p = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = vec![vec![0.8, 0.6], vec![0.6, -0.8]];
        let (s, _) = wpg_similarity(&p, &r).unwrap();
        assert!((s - 0.7).abs() < 1e-12);
        assert!(wpg_similarity(&[], &r).is_err());
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(wpg_hinge(0.9, 0.5), 0.0);
        assert!((wpg_hinge(0.6, 0.5) - 0.1).abs() < 1e-12);
        assert!((wpg_hinge(0.4, 0.4) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn two_pair_negative_is_the_other() {
        let b = vsc_distributions(&[vec![1.0, 0.2], vec![0.1, 0.9]], 0.07, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let n = sample_hard_negatives(&b, &mut rng);
            assert_eq!(n.image_for_text, vec![1, 0]);
            assert_eq!(n.text_for_image, vec![1, 0]);
        }
    }

    #[test]
    fn itm_examples() {
        assert_eq!(itm_loss(&[1.0, 0.0], &[true, false]).unwrap(), 0.0);
        assert!(
            (itm_loss(&[0.5; 4], &[true, false, true, false]).unwrap() - 2f64.ln()).abs() < 1e-15
        );
        assert!((itm_loss(&[0.9, 0.1], &[true, false]).unwrap() - 0.1054).abs() < 1e-4);
    }

    #[test]
    fn mlm_two_token_example() {
        let probs = vec![vec![0.5, 0.5], vec![0.25, 0.75]];
        let l = cross_entropy_values(&probs, &[0, 0]).unwrap();
        assert!((l - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
        assert!((l - 1.0397).abs() < 1e-4);
    }
}

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::encoders::Model;
use crate::scalar::Scalar;
use crate::trainer::PreparedPair;

use super::{global_embeddings, match_scores, EvalError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankDepths {
    /// Captions reranked per image query.
    pub kc: usize,
    /// Images reranked per caption query.
    pub ki: usize,
}

impl Default for RerankDepths {
    fn default() -> Self {
        Self { kc: 16, ki: 16 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recalls {
    pub fn sum(&self) -> f64 {
        self.r1 + self.r5 + self.r10
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Image query, caption candidates.
    pub caption: Recalls,
    /// Caption query, image candidates.
    pub image: Recalls,
    pub rsum: f64,
    /// RSUM of the uni-modal ranking alone (absent for the merged model).
    pub coarse_rsum: Option<f64>,
    pub candidates: usize,
    pub kc: usize,
    pub ki: usize,
    /// Every candidate was scored by the cross encoder.
    pub exhaustive: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Candidate ids sorted by descending score, ties by ascending id.
pub fn exhaustive_ranking(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids
}

/// Cosine of two vectors; zero when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

/// Cosine ranking of `index` rows against `query`.
pub fn coarse_rank(query: &[f64], index: &[Vec<f64>]) -> Result<Vec<usize>, EvalError> {
    if index.is_empty() {
        return Err(EvalError::EmptyIndex);
    }
    let scores: Vec<f64> = index.iter().map(|c| cosine(query, c)).collect();
    Ok(exhaustive_ranking(&scores))
}

/// Reorders the first `k` entries of `ranked` by `score` (descending, ties by
/// id); the tail keeps its order.
pub fn rerank(ranked: &[usize], k: usize, mut score: impl FnMut(usize) -> f64) -> Vec<usize> {
    let k = k.min(ranked.len());
    let mut head: Vec<(usize, f64)> = ranked[..k].iter().map(|&c| (c, score(c))).collect();
    head.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    head.into_iter()
        .map(|(c, _)| c)
        .chain(ranked[k..].iter().copied())
        .collect()
}

/// Recalls when the correct candidate of query `q` is `q` itself.
pub fn recalls_from_ranks(ranks: &[Vec<usize>]) -> Recalls {
    let n = ranks.len().max(1) as f64;
    let at = |k: usize| {
        ranks
            .iter()
            .enumerate()
            .filter(|(q, r)| r.iter().take(k).any(|c| c == q))
            .count() as f64
            / n
    };
    Recalls {
        r1: at(1),
        r5: at(5),
        r10: at(10),
    }
}

fn rsum(c: &Recalls, i: &Recalls) -> f64 {
    100.0 * (c.sum() + i.sum())
}

/// Two-way retrieval over an eval set where pair `q` is the only match of
/// query `q`. The merged model scores every candidate with the cross encoder.
pub fn retrieval_eval<T: Scalar>(
    model: &Model<T>,
    pairs: &[PreparedPair],
    depths: RerankDepths,
) -> Result<RetrievalReport, EvalError> {
    let n = pairs.len();
    if n == 0 {
        return Err(EvalError::EmptyIndex);
    }
    if model.config.merged {
        let items: Vec<(usize, usize)> = (0..n).flat_map(|t| (0..n).map(move |i| (t, i))).collect();
        let p = match_scores(model, pairs, &items)?;
        let caption: Vec<Vec<usize>> = (0..n)
            .map(|i| exhaustive_ranking(&(0..n).map(|t| p[t * n + i]).collect::<Vec<_>>()))
            .collect();
        let image: Vec<Vec<usize>> = (0..n)
            .map(|t| exhaustive_ranking(&p[t * n..(t + 1) * n]))
            .collect();
        let (c, i) = (recalls_from_ranks(&caption), recalls_from_ranks(&image));
        return Ok(RetrievalReport {
            caption: c,
            image: i,
            rsum: rsum(&c, &i),
            coarse_rsum: None,
            candidates: n,
            kc: n,
            ki: n,
            exhaustive: true,
        });
    }

    let (texts, images) = global_embeddings(model, pairs)?;
    let coarse_caption: Vec<Vec<usize>> = images
        .iter()
        .map(|q| coarse_rank(q, &texts))
        .collect::<Result<_, _>>()?;
    let coarse_image: Vec<Vec<usize>> = texts
        .iter()
        .map(|q| coarse_rank(q, &images))
        .collect::<Result<_, _>>()?;

    let mut items = Vec::new();
    for (i, r) in coarse_caption.iter().enumerate() {
        items.extend(r.iter().take(depths.kc).map(|&t| (t, i)));
    }
    for (t, r) in coarse_image.iter().enumerate() {
        items.extend(r.iter().take(depths.ki).map(|&i| (t, i)));
    }
    items.sort_unstable();
    items.dedup();
    let scores: HashMap<(usize, usize), f64> = items
        .iter()
        .copied()
        .zip(match_scores(model, pairs, &items)?)
        .collect();

    let caption: Vec<Vec<usize>> = coarse_caption
        .iter()
        .enumerate()
        .map(|(i, r)| rerank(r, depths.kc, |t| scores[&(t, i)]))
        .collect();
    let image: Vec<Vec<usize>> = coarse_image
        .iter()
        .enumerate()
        .map(|(t, r)| rerank(r, depths.ki, |i| scores[&(t, i)]))
        .collect();
    let (c, i) = (recalls_from_ranks(&caption), recalls_from_ranks(&image));
    let coarse = rsum(
        &recalls_from_ranks(&coarse_caption),
        &recalls_from_ranks(&coarse_image),
    );
    Ok(RetrievalReport {
        caption: c,
        image: i,
        rsum: rsum(&c, &i),
        coarse_rsum: Some(coarse),
        candidates: n,
        kc: depths.kc.min(n),
        ki: depths.ki.min(n),
        exhaustive: depths.kc >= n && depths.ki >= n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_id() {
        assert_eq!(exhaustive_ranking(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn rerank_keeps_the_tail() {
        let r = rerank(&[4, 2, 0, 1, 3], 3, |c| c as f64);
        assert_eq!(r, vec![4, 2, 0, 1, 3]);
        let r = rerank(&[0, 2, 4, 1, 3], 3, |c| c as f64);
        assert_eq!(r, vec![4, 2, 0, 1, 3]);
        assert_eq!(rerank(&[3, 1, 2], 1, |c| -(c as f64)), vec![3, 1, 2]);
    }

    #[test]
    fn oracle_scores_give_full_rsum() {
        let ranks: Vec<Vec<usize>> = (0..20)
            .map(|q| {
                exhaustive_ranking(
                    &(0..20)
                        .map(|c| f64::from(u8::from(c == q)))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let r = recalls_from_ranks(&ranks);
        assert_eq!(rsum(&r, &r), 600.0);
    }

    #[test]
    fn empty_index_is_an_error() {
        assert!(matches!(
            coarse_rank(&[1.0], &[]),
            Err(EvalError::EmptyIndex)
        ));
    }
}

//! Comparison methods: per-task retraining, linear soup of two experts and
//! MMR re-ranking over the frozen backbone's scores.

use serde::{Deserialize, Serialize};

use crate::adapterfarm::{tune_adapter, TuneConfig, TuneReport};
use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::objectives::{Labels, TaskWeights};
use crate::recmodel::{AdapterTensor, Backbone};

/// Linear-scalarization retraining for one task, run on demand.
pub fn retrain_task(
    w: &TaskWeights,
    backbone: &Backbone,
    ds: &InteractionDataset,
    cfg: &TuneConfig,
    seed: u64,
) -> Result<(AdapterTensor, TuneReport)> {
    tune_adapter(w, backbone, ds, cfg, seed)
}

/// An accuracy expert tuned at `(1, 0)` and a diversity expert at `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoupEndpoints {
    pub accuracy: AdapterTensor,
    pub diversity: AdapterTensor,
}

impl SoupEndpoints {
    pub fn new(accuracy: AdapterTensor, diversity: AdapterTensor) -> Result<Self> {
        if accuracy.manifest != diversity.manifest {
            return Err(Error::Shape("soup endpoints have different manifests".into()));
        }
        if !accuracy.values.iter().chain(&diversity.values).all(|v| v.is_finite()) {
            return Err(Error::Numeric("soup endpoint has non-finite parameters".into()));
        }
        Ok(Self { accuracy, diversity })
    }

    pub fn train(backbone: &Backbone, ds: &InteractionDataset, cfg: &TuneConfig, seed: u64) -> Result<Self> {
        let (a, _) = retrain_task(&TaskWeights::acc_div(1.0), backbone, ds, cfg, seed)?;
        let (d, _) = retrain_task(&TaskWeights::acc_div(0.0), backbone, ds, cfg, seed)?;
        Self::new(a, d)
    }
}

/// `θ = w¹·θ_acc + w²·θ_div`, elementwise. Extra weight components such as
/// fairness are ignored.
pub fn soup_merge(ends: &SoupEndpoints, w: &TaskWeights) -> Result<AdapterTensor> {
    if ends.accuracy.manifest != ends.diversity.manifest || ends.accuracy.values.len() != ends.diversity.values.len() {
        return Err(Error::Shape("soup endpoints have different manifests".into()));
    }
    let (a, d) = (w.accuracy() as f32, w.diversity() as f32);
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&d) {
        return Err(Error::Argument(format!("soup weights {:?} outside [0, 1]", w.0)));
    }
    let values = ends
        .accuracy
        .values
        .iter()
        .zip(&ends.diversity.values)
        .map(|(x, y)| a * x + d * y)
        .collect();
    AdapterTensor::new(values, ends.accuracy.manifest.clone())
}

fn jaccard(y: &Labels, a: usize, b: usize) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for l in 0..y.ncols() {
        let (p, q) = (y[[a, l]] != 0.0, y[[b, l]] != 0.0);
        inter += (p && q) as u8 as f64;
        union += (p || q) as u8 as f64;
    }
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy maximal-marginal-relevance selection of `k` candidate positions.
///
/// Relevance is min-max normalized first; similarity is the Jaccard index of
/// category sets. Ties go to the more relevant candidate, then the lower
/// position.
pub fn mmr_rerank(scores: &[f32], y: &Labels, lambda: f64, k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if y.nrows() != n {
        return Err(Error::Shape(format!("{n} scores but {} label rows", y.nrows())));
    }
    if k > n {
        return Err(Error::Argument(format!("cannot pick {k} of {n} candidates")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!("λ {lambda} outside [0, 1]")));
    }
    let (lo, hi) = scores
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &s| (l.min(s), h.max(s)));
    let rel: Vec<f64> = scores
        .iter()
        .map(|&s| if hi > lo { ((s - lo) / (hi - lo)) as f64 } else { 0.0 })
        .collect();
    // relevance order doubles as the tie-break order
    let mut by_rel: Vec<usize> = (0..n).collect();
    by_rel.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));

    let mut picked = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut max_sim = vec![0.0f64; n];
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for &i in &by_rel {
            if taken[i] {
                continue;
            }
            let v = lambda * rel[i] - (1.0 - lambda) * max_sim[i];
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        let (i, _) = best.expect("k ≤ n leaves a candidate");
        taken[i] = true;
        picked.push(i);
        for j in 0..n {
            if !taken[j] {
                max_sim[j] = max_sim[j].max(jaccard(y, i, j));
            }
        }
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::TensorSpec;
    use ndarray::array;

    fn tensor(v: Vec<f32>) -> AdapterTensor {
        let manifest = vec![TensorSpec {
            name: "down.weight".into(),
            shape: vec![v.len()],
        }];
        AdapterTensor::new(v, manifest).unwrap()
    }

    #[test]
    fn soup_endpoints_and_midpoint() {
        let ends = SoupEndpoints::new(tensor(vec![1.0, 2.0, -4.0]), tensor(vec![3.0, 0.0, 4.0])).unwrap();
        assert_eq!(soup_merge(&ends, &TaskWeights::acc_div(1.0)).unwrap(), ends.accuracy);
        assert_eq!(soup_merge(&ends, &TaskWeights::acc_div(0.5)).unwrap().values, vec![2.0, 1.0, 0.0]);
        let same = SoupEndpoints::new(tensor(vec![0.25, -1.5]), tensor(vec![0.25, -1.5])).unwrap();
        assert_eq!(soup_merge(&same, &TaskWeights::acc_div(0.75)).unwrap().values, vec![0.25, -1.5]);
    }

    #[test]
    fn soup_rejects_mismatched_manifests() {
        let a = tensor(vec![1.0, 2.0]);
        let mut b = tensor(vec![1.0, 2.0]);
        b.manifest[0].name = "up.weight".into();
        assert!(matches!(SoupEndpoints::new(a.clone(), b.clone()), Err(Error::Shape(_))));
        let bad = SoupEndpoints {
            accuracy: a,
            diversity: b,
        };
        assert!(matches!(soup_merge(&bad, &TaskWeights::acc_div(0.5)), Err(Error::Shape(_))));
    }

    #[test]
    fn mmr_lambda_one_is_relevance_order() {
        let y = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 1.0]];
        assert_eq!(mmr_rerank(&[0.1, 0.9, 0.5, 0.7], &y, 1.0, 4).unwrap(), vec![1, 3, 2, 0]);
    }

    #[test]
    fn mmr_prefers_new_category_at_lambda_zero() {
        let y = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        assert_eq!(mmr_rerank(&[0.9, 0.89, 0.1], &y, 0.0, 2).unwrap(), vec![0, 2]);
    }

    #[test]
    fn mmr_single_category_keeps_relevance_order() {
        let y = array![[1.0], [1.0], [1.0], [1.0]];
        for lambda in [0.0, 0.3, 0.7, 1.0] {
            assert_eq!(mmr_rerank(&[0.2, 0.8, 0.5, 0.1], &y, lambda, 4).unwrap(), vec![1, 2, 0, 3]);
        }
    }

    #[test]
    fn mmr_errors() {
        let y = array![[1.0], [1.0]];
        assert!(matches!(mmr_rerank(&[0.1, 0.2], &y, 0.5, 3), Err(Error::Argument(_))));
        assert!(matches!(mmr_rerank(&[0.1, 0.2], &y, 1.5, 1), Err(Error::Argument(_))));
    }
}

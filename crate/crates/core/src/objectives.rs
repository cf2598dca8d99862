//! Training objectives over one candidate list: BPR accuracy loss, the
//! soft-rank smoothed α-DCG diversity loss and their preference-weighted sum.
//!
//! Everything here is `f64` and returns analytic gradients with respect to
//! the candidate scores so callers can feed them into any optimizer.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Category labels for a candidate list, `n × |M|`, entries in `{0, 1}`.
pub type Labels = Array2<f64>;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(x)` without overflow.
#[inline]
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Preference weights over utilities: accuracy, diversity and optionally fairness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskWeights(pub Vec<f64>);

impl TaskWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.len() < 2 || w.len() > 3 {
            return Err(Error::Argument(format!("expected 2 or 3 preference weights, got {}", w.len())));
        }
        if let Some(bad) = w.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Argument(format!("preference weight {bad} outside [0, 1]")));
        }
        Ok(Self(w))
    }

    pub fn acc_div(w_acc: f64) -> Self {
        Self(vec![w_acc, 1.0 - w_acc])
    }

    pub fn accuracy(&self) -> f64 {
        self.0[0]
    }

    pub fn diversity(&self) -> f64 {
        self.0[1]
    }

    pub fn fairness(&self) -> Option<f64> {
        self.0.get(2).copied()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Mean over negatives of `-ln σ(pos - neg)`.
pub fn bpr_loss(pos: f64, negs: &[f64]) -> Result<f64> {
    Ok(bpr_loss_grad(pos, negs)?.0)
}

/// BPR loss with gradients `(loss, ∂/∂pos, ∂/∂negs)`.
pub fn bpr_loss_grad(pos: f64, negs: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
    if negs.is_empty() {
        return Err(Error::Argument("BPR loss needs at least one negative".into()));
    }
    let m = negs.len() as f64;
    let mut loss = 0.0;
    let mut dpos = 0.0;
    let mut dnegs = Vec::with_capacity(negs.len());
    for &n in negs {
        let x = pos - n;
        loss += neg_log_sigmoid(x);
        // d/dx[-ln σ(x)] = -(1 - σ(x)) = -σ(-x)
        let d = sigmoid(-x) / m;
        dpos -= d;
        dnegs.push(d);
    }
    Ok((loss / m, dpos, dnegs))
}

fn check_finite(s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Argument("score vector is empty".into()));
    }
    if let Some(bad) = s.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {bad}")));
    }
    Ok(())
}

/// Pairwise `σ((s_j - s_k)/T)`, row `k`, column `j`, zero diagonal.
fn pairwise(s: &[f64], temperature: f64) -> Array2<f64> {
    let n = s.len();
    Array2::from_shape_fn((n, n), |(k, j)| {
        if k == j {
            0.0
        } else {
            sigmoid((s[j] - s[k]) / temperature)
        }
    })
}

/// `Rank_k = 1 + Σ_{j≠k} σ((s_j − s_k)/T)`.
pub fn soft_rank(s: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_finite(s)?;
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let p = pairwise(s, temperature);
    Ok(p.rows().into_iter().map(|r| 1.0 + r.sum()).collect())
}

fn check_labels(s: &[f64], y: &Labels) -> Result<()> {
    if y.nrows() != s.len() {
        return Err(Error::Argument(format!("{} scores but {} label rows", s.len(), y.nrows())));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Argument("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// `C_{k,l} = Σ_{j≠k} y_{j,l} σ((s_j − s_k)/T)`: soft count of earlier coverage.
pub fn prior_coverage(s: &[f64], y: &Labels, temperature: f64) -> Result<Array2<f64>> {
    check_finite(s)?;
    check_labels(s, y)?;
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    Ok(pairwise(s, temperature).dot(y))
}

/// How repeated coverage discounts the gain of category `l` at item `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GainForm {
    /// `(1 − α)^{C_{k,l}}`, the standard α-DCG gain.
    #[default]
    Exponent,
    /// `(1 − α)·C_{k,l}`, the literal product form; kept for comparison only.
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversityConfig {
    pub alpha: f64,
    pub temperature: f64,
    #[serde(default)]
    pub gain: GainForm,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            temperature: 1.0,
            gain: GainForm::Exponent,
        }
    }
}

impl DiversityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    fn gain(&self, c: f64) -> (f64, f64) {
        let keep = 1.0 - self.alpha;
        match self.gain {
            GainForm::Exponent => {
                let g = keep.powf(c);
                (g, g * keep.ln())
            }
            GainForm::Product => (keep * c, keep),
        }
    }
}

/// Smoothed α-DCG loss `−Σ_k Σ_l y_{k,l}·gain(C_{k,l}) / log₂(1 + Rank_k)`.
pub fn diversity_loss(s: &[f64], y: &Labels, cfg: &DiversityConfig) -> Result<f64> {
    Ok(diversity_loss_grad(s, y, cfg)?.0)
}

/// Diversity loss and its gradient with respect to the scores.
pub fn diversity_loss_grad(s: &[f64], y: &Labels, cfg: &DiversityConfig) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    check_finite(s)?;
    check_labels(s, y)?;
    let n = s.len();
    let t = cfg.temperature;
    let sig = pairwise(s, t);
    let cov = sig.dot(y);
    let ln2 = std::f64::consts::LN_2;

    let mut loss = 0.0;
    // a[k][j] = ∂loss/∂σ_kj
    let mut d_rank = vec![0.0; n];
    let mut d_cov = Array2::<f64>::zeros(y.dim());
    for k in 0..n {
        let rank = 1.0 + sig.row(k).sum();
        let denom = (1.0 + rank).log2();
        let mut num = 0.0;
        for l in 0..y.ncols() {
            if y[[k, l]] == 0.0 {
                continue;
            }
            let (g, dg) = cfg.gain(cov[[k, l]]);
            num += g;
            d_cov[[k, l]] = -dg / denom;
        }
        loss -= num / denom;
        // ∂(−num/log₂(1+R))/∂R = num / (log₂(1+R)² · (1+R) · ln 2)
        d_rank[k] = num / (denom * denom * (1.0 + rank) * ln2);
    }
    // ∂loss/∂σ_kj = d_rank[k] + Σ_l d_cov[k,l]·y[j,l]
    let a = d_cov.dot(&y.t());
    let mut grad = vec![0.0; n];
    for k in 0..n {
        for j in 0..n {
            if j == k {
                continue;
            }
            let sk = sig[[k, j]];
            let d = (d_rank[k] + a[[k, j]]) * sk * (1.0 - sk) / t;
            grad[j] += d;
            grad[k] -= d;
        }
    }
    Ok((loss, grad))
}

/// `w¹·ℓ_acc + w²·ℓ_div (+ w³·ℓ_fair)`.
pub fn scalarized_loss(w: &TaskWeights, acc: f64, div: f64, fair: Option<f64>) -> f64 {
    let mut total = w.accuracy() * acc + w.diversity() * div;
    if let (Some(wf), Some(f)) = (w.fairness(), fair) {
        total += wf * f;
    }
    total
}

/// Differentiable NDCG of the target at index `target`: `1/log₂(1 + Rank_target)`.
pub fn soft_target_ndcg(s: &[f64], target: usize, temperature: f64) -> Result<(f64, Vec<f64>)> {
    check_finite(s)?;
    let n = s.len();
    let st = s[target];
    let mut rank = 1.0;
    let mut dsig = vec![0.0; n];
    for j in 0..n {
        if j == target {
            continue;
        }
        let sg = sigmoid((s[j] - st) / temperature);
        rank += sg;
        dsig[j] = sg * (1.0 - sg) / temperature;
    }
    let ln2 = std::f64::consts::LN_2;
    let lg = (1.0 + rank).log2();
    let value = 1.0 / lg;
    let d_rank = -1.0 / (lg * lg * (1.0 + rank) * ln2);
    let mut grad = vec![0.0; n];
    for j in 0..n {
        if j == target {
            continue;
        }
        grad[j] += d_rank * dsig[j];
        grad[target] -= d_rank * dsig[j];
    }
    Ok((value, grad))
}

/// Squared gap between the mean of `values` over two groups, with the
/// gradient w.r.t. each value. Lists outside both groups are ignored; a
/// batch missing either group contributes zero.
pub fn group_gap_loss(values: &[f64], groups: &[Option<bool>]) -> (f64, Vec<f64>) {
    let (mut sa, mut na, mut sb, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (v, g) in values.iter().zip(groups) {
        match g {
            Some(true) => {
                sa += v;
                na += 1;
            }
            Some(false) => {
                sb += v;
                nb += 1;
            }
            None => {}
        }
    }
    let mut grad = vec![0.0; values.len()];
    if na == 0 || nb == 0 {
        return (0.0, grad);
    }
    let gap = sa / na as f64 - sb / nb as f64;
    for (d, g) in grad.iter_mut().zip(groups) {
        *d = match g {
            Some(true) => 2.0 * gap / na as f64,
            Some(false) => -2.0 * gap / nb as f64,
            None => 0.0,
        };
    }
    (gap * gap, grad)
}

//! Ranking metrics, hypervolume, correlations, the fairness gap, the
//! 11-point sweep protocol and the latency harness.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{EvalSplit, InteractionDataset};
use crate::error::{Error, Result};
use crate::objectives::{Labels, TaskWeights};
use crate::adapterfarm::TuneConfig;
use crate::baselines::{mmr_rerank, retrain_task, soup_merge, SoupEndpoints};
use crate::paramgen::{Generator, Hypernet};
use crate::recmodel::{eval_windows, Adapter, Backbone};

/// Candidate positions ordered by descending score; ties go to the smaller
/// item index.
pub fn rank_by_scores(candidates: &[u32], scores: &[f32]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(candidates[a].cmp(&candidates[b]))
    });
    order.into_iter().map(|i| candidates[i]).collect()
}

fn discount(rank: usize) -> f64 {
    1.0 / (1.0 + rank as f64).log2()
}

/// Single-target NDCG: `1/log2(1+rank)` when the target sits in the top `k`.
pub fn ndcg_at_k(ranked: &[u32], target: u32, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("k must be positive".into()));
    }
    Ok(ranked
        .iter()
        .take(k)
        .position(|&i| i == target)
        .map_or(0.0, |p| discount(p + 1)))
}

/// Hard α-DCG of the first `k` rows of `order` (indices into `y`).
pub fn alpha_dcg(y: &Labels, order: &[usize], alpha: f64, k: usize) -> f64 {
    let mut seen = vec![0i32; y.ncols()];
    let mut total = 0.0;
    for (r, &i) in order.iter().take(k).enumerate() {
        let mut gain = 0.0;
        for (l, c) in seen.iter_mut().enumerate() {
            let yl = y[[i, l]];
            if yl != 0.0 {
                gain += yl * (1.0 - alpha).powi(*c);
                *c += 1;
            }
        }
        total += gain * discount(r + 1);
    }
    total
}

/// Pools at most this large get an exact ideal by exhaustive search.
const EXACT_IDEAL_MAX: usize = 6;

/// Ideal α-DCG@k over all rows of `y`: exhaustive for small pools, greedy
/// selection otherwise.
pub fn ideal_alpha_dcg(y: &Labels, alpha: f64, k: usize) -> f64 {
    let n = y.nrows();
    if n <= EXACT_IDEAL_MAX {
        let mut best = 0.0f64;
        let mut perm: Vec<usize> = (0..n).collect();
        permute(&mut perm, 0, &mut |p| best = best.max(alpha_dcg(y, p, alpha, k)));
        return best;
    }
    alpha_dcg(y, &greedy_ideal_order(y, alpha, k), alpha, k)
}

fn permute(p: &mut Vec<usize>, start: usize, f: &mut impl FnMut(&[usize])) {
    if start == p.len() {
        f(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permute(p, start + 1, f);
        p.swap(start, i);
    }
}

/// Greedy marginal-gain ordering of the first `k` positions.
pub fn greedy_ideal_order(y: &Labels, alpha: f64, k: usize) -> Vec<usize> {
    let n = y.nrows();
    let mut seen = vec![0i32; y.ncols()];
    let mut used = vec![false; n];
    let mut order = Vec::with_capacity(k.min(n));
    for _ in 0..k.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !used[i]) {
            let g: f64 = (0..y.ncols())
                .map(|l| y[[i, l]] * (1.0 - alpha).powi(seen[l]))
                .sum();
            if best.map_or(true, |(_, bg)| g > bg) {
                best = Some((i, g));
            }
        }
        let (i, _) = best.expect("pool not exhausted");
        used[i] = true;
        for (l, c) in seen.iter_mut().enumerate() {
            if y[[i, l]] != 0.0 {
                *c += 1;
            }
        }
        order.push(i);
    }
    order
}

/// α-NDCG@k of `order` (row indices into the candidate pool `y`), clipped to [0, 1].
pub fn alpha_ndcg_at_k(y: &Labels, order: &[usize], alpha: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("k must be positive".into()));
    }
    if let Some(&bad) = order.iter().find(|&&i| i >= y.nrows()) {
        return Err(Error::Shape(format!("ranked index {bad} outside a pool of {}", y.nrows())));
    }
    let ideal = ideal_alpha_dcg(y, alpha, k);
    if ideal <= 0.0 {
        return Ok(0.0);
    }
    Ok((alpha_dcg(y, order, alpha, k) / ideal).clamp(0.0, 1.0))
}

/// `Σ_j w_j · U_j`
pub fn weighted_reward(w: &TaskWeights, utilities: &[f64]) -> Result<f64> {
    if w.0.len() != utilities.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} utilities",
            w.0.len(),
            utilities.len()
        )));
    }
    Ok(w.0.iter().zip(utilities).map(|(a, b)| a * b).sum())
}

/// Area dominated by `points` relative to the origin.
pub fn hypervolume_2d(points: &[(f64, f64)]) -> Result<f64> {
    if points.iter().any(|&(x, y)| !(x >= 0.0 && y >= 0.0)) {
        return Err(Error::Argument("hypervolume needs non-negative coordinates".into()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut area = 0.0;
    let mut top = 0.0f64;
    for (x, y) in pts {
        if y > top {
            area += x * (y - top);
            top = y;
        }
    }
    Ok(area)
}

pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Argument(format!(
            "correlation needs two equal series of length ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("a series is constant".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Average ranks (1-based), ties share their mean rank.
fn ranks(a: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    let mut r = vec![0.0; a.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && a[idx[j + 1]] == a[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson_r(&ranks(a), &ranks(b))
}

/// `|m1 − m2|` over exactly two groups.
pub fn absolute_difference(by_group: &BTreeMap<String, f64>) -> Result<f64> {
    if by_group.len() != 2 {
        return Err(Error::Argument(format!(
            "absolute difference needs exactly two groups, got {}",
            by_group.len()
        )));
    }
    let v: Vec<f64> = by_group.values().copied().collect();
    Ok((v[0] - v[1]).abs())
}

/// Category label matrix for a candidate list.
pub fn candidate_labels(ds: &InteractionDataset, candidates: &[u32]) -> Labels {
    let m = ds.num_categories;
    let mut y = Array2::zeros((candidates.len(), m));
    for (r, &c) in candidates.iter().enumerate() {
        for &cat in &ds.item_categories[c as usize] {
            y[[r, cat as usize]] = 1.0;
        }
    }
    y
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ndcg_at_10: f64,
    pub alpha_ndcg_at_10: f64,
    /// NDCG@10 per group label, when users carry one.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub group_ndcg: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub group_alpha_ndcg: BTreeMap<String, f64>,
}

impl Metrics {
    pub fn ad(&self) -> Option<f64> {
        absolute_difference(&self.group_ndcg).ok()
    }
}

/// Frozen backbone features for one evaluation split, reused across adapters.
pub struct EvalContext<'a> {
    pub ds: &'a InteractionDataset,
    pub backbone: &'a Backbone,
    pub split: EvalSplit,
    pub reps: Array2<f32>,
    pub alpha: f64,
    labels: Vec<Labels>,
}

impl<'a> EvalContext<'a> {
    pub fn new(ds: &'a InteractionDataset, backbone: &'a Backbone, split: EvalSplit, alpha: f64) -> Result<Self> {
        let (seqs, times) = eval_windows(ds, split);
        let reps = backbone.encode_histories(&seqs, backbone.needs_times().then_some(times.as_slice()))?;
        let mut labels = Vec::with_capacity(ds.num_users());
        for u in 0..ds.num_users() {
            labels.push(candidate_labels(ds, ds.eval_candidates(u, split)?));
        }
        Ok(Self {
            ds,
            backbone,
            split,
            reps,
            alpha,
            labels,
        })
    }

    pub fn labels(&self, user: usize) -> &Labels {
        &self.labels[user]
    }

    pub fn candidates(&self, user: usize) -> &[u32] {
        self.ds.eval_candidates(user, self.split).expect("context built with candidates")
    }

    /// Per-user candidate scores under an optional adapter.
    pub fn scores(&self, adapter: Option<&Adapter>) -> Result<Vec<Vec<f32>>> {
        let reps = match adapter {
            Some(a) => a.apply(&self.reps)?,
            None => self.reps.clone(),
        };
        Ok((0..self.ds.num_users())
            .map(|u| {
                self.backbone
                    .score_from_repr(reps.row(u).as_slice().expect("contiguous"), self.candidates(u))
            })
            .collect())
    }

    pub fn evaluate(&self, adapter: Option<&Adapter>) -> Result<Metrics> {
        let scores = self.scores(adapter)?;
        let orders: Vec<Vec<usize>> = scores
            .iter()
            .enumerate()
            .map(|(u, s)| order_by_scores(self.candidates(u), s))
            .collect();
        self.evaluate_orders(&orders)
    }

    /// Metrics for explicit rankings given as candidate positions per user.
    pub fn evaluate_orders(&self, orders: &[Vec<usize>]) -> Result<Metrics> {
        let mut sum = (0.0, 0.0);
        let mut groups: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
        for (u, order) in orders.iter().enumerate() {
            let cands = self.candidates(u);
            let ranked: Vec<u32> = order.iter().map(|&i| cands[i]).collect();
            let n = ndcg_at_k(&ranked, cands[0], 10)?;
            let a = alpha_ndcg_at_k(&self.labels[u], order, self.alpha, 10)?;
            sum.0 += n;
            sum.1 += a;
            if let Some(g) = &self.ds.users[u].group {
                let e = groups.entry(g.clone()).or_default();
                e.0 += n;
                e.1 += a;
                e.2 += 1;
            }
        }
        let count = orders.len().max(1) as f64;
        Ok(Metrics {
            ndcg_at_10: sum.0 / count,
            alpha_ndcg_at_10: sum.1 / count,
            group_ndcg: groups.iter().map(|(g, v)| (g.clone(), v.0 / v.2 as f64)).collect(),
            group_alpha_ndcg: groups.iter().map(|(g, v)| (g.clone(), v.1 / v.2 as f64)).collect(),
        })
    }
}

/// Candidate positions ordered by descending score, ties by item index.
pub fn order_by_scores(candidates: &[u32], scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(candidates[a].cmp(&candidates[b]))
    });
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub trials_ms: Vec<f64>,
}

/// Times `f` over `trials` runs after one untimed warm-up call.
pub fn benchmark_latency<F: FnMut() -> Result<()>>(mut f: F, trials: usize) -> Result<LatencyStats> {
    if trials < 3 {
        return Err(Error::Argument("latency benchmark needs at least 3 trials".into()));
    }
    f()?;
    let mut t = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = t.iter().sum::<f64>() / trials as f64;
    let var = t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    Ok(LatencyStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
        trials_ms: t,
    })
}

/// Methods the sweep protocol can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Paragon,
    Retrain,
    Soup,
    Mmr,
    Hypernet,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Paragon, Method::Retrain, Method::Soup, Method::Mmr, Method::Hypernet];

    pub fn name(self) -> &'static str {
        match self {
            Method::Paragon => "paragon",
            Method::Retrain => "retrain",
            Method::Soup => "soup",
            Method::Mmr => "mmr",
            Method::Hypernet => "hypernet",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown method {s:?}")))
    }
}

/// Whatever each method needs; only the entry for the swept method is read.
#[derive(Clone, Copy)]
pub struct SweepAssets<'a> {
    pub generator: Option<&'a Generator>,
    pub guidance: f64,
    pub sample_seed: u64,
    pub hypernet: Option<&'a Hypernet>,
    pub soup: Option<&'a SoupEndpoints>,
    pub retrain: Option<&'a TuneConfig>,
    pub retrain_seed: u64,
}

impl Default for SweepAssets<'_> {
    fn default() -> Self {
        Self {
            generator: None,
            guidance: 0.4,
            sample_seed: 0,
            hypernet: None,
            soup: None,
            retrain: None,
            retrain_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub weights: TaskWeights,
    pub ndcg_at_10: f64,
    pub alpha_ndcg_at_10: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ad: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub group_ndcg: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub group_alpha_ndcg: BTreeMap<String, f64>,
}

/// Min-max bounds per objective used before hypervolume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub ndcg: (f64, f64),
    pub alpha_ndcg: (f64, f64),
}

impl Bounds {
    pub fn of(reports: &[&SweepReport]) -> Option<Self> {
        let mut it = reports.iter().flat_map(|r| &r.results).peekable();
        it.peek()?;
        let mut b = Bounds {
            ndcg: (f64::INFINITY, f64::NEG_INFINITY),
            alpha_ndcg: (f64::INFINITY, f64::NEG_INFINITY),
        };
        for t in it {
            b.ndcg = (b.ndcg.0.min(t.ndcg_at_10), b.ndcg.1.max(t.ndcg_at_10));
            b.alpha_ndcg = (b.alpha_ndcg.0.min(t.alpha_ndcg_at_10), b.alpha_ndcg.1.max(t.alpha_ndcg_at_10));
        }
        Some(b)
    }

    fn scale(v: f64, (lo, hi): (f64, f64)) -> f64 {
        if hi > lo {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            1.0
        }
    }

    pub fn normalize(&self, t: &TaskResult) -> (f64, f64) {
        (Self::scale(t.ndcg_at_10, self.ndcg), Self::scale(t.alpha_ndcg_at_10, self.alpha_ndcg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub results: Vec<TaskResult>,
    pub avg_hv: f64,
    pub bounds: Bounds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pearson_r_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pearson_r_d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Method>,
}

impl SweepReport {
    pub fn ndcg(&self) -> Vec<f64> {
        self.results.iter().map(|t| t.ndcg_at_10).collect()
    }

    pub fn alpha_ndcg(&self) -> Vec<f64> {
        self.results.iter().map(|t| t.alpha_ndcg_at_10).collect()
    }

    pub fn mean_ad(&self) -> Option<f64> {
        let ads: Option<Vec<f64>> = self.results.iter().map(|t| t.ad).collect();
        ads.filter(|a| !a.is_empty()).map(|a| a.iter().sum::<f64>() / a.len() as f64)
    }

    /// Avg.HV: mean over tasks of the single-point hypervolume of that task's
    /// normalized (accuracy, diversity) pair against the origin.
    pub fn rescore(&mut self, bounds: Bounds) -> Result<()> {
        let mut total = 0.0;
        for t in &self.results {
            total += hypervolume_2d(&[bounds.normalize(t)])?;
        }
        self.avg_hv = total / self.results.len().max(1) as f64;
        self.bounds = bounds;
        Ok(())
    }

    /// Pearson correlations of both metric series against `reference`; a
    /// correlation stays unset when either series is constant.
    pub fn correlate(&mut self, reference: &SweepReport) -> Result<()> {
        if reference.results.len() != self.results.len()
            || reference.results.iter().zip(&self.results).any(|(a, b)| a.weights != b.weights)
        {
            return Err(Error::Orchestration("reference sweep covers different tasks".into()));
        }
        let defined = |r: Result<f64>, series: &str| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedCorrelation(why)) => {
                log::warn!("{}: {series} correlation undefined, {why}", self.method);
                Ok(None)
            }
            Err(e) => Err(e),
        };
        self.pearson_r_a = defined(pearson_r(&self.ndcg(), &reference.ndcg()), "NDCG")?;
        self.pearson_r_d = defined(pearson_r(&self.alpha_ndcg(), &reference.alpha_ndcg()), "α-NDCG")?;
        self.reference = Some(reference.method);
        Ok(())
    }
}

fn missing(m: Method, what: &str) -> Error {
    Error::Orchestration(format!("{m} sweep needs {what}"))
}

/// Evaluates `method` on every task of `grid`, one result per task.
pub fn run_sweep(method: Method, ctx: &EvalContext<'_>, assets: &SweepAssets<'_>, grid: &[TaskWeights]) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::Orchestration("empty sweep grid".into()));
    }
    let mut results = Vec::with_capacity(grid.len());
    for w in grid {
        let start = Instant::now();
        let metrics = match method {
            Method::Mmr => {
                let lambda = w.accuracy().clamp(0.0, 1.0);
                let scores = ctx.scores(None)?;
                let orders = scores
                    .iter()
                    .enumerate()
                    .map(|(u, s)| mmr_rerank(s, ctx.labels(u), lambda, 10.min(s.len())))
                    .collect::<Result<Vec<_>>>()?;
                ctx.evaluate_orders(&orders)?
            }
            _ => {
                let tensor = match method {
                    Method::Paragon => assets
                        .generator
                        .ok_or_else(|| missing(method, "a trained generator"))?
                        .sample_adapter(w, assets.guidance, assets.sample_seed)?,
                    Method::Hypernet => assets.hypernet.ok_or_else(|| missing(method, "a fitted hypernetwork"))?.predict(w),
                    Method::Soup => soup_merge(assets.soup.ok_or_else(|| missing(method, "soup endpoints"))?, w)?,
                    Method::Retrain => {
                        let cfg = assets.retrain.ok_or_else(|| missing(method, "a tuning config"))?;
                        retrain_task(w, ctx.backbone, ctx.ds, cfg, assets.retrain_seed)?.0
                    }
                    Method::Mmr => unreachable!(),
                };
                ctx.evaluate(Some(&Adapter::unflatten(&tensor)?))?
            }
        };
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        log::debug!("{method} {:?}: ndcg {:.4} α-ndcg {:.4}", w.0, metrics.ndcg_at_10, metrics.alpha_ndcg_at_10);
        results.push(TaskResult {
            weights: w.clone(),
            ndcg_at_10: metrics.ndcg_at_10,
            alpha_ndcg_at_10: metrics.alpha_ndcg_at_10,
            ad: metrics.ad(),
            latency_ms: Some(elapsed),
            group_ndcg: metrics.group_ndcg,
            group_alpha_ndcg: metrics.group_alpha_ndcg,
        });
    }
    let mut report = SweepReport {
        method,
        label: None,
        results,
        avg_hv: 0.0,
        bounds: Bounds {
            ndcg: (0.0, 1.0),
            alpha_ndcg: (0.0, 1.0),
        },
        pearson_r_a: None,
        pearson_r_d: None,
        reference: None,
    };
    let own = Bounds::of(&[&report]).expect("non-empty grid");
    report.rescore(own)?;
    Ok(report)
}

/// Rescores all reports on joint min-max bounds and correlates each with the
/// retrain report when one is present.
pub fn compare_reports(reports: &mut [SweepReport]) -> Result<Bounds> {
    let bounds = Bounds::of(&reports.iter().collect::<Vec<_>>())
        .ok_or_else(|| Error::Orchestration("no sweep results to compare".into()))?;
    for r in reports.iter_mut() {
        r.rescore(bounds)?;
    }
    if let Some(reference) = reports.iter().find(|r| r.method == Method::Retrain).cloned() {
        for r in reports.iter_mut() {
            r.correlate(&reference)?;
        }
    }
    Ok(bounds)
}

/// CSV keyed by `w_acc`, one column per report and metric.
pub fn plot_data(reports: &[SweepReport]) -> Result<String> {
    let Some(first) = reports.first() else {
        return Err(Error::Orchestration("no sweep reports to plot".into()));
    };
    let n = first.results.len();
    if reports.iter().any(|r| r.results.len() != n) {
        return Err(Error::Orchestration("sweep reports cover different grids".into()));
    }
    let tag = |r: &SweepReport| r.label.clone().unwrap_or_else(|| r.method.to_string());
    let mut out = String::from("w_acc");
    for r in reports {
        let t = tag(r);
        out += &format!(",{t}_ndcg10,{t}_alpha_ndcg10,{t}_ad");
    }
    out.push('\n');
    for i in 0..n {
        out += &format!("{}", first.results[i].weights.accuracy());
        for r in reports {
            let t = &r.results[i];
            out += &format!(
                ",{:.6},{:.6},{}",
                t.ndcg_at_10,
                t.alpha_ndcg_at_10,
                t.ad.map_or(String::new(), |a| format!("{a:.6}"))
            );
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[3, 1, 2], 3, 10).unwrap(), 1.0);
        assert!((ndcg_at_k(&[1, 3, 2], 3, 10).unwrap() - 0.630930).abs() < 1e-6);
        assert_eq!(ndcg_at_k(&[1, 2, 3], 3, 2).unwrap(), 0.0);
        assert!(matches!(ndcg_at_k(&[1], 1, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn alpha_ndcg_worked_example() {
        let y = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let dcg = alpha_dcg(&y, &[0, 1, 2], 0.5, 3);
        assert!((dcg - 1.815465).abs() < 1e-6);
        assert!((ideal_alpha_dcg(&y, 0.5, 3) - 1.880930).abs() < 1e-6);
        assert!((alpha_ndcg_at_k(&y, &[0, 1, 2], 0.5, 3).unwrap() - 0.965195).abs() < 1e-6);
        assert_eq!(greedy_ideal_order(&y, 0.5, 3), vec![0, 2, 1]);
    }

    #[test]
    fn single_category_is_permutation_invariant() {
        let y = array![[1.0], [1.0], [1.0]];
        assert_eq!(alpha_ndcg_at_k(&y, &[2, 0, 1], 0.5, 2).unwrap(), 1.0);
    }

    #[test]
    fn greedy_ideal_on_large_pool_scores_one() {
        let y = Array2::from_shape_fn((12, 3), |(i, l)| ((i + l) % 3 == 0) as u8 as f64);
        let order = greedy_ideal_order(&y, 0.5, 10);
        assert_eq!(alpha_ndcg_at_k(&y, &order, 0.5, 10).unwrap(), 1.0);
        assert!(matches!(alpha_ndcg_at_k(&y, &[40], 0.5, 10), Err(Error::Shape(_))));
    }

    #[test]
    fn reward_examples() {
        let w = |a: f64, b: f64| TaskWeights::new(vec![a, b]).unwrap();
        assert_eq!(weighted_reward(&w(1.0, 0.0), &[0.7, 0.2]).unwrap(), 0.7);
        assert_eq!(weighted_reward(&w(0.5, 0.5), &[0.4, 0.6]).unwrap(), 0.5);
        assert!((weighted_reward(&w(0.3, 0.7), &[1.0, 0.0]).unwrap() - 0.3).abs() < 1e-12);
        assert!(weighted_reward(&w(0.3, 0.7), &[1.0]).is_err());
    }

    #[test]
    fn hypervolume_examples() {
        assert_eq!(hypervolume_2d(&[(0.5, 0.5)]).unwrap(), 0.25);
        assert!((hypervolume_2d(&[(1.0, 0.2), (0.2, 1.0)]).unwrap() - 0.36).abs() < 1e-12);
        assert!((hypervolume_2d(&[(1.0, 0.2), (0.2, 1.0), (0.1, 0.1)]).unwrap() - 0.36).abs() < 1e-12);
        assert_eq!(hypervolume_2d(&[]).unwrap(), 0.0);
        assert!(hypervolume_2d(&[(-0.1, 0.5)]).is_err());
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - 0.981981).abs() < 1e-6);
        assert!(matches!(pearson_r(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn spearman_uses_average_ranks() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 4.0, 9.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn absolute_difference_examples() {
        let m = |a: f64, b: f64| BTreeMap::from([("F".to_string(), a), ("M".to_string(), b)]);
        assert_eq!(absolute_difference(&m(0.5, 0.5)).unwrap(), 0.0);
        assert!((absolute_difference(&m(0.6, 0.4)).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(absolute_difference(&m(0.4, 0.6)).unwrap(), absolute_difference(&m(0.6, 0.4)).unwrap());
        assert!(absolute_difference(&BTreeMap::new()).is_err());
    }

    #[test]
    fn rank_ties_break_by_item_index() {
        assert_eq!(rank_by_scores(&[7, 3, 5], &[1.0, 1.0, 2.0]), vec![5, 3, 7]);
    }

    #[test]
    fn latency_harness_on_sleep() {
        let s = benchmark_latency(
            || {
                std::thread::sleep(std::time::Duration::from_millis(10));
                Ok(())
            },
            3,
        )
        .unwrap();
        assert!(s.mean_ms >= 10.0 && s.mean_ms <= 20.0, "{}", s.mean_ms);
        assert!(benchmark_latency(|| Ok(()), 2).is_err());
    }
}

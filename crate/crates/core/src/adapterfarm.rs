//! Task sampling, per-task adapter tuning against a frozen backbone, and the
//! adapter corpus used to train the generator.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::evalkit::candidate_labels;
use crate::nn::{Adam, AdamConfig, TensorSpec};
use crate::objectives::{
    bpr_loss_grad, diversity_loss_grad, group_gap_loss, scalarized_loss, soft_target_ndcg, DiversityConfig, Labels,
    TaskWeights,
};
use crate::recmodel::{Adapter, AdapterShape, AdapterTensor, Backbone, NormStats, TrainFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskScheme {
    Grid,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGrid {
    pub scheme: TaskScheme,
    pub count: usize,
    pub step: f64,
    pub seed: u64,
    /// Include a fairness weight; grid tasks pair each point with 0 and 1.
    #[serde(default)]
    pub fairness: bool,
}

impl TaskGrid {
    pub fn grid(step: f64) -> Self {
        Self {
            scheme: TaskScheme::Grid,
            count: 0,
            step,
            seed: 0,
            fairness: false,
        }
    }

    pub fn uniform(count: usize, seed: u64) -> Self {
        Self {
            scheme: TaskScheme::Uniform,
            count,
            step: 0.1,
            seed,
            fairness: false,
        }
    }
}

/// The canonical 11-point sweep: `w_acc = 0, 0.1, …, 1` with `w_div = 1 − w_acc`.
pub fn sweep_grid() -> Vec<TaskWeights> {
    sample_tasks(&TaskGrid::grid(0.1)).expect("0.1 divides 1")
}

pub fn sample_tasks(grid: &TaskGrid) -> Result<Vec<TaskWeights>> {
    let mut out = Vec::new();
    match grid.scheme {
        TaskScheme::Grid => {
            if !(grid.step > 0.0 && grid.step <= 1.0) {
                return Err(Error::Config(format!("grid step {} outside (0, 1]", grid.step)));
            }
            let n = (1.0 / grid.step).round();
            if (n * grid.step - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("grid step {} does not divide 1", grid.step)));
            }
            let n = n as usize;
            for i in 0..=n {
                // round to kill accumulated float error: 0.30000000000000004 → 0.3
                let a = ((i as f64 / n as f64) * 1e12).round() / 1e12;
                let d = ((1.0 - a) * 1e12).round() / 1e12;
                if grid.fairness {
                    out.push(TaskWeights(vec![a, d, 0.0]));
                    out.push(TaskWeights(vec![a, d, 1.0]));
                } else {
                    out.push(TaskWeights(vec![a, d]));
                }
            }
        }
        TaskScheme::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
            for _ in 0..grid.count {
                let a: f64 = rng.gen();
                let mut w = vec![a, 1.0 - a];
                if grid.fairness {
                    w.push(if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
                }
                out.push(TaskWeights(w));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub bottleneck: usize,
    pub diversity: DiversityConfig,
    /// Seed of the shared no-op initialization; every task starts from it.
    pub init_seed: u64,
    pub clip_norm: f32,
    /// Multiplier on the group-gap loss before the fairness weight applies.
    pub fairness_scale: f64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 256,
            lr: 5e-3,
            bottleneck: 8,
            diversity: DiversityConfig {
                temperature: 0.3,
                ..Default::default()
            },
            init_seed: 0,
            clip_norm: 5.0,
            fairness_scale: 10.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Frozen features plus per-list labels and group flags, shared by all
/// tuning runs on one backbone.
pub struct TuneData {
    pub features: TrainFeatures,
    pub labels: Vec<Labels>,
    pub groups: Vec<Option<bool>>,
    pub item_table: Mat,
    pub dim: usize,
}

/// Maps the two group labels to `true` / `false` (lexicographic order);
/// users without a label, or with any label beyond the first two, map to `None`.
pub fn group_flags(ds: &InteractionDataset) -> Vec<Option<bool>> {
    let mut names: Vec<&str> = ds.users.iter().filter_map(|u| u.group.as_deref()).collect();
    names.sort_unstable();
    names.dedup();
    ds.users
        .iter()
        .map(|u| match u.group.as_deref() {
            Some(g) if names.first() == Some(&g) => Some(true),
            Some(g) if names.get(1) == Some(&g) => Some(false),
            _ => None,
        })
        .collect()
}

impl TuneData {
    pub fn new(backbone: &Backbone, ds: &InteractionDataset) -> Result<Self> {
        let features = backbone.train_features(ds)?;
        let labels = features.candidates.iter().map(|c| candidate_labels(ds, c)).collect();
        let flags = group_flags(ds);
        let groups = features.users.iter().map(|&u| flags[u]).collect();
        Ok(Self {
            features,
            labels,
            groups,
            item_table: backbone.item_table().clone(),
            dim: backbone.cfg.dim,
        })
    }

    pub fn num_lists(&self) -> usize {
        self.features.candidates.len()
    }

    fn scores(&self, reps: &Mat, rows: &[usize]) -> Vec<Vec<f64>> {
        rows.iter()
            .enumerate()
            .map(|(b, &r)| {
                self.features.candidates[r]
                    .iter()
                    .map(|&c| {
                        self.item_table
                            .row(c as usize + 1)
                            .iter()
                            .zip(reps.row(b))
                            .map(|(a, h)| (a * h) as f64)
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    /// Scalarized loss over the lists `rows` and its gradient w.r.t. the
    /// adapted representations of those lists.
    fn loss_and_grad(&self, w: &TaskWeights, adapted: &Mat, rows: &[usize], cfg: &TuneConfig) -> Result<(f64, Mat)> {
        let div = &cfg.diversity;
        let scores = self.scores(adapted, rows);
        let n = rows.len() as f64;
        let mut ds = vec![vec![0.0; scores.first().map_or(0, |s| s.len())]; rows.len()];
        let (mut acc, mut dv) = (0.0, 0.0);
        for (b, s) in scores.iter().enumerate() {
            if w.accuracy() > 0.0 {
                let (l, dp, dn) = bpr_loss_grad(s[0], &s[1..])?;
                acc += l;
                ds[b][0] += w.accuracy() * dp / n;
                for (j, d) in dn.iter().enumerate() {
                    ds[b][j + 1] += w.accuracy() * d / n;
                }
            }
            if w.diversity() > 0.0 {
                let (l, g) = diversity_loss_grad(s, &self.labels[rows[b]], div)?;
                dv += l;
                for (j, d) in g.iter().enumerate() {
                    ds[b][j] += w.diversity() * d / n;
                }
            }
        }
        let mut fair = None;
        if let Some(wf) = w.fairness().filter(|&f| f > 0.0) {
            let mut vals = Vec::with_capacity(rows.len());
            let mut grads = Vec::with_capacity(rows.len());
            for s in &scores {
                let (v, g) = soft_target_ndcg(s, 0, div.temperature)?;
                vals.push(v);
                grads.push(g);
            }
            let groups: Vec<Option<bool>> = rows.iter().map(|&r| self.groups[r]).collect();
            let (l, dl) = group_gap_loss(&vals, &groups);
            fair = Some(cfg.fairness_scale * l);
            for (b, g) in grads.iter().enumerate() {
                for (j, d) in g.iter().enumerate() {
                    ds[b][j] += wf * cfg.fairness_scale * dl[b] * d;
                }
            }
        }
        let loss = scalarized_loss(w, acc / n, dv / n, fair);
        // d loss / d h'_b = Σ_c ds_c · e_c
        let mut dh = Mat::zeros((rows.len(), self.dim));
        for (b, &r) in rows.iter().enumerate() {
            let mut row = dh.row_mut(b);
            for (c, &item) in self.features.candidates[r].iter().enumerate() {
                let g = ds[b][c] as f32;
                if g != 0.0 {
                    row.scaled_add(g, &self.item_table.row(item as usize + 1));
                }
            }
        }
        Ok((loss, dh))
    }

    /// Scalarized loss over every list, in batches.
    pub fn full_loss(&self, w: &TaskWeights, adapter: &Adapter, cfg: &TuneConfig) -> Result<f64> {
        let all: Vec<usize> = (0..self.num_lists()).collect();
        let mut total = 0.0;
        for chunk in all.chunks(cfg.batch_size.max(1)) {
            let h = crate::recmodel::select_rows(&self.features.reps, chunk);
            let (l, _) = self.loss_and_grad(w, &adapter.apply(&h)?, chunk, cfg)?;
            total += l * chunk.len() as f64;
        }
        Ok(total / self.num_lists().max(1) as f64)
    }
}

/// Tunes one adapter from the shared no-op initialization. `seed` drives
/// the mini-batch order.
pub fn tune_with_data(
    w: &TaskWeights,
    data: &TuneData,
    cfg: &TuneConfig,
    seed: u64,
) -> Result<(Adapter, TuneReport)> {
    cfg.diversity.validate()?;
    let shape = AdapterShape {
        dim: data.dim,
        bottleneck: cfg.bottleneck,
    };
    let mut adapter = Adapter::noop(shape, cfg.init_seed);
    let mut report = TuneReport::default();
    if cfg.epochs == 0 {
        return Ok((adapter, report));
    }
    report.initial_loss = data.full_loss(w, &adapter, cfg)?;
    let mut flat = Array2::from_shape_vec((1, shape.num_params()), adapter.flatten().values)
        .expect("flat length matches");
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            clip_norm: cfg.clip_norm,
            ..Default::default()
        },
        std::slice::from_ref(&flat),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.num_lists()).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let h = crate::recmodel::select_rows(&data.features.reps, chunk);
            let out = adapter.apply(&h)?;
            let (loss, dh) = data.loss_and_grad(w, &out, chunk, cfg)?;
            if !loss.is_finite() {
                return Err(Error::Tuning {
                    step,
                    message: "scalarized loss is not finite".into(),
                });
            }
            let g = adapter.backward(&h, &dh);
            let mut grads = [Some(Array2::from_shape_vec((1, g.len()), g).expect("grad length"))];
            opt.step(std::slice::from_mut(&mut flat), &mut grads);
            adapter = Adapter::unflatten(&AdapterTensor {
                values: flat.iter().copied().collect(),
                manifest: shape.manifest(),
                stats: None,
            })?;
            sum += loss * chunk.len() as f64;
            step += 1;
        }
        report.epoch_losses.push(sum / data.num_lists().max(1) as f64);
    }
    report.final_loss = data.full_loss(w, &adapter, cfg)?;
    if !report.final_loss.is_finite() {
        return Err(Error::Tuning {
            step,
            message: "final loss is not finite".into(),
        });
    }
    Ok((adapter, report))
}

/// Computes frozen features and tunes one adapter.
pub fn tune_adapter(
    w: &TaskWeights,
    backbone: &Backbone,
    ds: &InteractionDataset,
    cfg: &TuneConfig,
    seed: u64,
) -> Result<(AdapterTensor, TuneReport)> {
    let data = TuneData::new(backbone, ds)?;
    let (a, r) = tune_with_data(w, &data, cfg, seed)?;
    Ok((a.flatten(), r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub weights: TaskWeights,
    pub seed: u64,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backbone_checksum: String,
    pub tune: TuneConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCorpus {
    pub manifest: Vec<TensorSpec>,
    pub records: Vec<CorpusRecord>,
    pub stats: NormStats,
    pub provenance: Provenance,
}

/// Per-coordinate mean and population standard deviation; coordinates that
/// never vary get a unit scale.
pub fn compute_stats(records: &[Vec<f32>]) -> NormStats {
    let p = records.first().map_or(0, |r| r.len());
    let n = records.len().max(1) as f64;
    let mut mean = vec![0.0f64; p];
    for r in records {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; p];
    for r in records {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (*v as f64 - m).powi(2);
        }
    }
    NormStats {
        mean: mean.iter().map(|m| *m as f32).collect(),
        std: var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-8 {
                    sd as f32
                } else {
                    1.0
                }
            })
            .collect(),
    }
}

/// Tunes one adapter per task. Every task starts from the same init and
/// sees minibatches in the same order, so records differ only through `w`
/// and the corpus traces a smooth curve in parameter space.
pub fn build_corpus(
    tasks: &[TaskWeights],
    backbone: &Backbone,
    ds: &InteractionDataset,
    cfg: &TuneConfig,
    seed: u64,
) -> Result<AdapterCorpus> {
    if tasks.len() < 2 {
        return Err(Error::Config("a corpus needs at least 2 tasks".into()));
    }
    let data = TuneData::new(backbone, ds)?;
    let mut records = Vec::with_capacity(tasks.len());
    for (i, w) in tasks.iter().enumerate() {
        let rs = seed;
        let (a, _) = tune_with_data(w, &data, cfg, rs).map_err(|e| Error::Corpus {
            task: format!("{:?}", w.0),
            source: Box::new(e),
        })?;
        log::debug!("tuned adapter {}/{} for {:?}", i + 1, tasks.len(), w.0);
        records.push(CorpusRecord {
            weights: w.clone(),
            seed: rs,
            values: a.flatten().values,
        });
    }
    let stats = compute_stats(&records.iter().map(|r| r.values.clone()).collect::<Vec<_>>());
    Ok(AdapterCorpus {
        manifest: AdapterShape {
            dim: backbone.cfg.dim,
            bottleneck: cfg.bottleneck,
        }
        .manifest(),
        records,
        stats,
        provenance: Provenance {
            backbone_checksum: backbone.checksum(),
            tune: cfg.clone(),
            seed,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorpusManifest {
    manifest: Vec<TensorSpec>,
    weight_len: usize,
    tasks: Vec<TaskWeights>,
    seeds: Vec<u64>,
    stats: NormStats,
    provenance: Provenance,
    config_hash: String,
    blob_checksum: String,
}

pub const CORPUS_MANIFEST: &str = "corpus.json";
pub const CORPUS_BLOB: &str = "corpus.bin";

impl AdapterCorpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn param_len(&self) -> usize {
        crate::recmodel::manifest_len(&self.manifest)
    }

    pub fn weight_len(&self) -> usize {
        self.records.first().map_or(2, |r| r.weights.len())
    }

    pub fn normalized(&self, i: usize) -> Vec<f32> {
        self.stats.normalize(&self.records[i].values)
    }

    pub fn tensor(&self, i: usize) -> AdapterTensor {
        AdapterTensor {
            values: self.records[i].values.clone(),
            manifest: self.manifest.clone(),
            stats: Some(self.stats.clone()),
        }
    }

    /// Content hash of the manifest, stats and blob.
    pub fn hash(&self) -> String {
        let mut bytes = serde_json::to_vec(&(&self.manifest, &self.stats)).expect("serializable");
        bytes.extend(crate::io::f32_to_bytes(&self.blob()));
        crate::io::checksum_bytes(&bytes)
    }

    fn blob(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len() * (self.weight_len() + self.param_len()));
        for r in &self.records {
            out.extend(r.weights.0.iter().map(|&x| x as f32));
            out.extend(&r.values);
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let blob = self.blob();
        let bytes = crate::io::f32_to_bytes(&blob);
        let m = CorpusManifest {
            manifest: self.manifest.clone(),
            weight_len: self.weight_len(),
            tasks: self.records.iter().map(|r| r.weights.clone()).collect(),
            seeds: self.records.iter().map(|r| r.seed).collect(),
            stats: self.stats.clone(),
            provenance: self.provenance.clone(),
            config_hash: crate::io::checksum_bytes(&serde_json::to_vec(&self.provenance.tune)?),
            blob_checksum: crate::io::checksum_bytes(&bytes),
        };
        crate::io::write_json(&dir.join(CORPUS_MANIFEST), &m)?;
        crate::io::write_bytes(&dir.join(CORPUS_BLOB), &bytes)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: CorpusManifest = crate::io::read_json(&dir.join(CORPUS_MANIFEST))?;
        let bytes = crate::io::read_bytes(&dir.join(CORPUS_BLOB))?;
        if crate::io::checksum_bytes(&bytes) != m.blob_checksum {
            return Err(Error::Schema("corpus blob checksum mismatch".into()));
        }
        let blob = crate::io::bytes_to_f32(&bytes)?;
        let p = crate::recmodel::manifest_len(&m.manifest);
        let width = m.weight_len + p;
        if blob.len() != width * m.tasks.len() || m.seeds.len() != m.tasks.len() {
            return Err(Error::Schema("corpus blob does not match its manifest".into()));
        }
        let records = m
            .tasks
            .into_iter()
            .zip(m.seeds)
            .zip(blob.chunks_exact(width))
            .map(|((weights, seed), row)| CorpusRecord {
                weights,
                seed,
                values: row[m.weight_len..].to_vec(),
            })
            .collect();
        Ok(Self {
            manifest: m.manifest,
            records,
            stats: m.stats,
            provenance: m.provenance,
        })
    }
}

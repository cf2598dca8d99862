//! Pipeline configuration and the studies built on top of the sweep:
//! robustness to parameter noise, fairness control and response latency.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapterfarm::{TaskGrid, TuneConfig};
use crate::baselines::retrain_task;
use crate::data::{EvalSplit, InteractionDataset};
use crate::error::{Error, Result};
use crate::evalkit::{benchmark_latency, pearson_r, run_sweep, EvalContext, LatencyStats, Method, SweepAssets, SweepReport};
use crate::fixture::{FixtureConfig, PrepareConfig};
use crate::objectives::TaskWeights;
use crate::paramgen::{DenoiserConfig, Generator, GeneratorTrainConfig, HypernetConfig};
use crate::recmodel::{Adapter, AdapterTensor, Arch, Backbone, BackboneTrainConfig, NormStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Tsv,
    Movielens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Interaction log, or `ratings.dat` for MovieLens.
    pub path: Option<PathBuf>,
    pub movies: Option<PathBuf>,
    pub users: Option<PathBuf>,
    /// Optional `item_id<TAB>cat,cat` map applied after loading.
    pub category_map: Option<PathBuf>,
    pub fixture: FixtureConfig,
    pub prepare: PrepareConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            movies: None,
            users: None,
            category_map: None,
            fixture: FixtureConfig::default(),
            prepare: PrepareConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub arch: Arch,
    pub dim: usize,
    pub seed: u64,
    pub train: BackboneTrainConfig,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            arch: Arch::Attn,
            dim: 32,
            seed: 0,
            train: BackboneTrainConfig {
                epochs: 40,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FarmSection {
    pub tune: TuneConfig,
    /// Uniform-random tasks added to the evaluation grid.
    pub uniform: usize,
    pub grid_step: f64,
    pub task_seed: u64,
    pub seed: u64,
}

impl Default for FarmSection {
    fn default() -> Self {
        Self {
            tune: TuneConfig::default(),
            uniform: 100,
            grid_step: 0.1,
            task_seed: 7,
            seed: 0,
        }
    }
}

impl FarmSection {
    /// Uniform tasks followed by the grid, each doubled over fairness ∈ {0, 1}
    /// when `fair` is set.
    pub fn tasks(&self, fair: bool) -> Result<Vec<TaskWeights>> {
        let mut uniform = TaskGrid::uniform(self.uniform, self.task_seed);
        let mut grid = TaskGrid::grid(self.grid_step);
        uniform.fairness = fair;
        grid.fairness = fair;
        let mut tasks = if self.uniform > 0 {
            crate::adapterfarm::sample_tasks(&uniform)?
        } else {
            Vec::new()
        };
        tasks.extend(crate::adapterfarm::sample_tasks(&grid)?);
        Ok(tasks)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub denoiser: DenoiserConfig,
    pub train: GeneratorTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub guidance: f64,
    pub sample_seed: u64,
    pub alpha: f64,
    pub split: EvalSplit,
    pub grid_step: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            guidance: 0.4,
            sample_seed: 0,
            alpha: 0.5,
            split: EvalSplit::Test,
            grid_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    pub cache_size: usize,
    pub offline: bool,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            cache_size: 256,
            offline: true,
        }
    }
}

/// The whole pipeline in one TOML document, one section per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub artifacts: PathBuf,
    pub data: DataSection,
    pub backbone: BackboneSection,
    pub farm: FarmSection,
    pub generator: GeneratorSection,
    pub hypernet: HypernetConfig,
    pub sweep: SweepSection,
    pub serve: ServeSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            artifacts: PathBuf::from("artifacts"),
            data: DataSection::default(),
            backbone: BackboneSection::default(),
            farm: FarmSection::default(),
            generator: GeneratorSection::default(),
            hypernet: HypernetConfig::default(),
            sweep: SweepSection::default(),
            serve: ServeSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }
}

// ---------------------------------------------------------------------------
// Robustness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbRow {
    pub method: String,
    pub mean_abs_delta_ndcg: f64,
    pub mean_abs_delta_alpha_ndcg: f64,
    pub trials: usize,
}

/// Adds `σ·std ⊙ z` (σ in normalized units) to every adapter of every
/// method, with the same `z` per (task, seed) across methods, and averages
/// the absolute metric change over tasks and seeds.
pub fn perturbation_study(
    ctx: &EvalContext<'_>,
    methods: &[(String, Vec<AdapterTensor>)],
    stats: &NormStats,
    sigma: f64,
    seeds: usize,
) -> Result<Vec<PerturbRow>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("σ {sigma} must be finite and non-negative")));
    }
    if seeds == 0 {
        return Err(Error::Argument("perturbation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(methods.len());
    for (name, adapters) in methods {
        let (mut dn, mut da, mut n) = (0.0, 0.0, 0usize);
        for (task, tensor) in adapters.iter().enumerate() {
            if tensor.values.len() != stats.std.len() {
                return Err(Error::Shape(format!("{name} adapter does not match the corpus statistics")));
            }
            let base = ctx.evaluate(Some(&Adapter::unflatten(tensor)?))?;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(((task as u64) << 32) | seed as u64);
                let mut noisy = tensor.clone();
                for (v, s) in noisy.values.iter_mut().zip(&stats.std) {
                    let z: f32 = rng.sample(StandardNormal);
                    *v += sigma as f32 * s * z;
                }
                let m = ctx.evaluate(Some(&Adapter::unflatten(&noisy)?))?;
                dn += (m.ndcg_at_10 - base.ndcg_at_10).abs();
                da += (m.alpha_ndcg_at_10 - base.alpha_ndcg_at_10).abs();
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        rows.push(PerturbRow {
            method: name.clone(),
            mean_abs_delta_ndcg: dn / n,
            mean_abs_delta_alpha_ndcg: da / n,
            trials: n as usize,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Fairness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub unfair: SweepReport,
    pub fair: SweepReport,
    pub mean_ad_unfair: f64,
    pub mean_ad_fair: f64,
    /// Pearson r between per-group NDCG@10 and α-NDCG@10 across the grid,
    /// keyed `"{setting}/{group}"`; `None` when either series is constant.
    pub group_tradeoff_r: BTreeMap<String, Option<f64>>,
}

impl FairnessReport {
    pub fn per_point_lower(&self) -> Vec<bool> {
        self.fair
            .results
            .iter()
            .zip(&self.unfair.results)
            .map(|(f, u)| f.ad.unwrap_or(f64::NAN) < u.ad.unwrap_or(f64::NAN))
            .collect()
    }
}

/// Accuracy grid × fairness ∈ {0, 1}, with diversity weight `1 − w_acc`.
pub fn fairness_grid(step: f64, fairness: f64) -> Result<Vec<TaskWeights>> {
    let grid = crate::adapterfarm::sample_tasks(&TaskGrid::grid(step))?;
    grid.into_iter().map(|w| TaskWeights::new(vec![w.0[0], w.0[1], fairness])).collect()
}

pub fn fairness_study(ctx: &EvalContext<'_>, assets: &SweepAssets<'_>, method: Method, step: f64) -> Result<FairnessReport> {
    let unfair = run_sweep(method, ctx, assets, &fairness_grid(step, 0.0)?)?;
    let fair = run_sweep(method, ctx, assets, &fairness_grid(step, 1.0)?)?;
    let mean = |r: &SweepReport| {
        r.mean_ad()
            .ok_or_else(|| Error::Orchestration("fairness study needs a dataset with two labelled groups".into()))
    };
    let mut group_tradeoff_r = BTreeMap::new();
    for (setting, r) in [("unfair", &unfair), ("fair", &fair)] {
        let groups: Vec<String> = r.results[0].group_ndcg.keys().cloned().collect();
        for g in groups {
            let acc: Vec<f64> = r.results.iter().map(|t| t.group_ndcg[&g]).collect();
            let div: Vec<f64> = r.results.iter().map(|t| t.group_alpha_ndcg[&g]).collect();
            let r = match pearson_r(&acc, &div) {
                Ok(r) => Some(r),
                Err(Error::UndefinedCorrelation(_)) => None,
                Err(e) => return Err(e),
            };
            group_tradeoff_r.insert(format!("{setting}/{g}"), r);
        }
    }
    Ok(FairnessReport {
        mean_ad_unfair: mean(&unfair)?,
        mean_ad_fair: mean(&fair)?,
        unfair,
        fair,
        group_tradeoff_r,
    })
}

// ---------------------------------------------------------------------------
// Latency

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub weights: TaskWeights,
    pub retrain: LatencyStats,
    pub paragon: LatencyStats,
    /// `paragon.mean_ms / retrain.mean_ms`
    pub ratio: f64,
}

/// Wall time from receiving `w` to a loadable adapter, per method. Retrain
/// includes the frozen-feature pass it needs.
pub fn latency_study(
    backbone: &Backbone,
    ds: &InteractionDataset,
    tune: &TuneConfig,
    generator: &Generator,
    w: &TaskWeights,
    guidance: f64,
    trials: usize,
) -> Result<LatencyReport> {
    let retrain = benchmark_latency(
        || {
            let (t, _) = retrain_task(w, backbone, ds, tune, 0)?;
            Adapter::unflatten(&t).map(drop)
        },
        trials,
    )?;
    let paragon = benchmark_latency(
        || {
            let t = generator.sample_adapter(w, guidance, 0)?;
            Adapter::unflatten(&t).map(drop)
        },
        trials,
    )?;
    Ok(LatencyReport {
        weights: w.clone(),
        ratio: paragon.mean_ms / retrain.mean_ms,
        retrain,
        paragon,
    })
}

/// Generated adapters for every task in `grid`.
pub fn generate_all(gen: &Generator, grid: &[TaskWeights], guidance: f64, seed: u64) -> Result<Vec<AdapterTensor>> {
    grid.iter().map(|w| gen.sample_adapter(w, guidance, seed)).collect()
}

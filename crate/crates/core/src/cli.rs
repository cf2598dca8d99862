//! Command-line orchestration. Each subcommand reads its upstream artifacts
//! from the artifacts directory, writes its own next to a run manifest, and
//! fails with a dependency error naming the command that produces anything
//! missing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adapterfarm::{build_corpus, AdapterCorpus};
use crate::baselines::SoupEndpoints;
use crate::data::{self, InteractionDataset};
use crate::error::{Error, Result};
use crate::evalkit::{compare_reports, plot_data, run_sweep, EvalContext, Method, SweepAssets, SweepReport};
use crate::fixture::{prepare, synthetic_interactions};
use crate::objectives::TaskWeights;
use crate::paramgen::{hypernet_fit, train_generator, Conditioning, Generator};
use crate::pipeline::{
    fairness_study, generate_all, latency_study, perturbation_study, DataSource, FairnessReport, LatencyReport,
    PerturbRow, PipelineConfig,
};
use crate::recmodel::{train_backbone, Arch, Backbone, BackboneConfig};
use crate::service::{AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "paragon", version, about = "Preference-conditioned adapter generation for sequential recommenders")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config; defaults to `paragon.toml` in the working directory when
    /// present. Missing sections fall back to built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub artifacts: Option<PathBuf>,
    /// Backbone architecture: attn, recurrent or time-attn.
    #[arg(long, global = true, visible_alias = "backbone")]
    pub arch: Option<Arch>,
    /// Use the fairness-conditioned corpus and generator.
    #[arg(long, global = true)]
    pub fair: bool,
    /// Conditioning strategy of the generator to train or use.
    #[arg(long, global = true)]
    pub strategy: Option<Conditioning>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the prepared dataset (k-core, leave-one-out split, candidates).
    PrepareData {
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        movies: Option<PathBuf>,
        #[arg(long)]
        users: Option<PathBuf>,
    },
    /// Train the frozen backbone.
    TrainBackbone {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Tune one adapter per sampled task into a corpus.
    FarmAdapters {
        #[arg(long)]
        uniform: Option<usize>,
    },
    /// Fit the diffusion generator to the corpus.
    TrainGenerator {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample one adapter for the given preference weights.
    Generate {
        #[arg(long, value_delimiter = ',', required = true)]
        weights: Vec<f64>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate methods over the accuracy grid and compare them.
    Sweep {
        /// Comma-separated methods, or `all`.
        #[arg(long, default_value = "paragon")]
        method: String,
    },
    /// Robustness of generated, regressed and retrained adapters to noise.
    Perturb {
        #[arg(long, default_value_t = 0.01)]
        sigma: f64,
        #[arg(long, value_delimiter = ',', default_value = "diffusion,hypernet,retrain")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
    /// Time retraining against generation for one task.
    BenchLatency {
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
    /// Accuracy grid under fairness weight 0 and 1.
    FairnessSweep,
    /// Emit CSV tables from stored sweep and study results.
    PlotData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
}

/// Provenance written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: PipelineConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub started_at: u64,
    pub finished_at: u64,
    pub version: String,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const DEFAULT_CONFIG: &str = "paragon.toml";

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Content hash of a file or of a directory's files (manifests excluded).
pub fn artifact_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        return crate::io::checksum_file(path);
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != RUN_MANIFEST))
        .collect();
    entries.sort();
    let mut text = String::new();
    for p in entries {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        text += &format!("{name}:{}\n", crate::io::checksum_file(&p)?);
    }
    Ok(crate::io::checksum_bytes(text.as_bytes()))
}

struct Ctx {
    cfg: PipelineConfig,
    fair: bool,
    strategy: Option<Conditioning>,
    command: &'static str,
    started: u64,
    inputs: BTreeMap<String, String>,
}

impl Ctx {
    fn root(&self) -> &Path {
        &self.cfg.artifacts
    }

    fn arch(&self) -> Arch {
        self.cfg.backbone.arch
    }

    fn data_dir(&self) -> PathBuf {
        self.root().join("data")
    }

    fn backbone_dir(&self) -> PathBuf {
        self.root().join(format!("backbone-{}", self.arch()))
    }

    fn corpus_dir(&self) -> PathBuf {
        let fair = if self.fair { "-fair" } else { "" };
        self.root().join(format!("corpus-{}{fair}", self.arch()))
    }

    fn generator_dir(&self) -> PathBuf {
        let fair = if self.fair { "-fair" } else { "" };
        let strat = self.strategy.map_or(String::new(), |s| format!("-{}", s.name()));
        self.root().join(format!("generator-{}{fair}{strat}", self.arch()))
    }

    fn sweep_dir(&self) -> PathBuf {
        self.root().join(format!("sweeps-{}", self.arch()))
    }

    fn studies_dir(&self) -> PathBuf {
        self.root().join("studies")
    }

    fn require(&mut self, dir: PathBuf, producer: &'static str) -> Result<PathBuf> {
        if !dir.exists() {
            return Err(Error::Dependency { path: dir, producer });
        }
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.inputs.insert(name, artifact_hash(&dir)?);
        Ok(dir)
    }

    fn dataset(&mut self) -> Result<InteractionDataset> {
        let d = self.require(self.data_dir(), "prepare-data")?;
        InteractionDataset::load(&d)
    }

    fn backbone(&mut self) -> Result<Backbone> {
        let d = self.require(self.backbone_dir(), "train-backbone")?;
        Backbone::load(&d)
    }

    fn corpus(&mut self) -> Result<AdapterCorpus> {
        let producer = if self.fair { "farm-adapters --fair" } else { "farm-adapters" };
        let d = self.require(self.corpus_dir(), producer)?;
        AdapterCorpus::load(&d)
    }

    fn generator(&mut self) -> Result<Generator> {
        let producer = if self.fair { "train-generator --fair" } else { "train-generator" };
        let d = self.require(self.generator_dir(), producer)?;
        Generator::load(&d)
    }

    /// Writes the run manifest into `out` (a directory) or next to it.
    fn finish(&self, out: &Path, seeds: &[(&str, u64)]) -> Result<()> {
        let (dir, key) = if out.is_dir() {
            (out.to_path_buf(), RUN_MANIFEST.to_string())
        } else {
            let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (out.parent().unwrap_or(Path::new(".")).to_path_buf(), format!("{stem}.{RUN_MANIFEST}"))
        };
        let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let m = RunManifest {
            command: self.command.to_string(),
            config: self.cfg.clone(),
            inputs: self.inputs.clone(),
            outputs: BTreeMap::from([(name, artifact_hash(out)?)]),
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            started_at: self.started,
            finished_at: now(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        crate::io::write_json(&dir.join(key), &m)
    }
}

fn weights(v: &[f64]) -> Result<TaskWeights> {
    if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::Argument(format!("weights {v:?} must lie in [0, 1]")));
    }
    TaskWeights::new(v.to_vec()).map_err(|e| Error::Argument(e.to_string()))
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let default = Path::new(DEFAULT_CONFIG);
    let path = common.config.as_deref().or(default.exists().then_some(default));
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            PipelineConfig::from_toml(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(a) = &common.artifacts {
        cfg.artifacts = a.clone();
    }
    if let Some(a) = common.arch {
        cfg.backbone.arch = a;
    }
    if let Some(s) = common.strategy {
        cfg.generator.denoiser.strategy = s;
    }
    Ok(cfg)
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let command = command_name(&cli.command);
    let mut cx = Ctx {
        cfg,
        fair: cli.common.fair,
        strategy: cli.common.strategy,
        command,
        started: now(),
        inputs: BTreeMap::new(),
    };
    match cli.command {
        Command::PrepareData {
            source,
            input,
            movies,
            users,
        } => {
            let d = &mut cx.cfg.data;
            if let Some(s) = source {
                d.source = match s.as_str() {
                    "synthetic" => DataSource::Synthetic,
                    "tsv" => DataSource::Tsv,
                    "movielens" => DataSource::Movielens,
                    other => return Err(Error::Argument(format!("unknown data source {other:?}"))),
                };
            }
            d.path = input.or(d.path.take());
            d.movies = movies.or(d.movies.take());
            d.users = users.or(d.users.take());
            prepare_data(&cx)
        }
        Command::TrainBackbone { epochs } => {
            if let Some(e) = epochs {
                cx.cfg.backbone.train.epochs = e;
            }
            let ds = cx.dataset()?;
            let b = &cx.cfg.backbone;
            let bc = BackboneConfig::new(b.arch, ds.num_items(), b.dim, ds.max_history()?, b.seed);
            let (bb, report) = train_backbone(&ds, bc, &b.train)?;
            let dir = cx.backbone_dir();
            bb.save(&dir)?;
            crate::io::write_json(&dir.join("train_report.json"), &report)?;
            println!(
                "backbone {}: valid NDCG@10 {:.4} → {:.4} (best epoch {:?})",
                b.arch,
                report.initial_valid_ndcg,
                report.valid_ndcg.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                report.best_epoch
            );
            cx.finish(&dir, &[("backbone", b.seed), ("train", b.train.seed)])
        }
        Command::FarmAdapters { uniform } => {
            if let Some(u) = uniform {
                cx.cfg.farm.uniform = u;
            }
            let ds = cx.dataset()?;
            let bb = cx.backbone()?;
            let tasks = cx.cfg.farm.tasks(cx.fair)?;
            let corpus = build_corpus(&tasks, &bb, &ds, &cx.cfg.farm.tune, cx.cfg.farm.seed)?;
            let dir = cx.corpus_dir();
            corpus.save(&dir)?;
            println!("corpus of {} adapters ({} parameters each) in {}", corpus.len(), corpus.param_len(), dir.display());
            cx.finish(&dir, &[("tasks", cx.cfg.farm.task_seed), ("tune", cx.cfg.farm.seed)])
        }
        Command::TrainGenerator { steps } => {
            if let Some(s) = steps {
                cx.cfg.generator.train.steps = s;
            }
            let corpus = cx.corpus()?;
            let g = &cx.cfg.generator;
            let gen = train_generator(&corpus, g.denoiser.clone(), g.train.clone())?;
            let dir = cx.generator_dir();
            gen.save(&dir)?;
            let tail = &gen.losses[gen.losses.len().saturating_sub(100)..];
            println!(
                "generator ({}, {} parameters): final loss {:.4}",
                g.denoiser.strategy.name(),
                gen.num_parameters(),
                tail.iter().sum::<f64>() / tail.len().max(1) as f64
            );
            cx.finish(&dir, &[("train", g.train.seed)])
        }
        Command::Generate {
            weights: w,
            guidance,
            seed,
            out,
        } => {
            let w = weights(&w)?;
            let gen = cx.generator()?;
            let guidance = guidance.unwrap_or(cx.cfg.sweep.guidance);
            let seed = seed.unwrap_or(cx.cfg.sweep.sample_seed);
            let t = gen.sample_adapter(&w, guidance, seed)?;
            let out = out.unwrap_or_else(|| cx.root().join("generated").join(format!("adapter-{}.json", crate::service::adapter_id(&w, &gen.hash(), guidance, seed))));
            crate::io::write_json(&out, &t)?;
            println!("{}", out.display());
            cx.finish(&out, &[("sample", seed)])
        }
        Command::Sweep { method } => sweep(&mut cx, &method),
        Command::Perturb { sigma, methods, seeds } => perturb(&mut cx, sigma, &methods, seeds),
        Command::BenchLatency { trials, weights: w } => {
            let w = match w {
                Some(v) => weights(&v)?,
                None => TaskWeights::acc_div(0.5),
            };
            let ds = cx.dataset()?;
            let bb = cx.backbone()?;
            let gen = cx.generator()?;
            let r = latency_study(&bb, &ds, &cx.cfg.farm.tune, &gen, &w, cx.cfg.sweep.guidance, trials)?;
            println!(
                "retrain {:.1} ± {:.1} ms | paragon {:.1} ± {:.1} ms | ratio {:.4} ({:.1}% faster)",
                r.retrain.mean_ms,
                r.retrain.std_ms,
                r.paragon.mean_ms,
                r.paragon.std_ms,
                r.ratio,
                100.0 * (1.0 - r.ratio)
            );
            let out = cx.studies_dir().join(format!("latency-{}.json", cx.arch()));
            crate::io::write_json(&out, &r)?;
            cx.finish(&out, &[])
        }
        Command::FairnessSweep => {
            cx.fair = true;
            let ds = cx.dataset()?;
            let bb = cx.backbone()?;
            let gen = cx.generator()?;
            let ctx = EvalContext::new(&ds, &bb, cx.cfg.sweep.split, cx.cfg.sweep.alpha)?;
            let assets = SweepAssets {
                generator: Some(&gen),
                guidance: cx.cfg.sweep.guidance,
                sample_seed: cx.cfg.sweep.sample_seed,
                ..Default::default()
            };
            let r = fairness_study(&ctx, &assets, Method::Paragon, cx.cfg.sweep.grid_step)?;
            println!("w_acc   AD(unfair)  AD(fair)");
            for (u, f) in r.unfair.results.iter().zip(&r.fair.results) {
                println!("{:.1}     {:.4}      {:.4}", u.weights.accuracy(), u.ad.unwrap_or(f64::NAN), f.ad.unwrap_or(f64::NAN));
            }
            println!("mean    {:.4}      {:.4}", r.mean_ad_unfair, r.mean_ad_fair);
            let out = cx.studies_dir().join(format!("fairness-{}.json", cx.arch()));
            crate::io::write_json(&out, &r)?;
            cx.finish(&out, &[("sample", cx.cfg.sweep.sample_seed)])
        }
        Command::PlotData { out } => plot(&mut cx, out),
        Command::Serve { addr } => {
            let addr = addr.unwrap_or_else(|| cx.cfg.serve.addr.clone());
            let addr = addr.parse().map_err(|e| Error::Argument(format!("bad address {addr:?}: {e}")))?;
            let ds = cx.dataset()?;
            let bb = cx.backbone()?;
            let gen = match cx.generator() {
                Ok(g) => Some(g),
                Err(Error::Dependency { .. }) => {
                    log::warn!("no generator found; /v1/adapters will answer 503");
                    None
                }
                Err(e) => return Err(e),
            };
            let sweeps = load_reports(&cx.sweep_dir())?;
            let scfg = ServiceConfig {
                cache_size: cx.cfg.serve.cache_size,
                offline: cx.cfg.serve.offline,
                guidance: cx.cfg.sweep.guidance,
                seed: cx.cfg.sweep.sample_seed,
                alpha: cx.cfg.sweep.alpha,
                split: cx.cfg.sweep.split,
            };
            let state = std::sync::Arc::new(AppState::new(scfg, bb, ds, gen, sweeps)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Orchestration(e.to_string()))?;
            rt.block_on(crate::service::serve(state, addr))
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::PrepareData { .. } => "prepare-data",
        Command::TrainBackbone { .. } => "train-backbone",
        Command::FarmAdapters { .. } => "farm-adapters",
        Command::TrainGenerator { .. } => "train-generator",
        Command::Generate { .. } => "generate",
        Command::Sweep { .. } => "sweep",
        Command::Perturb { .. } => "perturb",
        Command::BenchLatency { .. } => "bench-latency",
        Command::FairnessSweep => "fairness-sweep",
        Command::PlotData { .. } => "plot-data",
        Command::Serve { .. } => "serve",
    }
}

fn prepare_data(cx: &Ctx) -> Result<()> {
    let d = &cx.cfg.data;
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.clone()
            .ok_or_else(|| Error::Argument(format!("{flag} is required for this data source")))
    };
    let mut raw = match d.source {
        DataSource::Synthetic => {
            InteractionDataset::from_interactions(synthetic_interactions(&d.fixture), d.fixture.categories)?
        }
        DataSource::Tsv => data::load_dataset(&need(&d.path, "--input")?, data::DatasetFormat::Tsv, None)?,
        DataSource::Movielens => {
            let rows = data::convert_movielens(&need(&d.path, "--input")?, &need(&d.movies, "--movies")?, d.users.as_deref())?;
            InteractionDataset::from_interactions(rows, 18)?
        }
    };
    if let Some(map) = &d.category_map {
        raw.apply_category_map(&data::load_category_map(map)?)?;
    }
    let ds = prepare(&raw, &d.prepare)?;
    let dir = cx.data_dir();
    ds.save(&dir)?;
    println!(
        "{} users, {} items, {} interactions → {}",
        ds.num_users(),
        ds.num_items(),
        ds.num_interactions(),
        dir.display()
    );
    cx.finish(&dir, &[("fixture", d.fixture.seed), ("candidates", d.prepare.seed)])
}

fn parse_methods(spec: &str) -> Result<Vec<Method>> {
    if spec == "all" {
        return Ok(Method::ALL.to_vec());
    }
    spec.split(',').map(|m| m.trim().parse()).collect()
}

fn load_reports(dir: &Path) -> Result<Vec<SweepReport>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for m in Method::ALL {
        let p = dir.join(format!("{m}.json"));
        if p.exists() {
            out.push(crate::io::read_json(&p)?);
        }
    }
    Ok(out)
}

fn sweep(cx: &mut Ctx, spec: &str) -> Result<()> {
    let methods = parse_methods(spec)?;
    let ds = cx.dataset()?;
    let bb = cx.backbone()?;
    let grid = crate::adapterfarm::sample_tasks(&crate::adapterfarm::TaskGrid::grid(cx.cfg.sweep.grid_step))?;
    let needs_corpus = methods.iter().any(|m| matches!(m, Method::Hypernet));
    let corpus = if needs_corpus { Some(cx.corpus()?) } else { None };
    let gen = if methods.contains(&Method::Paragon) {
        Some(cx.generator()?)
    } else {
        None
    };
    let hyper = match &corpus {
        Some(c) => Some(hypernet_fit(c, cx.cfg.hypernet.clone())?),
        None => None,
    };
    let soup = if methods.contains(&Method::Soup) {
        Some(SoupEndpoints::train(&bb, &ds, &cx.cfg.farm.tune, cx.cfg.farm.seed)?)
    } else {
        None
    };
    let assets = SweepAssets {
        generator: gen.as_ref(),
        guidance: cx.cfg.sweep.guidance,
        sample_seed: cx.cfg.sweep.sample_seed,
        hypernet: hyper.as_ref(),
        soup: soup.as_ref(),
        retrain: Some(&cx.cfg.farm.tune),
        retrain_seed: cx.cfg.farm.seed,
    };
    let ctx = EvalContext::new(&ds, &bb, cx.cfg.sweep.split, cx.cfg.sweep.alpha)?;
    let dir = cx.sweep_dir();
    let mut reports: BTreeMap<Method, SweepReport> = load_reports(&dir)?.into_iter().map(|r| (r.method, r)).collect();
    for m in &methods {
        let mut r = run_sweep(*m, &ctx, &assets, &grid)?;
        if *m == Method::Paragon {
            r.label = cx.strategy.map(|s| format!("paragon-{}", s.name()));
        }
        reports.insert(*m, r);
    }
    let mut all: Vec<SweepReport> = reports.into_values().collect();
    compare_reports(&mut all)?;
    println!("method      Avg.HV   r-a      r-d      NDCG@10 range      α-NDCG@10 range");
    for r in &all {
        let (n, a) = (r.ndcg(), r.alpha_ndcg());
        let fmt = |v: Option<f64>| v.map_or("   -   ".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:<10}  {:.4}   {}   {}   {:.4}–{:.4}      {:.4}–{:.4}",
            r.label.clone().unwrap_or_else(|| r.method.to_string()),
            r.avg_hv,
            fmt(r.pearson_r_a),
            fmt(r.pearson_r_d),
            n.iter().cloned().fold(f64::INFINITY, f64::min),
            n.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            a.iter().cloned().fold(f64::INFINITY, f64::min),
            a.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        crate::io::write_json(&dir.join(format!("{}.json", r.method)), r)?;
    }
    cx.finish(&dir, &[("sample", cx.cfg.sweep.sample_seed), ("retrain", cx.cfg.farm.seed)])
}

const PERTURB_METHODS: [&str; 4] = ["diffusion", "paragon", "hypernet", "retrain"];

fn perturb(cx: &mut Ctx, sigma: f64, methods: &[String], seeds: usize) -> Result<()> {
    if let Some(m) = methods.iter().find(|m| !PERTURB_METHODS.contains(&m.as_str())) {
        return Err(Error::Argument(format!("unknown perturbation method {m:?}; expected one of {PERTURB_METHODS:?}")));
    }
    if !(sigma >= 0.0) || seeds == 0 {
        return Err(Error::Argument("perturb needs σ ≥ 0 and at least one seed".into()));
    }
    let ds = cx.dataset()?;
    let bb = cx.backbone()?;
    let corpus = cx.corpus()?;
    let grid = crate::adapterfarm::sample_tasks(&crate::adapterfarm::TaskGrid::grid(cx.cfg.sweep.grid_step))?;
    let ctx = EvalContext::new(&ds, &bb, cx.cfg.sweep.split, cx.cfg.sweep.alpha)?;
    let mut sets = Vec::new();
    for m in methods {
        let adapters = match m.as_str() {
            "diffusion" | "paragon" => {
                let gen = cx.generator()?;
                generate_all(&gen, &grid, cx.cfg.sweep.guidance, cx.cfg.sweep.sample_seed)?
            }
            "hypernet" => {
                let h = hypernet_fit(&corpus, cx.cfg.hypernet.clone())?;
                grid.iter().map(|w| h.predict(w)).collect()
            }
            "retrain" => grid
                .iter()
                .map(|w| crate::baselines::retrain_task(w, &bb, &ds, &cx.cfg.farm.tune, cx.cfg.farm.seed).map(|r| r.0))
                .collect::<Result<_>>()?,
            _ => unreachable!("validated above"),
        };
        sets.push((m.clone(), adapters));
    }
    let rows = perturbation_study(&ctx, &sets, &corpus.stats, sigma, seeds)?;
    println!("method      mean |ΔNDCG@10|   mean |Δα-NDCG@10|");
    for r in &rows {
        println!("{:<10}  {:.6}          {:.6}", r.method, r.mean_abs_delta_ndcg, r.mean_abs_delta_alpha_ndcg);
    }
    let out = cx.studies_dir().join(format!("perturb-{}.json", cx.arch()));
    crate::io::write_json(&out, &PerturbOutput { sigma, seeds, rows })?;
    cx.finish(&out, &[])
}

#[derive(Debug, Serialize, Deserialize)]
struct PerturbOutput {
    sigma: f64,
    seeds: usize,
    rows: Vec<PerturbRow>,
}

fn plot(cx: &mut Ctx, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| cx.root().join("plots"));
    let reports = load_reports(&cx.sweep_dir())?;
    let mut written = 0;
    if !reports.is_empty() {
        crate::io::write_bytes(&out.join(format!("sweep-{}.csv", cx.arch())), plot_data(&reports)?.as_bytes())?;
        written += 1;
    }
    let studies = cx.studies_dir();
    let perturb_path = studies.join(format!("perturb-{}.json", cx.arch()));
    if perturb_path.exists() {
        let p: PerturbOutput = crate::io::read_json(&perturb_path)?;
        let mut csv = String::from("method,sigma,mean_abs_delta_ndcg10,mean_abs_delta_alpha_ndcg10\n");
        for r in &p.rows {
            csv += &format!("{},{},{:.6},{:.6}\n", r.method, p.sigma, r.mean_abs_delta_ndcg, r.mean_abs_delta_alpha_ndcg);
        }
        crate::io::write_bytes(&out.join(format!("perturb-{}.csv", cx.arch())), csv.as_bytes())?;
        written += 1;
    }
    let fair_path = studies.join(format!("fairness-{}.json", cx.arch()));
    if fair_path.exists() {
        let f: FairnessReport = crate::io::read_json(&fair_path)?;
        let mut csv = String::from("w_acc,ad_unfair,ad_fair,ndcg10_unfair,ndcg10_fair\n");
        for (u, v) in f.unfair.results.iter().zip(&f.fair.results) {
            csv += &format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                u.weights.accuracy(),
                u.ad.unwrap_or(f64::NAN),
                v.ad.unwrap_or(f64::NAN),
                u.ndcg_at_10,
                v.ndcg_at_10
            );
        }
        crate::io::write_bytes(&out.join(format!("fairness-{}.csv", cx.arch())), csv.as_bytes())?;
        written += 1;
    }
    let lat_path = studies.join(format!("latency-{}.json", cx.arch()));
    if lat_path.exists() {
        let l: LatencyReport = crate::io::read_json(&lat_path)?;
        let csv = format!(
            "method,mean_ms,std_ms\nretrain,{:.3},{:.3}\nparagon,{:.3},{:.3}\n",
            l.retrain.mean_ms, l.retrain.std_ms, l.paragon.mean_ms, l.paragon.std_ms
        );
        crate::io::write_bytes(&out.join(format!("latency-{}.csv", cx.arch())), csv.as_bytes())?;
        written += 1;
    }
    if written == 0 {
        return Err(Error::Dependency {
            path: cx.sweep_dir(),
            producer: "sweep",
        });
    }
    println!("{written} table(s) in {}", out.display());
    cx.finish(&out, &[])
}

/// Exit code for a finished run: 0 success, 1 usage, 2 runtime.
pub fn exit_code(r: &Result<()>) -> i32 {
    match r {
        Ok(()) => 0,
        Err(e) if e.is_usage() => 1,
        Err(_) => 2,
    }
}

/// Parses `args`, runs the command and reports errors on stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let r = run(cli);
    if let Err(e) = &r {
        eprintln!("error: {e}");
    }
    exit_code(&r)
}

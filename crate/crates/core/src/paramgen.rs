//! Conditional diffusion over flattened adapter parameters, trained with
//! classifier-free guidance, and the MLP hypernetwork baseline.
//!
//! A normalized adapter vector is cut into fixed-width tokens, embedded and
//! run through a small pre-norm transformer that predicts the injected
//! noise. Preference weights enter through one of five conditioning paths;
//! a learned null embedding stands in for them in the unconditional branch.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapterfarm::AdapterCorpus;
use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{glorot, normal_init, Adam, AdamConfig, Linear, ParamSet, TensorSpec};
use crate::objectives::TaskWeights;
use crate::recmodel::{AdapterTensor, NormStats};

const LN_EPS: f32 = 1e-5;
const X0_MARGIN: f32 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Noise schedule; index `t − 1` holds step `t` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-4, 0.02);
            if steps == 1 {
                vec![hi]
            } else {
                (0..steps)
                    .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
                    .collect()
            }
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let x = (t / steps as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999))
                .collect()
        }
    };
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(DiffusionSchedule {
        kind,
        betas,
        alpha_bars,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Evenly strided subset of `n` training steps ending at `T`, with the
    /// per-step `β` recomputed so the marginals are preserved.
    pub fn respace(&self, n: usize) -> Result<SamplingPlan> {
        let total = self.steps();
        if n == 0 || n > total {
            return Err(Error::Config(format!("cannot sample with {n} of {total} steps")));
        }
        let timesteps: Vec<usize> = (1..=n)
            .map(|i| ((i * total) as f64 / n as f64).round() as usize)
            .collect();
        let alpha_bars: Vec<f64> = timesteps.iter().map(|&t| self.alpha_bar(t)).collect();
        let mut prev = 1.0;
        let betas = alpha_bars
            .iter()
            .map(|&ab| {
                let b = 1.0 - ab / prev;
                prev = ab;
                b
            })
            .collect();
        Ok(SamplingPlan {
            timesteps,
            alpha_bars,
            betas,
        })
    }
}

/// Sampling steps: entry `i` maps to training step `timesteps[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub timesteps: Vec<usize>,
    pub alpha_bars: Vec<f64>,
    pub betas: Vec<f64>,
}

/// `θ_t = √ᾱ_t·θ₀ + √(1−ᾱ_t)·ε`
pub fn forward_noise(theta0: &[f32], t: usize, eps: &[f32], sched: &DiffusionSchedule) -> Result<Vec<f32>> {
    if theta0.len() != eps.len() {
        return Err(Error::Shape(format!(
            "noise of length {} for a vector of length {}",
            eps.len(),
            theta0.len()
        )));
    }
    if t == 0 || t > sched.steps() {
        return Err(Error::Argument(format!("step {t} outside 1..={}", sched.steps())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    Ok(theta0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Pre,
    PrePost,
    PreAdaptive,
    PostAdaptive,
    AdaptiveNorm,
}

impl Conditioning {
    pub const ALL: [Conditioning; 5] = [
        Conditioning::Pre,
        Conditioning::PrePost,
        Conditioning::PreAdaptive,
        Conditioning::PostAdaptive,
        Conditioning::AdaptiveNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Conditioning::Pre => "pre",
            Conditioning::PrePost => "pre_post",
            Conditioning::PreAdaptive => "pre_adaptive",
            Conditioning::PostAdaptive => "post_adaptive",
            Conditioning::AdaptiveNorm => "adaptive_norm",
        }
    }
}

impl std::str::FromStr for Conditioning {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Conditioning::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown conditioning strategy {s:?}")))
    }
}

/// What the head emits before it is turned into a noise estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Epsilon,
    /// `v = √ᾱ·ε − √(1−ᾱ)·θ₀`; keeps the implied clean sample well
    /// conditioned at high noise where a raw ε head must be near-exact.
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub strategy: Conditioning,
    pub prediction: Prediction,
    pub depth: usize,
    pub width: usize,
    pub token_width: usize,
    pub cond_width: usize,
    pub mlp_ratio: usize,
    pub p_uncond: f64,
    pub guidance: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            strategy: Conditioning::AdaptiveNorm,
            prediction: Prediction::Velocity,
            depth: 2,
            width: 64,
            token_width: 64,
            cond_width: 64,
            mlp_ratio: 2,
            p_uncond: 0.1,
            guidance: 0.4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond {} outside [0, 1]", self.p_uncond)));
        }
        check_guidance(self.guidance)?;
        if self.depth == 0 || self.width == 0 || self.token_width == 0 || self.cond_width == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        Ok(())
    }
}

fn check_guidance(g: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&g) {
        return Err(Error::Config(format!("guidance scale {g} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Final learning rate as a fraction of `lr`, reached linearly.
    pub lr_floor: f32,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub sample_steps: usize,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 64,
            lr: 2e-3,
            lr_floor: 0.05,
            diffusion_steps: 1000,
            schedule: ScheduleKind::Linear,
            sample_steps: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Option<(usize, usize)>,
    qkv: [usize; 3],
    o: usize,
    ln2: Option<(usize, usize)>,
    ff1: Linear,
    ff2: Linear,
    /// adaptive-norm modulation: scale1, shift1, scale2, shift2
    ada: Option<[Linear; 4]>,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Linear,
    pos: usize,
    time1: Linear,
    time2: Linear,
    cond1: Linear,
    cond2: Linear,
    null: usize,
    gate: Option<(Linear, Linear)>,
    blocks: Vec<Block>,
    out_ln: (usize, usize),
    head: Linear,
}

/// The trained generator: denoiser weights, null embedding and corpus stats.
#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: DenoiserConfig,
    pub train: GeneratorTrainConfig,
    pub schedule: DiffusionSchedule,
    pub params: ParamSet,
    pub stats: NormStats,
    pub manifest: Vec<TensorSpec>,
    pub weight_len: usize,
    pub corpus_hash: String,
    pub losses: Vec<f64>,
    /// Clamp on the implied clean sample during sampling (normalized units).
    pub x0_bound: Option<f32>,
    layout: Layout,
}

fn sinusoid(t: usize, width: usize) -> Vec<f32> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin() as f32;
        out[half + i] = a.cos() as f32;
    }
    out
}

impl Generator {
    /// Untrained generator for a corpus shape.
    pub fn new(
        cfg: DenoiserConfig,
        train: GeneratorTrainConfig,
        param_len: usize,
        weight_len: usize,
        stats: NormStats,
        manifest: Vec<TensorSpec>,
    ) -> Result<Self> {
        cfg.validate()?;
        let schedule = make_schedule(train.diffusion_steps, train.schedule)?;
        schedule.respace(train.sample_steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let mut ps = ParamSet::new();
        let d = cfg.width;
        let c = cfg.token_width;
        let n_tok = param_len.div_ceil(c);
        let n_seq = n_tok
            + match cfg.strategy {
                Conditioning::Pre => 1,
                Conditioning::PrePost => 2,
                _ => 0,
            };
        let embed = Linear::new(&mut ps, &mut rng, "embed", c, d);
        let pos = ps.add("position", normal_init(&mut rng, n_seq, d, 0.02));
        let time1 = Linear::new(&mut ps, &mut rng, "time.1", d, cfg.cond_width);
        let time2 = Linear::new(&mut ps, &mut rng, "time.2", cfg.cond_width, d);
        let cond1 = Linear::new(&mut ps, &mut rng, "cond.1", weight_len, cfg.cond_width);
        let cond2 = Linear::new(&mut ps, &mut rng, "cond.2", cfg.cond_width, d);
        let null = ps.add("null", normal_init(&mut rng, 1, d, 0.02));
        let gate = matches!(cfg.strategy, Conditioning::PreAdaptive | Conditioning::PostAdaptive).then(|| {
            (
                Linear::new(&mut ps, &mut rng, "gate.logit", d, d),
                Linear::new(&mut ps, &mut rng, "gate.value", d, d),
            )
        });
        let adaptive = cfg.strategy == Conditioning::AdaptiveNorm;
        let hidden = d * cfg.mlp_ratio.max(1);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = |s: &str| format!("block{i}.{s}");
            let ln = |ps: &mut ParamSet, s: &str| {
                (!adaptive).then(|| {
                    (
                        ps.add(p(&format!("{s}.gain")), Mat::ones((1, d))),
                        ps.add(p(&format!("{s}.bias")), Mat::zeros((1, d))),
                    )
                })
            };
            let ln1 = ln(&mut ps, "ln1");
            let qkv = [
                ps.add(p("attn.q"), glorot(&mut rng, d, d)),
                ps.add(p("attn.k"), glorot(&mut rng, d, d)),
                ps.add(p("attn.v"), glorot(&mut rng, d, d)),
            ];
            let o = ps.add(p("attn.o"), glorot(&mut rng, d, d));
            let ln2 = ln(&mut ps, "ln2");
            let ff1 = Linear::new(&mut ps, &mut rng, &p("ffn.1"), d, hidden);
            let ff2 = Linear::new(&mut ps, &mut rng, &p("ffn.2"), hidden, d);
            let ada = adaptive.then(|| {
                [
                    Linear::zeros(&mut ps, &p("ada.scale1"), d, d),
                    Linear::zeros(&mut ps, &p("ada.shift1"), d, d),
                    Linear::zeros(&mut ps, &p("ada.scale2"), d, d),
                    Linear::zeros(&mut ps, &p("ada.shift2"), d, d),
                ]
            });
            blocks.push(Block {
                ln1,
                qkv,
                o,
                ln2,
                ff1,
                ff2,
                ada,
            });
        }
        let out_ln = (ps.add("out_ln.gain", Mat::ones((1, d))), ps.add("out_ln.bias", Mat::zeros((1, d))));
        let head = Linear::zeros(&mut ps, "head", d, c);
        Ok(Self {
            cfg,
            train,
            schedule,
            params: ps,
            stats,
            manifest,
            weight_len,
            corpus_hash: String::new(),
            losses: Vec::new(),
            x0_bound: None,
            layout: Layout {
                embed,
                pos,
                time1,
                time2,
                cond1,
                cond2,
                null,
                gate,
                blocks,
                out_ln,
                head,
            },
        })
    }

    pub fn for_corpus(cfg: DenoiserConfig, train: GeneratorTrainConfig, corpus: &AdapterCorpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot train a generator on an empty corpus".into()));
        }
        let mut g = Self::new(
            cfg,
            train,
            corpus.param_len(),
            corpus.weight_len(),
            corpus.stats.clone(),
            corpus.manifest.clone(),
        )?;
        g.corpus_hash = corpus.hash();
        let widest = (0..corpus.len())
            .flat_map(|i| corpus.normalized(i))
            .fold(0f32, |m, v| m.max(v.abs()));
        g.x0_bound = Some(X0_MARGIN * widest.max(1.0));
        Ok(g)
    }

    pub fn param_len(&self) -> usize {
        crate::recmodel::manifest_len(&self.manifest)
    }

    fn tokens(&self) -> usize {
        self.param_len().div_ceil(self.cfg.token_width)
    }

    /// Packs `B` vectors (padded with `pad`) into `B·n × C` token rows.
    fn pack(&self, rows: &[Vec<f32>]) -> Mat {
        let c = self.cfg.token_width;
        let n = self.tokens();
        let mut m = Mat::zeros((rows.len() * n, c));
        for (b, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                m[[b * n + j / c, j % c]] = *v;
            }
        }
        m
    }

    fn unpack(&self, m: &Mat, batch: usize) -> Vec<Vec<f32>> {
        let c = self.cfg.token_width;
        let n = self.tokens();
        let full = n * c;
        (0..batch)
            .map(|b| (0..full).map(|j| m[[b * n + j / c, j % c]]).collect())
            .collect()
    }

    fn ln(g: &mut Graph, p: &[Var], x: Var, (gain, bias): (usize, usize)) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let n = g.mul_row(n, p[gain]);
        g.add_row(n, p[bias])
    }

    /// `ε̂` for a batch: `x` holds padded noisy vectors as token rows,
    /// `cond[b]` is `None` for the null embedding.
    fn forward(&self, g: &mut Graph, p: &[Var], x: &Mat, t: &[usize], cond: &[Option<&[f64]>]) -> Var {
        let l = &self.layout;
        let bsz = t.len();
        let n = self.tokens();
        let d = self.cfg.width;
        let xv = g.constant(x.clone());
        let tok = l.embed.forward(g, p, xv);

        let rows: Vec<f32> = t.iter().flat_map(|&tb| sinusoid(tb, d)).collect();
        let tfeat = Mat::from_shape_vec((bsz, d), rows).expect("one row per sample");
        let tv = g.constant(tfeat);
        let te = l.time1.forward(g, p, tv);
        let te = g.silu(te);
        let te = l.time2.forward(g, p, te);

        let wl = self.weight_len;
        let wmat = Mat::from_shape_fn((bsz, wl), |(b, j)| cond[b].map_or(0.0, |w| w[j] as f32));
        let wv = g.constant(wmat);
        let ce = l.cond1.forward(g, p, wv);
        let ce = g.silu(ce);
        let ce = l.cond2.forward(g, p, ce);
        let with_null = g.concat_rows(&[ce, p[l.null]]);
        let pick: Vec<usize> = cond.iter().enumerate().map(|(b, c)| if c.is_some() { b } else { bsz }).collect();
        let ce = g.gather(with_null, pick);
        // per-sample conditioning vector: preference (or null) plus time
        let cvec = g.add(ce, te);

        let per_token = |b: usize| std::iter::repeat(b).take(n);
        let bcast: Vec<usize> = (0..bsz).flat_map(per_token).collect();

        let (mut h, seq) = match self.cfg.strategy {
            Conditioning::Pre | Conditioning::PrePost => {
                let both = g.concat_rows(&[tok, cvec]);
                let post = self.cfg.strategy == Conditioning::PrePost;
                let seq = n + 1 + post as usize;
                let mut order = Vec::with_capacity(bsz * seq);
                for b in 0..bsz {
                    order.push(bsz * n + b);
                    order.extend(b * n..(b + 1) * n);
                    if post {
                        order.push(bsz * n + b);
                    }
                }
                (g.gather(both, order), seq)
            }
            Conditioning::PreAdaptive => {
                let gated = self.gated(g, p, cvec);
                let gb = g.gather(gated, bcast.clone());
                (g.add(tok, gb), n)
            }
            Conditioning::PostAdaptive | Conditioning::AdaptiveNorm => {
                let tb = g.gather(te, bcast.clone());
                (g.add(tok, tb), n)
            }
        };
        let pos_rows: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
        let pe = g.gather(p[l.pos], pos_rows);
        h = g.add(h, pe);

        let seq_bcast: Vec<usize> = (0..bsz).flat_map(|b| std::iter::repeat(b).take(seq)).collect();
        let scale = 1.0 / (d as f32).sqrt();
        for blk in &l.blocks {
            let modulated = |g: &mut Graph, x: Var, ln: Option<(usize, usize)>, k: usize| -> Var {
                match (&blk.ada, ln) {
                    (Some(ada), _) => {
                        let nrm = g.layer_norm(x, LN_EPS);
                        let sc = ada[2 * k].forward(g, p, cvec);
                        let sh = ada[2 * k + 1].forward(g, p, cvec);
                        let sc = g.gather(sc, seq_bcast.clone());
                        let sh = g.gather(sh, seq_bcast.clone());
                        let m = g.mul(nrm, sc);
                        let y = g.add(nrm, m);
                        g.add(y, sh)
                    }
                    (None, Some(ln)) => Self::ln(g, p, x, ln),
                    (None, None) => unreachable!("non-adaptive blocks carry a norm"),
                }
            };
            let a = modulated(g, h, blk.ln1, 0);
            let q = g.matmul(a, p[blk.qkv[0]]);
            let k = g.matmul(a, p[blk.qkv[1]]);
            let v = g.matmul(a, p[blk.qkv[2]]);
            let mut heads = Vec::with_capacity(bsz);
            for b in 0..bsz {
                let qb = g.slice_rows(q, b * seq, seq);
                let kb = g.slice_rows(k, b * seq, seq);
                let vb = g.slice_rows(v, b * seq, seq);
                let s = g.matmul_t(qb, kb);
                let s = g.scale(s, scale);
                let s = g.softmax(s);
                heads.push(g.matmul(s, vb));
            }
            let att = g.concat_rows(&heads);
            let att = g.matmul(att, p[blk.o]);
            h = g.add(h, att);
            let f = modulated(g, h, blk.ln2, 1);
            let f = blk.ff1.forward(g, p, f);
            let f = g.silu(f);
            let f = blk.ff2.forward(g, p, f);
            h = g.add(h, f);
        }
        if self.cfg.strategy == Conditioning::PostAdaptive {
            let gated = self.gated(g, p, cvec);
            let gb = g.gather(gated, bcast);
            h = g.add(h, gb);
        }
        if matches!(self.cfg.strategy, Conditioning::Pre | Conditioning::PrePost) {
            let keep: Vec<usize> = (0..bsz).flat_map(|b| b * seq + 1..b * seq + 1 + n).collect();
            h = g.gather(h, keep);
        }
        let h = Self::ln(g, p, h, l.out_ln);
        let out = l.head.forward(g, p, h);
        match self.cfg.prediction {
            Prediction::Epsilon => out,
            Prediction::Velocity => {
                // ε̂ = √(1−ᾱ)·θ_t + √ᾱ·v̂
                let c = self.cfg.token_width;
                let ab: Vec<f64> = t.iter().map(|&s| self.schedule.alpha_bar(s)).collect();
                let skip = Mat::from_shape_fn((bsz * n, c), |(r, j)| (1.0 - ab[r / n]).sqrt() as f32 * x[[r, j]]);
                let scale = Mat::from_shape_fn((bsz * n, c), |(r, _)| ab[r / n].sqrt() as f32);
                let sv = g.constant(scale);
                let v = g.mul(out, sv);
                let sk = g.constant(skip);
                g.add(v, sk)
            }
        }
    }

    fn gated(&self, g: &mut Graph, p: &[Var], c: Var) -> Var {
        let (lg, lv) = self.layout.gate.as_ref().expect("gated strategy has gate weights");
        let a = lg.forward(g, p, c);
        let a = g.sigmoid(a);
        let v = lv.forward(g, p, c);
        g.mul(a, v)
    }

    /// Predicted noise for padded vectors `x` at step `t`.
    pub fn denoise(&self, x: &[Vec<f32>], t: &[usize], cond: &[Option<&[f64]>]) -> Result<Vec<Vec<f32>>> {
        let full = self.tokens() * self.cfg.token_width;
        if x.iter().any(|v| v.len() != full && v.len() != self.param_len()) {
            return Err(Error::Shape(format!("denoiser input must have {} values", self.param_len())));
        }
        if let Some(w) = cond.iter().flatten().find(|w| w.len() != self.weight_len) {
            return Err(Error::Shape(format!(
                "{} preference weights, generator expects {}",
                w.len(),
                self.weight_len
            )));
        }
        if let Some(bad) = t.iter().find(|&&s| s == 0 || s > self.schedule.steps()) {
            return Err(Error::Argument(format!("step {bad} outside 1..={}", self.schedule.steps())));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        Ok(self.denoise_bound(&mut g, &p, x, t, cond))
    }

    /// [`Self::denoise`] on a graph that already holds the bound parameters;
    /// the graph is left as it was found.
    fn denoise_bound(&self, g: &mut Graph, p: &[Var], x: &[Vec<f32>], t: &[usize], cond: &[Option<&[f64]>]) -> Vec<Vec<f32>> {
        let mark = g.len();
        let out = self.forward(g, p, &self.pack(x), t, cond);
        let mut v = self.unpack(g.value(out), x.len());
        g.truncate(mark);
        for (r, src) in v.iter_mut().zip(x) {
            r.truncate(src.len());
        }
        v
    }

    /// Denoising MSE on a fixed batch; `uncond` swaps every condition for null.
    pub fn eval_loss(&self, corpus: &AdapterCorpus, uncond: bool, seed: u64, samples: usize) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = self.make_batch(corpus, samples, &mut rng, if uncond { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let conds: Vec<Option<&[f64]>> = batch.cond.iter().map(|c| c.as_deref()).collect();
        let out = self.forward(&mut g, &p, &batch.x, &batch.t, &conds);
        let loss = g.mse(out, &batch.eps);
        Ok(g.scalar(loss) as f64)
    }

    fn make_batch(&self, corpus: &AdapterCorpus, size: usize, rng: &mut ChaCha8Rng, p_uncond: f64) -> Batch {
        let full = self.tokens() * self.cfg.token_width;
        let mut xs = Vec::with_capacity(size);
        let mut eps = Vec::with_capacity(size);
        let mut ts = Vec::with_capacity(size);
        let mut conds = Vec::with_capacity(size);
        for _ in 0..size {
            let i = rng.gen_range(0..corpus.len());
            let mut x0 = corpus.normalized(i);
            x0.resize(full, 0.0);
            let t = rng.gen_range(1..=self.schedule.steps());
            let e: Vec<f32> = (0..full).map(|_| rng.sample(StandardNormal)).collect();
            xs.push(forward_noise(&x0, t, &e, &self.schedule).expect("lengths match"));
            eps.push(e);
            ts.push(t);
            let drop = rng.gen_bool(p_uncond);
            conds.push((!drop).then(|| corpus.records[i].weights.0.clone()));
        }
        Batch {
            x: self.pack(&xs),
            eps: self.pack(&eps),
            t: ts,
            cond: conds,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

struct Batch {
    x: Mat,
    eps: Mat,
    t: Vec<usize>,
    cond: Vec<Option<Vec<f64>>>,
}

/// Fits the denoiser to the corpus; deterministic under `train.seed`.
pub fn train_generator(corpus: &AdapterCorpus, cfg: DenoiserConfig, train: GeneratorTrainConfig) -> Result<Generator> {
    let mut gen = Generator::for_corpus(cfg, train, corpus)?;
    let tc = gen.train.clone();
    let mut opt = Adam::new(
        AdamConfig {
            lr: tc.lr,
            clip_norm: 1.0,
            ..Default::default()
        },
        gen.params.values(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    for step in 0..tc.steps {
        let frac = step as f32 / tc.steps.max(1) as f32;
        opt.set_lr(tc.lr * (1.0 - (1.0 - tc.lr_floor) * frac));
        let batch = gen.make_batch(corpus, tc.batch_size, &mut rng, gen.cfg.p_uncond);
        let mut g = Graph::new();
        let p = gen.params.bind(&mut g, true);
        let conds: Vec<Option<&[f64]>> = batch.cond.iter().map(|c| c.as_deref()).collect();
        let out = gen.forward(&mut g, &p, &batch.x, &batch.t, &conds);
        let loss = g.mse(out, &batch.eps);
        let lv = g.scalar(loss) as f64;
        if !lv.is_finite() {
            return Err(Error::Training {
                epoch: step,
                message: "denoising loss is not finite".into(),
            });
        }
        let mut grads = g.backward(loss);
        let mut gs = gen.params.collect_grads(&p, &mut grads);
        opt.step_set(&mut gen.params, &mut gs);
        gen.losses.push(lv);
        if step % 500 == 0 {
            log::debug!("generator step {step}: loss {lv:.4}");
        }
    }
    Ok(gen)
}

/// Which branches the sampler evaluates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Guidance {
    /// `ε̃ = (1+γ)·ε(θ, w, t) − γ·ε(θ, t)`
    Cfg(f64),
    /// Conditional branch only.
    ConditionalOnly,
}

impl Generator {
    /// Generates one adapter for `w`, denormalized and wrapped in its manifest.
    pub fn sample_adapter(&self, w: &TaskWeights, guidance: f64, seed: u64) -> Result<AdapterTensor> {
        check_guidance(guidance)?;
        self.sample_with(w, Guidance::Cfg(guidance), seed)
    }

    /// Normalized-space sample, before denormalization.
    pub fn sample_normalized(&self, w: &TaskWeights, guidance: Guidance, seed: u64) -> Result<Vec<f32>> {
        if w.len() != self.weight_len {
            return Err(Error::Config(format!(
                "{} preference weights, generator trained on {}",
                w.len(),
                self.weight_len
            )));
        }
        let plan = self.schedule.respace(self.train.sample_steps)?;
        let full = self.tokens() * self.cfg.token_width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f32> = (0..full).map(|_| rng.sample(StandardNormal)).collect();
        let wv = w.as_slice();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        for i in (0..plan.timesteps.len()).rev() {
            let t = plan.timesteps[i];
            let eps: Vec<f32> = match guidance {
                Guidance::ConditionalOnly => self.denoise_bound(&mut g, &p, &[x.clone()], &[t], &[Some(wv)]).remove(0),
                Guidance::Cfg(gamma) => {
                    let mut both = self.denoise_bound(&mut g, &p, &[x.clone(), x.clone()], &[t, t], &[Some(wv), None]);
                    let u = both.pop().expect("two rows");
                    let c = both.pop().expect("two rows");
                    let (a, b) = ((1.0 + gamma) as f32, gamma as f32);
                    c.iter().zip(&u).map(|(ec, eu)| a * ec - b * eu).collect()
                }
            };
            let beta = plan.betas[i];
            let ab = plan.alpha_bars[i];
            let ab_prev = if i == 0 { 1.0 } else { plan.alpha_bars[i - 1] };
            // The posterior mean written through the implied clean sample; equal
            // to the plain ε update unless the clamp engages, which keeps early
            // high-noise steps from amplifying small ε errors into huge values.
            let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let c0 = (ab_prev.sqrt() * beta / (1.0 - ab)) as f32;
            let ct = ((1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab)) as f32;
            let sigma = beta.sqrt() as f32;
            let bound = self.x0_bound.unwrap_or(f32::INFINITY);
            let last = i == 0;
            for (xj, ej) in x.iter_mut().zip(&eps) {
                let x0 = ((*xj - sb * ej) / sa).clamp(-bound, bound);
                let mean = c0 * x0 + ct * *xj;
                *xj = if last {
                    mean
                } else {
                    let z: f32 = rng.sample(StandardNormal);
                    mean + sigma * z
                };
            }
        }
        x.truncate(self.param_len());
        Ok(x)
    }

    pub fn sample_with(&self, w: &TaskWeights, guidance: Guidance, seed: u64) -> Result<AdapterTensor> {
        let z = self.sample_normalized(w, guidance, seed)?;
        Ok(AdapterTensor {
            values: self.stats.denormalize(&z),
            manifest: self.manifest.clone(),
            stats: Some(self.stats.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GeneratorManifest {
    denoiser: DenoiserConfig,
    train: GeneratorTrainConfig,
    adapter_manifest: Vec<TensorSpec>,
    weight_len: usize,
    stats: NormStats,
    corpus_hash: String,
    x0_bound: Option<f32>,
    tensors: Vec<TensorSpec>,
    checksum: String,
    losses: Vec<f64>,
}

pub const GENERATOR_MANIFEST: &str = "generator.json";
pub const GENERATOR_WEIGHTS: &str = "generator.bin";

impl Generator {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let m = GeneratorManifest {
            denoiser: self.cfg.clone(),
            train: self.train.clone(),
            adapter_manifest: self.manifest.clone(),
            weight_len: self.weight_len,
            stats: self.stats.clone(),
            corpus_hash: self.corpus_hash.clone(),
            x0_bound: self.x0_bound,
            tensors: self.params.specs(),
            checksum: self.checksum(),
            losses: self.losses.clone(),
        };
        crate::io::write_json(&dir.join(GENERATOR_MANIFEST), &m)?;
        crate::io::write_f32(&dir.join(GENERATOR_WEIGHTS), &self.params.flatten())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: GeneratorManifest = crate::io::read_json(&dir.join(GENERATOR_MANIFEST))?;
        let p = crate::recmodel::manifest_len(&m.adapter_manifest);
        let mut g = Generator::new(m.denoiser, m.train, p, m.weight_len, m.stats, m.adapter_manifest)?;
        if g.params.specs() != m.tensors {
            return Err(Error::Config("generator weights do not match its configuration".into()));
        }
        g.params.load_flat(&crate::io::read_f32(&dir.join(GENERATOR_WEIGHTS))?)?;
        if g.checksum() != m.checksum {
            return Err(Error::Schema("generator checksum mismatch".into()));
        }
        g.corpus_hash = m.corpus_hash;
        g.losses = m.losses;
        g.x0_bound = m.x0_bound;
        Ok(g)
    }

    /// Content hash identifying this generator in cache keys.
    pub fn hash(&self) -> String {
        let mut bytes = serde_json::to_vec(&(&self.cfg, &self.train, &self.corpus_hash, self.x0_bound)).expect("serializable");
        bytes.extend(self.checksum().as_bytes());
        crate::io::checksum_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// Hypernetwork baseline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypernetConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 2000,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Two-hidden-layer MLP from preference weights to a normalized adapter.
#[derive(Debug, Clone)]
pub struct Hypernet {
    pub cfg: HypernetConfig,
    pub params: ParamSet,
    pub stats: NormStats,
    pub manifest: Vec<TensorSpec>,
    pub losses: Vec<f64>,
    layers: [Linear; 3],
}

impl Hypernet {
    pub fn new(cfg: HypernetConfig, weight_len: usize, stats: NormStats, manifest: Vec<TensorSpec>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamSet::new();
        let p = crate::recmodel::manifest_len(&manifest);
        let layers = [
            Linear::new(&mut ps, &mut rng, "l1", weight_len, cfg.hidden),
            Linear::new(&mut ps, &mut rng, "l2", cfg.hidden, cfg.hidden),
            Linear::new(&mut ps, &mut rng, "l3", cfg.hidden, p),
        ];
        Self {
            cfg,
            params: ps,
            stats,
            manifest,
            losses: Vec::new(),
            layers,
        }
    }

    fn forward(&self, g: &mut Graph, p: &[Var], w: Mat) -> Var {
        let x = g.constant(w);
        let h = self.layers[0].forward(g, p, x);
        let h = g.silu(h);
        let h = self.layers[1].forward(g, p, h);
        let h = g.silu(h);
        self.layers[2].forward(g, p, h)
    }

    pub fn predict_normalized(&self, w: &TaskWeights) -> Vec<f32> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let row = Array2::from_shape_fn((1, w.len()), |(_, j)| w.0[j] as f32);
        let out = self.forward(&mut g, &p, row);
        g.value(out).iter().copied().collect()
    }

    pub fn predict(&self, w: &TaskWeights) -> AdapterTensor {
        AdapterTensor {
            values: self.stats.denormalize(&self.predict_normalized(w)),
            manifest: self.manifest.clone(),
            stats: Some(self.stats.clone()),
        }
    }
}

/// Full-batch least squares from weights to normalized adapters.
pub fn hypernet_fit(corpus: &AdapterCorpus, cfg: HypernetConfig) -> Result<Hypernet> {
    if corpus.len() < 2 {
        return Err(Error::Config("hypernetwork needs at least 2 records".into()));
    }
    let mut net = Hypernet::new(cfg, corpus.weight_len(), corpus.stats.clone(), corpus.manifest.clone());
    let n = corpus.len();
    let wl = corpus.weight_len();
    let w = Array2::from_shape_fn((n, wl), |(i, j)| corpus.records[i].weights.0[j] as f32);
    let p = corpus.param_len();
    let mut target = Mat::zeros((n, p));
    for i in 0..n {
        for (j, v) in corpus.normalized(i).into_iter().enumerate() {
            target[[i, j]] = v;
        }
    }
    let mut opt = Adam::new(
        AdamConfig {
            lr: net.cfg.lr,
            ..Default::default()
        },
        net.params.values(),
    );
    for step in 0..net.cfg.steps {
        let mut g = Graph::new();
        let pv = net.params.bind(&mut g, true);
        let out = net.forward(&mut g, &pv, w.clone());
        let loss = g.mse(out, &target);
        let lv = g.scalar(loss) as f64;
        if !lv.is_finite() {
            return Err(Error::Training {
                epoch: step,
                message: "hypernetwork loss is not finite".into(),
            });
        }
        let mut grads = g.backward(loss);
        let mut gs = net.params.collect_grads(&pv, &mut grads);
        opt.step_set(&mut net.params, &mut gs);
        net.losses.push(lv);
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapterfarm::{CorpusRecord, Provenance, TuneConfig};

    #[test]
    fn schedule_properties() {
        let s = make_schedule(1, ScheduleKind::Linear).unwrap();
        assert!((s.alpha_bar(1) - (1.0 - s.betas[0])).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = make_schedule(1000, kind).unwrap();
            assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
            assert!(s.betas.iter().all(|b| *b > 0.0 && *b < 1.0));
        }
        assert!(make_schedule(1000, ScheduleKind::Linear).unwrap().alpha_bar(1000) < 1e-4);
        assert!(matches!(make_schedule(0, ScheduleKind::Linear), Err(Error::Config(_))));
    }

    #[test]
    fn respaced_plan_preserves_marginals() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let plan = s.respace(100).unwrap();
        assert_eq!(plan.timesteps.len(), 100);
        assert_eq!(*plan.timesteps.last().unwrap(), 1000);
        let mut prod = 1.0;
        for (b, ab) in plan.betas.iter().zip(&plan.alpha_bars) {
            prod *= 1.0 - b;
            assert!((prod - ab).abs() < 1e-12);
        }
        let full = s.respace(1000).unwrap();
        assert_eq!(full.betas.len(), 1000);
        assert!((full.betas[10] - s.betas[10]).abs() < 1e-12);
    }

    #[test]
    fn forward_noise_edges() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        let x = vec![0.5f32, -1.0];
        assert!(matches!(forward_noise(&x, 1, &[0.0], &s), Err(Error::Shape(_))));
        let clean = forward_noise(&x, 3, &[0.0, 0.0], &s).unwrap();
        let k = s.alpha_bar(3).sqrt() as f32;
        assert_eq!(clean, vec![0.5 * k, -1.0 * k]);
    }

    pub(crate) fn toy_corpus(n: usize, p: usize) -> AdapterCorpus {
        let manifest = vec![TensorSpec {
            name: "down.weight".into(),
            shape: vec![p],
        }];
        let records: Vec<CorpusRecord> = (0..n)
            .map(|i| {
                let a = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
                CorpusRecord {
                    weights: TaskWeights::acc_div(a),
                    seed: i as u64,
                    values: (0..p).map(|j| ((j as f64 * 0.3).sin() * (1.0 + a) + a) as f32).collect(),
                }
            })
            .collect();
        let stats = crate::adapterfarm::compute_stats(&records.iter().map(|r| r.values.clone()).collect::<Vec<_>>());
        AdapterCorpus {
            manifest,
            records,
            stats,
            provenance: Provenance {
                backbone_checksum: String::new(),
                tune: TuneConfig::default(),
                seed: 0,
            },
        }
    }

    fn small_cfg(strategy: Conditioning) -> (DenoiserConfig, GeneratorTrainConfig) {
        (
            DenoiserConfig {
                strategy,
                depth: 1,
                width: 16,
                token_width: 8,
                cond_width: 16,
                ..Default::default()
            },
            GeneratorTrainConfig {
                steps: 3,
                batch_size: 4,
                diffusion_steps: 50,
                sample_steps: 10,
                ..Default::default()
            },
        )
    }

    #[test]
    fn every_strategy_keeps_shape_and_is_deterministic() {
        let corpus = toy_corpus(4, 20);
        for s in Conditioning::ALL {
            let (c, t) = small_cfg(s);
            let g = train_generator(&corpus, c, t).unwrap();
            let x = vec![vec![0.1f32; 20], vec![-0.3f32; 20]];
            let w = [0.3, 0.7];
            let a = g.denoise(&x, &[5, 9], &[Some(&w), None]).unwrap();
            assert_eq!(a.len(), 2);
            assert!(a.iter().all(|r| r.len() == 20));
            assert_eq!(a, g.denoise(&x, &[5, 9], &[Some(&w), None]).unwrap());
            let ad = g.sample_adapter(&TaskWeights::acc_div(0.3), 0.4, 1).unwrap();
            assert_eq!(ad.values.len(), 20);
        }
        assert!("sideways".parse::<Conditioning>().is_err());
    }

    #[test]
    fn zero_guidance_equals_conditional_sampling() {
        let corpus = toy_corpus(4, 20);
        let (c, t) = small_cfg(Conditioning::AdaptiveNorm);
        let g = train_generator(&corpus, c, t).unwrap();
        let w = TaskWeights::acc_div(0.6);
        let a = g.sample_normalized(&w, Guidance::Cfg(0.0), 9).unwrap();
        let b = g.sample_normalized(&w, Guidance::ConditionalOnly, 9).unwrap();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(g.sample_adapter(&w, 1.5, 0).is_err());
    }

    #[test]
    fn untrained_generator_loss_is_noise_scale() {
        let corpus = toy_corpus(4, 20);
        let (mut c, mut t) = small_cfg(Conditioning::Pre);
        t.steps = 0;
        c.prediction = Prediction::Epsilon;
        let g = train_generator(&corpus, c.clone(), t.clone()).unwrap();
        let l = g.eval_loss(&corpus, false, 0, 256).unwrap();
        assert!((l - 1.0).abs() < 0.1, "{l}");
        c.prediction = Prediction::Velocity;
        let g = train_generator(&corpus, c, t).unwrap();
        let l = g.eval_loss(&corpus, false, 0, 256).unwrap();
        assert!(l > 0.0 && l < 1.0, "{l}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let corpus = toy_corpus(3, 20);
        let (c, t) = small_cfg(Conditioning::PrePost);
        let g = train_generator(&corpus, c, t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        g.save(dir.path()).unwrap();
        let back = Generator::load(dir.path()).unwrap();
        let w = TaskWeights::acc_div(0.2);
        assert_eq!(back.sample_adapter(&w, 0.4, 3).unwrap(), g.sample_adapter(&w, 0.4, 3).unwrap());
        assert_eq!(back.hash(), g.hash());
    }

    #[test]
    fn hypernet_untrained_is_finite_and_fit_interpolates() {
        let corpus = toy_corpus(2, 12);
        let cfg = HypernetConfig {
            steps: 0,
            ..Default::default()
        };
        let net = hypernet_fit(&corpus, cfg.clone()).unwrap();
        assert!(net.predict_normalized(&TaskWeights::acc_div(0.5)).iter().all(|v| v.is_finite()));
        let fitted = hypernet_fit(
            &corpus,
            HypernetConfig {
                steps: 1500,
                ..cfg
            },
        )
        .unwrap();
        assert!(*fitted.losses.last().unwrap() < 1e-4, "{}", fitted.losses.last().unwrap());
        let z = fitted.predict_normalized(&corpus.records[1].weights);
        let rmse = (z.iter().zip(corpus.normalized(1)).map(|(a, b)| (a - b).powi(2)).sum::<f32>() / z.len() as f32).sqrt();
        assert!(rmse < 0.05, "{rmse}");
        assert!(hypernet_fit(&toy_corpus(1, 12), HypernetConfig::default()).is_err());
    }
}

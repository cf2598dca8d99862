//! Sequential recommender backbones and the residual adapter on their last
//! layer.
//!
//! Three encoders share one scoring interface: a single-block causal
//! self-attention encoder, a GRU, and a self-attention encoder with
//! time-interval embeddings. The encoder output `h` for a history is turned
//! into candidate scores `s_c = (h + adapter(h)) · e_c` with the item
//! embedding table shared between input and output.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::data::{EvalSplit, InteractionDataset};
use crate::error::{Error, Result};
use crate::evalkit;
use crate::nn::{glorot, normal_init, Adam, AdamConfig, ParamSet, TensorSpec};
use crate::objectives::bpr_loss_grad;

const LN_EPS: f32 = 1e-5;
const MASKED: f32 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Attn,
    Recurrent,
    TimeAttn,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Attn => "attn",
            Arch::Recurrent => "recurrent",
            Arch::TimeAttn => "time-attn",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn" => Ok(Arch::Attn),
            "recurrent" => Ok(Arch::Recurrent),
            "time-attn" => Ok(Arch::TimeAttn),
            other => Err(Error::Config(format!("unknown backbone architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub arch: Arch,
    pub num_items: usize,
    pub dim: usize,
    pub max_len: usize,
    pub time_buckets: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn new(arch: Arch, num_items: usize, dim: usize, max_len: usize, seed: u64) -> Self {
        Self {
            arch,
            num_items,
            dim,
            max_len,
            time_buckets: 32,
            seed,
        }
    }
}

/// Parameter indices into the backbone's [`ParamSet`].
#[derive(Debug, Clone)]
enum Layout {
    Attn {
        item: usize,
        pos: usize,
        time: Option<usize>,
        ln1: (usize, usize),
        q: usize,
        k: usize,
        v: usize,
        o: usize,
        ln2: (usize, usize),
        ff1: (usize, usize),
        ff2: (usize, usize),
        out: (usize, usize),
    },
    Gru {
        item: usize,
        wx: [usize; 3],
        uh: [usize; 3],
        b: [usize; 3],
        out: (usize, usize),
    },
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub params: ParamSet,
    layout: Layout,
}

/// Sequences prepared for a batched forward pass: left-padded to `max_len`.
pub struct SeqBatch {
    /// `B·L` embedding rows (item index + 1; 0 is padding), batch-major.
    ids: Vec<usize>,
    times: Vec<usize>,
    /// Per sequence, number of padding slots on the left.
    pads: Vec<usize>,
    len: usize,
}

impl SeqBatch {
    pub fn new(seqs: &[&[u32]], times: Option<&[&[i64]]>, max_len: usize, buckets: usize) -> Self {
        let mut ids = Vec::with_capacity(seqs.len() * max_len);
        let mut tb = Vec::with_capacity(seqs.len() * max_len);
        let mut pads = Vec::with_capacity(seqs.len());
        for (b, seq) in seqs.iter().enumerate() {
            let seq = &seq[seq.len().saturating_sub(max_len)..];
            let pad = max_len - seq.len();
            pads.push(pad);
            ids.extend(std::iter::repeat(0).take(pad));
            ids.extend(seq.iter().map(|&i| i as usize + 1));
            tb.extend(std::iter::repeat(0).take(pad));
            match times {
                Some(ts) => {
                    let t = &ts[b][ts[b].len().saturating_sub(max_len)..];
                    for (j, &now) in t.iter().enumerate() {
                        let gap = if j == 0 { 0 } else { (now - t[j - 1]).max(0) };
                        tb.push(time_bucket(gap, buckets));
                    }
                }
                None => tb.extend(std::iter::repeat(0).take(seq.len())),
            }
        }
        Self {
            ids,
            times: tb,
            pads,
            len: max_len,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.pads.len()
    }
}

/// Log-scaled bucket of a time gap in seconds.
pub fn time_bucket(gap: i64, buckets: usize) -> usize {
    let b = ((1.0 + gap.max(0) as f64).log2()).floor() as usize;
    b.min(buckets.saturating_sub(1))
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamSet::new();
        let d = cfg.dim;
        let mut item_table = normal_init(&mut rng, cfg.num_items + 1, d, 0.1);
        item_table.row_mut(0).fill(0.0);
        let item = ps.add("item_embedding", item_table);
        let ones = || Mat::ones((1, d));
        let zeros = |n: usize| Mat::zeros((1, n));
        let layout = match cfg.arch {
            Arch::Attn | Arch::TimeAttn => {
                let pos = ps.add("position_embedding", normal_init(&mut rng, cfg.max_len, d, 0.1));
                let time = (cfg.arch == Arch::TimeAttn)
                    .then(|| ps.add("time_embedding", normal_init(&mut rng, cfg.time_buckets, d, 0.1)));
                let ln1 = (ps.add("ln1.gain", ones()), ps.add("ln1.bias", zeros(d)));
                let q = ps.add("attn.q", glorot(&mut rng, d, d));
                let k = ps.add("attn.k", glorot(&mut rng, d, d));
                let v = ps.add("attn.v", glorot(&mut rng, d, d));
                let o = ps.add("attn.o", glorot(&mut rng, d, d));
                let ln2 = (ps.add("ln2.gain", ones()), ps.add("ln2.bias", zeros(d)));
                let ff1 = (ps.add("ffn.1.weight", glorot(&mut rng, d, d)), ps.add("ffn.1.bias", zeros(d)));
                let ff2 = (ps.add("ffn.2.weight", glorot(&mut rng, d, d)), ps.add("ffn.2.bias", zeros(d)));
                let out = (ps.add("out_ln.gain", ones()), ps.add("out_ln.bias", zeros(d)));
                Layout::Attn {
                    item,
                    pos,
                    time,
                    ln1,
                    q,
                    k,
                    v,
                    o,
                    ln2,
                    ff1,
                    ff2,
                    out,
                }
            }
            Arch::Recurrent => {
                let mut wx = [0; 3];
                let mut uh = [0; 3];
                let mut b = [0; 3];
                for (g, name) in ["update", "reset", "candidate"].iter().enumerate() {
                    wx[g] = ps.add(format!("gru.{name}.input"), glorot(&mut rng, d, d));
                    uh[g] = ps.add(format!("gru.{name}.hidden"), glorot(&mut rng, d, d));
                    b[g] = ps.add(format!("gru.{name}.bias"), zeros(d));
                }
                let out = (ps.add("out_ln.gain", ones()), ps.add("out_ln.bias", zeros(d)));
                Layout::Gru { item, wx, uh, b, out }
            }
        };
        Self {
            cfg,
            params: ps,
            layout,
        }
    }

    fn item_param(&self) -> usize {
        match self.layout {
            Layout::Attn { item, .. } | Layout::Gru { item, .. } => item,
        }
    }

    /// Item embedding table, row `i + 1` for catalog item `i`.
    pub fn item_table(&self) -> &Mat {
        self.params.get(self.item_param())
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    fn affine_ln(g: &mut Graph, p: &[Var], x: Var, (gain, bias): (usize, usize)) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let n = g.mul_row(n, p[gain]);
        g.add_row(n, p[bias])
    }

    /// Encoder output for every position, `B·L × d`, batch-major.
    pub fn encode(&self, g: &mut Graph, p: &[Var], batch: &SeqBatch) -> Var {
        let l = batch.len;
        let bsz = batch.batch_size();
        let d = self.cfg.dim;
        match &self.layout {
            Layout::Attn {
                item,
                pos,
                time,
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                ff1,
                ff2,
                out,
            } => {
                let x = g.gather(p[*item], batch.ids.clone());
                let pos_rows: Vec<usize> = (0..bsz).flat_map(|_| 0..l).collect();
                let pe = g.gather(p[*pos], pos_rows);
                let mut x = g.add(x, pe);
                if let Some(t) = time {
                    let te = g.gather(p[*t], batch.times.clone());
                    x = g.add(x, te);
                }
                let h = Self::affine_ln(g, p, x, *ln1);
                let qm = g.matmul(h, p[*q]);
                let km = g.matmul(h, p[*k]);
                let vm = g.matmul(h, p[*v]);
                let scale = 1.0 / (d as f32).sqrt();
                let mut heads = Vec::with_capacity(bsz);
                for (b, &pad) in batch.pads.iter().enumerate() {
                    let qb = g.slice_rows(qm, b * l, l);
                    let kb = g.slice_rows(km, b * l, l);
                    let vb = g.slice_rows(vm, b * l, l);
                    let sc = g.matmul_t(qb, kb);
                    let sc = g.scale(sc, scale);
                    let mask = g.constant(Array2::from_shape_fn((l, l), |(i, j)| {
                        if j > i || j < pad {
                            MASKED
                        } else {
                            0.0
                        }
                    }));
                    let sc = g.add(sc, mask);
                    let att = g.softmax(sc);
                    heads.push(g.matmul(att, vb));
                }
                let att = g.concat_rows(&heads);
                let att = g.matmul(att, p[*o]);
                let x2 = g.add(x, att);
                let h2 = Self::affine_ln(g, p, x2, *ln2);
                let f = g.matmul(h2, p[ff1.0]);
                let f = g.add_row(f, p[ff1.1]);
                let f = g.relu(f);
                let f = g.matmul(f, p[ff2.0]);
                let f = g.add_row(f, p[ff2.1]);
                let x3 = g.add(x2, f);
                Self::affine_ln(g, p, x3, *out)
            }
            Layout::Gru { item, wx, uh, b, out } => {
                // time-major layout: row t·B + b
                let tm_ids: Vec<usize> = (0..l)
                    .flat_map(|t| (0..bsz).map(move |bi| (t, bi)))
                    .map(|(t, bi)| batch.ids[bi * l + t])
                    .collect();
                let x = g.gather(p[*item], tm_ids);
                let proj: Vec<Var> = (0..3).map(|i| g.matmul(x, p[wx[i]])).collect();
                let mut h = g.constant(Mat::zeros((bsz, d)));
                let mut states = Vec::with_capacity(l);
                for t in 0..l {
                    let xs: Vec<Var> = proj.iter().map(|&pr| g.slice_rows(pr, t * bsz, bsz)).collect();
                    let hz = g.matmul(h, p[uh[0]]);
                    let z = g.add(xs[0], hz);
                    let z = g.add_row(z, p[b[0]]);
                    let z = g.sigmoid(z);
                    let hr = g.matmul(h, p[uh[1]]);
                    let r = g.add(xs[1], hr);
                    let r = g.add_row(r, p[b[1]]);
                    let r = g.sigmoid(r);
                    let rh = g.mul(r, h);
                    let hn = g.matmul(rh, p[uh[2]]);
                    let n = g.add(xs[2], hn);
                    let n = g.add_row(n, p[b[2]]);
                    let n = g.tanh(n);
                    // h' = n + z ⊙ (h − n), frozen on padding steps
                    let diff = g.sub(h, n);
                    let zd = g.mul(z, diff);
                    let cand = g.add(n, zd);
                    let keep = Mat::from_shape_fn((bsz, d), |(bi, _)| if t < batch.pads[bi] { 0.0 } else { 1.0 });
                    let keep_v = g.constant(keep.clone());
                    let hold_v = g.constant(keep.mapv(|k| 1.0 - k));
                    let a = g.mul(keep_v, cand);
                    let bh = g.mul(hold_v, h);
                    h = g.add(a, bh);
                    states.push(h);
                }
                let all = g.concat_rows(&states);
                let order: Vec<usize> = (0..bsz).flat_map(|bi| (0..l).map(move |t| t * bsz + bi)).collect();
                let hs = g.gather(all, order);
                Self::affine_ln(g, p, hs, *out)
            }
        }
    }

    fn check_items(&self, items: &[u32]) -> Result<()> {
        match items.iter().find(|&&i| i as usize >= self.cfg.num_items) {
            Some(bad) => Err(Error::Lookup(bad.to_string())),
            None => Ok(()),
        }
    }

    /// Final-position representations for a list of histories, `B × d`.
    pub fn encode_histories(&self, seqs: &[&[u32]], times: Option<&[&[i64]]>) -> Result<Mat> {
        for s in seqs {
            self.check_items(s)?;
        }
        let d = self.cfg.dim;
        let l = self.cfg.max_len;
        let mut out = Mat::zeros((seqs.len(), d));
        const CHUNK: usize = 128;
        for start in (0..seqs.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(seqs.len());
            let t = times.map(|t| &t[start..end]);
            let batch = SeqBatch::new(&seqs[start..end], t, l, self.cfg.time_buckets);
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let h = self.encode(&mut g, &p, &batch);
            let hv = g.value(h);
            for b in 0..end - start {
                out.row_mut(start + b).assign(&hv.row(b * l + l - 1));
            }
        }
        Ok(out)
    }

    /// Scores `candidates` from representation `h` (length `d`).
    pub fn score_from_repr(&self, h: &[f32], candidates: &[u32]) -> Vec<f32> {
        let table = self.item_table();
        candidates
            .iter()
            .map(|&c| table.row(c as usize + 1).iter().zip(h).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// One score per candidate for a single history, optionally through an adapter.
    pub fn score(
        &self,
        history: &[u32],
        times: Option<&[i64]>,
        candidates: &[u32],
        adapter: Option<&Adapter>,
    ) -> Result<Vec<f32>> {
        if history.len() > self.cfg.max_len {
            return Err(Error::Argument(format!(
                "history of {} items exceeds max_len {}",
                history.len(),
                self.cfg.max_len
            )));
        }
        self.check_items(candidates)?;
        let t = times.map(|t| vec![t]);
        let h = self.encode_histories(&[history], t.as_deref())?;
        let h = match adapter {
            Some(a) => a.apply(&h)?,
            None => h,
        };
        Ok(self.score_from_repr(h.row(0).as_slice().expect("row is contiguous"), candidates))
    }

    pub fn needs_times(&self) -> bool {
        self.cfg.arch == Arch::TimeAttn
    }
}

/// Per-user input block for next-item training: the last `max_len` items of
/// the training prefix excluding its final item, predicting the item after each.
fn train_block(ds: &InteractionDataset, user: usize) -> (usize, usize) {
    let tl = ds.users[user].train_len();
    let l = ds.max_history.unwrap_or(usize::MAX);
    let start = tl.saturating_sub(1).saturating_sub(l);
    (start, tl.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackboneTrainReport {
    pub epoch_losses: Vec<f64>,
    pub valid_ndcg: Vec<f64>,
    pub initial_valid_ndcg: f64,
    pub best_epoch: Option<usize>,
}

/// Eval-split histories (and time windows) for every user.
pub fn eval_windows(ds: &InteractionDataset, split: EvalSplit) -> (Vec<&[u32]>, Vec<&[i64]>) {
    let mut seqs = Vec::with_capacity(ds.num_users());
    let mut times = Vec::with_capacity(ds.num_users());
    for u in 0..ds.num_users() {
        let (h, _) = ds.eval_example(u, split);
        seqs.push(h);
        let user = &ds.users[u];
        let end = match split {
            EvalSplit::Valid => user.len() - 2,
            EvalSplit::Test => user.len() - 1,
        };
        times.push(&user.timestamps[end - h.len()..end]);
    }
    (seqs, times)
}

/// Mean NDCG@10 of backbone-only scoring on an eval split.
pub fn backbone_ndcg(model: &Backbone, ds: &InteractionDataset, split: EvalSplit) -> Result<f64> {
    let (seqs, times) = eval_windows(ds, split);
    let reps = model.encode_histories(&seqs, model.needs_times().then_some(times.as_slice()))?;
    let mut total = 0.0;
    for u in 0..ds.num_users() {
        let cands = ds.eval_candidates(u, split)?;
        let scores = model.score_from_repr(reps.row(u).as_slice().expect("contiguous"), cands);
        let ranked = evalkit::rank_by_scores(cands, &scores);
        total += evalkit::ndcg_at_k(&ranked, cands[0], 10)?;
    }
    Ok(total / ds.num_users().max(1) as f64)
}

/// Trains a backbone with BPR over the fixed training candidates and keeps
/// the checkpoint with the best validation NDCG@10.
pub fn train_backbone(
    ds: &InteractionDataset,
    cfg: BackboneConfig,
    tc: &BackboneTrainConfig,
) -> Result<(Backbone, BackboneTrainReport)> {
    let cands = ds.candidates()?;
    let width = 1 + cands.n_neg_train;
    let mut model = Backbone::new(cfg);
    let mut report = BackboneTrainReport {
        initial_valid_ndcg: backbone_ndcg(&model, ds, EvalSplit::Valid)?,
        ..Default::default()
    };
    if tc.epochs == 0 {
        return Ok((model, report));
    }
    let mut best = (report.initial_valid_ndcg, model.params.clone());
    let mut opt = Adam::new(tc.adam.clone(), model.params.values());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let l = model.cfg.max_len;
    let mut users: Vec<usize> = (0..ds.num_users())
        .filter(|&u| ds.users[u].train_len() >= 2)
        .collect();

    for epoch in 0..tc.epochs {
        users.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_n = 0usize;
        for chunk in users.chunks(tc.batch_size.max(1)) {
            let mut seqs = Vec::with_capacity(chunk.len());
            let mut times = Vec::with_capacity(chunk.len());
            for &u in chunk {
                let (a, b) = train_block(ds, u);
                seqs.push(&ds.users[u].items[a..b]);
                times.push(&ds.users[u].timestamps[a..b]);
            }
            let batch = SeqBatch::new(&seqs, Some(&times), l, model.cfg.time_buckets);
            // rows of the output to score, and the candidate list for each
            let mut rows = Vec::new();
            let mut cand_rows = Vec::new();
            for (bi, &u) in chunk.iter().enumerate() {
                let n = seqs[bi].len();
                let first_slot = train_slot_offset(ds, u);
                for t in 0..n {
                    let slot = first_slot + t;
                    let c = &cands.train[u][slot * width..(slot + 1) * width];
                    for &item in c {
                        rows.push(bi * l + (l - n) + t);
                        cand_rows.push(item as usize + 1);
                    }
                }
            }
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let h = model.encode(&mut g, &p, &batch);
            let hr = g.gather(h, rows);
            let e = g.gather(p[model.item_param()], cand_rows);
            let sc = g.row_dot(hr, e);
            let sv = g.value(sc);
            let lists = sv.len() / width;
            let mut local = Mat::zeros(sv.dim());
            let mut loss = 0.0;
            for li in 0..lists {
                let base = li * width;
                let pos = sv[[base, 0]] as f64;
                let negs: Vec<f64> = (1..width).map(|j| sv[[base + j, 0]] as f64).collect();
                let (l_, dp, dn) = bpr_loss_grad(pos, &negs)?;
                loss += l_;
                local[[base, 0]] = (dp / lists as f64) as f32;
                for (j, d) in dn.iter().enumerate() {
                    local[[base + 1 + j, 0]] = (d / lists as f64) as f32;
                }
            }
            let mean_loss = loss / lists.max(1) as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: "BPR loss is not finite".into(),
                });
            }
            let root = g.injected_loss(sc, mean_loss as f32, local);
            let mut grads = g.backward(root);
            let mut gs = model.params.collect_grads(&p, &mut grads);
            opt.step_set(&mut model.params, &mut gs);
            // padding row stays zero
            model.params.get_mut(model.item_param()).row_mut(0).fill(0.0);
            epoch_loss += loss;
            epoch_n += lists;
        }
        if !model.params.all_finite() {
            return Err(Error::Training {
                epoch,
                message: "parameters became non-finite".into(),
            });
        }
        report.epoch_losses.push(epoch_loss / epoch_n.max(1) as f64);
        let v = backbone_ndcg(&model, ds, EvalSplit::Valid)?;
        report.valid_ndcg.push(v);
        log::debug!("backbone epoch {epoch}: loss {:.4} valid ndcg@10 {v:.4}", report.epoch_losses[epoch]);
        if v > best.0 {
            best = (v, model.params.clone());
            report.best_epoch = Some(epoch);
        }
    }
    model.params = best.1;
    Ok((model, report))
}

/// Index of the first training candidate slot used by [`train_block`].
fn train_slot_offset(ds: &InteractionDataset, user: usize) -> usize {
    let (start, _) = train_block(ds, user);
    start
}

/// Frozen final-layer features for every training pair used in tuning: one
/// row per (user, position) in the training blocks, with its candidate list.
#[derive(Debug, Clone)]
pub struct TrainFeatures {
    pub reps: Mat,
    pub candidates: Vec<Vec<u32>>,
    pub users: Vec<usize>,
}

impl Backbone {
    pub fn train_features(&self, ds: &InteractionDataset) -> Result<TrainFeatures> {
        let cands = ds.candidates()?;
        let width = 1 + cands.n_neg_train;
        let l = self.cfg.max_len;
        let d = self.cfg.dim;
        let users: Vec<usize> = (0..ds.num_users())
            .filter(|&u| ds.users[u].train_len() >= 2)
            .collect();
        let mut reps_rows: Vec<f32> = Vec::new();
        let mut out_c = Vec::new();
        let mut out_u = Vec::new();
        for chunk in users.chunks(128) {
            let mut seqs = Vec::new();
            let mut times = Vec::new();
            for &u in chunk {
                let (a, b) = train_block(ds, u);
                seqs.push(&ds.users[u].items[a..b]);
                times.push(&ds.users[u].timestamps[a..b]);
            }
            let batch = SeqBatch::new(&seqs, Some(&times), l, self.cfg.time_buckets);
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let h = self.encode(&mut g, &p, &batch);
            let hv = g.value(h);
            for (bi, &u) in chunk.iter().enumerate() {
                let n = seqs[bi].len();
                let first = train_slot_offset(ds, u);
                for t in 0..n {
                    reps_rows.extend(hv.row(bi * l + (l - n) + t).iter());
                    let slot = first + t;
                    out_c.push(cands.train[u][slot * width..(slot + 1) * width].to_vec());
                    out_u.push(u);
                }
            }
        }
        let n = out_c.len();
        Ok(TrainFeatures {
            reps: Mat::from_shape_vec((n, d), reps_rows).map_err(|e| Error::Shape(e.to_string()))?,
            candidates: out_c,
            users: out_u,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneManifest {
    pub config: BackboneConfig,
    pub tensors: Vec<TensorSpec>,
    pub checksum: String,
}

pub const BACKBONE_MANIFEST: &str = "backbone.json";
pub const BACKBONE_WEIGHTS: &str = "backbone.bin";

impl Backbone {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let m = BackboneManifest {
            config: self.cfg.clone(),
            tensors: self.params.specs(),
            checksum: self.checksum(),
        };
        crate::io::write_json(&dir.join(BACKBONE_MANIFEST), &m)?;
        crate::io::write_f32(&dir.join(BACKBONE_WEIGHTS), &self.params.flatten())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: BackboneManifest = crate::io::read_json(&dir.join(BACKBONE_MANIFEST))?;
        let mut model = Backbone::new(m.config);
        if model.params.specs() != m.tensors {
            return Err(Error::Shape("backbone manifest does not match architecture".into()));
        }
        model.params.load_flat(&crate::io::read_f32(&dir.join(BACKBONE_WEIGHTS))?)?;
        if model.checksum() != m.checksum {
            return Err(Error::Schema("backbone checksum mismatch".into()));
        }
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Adapter

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterShape {
    pub dim: usize,
    pub bottleneck: usize,
}

impl AdapterShape {
    /// Fixed flattening order: down.weight, down.bias, up.weight, up.bias.
    pub fn manifest(&self) -> Vec<TensorSpec> {
        let t = |name: &str, shape: Vec<usize>| TensorSpec {
            name: name.into(),
            shape,
        };
        vec![
            t("down.weight", vec![self.dim, self.bottleneck]),
            t("down.bias", vec![self.bottleneck]),
            t("up.weight", vec![self.bottleneck, self.dim]),
            t("up.bias", vec![self.dim]),
        ]
    }

    pub fn num_params(&self) -> usize {
        manifest_len(&self.manifest())
    }
}

pub fn manifest_len(m: &[TensorSpec]) -> usize {
    m.iter().map(|t| t.shape.iter().product::<usize>()).sum()
}

/// Per-coordinate mean and standard deviation over an adapter corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn normalize(&self, x: &[f32]) -> Vec<f32> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f32]) -> Vec<f32> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Flattened adapter parameters with their shape manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterTensor {
    pub values: Vec<f32>,
    pub manifest: Vec<TensorSpec>,
    pub stats: Option<NormStats>,
}

impl AdapterTensor {
    pub fn new(values: Vec<f32>, manifest: Vec<TensorSpec>) -> Result<Self> {
        let need = manifest_len(&manifest);
        if values.len() != need {
            return Err(Error::Shape(format!(
                "adapter has {} values, manifest needs {need}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            manifest,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Residual bottleneck `h + tanh(h·W_down + b_down)·W_up + b_up`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub down_w: Array2<f32>,
    pub down_b: Array1<f32>,
    pub up_w: Array2<f32>,
    pub up_b: Array1<f32>,
}

impl Adapter {
    /// Random down projection, zero up projection: an exact no-op.
    pub fn noop(shape: AdapterShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            down_w: glorot(&mut rng, shape.dim, shape.bottleneck),
            down_b: Array1::zeros(shape.bottleneck),
            up_w: Array2::zeros((shape.bottleneck, shape.dim)),
            up_b: Array1::zeros(shape.dim),
        }
    }

    pub fn shape(&self) -> AdapterShape {
        AdapterShape {
            dim: self.down_w.nrows(),
            bottleneck: self.down_w.ncols(),
        }
    }

    /// Bottleneck activations, `n × bottleneck`.
    pub fn hidden(&self, h: &Mat) -> Mat {
        let mut z = h.dot(&self.down_w);
        z += &self.down_b;
        z.mapv_inplace(f32::tanh);
        z
    }

    pub fn apply(&self, h: &Mat) -> Result<Mat> {
        if h.ncols() != self.down_w.nrows() {
            return Err(Error::Shape(format!(
                "adapter expects width {}, got {}",
                self.down_w.nrows(),
                h.ncols()
            )));
        }
        let a = self.hidden(h);
        let mut out = h + &a.dot(&self.up_w);
        out += &self.up_b;
        Ok(out)
    }

    pub fn flatten(&self) -> AdapterTensor {
        let mut v = Vec::with_capacity(self.shape().num_params());
        v.extend(self.down_w.iter());
        v.extend(self.down_b.iter());
        v.extend(self.up_w.iter());
        v.extend(self.up_b.iter());
        AdapterTensor {
            values: v,
            manifest: self.shape().manifest(),
            stats: None,
        }
    }

    pub fn unflatten(t: &AdapterTensor) -> Result<Self> {
        let m = &t.manifest;
        let names: Vec<&str> = m.iter().map(|s| s.name.as_str()).collect();
        if names != ["down.weight", "down.bias", "up.weight", "up.bias"] || m[0].shape.len() != 2 {
            return Err(Error::Shape(format!("unexpected adapter manifest {names:?}")));
        }
        let (dim, bn) = (m[0].shape[0], m[0].shape[1]);
        let shape = AdapterShape { dim, bottleneck: bn };
        if shape.manifest() != *m {
            return Err(Error::Shape("adapter manifest shapes are inconsistent".into()));
        }
        if t.values.len() != shape.num_params() {
            return Err(Error::Shape(format!(
                "adapter has {} values, manifest needs {}",
                t.values.len(),
                shape.num_params()
            )));
        }
        let v = &t.values;
        let mut off = 0;
        let mut take = |n: usize| {
            let s = v[off..off + n].to_vec();
            off += n;
            s
        };
        let sh = |e: ndarray::ShapeError| Error::Shape(e.to_string());
        Ok(Self {
            down_w: Array2::from_shape_vec((dim, bn), take(dim * bn)).map_err(sh)?,
            down_b: Array1::from(take(bn)),
            up_w: Array2::from_shape_vec((bn, dim), take(bn * dim)).map_err(sh)?,
            up_b: Array1::from(take(dim)),
        })
    }

    /// Gradient of `Σ dout ⊙ apply(h)` w.r.t. the parameters, flattened in
    /// manifest order. `h` and `dout` are `n × dim`.
    pub fn backward(&self, h: &Mat, dout: &Mat) -> Vec<f32> {
        let a = self.hidden(h);
        let d_up_w = a.t().dot(dout);
        let d_up_b = dout.sum_axis(Axis(0));
        let mut da = dout.dot(&self.up_w.t());
        ndarray::Zip::from(&mut da).and(&a).for_each(|d, &y| *d *= 1.0 - y * y);
        let d_down_w = h.t().dot(&da);
        let d_down_b = da.sum_axis(Axis(0));
        let mut g = Vec::with_capacity(self.shape().num_params());
        g.extend(d_down_w.iter());
        g.extend(d_down_b.iter());
        g.extend(d_up_w.iter());
        g.extend(d_up_b.iter());
        g
    }
}

/// `Backbone` output rows restricted to the rows in `idx`.
pub fn select_rows(m: &Mat, idx: &[usize]) -> Mat {
    let mut out = Mat::zeros((idx.len(), m.ncols()));
    for (i, &r) in idx.iter().enumerate() {
        out.row_mut(i).assign(&m.row(r));
    }
    out
}

#[allow(dead_code)]
fn last_row(m: &Mat) -> ndarray::ArrayView1<'_, f32> {
    m.slice(s![m.nrows() - 1, ..])
}

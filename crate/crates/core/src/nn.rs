//! Parameter storage, a dense layer and the Adam optimizer shared by the
//! backbone, the denoiser and the hypernetwork.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Grads, Mat, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// An ordered, named collection of 2-D parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.values[i]
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| TensorSpec {
                name: n.clone(),
                shape: vec![v.nrows(), v.ncols()],
            })
            .collect()
    }

    /// Binds every tensor as a graph leaf, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect()
    }

    pub fn collect_grads(&self, bound: &[Var], grads: &mut Grads) -> Vec<Option<Mat>> {
        bound.iter().map(|v| grads.take(*v)).collect()
    }

    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in &self.values {
            out.extend(v.iter().copied());
        }
        out
    }

    /// Overwrites values from a flat blob laid out as by [`ParamSet::flatten`].
    pub fn load_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "parameter blob has {} values, layout needs {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            let n = v.len();
            for (dst, src) in v.iter_mut().zip(&flat[off..off + n]) {
                *dst = *src;
            }
            off += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn checksum(&self) -> String {
        checksum_f32(&self.flatten())
    }
}

pub fn checksum_f32(values: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Uniform Glorot initialization.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f32).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

pub fn normal_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Mat {
    use rand_distr::{Distribution, Normal};
    let n = Normal::new(0.0, std).expect("std must be positive");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

/// `y = x·W + b`
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), glorot(rng, input, output));
        let bias = ps.add(format!("{name}.bias"), Mat::zeros((1, output)));
        Self { weight, bias }
    }

    pub fn zeros(ps: &mut ParamSet, name: &str, input: usize, output: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), Mat::zeros((input, output)));
        let bias = ps.add(format!("{name}.bias"), Mat::zeros((1, output)));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let y = g.matmul(x, p[self.weight]);
        g.add_row(y, p[self.bias])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 0.0,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[Mat]) -> Self {
        let m: Vec<Mat> = shapes.iter().map(|p| Mat::zeros(p.dim())).collect();
        Self {
            cfg,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &mut [Option<Mat>]) {
        if self.cfg.clip_norm > 0.0 {
            let norm = grads
                .iter()
                .flatten()
                .map(|g| g.iter().map(|x| x * x).sum::<f32>())
                .sum::<f32>()
                .sqrt();
            if norm > self.cfg.clip_norm {
                let k = self.cfg.clip_norm / norm;
                for g in grads.iter_mut().flatten() {
                    g.mapv_inplace(|x| x * k);
                }
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *p);
                });
        }
    }

    pub fn step_set(&mut self, params: &mut ParamSet, grads: &mut [Option<Mat>]) {
        self.step(&mut params.values, grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn flatten_roundtrip_and_length_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        Linear::new(&mut ps, &mut rng, "l", 3, 2);
        let flat = ps.flatten();
        assert_eq!(flat.len(), 8);
        let mut other = ps.clone();
        other.get_mut(0).fill(0.0);
        other.load_flat(&flat).unwrap();
        assert_eq!(other, ps);
        assert!(matches!(other.load_flat(&flat[..7]), Err(Error::Shape(_))));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = vec![array![[3.0f32, -2.0]]];
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &params,
        );
        for _ in 0..300 {
            let mut grads = vec![Some(params[0].mapv(|x| 2.0 * x))];
            opt.step(&mut params, &mut grads);
        }
        assert!(params[0].iter().all(|x| x.abs() < 1e-2));
    }
}

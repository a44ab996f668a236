//! Parameters, layers and the optimizer.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Names are layer-path prefixed
/// (`unet.down.0.conv1.weight`) and double as checkpoint blob names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.values.iter().enumerate().map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    /// Replaces every value by the same-named entry of `blobs`, checking shapes.
    pub fn load_named(&mut self, blobs: &[(String, Tensor<T>)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor<T>> = blobs.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (i, name) in self.names.iter().enumerate() {
            let blob = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if blob.shape() != self.values[i].shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: checkpoint shape {:?}, model expects {:?}",
                    blob.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = (*blob).clone();
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub fn uniform_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `k x k` convolution with "same" padding for stride 1.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add(format!("{name}.weight"), uniform_init(&[cout, cin, k, k], fan_in, rng));
        let bias = store.add(format!("{name}.bias"), uniform_init(&[cout], fan_in, rng));
        Conv2d { weight, bias, stride, pad: k / 2 }
    }

    /// Same as [`Conv2d::new`] with all weights and biases zero.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv2d { weight, bias, stride: 1, pad: k / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(p, self.weight);
        let b = g.param(p, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(&[fout, fin], fin, rng));
        let bias = store.add(format!("{name}.bias"), uniform_init(&[fout], fin, rng));
        Linear { weight, bias }
    }

    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, fin: usize, fout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[fout, fin]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fout]));
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(p, self.weight);
        let b = g.param(p, self.bias);
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// Uses the largest group count not above 8 that divides `channels`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let groups = (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        GroupNorm { gamma, beta, groups }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(p, self.gamma);
        let beta = g.param(p, self.beta);
        g.group_norm(x, self.groups, gamma, beta, T::of(1e-5))
    }
}

/// Sinusoidal embedding of integer timesteps, `[N] -> [N, dim]`
/// (first half sines, second half cosines).
pub fn timestep_embedding<T: Scalar>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[timesteps.len(), dim]);
    for (row, &t) in out.data_mut().chunks_mut(dim).zip(timesteps) {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            row[i] = T::of(arg.sin());
            row[half + i] = T::of(arg.cos());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

/// Adaptive-moment optimizer over a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let m: Vec<Tensor<T>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam { config, step: 0, v: m.clone(), m }
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> f64 {
        self.step += 1;
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::of(c.lr * bc2.sqrt() / bc1);
        let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps * bc2.sqrt()));
        let (one, clip) = (T::one(), T::of(clip));
        for (id, g) in grads {
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = store.get_mut(*id).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j] * clip;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                w[j] -= step_size * m[j] / (v[j].sqrt() + eps);
            }
        }
        norm
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn named_state(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (id, name, _) in store.iter() {
            out.push((format!("adam.m.{name}"), self.m[id.index()].clone()));
            out.push((format!("adam.v.{name}"), self.v[id.index()].clone()));
        }
        out
    }

    pub fn load_named_state(&mut self, store: &ParamStore<T>, blobs: &[(String, Tensor<T>)], step: u64) -> Result<()> {
        let by_name: HashMap<&str, &Tensor<T>> = blobs.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (id, name, value) in store.iter() {
            for (prefix, slot) in [("adam.m.", &mut self.m[id.index()]), ("adam.v.", &mut self.v[id.index()])] {
                let key = format!("{prefix}{name}");
                let blob = by_name.get(key.as_str()).ok_or_else(|| Error::Config(format!("checkpoint lacks {key}")))?;
                if blob.shape() != value.shape() {
                    return Err(Error::Config(format!("{key} has shape {:?}", blob.shape())));
                }
                *slot = (*blob).clone();
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.mul(x, x);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss).into_params();
            adam.update(&mut store, &grads);
        }
        assert!(store.get(id).max_abs() < 1e-2);
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::zeros(&[1]));
        let mut adam = Adam::new(AdamConfig { clip_norm: Some(1.0), ..Default::default() }, &store);
        let norm = adam.update(&mut store, &[(id, Tensor::full(&[1], 100.0))]);
        assert_eq!(norm, 100.0);
        assert!((adam.m[0].data()[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn group_count_divides_channels() {
        let mut store = ParamStore::<f32>::new();
        assert_eq!(GroupNorm::new(&mut store, "a", 32).groups, 8);
        assert_eq!(GroupNorm::new(&mut store, "b", 12).groups, 6);
        assert_eq!(GroupNorm::new(&mut store, "c", 7).groups, 7);
        assert_eq!(GroupNorm::new(&mut store, "d", 11).groups, 1);
    }

    #[test]
    fn embedding_at_zero() {
        let e = timestep_embedding::<f64>(&[0, 5], 8);
        assert_eq!(&e.data()[..8], &[0., 0., 0., 0., 1., 1., 1., 1.]);
        assert!((e.data()[8] - 5f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn init_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f32> = uniform_init(&[64, 9], 9, &mut rng);
        assert!(t.max_abs() <= 1.0 / 3.0);
    }
}

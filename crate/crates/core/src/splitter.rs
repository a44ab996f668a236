//! Frequency-domain information splitter.
//!
//! From the CNN prediction `x_cnn` and the noisy residual `x_t` it builds
//! five maps that are stacked along channels for the U-net:
//!
//! * `x_hf`: `x_cnn` high-passed by a Gaussian whose width `sigma` is
//!   predicted from the spectrum magnitude `|M|`;
//! * `x_lf`: `x_cnn` scaled by channel gates computed from `|M|`;
//! * `x_t'`: `x_t` scaled by channel gates computed from the timestep;
//! * `x_cnn` and `x_t` themselves.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::freq::{apply_filter, centered_distance, fft2d, gaussian_highpass, ifft2d, HighPassFilter, Spectrum};
use crate::image::Image;
use crate::nn::{timestep_embedding, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_REDUCTION: usize = 16;
pub const TIME_EMBED_DIM: usize = 32;

/// Squeeze-and-excitation with a residual connection:
/// `x * gates(x) + x`, gates from global average pooling through a
/// two-layer bottleneck (`C -> max(1, C / r) -> C`) and a sigmoid.
#[derive(Debug, Clone)]
pub struct ResSe {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
    pub hidden: usize,
}

impl ResSe {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        ResSe {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng),
            channels,
            hidden,
        }
    }

    /// Channel gates in `(0, 1)`, shape `[N, C, 1, 1]`.
    pub fn gates<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let n = g.shape(x)[0];
        let pooled = g.mean_hw(x);
        let pooled = g.reshape(pooled, &[n, self.channels]);
        let h = self.fc1.forward(g, p, pooled);
        let h = g.relu(h);
        let h = self.fc2.forward(g, p, h);
        let s = g.sigmoid(h);
        g.reshape(s, &[n, self.channels, 1, 1])
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let gates = self.gates(g, p, x);
        let scaled = g.mul(x, gates);
        g.add(scaled, x)
    }

    /// Applies the block to a single `[H, W, C]` array.
    pub fn apply<T: Scalar>(&self, p: &ParamStore<T>, features: &Image<T>) -> Result<Image<T>> {
        if features.channels() != self.channels {
            return Err(Error::Dimension(format!(
                "ResSE expects {} channels, got {}",
                self.channels,
                features.channels()
            )));
        }
        let mut g = Graph::inference();
        let x = g.constant(features.to_tensor());
        let y = self.forward(&mut g, p, x);
        Ok(Image::unbatch(&g.into_value(y)).remove(0))
    }
}

/// Channel gates computed from the sinusoidal embedding of `t`.
#[derive(Debug, Clone)]
pub struct TimeGate {
    pub fc1: Linear,
    pub fc2: Linear,
    pub embed_dim: usize,
    pub channels: usize,
}

impl TimeGate {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        embed_dim: usize,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = (embed_dim / reduction.max(1)).max(1);
        TimeGate {
            fc1: Linear::new(store, &format!("{name}.fc1"), embed_dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng),
            embed_dim,
            channels,
        }
    }

    pub fn gates<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, t: &[usize]) -> Var {
        let emb = g.constant(timestep_embedding(t, self.embed_dim));
        let h = self.fc1.forward(g, p, emb);
        let h = g.relu(h);
        let h = self.fc2.forward(g, p, h);
        let s = g.sigmoid(h);
        g.reshape(s, &[t.len(), self.channels, 1, 1])
    }
}

/// `min(s + l/2, l)`.
pub fn sigma_from_reduced<T: Scalar>(reduced: T, l: usize) -> T {
    let l = T::of_usize(l);
    (reduced + l / T::of(2.0)).min(l)
}

/// `d sigma`-response of the Gaussian high-pass: `-(D^2 / sigma^3) exp(-D^2 / (2 sigma^2))`.
fn highpass_sigma_derivative<T: Scalar>(h: usize, w: usize, sigma: T) -> Result<HighPassFilter<T>> {
    let mut resp = Vec::with_capacity(h * w);
    let s3 = sigma * sigma * sigma;
    let two_var = T::of(2.0) * sigma * sigma;
    for u in 0..h {
        for v in 0..w {
            let d2 = {
                let d: T = centered_distance(h, w, u, v);
                d * d
            };
            resp.push(-(d2 / s3) * (-d2 / two_var).exp());
        }
    }
    HighPassFilter::from_response(h, w, resp)
}

/// `x_hf[n] = ifft(H(sigma[n]) * M[n])` as a graph node differentiable in `sigma`.
fn highpass_node<T: Scalar>(g: &mut Graph<T>, spectra: Vec<Spectrum<T>>, sigma: Var) -> Result<Var> {
    let n = spectra.len();
    let (h, w, c) = (spectra[0].height(), spectra[0].width(), spectra[0].channels());
    let mut data = Vec::with_capacity(n * c * h * w);
    for (i, spec) in spectra.iter().enumerate() {
        let s = g.value(sigma).data()[i];
        let filter = gaussian_highpass(h, w, s)?;
        data.extend_from_slice(ifft2d(&apply_filter(spec, &filter)?)?.data());
    }
    let value = Tensor::new(&[n, c, h, w], data)?;
    Ok(g.custom(&[sigma], value, move |parents, _, grad| {
        let sig = parents[0];
        let d = Tensor::from_fn(sig.shape(), |i| {
            let filter = highpass_sigma_derivative(h, w, sig.data()[i]).expect("filter size matches");
            let dy = ifft2d(&apply_filter(&spectra[i], &filter).expect("filter size matches")).expect("valid spectrum");
            dy.data().iter().zip(grad.item(i)).map(|(&a, &b)| a * b).sum()
        });
        vec![Some(d)]
    }))
}

/// Graph handles of one splitter pass.
#[derive(Debug, Clone, Copy)]
pub struct SplitterVars {
    pub x_hf: Var,
    pub x_lf: Var,
    pub x_t_denoised: Var,
    pub stacked: Var,
    /// `[N]`
    pub sigma: Var,
    pub lf_gates: Var,
    pub time_gates: Var,
}

/// Materialized splitter outputs for an `[N, C, H, W]` batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitterOutput<T> {
    pub x_hf: Tensor<T>,
    pub x_lf: Tensor<T>,
    pub x_t_denoised: Tensor<T>,
    /// `[N, 5C, H, W]`
    pub stacked: Tensor<T>,
    pub sigma: Vec<T>,
    pub sigma_gates: Tensor<T>,
    pub lf_gates: Tensor<T>,
    pub time_gates: Tensor<T>,
}

/// Three independent gate networks: one feeding the sigma estimate, one
/// producing the low-frequency gates, one gating `x_t` by timestep.
#[derive(Debug, Clone)]
pub struct FdInfoSplitter {
    pub sigma_se: ResSe,
    pub lowpass_se: ResSe,
    pub time_gate: TimeGate,
    pub channels: usize,
}

impl FdInfoSplitter {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Self {
        FdInfoSplitter {
            sigma_se: ResSe::new(store, &format!("{name}.sigma_se"), channels, reduction, rng),
            lowpass_se: ResSe::new(store, &format!("{name}.lowpass_se"), channels, reduction, rng),
            time_gate: TimeGate::new(store, &format!("{name}.time_gate"), TIME_EMBED_DIM, channels, reduction, rng),
            channels,
        }
    }

    /// Number of channels of the stacked output.
    pub fn out_channels(&self) -> usize {
        5 * self.channels
    }

    fn check(&self, x_cnn: &[usize], x_t: &[usize], n_t: usize) -> Result<()> {
        if x_cnn != x_t || x_cnn.len() != 4 || x_cnn[1] != self.channels || n_t != x_cnn[0] {
            return Err(Error::Dimension(format!(
                "splitter needs matching [N, {}, H, W] inputs and N timesteps, got {x_cnn:?}, {x_t:?}, {n_t} timesteps",
                self.channels
            )));
        }
        Ok(())
    }

    /// Sigma per image from the magnitude spectrum of `x_cnn`.
    fn sigma_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, mag: Var, l: usize) -> Var {
        let se = self.sigma_se.forward(g, p, mag);
        let reduced = g.mean_per_item(se);
        let shifted = g.affine(reduced, T::one(), T::of_usize(l) / T::of(2.0));
        g.clamp_max(shifted, T::of_usize(l))
    }

    /// Builds the splitter on `g`. `x_cnn` is a constant; `x_t` may carry
    /// gradients.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x_cnn: &Tensor<T>,
        x_t: Var,
        t: &[usize],
    ) -> Result<SplitterVars> {
        self.check(x_cnn.shape(), g.shape(x_t), t.len())?;
        let (_, _, h, w) = x_cnn.dims4();
        let spectra = Image::unbatch(x_cnn).iter().map(fft2d).collect::<Result<Vec<_>>>()?;
        let mags: Vec<Image<T>> = spectra.iter().map(|s| s.magnitude()).collect();
        let mag = g.constant(Image::batch(&mags)?);
        let sigma = self.sigma_graph(g, p, mag, h.min(w));
        let x_hf = highpass_node(g, spectra, sigma)?;
        let cnn = g.constant(x_cnn.clone());
        let lf_gates = self.lowpass_se.gates(g, p, mag);
        let x_lf = g.mul(cnn, lf_gates);
        let time_gates = self.time_gate.gates(g, p, t);
        let x_t_denoised = g.mul(x_t, time_gates);
        let stacked = g.concat(&[x_hf, x_lf, x_t_denoised, cnn, x_t]);
        Ok(SplitterVars { x_hf, x_lf, x_t_denoised, stacked, sigma, lf_gates, time_gates })
    }

    /// Inference pass returning every intermediate.
    pub fn split<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x_cnn: &Tensor<T>,
        x_t: &Tensor<T>,
        t: &[usize],
    ) -> Result<SplitterOutput<T>> {
        let mut g = Graph::inference();
        let xt = g.constant(x_t.clone());
        let v = self.forward_graph(&mut g, p, x_cnn, xt, t)?;
        let mags = Image::unbatch(x_cnn)
            .iter()
            .map(|im| fft2d(im).map(|s| s.magnitude()))
            .collect::<Result<Vec<_>>>()?;
        let mag = g.constant(Image::batch(&mags)?);
        let sigma_gates = self.sigma_se.gates(&mut g, p, mag);
        Ok(SplitterOutput {
            x_hf: g.value(v.x_hf).clone(),
            x_lf: g.value(v.x_lf).clone(),
            x_t_denoised: g.value(v.x_t_denoised).clone(),
            stacked: g.value(v.stacked).clone(),
            sigma: g.value(v.sigma).data().to_vec(),
            sigma_gates: g.value(sigma_gates).clone(),
            lf_gates: g.value(v.lf_gates).clone(),
            time_gates: g.value(v.time_gates).clone(),
        })
    }

    /// Sigma for one spectrum, computed independently of [`Self::split`].
    pub fn adaptive_sigma<T: Scalar>(&self, p: &ParamStore<T>, spectrum: &Spectrum<T>) -> Result<T> {
        let mut g = Graph::inference();
        let mag = g.constant(spectrum.magnitude().to_tensor());
        if g.shape(mag)[1] != self.channels {
            return Err(Error::Dimension(format!("spectrum has {} channels", spectrum.channels())));
        }
        let s = self.sigma_graph(&mut g, p, mag, spectrum.height().min(spectrum.width()));
        Ok(g.value(s).data()[0])
    }
}

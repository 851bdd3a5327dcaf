//! Network parameters, forward pass and backpropagation through time.

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cell::{CellParams, RecurrentState, StepCache};
use super::{FeatureLayout, ForecastConfig, ForecastError, TrainingSample};

/// Samples per gradient chunk; chunk sums are added in index order so the
/// result does not depend on the thread count.
pub const GRADIENT_CHUNK: usize = 8;

/// Per-channel standardisation fitted on training windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub encoder_mean: Vec<f64>,
    pub encoder_std: Vec<f64>,
    pub decoder_mean: Vec<f64>,
    pub decoder_std: Vec<f64>,
}

fn moments(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for r in rows {
        n += 1;
        for k in 0..dim {
            sum[k] += r[k];
            sq[k] += r[k] * r[k];
        }
    }
    if n == 0 {
        return (vec![0.0; dim], vec![1.0; dim]);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = (0..dim)
        .map(|k| {
            let v = (sq[k] / n as f64 - mean[k] * mean[k]).max(0.0).sqrt();
            if v > 1e-9 {
                v
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl Scaler {
    pub fn identity(encoder_dim: usize, decoder_dim: usize) -> Self {
        Self {
            encoder_mean: vec![0.0; encoder_dim],
            encoder_std: vec![1.0; encoder_dim],
            decoder_mean: vec![0.0; decoder_dim],
            decoder_std: vec![1.0; decoder_dim],
        }
    }

    pub fn fit(samples: &[TrainingSample], layout: &FeatureLayout) -> Self {
        let (encoder_mean, encoder_std) = moments(samples.iter().flat_map(|s| s.encoder_inputs.iter().cloned()), layout.encoder_dim());
        let (decoder_mean, decoder_std) = moments(
            samples.iter().flat_map(|s| {
                s.decoder_gm.iter().zip(&s.decoder_macro).map(|(g, m)| g.iter().chain(m).copied().collect::<Vec<f64>>())
            }),
            layout.decoder_dim(),
        );
        Self {
            encoder_mean,
            encoder_std,
            decoder_mean,
            decoder_std,
        }
    }

    pub fn encoder(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(k, v)| (v - self.encoder_mean[k]) / self.encoder_std[k]).collect()
    }

    pub fn decoder(&self, anchor: &[f64], macros: &[f64]) -> Vec<f64> {
        anchor
            .iter()
            .chain(macros)
            .enumerate()
            .map(|(k, v)| (v - self.decoder_mean[k]) / self.decoder_std[k])
            .collect()
    }
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub encoder: CellParams,
    pub decoder: CellParams,
    /// `targets × hidden`.
    pub readout_w: Array2<f64>,
    pub readout_b: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 6] = ["encoder.w", "encoder.b", "decoder.w", "decoder.b", "readout.w", "readout.b"];

impl Params {
    pub fn init<R: Rng + ?Sized>(layout: &FeatureLayout, hidden_dim: usize, rng: &mut R) -> Self {
        let encoder = CellParams::init(layout.encoder_dim(), hidden_dim, rng);
        let decoder = CellParams::init(layout.decoder_dim(), hidden_dim, rng);
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let n = layout.targets.len();
        let readout_w = Array2::from_shape_fn((n, hidden_dim), |_| rng.gen_range(-bound..bound));
        let readout_b = Array1::from_shape_fn(n, |_| rng.gen_range(-bound..bound));
        Self {
            encoder,
            decoder,
            readout_w,
            readout_b,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            readout_w: Array2::zeros(self.readout_w.raw_dim()),
            readout_b: Array1::zeros(self.readout_b.raw_dim()),
        }
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.encoder.w.as_slice().expect("standard layout"),
            self.encoder.b.as_slice().expect("standard layout"),
            self.decoder.w.as_slice().expect("standard layout"),
            self.decoder.b.as_slice().expect("standard layout"),
            self.readout_w.as_slice().expect("standard layout"),
            self.readout_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.encoder.w.as_slice_mut().expect("standard layout"),
            self.encoder.b.as_slice_mut().expect("standard layout"),
            self.decoder.w.as_slice_mut().expect("standard layout"),
            self.decoder.b.as_slice_mut().expect("standard layout"),
            self.readout_w.as_slice_mut().expect("standard layout"),
            self.readout_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn shapes(&self) -> [Vec<usize>; 6] {
        [
            self.encoder.w.shape().to_vec(),
            self.encoder.b.shape().to_vec(),
            self.decoder.w.shape().to_vec(),
            self.decoder.b.shape().to_vec(),
            self.readout_w.shape().to_vec(),
            self.readout_b.shape().to_vec(),
        ]
    }

    pub fn add_assign(&mut self, other: &Params) {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += v;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn zero_readout(&mut self) {
        self.readout_w.fill(0.0);
        self.readout_b.fill(0.0);
    }

    pub fn readout(&self, h: &[f64]) -> Vec<f64> {
        let hd = h.len();
        let w = self.readout_w.as_slice().expect("standard layout");
        (0..self.readout_b.len())
            .map(|r| self.readout_b[r] + w[r * hd..(r + 1) * hd].iter().zip(h).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

/// A trained (or freshly initialised) forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ForecastConfig,
    pub layout: FeatureLayout,
    pub scaler: Scaler,
    pub params: Params,
    /// Hash of the panel the model was trained on.
    pub data_hash: String,
}

impl ModelState {
    pub fn new<R: Rng + ?Sized>(config: ForecastConfig, layout: FeatureLayout, scaler: Scaler, rng: &mut R) -> Self {
        let params = Params::init(&layout, config.hidden_dim, rng);
        Self {
            config,
            layout,
            scaler,
            params,
            data_hash: String::new(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.params.encoder.hidden_dim
    }

    pub fn encode(&self, inputs: &[Vec<f64>]) -> Result<RecurrentState, ForecastError> {
        let mut s = RecurrentState::zeros(self.hidden_dim());
        for x in inputs {
            s = self.params.encoder.step(&self.scaler.encoder(x), &s)?;
        }
        Ok(s)
    }

    /// Encoder hidden activations after each step.
    pub fn encoder_states(&self, inputs: &[Vec<f64>]) -> Result<Vec<RecurrentState>, ForecastError> {
        let mut s = RecurrentState::zeros(self.hidden_dim());
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            s = self.params.encoder.step(&self.scaler.encoder(x), &s)?;
            out.push(s.clone());
        }
        Ok(out)
    }

    /// One decoder step; returns the new state and the residual `O`.
    pub fn decoder_step(&self, anchor: &[f64], macros: &[f64], state: &RecurrentState) -> Result<(RecurrentState, Vec<f64>), ForecastError> {
        let s = self.params.decoder.step(&self.scaler.decoder(anchor, macros), state)?;
        let o = self.params.readout(&s.h);
        Ok((s, o))
    }

    /// Teacher-forced residuals for every decoder step of a window.
    pub fn forward(&self, sample: &TrainingSample) -> Result<Vec<Vec<f64>>, ForecastError> {
        let mut s = self.encode(&sample.encoder_inputs)?;
        let mut out = Vec::with_capacity(sample.decoder_gm.len());
        for (g, m) in sample.decoder_gm.iter().zip(&sample.decoder_macro) {
            let (next, o) = self.decoder_step(g, m, &s)?;
            s = next;
            out.push(o);
        }
        Ok(out)
    }
}

fn sample_gradient(model: &ModelState, sample: &TrainingSample, norm: f64, grad: &mut Params) -> Result<f64, ForecastError> {
    let p = &model.params;
    let hd = model.hidden_dim();
    let mut enc_caches: Vec<StepCache> = Vec::with_capacity(sample.encoder_inputs.len());
    let mut s = RecurrentState::zeros(hd);
    for x in &sample.encoder_inputs {
        let (next, cache) = p.encoder.step_cached(&model.scaler.encoder(x), &s)?;
        enc_caches.push(cache);
        s = next;
    }
    let residual_labels = sample.residual_labels();
    let mut dec_caches = Vec::with_capacity(sample.decoder_gm.len());
    let mut d_out = Vec::with_capacity(sample.decoder_gm.len());
    let mut hs = Vec::with_capacity(sample.decoder_gm.len());
    let mut loss = 0.0;
    for ((g, m), r) in sample.decoder_gm.iter().zip(&sample.decoder_macro).zip(&residual_labels) {
        let (next, cache) = p.decoder.step_cached(&model.scaler.decoder(g, m), &s)?;
        let o = p.readout(&next.h);
        let mut d = Vec::with_capacity(o.len());
        for (ok, rk) in o.iter().zip(r) {
            let e = ok - rk;
            loss += e * e;
            d.push(2.0 * e / norm);
        }
        hs.push(next.h.clone());
        dec_caches.push(cache);
        d_out.push(d);
        s = next;
    }
    let ntar = p.readout_b.len();
    let w = p.readout_w.as_slice().expect("standard layout");
    let mut dh = vec![0.0; hd];
    let mut dc = vec![0.0; hd];
    for k in (0..dec_caches.len()).rev() {
        {
            let gw = grad.readout_w.as_slice_mut().expect("standard layout");
            for r in 0..ntar {
                let d = d_out[k][r];
                grad.readout_b[r] += d;
                for j in 0..hd {
                    gw[r * hd + j] += d * hs[k][j];
                    dh[j] += d * w[r * hd + j];
                }
            }
        }
        let (_, dhp, dcp) = p.decoder.backward(&dec_caches[k], &dh, &dc, &mut grad.decoder);
        dh = dhp;
        dc = dcp;
    }
    for cache in enc_caches.iter().rev() {
        let (_, dhp, dcp) = p.encoder.backward(cache, &dh, &dc, &mut grad.encoder);
        dh = dhp;
        dc = dcp;
    }
    Ok(loss / norm)
}

/// Mean squared residual error over every step and target of the batch,
/// with its gradient.
pub fn loss_and_gradients(model: &ModelState, batch: &[&TrainingSample]) -> Result<(f64, Params), ForecastError> {
    let per_sample = batch.first().map(|s| s.labels.len() * model.layout.targets.len()).unwrap_or(0);
    let norm = (batch.len() * per_sample).max(1) as f64;
    let chunks: Vec<Result<(f64, Params), ForecastError>> = batch
        .par_chunks(GRADIENT_CHUNK)
        .map(|chunk| {
            let mut g = model.params.zeros_like();
            let mut l = 0.0;
            for s in chunk {
                l += sample_gradient(model, s, norm, &mut g)?;
            }
            Ok((l, g))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = model.params.zeros_like();
    for c in chunks {
        let (l, g) = c?;
        loss += l;
        grad.add_assign(&g);
    }
    Ok((loss, grad))
}

/// Loss without gradients.
pub fn loss(model: &ModelState, samples: &[TrainingSample]) -> Result<f64, ForecastError> {
    let per: Vec<Result<(f64, usize), ForecastError>> = samples
        .par_iter()
        .map(|s| {
            let o = model.forward(s)?;
            let r = s.residual_labels();
            let mut e = 0.0;
            let mut n = 0;
            for (ok, rk) in o.iter().zip(&r) {
                for (a, b) in ok.iter().zip(rk) {
                    e += (a - b) * (a - b);
                    n += 1;
                }
            }
            Ok((e, n))
        })
        .collect();
    let (mut e, mut n) = (0.0, 0usize);
    for p in per {
        let (a, b) = p?;
        e += a;
        n += b;
    }
    Ok(if n == 0 { 0.0 } else { e / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::ForecastMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(rng: &mut ChaCha8Rng, n: usize, macros: bool) -> (ModelState, Vec<TrainingSample>) {
        let layout = FeatureLayout {
            encoder_features: vec!["AT".into(), "LT".into(), "EMP".into()],
            macro_features: if macros { vec!["GDP_GROWTH".into()] } else { Vec::new() },
            targets: vec!["AT".into(), "LT".into()],
        };
        let mdim = layout.macro_features.len();
        let samples: Vec<TrainingSample> = (0..n)
            .map(|i| {
                let v = |rng: &mut ChaCha8Rng, d: usize| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
                TrainingSample {
                    company_id: format!("C{i}"),
                    origin_year: 2000,
                    encoder_inputs: (0..3).map(|_| v(rng, 3 + mdim)).collect(),
                    decoder_gm: (0..3).map(|_| v(rng, 2)).collect(),
                    decoder_macro: (0..3).map(|_| v(rng, mdim)).collect(),
                    labels: (0..3).map(|_| v(rng, 2)).collect(),
                    last_targets: v(rng, 2),
                }
            })
            .collect();
        let cfg = ForecastConfig {
            hidden_dim: 4,
            targets: layout.targets.clone(),
            mode: ForecastMode::Hybrid,
            ..Default::default()
        };
        let scaler = Scaler::fit(&samples, &layout);
        (ModelState::new(cfg, layout, scaler, rng), samples)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for macros in [false, true] {
            let (model, samples) = toy(&mut rng, 3, macros);
            let batch: Vec<&TrainingSample> = samples.iter().collect();
            let (l0, grad) = loss_and_gradients(&model, &batch).unwrap();
            assert!((l0 - loss(&model, &samples).unwrap()).abs() < 1e-12);
            let h = 1e-6;
            for (ti, g) in grad.tensors().iter().enumerate() {
                for j in (0..g.len()).step_by(3) {
                    let mut up = model.clone();
                    up.params.tensors_mut()[ti][j] += h;
                    let mut dn = model.clone();
                    dn.params.tensors_mut()[ti][j] -= h;
                    let fd = (loss(&up, &samples).unwrap() - loss(&dn, &samples).unwrap()) / (2.0 * h);
                    assert!((fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()), "{} [{j}]: {fd} vs {}", TENSOR_NAMES[ti], g[j]);
                }
            }
        }
    }

    #[test]
    fn reduction_is_independent_of_thread_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (model, samples) = toy(&mut rng, 37, false);
        let batch: Vec<&TrainingSample> = samples.iter().collect();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| loss_and_gradients(&model, &batch).unwrap())
        };
        let (l1, g1) = run(1);
        let (l4, g4) = run(4);
        assert_eq!(l1.to_bits(), l4.to_bits());
        assert_eq!(g1, g4);
    }

    #[test]
    fn zero_readout_outputs_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut model, samples) = toy(&mut rng, 1, false);
        model.params.zero_readout();
        for o in model.forward(&samples[0]).unwrap() {
            assert!(o.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scaler_standardises_training_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (model, samples) = toy(&mut rng, 50, false);
        let col: Vec<f64> = samples.iter().flat_map(|s| s.encoder_inputs.iter().map(|x| model.scaler.encoder(x)[1])).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
    }
}

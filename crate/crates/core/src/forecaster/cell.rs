//! Gated recurrent cell (input, forget, candidate and output gates) with a
//! hand-written backward pass.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ForecastError;

/// Hidden activation `h` and cell memory `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            h: vec![0.0; hidden_dim],
            c: vec![0.0; hidden_dim],
        }
    }
}

/// Gate weights stacked as `[input; forget; candidate; output]`, each block
/// mapping `[x; h]` (length `input_dim + hidden_dim`) to `hidden_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Forward intermediates needed by [`CellParams::backward`].
#[derive(Debug, Clone)]
pub struct StepCache {
    concat: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl CellParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w: Array2::zeros((4 * hidden_dim, input_dim + hidden_dim)),
            b: Array1::zeros(4 * hidden_dim),
        }
    }

    /// Uniform in `±1/√fan_in`, forget-gate bias set to 1.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim);
        let bound = 1.0 / ((input_dim + hidden_dim) as f64).sqrt();
        p.w.mapv_inplace(|_| rng.gen_range(-bound..bound));
        p.b.mapv_inplace(|_| rng.gen_range(-bound..bound));
        for k in hidden_dim..2 * hidden_dim {
            p.b[k] = 1.0;
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim, self.hidden_dim)
    }

    pub fn step(&self, x: &[f64], state: &RecurrentState) -> Result<RecurrentState, ForecastError> {
        self.step_cached(x, state).map(|(s, _)| s)
    }

    pub fn step_cached(&self, x: &[f64], state: &RecurrentState) -> Result<(RecurrentState, StepCache), ForecastError> {
        let hd = self.hidden_dim;
        if x.len() != self.input_dim || state.h.len() != hd || state.c.len() != hd {
            return Err(ForecastError::Shape(format!(
                "cell expects input {} / hidden {}, got input {} / hidden {}",
                self.input_dim,
                hd,
                x.len(),
                state.h.len()
            )));
        }
        let mut concat = Vec::with_capacity(self.input_dim + hd);
        concat.extend_from_slice(x);
        concat.extend_from_slice(&state.h);
        let cols = concat.len();
        let w = self.w.as_slice().expect("standard layout");
        let b = self.b.as_slice().expect("standard layout");
        let mut z = b.to_vec();
        for (r, zr) in z.iter_mut().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            *zr += row.iter().zip(&concat).map(|(a, b)| a * b).sum::<f64>();
        }
        let i: Vec<f64> = z[..hd].iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = z[hd..2 * hd].iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = z[2 * hd..3 * hd].iter().map(|&v| v.tanh()).collect();
        let o: Vec<f64> = z[3 * hd..].iter().map(|&v| sigmoid(v)).collect();
        let c: Vec<f64> = (0..hd).map(|k| f[k] * state.c[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..hd).map(|k| o[k] * tanh_c[k]).collect();
        if h.iter().chain(&c).any(|v| !v.is_finite()) {
            return Err(ForecastError::Numeric("non-finite recurrent activation".into()));
        }
        let cache = StepCache {
            concat,
            i,
            f,
            g,
            o,
            c_prev: state.c.clone(),
            tanh_c,
        };
        Ok((RecurrentState { h, c }, cache))
    }

    /// Accumulates parameter gradients into `grad` given upstream `dh`, `dc`
    /// for this step's output state. Returns `(dx, dh_prev, dc_prev)`.
    pub fn backward(&self, cache: &StepCache, dh: &[f64], dc: &[f64], grad: &mut CellParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.hidden_dim;
        let cols = cache.concat.len();
        let mut dz = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, g, o, tc) = (cache.i[k], cache.f[k], cache.g[k], cache.o[k], cache.tanh_c[k]);
            let d_o = dh[k] * tc;
            let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
            let di = dct * g;
            let dg = dct * i;
            let df = dct * cache.c_prev[k];
            dc_prev[k] = dct * f;
            dz[k] = di * i * (1.0 - i);
            dz[hd + k] = df * f * (1.0 - f);
            dz[2 * hd + k] = dg * (1.0 - g * g);
            dz[3 * hd + k] = d_o * o * (1.0 - o);
        }
        let w = self.w.as_slice().expect("standard layout");
        let gw = grad.w.as_slice_mut().expect("standard layout");
        let gb = grad.b.as_slice_mut().expect("standard layout");
        let mut dconcat = vec![0.0; cols];
        for (r, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb[r] += d;
            let row = &w[r * cols..(r + 1) * cols];
            let grow = &mut gw[r * cols..(r + 1) * cols];
            for j in 0..cols {
                grow[j] += d * cache.concat[j];
                dconcat[j] += d * row[j];
            }
        }
        let dh_prev = dconcat.split_off(self.input_dim);
        (dconcat, dh_prev, dc_prev)
    }
}

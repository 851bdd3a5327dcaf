//! Shapley attributions and low-dimensional views of encoder states.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::forecaster::{rollout, Anchor, ForecastError, History, ModelState};
use crate::panel::IndicatorId;
use crate::rng::substream;

/// Feature counts up to this use exact subset enumeration.
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate spectrum: rank {rank} is below {k}")]
    Degenerate { rank: usize, k: usize },
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub phi: Vec<f64>,
    /// `f(baseline)`.
    pub base_value: f64,
    /// `f(instance)`.
    pub value: f64,
    pub exact: bool,
}

impl Attribution {
    pub fn efficiency_residual(&self) -> f64 {
        (self.phi.iter().sum::<f64>() - (self.value - self.base_value)).abs()
    }
}

fn mix(instance: &[f64], baseline: &[f64], mask: impl Fn(usize) -> bool) -> Vec<f64> {
    (0..instance.len()).map(|i| if mask(i) { instance[i] } else { baseline[i] }).collect()
}

fn check(instance: &[f64], baseline: &[f64]) -> Result<(), ExplainError> {
    if instance.len() != baseline.len() {
        return Err(ExplainError::Config(format!("instance has {} features, baseline {}", instance.len(), baseline.len())));
    }
    if instance.is_empty() {
        return Err(ExplainError::Config("no features".into()));
    }
    Ok(())
}

/// Exact Shapley values by enumerating all `2^d` coalitions.
pub fn shapley_exact<F>(f: F, instance: &[f64], baseline: &[f64]) -> Result<Attribution, ExplainError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    check(instance, baseline)?;
    let d = instance.len();
    if d > 20 {
        return Err(ExplainError::Config("too many features for exact enumeration".into()));
    }
    let values: Vec<f64> = (0..1usize << d)
        .into_par_iter()
        .map(|m| f(&mix(instance, baseline, |i| m >> i & 1 == 1)))
        .collect();
    // weight |S|!(d−|S|−1)!/d!
    let mut fact = vec![1.0f64; d + 1];
    for k in 1..=d {
        fact[k] = fact[k - 1] * k as f64;
    }
    let weight: Vec<f64> = (0..d).map(|s| fact[s] * fact[d - s - 1] / fact[d]).collect();
    let mut phi = vec![0.0; d];
    for (m, &v) in values.iter().enumerate() {
        let size = m.count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            if m >> i & 1 == 0 {
                *p += weight[size] * (values[m | 1 << i] - v);
            }
        }
    }
    Ok(Attribution {
        phi,
        base_value: values[0],
        value: values[(1 << d) - 1],
        exact: true,
    })
}

/// Permutation-sampling Shapley values; permutation `k` draws from its own
/// seeded stream.
pub fn shapley_sampled<F>(f: F, instance: &[f64], baseline: &[f64], n_permutations: usize, seed: u64) -> Result<Attribution, ExplainError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    check(instance, baseline)?;
    if n_permutations == 0 {
        return Err(ExplainError::Config("n_permutations must be at least 1".into()));
    }
    let d = instance.len();
    let base_value = f(baseline);
    let value = f(instance);
    let per: Vec<Vec<f64>> = (0..n_permutations)
        .into_par_iter()
        .map(|k| {
            let mut order: Vec<usize> = (0..d).collect();
            order.shuffle(&mut substream(seed, "shapley", k as u64));
            let mut x = baseline.to_vec();
            let mut prev = base_value;
            let mut contrib = vec![0.0; d];
            for &i in &order {
                x[i] = instance[i];
                let v = f(&x);
                contrib[i] = v - prev;
                prev = v;
            }
            contrib
        })
        .collect();
    let mut phi = vec![0.0; d];
    for c in &per {
        for (p, v) in phi.iter_mut().zip(c) {
            *p += v;
        }
    }
    phi.iter_mut().for_each(|p| *p /= n_permutations as f64);
    Ok(Attribution {
        phi,
        base_value,
        value,
        exact: false,
    })
}

/// Exact for at most [`EXACT_LIMIT`] features, sampled otherwise.
pub fn shapley<F>(f: F, instance: &[f64], baseline: &[f64], n_permutations: usize, seed: u64) -> Result<Attribution, ExplainError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if instance.len() <= EXACT_LIMIT {
        shapley_exact(f, instance, baseline)
    } else {
        shapley_sampled(f, instance, baseline, n_permutations, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelAttribution {
    pub features: Vec<IndicatorId>,
    pub target: IndicatorId,
    pub per_company: Vec<(String, Attribution)>,
}

impl ModelAttribution {
    /// Mean `|φ|` per feature across companies.
    pub fn mean_abs(&self) -> Vec<f64> {
        let n = self.per_company.len().max(1) as f64;
        (0..self.features.len())
            .map(|i| self.per_company.iter().map(|(_, a)| a.phi[i].abs()).sum::<f64>() / n)
            .collect()
    }

    /// Feature indices ordered by decreasing mean `|φ|`.
    pub fn ranking(&self) -> Vec<usize> {
        let m = self.mean_abs();
        let mut idx: Vec<usize> = (0..m.len()).collect();
        idx.sort_by(|&a, &b| m[b].total_cmp(&m[a]).then(a.cmp(&b)));
        idx
    }

    pub fn to_tsv(&self) -> String {
        let m = self.mean_abs();
        let mut s = format!("# target: {}\nfeature\tmean_abs_phi\n", self.target);
        for i in self.ranking() {
            s.push_str(&format!("{}\t{:.8}\n", self.features[i], m[i]));
        }
        s
    }
}

/// Horizon-1 prediction of `target` with encoder features outside the
/// coalition replaced by their baseline value at every step.
fn coalition_value(model: &ModelState, anchor: &Anchor, h: &History, target: usize, x: &[f64], instance: &[f64]) -> f64 {
    let mut hh = h.clone();
    for step in hh.encoder_inputs.iter_mut() {
        for (i, v) in step.iter_mut().enumerate() {
            if x[i] != instance[i] {
                *v = x[i];
            }
        }
    }
    match rollout(model, anchor, &hh, 1) {
        Ok(r) if !r.predictions.is_empty() => r.predictions[0][target],
        _ => f64::NAN,
    }
}

/// Attributes the horizon-1 prediction of `target` to the encoder input
/// indicators. The instance value of a feature is its mean over the encoder
/// steps; the baseline defaults to the training mean stored in the scaler.
pub fn explain_model(
    model: &ModelState,
    anchor: &Anchor,
    histories: &[History],
    target: &IndicatorId,
    baseline: Option<&[f64]>,
    n_permutations: usize,
    seed: u64,
) -> Result<ModelAttribution, ExplainError> {
    let tix = model
        .layout
        .targets
        .iter()
        .position(|t| t == target)
        .ok_or_else(|| ExplainError::Config(format!("{target} is not a model target")))?;
    let mut features = model.layout.encoder_features.clone();
    features.extend(model.layout.macro_features.iter().cloned());
    let base: Vec<f64> = baseline.map(<[f64]>::to_vec).unwrap_or_else(|| model.scaler.encoder_mean.clone());
    if base.len() != features.len() {
        return Err(ExplainError::Config("baseline length does not match the encoder inputs".into()));
    }
    let mut per_company = Vec::with_capacity(histories.len());
    for (k, h) in histories.iter().enumerate() {
        let t = h.encoder_inputs.len() as f64;
        let instance: Vec<f64> = (0..features.len()).map(|i| h.encoder_inputs.iter().map(|x| x[i]).sum::<f64>() / t).collect();
        let f = |x: &[f64]| coalition_value(model, anchor, h, tix, x, &instance);
        let a = shapley(f, &instance, &base, n_permutations, seed.wrapping_add(k as u64))?;
        per_company.push((h.company_id.clone(), a));
    }
    Ok(ModelAttribution {
        features,
        target: target.clone(),
        per_company,
    })
}

/// Final encoder hidden vector per history; histories shorter than the
/// configured encoder length are skipped.
pub fn extract_hidden(model: &ModelState, histories: &[History]) -> Result<Vec<(String, Vec<f64>)>, ExplainError> {
    let t = model.config.encoder_len;
    let mut out = Vec::with_capacity(histories.len());
    for h in histories {
        if h.encoder_inputs.len() < t {
            log::warn!("skipping {}: history of {} years is shorter than {t}", h.company_id, h.encoder_inputs.len());
            continue;
        }
        let s = model.encode(&h.encoder_inputs[h.encoder_inputs.len() - t..])?;
        out.push((h.company_id.clone(), s.h));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub coords: Vec<Vec<f64>>,
    /// Unit principal directions, one per row.
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
    /// Every covariance eigenvalue, descending.
    pub eigenvalues: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Projects mean-centred vectors onto the top `k` covariance eigenvectors.
/// Each component's sign makes its largest-magnitude loading positive.
pub fn pca_project(vectors: &[Vec<f64>], k: usize) -> Result<Embedding, ExplainError> {
    let n = vectors.len();
    if k == 0 || n < k + 1 {
        return Err(ExplainError::Config(format!("need at least {} vectors for {k} components", k + 1)));
    }
    let d = vectors[0].len();
    if d < k || vectors.iter().any(|v| v.len() != d) {
        return Err(ExplainError::Config("vectors must share a dimension of at least k".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let tol = 1e-12 * total.max(f64::MIN_POSITIVE) * d as f64;
    let rank = eigenvalues.iter().filter(|&&l| l > tol).count();
    if rank < k {
        return Err(ExplainError::Degenerate { rank, k });
    }
    let components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if big < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let coords = (0..n)
        .map(|i| components.iter().map(|c| (0..d).map(|j| x[(i, j)] * c[j]).sum()).collect())
        .collect();
    Ok(Embedding {
        coords,
        components,
        explained_variance_ratio: eigenvalues[..k].iter().map(|l| l / total).collect(),
        eigenvalues,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dummy_feature_axiom() {
        let a = shapley(|x| 3.0 * x[1] * x[1], &[1.0, 2.0, 5.0], &[0.0, 0.0, 0.0], 10, 1).unwrap();
        assert!(a.exact);
        assert_eq!(a.phi[0], 0.0);
        assert_eq!(a.phi[2], 0.0);
        assert!((a.phi[1] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn additive_function() {
        let a = shapley(|x| x[0] + x[1], &[2.0, -3.0], &[0.0, 0.0], 10, 1).unwrap();
        assert!((a.phi[0] - 2.0).abs() < 1e-12 && (a.phi[1] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_features_share_credit() {
        let f = |x: &[f64]| x[0] * x[1] + x[2];
        let a = shapley_exact(f, &[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((a.phi[0] - 0.5).abs() < 1e-12 && (a.phi[1] - 0.5).abs() < 1e-12);
        let s = shapley_sampled(f, &[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0], 2000, 4).unwrap();
        assert!((s.phi[0] - s.phi[1]).abs() < 0.05);
    }

    #[test]
    fn sampled_matches_exact_on_a_small_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w1: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let w2: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |x: &[f64]| w1.iter().zip(&w2).map(|(r, o)| o * r.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().tanh()).sum::<f64>();
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b = vec![0.0; 8];
        let e = shapley_exact(f, &x, &b).unwrap();
        let s = shapley_sampled(f, &x, &b, 2000, 3).unwrap();
        assert!(e.efficiency_residual() < 1e-9);
        for i in 0..8 {
            assert!((e.phi[i] - s.phi[i]).abs() < 0.05, "{i}: {} vs {}", e.phi[i], s.phi[i]);
        }
    }

    #[test]
    fn shapley_rejects_mismatched_dimensions() {
        assert!(matches!(shapley(|_| 0.0, &[1.0], &[0.0, 0.0], 1, 1), Err(ExplainError::Config(_))));
        assert!(shapley_sampled(|_| 0.0, &[1.0], &[0.0], 0, 1).is_err());
    }

    #[test]
    fn line_in_three_space() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0, -(i as f64)]).collect();
        let e = pca_project(&pts, 1).unwrap();
        assert!((e.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert!(matches!(pca_project(&pts, 2), Err(ExplainError::Degenerate { rank: 1, k: 2 })));
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn full_rank_projection_is_an_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)]).collect();
        let e = pca_project(&pts, 2).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                assert!((dist(&pts[i], &pts[j]) - dist(&e.coords[i], &e.coords[j])).abs() < 1e-9);
            }
        }
        let c = &e.components;
        assert!((c[0].iter().zip(&c[1]).map(|(a, b)| a * b).sum::<f64>()).abs() < 1e-12);
        assert!(e.explained_variance_ratio[0] >= e.explained_variance_ratio[1]);
    }

    #[test]
    fn reconstruction_error_equals_trailing_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scales: Vec<f64> = (0..64).map(|j| 1.0 / (1.0 + j as f64)).collect();
        let pts: Vec<Vec<f64>> = (0..200).map(|_| scales.iter().map(|s| s * rng.gen_range(-1.0..1.0)).collect()).collect();
        let e = pca_project(&pts, 2).unwrap();
        let mut err = 0.0;
        for (p, z) in pts.iter().zip(&e.coords) {
            for j in 0..64 {
                let rec = e.mean[j] + z[0] * e.components[0][j] + z[1] * e.components[1][j];
                err += (p[j] - rec).powi(2);
            }
        }
        err /= 199.0;
        let trailing: f64 = e.eigenvalues[2..].iter().sum();
        assert!((err - trailing).abs() < 1e-9 * trailing.max(1.0));
    }

    proptest! {
        #[test]
        fn projection_ignores_input_order(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let mut rev = pts.clone();
            rev.reverse();
            let a = pca_project(&pts, 2).unwrap();
            let b = pca_project(&rev, 2).unwrap();
            for i in 0..12 {
                for c in 0..2 {
                    prop_assert!((a.coords[i][c].abs() - b.coords[11 - i][c].abs()).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn exact_mode_is_efficient(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = |x: &[f64]| (x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).sin() + x[0] * x[3];
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prop_assert!(shapley_exact(f, &x, &b).unwrap().efficiency_residual() < 1e-9);
        }
    }
}

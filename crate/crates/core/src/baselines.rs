//! Persistence and Gibrat random-growth comparators.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::panel::{CompanyPanel, IndicatorId};

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("no consecutive-year pairs for {0}")]
    InsufficientData(IndicatorId),
    #[error("indicator {0} is not in the panel")]
    UnknownIndicator(IndicatorId),
}

pub fn persistence_forecast(last_value: f64, horizon: usize) -> Vec<f64> {
    vec![last_value; horizon]
}

/// Size-independent drift of one indicator in transformed space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GibratFit {
    pub drift: f64,
    pub volatility: f64,
    pub n_pairs: usize,
}

/// Mean of `x[t+1] − x[t]` over every consecutive-year pair in the panel.
pub fn fit_gibrat(train: &CompanyPanel, indicator: &IndicatorId) -> Result<GibratFit, BaselineError> {
    let k = train
        .registry()
        .index_of(indicator)
        .ok_or_else(|| BaselineError::UnknownIndicator(indicator.clone()))?;
    let diffs: Vec<f64> = train
        .companies()
        .iter()
        .flat_map(|c| {
            c.records.windows(2).filter_map(move |w| {
                if w[1].fiscal_year != w[0].fiscal_year + 1 {
                    return None;
                }
                Some(w[1].value(k)? - w[0].value(k)?)
            })
        })
        .collect();
    if diffs.is_empty() {
        return Err(BaselineError::InsufficientData(indicator.clone()));
    }
    let n = diffs.len() as f64;
    let drift = diffs.iter().sum::<f64>() / n;
    let volatility = if diffs.len() > 1 {
        (diffs.iter().map(|d| (d - drift).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(GibratFit {
        drift,
        volatility,
        n_pairs: diffs.len(),
    })
}

/// Step `k` forecast is `last_value + k·g`.
pub fn gibrat_forecast(last_value: f64, drift: f64, horizon: usize) -> Vec<f64> {
    (1..=horizon).map(|k| last_value + k as f64 * drift).collect()
}

/// One sampled path with Gaussian growth shocks, for distribution studies.
pub fn gibrat_sample<R: Rng + ?Sized>(last_value: f64, fit: &GibratFit, horizon: usize, rng: &mut R) -> Vec<f64> {
    let shock = Normal::new(fit.drift, fit.volatility.max(0.0)).expect("finite volatility");
    let mut x = last_value;
    (0..horizon)
        .map(|_| {
            x += shock.sample(rng);
            x
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{CompanyRecord, PanelMeta, Registry};
    use proptest::prelude::*;

    fn panel(series: &[(&str, Vec<f64>)]) -> CompanyPanel {
        let reg = Registry::standard().restrict(["AT"]);
        let recs = series.iter().flat_map(|(id, xs)| {
            xs.iter().enumerate().map(move |(i, &x)| (id.to_string(), CompanyRecord::new(2000 + i as i32, None, vec![Some(x)])))
        });
        CompanyPanel::from_records(reg, recs, PanelMeta::default()).unwrap()
    }

    #[test]
    fn persistence_repeats_last_value() {
        assert_eq!(persistence_forecast(3.5, 4), [3.5; 4]);
        assert_eq!(persistence_forecast(1.0, 1), [1.0]);
    }

    #[test]
    fn persistence_error_on_a_drifting_series() {
        let g = 0.3;
        let f = persistence_forecast(1.0, 5);
        for (k, v) in f.iter().enumerate() {
            let actual = 1.0 + (k + 1) as f64 * g;
            assert!(((actual - v).abs() - (k + 1) as f64 * g).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_growth_and_symmetric_growth() {
        let p = panel(&[("A", vec![1.0, 1.1, 1.2, 1.3]), ("B", vec![5.0, 5.1])]);
        assert!((fit_gibrat(&p, &"AT".into()).unwrap().drift - 0.1).abs() < 1e-12);
        let p = panel(&[("A", vec![1.0, 1.2, 1.4]), ("B", vec![3.0, 2.8, 2.6])]);
        assert!(fit_gibrat(&p, &"AT".into()).unwrap().drift.abs() < 1e-12);
    }

    #[test]
    fn insufficient_data() {
        let p = panel(&[("A", vec![1.0])]);
        assert!(matches!(fit_gibrat(&p, &"AT".into()), Err(BaselineError::InsufficientData(_))));
    }

    #[test]
    fn gibrat_forecast_examples() {
        assert_eq!(gibrat_forecast(1.0, 0.5, 2), [1.5, 2.0]);
        assert_eq!(gibrat_forecast(2.0, 0.0, 3), persistence_forecast(2.0, 3));
    }

    proptest! {
        #[test]
        fn increments_do_not_depend_on_level(a in -50.0f64..50.0, b in -50.0f64..50.0, g in -1.0f64..1.0) {
            let fa = gibrat_forecast(a, g, 6);
            let fb = gibrat_forecast(b, g, 6);
            for k in 0..6 {
                prop_assert!(((fa[k] - a) - (fb[k] - b)).abs() < 1e-9);
            }
        }
    }
}

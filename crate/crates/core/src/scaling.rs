//! Power-law fits `X = c·A^β` by ordinary least squares on log-log pairs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::panel::{CompanyPanel, IndicatorGroup, IndicatorId, ASSETS, LIABILITIES, NET_INCOME};

/// Two-sided 95% standard normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, thiserror::Error)]
pub enum ScalingError {
    #[error("need at least 3 observations, got {0}")]
    TooFewObservations(usize),
    #[error("rank deficient design: log-assets have zero variance")]
    RankDeficient,
    #[error("non-finite observation at index {0}")]
    NonFinite(usize),
    #[error("incomplete growth parameters: {indicator}: {reason}")]
    Incomplete { indicator: IndicatorId, reason: String },
    #[error("panel must be log transformed before fitting")]
    Untransformed,
    #[error("panel has no asset column")]
    NoAssets,
    #[error("params file: {0}")]
    File(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub indicator: IndicatorId,
    pub beta: f64,
    pub ln_c: f64,
    pub r2: f64,
    pub n_obs: usize,
    pub beta_ci: (f64, f64),
    pub ln_c_ci: (f64, f64),
}

impl ScalingFit {
    pub fn c(&self) -> f64 {
        self.ln_c.exp()
    }

    /// Noise-free fit, handy for fixtures and planted parameters.
    pub fn exact(indicator: impl Into<IndicatorId>, beta: f64, ln_c: f64) -> Self {
        Self {
            indicator: indicator.into(),
            beta,
            ln_c,
            r2: 1.0,
            n_obs: 0,
            beta_ci: (beta, beta),
            ln_c_ci: (ln_c, ln_c),
        }
    }

    pub fn predict_ln(&self, ln_a: f64) -> f64 {
        self.ln_c + self.beta * ln_a
    }
}

/// OLS of `ln X` on `ln A` with normal-theory 95% intervals.
pub fn fit_power_law(indicator: impl Into<IndicatorId>, pairs: &[(f64, f64)]) -> Result<ScalingFit, ScalingError> {
    let n = pairs.len();
    if n < 3 {
        return Err(ScalingError::TooFewObservations(n));
    }
    if let Some(i) = pairs.iter().position(|(a, x)| !a.is_finite() || !x.is_finite()) {
        return Err(ScalingError::NonFinite(i));
    }
    let nf = n as f64;
    let mean_a = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_x = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(a, x) in pairs {
        let (da, dx) = (a - mean_a, x - mean_x);
        sxx += da * da;
        sxy += da * dx;
        syy += dx * dx;
    }
    if sxx <= f64::EPSILON * nf * mean_a.abs().max(1.0).powi(2) {
        return Err(ScalingError::RankDeficient);
    }
    let beta = sxy / sxx;
    let ln_c = mean_x - beta * mean_a;
    let ssr: f64 = pairs
        .iter()
        .map(|&(a, x)| {
            let e = x - ln_c - beta * a;
            e * e
        })
        .sum();
    let r2 = if syy > 0.0 { (1.0 - ssr / syy).clamp(0.0, 1.0) } else { 1.0 };
    let s2 = ssr / (nf - 2.0);
    let se_beta = (s2 / sxx).sqrt();
    let se_ln_c = (s2 * (1.0 / nf + mean_a * mean_a / sxx)).sqrt();
    Ok(ScalingFit {
        indicator: indicator.into(),
        beta,
        ln_c,
        r2,
        n_obs: n,
        beta_ci: (beta - Z_95 * se_beta, beta + Z_95 * se_beta),
        ln_c_ci: (ln_c - Z_95 * se_ln_c, ln_c + Z_95 * se_ln_c),
    })
}

/// Which company-years enter each regression.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationFilter {
    /// Keep only NI observations that were positive before the transform.
    pub ni_positive_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthParams {
    pub liability: ScalingFit,
    pub income: ScalingFit,
    pub per_indicator: BTreeMap<IndicatorId, ScalingFit>,
}

impl GrowthParams {
    pub fn fit(&self, id: &IndicatorId) -> Option<&ScalingFit> {
        self.per_indicator.get(id)
    }
}

/// (ln A, transformed X) pairs for one indicator over every record where both are present.
pub fn observation_pairs(panel: &CompanyPanel, indicator: &IndicatorId, filter: &ObservationFilter) -> Result<Vec<(f64, f64)>, ScalingError> {
    let reg = panel.registry();
    let a = reg.index_of_code(ASSETS).ok_or(ScalingError::NoAssets)?;
    let Some(x) = reg.index_of(indicator) else {
        return Ok(Vec::new());
    };
    let positive_only = filter.ni_positive_only && indicator.as_str() == NET_INCOME;
    Ok(panel
        .companies()
        .iter()
        .flat_map(|c| c.records.iter())
        .filter_map(|r| Some((r.value(a)?, r.value(x)?)))
        .filter(|&(_, xv)| !positive_only || xv > 0.0)
        .collect())
}

/// Pooled fits of every financial indicator against assets. LT and NI are
/// mandatory; other indicators that cannot be fitted are left out.
pub fn fit_all(panel: &CompanyPanel, filter: &ObservationFilter) -> Result<GrowthParams, ScalingError> {
    if !panel.meta.transformed {
        return Err(ScalingError::Untransformed);
    }
    let reg = panel.registry();
    if reg.index_of_code(ASSETS).is_none() {
        return Err(ScalingError::NoAssets);
    }
    let mut per_indicator = BTreeMap::new();
    for spec in reg.specs() {
        if spec.group != IndicatorGroup::Financial || spec.id.as_str() == ASSETS {
            continue;
        }
        let pairs = observation_pairs(panel, &spec.id, filter)?;
        match fit_power_law(spec.id.clone(), &pairs) {
            Ok(fit) => {
                per_indicator.insert(spec.id.clone(), fit);
            }
            Err(e) => log::info!("skipping scaling fit for {}: {e}", spec.id),
        }
    }
    let mandatory = |code: &str| -> Result<ScalingFit, ScalingError> {
        let id = IndicatorId::from(code);
        if let Some(f) = per_indicator.get(&id) {
            return Ok(f.clone());
        }
        let reason = match observation_pairs(panel, &id, filter).map(|p| fit_power_law(code, &p)) {
            Ok(Err(e)) => e.to_string(),
            Err(e) => e.to_string(),
            Ok(Ok(_)) => unreachable!("fit succeeded above"),
        };
        Err(ScalingError::Incomplete { indicator: id, reason })
    };
    Ok(GrowthParams {
        liability: mandatory(LIABILITIES)?,
        income: mandatory(NET_INCOME)?,
        per_indicator,
    })
}

/// Per-year cross-sectional fits of one indicator.
pub fn fit_per_year(panel: &CompanyPanel, indicator: &IndicatorId, filter: &ObservationFilter) -> Result<BTreeMap<i32, ScalingFit>, ScalingError> {
    let reg = panel.registry();
    let a = reg.index_of_code(ASSETS).ok_or(ScalingError::NoAssets)?;
    let x = reg.index_of(indicator).ok_or_else(|| ScalingError::Incomplete {
        indicator: indicator.clone(),
        reason: "not in panel".into(),
    })?;
    let positive_only = filter.ni_positive_only && indicator.as_str() == NET_INCOME;
    let mut by_year: BTreeMap<i32, Vec<(f64, f64)>> = BTreeMap::new();
    for r in panel.companies().iter().flat_map(|c| c.records.iter()) {
        if let (Some(av), Some(xv)) = (r.value(a), r.value(x)) {
            if !positive_only || xv > 0.0 {
                by_year.entry(r.fiscal_year).or_default().push((av, xv));
            }
        }
    }
    Ok(by_year
        .into_iter()
        .filter_map(|(y, p)| fit_power_law(indicator.clone(), &p).ok().map(|f| (y, f)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FitEntry {
    beta: f64,
    ln_c: f64,
    r2: f64,
    n_obs: usize,
    beta_ci: [f64; 2],
    ln_c_ci: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamsDoc {
    format_version: u32,
    fit_timestamp: String,
    data_hash: String,
    liability: String,
    income: String,
    indicators: BTreeMap<String, FitEntry>,
}

/// Parameters plus provenance as persisted on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamsFile {
    pub params: GrowthParams,
    pub fit_timestamp: String,
    pub data_hash: String,
}

impl ParamsFile {
    pub fn to_toml(&self) -> String {
        let mut indicators = BTreeMap::new();
        let mut all: Vec<&ScalingFit> = self.params.per_indicator.values().collect();
        all.push(&self.params.liability);
        all.push(&self.params.income);
        for f in all {
            indicators.insert(
                f.indicator.to_string(),
                FitEntry {
                    beta: f.beta,
                    ln_c: f.ln_c,
                    r2: f.r2,
                    n_obs: f.n_obs,
                    beta_ci: [f.beta_ci.0, f.beta_ci.1],
                    ln_c_ci: [f.ln_c_ci.0, f.ln_c_ci.1],
                },
            );
        }
        let doc = ParamsDoc {
            format_version: 1,
            fit_timestamp: self.fit_timestamp.clone(),
            data_hash: self.data_hash.clone(),
            liability: self.params.liability.indicator.to_string(),
            income: self.params.income.indicator.to_string(),
            indicators,
        };
        toml::to_string(&doc).expect("params serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self, ScalingError> {
        let doc: ParamsDoc = toml::from_str(text).map_err(|e| ScalingError::File(e.to_string()))?;
        if doc.format_version != 1 {
            return Err(ScalingError::File(format!("unsupported format_version {}", doc.format_version)));
        }
        let to_fit = |code: &str, e: &FitEntry| ScalingFit {
            indicator: IndicatorId::from(code),
            beta: e.beta,
            ln_c: e.ln_c,
            r2: e.r2,
            n_obs: e.n_obs,
            beta_ci: (e.beta_ci[0], e.beta_ci[1]),
            ln_c_ci: (e.ln_c_ci[0], e.ln_c_ci[1]),
        };
        let get = |code: &str| {
            doc.indicators
                .get(code)
                .map(|e| to_fit(code, e))
                .ok_or_else(|| ScalingError::File(format!("missing indicator {code}")))
        };
        Ok(Self {
            params: GrowthParams {
                liability: get(&doc.liability)?,
                income: get(&doc.income)?,
                per_indicator: doc.indicators.iter().map(|(k, e)| (IndicatorId::from(k.as_str()), to_fit(k, e))).collect(),
            },
            fit_timestamp: doc.fit_timestamp,
            data_hash: doc.data_hash,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ScalingError> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ScalingError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

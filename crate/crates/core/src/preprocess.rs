//! Cleaning pipeline: feature selection, short-series and anomaly filters,
//! gap imputation, inflation adjustment and the log / linear-log transform.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::panel::{CompanyPanel, CompanySeries, IndicatorId, Registry, Transform, ASSETS};

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("degenerate panel: {0}")]
    Degenerate(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no inflation rate for year {0}")]
    Coverage(i32),
    #[error("anomaly leak: {indicator} = {value} for company {company} year {year} cannot be log transformed")]
    AnomalyLeak {
        company: String,
        year: i32,
        indicator: IndicatorId,
        value: f64,
    },
    #[error("panel is already transformed")]
    AlreadyTransformed,
    #[error("inflation adjustment requires an untransformed panel")]
    TransformedInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    /// Indicators missing in more than this fraction of cells are dropped.
    pub missing_fraction_cutoff: f64,
    pub min_series_length: usize,
    pub base_year: i32,
    /// Indicators that must be strictly positive; a record violating this is deleted.
    pub anomaly_indicators: Vec<IndicatorId>,
    /// Annual inflation rate in percent, keyed by year. `None` skips the adjustment.
    pub cpi_series: Option<BTreeMap<i32, f64>>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            missing_fraction_cutoff: 0.40,
            min_series_length: 3,
            base_year: 2019,
            anomaly_indicators: ["AT", "LT", "REVT", "COGS"].into_iter().map(IndicatorId::from).collect(),
            cpi_series: None,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.missing_fraction_cutoff > 0.0 && self.missing_fraction_cutoff <= 1.0) {
            return Err(PreprocessError::Config(format!(
                "missing_fraction_cutoff must lie in (0,1], got {}",
                self.missing_fraction_cutoff
            )));
        }
        if self.min_series_length < 1 {
            return Err(PreprocessError::Config("min_series_length must be at least 1".into()));
        }
        Ok(())
    }
}

/// `sign(x)·ln(|x|+1)`; odd, strictly increasing, zero at the origin.
pub fn linlog(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().ln_1p()
    }
}

/// `sign(z)·(exp(|z|)−1)`.
pub fn linlog_inverse(z: f64) -> f64 {
    if z == 0.0 {
        0.0
    } else {
        z.signum() * z.abs().exp_m1()
    }
}

/// Drops indicators whose panel-wide missing fraction is strictly greater
/// than the cutoff. Returns the reduced panel and the removed codes.
pub fn select_features(panel: &CompanyPanel, cfg: &PreprocessConfig) -> Result<(CompanyPanel, Vec<IndicatorId>), PreprocessError> {
    cfg.validate()?;
    let n = panel.n_records();
    if n == 0 {
        return Err(PreprocessError::Degenerate("panel has no records".into()));
    }
    let reg = panel.registry();
    let mut keep = Vec::new();
    let mut removed = Vec::new();
    for (i, spec) in reg.specs().iter().enumerate() {
        let missing = panel.column(i).filter(Option::is_none).count();
        if missing as f64 / n as f64 > cfg.missing_fraction_cutoff {
            removed.push(spec.id.clone());
        } else {
            keep.push(i);
        }
    }
    if keep.is_empty() {
        return Err(PreprocessError::Degenerate("every indicator exceeds the missing-value cutoff".into()));
    }
    if removed.is_empty() {
        return Ok((panel.clone(), removed));
    }
    let new_reg = reg.restrict(keep.iter().map(|&i| reg.specs()[i].id.as_str()));
    let (_, companies, meta) = panel.clone().into_parts();
    let companies = companies
        .into_iter()
        .map(|mut c| {
            for r in &mut c.records {
                r.values = keep.iter().map(|&i| r.values[i]).collect();
                r.flags = keep.iter().map(|&i| r.flags[i]).collect();
            }
            c
        })
        .collect();
    Ok((CompanyPanel::from_series_unchecked(new_reg, companies, meta), removed))
}

/// Removes companies with fewer than `min_series_length` records.
pub fn filter_short_series(panel: &CompanyPanel, cfg: &PreprocessConfig) -> (CompanyPanel, usize) {
    let kept: Vec<CompanySeries> = panel
        .companies()
        .iter()
        .filter(|c| c.records.len() >= cfg.min_series_length)
        .cloned()
        .collect();
    let removed = panel.n_companies() - kept.len();
    (panel.with_companies(kept), removed)
}

/// Deletes every record where an anomaly indicator is present and not
/// strictly positive. Returns the number of deleted records.
pub fn drop_anomalies(panel: &CompanyPanel, cfg: &PreprocessConfig) -> (CompanyPanel, usize) {
    let idx: Vec<usize> = cfg
        .anomaly_indicators
        .iter()
        .filter_map(|id| panel.registry().index_of(id))
        .collect();
    let mut deleted = 0;
    let companies = panel
        .companies()
        .iter()
        .map(|c| {
            let records: Vec<_> = c
                .records
                .iter()
                .filter(|r| {
                    let bad = idx.iter().any(|&i| matches!(r.value(i), Some(v) if v <= 0.0));
                    if bad {
                        deleted += 1;
                    }
                    !bad
                })
                .cloned()
                .collect();
            CompanySeries { id: c.id.clone(), records }
        })
        .collect();
    (panel.with_companies(companies), deleted)
}

/// Fills absent values per company and indicator: interior runs take the
/// mean of the nearest present neighbours, leading (trailing) runs copy the
/// first (last) present value. All-absent series stay absent. Returns the
/// number of imputed cells.
pub fn impute_missing(panel: &CompanyPanel) -> (CompanyPanel, usize) {
    let n_ind = panel.registry().len();
    let mut imputed = 0;
    let companies = panel
        .companies()
        .iter()
        .map(|c| {
            let mut c = c.clone();
            for k in 0..n_ind {
                let series: Vec<Option<f64>> = c.records.iter().map(|r| r.value(k)).collect();
                for (pos, fill) in fill_series(&series) {
                    c.records[pos].values[k] = Some(fill);
                    c.records[pos].flags[k].imputed = true;
                    imputed += 1;
                }
            }
            c
        })
        .collect();
    (panel.with_companies(companies), imputed)
}

/// Positions and fill values for the absent cells of one series.
fn fill_series(series: &[Option<f64>]) -> Vec<(usize, f64)> {
    let present: Vec<usize> = (0..series.len()).filter(|&i| series[i].is_some()).collect();
    let (Some(&first), Some(&last)) = (present.first(), present.last()) else {
        return Vec::new();
    };
    let mut fills = Vec::new();
    for i in 0..series.len() {
        if series[i].is_some() {
            continue;
        }
        let v = if i < first {
            series[first].unwrap()
        } else if i > last {
            series[last].unwrap()
        } else {
            let before = (0..i).rev().find_map(|j| series[j]).unwrap();
            let after = (i + 1..series.len()).find_map(|j| series[j]).unwrap();
            0.5 * (before + after)
        };
        fills.push((i, v));
    }
    fills
}

/// Price level relative to the base year, built by compounding annual
/// percentage rates: `P(y+1) = P(y)·(1 + rate(y+1)/100)`, `P(base) = 1`.
pub fn price_level(year: i32, base_year: i32, rates: &BTreeMap<i32, f64>) -> Result<f64, PreprocessError> {
    let rate = |y: i32| rates.get(&y).copied().ok_or(PreprocessError::Coverage(y));
    rate(year)?;
    let mut p = 1.0;
    if year < base_year {
        for y in (year + 1..=base_year).rev() {
            p /= 1.0 + rate(y)? / 100.0;
        }
    } else {
        for y in base_year + 1..=year {
            p *= 1.0 + rate(y)? / 100.0;
        }
    }
    Ok(p)
}

/// Expresses every monetary value in base-year currency.
/// Applying it to an already adjusted panel with the same base is a no-op.
pub fn adjust_inflation(panel: &CompanyPanel, cfg: &PreprocessConfig) -> Result<CompanyPanel, PreprocessError> {
    if panel.meta.transformed {
        return Err(PreprocessError::TransformedInput);
    }
    if panel.meta.inflation_adjusted && panel.meta.base_year == Some(cfg.base_year) {
        return Ok(panel.clone());
    }
    let Some(rates) = &cfg.cpi_series else {
        return Err(PreprocessError::Config("no inflation series supplied".into()));
    };
    let monetary: Vec<usize> = panel
        .registry()
        .specs()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.monetary)
        .map(|(i, _)| i)
        .collect();
    let mut factors = BTreeMap::new();
    for c in panel.companies() {
        for r in &c.records {
            if let std::collections::btree_map::Entry::Vacant(e) = factors.entry(r.fiscal_year) {
                e.insert(1.0 / price_level(r.fiscal_year, cfg.base_year, rates)?);
            }
        }
    }
    let companies = panel
        .companies()
        .iter()
        .map(|c| {
            let mut c = c.clone();
            for r in &mut c.records {
                let f = factors[&r.fiscal_year];
                for &i in &monetary {
                    if let Some(v) = r.values[i].as_mut() {
                        *v *= f;
                    }
                }
            }
            c
        })
        .collect();
    let mut out = panel.with_companies(companies);
    out.meta.inflation_adjusted = true;
    out.meta.base_year = Some(cfg.base_year);
    Ok(out)
}

/// Applies each indicator's registered transform. Refuses a second application.
pub fn transform_panel(panel: &CompanyPanel) -> Result<CompanyPanel, PreprocessError> {
    if panel.meta.transformed {
        return Err(PreprocessError::AlreadyTransformed);
    }
    let specs = panel.registry().specs().to_vec();
    let mut companies = Vec::with_capacity(panel.n_companies());
    for c in panel.companies() {
        let mut c = c.clone();
        for r in &mut c.records {
            for (k, spec) in specs.iter().enumerate() {
                if let Some(v) = r.values[k] {
                    let z = spec.transform.apply(v).ok_or_else(|| PreprocessError::AnomalyLeak {
                        company: c.id.clone(),
                        year: r.fiscal_year,
                        indicator: spec.id.clone(),
                        value: v,
                    })?;
                    r.values[k] = Some(z);
                    if spec.transform != Transform::Identity {
                        r.flags[k].transformed = true;
                    }
                }
            }
        }
        companies.push(c);
    }
    let mut out = panel.with_companies(companies);
    out.meta.transformed = true;
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PreprocessReport {
    pub input_companies: usize,
    pub input_records: usize,
    pub dropped_indicators: Vec<String>,
    pub dropped_short_companies: usize,
    pub dropped_anomalous_records: usize,
    pub dropped_short_after_anomalies: usize,
    pub imputed_cells: usize,
    pub inflation_adjusted: bool,
    pub output_companies: usize,
    pub output_records: usize,
}

impl PreprocessReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        line("input_companies", self.input_companies.to_string());
        line("input_records", self.input_records.to_string());
        line("dropped_indicators", self.dropped_indicators.join(","));
        line("dropped_short_companies", self.dropped_short_companies.to_string());
        line("dropped_anomalous_records", self.dropped_anomalous_records.to_string());
        line("imputed_cells", self.imputed_cells.to_string());
        line("inflation_adjusted", self.inflation_adjusted.to_string());
        line("output_companies", self.output_companies.to_string());
        line("output_records", self.output_records.to_string());
        s
    }
}

/// Full pipeline in its fixed order. The inflation step is skipped when the
/// config carries no rate series.
pub fn run_pipeline(panel: &CompanyPanel, cfg: &PreprocessConfig) -> Result<(CompanyPanel, PreprocessReport), PreprocessError> {
    let mut report = PreprocessReport {
        input_companies: panel.n_companies(),
        input_records: panel.n_records(),
        ..Default::default()
    };
    let (p, removed) = select_features(panel, cfg)?;
    report.dropped_indicators = removed.iter().map(|i| i.to_string()).collect();
    if p.registry().index_of_code(ASSETS).is_none() {
        log::warn!("asset column AT is not part of the panel after feature selection");
    }
    let (p, short) = filter_short_series(&p, cfg);
    report.dropped_short_companies = short;
    let (p, anomalies) = drop_anomalies(&p, cfg);
    report.dropped_anomalous_records = anomalies;
    let (p, imputed) = impute_missing(&p);
    report.imputed_cells = imputed;
    let p = if cfg.cpi_series.is_some() {
        report.inflation_adjusted = true;
        adjust_inflation(&p, cfg)?
    } else {
        p
    };
    let p = transform_panel(&p)?;
    report.output_companies = p.n_companies();
    report.output_records = p.n_records();
    Ok((p, report))
}

/// Reads `year,rate` lines (header optional, `#` comments allowed).
pub fn parse_cpi(text: &str) -> Result<BTreeMap<i32, f64>, PreprocessError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split([',', '\t']).map(str::trim);
        let (Some(y), Some(r)) = (parts.next(), parts.next()) else {
            return Err(PreprocessError::Config(format!("cpi line {}: expected `year,rate`", n + 1)));
        };
        match (y.parse::<i32>(), r.parse::<f64>()) {
            (Ok(y), Ok(r)) => {
                out.insert(y, r);
            }
            _ if n == 0 => continue,
            _ => return Err(PreprocessError::Config(format!("cpi line {}: cannot parse `{line}`", n + 1))),
        }
    }
    Ok(out)
}

/// Raw-scale value of a transformed cell.
pub fn untransform(registry: &Registry, index: usize, z: f64) -> f64 {
    registry.specs()[index].transform.invert(z)
}

//! Dataset splitting, forecast scoring and grouped error analyses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::baselines::{gibrat_forecast, persistence_forecast};
use crate::forecaster::{rollout, Anchor, History, ModelState};
use crate::growth::GmStepper;
use crate::panel::{CompanyPanel, CompanySeries, IndicatorId, ASSETS};
use crate::rng::substream;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("metric undefined on empty input")]
    UndefinedMetric,
    #[error("split error: {0}")]
    Split(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model {model} failed: {message}")]
    Model { model: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub cutoff_year: i32,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            cutoff_year: 2010,
            ratios: (0.6, 0.2, 0.2),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: CompanyPanel,
    pub val: CompanyPanel,
    pub test: CompanyPanel,
    /// Company ids per partition of the pre-cutoff population.
    pub assignment: BTreeMap<String, Partition>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// Companies with a record before the cutoff are shuffled and assigned
/// by count; every record on or after the cutoff goes to the test panel.
pub fn split_dataset(panel: &CompanyPanel, spec: &SplitSpec) -> Result<Split, EvalError> {
    let (a, b, c) = spec.ratios;
    if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(EvalError::Split("ratios must be nonnegative and sum to 1".into()));
    }
    let mut pre: Vec<&str> = panel
        .companies()
        .iter()
        .filter(|c| c.records.first().is_some_and(|r| r.fiscal_year < spec.cutoff_year))
        .map(|c| c.id.as_str())
        .collect();
    if pre.is_empty() {
        return Err(EvalError::Split(format!("no company has records before {}", spec.cutoff_year)));
    }
    pre.shuffle(&mut substream(spec.seed, "split", 0));
    let n = pre.len() as f64;
    let n_train = (a * n).round() as usize;
    let n_val = ((b * n).round() as usize).min(pre.len() - n_train);
    let mut assignment = BTreeMap::new();
    for (i, id) in pre.iter().enumerate() {
        let p = if i < n_train {
            Partition::Train
        } else if i < n_train + n_val {
            Partition::Val
        } else {
            Partition::Test
        };
        assignment.insert(id.to_string(), p);
    }
    let mut parts: [Vec<CompanySeries>; 3] = Default::default();
    for c in panel.companies() {
        let p = assignment.get(&c.id).copied().unwrap_or(Partition::Test);
        let (before, after): (Vec<_>, Vec<_>) = c.records.iter().cloned().partition(|r| r.fiscal_year < spec.cutoff_year);
        let mut test = after;
        match p {
            Partition::Train => parts[0].push(CompanySeries { id: c.id.clone(), records: before }),
            Partition::Val => parts[1].push(CompanySeries { id: c.id.clone(), records: before }),
            Partition::Test => {
                test = c.records.clone();
            }
        }
        parts[2].push(CompanySeries { id: c.id.clone(), records: test });
    }
    let [train, val, test] = parts;
    Ok(Split {
        train: panel.with_companies(train),
        val: panel.with_companies(val),
        test: panel.with_companies(test),
        assignment,
    })
}

pub fn mae(predictions: &[f64], actuals: &[f64]) -> Result<f64, EvalError> {
    if predictions.is_empty() || predictions.len() != actuals.len() {
        return Err(EvalError::UndefinedMetric);
    }
    Ok(predictions.iter().zip(actuals).map(|(p, a)| (p - a).abs()).sum::<f64>() / predictions.len() as f64)
}

/// Empirical CDF as `(value, fraction ≤ value)` at each distinct value.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    pub fn at(&self, x: f64) -> f64 {
        self.points.iter().take_while(|p| p.0 <= x).last().map_or(0.0, |p| p.1)
    }
}

pub fn cumulative_mae_distribution(maes: &[f64]) -> Curve {
    let mut v: Vec<f64> = maes.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let f = (i + 1) as f64 / n;
        match points.last_mut() {
            Some(last) if last.0 == *x => last.1 = f,
            _ => points.push((*x, f)),
        }
    }
    Curve { points }
}

/// `q`-quantile by linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.to_vec();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SizeBucket {
    Micro,
    Small,
    Mid,
    Large,
}

impl SizeBucket {
    pub fn of(mean_assets: f64) -> Self {
        if mean_assets < 1e6 {
            Self::Micro
        } else if mean_assets < 1e8 {
            Self::Small
        } else if mean_assets < 1e9 {
            Self::Mid
        } else {
            Self::Large
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Micro => "micro",
            Self::Small => "small",
            Self::Mid => "mid",
            Self::Large => "large",
        }
    }
}

pub const DEFAULT_AGE_EDGES: [usize; 4] = [3, 5, 10, 20];

/// Label of the half-open age interval containing `records`.
pub fn age_bucket(records: usize, edges: &[usize]) -> String {
    match edges.iter().rposition(|&e| records >= e) {
        None => format!("<{}", edges.first().copied().unwrap_or(0)),
        Some(i) if i + 1 == edges.len() => format!("[{},inf)", edges[i]),
        Some(i) => format!("[{},{})", edges[i], edges[i + 1]),
    }
}

pub const UNKNOWN_SECTOR: &str = "unknown";

/// Per-company descriptors used for grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct CompanyInfo {
    pub mean_assets: f64,
    pub records: usize,
    pub sector: Option<String>,
}

/// Mean raw-scale assets, record count and sector for every company.
pub fn company_info(panel: &CompanyPanel) -> BTreeMap<String, CompanyInfo> {
    let reg = panel.registry();
    let at = reg.index_of_code(ASSETS);
    let tr = at.map(|i| reg.specs()[i].transform);
    panel
        .companies()
        .iter()
        .map(|c| {
            let vals: Vec<f64> = at
                .map(|i| {
                    c.records
                        .iter()
                        .filter_map(|r| r.value(i))
                        .map(|v| if panel.meta.transformed { tr.unwrap().invert(v) } else { v })
                        .collect()
                })
                .unwrap_or_default();
            let mean_assets = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
            (
                c.id.clone(),
                CompanyInfo {
                    mean_assets,
                    records: c.records.len(),
                    sector: c.sector().map(str::to_string),
                },
            )
        })
        .collect()
}

pub fn group_by_size(info: &BTreeMap<String, CompanyInfo>) -> BTreeMap<String, String> {
    info.iter().map(|(id, i)| (id.clone(), SizeBucket::of(i.mean_assets).label().to_string())).collect()
}

pub fn group_by_age(info: &BTreeMap<String, CompanyInfo>, edges: &[usize]) -> BTreeMap<String, String> {
    info.iter().map(|(id, i)| (id.clone(), age_bucket(i.records, edges))).collect()
}

pub fn group_by_sector(info: &BTreeMap<String, CompanyInfo>) -> BTreeMap<String, String> {
    info.iter()
        .map(|(id, i)| (id.clone(), i.sector.clone().unwrap_or_else(|| UNKNOWN_SECTOR.to_string())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PerfGroup {
    Under,
    Good,
    Over,
}

impl PerfGroup {
    pub fn label(self) -> &'static str {
        match self {
            Self::Under => "under",
            Self::Good => "good",
            Self::Over => "over",
        }
    }

    /// `bias` is the mean of `actual − GM`.
    pub fn of(mae: f64, bias: f64, theta: f64) -> Self {
        if mae < theta {
            Self::Good
        } else if bias > 0.0 {
            Self::Under
        } else {
            Self::Over
        }
    }
}

/// Company → group label from per-company `(mae, bias)` of the growth model.
pub fn gm_performance_groups(scores: &BTreeMap<String, (f64, f64)>, theta: f64) -> BTreeMap<String, String> {
    scores.iter().map(|(id, &(m, b))| (id.clone(), PerfGroup::of(m, b, theta).label().to_string())).collect()
}

/// Something that produces a multi-target forecast from a history.
pub trait Forecaster: Sync {
    fn name(&self) -> &str;
    /// Up to `horizon` target vectors; fewer when the forecast was truncated.
    fn forecast(&self, history: &History, horizon: usize) -> Result<Vec<Vec<f64>>, EvalError>;
}

pub struct Persistence;

impl Forecaster for Persistence {
    fn name(&self) -> &str {
        "persistence"
    }

    fn forecast(&self, h: &History, horizon: usize) -> Result<Vec<Vec<f64>>, EvalError> {
        let cols: Vec<Vec<f64>> = h.last_targets.iter().map(|&v| persistence_forecast(v, horizon)).collect();
        Ok((0..horizon).map(|k| cols.iter().map(|c| c[k]).collect()).collect())
    }
}

pub struct Gibrat {
    pub drifts: Vec<f64>,
}

impl Forecaster for Gibrat {
    fn name(&self) -> &str {
        "gibrat"
    }

    fn forecast(&self, h: &History, horizon: usize) -> Result<Vec<Vec<f64>>, EvalError> {
        let cols: Vec<Vec<f64>> = h.last_targets.iter().zip(&self.drifts).map(|(&v, &g)| gibrat_forecast(v, g, horizon)).collect();
        Ok((0..horizon).map(|k| cols.iter().map(|c| c[k]).collect()).collect())
    }
}

pub struct Gm {
    pub stepper: GmStepper,
}

impl Forecaster for Gm {
    fn name(&self) -> &str {
        "gm"
    }

    fn forecast(&self, h: &History, horizon: usize) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(self.stepper.rollout(&h.last_targets, horizon).0)
    }
}

pub struct Network {
    pub label: String,
    pub model: ModelState,
    pub anchor: Anchor,
}

impl Forecaster for Network {
    fn name(&self) -> &str {
        &self.label
    }

    fn forecast(&self, h: &History, horizon: usize) -> Result<Vec<Vec<f64>>, EvalError> {
        rollout(&self.model, &self.anchor, h, horizon).map(|r| r.predictions).map_err(|e| EvalError::Model {
            model: self.label.clone(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Acc {
    pub abs: f64,
    pub signed: f64,
    pub n: usize,
}

impl Acc {
    fn add(&mut self, o: &Acc) {
        self.abs += o.abs;
        self.signed += o.signed;
        self.n += o.n;
    }

    pub fn mae(&self) -> Option<f64> {
        (self.n > 0).then(|| self.abs / self.n as f64)
    }

    /// Mean of `actual − prediction`.
    pub fn bias(&self) -> Option<f64> {
        (self.n > 0).then(|| self.signed / self.n as f64)
    }
}

/// Absolute and signed errors accumulated per model, company, target and step.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub models: Vec<String>,
    pub targets: Vec<IndicatorId>,
    pub horizon: usize,
    pub n_origins: usize,
    /// `[model][target][step]`, flattened.
    pub companies: BTreeMap<String, Vec<Acc>>,
}

impl EvalReport {
    fn idx(&self, m: usize, t: usize, s: usize) -> usize {
        (m * self.targets.len() + t) * self.horizon + s
    }

    pub fn model_index(&self, name: &str) -> Option<usize> {
        self.models.iter().position(|m| m == name)
    }

    pub fn target_index(&self, code: &str) -> Option<usize> {
        self.targets.iter().position(|t| t.as_str() == code)
    }

    fn pooled<'a>(&self, m: usize, t: usize, s: usize, ids: impl Iterator<Item = &'a String>) -> Acc {
        let mut a = Acc::default();
        for id in ids {
            if let Some(v) = self.companies.get(id) {
                a.add(&v[self.idx(m, t, s)]);
            }
        }
        a
    }

    /// MAE at step `s` (0-based) pooled over all origins.
    pub fn step_mae(&self, m: usize, t: usize, s: usize) -> Option<f64> {
        self.pooled(m, t, s, self.companies.keys()).mae()
    }

    /// Per-step MAE averaged over targets.
    pub fn step_mae_all_targets(&self, m: usize, s: usize) -> Option<f64> {
        let v: Vec<f64> = (0..self.targets.len()).filter_map(|t| self.step_mae(m, t, s)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Per-company `(mae, bias)` for one model and target over all steps.
    pub fn company_scores(&self, m: usize, t: usize) -> BTreeMap<String, (f64, f64)> {
        self.companies
            .iter()
            .filter_map(|(id, v)| {
                let mut a = Acc::default();
                for s in 0..self.horizon {
                    a.add(&v[self.idx(m, t, s)]);
                }
                Some((id.clone(), (a.mae()?, a.bias()?)))
            })
            .collect()
    }

    /// Pooled MAE per group and step.
    pub fn grouped(&self, m: usize, t: usize, groups: &BTreeMap<String, String>) -> BTreeMap<String, Vec<Acc>> {
        let mut out: BTreeMap<String, Vec<Acc>> = BTreeMap::new();
        for (id, v) in &self.companies {
            let Some(g) = groups.get(id) else { continue };
            let e = out.entry(g.clone()).or_insert_with(|| vec![Acc::default(); self.horizon]);
            for s in 0..self.horizon {
                e[s].add(&v[self.idx(m, t, s)]);
            }
        }
        out
    }

    pub fn header(&self) -> String {
        format!("# models: {}\n", self.models.join(","))
    }

    pub fn per_step_tsv(&self) -> String {
        let mut s = self.header();
        s.push_str("model\ttarget\tstep\tmae\tn\n");
        for (m, name) in self.models.iter().enumerate() {
            for (t, tid) in self.targets.iter().enumerate() {
                for k in 0..self.horizon {
                    let a = self.pooled(m, t, k, self.companies.keys());
                    let _ = writeln!(s, "{name}\t{tid}\t{}\t{}\t{}", k + 1, fmt_opt(a.mae()), a.n);
                }
            }
        }
        s
    }

    pub fn per_company_tsv(&self) -> String {
        let mut s = self.header();
        s.push_str("model\ttarget\tcompany\tmae\tbias\n");
        for (m, name) in self.models.iter().enumerate() {
            for (t, tid) in self.targets.iter().enumerate() {
                for (id, (mae, bias)) in self.company_scores(m, t) {
                    let _ = writeln!(s, "{name}\t{tid}\t{id}\t{mae:.6}\t{bias:.6}");
                }
            }
        }
        s
    }

    pub fn cdf_tsv(&self, target: usize) -> String {
        let mut s = self.header();
        s.push_str("model\tmae\tfraction\n");
        for (m, name) in self.models.iter().enumerate() {
            let maes: Vec<f64> = self.company_scores(m, target).values().map(|v| v.0).collect();
            for (x, f) in cumulative_mae_distribution(&maes).points {
                let _ = writeln!(s, "{name}\t{x:.6}\t{f:.6}");
            }
        }
        s
    }

    pub fn grouped_tsv(&self, kind: &str, groups: &BTreeMap<String, String>) -> String {
        let mut s = self.header();
        s.push_str("grouping\tgroup\tmodel\ttarget\tstep\tmae\tn\tcompanies\n");
        let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
        for id in self.companies.keys() {
            if let Some(g) = groups.get(id) {
                *sizes.entry(g.as_str()).or_default() += 1;
            }
        }
        for (m, name) in self.models.iter().enumerate() {
            for (t, tid) in self.targets.iter().enumerate() {
                for (g, accs) in self.grouped(m, t, groups) {
                    for (k, a) in accs.iter().enumerate() {
                        let _ = writeln!(s, "{kind}\t{g}\t{name}\t{tid}\t{}\t{}\t{}\t{}", k + 1, fmt_opt(a.mae()), a.n, sizes[g.as_str()]);
                    }
                }
            }
        }
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Scores every model on every history against the panel's observed values.
/// Steps the forecast did not reach, and years absent from the panel, are
/// left out rather than counted as zero error.
pub fn evaluate_models(
    panel: &CompanyPanel,
    histories: &[History],
    targets: &[IndicatorId],
    models: &[&dyn Forecaster],
    horizon: usize,
) -> Result<EvalReport, EvalError> {
    if horizon == 0 || models.is_empty() {
        return Err(EvalError::Config("need at least one model and one step".into()));
    }
    let reg = panel.registry();
    let tix: Vec<usize> = targets
        .iter()
        .map(|t| reg.index_of(t).ok_or_else(|| EvalError::Config(format!("target {t} is not in the panel"))))
        .collect::<Result<_, _>>()?;
    let (nm, nt) = (models.len(), targets.len());
    let per: Vec<Result<(String, Vec<Acc>), EvalError>> = histories
        .par_iter()
        .map(|h| {
            let mut acc = vec![Acc::default(); nm * nt * horizon];
            let Some(c) = panel.company(&h.company_id) else {
                return Ok((h.company_id.clone(), acc));
            };
            let actual: Vec<Option<Vec<Option<f64>>>> = (1..=horizon as i32)
                .map(|k| {
                    let y = h.origin_year + k;
                    c.records
                        .binary_search_by_key(&y, |r| r.fiscal_year)
                        .ok()
                        .map(|i| tix.iter().map(|&j| c.records[i].value(j)).collect())
                })
                .collect();
            for (m, model) in models.iter().enumerate() {
                let f = model.forecast(h, horizon)?;
                for (s, pred) in f.iter().enumerate().take(horizon) {
                    let Some(act) = &actual[s] else { continue };
                    for t in 0..nt {
                        if let Some(a) = act[t] {
                            let e = &mut acc[(m * nt + t) * horizon + s];
                            e.abs += (a - pred[t]).abs();
                            e.signed += a - pred[t];
                            e.n += 1;
                        }
                    }
                }
            }
            Ok((h.company_id.clone(), acc))
        })
        .collect();
    let mut companies: BTreeMap<String, Vec<Acc>> = BTreeMap::new();
    for r in per {
        let (id, acc) = r?;
        if acc.iter().all(|a| a.n == 0) {
            continue;
        }
        let e = companies.entry(id).or_insert_with(|| vec![Acc::default(); nm * nt * horizon]);
        for (d, s) in e.iter_mut().zip(&acc) {
            d.add(s);
        }
    }
    Ok(EvalReport {
        models: models.iter().map(|m| m.name().to_string()).collect(),
        targets: targets.to_vec(),
        horizon,
        n_origins: histories.len(),
        companies,
    })
}

/// Companies appearing in more than one of the given panels.
pub fn overlap(a: &CompanyPanel, b: &CompanyPanel) -> BTreeSet<String> {
    let ids: BTreeSet<&str> = a.companies().iter().map(|c| c.id.as_str()).collect();
    b.companies().iter().filter(|c| ids.contains(c.id.as_str())).map(|c| c.id.clone()).collect()
}

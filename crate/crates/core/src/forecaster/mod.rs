//! Encoder-decoder recurrent residual forecaster.
//!
//! The encoder consumes `t` years of indicators; the decoder advances one
//! year per step from an *anchor* (the growth-model prediction for the
//! hybrid, the previous value for the pure network) and a readout adds a
//! residual to it: `ŷ = O + anchor`.

pub mod adam;
pub mod cell;
pub mod io;
pub mod model;
pub mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use cell::{CellParams, RecurrentState};
pub use model::{loss_and_gradients, ModelState, Params, Scaler};
pub use train::{train, TrainingLog};

use crate::growth::{GmStepper, GrowthError};
use crate::kv::{parse_bool, parse_list, KvError};
use crate::panel::{CompanyPanel, CompanySeries, IndicatorGroup, IndicatorId, Registry, ASSETS};

#[derive(Debug, thiserror::Error)]
pub enum ForecastError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("no training windows")]
    NoWindows,
    #[error("model file: {0}")]
    File(String),
    #[error(transparent)]
    Growth(#[from] GrowthError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Whether the decoder adds residuals to the growth model or to its own
/// previous prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForecastMode {
    #[serde(rename = "nn+gm")]
    Hybrid,
    #[serde(rename = "nn")]
    PureNn,
}

impl ForecastMode {
    pub fn label(self) -> &'static str {
        match self {
            ForecastMode::Hybrid => "nn+gm",
            ForecastMode::PureNn => "nn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nn+gm" | "hybrid" => Some(Self::Hybrid),
            "nn" | "pure" => Some(Self::PureNn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastConfig {
    pub hidden_dim: usize,
    pub encoder_len: usize,
    pub decoder_len: usize,
    pub targets: Vec<IndicatorId>,
    /// Encoder inputs; empty means every financial indicator of the panel.
    pub encoder_features: Vec<IndicatorId>,
    pub use_macro: bool,
    pub mode: ForecastMode,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Probability of replacing a teacher-forced anchor with one derived from
    /// the model's own previous prediction.
    pub scheduled_sampling: f64,
    pub seed: u64,
    /// Fixed-order gradient reduction.
    pub deterministic: bool,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            encoder_len: 3,
            decoder_len: 3,
            targets: ["AT", "LT", "REVT", "NI"].into_iter().map(IndicatorId::from).collect(),
            encoder_features: Vec::new(),
            use_macro: false,
            mode: ForecastMode::Hybrid,
            learning_rate: 1e-3,
            weight_decay: 5e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            scheduled_sampling: 0.0,
            seed: 1,
            deterministic: true,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<(), ForecastError> {
        if !self.targets.iter().any(|t| t.as_str() == ASSETS) {
            return Err(ForecastError::Config("targets must include AT".into()));
        }
        if self.hidden_dim == 0 || self.encoder_len == 0 || self.decoder_len == 0 || self.batch_size == 0 {
            return Err(ForecastError::Config("hidden_dim, encoder_len, decoder_len and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.scheduled_sampling) {
            return Err(ForecastError::Config("scheduled_sampling must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), KvError> {
        let num = |v: &str| v.parse::<f64>().map_err(|_| KvError::value(key, v));
        let int = |v: &str| v.parse::<usize>().map_err(|_| KvError::value(key, v));
        match key {
            "hidden_dim" => self.hidden_dim = int(value)?,
            "encoder_len" => self.encoder_len = int(value)?,
            "decoder_len" => self.decoder_len = int(value)?,
            "targets" => self.targets = parse_list(value).into_iter().map(IndicatorId::new).collect(),
            "encoder_features" => self.encoder_features = parse_list(value).into_iter().map(IndicatorId::new).collect(),
            "use_macro" => self.use_macro = parse_bool(key, value)?,
            "mode" => self.mode = ForecastMode::parse(value).ok_or_else(|| KvError::value(key, value))?,
            "learning_rate" => self.learning_rate = num(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "batch_size" => self.batch_size = int(value)?,
            "max_epochs" => self.max_epochs = int(value)?,
            "patience" => self.patience = int(value)?,
            "scheduled_sampling" => self.scheduled_sampling = num(value)?,
            "seed" => self.seed = value.parse().map_err(|_| KvError::value(key, value))?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            _ => return Err(KvError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let ids = |v: &[IndicatorId]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("hidden_dim".into(), self.hidden_dim.to_string()),
            ("encoder_len".into(), self.encoder_len.to_string()),
            ("decoder_len".into(), self.decoder_len.to_string()),
            ("targets".into(), ids(&self.targets)),
            ("encoder_features".into(), ids(&self.encoder_features)),
            ("use_macro".into(), self.use_macro.to_string()),
            ("mode".into(), self.mode.label().into()),
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("max_epochs".into(), self.max_epochs.to_string()),
            ("patience".into(), self.patience.to_string()),
            ("scheduled_sampling".into(), self.scheduled_sampling.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("deterministic".into(), self.deterministic.to_string()),
        ]
    }
}

/// Which panel columns feed the encoder, the decoder macro channel and the targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub encoder_features: Vec<IndicatorId>,
    pub macro_features: Vec<IndicatorId>,
    pub targets: Vec<IndicatorId>,
}

impl FeatureLayout {
    pub fn resolve(registry: &Registry, cfg: &ForecastConfig) -> Result<Self, ForecastError> {
        cfg.validate()?;
        let encoder_features = if cfg.encoder_features.is_empty() {
            registry.financial_ids()
        } else {
            cfg.encoder_features.clone()
        };
        let macro_features = if cfg.use_macro { registry.macro_ids() } else { Vec::new() };
        let layout = Self {
            encoder_features,
            macro_features,
            targets: cfg.targets.clone(),
        };
        layout.indices(registry)?;
        Ok(layout)
    }

    pub fn encoder_dim(&self) -> usize {
        self.encoder_features.len() + self.macro_features.len()
    }

    pub fn decoder_dim(&self) -> usize {
        self.targets.len() + self.macro_features.len()
    }

    pub fn indices(&self, registry: &Registry) -> Result<LayoutIndices, ForecastError> {
        let find = |ids: &[IndicatorId], group: Option<IndicatorGroup>| -> Result<Vec<usize>, ForecastError> {
            ids.iter()
                .map(|id| {
                    let i = registry.index_of(id).ok_or_else(|| ForecastError::Config(format!("indicator {id} is not in the panel")))?;
                    if let Some(g) = group {
                        if registry.specs()[i].group != g {
                            return Err(ForecastError::Config(format!("indicator {id} has the wrong group")));
                        }
                    }
                    Ok(i)
                })
                .collect()
        };
        Ok(LayoutIndices {
            encoder: find(&self.encoder_features, None)?,
            macros: find(&self.macro_features, Some(IndicatorGroup::Macro))?,
            targets: find(&self.targets, None)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutIndices {
    pub encoder: Vec<usize>,
    pub macros: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Produces the value each decoder step's residual is added to.
#[derive(Debug, Clone)]
pub enum Anchor {
    /// One growth-model step from the previous values.
    Growth(GmStepper),
    /// The previous values themselves; residuals are per-year increments.
    Previous,
}

impl Anchor {
    pub fn next(&self, previous: &[f64]) -> Result<Vec<f64>, GrowthError> {
        match self {
            Anchor::Growth(s) => s.step(previous),
            Anchor::Previous => Ok(previous.to_vec()),
        }
    }
}

/// One supervised window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub company_id: String,
    /// Fiscal year of the last encoder step.
    pub origin_year: i32,
    /// `t` vectors: encoder features followed by macro features.
    pub encoder_inputs: Vec<Vec<f64>>,
    /// `T` anchor vectors, teacher forced from observed predecessors.
    pub decoder_gm: Vec<Vec<f64>>,
    /// `T` macro vectors (empty vectors when macro input is off).
    pub decoder_macro: Vec<Vec<f64>>,
    /// `T` observed target vectors.
    pub labels: Vec<Vec<f64>>,
    /// Targets at the origin year.
    pub last_targets: Vec<f64>,
}

impl TrainingSample {
    pub fn residual_labels(&self) -> Vec<Vec<f64>> {
        self.labels
            .iter()
            .zip(&self.decoder_gm)
            .map(|(l, g)| l.iter().zip(g).map(|(a, b)| a - b).collect())
            .collect()
    }
}

/// Encoder history for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub company_id: String,
    pub origin_year: i32,
    pub encoder_inputs: Vec<Vec<f64>>,
    pub last_targets: Vec<f64>,
    /// Macro vectors for the forecast years (needed only with macro input).
    pub future_macro: Vec<Vec<f64>>,
}

fn consecutive(recs: &[crate::panel::CompanyRecord]) -> bool {
    recs.windows(2).all(|w| w[1].fiscal_year == w[0].fiscal_year + 1)
}

fn gather(rec: &crate::panel::CompanyRecord, idx: &[usize]) -> Option<Vec<f64>> {
    idx.iter().map(|&i| rec.value(i)).collect()
}

/// Encoder block for rows ending at `origin` (inclusive), if complete.
fn encoder_block(c: &CompanySeries, origin: usize, t: usize, ix: &LayoutIndices) -> Option<Vec<Vec<f64>>> {
    if origin + 1 < t {
        return None;
    }
    let rows = &c.records[origin + 1 - t..=origin];
    if !consecutive(rows) {
        return None;
    }
    rows.iter()
        .map(|r| {
            let mut v = gather(r, &ix.encoder)?;
            v.extend(gather(r, &ix.macros)?);
            Some(v)
        })
        .collect()
}

/// Slides a `t + T` window with stride 1 over every company. Windows that
/// touch an absent value, skip a year, or hit a growth-model failure are
/// dropped.
pub fn make_windows(panel: &CompanyPanel, anchor: &Anchor, layout: &FeatureLayout, cfg: &ForecastConfig) -> Result<Vec<TrainingSample>, ForecastError> {
    let ix = layout.indices(panel.registry())?;
    let (t, big_t) = (cfg.encoder_len, cfg.decoder_len);
    let mut out = Vec::new();
    for c in panel.companies() {
        let n = c.records.len();
        if n < t + big_t {
            continue;
        }
        for s in 0..=n - (t + big_t) {
            let rows = &c.records[s..s + t + big_t];
            if !consecutive(rows) {
                continue;
            }
            let origin = s + t - 1;
            let Some(encoder_inputs) = encoder_block(c, origin, t, &ix) else {
                continue;
            };
            let targets: Option<Vec<Vec<f64>>> = (origin..origin + big_t + 1).map(|r| gather(&c.records[r], &ix.targets)).collect();
            let Some(targets) = targets else { continue };
            let decoder_macro: Option<Vec<Vec<f64>>> = (origin + 1..=origin + big_t).map(|r| gather(&c.records[r], &ix.macros)).collect();
            let Some(decoder_macro) = decoder_macro else { continue };
            let anchors: Result<Vec<Vec<f64>>, _> = targets[..big_t].iter().map(|prev| anchor.next(prev)).collect();
            let Ok(decoder_gm) = anchors else { continue };
            out.push(TrainingSample {
                company_id: c.id.clone(),
                origin_year: c.records[origin].fiscal_year,
                encoder_inputs,
                decoder_gm,
                decoder_macro,
                labels: targets[1..].to_vec(),
                last_targets: targets[0].clone(),
            });
        }
    }
    Ok(out)
}

/// Every origin with a complete, gap-free `t`-year history. Future macro
/// values come from the panel-wide year table.
pub fn histories(panel: &CompanyPanel, layout: &FeatureLayout, encoder_len: usize, horizon: usize) -> Result<Vec<History>, ForecastError> {
    let ix = layout.indices(panel.registry())?;
    let macro_table: BTreeMap<i32, Vec<f64>> = if ix.macros.is_empty() { BTreeMap::new() } else { panel.macro_table(&ix.macros) };
    let mut out = Vec::new();
    for c in panel.companies() {
        for origin in 0..c.records.len() {
            let Some(encoder_inputs) = encoder_block(c, origin, encoder_len, &ix) else {
                continue;
            };
            let Some(last_targets) = gather(&c.records[origin], &ix.targets) else {
                continue;
            };
            let year = c.records[origin].fiscal_year;
            let future_macro = if ix.macros.is_empty() {
                vec![Vec::new(); horizon]
            } else {
                // years past the end of the table repeat the latest known values
                let fm: Option<Vec<Vec<f64>>> = (1..=horizon as i32)
                    .map(|k| macro_table.range(..=year + k).next_back().map(|(_, v)| v.clone()))
                    .collect();
                match fm {
                    Some(fm) => fm,
                    None => continue,
                }
            };
            out.push(History {
                company_id: c.id.clone(),
                origin_year: year,
                encoder_inputs,
                last_targets,
                future_macro,
            });
        }
    }
    Ok(out)
}

/// The most recent complete history per company.
pub fn latest_histories(panel: &CompanyPanel, layout: &FeatureLayout, encoder_len: usize) -> Result<Vec<History>, ForecastError> {
    let cfg_layout = FeatureLayout {
        macro_features: Vec::new(),
        ..layout.clone()
    };
    let all = histories(panel, &cfg_layout, encoder_len, 0)?;
    let mut latest: BTreeMap<String, History> = BTreeMap::new();
    for h in all {
        latest.insert(h.company_id.clone(), h);
    }
    Ok(latest.into_values().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum RolloutStatus {
    Complete,
    Truncated { at_step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub predictions: Vec<Vec<f64>>,
    pub residuals: Vec<Vec<f64>>,
    pub anchors: Vec<Vec<f64>>,
    pub status: RolloutStatus,
}

/// Closed-loop forecast: each step's anchor comes from the previous step's
/// prediction (the observed origin values for step 1).
pub fn rollout(model: &ModelState, anchor: &Anchor, history: &History, horizon: usize) -> Result<Rollout, ForecastError> {
    if horizon == 0 {
        return Err(ForecastError::Config("horizon must be at least 1".into()));
    }
    if !model.layout.macro_features.is_empty() && history.future_macro.len() < horizon {
        return Err(ForecastError::Config("macro input needs macro values for every forecast year".into()));
    }
    let mut state = model.encode(&history.encoder_inputs)?;
    let mut prev = history.last_targets.clone();
    let mut out = Rollout {
        predictions: Vec::with_capacity(horizon),
        residuals: Vec::with_capacity(horizon),
        anchors: Vec::with_capacity(horizon),
        status: RolloutStatus::Complete,
    };
    let empty = Vec::new();
    for k in 0..horizon {
        let a = match anchor.next(&prev) {
            Ok(a) => a,
            Err(e) => {
                out.status = RolloutStatus::Truncated {
                    at_step: k + 1,
                    reason: e.to_string(),
                };
                break;
            }
        };
        let mac = history.future_macro.get(k).unwrap_or(&empty);
        let (next_state, residual) = model.decoder_step(&a, mac, &state)?;
        state = next_state;
        let pred: Vec<f64> = residual.iter().zip(&a).map(|(o, g)| o + g).collect();
        prev = pred.clone();
        out.predictions.push(pred);
        out.residuals.push(residual);
        out.anchors.push(a);
    }
    Ok(out)
}

/// Residual added to the growth model's own closed-loop prediction.
pub fn hybrid_rollout(model: &ModelState, stepper: &GmStepper, history: &History, horizon: usize) -> Result<Rollout, ForecastError> {
    rollout(model, &Anchor::Growth(stepper.clone()), history, horizon)
}

/// Increments accumulated from the last observed values.
pub fn pure_nn_rollout(model: &ModelState, history: &History, horizon: usize) -> Result<Rollout, ForecastError> {
    rollout(model, &Anchor::Previous, history, horizon)
}

//! End-to-end experiment: synthetic panel, cleaning, split, fits, training
//! and scoring of all five models.

use std::collections::BTreeMap;

use anyhow::{Context, Result};
use gmcast_core::baselines::fit_gibrat;
use gmcast_core::eval::{evaluate_models, split_dataset, EvalReport, Forecaster, Gibrat, Gm, Network, Persistence, Split, SplitSpec};
use gmcast_core::forecaster::{histories, make_windows, train, Anchor, FeatureLayout, ForecastConfig, ForecastMode, History, ModelState, TrainingLog};
use gmcast_core::growth::{GmStepper, GrowthModel};
use gmcast_core::kv::KvError;
use gmcast_core::panel::CompanyPanel;
use gmcast_core::preprocess::{run_pipeline, PreprocessConfig, PreprocessReport};
use gmcast_core::scaling::{fit_all, GrowthParams, ObservationFilter};
use gmcast_core::synth::{self, SynthConfig};

pub const ALL_MODELS: [&str; 5] = ["persistence", "gibrat", "gm", "nn", "nn+gm"];

/// Settings of one full run. Keys in a config file are prefixed by section:
/// `synth.*`, `forecast.*`, `split.*`, or are top-level.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub preset: String,
    pub synth: SynthConfig,
    pub forecast: ForecastConfig,
    pub cutoff_year: i32,
    pub horizon: usize,
    pub models: Vec<String>,
    pub explain_target: String,
    pub explain_companies: usize,
    pub permutations: usize,
}

/// The run-level defaults differ from the component defaults in three places:
/// a larger panel, a decoder trained over the full evaluation horizon, and
/// scheduled sampling.
impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            preset: "structured".into(),
            synth: SynthConfig {
                n_companies: 1000,
                ..synth::structured(1)
            },
            forecast: ForecastConfig {
                decoder_len: 10,
                scheduled_sampling: 0.5,
                ..ForecastConfig::default()
            },
            cutoff_year: 2010,
            horizon: 10,
            models: ALL_MODELS.iter().map(|s| s.to_string()).collect(),
            explain_target: "AT".into(),
            explain_companies: 20,
            permutations: 500,
        }
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str, seed: u64) -> Option<SynthConfig> {
        match name {
            "structured" => Some(synth::structured(seed)),
            "gibratlike" => Some(synth::gibrat_like(seed)),
            "noiseless" => Some(synth::noiseless(seed)),
            _ => None,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), KvError> {
        if let Some(k) = key.strip_prefix("synth.") {
            return self.synth.set(k, value);
        }
        if let Some(k) = key.strip_prefix("forecast.") {
            return self.forecast.set(k, value);
        }
        let int = |v: &str| v.parse::<usize>().map_err(|_| KvError::value(key, v));
        match key {
            "seed" => {
                let seed = value.parse().map_err(|_| KvError::value(key, value))?;
                *self = std::mem::take(self).with_seed(seed);
            }
            "preset" => {
                let s = Self::preset(value, self.synth.seed).ok_or_else(|| KvError::value(key, value))?;
                self.preset = value.to_string();
                self.synth = SynthConfig {
                    n_companies: self.synth.n_companies,
                    ..s
                };
            }
            "split.cutoff_year" => self.cutoff_year = value.parse().map_err(|_| KvError::value(key, value))?,
            "horizon" => self.horizon = int(value)?,
            "models" => self.models = gmcast_core::kv::parse_list(value),
            "explain.target" => self.explain_target = value.to_string(),
            "explain.companies" => self.explain_companies = int(value)?,
            "explain.permutations" => self.permutations = int(value)?,
            _ => return Err(KvError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `seed` to every component stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.forecast.seed = seed;
        self
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("preset".into(), self.preset.clone()),
            ("split.cutoff_year".into(), self.cutoff_year.to_string()),
            ("horizon".into(), self.horizon.to_string()),
            ("models".into(), self.models.join(",")),
            ("explain.target".into(), self.explain_target.clone()),
            ("explain.companies".into(), self.explain_companies.to_string()),
            ("explain.permutations".into(), self.permutations.to_string()),
        ];
        v.extend(self.synth.to_kv().into_iter().map(|(k, x)| (format!("synth.{k}"), x)));
        v.extend(self.forecast.to_kv().into_iter().map(|(k, x)| (format!("forecast.{k}"), x)));
        v
    }
}

/// Cleaned panel, partitions and everything fitted on the training partition.
pub struct Prepared {
    pub panel: CompanyPanel,
    pub report: PreprocessReport,
    pub split: Split,
    pub params: GrowthParams,
    pub gm: GrowthModel,
    pub stepper: GmStepper,
    pub layout: FeatureLayout,
    pub gibrat_drifts: Vec<f64>,
}

pub fn prepare(raw: &CompanyPanel, forecast: &ForecastConfig, preprocess: &PreprocessConfig, split: &SplitSpec) -> Result<Prepared> {
    let (panel, report) = run_pipeline(raw, preprocess).context("preprocess")?;
    fit_partition(panel, report, forecast, split)
}

/// Splits an already cleaned panel and fits every baseline on its training part.
pub fn fit_partition(panel: CompanyPanel, report: PreprocessReport, forecast: &ForecastConfig, split: &SplitSpec) -> Result<Prepared> {
    let split = split_dataset(&panel, split).context("split")?;
    let params = fit_all(&split.train, &ObservationFilter::default()).context("fit-scaling")?;
    let gm = GrowthModel::from_params(&params);
    let stepper = GmStepper::new(gm.clone(), panel.registry(), &forecast.targets).context("growth model")?;
    let layout = FeatureLayout::resolve(panel.registry(), forecast).context("feature layout")?;
    let gibrat_drifts = forecast
        .targets
        .iter()
        .map(|t| fit_gibrat(&split.train, t).map(|g| g.drift))
        .collect::<Result<Vec<_>, _>>()
        .context("gibrat fit")?;
    Ok(Prepared {
        panel,
        report,
        split,
        params,
        gm,
        stepper,
        layout,
        gibrat_drifts,
    })
}

pub fn anchor_for(mode: ForecastMode, stepper: &GmStepper) -> Anchor {
    match mode {
        ForecastMode::Hybrid => Anchor::Growth(stepper.clone()),
        ForecastMode::PureNn => Anchor::Previous,
    }
}

pub fn train_mode(prep: &Prepared, cfg: &ForecastConfig, mode: ForecastMode) -> Result<(ModelState, TrainingLog)> {
    let cfg = ForecastConfig { mode, ..cfg.clone() };
    let anchor = anchor_for(mode, &prep.stepper);
    let tr = make_windows(&prep.split.train, &anchor, &prep.layout, &cfg)?;
    let va = make_windows(&prep.split.val, &anchor, &prep.layout, &cfg)?;
    log::info!("{}: {} training and {} validation windows", mode.label(), tr.len(), va.len());
    let (mut model, log) = train(&tr, &va, &anchor, &prep.layout, &cfg).with_context(|| format!("train {}", mode.label()))?;
    model.data_hash = prep.split.train.content_hash();
    Ok((model, log))
}

pub fn test_histories(prep: &Prepared, cfg: &ForecastConfig, horizon: usize) -> Result<Vec<History>> {
    Ok(histories(&prep.split.test, &prep.layout, cfg.encoder_len, horizon)?)
}

/// Scores the requested models on the test partition.
pub fn score(prep: &Prepared, cfg: &ForecastConfig, networks: &BTreeMap<String, ModelState>, models: &[String], horizon: usize) -> Result<EvalReport> {
    let hist = test_histories(prep, cfg, horizon)?;
    let persistence = Persistence;
    let gibrat = Gibrat {
        drifts: prep.gibrat_drifts.clone(),
    };
    let gm = Gm {
        stepper: prep.stepper.clone(),
    };
    let nets: Vec<Network> = networks
        .iter()
        .map(|(label, m)| Network {
            label: label.clone(),
            model: m.clone(),
            anchor: anchor_for(m.config.mode, &prep.stepper),
        })
        .collect();
    let mut list: Vec<&dyn Forecaster> = Vec::new();
    for name in models {
        match name.as_str() {
            "persistence" => list.push(&persistence),
            "gibrat" => list.push(&gibrat),
            "gm" => list.push(&gm),
            other => {
                let n = nets.iter().find(|n| n.label == other).with_context(|| format!("no trained model for `{other}`"))?;
                list.push(n);
            }
        }
    }
    Ok(evaluate_models(&prep.split.test, &hist, &cfg.targets, &list, horizon).context("evaluate")?)
}

/// Everything a full run produces in memory.
pub struct Outcome {
    pub prepared: Prepared,
    pub models: BTreeMap<String, ModelState>,
    pub logs: BTreeMap<String, TrainingLog>,
    pub report: EvalReport,
}

impl ExperimentConfig {
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            cutoff_year: self.cutoff_year,
            seed: self.seed,
            ..Default::default()
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let raw = synth::generate(&cfg.synth).context("synth")?;
    let prepared = prepare(&raw, &cfg.forecast, &PreprocessConfig::default(), &cfg.split_spec())?;
    train_and_score(prepared, cfg)
}

pub fn train_and_score(prepared: Prepared, cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut models = BTreeMap::new();
    let mut logs = BTreeMap::new();
    for (label, mode) in [("nn", ForecastMode::PureNn), ("nn+gm", ForecastMode::Hybrid)] {
        if cfg.models.iter().any(|m| m == label) {
            let (m, l) = train_mode(&prepared, &cfg.forecast, mode)?;
            models.insert(label.to_string(), m);
            logs.insert(label.to_string(), l);
        }
    }
    let report = score(&prepared, &cfg.forecast, &models, &cfg.models, cfg.horizon)?;
    Ok(Outcome {
        prepared,
        models,
        logs,
        report,
    })
}

//! Command-line front end for the gmcast pipeline.

pub mod pipeline;
pub mod plot;

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context};
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use gmcast_core::baselines::fit_gibrat;
use gmcast_core::eval::{
    company_info, evaluate_models, gm_performance_groups, group_by_age, group_by_sector, group_by_size, split_dataset, EvalReport, Forecaster, Gibrat,
    Gm, Network, Persistence, SizeBucket, DEFAULT_AGE_EDGES,
};
use gmcast_core::explain::{explain_model, extract_hidden, pca_project, ModelAttribution};
use gmcast_core::forecaster::io::{load_model, save_model, FORMAT_VERSION};
use gmcast_core::forecaster::{histories, make_windows, rollout, train, Anchor, FeatureLayout, ForecastMode, History, ModelState, RolloutStatus};
use gmcast_core::growth::{GmStepper, GrowthModel};
use gmcast_core::kv::{read_kv, write_kv};
use gmcast_core::panel::{load_panel, write_panel, CompanyPanel, IndicatorId, Registry};
use gmcast_core::preprocess::{parse_cpi, run_pipeline, PreprocessConfig};
use gmcast_core::scaling::{fit_all, ObservationFilter, ParamsFile};
use gmcast_core::synth;
use sha2::{Digest, Sha256};

use crate::pipeline::{anchor_for, fit_partition, score, test_histories, train_mode, ExperimentConfig};
use crate::plot::{chart, Series, Style};

/// A pipeline failure tagged with the stage that produced it.
#[derive(Debug)]
pub struct Failure {
    pub stage: String,
    pub error: anyhow::Error,
}

trait StageExt<T> {
    fn stage(self, name: &str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> StageExt<T> for Result<T, E> {
    fn stage(self, name: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            stage: name.to_string(),
            error: e.into(),
        })
    }
}

#[derive(Parser, Debug)]
#[command(name = "gmcast", version, about = "Company growth forecasting with a mechanistic growth model and a residual recurrent network")]
pub struct Cli {
    /// Cap on worker threads for parallel sections; 0 uses every core
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    pub threads: usize,
    /// Log verbosity: -v info, -vv debug
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic panel, or the three benchmark panels with --suite
    Synth(SynthArgs),
    /// Clean, inflation-adjust and transform a raw panel
    Preprocess(PreprocessArgs),
    /// Fit the power-law scaling parameters of the growth model
    FitScaling(FitArgs),
    /// Forecast with the growth model from each company's latest year
    GmForecast(GmForecastArgs),
    /// Train a recurrent forecaster
    Train(TrainArgs),
    /// Forecast with a trained network from each company's latest years
    Forecast(ForecastArgs),
    /// Score models on a test panel and write reports and plots
    Evaluate(EvaluateArgs),
    /// Shapley attribution of a network's horizon-1 prediction
    Explain(ExplainArgs),
    /// Two-dimensional PCA of the encoder's final hidden states
    Represent(RepresentArgs),
    /// Run the whole synthetic pipeline and write a run directory
    Reproduce(ReproduceArgs),
}

/// Layered configuration: built-in defaults, then `--config`, then `--seed`, then `--set`.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// key = value configuration file
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed for every random stream
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one configuration key (repeatable); keys are listed in `gmcast --help`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            for (k, v) in read_kv(path).with_context(|| format!("reading {}", path.display()))? {
                cfg.set(&k, &v).with_context(|| format!("in {}", path.display()))?;
            }
        }
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.forecast.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output panel file, or a directory with --suite
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Write NOISELESS, GIBRATLIKE and STRUCTURED panels
    #[arg(long)]
    pub suite: bool,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Raw panel (comma or tab separated)
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Cleaned panel
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    /// Annual inflation rates (year, rate in percent); the adjustment is skipped without it
    #[arg(long, value_name = "FILE")]
    pub cpi: Option<PathBuf>,
    /// Indicators missing in more than this fraction of cells are dropped
    #[arg(long, default_value_t = 0.40)]
    pub cutoff: f64,
    /// Companies with fewer records are removed
    #[arg(long, default_value_t = 3)]
    pub min_years: usize,
    /// Deflation base year
    #[arg(long, default_value_t = 2019)]
    pub base_year: i32,
    /// Also write train.csv, val.csv and test.csv into this directory
    #[arg(long, value_name = "DIR")]
    pub split: Option<PathBuf>,
    /// Split shuffle seed
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Records from this year on go to the test partition
    #[arg(long, default_value_t = 2010)]
    pub split_year: i32,
    /// Write the processing report here instead of stdout
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Cleaned training panel
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// Parameter file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Fit NI only on records where it was positive
    #[arg(long)]
    pub positive_only: bool,
}

#[derive(Args, Debug)]
pub struct GmForecastArgs {
    #[arg(long, value_name = "FILE")]
    pub params: PathBuf,
    /// Cleaned panel
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub horizon: usize,
    /// Indicators to forecast
    #[arg(long, value_delimiter = ',', default_value = "AT,LT,REVT,NI")]
    pub targets: Vec<String>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Cleaned training panel
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// Cleaned validation panel
    #[arg(long, value_name = "FILE")]
    pub val: Option<PathBuf>,
    /// Growth-model parameters (required for nn+gm)
    #[arg(long, value_name = "FILE")]
    pub params: Option<PathBuf>,
    /// Overrides forecast.mode
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ForecastMode>,
    /// Model file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Per-epoch losses
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ForecastArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Cleaned panel
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Growth-model parameters (required for nn+gm)
    #[arg(long, value_name = "FILE")]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub horizon: usize,
    /// Must match the mode the model was trained in
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ForecastMode>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum GroupBy {
    Size,
    Age,
    Sector,
    GmThreshold,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Cleaned test panel
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Cleaned training panel for the Gibrat drift
    #[arg(long, value_name = "FILE")]
    pub train: Option<PathBuf>,
    /// Growth-model parameters
    #[arg(long, value_name = "FILE")]
    pub params: Option<PathBuf>,
    /// Pure network model file
    #[arg(long, value_name = "FILE")]
    pub nn: Option<PathBuf>,
    /// Hybrid model file
    #[arg(long = "nn-gm", value_name = "FILE")]
    pub nn_gm: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "persistence,gibrat,gm,nn,nn+gm")]
    pub models: Vec<String>,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "size,age,sector,gm-threshold")]
    pub groupby: Vec<GroupBy>,
    /// GM-performance thresholds
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.4,0.5")]
    pub theta: Vec<f64>,
    /// Steps to report, as `a..b` or a comma list
    #[arg(long, default_value = "1..10")]
    pub horizons: String,
    /// Indicators to score
    #[arg(long, value_delimiter = ',', default_value = "AT,LT,REVT,NI")]
    pub targets: Vec<String>,
    /// Encoder length of the evaluation histories
    #[arg(long, default_value_t = 3)]
    pub encoder_len: usize,
    /// Report directory
    #[arg(long, value_name = "DIR")]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Cleaned panel
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Growth-model parameters (required for nn+gm)
    #[arg(long, value_name = "FILE")]
    pub params: Option<PathBuf>,
    #[arg(long, default_value = "AT")]
    pub target: String,
    /// Permutations when there are too many features for exact enumeration
    #[arg(long, default_value_t = 500)]
    pub permutations: usize,
    /// Companies explained, first by id
    #[arg(long, default_value_t = 20)]
    pub companies: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ColorBy {
    Size,
    Age,
    Sector,
}

#[derive(Args, Debug)]
pub struct RepresentArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Cleaned panel
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "size")]
    pub color_by: ColorBy,
    #[arg(long, default_value_t = 2)]
    pub components: usize,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReproduceArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Run directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

fn parse_mode(s: &str) -> Result<ForecastMode, String> {
    ForecastMode::parse(s).ok_or_else(|| format!("expected `nn` or `nn+gm`, got `{s}`"))
}

fn config_help() -> String {
    let mut s = String::from("Configuration keys and defaults (for --config files and --set):\n");
    for (k, v) in ExperimentConfig::default().to_kv() {
        let _ = writeln!(s, "  {k} = {v}");
    }
    s.push_str("\nExit status: 0 success, 1 pipeline failure (the failing stage is named), 2 usage error.");
    s
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cmd = Cli::command().after_help(config_help());
    let cli = match cmd.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli.command)) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: stage `{}` failed: {:#}", f.stage, f.error);
            1
        }
    }
}

fn dispatch(cmd: &Command) -> Result<(), Failure> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::FitScaling(a) => cmd_fit(a),
        Command::GmForecast(a) => cmd_gm_forecast(a),
        Command::Train(a) => cmd_train(a),
        Command::Forecast(a) => cmd_forecast(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Represent(a) => cmd_represent(a),
        Command::Reproduce(a) => cmd_reproduce(a),
    }
}

fn check(cond: bool, stage: &str, message: String) -> Result<(), Failure> {
    if cond {
        Ok(())
    } else {
        Err(Failure {
            stage: stage.to_string(),
            error: anyhow!(message),
        })
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Refuses to write over any of the inputs.
fn ensure_distinct(output: &Path, inputs: &[&Path]) -> anyhow::Result<()> {
    let Ok(out) = output.canonicalize() else { return Ok(()) };
    for i in inputs {
        if i.canonicalize().map(|p| p == out).unwrap_or(false) {
            bail!("output {} would overwrite an input", output.display());
        }
    }
    Ok(())
}

fn read_panel(path: &Path) -> anyhow::Result<CompanyPanel> {
    let (panel, report) = load_panel(path, &Registry::standard()).with_context(|| format!("reading {}", path.display()))?;
    if !report.ignored_columns.is_empty() {
        log::warn!("{}: ignored columns {}", path.display(), report.ignored_columns.join(","));
    }
    Ok(panel)
}

fn read_clean(path: &Path) -> anyhow::Result<CompanyPanel> {
    let p = read_panel(path)?;
    ensure!(p.meta.transformed, "{} has not been preprocessed; run `gmcast preprocess` first", path.display());
    Ok(p)
}

fn ids(codes: &[String]) -> Vec<IndicatorId> {
    codes.iter().map(|c| IndicatorId::from(c.as_str())).collect()
}

fn read_stepper(params: &Path, registry: &Registry, targets: &[IndicatorId]) -> anyhow::Result<GmStepper> {
    let pf = ParamsFile::read(params).with_context(|| format!("reading {}", params.display()))?;
    Ok(GmStepper::new(GrowthModel::from_params(&pf.params), registry, targets)?)
}

fn model_anchor(model: &ModelState, params: Option<&Path>, registry: &Registry) -> anyhow::Result<Anchor> {
    Ok(match model.config.mode {
        ForecastMode::PureNn => Anchor::Previous,
        ForecastMode::Hybrid => {
            let p = params.ok_or_else(|| anyhow!("a hybrid model needs --params"))?;
            Anchor::Growth(read_stepper(p, registry, &model.layout.targets)?)
        }
    })
}

fn file_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unix_time() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn cmd_synth(a: &SynthArgs) -> Result<(), Failure> {
    let cfg = a.cfg.resolve().stage("config")?;
    if a.suite {
        for (name, panel) in synth::benchmark_suite(cfg.synth.seed).stage("synth")? {
            let path = a.out.join(format!("{name}.csv"));
            std::fs::create_dir_all(&a.out).stage("synth")?;
            write_panel(&panel, &path).stage("synth")?;
            log::info!("{}: {} companies, {} records", path.display(), panel.n_companies(), panel.n_records());
        }
        return Ok(());
    }
    let panel = synth::generate(&cfg.synth).stage("synth")?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).stage("synth")?;
    }
    write_panel(&panel, &a.out).stage("synth")?;
    log::info!("{}: {} companies, {} records", a.out.display(), panel.n_companies(), panel.n_records());
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<(), Failure> {
    ensure_distinct(&a.output, &[&a.input]).stage("preprocess")?;
    let raw = read_panel(&a.input).stage("load")?;
    let cpi_series = match &a.cpi {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).stage("load")?;
            Some(parse_cpi(&text).stage("load")?)
        }
        None => None,
    };
    let pcfg = PreprocessConfig {
        missing_fraction_cutoff: a.cutoff,
        min_series_length: a.min_years,
        base_year: a.base_year,
        cpi_series,
        ..Default::default()
    };
    let (clean, report) = run_pipeline(&raw, &pcfg).stage("preprocess")?;
    write_panel(&clean, &a.output).stage("preprocess")?;
    match &a.report {
        Some(p) => write_file(p, report.to_text()).stage("preprocess")?,
        None => print!("{}", report.to_text()),
    }
    if let Some(dir) = &a.split {
        let spec = gmcast_core::eval::SplitSpec {
            cutoff_year: a.split_year,
            seed: a.seed,
            ..Default::default()
        };
        let split = split_dataset(&clean, &spec).stage("split")?;
        std::fs::create_dir_all(dir).stage("split")?;
        for (name, p) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
            write_panel(p, dir.join(format!("{name}.csv"))).stage("split")?;
        }
    }
    Ok(())
}

fn cmd_fit(a: &FitArgs) -> Result<(), Failure> {
    ensure_distinct(&a.out, &[&a.train]).stage("fit-scaling")?;
    let panel = read_clean(&a.train).stage("load")?;
    let filter = ObservationFilter {
        ni_positive_only: a.positive_only,
    };
    let params = fit_all(&panel, &filter).stage("fit-scaling")?;
    let pf = ParamsFile {
        params,
        fit_timestamp: format!("unix:{}", unix_time()),
        data_hash: panel.content_hash(),
    };
    pf.write(&a.out).stage("fit-scaling")?;
    print!("{}", params_table(&pf));
    Ok(())
}

fn params_table(pf: &ParamsFile) -> String {
    let mut s = String::from("indicator\tbeta\tbeta_lo\tbeta_hi\tln_c\tr2\tn_obs\n");
    for f in pf.params.per_indicator.values() {
        let _ = writeln!(s, "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}", f.indicator, f.beta, f.beta_ci.0, f.beta_ci.1, f.ln_c, f.r2, f.n_obs);
    }
    s
}

/// Latest usable history per company.
fn latest(panel: &CompanyPanel, layout: &FeatureLayout, encoder_len: usize, horizon: usize) -> anyhow::Result<Vec<History>> {
    let mut by_company: BTreeMap<String, History> = BTreeMap::new();
    for h in histories(panel, layout, encoder_len, horizon)? {
        by_company.insert(h.company_id.clone(), h);
    }
    Ok(by_company.into_values().collect())
}

/// One row per company, step and target; steps after a truncation are `NA`.
fn forecast_table(targets: &[IndicatorId], horizon: usize, rows: &[(&History, Vec<Vec<f64>>, Option<String>)]) -> String {
    let mut s = String::from("company_id\torigin_year\tstep\tindicator\tpredicted_value\tstatus\n");
    for (h, preds, reason) in rows {
        for k in 0..horizon {
            for (t, id) in targets.iter().enumerate() {
                match preds.get(k) {
                    Some(p) => {
                        let _ = writeln!(s, "{}\t{}\t{}\t{id}\t{}\tok", h.company_id, h.origin_year, k + 1, p[t]);
                    }
                    None => {
                        let why = reason.as_deref().unwrap_or("truncated");
                        let _ = writeln!(s, "{}\t{}\t{}\t{id}\tNA\ttruncated: {why}", h.company_id, h.origin_year, k + 1);
                    }
                }
            }
        }
    }
    s
}

fn cmd_gm_forecast(a: &GmForecastArgs) -> Result<(), Failure> {
    ensure_distinct(&a.out, &[&a.input, &a.params]).stage("gm-forecast")?;
    check(a.horizon > 0, "config", "horizon must be at least 1".into())?;
    let panel = read_clean(&a.input).stage("load")?;
    let targets = ids(&a.targets);
    let stepper = read_stepper(&a.params, panel.registry(), &targets).stage("gm-forecast")?;
    let layout = FeatureLayout {
        encoder_features: targets.clone(),
        macro_features: Vec::new(),
        targets: targets.clone(),
    };
    let hist = latest(&panel, &layout, 1, a.horizon).stage("gm-forecast")?;
    let rows: Vec<_> = hist
        .iter()
        .map(|h| {
            let (p, fail) = stepper.rollout(&h.last_targets, a.horizon);
            (h, p, fail.map(|(_, e)| e.to_string()))
        })
        .collect();
    write_file(&a.out, forecast_table(&targets, a.horizon, &rows)).stage("gm-forecast")?;
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), Failure> {
    let mut inputs: Vec<&Path> = vec![&a.train];
    inputs.extend(a.val.as_deref());
    inputs.extend(a.params.as_deref());
    ensure_distinct(&a.out, &inputs).stage("train")?;
    let mut cfg = a.cfg.resolve().stage("config")?.forecast;
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    let train_panel = read_clean(&a.train).stage("load")?;
    let val_panel = a.val.as_deref().map(read_clean).transpose().stage("load")?;
    let layout = FeatureLayout::resolve(train_panel.registry(), &cfg).stage("train")?;
    let anchor = match cfg.mode {
        ForecastMode::PureNn => Anchor::Previous,
        ForecastMode::Hybrid => {
            let p = a.params.as_deref().ok_or_else(|| anyhow!("mode nn+gm needs --params")).stage("config")?;
            Anchor::Growth(read_stepper(p, train_panel.registry(), &layout.targets).stage("train")?)
        }
    };
    let tr = make_windows(&train_panel, &anchor, &layout, &cfg).stage("train")?;
    let va = match &val_panel {
        Some(v) => make_windows(v, &anchor, &layout, &cfg).stage("train")?,
        None => Vec::new(),
    };
    log::info!("{} training and {} validation windows", tr.len(), va.len());
    let (mut model, tlog) = train(&tr, &va, &anchor, &layout, &cfg).stage("train")?;
    model.data_hash = train_panel.content_hash();
    save_model(&model, &a.out).stage("train")?;
    if let Some(p) = &a.log {
        write_file(p, tlog.to_tsv()).stage("train")?;
    }
    println!("best epoch {} validation loss {:.6}", tlog.best_epoch, tlog.best_val_loss);
    Ok(())
}

fn network_rows<'a>(model: &ModelState, anchor: &Anchor, hist: &'a [History], horizon: usize) -> anyhow::Result<Vec<(&'a History, Vec<Vec<f64>>, Option<String>)>> {
    hist.iter()
        .map(|h| {
            let r = rollout(model, anchor, h, horizon)?;
            let reason = match r.status {
                RolloutStatus::Complete => None,
                RolloutStatus::Truncated { reason, .. } => Some(reason),
            };
            Ok((h, r.predictions, reason))
        })
        .collect()
}

fn cmd_forecast(a: &ForecastArgs) -> Result<(), Failure> {
    let mut inputs: Vec<&Path> = vec![&a.input, &a.model];
    inputs.extend(a.params.as_deref());
    ensure_distinct(&a.out, &inputs).stage("forecast")?;
    check(a.horizon > 0, "config", "horizon must be at least 1".into())?;
    let model = load_model(&a.model).stage("load")?;
    if let Some(m) = a.mode {
        check(m == model.config.mode, "config", format!("model was trained in mode {}, not {}", model.config.mode.label(), m.label()))?;
    }
    let panel = read_clean(&a.input).stage("load")?;
    let anchor = model_anchor(&model, a.params.as_deref(), panel.registry()).stage("forecast")?;
    let hist = latest(&panel, &model.layout, model.config.encoder_len, a.horizon).stage("forecast")?;
    let rows = network_rows(&model, &anchor, &hist, a.horizon).stage("forecast")?;
    write_file(&a.out, forecast_table(&model.layout.targets, a.horizon, &rows)).stage("forecast")?;
    Ok(())
}

/// Parses `a..b` (inclusive) or a comma list of 1-based steps.
pub fn parse_steps(s: &str) -> anyhow::Result<Vec<usize>> {
    let steps: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
        (a..=b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse::<usize>()).collect::<Result<_, _>>()?
    };
    ensure!(!steps.is_empty() && steps.iter().all(|&k| k >= 1), "steps must be positive, got `{s}`");
    Ok(steps)
}

/// Keeps header lines and rows whose `step` column is in `steps`.
fn filter_steps(tsv: &str, steps: &BTreeSet<usize>) -> String {
    let mut col = None;
    let mut out = String::new();
    for line in tsv.lines() {
        if line.starts_with('#') {
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        match col {
            None => {
                col = cells.iter().position(|c| *c == "step");
                out.push_str(line);
                out.push('\n');
            }
            Some(c) => {
                if cells.get(c).and_then(|v| v.parse::<usize>().ok()).map_or(true, |k| steps.contains(&k)) {
                    out.push_str(line);
                    out.push('\n');
                }
            }
        }
    }
    out
}

/// Settings shared by `evaluate` and `reproduce` for writing report files.
pub struct ReportSpec {
    pub steps: Vec<usize>,
    pub groupby: Vec<GroupBy>,
    pub thetas: Vec<f64>,
}

impl Default for ReportSpec {
    fn default() -> Self {
        Self {
            steps: (1..=10).collect(),
            groupby: vec![GroupBy::Size, GroupBy::Age, GroupBy::Sector, GroupBy::GmThreshold],
            thetas: vec![0.3, 0.4, 0.5],
        }
    }
}

/// Writes metric tables under `dir/reports` and charts under `dir/plots`.
pub fn write_reports(dir: &Path, report: &EvalReport, test: &CompanyPanel, spec: &ReportSpec) -> anyhow::Result<()> {
    let rep = dir.join("reports");
    let plots = dir.join("plots");
    let steps: BTreeSet<usize> = spec.steps.iter().copied().collect();
    write_file(&rep.join("per_step.tsv"), filter_steps(&report.per_step_tsv(), &steps))?;
    write_file(&rep.join("per_company.tsv"), report.per_company_tsv())?;
    for (t, id) in report.targets.iter().enumerate() {
        write_file(&rep.join(format!("cdf_{id}.tsv")), report.cdf_tsv(t))?;
    }
    let info = company_info(test);
    let gm = report.model_index("gm");
    let primary = 0;
    for g in &spec.groupby {
        match g {
            GroupBy::Size => write_file(&rep.join("by_size.tsv"), filter_steps(&report.grouped_tsv("size", &group_by_size(&info)), &steps))?,
            GroupBy::Age => write_file(&rep.join("by_age.tsv"), filter_steps(&report.grouped_tsv("age", &group_by_age(&info, &DEFAULT_AGE_EDGES)), &steps))?,
            GroupBy::Sector => write_file(&rep.join("by_sector.tsv"), filter_steps(&report.grouped_tsv("sector", &group_by_sector(&info)), &steps))?,
            GroupBy::GmThreshold => {
                let Some(m) = gm else {
                    log::warn!("gm-threshold grouping needs the gm model; skipped");
                    continue;
                };
                let scores = report.company_scores(m, primary);
                for theta in &spec.thetas {
                    let groups = gm_performance_groups(&scores, *theta);
                    let kind = format!("gm_threshold_{theta}");
                    write_file(&rep.join(format!("by_{kind}.tsv")), filter_steps(&report.grouped_tsv(&kind, &groups), &steps))?;
                }
            }
        }
    }

    let per_step: Vec<Series> = report
        .models
        .iter()
        .enumerate()
        .map(|(m, name)| Series {
            name: name.clone(),
            points: spec
                .steps
                .iter()
                .filter(|&&k| k <= report.horizon)
                .filter_map(|&k| report.step_mae_all_targets(m, k - 1).map(|v| (k as f64, v)))
                .collect(),
        })
        .collect();
    write_file(&plots.join("per_step.svg"), chart("MAE by forecast step", "step", "MAE (mean over targets)", &per_step, Style::Line))?;
    let t0 = &report.targets[primary];
    let cdf: Vec<Series> = report
        .models
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let maes: Vec<f64> = report.company_scores(m, primary).values().map(|v| v.0).collect();
            Series {
                name: name.clone(),
                points: gmcast_core::eval::cumulative_mae_distribution(&maes).points,
            }
        })
        .collect();
    write_file(&plots.join(format!("cdf_{t0}.svg")), chart(&format!("Cumulative distribution of company MAE ({t0})"), "MAE", "fraction of companies", &cdf, Style::Steps))?;
    let size_groups = group_by_size(&info);
    let order = [SizeBucket::Micro, SizeBucket::Small, SizeBucket::Mid, SizeBucket::Large];
    let sizes: Vec<Series> = report
        .models
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let g = report.grouped(m, primary, &size_groups);
            Series {
                name: name.clone(),
                points: order
                    .iter()
                    .enumerate()
                    .filter_map(|(i, b)| {
                        let accs = g.get(b.label())?;
                        let (abs, n) = accs.iter().fold((0.0, 0usize), |(s, n), a| (s + a.abs, n + a.n));
                        (n > 0).then(|| (i as f64, abs / n as f64))
                    })
                    .collect(),
            }
        })
        .collect();
    write_file(
        &plots.join(format!("size_{t0}.svg")),
        chart(&format!("MAE by size bucket ({t0}); 0 micro, 1 small, 2 mid, 3 large"), "size bucket", "MAE", &sizes, Style::Line),
    )?;
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    let steps = parse_steps(&a.horizons).stage("config")?;
    let horizon = *steps.iter().max().expect("non-empty");
    for m in &a.models {
        check(pipeline::ALL_MODELS.contains(&m.as_str()), "config", format!("unknown model `{m}`"))?;
    }
    let test = read_clean(&a.input).stage("load")?;
    let targets = ids(&a.targets);
    let wants = |m: &str| a.models.iter().any(|x| x == m);

    let gibrat = if wants("gibrat") {
        let p = a.train.as_deref().ok_or_else(|| anyhow!("model gibrat needs --train")).stage("config")?;
        let tr = read_clean(p).stage("load")?;
        let drifts = targets.iter().map(|t| fit_gibrat(&tr, t).map(|g| g.drift)).collect::<Result<Vec<_>, _>>().stage("evaluate")?;
        Some(Gibrat { drifts })
    } else {
        None
    };
    let stepper = if wants("gm") || wants("nn+gm") {
        let p = a.params.as_deref().ok_or_else(|| anyhow!("models gm and nn+gm need --params")).stage("config")?;
        Some(read_stepper(p, test.registry(), &targets).stage("evaluate")?)
    } else {
        None
    };
    let mut nets = Vec::new();
    for (label, path) in [("nn", &a.nn), ("nn+gm", &a.nn_gm)] {
        if !wants(label) {
            continue;
        }
        let p = path.as_deref().ok_or_else(|| anyhow!("model {label} needs --{}", if label == "nn" { "nn" } else { "nn-gm" })).stage("config")?;
        let model = load_model(p).stage("load")?;
        check(model.layout.targets == targets, "config", format!("{} forecasts {:?}, not the evaluation targets", p.display(), model.layout.targets))?;
        check(model.config.encoder_len == a.encoder_len, "config", format!("{} uses encoder length {}, evaluation uses {}", p.display(), model.config.encoder_len, a.encoder_len))?;
        let anchor = match model.config.mode {
            ForecastMode::Hybrid => Anchor::Growth(stepper.clone().expect("loaded above")),
            ForecastMode::PureNn => Anchor::Previous,
        };
        nets.push(Network {
            label: label.to_string(),
            model,
            anchor,
        });
    }
    let gm = stepper.map(|s| Gm { stepper: s });
    let mut list: Vec<&dyn Forecaster> = Vec::new();
    for m in &a.models {
        match m.as_str() {
            "persistence" => list.push(&Persistence),
            "gibrat" => list.push(gibrat.as_ref().expect("built above")),
            "gm" => list.push(gm.as_ref().expect("built above")),
            other => list.push(nets.iter().find(|n| n.label == other).expect("loaded above")),
        }
    }
    let layout = match nets.first() {
        Some(n) => n.model.layout.clone(),
        None => FeatureLayout {
            encoder_features: targets.clone(),
            macro_features: Vec::new(),
            targets: targets.clone(),
        },
    };
    let hist = histories(&test, &layout, a.encoder_len, horizon).stage("evaluate")?;
    let report = evaluate_models(&test, &hist, &targets, &list, horizon).stage("evaluate")?;
    let spec = ReportSpec {
        steps,
        groupby: a.groupby.clone(),
        thetas: a.theta.clone(),
    };
    write_reports(&a.report, &report, &test, &spec).stage("evaluate")?;
    print!("{}", filter_steps(&report.per_step_tsv(), &spec.steps.iter().copied().collect()));
    Ok(())
}

fn shapley_companies_tsv(attr: &ModelAttribution) -> String {
    let mut s = String::from("company_id\tfeature\tphi\n");
    for (id, a) in &attr.per_company {
        for (f, phi) in attr.features.iter().zip(&a.phi) {
            let _ = writeln!(s, "{id}\t{f}\t{phi:.8}");
        }
    }
    s
}

fn write_attribution(dir: &Path, attr: &ModelAttribution) -> anyhow::Result<()> {
    let t = &attr.target;
    write_file(&dir.join(format!("shapley_{t}.tsv")), attr.to_tsv())?;
    write_file(&dir.join(format!("shapley_{t}_companies.tsv")), shapley_companies_tsv(attr))?;
    Ok(())
}

fn cmd_explain(a: &ExplainArgs) -> Result<(), Failure> {
    let model = load_model(&a.model).stage("load")?;
    let panel = read_clean(&a.input).stage("load")?;
    let anchor = model_anchor(&model, a.params.as_deref(), panel.registry()).stage("explain")?;
    let hist = latest(&panel, &model.layout, model.config.encoder_len, 1).stage("explain")?;
    let hist: Vec<History> = hist.into_iter().take(a.companies).collect();
    let attr = explain_model(&model, &anchor, &hist, &IndicatorId::from(a.target.as_str()), None, a.permutations, a.seed).stage("explain")?;
    write_attribution(&a.out, &attr).stage("explain")?;
    print!("{}", attr.to_tsv());
    Ok(())
}

fn group_labels(panel: &CompanyPanel, by: ColorBy) -> BTreeMap<String, String> {
    let info = company_info(panel);
    match by {
        ColorBy::Size => group_by_size(&info),
        ColorBy::Age => group_by_age(&info, &DEFAULT_AGE_EDGES),
        ColorBy::Sector => group_by_sector(&info),
    }
}

fn write_embedding(dir: &Path, model: &ModelState, hist: &[History], groups: &BTreeMap<String, String>, k: usize) -> anyhow::Result<()> {
    let hidden = extract_hidden(model, hist)?;
    let vectors: Vec<Vec<f64>> = hidden.iter().map(|(_, v)| v.clone()).collect();
    let emb = pca_project(&vectors, k)?;
    let mut s = String::from("company_id\tgroup");
    for i in 0..k {
        let _ = write!(s, "\tpc{}", i + 1);
    }
    s.push('\n');
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for ((id, _), c) in hidden.iter().zip(&emb.coords) {
        let g = groups.get(id).cloned().unwrap_or_else(|| "unknown".into());
        let _ = write!(s, "{id}\t{g}");
        for v in c {
            let _ = write!(s, "\t{v:.8}");
        }
        s.push('\n');
        series.entry(g).or_default().push((c[0], c.get(1).copied().unwrap_or(0.0)));
    }
    write_file(&dir.join("embedding.tsv"), s)?;
    let mut v = String::from("component\teigenvalue\texplained_variance_ratio\n");
    for (i, r) in emb.explained_variance_ratio.iter().enumerate() {
        let _ = writeln!(v, "pc{}\t{:.8}\t{r:.8}", i + 1, emb.eigenvalues[i]);
    }
    write_file(&dir.join("embedding_variance.tsv"), v)?;
    let series: Vec<Series> = series.into_iter().map(|(name, points)| Series { name, points }).collect();
    write_file(&dir.join("embedding.svg"), chart("Encoder hidden states", "pc1", "pc2", &series, Style::Points))?;
    Ok(())
}

fn cmd_represent(a: &RepresentArgs) -> Result<(), Failure> {
    let model = load_model(&a.model).stage("load")?;
    let panel = read_clean(&a.input).stage("load")?;
    let hist = latest(&panel, &model.layout, model.config.encoder_len, 1).stage("represent")?;
    write_embedding(&a.out, &model, &hist, &group_labels(&panel, a.color_by), a.components).stage("represent")?;
    Ok(())
}

/// Files whose bytes depend only on the configuration.
pub const DETERMINISTIC_DIRS: [&str; 3] = ["reports", "forecasts", "models"];

fn cmd_reproduce(a: &ReproduceArgs) -> Result<(), Failure> {
    let cfg = a.cfg.resolve().stage("config")?;
    reproduce(&cfg, &a.out)
}

/// Runs synth → preprocess → fit-scaling → train → evaluate → explain → represent
/// and writes the run directory.
pub fn reproduce(cfg: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    let started = unix_time();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).stage("setup")?;
    write_file(&out.join("config.kv"), write_kv(&cfg.to_kv())).stage("setup")?;

    let raw = synth::generate(&cfg.synth).stage("synth")?;
    let (clean, prep_report) = run_pipeline(&raw, &PreprocessConfig::default()).stage("preprocess")?;
    write_file(&out.join("reports/preprocess.txt"), prep_report.to_text()).stage("preprocess")?;
    let clean_hash = clean.content_hash();
    let prep = fit_partition(clean, prep_report, &cfg.forecast, &cfg.split_spec()).stage("fit-scaling")?;
    let train_hash = prep.split.train.content_hash();
    let pf = ParamsFile {
        params: prep.params.clone(),
        fit_timestamp: format!("unix:{started}"),
        data_hash: train_hash.clone(),
    };
    write_file(&out.join("params/growth.toml"), pf.to_toml()).stage("fit-scaling")?;
    let mut split_tsv = String::from("company_id\tpartition\n");
    for (id, p) in &prep.split.assignment {
        let _ = writeln!(split_tsv, "{id}\t{p:?}");
    }
    write_file(&out.join("reports/split.tsv"), split_tsv.to_lowercase()).stage("fit-scaling")?;

    std::fs::create_dir_all(out.join("models")).stage("train")?;
    let mut models = BTreeMap::new();
    for (label, mode) in [("nn", ForecastMode::PureNn), ("nn+gm", ForecastMode::Hybrid)] {
        if !cfg.models.iter().any(|m| m == label) {
            continue;
        }
        let (model, tlog) = train_mode(&prep, &cfg.forecast, mode).stage("train")?;
        let file = label.replace('+', "_");
        save_model(&model, out.join(format!("models/{file}.json"))).stage("train")?;
        write_file(&out.join(format!("reports/training_{file}.tsv")), tlog.to_tsv()).stage("train")?;
        models.insert(label.to_string(), model);
    }

    let report = score(&prep, &cfg.forecast, &models, &cfg.models, cfg.horizon).stage("evaluate")?;
    let spec = ReportSpec {
        steps: (1..=cfg.horizon).collect(),
        ..Default::default()
    };
    write_reports(out, &report, &prep.split.test, &spec).stage("evaluate")?;

    let layout = &prep.layout;
    let latest_test = latest(&prep.split.test, layout, cfg.forecast.encoder_len, cfg.horizon).stage("forecast")?;
    for m in &cfg.models {
        let rows: Vec<(&History, Vec<Vec<f64>>, Option<String>)> = match m.as_str() {
            "persistence" | "gibrat" | "gm" => {
                let f: Box<dyn Forecaster> = match m.as_str() {
                    "persistence" => Box::new(Persistence),
                    "gibrat" => Box::new(Gibrat {
                        drifts: prep.gibrat_drifts.clone(),
                    }),
                    _ => Box::new(Gm { stepper: prep.stepper.clone() }),
                };
                latest_test
                    .iter()
                    .map(|h| (h, f.forecast(h, cfg.horizon).unwrap_or_default(), None))
                    .collect()
            }
            other => {
                let model = &models[other];
                network_rows(model, &anchor_for(model.config.mode, &prep.stepper), &latest_test, cfg.horizon).stage("forecast")?
            }
        };
        let file = m.replace('+', "_");
        write_file(&out.join(format!("forecasts/{file}.tsv")), forecast_table(&layout.targets, cfg.horizon, &rows)).stage("forecast")?;
    }

    let explained = ["nn+gm", "nn"].into_iter().find(|l| models.contains_key(*l));
    if let Some(label) = explained {
        let model = &models[label];
        let anchor = anchor_for(model.config.mode, &prep.stepper);
        let hist = test_histories(&prep, &cfg.forecast, 1).stage("explain")?;
        let mut chosen: BTreeMap<String, History> = BTreeMap::new();
        for h in hist {
            chosen.insert(h.company_id.clone(), h);
        }
        let sample: Vec<History> = chosen.values().take(cfg.explain_companies).cloned().collect();
        let target = IndicatorId::from(cfg.explain_target.as_str());
        let attr = explain_model(model, &anchor, &sample, &target, None, cfg.permutations, cfg.seed).stage("explain")?;
        write_attribution(&out.join("reports"), &attr).stage("explain")?;
        let groups = group_labels(&prep.split.test, ColorBy::Size);
        let all: Vec<History> = chosen.into_values().collect();
        write_embedding(&out.join("reports"), model, &all, &groups, 2).stage("represent")?;
        std::fs::rename(out.join("reports/embedding.svg"), out.join("plots/embedding.svg")).stage("represent")?;
    }

    let mut manifest = vec![
        ("gmcast_version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("model_format_version".into(), FORMAT_VERSION.to_string()),
        ("started_unix".into(), started.to_string()),
        ("seed.master".into(), cfg.seed.to_string()),
        ("seed.synth".into(), cfg.synth.seed.to_string()),
        ("seed.split".into(), cfg.seed.to_string()),
        ("seed.init_and_batching".into(), cfg.forecast.seed.to_string()),
        ("seed.shapley".into(), cfg.seed.to_string()),
        ("deterministic".into(), cfg.forecast.deterministic.to_string()),
        ("hash.raw_panel".into(), raw.content_hash()),
        ("hash.clean_panel".into(), clean_hash),
        ("hash.train_partition".into(), train_hash),
    ];
    for sub in DETERMINISTIC_DIRS.iter().chain(["params", "plots"].iter()) {
        let dir = out.join(sub);
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        let mut names: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        names.sort();
        for p in names {
            let bytes = std::fs::read(&p).stage("manifest")?;
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            manifest.push((format!("sha256.{sub}/{name}"), file_hash(&bytes)));
        }
    }
    write_file(&out.join("manifest"), write_kv(&manifest)).stage("manifest")?;
    log::info!("run directory {}", out.display());
    Ok(())
}

/// Digest of every file under the deterministic subdirectories of `run`.
pub fn run_digest(run: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for sub in DETERMINISTIC_DIRS {
        let dir = run.join(sub);
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for e in entries {
            let p = e?.path();
            let name = format!("{sub}/{}", p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
            out.insert(name, file_hash(&std::fs::read(&p)?));
        }
    }
    Ok(out)
}

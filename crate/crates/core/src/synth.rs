//! Synthetic panels with planted scaling laws and growth-model drift.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::growth::{GrowthError, GrowthModel, PowerLaw};
use crate::kv::{KvError, parse_bool};
use crate::panel::{CompanyPanel, CompanyRecord, CompanySeries, PanelMeta, Registry};
use crate::rng::substream;

pub const SECTORS: [&str; 8] = ["manufacturing", "finance", "retail", "services", "technology", "energy", "healthcare", "utilities"];

/// Reference asset level for the size-volatility law.
pub const A_REF: f64 = 1e6;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    Config(String),
    #[error("company {company}: growth model failed in {year}: {source}")]
    Growth {
        company: String,
        year: i32,
        source: GrowthError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Iid,
    Ar1,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fluctuation {
    pub kind: NoiseKind,
    pub sigma0: f64,
    pub rho: f64,
    pub gamma: f64,
}

/// Indicator law `c·A^β·exp(η)` with `η ~ N(0, σ²)` drawn each year.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndicatorLaw {
    pub law: PowerLaw,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_companies: usize,
    pub first_year: i32,
    pub last_year: i32,
    /// Founding years are uniform on this inclusive range.
    pub founding: (i32, i32),
    pub income: PowerLaw,
    pub liability: PowerLaw,
    /// Log-noise on the NI and LT draws.
    pub income_sigma: f64,
    pub liability_sigma: f64,
    pub indicators: BTreeMap<String, IndicatorLaw>,
    pub initial_assets: (f64, f64),
    pub fluctuation: Fluctuation,
    pub substeps: usize,
    pub macros: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let ind = |c: f64, beta: f64, sigma: f64| IndicatorLaw {
            law: PowerLaw::new(c, beta),
            sigma,
        };
        let indicators = BTreeMap::from([
            ("REVT".to_string(), ind(1.2, 0.9, 0.3)),
            ("COGS".to_string(), ind(0.9, 0.92, 0.2)),
            ("EMP".to_string(), ind(2e-3, 0.8, 0.25)),
        ]);
        Self {
            n_companies: 300,
            first_year: 1988,
            last_year: 2019,
            founding: (1988, 2017),
            income: PowerLaw::new(0.337, 0.85),
            liability: PowerLaw::new(0.5, 1.0),
            income_sigma: 0.1,
            liability_sigma: 0.1,
            indicators,
            initial_assets: (1e4, 1e10),
            fluctuation: Fluctuation {
                kind: NoiseKind::Ar1,
                sigma0: 0.1,
                rho: 0.6,
                gamma: 0.2,
            },
            substeps: 1,
            macros: true,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let f = &self.fluctuation;
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if !(f.sigma0 >= 0.0) {
            return bad("sigma0 must be nonnegative");
        }
        if !(f.rho.abs() < 1.0) {
            return bad("|rho| must be below 1");
        }
        if !(f.gamma >= 0.0) {
            return bad("gamma must be nonnegative");
        }
        if self.last_year < self.first_year {
            return bad("year span is empty");
        }
        if self.founding.0 < self.first_year || self.founding.1 > self.last_year || self.founding.0 > self.founding.1 {
            return bad("founding range must lie inside the year span");
        }
        let (lo, hi) = self.initial_assets;
        if !(lo > 0.0 && hi >= lo) {
            return bad("initial asset bounds must be positive and ordered");
        }
        if self.n_companies == 0 {
            return bad("n_companies must be positive");
        }
        if self.substeps == 0 {
            return bad("substeps must be positive");
        }
        Ok(())
    }

    pub fn growth_model(&self) -> GrowthModel {
        GrowthModel::new(self.income, self.liability)
    }

    pub fn registry(&self) -> Registry {
        let mut codes = vec!["AT", "LT", "NI"];
        codes.extend(self.indicators.keys().map(String::as_str));
        if self.macros {
            codes.extend(["GDP_GROWTH", "INFLATION"]);
        }
        Registry::standard().restrict(codes)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), KvError> {
        let num = |v: &str| v.parse::<f64>().map_err(|_| KvError::value(key, v));
        let int = |v: &str| v.parse::<i64>().map_err(|_| KvError::value(key, v));
        match key {
            "n_companies" => self.n_companies = int(value)? as usize,
            "first_year" => self.first_year = int(value)? as i32,
            "last_year" => self.last_year = int(value)? as i32,
            "founding_first" => self.founding.0 = int(value)? as i32,
            "founding_last" => self.founding.1 = int(value)? as i32,
            "beta_i" => self.income.beta = num(value)?,
            "c_i" => self.income.c = num(value)?,
            "beta_l" => self.liability.beta = num(value)?,
            "c_l" => self.liability.c = num(value)?,
            "income_sigma" => self.income_sigma = num(value)?,
            "liability_sigma" => self.liability_sigma = num(value)?,
            "assets_min" => self.initial_assets.0 = num(value)?,
            "assets_max" => self.initial_assets.1 = num(value)?,
            "noise" => {
                self.fluctuation.kind = match value {
                    "iid" => NoiseKind::Iid,
                    "ar1" => NoiseKind::Ar1,
                    _ => return Err(KvError::value(key, value)),
                }
            }
            "sigma0" => self.fluctuation.sigma0 = num(value)?,
            "rho" => self.fluctuation.rho = num(value)?,
            "gamma" => self.fluctuation.gamma = num(value)?,
            "substeps" => self.substeps = int(value)? as usize,
            "macros" => self.macros = parse_bool(key, value)?,
            "seed" => self.seed = value.parse().map_err(|_| KvError::value(key, value))?,
            _ => {
                // per-indicator keys: <CODE>.c, <CODE>.beta, <CODE>.sigma
                let (code, field) = key.split_once('.').ok_or_else(|| KvError::UnknownKey(key.to_string()))?;
                let law = self.indicators.entry(code.to_string()).or_insert(IndicatorLaw {
                    law: PowerLaw::new(1.0, 1.0),
                    sigma: 0.0,
                });
                match field {
                    "c" => law.law.c = num(value)?,
                    "beta" => law.law.beta = num(value)?,
                    "sigma" => law.sigma = num(value)?,
                    _ => return Err(KvError::UnknownKey(key.to_string())),
                }
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let f = &self.fluctuation;
        let mut v: Vec<(String, String)> = vec![
            ("n_companies".into(), self.n_companies.to_string()),
            ("first_year".into(), self.first_year.to_string()),
            ("last_year".into(), self.last_year.to_string()),
            ("founding_first".into(), self.founding.0.to_string()),
            ("founding_last".into(), self.founding.1.to_string()),
            ("c_i".into(), self.income.c.to_string()),
            ("beta_i".into(), self.income.beta.to_string()),
            ("c_l".into(), self.liability.c.to_string()),
            ("beta_l".into(), self.liability.beta.to_string()),
            ("income_sigma".into(), self.income_sigma.to_string()),
            ("liability_sigma".into(), self.liability_sigma.to_string()),
            ("assets_min".into(), self.initial_assets.0.to_string()),
            ("assets_max".into(), self.initial_assets.1.to_string()),
            ("noise".into(), if f.kind == NoiseKind::Iid { "iid" } else { "ar1" }.into()),
            ("sigma0".into(), f.sigma0.to_string()),
            ("rho".into(), f.rho.to_string()),
            ("gamma".into(), f.gamma.to_string()),
            ("substeps".into(), self.substeps.to_string()),
            ("macros".into(), self.macros.to_string()),
            ("seed".into(), self.seed.to_string()),
        ];
        for (code, l) in &self.indicators {
            v.push((format!("{code}.c"), l.law.c.to_string()));
            v.push((format!("{code}.beta"), l.law.beta.to_string()));
            v.push((format!("{code}.sigma"), l.sigma.to_string()));
        }
        v
    }
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite standard deviation")
}

/// Per-year macro series shared by every company.
fn macro_years(cfg: &SynthConfig) -> BTreeMap<i32, (f64, f64)> {
    let mut rng = substream(cfg.seed, "synth.macro", 0);
    let mut gdp: f64 = 2.5;
    let mut infl: f64 = 2.5;
    (cfg.first_year..=cfg.last_year)
        .map(|y| {
            gdp = 2.5 + 0.5 * (gdp - 2.5) + normal(1.5).sample(&mut rng);
            infl = 2.5 + 0.7 * (infl - 2.5) + normal(0.8).sample(&mut rng);
            (y, (gdp, infl))
        })
        .collect()
}

fn company(cfg: &SynthConfig, index: usize, model: &GrowthModel, macros: &BTreeMap<i32, (f64, f64)>) -> Result<CompanySeries, SynthError> {
    let id = format!("S{index:05}");
    let mut rng = substream(cfg.seed, "synth.company", index as u64);
    let founding = rng.gen_range(cfg.founding.0..=cfg.founding.1);
    let (lo, hi) = cfg.initial_assets;
    let mut a = (rng.gen_range(lo.ln()..=hi.ln())).exp();
    let sector = SECTORS[rng.gen_range(0..SECTORS.len())].to_string();
    let f = cfg.fluctuation;
    let mut eps = 0.0;
    let mut records = Vec::new();
    let h = 1.0 / cfg.substeps as f64;
    for year in founding..=cfg.last_year {
        if year > founding {
            let mut drifted = a;
            for _ in 0..cfg.substeps {
                let rate = model.asset_growth_rate(drifted).map_err(|source| SynthError::Growth {
                    company: id.clone(),
                    year,
                    source,
                })?;
                drifted += h * rate;
            }
            if !(drifted > 0.0) {
                return Err(SynthError::Growth {
                    company: id.clone(),
                    year,
                    source: GrowthError::Domain(drifted),
                });
            }
            let sd = f.sigma0 * (a / A_REF).powf(-f.gamma);
            let u = if sd > 0.0 { normal(sd).sample(&mut rng) } else { 0.0 };
            eps = match f.kind {
                NoiseKind::Iid => u,
                NoiseKind::Ar1 => f.rho * eps + u,
            };
            a = drifted * eps.exp();
        } else {
            // check that the first year is not already singular
            model.asset_growth_rate(a).map_err(|source| SynthError::Growth {
                company: id.clone(),
                year,
                source,
            })?;
        }
        let draw = |law: PowerLaw, sigma: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let eta = if sigma > 0.0 { normal(sigma).sample(rng) } else { 0.0 };
            law.eval(a) * eta.exp()
        };
        let mut values = vec![Some(a)];
        values.push(Some(draw(cfg.liability, cfg.liability_sigma, &mut rng)));
        values.push(Some(draw(cfg.income, cfg.income_sigma, &mut rng)));
        for l in cfg.indicators.values() {
            values.push(Some(draw(l.law, l.sigma, &mut rng)));
        }
        if cfg.macros {
            let (g, i) = macros[&year];
            values.push(Some(g));
            values.push(Some(i));
        }
        records.push((year, values));
    }
    Ok(CompanySeries {
        id,
        records: records.into_iter().map(|(y, v)| CompanyRecord::new(y, Some(sector.clone()), v)).collect(),
    })
}

/// Builds a raw-scale panel. Column order follows [`SynthConfig::registry`].
pub fn generate(cfg: &SynthConfig) -> Result<CompanyPanel, SynthError> {
    cfg.validate()?;
    let registry = cfg.registry();
    // the registry keeps standard order; map generated columns onto it
    let mut gen_codes = vec!["AT".to_string(), "LT".to_string(), "NI".to_string()];
    gen_codes.extend(cfg.indicators.keys().cloned());
    if cfg.macros {
        gen_codes.extend(["GDP_GROWTH".to_string(), "INFLATION".to_string()]);
    }
    let perm: Vec<usize> = registry
        .specs()
        .iter()
        .map(|s| gen_codes.iter().position(|c| c == s.id.as_str()))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| SynthError::Config("indicator codes must be registered".into()))?;
    if perm.len() != gen_codes.len() {
        return Err(SynthError::Config("indicator codes must be registered".into()));
    }
    let model = cfg.growth_model();
    let macros = macro_years(cfg);
    let companies: Vec<CompanySeries> = (0..cfg.n_companies)
        .into_par_iter()
        .map(|i| company(cfg, i, &model, &macros))
        .collect::<Result<_, _>>()?;
    let companies = companies
        .into_iter()
        .map(|mut c| {
            for r in &mut c.records {
                r.values = perm.iter().map(|&p| r.values[p]).collect();
            }
            c
        })
        .collect();
    Ok(CompanyPanel::from_series_unchecked(registry, companies, PanelMeta::default()))
}

pub fn noiseless(seed: u64) -> SynthConfig {
    let mut cfg = SynthConfig {
        seed,
        income_sigma: 0.0,
        liability_sigma: 0.0,
        ..Default::default()
    };
    cfg.fluctuation = Fluctuation {
        kind: NoiseKind::Iid,
        sigma0: 0.0,
        rho: 0.0,
        gamma: 0.0,
    };
    for l in cfg.indicators.values_mut() {
        l.sigma = 0.0;
    }
    cfg
}

/// Near-constant log drift: β_I close to one, `c_I` set so the log drift
/// at `A_REF` matches the default panel's.
pub fn gibrat_like(seed: u64) -> SynthConfig {
    let base = SynthConfig::default();
    let d = base.growth_model().denominator(A_REF);
    let drift = base.income.eval(A_REF) / d / A_REF;
    let beta = 0.95;
    SynthConfig {
        seed,
        income: PowerLaw::new(drift * d * A_REF.powf(1.0 - beta), beta),
        fluctuation: Fluctuation {
            kind: NoiseKind::Iid,
            sigma0: 0.1,
            rho: 0.0,
            gamma: 0.0,
        },
        ..base
    }
}

pub fn structured(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        ..Default::default()
    }
}

/// The three canonical panels, by name.
pub fn benchmark_suite(seed: u64) -> Result<BTreeMap<String, CompanyPanel>, SynthError> {
    Ok(BTreeMap::from([
        ("NOISELESS".to_string(), generate(&noiseless(seed))?),
        ("GIBRATLIKE".to_string(), generate(&gibrat_like(seed))?),
        ("STRUCTURED".to_string(), generate(&structured(seed))?),
    ]))
}

//! Mechanistic growth model.
//!
//! Asset growth follows
//!
//! ```text
//! dA/dt = c_I·A^β_I / D(A),   D(A) = 1 − c_L·β_L·A^(β_L−1)
//! ```
//!
//! and any indicator on a scaling law `X = c_X·A^β_X` follows
//!
//! ```text
//! dX/dt = c_X·c_I·β_X·A^(β_X+β_I−1) / D(A).
//! ```
//!
//! Integration happens on the raw monetary scale with explicit Euler steps.
//! [`GmStepper`] wraps one step for values living in transformed space.

use std::collections::BTreeMap;

use crate::panel::{IndicatorId, Registry, Transform, ASSETS};
use crate::scaling::GrowthParams;

pub const DEFAULT_EPS_DEN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrowthError {
    #[error("singular growth equation at A = {assets}: denominator {denominator}")]
    Singular { assets: f64, denominator: f64 },
    #[error("assets must be positive, got {0}")]
    Domain(f64),
    #[error("no scaling fit for indicator {0}")]
    MissingFit(IndicatorId),
    #[error("indicator {indicator} left its domain: raw value {value}")]
    IndicatorDomain { indicator: IndicatorId, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// `c·A^β` on the raw scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLaw {
    pub c: f64,
    pub beta: f64,
}

impl PowerLaw {
    pub fn new(c: f64, beta: f64) -> Self {
        Self { c, beta }
    }

    /// The asset line itself: `c = 1`, `β = 1`.
    pub fn identity() -> Self {
        Self { c: 1.0, beta: 1.0 }
    }

    pub fn eval(&self, a: f64) -> f64 {
        self.c * a.powf(self.beta)
    }
}

/// Raw-scale coefficients of the growth equations.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthModel {
    pub income: PowerLaw,
    pub liability: PowerLaw,
    pub indicators: BTreeMap<IndicatorId, PowerLaw>,
    pub eps_den: f64,
}

impl GrowthModel {
    pub fn new(income: PowerLaw, liability: PowerLaw) -> Self {
        Self {
            income,
            liability,
            indicators: BTreeMap::new(),
            eps_den: DEFAULT_EPS_DEN,
        }
    }

    pub fn with_indicator(mut self, id: impl Into<IndicatorId>, law: PowerLaw) -> Self {
        self.indicators.insert(id.into(), law);
        self
    }

    /// `c = exp(ln_c)` for every fit. The NI fit is used as a log fit even
    /// when it was estimated on linear-log values.
    pub fn from_params(params: &GrowthParams) -> Self {
        let law = |f: &crate::scaling::ScalingFit| PowerLaw::new(f.ln_c.exp(), f.beta);
        let mut m = Self::new(law(&params.income), law(&params.liability));
        for (id, f) in &params.per_indicator {
            m.indicators.insert(id.clone(), law(f));
        }
        m
    }

    pub fn denominator(&self, a: f64) -> f64 {
        1.0 - self.liability.c * self.liability.beta * a.powf(self.liability.beta - 1.0)
    }

    fn checked_denominator(&self, a: f64) -> Result<f64, GrowthError> {
        if !(a > 0.0) || !a.is_finite() {
            return Err(GrowthError::Domain(a));
        }
        let d = self.denominator(a);
        if !(d.abs() >= self.eps_den) {
            return Err(GrowthError::Singular { assets: a, denominator: d });
        }
        Ok(d)
    }

    pub fn asset_growth_rate(&self, a: f64) -> Result<f64, GrowthError> {
        let d = self.checked_denominator(a)?;
        Ok(self.income.eval(a) / d)
    }

    /// Rate for a law given explicitly (AT itself is `PowerLaw::identity()`).
    pub fn law_growth_rate(&self, a: f64, law: PowerLaw) -> Result<f64, GrowthError> {
        let d = self.checked_denominator(a)?;
        Ok(law.c * self.income.c * law.beta * a.powf(law.beta + self.income.beta - 1.0) / d)
    }

    pub fn indicator_growth_rate(&self, a: f64, indicator: &IndicatorId) -> Result<f64, GrowthError> {
        let law = *self.indicators.get(indicator).ok_or_else(|| GrowthError::MissingFit(indicator.clone()))?;
        self.law_growth_rate(a, law)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmState {
    /// Raw scale.
    pub assets: f64,
    pub indicators: BTreeMap<IndicatorId, f64>,
    pub year_index: i64,
    pub dt: f64,
}

impl GmState {
    pub fn new(assets: f64) -> Self {
        Self {
            assets,
            indicators: BTreeMap::new(),
            year_index: 0,
            dt: 1.0,
        }
    }

    pub fn with_indicator(mut self, id: impl Into<IndicatorId>, value: f64) -> Self {
        self.indicators.insert(id.into(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmTrajectory {
    /// Initial state followed by one state per completed step.
    pub states: Vec<GmState>,
    /// Denominator `D(A)` evaluated at the start of every (sub)step.
    pub denominators: Vec<f64>,
    /// Step (1-based) at which integration stopped, with the cause.
    pub failure: Option<(usize, GrowthError)>,
}

impl GmTrajectory {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    pub fn assets(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.assets).collect()
    }
}

/// Euler integration with one step per `dt`.
pub fn euler_forecast(initial: &GmState, horizon: usize, model: &GrowthModel) -> GmTrajectory {
    euler_forecast_substepped(initial, horizon, model, 1)
}

/// Euler integration splitting each `dt` into `substeps` equal substeps.
/// Indicator increments use the asset value at the start of each substep.
pub fn euler_forecast_substepped(initial: &GmState, horizon: usize, model: &GrowthModel, substeps: usize) -> GmTrajectory {
    let substeps = substeps.max(1);
    let h = initial.dt / substeps as f64;
    let mut states = vec![initial.clone()];
    let mut denominators = Vec::with_capacity(horizon * substeps);
    let mut state = initial.clone();
    for step in 1..=horizon {
        for _ in 0..substeps {
            match advance(&state, h, model) {
                Ok((next, d)) => {
                    denominators.push(d);
                    state = next;
                }
                Err(e) => {
                    return GmTrajectory {
                        states,
                        denominators,
                        failure: Some((step, e)),
                    }
                }
            }
        }
        state.year_index = initial.year_index + step as i64;
        states.push(state.clone());
    }
    GmTrajectory {
        states,
        denominators,
        failure: None,
    }
}

fn advance(state: &GmState, h: f64, model: &GrowthModel) -> Result<(GmState, f64), GrowthError> {
    let a = state.assets;
    let d = model.checked_denominator(a)?;
    let rate = model.income.eval(a) / d;
    let mut next = state.clone();
    next.assets = a + h * rate;
    for (id, x) in next.indicators.iter_mut() {
        *x += h * model.indicator_growth_rate(a, id)?;
    }
    if !(next.assets > 0.0) {
        return Err(GrowthError::Domain(next.assets));
    }
    Ok((next, d))
}

/// One Euler step for a target vector held in transformed space.
///
/// Values are inverse transformed, advanced with the asset value at the
/// start of the step, and transformed back. The target list must contain AT.
#[derive(Debug, Clone)]
pub struct GmStepper {
    model: GrowthModel,
    targets: Vec<IndicatorId>,
    transforms: Vec<Transform>,
    laws: Vec<PowerLaw>,
    asset_pos: usize,
}

impl GmStepper {
    pub fn new(model: GrowthModel, registry: &Registry, targets: &[IndicatorId]) -> Result<Self, GrowthError> {
        let asset_pos = targets
            .iter()
            .position(|t| t.as_str() == ASSETS)
            .ok_or_else(|| GrowthError::Config("targets must include AT".into()))?;
        let mut transforms = Vec::with_capacity(targets.len());
        let mut laws = Vec::with_capacity(targets.len());
        for t in targets {
            let spec = registry.get(t).ok_or_else(|| GrowthError::Config(format!("{t} is not registered")))?;
            transforms.push(spec.transform);
            laws.push(if t.as_str() == ASSETS {
                PowerLaw::identity()
            } else {
                *model.indicators.get(t).ok_or_else(|| GrowthError::MissingFit(t.clone()))?
            });
        }
        if transforms[asset_pos] != Transform::Log {
            return Err(GrowthError::Config("AT must be log transformed".into()));
        }
        Ok(Self {
            model,
            targets: targets.to_vec(),
            transforms,
            laws,
            asset_pos,
        })
    }

    pub fn targets(&self) -> &[IndicatorId] {
        &self.targets
    }

    pub fn model(&self) -> &GrowthModel {
        &self.model
    }

    pub fn step(&self, values: &[f64]) -> Result<Vec<f64>, GrowthError> {
        debug_assert_eq!(values.len(), self.targets.len());
        let a = values[self.asset_pos].exp();
        if !(a > 0.0) || !a.is_finite() {
            return Err(GrowthError::Domain(a));
        }
        let mut out = Vec::with_capacity(values.len());
        for (k, &z) in values.iter().enumerate() {
            let law = self.laws[k];
            let raw = self.transforms[k].invert(z);
            let next = raw + self.model.law_growth_rate(a, law)?;
            let t = self.transforms[k].apply(next).ok_or_else(|| GrowthError::IndicatorDomain {
                indicator: self.targets[k].clone(),
                value: next,
            })?;
            out.push(t);
        }
        Ok(out)
    }

    /// Iterates [`GmStepper::step`] from `start`; stops at the first failure.
    pub fn rollout(&self, start: &[f64], horizon: usize) -> (Vec<Vec<f64>>, Option<(usize, GrowthError)>) {
        let mut out = Vec::with_capacity(horizon);
        let mut cur = start.to_vec();
        for k in 1..=horizon {
            match self.step(&cur) {
                Ok(next) => {
                    out.push(next.clone());
                    cur = next;
                }
                Err(e) => return (out, Some((k, e))),
            }
        }
        (out, None)
    }
}

/// Map-based form of [`GmStepper::step`].
pub fn gm_step_from_prediction(
    predicted: &BTreeMap<IndicatorId, f64>,
    model: &GrowthModel,
    registry: &Registry,
) -> Result<BTreeMap<IndicatorId, f64>, GrowthError> {
    let targets: Vec<IndicatorId> = predicted.keys().cloned().collect();
    let stepper = GmStepper::new(model.clone(), registry, &targets)?;
    let values: Vec<f64> = predicted.values().copied().collect();
    let next = stepper.step(&values)?;
    Ok(targets.into_iter().zip(next).collect())
}

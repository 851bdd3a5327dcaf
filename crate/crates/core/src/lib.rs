//! Company growth forecasting with allometric growth laws and a recurrent
//! residual network.

pub mod baselines;
pub mod eval;
pub mod explain;
pub mod forecaster;
pub mod growth;
pub mod kv;
pub mod panel;
pub mod preprocess;
pub mod rng;
pub mod scaling;
pub mod synth;

pub use baselines::{fit_gibrat, gibrat_forecast, persistence_forecast, GibratFit};
pub use forecaster::{ForecastConfig, ForecastError, ForecastMode, ModelState, TrainingSample};
pub use growth::{GmStepper, GrowthError, GrowthModel, PowerLaw};
pub use panel::{CompanyPanel, CompanyRecord, CompanySeries, IndicatorId, Registry};
pub use preprocess::{PreprocessConfig, PreprocessError};
pub use scaling::{GrowthParams, ScalingFit};

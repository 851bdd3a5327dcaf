//! Minibatch training with early stopping on validation loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::AdamW;
use super::model::{loss, loss_and_gradients, ModelState, Scaler};
use super::{Anchor, FeatureLayout, ForecastConfig, ForecastError, TrainingSample};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_loss\n");
        for e in &self.epochs {
            s.push_str(&format!("{}\t{:.8}\t{:.8}\n", e.epoch, e.train_loss, e.val_loss));
        }
        s
    }
}

/// Replaces some teacher-forced anchors with ones built from the model's own
/// prediction of the preceding year.
fn scheduled_sample(model: &ModelState, anchor: &Anchor, s: &TrainingSample, p: f64, rng: &mut ChaCha8Rng) -> Result<TrainingSample, ForecastError> {
    let mut out = s.clone();
    let mut state = model.encode(&s.encoder_inputs)?;
    let mut prev_pred: Option<Vec<f64>> = None;
    for k in 0..s.decoder_gm.len() {
        if let Some(pp) = &prev_pred {
            if rng.gen::<f64>() < p {
                if let Ok(a) = anchor.next(pp) {
                    out.decoder_gm[k] = a;
                }
            }
        }
        let (next, o) = model.decoder_step(&out.decoder_gm[k], &s.decoder_macro[k], &state)?;
        state = next;
        prev_pred = Some(o.iter().zip(&out.decoder_gm[k]).map(|(a, b)| a + b).collect());
    }
    Ok(out)
}

/// Fits a model; returns the parameters with the lowest validation loss.
/// With no validation windows the training loss is used instead.
pub fn train(
    train_windows: &[TrainingSample],
    val_windows: &[TrainingSample],
    anchor: &Anchor,
    layout: &FeatureLayout,
    cfg: &ForecastConfig,
) -> Result<(ModelState, TrainingLog), ForecastError> {
    cfg.validate()?;
    if train_windows.is_empty() {
        return Err(ForecastError::NoWindows);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scaler = Scaler::fit(train_windows, layout);
    let mut model = ModelState::new(cfg.clone(), layout.clone(), scaler, &mut rng);
    let mut opt = AdamW::new(&model.params, cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut log = TrainingLog {
        best_val_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut best = model.params.clone();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let sampled: Option<Vec<TrainingSample>> = if cfg.scheduled_sampling > 0.0 {
            Some(
                order
                    .iter()
                    .map(|&i| scheduled_sample(&model, anchor, &train_windows[i], cfg.scheduled_sampling, &mut rng))
                    .collect::<Result<_, _>>()?,
            )
        } else {
            None
        };
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainingSample> = match &sampled {
                Some(s) => s[b * cfg.batch_size..b * cfg.batch_size + idx.len()].iter().collect(),
                None => idx.iter().map(|&i| &train_windows[i]).collect(),
            };
            let (l, g) = loss_and_gradients(&model, &batch)?;
            if !l.is_finite() {
                return Err(ForecastError::Divergence { epoch, loss: l });
            }
            opt.step(&mut model.params, &g);
            epoch_loss += l * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = epoch_loss / seen as f64;
        let val_loss = if val_windows.is_empty() { loss(&model, train_windows)? } else { loss(&model, val_windows)? };
        if !val_loss.is_finite() {
            return Err(ForecastError::Divergence { epoch, loss: val_loss });
        }
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        log.epochs.push(EpochLog { epoch, train_loss, val_loss });
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best = model.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    model.params = best;
    Ok((model, log))
}

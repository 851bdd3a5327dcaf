use gmcast_core::forecaster::model::loss;
use gmcast_core::forecaster::{
    hybrid_rollout, loss_and_gradients, make_windows, pure_nn_rollout, rollout, train, Anchor, FeatureLayout, ForecastConfig, ForecastMode, History,
    ModelState, Scaler, TrainingSample,
};
use gmcast_core::growth::{GmStepper, GrowthModel, PowerLaw};
use gmcast_core::panel::{CompanyPanel, CompanyRecord, PanelMeta, Registry};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn layout(targets: &[&str]) -> FeatureLayout {
    FeatureLayout {
        encoder_features: targets.iter().map(|&t| t.into()).collect(),
        macro_features: Vec::new(),
        targets: targets.iter().map(|&t| t.into()).collect(),
    }
}

fn model(targets: &[&str], hidden_dim: usize, seed: u64) -> ModelState {
    let l = layout(targets);
    let cfg = ForecastConfig {
        hidden_dim,
        targets: l.targets.clone(),
        ..Default::default()
    };
    let scaler = Scaler::identity(l.encoder_dim(), l.decoder_dim());
    ModelState::new(cfg, l, scaler, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn zeroed(mut m: ModelState) -> ModelState {
    m.params = m.params.zeros_like();
    m
}

fn sample(encoder: Vec<Vec<f64>>, gm: Vec<Vec<f64>>, labels: Vec<Vec<f64>>) -> TrainingSample {
    let t = gm.len();
    TrainingSample {
        company_id: "C".into(),
        origin_year: 2000,
        last_targets: encoder.last().cloned().unwrap_or_default(),
        encoder_inputs: encoder,
        decoder_gm: gm,
        decoder_macro: vec![Vec::new(); t],
        labels,
    }
}

fn history(inputs: Vec<Vec<f64>>) -> History {
    History {
        company_id: "C".into(),
        origin_year: 2000,
        last_targets: inputs.last().cloned().unwrap(),
        encoder_inputs: inputs,
        future_macro: Vec::new(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn hand_set_forward_pass() {
    // one encoder step, one decoder step, two hidden units
    let mut m = zeroed(model(&["AT"], 2, 0));
    let h = 2;
    let (i, f, g, o) = (0, h, 2 * h, 3 * h);
    let enc = &mut m.params.encoder;
    enc.w[(g, 0)] = 1.0;
    enc.w[(g + 1, 0)] = -1.0;
    enc.b[o] = 0.4;
    enc.b[o + 1] = 0.4;
    let dec = &mut m.params.decoder;
    dec.w[(g, 0)] = 0.25;
    dec.w[(g + 1, 0)] = 0.25;
    dec.w[(i, 1)] = 0.5;
    dec.b[f] = 1.0;
    dec.b[f + 1] = 1.0;
    m.params.readout_w[(0, 0)] = 1.0;
    m.params.readout_w[(0, 1)] = 2.0;
    m.params.readout_b[0] = 0.1;

    let x = 1.0;
    let anchor = 2.0;
    let c_enc = [0.5 * (1.0f64).tanh(), 0.5 * (-1.0f64).tanh()];
    let h_enc = [sigmoid(0.4) * c_enc[0].tanh(), sigmoid(0.4) * c_enc[1].tanh()];
    let i_dec = [sigmoid(0.5 * h_enc[0]), 0.5];
    let c_dec = [
        sigmoid(1.0) * c_enc[0] + i_dec[0] * (0.5f64).tanh(),
        sigmoid(1.0) * c_enc[1] + i_dec[1] * (0.5f64).tanh(),
    ];
    let h_dec = [0.5 * c_dec[0].tanh(), 0.5 * c_dec[1].tanh()];
    let expected = h_dec[0] + 2.0 * h_dec[1] + 0.1;

    let s = sample(vec![vec![x]], vec![vec![anchor]], vec![vec![anchor]]);
    let out = m.forward(&s).unwrap();
    assert_eq!(out.len(), 1);
    assert!((out[0][0] - expected).abs() < 1e-14, "{} vs {expected}", out[0][0]);
}

#[test]
fn single_sample_loss_is_squared_residual_error() {
    let mut m = zeroed(model(&["AT"], 3, 0));
    m.params.readout_b[0] = 0.3;
    let s = sample(vec![vec![1.0]], vec![vec![2.0]], vec![vec![2.5]]);
    let (l, _) = loss_and_gradients(&m, &[&s]).unwrap();
    assert!((l - (0.3f64 - 0.5).powi(2)).abs() < 1e-15);
    assert!((loss(&m, &[s]).unwrap() - l).abs() < 1e-15);
}

#[test]
fn zero_model_on_growth_labels_has_zero_loss_and_gradient() {
    let m = zeroed(model(&["AT", "LT"], 4, 0));
    let gm = vec![vec![10.1, 9.2], vec![10.2, 9.3], vec![10.3, 9.4]];
    let s = sample(vec![vec![10.0, 9.0]; 3], gm.clone(), gm);
    let (l, g) = loss_and_gradients(&m, &[&s, &s]).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
}

#[test]
fn permuting_a_batch_permutes_outputs() {
    let m = model(&["AT", "LT"], 5, 3);
    let batch: Vec<TrainingSample> = (0..6)
        .map(|k| {
            let a = 8.0 + k as f64;
            sample(vec![vec![a, a - 1.0]; 3], vec![vec![a + 0.1, a - 0.9]; 3], vec![vec![a + 0.2, a - 0.8]; 3])
        })
        .collect();
    let outputs: Vec<_> = batch.iter().map(|s| m.forward(s).unwrap()).collect();
    let perm = [4, 1, 5, 0, 3, 2];
    for (pos, &k) in perm.iter().enumerate() {
        assert_eq!(m.forward(&batch[perm[pos]]).unwrap(), outputs[k]);
    }
    let fwd: Vec<&TrainingSample> = batch.iter().collect();
    let rev: Vec<&TrainingSample> = perm.iter().map(|&k| &batch[k]).collect();
    let (a, _) = loss_and_gradients(&m, &fwd).unwrap();
    let (b, _) = loss_and_gradients(&m, &rev).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn one_step_rollout_matches_teacher_forced_step() {
    let m = model(&["AT", "LT"], 6, 7);
    let hist = history(vec![vec![10.0, 9.0], vec![10.1, 9.05], vec![10.3, 9.2]]);
    let gm = GrowthModel::new(PowerLaw::new(0.05, 0.9), PowerLaw::new(0.5, 1.0)).with_indicator("LT", PowerLaw::new(0.5, 1.0));
    let stepper = GmStepper::new(gm, &Registry::standard(), &m.layout.targets).unwrap();
    for anchor in [Anchor::Previous, Anchor::Growth(stepper)] {
        let first = anchor.next(&hist.last_targets).unwrap();
        let s = sample(hist.encoder_inputs.clone(), vec![first.clone()], vec![first]);
        let teacher = m.forward(&s).unwrap();
        let r = rollout(&m, &anchor, &hist, 1).unwrap();
        assert_eq!(r.residuals[0], teacher[0]);
    }
}

#[test]
fn zero_pure_network_is_persistence() {
    let m = zeroed(model(&["AT", "LT"], 4, 0));
    let hist = history(vec![vec![10.0, 9.0], vec![10.4, 9.7]]);
    let r = pure_nn_rollout(&m, &hist, 10).unwrap();
    assert_eq!(r.predictions.len(), 10);
    assert!(r.predictions.iter().all(|p| p == &hist.last_targets));
}

#[test]
fn pure_network_accumulates_increments() {
    // zero weights leave only the candidate bias, so the decoder memory
    // grows as 0.5 g, 0.75 g and the readout can be solved for 0.1, 0.2
    let mut m = zeroed(model(&["AT"], 1, 0));
    m.params.decoder.b[2] = 1.0;
    let g = (1.0f64).tanh();
    let h1 = 0.5 * (0.5 * g).tanh();
    let h2 = 0.5 * (0.75 * g).tanh();
    let w = 0.1 / (h2 - h1);
    m.params.readout_w[(0, 0)] = w;
    m.params.readout_b[0] = 0.1 - w * h1;
    let r = pure_nn_rollout(&m, &history(vec![vec![1.0]]), 2).unwrap();
    assert!((r.residuals[0][0] - 0.1).abs() < 1e-12);
    assert!((r.residuals[1][0] - 0.2).abs() < 1e-12);
    assert!((r.predictions[0][0] - 1.1).abs() < 1e-12);
    assert!((r.predictions[1][0] - 1.3).abs() < 1e-12);
}

fn ar_panel(n: usize, years: i32, seed: u64) -> CompanyPanel {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reg = Registry::standard().restrict(["AT"]);
    let mut recs = Vec::new();
    for c in 0..n {
        let mut x: f64 = rng.gen_range(-1.0..1.0);
        let level = 10.0 + rng.gen_range(-2.0..2.0);
        for y in 0..years {
            recs.push((format!("C{c:03}"), CompanyRecord::new(2000 + y, None, vec![Some(level + x)])));
            x = 0.7 * x + 0.1 * rng.gen_range(-1.0..1.0);
        }
    }
    CompanyPanel::from_records(reg, recs, PanelMeta { transformed: true, ..Default::default() }).unwrap()
}

fn small_cfg(mode: ForecastMode) -> ForecastConfig {
    ForecastConfig {
        hidden_dim: 8,
        targets: vec!["AT".into()],
        mode,
        learning_rate: 1e-2,
        max_epochs: 40,
        ..Default::default()
    }
}

fn zero_growth_stepper() -> GmStepper {
    let gm = GrowthModel::new(PowerLaw::new(0.0, 1.0), PowerLaw::new(0.5, 1.0));
    GmStepper::new(gm, &Registry::standard(), &["AT".into()]).unwrap()
}

#[test]
fn zero_growth_anchor_makes_hybrid_and_pure_agree() {
    let m = model(&["AT"], 6, 11);
    let stepper = zero_growth_stepper();
    let hist = history(vec![vec![10.0], vec![10.2], vec![10.5]]);
    let a = hybrid_rollout(&m, &stepper, &hist, 10).unwrap();
    let b = pure_nn_rollout(&m, &hist, 10).unwrap();
    for (x, y) in a.predictions.iter().zip(&b.predictions) {
        assert!((x[0] - y[0]).abs() < 1e-12);
    }

    let panel = ar_panel(40, 12, 5);
    let l = layout(&["AT"]);
    let hybrid = Anchor::Growth(stepper);
    let mut preds = Vec::new();
    for (anchor, mode) in [(&hybrid, ForecastMode::Hybrid), (&Anchor::Previous, ForecastMode::PureNn)] {
        let cfg = ForecastConfig { max_epochs: 5, ..small_cfg(mode) };
        let w = make_windows(&panel, anchor, &l, &cfg).unwrap();
        let (trained, _) = train(&w, &w, anchor, &l, &cfg).unwrap();
        preds.push(rollout(&trained, anchor, &hist, 10).unwrap().predictions);
    }
    for (x, y) in preds[0].iter().zip(&preds[1]) {
        assert!((x[0] - y[0]).abs() < 1e-8, "{x:?} vs {y:?}");
    }
}

#[test]
fn growth_labels_train_to_near_zero_loss() {
    let mut windows: Vec<TrainingSample> = Vec::new();
    for k in 0..64 {
        let a = 8.0 + 0.05 * k as f64;
        let gm: Vec<Vec<f64>> = (1..=3).map(|s| vec![a + 0.1 * s as f64]).collect();
        windows.push(sample(vec![vec![a - 0.2], vec![a - 0.1], vec![a]], gm.clone(), gm));
    }
    let l = layout(&["AT"]);
    let cfg = ForecastConfig {
        max_epochs: 200,
        patience: 200,
        ..small_cfg(ForecastMode::Hybrid)
    };
    let (trained, log) = train(&windows, &windows, &Anchor::Previous, &l, &cfg).unwrap();
    let zero = zeroed(trained.clone());
    assert_eq!(loss(&zero, &windows).unwrap(), 0.0);
    assert!(log.best_val_loss < 1e-5, "{}", log.best_val_loss);
}

#[test]
fn seeded_training_is_bitwise_reproducible() {
    let panel = ar_panel(30, 10, 2);
    let l = layout(&["AT"]);
    let cfg = ForecastConfig {
        max_epochs: 4,
        ..small_cfg(ForecastMode::PureNn)
    };
    let w = make_windows(&panel, &Anchor::Previous, &l, &cfg).unwrap();
    let (a, la) = train(&w, &w, &Anchor::Previous, &l, &cfg).unwrap();
    let (b, lb) = train(&w, &w, &Anchor::Previous, &l, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(la, lb);
}

#[test]
fn autoregressive_panel_beats_residual_variance() {
    let l = layout(&["AT"]);
    let cfg = small_cfg(ForecastMode::PureNn);
    let tr = make_windows(&ar_panel(120, 14, 8), &Anchor::Previous, &l, &cfg).unwrap();
    let va = make_windows(&ar_panel(40, 14, 9), &Anchor::Previous, &l, &cfg).unwrap();
    let (trained, _) = train(&tr, &va, &Anchor::Previous, &l, &cfg).unwrap();
    let r: Vec<f64> = va.iter().flat_map(|s| s.residual_labels().into_iter().flatten()).collect();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r.len() as f64;
    let mse = loss(&trained, &va).unwrap();
    assert!(mse < var, "val mse {mse} vs residual variance {var}");
}

#[test]
fn ten_step_error_grows_with_horizon() {
    let l = layout(&["AT"]);
    let cfg = small_cfg(ForecastMode::PureNn);
    let tr = make_windows(&ar_panel(120, 14, 8), &Anchor::Previous, &l, &cfg).unwrap();
    let (trained, _) = train(&tr, &tr, &Anchor::Previous, &l, &cfg).unwrap();
    let test = ar_panel(200, 14, 21);
    let mut err = [0.0; 10];
    let mut n = 0;
    for c in test.companies() {
        let v: Vec<f64> = c.records.iter().map(|r| r.value(0).unwrap()).collect();
        let hist = history(v[..3].iter().map(|&x| vec![x]).collect());
        let p = pure_nn_rollout(&trained, &hist, 10).unwrap();
        for k in 0..10 {
            err[k] += (p.predictions[k][0] - v[3 + k]).abs();
        }
        n += 1;
    }
    let mae: Vec<f64> = err.iter().map(|e| e / n as f64).collect();
    let rising = mae.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(mae[9] > mae[0], "{mae:?}");
    assert!(rising >= 6, "{mae:?}");
}

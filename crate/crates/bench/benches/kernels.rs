use criterion::{black_box, criterion_group, criterion_main, Criterion};
use gmcast_core::explain::shapley_exact;
use gmcast_core::forecaster::{loss_and_gradients, FeatureLayout, ForecastConfig, ModelState, Scaler, TrainingSample};
use gmcast_core::growth::{euler_forecast, GmState, GrowthModel, PowerLaw};
use gmcast_core::scaling::fit_power_law;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn power_law(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs: Vec<(f64, f64)> = (0..100_000)
        .map(|_| {
            let a: f64 = rng.gen_range(5.0..25.0);
            (a, 0.8 * a - 1.0 + rng.gen_range(-0.3..0.3))
        })
        .collect();
    c.bench_function("fit_power_law/100k", |b| b.iter(|| fit_power_law("REVT", black_box(&pairs)).unwrap()));
}

fn euler(c: &mut Criterion) {
    let model = GrowthModel::new(PowerLaw::new(0.337, 0.85), PowerLaw::new(0.5, 1.0)).with_indicator("REVT", PowerLaw::new(1.2, 0.9));
    let start = GmState::new(1e6).with_indicator("REVT", 1.2e6f64.powf(0.9));
    c.bench_function("euler_forecast/10", |b| b.iter(|| euler_forecast(black_box(&start), 10, &model)));
}

fn gradients(c: &mut Criterion) {
    let layout = FeatureLayout {
        encoder_features: ["AT", "LT", "REVT", "NI"].into_iter().map(Into::into).collect(),
        macro_features: Vec::new(),
        targets: ["AT", "LT", "REVT", "NI"].into_iter().map(Into::into).collect(),
    };
    let cfg = ForecastConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scaler = Scaler::identity(layout.encoder_dim(), layout.decoder_dim());
    let model = ModelState::new(cfg.clone(), layout, scaler, &mut rng);
    let vec4 = |rng: &mut ChaCha8Rng| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let batch: Vec<TrainingSample> = (0..cfg.batch_size)
        .map(|k| TrainingSample {
            company_id: format!("C{k}"),
            origin_year: 2000,
            encoder_inputs: (0..cfg.encoder_len).map(|_| vec4(&mut rng)).collect(),
            decoder_gm: (0..cfg.decoder_len).map(|_| vec4(&mut rng)).collect(),
            decoder_macro: vec![Vec::new(); cfg.decoder_len],
            labels: (0..cfg.decoder_len).map(|_| vec4(&mut rng)).collect(),
            last_targets: vec4(&mut rng),
        })
        .collect();
    let refs: Vec<&TrainingSample> = batch.iter().collect();
    c.bench_function("loss_and_gradients/batch32_h32", |b| b.iter(|| loss_and_gradients(&model, black_box(&refs)).unwrap()));
}

fn shapley(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>().tanh();
    let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let base = vec![0.0; 12];
    c.bench_function("shapley_exact/12", |b| b.iter(|| shapley_exact(f, black_box(&x), &base).unwrap()));
}

criterion_group!(benches, power_law, euler, gradients, shapley);
criterion_main!(benches);

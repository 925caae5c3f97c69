//! Trains the learned-shift model and a no-augmentation baseline on the
//! synthetic regression task and prints test MSE and the learned shift scale.
//!
//! Usage: `cargo run --release --example synthetic_regression -- [seeds] [epochs] [lr_net]
//! [spread] [lr_aug] [fixed|no] [width] [s_gamma] [batch]`; defaults are the
//! acceptance configuration.

use optima_core::augmentation::AugmentationFamily;
use optima_core::data::gen_synthetic_regression;
use optima_core::distributions::NoiseSource;
use optima_core::elbo::{AugmentationMode, McConfig};
use optima_core::model::{predict, NetworkSpec, Prediction};
use optima_core::trainer::{train_full_vi, TrainConfig};

fn main() -> optima_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let lr_net: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let spread: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let lr_aug: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let width: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(32);
    let s_gamma: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(4);
    let batch_size: usize = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(50);
    let mut spec = NetworkSpec::regression_default(1);
    spec.hidden = vec![width; spec.hidden.len()];
    let family = AugmentationFamily::additive_shift(1, 0.1, 0.2, (0.2, spread));
    let with_fixed = args.get(6).is_some_and(|s| s == "fixed");
    let mut modes = vec![AugmentationMode::Off, AugmentationMode::Learned];
    if with_fixed {
        modes.insert(1, AugmentationMode::Fixed);
    }
    let mut wins = 0;
    let mut all = vec![Vec::new(); modes.len()];
    for seed in 0..seeds {
        let (train, test) = gen_synthetic_regression(50, 1000, seed)?;
        let mut line = format!("seed {seed}:");
        let mut mses = Vec::new();
        for &mode in &modes {
            let config = TrainConfig {
                epochs,
                batch_size,
                mc: McConfig {
                    s_gamma,
                    ..McConfig::default()
                },
                lr_net,
                lr_aug,
                seed,
                log_every: 1000,
                mode,
                ..TrainConfig::default()
            };
            let t0 = std::time::Instant::now();
            let out = train_full_vi(&train, &spec, &family, &config)?;
            let Prediction::Values { mean, .. } = predict(
                &out.model,
                &test.inputs,
                100,
                None,
                NoiseSource::new(seed).named("eval"),
            )?
            else {
                unreachable!()
            };
            let mse = mean
                .iter()
                .zip(&test.targets)
                .map(|(m, y)| (m - y).powi(2))
                .sum::<f64>()
                / test.len() as f64;
            let Prediction::Values { mean: tm, .. } = predict(
                &out.model,
                &train.inputs,
                100,
                None,
                NoiseSource::new(seed).named("eval"),
            )?
            else {
                unreachable!()
            };
            let tr = tm
                .iter()
                .zip(&train.targets)
                .map(|(m, y)| (m - y).powi(2))
                .sum::<f64>()
                / train.len() as f64;
            let sigma = family.with_phi(out.q_phi.mean.clone()).summary()[0].2;
            mses.push(mse);
            line.push_str(&format!(
                " {mode:?} train {tr:.4} test {mse:.4} sigma {sigma:.3} ({:.1}s);",
                t0.elapsed().as_secs_f64()
            ));
        }
        if mses.last() < mses.first() {
            wins += 1;
        }
        for (a, m) in all.iter_mut().zip(&mses) {
            a.push(*m);
        }
        println!("{line}");
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let medians: Vec<f64> = all.iter_mut().map(median).collect();
    println!("learned beats off on {wins}/{seeds} seeds; medians {medians:?}");
    Ok(())
}

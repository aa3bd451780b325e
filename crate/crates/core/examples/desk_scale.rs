//! Trains a one-level model on a small convection-diffusion set and compares
//! it with the persistence forecast.
//!
//! `cargo run --release -p umtn --example desk_scale -- [epochs] [levels]`

use std::time::Instant;

use umtn::datagen::{generate_dataset, ConvDiffConfig};
use umtn::dataset::{Split, SplitCounts};
use umtn::evaluation::{evaluate_model, persistence_baseline};
use umtn::interpolation::loocv_select_kernel;
use umtn::kernels::RadialKernel;
use umtn::model::{ModelConfig, UmtnModel};
use umtn::training::{normalize, train_loop, TrainConfig};

fn main() -> umtn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let levels = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);

    let config = ConvDiffConfig {
        grid_size: 12,
        n_sites: 64,
        n_sequences: 100,
        split: SplitCounts::new(70, 15, 15),
        seed: 1,
        ..ConvDiffConfig::default()
    };
    let start = Instant::now();
    let data = normalize(&generate_dataset(&config)?)?;
    println!("generated {} sequences in {:.1?}", data.n_sequences(), start.elapsed());

    let candidates: Vec<RadialKernel> = [0.25, 0.5, 1.0, 2.0]
        .iter()
        .map(|&e| RadialKernel::multiquadric(e))
        .collect::<umtn::Result<_>>()?;
    let loocv = loocv_select_kernel(&candidates, &data, 0)?;
    println!("kernel {} (scores {:?})", loocv.best, loocv.scores.iter().map(|s| s.mean_abs_error).collect::<Vec<_>>());

    let mut model = UmtnModel::new(ModelConfig::with_levels(levels), loocv.best, data.sites(), 0)?;
    let batch_size = args.get(3).and_then(|s| s.parse().ok());
    let train = TrainConfig {
        max_epochs: epochs,
        batch_size,
        patience: args.get(4).and_then(|s| s.parse().ok()).unwrap_or(50),
        scheduled_sampling_k: args.get(5).and_then(|s| s.parse().ok()).unwrap_or(50.0),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let history = train_loop(&mut model, &data, &train)?;
    println!(
        "trained {} epochs in {:.1?}; best epoch {} (val mae {:.4})",
        history.epochs.len(),
        start.elapsed(),
        history.best_epoch,
        history.best_val_mae
    );
    for r in history.epochs.iter().step_by(5) {
        println!("  epoch {:3}: loss {:.4}, val mae {:.4}, p {:.3}", r.epoch, r.train_loss, r.val_mae, r.teacher_prob);
    }
    let umtn = evaluate_model(&model, &data, Split::Test, train.tau, train.horizon)?;
    let persistence = persistence_baseline(&data, Split::Test, train.tau, train.horizon)?;
    println!("test mae: model {:.4}, persistence {:.4}", umtn.mae_mean, persistence.mae_mean);
    Ok(())
}

//! Trains the supervised baseline and the adapted model on the synthetic
//! shift benchmark and prints target-test metrics for each.
//!
//! Usage: `cargo run --release --example synthetic_shift -- [seed ...]`

use std::time::Instant;

use dacount::datasets::synthetic::{generate_synthetic, SyntheticSpec};
use dacount::trainer::{evaluate, train_with, TrainConfig, TrainOptions};

fn main() -> dacount::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0, 1, 2] } else { seeds };
    let epochs = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(30);
    let spec = SyntheticSpec::default();
    for seed in seeds {
        let bench = generate_synthetic(&spec, seed)?;
        for adapt in [false, true] {
            let cfg = TrainConfig {
                image_size: spec.image_size,
                depth: 2,
                base_width: 8,
                domain_head_width: 16,
                epochs,
                sigma: 2.0,
                seed,
                adaptation_enabled: adapt,
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let mut on_epoch = |r: &dacount::trainer::EpochRecord| {
                eprintln!(
                    "  epoch {:3} density {:.4} domain {:.4} val {:.4} lambda {:.3}",
                    r.epoch, r.density_loss, r.domain_loss, r.val_loss, r.mean_lambda
                )
            };
            let state = train_with::<f32>(
                &bench.source,
                Some(&bench.target),
                &cfg,
                TrainOptions {
                    on_epoch: Some(&mut on_epoch),
                    ..TrainOptions::default()
                },
            )?;
            let last = evaluate(&state.model, &bench.target_test, None)?;
            let best = evaluate(&state.best_model, &bench.target_test, None)?;
            let src = evaluate(&state.model, &bench.source, None)?;
            println!(
                "seed {seed} adapt {adapt}: target mae {:.3} r2 {:.3} (best-val mae {:.3}) source mae {:.3} [{:.0}s]",
                last.mae,
                last.r2,
                best.mae,
                src.mae,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}

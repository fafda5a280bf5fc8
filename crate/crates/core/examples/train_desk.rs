//! Desk-scale training: phase I on two synthetic pairs, then the remaining
//! phases for a few epochs each, with checkpoints written to disk.
//!
//! Usage: `train_desk [OUT_DIR] [PHASE_I_STEPS]`

use std::path::PathBuf;

use monoview::datapipe::{synthetic_pair, TrainingData};
use monoview::optim::AdamConfig;
use monoview::trainer::{PhaseRun, Schedule, TrainConfig, Trainer};
use monoview::{build_model, WarpDirection};

fn main() -> monoview::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("monoview-desk"));
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);

    let pairs = vec![
        synthetic_pair(64, 64, 2.0, 1),
        synthetic_pair(64, 64, 2.0, 2),
    ];
    let data = TrainingData::from_samples(pairs.clone(), pairs.clone());
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        batch_size: 2,
        patch: (64, 64),
        max_steps: Some(steps),
        augment_fraction: 0.0,
        ..Default::default()
    };
    let mut trainer = Trainer::new(build_model(cfg.seed, None)?, cfg)?;
    let before = trainer.evaluate(PhaseRun::I, &pairs)?;

    // phase I gets the step budget, the later phases a couple of epochs
    let first = trainer.run_schedule(&"1".parse()?, &data, Some(&out.join("dbp")))?;
    trainer.cfg.max_steps = None;
    trainer.cfg.max_epochs = Some(3);
    trainer.run_schedule(&Schedule::full(), &data, Some(&out))?;

    let d = trainer
        .graph
        .predict_disparity(&pairs[0].left, WarpDirection::LeftToRight)?;
    let mean = d.data().iter().sum::<f32>() / d.data().len() as f32;
    println!("phase I loss {before:.4} -> {:.4}", first.meta.best_metric);
    println!("mean left-to-right disparity {mean:.3} (true value 2)");
    for rec in trainer.log().iter().filter(|r| r.phase != "I") {
        println!(
            "{:>4} epoch {:>2}  train {:.4}  val {:.4}",
            rec.phase, rec.epoch, rec.train_loss, rec.val_metric
        );
    }
    println!("checkpoints in {}", out.display());
    Ok(())
}

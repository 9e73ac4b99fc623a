//! Trains the tiny smoke configuration end to end, then reloads the final
//! checkpoint and scores it again.
//!
//! Usage: train_smoke [out_dir]

use std::sync::Arc;

use lgc_sed::train::{prepare_data, Checkpoint, MetricsLog, RunConfig, Trainer};

fn main() -> lgc_sed::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LGC_LOG", "info")).init();
    let mut cfg = RunConfig::smoke(0);
    cfg.epochs_phase1 = 4;
    cfg.epochs_phase2 = 4;
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    cfg.out_dir = out.clone();
    let data = Arc::new(prepare_data(&cfg, None)?);
    let mut trainer = Trainer::new(cfg, data.clone())?;
    println!("{} parameters, {} steps per epoch", trainer.network().num_params(), trainer.steps_per_epoch());
    let mut log = MetricsLog::in_memory();
    let summary = trainer.run(&mut log)?;
    for e in log.epochs() {
        println!(
            "epoch {:>2} {:?}: loss {:.4} frame F1 {:.4} event F1 {:.4} anchors {:.4}",
            e.epoch, e.phase, e.mean_total_loss, e.frame_f1, e.event_f1, e.mean_anchor_fraction
        );
    }
    print!("{}", summary.final_scores);

    let bytes = trainer.checkpoint().to_bytes()?;
    let restored = Trainer::resume(Checkpoint::from_bytes(&bytes)?, data)?;
    println!("checkpoint is {} bytes; reloaded teacher scores identically: {}", bytes.len(), restored.evaluate()? == summary.final_scores);
    if let Some(dir) = out {
        println!("checkpoints in {}", dir.display());
    }
    Ok(())
}

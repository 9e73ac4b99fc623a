//! Trains the supervised baseline, mean teacher and the full method on the
//! desk-scale synthetic corpus and prints validation scores.
//!
//! Usage: desk_experiment [seed] [epochs_phase1] [epochs_phase2]

use std::sync::Arc;
use std::time::Instant;

use lgc_sed::train::{prepare_data, single_label_scatter, MetricsLog, RunConfig, Trainer, Variant};

fn main() -> lgc_sed::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LGC_LOG", "info")).init();
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let seed = args.first().copied().unwrap_or(0);
    let base = {
        let mut c = RunConfig::desk(seed);
        if let Some(&e) = args.get(1) {
            c.epochs_phase1 = e as usize;
        }
        if let Some(&e) = args.get(2) {
            c.epochs_phase2 = e as usize;
        }
        c
    };
    let t0 = Instant::now();
    let data = Arc::new(prepare_data(&base, None)?);
    println!("data ready in {:.1}s", t0.elapsed().as_secs_f64());

    for variant in [Variant::Supervised, Variant::MeanTeacher, Variant::Lgc] {
        let t = Instant::now();
        let mut trainer = Trainer::new(base.clone().with_variant(variant), data.clone())?;
        let mut log = MetricsLog::in_memory();
        let summary = trainer.run(&mut log)?;
        let scatter = single_label_scatter(&trainer.export_embeddings()?)?;
        let fractions: Vec<f64> = log.epochs().map(|e| e.mean_anchor_fraction).collect();
        println!(
            "{variant:?}: frame F1 {:.4} event F1 {:.4} scatter {:.4} ({:.0}s, last anchor fraction {:.4})",
            summary.final_scores.frame_f1,
            summary.final_scores.event_f1,
            scatter,
            t.elapsed().as_secs_f64(),
            fractions.last().copied().unwrap_or(0.0),
        );
    }
    Ok(())
}

//! Generates a small synthetic corpus, prints its ground truth and writes
//! WAV files, the JSONL manifest and DESED-style TSVs.
//!
//! Usage: synth_corpus [out_dir]

use lgc_sed::dataset::{generate_corpus, CorpusParams, LabelStatus};

fn main() -> lgc_sed::Result<()> {
    let params = CorpusParams { n_strong: 3, n_weak: 3, n_unlabeled: 3, n_validation: 2, seed: 1, ..CorpusParams::default() };
    let corpus = generate_corpus(&params)?;
    let counts = corpus.manifest.counts();
    println!("{counts:?}");
    for clip in &corpus.clips {
        let label = match clip.status {
            LabelStatus::Strong => "strong",
            LabelStatus::Weak => "weak",
            LabelStatus::Unlabeled => "unlabeled",
        };
        println!("{} ({:?}, {label})", clip.clip_id, clip.split);
        for e in &clip.truth {
            println!(
                "    class {} {:?} {:.2}-{:.2} s, {:.0} Hz, {:.1} dB SNR",
                e.class_id, e.kind, e.onset_s, e.offset_s, e.base_freq_hz, e.snr_db
            );
        }
    }
    if let Some(dir) = std::env::args().nth(1) {
        corpus.write_to_dir(&dir)?;
        corpus.write_desed_tsv(&dir)?;
        println!("wrote {dir}");
    }
    Ok(())
}

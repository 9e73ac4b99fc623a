//! Log-mel features of a WAV file, or of a generated two-tone signal when no
//! path is given.
//!
//! Usage: frontend [file.wav]

use lgc_sed::frontend::{FrontendConfig, Waveform};

fn main() -> lgc_sed::Result<()> {
    let wave = match std::env::args().nth(1) {
        Some(path) => Waveform::read_wav(path)?,
        None => {
            let sr = 16_000u32;
            // 500 Hz for the first second, 3 kHz for the second
            let samples = (0..2 * sr as usize)
                .map(|i| {
                    let t = i as f64 / sr as f64;
                    let f = if t < 1.0 { 500.0 } else { 3000.0 };
                    0.3 * (2.0 * std::f64::consts::PI * f * t).sin()
                })
                .collect();
            Waveform::new(samples, sr)?
        }
    };
    let cfg = FrontendConfig { n_mels: 64, ..FrontendConfig::default() };
    let mel = cfg.extract(&wave)?;
    println!("{:.2} s at {} Hz -> {} frames x {} mel bands", wave.duration_s(), wave.sample_rate_hz(), mel.rows(), mel.cols());
    let step = (mel.rows() / 8).max(1);
    for r in (0..mel.rows()).step_by(step) {
        let (band, level) = mel
            .row(r)
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (b, &v)| if v > best.1 { (b, v) } else { best });
        println!("frame {r:>4}: loudest band {band:>2} ({level:.2})");
    }
    Ok(())
}

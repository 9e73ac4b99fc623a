//! Decoding frame probabilities into events and scoring them at the frame
//! and event level.

use lgc_sed::eval::{decode, event_f1, frame_f1, Collars, DecodingConfig, Event, EventList};
use lgc_sed::Matrix;

fn main() -> lgc_sed::Result<()> {
    let span = 0.128;
    let t_out = 40;
    // class 0 active on frames 5..20, class 1 on frames 25..35 with a dropout at 30
    let mut p = Matrix::filled(t_out, 2, 0.1);
    for k in 5..20 {
        p.set(k, 0, 0.8);
    }
    for k in (25..35).filter(|&k| k != 30) {
        p.set(k, 1, 0.7);
    }
    let truth = EventList::new(vec![
        Event { class: 0, onset_s: 0.6, offset_s: 2.5 },
        Event { class: 1, onset_s: 3.2, offset_s: 4.5 },
    ])?;
    let mut targets = Matrix::zeros(t_out, 2);
    for e in truth.events() {
        for k in 0..t_out {
            let mid = (k as f64 + 0.5) * span;
            if mid >= e.onset_s && mid < e.offset_s {
                targets.set(k, e.class, 1.0);
            }
        }
    }

    let cfg = DecodingConfig::default();
    let events = decode(&p, span, &cfg);
    for e in events.events() {
        println!("class {} {:.3}-{:.3} s", e.class, e.onset_s, e.offset_s);
    }
    let (ef1, counts) = event_f1(&events, &truth, &Collars::default());
    println!("frame macro F1 {:.4}", frame_f1(&p, &targets, cfg.threshold)?);
    println!("event macro F1 {ef1:.4} ({counts:?})");
    Ok(())
}

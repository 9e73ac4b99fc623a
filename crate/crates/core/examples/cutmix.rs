//! CutMix of two spectrograms along time, and the matching mix of their
//! frame predictions through the pooled mask.

use lgc_sed::cutmix::{cutmix_pred, cutmix_spec, TimeMask};
use lgc_sed::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lgc_sed::Result<()> {
    let (t, t_out) = (16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mask = TimeMask::sample(t, t_out, &mut rng)?;
    let show = |m: &[bool]| m.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>();
    println!("raw mask    {}", show(mask.raw()));
    println!("pooled mask {}", show(mask.pooled()));

    // clip A is all ones, clip B all twos, so the mix shows its source
    let a = Matrix::filled(t, 2, 1.0);
    let b = Matrix::filled(t, 2, 2.0);
    let mixed = cutmix_spec(&a, &b, &mask)?;
    println!("mixed input {}", (0..t).map(|r| format!("{}", mixed.get(r, 0))).collect::<String>());

    let pa = Matrix::filled(t_out, 1, 0.9);
    let pb = Matrix::filled(t_out, 1, 0.1);
    let mixed_p = cutmix_pred(&pa, &pb, &mask)?;
    println!("mixed preds {:?}", mixed_p.as_slice());
    Ok(())
}

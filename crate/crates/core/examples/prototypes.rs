//! Offline prototype initialization by k-means, a few online momentum
//! updates, and frame-to-class similarities.

use lgc_sed::kmeans::KMeansConfig;
use lgc_sed::prototypes::{normalize, FeatureBuffer, PrototypePool};
use lgc_sed::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Unit vectors scattered around one of a few directions per class.
fn frame(class: usize, mode: usize, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim)
        .map(|d| if d == 2 * class + mode { 1.0 } else { 0.0 } + rng.random_range(-0.15..0.15))
        .collect();
    normalize(&v)
}

fn main() -> lgc_sed::Result<()> {
    let (classes, dim) = (2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // teacher outputs: one confident class per frame
    let mut buffer = FeatureBuffer::new(classes, 1000);
    for _ in 0..200 {
        let class = rng.random_range(0..classes);
        let mut p = vec![0.05; classes];
        p[class] = 0.97;
        let v = frame(class, rng.random_range(0..2), dim, &mut rng);
        buffer.collect(&Matrix::from_rows(&[p])?, &Matrix::from_rows(&[v])?, 0.9, &mut rng)?;
    }
    let mut pool = PrototypePool::new(classes, 2, dim, 0.99)?;
    let init = pool.init_offline(&buffer, &KMeansConfig::default(), &mut rng)?;
    println!("initialization: {init:?}");
    for c in 0..classes {
        for j in 0..2 {
            let p: Vec<String> = pool.prototype(c, j).iter().map(|v| format!("{v:+.2}")).collect();
            println!("class {c} prototype {j}: [{}]", p.join(" "));
        }
    }

    for _ in 0..50 {
        let mut step = FeatureBuffer::new(classes, 64);
        for c in 0..classes {
            for _ in 0..8 {
                step.push(c, &frame(c, rng.random_range(0..2), dim, &mut rng), &mut rng);
            }
        }
        pool.step(&step)?;
    }
    let query = frame(1, 0, dim, &mut rng);
    let (s, nearest) = pool.similarity_argmax(&query)?;
    println!("after 50 online steps, a class-1 frame scores {s:.3?} (nearest prototypes {nearest:?})");
    Ok(())
}

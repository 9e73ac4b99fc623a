//! Compares the analytic parameter gradient of `L_Sup + r L_MT` through the
//! small network with central differences.

use lgc_sed::losses::{l_mt, l_sup, Target};
use lgc_sed::nn::Network;
use lgc_sed::train::RunConfig;
use lgc_sed::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> lgc_sed::Result<()> {
    let cfg = RunConfig::smoke(0).network;
    let net = Network::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = net.init_params(&mut rng);
    let teacher = net.init_params(&mut rng);
    let x = Matrix::from_vec(16, cfg.mel_bands, (0..16 * cfg.mel_bands).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let target = Target::Weak(vec![1.0, 0.0, 1.0]);
    let pt = net.forward(&teacher, &x)?.p;
    let r = 0.5;

    let loss = |p: &[f64]| -> lgc_sed::Result<f64> {
        let ps = vec![net.forward(p, &x)?.p];
        Ok(l_sup(&ps, &[&target])?.value + r * l_mt(&ps, std::slice::from_ref(&pt))?.value)
    };

    let cache = net.forward_train(&params, &x)?;
    let ps = vec![cache.outputs().p.clone()];
    let sup = l_sup(&ps, &[&target])?;
    let mt = l_mt(&ps, std::slice::from_ref(&pt))?;
    let mut d = sup.grad[0].clone();
    for (a, b) in d.as_mut_slice().iter_mut().zip(mt.grad[0].as_slice()) {
        *a += r * b;
    }
    let mut grad = vec![0.0; net.num_params()];
    net.backward(&params, &cache, Some(&d), None, &mut grad)?;

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut p = params.clone();
    for i in 0..p.len() {
        p[i] = params[i] + h;
        let up = loss(&p)?;
        p[i] = params[i] - h;
        let down = loss(&p)?;
        p[i] = params[i];
        let num = (up - down) / (2.0 * h);
        worst = worst.max((num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-6));
    }
    println!("{} parameters, max relative error {worst:.2e}", params.len());
    Ok(())
}

use dseg_core::autodiff::{BnMode, Graph, Optimizer, Tensor};
use dseg_core::unet::{UNet, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut net = UNet::build(UNetConfig::default(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 2 * 2 * 32 * 32 * 32;
    let input = Tensor::new(vec![2, 2, 32, 32, 32], (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
    let voxels = 2 * 32 * 32 * 32;
    let targets: Vec<u8> = (0..voxels).map(|_| rng.gen_range(0..5)).collect();
    let mask = vec![true; voxels];
    let mut opt = Optimizer::adam(1e-3, net.param_tensors());

    // warmup
    for _ in 0..2 {
        let mut g = Graph::new();
        g.set_check_finite(false);
        let vars = net.bind(&mut g, true);
        let iv = g.leaf(input.clone(), false);
        let logits = net.forward(&mut g, &vars, iv, BnMode::Train).unwrap();
        let loss = g.weighted_cross_entropy(logits, &targets, &[1.0;5], &mask).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<_> = vars.iter().map(|&v| g.grad(v)).collect();
        opt.step(net.param_tensors_mut(), &grads).unwrap();
    }
    let t0 = Instant::now();
    let iters = 10;
    for _ in 0..iters {
        let mut g = Graph::new();
        g.set_check_finite(false);
        let vars = net.bind(&mut g, true);
        let iv = g.leaf(input.clone(), false);
        let logits = net.forward(&mut g, &vars, iv, BnMode::Train).unwrap();
        let loss = g.weighted_cross_entropy(logits, &targets, &[1.0;5], &mask).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<_> = vars.iter().map(|&v| g.grad(v)).collect();
        opt.step(net.param_tensors_mut(), &grads).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("train iter (batch 2, 32^3, levels 3 base 8): {:.3} s  ({:.1} iters/min)", dt, 60.0/dt);

    // forward-only inference timing at 32^3 batch 1
    let inf_in = Tensor::new(vec![1, 2, 32, 32, 32], (0..n/2).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
    let t1 = Instant::now();
    for _ in 0..10 { net.infer(inf_in.clone()).unwrap(); }
    println!("inference fwd (batch 1, 32^3): {:.3} s", t1.elapsed().as_secs_f64()/10.0);

    // with finite checks on (test profile behavior)
    let t2 = Instant::now();
    for _ in 0..5 {
        let mut g = Graph::new();
        g.set_check_finite(true);
        let vars = net.bind(&mut g, true);
        let iv = g.leaf(input.clone(), false);
        let logits = net.forward(&mut g, &vars, iv, BnMode::Train).unwrap();
        let loss = g.weighted_cross_entropy(logits, &targets, &[1.0;5], &mask).unwrap();
        g.backward(loss).unwrap();
    }
    println!("train iter with finite checks: {:.3} s", t2.elapsed().as_secs_f64()/5.0);
}

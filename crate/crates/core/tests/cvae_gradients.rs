use radar_ood::cvae::{Activation, ConvBlockSpec, Cvae, CvaeArchitecture, LatentNoise};
use radar_ood::rng::{complex_normal, substream};
use radar_ood::C64;
use rand::Rng;

fn tiny(activation: Activation) -> CvaeArchitecture {
    CvaeArchitecture {
        input_len: 8,
        blocks: vec![ConvBlockSpec {
            channels: 3,
            kernel: 3,
            pool: 2,
        }],
        activation,
        latent_dim: 2,
    }
}

fn profiles(n: usize, m: usize, seed: u64) -> Vec<Vec<C64>> {
    let mut rng = substream(seed, &[]);
    (0..n).map(|_| (0..m).map(|_| complex_normal(&mut rng)).collect()).collect()
}

/// Worst per-tensor relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)`.
fn worst_tensor_error(net: &mut Cvae, z: &[C64], beta: f64, noise: &LatentNoise) -> (f64, String) {
    let mut grad = vec![0.0; net.num_params()];
    net.loss_and_grad(z, beta, noise, 1.0, &mut grad).unwrap();
    let h = 1e-6;
    let tensors = net.tensors().to_vec();
    let mut worst = (0.0, String::new());
    for t in &tensors {
        let width = if t.complex { 2 * t.numel } else { t.numel };
        let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
        for i in t.offset..t.offset + width {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + h;
            let up = net.elbo_loss(z, beta, noise).unwrap().total;
            net.params_mut()[i] = orig - h;
            let down = net.elbo_loss(z, beta, noise).unwrap().total;
            net.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            diff += (grad[i] - fd).powi(2);
            na += grad[i].powi(2);
            nf += fd.powi(2);
        }
        let scale = na.max(nf).sqrt();
        let rel = if scale > 0.0 { diff.sqrt() / scale } else { 0.0 };
        if rel > worst.0 {
            worst = (rel, t.name.clone());
        }
    }
    worst
}

#[test]
fn elbo_gradients_match_central_differences() {
    for (seed, activation) in [(1, Activation::ModRelu), (2, Activation::CRelu)] {
        let mut rng = substream(seed, &[]);
        let mut net = Cvae::new(tiny(activation), &mut rng).unwrap();
        net.refresh_norms(&profiles(64, 8, seed + 10)).unwrap();
        for t in net.tensors().to_vec().iter().filter(|t| !t.complex) {
            for v in &mut net.params_mut()[t.offset..t.offset + t.numel] {
                *v = rng.random_range(-0.2..0.3);
            }
        }
        for (k, z) in profiles(4, 8, seed + 20).iter().enumerate() {
            let noise = LatentNoise::draw(2, &mut rng);
            let (err, name) = worst_tensor_error(&mut net, z, 0.7, &noise);
            assert!(err < 1e-4, "{activation:?} sample {k}: {name} rel err {err:.3e}");
        }
    }
}

#[test]
fn gradients_of_default_architecture() {
    let mut rng = substream(3, &[]);
    let mut net = Cvae::new(CvaeArchitecture::default(), &mut rng).unwrap();
    net.refresh_norms(&profiles(64, 16, 30)).unwrap();
    net.set_activation_biases(0.05);
    let z = &profiles(1, 16, 31)[0];
    let noise = LatentNoise::draw(8, &mut rng);
    let (err, name) = worst_tensor_error(&mut net, z, 0.01, &noise);
    assert!(err < 1e-4, "{name} rel err {err:.3e}");
}

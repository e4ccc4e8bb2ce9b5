//! Independent oracles shared by the property tests and the acceptance suite.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trackbench_core::ddpg::{Agent, Critic, Hyperparams, Variant, OBS_DIM};
use trackbench_core::neural::DenseNet;

/// Solves `A^T X + X A + Q = 0` through the Kronecker-vectorized linear system.
pub fn lyapunov_kron(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let m = eye.kronecker(&a.transpose()) + a.transpose().kronecker(&eye);
    let rhs = -DMatrix::from_column_slice(n * n, 1, q.as_slice());
    let x = m.lu().solve(&rhs).expect("Lyapunov operator is nonsingular");
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    (&x + x.transpose()) * 0.5
}

/// Stabilizing CARE solution from the Hamiltonian matrix sign function,
/// refined by Newton-Kleinman policy iteration.
pub fn care_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let g = b * b.transpose() / r;
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let mut z = h;
    for _ in 0..100 {
        let zi = z.clone().try_inverse().expect("Hamiltonian iterate is invertible");
        let det = z.determinant().abs();
        let c = det.powf(-1.0 / (2 * n) as f64);
        let next = (&z * c + zi / c) * 0.5;
        let step = (&next - &z).norm() / next.norm();
        z = next;
        if step < 1e-14 {
            break;
        }
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(z.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(z.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-z.view((n, 0), (n, n))));
    let p = lhs.svd(true, true).solve(&rhs, 1e-14).expect("least squares");
    let mut p = (&p + p.transpose()) * 0.5;

    for _ in 0..20 {
        let k = b.transpose() * &p / r;
        let acl = a - b * &k;
        let next = lyapunov_kron(&acl, &(q + k.transpose() * &k * r));
        let delta = (&next - &p).amax();
        p = next;
        if delta < 1e-15 * (1.0 + p.amax()) {
            break;
        }
    }
    p
}

/// Relative mismatch with a small absolute floor for near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn randomize_biases(net: &mut DenseNet, rng: &mut impl Rng) {
    for range in net.bias_ranges() {
        for b in &mut net.params_mut()[range] {
            *b = rng.random_range(-0.3..0.3);
        }
    }
}

/// Worst relative error over `probes` random (input, parameter) pairs of a
/// scalar-output network, checking both parameter and input gradients.
pub fn fd_check_net(net: &DenseNet, probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut net = net.clone();
    for _ in 0..probes {
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tape = net.forward(&x, 1).unwrap();
        let mut pg = vec![0.0; net.param_count()];
        let dx = net.backward(&tape, &[1.0], Some(&mut pg)).unwrap();

        let i = rng.random_range(0..net.param_count());
        let orig = net.params()[i];
        net.params_mut()[i] = orig + h;
        let fp = net.forward(&x, 1).unwrap().output()[0];
        net.params_mut()[i] = orig - h;
        let fm = net.forward(&x, 1).unwrap().output()[0];
        net.params_mut()[i] = orig;
        worst = worst.max(rel_err(pg[i], (fp - fm) / (2.0 * h)));

        let j = rng.random_range(0..x.len());
        let mut xp = x.clone();
        xp[j] += h;
        let mut xm = x.clone();
        xm[j] -= h;
        let fp = net.forward(&xp, 1).unwrap().output()[0];
        let fm = net.forward(&xm, 1).unwrap().output()[0];
        worst = worst.max(rel_err(dx[j], (fp - fm) / (2.0 * h)));
    }
    worst
}

/// Same check for a critic, covering parameter gradients and `dQ/da`.
pub fn fd_check_critic(critic: &Critic, probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut params = critic.params();
    let mut probe = critic.clone();
    let q = |c: &Critic, s: &[f64], a: f64| c.forward(s, &[a]).unwrap().0[0];
    for _ in 0..probes {
        let s: Vec<f64> = (0..OBS_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = rng.random_range(-3.0..3.0);
        let (_, tape) = critic.forward(&s, &[a]).unwrap();
        let mut pg = vec![0.0; critic.param_count()];
        let da = critic.backward(&tape, &[1.0], Some(&mut pg)).unwrap()[0];

        let i = rng.random_range(0..params.len());
        let orig = params[i];
        params[i] = orig + h;
        probe.set_params(&params).unwrap();
        let fp = q(&probe, &s, a);
        params[i] = orig - h;
        probe.set_params(&params).unwrap();
        let fm = q(&probe, &s, a);
        params[i] = orig;
        probe.set_params(&params).unwrap();
        worst = worst.max(rel_err(pg[i], (fp - fm) / (2.0 * h)));

        let fd = (q(critic, &s, a + h) - q(critic, &s, a - h)) / (2.0 * h);
        worst = worst.max(rel_err(da, fd));
    }
    worst
}

/// A fresh agent whose networks have non-trivial biases.
pub fn probe_agent(variant: Variant, seed: u64) -> Agent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agent = Agent::new(variant, Hyperparams::default(), &mut rng).unwrap();
    randomize_biases(&mut agent.actor, &mut rng);
    if let Critic::Merge(m) = &mut agent.critic {
        for net in m.parts_mut() {
            randomize_biases(net, &mut rng);
        }
    } else {
        let mut p = agent.critic.params();
        p[10] = 0.4;
        agent.critic.set_params(&p).unwrap();
    }
    agent
}

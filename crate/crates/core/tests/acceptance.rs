//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits 0 after reporting unless `TRACKBENCH_STRICT` is set, in which case
//! any FAIL makes the process exit 1. `TRACKBENCH_ACCEPT_EPISODES` shortens
//! the training runs for quick local iteration.

mod common;

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trackbench_core::checkpoint;
use trackbench_core::criteria::{integral_metrics, stability_probe, CriteriaReport, MarginValue, Trajectory};
use trackbench_core::ddpg::{extract_gains, Agent, Critic, Hyperparams, LearningCurve, Trainer, Variant};
use trackbench_core::harness::{
    evaluate, loop_margins, run_closed_loop, scenario_initial_condition, scenario_nominal, scenario_perturbed,
    simulated_margins, trajectory_csv, ClosedLoopConfig, Controller, TrackingEnv,
};
use trackbench_core::lqi::{augment, lqi_design, CostWeights, LqiDesign};
use trackbench_core::ltisys::{discretize_zoh, lti_step, tf_to_ss, StateSpace, TransferFunction};
use trackbench_core::neural::{definiteness_report, policy_value_matrix, quad_critic_value, QuadraticCritic};

use common::{care_oracle, fd_check_critic, fd_check_net, probe_agent};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Suite {
    passed: usize,
    failed: usize,
}

impl Suite {
    fn check(&mut self, id: &str, name: &str, pass: bool, detail: impl AsRef<str>) {
        if pass {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
        println!(
            "{} {id} {name}: {}",
            if pass { "PASS" } else { "FAIL" },
            detail.as_ref()
        );
    }
}

fn info(id: &str, detail: impl AsRef<str>) {
    println!("INFO {id} {}", detail.as_ref());
}

fn plant() -> StateSpace {
    tf_to_ss(&TransferFunction::new(vec![0.5, -1.0], vec![1.0, 3.0, 2.0]).unwrap()).unwrap()
}

fn design() -> LqiDesign {
    lqi_design(&plant(), &CostWeights::benchmark()).unwrap()
}

fn lqi_loop() -> ClosedLoopConfig {
    ClosedLoopConfig::new(plant(), Controller::Lqi(design().gains), 0.1)
}

fn finite(v: MarginValue) -> f64 {
    v.finite().unwrap_or(f64::NAN)
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn ac1(s: &mut Suite) {
    let t = Instant::now();
    let d = design();
    let elapsed = t.elapsed();
    let aug = augment(&plant()).unwrap();
    let w = CostWeights::benchmark();
    let oracle = care_oracle(&aug.a, &aug.b, &w.q, w.r);
    let diff = (&d.care.p - &oracle).amax();
    let max_re = d
        .care
        .closed_loop_eigenvalues
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let pass = d.care.residual < 1e-8 && max_re < 0.0 && diff < 1e-6;
    s.check(
        "AC1",
        "LQI design",
        pass,
        format!(
            "residual {:.2e}, max Re(eig) {max_re:.4}, |P - oracle| {diff:.2e}, K_LQR {:?}, k_I {:.6}, {elapsed:.2?}",
            d.care.residual, d.gains.k_lqr, d.gains.k_i
        ),
    );
}

fn ac2(s: &mut Suite) {
    let r = evaluate(&lqi_loop(), &scenario_nominal()).unwrap();
    let st = &r.step;
    let tr = st.rise_time.unwrap_or(f64::NAN);
    let ts = st.settling_time.unwrap_or(f64::NAN);
    let gm = finite(r.margins.gm_db);
    let dm = finite(r.margins.dm_s);
    let rows: [(&str, f64, bool, &str); 7] = [
        ("t_r", tr, within(tr, 3.0, 0.45), "3.0 s +/- 15%"),
        (
            "M_p",
            st.overshoot_pct,
            within(st.overshoot_pct, 21.5, 3.0),
            "21.5% +/- 3",
        ),
        (
            "M_u",
            st.undershoot_pct,
            within(st.undershoot_pct, 7.7, 2.0),
            "7.7% +/- 2",
        ),
        ("t_s", ts, within(ts, 6.7, 1.34), "6.7 s +/- 20%"),
        (
            "|e_ss|",
            st.steady_state_error.abs(),
            st.steady_state_error.abs() < 1e-3,
            "< 1e-3",
        ),
        ("GM", gm, within(gm, 27.8, 1.5), "27.8 dB +/- 1.5"),
        ("DM", dm, within(dm, 0.85, 0.1), "0.85 s +/- 0.1"),
    ];
    for (name, value, pass, target) in rows {
        s.check(
            "AC2",
            &format!("LQI {name}"),
            pass,
            format!("{value:.4} (target {target})"),
        );
    }
}

fn ac3a(s: &mut Suite) {
    let dt = 0.01;
    let n = 1001;
    let t: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    let r = vec![1.0; n];
    let y: Vec<f64> = t.iter().map(|t| 1.0 - (-t).exp()).collect();
    let u: Vec<f64> = t.iter().map(|t| t.sin()).collect();
    let m = integral_metrics(&Trajectory::from_signals(dt, r, y, u).unwrap()).unwrap();
    let pi = std::f64::consts::PI;
    let exact = [
        ("ISE", m.ise, (1.0 - (-20f64).exp()) / 2.0),
        ("ITAE", m.itae, 1.0 - 11.0 * (-10f64).exp()),
        ("IACE", m.iace, 6.0 + 1.0 - (10.0 - 3.0 * pi).cos()),
        ("IACER", m.iacer, 5.0 + (10f64.sin() - 1.0).abs()),
        ("u_max", m.u_max, 1.0),
    ];
    let worst = exact.iter().map(|(_, a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);
    let detail: Vec<String> = exact.iter().map(|(n, a, b)| format!("{n} {a:.5}/{b:.5}")).collect();
    s.check(
        "AC3a",
        "closed-form integrals",
        worst < 0.005,
        format!("worst rel {worst:.2e}; {}", detail.join(", ")),
    );
}

fn ac3b(s: &mut Suite, name: &str, cfg: &ClosedLoopConfig) {
    let nominal = integral_metrics(&run_closed_loop(cfg, &scenario_nominal()).unwrap()).unwrap();
    let perturbed = integral_metrics(&run_closed_loop(cfg, &scenario_perturbed()).unwrap()).unwrap();
    let pairs = [
        ("ISE", nominal.ise, perturbed.ise),
        ("ITAE", nominal.itae, perturbed.itae),
        ("IACE", nominal.iace, perturbed.iace),
        ("IACER", nominal.iacer, perturbed.iacer),
    ];
    let pass = pairs.iter().all(|(_, a, b)| b > a);
    let detail: Vec<String> = pairs.iter().map(|(n, a, b)| format!("{n} {a:.3} -> {b:.3}")).collect();
    s.check(
        "AC3b",
        &format!("{name} perturbed exceeds nominal"),
        pass,
        detail.join(", "),
    );
}

fn ac4(s: &mut Suite) {
    let cfg = lqi_loop();
    let analytic = loop_margins(&cfg, 0.1).unwrap();
    let t = Instant::now();
    let simulated = simulated_margins(&cfg, 0.1).unwrap();
    let elapsed = t.elapsed();
    let (ga, gs) = (finite(analytic.gm_db), finite(simulated.gm_db));
    let (da, ds) = (finite(analytic.dm_s), finite(simulated.dm_s));
    let pass = ((gs - ga) / ga).abs() <= 0.05 && (ds - da).abs() <= 0.1 + 1e-12;
    s.check(
        "AC4",
        "margin cross-check",
        pass,
        format!("GM {ga:.3} dB analytic vs {gs:.3} dB simulated, DM {da:.3} s vs {ds:.3} s, search {elapsed:.2?}"),
    );
}

fn ac5(s: &mut Suite) {
    let p = plant();
    let dss = discretize_zoh(&p, 0.1).unwrap();
    let mut x = DVector::zeros(2);
    let u = DVector::from_element(1, 1.0);
    let mut worst: f64 = 0.0;
    let mut last = 0.0;
    for k in 0..=400 {
        let t = k as f64 * 0.1;
        let (next, y) = lti_step(&dss, &x, &u).unwrap();
        worst = worst.max((y[0] - (-0.5 + 1.5 * (-t).exp() - (-2.0 * t).exp())).abs());
        last = y[0];
        x = next;
    }
    let dc = -(p.c() * p.a().clone().try_inverse().unwrap() * p.b())[(0, 0)];
    let pass = worst < 1e-6 && (dc + 0.5).abs() < 1e-12 && (last + 0.5).abs() < 1e-6;
    s.check(
        "AC5",
        "ZOH step exactness",
        pass,
        format!("max |error| {worst:.2e}, DC gain {dc}, y(40 s) {last:.9}"),
    );
}

fn ac6(s: &mut Suite) {
    for variant in [Variant::Ddpg1, Variant::Ddpg2] {
        let agent = probe_agent(variant, 21);
        let actor = fd_check_net(&agent.actor, 100, 3);
        s.check(
            "AC6",
            &format!("{variant} actor gradients"),
            actor < 1e-4,
            format!("worst rel error {actor:.2e} over 100 probes"),
        );
        let critic = fd_check_critic(&agent.critic, 100, 4);
        s.check(
            "AC6",
            &format!("{variant} critic gradients"),
            critic < 1e-4,
            format!("worst rel error {critic:.2e} over 100 probes"),
        );
    }
}

struct TrainedRun {
    seed: u64,
    agent: Agent,
    curve: LearningCurve,
    controller: Controller,
    nominal: Option<CriteriaReport>,
    stable: bool,
    pass: bool,
}

fn train_and_gate(variant: Variant, seed: u64, episodes: usize) -> TrainedRun {
    let hp = Hyperparams {
        seed,
        max_episodes: episodes,
        ..Default::default()
    };
    let p = plant();
    let mut env = TrackingEnv::new(&p, CostWeights::benchmark(), hp.integral_gain, hp.dt, hp.max_steps).unwrap();
    let t = Instant::now();
    let mut trainer = Trainer::new(variant, hp).unwrap();
    let outcome = trainer.run(&mut env, episodes, |_| {});
    let elapsed = t.elapsed();
    let controller = match variant {
        Variant::Ddpg1 => Controller::LinearGain(extract_gains(&trainer.agent).unwrap()),
        Variant::Ddpg2 => Controller::Actor(trainer.agent.policy()),
    };
    let cfg = ClosedLoopConfig::new(p, controller.clone(), 0.1);
    let traj = run_closed_loop(&cfg, &scenario_nominal()).unwrap();
    let stable = outcome.is_ok() && stability_probe(&traj);
    let nominal = evaluate(&cfg, &scenario_nominal()).ok();
    let (first, last) = (trainer.curve.first_mean(50), trainer.curve.last_mean(50));
    let improved = matches!((first, last), (Some(f), Some(l)) if l > f);
    let (ess, mu) = nominal
        .as_ref()
        .map(|r| (r.step.steady_state_error, r.step.undershoot_pct))
        .unwrap_or((f64::NAN, f64::NAN));
    let pass = stable && ess.abs() < 0.05 && mu > 0.0 && improved;
    let gains = match &controller {
        Controller::LinearGain(k) => format!(", K_DDPG {k:?}"),
        _ => String::new(),
    };
    info(
        "AC7",
        format!(
            "{variant} seed {seed}: {} in {elapsed:.1?}; stable {stable}, e_ss {ess:.4}, M_u {mu:.2}%, reward first-50 {first:.1?} last-50 {last:.1?}{gains}{}",
            if outcome.is_ok() { format!("{episodes} episodes") } else { "diverged".to_string() },
            outcome.err().map(|e| format!(", error: {e}")).unwrap_or_default()
        ),
    );
    TrainedRun {
        seed,
        agent: trainer.agent,
        curve: trainer.curve,
        controller,
        nominal,
        stable,
        pass,
    }
}

/// Trains seeds in order, stopping at the first run that meets the gate.
fn ac7(s: &mut Suite, variant: Variant, episodes: usize) -> TrainedRun {
    let mut runs = Vec::new();
    for seed in SEEDS {
        let run = train_and_gate(variant, seed, episodes);
        let done = run.pass;
        runs.push(run);
        if done {
            break;
        }
    }
    let tried = runs.len();
    let best = match runs.iter().position(|r| r.pass) {
        Some(i) => runs.swap_remove(i),
        None => runs
            .into_iter()
            .max_by(|a, b| {
                let score = |r: &TrainedRun| (r.stable, r.curve.last_mean(50).unwrap_or(f64::NEG_INFINITY));
                let (sa, sb) = (score(a), score(b));
                sa.0.cmp(&sb.0).then(sa.1.total_cmp(&sb.1))
            })
            .unwrap(),
    };
    s.check(
        "AC7",
        &format!("{variant} training gate"),
        best.pass,
        format!(
            "{} after {tried} seed(s) (stable, |e_ss| < 0.05, M_u > 0, last-50 mean above first-50)",
            if best.pass {
                format!("seed {} passes", best.seed)
            } else {
                "no seed passes".to_string()
            }
        ),
    );
    best
}

fn ac8(s: &mut Suite, ddpg1: &TrainedRun) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let qc = QuadraticCritic::new(std::array::from_fn(|_| rng.random_range(-3.0..3.0)));
        let k: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let p = policy_value_matrix(&qc, &k);
        let xv = DVector::from_row_slice(&x);
        let lhs = (xv.transpose() * &p * &xv)[(0, 0)];
        let rhs = quad_critic_value(&qc, &x, k[0] * x[0] + k[1] * x[1] + k[2] * x[2]);
        worst = worst.max((lhs - rhs).abs() / (1.0 + rhs.abs()));
    }
    s.check(
        "AC8",
        "value-matrix identity",
        worst <= 1e-12,
        format!("worst scaled error {worst:.2e} over 1000 probes"),
    );
    if let (Critic::Quadratic(qc), Controller::LinearGain(k)) = (&ddpg1.agent.critic, &ddpg1.controller) {
        let rep = definiteness_report(qc, k);
        info(
            "AC8",
            format!(
                "trained DDPG1 (seed {}): W eigenvalues {:?} negative definite {}; P eigenvalues {:?} negative definite {}",
                ddpg1.seed, rep.w_eigenvalues, rep.w_negative_definite, rep.p_eigenvalues, rep.p_negative_definite
            ),
        );
    }
}

fn ac9(s: &mut Suite) {
    let cfg = lqi_loop();
    let sc = scenario_perturbed();
    let outputs = || {
        let traj = run_closed_loop(&cfg, &sc).unwrap();
        let report = evaluate(&cfg, &sc).unwrap();
        (trajectory_csv(&traj), serde_json::to_string_pretty(&report).unwrap())
    };
    let same_eval = outputs() == outputs();

    let train = |variant| {
        let hp = Hyperparams {
            batch_size: 32,
            max_steps: 40,
            max_episodes: 3,
            seed: 9,
            ..Default::default()
        };
        let mut env = TrackingEnv::new(
            &plant(),
            CostWeights::benchmark(),
            hp.integral_gain,
            hp.dt,
            hp.max_steps,
        )
        .unwrap();
        let mut trainer = Trainer::new(variant, hp).unwrap();
        trainer.run(&mut env, 3, |_| {}).unwrap();
        (
            checkpoint::encode(&trainer, "determinism").unwrap(),
            trainer.curve.to_csv(),
        )
    };
    let same_train = [Variant::Ddpg1, Variant::Ddpg2]
        .into_iter()
        .all(|v| train(v) == train(v));
    s.check(
        "AC9",
        "determinism",
        same_eval && same_train,
        format!("evaluation outputs identical {same_eval}, training checkpoints and curves identical {same_train}"),
    );
}

fn ac10(s: &mut Suite, name: &str, controller: &Controller) {
    let cfg = ClosedLoopConfig::new(plant(), controller.clone(), 0.1);
    for x0 in [[1.0, -2.0], [-1.0, 2.0]] {
        let traj = run_closed_loop(&cfg, &scenario_initial_condition(x0)).unwrap();
        let reached = traj
            .t
            .iter()
            .zip(traj.error())
            .find(|(_, e)| e.abs() < 0.05)
            .map(|(t, _)| *t);
        let final_err = traj.error().last().unwrap_or(f64::NAN);
        let pass = reached.is_some_and(|t| t < 20.0) && final_err.abs() < 0.05;
        s.check(
            "AC10",
            &format!("{name} from x0 = {x0:?}"),
            pass,
            format!("first |e| < 0.05 at {reached:?} s, final error {final_err:.4}"),
        );
    }
}

fn main() {
    let episodes = std::env::var("TRACKBENCH_ACCEPT_EPISODES")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(Hyperparams::default().max_episodes);
    let mut s = Suite { passed: 0, failed: 0 };
    let start = Instant::now();

    ac1(&mut s);
    ac2(&mut s);
    ac3a(&mut s);
    ac4(&mut s);
    ac5(&mut s);
    ac6(&mut s);
    ac9(&mut s);

    if episodes != Hyperparams::default().max_episodes {
        info("AC7", format!("training shortened to {episodes} episodes"));
    }
    let ddpg1 = ac7(&mut s, Variant::Ddpg1, episodes);
    let ddpg2 = ac7(&mut s, Variant::Ddpg2, episodes);
    ac8(&mut s, &ddpg1);

    ac3b(&mut s, "LQI", &lqi_loop());
    ac3b(
        &mut s,
        "DDPG1",
        &ClosedLoopConfig::new(plant(), ddpg1.controller.clone(), 0.1),
    );
    ac3b(
        &mut s,
        "DDPG2",
        &ClosedLoopConfig::new(plant(), ddpg2.controller.clone(), 0.1),
    );

    ac10(&mut s, "LQI", &lqi_loop().controller);
    ac10(&mut s, "DDPG2", &ddpg2.controller);

    for run in [&ddpg1, &ddpg2] {
        if let Some(r) = &run.nominal {
            info(
                "TABLE",
                format!(
                    "{} seed {}: {}",
                    run.agent.variant,
                    run.seed,
                    serde_json::to_string(&serde_json::to_value(r).unwrap()["criteria"]).unwrap()
                ),
            );
        }
    }
    println!(
        "acceptance: {} passed, {} failed in {:.1?}",
        s.passed,
        s.failed,
        start.elapsed()
    );
    if s.failed > 0 && std::env::var_os("TRACKBENCH_STRICT").is_some() {
        std::process::exit(1);
    }
}

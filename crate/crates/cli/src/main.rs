use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use trackbench_core::checkpoint;
use trackbench_core::config::RunConfig;
use trackbench_core::criteria::{margins_analytic, CriteriaReport};
use trackbench_core::ddpg::{extract_gains, Critic, Trainer, Variant};
use trackbench_core::harness::{
    compare, evaluate_trajectory, loop_margins, run_closed_loop, trajectory_csv, ClosedLoopConfig, Controller,
    TrackingEnv,
};
use trackbench_core::lqi::{loop_at_plant_input, lqi_design, LqiGains};
use trackbench_core::neural::definiteness_report;
use trackbench_core::Error;

#[derive(Parser)]
#[command(name = "trackbench", version, about = "LQI vs DDPG setpoint-tracking benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for training and scenario noise (overrides `hyperparams.seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the LQI design and write gains plus analytic margins.
    DesignLqi {
        #[command(flatten)]
        common: Common,
    },
    /// Train a DDPG agent and write a checkpoint and learning curve.
    Train {
        #[command(flatten)]
        common: Common,
        /// Agent variant: ddpg1 or ddpg2.
        #[arg(long)]
        variant: Variant,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Episode budget (overrides `hyperparams.max_episodes`).
        #[arg(long)]
        episodes: Option<usize>,
        /// Write a checkpoint every this many episodes.
        #[arg(long, default_value_t = 25)]
        checkpoint_every: usize,
    },
    /// Score a controller on the configured scenarios.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// `lqi`, a gains file from design-lqi, or a training checkpoint.
        #[arg(long)]
        controller: String,
    },
    /// Side-by-side table of two or more reports from the same scenario.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Riccati { .. }
        | Error::NotHurwitz(_)
        | Error::Divergence { .. }
        | Error::UnstableLoop(_)
        | Error::PoleHit { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::DesignLqi { common } => design_lqi(&common),
        Command::Train {
            common,
            variant,
            resume,
            episodes,
            checkpoint_every,
        } => train(&common, variant, resume.as_deref(), episodes, checkpoint_every),
        Command::Evaluate { common, controller } => evaluate(&common, &controller),
        Command::Compare { common, reports } => compare_reports(&common, &reports),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.hyperparams.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn design_lqi(common: &Common) -> Result<(), Error> {
    let (cfg, out) = load(common)?;
    let plant = cfg.plant_model()?;
    let design = lqi_design(&plant, &cfg.cost_weights()?)?;
    let care = &design.care;
    let gains = json!({
        "k_lqr": design.gains.k_lqr,
        "k_i": design.gains.k_i,
        "full_gain": design.gains.full_gain(),
        "care_residual": care.residual,
        "care_iterations": care.iterations,
        "closed_loop_eigenvalues": care.closed_loop_eigenvalues.iter().map(|e| [e.re, e.im]).collect::<Vec<_>>(),
        "p": (0..care.p.nrows()).map(|i| care.p.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
    });
    write_json(&out.join("lqi_gains.json"), &gains)?;

    let loop_cfg = ClosedLoopConfig::new(
        plant.clone(),
        Controller::Lqi(design.gains.clone()),
        cfg.hyperparams.integral_gain,
    );
    let sampled = loop_margins(&loop_cfg, cfg.hyperparams.dt)?;
    let continuous = margins_analytic(&loop_at_plant_input(&plant, &design.gains)?)?;
    write_json(
        &out.join("lqi_margins.json"),
        &json!({ "sampled": sampled, "continuous": continuous }),
    )?;
    println!(
        "K_LQR = {:?}, k_I = {:.6}, CARE residual = {:.3e}, GM = {} dB, DM = {} s",
        design.gains.k_lqr, design.gains.k_i, care.residual, sampled.gm_db, sampled.dm_s
    );
    Ok(())
}

fn train(
    common: &Common,
    variant: Variant,
    resume: Option<&Path>,
    episodes: Option<usize>,
    checkpoint_every: usize,
) -> Result<(), Error> {
    let (mut cfg, out) = load(common)?;
    if let Some(n) = episodes {
        cfg.hyperparams.max_episodes = n;
    }
    let hash = cfg.training_hash();
    let mut trainer = match resume {
        Some(path) => {
            let (trainer, stored) = checkpoint::read(path)?;
            if stored != hash {
                return Err(Error::Config(format!(
                    "checkpoint {} was produced by a different configuration",
                    path.display()
                )));
            }
            if trainer.agent.variant != variant {
                return Err(Error::Config(format!(
                    "checkpoint holds a {} agent",
                    trainer.agent.variant
                )));
            }
            let mut trainer = trainer;
            // Only the episode budget may differ from the stored run.
            trainer.agent.hp.max_episodes = cfg.hyperparams.max_episodes;
            trainer
        }
        None => Trainer::new(variant, cfg.hyperparams.clone())?,
    };
    let hp = &cfg.hyperparams;
    let mut env = TrackingEnv::new(
        &cfg.plant_model()?,
        cfg.cost_weights()?,
        hp.integral_gain,
        hp.dt,
        hp.max_steps,
    )?;
    let ckpt_path = out.join(format!("{variant}.ckpt"));
    let curve_path = out.join(format!("{variant}_curve.csv"));
    let mut io_error = None;
    let result = trainer.run(&mut env, hp.max_episodes, |t| {
        let n = t.episodes_done();
        if checkpoint_every > 0 && n % checkpoint_every == 0 {
            if let Err(e) = checkpoint::write(&ckpt_path, t, &hash) {
                io_error.get_or_insert(e);
            }
        }
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    std::fs::write(&curve_path, trainer.curve.to_csv())?;
    if let Err(e) = result {
        // Keep the last periodic checkpoint intact and save the failing state beside it.
        let diverged = out.join(format!("{variant}_diverged.ckpt"));
        checkpoint::write(&diverged, &trainer, &hash)?;
        eprintln!("saved diverged state to {}", diverged.display());
        return Err(e);
    }
    checkpoint::write(&ckpt_path, &trainer, &hash)?;
    let curve = &trainer.curve;
    println!(
        "{variant}: {} episodes, first-50 mean {:?}, last-50 mean {:?}",
        curve.rewards.len(),
        curve.first_mean(50),
        curve.last_mean(50)
    );
    Ok(())
}

struct Loaded {
    controller: Controller,
    metadata: Vec<(String, Value)>,
}

fn load_controller(source: &str, cfg: &RunConfig) -> Result<Loaded, Error> {
    let plant = cfg.plant_model()?;
    if source == "lqi" {
        let gains = lqi_design(&plant, &cfg.cost_weights()?)?.gains;
        return Ok(Loaded {
            controller: Controller::Lqi(gains),
            metadata: Vec::new(),
        });
    }
    let bytes = std::fs::read(source)?;
    if bytes.starts_with(checkpoint::MAGIC) {
        let (trainer, hash) = checkpoint::decode(&bytes)?;
        let agent = &trainer.agent;
        let mut metadata = vec![
            ("agent_episodes".to_string(), json!(trainer.episodes_done())),
            ("config_hash".to_string(), json!(hash)),
        ];
        let controller = match agent.variant {
            Variant::Ddpg1 => {
                let k = extract_gains(agent)?;
                metadata.push(("k_ddpg".into(), json!(k)));
                if let Critic::Quadratic(q) = &agent.critic {
                    metadata.push(("definiteness".into(), serde_json::to_value(definiteness_report(q, &k))?));
                }
                let lqi = lqi_design(&plant, &cfg.cost_weights()?)?.gains;
                let g = cfg.hyperparams.integral_gain;
                let lqi_k = [-lqi.k_lqr[0], -lqi.k_lqr[1], lqi.k_i / g];
                metadata.push(("k_lqi_equivalent".into(), json!(lqi_k)));
                metadata.push((
                    "k_ddpg_minus_lqi".into(),
                    json!([k[0] - lqi_k[0], k[1] - lqi_k[1], k[2] - lqi_k[2]]),
                ));
                Controller::LinearGain(k)
            }
            Variant::Ddpg2 => Controller::Actor(agent.policy()),
        };
        return Ok(Loaded { controller, metadata });
    }
    let v: Value = serde_json::from_slice(&bytes)?;
    let gains: LqiGains = serde_json::from_value(v).map_err(|e| Error::InvalidArgument(format!("{source}: {e}")))?;
    Ok(Loaded {
        controller: Controller::Lqi(gains),
        metadata: Vec::new(),
    })
}

fn evaluate(common: &Common, source: &str) -> Result<(), Error> {
    let (cfg, out) = load(common)?;
    let loaded = load_controller(source, &cfg)?;
    let mut loop_cfg = ClosedLoopConfig::new(cfg.plant_model()?, loaded.controller, cfg.hyperparams.integral_gain);
    loop_cfg.settling_band = cfg.settling_band;
    let kind = loop_cfg.controller.kind();
    for sc in cfg.scenarios(cfg.hyperparams.seed) {
        let traj = run_closed_loop(&loop_cfg, &sc)?;
        let mut report = evaluate_trajectory(&loop_cfg, &sc, &traj)?;
        for (k, v) in &loaded.metadata {
            report.metadata.insert(k.clone(), v.clone());
        }
        let stem = format!("{kind}_{}", file_stem(&sc.name));
        write_json(&out.join(format!("report_{stem}.json")), &report)?;
        std::fs::write(out.join(format!("trajectory_{stem}.csv")), trajectory_csv(&traj))?;
        println!(
            "{kind} {}: t_r {:?} M_p {:.2}% M_u {:.2}% t_s {:?} e_ss {:.2e} GM {} DM {}",
            sc.name,
            report.step.rise_time,
            report.step.overshoot_pct,
            report.step.undershoot_pct,
            report.step.settling_time,
            report.step.steady_state_error,
            report.margins.gm_db,
            report.margins.dm_s
        );
    }
    Ok(())
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

fn compare_reports(common: &Common, paths: &[PathBuf]) -> Result<(), Error> {
    let (_, out) = load(common)?;
    let reports = paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str::<CriteriaReport>(&text)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let table = compare(&reports)?;
    let text = table.render_text();
    write_json(&out.join("comparison.json"), &table)?;
    std::fs::write(out.join("comparison.txt"), &text)?;
    print!("{text}");
    Ok(())
}

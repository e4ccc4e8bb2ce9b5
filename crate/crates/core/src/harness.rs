//! Closed-loop wiring, the three experiment scenarios, evaluation and
//! side-by-side comparison.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::criteria::{
    integral_metrics, margins_analytic, margins_analytic_sampled, margins_simulated, step_metrics, CriteriaReport,
    MarginReport, MarginSearch, Trajectory,
};
use crate::ddpg::{compute_reward, ActorPolicy, EnvStep, Environment, Obs};
use crate::error::{Error, Result};
use crate::lqi::{loop_at_plant_input, sampled_loop_at_plant_input, CostWeights, LqiGains};
use crate::ltisys::{discretize_zoh, DiscreteStateSpace, StateSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub reference: f64,
    pub reference_onset: f64,
    /// Additive output disturbance.
    pub disturbance: f64,
    pub disturbance_onset: f64,
    /// Standard deviation of the measurement noise.
    pub noise_std: f64,
    pub noise_onset: f64,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !(self.dt > 0.0) || self.dt > self.horizon {
            return Err(Error::InvalidArgument("scenario needs 0 < dt <= horizon".into()));
        }
        for (name, t) in [
            ("reference_onset", self.reference_onset),
            ("disturbance_onset", self.disturbance_onset),
            ("noise_onset", self.noise_onset),
        ] {
            if !(0.0..=self.horizon).contains(&t) {
                return Err(Error::InvalidArgument(format!(
                    "{name} {t} lies outside [0, {}]",
                    self.horizon
                )));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }
}

/// Unit step at t = 0 from rest, no disturbance or noise, 20 s.
pub fn scenario_nominal() -> Scenario {
    Scenario {
        name: "nominal".into(),
        reference: 1.0,
        reference_onset: 0.0,
        disturbance: 0.0,
        disturbance_onset: 0.0,
        noise_std: 0.0,
        noise_onset: 0.0,
        x0: vec![0.0, 0.0],
        horizon: 20.0,
        dt: 0.1,
        seed: 0,
    }
}

/// Unit step with a +0.2 output disturbance from 15 s and measurement noise
/// (sigma 0.1) from 20 s, 35 s.
pub fn scenario_perturbed() -> Scenario {
    Scenario {
        name: "perturbed".into(),
        disturbance: 0.2,
        disturbance_onset: 15.0,
        noise_std: 0.1,
        noise_onset: 20.0,
        horizon: 35.0,
        ..scenario_nominal()
    }
}

/// Unit step from a non-zero plant state.
pub fn scenario_initial_condition(x0: [f64; 2]) -> Scenario {
    Scenario {
        name: format!("initial[{},{}]", x0[0], x0[1]),
        x0: x0.to_vec(),
        ..scenario_nominal()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    /// `u = -K_LQR x_p + k_I e_I`; the harness integrator is scaled by the
    /// integral gain, which the law divides back out.
    Lqi(LqiGains),
    /// `u = K x` on the observation vector.
    LinearGain([f64; 3]),
    Actor(ActorPolicy),
}

impl Controller {
    pub fn kind(&self) -> &'static str {
        match self {
            Controller::Lqi(_) => "lqi",
            Controller::LinearGain(_) => "ddpg1",
            Controller::Actor(p) => match p.variant {
                crate::ddpg::Variant::Ddpg1 => "ddpg1",
                crate::ddpg::Variant::Ddpg2 => "ddpg2",
            },
        }
    }

    pub fn action(&self, obs: &Obs, integral_gain: f64) -> f64 {
        match self {
            Controller::Lqi(g) => -g.k_lqr[0] * obs[0] - g.k_lqr[1] * obs[1] + g.k_i / integral_gain * obs[2],
            Controller::LinearGain(k) => k[0] * obs[0] + k[1] * obs[1] + k[2] * obs[2],
            Controller::Actor(p) => p.action(obs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopConfig {
    pub plant: StateSpace,
    pub controller: Controller,
    pub integral_gain: f64,
    pub settling_band: f64,
    /// Multiplier inserted at the plant input.
    pub input_gain: f64,
    /// Pure input delay in samples.
    pub input_delay: usize,
}

impl ClosedLoopConfig {
    pub fn new(plant: StateSpace, controller: Controller, integral_gain: f64) -> Self {
        Self {
            plant,
            controller,
            integral_gain,
            settling_band: 0.02,
            input_gain: 1.0,
            input_delay: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.integral_gain > 0.0) {
            return Err(Error::InvalidArgument("integral gain must be positive".into()));
        }
        if self.plant.order() != 2 || !self.plant.is_siso() {
            return Err(Error::Dimension(
                "the harness observation expects a second-order SISO plant".into(),
            ));
        }
        if let Controller::Lqi(g) = &self.controller {
            if g.k_lqr.len() != self.plant.order() {
                return Err(Error::Dimension("LQI gain length differs from plant order".into()));
            }
        }
        Ok(())
    }
}

/// Magnitude beyond which a run is cut short as diverged.
const BLOWUP: f64 = 1e12;

/// Simulates the sampled loop. Per sample: output plus disturbance, measured
/// output plus noise, error, integrator update, control, ZOH plant update.
pub fn run_closed_loop(cfg: &ClosedLoopConfig, sc: &Scenario) -> Result<Trajectory> {
    cfg.validate()?;
    sc.validate()?;
    if sc.x0.len() != cfg.plant.order() {
        return Err(Error::ScenarioMismatch(format!(
            "initial state has {} entries, plant has {} states",
            sc.x0.len(),
            cfg.plant.order()
        )));
    }
    let dss = discretize_zoh(&cfg.plant, sc.dt)?;
    run_discrete(cfg, &dss, sc)
}

fn run_discrete(cfg: &ClosedLoopConfig, dss: &DiscreteStateSpace, sc: &Scenario) -> Result<Trajectory> {
    let steps = sc.steps();
    let g = cfg.integral_gain;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut x = DVector::from_column_slice(&sc.x0);
    let mut e_i = 0.0;
    let mut fifo: VecDeque<f64> = std::iter::repeat_n(0.0, cfg.input_delay).collect();
    let cap = steps + 1;
    let mut traj = Trajectory {
        t: Vec::with_capacity(cap),
        r: Vec::with_capacity(cap),
        y: Vec::with_capacity(cap),
        y_measured: Vec::with_capacity(cap),
        u: Vec::with_capacity(cap),
        x: Vec::with_capacity(cap),
        e_i: Vec::with_capacity(cap),
        dt: sc.dt,
        truncated: false,
    };
    let eps = 1e-9 * sc.dt;
    for k in 0..=steps {
        let t = k as f64 * sc.dt;
        let r = if t + eps >= sc.reference_onset {
            sc.reference
        } else {
            0.0
        };
        let d = if t + eps >= sc.disturbance_onset {
            sc.disturbance
        } else {
            0.0
        };
        let y = (dss.cd() * &x)[0] + d;
        let noise = if sc.noise_std > 0.0 && t + eps >= sc.noise_onset {
            let z: f64 = StandardNormal.sample(&mut rng);
            sc.noise_std * z
        } else {
            0.0
        };
        let y_meas = y + noise;
        e_i += g * (r - y_meas) * sc.dt;
        let obs = [x[0], x[1], e_i];
        let u = cfg.controller.action(&obs, g);
        if !u.is_finite() || !y.is_finite() {
            traj.truncated = true;
            break;
        }
        traj.t.push(t);
        traj.r.push(r);
        traj.y.push(y);
        traj.y_measured.push(y_meas);
        traj.u.push(u);
        traj.x.push(vec![x[0], x[1]]);
        traj.e_i.push(e_i);

        fifo.push_back(u);
        let applied = fifo.pop_front().expect("fifo holds at least the current sample");
        x = dss.ad() * &x + dss.bd() * (cfg.input_gain * applied);
        if x.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
            traj.truncated = k < steps;
            if traj.truncated {
                break;
            }
        }
    }
    if traj.t.len() < 2 {
        // Diverged immediately; keep a two-sample record so scoring can proceed.
        while traj.t.len() < 2 {
            let k = traj.t.len();
            traj.t.push(k as f64 * sc.dt);
            traj.r.push(sc.reference);
            traj.y.push(f64::INFINITY);
            traj.y_measured.push(f64::INFINITY);
            traj.u.push(f64::INFINITY);
            traj.x.push(vec![f64::INFINITY; 2]);
            traj.e_i.push(f64::INFINITY);
        }
        traj.truncated = true;
    }
    Ok(traj)
}

/// Training environment: unit step from rest, one action per `dt`, fixed
/// episode length ending in time-limit truncation.
#[derive(Debug, Clone)]
pub struct TrackingEnv {
    dss: DiscreteStateSpace,
    weights: CostWeights,
    integral_gain: f64,
    reference: f64,
    max_steps: usize,
    x: DVector<f64>,
    e_i: f64,
    steps: usize,
}

impl TrackingEnv {
    pub fn new(
        plant: &StateSpace,
        weights: CostWeights,
        integral_gain: f64,
        dt: f64,
        max_steps: usize,
    ) -> Result<Self> {
        if plant.order() != 2 || !plant.is_siso() {
            return Err(Error::Dimension(
                "training environment expects a second-order SISO plant".into(),
            ));
        }
        let dss = discretize_zoh(plant, dt)?;
        Ok(Self {
            dss,
            weights,
            integral_gain,
            reference: 1.0,
            max_steps,
            x: DVector::zeros(2),
            e_i: 0.0,
            steps: 0,
        })
    }

    fn observe(&mut self) -> Obs {
        let y = (self.dss.cd() * &self.x)[0];
        self.e_i += self.integral_gain * (self.reference - y) * self.dss.dt();
        [self.x[0], self.x[1], self.e_i]
    }

    fn obs(&self) -> Obs {
        [self.x[0], self.x[1], self.e_i]
    }
}

impl Environment for TrackingEnv {
    fn reset(&mut self) -> Obs {
        self.x = DVector::zeros(2);
        self.e_i = 0.0;
        self.steps = 0;
        self.observe()
    }

    fn step(&mut self, action: f64) -> Result<EnvStep> {
        let reward = compute_reward(&self.obs(), action, &self.weights);
        self.x = self.dss.ad() * &self.x + self.dss.bd() * action;
        self.steps += 1;
        let obs = self.observe();
        Ok(EnvStep {
            obs,
            reward,
            terminal: false,
            truncated: self.steps >= self.max_steps,
        })
    }
}

/// Horizon of the runs behind the search-based margins.
pub const MARGIN_HORIZON: f64 = 60.0;

/// Margins of the loop broken at the plant input. LQI uses the sampled loop
/// transfer; other controllers use the gain/delay search.
pub fn loop_margins(cfg: &ClosedLoopConfig, dt: f64) -> Result<MarginReport> {
    match &cfg.controller {
        Controller::Lqi(g) => {
            let dss = discretize_zoh(&cfg.plant, dt)?;
            margins_analytic_sampled(&sampled_loop_at_plant_input(&dss, g, cfg.integral_gain)?)
        }
        _ => simulated_margins(cfg, dt),
    }
}

/// Gain and delay search on the nominal step over a 60 s horizon.
pub fn simulated_margins(cfg: &ClosedLoopConfig, dt: f64) -> Result<MarginReport> {
    let sc = Scenario {
        dt,
        ..scenario_nominal()
    }
    .with_horizon(MARGIN_HORIZON);
    let dss = discretize_zoh(&cfg.plant, dt)?;
    let sim = |gain: f64, delay: usize| {
        let probe = ClosedLoopConfig {
            input_gain: gain,
            input_delay: delay,
            ..cfg.clone()
        };
        run_discrete(&probe, &dss, &sc)
    };
    margins_simulated(sim, dt, MarginSearch::default())
}

/// Runs one scenario and scores all twelve criteria.
pub fn evaluate(cfg: &ClosedLoopConfig, sc: &Scenario) -> Result<CriteriaReport> {
    let traj = run_closed_loop(cfg, sc)?;
    evaluate_trajectory(cfg, sc, &traj)
}

/// Scores an already simulated trajectory of `cfg` under `sc`.
pub fn evaluate_trajectory(cfg: &ClosedLoopConfig, sc: &Scenario, traj: &Trajectory) -> Result<CriteriaReport> {
    let step = step_metrics(traj, cfg.settling_band)?;
    let integral = integral_metrics(traj)?;
    let margins = loop_margins(cfg, sc.dt)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("settling_band".into(), json!(cfg.settling_band));
    metadata.insert("integral_gain".into(), json!(cfg.integral_gain));
    metadata.insert("horizon_s".into(), json!(sc.horizon));
    metadata.insert("dt_s".into(), json!(sc.dt));
    metadata.insert("seed".into(), json!(sc.seed));
    metadata.insert("samples".into(), json!(traj.len()));
    metadata.insert("truncated".into(), json!(traj.truncated));
    match &cfg.controller {
        Controller::Lqi(g) => {
            metadata.insert("k_lqr".into(), json!(g.k_lqr));
            metadata.insert("k_i".into(), json!(g.k_i));
            let cont = margins_analytic(&loop_at_plant_input(&cfg.plant, g)?)?;
            metadata.insert("continuous_margins".into(), serde_json::to_value(cont)?);
        }
        Controller::LinearGain(k) => {
            metadata.insert("k_ddpg".into(), json!(k));
        }
        Controller::Actor(_) => {}
    }
    Ok(CriteriaReport {
        controller: cfg.controller.kind().into(),
        scenario: sc.name.clone(),
        step,
        integral,
        margins,
        metadata,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Better {
    Lower,
    Higher,
}

pub const CRITERIA: [(&str, Better); 12] = [
    ("C1_tr", Better::Lower),
    ("C2_Mp", Better::Lower),
    ("C3_Mu", Better::Lower),
    ("C4_ts", Better::Lower),
    ("C5_ess", Better::Lower),
    ("C6_ISE", Better::Lower),
    ("C7_ITAE", Better::Lower),
    ("C8_IACE", Better::Lower),
    ("C9_IACER", Better::Lower),
    ("C10_ucmax", Better::Lower),
    ("C11_GM_dB", Better::Higher),
    ("C12_DM_s", Better::Higher),
];

/// Value used for ranking; `None` cannot be ranked.
fn rank_value(report: &CriteriaReport, idx: usize) -> Option<f64> {
    let not_attained = |v: Option<f64>| Some(v.unwrap_or(f64::INFINITY));
    match idx {
        0 => not_attained(report.step.rise_time),
        1 => Some(report.step.overshoot_pct),
        2 => Some(report.step.undershoot_pct),
        3 => not_attained(report.step.settling_time),
        4 => Some(report.step.steady_state_error.abs()),
        5 => Some(report.integral.ise),
        6 => Some(report.integral.itae),
        7 => Some(report.integral.iace),
        8 => Some(report.integral.iacer),
        9 => Some(report.integral.u_max),
        10 => report.margins.gm_db.rank_value(),
        11 => report.margins.dm_s.rank_value(),
        _ => None,
    }
    .filter(|v| !v.is_nan())
}

fn display_value(report: &CriteriaReport, idx: usize) -> Value {
    let v = serde_json::to_value(report).expect("reports always serialize");
    v["criteria"][CRITERIA[idx].0].clone()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub criterion: String,
    pub better: Better,
    pub values: Vec<Value>,
    /// Index of the strict winner; `None` on ties or unrankable values.
    pub best: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: String,
    pub controllers: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

pub fn compare(reports: &[CriteriaReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::InvalidArgument("comparison needs at least two reports".into()));
    }
    let scenario = &reports[0].scenario;
    if let Some(r) = reports.iter().find(|r| &r.scenario != scenario) {
        return Err(Error::ScenarioMismatch(format!(
            "reports cover scenarios `{scenario}` and `{}`",
            r.scenario
        )));
    }
    let rows = CRITERIA
        .iter()
        .enumerate()
        .map(|(idx, &(name, better))| {
            let ranks: Vec<Option<f64>> = reports.iter().map(|r| rank_value(r, idx)).collect();
            let best = if ranks.iter().all(Option::is_some) {
                let vals: Vec<f64> = ranks.iter().map(|v| v.expect("checked")).collect();
                let target = match better {
                    Better::Lower => vals.iter().copied().fold(f64::INFINITY, f64::min),
                    Better::Higher => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                };
                let winners: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] == target).collect();
                (winners.len() == 1).then(|| winners[0])
            } else {
                None
            };
            ComparisonRow {
                criterion: name.into(),
                better,
                values: reports.iter().map(|r| display_value(r, idx)).collect(),
                best,
            }
        })
        .collect();
    Ok(Comparison {
        scenario: scenario.clone(),
        controllers: reports.iter().map(|r| r.controller.clone()).collect(),
        rows,
    })
}

fn render_value(v: &Value) -> String {
    match v {
        Value::Null => "n/a".into(),
        Value::Number(n) => format!("{:.4}", n.as_f64().unwrap_or(f64::NAN)),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl Comparison {
    /// Fixed-width text table; `*` marks the strict winner of each row.
    pub fn render_text(&self) -> String {
        let width = 16;
        let mut out = String::new();
        let _ = write!(out, "scenario: {}\n{:<12}{:<8}", self.scenario, "criterion", "better");
        for c in &self.controllers {
            let _ = write!(out, "{c:>width$}");
        }
        out.push('\n');
        for row in &self.rows {
            let better = match row.better {
                Better::Lower => "lower",
                Better::Higher => "higher",
            };
            let _ = write!(out, "{:<12}{:<8}", row.criterion, better);
            for (i, v) in row.values.iter().enumerate() {
                let mark = if row.best == Some(i) { "*" } else { " " };
                let cell = format!("{}{}", render_value(v), mark);
                let _ = write!(out, "{cell:>width$}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trajectory CSV with columns `t,r,y_true,y_measured,u,x1,x2,eI`.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t,r,y_true,y_measured,u,x1,x2,eI\n");
    for k in 0..traj.len() {
        let x = &traj.x[k];
        let (x1, x2) = (
            x.first().copied().unwrap_or(f64::NAN),
            x.get(1).copied().unwrap_or(f64::NAN),
        );
        let _ = writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            traj.t[k], traj.r[k], traj.y[k], traj.y_measured[k], traj.u[k], x1, x2, traj.e_i[k]
        );
    }
    out
}

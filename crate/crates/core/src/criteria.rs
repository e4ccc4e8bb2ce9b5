//! Twelve-criterion scorecard: step metrics (C1–C5), integral indices
//! (C6–C10) and stability margins (C11–C12).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use nalgebra::Complex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::ltisys::{freq_response, DiscreteStateSpace, StateSpace};

/// Sampled closed-loop record. `y` is the true output (disturbance included,
/// sensor noise excluded); `y_measured` is what the controller saw.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    pub y: Vec<f64>,
    pub y_measured: Vec<f64>,
    pub u: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub e_i: Vec<f64>,
    pub dt: f64,
    /// Set when the simulation stopped early on a non-finite state.
    pub truncated: bool,
}

impl Trajectory {
    /// Builds a trajectory on the grid `t_k = k dt` from output and control samples.
    pub fn from_signals(dt: f64, r: Vec<f64>, y: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        let n = y.len();
        let traj = Self {
            t: (0..n).map(|k| k as f64 * dt).collect(),
            r,
            y_measured: y.clone(),
            y,
            u,
            x: vec![Vec::new(); n],
            e_i: vec![0.0; n],
            dt,
            truncated: false,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs at least 2 samples, has {n}"
            )));
        }
        let lens = [
            self.r.len(),
            self.y.len(),
            self.y_measured.len(),
            self.u.len(),
            self.x.len(),
            self.e_i.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Dimension(format!(
                "trajectory sequences differ in length: {n} vs {lens:?}"
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument("trajectory dt must be positive".into()));
        }
        for w in self.t.windows(2) {
            if ((w[1] - w[0]) - self.dt).abs() > 1e-9 * self.dt.max(1.0) {
                return Err(Error::InvalidArgument("trajectory sampling is not uniform".into()));
            }
        }
        Ok(())
    }

    /// Tracking error `r - y` on the true output.
    pub fn error(&self) -> impl Iterator<Item = f64> + '_ {
        self.r.iter().zip(&self.y).map(|(r, y)| r - y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 0→100% rise time; `None` when the output never reaches the reference.
    pub rise_time: Option<f64>,
    pub overshoot_pct: f64,
    pub undershoot_pct: f64,
    /// `None` when the output is still outside the band at the last sample.
    pub settling_time: Option<f64>,
    pub steady_state_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegralMetrics {
    pub ise: f64,
    pub itae: f64,
    pub iace: f64,
    pub iacer: f64,
    pub u_max: f64,
}

/// A margin value with the non-numeric outcomes of the analytic and search methods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginValue {
    Finite(f64),
    /// No phase crossover exists.
    Infinite,
    /// No gain crossover exists.
    Undefined,
    /// The search bracket ran out before instability.
    ExceedsBracket,
}

impl MarginValue {
    pub fn finite(&self) -> Option<f64> {
        match self {
            MarginValue::Finite(v) => Some(*v),
            _ => None,
        }
    }

    /// Ordering key for comparisons; larger means more margin.
    pub fn rank_value(&self) -> Option<f64> {
        match self {
            MarginValue::Finite(v) => Some(*v),
            MarginValue::Infinite | MarginValue::ExceedsBracket => Some(f64::INFINITY),
            MarginValue::Undefined => None,
        }
    }
}

impl fmt::Display for MarginValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MarginValue::Finite(v) => write!(f, "{v:.4}"),
            MarginValue::Infinite => f.write_str("inf"),
            MarginValue::Undefined => f.write_str("undefined"),
            MarginValue::ExceedsBracket => f.write_str("exceeds-bracket"),
        }
    }
}

impl Serialize for MarginValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MarginValue::Finite(v) => s.serialize_f64(*v),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for MarginValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(MarginValue::Finite(v)),
            Raw::Tag(t) => match t.as_str() {
                "inf" => Ok(MarginValue::Infinite),
                "undefined" => Ok(MarginValue::Undefined),
                "exceeds-bracket" => Ok(MarginValue::ExceedsBracket),
                other => Err(serde::de::Error::custom(format!("unknown margin marker `{other}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginMethod {
    Analytic,
    Simulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub gm_db: MarginValue,
    pub dm_s: MarginValue,
    pub method: MarginMethod,
    pub omega_pc: Option<f64>,
    pub omega_gc: Option<f64>,
    pub phase_margin_deg: Option<f64>,
}

/// One controller/scenario scorecard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ReportRepr", try_from = "ReportRepr")]
pub struct CriteriaReport {
    pub controller: String,
    pub scenario: String,
    pub step: StepMetrics,
    pub integral: IntegralMetrics,
    pub margins: MarginReport,
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct CriteriaRepr {
    C1_tr: Option<f64>,
    C2_Mp: f64,
    C3_Mu: f64,
    C4_ts: Option<f64>,
    C5_ess: f64,
    C6_ISE: f64,
    C7_ITAE: f64,
    C8_IACE: f64,
    C9_IACER: f64,
    C10_ucmax: f64,
    C11_GM_dB: MarginValue,
    C12_DM_s: MarginValue,
}

#[derive(Serialize, Deserialize)]
struct MarginDetail {
    method: MarginMethod,
    omega_pc: Option<f64>,
    omega_gc: Option<f64>,
    phase_margin_deg: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ReportRepr {
    controller: String,
    scenario: String,
    criteria: CriteriaRepr,
    metadata: BTreeMap<String, Value>,
}

const MARGIN_KEY: &str = "margins";

impl From<CriteriaReport> for ReportRepr {
    fn from(r: CriteriaReport) -> Self {
        let mut metadata = r.metadata;
        let detail = MarginDetail {
            method: r.margins.method,
            omega_pc: r.margins.omega_pc,
            omega_gc: r.margins.omega_gc,
            phase_margin_deg: r.margins.phase_margin_deg,
        };
        metadata.insert(MARGIN_KEY.into(), serde_json::to_value(detail).expect("plain struct"));
        ReportRepr {
            controller: r.controller,
            scenario: r.scenario,
            criteria: CriteriaRepr {
                C1_tr: r.step.rise_time,
                C2_Mp: r.step.overshoot_pct,
                C3_Mu: r.step.undershoot_pct,
                C4_ts: r.step.settling_time,
                C5_ess: r.step.steady_state_error,
                C6_ISE: r.integral.ise,
                C7_ITAE: r.integral.itae,
                C8_IACE: r.integral.iace,
                C9_IACER: r.integral.iacer,
                C10_ucmax: r.integral.u_max,
                C11_GM_dB: r.margins.gm_db,
                C12_DM_s: r.margins.dm_s,
            },
            metadata,
        }
    }
}

impl TryFrom<ReportRepr> for CriteriaReport {
    type Error = String;

    fn try_from(r: ReportRepr) -> std::result::Result<Self, String> {
        let mut metadata = r.metadata;
        let detail: MarginDetail = match metadata.remove(MARGIN_KEY) {
            Some(v) => serde_json::from_value(v).map_err(|e| format!("metadata.margins: {e}"))?,
            None => MarginDetail {
                method: MarginMethod::Analytic,
                omega_pc: None,
                omega_gc: None,
                phase_margin_deg: None,
            },
        };
        let c = r.criteria;
        Ok(CriteriaReport {
            controller: r.controller,
            scenario: r.scenario,
            step: StepMetrics {
                rise_time: c.C1_tr,
                overshoot_pct: c.C2_Mp,
                undershoot_pct: c.C3_Mu,
                settling_time: c.C4_ts,
                steady_state_error: c.C5_ess,
            },
            integral: IntegralMetrics {
                ise: c.C6_ISE,
                itae: c.C7_ITAE,
                iace: c.C8_IACE,
                iacer: c.C9_IACER,
                u_max: c.C10_ucmax,
            },
            margins: MarginReport {
                gm_db: c.C11_GM_dB,
                dm_s: c.C12_DM_s,
                method: detail.method,
                omega_pc: detail.omega_pc,
                omega_gc: detail.omega_gc,
                phase_margin_deg: detail.phase_margin_deg,
            },
            metadata,
        })
    }
}

/// C1–C5 for a step reference. `band` is the settling band as a fraction of
/// the step amplitude.
pub fn step_metrics(traj: &Trajectory, band: f64) -> Result<StepMetrics> {
    traj.validate()?;
    if !(band > 0.0 && band <= 0.2) {
        return Err(Error::InvalidArgument(format!(
            "settling band must lie in (0, 0.2], got {band}"
        )));
    }
    let n = traj.len();
    let r_final = traj.r[n - 1];
    if r_final == 0.0 {
        return Err(Error::UndefinedMetric(
            "step amplitude is zero; percentages are undefined".into(),
        ));
    }
    let onset = traj.r.iter().rposition(|&r| r != r_final).map_or(0, |k| k + 1);
    let t0 = traj.t[onset];
    let sign = r_final.signum();
    let amp = r_final.abs();
    let after = onset..n;

    let rise_time = after
        .clone()
        .find(|&k| (traj.y[k] - r_final) * sign >= 0.0)
        .map(|k| traj.t[k] - t0);
    let peak = after
        .clone()
        .map(|k| (traj.y[k] - r_final) * sign)
        .fold(f64::MIN, f64::max);
    let dip = after.clone().map(|k| -traj.y[k] * sign).fold(f64::MIN, f64::max);
    let last_out = after.clone().rev().find(|&k| (traj.y[k] - r_final).abs() > band * amp);
    let settling_time = match last_out {
        None => Some(0.0),
        Some(k) if k + 1 < n => Some(traj.t[k + 1] - t0),
        Some(_) => None,
    };

    Ok(StepMetrics {
        rise_time,
        overshoot_pct: peak.max(0.0) / amp * 100.0,
        undershoot_pct: dip.max(0.0) / amp * 100.0,
        settling_time,
        steady_state_error: r_final - traj.y[n - 1],
    })
}

/// C6–C10. Integrals use the trapezoidal rule; IACER is the total variation
/// of the control sequence.
pub fn integral_metrics(traj: &Trajectory) -> Result<IntegralMetrics> {
    traj.validate()?;
    let dt = traj.dt;
    let t0 = traj.t[0];
    let e: Vec<f64> = traj.error().collect();
    let trapz = |f: &dyn Fn(usize) -> f64| -> f64 { (1..traj.len()).map(|k| 0.5 * (f(k - 1) + f(k)) * dt).sum() };
    Ok(IntegralMetrics {
        ise: trapz(&|k| e[k] * e[k]),
        itae: trapz(&|k| (traj.t[k] - t0) * e[k].abs()),
        iace: trapz(&|k| traj.u[k].abs()),
        iacer: traj.u.windows(2).map(|w| (w[1] - w[0]).abs()).sum(),
        u_max: traj.u.iter().fold(0.0, |m, u| m.max(u.abs())),
    })
}

const SWEEP_POINTS_PER_DECADE: usize = 400;

/// Margins of a continuous loop transfer (negative-feedback convention).
pub fn margins_analytic(loop_tf: &StateSpace) -> Result<MarginReport> {
    margins_from_response(|w| freq_response(loop_tf, w), 1e-4, 1e4, false)
}

/// Margins of a sampled loop transfer evaluated on the unit circle up to the
/// Nyquist frequency.
pub fn margins_analytic_sampled(loop_tf: &DiscreteStateSpace) -> Result<MarginReport> {
    let nyquist = PI / loop_tf.dt();
    margins_from_response(|w| loop_tf.freq_response(w), 1e-4, nyquist, true)
}

fn wrap_pi(a: f64) -> f64 {
    let mut v = (a + PI).rem_euclid(2.0 * PI) - PI;
    if v <= -PI {
        v += 2.0 * PI;
    }
    v
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn margins_from_response(
    eval: impl Fn(f64) -> Result<Complex<f64>>,
    w_lo: f64,
    w_hi: f64,
    real_at_upper_end: bool,
) -> Result<MarginReport> {
    let decades = (w_hi / w_lo).log10();
    let count = (decades * SWEEP_POINTS_PER_DECADE as f64).ceil() as usize + 1;
    // Grid points that land on a pole are nudged.
    let sample = |w: f64| -> Option<Complex<f64>> {
        match eval(w) {
            Ok(v) => Some(v),
            Err(Error::PoleHit { .. }) => eval(w * (1.0 + 1e-9)).ok(),
            Err(_) => None,
        }
    };
    let smooth = |w: f64| sample(w).unwrap_or(Complex::new(f64::NAN, f64::NAN));

    let mut grid: Vec<(f64, Complex<f64>)> = Vec::with_capacity(count);
    for i in 0..count {
        let w = if i + 1 == count {
            w_hi
        } else {
            w_lo * 10f64.powf(decades * i as f64 / (count - 1) as f64)
        };
        if let Some(v) = sample(w) {
            if v.re.is_finite() && v.im.is_finite() {
                grid.push((w, v));
            }
        }
    }
    if grid.len() < 2 {
        return Err(Error::InvalidArgument(
            "loop frequency response could not be evaluated".into(),
        ));
    }

    let mut phase_crossings: Vec<(f64, f64)> = Vec::new(); // (omega, |L|)
    let mut gain_crossings: Vec<(f64, f64)> = Vec::new(); // (omega, phase margin rad)
    for pair in grid.windows(2) {
        let (w0, l0) = pair[0];
        let (w1, l1) = pair[1];
        if l0.im == 0.0 && l0.re < 0.0 {
            phase_crossings.push((w0, l0.norm()));
        } else if l0.im * l1.im < 0.0 {
            let w = bisect(w0, w1, |w| smooth(w).im);
            let l = smooth(w);
            if l.re < 0.0 {
                phase_crossings.push((w, l.norm()));
            }
        }
        let (g0, g1) = (l0.norm() - 1.0, l1.norm() - 1.0);
        if g0 == 0.0 {
            gain_crossings.push((w0, wrap_pi(PI + l0.arg())));
        } else if g0 * g1 < 0.0 {
            let w = bisect(w0, w1, |w| smooth(w).norm() - 1.0);
            gain_crossings.push((w, wrap_pi(PI + smooth(w).arg())));
        }
    }
    let (w_end, l_end) = *grid.last().expect("non-empty grid");
    if real_at_upper_end
        && l_end.re < 0.0
        && l_end.im.abs() <= 1e-9 * l_end.norm()
        && !phase_crossings.iter().any(|&(w, _)| (w - w_end).abs() <= 1e-9 * w_end)
    {
        phase_crossings.push((w_end, l_end.norm()));
    }
    if (l_end.norm() - 1.0) == 0.0 {
        gain_crossings.push((w_end, wrap_pi(PI + l_end.arg())));
    }

    // Smallest positive gain margin; otherwise the crossing closest to 0 dB.
    let gm = phase_crossings
        .iter()
        .map(|&(w, mag)| (w, -20.0 * mag.log10()))
        .fold(None::<(f64, f64)>, |best, cand| match best {
            None => Some(cand),
            Some(b) => {
                let better = match (cand.1 > 0.0, b.1 > 0.0) {
                    (true, false) => true,
                    (false, true) => false,
                    (true, true) => cand.1 < b.1,
                    (false, false) => cand.1.abs() < b.1.abs(),
                };
                Some(if better { cand } else { b })
            }
        });
    let dm =
        gain_crossings
            .iter()
            .map(|&(w, pm)| (w, pm, pm.max(0.0) / w))
            .fold(None::<(f64, f64, f64)>, |best, cand| match best {
                Some(b) if b.2 <= cand.2 => Some(b),
                _ => Some(cand),
            });

    Ok(MarginReport {
        gm_db: gm.map_or(MarginValue::Infinite, |g| MarginValue::Finite(g.1)),
        dm_s: dm.map_or(MarginValue::Undefined, |d| MarginValue::Finite(d.2)),
        method: MarginMethod::Analytic,
        omega_pc: gm.map(|g| g.0),
        omega_gc: dm.map(|d| d.0),
        phase_margin_deg: dm.map(|d| d.1.to_degrees()),
    })
}

/// Gain-multiplier and delay brackets for the search-based margins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginSearch {
    pub gain_max: f64,
    pub delay_max_s: f64,
    /// Relative bracket width at which the gain bisection stops.
    pub rel_tol: f64,
}

impl Default for MarginSearch {
    fn default() -> Self {
        Self {
            gain_max: 1e3,
            delay_max_s: 10.0,
            rel_tol: 0.01,
        }
    }
}

/// Search-based margins for any controller. `simulate(gain, delay_steps)`
/// must run the closed loop with the plant input multiplied by `gain` and
/// delayed by `delay_steps` samples of `dt`.
pub fn margins_simulated(
    simulate: impl Fn(f64, usize) -> Result<Trajectory>,
    dt: f64,
    search: MarginSearch,
) -> Result<MarginReport> {
    let stable = |gain: f64, delay: usize| -> Result<bool> { Ok(stability_probe(&simulate(gain, delay)?)) };
    if !stable(1.0, 0)? {
        return Err(Error::UnstableLoop(
            "nominal closed loop fails the stability probe".into(),
        ));
    }

    let gm_db = if stable(search.gain_max, 0)? {
        MarginValue::ExceedsBracket
    } else {
        let (mut lo, mut hi) = (1.0f64, search.gain_max);
        while hi / lo - 1.0 > search.rel_tol {
            let mid = (lo * hi).sqrt();
            if stable(mid, 0)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        MarginValue::Finite(20.0 * (lo * hi).sqrt().log10())
    };

    let max_steps = (search.delay_max_s / dt).round() as usize;
    let dm_s = if stable(1.0, max_steps)? {
        MarginValue::ExceedsBracket
    } else {
        // Largest stable whole-sample delay.
        let (mut lo, mut hi) = (0usize, max_steps);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if stable(1.0, mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        MarginValue::Finite(lo as f64 * dt)
    };

    Ok(MarginReport {
        gm_db,
        dm_s,
        method: MarginMethod::Simulated,
        omega_pc: None,
        omega_gc: None,
        phase_margin_deg: None,
    })
}

const DIVERGENCE_LIMIT: f64 = 1e3;
const ENVELOPE_GROWTH: f64 = 1.5;
const ENVELOPE_FLOOR: f64 = 1e-6;

/// Instability detector: divergence past 1e3 in `y` or `u`, or a tracking
/// error envelope that grows by more than 1.5x from the third to the last
/// quarter of the run. Constant-amplitude oscillation counts as stable.
pub fn stability_probe(traj: &Trajectory) -> bool {
    if traj.truncated {
        return false;
    }
    let diverged = traj
        .y
        .iter()
        .chain(&traj.u)
        .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT);
    if diverged {
        return false;
    }
    let n = traj.len();
    if n < 8 {
        return true;
    }
    let envelope =
        |range: std::ops::Range<usize>| -> f64 { range.map(|k| (traj.y[k] - traj.r[k]).abs()).fold(0.0, f64::max) };
    let third = envelope(n / 2..3 * n / 4);
    let last = envelope(3 * n / 4..n);
    last <= ENVELOPE_GROWTH * third + ENVELOPE_FLOOR
}

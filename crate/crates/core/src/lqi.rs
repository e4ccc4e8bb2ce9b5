//! Linear quadratic integral (LQI) baseline: error-integral augmentation,
//! Riccati-based gain synthesis and the state-feedback-plus-integral law.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltisys::{DiscreteStateSpace, StateSpace};

/// Plant augmented with the tracking-error integrator `de_I/dt = r - y`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub br: DMatrix<f64>,
    /// Plant output selector over the augmented state, `[C_p 0]`.
    pub c: DMatrix<f64>,
}

impl AugmentedSystem {
    pub fn order(&self) -> usize {
        self.a.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: f64,
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: f64) -> Result<Self> {
        if !q.is_square() {
            return Err(Error::Dimension("Q must be square".into()));
        }
        if (&q - q.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidArgument("Q must be symmetric".into()));
        }
        if !(r > 0.0) {
            return Err(Error::InvalidArgument(format!("R must be positive, got {r}")));
        }
        Ok(Self { q, r })
    }

    /// `Q = diag(0, 0, 10)`, `R = 1`.
    pub fn benchmark() -> Self {
        Self {
            q: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.0, 0.0, 10.0])),
            r: 1.0,
        }
    }
}

/// `u = -K_LQR x_p + k_I e_I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqiGains {
    pub k_lqr: Vec<f64>,
    pub k_i: f64,
}

impl LqiGains {
    /// Full gain over the augmented state so that `u = -K [x_p; e_I]`.
    pub fn full_gain(&self) -> Vec<f64> {
        let mut k = self.k_lqr.clone();
        k.push(-self.k_i);
        k
    }
}

#[derive(Debug, Clone)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub closed_loop_eigenvalues: Vec<Complex<f64>>,
    pub stabilizing: bool,
}

#[derive(Debug, Clone)]
pub struct LqiDesign {
    pub gains: LqiGains,
    pub care: CareSolution,
}

pub fn augment(plant: &StateSpace) -> Result<AugmentedSystem> {
    if !plant.is_siso() {
        return Err(Error::Dimension(format!(
            "LQI augmentation needs a SISO plant, got {} inputs and {} outputs",
            plant.inputs(),
            plant.outputs()
        )));
    }
    if plant.d()[(0, 0)] != 0.0 {
        return Err(Error::InvalidArgument("LQI augmentation needs D = 0".into()));
    }
    let n = plant.order();
    let mut a = DMatrix::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(plant.a());
    a.view_mut((n, 0), (1, n)).copy_from(&(-plant.c()));
    let mut b = DMatrix::zeros(n + 1, 1);
    b.view_mut((0, 0), (n, 1)).copy_from(plant.b());
    let mut br = DMatrix::zeros(n + 1, 1);
    br[(n, 0)] = 1.0;
    let mut c = DMatrix::zeros(1, n + 1);
    c.view_mut((0, 0), (1, n)).copy_from(plant.c());
    Ok(AugmentedSystem { a, b, br, c })
}

pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    a.complex_eigenvalues().iter().copied().collect()
}

pub fn is_hurwitz(a: &DMatrix<f64>, margin: f64) -> bool {
    eigenvalues(a).iter().all(|l| l.re < -margin)
}

/// Solves `A^T X + X A + Q = 0` through the Kronecker-product linear system.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() || q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimension(
            "Lyapunov solve needs square A and Q of equal size".into(),
        ));
    }
    if !is_hurwitz(a, 0.0) {
        return Err(Error::NotHurwitz(format!("eigenvalues {:?}", eigenvalues(a))));
    }
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    // Column-major vec: vec(A^T X) = (I ⊗ A^T) vec X, vec(X A) = (A^T ⊗ I) vec X.
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -DMatrix::from_column_slice(n * n, 1, q.as_slice());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NotHurwitz("singular Kronecker operator".into()))?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

pub fn care_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let rinv = r
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(1, 1, f64::NAN));
    let res = a.transpose() * p + p * a + q - p * b * rinv * b.transpose() * p;
    res.amax()
}

/// Ackermann pole placement for a single-input pair; returns `K` with
/// `eig(A - B K)` at the requested real poles.
pub fn place_siso(a: &DMatrix<f64>, b: &DMatrix<f64>, poles: &[f64]) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if b.ncols() != 1 || poles.len() != n {
        return Err(Error::Dimension(
            "pole placement needs a single input and n poles".into(),
        ));
    }
    let mut ctrb = DMatrix::zeros(n, n);
    let mut col = b.clone();
    for j in 0..n {
        ctrb.set_column(j, &col.column(0));
        col = a * col;
    }
    let inv = ctrb
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("pair is not controllable".into()))?;
    // Desired characteristic polynomial evaluated at A.
    let mut phi = DMatrix::identity(n, n);
    for &p in poles {
        phi = &phi * (a - DMatrix::identity(n, n) * p);
    }
    let k = inv.row(n - 1) * phi;
    Ok(DMatrix::from_row_slice(1, n, k.as_slice()))
}

const CARE_MAX_ITER: usize = 100;

/// Stabilizing CARE solution by Newton–Kleinman iteration.
pub fn solve_care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<CareSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Dimension("CARE operand shapes are inconsistent".into()));
    }
    let rinv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("R is singular".into()))?;

    // Nothing is penalized: the minimal solution P = 0 gives zero gain.
    if q.amax() == 0.0 {
        let eigs = eigenvalues(a);
        return Ok(CareSolution {
            p: DMatrix::zeros(n, n),
            k: DMatrix::zeros(m, n),
            residual: 0.0,
            iterations: 0,
            stabilizing: eigs.iter().all(|l| l.re < -1e-9),
            closed_loop_eigenvalues: eigs,
        });
    }

    let mut k = if is_hurwitz(a, 0.0) {
        DMatrix::zeros(m, n)
    } else if m == 1 {
        let poles: Vec<f64> = (1..=n).map(|i| -(i as f64)).collect();
        place_siso(a, b, &poles).map_err(|_| Error::Riccati {
            iterations: 0,
            residual: f64::NAN,
            reason: "pair is not stabilizable by pole placement".into(),
        })?
    } else {
        return Err(Error::Riccati {
            iterations: 0,
            residual: f64::NAN,
            reason: "no stabilizing initial gain for a multi-input unstable pair".into(),
        });
    };
    if !is_hurwitz(&(a - b * &k), 0.0) {
        return Err(Error::Riccati {
            iterations: 0,
            residual: f64::NAN,
            reason: "initial gain does not stabilize the pair".into(),
        });
    }

    let mut p = DMatrix::zeros(n, n);
    let mut iterations = 0;
    for it in 1..=CARE_MAX_ITER {
        iterations = it;
        let acl = a - b * &k;
        let rhs = q + k.transpose() * r * &k;
        let next = solve_lyapunov(&acl, &rhs).map_err(|e| Error::Riccati {
            iterations: it,
            residual: care_residual(a, b, q, r, &p),
            reason: format!("policy evaluation failed: {e}"),
        })?;
        let step = (&next - &p).amax();
        p = next;
        k = &rinv * b.transpose() * &p;
        if step <= 1e-14 * p.amax().max(1.0) {
            break;
        }
    }

    let residual = care_residual(a, b, q, r, &p);
    let eigs = eigenvalues(&(a - b * &k));
    let stabilizing = eigs.iter().all(|l| l.re < -1e-9);
    if !residual.is_finite() || residual >= 1e-8 || !stabilizing {
        return Err(Error::Riccati {
            iterations,
            residual,
            reason: if stabilizing {
                "residual above 1e-8".into()
            } else {
                "closed loop is not stabilized".into()
            },
        });
    }
    Ok(CareSolution {
        p,
        k,
        residual,
        iterations,
        closed_loop_eigenvalues: eigs,
        stabilizing,
    })
}

pub fn lqi_design(plant: &StateSpace, weights: &CostWeights) -> Result<LqiDesign> {
    let aug = augment(plant)?;
    if weights.q.shape() != (aug.order(), aug.order()) {
        return Err(Error::Dimension(format!(
            "Q is {}x{}, augmented system has {} states",
            weights.q.nrows(),
            weights.q.ncols(),
            aug.order()
        )));
    }
    let r = DMatrix::from_element(1, 1, weights.r);
    let care = solve_care(&aug.a, &aug.b, &weights.q, &r)?;
    let n = plant.order();
    let gains = LqiGains {
        k_lqr: (0..n).map(|j| care.k[(0, j)]).collect(),
        k_i: -care.k[(0, n)],
    };
    Ok(LqiDesign { gains, care })
}

pub fn lqi_control(gains: &LqiGains, x_p: &[f64], e_i: f64) -> f64 {
    debug_assert_eq!(gains.k_lqr.len(), x_p.len());
    let fb: f64 = gains.k_lqr.iter().zip(x_p).map(|(k, x)| k * x).sum();
    -fb + gains.k_i * e_i
}

/// Continuous loop transfer broken at the plant input: `K (sI - A_aug)^-1 B_aug`.
pub fn loop_at_plant_input(plant: &StateSpace, gains: &LqiGains) -> Result<StateSpace> {
    let aug = augment(plant)?;
    let k = DMatrix::from_row_slice(1, aug.order(), &gains.full_gain());
    StateSpace::new(aug.a, aug.b, k, DMatrix::zeros(1, 1))
}

/// Sampled loop broken at the plant input, mirroring the harness ordering:
/// the integrator is updated with the current sample before the control is
/// computed, and the plant input is held over `dt`.
pub fn sampled_loop_at_plant_input(
    plant: &DiscreteStateSpace,
    gains: &LqiGains,
    integral_gain: f64,
) -> Result<DiscreteStateSpace> {
    let n = plant.order();
    if gains.k_lqr.len() != n {
        return Err(Error::Dimension("gain length does not match plant order".into()));
    }
    let dt = plant.dt();
    let c = plant.cd();
    let mut ad = DMatrix::zeros(n + 1, n + 1);
    ad.view_mut((0, 0), (n, n)).copy_from(plant.ad());
    for j in 0..n {
        ad[(n, j)] = -integral_gain * dt * c[(0, j)];
    }
    ad[(n, n)] = 1.0;
    let mut bd = DMatrix::zeros(n + 1, 1);
    bd.view_mut((0, 0), (n, 1)).copy_from(plant.bd());
    let mut cl = DMatrix::zeros(1, n + 1);
    for j in 0..n {
        cl[(0, j)] = gains.k_lqr[j] + gains.k_i * dt * c[(0, j)];
    }
    cl[(0, n)] = -gains.k_i / integral_gain;
    DiscreteStateSpace::new(ad, bd, cl, DMatrix::zeros(1, 1), dt)
}

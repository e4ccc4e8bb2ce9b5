//! Continuous-time LTI models, zero-order-hold discretization, time stepping
//! and frequency response.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Rational transfer function with coefficients in descending powers of `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction {
    num: Vec<f64>,
    den: Vec<f64>,
}

impl TransferFunction {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        if den.is_empty() {
            return Err(Error::ImproperTransferFunction("empty denominator".into()));
        }
        if den[0] == 0.0 {
            return Err(Error::ImproperTransferFunction(
                "leading denominator coefficient is zero".into(),
            ));
        }
        if den.iter().chain(num.iter()).any(|c| !c.is_finite()) {
            return Err(Error::ImproperTransferFunction("non-finite coefficient".into()));
        }
        // Leading zeros in the numerator do not raise its degree.
        let first = num.iter().position(|&c| c != 0.0).unwrap_or(num.len());
        let num: Vec<f64> = if first == num.len() {
            vec![0.0]
        } else {
            num[first..].to_vec()
        };
        if num.len() > den.len() {
            return Err(Error::ImproperTransferFunction(format!(
                "numerator degree {} exceeds denominator degree {}",
                num.len() - 1,
                den.len() - 1
            )));
        }
        Ok(Self { num, den })
    }

    pub fn numerator(&self) -> &[f64] {
        &self.num
    }

    pub fn denominator(&self) -> &[f64] {
        &self.den
    }

    pub fn order(&self) -> usize {
        self.den.len() - 1
    }

    /// Evaluates num(s)/den(s) directly.
    pub fn eval(&self, s: Complex<f64>) -> Complex<f64> {
        horner(&self.num, s) / horner(&self.den, s)
    }
}

fn horner(coeffs: &[f64], s: Complex<f64>) -> Complex<f64> {
    coeffs.iter().fold(Complex::new(0.0, 0.0), |acc, &c| acc * s + c)
}

/// Continuous state-space model `dx/dt = Ax + Bu`, `y = Cx + Du`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
}

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!("A is {}x{}, expected square", n, a.ncols())));
    }
    if b.nrows() != n {
        return Err(Error::Dimension(format!("B has {} rows, expected {n}", b.nrows())));
    }
    if c.ncols() != n {
        return Err(Error::Dimension(format!("C has {} columns, expected {n}", c.ncols())));
    }
    if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
        return Err(Error::Dimension(format!(
            "D is {}x{}, expected {}x{}",
            d.nrows(),
            d.ncols(),
            c.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

impl StateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        check_dims(&a, &b, &c, &d)?;
        Ok(Self { a, b, c, d })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }
    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }
    pub fn is_siso(&self) -> bool {
        self.inputs() == 1 && self.outputs() == 1
    }
}

/// ZOH-discretized model `x[k+1] = Ad x[k] + Bd u[k]`, `y[k] = Cd x[k] + Dd u[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStateSpace {
    ad: DMatrix<f64>,
    bd: DMatrix<f64>,
    cd: DMatrix<f64>,
    dd: DMatrix<f64>,
    dt: f64,
}

impl DiscreteStateSpace {
    pub fn new(ad: DMatrix<f64>, bd: DMatrix<f64>, cd: DMatrix<f64>, dd: DMatrix<f64>, dt: f64) -> Result<Self> {
        check_dims(&ad, &bd, &cd, &dd)?;
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sampling period must be positive, got {dt}"
            )));
        }
        Ok(Self { ad, bd, cd, dd, dt })
    }

    pub fn ad(&self) -> &DMatrix<f64> {
        &self.ad
    }
    pub fn bd(&self) -> &DMatrix<f64> {
        &self.bd
    }
    pub fn cd(&self) -> &DMatrix<f64> {
        &self.cd
    }
    pub fn dd(&self) -> &DMatrix<f64> {
        &self.dd
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn order(&self) -> usize {
        self.ad.nrows()
    }

    /// `Cd (zI - Ad)^-1 Bd + Dd` at `z = exp(j omega dt)` for a SISO model.
    pub fn freq_response(&self, omega: f64) -> Result<Complex<f64>> {
        let z = Complex::from_polar(1.0, omega * self.dt);
        siso_resolvent(&self.ad, &self.bd, &self.cd, &self.dd, z, omega)
    }
}

/// Controllable canonical realization of a proper SISO transfer function.
pub fn tf_to_ss(tf: &TransferFunction) -> Result<StateSpace> {
    let n = tf.order();
    let lead = tf.den[0];
    let den: Vec<f64> = tf.den.iter().map(|c| c / lead).collect();
    // Pad the numerator to n + 1 coefficients.
    let mut num = vec![0.0; n + 1 - tf.num.len()];
    num.extend(tf.num.iter().map(|c| c / lead));

    let feedthrough = num[0];
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        a[(i, i + 1)] = 1.0;
    }
    let mut c = DMatrix::zeros(1, n);
    for j in 0..n {
        // den[n - j] multiplies s^j
        if n > 0 {
            a[(n - 1, j)] = -den[n - j];
        }
        c[(0, j)] = num[n - j] - den[n - j] * feedthrough;
    }
    let mut b = DMatrix::zeros(n, 1);
    if n > 0 {
        b[(n - 1, 0)] = 1.0;
    }
    StateSpace::new(a, b, c, DMatrix::from_element(1, 1, feedthrough))
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm1 = (0..n)
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm1 > 0.5 {
        (norm1 / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = m / 2f64.powi(squarings);

    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..64 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.amax() < 1e-16 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Exact ZOH discretization via the exponential of `[[A, B], [0, 0]] dt`.
pub fn discretize_zoh(ss: &StateSpace, dt: f64) -> Result<DiscreteStateSpace> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sampling period must be positive, got {dt}"
        )));
    }
    let n = ss.order();
    let m = ss.inputs();
    let mut block = DMatrix::zeros(n + m, n + m);
    block.view_mut((0, 0), (n, n)).copy_from(&ss.a);
    block.view_mut((0, n), (n, m)).copy_from(&ss.b);
    let phi = expm(&(block * dt));
    DiscreteStateSpace::new(
        phi.view((0, 0), (n, n)).into_owned(),
        phi.view((0, n), (n, m)).into_owned(),
        ss.c.clone(),
        ss.d.clone(),
        dt,
    )
}

/// One sample: returns `(Ad x + Bd u, Cd x + Dd u)`, the output taken at the pre-step state.
pub fn lti_step(dss: &DiscreteStateSpace, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if x.len() != dss.order() {
        return Err(Error::Dimension(format!(
            "state has {} entries, expected {}",
            x.len(),
            dss.order()
        )));
    }
    if u.len() != dss.bd.ncols() {
        return Err(Error::Dimension(format!(
            "input has {} entries, expected {}",
            u.len(),
            dss.bd.ncols()
        )));
    }
    let y = &dss.cd * x + &dss.dd * u;
    let next = &dss.ad * x + &dss.bd * u;
    Ok((next, y))
}

/// `C (j omega I - A)^-1 B + D` for a SISO model.
pub fn freq_response(ss: &StateSpace, omega: f64) -> Result<Complex<f64>> {
    siso_resolvent(&ss.a, &ss.b, &ss.c, &ss.d, Complex::new(0.0, omega), omega)
}

fn siso_resolvent(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    s: Complex<f64>,
    omega: f64,
) -> Result<Complex<f64>> {
    if b.ncols() != 1 || c.nrows() != 1 {
        return Err(Error::Dimension("frequency response requires a SISO model".into()));
    }
    let n = a.nrows();
    let d0 = Complex::new(d[(0, 0)], 0.0);
    if n == 0 {
        return Ok(d0);
    }
    let mut m: DMatrix<Complex<f64>> = a.map(|v| Complex::new(-v, 0.0));
    for i in 0..n {
        m[(i, i)] += s;
    }
    let rhs: DVector<Complex<f64>> = b.column(0).map(|v| Complex::new(v, 0.0));
    let scale = m.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1.0);
    let lu = m.lu();
    let min_pivot = (0..n).map(|i| lu.u()[(i, i)].norm()).fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-13 * scale {
        return Err(Error::PoleHit { omega });
    }
    let x = lu.solve(&rhs).ok_or(Error::PoleHit { omega })?;
    let cx: Complex<f64> = (0..n).map(|i| x[i] * c[(0, i)]).sum();
    Ok(cx + d0)
}

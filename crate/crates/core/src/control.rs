//! Small dense control primitives: Riccati and Lyapunov solvers, LQR gain
//! synthesis, stage and steady-state costs, and stability checks.

use crate::mat::{frob_sq, is_finite, symmetrize, Mat, Vector};

pub const DARE_TOL: f64 = 1e-10;
pub const DARE_MAX_ITER: usize = 10_000;
pub const DLYAP_TOL: f64 = 1e-10;
pub const DLYAP_MAX_ITER: usize = 200;

/// Closed loops at or beyond this radius are treated as unstable.
const STABILITY_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("riccati recursion did not converge (residual {residual:.3e} after {iterations} iterations)")]
    NonConvergence { residual: f64, iterations: usize },
    #[error("matrix R + BᵀPB is numerically singular")]
    SingularMatrix,
    #[error("closed loop is not stable (spectral radius {0:.12})")]
    Unstable(f64),
    #[error("invalid cost weights: {0}")]
    InvalidWeights(String),
}

/// Quadratic cost weights `Q ⪰ 0`, `R ≻ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    q: Mat,
    r: Mat,
}

impl CostWeights {
    pub fn new(q: Mat, r: Mat) -> Result<Self, ControlError> {
        if !q.is_square() || !r.is_square() {
            return Err(ControlError::InvalidWeights("Q and R must be square".into()));
        }
        let sym_tol = 1e-12;
        if (&q - q.transpose()).amax() > sym_tol || (&r - r.transpose()).amax() > sym_tol {
            return Err(ControlError::InvalidWeights("Q and R must be symmetric".into()));
        }
        if q.nrows() > 0 && q.clone().symmetric_eigenvalues().min() < -1e-12 {
            return Err(ControlError::InvalidWeights("Q must be positive semidefinite".into()));
        }
        if r.clone().cholesky().is_none() {
            return Err(ControlError::InvalidWeights("R must be positive definite".into()));
        }
        Ok(Self { q, r })
    }

    /// `Q = I_dx`, `R = I_du`.
    pub fn identity(dx: usize, du: usize) -> Self {
        Self { q: Mat::identity(dx, dx), r: Mat::identity(du, du) }
    }

    pub fn q(&self) -> &Mat {
        &self.q
    }

    pub fn r(&self) -> &Mat {
        &self.r
    }

    pub fn state_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.r.nrows()
    }
}

fn check_plant(a: &Mat, b: &Mat, weights: &CostWeights) -> Result<(), ControlError> {
    let dx = a.nrows();
    if !a.is_square() {
        return Err(ControlError::DimensionMismatch(format!("A is {}x{}", a.nrows(), a.ncols())));
    }
    if b.nrows() != dx {
        return Err(ControlError::DimensionMismatch(format!("B has {} rows, A has {dx}", b.nrows())));
    }
    if weights.state_dim() != dx || weights.input_dim() != b.ncols() {
        return Err(ControlError::DimensionMismatch(format!(
            "weights are {}x{} / {}x{}, plant has dx={dx}, du={}",
            weights.q.nrows(),
            weights.q.ncols(),
            weights.r.nrows(),
            weights.r.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

fn riccati_step(a: &Mat, b: &Mat, weights: &CostWeights, p: &Mat) -> Option<Mat> {
    let at_p = a.transpose() * p;
    let bt_p = b.transpose() * p;
    let s = &weights.r + &bt_p * b;
    let bt_p_a = &bt_p * a;
    let correction = s.cholesky()?.solve(&bt_p_a);
    let next = &weights.q + &at_p * a - (at_p * b) * correction;
    Some(symmetrize(&next))
}

/// Solve `P = Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA` by fixed-point Riccati
/// recursion started at `P₀ = Q`.
///
/// Unstabilizable pairs show up as a recursion that never settles and are
/// reported as [`ControlError::NonConvergence`].
pub fn solve_dare(
    a: &Mat,
    b: &Mat,
    weights: &CostWeights,
    tol: f64,
    max_iter: usize,
) -> Result<Mat, ControlError> {
    check_plant(a, b, weights)?;
    let mut p = weights.q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let Some(next) = riccati_step(a, b, weights, &p) else {
            return Err(ControlError::NonConvergence { residual, iterations: max_iter });
        };
        if !is_finite(&next) {
            break;
        }
        residual = frob_sq(&(&next - &p)).sqrt();
        p = next;
        if residual <= tol {
            return Ok(p);
        }
    }
    Err(ControlError::NonConvergence { residual, iterations: max_iter })
}

/// Fixed-point residual `‖P − Ric(P)‖_F`.
pub fn dare_residual(a: &Mat, b: &Mat, weights: &CostWeights, p: &Mat) -> f64 {
    match riccati_step(a, b, weights, p) {
        Some(next) => frob_sq(&(p - next)).sqrt(),
        None => f64::INFINITY,
    }
}

/// LQR gain `K = −(R + BᵀPB)⁻¹BᵀPA`, shape `du × dx`.
pub fn gain(a: &Mat, b: &Mat, p: &Mat, r: &Mat) -> Result<Mat, ControlError> {
    if b.nrows() != a.nrows() || p.nrows() != a.nrows() || r.nrows() != b.ncols() {
        return Err(ControlError::DimensionMismatch("gain inputs have inconsistent shapes".into()));
    }
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let chol = s.cholesky().ok_or(ControlError::SingularMatrix)?;
    let k = -chol.solve(&(bt_p * a));
    if !is_finite(&k) {
        return Err(ControlError::SingularMatrix);
    }
    Ok(k)
}

/// DARE followed by [`gain`]: the certainty-equivalent controller for `(A, B)`.
pub fn lqr_gain(a: &Mat, b: &Mat, weights: &CostWeights) -> Result<Mat, ControlError> {
    let p = solve_dare(a, b, weights, DARE_TOL, DARE_MAX_ITER)?;
    gain(a, b, &p, &weights.r)
}

/// Solve `P = AclᵀP·Acl + W` with the doubling (Smith) iteration.
pub fn solve_dlyap(acl: &Mat, w: &Mat, tol: f64, max_iter: usize) -> Result<Mat, ControlError> {
    if !acl.is_square() || w.shape() != acl.shape() {
        return Err(ControlError::DimensionMismatch("dlyap needs square Acl and W of equal size".into()));
    }
    let radius = spectral_radius(acl);
    if radius >= 1.0 - STABILITY_MARGIN {
        return Err(ControlError::Unstable(radius));
    }
    let mut p = w.clone();
    let mut power = acl.clone();
    for iteration in 0..max_iter {
        p = symmetrize(&(&p + power.transpose() * &p * &power));
        power = &power * &power;
        let residual = dlyap_residual(acl, w, &p);
        if residual <= tol || power.amax() == 0.0 {
            return Ok(p);
        }
        if !is_finite(&p) {
            return Err(ControlError::NonConvergence { residual, iterations: iteration + 1 });
        }
    }
    let residual = dlyap_residual(acl, w, &p);
    Err(ControlError::NonConvergence { residual, iterations: max_iter })
}

/// `‖P − AclᵀP·Acl − W‖_F`.
pub fn dlyap_residual(acl: &Mat, w: &Mat, p: &Mat) -> f64 {
    frob_sq(&(p - acl.transpose() * p * acl - w)).sqrt()
}

/// Steady-state expected stage cost of `u = Kx` under `w ~ N(0, σ_w² I)`:
/// `σ_w² · tr(dlyap(A + BK, Q + KᵀRK))`.
pub fn avg_cost(
    a: &Mat,
    b: &Mat,
    k: &Mat,
    weights: &CostWeights,
    sigma_w: f64,
) -> Result<f64, ControlError> {
    check_plant(a, b, weights)?;
    if k.nrows() != b.ncols() || k.ncols() != a.nrows() {
        return Err(ControlError::DimensionMismatch(format!("K is {}x{}", k.nrows(), k.ncols())));
    }
    let acl = a + b * k;
    let w = &weights.q + k.transpose() * &weights.r * k;
    let p = solve_dlyap(&acl, &w, DLYAP_TOL, DLYAP_MAX_ITER)?;
    Ok(sigma_w * sigma_w * p.trace())
}

/// `xᵀQx + uᵀRu`.
pub fn stage_cost(x: &Vector, u: &Vector, weights: &CostWeights) -> Result<f64, ControlError> {
    if x.len() != weights.state_dim() || u.len() != weights.input_dim() {
        return Err(ControlError::DimensionMismatch(format!(
            "x has {} entries, u has {}; weights expect {} and {}",
            x.len(),
            u.len(),
            weights.state_dim(),
            weights.input_dim()
        )));
    }
    Ok(quad_form(&weights.q, x) + quad_form(&weights.r, u))
}

pub(crate) fn quad_form(m: &Mat, v: &Vector) -> f64 {
    let mut acc = 0.0;
    for i in 0..v.len() {
        let mut row = 0.0;
        for j in 0..v.len() {
            row += m[(i, j)] * v[j];
        }
        acc += v[i] * row;
    }
    acc
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &Mat) -> f64 {
    assert!(a.is_square(), "spectral radius needs a square matrix");
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn is_stable(a: &Mat) -> bool {
    spectral_radius(a) < 1.0 - STABILITY_MARGIN
}

//! Ellipsoidal uncertainty sets `{ξ : (ξ−μ)ᵀ Σ⁻¹ (ξ−μ) ≤ 1}` with
//! `Σ = r·L·Lᵀ`, `L` lower triangular with positive diagonal.
//!
//! The support function pairs with this membership rule as
//! `sup_{ξ∈U} ξᵀv = μᵀv + sqrt(vᵀ Σ v)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, SetPredictorGrad, SetPredictorOutput};

/// Slack on the membership test so boundary points count as covered.
pub const BOUNDARY_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    mu: DVector<f64>,
    l: DMatrix<f64>,
    r: f64,
}

/// Serialized form: `{mu: [...], L_rows: [[...], ...], r: ...}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EllipsoidJson {
    pub mu: Vec<f64>,
    #[serde(rename = "L_rows")]
    pub l_rows: Vec<Vec<f64>>,
    pub r: f64,
}

/// Gradient of a scalar with respect to `(μ, L, r)`; only the lower
/// triangle of `l` is meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidGrad {
    pub mu: DVector<f64>,
    pub l: DMatrix<f64>,
    pub r: f64,
}

impl EllipsoidGrad {
    pub fn zeros(m: usize) -> Self {
        Self {
            mu: DVector::zeros(m),
            l: DMatrix::zeros(m, m),
            r: 0.0,
        }
    }

    /// Pulls the gradient back to the raw network outputs (log-diagonal,
    /// log-scale).
    pub fn to_raw(&self, set: &Ellipsoid) -> SetPredictorGrad {
        let m = set.dim();
        let mut g = SetPredictorGrad::zeros(m);
        g.mu.copy_from_slice(self.mu.as_slice());
        let mut k = 0;
        for i in 0..m {
            for j in 0..=i {
                g.l_raw[k] = if i == j {
                    self.l[(i, i)] * set.l[(i, i)]
                } else {
                    self.l[(i, j)]
                };
                k += 1;
            }
        }
        g.r_raw = self.r * set.r;
        g
    }
}

impl Ellipsoid {
    /// Validates the invariants: square lower-triangular `L` with strictly
    /// positive diagonal, `r ≥ 0`. `r = 0` is the degenerate singleton
    /// `{μ}`.
    pub fn new(mu: DVector<f64>, l: DMatrix<f64>, r: f64) -> Result<Self> {
        let m = mu.len();
        if l.nrows() != m || l.ncols() != m {
            return Err(Error::input(format!(
                "shape factor is {}x{} but the center has dimension {m}",
                l.nrows(),
                l.ncols()
            )));
        }
        if mu.iter().chain(l.iter()).any(|v| !v.is_finite()) || !r.is_finite() {
            return Err(Error::numeric("ellipsoid parameters must be finite"));
        }
        for i in 0..m {
            if l[(i, i)] <= 0.0 {
                return Err(Error::numeric(format!("shape factor diagonal entry {i} is not positive")));
            }
            for j in i + 1..m {
                if l[(i, j)] != 0.0 {
                    return Err(Error::input("shape factor must be lower triangular"));
                }
            }
        }
        if r < 0.0 {
            return Err(Error::numeric("ellipsoid scale must be nonnegative"));
        }
        Ok(Self { mu, l, r })
    }

    /// Builds a set from a symmetric positive definite shape matrix.
    pub fn from_shape(mu: DVector<f64>, sigma: &DMatrix<f64>, r: f64) -> Result<Self> {
        let chol = nalgebra::Cholesky::new(sigma.clone())
            .ok_or_else(|| Error::numeric("shape matrix is not positive definite"))?;
        Self::new(mu, chol.l(), r)
    }

    pub fn unit_ball(m: usize) -> Self {
        Self {
            mu: DVector::zeros(m),
            l: DMatrix::identity(m, m),
            r: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    /// `Σ = r·L·Lᵀ`.
    pub fn sigma(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose() * self.r
    }

    /// Same set with a new scale.
    pub fn with_scale(&self, r: f64) -> Result<Self> {
        Self::new(self.mu.clone(), self.l.clone(), r)
    }

    fn whiten(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        if xi.len() != self.dim() {
            return Err(Error::input(format!(
                "point has dimension {} but the set has dimension {}",
                xi.len(),
                self.dim()
            )));
        }
        let diff = xi - &self.mu;
        self.l
            .solve_lower_triangular(&diff)
            .ok_or_else(|| Error::numeric("shape factor is singular"))
    }

    /// `(ξ−μ)ᵀ Σ⁻¹ (ξ−μ)` via a triangular solve, without forming `Σ⁻¹`.
    pub fn mahalanobis_sq(&self, xi: &DVector<f64>) -> Result<f64> {
        let z = self.whiten(xi)?;
        let q = z.norm_squared();
        if self.r == 0.0 {
            return Ok(if q == 0.0 { 0.0 } else { f64::INFINITY });
        }
        Ok(q / self.r)
    }

    pub fn contains(&self, xi: &DVector<f64>) -> Result<bool> {
        Ok(self.mahalanobis_sq(xi)? <= 1.0 + BOUNDARY_SLACK)
    }

    /// `sigmoid(β·(1 − d²))`, a differentiable stand-in for membership.
    pub fn smooth_membership(&self, xi: &DVector<f64>, beta: f64) -> Result<f64> {
        if !(beta > 0.0) {
            return Err(Error::input("membership sharpness must be positive"));
        }
        Ok(sigmoid(beta * (1.0 - self.mahalanobis_sq(xi)?)))
    }

    /// Smoothed membership and its gradient with respect to `(μ, L, r)`.
    pub fn smooth_membership_grad(&self, xi: &DVector<f64>, beta: f64) -> Result<(f64, EllipsoidGrad)> {
        if self.r <= 0.0 {
            return Err(Error::numeric("membership gradient needs a positive scale"));
        }
        let z = self.whiten(xi)?;
        let d2 = z.norm_squared() / self.r;
        let y = sigmoid(beta * (1.0 - d2));
        // dy/dd² = −β y (1 − y)
        let dy_dd2 = -beta * y * (1.0 - y);
        let w = self
            .l
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::numeric("shape factor is singular"))?;
        let mut g = EllipsoidGrad::zeros(self.dim());
        g.mu = &w * (-2.0 / self.r * dy_dd2);
        let gl = &w * z.transpose() * (-2.0 / self.r * dy_dd2);
        for i in 0..self.dim() {
            for j in 0..=i {
                g.l[(i, j)] = gl[(i, j)];
            }
        }
        g.r = -d2 / self.r * dy_dd2;
        Ok((y, g))
    }

    /// `(sup_{ξ∈U} ξᵀv, argmax)`. The maximizer is the center when `v = 0`.
    pub fn support_function(&self, v: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        if v.len() != self.dim() {
            return Err(Error::input("direction dimension does not match the set"));
        }
        let sv = self.sigma() * v;
        let q = v.dot(&sv).max(0.0);
        let s = q.sqrt();
        let value = self.mu.dot(v) + s;
        if s == 0.0 {
            return Ok((value, self.mu.clone()));
        }
        Ok((value, &self.mu + sv / s))
    }

    /// `μ + sqrt(r)·L·u` for a unit vector `u` lands on the boundary.
    pub fn boundary_point(&self, u: &DVector<f64>) -> DVector<f64> {
        let n = u.norm();
        &self.mu + &self.l * (u / n) * self.r.sqrt()
    }

    pub fn to_json(&self) -> EllipsoidJson {
        EllipsoidJson {
            mu: self.mu.iter().copied().collect(),
            l_rows: (0..self.dim())
                .map(|i| (0..self.dim()).map(|j| self.l[(i, j)]).collect())
                .collect(),
            r: self.r,
        }
    }

    pub fn from_json(j: &EllipsoidJson) -> Result<Self> {
        let m = j.mu.len();
        if j.l_rows.len() != m || j.l_rows.iter().any(|r| r.len() != m) {
            return Err(Error::input("L_rows must be a square matrix matching mu"));
        }
        let l = DMatrix::from_fn(m, m, |i, k| j.l_rows[i][k]);
        Self::new(DVector::from_vec(j.mu.clone()), l, j.r)
    }
}

/// Decodes the raw network outputs: the diagonal of `L` and the scale go
/// through `exp`, off-diagonal entries are copied.
pub fn build_ellipsoid(out: &SetPredictorOutput) -> Result<Ellipsoid> {
    let m = out.mu.len();
    if out.l_raw.len() != m * (m + 1) / 2 {
        return Err(Error::input(format!(
            "expected {} Cholesky entries for dimension {m}, got {}",
            m * (m + 1) / 2,
            out.l_raw.len()
        )));
    }
    if out.mu.iter().chain(&out.l_raw).any(|v| !v.is_finite()) || !out.r_raw.is_finite() {
        return Err(Error::numeric("raw set parameters must be finite"));
    }
    let mut l = DMatrix::zeros(m, m);
    let mut k = 0;
    for i in 0..m {
        for j in 0..=i {
            l[(i, j)] = if i == j { out.l_raw[k].exp() } else { out.l_raw[k] };
            k += 1;
        }
    }
    Ellipsoid::new(DVector::from_vec(out.mu.clone()), l, out.r_raw.exp())
}

/// Pulls a gradient with respect to `Σ` (symmetric) back to `(L, r)` for
/// `Σ = r·L·Lᵀ`.
pub fn sigma_grad_to_factor(g_sigma: &DMatrix<f64>, set: &Ellipsoid) -> (DMatrix<f64>, f64) {
    let sym = g_sigma + g_sigma.transpose();
    let full = &sym * &set.l * set.r;
    let m = set.dim();
    let mut gl = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            gl[(i, j)] = full[(i, j)];
        }
    }
    let llt = &set.l * set.l.transpose();
    let gr = g_sigma.component_mul(&llt).sum();
    (gl, gr)
}

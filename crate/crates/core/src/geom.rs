//! SE(3) / SO(3) Lie-group arithmetic.
//!
//! Tangent vectors are ordered `(rho, phi)`: translational part first,
//! rotational part second. Perturbations are applied on the left,
//! `T <- exp(delta) * T`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, SymmetricEigen, Vector3, Vector6};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;

/// Below this rotation angle the closed forms switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Rotation angles within this distance of pi use the eigenvector branch of log.
pub const NEAR_PI: f64 = 1e-6;

const ORTHO_TOL: f64 = 1e-9;

/// Proper rotation stored as an orthonormal 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Validates `R Rᵀ = I` and `det R = +1` to within 1e-9.
    pub fn new(m: Mat3) -> Result<Self> {
        let ortho = (m * m.transpose() - Mat3::identity()).abs().max();
        let det = m.determinant();
        if !ortho.is_finite() || ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidArgument(format!(
                "not a rotation matrix (orthogonality error {ortho:.3e}, det {det:.12})"
            )));
        }
        Ok(Rotation(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn exp(phi: &Vec3) -> Self {
        exp_so3(phi)
    }

    pub fn log(&self) -> Vec3 {
        log_so3(self)
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let v = vee(&(self.0 - self.0.transpose())) * 0.5;
        let c = 0.5 * (self.0.trace() - 1.0);
        v.norm().atan2(c)
    }

    pub fn about_z(angle: f64) -> Self {
        exp_so3(&Vec3::new(0.0, 0.0, angle))
    }

    /// Builds a rotation from a (not necessarily normalized) quaternion `x y z w`.
    pub fn from_quaternion(x: f64, y: f64, z: f64, w: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z + w * w).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "quaternion ({x}, {y}, {z}, {w}) cannot be normalized"
            )));
        }
        let (x, y, z, w) = (x / n, y / n, z / n, w / n);
        Ok(Rotation(Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        )))
    }

    /// Unit quaternion `[x, y, z, w]` with `w >= 0` (ties broken so the first
    /// nonzero vector component is positive).
    pub fn to_quaternion(&self) -> [f64; 4] {
        let m = &self.0;
        let tr = m.trace();
        let (x, y, z, w);
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        let n = (x * x + y * y + z * z + w * w).sqrt();
        let mut q = [x / n, y / n, z / n, w / n];
        let flip = if q[3] != 0.0 {
            q[3] < 0.0
        } else {
            q[..3].iter().find(|c| **c != 0.0).is_some_and(|c| *c < 0.0)
        };
        if flip {
            q.iter_mut().for_each(|c| *c = -*c);
        }
        q
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Rigid-body transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Transform {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Transform {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Transform::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Transform::new(Rotation::identity(), t)
    }

    pub fn compose(&self, rhs: &Transform) -> Transform {
        Transform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation.0 * rhs.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Transform {
        let rt = self.rotation.inverse();
        Transform {
            rotation: rt,
            translation: -(rt.0 * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.0 * p + self.translation
    }

    pub fn exp(xi: &Twist) -> Transform {
        exp_se3(xi)
    }

    pub fn log(&self) -> Twist {
        log_se3(self)
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.0);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Adjoint of the transform acting on `(rho, phi)` tangent vectors.
    pub fn adjoint(&self) -> Mat6 {
        let r = self.rotation.0;
        let mut adj = Mat6::zeros();
        adj.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        adj.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * r));
        adj.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        adj
    }

    /// Translation norm and rotation angle of `self⁻¹ ∘ other`.
    pub fn distance(&self, other: &Transform) -> (f64, f64) {
        let d = self.inverse().compose(other);
        (d.translation.norm(), d.rotation.angle())
    }
}

impl Mul for Transform {
    type Output = Transform;
    fn mul(self, rhs: Transform) -> Transform {
        self.compose(&rhs)
    }
}

impl Mul<&Transform> for &Transform {
    type Output = Transform;
    fn mul(self, rhs: &Transform) -> Transform {
        self.compose(rhs)
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.translation;
        let q = self.rotation.to_quaternion();
        write!(
            f,
            "t=[{:.4}, {:.4}, {:.4}] q=[{:.4}, {:.4}, {:.4}, {:.4}]",
            t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        )
    }
}

/// se(3) element: translational part `rho` and rotational part `phi`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub rho: Vec3,
    pub phi: Vec3,
}

impl Twist {
    pub fn new(rho: Vec3, phi: Vec3) -> Self {
        Twist { rho, phi }
    }

    pub fn zero() -> Self {
        Twist::default()
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Twist {
            rho: v.fixed_rows::<3>(0).into_owned(),
            phi: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        )
    }

    pub fn scale(&self, s: f64) -> Twist {
        Twist::new(self.rho * s, self.phi * s)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Symmetric positive-definite 6x6 covariance ordered `(rho, phi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance6(Mat6);

impl Covariance6 {
    pub fn new(m: Mat6) -> Result<Self> {
        let asym = (m - m.transpose()).abs().max();
        if !asym.is_finite() || asym > 1e-12 * m.abs().max().max(1.0) {
            return Err(Error::InvalidCovariance(format!(
                "matrix is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        if m.cholesky().is_none() {
            return Err(Error::InvalidCovariance(
                "matrix is not positive definite".into(),
            ));
        }
        Ok(Covariance6(m))
    }

    pub fn identity() -> Self {
        Covariance6(Mat6::identity())
    }

    /// Diagonal covariance from translational and rotational variances.
    pub fn diagonal(var_rho: Vec3, var_phi: Vec3) -> Result<Self> {
        let d = Vec6::new(
            var_rho.x, var_rho.y, var_rho.z, var_phi.x, var_phi.y, var_phi.z,
        );
        Covariance6::new(Mat6::from_diagonal(&d))
    }

    /// `diag(0.01 m² x3, (0.5 deg)² x3)`, used when a stream carries no covariance.
    pub fn default_pose() -> Self {
        let r = 0.5_f64.to_radians().powi(2);
        Covariance6(Mat6::from_diagonal(&Vec6::new(0.01, 0.01, 0.01, r, r, r)))
    }

    pub fn matrix(&self) -> &Mat6 {
        &self.0
    }

    pub fn diagonal_values(&self) -> Vec6 {
        self.0.diagonal()
    }

    pub fn sum(&self, other: &Covariance6) -> Covariance6 {
        Covariance6(self.0 + other.0)
    }

    pub fn scaled(&self, alpha: f64) -> Result<Covariance6> {
        Covariance6::new(self.0 * alpha)
    }
}

/// Skew-symmetric matrix with `hat(a) * b = a x b`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula.
pub fn exp_so3(phi: &Vec3) -> Rotation {
    let theta = phi.norm();
    let k = hat(phi);
    if theta < SMALL_ANGLE {
        return Rotation(Mat3::identity() + k + 0.5 * k * k);
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Rotation(Mat3::identity() + a * k + b * k * k)
}

/// Numeric quality of a logarithm evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogQuality {
    Regular,
    /// Angle within [`NEAR_PI`] of pi; the rotation axis came from an
    /// eigen-decomposition and its sign may be ambiguous.
    NearPi,
}

pub fn log_so3(r: &Rotation) -> Vec3 {
    log_so3_checked(r).0
}

/// Logarithm returning the representative with `|phi| <= pi`.
pub fn log_so3_checked(r: &Rotation) -> (Vec3, LogQuality) {
    let m = &r.0;
    let v = vee(&(m - m.transpose())) * 0.5;
    let s = v.norm();
    let c = 0.5 * (m.trace() - 1.0);
    let theta = s.atan2(c);

    if theta < SMALL_ANGLE {
        return (v * (1.0 + theta * theta / 6.0), LogQuality::Regular);
    }
    if std::f64::consts::PI - theta >= NEAR_PI {
        return (v * (theta / s), LogQuality::Regular);
    }

    // The symmetric part is cos(t) I + (1 - cos(t)) a aᵀ; its eigenvector with
    // the largest eigenvalue is the rotation axis.
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let idx = eig.eigenvalues.imax();
    let mut axis: Vec3 = eig.eigenvectors.column(idx).into_owned().normalize();
    let first = axis.iter().copied().find(|c| c.abs() > 1e-12).unwrap_or(1.0);
    if first < 0.0 {
        axis = -axis;
    }
    // Away from exactly pi the antisymmetric part still carries the sign.
    let proj = axis.dot(&v);
    if proj.abs() > 1e-12 && proj < 0.0 {
        axis = -axis;
    }
    (axis * theta, LogQuality::NearPi)
}

// Below this angle the Jacobian coefficients switch to their Taylor series;
// the closed forms lose digits to cancellation that grow like 1/theta^2.
const SERIES_ANGLE: f64 = 0.1;

fn poly(x: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// `J_l(phi)`: `exp(phi + d) ≈ exp(J_l d) exp(phi)`. Also the `V` matrix of SE(3) exp.
pub fn left_jacobian_so3(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = hat(phi);
    let (a, b) = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        (
            poly(t2, &[0.5, -1.0 / 24.0, 1.0 / 720.0, -1.0 / 40320.0, 1.0 / 3628800.0]),
            poly(t2, &[1.0 / 6.0, -1.0 / 120.0, 1.0 / 5040.0, -1.0 / 362880.0, 1.0 / 39916800.0]),
        )
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    Mat3::identity() + a * k + b * k * k
}

pub fn left_jacobian_so3_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = hat(phi);
    let c = if theta < SERIES_ANGLE {
        poly(
            theta * theta,
            &[1.0 / 12.0, 1.0 / 720.0, 1.0 / 30240.0, 1.0 / 1209600.0, 1.0 / 47900160.0],
        )
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / (theta * theta)
    };
    Mat3::identity() - 0.5 * k + c * k * k
}

/// Coupling block of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vec3, phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let p = hat(phi);
    let r = hat(rho);
    let (c1, c2, c3) = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        (
            poly(t2, &[1.0 / 6.0, -1.0 / 120.0, 1.0 / 5040.0, -1.0 / 362880.0, 1.0 / 39916800.0]),
            poly(t2, &[1.0 / 24.0, -1.0 / 720.0, 1.0 / 40320.0, -1.0 / 3628800.0, 1.0 / 479001600.0]),
            poly(t2, &[1.0 / 120.0, -1.0 / 2520.0, 1.0 / 120960.0, -1.0 / 9979200.0, 1.0 / 1245404160.0]),
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    0.5 * r + c1 * (pr + rp + prp) + c2 * (p * pr + rp * p - 3.0 * prp) + c3 * (prp * p + p * prp)
}

/// SE(3) left Jacobian in `(rho, phi)` ordering.
pub fn left_jacobian_se3(xi: &Twist) -> Mat6 {
    let j = left_jacobian_so3(&xi.phi);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&se3_q_block(&xi.rho, &xi.phi));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out
}

pub fn left_jacobian_se3_inv(xi: &Twist) -> Mat6 {
    let ji = left_jacobian_so3_inv(&xi.phi);
    let q = se3_q_block(&xi.rho, &xi.phi);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-ji * q * ji));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    out
}

pub fn exp_se3(xi: &Twist) -> Transform {
    let rotation = exp_so3(&xi.phi);
    let v = left_jacobian_so3(&xi.phi);
    Transform::new(rotation, v * xi.rho)
}

pub fn log_se3(t: &Transform) -> Twist {
    log_se3_checked(t).0
}

pub fn log_se3_checked(t: &Transform) -> (Twist, LogQuality) {
    let (phi, q) = log_so3_checked(&t.rotation);
    let rho = left_jacobian_so3_inv(&phi) * t.translation;
    (Twist::new(rho, phi), q)
}

/// Squared Mahalanobis norm `xiᵀ Σ⁻¹ xi` via a Cholesky solve.
pub fn mahalanobis_sq(xi: &Twist, sigma: &Covariance6) -> Result<f64> {
    let chol = sigma
        .0
        .cholesky()
        .ok_or_else(|| Error::InvalidCovariance("matrix is not positive definite".into()))?;
    let v = xi.to_vector();
    // L y = v  =>  |y|^2 = vᵀ Σ⁻¹ v
    let y = chol
        .l_dirty()
        .solve_lower_triangular(&v)
        .ok_or_else(|| Error::InvalidCovariance("singular Cholesky factor".into()))?;
    Ok(y.norm_squared())
}

/// Geodesic `A ∘ exp(beta · log(A⁻¹ ∘ B))`; endpoints are returned exactly.
pub fn geodesic_interp(a: &Transform, b: &Transform, beta: f64) -> Result<Transform> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!(
            "interpolation factor {beta} outside [0, 1]"
        )));
    }
    if beta == 0.0 {
        return Ok(*a);
    }
    if beta == 1.0 {
        return Ok(*b);
    }
    let delta = log_se3(&a.inverse().compose(b));
    Ok(a.compose(&exp_se3(&delta.scale(beta))))
}

/// Closed-form rigid (no scale) transform minimizing `Σ |T est_i - ref_i|²`.
pub fn umeyama_align(est: &[Vec3], reference: &[Vec3]) -> Result<Transform> {
    if est.len() != reference.len() {
        return Err(Error::InvalidArgument(format!(
            "point set sizes differ ({} vs {})",
            est.len(),
            reference.len()
        )));
    }
    let n = est.len();
    if n < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least 3 point pairs, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mu_e = est.iter().fold(Vec3::zeros(), |acc, p| acc + p) * inv_n;
    let mu_r = reference.iter().fold(Vec3::zeros(), |acc, p| acc + p) * inv_n;

    let mut cov = Mat3::zeros();
    let mut spread = Mat3::zeros();
    for (e, r) in est.iter().zip(reference) {
        let de = e - mu_e;
        cov += (r - mu_r) * de.transpose();
        spread += de * de.transpose();
    }

    let mut ev: Vec<f64> = SymmetricEigen::new(spread).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::DegenerateGeometry(
            "point set is collinear or coincident".into(),
        ));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd computes u");
    let v_t = svd.v_t.expect("svd computes v_t");
    let mut s = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        // flip the axis of the smallest singular value
        let k = svd.singular_values.imin();
        s[(k, k)] = -1.0;
    }
    let r = u * s * v_t;
    let rotation = Rotation::from_matrix_unchecked(r);
    Ok(Transform::new(rotation, mu_r - r * mu_e))
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn series_exp3(m: &Mat3, terms: usize) -> Mat3 {
        let mut out = Mat3::identity();
        let mut term = Mat3::identity();
        for k in 1..terms {
            term = term * m / k as f64;
            out += term;
        }
        out
    }

    fn series_exp4(m: &Matrix4<f64>, terms: usize) -> Matrix4<f64> {
        let mut out = Matrix4::identity();
        let mut term = Matrix4::identity();
        for k in 1..terms {
            term = term * m / k as f64;
            out += term;
        }
        out
    }

    #[test]
    fn hat_examples() {
        assert_eq!(hat(&Vec3::zeros()), Mat3::zeros());
        assert_eq!(
            hat(&Vec3::new(0.0, 0.0, 1.0)),
            Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn hat_matches_cross_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = random_vec3(&mut rng, 5.0);
            let b = random_vec3(&mut rng, 5.0);
            let h = hat(&a);
            assert_abs_diff_eq!(h * b, a.cross(&b), epsilon = 1e-12);
            assert_eq!(h, -h.transpose());
        }
    }

    #[test]
    fn exp_so3_examples() {
        assert_eq!(*exp_so3(&Vec3::zeros()).matrix(), Mat3::identity());
        let q = exp_so3(&Vec3::new(0.0, 0.0, FRAC_PI_2));
        let expect = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(*q.matrix(), expect, epsilon = 1e-15);
    }

    #[test]
    fn exp_so3_matches_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let phi = random_rotvec(&mut rng, 3.0);
            let oracle = series_exp3(&hat(&phi), 30);
            assert_abs_diff_eq!(*exp_so3(&phi).matrix(), oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn log_so3_examples() {
        assert_eq!(log_so3(&Rotation::identity()), Vec3::zeros());
        let q = exp_so3(&Vec3::new(0.0, 0.0, FRAC_PI_2));
        assert_abs_diff_eq!(log_so3(&q), Vec3::new(0.0, 0.0, FRAC_PI_2), epsilon = 1e-15);
    }

    #[test]
    fn log_so3_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let r = exp_so3(&random_rotvec(&mut rng, PI));
            let back = exp_so3(&log_so3(&r));
            assert_abs_diff_eq!(*back.matrix(), *r.matrix(), epsilon = 1e-9);
        }
    }

    #[test]
    fn log_so3_at_pi_is_flagged_and_canonical() {
        for axis in [Vec3::x(), -Vec3::y(), Vec3::new(-1.0, 2.0, 2.0).normalize()] {
            let r = exp_so3(&(axis * PI));
            let (phi, q) = log_so3_checked(&r);
            assert_eq!(q, LogQuality::NearPi);
            assert_abs_diff_eq!(phi.norm(), PI, epsilon = 1e-9);
            let first = phi.iter().find(|c| c.abs() > 1e-9).unwrap();
            assert!(*first > 0.0, "{phi:?}");
            assert_abs_diff_eq!(*exp_so3(&phi).matrix(), *r.matrix(), epsilon = 1e-9);
        }
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let axis = Vec3::new(0.3, -0.5, 0.8).normalize();
        for theta in [1e-9, 5e-7, 9.99e-7, 1.001e-6, 1e-5] {
            let phi = axis * theta;
            let r = exp_so3(&phi);
            assert_abs_diff_eq!(log_so3(&r), phi, epsilon = 1e-15);
            let oracle = series_exp3(&hat(&phi), 10);
            assert_abs_diff_eq!(*r.matrix(), oracle, epsilon = 1e-15);
        }
    }

    #[test]
    fn exp_se3_examples() {
        let id = exp_se3(&Twist::zero());
        assert_eq!(id, Transform::identity());
        let t = exp_se3(&Twist::new(Vec3::new(1.0, 2.0, 3.0), Vec3::zeros()));
        assert_eq!(*t.rotation.matrix(), Mat3::identity());
        assert_eq!(t.translation, Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn exp_se3_matches_homogeneous_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let xi = Twist::new(random_vec3(&mut rng, 3.0), random_rotvec(&mut rng, 3.0));
            let mut m = Matrix4::zeros();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&xi.phi));
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.rho);
            let oracle = series_exp4(&m, 40);
            assert_abs_diff_eq!(exp_se3(&xi).matrix(), oracle, epsilon = 1e-9);
        }
    }

    #[test]
    fn se3_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let xi = Twist::new(random_vec3(&mut rng, 10.0), random_rotvec(&mut rng, PI - 0.1));
            let back = log_se3(&exp_se3(&xi));
            assert!((back.to_vector() - xi.to_vector()).norm() < 1e-9);
        }
    }

    #[test]
    fn group_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let a = random_transform(&mut rng, 10.0);
            let b = random_transform(&mut rng, 10.0);
            let c = random_transform(&mut rng, 10.0);
            assert_eq!(a.compose(&Transform::identity()), a);
            let (dt, dr) = a.compose(&a.inverse()).distance(&Transform::identity());
            assert!(dt < 1e-9 && dr < 1e-9);
            let (dt, dr) = a.inverse().compose(&a).distance(&Transform::identity());
            assert!(dt < 1e-9 && dr < 1e-9);
            let left = (a * b) * c;
            let right = a * (b * c);
            assert_abs_diff_eq!(left.matrix(), right.matrix(), epsilon = 1e-9);
            assert!(Rotation::new(*left.rotation.matrix()).is_ok());
        }
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        for _ in 0..100 {
            let xi = Twist::new(random_vec3(&mut rng, 2.0), random_rotvec(&mut rng, 2.5));
            let base_inv = exp_se3(&xi).inverse();
            let jac = left_jacobian_se3(&xi);
            for k in 0..6 {
                let mut e = Vec6::zeros();
                e[k] = h;
                let plus = log_se3(&exp_se3(&Twist::from_vector(&(xi.to_vector() + e))).compose(&base_inv));
                let minus = log_se3(&exp_se3(&Twist::from_vector(&(xi.to_vector() - e))).compose(&base_inv));
                let fd = (plus.to_vector() - minus.to_vector()) / (2.0 * h);
                assert_abs_diff_eq!(fd, jac.column(k).into_owned(), epsilon = 1e-6);
            }
            let prod = jac * left_jacobian_se3_inv(&xi);
            assert_abs_diff_eq!(prod, Mat6::identity(), epsilon = 1e-9);
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let xi = Twist::new(Vec3::new(1.0, -2.0, 0.5), Vec3::new(0.1, 0.2, -0.3));
        let m = mahalanobis_sq(&xi, &Covariance6::identity()).unwrap();
        assert_abs_diff_eq!(m, xi.to_vector().norm_squared(), epsilon = 1e-14);
        assert_eq!(mahalanobis_sq(&Twist::zero(), &Covariance6::default_pose()).unwrap(), 0.0);
    }

    fn random_spd<R: Rng>(rng: &mut R) -> Mat6 {
        let a = Mat6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        a * a.transpose() + Mat6::identity() * 0.1
    }

    #[test]
    fn mahalanobis_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let s = random_spd(&mut rng);
            let v = Vec6::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let oracle = (v.transpose() * s.try_inverse().unwrap() * v)[(0, 0)];
            let got = mahalanobis_sq(&Twist::from_vector(&v), &Covariance6::new(s).unwrap()).unwrap();
            assert!((got - oracle).abs() <= 1e-9 * oracle.max(1.0));
        }
    }

    #[test]
    fn mahalanobis_congruence_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let s = random_spd(&mut rng);
            let v = Vec6::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let m = Mat6::from_fn(|_, _| rng.random_range(-1.0..1.0)) + Mat6::identity() * 2.0;
            let base = mahalanobis_sq(&Twist::from_vector(&v), &Covariance6::new(s).unwrap()).unwrap();
            let ms = m * s * m.transpose();
            let ms = (ms + ms.transpose()) * 0.5;
            let moved = mahalanobis_sq(&Twist::from_vector(&(m * v)), &Covariance6::new(ms).unwrap()).unwrap();
            assert!((base - moved).abs() <= 1e-8 * base.max(1.0), "{base} vs {moved}");
        }
    }

    #[test]
    fn rejects_non_spd_covariance() {
        let mut m = Mat6::identity();
        m[(2, 2)] = -1.0;
        assert!(matches!(Covariance6::new(m), Err(Error::InvalidCovariance(_))));
        let mut m = Mat6::identity();
        m[(0, 1)] = 0.5;
        assert!(matches!(Covariance6::new(m), Err(Error::InvalidCovariance(_))));
    }

    #[test]
    fn geodesic_interp_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let a = random_transform(&mut rng, 5.0);
            let b = random_transform(&mut rng, 5.0);
            assert_eq!(geodesic_interp(&a, &b, 0.0).unwrap(), a);
            assert_eq!(geodesic_interp(&a, &b, 1.0).unwrap(), b);
        }
        let a = Transform::identity();
        let b = Transform::new(Rotation::about_z(FRAC_PI_2), Vec3::zeros());
        let mid = geodesic_interp(&a, &b, 0.5).unwrap();
        assert_abs_diff_eq!(*mid.rotation.matrix(), *Rotation::about_z(FRAC_PI_4).matrix(), epsilon = 1e-12);
        assert!(geodesic_interp(&a, &b, 1.5).is_err());
        assert!(geodesic_interp(&a, &b, -0.1).is_err());
    }

    #[test]
    fn quaternion_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let r = exp_so3(&random_rotvec(&mut rng, PI));
            let q = r.to_quaternion();
            assert!(q[3] >= 0.0);
            let back = Rotation::from_quaternion(q[0], q[1], q[2], q[3]).unwrap();
            assert_abs_diff_eq!(*back.matrix(), *r.matrix(), epsilon = 1e-12);
        }
        let q = Rotation::about_z(FRAC_PI_2).to_quaternion();
        assert_abs_diff_eq!(q[2], FRAC_PI_4.sin(), epsilon = 1e-15);
    }

    #[test]
    fn umeyama_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<Vec3> = (0..20).map(|_| random_vec3(&mut rng, 5.0)).collect();
        let id = umeyama_align(&pts, &pts).unwrap();
        assert_abs_diff_eq!(id.matrix(), Matrix4::identity(), epsilon = 1e-12);

        for _ in 0..100 {
            let t = random_transform(&mut rng, 10.0);
            let moved: Vec<Vec3> = pts.iter().map(|p| t.transform_point(p)).collect();
            let got = umeyama_align(&pts, &moved).unwrap();
            assert_abs_diff_eq!(got.matrix(), t.matrix(), epsilon = 1e-9);
        }
    }

    #[test]
    fn umeyama_beats_random_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts: Vec<Vec3> = (0..30).map(|_| random_vec3(&mut rng, 5.0)).collect();
        let t = random_transform(&mut rng, 3.0);
        let noisy: Vec<Vec3> = pts
            .iter()
            .map(|p| t.transform_point(p) + random_vec3(&mut rng, 0.2))
            .collect();
        let cost = |x: &Transform| -> f64 {
            pts.iter()
                .zip(&noisy)
                .map(|(e, r)| (x.transform_point(e) - r).norm_squared())
                .sum()
        };
        let best = cost(&umeyama_align(&pts, &noisy).unwrap());
        for _ in 0..1000 {
            let perturb = Transform::new(exp_so3(&random_rotvec(&mut rng, 0.2)), random_vec3(&mut rng, 0.3));
            let candidate = perturb.compose(&t);
            assert!(best <= cost(&candidate) + 1e-12);
            assert!(best <= cost(&random_transform(&mut rng, 5.0)) + 1e-12);
        }
    }

    #[test]
    fn umeyama_rejects_degenerate_sets() {
        let two = vec![Vec3::zeros(), Vec3::x()];
        assert!(matches!(umeyama_align(&two, &two), Err(Error::DegenerateGeometry(_))));
        let line: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(umeyama_align(&line, &line), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn rotation_validation() {
        assert!(Rotation::new(Mat3::identity() * 2.0).is_err());
        assert!(Rotation::new(-Mat3::identity()).is_err());
        assert!(Rotation::new(*Rotation::about_z(0.3).matrix()).is_ok());
    }
}

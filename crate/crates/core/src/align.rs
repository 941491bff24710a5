//! Robust SE(3) alignment of one odometry frame onto another.
//!
//! Given timestamp-paired poses `(A_k, B_k)` of the same body expressed in
//! two world frames, finds `T` minimizing
//! `Σ_k ρ(|log(A_k (T B_k)⁻¹)|²_{Σ_k⁻¹})` with a Cauchy kernel `ρ`, by
//! iteratively reweighted Gauss-Newton on a left perturbation of `T`.

use std::path::Path;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::serde_sig;
use crate::geom::{
    exp_se3, left_jacobian_se3_inv, log_se3_checked, Covariance6, LogQuality, Mat6, Transform,
    Twist, Vec6,
};
use crate::pose::Pose;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosePair {
    pub timestamp: f64,
    /// Pose in the reference (LIO / output) frame.
    pub t_lio: Transform,
    /// Pose in the frame being aligned (VIO).
    pub t_vio: Transform,
    pub sigma: Covariance6,
}

/// Greedy nearest-timestamp association of two time-ordered sequences.
///
/// Candidate pairs within `tolerance` are accepted in order of increasing
/// `|Δt|` (ties by index) as long as neither side is used yet. The result is
/// sorted by the index into `a`.
pub fn match_timestamps(a: &[f64], b: &[f64], tolerance: f64) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let mut lo = 0;
    for (i, ta) in a.iter().enumerate() {
        while lo < b.len() && b[lo] < ta - tolerance {
            lo += 1;
        }
        let mut j = lo;
        while j < b.len() && b[j] <= ta + tolerance {
            let dt = (b[j] - ta).abs();
            if dt <= tolerance {
                candidates.push((dt, i, j));
            }
            j += 1;
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

/// Pairs LIO and VIO poses by timestamp; the pair covariance is the sum of
/// both pose covariances. Empty when the streams do not overlap.
pub fn pair_poses(lio: &[Pose], vio: &[Pose], tolerance: f64) -> Vec<PosePair> {
    let ta: Vec<f64> = lio.iter().map(|p| p.timestamp).collect();
    let tb: Vec<f64> = vio.iter().map(|p| p.timestamp).collect();
    match_timestamps(&ta, &tb, tolerance)
        .into_iter()
        .map(|(i, j)| PosePair {
            timestamp: lio[i].timestamp,
            t_lio: lio[i].transform,
            t_vio: vio[j].transform,
            sigma: lio[i].covariance.sum(&vio[j].covariance),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentWindow {
    pairs: Vec<PosePair>,
}

impl AlignmentWindow {
    pub fn new(pairs: Vec<PosePair>, k_min: usize) -> Result<Self> {
        if pairs.len() < k_min.max(1) {
            return Err(Error::InvalidArgument(format!(
                "alignment window needs at least {k_min} pairs, got {}",
                pairs.len()
            )));
        }
        if pairs.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
            return Err(Error::InvalidArgument(
                "alignment window timestamps must be strictly increasing".into(),
            ));
        }
        Ok(AlignmentWindow { pairs })
    }

    pub fn pairs(&self) -> &[PosePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Cauchy kernel on a squared residual `s`, scale `c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustKernel {
    pub c: f64,
}

impl Default for RobustKernel {
    fn default() -> Self {
        RobustKernel { c: 1.0 }
    }
}

impl RobustKernel {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidArgument(format!("Cauchy scale must be positive, got {c}")));
        }
        Ok(RobustKernel { c })
    }

    pub fn rho(&self, s: f64) -> f64 {
        cauchy_rho(s, self.c)
    }

    pub fn weight(&self, s: f64) -> f64 {
        cauchy_weight(s, self.c)
    }
}

/// `ρ(s) = c²/2 · ln(1 + s/c²)`.
pub fn cauchy_rho(s: f64, c: f64) -> f64 {
    let c2 = c * c;
    0.5 * c2 * (s / c2).ln_1p()
}

/// `ρ'(s) = 1 / (2 (1 + s/c²))`.
pub fn cauchy_weight(s: f64, c: f64) -> f64 {
    0.5 / (1.0 + s / (c * c))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignOptions {
    pub k_min: usize,
    pub max_iterations: usize,
    /// Stop once the update twist norm falls below this.
    pub tolerance: f64,
    /// Squared Mahalanobis residual at or below which a pair counts as an inlier.
    pub inlier_threshold: f64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            k_min: 10,
            max_iterations: 50,
            tolerance: 1e-8,
            // 99% quantile of chi-square with 6 degrees of freedom
            inlier_threshold: 16.812,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentResult {
    pub t_align: Transform,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub inlier_fraction: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Residual {
    pub twist: Twist,
    pub mahalanobis_sq: f64,
    pub quality: LogQuality,
}

/// Discrepancy twist `log(t_lio ∘ (T ∘ t_vio)⁻¹)` and its squared Mahalanobis norm.
pub fn residual(t: &Transform, pair: &PosePair) -> Result<Residual> {
    let d = pair.t_lio.compose(&t.compose(&pair.t_vio).inverse());
    let (twist, quality) = log_se3_checked(&d);
    let m = crate::geom::mahalanobis_sq(&twist, &pair.sigma)?;
    Ok(Residual {
        twist,
        mahalanobis_sq: m,
        quality,
    })
}

/// Jacobian of the residual twist with respect to `δ` in `T <- exp(δ) T`.
pub fn residual_jacobian(t: &Transform, pair: &PosePair) -> Mat6 {
    let d = pair.t_lio.compose(&t.compose(&pair.t_vio).inverse());
    let (r0, _) = log_se3_checked(&d);
    // log(D exp(-δ)) ≈ r0 - J_r(r0)⁻¹ δ, with J_r(ξ) = J_l(-ξ)
    -left_jacobian_se3_inv(&r0.scale(-1.0))
}

struct Prepared {
    info: Mat6,
}

fn prepare(window: &AlignmentWindow) -> Result<Vec<Prepared>> {
    window
        .pairs
        .iter()
        .map(|p| {
            let chol = p
                .sigma
                .matrix()
                .cholesky()
                .ok_or_else(|| Error::InvalidCovariance("pair covariance not positive definite".into()))?;
            Ok(Prepared {
                info: chol.inverse(),
            })
        })
        .collect()
}

/// Robust cost of `t` over the window; pairs whose discrepancy is at the
/// log singularity are skipped.
pub fn alignment_cost(t: &Transform, window: &AlignmentWindow, kernel: &RobustKernel) -> Result<f64> {
    let mut cost = 0.0;
    for p in &window.pairs {
        let r = residual(t, p)?;
        if r.quality == LogQuality::Regular {
            cost += kernel.rho(r.mahalanobis_sq);
        }
    }
    Ok(cost)
}

pub fn solve_alignment(
    window: &AlignmentWindow,
    kernel: &RobustKernel,
    opts: &AlignOptions,
) -> Result<AlignmentResult> {
    if window.len() < opts.k_min {
        return Err(Error::InvalidArgument(format!(
            "alignment window needs at least {} pairs, got {}",
            opts.k_min,
            window.len()
        )));
    }
    let prepared = prepare(window)?;
    let mid = &window.pairs[window.len() / 2];
    let mut t = mid.t_lio.compose(&mid.t_vio.inverse());
    let mut cost = alignment_cost(&t, window, kernel)?;
    let mut history = vec![cost];
    let mut lambda = 0.0_f64;
    let mut converged = false;
    let mut iterations = 0;
    let mut rank_deficient = false;

    'outer: while iterations < opts.max_iterations {
        iterations += 1;
        let mut h = Mat6::zeros();
        let mut g = Vec6::zeros();
        for (p, prep) in window.pairs.iter().zip(&prepared) {
            let r = residual(&t, p)?;
            if r.quality != LogQuality::Regular {
                continue;
            }
            let w = kernel.weight(r.mahalanobis_sq);
            let j = residual_jacobian(&t, p);
            let jt_info = j.transpose() * prep.info;
            h += w * jt_info * j;
            g += w * jt_info * r.twist.to_vector();
        }

        let scale = h.diagonal().max().max(1e-300);
        let eig = SymmetricEigen::new(h).eigenvalues;
        if eig.min() <= 1e-12 * scale && lambda == 0.0 {
            lambda = 1e-9 * scale;
        }

        // Levenberg loop: grow damping until the step does not increase cost.
        loop {
            let damped = h + Mat6::identity() * lambda;
            let Some(chol) = damped.cholesky() else {
                lambda = if lambda == 0.0 { 1e-9 * scale } else { lambda * 10.0 };
                if lambda > 1e12 * scale {
                    rank_deficient = true;
                    break 'outer;
                }
                continue;
            };
            let delta = -chol.solve(&g);
            let step_norm = delta.norm();
            let candidate = exp_se3(&Twist::from_vector(&delta)).compose(&t);
            let new_cost = alignment_cost(&candidate, window, kernel)?;
            if new_cost <= cost {
                t = candidate;
                cost = new_cost;
                history.push(cost);
                lambda = if lambda < 1e-9 * scale { 0.0 } else { lambda / 10.0 };
                if step_norm < opts.tolerance {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            if step_norm < opts.tolerance {
                converged = true;
                break 'outer;
            }
            lambda = if lambda == 0.0 { 1e-6 * scale } else { lambda * 10.0 };
            if lambda > 1e12 * scale {
                // no descent direction left at machine precision
                converged = true;
                break 'outer;
            }
        }
    }

    if rank_deficient {
        converged = false;
    }
    let mut inliers = 0usize;
    for p in &window.pairs {
        let r = residual(&t, p)?;
        if r.quality == LogQuality::Regular && r.mahalanobis_sq <= opts.inlier_threshold {
            inliers += 1;
        }
    }
    Ok(AlignmentResult {
        t_align: t,
        final_cost: cost,
        iterations,
        converged,
        inlier_fraction: inliers as f64 / window.len() as f64,
        cost_history: history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformJson {
    #[serde(serialize_with = "serde_sig::vec::serialize")]
    pub translation: Vec<f64>,
    /// `x y z w`
    #[serde(serialize_with = "serde_sig::vec::serialize")]
    pub quaternion: Vec<f64>,
}

impl TransformJson {
    pub fn from_transform(t: &Transform) -> Self {
        TransformJson {
            translation: t.translation.iter().copied().collect(),
            quaternion: t.rotation.to_quaternion().to_vec(),
        }
    }

    pub fn to_transform(&self) -> Result<Transform> {
        if self.translation.len() != 3 || self.quaternion.len() != 4 {
            return Err(Error::InvalidArgument("transform needs 3 + 4 components".into()));
        }
        let q = &self.quaternion;
        Ok(Transform::new(
            crate::geom::Rotation::from_quaternion(q[0], q[1], q[2], q[3])?,
            crate::geom::Vec3::new(self.translation[0], self.translation[1], self.translation[2]),
        ))
    }
}

/// `align.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentJson {
    pub t_align: TransformJson,
    #[serde(serialize_with = "serde_sig::serialize")]
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(serialize_with = "serde_sig::serialize")]
    pub inlier_fraction: f64,
}

impl From<&AlignmentResult> for AlignmentJson {
    fn from(r: &AlignmentResult) -> Self {
        AlignmentJson {
            t_align: TransformJson::from_transform(&r.t_align),
            final_cost: r.final_cost,
            iterations: r.iterations,
            converged: r.converged,
            inlier_fraction: r.inlier_fraction,
        }
    }
}

pub fn write_alignment_json(path: &Path, r: &AlignmentResult) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&AlignmentJson::from(r))
        .map_err(|e| Error::data(path, e.to_string()))?;
    text.push('\n');
    crate::tum::write_text(path, &text)
}

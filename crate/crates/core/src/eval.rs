//! Trajectory accuracy metrics: ATE RMSE, RPE and final-position drift.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::match_timestamps;
use crate::error::{Error, Result};
use crate::format::{serde_sig, sig, stamp};
use crate::geom::{umeyama_align, Transform, Vec3};
use crate::tum::{read_tum, TumRecord};

pub const DEFAULT_TOLERANCE: f64 = 0.02;
pub const DEFAULT_RPE_DELTA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    stamps: Vec<f64>,
    poses: Vec<Transform>,
}

impl Trajectory {
    pub fn new(stamped: Vec<(f64, Transform)>) -> Result<Self> {
        if stamped.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidArgument(
                "trajectory timestamps must be strictly increasing".into(),
            ));
        }
        let (stamps, poses) = stamped.into_iter().unzip();
        Ok(Trajectory { stamps, poses })
    }

    pub fn from_records(records: &[TumRecord]) -> Result<Self> {
        let stamped = records
            .iter()
            .map(|r| Ok((r.timestamp, r.transform()?)))
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(stamped)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = read_tum(path)?;
        Trajectory::from_records(&records).map_err(|e| Error::data(path, e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn poses(&self) -> &[Transform] {
        &self.poses
    }

    /// Applies `g ∘ T` to every pose.
    pub fn left_multiplied(&self, g: &Transform) -> Trajectory {
        Trajectory {
            stamps: self.stamps.clone(),
            poses: self.poses.iter().map(|p| g.compose(p)).collect(),
        }
    }
}

/// Index pairs `(est, ref)` matched by timestamp; at least two are required.
pub fn associate(est: &Trajectory, reference: &Trajectory, tolerance: f64) -> Result<Vec<(usize, usize)>> {
    let pairs = match_timestamps(&est.stamps, &reference.stamps, tolerance);
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "only {} timestamp matches within {tolerance} s",
            pairs.len()
        )));
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    None,
    Rigid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    pub alignment_used: Alignment,
    /// Rigid alignment was requested but the matched positions were degenerate.
    pub fallback: bool,
    /// `(timestamp, position error)` for every matched pair.
    pub errors: Vec<(f64, f64)>,
}

pub fn ate(
    est: &Trajectory,
    reference: &Trajectory,
    alignment: Alignment,
    tolerance: f64,
) -> Result<AteResult> {
    let pairs = associate(est, reference, tolerance)?;
    let pe: Vec<Vec3> = pairs.iter().map(|(i, _)| est.poses[*i].translation).collect();
    let pr: Vec<Vec3> = pairs.iter().map(|(_, j)| reference.poses[*j].translation).collect();
    let (g, used, fallback) = match alignment {
        Alignment::None => (Transform::identity(), Alignment::None, false),
        // identical positions align by the identity; skip the SVD round-off
        Alignment::Rigid if pe == pr => (Transform::identity(), Alignment::Rigid, false),
        Alignment::Rigid => match umeyama_align(&pe, &pr) {
            Ok(g) => (g, Alignment::Rigid, false),
            Err(Error::DegenerateGeometry(msg)) => {
                log::warn!("rigid alignment degenerate ({msg}); using unaligned positions");
                (Transform::identity(), Alignment::None, true)
            }
            Err(e) => return Err(e),
        },
    };
    let errors: Vec<(f64, f64)> = pairs
        .iter()
        .zip(pe.iter().zip(&pr))
        .map(|((_, j), (e, r))| (reference.stamps[*j], (g.transform_point(e) - r).norm()))
        .collect();
    let mse = errors.iter().map(|(_, e)| e * e).sum::<f64>() / errors.len() as f64;
    Ok(AteResult {
        rmse: mse.sqrt(),
        alignment_used: used,
        fallback,
        errors,
    })
}

pub fn ate_rmse(est: &Trajectory, reference: &Trajectory, alignment: Alignment) -> Result<f64> {
    Ok(ate(est, reference, alignment, DEFAULT_TOLERANCE)?.rmse)
}

/// RMS relative pose error over intervals of `delta` seconds: translation (m)
/// and rotation (degrees).
pub fn rpe(est: &Trajectory, reference: &Trajectory, delta: f64, tolerance: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("RPE interval must be positive, got {delta}")));
    }
    let pairs = associate(est, reference, tolerance)?;
    let times: Vec<f64> = pairs.iter().map(|(_, j)| reference.stamps[*j]).collect();
    let mut sum_t = 0.0;
    let mut sum_r = 0.0;
    let mut n = 0usize;
    let mut k = 0;
    for a in 0..pairs.len() {
        let target = times[a] + delta;
        if k <= a {
            k = a + 1;
        }
        while k < pairs.len() && times[k] < target - 1e-9 {
            k += 1;
        }
        if k >= pairs.len() {
            break;
        }
        if times[k] - target > tolerance {
            continue;
        }
        let (ei, ri) = pairs[a];
        let (ej, rj) = pairs[k];
        let d_ref = reference.poses[ri].inverse().compose(&reference.poses[rj]);
        let d_est = est.poses[ei].inverse().compose(&est.poses[ej]);
        let (dt, dr) = d_ref.distance(&d_est);
        sum_t += dt * dt;
        sum_r += dr * dr;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!("no pose pairs {delta} s apart")));
    }
    Ok(((sum_t / n as f64).sqrt(), (sum_r / n as f64).sqrt().to_degrees()))
}

/// Distance between the final matched positions once the first matched
/// poses are superimposed.
pub fn drift_rate(est: &Trajectory, reference: &Trajectory, tolerance: f64) -> Result<f64> {
    let pairs = associate(est, reference, tolerance)?;
    let (e0, r0) = pairs[0];
    let (en, rn) = pairs[pairs.len() - 1];
    let g = reference.poses[r0].compose(&est.poses[e0].inverse());
    let end = g.compose(&est.poses[en]);
    Ok((end.translation - reference.poses[rn].translation).norm())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub alignment: Alignment,
    pub tolerance: f64,
    pub rpe_delta: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            alignment: Alignment::Rigid,
            tolerance: DEFAULT_TOLERANCE,
            rpe_delta: DEFAULT_RPE_DELTA,
        }
    }
}

/// `metrics.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "serde_sig::serialize")]
    pub ate_rmse: f64,
    #[serde(serialize_with = "serde_sig::serialize")]
    pub rpe_trans: f64,
    #[serde(serialize_with = "serde_sig::serialize")]
    pub rpe_rot: f64,
    #[serde(serialize_with = "serde_sig::serialize")]
    pub drift_rate: f64,
    pub matched_pose_count: usize,
    pub alignment_used: Alignment,
    pub alignment_fallback: bool,
}

pub fn evaluate(
    est: &Trajectory,
    reference: &Trajectory,
    opts: &EvalOptions,
) -> Result<(MetricsReport, Vec<(f64, f64)>)> {
    let a = ate(est, reference, opts.alignment, opts.tolerance)?;
    let (rpe_trans, rpe_rot) = rpe(est, reference, opts.rpe_delta, opts.tolerance)?;
    let drift = drift_rate(est, reference, opts.tolerance)?;
    let report = MetricsReport {
        ate_rmse: a.rmse,
        rpe_trans,
        rpe_rot,
        drift_rate: drift,
        matched_pose_count: a.errors.len(),
        alignment_used: a.alignment_used,
        alignment_fallback: a.fallback,
    };
    Ok((report, a.errors))
}

pub fn render_errors_csv(errors: &[(f64, f64)]) -> String {
    let mut s = String::from("t,err_m\n");
    for (t, e) in errors {
        s.push_str(&stamp(*t));
        s.push(',');
        s.push_str(&sig(*e));
        s.push('\n');
    }
    s
}

pub const COMPARE_HEADER: &str = "file,ate_rmse,rpe_trans,rpe_rot,drift_rate,matched_pose_count";

pub fn compare_row(name: &str, m: &MetricsReport) -> String {
    format!(
        "{name},{},{},{},{},{}",
        sig(m.ate_rmse),
        sig(m.rpe_trans),
        sig(m.rpe_rot),
        sig(m.drift_rate),
        m.matched_pose_count
    )
}

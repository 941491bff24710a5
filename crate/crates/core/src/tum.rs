//! TUM trajectory files (`timestamp tx ty tz qx qy qz qw`) and the
//! `*.cov.csv` covariance sidecar.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::format::{sig, stamp};
use crate::geom::{Covariance6, Rotation, Transform, Vec3};
use crate::pose::Pose;

/// One TUM line as parsed. Values are kept as read so rewriting a record
/// reproduces the original text.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TumRecord {
    pub timestamp: f64,
    pub translation: [f64; 3],
    pub quaternion: [f64; 4],
}

impl TumRecord {
    pub fn from_transform(timestamp: f64, t: &Transform) -> Self {
        TumRecord {
            timestamp,
            translation: [t.translation.x, t.translation.y, t.translation.z],
            quaternion: t.rotation.to_quaternion(),
        }
    }

    pub fn transform(&self) -> Result<Transform> {
        let [x, y, z, w] = self.quaternion;
        let r = Rotation::from_quaternion(x, y, z, w)?;
        Ok(Transform::new(r, Vec3::from(self.translation)))
    }

    pub fn line(&self) -> String {
        let mut s = stamp(self.timestamp);
        for v in self.translation.iter().chain(self.quaternion.iter()) {
            s.push(' ');
            s.push_str(&sig(*v));
        }
        s
    }
}

pub fn parse_tum(text: &str, origin: &Path) -> Result<Vec<TumRecord>> {
    let mut out: Vec<TumRecord> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(origin, format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != 8 || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(
                origin,
                format!("line {}: expected 8 finite fields", lineno + 1),
            ));
        }
        let rec = TumRecord {
            timestamp: vals[0],
            translation: [vals[1], vals[2], vals[3]],
            quaternion: [vals[4], vals[5], vals[6], vals[7]],
        };
        if let Some(prev) = out.last() {
            if rec.timestamp <= prev.timestamp {
                return Err(Error::data(
                    origin,
                    format!("line {}: timestamps not strictly increasing", lineno + 1),
                ));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_tum(path: &Path) -> Result<Vec<TumRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tum(&text, path)
}

pub fn render_tum(header: &[String], records: &[TumRecord]) -> String {
    let mut s = String::with_capacity(records.len() * 96);
    for h in header {
        let _ = writeln!(s, "# {h}");
    }
    s.push_str("# timestamp tx ty tz qx qy qz qw\n");
    for r in records {
        s.push_str(&r.line());
        s.push('\n');
    }
    s
}

pub fn write_tum(path: &Path, header: &[String], records: &[TumRecord]) -> Result<()> {
    write_text(path, &render_tum(header, records))
}

/// `lio.tum` -> `lio.cov.csv`.
pub fn sidecar_path(tum: &Path) -> PathBuf {
    tum.with_extension("cov.csv")
}

const COV_HEADER: &str = "t,var_rho_x,var_rho_y,var_rho_z,var_phi_x,var_phi_y,var_phi_z";

/// Sidecar rows carry the covariance diagonal.
pub fn render_covariances(poses: &[Pose]) -> String {
    let mut s = String::with_capacity(poses.len() * 96);
    s.push_str(COV_HEADER);
    s.push('\n');
    for p in poses {
        s.push_str(&stamp(p.timestamp));
        for v in p.covariance.diagonal_values().iter() {
            s.push(',');
            s.push_str(&sig(*v));
        }
        s.push('\n');
    }
    s
}

pub fn read_covariances(path: &Path) -> Result<Vec<(f64, Covariance6)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == COV_HEADER => {}
        _ => return Err(Error::data(path, format!("expected header `{COV_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(path, format!("row {}: {e}", i + 2)))?;
        if vals.len() != 7 {
            return Err(Error::data(path, format!("row {}: expected 7 fields", i + 2)));
        }
        let cov = Covariance6::diagonal(
            Vec3::new(vals[1], vals[2], vals[3]),
            Vec3::new(vals[4], vals[5], vals[6]),
        )
        .map_err(|e| Error::data(path, format!("row {}: {e}", i + 2)))?;
        out.push((vals[0], cov));
    }
    Ok(out)
}

/// Loads a TUM file together with its covariance sidecar when one exists.
pub fn read_poses(path: &Path) -> Result<(Vec<TumRecord>, Vec<Pose>)> {
    let records = read_tum(path)?;
    let cov_path = sidecar_path(path);
    let covs = if cov_path.exists() {
        let covs = read_covariances(&cov_path)?;
        if covs.len() != records.len() {
            return Err(Error::data(
                &cov_path,
                format!("{} rows for {} poses", covs.len(), records.len()),
            ));
        }
        Some(covs)
    } else {
        None
    };
    let mut poses = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let transform = r
            .transform()
            .map_err(|e| Error::data(path, format!("pose {i}: {e}")))?;
        let covariance = match &covs {
            Some(c) => {
                if (c[i].0 - r.timestamp).abs() > 1e-6 {
                    return Err(Error::data(
                        &cov_path,
                        format!("row {} timestamp does not match pose", i + 2),
                    ));
                }
                c[i].1
            }
            None => Covariance6::default_pose(),
        };
        poses.push(Pose::new(r.timestamp, transform, covariance));
    }
    Ok((records, poses))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

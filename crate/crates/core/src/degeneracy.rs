//! LiDAR degradation gate over per-scan match reports, with debouncing.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{sig, stamp};
use crate::geom::Transform;
use crate::scan::{icp_align, IcpParams, MatchReport, ScanFrame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Minimum structured-point count for a healthy scan.
    pub tau_n: usize,
    /// Maximum mean squared ICP residual (m²) for a healthy scan.
    pub tau_eps: f64,
    /// Consecutive degraded samples needed to assert.
    pub debounce_on: usize,
    /// Consecutive healthy samples needed to clear.
    pub debounce_off: usize,
    /// Also flag scans whose ICP information matrix is near singular.
    pub use_hessian: bool,
    pub tau_hessian: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            tau_n: 100,
            tau_eps: 0.09,
            debounce_on: 3,
            debounce_off: 5,
            use_hessian: false,
            tau_hessian: 1.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_eps > 0.0) {
            return Err(Error::InvalidArgument("tau_eps must be positive".into()));
        }
        if self.debounce_on == 0 || self.debounce_off == 0 {
            return Err(Error::InvalidArgument("debounce counts must be at least 1".into()));
        }
        if self.use_hessian && !(self.tau_hessian >= 0.0) {
            return Err(Error::InvalidArgument("tau_hessian must be non-negative".into()));
        }
        Ok(())
    }
}

/// Raw degradation flag: feature count below `tau_n` or residual above
/// `tau_eps`. A failed alignment (`eps_align = +inf`) is always degraded.
pub fn evaluate(report: &MatchReport, config: &DetectorConfig) -> bool {
    let hessian = config.use_hessian && report.hessian_min_eig < config.tau_hessian;
    report.n_feat < config.tau_n || !(report.eps_align <= config.tau_eps) || hessian
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HealthSample {
    pub timestamp: f64,
    pub n_feat: usize,
    pub eps_align: f64,
    pub raw: bool,
    pub debounced: bool,
}

/// Single-stream debouncer. Starts healthy.
#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    debounced: bool,
    run: usize,
    last_t: Option<f64>,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Detector {
            config,
            debounced: false,
            run: 0,
            last_t: None,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn is_degraded(&self) -> bool {
        self.debounced
    }

    /// Feeds one raw decision.
    pub fn step_raw(&mut self, timestamp: f64, raw: bool, n_feat: usize, eps_align: f64) -> Result<HealthSample> {
        if let Some(prev) = self.last_t {
            if !(timestamp > prev) {
                return Err(Error::Stream(format!(
                    "health sample at {timestamp} does not follow {prev}"
                )));
            }
        }
        self.last_t = Some(timestamp);
        // `run` counts consecutive samples disagreeing with the debounced state.
        if raw != self.debounced {
            self.run += 1;
            let needed = if raw {
                self.config.debounce_on
            } else {
                self.config.debounce_off
            };
            if self.run >= needed {
                self.debounced = raw;
                self.run = 0;
            }
        } else {
            self.run = 0;
        }
        Ok(HealthSample {
            timestamp,
            n_feat,
            eps_align,
            raw,
            debounced: self.debounced,
        })
    }

    pub fn step(&mut self, timestamp: f64, report: &MatchReport) -> Result<HealthSample> {
        let raw = evaluate(report, &self.config);
        self.step_raw(timestamp, raw, report.n_feat, report.eps_align)
    }
}

/// Intervals `[assert, clear)` during which the debounced flag was set.
/// An episode still open at the end closes at the last sample.
pub fn debounced_episodes(samples: &[HealthSample]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut open: Option<f64> = None;
    for s in samples {
        match (open, s.debounced) {
            (None, true) => open = Some(s.timestamp),
            (Some(start), false) => {
                out.push((start, s.timestamp));
                open = None;
            }
            _ => {}
        }
    }
    if let (Some(start), Some(last)) = (open, samples.last()) {
        out.push((start, last.timestamp));
    }
    out
}

fn merged(intervals: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = intervals.iter().copied().filter(|(a, b)| b > a).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn total_length(v: &[(f64, f64)]) -> f64 {
    v.iter().map(|(a, b)| b - a).sum()
}

/// Intersection-over-union of two interval sets by total length.
/// Two empty sets have IoU 1.
pub fn interval_iou(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let a = merged(a);
    let b = merged(b);
    let mut inter = 0.0;
    for (a0, a1) in &a {
        for (b0, b1) in &b {
            inter += (a1.min(*b1) - a0.max(*b0)).max(0.0);
        }
    }
    let union = total_length(&a) + total_length(&b) - inter;
    if union <= 0.0 {
        1.0
    } else {
        inter / union
    }
}

pub fn render_health_csv(samples: &[HealthSample]) -> String {
    let mut s = String::from("t,n_feat,eps_align,raw,debounced\n");
    for h in samples {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            stamp(h.timestamp),
            h.n_feat,
            sig(h.eps_align),
            u8::from(h.raw),
            u8::from(h.debounced)
        );
    }
    s
}

pub fn write_health_csv(path: &Path, samples: &[HealthSample]) -> Result<()> {
    crate::tum::write_text(path, &render_health_csv(samples))
}

/// Aligns each scan onto its predecessor and feeds the gate in scan order.
///
/// The ICP prior is the previous frame-to-frame result (identity for the
/// first pair and after a failed alignment). The first scan has no
/// predecessor; its sample carries the feature count with zero residual.
pub fn detect_stream(
    scans: &[ScanFrame],
    icp: &IcpParams,
    config: &DetectorConfig,
) -> Result<Vec<(HealthSample, MatchReport)>> {
    let mut detector = Detector::new(config.clone())?;
    let mut out = Vec::with_capacity(scans.len());
    let mut prior = Transform::identity();
    for (i, scan) in scans.iter().enumerate() {
        let report = if i == 0 {
            MatchReport {
                eps_align: 0.0,
                n_feat: crate::scan::extract_feature_count(scan, &icp.features)?,
                n_matched: 0,
                converged: true,
                iterations: 0,
                hessian_min_eig: 0.0,
            }
        } else {
            let (t, report) = icp_align(scan, &scans[i - 1], &prior, icp)?;
            prior = if report.eps_align.is_finite() { t } else { Transform::identity() };
            report
        };
        let sample = detector.step(scan.timestamp, &report)?;
        out.push((sample, report));
    }
    Ok(out)
}

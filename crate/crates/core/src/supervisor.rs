//! LiDAR-priority switching between the LIO and VIO pose streams.
//!
//! The fused output lives in the LIO frame at start-up. LIO poses pass through
//! until the debounced LiDAR health flag asserts; the supervisor then aligns
//! the VIO frame to the output frame over the trailing window of trusted pose
//! pairs and hands over with a short geodesic blend. On recovery it re-aligns
//! the LIO stream to the VIO-driven output (LIO may have drifted while
//! degraded) and hands back.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{solve_alignment, AlignOptions, AlignmentJson, AlignmentResult, AlignmentWindow, PosePair, RobustKernel};
use crate::degeneracy::{debounced_episodes, detect_stream, interval_iou, write_health_csv, Detector, DetectorConfig, HealthSample};
use crate::error::{Error, Result};
use crate::format::serde_sig;
use crate::geom::{exp_se3, geodesic_interp, log_se3, Covariance6, Transform};
use crate::pose::Pose;
use crate::scan::{list_scans, read_scan, IcpParams};
use crate::sim::{read_scenario_dir, DegradationMode, ScenarioDir, Subsystem};
use crate::tum::{write_text, write_tum, TumRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Lio,
    Vio,
}

/// Reading of the smoothing step between the outgoing and incoming source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Geodesic from the outgoing pose toward the aligned incoming pose.
    #[value(name = "interpolating")]
    Interpolating,
    /// `T_a exp(-β log(T_a⁻¹ T_align T_b))`, sign as printed.
    #[value(name = "paper_literal")]
    PaperLiteral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    Linear,
    /// `3u² - 2u³`.
    Smoothstep,
}

impl BetaSchedule {
    /// Blend factor for elapsed fraction `u`, clamped to `[0, 1]`.
    pub fn beta(&self, u: f64) -> f64 {
        let u = if u.is_nan() { 0.0 } else { u.clamp(0.0, 1.0) };
        match self {
            BetaSchedule::Linear => u,
            BetaSchedule::Smoothstep => u * u * (3.0 - 2.0 * u),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmootherConfig {
    pub beta_schedule: BetaSchedule,
    /// Transition length in seconds; 0 switches instantly.
    pub duration: f64,
    pub convention: Convention,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        SmootherConfig {
            beta_schedule: BetaSchedule::Linear,
            duration: 2.0,
            convention: Convention::Interpolating,
        }
    }
}

/// Blends the outgoing pose `t_active` toward the incoming pose `t_backup`
/// mapped by `t_align`.
pub fn apply_smoothing(
    t_active: &Transform,
    t_backup: &Transform,
    t_align: &Transform,
    beta: f64,
    convention: Convention,
) -> Result<Transform> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("smoothing factor {beta} outside [0, 1]")));
    }
    let target = t_align.compose(t_backup);
    match convention {
        Convention::Interpolating => geodesic_interp(t_active, &target, beta),
        Convention::PaperLiteral => {
            if beta == 0.0 {
                return Ok(*t_active);
            }
            let d = log_se3(&t_active.inverse().compose(&target));
            Ok(t_active.compose(&exp_se3(&d.scale(-beta))))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisorConfig {
    pub smoother: SmootherConfig,
    /// Maximum number of pose pairs in an alignment window.
    pub window: usize,
    /// Pose pairing tolerance (s).
    pub pair_tolerance: f64,
    /// Cauchy kernel scale.
    pub kernel_c: f64,
    pub align: AlignOptions,
    /// Refresh the VIO alignment every `window` trusted pairs while LIO is
    /// healthy, and reuse it at the switch instead of solving there.
    pub continuous_alignment: bool,
    /// Events older than the newest seen by more than this (s) are rejected.
    pub clock_skew: f64,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        SupervisorConfig {
            smoother: SmootherConfig::default(),
            window: 50,
            pair_tolerance: 0.05,
            kernel_c: 1.0,
            align: AlignOptions::default(),
            continuous_alignment: false,
            clock_skew: 0.05,
        }
    }
}

impl SupervisorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoother.duration >= 0.0) || !self.smoother.duration.is_finite() {
            return Err(Error::InvalidArgument("smoother duration must be finite and non-negative".into()));
        }
        if self.window < self.align.k_min.max(1) {
            return Err(Error::InvalidArgument(format!(
                "window {} is smaller than k_min {}",
                self.window, self.align.k_min
            )));
        }
        if !(self.pair_tolerance >= 0.0) || !(self.clock_skew >= 0.0) {
            return Err(Error::InvalidArgument("tolerances must be non-negative".into()));
        }
        RobustKernel::new(self.kernel_c)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FusionEvent {
    LioPose(Pose),
    VioPose(Pose),
    Health(HealthSample),
    VioInit { timestamp: f64, initialized: bool },
}

impl FusionEvent {
    pub fn timestamp(&self) -> f64 {
        match self {
            FusionEvent::LioPose(p) | FusionEvent::VioPose(p) => p.timestamp,
            FusionEvent::Health(h) => h.timestamp,
            FusionEvent::VioInit { timestamp, .. } => *timestamp,
        }
    }

    // Health and initialization at a timestamp take effect before the poses
    // stamped with it.
    fn rank(&self) -> u8 {
        match self {
            FusionEvent::Health(_) => 0,
            FusionEvent::VioInit { .. } => 1,
            FusionEvent::LioPose(_) => 2,
            FusionEvent::VioPose(_) => 3,
        }
    }
}

/// Merges the input streams into one time-ordered event sequence.
pub fn merge_events(
    lio: &[Pose],
    vio: &[Pose],
    health: &[HealthSample],
    vio_init: &[(f64, bool)],
) -> Vec<FusionEvent> {
    let mut events: Vec<FusionEvent> = Vec::with_capacity(lio.len() + vio.len() + health.len() + vio_init.len());
    events.extend(health.iter().copied().map(FusionEvent::Health));
    events.extend(vio_init.iter().map(|&(timestamp, initialized)| FusionEvent::VioInit { timestamp, initialized }));
    events.extend(lio.iter().copied().map(FusionEvent::LioPose));
    events.extend(vio.iter().copied().map(FusionEvent::VioPose));
    // stable: equal keys keep their stream order
    events.sort_by(|a, b| a.timestamp().total_cmp(&b.timestamp()).then(a.rank().cmp(&b.rank())));
    events
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusedPose {
    pub timestamp: f64,
    pub transform: Transform,
    /// Source selected at this timestamp (the incoming one during a blend).
    pub source: Source,
    /// LIO output while LiDAR is degraded and no aligned VIO is available.
    pub degraded: bool,
    pub blending: bool,
    /// Raw LIO pose emitted unchanged.
    pub passthrough: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub from: Source,
    pub to: Source,
    pub start: f64,
    pub duration: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Active(Source),
    Transition(Transition),
}

/// Snapshot of the supervisor state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionState {
    pub active: Source,
    /// Maps VIO poses into the output frame, once solved.
    pub t_align: Option<Transform>,
    /// Maps LIO poses into the output frame.
    pub t_lio: Transform,
    pub transition: Option<Transition>,
    pub last_output: Option<(f64, Transform)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchReason {
    Degraded,
    Recovered,
    VioLost,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentAttempt {
    pub timestamp: f64,
    /// Stream whose frame was solved.
    pub target: Source,
    pub pairs: usize,
    pub result: std::result::Result<AlignmentResult, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwitchRecord {
    pub timestamp: f64,
    pub from: Source,
    pub to: Source,
    pub reason: SwitchReason,
    /// Index into the alignment log of the solve used for this switch.
    pub alignment: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct StoredPair {
    timestamp: f64,
    lio: Pose,
    vio: Pose,
    trusted: bool,
}

/// Maximum stored pairs, as a multiple of the window.
const PAIR_HISTORY: usize = 20;

pub struct Supervisor {
    config: SupervisorConfig,
    kernel: RobustKernel,
    mode: Mode,
    lio_map: Option<Transform>,
    vio_map: Option<Transform>,
    vio_initialized: bool,
    degraded: bool,
    raw: bool,
    last_raw_degraded: f64,
    lio_epoch: f64,
    latest_lio: Option<(Pose, bool)>,
    latest_vio: Option<(Pose, bool)>,
    pairs: VecDeque<StoredPair>,
    trusted_since_refresh: usize,
    refreshed: Option<usize>,
    last_event: f64,
    last_output: Option<(f64, Transform)>,
    pending_failure_logged: bool,
    switches: Vec<SwitchRecord>,
    alignments: Vec<AlignmentAttempt>,
}

fn transported(cov: &Covariance6, map: &Transform) -> Covariance6 {
    let ad = map.adjoint();
    let m = ad * cov.matrix() * ad.transpose();
    Covariance6::new((m + m.transpose()) * 0.5).unwrap_or(*cov)
}

impl Supervisor {
    pub fn new(config: SupervisorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Supervisor {
            kernel: RobustKernel::new(config.kernel_c)?,
            config,
            mode: Mode::Active(Source::Lio),
            lio_map: None,
            vio_map: None,
            vio_initialized: false,
            degraded: false,
            raw: false,
            last_raw_degraded: f64::NEG_INFINITY,
            lio_epoch: f64::NEG_INFINITY,
            latest_lio: None,
            latest_vio: None,
            pairs: VecDeque::new(),
            trusted_since_refresh: 0,
            refreshed: None,
            last_event: f64::NEG_INFINITY,
            last_output: None,
            pending_failure_logged: false,
            switches: Vec::new(),
            alignments: Vec::new(),
        })
    }

    pub fn state(&self) -> FusionState {
        let (active, transition) = match self.mode {
            Mode::Active(s) => (s, None),
            Mode::Transition(t) => (t.to, Some(t)),
        };
        FusionState {
            active,
            t_align: self.vio_map,
            t_lio: self.lio_map.unwrap_or_else(Transform::identity),
            transition,
            last_output: self.last_output,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn switches(&self) -> &[SwitchRecord] {
        &self.switches
    }

    pub fn alignments(&self) -> &[AlignmentAttempt] {
        &self.alignments
    }

    pub fn step(&mut self, event: FusionEvent) -> Result<Option<FusedPose>> {
        let t = event.timestamp();
        if !t.is_finite() {
            return Err(Error::Stream("non-finite event timestamp".into()));
        }
        if t < self.last_event - self.config.clock_skew {
            return Err(Error::Stream(format!(
                "event at {t} arrived after {}",
                self.last_event
            )));
        }
        self.last_event = self.last_event.max(t);
        match event {
            FusionEvent::Health(h) => {
                self.raw = h.raw;
                if h.raw {
                    self.last_raw_degraded = h.timestamp;
                }
                self.degraded = h.debounced;
                self.update_mode(t);
                Ok(None)
            }
            FusionEvent::VioInit { initialized, .. } => {
                self.vio_initialized = initialized;
                self.update_mode(t);
                Ok(None)
            }
            FusionEvent::LioPose(p) => {
                self.latest_lio = Some((p, false));
                self.try_pair();
                self.update_mode(t);
                Ok(self.emit(Source::Lio, t))
            }
            FusionEvent::VioPose(p) => {
                self.latest_vio = Some((p, false));
                self.try_pair();
                self.update_mode(t);
                Ok(self.emit(Source::Vio, t))
            }
        }
    }

    fn try_pair(&mut self) {
        let (Some((lio, lio_used)), Some((vio, vio_used))) = (self.latest_lio, self.latest_vio) else {
            return;
        };
        if lio_used || vio_used || (lio.timestamp - vio.timestamp).abs() > self.config.pair_tolerance {
            return;
        }
        self.latest_lio = Some((lio, true));
        self.latest_vio = Some((vio, true));
        let timestamp = lio.timestamp.max(vio.timestamp);
        if self.pairs.back().is_some_and(|p| p.timestamp >= timestamp) {
            return;
        }
        let trusted = !self.raw;
        self.pairs.push_back(StoredPair {
            timestamp,
            lio,
            vio,
            trusted,
        });
        if self.pairs.len() > PAIR_HISTORY * self.config.window {
            self.pairs.pop_front();
        }
        if trusted && timestamp >= self.lio_epoch {
            self.trusted_since_refresh += 1;
        }
    }

    fn map_of(&self, s: Source) -> Option<Transform> {
        match s {
            Source::Lio => Some(self.lio_map.unwrap_or_else(Transform::identity)),
            Source::Vio => self.vio_map,
        }
    }

    fn latest(&self, s: Source) -> Option<Pose> {
        match s {
            Source::Lio => self.latest_lio.map(|p| p.0),
            Source::Vio => self.latest_vio.map(|p| p.0),
        }
    }

    /// Solves the VIO-to-output map over the trailing trusted pairs that are
    /// consistent with the current LIO map.
    fn solve_vio_map(&mut self, t: f64) -> Option<usize> {
        let lio_map = self.lio_map;
        let picked: Vec<PosePair> = self
            .pairs
            .iter()
            .rev()
            .filter(|p| p.trusted && p.timestamp >= self.lio_epoch)
            .take(self.config.window)
            .map(|p| {
                let (t_lio, sigma_lio) = match lio_map {
                    Some(m) => (m.compose(&p.lio.transform), transported(&p.lio.covariance, &m)),
                    None => (p.lio.transform, p.lio.covariance),
                };
                PosePair {
                    timestamp: p.timestamp,
                    t_lio,
                    t_vio: p.vio.transform,
                    sigma: sigma_lio.sum(&p.vio.covariance),
                }
            })
            .collect();
        self.solve(t, Source::Vio, picked)
    }

    /// Solves the LIO-to-output map against the VIO-driven output over pairs
    /// recorded after the last degraded LiDAR sample.
    fn solve_lio_map(&mut self, t: f64) -> Option<usize> {
        let vio_map = self.vio_map?;
        let picked: Vec<PosePair> = self
            .pairs
            .iter()
            .rev()
            .filter(|p| p.trusted && p.timestamp > self.last_raw_degraded)
            .take(self.config.window)
            .map(|p| PosePair {
                timestamp: p.timestamp,
                t_lio: vio_map.compose(&p.vio.transform),
                t_vio: p.lio.transform,
                sigma: transported(&p.vio.covariance, &vio_map).sum(&p.lio.covariance),
            })
            .collect();
        self.solve(t, Source::Lio, picked)
    }

    fn solve(&mut self, t: f64, target: Source, mut picked: Vec<PosePair>) -> Option<usize> {
        picked.reverse();
        let n = picked.len();
        let result = AlignmentWindow::new(picked, self.config.align.k_min)
            .and_then(|w| solve_alignment(&w, &self.kernel, &self.config.align))
            .map_err(|e| e.to_string())
            .and_then(|r| {
                if r.converged {
                    Ok(r)
                } else {
                    Err(format!("alignment did not converge after {} iterations", r.iterations))
                }
            });
        if let Err(e) = &result {
            // one log line per pending switch, then retry quietly
            if !self.pending_failure_logged {
                log::warn!("alignment of {target:?} frame at t={t:.3} failed ({e}); staying on current source");
                self.pending_failure_logged = true;
                self.alignments.push(AlignmentAttempt {
                    timestamp: t,
                    target,
                    pairs: n,
                    result,
                });
            }
            return None;
        }
        self.pending_failure_logged = false;
        self.alignments.push(AlignmentAttempt {
            timestamp: t,
            target,
            pairs: n,
            result,
        });
        Some(self.alignments.len() - 1)
    }

    fn result_map(&self, idx: usize) -> Transform {
        match &self.alignments[idx].result {
            Ok(r) => r.t_align,
            Err(_) => unreachable!("only successful solves are referenced"),
        }
    }

    fn begin_switch(&mut self, t: f64, from: Source, to: Source, reason: SwitchReason, alignment: Option<usize>) {
        log::info!("t={t:.3}: switching {from:?} -> {to:?} ({reason:?})");
        self.switches.push(SwitchRecord {
            timestamp: t,
            from,
            to,
            reason,
            alignment,
        });
        self.mode = if self.config.smoother.duration > 0.0 {
            Mode::Transition(Transition {
                from,
                to,
                start: t,
                duration: self.config.smoother.duration,
            })
        } else {
            Mode::Active(to)
        };
    }

    fn update_mode(&mut self, t: f64) {
        if let Mode::Transition(tr) = self.mode {
            if !self.vio_initialized && tr.to == Source::Vio {
                self.fall_back_to_lio(t);
                return;
            }
            if t - tr.start < tr.duration {
                return;
            }
            self.mode = Mode::Active(tr.to);
        }
        match self.mode {
            Mode::Active(Source::Lio) => {
                if self.degraded && self.vio_initialized {
                    let solved = match (self.config.continuous_alignment, self.refreshed) {
                        (true, Some(idx)) => Some(idx),
                        _ => self.solve_vio_map(t),
                    };
                    if let Some(idx) = solved {
                        self.vio_map = Some(self.result_map(idx));
                        self.begin_switch(t, Source::Lio, Source::Vio, SwitchReason::Degraded, Some(idx));
                    }
                } else if self.config.continuous_alignment
                    && !self.degraded
                    && self.vio_initialized
                    && self.trusted_since_refresh >= self.config.window
                {
                    if let Some(idx) = self.solve_vio_map(t) {
                        self.refreshed = Some(idx);
                    }
                    self.trusted_since_refresh = 0;
                }
            }
            Mode::Active(Source::Vio) => {
                if !self.vio_initialized {
                    self.fall_back_to_lio(t);
                } else if !self.degraded {
                    if let Some(idx) = self.solve_lio_map(t) {
                        self.lio_map = Some(self.result_map(idx));
                        self.lio_epoch = t;
                        self.refreshed = None;
                        self.trusted_since_refresh = 0;
                        self.begin_switch(t, Source::Vio, Source::Lio, SwitchReason::Recovered, Some(idx));
                    }
                }
            }
            Mode::Transition(_) => {}
        }
    }

    /// VIO became unavailable while selected: anchor the LIO map so the output
    /// continues from the last fused pose, and flag it as degraded.
    fn fall_back_to_lio(&mut self, t: f64) {
        if let (Some((_, out)), Some(lio)) = (self.last_output, self.latest(Source::Lio)) {
            self.lio_map = Some(out.compose(&lio.transform.inverse()));
        }
        self.lio_epoch = t;
        self.refreshed = None;
        self.trusted_since_refresh = 0;
        let from = match self.mode {
            Mode::Active(s) => s,
            Mode::Transition(tr) => tr.to,
        };
        log::warn!("t={t:.3}: VIO lost; falling back to LIO");
        self.switches.push(SwitchRecord {
            timestamp: t,
            from,
            to: Source::Lio,
            reason: SwitchReason::VioLost,
            alignment: None,
        });
        self.mode = Mode::Active(Source::Lio);
    }

    fn emit(&mut self, src: Source, t: f64) -> Option<FusedPose> {
        if self.last_output.is_some_and(|(last, _)| t <= last) {
            return None;
        }
        let out = match self.mode {
            Mode::Active(active) => {
                // Right after a switch the selected stream's pose for this
                // instant may already have been consumed.
                let pose = self.latest(active)?;
                if (active != src && (pose.timestamp - t).abs() > self.config.pair_tolerance)
                    || self.last_output.is_some_and(|(last, _)| pose.timestamp <= last)
                {
                    return None;
                }
                let map = self.map_of(active)?;
                let passthrough = active == Source::Lio && self.lio_map.is_none();
                let transform = if passthrough {
                    pose.transform
                } else {
                    map.compose(&pose.transform)
                };
                FusedPose {
                    timestamp: pose.timestamp,
                    transform,
                    source: active,
                    degraded: active == Source::Lio && self.degraded,
                    blending: false,
                    passthrough,
                }
            }
            Mode::Transition(tr) if src == Source::Vio => {
                let outgoing = self.latest(tr.from)?;
                let incoming = self.latest(tr.to)?;
                if (outgoing.timestamp - incoming.timestamp).abs() > self.config.pair_tolerance {
                    return None;
                }
                let active = self.map_of(tr.from)?.compose(&outgoing.transform);
                let beta = self.config.smoother.beta_schedule.beta((t - tr.start) / tr.duration);
                let transform = apply_smoothing(
                    &active,
                    &incoming.transform,
                    &self.map_of(tr.to)?,
                    beta,
                    self.config.smoother.convention,
                )
                .ok()?;
                FusedPose {
                    timestamp: t,
                    transform,
                    source: tr.to,
                    degraded: false,
                    blending: true,
                    passthrough: false,
                }
            }
            _ => return None,
        };
        self.last_output = Some((out.timestamp, out.transform));
        Some(out)
    }

    /// Source episodes from the first to the last event time.
    pub fn episodes(&self, t0: f64, t1: f64) -> Vec<Episode> {
        let mut out = Vec::new();
        let mut current = Episode {
            source: Source::Lio,
            t_start: t0,
            t_end: t1,
            transition_end: t0,
            reason: None,
            alignment: None,
        };
        for s in &self.switches {
            current.t_end = s.timestamp;
            out.push(current);
            let blend = if s.reason == SwitchReason::VioLost {
                0.0
            } else {
                self.config.smoother.duration
            };
            current = Episode {
                source: s.to,
                t_start: s.timestamp,
                t_end: t1,
                transition_end: (s.timestamp + blend).min(t1),
                reason: Some(s.reason),
                alignment: s.alignment.and_then(|i| self.alignments[i].result.as_ref().ok().map(AlignmentJson::from)),
            };
        }
        out.push(current);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Episode {
    pub source: Source,
    #[serde(serialize_with = "serde_sig::serialize")]
    pub t_start: f64,
    #[serde(serialize_with = "serde_sig::serialize")]
    pub t_end: f64,
    /// End of the hand-over blend into this episode.
    #[serde(serialize_with = "serde_sig::serialize")]
    pub transition_end: f64,
    pub reason: Option<SwitchReason>,
    pub alignment: Option<AlignmentJson>,
}

/// Runs the supervisor over a merged event stream.
pub fn run_events(events: &[FusionEvent], config: &SupervisorConfig) -> Result<(Vec<FusedPose>, Supervisor)> {
    let mut sup = Supervisor::new(config.clone())?;
    let mut out = Vec::new();
    for e in events {
        if let Some(p) = sup.step(*e)? {
            out.push(p);
        }
    }
    Ok((out, sup))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum HealthSource {
    /// Consecutive-scan ICP over the scenario scans.
    #[value(name = "detector")]
    Detector,
    /// Raw flags taken from the injected LIO schedule.
    #[value(name = "schedule_oracle")]
    ScheduleOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuseConfig {
    pub health_source: HealthSource,
    pub detector: DetectorConfig,
    pub icp: IcpParams,
    pub supervisor: SupervisorConfig,
}

impl Default for FuseConfig {
    fn default() -> Self {
        FuseConfig {
            health_source: HealthSource::Detector,
            detector: DetectorConfig::default(),
            icp: IcpParams::default(),
            supervisor: SupervisorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentLogEntry {
    #[serde(serialize_with = "serde_sig::serialize")]
    pub t: f64,
    pub frame: Source,
    pub pairs: usize,
    pub result: Option<AlignmentJson>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HealthSummary {
    pub samples: usize,
    pub raw_degraded: usize,
    pub debounced_degraded: usize,
    pub episodes: Vec<[f64; 2]>,
    /// Interval IoU of the debounced episodes against the LIO schedule.
    pub schedule_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutputSummary {
    pub poses: usize,
    pub lio: usize,
    pub vio: usize,
    pub blended: usize,
    pub degraded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FuseReport {
    pub vio_episodes: usize,
    pub episodes: Vec<Episode>,
    pub alignments: Vec<AlignmentLogEntry>,
    pub health: HealthSummary,
    pub outputs: OutputSummary,
    pub config: FuseConfig,
}

#[derive(Clone, Debug)]
pub struct FuseOutput {
    pub fused: Vec<FusedPose>,
    /// Output rows; passthrough poses reuse the LIO input rows.
    pub records: Vec<TumRecord>,
    pub health: Vec<HealthSample>,
    pub report: FuseReport,
}

impl FuseOutput {
    /// Whether any alignment attempt failed or stopped short of convergence.
    pub fn had_solver_failure(&self) -> bool {
        self.report.alignments.iter().any(|a| a.error.is_some())
    }
}

fn round_pair(a: f64, b: f64) -> [f64; 2] {
    [crate::format::round_sig(a), crate::format::round_sig(b)]
}

/// Raw flags from the LIO schedule at each time, debounced with `config`.
pub fn schedule_health(
    times: &[f64],
    windows: &[(f64, f64)],
    config: &DetectorConfig,
) -> Result<Vec<HealthSample>> {
    let mut det = Detector::new(config.clone())?;
    times
        .iter()
        .map(|&t| {
            let raw = windows.iter().any(|(a, b)| t >= *a && t < *b);
            det.step_raw(t, raw, 0, 0.0)
        })
        .collect()
}

fn lio_windows(dir: &ScenarioDir) -> Vec<(f64, f64)> {
    dir.schedule
        .iter()
        .filter(|w| w.subsystem == Subsystem::Lio)
        .map(|w| (w.t_start, w.t_end))
        .collect()
}

fn vio_init_events(dir: &ScenarioDir) -> Vec<(f64, bool)> {
    let start = match (&dir.scenario, dir.vio.first()) {
        (Some(s), Some(first)) => s.vio_init_time.max(first.timestamp),
        (None, Some(first)) => first.timestamp,
        (_, None) => return Vec::new(),
    };
    let mut out = vec![(start, true)];
    let mut dropouts: Vec<(f64, f64)> = dir
        .schedule
        .iter()
        .filter(|w| w.subsystem == Subsystem::Vio && w.mode == DegradationMode::Dropout)
        .map(|w| (w.t_start, w.t_end))
        .collect();
    dropouts.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (a, b) in dropouts {
        out.push((a, false));
        out.push((b.max(start), true));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn detector_health(dir: &Path, config: &FuseConfig) -> Result<Vec<HealthSample>> {
    let scans_dir = dir.join(crate::sim::SCANS_DIR);
    if !scans_dir.is_dir() {
        return Err(Error::data(scans_dir, "missing scan directory"));
    }
    let scans = list_scans(&scans_dir)?
        .iter()
        .map(|p| read_scan(p))
        .collect::<Result<Vec<_>>>()?;
    if scans.is_empty() {
        return Err(Error::data(scans_dir, "no scan files"));
    }
    Ok(detect_stream(&scans, &config.icp, &config.detector)?
        .into_iter()
        .map(|(h, _)| h)
        .collect())
}

/// Health series for a scenario directory according to `config.health_source`.
pub fn scenario_health(dir: &ScenarioDir, config: &FuseConfig) -> Result<Vec<HealthSample>> {
    match config.health_source {
        HealthSource::Detector => detector_health(&dir.root, config),
        HealthSource::ScheduleOracle => {
            let times = match &dir.scenario {
                Some(s) => s.scan_times(),
                None => dir.lio.iter().map(|p| p.timestamp).collect(),
            };
            schedule_health(&times, &lio_windows(dir), &config.detector)
        }
    }
}

/// Fuses a scenario directory with a precomputed health series.
pub fn fuse_with_health(dir: &ScenarioDir, health: Vec<HealthSample>, config: &FuseConfig) -> Result<FuseOutput> {
    let events = merge_events(&dir.lio, &dir.vio, &health, &vio_init_events(dir));
    let (fused, sup) = run_events(&events, &config.supervisor)?;
    if fused.is_empty() {
        return Err(Error::data(dir.root.join("lio.tum"), "no fused poses produced"));
    }
    let t0 = events.first().map(|e| e.timestamp()).unwrap_or(0.0);
    let t1 = events.last().map(|e| e.timestamp()).unwrap_or(0.0);

    let by_stamp: HashMap<u64, usize> = dir
        .lio
        .iter()
        .enumerate()
        .map(|(i, p)| (p.timestamp.to_bits(), i))
        .collect();
    let records = fused
        .iter()
        .map(|f| match (f.passthrough, by_stamp.get(&f.timestamp.to_bits())) {
            (true, Some(&i)) => dir.lio_records[i],
            _ => TumRecord::from_transform(f.timestamp, &f.transform),
        })
        .collect();

    let episodes = sup.episodes(t0, t1);
    let debounced = debounced_episodes(&health);
    let windows = lio_windows(dir);
    let report = FuseReport {
        vio_episodes: episodes.iter().filter(|e| e.source == Source::Vio).count(),
        episodes,
        alignments: sup
            .alignments()
            .iter()
            .map(|a| AlignmentLogEntry {
                t: a.timestamp,
                frame: a.target,
                pairs: a.pairs,
                result: a.result.as_ref().ok().map(AlignmentJson::from),
                error: a.result.as_ref().err().cloned(),
            })
            .collect(),
        health: HealthSummary {
            samples: health.len(),
            raw_degraded: health.iter().filter(|h| h.raw).count(),
            debounced_degraded: health.iter().filter(|h| h.debounced).count(),
            episodes: debounced.iter().map(|(a, b)| round_pair(*a, *b)).collect(),
            schedule_iou: dir
                .scenario
                .as_ref()
                .map(|_| crate::format::round_sig(interval_iou(&debounced, &windows))),
        },
        outputs: OutputSummary {
            poses: fused.len(),
            lio: fused.iter().filter(|f| f.source == Source::Lio).count(),
            vio: fused.iter().filter(|f| f.source == Source::Vio).count(),
            blended: fused.iter().filter(|f| f.blending).count(),
            degraded: fused.iter().filter(|f| f.degraded).count(),
        },
        config: config.clone(),
    };
    Ok(FuseOutput {
        fused,
        records,
        health,
        report,
    })
}

/// Reads a scenario directory, derives health, and runs the supervisor.
pub fn run_offline(dir: &Path, config: &FuseConfig) -> Result<FuseOutput> {
    config.detector.validate()?;
    config.supervisor.validate()?;
    let scenario = read_scenario_dir(dir)?;
    let health = scenario_health(&scenario, config)?;
    fuse_with_health(&scenario, health, config)
}

/// Writes `fused.tum`, `report.json` and `health.csv` into `out`.
pub fn write_fuse_output(out: &Path, output: &FuseOutput) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_tum(&out.join("fused.tum"), &["fused output".to_string()], &output.records)?;
    let path = out.join("report.json");
    let mut text = serde_json::to_string_pretty(&output.report).map_err(|e| Error::data(&path, e.to_string()))?;
    text.push('\n');
    write_text(&path, &text)?;
    write_health_csv(&out.join("health.csv"), &output.health)
}

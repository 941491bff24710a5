//! Point-to-point ICP between consecutive scans.
//!
//! Produces the quantities the degradation gate consumes: the mean squared
//! residual over matched point pairs and a count of structured (edge- or
//! plane-like) points.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{sig, stamp};
use crate::geom::{hat, log_se3, umeyama_align, Mat3, Mat6, Transform, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct ScanFrame {
    pub timestamp: f64,
    pub points: Vec<Vec3>,
}

impl ScanFrame {
    pub fn new(timestamp: f64, points: Vec<Vec3>) -> Result<Self> {
        if !timestamp.is_finite() {
            return Err(Error::InvalidArgument("scan timestamp is not finite".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument(format!("scan point {i} is not finite")));
        }
        Ok(ScanFrame { timestamp, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &Transform) -> ScanFrame {
        ScanFrame {
            timestamp: self.timestamp,
            points: self.points.iter().map(|p| t.transform_point(p)).collect(),
        }
    }
}

#[inline]
fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// `(squared distance, index)` ordering; lower index wins ties.
#[inline]
fn better(d2: f64, idx: usize, best_d2: f64, best_idx: usize) -> bool {
    d2 < best_d2 || (d2 == best_d2 && idx < best_idx)
}

const LEAF_SIZE: usize = 8;

/// Static kd-tree over a point cloud. Queries return exactly what an
/// exhaustive scan would, ties resolved toward the lowest point index.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    // Points and their original indices, permuted into tree order so leaf
    // scans touch contiguous memory.
    sorted: Vec<Vec3>,
    ids: Vec<usize>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("cannot index an empty scan".into()));
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        Self::split(points, &mut order, 0);
        Ok(KdTree {
            points: points.to_vec(),
            sorted: order.iter().map(|&i| points[i]).collect(),
            ids: order,
        })
    }

    fn split(points: &[Vec3], order: &mut [usize], depth: usize) {
        if order.len() <= LEAF_SIZE {
            return;
        }
        let axis = depth % 3;
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |a, b| points[*a][axis].total_cmp(&points[*b][axis]));
        let (left, rest) = order.split_at_mut(mid);
        Self::split(points, left, depth + 1);
        Self::split(points, &mut rest[1..], depth + 1);
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Nearest neighbor as `(index, squared distance)`.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(q, 0, self.ids.len(), 0, &mut best);
        best
    }

    fn nearest_rec(&self, q: &Vec3, lo: usize, hi: usize, depth: usize, best: &mut (usize, f64)) {
        if hi - lo <= LEAF_SIZE {
            for s in lo..hi {
                let d2 = dist2(q, &self.sorted[s]);
                if better(d2, self.ids[s], best.1, best.0) {
                    *best = (self.ids[s], d2);
                }
            }
            return;
        }
        let axis = depth % 3;
        let mid = lo + (hi - lo) / 2;
        let p = &self.sorted[mid];
        let d2 = dist2(q, p);
        if better(d2, self.ids[mid], best.1, best.0) {
            *best = (self.ids[mid], d2);
        }
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(q, near.0, near.1, depth + 1, best);
        if diff * diff <= best.1 {
            self.nearest_rec(q, far.0, far.1, depth + 1, best);
        }
    }

    /// Up to `k` nearest neighbors with squared distance `<= radius²`,
    /// sorted by `(distance, index)`.
    pub fn knn(&self, q: &Vec3, k: usize, radius: f64) -> Vec<(usize, f64)> {
        let mut found: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k == 0 {
            return found;
        }
        self.knn_rec(q, k, radius * radius, 0, self.ids.len(), 0, &mut found);
        found
    }

    #[allow(clippy::too_many_arguments)]
    fn knn_rec(
        &self,
        q: &Vec3,
        k: usize,
        r2: f64,
        lo: usize,
        hi: usize,
        depth: usize,
        found: &mut Vec<(usize, f64)>,
    ) {
        let offer = |s: usize, found: &mut Vec<(usize, f64)>| {
            let d2 = dist2(q, &self.sorted[s]);
            let i = self.ids[s];
            if d2 > r2 {
                return;
            }
            if found.len() == k {
                let (wi, wd) = found[k - 1];
                if !better(d2, i, wd, wi) {
                    return;
                }
                found.pop();
            }
            let pos = found.partition_point(|&(j, dj)| better(dj, j, d2, i));
            found.insert(pos, (i, d2));
        };
        if hi - lo <= LEAF_SIZE {
            for s in lo..hi {
                offer(s, found);
            }
            return;
        }
        let axis = depth % 3;
        let mid = lo + (hi - lo) / 2;
        offer(mid, found);
        let diff = q[axis] - self.sorted[mid][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(q, k, r2, near.0, near.1, depth + 1, found);
        let bound = if found.len() == k { found[k - 1].1 } else { r2 };
        if diff * diff <= bound {
            self.knn_rec(q, k, r2, far.0, far.1, depth + 1, found);
        }
    }
}

pub fn build_index(target: &ScanFrame) -> Result<KdTree> {
    KdTree::build(&target.points)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub source: usize,
    pub target: usize,
    pub dist2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    pub gate: f64,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn mean_dist2(&self) -> f64 {
        if self.pairs.is_empty() {
            return f64::INFINITY;
        }
        self.pairs.iter().map(|c| c.dist2).sum::<f64>() / self.pairs.len() as f64
    }
}

/// One pair per source point whose nearest target point lies within `gate`.
pub fn correspondences(points: &[Vec3], index: &KdTree, gate: f64) -> CorrespondenceSet {
    let g2 = gate * gate;
    let pairs = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (j, d2) = index.nearest(p);
            (d2 <= g2).then_some(Correspondence {
                source: i,
                target: j,
                dist2: d2,
            })
        })
        .collect();
    CorrespondenceSet { pairs, gate }
}

pub fn find_correspondences(source: &ScanFrame, index: &KdTree, gate: f64) -> Result<CorrespondenceSet> {
    if !(gate > 0.0) {
        return Err(Error::InvalidArgument(format!("gate must be positive, got {gate}")));
    }
    Ok(correspondences(&source.points, index, gate))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpParams {
    /// Maximum pairing distance (m).
    pub gate: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the norm of the per-iteration twist update.
    pub tolerance: f64,
    /// Use every n-th source point for alignment (1 = all points).
    pub source_stride: usize,
    pub features: FeatureParams,
    /// Neighborhood used for target surface normals in the Hessian diagnostic.
    pub normal_k: usize,
    pub normal_radius: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        IcpParams {
            gate: 1.0,
            max_iterations: 30,
            tolerance: 1e-6,
            source_stride: 3,
            features: FeatureParams::default(),
            normal_k: 20,
            normal_radius: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureParams {
    /// Neighborhood size, query point included.
    pub k: usize,
    /// A point is structured when its largest local eigenvalue is at least
    /// this multiple of the smallest.
    pub aniso_ratio: f64,
    /// Neighbors farther than this (m) are ignored.
    pub radius: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            k: 10,
            aniso_ratio: 25.0,
            radius: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchReport {
    /// Mean squared pair distance (m²); `+inf` when alignment failed.
    pub eps_align: f64,
    pub n_feat: usize,
    pub n_matched: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Smallest eigenvalue of the normal-projected Gauss-Newton matrix of the
    /// final correspondences. Diagnostic only.
    pub hessian_min_eig: f64,
}

fn local_eigenvalues(points: &[Vec3], neighbors: &[(usize, f64)]) -> (nalgebra::Vector3<f64>, Mat3) {
    let n = neighbors.len() as f64;
    let mean = neighbors.iter().fold(Vec3::zeros(), |acc, (i, _)| acc + points[*i]) / n;
    let mut cov = Mat3::zeros();
    for (i, _) in neighbors {
        let d = points[*i] - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    (eig.eigenvalues, eig.eigenvectors)
}

/// Whether a neighborhood is anisotropic enough to count as structure.
pub fn is_structured(points: &[Vec3], neighbors: &[(usize, f64)], aniso_ratio: f64) -> bool {
    let (ev, _) = local_eigenvalues(points, neighbors);
    let lo = ev.min().max(0.0);
    let hi = ev.max();
    hi > 0.0 && hi >= aniso_ratio * lo
}

pub fn feature_count_indexed(points: &[Vec3], index: &KdTree, params: &FeatureParams) -> usize {
    if points.len() < params.k || params.k < 3 {
        return 0;
    }
    points
        .iter()
        .filter(|p| {
            let nb = index.knn(p, params.k, params.radius);
            nb.len() == params.k && is_structured(index.points(), &nb, params.aniso_ratio)
        })
        .count()
}

/// Number of points whose k-neighborhood is edge- or plane-like.
pub fn extract_feature_count(scan: &ScanFrame, params: &FeatureParams) -> Result<usize> {
    if scan.is_empty() {
        return Err(Error::InvalidArgument("empty scan".into()));
    }
    if scan.len() < params.k {
        return Ok(0);
    }
    let index = KdTree::build(&scan.points)?;
    Ok(feature_count_indexed(&scan.points, &index, params))
}

fn surface_normal(index: &KdTree, q: &Vec3, k: usize, radius: f64) -> Option<Vec3> {
    // Sparse neighborhoods (far returns) give unreliable normals.
    let nb = index.knn(q, k, radius);
    if nb.len() < k.max(3) {
        return None;
    }
    let (ev, vecs) = local_eigenvalues(index.points(), &nb);
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| ev[*a].total_cmp(&ev[*b]));
    // A line-like neighborhood (one ring crossing a surface) fixes no normal.
    if ev[order[1]] < 0.1 * ev[order[2]] {
        return None;
    }
    // Neighborhoods straddling an edge are not planar.
    if ev[order[0]] > 0.1 * ev[order[1]] {
        return None;
    }
    Some(vecs.column(order[0]).into_owned())
}

fn failed_report(n_feat: usize, iterations: usize) -> MatchReport {
    MatchReport {
        eps_align: f64::INFINITY,
        n_feat,
        n_matched: 0,
        converged: false,
        iterations,
        hessian_min_eig: 0.0,
    }
}

/// Aligns `source` onto `target` starting from `initial`.
///
/// Returns the transform mapping source coordinates into the target frame.
pub fn icp_align(
    source: &ScanFrame,
    target: &ScanFrame,
    initial: &Transform,
    params: &IcpParams,
) -> Result<(Transform, MatchReport)> {
    if source.len() < 10 || target.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "ICP needs at least 10 points per scan (source {}, target {})",
            source.len(),
            target.len()
        )));
    }
    if !(params.gate > 0.0) || params.source_stride == 0 || !(params.normal_radius > 0.0) {
        return Err(Error::InvalidArgument("invalid ICP parameters".into()));
    }
    let index = KdTree::build(&target.points)?;
    let source_index = KdTree::build(&source.points)?;
    let n_feat = feature_count_indexed(&source.points, &source_index, &params.features);
    let sample: Vec<Vec3> = source.points.iter().step_by(params.source_stride).copied().collect();

    let mut t = *initial;
    let mut converged = false;
    let mut iterations = 0;
    let mut moved: Vec<Vec3> = Vec::with_capacity(sample.len());
    let mut src_buf: Vec<Vec3> = Vec::with_capacity(sample.len());
    let mut dst_buf: Vec<Vec3> = Vec::with_capacity(sample.len());

    while iterations < params.max_iterations {
        iterations += 1;
        moved.clear();
        moved.extend(sample.iter().map(|p| t.transform_point(p)));
        let corr = correspondences(&moved, &index, params.gate);
        if corr.len() < 3 {
            return Ok((t, failed_report(n_feat, iterations)));
        }
        src_buf.clear();
        dst_buf.clear();
        for c in &corr.pairs {
            src_buf.push(moved[c.source]);
            dst_buf.push(target.points[c.target]);
        }
        let step = match umeyama_align(&src_buf, &dst_buf) {
            Ok(s) => s,
            Err(_) => return Ok((t, failed_report(n_feat, iterations))),
        };
        t = step.compose(&t);
        if log_se3(&step).norm() < params.tolerance {
            converged = true;
            break;
        }
    }

    moved.clear();
    moved.extend(sample.iter().map(|p| t.transform_point(p)));
    let corr = correspondences(&moved, &index, params.gate);
    if corr.len() < 3 {
        return Ok((t, failed_report(n_feat, iterations)));
    }

    let mut h = Mat6::zeros();
    for c in &corr.pairs {
        let q = target.points[c.target];
        let Some(n) = surface_normal(&index, &q, params.normal_k, params.normal_radius) else {
            continue;
        };
        let p = moved[c.source];
        let rot = -(n.transpose() * hat(&p));
        let j = nalgebra::Vector6::new(n.x, n.y, n.z, rot[0], rot[1], rot[2]);
        h += j * j.transpose();
    }
    let min_eig = SymmetricEigen::new(h).eigenvalues.min().max(0.0);

    Ok((
        t,
        MatchReport {
            eps_align: corr.mean_dist2(),
            n_feat,
            n_matched: corr.len(),
            converged,
            iterations,
            hessian_min_eig: min_eig,
        },
    ))
}

pub fn scan_file_name(index: usize) -> String {
    format!("scan_{index:06}.xyz")
}

pub fn render_scan(scan: &ScanFrame) -> String {
    let mut s = String::with_capacity(scan.len() * 36 + 64);
    let _ = writeln!(s, "# timestamp {}", stamp(scan.timestamp));
    let _ = writeln!(s, "count {}", scan.len());
    for p in &scan.points {
        let _ = writeln!(s, "{} {} {}", sig(p.x), sig(p.y), sig(p.z));
    }
    s
}

pub fn write_scan(path: &Path, scan: &ScanFrame) -> Result<()> {
    crate::tum::write_text(path, &render_scan(scan))
}

/// Parses a scan file. The timestamp comes from a `# timestamp <t>` comment;
/// `fallback_timestamp` is used when absent.
pub fn parse_scan(text: &str, origin: &Path, fallback_timestamp: Option<f64>) -> Result<ScanFrame> {
    let mut timestamp = fallback_timestamp;
    let mut expected: Option<usize> = None;
    let mut points = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(t) = comment.trim().strip_prefix("timestamp") {
                timestamp = Some(t.trim().parse().map_err(|e| {
                    Error::data(origin, format!("line {}: bad timestamp: {e}", lineno + 1))
                })?);
            }
            continue;
        }
        if expected.is_none() {
            let n = line
                .strip_prefix("count")
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::data(origin, format!("line {}: expected `count N`", lineno + 1)))?;
            expected = Some(n);
            points.reserve(n);
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<f64>);
        let (Some(Ok(x)), Some(Ok(y)), Some(Ok(z)), None) = (it.next(), it.next(), it.next(), it.next())
        else {
            return Err(Error::data(origin, format!("line {}: expected `x y z`", lineno + 1)));
        };
        points.push(Vec3::new(x, y, z));
    }
    let expected = expected.ok_or_else(|| Error::data(origin, "missing `count N` line"))?;
    if points.len() != expected {
        return Err(Error::data(
            origin,
            format!("declared {expected} points, found {}", points.len()),
        ));
    }
    let timestamp = timestamp.ok_or_else(|| Error::data(origin, "missing timestamp"))?;
    ScanFrame::new(timestamp, points).map_err(|e| Error::data(origin, e.to_string()))
}

pub fn read_scan(path: &Path) -> Result<ScanFrame> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scan(&text, path, None)
}

/// All `scan_*.xyz` files of a directory, in index order.
pub fn list_scans(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("scan_") && n.ends_with(".xyz"))
        })
        .collect();
    files.sort();
    Ok(files)
}

//! Vote casting, grid smoothing, peak finding and vote-to-peak assignment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::PointPrediction;
use crate::types::{normalize3, ClassId, Detection, LaserScan, ScanGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Blur per foreground class (wheelchair, walker, person), in cells.
    pub blur_sigmas: [f64; 3],
    pub nms_radius: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            blur_sigmas: [3.0, 2.5, 2.0],
            nms_radius: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VotingConfig {
    /// The grid spans `[-grid_extent, grid_extent]` on both axes.
    pub grid_extent: f64,
    pub cell_size: f64,
    /// Gaussian blur in cells.
    pub blur_sigma: f64,
    /// Beams cast a vote when their summed foreground probability exceeds
    /// this value.
    pub detection_threshold: f64,
    pub assignment_radius: f64,
    pub min_votes: usize,
    /// Weight vote positions and class distributions by vote weight.
    pub weighted_mean: bool,
    /// Use per-class grids and cross-class suppression.
    pub split: bool,
    pub split_config: SplitConfig,
}

impl Default for VotingConfig {
    fn default() -> Self {
        Self {
            grid_extent: 15.0,
            cell_size: 0.05,
            blur_sigma: 2.0,
            detection_threshold: 0.5,
            assignment_radius: 0.5,
            min_votes: 3,
            weighted_mean: false,
            split: false,
            split_config: SplitConfig::default(),
        }
    }
}

impl VotingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.grid_extent > 0.0) {
            return Err(Error::Config("cell_size and grid_extent must be > 0".into()));
        }
        if 2.0 * self.grid_extent / self.cell_size > 20_000.0 {
            return Err(Error::Config("vote grid too large".into()));
        }
        if !(self.assignment_radius > 0.0) {
            return Err(Error::Config("assignment_radius must be > 0".into()));
        }
        if !(self.blur_sigma >= 0.0) || self.split_config.blur_sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("blur sigmas must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.detection_threshold) {
            return Err(Error::Config("detection_threshold must be in [0, 1)".into()));
        }
        if !(self.split_config.nms_radius >= 0.0) {
            return Err(Error::Config("nms_radius must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vote {
    pub x: f64,
    pub y: f64,
    /// Foreground distribution (wheelchair, walker, person).
    pub class_probs: [f64; 3],
    /// Summed foreground probability of the casting beam.
    pub weight: f64,
    pub beam: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VoteSet {
    pub votes: Vec<Vote>,
}

/// Turns per-beam predictions into sensor-frame votes.
pub fn collect_votes(
    predictions: &[PointPrediction],
    scan: &LaserScan,
    geometry: &ScanGeometry,
    config: &VotingConfig,
) -> Result<VoteSet> {
    if predictions.len() != scan.ranges.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} beams",
            predictions.len(),
            scan.ranges.len()
        )));
    }
    let votes = predictions
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let weight = p.objectness();
            if !(weight > config.detection_threshold) {
                return None;
            }
            let angle = geometry.angle_unchecked(i as f64);
            let (c, s) = (angle.cos(), angle.sin());
            let r = scan.ranges[i];
            let (vx, vy) = p.vote;
            let x = r * c + c * vx - s * vy;
            let y = r * s + s * vx + c * vy;
            (x.is_finite() && y.is_finite()).then(|| Vote {
                x,
                y,
                class_probs: normalize3([p.class_probs[1], p.class_probs[2], p.class_probs[3]]),
                weight: weight.min(1.0),
                beam: i,
            })
        })
        .collect();
    Ok(VoteSet { votes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteGrid {
    pub extent: f64,
    pub cell_size: f64,
    /// Cells per side.
    pub n: usize,
    /// `data[row * n + col]`; rows follow y, columns follow x.
    pub data: Vec<f64>,
    /// Votes outside the grid that were not cast.
    pub dropped: usize,
}

impl VoteGrid {
    pub fn new(extent: f64, cell_size: f64) -> Self {
        let n = (2.0 * extent / cell_size).ceil() as usize;
        Self {
            extent,
            cell_size,
            n,
            data: vec![0.0; n * n],
            dropped: 0,
        }
    }

    /// `(row, col)` of the cell containing `(x, y)`.
    pub fn cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = ((x + self.extent) / self.cell_size).floor();
        let row = ((y + self.extent) / self.cell_size).floor();
        let n = self.n as f64;
        (col >= 0.0 && row >= 0.0 && col < n && row < n).then(|| (row as usize, col as usize))
    }

    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            -self.extent + (col as f64 + 0.5) * self.cell_size,
            -self.extent + (row as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    fn add(&mut self, x: f64, y: f64, w: f64) {
        match self.cell(x, y) {
            Some((r, c)) => self.data[r * self.n + c] += w,
            None => self.dropped += 1,
        }
    }

    /// Separable convolution with `kernel` (odd length, centered), zero
    /// outside the grid. Only the region around non-zero cells is touched.
    fn blur(&mut self, kernel: &[f64]) {
        if kernel.len() == 1 {
            return;
        }
        let n = self.n;
        let rad = kernel.len() / 2;
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for r in 0..n {
            for c in 0..n {
                if self.data[r * n + c] != 0.0 {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
        if r0 == usize::MAX {
            return;
        }
        let (rlo, rhi) = (r0.saturating_sub(rad), (r1 + rad).min(n - 1));
        let (clo, chi) = (c0.saturating_sub(rad), (c1 + rad).min(n - 1));
        let mut tmp = vec![0.0; n * n];
        for r in r0..=r1 {
            for c in clo..=chi {
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let cc = c as isize + k as isize - rad as isize;
                    if cc >= c0 as isize && cc <= c1 as isize {
                        acc += w * self.data[r * n + cc as usize];
                    }
                }
                tmp[r * n + c] = acc;
            }
        }
        for r in rlo..=rhi {
            for c in clo..=chi {
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let rr = r as isize + k as isize - rad as isize;
                    if rr >= r0 as isize && rr <= r1 as isize {
                        acc += w * tmp[rr as usize * n + c];
                    }
                }
                self.data[r * n + c] = acc;
            }
        }
    }
}

/// Normalized 1D Gaussian truncated at three sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let rad = (3.0 * sigma).ceil() as usize;
    if rad == 0 {
        return vec![1.0];
    }
    let k: Vec<f64> = (0..=2 * rad)
        .map(|i| {
            let d = i as f64 - rad as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn kernel_peak(sigma: f64) -> f64 {
    let k = gaussian_kernel(sigma);
    let c = k[k.len() / 2];
    c * c
}

fn cast_weighted(votes: &VoteSet, config: &VotingConfig, sigma: f64, weight: impl Fn(&Vote) -> f64) -> VoteGrid {
    let mut g = VoteGrid::new(config.grid_extent, config.cell_size);
    for v in &votes.votes {
        g.add(v.x, v.y, weight(v));
    }
    g.blur(&gaussian_kernel(sigma));
    g
}

/// Accumulates vote weights and blurs the grid.
pub fn cast_and_smooth(votes: &VoteSet, config: &VotingConfig) -> VoteGrid {
    cast_weighted(votes, config, config.blur_sigma, |v| v.weight)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub x: f64,
    pub y: f64,
    pub mass: f64,
}

fn maxima(grid: &VoteGrid, min_mass: f64) -> Vec<Peak> {
    let n = grid.n;
    let mut peaks = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let v = grid.data[r * n + c];
            if !(v > 0.0 && v >= min_mass) {
                continue;
            }
            let mut is_peak = true;
            'nb: for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= n as isize || cc >= n as isize {
                        continue;
                    }
                    let u = grid.data[rr as usize * n + cc as usize];
                    let earlier = (dr, dc) < (0, 0);
                    if u > v || (earlier && u == v) {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                let (x, y) = grid.center(r, c);
                peaks.push(Peak { row: r, col: c, x, y, mass: v });
            }
        }
    }
    peaks
}

/// Local maxima above the minimal mass, in row-major order. Equal
/// neighbors resolve to the lower row-major index.
pub fn find_maxima(grid: &VoteGrid, config: &VotingConfig) -> Vec<Peak> {
    let min_mass = config.min_votes as f64 * config.detection_threshold * kernel_peak(config.blur_sigma);
    maxima(grid, min_mass)
}

/// Index of the nearest peak within `radius` for every vote. Equidistant
/// peaks resolve to the lower index.
pub fn assign_votes(votes: &VoteSet, peaks: &[Peak], radius: f64) -> Vec<Option<usize>> {
    votes
        .votes
        .iter()
        .map(|v| {
            let mut best: Option<(f64, usize)> = None;
            for (k, p) in peaks.iter().enumerate() {
                let d = (v.x - p.x).hypot(v.y - p.y);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, k));
                }
            }
            best.filter(|&(d, _)| d <= radius).map(|(_, k)| k)
        })
        .collect()
}

fn aggregate(votes: &[&Vote], weighted: bool) -> (f64, f64, [f64; 3]) {
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sp = [0.0; 3];
    let mut sw = 0.0;
    for v in votes {
        let w = if weighted { v.weight } else { 1.0 };
        sx += w * v.x;
        sy += w * v.y;
        for k in 0..3 {
            sp[k] += w * v.class_probs[k];
        }
        sw += w;
    }
    (sx / sw, sy / sw, [sp[0] / sw, sp[1] / sw, sp[2] / sw])
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointVoteResult {
    pub detections: Vec<Detection>,
    /// Peak index per vote, `None` for discarded votes.
    pub assignments: Vec<Option<usize>>,
    /// Peak index behind each detection.
    pub detection_peaks: Vec<usize>,
}

/// Groups votes around their nearest peak and reports each group with at
/// least `min_votes` members at the mean of its votes.
pub fn joint_vote(votes: &VoteSet, peaks: &[Peak], config: &VotingConfig) -> JointVoteResult {
    let assignments = assign_votes(votes, peaks, config.assignment_radius);
    let mut groups: Vec<Vec<&Vote>> = vec![Vec::new(); peaks.len()];
    for (v, a) in votes.votes.iter().zip(&assignments) {
        if let Some(k) = a {
            groups[*k].push(v);
        }
    }
    let mut detections = Vec::new();
    let mut detection_peaks = Vec::new();
    for (k, g) in groups.iter().enumerate() {
        if g.len() < config.min_votes.max(1) {
            continue;
        }
        let (x, y, p) = aggregate(g, config.weighted_mean);
        detections.push(Detection::new(x, y, p, g.len()));
        detection_peaks.push(k);
    }
    JointVoteResult {
        detections,
        assignments,
        detection_peaks,
    }
}

/// Per-class grids with class-specific blur, then cross-class suppression
/// keeping the heaviest candidate within `nms_radius`.
pub fn split_vote(votes: &VoteSet, config: &VotingConfig) -> Vec<Detection> {
    let mut candidates: Vec<(f64, usize, Detection)> = Vec::new();
    for k in 0..3 {
        let sigma = config.split_config.blur_sigmas[k];
        let grid = cast_weighted(votes, config, sigma, |v| v.weight * v.class_probs[k]);
        let min_mass = config.min_votes as f64 * config.detection_threshold * kernel_peak(sigma) / 3.0;
        let peaks = maxima(&grid, min_mass);
        let assignments = assign_votes(votes, &peaks, config.assignment_radius);
        let mut groups: Vec<Vec<&Vote>> = vec![Vec::new(); peaks.len()];
        for (v, a) in votes.votes.iter().zip(&assignments) {
            if let Some(p) = a {
                groups[*p].push(v);
            }
        }
        for (p, g) in groups.iter().enumerate() {
            if g.len() < config.min_votes.max(1) {
                continue;
            }
            let (x, y, probs) = aggregate(g, config.weighted_mean);
            candidates.push((peaks[p].mass, k, Detection::new(x, y, probs, g.len())));
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<Detection> = Vec::new();
    for (_, _, d) in candidates {
        if kept
            .iter()
            .all(|q| (q.x - d.x).hypot(q.y - d.y) > config.split_config.nms_radius)
        {
            kept.push(d);
        }
    }
    kept
}

/// Full post-processing of one scan.
pub fn detect(
    predictions: &[PointPrediction],
    scan: &LaserScan,
    geometry: &ScanGeometry,
    config: &VotingConfig,
) -> Result<Vec<Detection>> {
    let votes = collect_votes(predictions, scan, geometry, config)?;
    if config.split {
        return Ok(split_vote(&votes, config));
    }
    let grid = cast_and_smooth(&votes, config);
    let peaks = find_maxima(&grid, config);
    Ok(joint_vote(&votes, &peaks, config).detections)
}

/// One detection line: `seq, [[x, y, conf, p_wc, p_wa, p_person], ...]`.
pub fn format_detections(seq: u64, dets: &[Detection]) -> String {
    let mut s = format!("{seq}, [");
    for (k, d) in dets.iter().enumerate() {
        if k > 0 {
            s.push_str(", ");
        }
        write!(
            s,
            "[{}, {}, {}, {}, {}, {}]",
            d.x, d.y, d.confidence, d.class_probs[0], d.class_probs[1], d.class_probs[2]
        )
        .unwrap();
    }
    s.push(']');
    s
}

pub fn write_detections(path: &Path, frames: &BTreeMap<u64, Vec<Detection>>) -> Result<()> {
    let mut out = String::new();
    for (seq, dets) in frames {
        out.push_str(&format_detections(*seq, dets));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_detections(path: &Path) -> Result<BTreeMap<u64, Vec<Detection>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (seq, rest) = line
            .split_once(',')
            .ok_or_else(|| perr(ln, "expected 'seq, [...]'".into()))?;
        let seq: u64 = seq
            .trim()
            .parse()
            .map_err(|_| perr(ln, format!("bad seq '{}'", seq.trim())))?;
        let rows: Vec<Vec<f64>> =
            serde_json::from_str(rest.trim()).map_err(|e| perr(ln, format!("bad detection list: {e}")))?;
        let mut dets = Vec::with_capacity(rows.len());
        for r in rows {
            if r.len() != 6 || !r.iter().all(|v| v.is_finite()) {
                return Err(perr(ln, "detections need six finite values".into()));
            }
            dets.push(Detection {
                x: r[0],
                y: r[1],
                confidence: r[2],
                class_probs: [r[3], r[4], r[5]],
                supporting_vote_count: 0,
            });
        }
        if out.insert(seq, dets).is_some() {
            return Err(perr(ln, format!("seq {seq} listed twice")));
        }
    }
    Ok(out)
}

/// Class of a foreground index in detection rows.
pub fn class_of_column(k: usize) -> ClassId {
    ClassId::FOREGROUND[k]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pred(p: [f64; 4], vote: (f64, f64)) -> PointPrediction {
        PointPrediction { class_probs: p, vote }
    }

    fn vote(x: f64, y: f64) -> Vote {
        Vote {
            x,
            y,
            class_probs: [0.0, 0.0, 1.0],
            weight: 1.0,
            beam: 0,
        }
    }

    fn odd_geom() -> ScanGeometry {
        ScanGeometry::new(3, 2.0, 12.5, 15.0).unwrap()
    }

    #[test]
    fn background_predictions_cast_nothing() {
        let g = odd_geom();
        let scan = LaserScan::new(0, 0.0, vec![2.0; 3]);
        let preds = vec![pred([1.0, 0.0, 0.0, 0.0], (0.0, 0.0)); 3];
        assert!(collect_votes(&preds, &scan, &g, &VotingConfig::default()).unwrap().votes.is_empty());
    }

    #[test]
    fn vote_weight_and_distribution() {
        let g = odd_geom();
        let scan = LaserScan::new(0, 0.0, vec![2.0; 3]);
        let mut preds = vec![pred([1.0, 0.0, 0.0, 0.0], (0.0, 0.0)); 3];
        preds[1] = pred([0.1, 0.2, 0.3, 0.4], (0.1, 0.0));
        let cfg = VotingConfig { detection_threshold: 0.5, ..Default::default() };
        let vs = collect_votes(&preds, &scan, &g, &cfg).unwrap();
        assert_eq!(vs.votes.len(), 1);
        let v = vs.votes[0];
        assert_abs_diff_eq!(v.weight, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(v.class_probs[0], 2.0 / 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.class_probs[1], 3.0 / 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.class_probs[2], 4.0 / 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.x, 2.1, epsilon = 1e-12);
        assert_abs_diff_eq!(v.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn vote_rotates_back_to_sensor_frame() {
        let g = ScanGeometry::new(3, std::f64::consts::PI, 12.5, 15.0).unwrap();
        let scan = LaserScan::new(0, 0.0, vec![2.0; 3]);
        let preds = vec![pred([0.0, 0.0, 0.0, 1.0], (0.5, 0.25)); 3];
        let vs = collect_votes(&preds, &scan, &g, &VotingConfig::default()).unwrap();
        // beam 2 points along +y, so the along-beam offset adds to y and the
        // left offset points to -x
        assert_abs_diff_eq!(vs.votes[2].x, -0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(vs.votes[2].y, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn empty_votes_give_zero_grid_and_no_peaks() {
        let cfg = VotingConfig::default();
        let g = cast_and_smooth(&VoteSet::default(), &cfg);
        assert!(g.data.iter().all(|&v| v == 0.0));
        assert!(find_maxima(&g, &cfg).is_empty());
    }

    #[test]
    fn zero_sigma_keeps_single_cell() {
        let cfg = VotingConfig { blur_sigma: 0.0, ..Default::default() };
        let g = cast_and_smooth(&VoteSet { votes: vec![vote(1.01, -2.02)] }, &cfg);
        assert_eq!(g.data.iter().filter(|&&v| v != 0.0).count(), 1);
        let (r, c) = g.cell(1.01, -2.02).unwrap();
        assert_eq!(g.get(r, c), 1.0);
    }

    #[test]
    fn smoothing_conserves_interior_mass() {
        let cfg = VotingConfig::default();
        let votes = VoteSet {
            votes: (0..20).map(|k| Vote { weight: 0.5 + 0.02 * k as f64, ..vote(k as f64 * 0.3 - 3.0, 1.0) }).collect(),
        };
        let total: f64 = votes.votes.iter().map(|v| v.weight).sum();
        let g = cast_and_smooth(&votes, &cfg);
        assert_abs_diff_eq!(g.total(), total, epsilon = 1e-6);
    }

    #[test]
    fn kernel_is_normalized() {
        for s in [0.5, 1.0, 2.0, 3.3] {
            let k = gaussian_kernel(s);
            assert_eq!(k.len(), 2 * (3.0 * s).ceil() as usize + 1);
            assert_abs_diff_eq!(k.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_vote_single_peak() {
        let cfg = VotingConfig { min_votes: 1, ..Default::default() };
        let votes = VoteSet { votes: vec![vote(2.0, 3.0)] };
        let g = cast_and_smooth(&votes, &cfg);
        let p = find_maxima(&g, &cfg);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].row, p[0].col), g.cell(2.0, 3.0).unwrap());
    }

    #[test]
    fn plateau_resolves_to_lowest_index() {
        let mut g = VoteGrid::new(1.0, 0.5);
        g.data[5] = 1.0;
        g.data[6] = 1.0;
        let p = maxima(&g, 0.0);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].row, p[0].col), (1, 1));
    }

    #[test]
    fn two_distant_clusters_give_two_peaks() {
        let cfg = VotingConfig::default();
        let mut votes = Vec::new();
        for k in 0..5 {
            votes.push(vote(1.0 + 0.01 * k as f64, 0.0));
            votes.push(vote(4.0 + 0.01 * k as f64, 0.0));
        }
        let vs = VoteSet { votes };
        let g = cast_and_smooth(&vs, &cfg);
        let peaks = find_maxima(&g, &cfg);
        // brute force: strict local maxima over the whole grid
        let min_mass = 3.0 * 0.5 * kernel_peak(2.0);
        let mut brute = 0;
        for r in 1..g.n - 1 {
            for c in 1..g.n - 1 {
                let v = g.get(r, c);
                let mut ok = v > 0.0 && v >= min_mass;
                for dr in [-1isize, 0, 1] {
                    for dc in [-1isize, 0, 1] {
                        if (dr, dc) != (0, 0) && g.get((r as isize + dr) as usize, (c as isize + dc) as usize) >= v {
                            ok = false;
                        }
                    }
                }
                brute += ok as usize;
            }
        }
        assert_eq!(peaks.len(), 2);
        assert_eq!(brute, 2);
        let res = joint_vote(&vs, &peaks, &cfg);
        assert_eq!(res.detections.len(), 2);
    }

    #[test]
    fn identical_votes_give_exact_position() {
        let cfg = VotingConfig::default();
        let p = (1.2345, -0.9876);
        let vs = VoteSet { votes: vec![vote(p.0, p.1); 4] };
        let peaks = find_maxima(&cast_and_smooth(&vs, &cfg), &cfg);
        let d = joint_vote(&vs, &peaks, &cfg).detections;
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].x, d[0].y), p);
        assert_eq!(d[0].supporting_vote_count, 4);
    }

    #[test]
    fn stray_vote_is_discarded() {
        let cfg = VotingConfig { min_votes: 1, ..Default::default() };
        let peaks = vec![Peak { row: 0, col: 0, x: 0.0, y: 0.0, mass: 1.0 }];
        let vs = VoteSet { votes: vec![vote(1.0, 0.0)] };
        let r = joint_vote(&vs, &peaks, &cfg);
        assert_eq!(r.assignments, vec![None]);
        assert!(r.detections.is_empty());
    }

    #[test]
    fn split_matches_joint_on_single_class() {
        let cfg = VotingConfig::default();
        let vs = VoteSet {
            votes: (0..8).map(|k| Vote { class_probs: [0.05, 0.05, 0.9], ..vote(3.0 + 0.01 * k as f64, 1.0) }).collect(),
        };
        let joint = joint_vote(&vs, &find_maxima(&cast_and_smooth(&vs, &cfg), &cfg), &cfg).detections;
        let split = split_vote(&vs, &cfg);
        assert_eq!(joint.len(), 1);
        assert_eq!(split.len(), joint.len());
        assert!(split_vote(&VoteSet::default(), &cfg).is_empty());
    }

    #[test]
    fn split_suppresses_across_classes() {
        let cfg = VotingConfig::default();
        let mut votes = Vec::new();
        for k in 0..6 {
            votes.push(Vote { class_probs: [0.0, 0.0, 1.0], ..vote(2.0 + 0.005 * k as f64, 0.0) });
            votes.push(Vote { class_probs: [1.0, 0.0, 0.0], ..vote(2.1 + 0.005 * k as f64, 0.0) });
        }
        assert_eq!(split_vote(&VoteSet { votes }, &cfg).len(), 1);
    }

    #[test]
    fn detection_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        let mut m = BTreeMap::new();
        m.insert(3, vec![Detection::new(1.5, -0.25, [0.1, 0.2, 0.7], 5)]);
        m.insert(8, vec![]);
        write_detections(&p, &m).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("3, [[1.5, -0.25, 0.7"));
        assert!(text.contains("\n8, []\n"));
        let back = read_detections(&p).unwrap();
        assert_eq!(back[&3][0].class_probs, m[&3][0].class_probs);
        assert_eq!(back[&3][0].confidence, m[&3][0].confidence);
        assert!(back[&8].is_empty());
    }

    proptest! {
        #[test]
        fn lower_threshold_never_loses_votes(
            probs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 5),
            t1 in 0.0f64..0.99, t2 in 0.0f64..0.99,
        ) {
            let g = ScanGeometry::new(5, 1.0, 12.5, 15.0).unwrap();
            let scan = LaserScan::new(0, 0.0, vec![3.0; 5]);
            let preds: Vec<_> = probs.iter().map(|&(a, b, c, d)| {
                let s = a + b + c + d + 1e-9;
                pred([a / s, b / s, c / s, d / s], (0.0, 0.0))
            }).collect();
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let n = |t: f64| collect_votes(&preds, &scan, &g, &VotingConfig { detection_threshold: t, ..Default::default() }).unwrap().votes.len();
            prop_assert!(n(lo) >= n(hi));
        }

        #[test]
        fn detection_probs_are_normalized(pts in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0), 1..30)) {
            let cfg = VotingConfig { min_votes: 1, ..Default::default() };
            let vs = VoteSet { votes: pts.iter().map(|&(x, y, a, b, c)| Vote { class_probs: normalize3([a, b, c]), ..vote(x, y) }).collect() };
            let peaks = find_maxima(&cast_and_smooth(&vs, &cfg), &cfg);
            for d in joint_vote(&vs, &peaks, &cfg).detections {
                prop_assert!((d.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

//! Cutout generation: fixed real-world windows around each beam, stacked over
//! a short history of scans, plus per-beam training targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{normalize_angle, Annotation, ClassId, LaserScan, OdometryFrame, ScanGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdometryMode {
    None,
    Rotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    EachFrame,
    FixedLocation,
}

/// Which temporal cutout construction produced a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalVariant {
    /// Every past frame re-centers on its own range at beam `i`.
    Naive,
    /// All frames share the current anchor depth.
    FixedLocation,
    /// Shared anchor depth, past beams shifted by the odometry rotation.
    OdometryCorrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocConfig {
    /// Real-world width of a cutout window in meters.
    pub window_width: f64,
    pub num_cutout_points: usize,
    /// Number of past frames stacked behind the current one.
    pub time_window: usize,
    pub depth_clamp: f64,
    pub odometry_mode: OdometryMode,
    pub center_mode: CenterMode,
    /// Radius around an annotation within which beams receive its label.
    pub label_radius: f64,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            window_width: 1.0,
            num_cutout_points: 48,
            time_window: 5,
            depth_clamp: 1.0,
            odometry_mode: OdometryMode::Rotation,
            center_mode: CenterMode::FixedLocation,
            label_radius: 0.35,
        }
    }
}

impl PreprocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_width > 0.0 && self.window_width.is_finite()) {
            return Err(Error::Config("window_width must be > 0".into()));
        }
        if self.num_cutout_points < 2 {
            return Err(Error::Config("num_cutout_points must be >= 2".into()));
        }
        if !(self.depth_clamp > 0.0 && self.depth_clamp.is_finite()) {
            return Err(Error::Config("depth_clamp must be > 0".into()));
        }
        if !(self.label_radius > 0.0) {
            return Err(Error::Config("label_radius must be > 0".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.time_window + 1
    }

    pub fn variant(&self) -> TemporalVariant {
        match (self.center_mode, self.odometry_mode) {
            (CenterMode::EachFrame, _) => TemporalVariant::Naive,
            (CenterMode::FixedLocation, OdometryMode::None) => TemporalVariant::FixedLocation,
            (CenterMode::FixedLocation, OdometryMode::Rotation) => {
                TemporalVariant::OdometryCorrected
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoutAnchor {
    pub beam_index: usize,
    pub center_range: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cutout {
    pub values: Vec<f64>,
    pub anchor: CutoutAnchor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalCutout {
    /// Current frame first.
    pub frames: Vec<Cutout>,
    pub variant: TemporalVariant,
}

impl TemporalCutout {
    pub fn num_points(&self) -> usize {
        self.frames.first().map_or(0, |f| f.values.len())
    }

    /// Frame-major flat copy (`frames × points`).
    pub fn flatten(&self) -> Vec<f64> {
        self.frames.iter().flat_map(|f| f.values.iter().copied()).collect()
    }
}

/// Per-frame beam offsets induced by sensor rotation, current frame first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OdometryShift {
    pub delta_beams: Vec<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointTarget {
    pub class_label: ClassId,
    /// Offset from the beam endpoint to the object center; x along the beam.
    pub vote_offset: (f64, f64),
    pub has_vote: bool,
}

impl PointTarget {
    pub fn background() -> Self {
        Self {
            class_label: ClassId::Background,
            vote_offset: (0.0, 0.0),
            has_vote: false,
        }
    }
}

/// Angle subtended by a window of width `width` seen at distance `dist`.
pub fn opening_angle(width: f64, dist: f64) -> Result<f64> {
    if !(width > 0.0) || !(dist > 0.0) {
        return Err(Error::Config(format!(
            "opening_angle needs positive inputs, got width={width} dist={dist}"
        )));
    }
    Ok(2.0 * (width / (2.0 * dist)).atan())
}

/// Writes the normalized window for `anchor` into `out`.
pub fn cut_into(
    ranges: &[f64],
    geometry: &ScanGeometry,
    anchor: CutoutAnchor,
    config: &PreprocConfig,
    out: &mut [f64],
) -> Result<()> {
    let n = ranges.len();
    if anchor.beam_index >= n {
        return Err(Error::BeamIndex {
            index: anchor.beam_index as i64,
            num_beams: n,
        });
    }
    if out.len() != config.num_cutout_points {
        return Err(Error::Shape(format!(
            "cutout buffer has {} slots, expected {}",
            out.len(),
            config.num_cutout_points
        )));
    }
    let r = anchor.center_range;
    let half = 0.5 * opening_angle(config.window_width, r)? / geometry.angular_increment();
    let center = anchor.beam_index as f64;
    let start = (center - half).round();
    let end = (center + half).round();
    let read = |j: f64| -> f64 {
        if j < 0.0 || j >= n as f64 {
            geometry.max_range
        } else {
            ranges[j as usize]
        }
    };
    let d = config.depth_clamp;
    let step = (end - start) / (out.len() - 1) as f64;
    for (k, slot) in out.iter_mut().enumerate() {
        let q = start + step * k as f64;
        let lo = q.floor();
        let frac = q - lo;
        let v = if frac == 0.0 {
            read(lo)
        } else {
            read(lo) * (1.0 - frac) + read(lo + 1.0) * frac
        };
        *slot = (v - r).clamp(-d, d) / d;
    }
    Ok(())
}

pub fn cut(
    scan: &LaserScan,
    geometry: &ScanGeometry,
    anchor: CutoutAnchor,
    config: &PreprocConfig,
) -> Result<Cutout> {
    let mut values = vec![0.0; config.num_cutout_points];
    cut_into(&scan.ranges, geometry, anchor, config, &mut values)?;
    Ok(Cutout { values, anchor })
}

/// Positive center range for an anchor; zero-range beams fall back to a
/// small positive depth.
fn anchor_range(r: f64) -> f64 {
    if r > 1e-3 {
        r
    } else {
        1e-3
    }
}

/// Beam shift of each window frame relative to the current one, current
/// frame first. Beam `j = i - delta` in a past frame looks at the same world
/// bearing as beam `i` now.
pub fn odometry_shift(odometry: &[OdometryFrame], geometry: &ScanGeometry) -> OdometryShift {
    let Some(current) = odometry.last() else {
        return OdometryShift {
            delta_beams: Vec::new(),
        };
    };
    let inc = geometry.angular_increment();
    let limit = geometry.num_beams as i64 - 1;
    let delta_beams = odometry
        .iter()
        .rev()
        .map(|past| {
            let d = (normalize_angle(past.yaw - current.yaw) / inc).round() as i64;
            d.clamp(-limit, limit)
        })
        .collect();
    OdometryShift { delta_beams }
}

/// Anchors for beam `beam` over a window of scans ordered oldest to newest.
/// The result is ordered current frame first.
pub fn temporal_anchors(
    beam: usize,
    window: &[&LaserScan],
    odometry: Option<&[OdometryFrame]>,
    geometry: &ScanGeometry,
    config: &PreprocConfig,
) -> Result<Vec<CutoutAnchor>> {
    let current = window
        .last()
        .ok_or_else(|| Error::Empty("temporal window".into()))?;
    if beam >= geometry.num_beams || beam >= current.ranges.len() {
        return Err(Error::BeamIndex {
            index: beam as i64,
            num_beams: geometry.num_beams,
        });
    }
    let shifts = match config.odometry_mode {
        OdometryMode::None => vec![0; window.len()],
        OdometryMode::Rotation => {
            let odom = odometry.ok_or(Error::MissingOdometry(current.seq))?;
            if odom.len() != window.len() {
                return Err(Error::MissingOdometry(current.seq));
            }
            odometry_shift(odom, geometry).delta_beams
        }
    };
    let current_range = anchor_range(current.ranges[beam]);
    let last = geometry.num_beams as i64 - 1;
    Ok(window
        .iter()
        .rev()
        .zip(shifts)
        .map(|(scan, delta)| {
            let j = (beam as i64 - delta).clamp(0, last) as usize;
            let center_range = match config.center_mode {
                CenterMode::EachFrame => anchor_range(scan.ranges[j]),
                CenterMode::FixedLocation => current_range,
            };
            CutoutAnchor {
                beam_index: j,
                center_range,
            }
        })
        .collect())
}

/// Stacked cutouts for beam `beam`; `window` is ordered oldest to newest.
pub fn build_temporal_cutout(
    window: &[&LaserScan],
    odometry: Option<&[OdometryFrame]>,
    beam: usize,
    geometry: &ScanGeometry,
    config: &PreprocConfig,
) -> Result<TemporalCutout> {
    let anchors = temporal_anchors(beam, window, odometry, geometry, config)?;
    let frames = anchors
        .into_iter()
        .zip(window.iter().rev())
        .map(|(anchor, scan)| cut(scan, geometry, anchor, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(TemporalCutout {
        frames,
        variant: config.variant(),
    })
}

/// Writes the flattened (`frames × points`) temporal cutouts of `beams` into
/// `out`, which must hold `beams.len() * frames * points` values.
pub fn temporal_cutouts_into(
    window: &[&LaserScan],
    odometry: Option<&[OdometryFrame]>,
    beams: &[usize],
    geometry: &ScanGeometry,
    config: &PreprocConfig,
    out: &mut [f64],
) -> Result<()> {
    let frames = window.len();
    let np = config.num_cutout_points;
    let per = frames * np;
    if out.len() != beams.len() * per {
        return Err(Error::Shape(format!(
            "cutout batch buffer has {} slots, expected {}",
            out.len(),
            beams.len() * per
        )));
    }
    for (&beam, chunk) in beams.iter().zip(out.chunks_mut(per)) {
        let anchors = temporal_anchors(beam, window, odometry, geometry, config)?;
        for ((anchor, scan), slot) in anchors
            .into_iter()
            .zip(window.iter().rev())
            .zip(chunk.chunks_mut(np))
        {
            cut_into(&scan.ranges, geometry, anchor, config, slot)?;
        }
    }
    Ok(())
}

/// Per-beam class labels and center votes from the annotations of one scan.
pub fn make_training_targets(
    scan: &LaserScan,
    geometry: &ScanGeometry,
    annotations: &[Annotation],
    label_radius: f64,
) -> Vec<PointTarget> {
    scan.ranges
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let angle = geometry.angle_unchecked(i as f64);
            let (c, s) = (angle.cos(), angle.sin());
            let (ex, ey) = (r * c, r * s);
            let mut best: Option<(f64, &Annotation)> = None;
            for a in annotations {
                let d = (a.x - ex).hypot(a.y - ey);
                let better = match best {
                    None => true,
                    Some((bd, ba)) => d < bd || (d == bd && a.class_id < ba.class_id),
                };
                if better {
                    best = Some((d, a));
                }
            }
            match best {
                Some((d, a)) if d <= label_radius => {
                    let (dx, dy) = (a.x - ex, a.y - ey);
                    PointTarget {
                        class_label: a.class_id,
                        vote_offset: (c * dx + s * dy, -s * dx + c * dy),
                        has_vote: true,
                    }
                }
                _ => PointTarget::background(),
            }
        })
        .collect()
}

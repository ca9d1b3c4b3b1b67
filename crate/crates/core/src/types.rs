//! Sensor geometry and the plain value types shared across the pipeline.
//!
//! Frame convention: x forward, y left, beam angle 0 at the scan center and
//! increasing counter-clockwise.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Object classes. `Background` is never a valid annotation class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassId {
    Background = 0,
    Wheelchair = 1,
    Walker = 2,
    Person = 3,
}

impl ClassId {
    pub const COUNT: usize = 4;
    pub const ALL: [ClassId; 4] = [
        ClassId::Background,
        ClassId::Wheelchair,
        ClassId::Walker,
        ClassId::Person,
    ];
    pub const FOREGROUND: [ClassId; 3] = [ClassId::Wheelchair, ClassId::Walker, ClassId::Person];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ClassId> {
        Self::ALL.get(i).copied()
    }

    /// Index into a foreground-only distribution (wheelchair = 0).
    pub fn fg_index(self) -> Option<usize> {
        match self {
            ClassId::Background => None,
            c => Some(c as usize - 1),
        }
    }

    pub fn from_fg_index(i: usize) -> Option<ClassId> {
        Self::FOREGROUND.get(i).copied()
    }

    pub fn is_foreground(self) -> bool {
        self != ClassId::Background
    }

    /// Short name used by the dataset file extensions (`wc`, `wa`, `wp`).
    pub fn short_name(self) -> &'static str {
        match self {
            ClassId::Background => "bg",
            ClassId::Wheelchair => "wc",
            ClassId::Walker => "wa",
            ClassId::Person => "wp",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Background => "background",
            ClassId::Wheelchair => "wheelchair",
            ClassId::Walker => "walker",
            ClassId::Person => "person",
        }
    }
}

impl std::str::FromStr for ClassId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "background" | "bg" => Ok(ClassId::Background),
            "wheelchair" | "wc" => Ok(ClassId::Wheelchair),
            "walker" | "wa" => Ok(ClassId::Walker),
            "person" | "wp" => Ok(ClassId::Person),
            other => Err(Error::Config(format!("unknown class '{other}'"))),
        }
    }
}

/// Beam layout of a planar range scanner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanGeometry {
    pub num_beams: usize,
    /// Total angular span in radians.
    pub fov: f64,
    /// Scan rate in Hz.
    pub scan_rate: f64,
    pub max_range: f64,
}

impl Default for ScanGeometry {
    fn default() -> Self {
        Self {
            num_beams: 450,
            fov: 225f64.to_radians(),
            scan_rate: 12.5,
            max_range: 15.0,
        }
    }
}

impl ScanGeometry {
    pub fn new(num_beams: usize, fov: f64, scan_rate: f64, max_range: f64) -> Result<Self> {
        let g = Self {
            num_beams,
            fov,
            scan_rate,
            max_range,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_beams < 2 {
            return Err(Error::Config(format!(
                "num_beams must be >= 2, got {}",
                self.num_beams
            )));
        }
        if !(self.fov > 0.0 && self.fov.is_finite()) {
            return Err(Error::Config(format!("fov must be > 0, got {}", self.fov)));
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(Error::Config(format!(
                "max_range must be > 0, got {}",
                self.max_range
            )));
        }
        if !(self.scan_rate > 0.0 && self.scan_rate.is_finite()) {
            return Err(Error::Config(format!(
                "scan_rate must be > 0, got {}",
                self.scan_rate
            )));
        }
        Ok(())
    }

    pub fn angular_increment(&self) -> f64 {
        self.fov / (self.num_beams - 1) as f64
    }

    /// Angle of beam `i`, or an error when `i` is out of range.
    pub fn beam_angle(&self, i: usize) -> Result<f64> {
        if i >= self.num_beams {
            return Err(Error::BeamIndex {
                index: i as i64,
                num_beams: self.num_beams,
            });
        }
        Ok(self.angle_unchecked(i as f64))
    }

    /// Angle at a fractional beam coordinate; no bounds check.
    pub fn angle_unchecked(&self, i: f64) -> f64 {
        -0.5 * self.fov + i * self.angular_increment()
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.num_beams)
            .map(|i| self.angle_unchecked(i as f64))
            .collect()
    }

    /// Fractional beam coordinate of an angle (may fall outside the scan).
    pub fn beam_coordinate(&self, angle: f64) -> f64 {
        (angle + 0.5 * self.fov) / self.angular_increment()
    }
}

pub fn beam_angle(geometry: &ScanGeometry, i: usize) -> Result<f64> {
    geometry.beam_angle(i)
}

pub fn polar_to_cart(range: f64, angle: f64) -> (f64, f64) {
    (range * angle.cos(), range * angle.sin())
}

pub fn cart_to_polar(x: f64, y: f64) -> (f64, f64) {
    (x.hypot(y), y.atan2(x))
}

/// Wrap an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaserScan {
    pub seq: u64,
    pub timestamp: f64,
    pub ranges: Vec<f64>,
}

impl LaserScan {
    pub fn new(seq: u64, timestamp: f64, ranges: Vec<f64>) -> Self {
        Self {
            seq,
            timestamp,
            ranges,
        }
    }

    /// Endpoint of beam `i` in the sensor frame.
    pub fn endpoint(&self, geometry: &ScanGeometry, i: usize) -> (f64, f64) {
        polar_to_cart(self.ranges[i], geometry.angle_unchecked(i as f64))
    }

    pub fn check_geometry(&self, geometry: &ScanGeometry) -> Result<()> {
        if self.ranges.len() != geometry.num_beams {
            return Err(Error::Shape(format!(
                "scan {} has {} ranges, geometry expects {}",
                self.seq,
                self.ranges.len(),
                geometry.num_beams
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryFrame {
    pub seq: u64,
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl OdometryFrame {
    pub fn new(seq: u64, timestamp: f64, x: f64, y: f64, yaw: f64) -> Self {
        Self {
            seq,
            timestamp,
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub seq: u64,
    pub class_id: ClassId,
    pub x: f64,
    pub y: f64,
}

impl Annotation {
    pub fn new(seq: u64, class_id: ClassId, x: f64, y: f64) -> Result<Self> {
        if !class_id.is_foreground() {
            return Err(Error::Config(
                "annotations must carry a foreground class".into(),
            ));
        }
        Ok(Self {
            seq,
            class_id,
            x,
            y,
        })
    }
}

/// A continuous-coordinate detection with a foreground class distribution
/// ordered (wheelchair, walker, person).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub class_probs: [f64; 3],
    pub confidence: f64,
    pub supporting_vote_count: usize,
}

impl Detection {
    /// Builds a detection, renormalizing `class_probs` and deriving the
    /// confidence from the dominant class.
    pub fn new(x: f64, y: f64, class_probs: [f64; 3], supporting_vote_count: usize) -> Self {
        let probs = normalize3(class_probs);
        Self {
            x,
            y,
            class_probs: probs,
            confidence: probs.iter().copied().fold(0.0, f64::max),
            supporting_vote_count,
        }
    }

    pub fn dominant_class(&self) -> ClassId {
        let mut best = 0;
        for k in 1..3 {
            if self.class_probs[k] > self.class_probs[best] {
                best = k;
            }
        }
        ClassId::FOREGROUND[best]
    }
}

pub(crate) fn normalize3(p: [f64; 3]) -> [f64; 3] {
    let s: f64 = p.iter().sum();
    if s > 0.0 && s.is_finite() {
        [p[0] / s, p[1] / s, p[2] / s]
    } else {
        [1.0 / 3.0; 3]
    }
}

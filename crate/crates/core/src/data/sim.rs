//! Raycasting 2D world: wall segments, walking leg pairs and round blobs
//! (wheelchairs, walkers) observed by a moving range sensor.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{is_annotated_frame, write_sequence, ScanSequence, SequencePaths};
use crate::error::{Error, Result};
use crate::types::{normalize_angle, Annotation, ClassId, LaserScan, OdometryFrame, ScanGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Unwrapped heading.
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub t: f64,
    pub pose: Pose,
}

/// Piecewise-linear pose over time, held constant outside the keyframes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    keys: Vec<Keyframe>,
    /// Path length travelled up to each keyframe.
    dist: Vec<f64>,
}

impl Trajectory {
    pub fn new(keys: Vec<Keyframe>) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::Config("trajectory needs at least one keyframe".into()));
        }
        if keys.windows(2).any(|w| !(w[1].t >= w[0].t)) {
            return Err(Error::Config("trajectory keyframes must be time-ordered".into()));
        }
        let mut dist = vec![0.0];
        for w in keys.windows(2) {
            let d = (w[1].pose.x - w[0].pose.x).hypot(w[1].pose.y - w[0].pose.y);
            dist.push(dist.last().unwrap() + d);
        }
        Ok(Self { keys, dist })
    }

    pub fn fixed(pose: Pose) -> Self {
        Self::new(vec![Keyframe { t: 0.0, pose }]).expect("one keyframe")
    }

    pub fn keys(&self) -> &[Keyframe] {
        &self.keys
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let k = self.keys.partition_point(|kf| kf.t <= t);
        if k == 0 {
            return (0, 0.0);
        }
        if k == self.keys.len() {
            return (k - 1, 0.0);
        }
        let (a, b) = (&self.keys[k - 1], &self.keys[k]);
        let w = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 0.0 };
        (k - 1, w)
    }

    pub fn pose_at(&self, t: f64) -> Pose {
        let (i, w) = self.locate(t);
        let a = self.keys[i].pose;
        if w == 0.0 {
            return a;
        }
        let b = self.keys[i + 1].pose;
        Pose {
            x: a.x + w * (b.x - a.x),
            y: a.y + w * (b.y - a.y),
            yaw: a.yaw + w * (b.yaw - a.yaw),
        }
    }

    pub fn distance_at(&self, t: f64) -> f64 {
        let (i, w) = self.locate(t);
        if w == 0.0 {
            return self.dist[i];
        }
        self.dist[i] + w * (self.dist[i + 1] - self.dist[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentKind {
    /// Two legs whose center distance swings between `separation_min`
    /// (side by side) and `separation_max` (full stride).
    LegPair {
        leg_radius: f64,
        separation_min: f64,
        separation_max: f64,
        /// Path length of one full gait cycle.
        stride: f64,
        phase: f64,
    },
    Blob { radius: f64, class: ClassId },
}

impl AgentKind {
    pub fn class(&self) -> ClassId {
        match self {
            AgentKind::LegPair { .. } => ClassId::Person,
            AgentKind::Blob { class, .. } => *class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub kind: AgentKind,
    pub trajectory: Trajectory,
}

impl Agent {
    /// Circles `(x, y, r)` making up the agent at time `t`.
    pub fn circles(&self, t: f64) -> Vec<(f64, f64, f64)> {
        let p = self.trajectory.pose_at(t);
        match self.kind {
            AgentKind::Blob { radius, .. } => vec![(p.x, p.y, radius)],
            AgentKind::LegPair {
                leg_radius,
                separation_min,
                separation_max,
                stride,
                phase,
            } => {
                let gait = phase + TAU * self.trajectory.distance_at(t) / stride;
                let lateral = separation_min / 2.0;
                let swing = 0.5 * (separation_max.powi(2) - separation_min.powi(2)).sqrt();
                let along = swing * gait.sin();
                let (c, s) = (p.yaw.cos(), p.yaw.sin());
                let leg = |fwd: f64, side: f64| (p.x + c * fwd - s * side, p.y + s * fwd + c * side, leg_radius);
                vec![leg(along, lateral), leg(-along, -lateral)]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub geometry: ScanGeometry,
    pub walls: Vec<Segment>,
    pub agents: Vec<Agent>,
    pub sensor: Trajectory,
    /// Standard deviation of additive range noise on hit beams, meters.
    pub noise_sigma: f64,
    pub noise_seed: u64,
    /// Beams that must hit an agent for it to be annotated.
    pub min_visible_beams: usize,
}

impl Scene {
    pub fn new(geometry: ScanGeometry, walls: Vec<Segment>, agents: Vec<Agent>, sensor: Trajectory) -> Self {
        Self {
            geometry,
            walls,
            agents,
            sensor,
            noise_sigma: 0.0,
            noise_seed: 0,
            min_visible_beams: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        for a in &self.agents {
            match a.kind {
                AgentKind::LegPair {
                    leg_radius,
                    separation_min,
                    separation_max,
                    stride,
                    ..
                } => {
                    if !(leg_radius > 0.0) || !(separation_min > 2.0 * leg_radius) {
                        return Err(Error::Config(
                            "legs need radius > 0 and separation > 2 radius".into(),
                        ));
                    }
                    if !(separation_max >= separation_min) || !(stride > 0.0) {
                        return Err(Error::Config("invalid gait parameters".into()));
                    }
                }
                AgentKind::Blob { radius, class } => {
                    if !(radius > 0.0) || !class.is_foreground() {
                        return Err(Error::Config("blobs need radius > 0 and a foreground class".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Distance along the unit ray `(o, d)` to segment `s`, if hit ahead.
pub fn ray_segment(o: (f64, f64), d: (f64, f64), s: &Segment) -> Option<f64> {
    let e = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let denom = d.0 * e.1 - d.1 * e.0;
    if denom.abs() < 1e-15 {
        return None;
    }
    let w = (s.a.0 - o.0, s.a.1 - o.1);
    let t = (w.0 * e.1 - w.1 * e.0) / denom;
    let u = (w.0 * d.1 - w.1 * d.0) / denom;
    (t > 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
}

/// Distance along the unit ray `(o, d)` to the circle, if hit from outside.
pub fn ray_circle(o: (f64, f64), d: (f64, f64), c: (f64, f64), r: f64) -> Option<f64> {
    let w = (c.0 - o.0, c.1 - o.1);
    let c2 = w.0 * w.0 + w.1 * w.1 - r * r;
    if c2 <= 0.0 {
        return None;
    }
    let b = d.0 * w.0 + d.1 * w.1;
    let disc = b * b - c2;
    if b <= 0.0 || disc < 0.0 {
        return None;
    }
    Some(b - disc.sqrt())
}

/// One rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub scan: LaserScan,
    pub annotations: Vec<Annotation>,
    pub odometry: OdometryFrame,
    /// Agent index hit by each beam.
    pub hit_agent: Vec<Option<usize>>,
}

/// Raycasts the scene at time `t`. Noise is drawn from a stream keyed on
/// `(noise_seed, seq)` so every frame renders independently.
pub fn render_scan(scene: &Scene, t: f64, seq: u64) -> RenderedFrame {
    let g = &scene.geometry;
    let pose = scene.sensor.pose_at(t);
    let o = (pose.x, pose.y);
    let circles: Vec<(usize, (f64, f64, f64))> = scene
        .agents
        .iter()
        .enumerate()
        .flat_map(|(k, a)| a.circles(t).into_iter().map(move |c| (k, c)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
    rng.set_stream(seq);
    let noise = (scene.noise_sigma > 0.0).then(|| Normal::new(0.0, scene.noise_sigma).expect("valid sigma"));

    let mut ranges = Vec::with_capacity(g.num_beams);
    let mut hit_agent = Vec::with_capacity(g.num_beams);
    for i in 0..g.num_beams {
        let a = pose.yaw + g.angle_unchecked(i as f64);
        let d = (a.cos(), a.sin());
        let mut best = f64::INFINITY;
        let mut who = None;
        for w in &scene.walls {
            if let Some(t) = ray_segment(o, d, w) {
                if t < best {
                    best = t;
                    who = None;
                }
            }
        }
        for &(k, (cx, cy, r)) in &circles {
            if let Some(t) = ray_circle(o, d, (cx, cy), r) {
                if t < best {
                    best = t;
                    who = Some(k);
                }
            }
        }
        if best < g.max_range {
            let mut r = best;
            if let Some(n) = &noise {
                r = (r + n.sample(&mut rng)).clamp(0.0, g.max_range);
            }
            ranges.push(r);
            hit_agent.push(who);
        } else {
            ranges.push(g.max_range);
            hit_agent.push(None);
        }
    }

    let (c, s) = (pose.yaw.cos(), pose.yaw.sin());
    let annotations = scene
        .agents
        .iter()
        .enumerate()
        .filter_map(|(k, agent)| {
            let p = agent.trajectory.pose_at(t);
            let (dx, dy) = (p.x - pose.x, p.y - pose.y);
            let (x, y) = (c * dx + s * dy, -s * dx + c * dy);
            let visible = hit_agent.iter().filter(|h| **h == Some(k)).count();
            (x.hypot(y) <= g.max_range && visible >= scene.min_visible_beams.max(1))
                .then(|| Annotation::new(seq, agent.kind.class(), x, y).expect("foreground class"))
        })
        .collect();

    RenderedFrame {
        scan: LaserScan::new(seq, t, ranges),
        annotations,
        odometry: OdometryFrame::new(seq, t, pose.x, pose.y, normalize_angle(pose.yaw)),
        hit_agent,
    }
}

/// Renders `frames` consecutive frames at the sensor rate. Frame `k` has
/// seq `k`; annotations are kept on the cadence frames only.
pub fn render_sequence(scene: &Scene, frames: usize) -> Result<ScanSequence> {
    scene.validate()?;
    let dt = 1.0 / scene.geometry.scan_rate;
    let mut scans = Vec::with_capacity(frames);
    let mut odometry = Vec::with_capacity(frames);
    let mut annotations = BTreeMap::new();
    for k in 0..frames {
        let f = render_scan(scene, k as f64 * dt, k as u64);
        if is_annotated_frame(k) {
            let mut anns = f.annotations;
            anns.sort_by_key(|a| a.class_id);
            annotations.insert(k as u64, anns);
        }
        scans.push(f.scan);
        odometry.push(f.odometry);
    }
    ScanSequence::new(scene.geometry, scans, odometry, annotations)
}

/// Parameters of the random corridor worlds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    #[serde(skip)]
    pub geometry: ScanGeometry,
    pub corridor_length: f64,
    pub corridor_width: (f64, f64),
    /// Corridor walls plus, beyond two, short free-standing segments.
    pub walls: usize,
    pub leg_pairs: usize,
    /// Round agents; blob `i` takes class `blob_classes[i % len]`.
    pub blobs: usize,
    pub blob_classes: Vec<ClassId>,
    pub leg_radius: f64,
    pub leg_separation: (f64, f64),
    pub stride: f64,
    pub wheelchair_radius: f64,
    pub walker_radius: f64,
    pub agent_speed: (f64, f64),
    pub blob_speed: (f64, f64),
    /// Chance of standing still on arrival at a waypoint.
    pub pause_probability: f64,
    pub sensor_speed: f64,
    /// Half-length of the stretch the sensor drives back and forth on.
    pub sensor_travel: f64,
    pub sensor_turn_time: f64,
    pub sensor_yaw_amplitude: f64,
    pub sensor_yaw_period: f64,
    pub noise_sigma: f64,
    pub min_visible_beams: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            geometry: ScanGeometry::default(),
            corridor_length: 16.0,
            corridor_width: (3.0, 6.0),
            walls: 2,
            leg_pairs: 2,
            blobs: 1,
            blob_classes: vec![ClassId::Wheelchair, ClassId::Walker],
            leg_radius: 0.06,
            leg_separation: (0.15, 0.45),
            stride: 1.4,
            wheelchair_radius: 0.28,
            walker_radius: 0.22,
            agent_speed: (0.5, 1.4),
            blob_speed: (0.3, 0.9),
            pause_probability: 0.2,
            sensor_speed: 0.4,
            sensor_travel: 5.0,
            sensor_turn_time: 3.0,
            sensor_yaw_amplitude: 0.6,
            sensor_yaw_period: 6.0,
            noise_sigma: 0.01,
            min_visible_beams: 3,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let range = |r: (f64, f64)| pos(r.0) && r.1 >= r.0 && r.1.is_finite();
        if !pos(self.corridor_length) || !range(self.corridor_width) {
            return Err(Error::Config("corridor dimensions must be positive".into()));
        }
        if self.walls < 2 {
            return Err(Error::Config("a corridor needs at least 2 walls".into()));
        }
        if !pos(self.leg_radius) || !range(self.leg_separation) || self.leg_separation.0 <= 2.0 * self.leg_radius {
            return Err(Error::Config("leg separation must exceed twice the leg radius".into()));
        }
        if !pos(self.stride) || !pos(self.wheelchair_radius) || !pos(self.walker_radius) {
            return Err(Error::Config("stride and radii must be positive".into()));
        }
        if !range(self.agent_speed) || !range(self.blob_speed) || !pos(self.sensor_speed) {
            return Err(Error::Config("speeds must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.pause_probability) {
            return Err(Error::Config("pause_probability must be in [0, 1)".into()));
        }
        if !(self.sensor_travel >= 0.0) || 2.0 * self.sensor_travel >= self.corridor_length {
            return Err(Error::Config("sensor_travel must fit inside the corridor".into()));
        }
        if !pos(self.sensor_turn_time) || !pos(self.sensor_yaw_period) || !(self.sensor_yaw_amplitude >= 0.0) {
            return Err(Error::Config("invalid sensor motion parameters".into()));
        }
        if self.blobs > 0 && (self.blob_classes.is_empty() || self.blob_classes.iter().any(|c| !matches!(c, ClassId::Wheelchair | ClassId::Walker))) {
            return Err(Error::Config("blob_classes must list wheelchair or walker".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

/// Random waypoint walk inside the box `|x| <= hx`, `|y| <= hy`.
fn wander(rng: &mut ChaCha8Rng, hx: f64, hy: f64, speed: (f64, f64), pause: f64, duration: f64) -> Result<Trajectory> {
    let mut p = (rng.random_range(-hx..=hx), rng.random_range(-hy..=hy));
    let mut yaw = rng.random_range(-PI..PI);
    let mut t = 0.0;
    let mut keys = vec![Keyframe { t, pose: Pose { x: p.0, y: p.1, yaw } }];
    while t <= duration {
        let q = (rng.random_range(-hx..=hx), rng.random_range(-hy..=hy));
        let len = (q.0 - p.0).hypot(q.1 - p.1);
        if len < 0.5 {
            continue;
        }
        let heading = yaw + normalize_angle((q.1 - p.1).atan2(q.0 - p.0) - yaw);
        t += 0.4 * (heading - yaw).abs() / PI;
        yaw = heading;
        keys.push(Keyframe { t, pose: Pose { x: p.0, y: p.1, yaw } });
        t += len / uniform(rng, speed);
        p = q;
        keys.push(Keyframe { t, pose: Pose { x: p.0, y: p.1, yaw } });
        if rng.random::<f64>() < pause {
            t += rng.random_range(1.0..4.0);
            keys.push(Keyframe { t, pose: Pose { x: p.0, y: p.1, yaw } });
        }
    }
    Trajectory::new(keys)
}

/// Sensor driving back and forth on the corridor axis, turning in place at
/// both ends while its heading oscillates.
fn sensor_path(spec: &SceneSpec, rng: &mut ChaCha8Rng, duration: f64) -> Result<Trajectory> {
    let leg_time = 2.0 * spec.sensor_travel / spec.sensor_speed;
    let cycle = leg_time + spec.sensor_turn_time;
    let t0 = rng.random_range(0.0..2.0 * cycle);
    let wobble_phase = rng.random_range(0.0..TAU);
    let y = rng.random_range(-0.3..=0.3);
    let dt = 1.0 / spec.geometry.scan_rate;
    let steps = (duration / dt).ceil() as usize + 1;
    let keys = (0..=steps)
        .map(|k| {
            let t = k as f64 * dt;
            let u = t + t0;
            let n = (u / cycle).floor();
            let r = u - n * cycle;
            let dir = if (n as i64) % 2 == 0 { 1.0 } else { -1.0 };
            let (x, turn) = if r < leg_time {
                (dir * (-spec.sensor_travel + spec.sensor_speed * r), 0.0)
            } else {
                (dir * spec.sensor_travel, (r - leg_time) / spec.sensor_turn_time)
            };
            let heading = (n + turn) * PI;
            let wobble = spec.sensor_yaw_amplitude * (TAU * t / spec.sensor_yaw_period + wobble_phase).sin();
            Keyframe { t, pose: Pose { x, y, yaw: heading + wobble } }
        })
        .collect();
    Trajectory::new(keys)
}

/// Draws a random corridor world lasting `duration` seconds.
pub fn build_scene(spec: &SceneSpec, duration: f64, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hl = spec.corridor_length / 2.0;
    let hw = uniform(&mut rng, spec.corridor_width) / 2.0;
    let mut walls = vec![
        Segment { a: (-hl, -hw), b: (hl, -hw) },
        Segment { a: (-hl, hw), b: (hl, hw) },
    ];
    for _ in 2..spec.walls {
        let x = rng.random_range(-hl..hl);
        let side = if rng.random::<bool>() { hw } else { -hw };
        let depth = rng.random_range(0.2..0.6) * hw;
        walls.push(Segment { a: (x, side), b: (x, side - side.signum() * depth) });
    }
    let margin = 0.4;
    let (ax, ay) = (hl - margin, hw - margin);
    let mut agents = Vec::new();
    for _ in 0..spec.leg_pairs {
        agents.push(Agent {
            kind: AgentKind::LegPair {
                leg_radius: spec.leg_radius,
                separation_min: spec.leg_separation.0,
                separation_max: spec.leg_separation.1,
                stride: spec.stride,
                phase: rng.random_range(0.0..TAU),
            },
            trajectory: wander(&mut rng, ax, ay, spec.agent_speed, spec.pause_probability, duration)?,
        });
    }
    for i in 0..spec.blobs {
        let class = spec.blob_classes[i % spec.blob_classes.len()];
        let radius = if class == ClassId::Wheelchair { spec.wheelchair_radius } else { spec.walker_radius };
        agents.push(Agent {
            kind: AgentKind::Blob { radius, class },
            trajectory: wander(&mut rng, ax, ay, spec.blob_speed, spec.pause_probability, duration)?,
        });
    }
    let sensor = sensor_path(spec, &mut rng, duration)?;
    Ok(Scene {
        geometry: spec.geometry,
        walls,
        agents,
        sensor,
        noise_sigma: spec.noise_sigma,
        noise_seed: rng.random(),
        min_visible_beams: spec.min_visible_beams,
    })
}

/// In-memory random sequence of `frames` frames.
pub fn generate_sequence(spec: &SceneSpec, frames: usize, seed: u64) -> Result<ScanSequence> {
    let duration = frames as f64 / spec.geometry.scan_rate;
    render_sequence(&build_scene(spec, duration, seed)?, frames)
}

/// Generates a random sequence and writes it under `<stem>.*`.
pub fn generate_dataset(spec: &SceneSpec, frames: usize, seed: u64, stem: &Path) -> Result<(ScanSequence, SequencePaths)> {
    let seq = generate_sequence(spec, frames, seed)?;
    let paths = write_sequence(&seq, stem)?;
    Ok((seq, paths))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_sequence, LoadOptions};
    use proptest::prelude::*;

    fn still() -> Trajectory {
        Trajectory::fixed(Pose { x: 0.0, y: 0.0, yaw: 0.0 })
    }

    fn odd_geometry() -> ScanGeometry {
        ScanGeometry::new(451, 225f64.to_radians(), 12.5, 15.0).unwrap()
    }

    #[test]
    fn empty_scene_reads_max_range() {
        let s = Scene::new(ScanGeometry::default(), vec![], vec![], still());
        let f = render_scan(&s, 0.0, 0);
        assert!(f.scan.ranges.iter().all(|&r| r == 15.0));
        assert!(f.annotations.is_empty());
    }

    #[test]
    fn perpendicular_wall_at_two_meters() {
        let wall = Segment { a: (2.0, -5.0), b: (2.0, 5.0) };
        let s = Scene::new(odd_geometry(), vec![wall], vec![], still());
        let f = render_scan(&s, 0.0, 0);
        assert!((f.scan.ranges[225] - 2.0).abs() < 1e-12);
        let mut noisy = s.clone();
        noisy.noise_sigma = 0.01;
        let f = render_scan(&noisy, 0.0, 0);
        assert!((f.scan.ranges[225] - 2.0).abs() < 0.06);
    }

    #[test]
    fn disk_front_surface() {
        let disk = Agent {
            kind: AgentKind::Blob { radius: 0.2, class: ClassId::Wheelchair },
            trajectory: Trajectory::fixed(Pose { x: 3.0, y: 0.0, yaw: 0.0 }),
        };
        let s = Scene::new(odd_geometry(), vec![], vec![disk], still());
        let f = render_scan(&s, 0.0, 4);
        assert!((f.scan.ranges[225] - 2.8).abs() < 1e-12);
        assert_eq!(f.annotations.len(), 1);
        assert_eq!(f.annotations[0].class_id, ClassId::Wheelchair);
        assert!((f.annotations[0].x - 3.0).abs() < 1e-12);
    }

    #[test]
    fn annotations_are_in_sensor_frame() {
        let disk = Agent {
            kind: AgentKind::Blob { radius: 0.2, class: ClassId::Walker },
            trajectory: Trajectory::fixed(Pose { x: 1.0, y: 3.0, yaw: 0.0 }),
        };
        let sensor = Trajectory::fixed(Pose { x: 1.0, y: 1.0, yaw: PI / 2.0 });
        let s = Scene::new(ScanGeometry::default(), vec![], vec![disk], sensor);
        let a = &render_scan(&s, 0.0, 0).annotations[0];
        assert!((a.x - 2.0).abs() < 1e-12 && a.y.abs() < 1e-12);
    }

    #[test]
    fn hidden_agent_is_not_annotated() {
        let wall = Segment { a: (2.0, -5.0), b: (2.0, 5.0) };
        let disk = Agent {
            kind: AgentKind::Blob { radius: 0.2, class: ClassId::Walker },
            trajectory: Trajectory::fixed(Pose { x: 4.0, y: 0.0, yaw: 0.0 }),
        };
        let s = Scene::new(ScanGeometry::default(), vec![wall], vec![disk], still());
        assert!(render_scan(&s, 0.0, 0).annotations.is_empty());
    }

    #[test]
    fn leg_separation_stays_in_band() {
        let agent = Agent {
            kind: AgentKind::LegPair {
                leg_radius: 0.06,
                separation_min: 0.15,
                separation_max: 0.45,
                stride: 1.4,
                phase: 0.3,
            },
            trajectory: Trajectory::new(vec![
                Keyframe { t: 0.0, pose: Pose { x: 0.0, y: 0.0, yaw: 0.0 } },
                Keyframe { t: 10.0, pose: Pose { x: 10.0, y: 0.0, yaw: 0.0 } },
            ])
            .unwrap(),
        };
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for k in 0..1000 {
            let c = agent.circles(k as f64 * 0.01);
            let d = (c[0].0 - c[1].0).hypot(c[0].1 - c[1].1);
            lo = lo.min(d);
            hi = hi.max(d);
        }
        assert!(lo >= 0.15 - 1e-9 && hi <= 0.45 + 1e-9);
        assert!(lo < 0.16 && hi > 0.44);
    }

    #[test]
    fn cadence_in_generated_sequence() {
        let s = generate_sequence(&SceneSpec::default(), 400, 1).unwrap();
        assert_eq!(s.annotated_seqs.len(), 20);
        assert_eq!(s.annotated_seqs[19], 95);
        assert_eq!(s.odometry.len(), 400);
        let empty = generate_sequence(&SceneSpec::default(), 0, 1).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn generated_files_round_trip_and_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let (seq, paths) = generate_dataset(&spec, 120, 9, &dir.path().join("a")).unwrap();
        let loaded = load_sequence(&paths, &spec.geometry, LoadOptions::default()).unwrap();
        assert_eq!(loaded, seq);
        generate_dataset(&spec, 120, 9, &dir.path().join("b")).unwrap();
        for ext in ["csv", "odom2", "wc", "wa", "wp"] {
            let a = std::fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
            let b = std::fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
            assert_eq!(a, b, "{ext}");
        }
    }

    #[test]
    fn empty_generation_writes_valid_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let (_, paths) = generate_dataset(&spec, 0, 1, &dir.path().join("e")).unwrap();
        let loaded = load_sequence(&paths, &spec.geometry, LoadOptions::default()).unwrap();
        assert!(loaded.is_empty() && loaded.annotated_seqs.is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn convex_obstacle_hits_contiguous_beams(
            x in -8.0f64..8.0, y in -8.0f64..8.0, r in 0.05f64..1.0, yaw in -3.0f64..3.0,
        ) {
            prop_assume!(x.hypot(y) > r + 0.05);
            let disk = Agent {
                kind: AgentKind::Blob { radius: r, class: ClassId::Walker },
                trajectory: Trajectory::fixed(Pose { x, y, yaw: 0.0 }),
            };
            let sensor = Trajectory::fixed(Pose { x: 0.0, y: 0.0, yaw });
            let s = Scene::new(ScanGeometry::default(), vec![], vec![disk], sensor);
            let f = render_scan(&s, 0.0, 0);
            prop_assert!(f.scan.ranges.iter().all(|&v| (0.0..=15.0).contains(&v)));
            let hits: Vec<usize> = (0..f.hit_agent.len()).filter(|&i| f.hit_agent[i].is_some()).collect();
            if let (Some(&a), Some(&b)) = (hits.first(), hits.last()) {
                prop_assert_eq!(b - a + 1, hits.len());
            }
        }

        #[test]
        fn noisy_ranges_stay_in_bounds(seed in 0u64..1000) {
            let spec = SceneSpec { noise_sigma: 0.05, ..Default::default() };
            let s = generate_sequence(&spec, 3, seed).unwrap();
            for scan in &s.scans {
                prop_assert!(scan.ranges.iter().all(|&v| (0.0..=15.0).contains(&v)));
            }
        }
    }
}

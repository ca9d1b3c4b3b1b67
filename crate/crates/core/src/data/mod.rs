//! Dataset files, sequence access and the synthetic world generator.
//!
//! File layout per sequence `<stem>`:
//!
//! * `<stem>.csv`: `seq,timestamp,r_0,...,r_{N-1}` one scan per line.
//! * `<stem>.odom2`: `seq,timestamp,x,y,phi`.
//! * `<stem>.wc` / `.wa` / `.wp`: `seq,[[x, y], ...]`, one line per
//!   annotated frame (an empty list still marks the frame as annotated).

pub mod sim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{normalize_angle, polar_to_cart, Annotation, ClassId, LaserScan, OdometryFrame, ScanGeometry};

/// Frames per annotation batch.
pub const BATCH_FRAMES: usize = 100;
/// Every n-th batch is annotated.
pub const ANNOTATED_BATCH_EVERY: usize = 4;
/// Every n-th frame within an annotated batch is annotated.
pub const ANNOTATED_FRAME_EVERY: usize = 5;

/// Whether the frame at position `index` of a sequence falls on the
/// annotation cadence.
pub fn is_annotated_frame(index: usize) -> bool {
    (index / BATCH_FRAMES) % ANNOTATED_BATCH_EVERY == 0 && index % ANNOTATED_FRAME_EVERY == 0
}

/// How coordinates are stored in annotation files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationCoords {
    /// `[x, y]` in the sensor frame.
    #[default]
    Cartesian,
    /// `[range, bearing]` with bearing in the beam-angle convention.
    Polar,
}

impl AnnotationCoords {
    /// Converts one stored pair into sensor-frame `(x, y)`.
    pub fn to_sensor_frame(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            AnnotationCoords::Cartesian => (a, b),
            AnnotationCoords::Polar => polar_to_cart(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdometryAlignment {
    /// Odometry lines carry the same seqs as the scans.
    #[default]
    BySeq,
    /// Interpolate the odometry stream at each scan timestamp.
    ByTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanSequence {
    pub geometry: ScanGeometry,
    pub scans: Vec<LaserScan>,
    /// Empty when no odometry is available, otherwise one frame per scan.
    pub odometry: Vec<OdometryFrame>,
    pub annotations: BTreeMap<u64, Vec<Annotation>>,
    pub annotated_seqs: Vec<u64>,
}

impl ScanSequence {
    pub fn new(
        geometry: ScanGeometry,
        scans: Vec<LaserScan>,
        odometry: Vec<OdometryFrame>,
        annotations: BTreeMap<u64, Vec<Annotation>>,
    ) -> Result<Self> {
        for s in &scans {
            s.check_geometry(&geometry)?;
        }
        if scans.windows(2).any(|w| w[1].seq <= w[0].seq) {
            return Err(Error::SeqMismatch("scans are not sorted by seq".into()));
        }
        if !odometry.is_empty() {
            if odometry.len() != scans.len()
                || odometry.iter().zip(&scans).any(|(o, s)| o.seq != s.seq)
            {
                return Err(Error::SeqMismatch(
                    "odometry is not aligned with the scans".into(),
                ));
            }
        }
        let seq = Self {
            geometry,
            scans,
            odometry,
            annotated_seqs: annotations.keys().copied().collect(),
            annotations,
        };
        for &s in &seq.annotated_seqs {
            if seq.index_of(s).is_none() {
                return Err(Error::SeqMismatch(format!(
                    "annotated seq {s} has no scan"
                )));
            }
        }
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn index_of(&self, seq: u64) -> Option<usize> {
        self.scans.binary_search_by_key(&seq, |s| s.seq).ok()
    }

    pub fn has_odometry(&self) -> bool {
        !self.odometry.is_empty()
    }

    pub fn annotations_for(&self, seq: u64) -> &[Annotation] {
        self.annotations.get(&seq).map_or(&[], |v| v.as_slice())
    }

    pub fn annotation_count(&self, class: ClassId) -> usize {
        self.annotations
            .values()
            .flatten()
            .filter(|a| a.class_id == class)
            .count()
    }

    /// Frames `seq-T ..= seq` ordered oldest to newest; positions before the
    /// sequence start repeat the first frame.
    pub fn temporal_window(&self, seq: u64, t: usize) -> Result<TemporalWindow<'_>> {
        let idx = self.index_of(seq).ok_or(Error::UnknownSeq(seq))?;
        Ok(self.window_at(idx, t))
    }

    pub fn window_at(&self, idx: usize, t: usize) -> TemporalWindow<'_> {
        let indices: Vec<usize> = (0..=t)
            .rev()
            .map(|k| idx.saturating_sub(k))
            .collect();
        TemporalWindow {
            scans: indices.iter().map(|&i| &self.scans[i]).collect(),
            odometry: self
                .has_odometry()
                .then(|| indices.iter().map(|&i| self.odometry[i]).collect()),
        }
    }
}

/// A short history of scans (oldest first) with matching odometry.
#[derive(Debug, Clone)]
pub struct TemporalWindow<'a> {
    pub scans: Vec<&'a LaserScan>,
    pub odometry: Option<Vec<OdometryFrame>>,
}

impl TemporalWindow<'_> {
    pub fn current(&self) -> &LaserScan {
        self.scans.last().expect("window is never empty")
    }

    pub fn odometry(&self) -> Option<&[OdometryFrame]> {
        self.odometry.as_deref()
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn parse_f64(tok: &str, path: &Path, line: usize) -> Result<f64> {
    tok.trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("not a number: '{}'", tok.trim())))
}

fn parse_seq(tok: &str, path: &Path, line: usize) -> Result<u64> {
    let t = tok.trim();
    t.parse::<u64>()
        .or_else(|_| {
            // some exports write seqs as floats
            t.parse::<f64>()
                .ok()
                .filter(|v| v.fract() == 0.0 && *v >= 0.0)
                .map(|v| v as u64)
                .ok_or(())
        })
        .map_err(|_| parse_err(path, line, format!("bad seq '{t}'")))
}

/// Maps invalid sensor returns to `max_range`.
pub fn sanitize_range(r: f64, max_range: f64) -> f64 {
    if r.is_finite() && r > 0.0 {
        r
    } else {
        max_range
    }
}

pub fn read_scans(path: &Path, geometry: &ScanGeometry) -> Result<Vec<LaserScan>> {
    let text = read_text(path)?;
    let mut scans = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split(',');
        let seq = parse_seq(toks.next().unwrap_or(""), path, ln)?;
        let ts = parse_f64(
            toks.next().ok_or_else(|| parse_err(path, ln, "missing timestamp"))?,
            path,
            ln,
        )?;
        let ranges = toks
            .map(|t| parse_f64(t, path, ln).map(|r| sanitize_range(r, geometry.max_range)))
            .collect::<Result<Vec<_>>>()?;
        if ranges.len() != geometry.num_beams {
            return Err(parse_err(
                path,
                ln,
                format!("{} ranges, expected {}", ranges.len(), geometry.num_beams),
            ));
        }
        scans.push(LaserScan::new(seq, ts, ranges));
    }
    Ok(scans)
}

pub fn read_odometry(path: &Path) -> Result<Vec<OdometryFrame>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != 5 {
            return Err(parse_err(path, ln, format!("{} fields, expected 5", toks.len())));
        }
        let seq = parse_seq(toks[0], path, ln)?;
        let v = toks[1..]
            .iter()
            .map(|t| parse_f64(t, path, ln))
            .collect::<Result<Vec<_>>>()?;
        out.push(OdometryFrame::new(seq, v[0], v[1], v[2], v[3]));
    }
    Ok(out)
}

/// Annotation lines of one class file: seq to sensor-frame points.
pub fn read_annotations(
    path: &Path,
    class: ClassId,
    coords: AnnotationCoords,
) -> Result<Vec<(u64, Vec<Annotation>)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (seq_tok, json) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, ln, "expected 'seq,[...]'"))?;
        let seq = parse_seq(seq_tok, path, ln)?;
        let pts: Vec<Vec<f64>> = serde_json::from_str(json.trim())
            .map_err(|e| parse_err(path, ln, format!("bad annotation list: {e}")))?;
        let anns = pts
            .into_iter()
            .map(|p| {
                if p.len() != 2 || !p.iter().all(|v| v.is_finite()) {
                    return Err(parse_err(path, ln, "annotation points need two finite values"));
                }
                let (x, y) = coords.to_sensor_frame(p[0], p[1]);
                Annotation::new(seq, class, x, y)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((seq, anns));
    }
    Ok(out)
}

/// Linear interpolation of an odometry stream at the scan timestamps.
pub fn align_odometry_by_time(scans: &[LaserScan], odom: &[OdometryFrame]) -> Result<Vec<OdometryFrame>> {
    if odom.is_empty() {
        return Err(Error::Empty("odometry stream".into()));
    }
    let mut j = 0;
    Ok(scans
        .iter()
        .map(|s| {
            while j + 1 < odom.len() && odom[j + 1].timestamp <= s.timestamp {
                j += 1;
            }
            let a = odom[j];
            let b = odom[(j + 1).min(odom.len() - 1)];
            let span = b.timestamp - a.timestamp;
            let w = if span > 0.0 {
                ((s.timestamp - a.timestamp) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dyaw = normalize_angle(b.yaw - a.yaw);
            OdometryFrame::new(
                s.seq,
                s.timestamp,
                a.x + w * (b.x - a.x),
                a.y + w * (b.y - a.y),
                a.yaw + w * dyaw,
            )
        })
        .collect())
}

/// Paths making up one sequence on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePaths {
    pub scans: PathBuf,
    pub odometry: Option<PathBuf>,
    pub annotations: Vec<(ClassId, PathBuf)>,
}

impl SequencePaths {
    /// `<stem>.csv` plus whichever of `.odom2`, `.wc`, `.wa`, `.wp` exist.
    pub fn from_stem(stem: &Path) -> Self {
        let with = |ext: &str| PathBuf::from(format!("{}.{ext}", stem.display()));
        let odom = with("odom2");
        Self {
            scans: with("csv"),
            odometry: odom.exists().then_some(odom),
            annotations: ClassId::FOREGROUND
                .iter()
                .map(|&c| (c, with(c.short_name())))
                .filter(|(_, p)| p.exists())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LoadOptions {
    pub coords: AnnotationCoords,
    pub odometry: OdometryAlignment,
}

pub fn load_sequence(
    paths: &SequencePaths,
    geometry: &ScanGeometry,
    opts: LoadOptions,
) -> Result<ScanSequence> {
    let scans = read_scans(&paths.scans, geometry)?;
    let odometry = match &paths.odometry {
        None => Vec::new(),
        Some(p) => {
            let raw = read_odometry(p)?;
            match opts.odometry {
                OdometryAlignment::BySeq => {
                    if raw.len() != scans.len()
                        || raw.iter().zip(&scans).any(|(o, s)| o.seq != s.seq)
                    {
                        return Err(Error::SeqMismatch(format!(
                            "{} does not carry one line per scan seq",
                            p.display()
                        )));
                    }
                    raw
                }
                OdometryAlignment::ByTime => align_odometry_by_time(&scans, &raw)?,
            }
        }
    };
    let mut annotations: BTreeMap<u64, Vec<Annotation>> = BTreeMap::new();
    for (class, p) in &paths.annotations {
        for (seq, anns) in read_annotations(p, *class, opts.coords)? {
            annotations.entry(seq).or_default().extend(anns);
        }
    }
    for anns in annotations.values_mut() {
        anns.sort_by_key(|a| a.class_id);
    }
    ScanSequence::new(*geometry, scans, odometry, annotations)
}

/// Writes `sequence` under `<stem>.*` in the load format. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_sequence(sequence: &ScanSequence, stem: &Path) -> Result<SequencePaths> {
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
    }
    let paths = SequencePaths {
        scans: PathBuf::from(format!("{}.csv", stem.display())),
        odometry: Some(PathBuf::from(format!("{}.odom2", stem.display()))),
        annotations: ClassId::FOREGROUND
            .iter()
            .map(|&c| (c, PathBuf::from(format!("{}.{}", stem.display(), c.short_name()))))
            .collect(),
    };
    let write = |p: &Path, s: String| {
        fs::write(p, s).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    };

    let mut buf = String::new();
    for scan in &sequence.scans {
        write!(buf, "{},{}", scan.seq, scan.timestamp).unwrap();
        for r in &scan.ranges {
            write!(buf, ",{r}").unwrap();
        }
        buf.push('\n');
    }
    write(&paths.scans, buf)?;

    let mut buf = String::new();
    for o in &sequence.odometry {
        writeln!(buf, "{},{},{},{},{}", o.seq, o.timestamp, o.x, o.y, o.yaw).unwrap();
    }
    write(paths.odometry.as_ref().unwrap(), buf)?;

    for (class, p) in &paths.annotations {
        let mut buf = String::new();
        for &seq in &sequence.annotated_seqs {
            let pts: Vec<String> = sequence
                .annotations_for(seq)
                .iter()
                .filter(|a| a.class_id == *class)
                .map(|a| format!("[{}, {}]", a.x, a.y))
                .collect();
            writeln!(buf, "{},[{}]", seq, pts.join(", ")).unwrap();
        }
        write(p, buf)?;
    }
    Ok(paths)
}

/// Sequence stems (`<dir>/<name>` for every `<name>.csv`) sorted by name.
pub fn find_sequences(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut stems = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io("listing directory", e))?.path();
        if p.extension().is_some_and(|e| e == "csv") {
            stems.push(p.with_extension(""));
        }
    }
    stems.sort();
    Ok(stems)
}

/// Per-split dataset counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DatasetStats {
    pub sequences: usize,
    pub scans: usize,
    pub annotated_scans: usize,
    pub wheelchairs: usize,
    pub walkers: usize,
    pub persons: usize,
}

impl std::ops::Add for DatasetStats {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            sequences: self.sequences + o.sequences,
            scans: self.scans + o.scans,
            annotated_scans: self.annotated_scans + o.annotated_scans,
            wheelchairs: self.wheelchairs + o.wheelchairs,
            walkers: self.walkers + o.walkers,
            persons: self.persons + o.persons,
        }
    }
}

impl DatasetStats {
    pub fn of(seq: &ScanSequence) -> Self {
        Self {
            sequences: 1,
            scans: seq.len(),
            annotated_scans: seq.annotated_seqs.len(),
            wheelchairs: seq.annotation_count(ClassId::Wheelchair),
            walkers: seq.annotation_count(ClassId::Walker),
            persons: seq.annotation_count(ClassId::Person),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_geom() -> ScanGeometry {
        ScanGeometry::new(4, 1.0, 12.5, 15.0).unwrap()
    }

    #[test]
    fn cadence_arithmetic() {
        let annotated: Vec<usize> = (0..400).filter(|&i| is_annotated_frame(i)).collect();
        assert_eq!(annotated.len(), 20);
        assert_eq!(annotated.first(), Some(&0));
        assert_eq!(annotated.last(), Some(&95));
        assert!(is_annotated_frame(400));
        assert_eq!((0..10_000).filter(|&i| is_annotated_frame(i)).count(), 500);
    }

    #[test]
    fn minimal_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("seq");
        fs::write(format!("{}.csv", stem.display()), "0,0.0,1,2,3,4\n1,0.08,1,nan,-1,inf\n").unwrap();
        fs::write(format!("{}.wp", stem.display()), "1,[[1.5, 0.25]]\n").unwrap();
        let s = load_sequence(&SequencePaths::from_stem(&stem), &small_geom(), LoadOptions::default()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.annotated_seqs, vec![1]);
        assert_eq!(s.annotations_for(1)[0].class_id, ClassId::Person);
        assert_eq!(s.scans[1].ranges, vec![1.0, 15.0, 15.0, 15.0]);
        assert!(!s.has_odometry());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bad");
        fs::write(format!("{}.csv", stem.display()), "0,0.0,1,2,3,4\n1,0.1,1,2,x,4\n").unwrap();
        let err = load_sequence(&SequencePaths::from_stem(&stem), &small_geom(), LoadOptions::default()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn annotation_for_missing_scan_is_seq_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("s");
        fs::write(format!("{}.csv", stem.display()), "0,0.0,1,2,3,4\n").unwrap();
        fs::write(format!("{}.wc", stem.display()), "7,[]\n").unwrap();
        let err = load_sequence(&SequencePaths::from_stem(&stem), &small_geom(), LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::SeqMismatch(_)));
    }

    #[test]
    fn odometry_seq_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("s");
        fs::write(format!("{}.csv", stem.display()), "0,0.0,1,2,3,4\n1,0.1,1,2,3,4\n").unwrap();
        fs::write(format!("{}.odom2", stem.display()), "0,0.0,0,0,0\n5,0.1,0,0,0\n").unwrap();
        let paths = SequencePaths::from_stem(&stem);
        assert!(matches!(load_sequence(&paths, &small_geom(), LoadOptions::default()), Err(Error::SeqMismatch(_))));
        let opts = LoadOptions { odometry: OdometryAlignment::ByTime, ..Default::default() };
        let s = load_sequence(&paths, &small_geom(), opts).unwrap();
        assert_eq!(s.odometry.len(), 2);
        assert_eq!(s.odometry[1].seq, 1);
    }

    #[test]
    fn polar_annotations_convert() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wp");
        fs::write(&p, "3,[[2.0, 1.5707963267948966]]\n").unwrap();
        let a = read_annotations(&p, ClassId::Person, AnnotationCoords::Polar).unwrap();
        assert!(a[0].1[0].x.abs() < 1e-12 && (a[0].1[0].y - 2.0).abs() < 1e-12);
    }

    #[test]
    fn temporal_window_repeats_first_frame() {
        let g = small_geom();
        let scans: Vec<LaserScan> = (0..10).map(|s| LaserScan::new(s, s as f64, vec![1.0 + s as f64; 4])).collect();
        let s = ScanSequence::new(g, scans, Vec::new(), BTreeMap::new()).unwrap();
        let w = s.temporal_window(0, 5).unwrap();
        assert_eq!(w.scans.len(), 6);
        assert!(w.scans.iter().all(|sc| sc.seq == 0));
        let w = s.temporal_window(7, 5).unwrap();
        assert_eq!(w.scans.iter().map(|sc| sc.seq).collect::<Vec<_>>(), vec![2, 3, 4, 5, 6, 7]);
        let w = s.temporal_window(4, 0).unwrap();
        assert_eq!(w.scans.len(), 1);
        assert_eq!(w.current().seq, 4);
        assert!(matches!(s.temporal_window(99, 2), Err(Error::UnknownSeq(99))));
    }
}

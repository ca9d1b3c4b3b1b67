//! Command-line front end: `synth`, `train`, `detect`, `eval`, `stats`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::sim::{generate_dataset, SceneSpec};
use crate::data::{
    find_sequences, load_sequence, AnnotationCoords, DatasetStats, LoadOptions, OdometryAlignment,
    ScanSequence, SequencePaths,
};
use crate::error::{Error, Result};
use crate::eval::{curve_summaries, distance_histogram, format_curve, pr_curve, MatchMode, HISTOGRAM_BINS};
use crate::net::io::{load_params, save_params};
use crate::net::{train, Fusion, ModelConfig, ModelParams, TrainConfig};
use crate::pipeline::{check_compatible, detect_sequence, FrameSelection};
use crate::preproc::PreprocConfig;
use crate::types::{ClassId, ScanGeometry};
use crate::vote::{read_detections, write_detections, VotingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Matching radii in meters.
    pub radii: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { radii: vec![0.5, 0.3] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub annotation_coords: AnnotationCoords,
    pub odometry_alignment: OdometryAlignment,
}

impl DataConfig {
    fn options(&self) -> LoadOptions {
        LoadOptions {
            coords: self.annotation_coords,
            odometry: self.odometry_alignment,
        }
    }
}

/// Every knob of a run, loadable from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for detection.
    pub jobs: usize,
    pub geometry: ScanGeometry,
    pub data: DataConfig,
    pub scene: SceneSpec,
    pub preproc: PreprocConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub voting: VotingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            geometry: ScanGeometry::default(),
            data: DataConfig::default(),
            scene: SceneSpec::default(),
            preproc: PreprocConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            voting: VotingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.sync();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Propagates the shared geometry and derives the model input shape
    /// from the preprocessing.
    pub fn sync(&mut self) {
        self.scene.geometry = self.geometry;
        self.model.input_frames = self.preproc.frames();
        self.model.input_points = self.preproc.num_cutout_points;
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.scene.validate()?;
        self.preproc.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.voting.validate()?;
        if self.eval.radii.is_empty() || self.eval.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("eval radii must be positive".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "drow", version, about = "Multi-class detection in 2D laser scans")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic sequences.
    Synth(SynthArgs),
    /// Train a model on annotated sequences.
    Train(TrainArgs),
    /// Run the detector over a sequence.
    Detect(DetectArgs),
    /// Precision-recall evaluation of a detection file.
    Eval(EvalArgs),
    /// Dataset counts and distance histograms.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub frames: usize,
    #[arg(long, default_value_t = 1)]
    pub sequences: usize,
    /// File stem prefix.
    #[arg(long, default_value = "seq")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Sequence stems or directories of sequences.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub fusion: Option<Fusion>,
    /// Past frames in the temporal window.
    #[arg(long = "T")]
    pub time_window: Option<usize>,
    /// Stage widths, e.g. `64,64,128,128`.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Sequence stem (`<stem>.csv` and siblings).
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only process annotated frames.
    #[arg(long)]
    pub annotated_only: bool,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMode {
    Class,
    Agnostic,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub radii: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = EvalMode::All)]
    pub mode: EvalMode,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Dataset root with `train`, `val`, `test` folders, or one folder.
    #[arg(long)]
    pub data: PathBuf,
}

/// Effective configuration of a command line: defaults, then the config
/// file, then flags.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    match &cli.command {
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(w) = &a.widths {
                cfg.model.stage_channels = w
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::Config("--widths takes four values".into()))?;
            }
            if let Some(f) = a.fusion {
                cfg.model.fusion = f;
                if f == Fusion::None && a.time_window.is_none() {
                    cfg.preproc.time_window = 0;
                }
            }
            if let Some(t) = a.time_window {
                cfg.preproc.time_window = t;
            }
        }
        Command::Detect(a) => {
            if let Some(t) = a.threshold {
                cfg.voting.detection_threshold = t;
            }
        }
        Command::Eval(a) => {
            if let Some(r) = &a.radii {
                cfg.eval.radii = r.clone();
            }
        }
        Command::Synth(_) | Command::Stats(_) => {}
    }
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn echo_config(cfg: &RunConfig, dir: &Path, command: &str) -> Result<()> {
    create_dir(dir)?;
    let text = cfg.to_toml();
    log::info!("effective config:\n{text}");
    write_file(&dir.join(format!("{command}.config.toml")), &text)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Sequence stems named directly or found inside the given directories.
fn expand_stems(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(find_sequences(p)?);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("no sequences found".into()));
    }
    Ok(out)
}

fn load_stem(stem: &Path, cfg: &RunConfig) -> Result<ScanSequence> {
    let paths = SequencePaths::from_stem(stem);
    if !paths.scans.exists() {
        return Err(Error::io(
            format!("reading {}", paths.scans.display()),
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    load_sequence(&paths, &cfg.geometry, cfg.data.options())
}

pub fn cmd_synth(cfg: &RunConfig, args: &SynthArgs) -> Result<Vec<PathBuf>> {
    cfg.scene.validate()?;
    if args.sequences == 0 {
        return Err(Error::Config("--sequences must be >= 1".into()));
    }
    echo_config(cfg, &args.out, "synth")?;
    let mut stems = Vec::new();
    for k in 0..args.sequences {
        let stem = args.out.join(format!("{}_{k:03}", args.name));
        generate_dataset(&cfg.scene, args.frames, cfg.seed.wrapping_add(k as u64), &stem)?;
        stems.push(stem);
    }
    Ok(stems)
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<ModelParams<f32>> {
    let stems = expand_stems(&args.data)?;
    echo_config(cfg, &args.out, "train")?;
    let sequences = stems.iter().map(|s| load_stem(s, cfg)).collect::<Result<Vec<_>>>()?;
    let report = train(&sequences, &cfg.preproc, &cfg.model, &cfg.train, cfg.seed)?;
    let mut log = String::from("epoch\tlr\tloss\n");
    for (e, (l, lr)) in report.epoch_losses.iter().zip(&report.epoch_lrs).enumerate() {
        writeln!(log, "{e}\t{lr}\t{l}").unwrap();
    }
    write_file(&args.out.join("loss.tsv"), &log)?;
    save_params(&report.params, &args.out.join("weights.bin"))?;
    Ok(report.params)
}

pub fn cmd_detect(cfg: &RunConfig, args: &DetectArgs) -> Result<()> {
    let params = load_params(&args.weights, None)?;
    check_compatible(&params.config, &cfg.preproc)?;
    echo_config(cfg, &parent_dir(&args.out), "detect")?;
    let seq = load_stem(&args.sequence, cfg)?;
    let frames = if args.annotated_only {
        FrameSelection::Annotated
    } else {
        FrameSelection::All
    };
    let dets = detect_sequence(&params, &seq, &cfg.preproc, &cfg.voting, frames)?;
    write_detections(&args.out, &dets)
}

/// One row of the evaluation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub curve: String,
    pub radius: f64,
    pub auc: f64,
    pub peak_f1: f64,
    pub eer: f64,
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<Vec<SummaryRow>> {
    let dets = read_detections(&args.detections)?;
    let seq = load_stem(&args.sequence, cfg)?;
    if let Some(s) = dets.keys().find(|s| seq.index_of(**s).is_none()) {
        return Err(Error::SeqMismatch(format!("detections for seq {s} which has no scan")));
    }
    echo_config(cfg, &args.out, "eval")?;
    let annotations: BTreeMap<u64, Vec<_>> = seq
        .annotated_seqs
        .iter()
        .map(|&s| (s, seq.annotations_for(s).to_vec()))
        .collect();
    let mut modes = Vec::new();
    if args.mode != EvalMode::Agnostic {
        modes.extend(ClassId::FOREGROUND.iter().map(|&c| MatchMode::Class(c)));
    }
    if args.mode != EvalMode::Class {
        modes.push(MatchMode::Agnostic);
    }
    let mut rows = Vec::new();
    for &radius in &cfg.eval.radii {
        for &mode in &modes {
            let curve = match pr_curve(&dets, &annotations, radius, mode) {
                Ok(c) => c,
                Err(Error::Empty(msg)) => {
                    log::warn!("skipping {} at {radius} m: {msg}", mode.label());
                    continue;
                }
                Err(e) => return Err(e),
            };
            write_file(&args.out.join(format!("pr_{}_r{radius}.tsv", mode.label())), &format_curve(&curve))?;
            let s = curve_summaries(&curve);
            rows.push(SummaryRow {
                curve: mode.label().to_string(),
                radius,
                auc: s.auc,
                peak_f1: s.peak_f1,
                eer: s.eer,
            });
        }
    }
    let mut table = String::from("curve\tradius\tauc\tpeak_f1\teer\n");
    for r in &rows {
        writeln!(
            table,
            "{}\t{}\t{:.1}\t{:.1}\t{:.1}",
            r.curve,
            r.radius,
            100.0 * r.auc,
            100.0 * r.peak_f1,
            100.0 * r.eer
        )
        .unwrap();
    }
    write_file(&args.out.join("summary.tsv"), &table)?;
    print!("{table}");
    Ok(rows)
}

/// Split name, counts and per-class distance histograms.
pub type SplitStats = (String, DatasetStats, [crate::eval::DistanceHistogram; 3]);

pub fn cmd_stats(cfg: &RunConfig, args: &StatsArgs) -> Result<Vec<SplitStats>> {
    let splits: Vec<(String, PathBuf)> = ["train", "val", "test"]
        .iter()
        .map(|s| (s.to_string(), args.data.join(s)))
        .filter(|(_, p)| p.is_dir())
        .collect();
    let splits = if splits.is_empty() {
        vec![("all".to_string(), args.data.clone())]
    } else {
        splits
    };
    let mut out = Vec::new();
    for (name, dir) in splits {
        let mut stats = DatasetStats::default();
        let mut hist = [crate::eval::DistanceHistogram::default(); 3];
        for stem in find_sequences(&dir)? {
            let paths = SequencePaths {
                odometry: None,
                ..SequencePaths::from_stem(&stem)
            };
            let seq = load_sequence(&paths, &cfg.geometry, cfg.data.options())?;
            stats = stats + DatasetStats::of(&seq);
            let h = distance_histogram(seq.annotations.values().flatten());
            for k in 0..3 {
                for b in 0..HISTOGRAM_BINS {
                    hist[k].bins[b] += h[k].bins[b];
                }
                hist[k].overflow += h[k].overflow;
            }
        }
        out.push((name, stats, hist));
    }
    let mut text = String::from("split\tsequences\tscans\tannotated\twheelchairs\twalkers\tpersons\n");
    for (name, s, _) in &out {
        writeln!(
            text,
            "{name}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.sequences, s.scans, s.annotated_scans, s.wheelchairs, s.walkers, s.persons
        )
        .unwrap();
    }
    text.push_str("\nsplit\tclass");
    for b in 0..HISTOGRAM_BINS {
        write!(text, "\t{b}-{}m", b + 1).unwrap();
    }
    text.push_str("\t>15m\n");
    for (name, _, hist) in &out {
        for (k, h) in hist.iter().enumerate() {
            write!(text, "{name}\t{}", ClassId::FOREGROUND[k].short_name()).unwrap();
            for b in h.bins {
                write!(text, "\t{b}").unwrap();
            }
            writeln!(text, "\t{}", h.overflow).unwrap();
        }
    }
    print!("{text}");
    Ok(out)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    // a failed init only means a pool already exists in this process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global();
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a).map(|_| ()),
        Command::Train(a) => cmd_train(&cfg, a).map(|_| ()),
        Command::Detect(a) => cmd_detect(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a).map(|_| ()),
        Command::Stats(a) => cmd_stats(&cfg, a).map(|_| ()),
    }
}

/// Single-line, machine-parseable error report.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error kind={} msg={msg:?}", e.kind())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.model.fusion = Fusion::Early;
        c.train.decay_epochs = Some(3);
        c.eval.radii = vec![0.5];
        let text = c.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[model]\nbogus = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn fusion_none_implies_single_frame() {
        let cli = Cli::parse_from(["drow", "train", "--data", "x", "--out", "y", "--fusion", "none"]);
        let cfg = effective_config(&cli).unwrap();
        assert_eq!(cfg.model.input_frames, 1);
        let cli = Cli::parse_from(["drow", "train", "--data", "x", "--out", "y", "--fusion", "none", "--T", "2"]);
        assert!(matches!(effective_config(&cli), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::parse_from(["drow", "--seed", "9", "train", "--data", "x", "--out", "y", "--T", "3", "--widths", "4,4,8,8"]);
        let cfg = effective_config(&cli).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.input_frames, 4);
        assert_eq!(cfg.model.stage_channels, [4, 4, 8, 8]);
    }

    #[test]
    fn error_line_is_single_line() {
        let e = Error::Config("bad\nthing".into());
        let l = error_line(&e);
        assert!(l.starts_with("error kind=config msg="));
        assert!(!l.contains('\n'));
    }
}

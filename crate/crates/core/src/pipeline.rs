//! Per-frame inference: temporal cutouts, network forward pass, voting.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::ScanSequence;
use crate::error::{Error, Result};
use crate::net::{forward, Batch, Mode, ModelConfig, ModelParams, PointPrediction};
use crate::preproc::{temporal_cutouts_into, PreprocConfig};
use crate::types::Detection;
use crate::vote::{detect, VotingConfig};

/// Checks that the preprocessing produces what the model consumes.
pub fn check_compatible(model: &ModelConfig, preproc: &PreprocConfig) -> Result<()> {
    if model.input_frames != preproc.frames() || model.input_points != preproc.num_cutout_points {
        return Err(Error::ConfigMismatch(format!(
            "weights expect {} frames of {} points, preprocessing yields {} of {}",
            model.input_frames,
            model.input_points,
            preproc.frames(),
            preproc.num_cutout_points
        )));
    }
    Ok(())
}

/// Class distribution and vote for every beam of frame `idx`.
pub fn predict_frame(
    params: &ModelParams<f32>,
    sequence: &ScanSequence,
    idx: usize,
    preproc: &PreprocConfig,
) -> Result<Vec<PointPrediction>> {
    let g = &sequence.geometry;
    let w = sequence.window_at(idx, preproc.time_window);
    let beams: Vec<usize> = (0..g.num_beams).collect();
    let per = preproc.frames() * preproc.num_cutout_points;
    let mut data = vec![0.0; beams.len() * per];
    temporal_cutouts_into(&w.scans, w.odometry(), &beams, g, preproc, &mut data)?;
    let batch = Batch::<f32>::from_f64(beams.len(), preproc.frames(), preproc.num_cutout_points, &data)?;
    let (out, _) = forward(params, &batch, Mode::Eval)?;
    Ok(out.predictions())
}

pub fn detect_frame(
    params: &ModelParams<f32>,
    sequence: &ScanSequence,
    idx: usize,
    preproc: &PreprocConfig,
    voting: &VotingConfig,
) -> Result<Vec<Detection>> {
    let preds = predict_frame(params, sequence, idx, preproc)?;
    detect(&preds, &sequence.scans[idx], &sequence.geometry, voting)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameSelection {
    All,
    Annotated,
}

/// Detections keyed by seq. Frames run on the current rayon pool and are
/// merged in seq order, so the result does not depend on the worker count.
pub fn detect_sequence(
    params: &ModelParams<f32>,
    sequence: &ScanSequence,
    preproc: &PreprocConfig,
    voting: &VotingConfig,
    frames: FrameSelection,
) -> Result<BTreeMap<u64, Vec<Detection>>> {
    check_compatible(&params.config, preproc)?;
    voting.validate()?;
    let indices: Vec<usize> = match frames {
        FrameSelection::All => (0..sequence.len()).collect(),
        FrameSelection::Annotated => sequence
            .annotated_seqs
            .iter()
            .filter_map(|&s| sequence.index_of(s))
            .collect(),
    };
    let results: Vec<Result<(u64, Vec<Detection>)>> = indices
        .par_iter()
        .map(|&i| Ok((sequence.scans[i].seq, detect_frame(params, sequence, i, preproc, voting)?)))
        .collect();
    results.into_iter().collect()
}

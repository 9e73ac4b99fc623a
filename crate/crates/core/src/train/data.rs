use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::config::{DataSource, RunConfig};
use crate::dataset::{frame_targets, generate_corpus, load_desed_metadata, Annotation, LabelStatus, Split};
use crate::error::{Error, Result};
use crate::eval::EventList;
use crate::frontend::{FrontendConfig, Waveform};
use crate::losses::Target;
use crate::matrix::Matrix;

/// Per-band standardization fitted on training features.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit<'a>(clips: impl IntoIterator<Item = &'a Matrix>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in clips {
            if sum.is_empty() {
                sum = vec![0.0; m.cols()];
                sq = vec![0.0; m.cols()];
            }
            for r in 0..m.rows() {
                for (c, &v) in m.row(r).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += m.rows();
        }
        if n == 0 {
            return Err(Error::InvalidArgument("no training frames to fit a normalizer".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainClip {
    pub id: String,
    pub status: LabelStatus,
    /// `T x F` standardized log-mel features.
    pub features: Matrix,
    pub target: Target,
}

#[derive(Debug, Clone)]
pub struct ValClip {
    pub id: String,
    pub features: Matrix,
    pub truth: EventList,
    /// `T' x M` frame targets derived from `truth`.
    pub targets: Matrix,
}

/// Features and labels ready for training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<TrainClip>,
    pub val: Vec<ValClip>,
    pub normalizer: Normalizer,
    /// Input frames per clip after cropping or padding.
    pub frames: usize,
    pub output_frames: usize,
    /// Seconds covered by one output frame.
    pub frame_span_s: f64,
    pub n_classes: usize,
}

impl PreparedData {
    pub fn indices_with(&self, status: LabelStatus) -> Vec<usize> {
        (0..self.train.len()).filter(|&i| self.train[i].status == status).collect()
    }
}

struct RawClip {
    id: String,
    split: Split,
    annotation: Annotation,
    mel: Matrix,
}

/// Input frame count for clips of `clip_len_s`, cropped to a multiple of the
/// total time pooling.
pub fn clip_frames(cfg: &RunConfig, clip_len_s: f64) -> usize {
    let n = (clip_len_s * cfg.frontend.sample_rate_hz as f64).round() as usize;
    let t = cfg.frontend.frame_count(n);
    t - t % cfg.network.time_pool_total()
}

fn fit_length(m: &Matrix, frames: usize) -> Matrix {
    let mut out = Matrix::zeros(frames, m.cols());
    for r in 0..frames.min(m.rows()) {
        out.row_mut(r).copy_from_slice(m.row(r));
    }
    out
}

fn wav_path(dir: &Path, id: &str) -> std::path::PathBuf {
    if id.ends_with(".wav") {
        dir.join(id)
    } else {
        dir.join(format!("{id}.wav"))
    }
}

fn extract_all(frontend: &FrontendConfig, jobs: Vec<(String, Split, Annotation, std::path::PathBuf)>) -> Result<Vec<RawClip>> {
    jobs.into_par_iter()
        .map(|(id, split, annotation, path)| {
            let w = Waveform::read_wav(&path)?;
            Ok(RawClip { id, split, annotation, mel: frontend.extract(&w)? })
        })
        .collect()
}

fn load_raw(cfg: &RunConfig) -> Result<(Vec<RawClip>, f64)> {
    match &cfg.data {
        DataSource::Synthetic(params) => {
            let corpus = generate_corpus(params)?;
            let raw = corpus
                .clips
                .par_iter()
                .zip(corpus.manifest.entries.par_iter())
                .map(|(clip, entry)| {
                    let annotation = match entry.split {
                        Split::Validation => Annotation::Strong(clip.truth_events()),
                        Split::Train => entry.annotation.clone(),
                    };
                    Ok(RawClip {
                        id: clip.clip_id.clone(),
                        split: clip.split,
                        annotation,
                        mel: cfg.frontend.extract(&clip.waveform)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((raw, params.clip_len_s))
        }
        DataSource::Manifest { dir, clip_len_s } => {
            let manifest = crate::dataset::CorpusManifest::read_jsonl(dir.join("manifest.jsonl"))?;
            let jobs = manifest
                .entries
                .into_iter()
                .map(|e| {
                    let path = wav_path(dir, &e.clip_id);
                    (e.clip_id, e.split, e.annotation, path)
                })
                .collect();
            Ok((extract_all(&cfg.frontend, jobs)?, *clip_len_s))
        }
        DataSource::Desed {
            class_names,
            strong_tsv,
            strong_dir,
            weak_tsv,
            weak_dir,
            unlabeled_tsv,
            unlabeled_dir,
            validation_tsv,
            validation_dir,
            clip_len_s,
        } => {
            let names: Vec<&str> = class_names.iter().map(String::as_str).collect();
            let mut jobs = Vec::new();
            let mut add = |tsv: &Path, dir: &Path, split: Split| -> Result<()> {
                for e in load_desed_metadata(tsv, &names, split)?.entries {
                    let path = wav_path(dir, &e.clip_id);
                    jobs.push((e.clip_id, split, e.annotation, path));
                }
                Ok(())
            };
            for (tsv, dir) in [(strong_tsv, strong_dir), (weak_tsv, weak_dir), (unlabeled_tsv, unlabeled_dir)] {
                if let Some(tsv) = tsv {
                    let dir = dir.as_ref().ok_or_else(|| Error::Config(format!("{} has no audio dir", tsv.display())))?;
                    add(tsv, dir, Split::Train)?;
                }
            }
            add(validation_tsv, validation_dir, Split::Validation)?;
            if let (None, Some(dir)) = (unlabeled_tsv, unlabeled_dir) {
                let mut names: Vec<String> = fs::read_dir(dir)?
                    .filter_map(|e| e.ok())
                    .map(|e| e.file_name().to_string_lossy().into_owned())
                    .filter(|n| n.ends_with(".wav"))
                    .collect();
                names.sort();
                for n in names {
                    let path = dir.join(&n);
                    jobs.push((n, Split::Train, Annotation::None, path));
                }
            }
            Ok((extract_all(&cfg.frontend, jobs)?, *clip_len_s))
        }
    }
}

/// Loads or generates the configured clips and turns them into standardized
/// features and targets. A given `normalizer` (e.g. from a checkpoint) is
/// used instead of fitting one on the training clips.
pub fn prepare_data(cfg: &RunConfig, normalizer: Option<Normalizer>) -> Result<PreparedData> {
    cfg.validate()?;
    let (raw, clip_len_s) = load_raw(cfg)?;
    let frames = clip_frames(cfg, clip_len_s);
    let output_frames = cfg.network.output_frames(frames);
    if output_frames == 0 {
        return Err(Error::Config("clips are shorter than the network's time pooling".into()));
    }
    let frame_span_s = (cfg.frontend.hop_len * cfg.network.time_pool_total()) as f64 / cfg.frontend.sample_rate_hz as f64;
    let span_total = output_frames as f64 * frame_span_s;
    let n_classes = cfg.n_classes();

    let normalizer = match normalizer {
        Some(n) => n,
        None => Normalizer::fit(
            raw.iter().filter(|c| c.split == Split::Train).map(|c| &c.mel),
        )?,
    };
    if normalizer.mean.len() != cfg.frontend.n_mels {
        return Err(Error::Config("normalizer does not match the mel band count".into()));
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    for clip in raw {
        let features = fit_length(&normalizer.apply(&clip.mel), frames);
        match clip.split {
            Split::Train => {
                let target = match &clip.annotation {
                    Annotation::Strong(ev) => Target::Strong(frame_targets(ev, output_frames, span_total, n_classes)),
                    Annotation::Weak(set) => Target::Weak(weak_vector(set, n_classes)),
                    Annotation::None => Target::Unlabeled,
                };
                train.push(TrainClip { id: clip.id, status: clip.annotation.status(), features, target });
            }
            Split::Validation => {
                let truth = match clip.annotation {
                    Annotation::Strong(ev) => ev,
                    _ => return Err(Error::Config(format!("validation clip {} lacks strong labels", clip.id))),
                };
                let targets = frame_targets(&truth, output_frames, span_total, n_classes);
                val.push(ValClip { id: clip.id, features, truth, targets });
            }
        }
    }
    log::info!(
        "prepared {} training and {} validation clips, {frames} frames each",
        train.len(),
        val.len()
    );
    Ok(PreparedData { train, val, normalizer, frames, output_frames, frame_span_s, n_classes })
}

fn weak_vector(set: &BTreeSet<usize>, n_classes: usize) -> Vec<f64> {
    (0..n_classes).map(|c| set.contains(&c) as u8 as f64).collect()
}

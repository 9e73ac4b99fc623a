//! Two-phase training: mean teacher with CutMix consistency first, then the
//! prototype loss on selected anchors.
//!
//! Every random choice is drawn from a ChaCha stream derived from the run
//! seed and the epoch or step index, so a run resumed from a checkpoint
//! continues exactly as the uninterrupted run would.

mod checkpoint;
mod config;
mod data;
mod metrics;

use std::fs;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{Ablation, BatchComposition, DataSource, OptimConfig, PrototypeConfig, RunConfig, Variant};
pub use data::{clip_frames, prepare_data, Normalizer, PreparedData, TrainClip, ValClip};
pub use metrics::{EpochRecord, MetricsLog, Record, StepRecord};

use crate::anchors::{frame_provenance, select};
use crate::cutmix::{cutmix_pred, cutmix_spec, sample_pairing, TimeMask};
use crate::dataset::LabelStatus;
use crate::error::{Error, Result};
use crate::eval::{decode, event_counts, frame_counts, scatter_ratio, Collars, F1Counts, Scores};
use crate::losses::{compose, l_clc, l_mt, l_pgc, l_sup, ramp, BatchLossReport, Phase, Target, Term};
use crate::matrix::Matrix;
use crate::nn::{Adam, ForwardCache, ForwardOutputs, ModelPair, Network};
use crate::prototypes::{ClassInit, FeatureBuffer, PrototypePool};

const STREAM_INIT: u64 = 0;
const STREAM_EPOCH: u64 = 1 << 40;
const STREAM_STEP: u64 = 2 << 40;
const STREAM_TRANSITION: u64 = 3 << 40;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Completed optimizer steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub phase: Phase,
    pub models: ModelPair,
    pub optimizer: Adam,
    pub pool: Option<PrototypePool>,
}

/// Final and best validation scores of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_scores: Scores,
    pub best_event_f1: f64,
    pub best_epoch: usize,
}

/// Per-frame network outputs of one validation clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEmbedding {
    pub clip_id: String,
    pub frame: usize,
    /// Classes active in the frame targets.
    pub classes: Vec<usize>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
}

/// `tr(S_b) / tr(S_w)` of encoder features `q` over frames with exactly
/// one active class.
pub fn single_label_scatter(embeddings: &[FrameEmbedding]) -> Result<f64> {
    let (feats, labels): (Vec<Vec<f64>>, Vec<usize>) = embeddings
        .iter()
        .filter(|e| e.classes.len() == 1)
        .map(|e| (e.q.clone(), e.classes[0]))
        .unzip();
    scatter_ratio(&feats, &labels)
}

pub struct Trainer {
    config: RunConfig,
    data: Arc<PreparedData>,
    net: Network,
    state: RunState,
    pools: [Vec<usize>; 3],
    per_batch: [usize; 3],
    steps_per_epoch: usize,
    r_max_steps: usize,
}

impl Trainer {
    /// Fresh run with parameters drawn from the seed.
    pub fn new(config: RunConfig, data: Arc<PreparedData>) -> Result<Self> {
        let net = Network::new(config.network.clone())?;
        let params = net.init_params(&mut stream_rng(config.seed, STREAM_INIT));
        let state = RunState {
            step: 0,
            epoch: 0,
            phase: Phase::L1,
            optimizer: Adam::new(params.len(), config.optim.lr),
            models: ModelPair::new(params),
            pool: None,
        };
        Self::with_state(config, data, net, state)
    }

    /// Continues from a checkpoint. `data` must have been prepared with the
    /// checkpoint's normalizer.
    pub fn resume(ckpt: Checkpoint, data: Arc<PreparedData>) -> Result<Self> {
        if ckpt.normalizer != data.normalizer {
            return Err(Error::Checkpoint("data was prepared with a different normalizer".into()));
        }
        let net = Network::new(ckpt.config.network.clone())?;
        if ckpt.state.models.student.len() != net.num_params() {
            return Err(Error::Checkpoint("parameter count does not match the network".into()));
        }
        Self::with_state(ckpt.config, data, net, ckpt.state)
    }

    fn with_state(config: RunConfig, data: Arc<PreparedData>, net: Network, state: RunState) -> Result<Self> {
        config.validate()?;
        if data.n_classes != config.network.classes {
            return Err(Error::Config("data and network disagree on the class count".into()));
        }
        let pools = [
            data.indices_with(LabelStatus::Strong),
            data.indices_with(LabelStatus::Weak),
            data.indices_with(LabelStatus::Unlabeled),
        ];
        let b = config.batch;
        let per_batch = if config.supervised_only { [b.strong, 0, 0] } else { [b.strong, b.weak, b.unlabeled] };
        let steps_per_epoch = pools
            .iter()
            .zip(per_batch)
            .filter(|(p, k)| *k > 0 && !p.is_empty())
            .map(|(p, k)| p.len().div_ceil(k))
            .max()
            .ok_or_else(|| Error::Config("no training clips for the configured batch composition".into()))?;
        for (name, (p, k)) in ["strong", "weak", "unlabeled"].iter().zip(pools.iter().zip(per_batch)) {
            if k > 0 && p.is_empty() {
                log::warn!("batch asks for {k} {name} clips but there are none");
            }
        }
        let r_max_steps = if config.losses.r_max_steps > 0 {
            config.losses.r_max_steps
        } else {
            config.rampup_epochs.unwrap_or(config.epochs_phase1.div_ceil(2)) * steps_per_epoch
        };
        Ok(Self { config, data, net, state, pools, per_batch, steps_per_epoch, r_max_steps })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn data(&self) -> &PreparedData {
        &self.data
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn r_max_steps(&self) -> usize {
        self.r_max_steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.config.clone(), normalizer: self.data.normalizer.clone(), state: self.state.clone() }
    }

    /// Training clip indices of step `s` within `epoch`: each label pool is
    /// walked through concatenated per-epoch shuffles.
    pub fn batch_indices(&self, epoch: usize, s: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, (pool, &k)) in self.pools.iter().zip(&self.per_batch).enumerate() {
            if k == 0 || pool.is_empty() {
                continue;
            }
            let mut rng = stream_rng(self.config.seed, STREAM_EPOCH | (epoch as u64) << 2 | i as u64);
            let need = (s + 1) * k;
            let mut order = Vec::with_capacity(need + pool.len());
            while order.len() < need {
                let mut perm = pool.clone();
                perm.shuffle(&mut rng);
                order.extend(perm);
            }
            out.extend_from_slice(&order[s * k..need]);
        }
        out
    }

    fn forward_all(&self, params: &[f64], xs: &[&Matrix]) -> Result<Vec<ForwardOutputs>> {
        xs.par_iter().map(|x| self.net.forward(params, x)).collect()
    }

    fn forward_train_all(&self, params: &[f64], xs: &[&Matrix]) -> Result<Vec<ForwardCache>> {
        xs.par_iter().map(|x| self.net.forward_train(params, x)).collect()
    }

    /// Runs one optimizer step on the batch given by the current step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let epoch = (step / self.steps_per_epoch as u64) as usize;
        let s = (step % self.steps_per_epoch as u64) as usize;
        let phase = self.state.phase;
        let cfg = &self.config;
        let w = cfg.losses;
        let batch = self.batch_indices(epoch, s);
        let clips: Vec<&TrainClip> = batch.iter().map(|&i| &self.data.train[i]).collect();
        let xs: Vec<&Matrix> = clips.iter().map(|c| &c.features).collect();
        let targets: Vec<&Target> = clips.iter().map(|c| &c.target).collect();
        let mut rng = stream_rng(cfg.seed, STREAM_STEP | step);
        let student = &self.state.models.student;
        let n = clips.len();
        let r = ramp(step as usize, self.r_max_steps);

        let caches = self.forward_train_all(student, &xs)?;
        let ps: Vec<Matrix> = caches.iter().map(|c| c.outputs().p.clone()).collect();
        let sup = l_sup(&ps, &targets)?;
        let zero_term = |mats: &[Matrix]| Term {
            value: 0.0,
            grad: mats.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        };

        let mut report = BatchLossReport { l_sup: sup.value, ramp: r, ..Default::default() };
        let mut d_orig = sup.grad;
        let mut mixed: Option<(Vec<ForwardCache>, Vec<Matrix>, Vec<Matrix>)> = None;
        let mut anchor_fraction = 0.0;

        if !cfg.supervised_only {
            let teacher = self.forward_all(&self.state.models.teacher, &xs)?;
            let pt: Vec<Matrix> = teacher.iter().map(|o| o.p.clone()).collect();
            let mt = l_mt(&ps, &pt)?;
            report.l_mt = mt.value;
            for (d, g) in d_orig.iter_mut().zip(&mt.grad) {
                axpy(d, r, g);
            }

            let use_pgc = phase == Phase::L2 && cfg.ablation.gc;
            if cfg.ablation.lc || use_pgc {
                let t = self.data.frames;
                let t_out = self.data.output_frames;
                let sigma = sample_pairing(n, &mut rng);
                let masks = (0..n).map(|_| TimeMask::sample(t, t_out, &mut rng)).collect::<Result<Vec<_>>>()?;
                let xm = (0..n)
                    .map(|b| cutmix_spec(xs[b], xs[sigma[b]], &masks[b]))
                    .collect::<Result<Vec<_>>>()?;
                let ptm = (0..n)
                    .map(|b| cutmix_pred(&pt[b], &pt[sigma[b]], &masks[b]))
                    .collect::<Result<Vec<_>>>()?;
                let xm_refs: Vec<&Matrix> = xm.iter().collect();
                let mcaches = self.forward_train_all(student, &xm_refs)?;
                let psm: Vec<Matrix> = mcaches.iter().map(|c| c.outputs().p.clone()).collect();

                let mut d_p = zero_term(&psm).grad;
                if cfg.ablation.lc {
                    let clc = l_clc(&psm, &ptm)?;
                    report.l_clc = clc.value;
                    for (d, g) in d_p.iter_mut().zip(&clc.grad) {
                        axpy(d, r, g);
                    }
                }
                let vsm: Vec<Matrix> = mcaches.iter().map(|c| c.outputs().v.clone()).collect();
                let mut d_v = zero_term(&vsm).grad;
                if use_pgc {
                    let pool = self.state.pool.as_mut().ok_or(Error::PoolUninitialized)?;
                    let mut buffer = FeatureBuffer::new(self.data.n_classes, cfg.prototypes.buffer_capacity);
                    for o in &teacher {
                        buffer.collect(&o.p, &o.v, w.tau_plus, &mut rng)?;
                    }
                    pool.step(&buffer)?;
                    let prov: Vec<Vec<LabelStatus>> = (0..n)
                        .map(|b| frame_provenance(&masks[b], clips[b].status, clips[sigma[b]].status))
                        .collect();
                    let anchors = select(&ptm, &psm, &prov, w.tau_plus, w.tau_minus, cfg.ablation.sas)?;
                    let pgc = l_pgc(&vsm, &anchors.pairs, pool, w.gamma)?;
                    report.l_pgc = pgc.value;
                    report.anchors_selected = anchors.pairs.len();
                    anchor_fraction = anchors.fraction();
                    for (d, g) in d_v.iter_mut().zip(&pgc.grad) {
                        axpy(d, w.alpha, g);
                    }
                }
                mixed = Some((mcaches, d_p, d_v));
            }
        }

        report.total = compose(&report, w.alpha, phase);
        if !report.total.is_finite() {
            return Err(self.non_finite(step, &report));
        }

        let n_params = self.net.num_params();
        let per_clip: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|b| {
                let mut g = vec![0.0; n_params];
                self.net.backward(student, &caches[b], Some(&d_orig[b]), None, &mut g)?;
                if let Some((mc, d_p, d_v)) = &mixed {
                    self.net.backward(student, &mc[b], Some(&d_p[b]), Some(&d_v[b]), &mut g)?;
                }
                Ok(g)
            })
            .collect::<Result<_>>()?;
        let mut grad = vec![0.0; n_params];
        for g in &per_clip {
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(self.non_finite(step, &report));
        }

        self.state.optimizer.step(&mut self.state.models.student, &grad)?;
        let decay = (1.0 - 1.0 / (step as f64 + 1.0)).min(self.config.optim.ema_decay);
        self.state.models.ema_update(decay)?;
        self.state.step += 1;
        Ok(StepRecord { step, epoch, phase, losses: report, anchor_fraction })
    }

    fn non_finite(&self, step: u64, report: &BatchLossReport) -> Error {
        let detail = format!("{report:?}");
        if let Some(dir) = &self.config.out_dir {
            let dump = serde_json::json!({
                "step": step,
                "losses": report,
                "student_finite": self.state.models.student.iter().all(|v| v.is_finite()),
                "teacher_finite": self.state.models.teacher.iter().all(|v| v.is_finite()),
            });
            let path = dir.join(format!("diagnostic_step_{step}.json"));
            if let Err(e) = fs::write(&path, dump.to_string()) {
                log::error!("could not write {}: {e}", path.display());
            }
        }
        Error::NonFiniteLoss { step, detail }
    }

    /// Passes every training clip through the teacher, collects confident
    /// projections and clusters them into the initial prototypes.
    pub fn transition_to_phase2(&mut self) -> Result<Vec<ClassInit>> {
        let cfg = &self.config;
        let mut report = Vec::new();
        if cfg.ablation.gc && !cfg.supervised_only {
            let mut rng = stream_rng(cfg.seed, STREAM_TRANSITION);
            let xs: Vec<&Matrix> = self.data.train.iter().map(|c| &c.features).collect();
            let outs = self.forward_all(&self.state.models.teacher, &xs)?;
            let mut buffer = FeatureBuffer::new(self.data.n_classes, cfg.prototypes.buffer_capacity);
            for o in &outs {
                buffer.collect(&o.p, &o.v, cfg.losses.tau_plus, &mut rng)?;
            }
            let per_class = if cfg.ablation.mp { cfg.prototypes.per_class } else { 1 };
            let mut pool =
                PrototypePool::new(self.data.n_classes, per_class, cfg.network.projection_dim, cfg.prototypes.momentum)?;
            report = pool.init_offline(&buffer, &cfg.prototypes.kmeans, &mut rng)?;
            self.state.pool = Some(pool);
        }
        self.state.phase = Phase::L2;
        Ok(report)
    }

    /// Teacher predictions on the validation clips.
    pub fn predict_val(&self, params: &[f64]) -> Result<Vec<ForwardOutputs>> {
        let xs: Vec<&Matrix> = self.data.val.iter().map(|c| &c.features).collect();
        self.forward_all(params, &xs)
    }

    /// Frame and event macro F1 of `params` on the validation clips.
    pub fn evaluate_params(&self, params: &[f64]) -> Result<Scores> {
        let outs = self.predict_val(params)?;
        let collars = Collars::default();
        let mut frames = F1Counts::default();
        let mut events = F1Counts::default();
        for (clip, out) in self.data.val.iter().zip(&outs) {
            frames.merge(&frame_counts(&out.p, &clip.targets, self.config.decoding.threshold)?);
            let pred = decode(&out.p, self.data.frame_span_s, &self.config.decoding);
            events.merge(&event_counts(&pred, &clip.truth, &collars));
        }
        Ok(Scores { frame_f1: frames.macro_f1(), event_f1: events.macro_f1(), frame_counts: frames, event_counts: events })
    }

    pub fn evaluate(&self) -> Result<Scores> {
        self.evaluate_params(&self.state.models.teacher)
    }

    /// Teacher outputs for every validation frame.
    pub fn export_embeddings(&self) -> Result<Vec<FrameEmbedding>> {
        let outs = self.predict_val(&self.state.models.teacher)?;
        let mut rows = Vec::new();
        for (clip, out) in self.data.val.iter().zip(&outs) {
            for k in 0..out.p.rows() {
                rows.push(FrameEmbedding {
                    clip_id: clip.id.clone(),
                    frame: k,
                    classes: (0..clip.targets.cols()).filter(|&c| clip.targets.get(k, c) == 1.0).collect(),
                    p: out.p.row(k).to_vec(),
                    q: out.q.row(k).to_vec(),
                    v: out.v.row(k).to_vec(),
                });
            }
        }
        Ok(rows)
    }

    fn save_checkpoint(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.config.out_dir {
            self.checkpoint().save(dir.join(name))?;
        }
        Ok(())
    }

    /// Trains until `epochs_phase1 + epochs_phase2` epochs are complete,
    /// evaluating the teacher after every epoch.
    pub fn run(&mut self, log: &mut MetricsLog) -> Result<RunSummary> {
        let total_epochs = self.config.epochs_phase1 + self.config.epochs_phase2;
        if let Some(dir) = &self.config.out_dir {
            fs::create_dir_all(dir)?;
        }
        let mut best = (f64::NEG_INFINITY, 0usize);
        let mut last = None;
        if self.state.step == 0 {
            let scores = self.evaluate()?;
            log.push(Record::Epoch(EpochRecord {
                epoch: 0,
                phase: self.state.phase,
                step: 0,
                frame_f1: scores.frame_f1,
                event_f1: scores.event_f1,
                mean_total_loss: 0.0,
                mean_anchor_fraction: 0.0,
            }))?;
            best = (scores.event_f1, 0);
            last = Some(scores);
            self.save_checkpoint("best.ckpt")?;
        } else if let Some(path) = self.config.out_dir.as_ref().map(|d| d.join("best.ckpt")).filter(|p| p.exists()) {
            // keep the earlier best unless this run beats it
            let prev = Checkpoint::load(&path)?;
            best = (self.evaluate_params(&prev.state.models.teacher)?.event_f1, prev.state.epoch);
        }
        while self.state.epoch < total_epochs {
            if self.state.epoch >= self.config.epochs_phase1 && self.state.phase == Phase::L1 {
                let init = self.transition_to_phase2()?;
                log::info!("phase 2 from epoch {}: prototypes {init:?}", self.state.epoch);
                log.push(Record::Transition {
                    step: self.state.step,
                    epoch: self.state.epoch,
                    prototypes: init.iter().map(|c| format!("{c:?}")).collect(),
                })?;
            }
            let end = (self.state.epoch as u64 + 1) * self.steps_per_epoch as u64;
            let (mut loss_sum, mut frac_sum, mut n) = (0.0, 0.0, 0usize);
            while self.state.step < end {
                let rec = self.train_step()?;
                loss_sum += rec.losses.total;
                frac_sum += rec.anchor_fraction;
                n += 1;
                log.push(Record::Step(rec))?;
            }
            self.state.epoch += 1;
            let scores = self.evaluate()?;
            log::info!(
                "epoch {}/{total_epochs} phase {:?}: loss {:.4} frame F1 {:.4} event F1 {:.4}",
                self.state.epoch,
                self.state.phase,
                loss_sum / n.max(1) as f64,
                scores.frame_f1,
                scores.event_f1
            );
            log.push(Record::Epoch(EpochRecord {
                epoch: self.state.epoch,
                phase: self.state.phase,
                step: self.state.step,
                frame_f1: scores.frame_f1,
                event_f1: scores.event_f1,
                mean_total_loss: loss_sum / n.max(1) as f64,
                mean_anchor_fraction: frac_sum / n.max(1) as f64,
            }))?;
            self.save_checkpoint("latest.ckpt")?;
            if scores.event_f1 > best.0 {
                best = (scores.event_f1, self.state.epoch);
                self.save_checkpoint("best.ckpt")?;
            }
            last = Some(scores);
        }
        log.flush()?;
        let final_scores = match last {
            Some(s) => s,
            None => self.evaluate()?,
        };
        if best.0 == f64::NEG_INFINITY {
            best = (final_scores.event_f1, self.state.epoch);
        }
        Ok(RunSummary { final_scores, best_event_f1: best.0, best_epoch: best.1 })
    }
}

fn axpy(y: &mut Matrix, a: f64, x: &Matrix) {
    for (u, v) in y.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *u += a * v;
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::CorpusParams;
use crate::error::{Error, Result};
use crate::eval::DecodingConfig;
use crate::frontend::FrontendConfig;
use crate::kmeans::KMeansConfig;
use crate::losses::LossWeights;
use crate::nn::{ConvBlock, NetworkConfig};

/// Which parts of the objective are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// CutMix consistency `L_CLC`.
    pub lc: bool,
    /// Prototype loss `L_PGC` in phase two.
    pub gc: bool,
    /// Selective anchor sampling; off uses every confident weak/unlabeled frame.
    pub sas: bool,
    /// Multiple prototypes per class; off uses one.
    pub mp: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { lc: true, gc: true, sas: true, mp: true }
    }
}

/// Clips of each label status per training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchComposition {
    pub strong: usize,
    pub weak: usize,
    pub unlabeled: usize,
}

impl Default for BatchComposition {
    fn default() -> Self {
        Self { strong: 6, weak: 6, unlabeled: 12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Final teacher EMA decay; early steps use `min(1 - 1/(step+1), decay)`.
    pub ema_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-3, ema_decay: 0.999 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrototypeConfig {
    pub per_class: usize,
    pub momentum: f64,
    pub buffer_capacity: usize,
    pub kmeans: KMeansConfig,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self { per_class: 3, momentum: 0.99, buffer_capacity: crate::prototypes::BUFFER_CAPACITY, kmeans: KMeansConfig::default() }
    }
}

/// Where training and validation clips come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated in memory.
    Synthetic(CorpusParams),
    /// A directory written by `generate-corpus`: `manifest.jsonl` plus one
    /// `<clip_id>.wav` per entry.
    Manifest { dir: PathBuf, clip_len_s: f64 },
    /// DESED-style TSV metadata. Strong and validation TSVs have
    /// `filename onset offset event_label` rows, the weak TSV has
    /// `filename event_labels` rows. Unlabeled clips are the filenames of
    /// `unlabeled_tsv` if given, otherwise every `.wav` in `unlabeled_dir`.
    Desed {
        class_names: Vec<String>,
        strong_tsv: Option<PathBuf>,
        strong_dir: Option<PathBuf>,
        weak_tsv: Option<PathBuf>,
        weak_dir: Option<PathBuf>,
        unlabeled_tsv: Option<PathBuf>,
        unlabeled_dir: Option<PathBuf>,
        validation_tsv: PathBuf,
        validation_dir: PathBuf,
        clip_len_s: f64,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(CorpusParams::default())
    }
}

/// Full description of a run; the run is a pure function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Checkpoints and metrics go here; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    /// Ramp-up length in epochs; defaults to half of phase one.
    pub rampup_epochs: Option<usize>,
    /// Train on strong clips with `L_Sup` only.
    pub supervised_only: bool,
    pub ablation: Ablation,
    pub batch: BatchComposition,
    pub optim: OptimConfig,
    pub prototypes: PrototypeConfig,
    pub losses: LossWeights,
    pub decoding: DecodingConfig,
    pub frontend: FrontendConfig,
    pub network: NetworkConfig,
    pub data: DataSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            epochs_phase1: 100,
            epochs_phase2: 100,
            rampup_epochs: None,
            supervised_only: false,
            ablation: Ablation::default(),
            batch: BatchComposition::default(),
            optim: OptimConfig::default(),
            prototypes: PrototypeConfig::default(),
            losses: LossWeights::default(),
            decoding: DecodingConfig::default(),
            frontend: FrontendConfig::default(),
            network: NetworkConfig::default(),
            data: DataSource::default(),
        }
    }
}

/// Training recipes compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// `L_Sup` on strong clips only.
    Supervised,
    /// Mean teacher: `L_Sup + r L_MT`.
    MeanTeacher,
    /// Full method.
    Lgc,
}

impl RunConfig {
    /// Small 3-class setup that trains in minutes on a single CPU core:
    /// 16 kHz audio, 2048-sample window, 512 hop, 64 mel bands, and a
    /// narrower CRNN with four-fold time pooling.
    ///
    /// Strongly labeled clips are mixed at higher SNR than the weak,
    /// unlabeled and validation clips, the way DESED pairs clean synthetic
    /// soundscapes with real recordings. The run is only about 1800 steps
    /// long, so the teacher averages over a shorter window than the usual
    /// 0.999 decay.
    pub fn desk(seed: u64) -> Self {
        let frontend =
            FrontendConfig { sample_rate_hz: 16_000, window_len: 2048, hop_len: 512, n_mels: 64, fmin_hz: 0.0, fmax_hz: 8000.0 };
        let network = NetworkConfig {
            mel_bands: 64,
            conv_blocks: vec![
                ConvBlock { filters: 8, time_pool: 2, freq_pool: 4 },
                ConvBlock { filters: 16, time_pool: 2, freq_pool: 4 },
                ConvBlock { filters: 32, time_pool: 1, freq_pool: 4 },
            ],
            recurrent_hidden: 32,
            projector_hidden: 64,
            projection_dim: 32,
            classes: 3,
        };
        let corpus = CorpusParams {
            n_strong: 40,
            n_weak: 40,
            n_unlabeled: 120,
            n_validation: 60,
            n_classes: 3,
            seed,
            strong_snr_db: (6.0, 15.0),
            field_snr_db: (-9.0, 0.0),
            ..CorpusParams::default()
        };
        Self {
            seed,
            epochs_phase1: 30,
            epochs_phase2: 30,
            batch: BatchComposition { strong: 2, weak: 2, unlabeled: 4 },
            optim: OptimConfig { lr: 2e-3, ema_decay: 0.99 },
            frontend,
            network,
            data: DataSource::Synthetic(corpus),
            ..Self::default()
        }
    }

    /// A few seconds of audio and a network of about a thousand
    /// parameters; for tests and quick checks of the pipeline.
    pub fn smoke(seed: u64) -> Self {
        let frontend =
            FrontendConfig { sample_rate_hz: 16_000, window_len: 512, hop_len: 512, n_mels: 16, fmin_hz: 0.0, fmax_hz: 8000.0 };
        let network = NetworkConfig {
            mel_bands: 16,
            conv_blocks: vec![
                ConvBlock { filters: 3, time_pool: 2, freq_pool: 2 },
                ConvBlock { filters: 4, time_pool: 2, freq_pool: 2 },
            ],
            recurrent_hidden: 4,
            projector_hidden: 6,
            projection_dim: 5,
            classes: 3,
        };
        let corpus = CorpusParams {
            n_strong: 4,
            n_weak: 4,
            n_unlabeled: 6,
            n_validation: 3,
            n_classes: 3,
            seed,
            clip_len_s: 2.0,
            event_len_s: (0.3, 1.0),
            ..CorpusParams::default()
        };
        Self {
            seed,
            epochs_phase1: 2,
            epochs_phase2: 2,
            rampup_epochs: Some(1),
            batch: BatchComposition { strong: 2, weak: 2, unlabeled: 2 },
            optim: OptimConfig { lr: 1e-2, ..OptimConfig::default() },
            prototypes: PrototypeConfig { per_class: 2, ..PrototypeConfig::default() },
            losses: LossWeights { tau_plus: 0.6, tau_minus: 0.55, ..LossWeights::default() },
            frontend,
            network,
            data: DataSource::Synthetic(corpus),
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        match variant {
            Variant::Supervised => {
                self.supervised_only = true;
                self.ablation.lc = false;
                self.ablation.gc = false;
            }
            Variant::MeanTeacher => {
                self.supervised_only = false;
                self.ablation.lc = false;
                self.ablation.gc = false;
            }
            Variant::Lgc => {
                self.supervised_only = false;
                self.ablation = Ablation::default();
            }
        }
        self
    }

    pub fn n_classes(&self) -> usize {
        match &self.data {
            DataSource::Synthetic(p) => p.n_classes,
            DataSource::Manifest { .. } => self.network.classes,
            DataSource::Desed { class_names, .. } => class_names.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.losses.validate()?;
        self.decoding.validate()?;
        if self.network.mel_bands != self.frontend.n_mels {
            return Err(Error::Config(format!(
                "network expects {} mel bands, frontend produces {}",
                self.network.mel_bands, self.frontend.n_mels
            )));
        }
        if self.network.classes != self.n_classes() {
            return Err(Error::Config(format!(
                "network has {} classes, data has {}",
                self.network.classes,
                self.n_classes()
            )));
        }
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.ema_decay) {
            return Err(Error::Config("lr must be positive and ema_decay in [0, 1)".into()));
        }
        if self.prototypes.per_class == 0 || !(0.0..1.0).contains(&self.prototypes.momentum) {
            return Err(Error::Config("prototypes need per_class >= 1 and momentum in [0, 1)".into()));
        }
        if self.batch.strong + self.batch.weak + self.batch.unlabeled == 0 {
            return Err(Error::Config("empty batch composition".into()));
        }
        if self.supervised_only && self.batch.strong == 0 {
            return Err(Error::Config("supervised-only training needs strong clips in the batch".into()));
        }
        if let DataSource::Synthetic(p) = &self.data {
            p.validate()?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

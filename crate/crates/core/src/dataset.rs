//! Synthetic sound-event corpus with strong / weak / unlabeled splits, DESED
//! style TSV metadata, and frame-level targets.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Event, EventList};
use crate::frontend::Waveform;
use crate::matrix::Matrix;

/// Class names of the DESED / DCASE task 4 ontology.
pub const DESED_CLASSES: [&str; 10] = [
    "Alarm_bell_ringing",
    "Blender",
    "Cat",
    "Dishes",
    "Dog",
    "Electric_shaver_toothbrush",
    "Frying",
    "Running_water",
    "Speech",
    "Vacuum_cleaner",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelStatus {
    Strong,
    Weak,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// What a clip's label status exposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Annotation {
    Strong(EventList),
    Weak(BTreeSet<usize>),
    None,
}

impl Annotation {
    pub fn status(&self) -> LabelStatus {
        match self {
            Annotation::Strong(_) => LabelStatus::Strong,
            Annotation::Weak(_) => LabelStatus::Weak,
            Annotation::None => LabelStatus::Unlabeled,
        }
    }
}

/// A `T x F` log-mel clip with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct MelClip {
    pub frames: Matrix,
    pub annotation: Annotation,
}

impl MelClip {
    pub fn new(frames: Matrix, annotation: Annotation) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::Shape("empty mel clip".into()));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("mel clip".into()));
        }
        Ok(Self { frames, annotation })
    }

    pub fn status(&self) -> LabelStatus {
        self.annotation.status()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.rows()
    }

    pub fn mel_bands(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Tone,
    Chirp,
    NoiseBurst,
    AmTone,
}

/// Spectral signature of a synthetic class: generator kind plus the band
/// its base frequency is drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSignature {
    pub kind: EventKind,
    pub band_hz: (f64, f64),
}

pub const SIGNATURES: [ClassSignature; 10] = [
    ClassSignature { kind: EventKind::Tone, band_hz: (400.0, 700.0) },
    ClassSignature { kind: EventKind::Chirp, band_hz: (1200.0, 2000.0) },
    ClassSignature { kind: EventKind::NoiseBurst, band_hz: (3000.0, 4500.0) },
    ClassSignature { kind: EventKind::AmTone, band_hz: (800.0, 1100.0) },
    ClassSignature { kind: EventKind::Tone, band_hz: (5000.0, 6000.0) },
    ClassSignature { kind: EventKind::Chirp, band_hz: (2600.0, 3000.0) },
    ClassSignature { kind: EventKind::NoiseBurst, band_hz: (600.0, 1000.0) },
    ClassSignature { kind: EventKind::AmTone, band_hz: (1800.0, 2200.0) },
    ClassSignature { kind: EventKind::Tone, band_hz: (150.0, 250.0) },
    ClassSignature { kind: EventKind::NoiseBurst, band_hz: (6000.0, 7500.0) },
];

/// Ground truth of one synthetic event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub class_id: usize,
    pub kind: EventKind,
    pub onset_s: f64,
    pub offset_s: f64,
    pub base_freq_hz: f64,
    pub snr_db: f64,
}

impl EventSpec {
    pub fn event(&self) -> Event {
        Event { class: self.class_id, onset_s: self.onset_s, offset_s: self.offset_s }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub split: Split,
    pub annotation: Annotation,
}

impl ManifestEntry {
    pub fn status(&self) -> LabelStatus {
        self.annotation.status()
    }
}

/// Clip list with only the annotations each label status exposes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub class_names: Vec<String>,
    pub seed: Option<u64>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub strong: usize,
    pub weak: usize,
    pub unlabeled: usize,
    pub validation: usize,
}

impl CorpusManifest {
    pub fn counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for e in &self.entries {
            match (e.split, e.status()) {
                (Split::Validation, _) => c.validation += 1,
                (Split::Train, LabelStatus::Strong) => c.strong += 1,
                (Split::Train, LabelStatus::Weak) => c.weak += 1,
                (Split::Train, LabelStatus::Unlabeled) => c.unlabeled += 1,
            }
        }
        c
    }

    /// One JSON record per line: a header record, then one per clip.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        let header = serde_json::json!({ "class_names": self.class_names, "seed": self.seed });
        writeln!(w, "{header}")?;
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(fs::File::open(path)?);
        let mut manifest = CorpusManifest::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err =
                |e: serde_json::Error| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() };
            if i == 0 {
                #[derive(Deserialize)]
                struct Header {
                    class_names: Vec<String>,
                    seed: Option<u64>,
                }
                let h: Header = serde_json::from_str(&line).map_err(parse_err)?;
                manifest.class_names = h.class_names;
                manifest.seed = h.seed;
            } else {
                manifest.entries.push(serde_json::from_str(&line).map_err(parse_err)?);
            }
        }
        Ok(manifest)
    }
}

/// Parses DESED-style metadata.
///
/// Strong rows are `filename  onset  offset  event_label`; weak rows are
/// `filename  event_labels` with comma separated labels, and single-column
/// `filename` rows list unlabeled clips. A leading header row starting with
/// `filename` is skipped. Rows of one file are merged.
pub fn load_desed_metadata(
    path: impl AsRef<Path>,
    class_names: &[&str],
    split: Split,
) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let class_index: BTreeMap<&str, usize> =
        class_names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let lookup = |line: usize, label: &str| {
        class_index.get(label.trim()).copied().ok_or_else(|| err(line, format!("unknown label {label:?}")))
    };

    let mut order: Vec<String> = Vec::new();
    let mut clips: BTreeMap<String, Annotation> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if i == 0 && fields[0] == "filename" {
            continue;
        }
        let name = fields[0].trim();
        if name.is_empty() {
            return Err(err(line_no, "missing filename".into()));
        }
        let entry = clips.entry(name.to_string()).or_insert_with(|| {
            order.push(name.to_string());
            match fields.len() {
                1 => Annotation::None,
                2 => Annotation::Weak(BTreeSet::new()),
                _ => Annotation::Strong(EventList::empty()),
            }
        });
        match (fields.len(), entry) {
            (4, Annotation::Strong(events)) => {
                if fields[1..].iter().all(|f| f.trim().is_empty()) {
                    continue;
                }
                let num = |s: &str| {
                    s.trim().parse::<f64>().map_err(|_| err(line_no, format!("bad time {s:?}")))
                };
                let (onset, offset) = (num(fields[1])?, num(fields[2])?);
                if !(onset >= 0.0 && onset < offset) {
                    return Err(err(line_no, format!("onset {onset} must be in [0, offset {offset})")));
                }
                let class = lookup(line_no, fields[3])?;
                let mut list = events.events().to_vec();
                list.push(Event { class, onset_s: onset, offset_s: offset });
                *events = EventList::new(list)?;
            }
            (2, Annotation::Weak(set)) => {
                for label in fields[1].split(',').filter(|l| !l.trim().is_empty()) {
                    set.insert(lookup(line_no, label)?);
                }
            }
            (1, Annotation::None) => {}
            (n, _) => {
                return Err(err(line_no, format!("expected 1, 2 or 4 tab-separated fields, got {n}")));
            }
        }
    }
    if order.is_empty() {
        log::warn!("{}: no clips found", path.display());
    }
    let entries = order
        .into_iter()
        .map(|name| {
            let annotation = clips.remove(&name).expect("inserted above");
            ManifestEntry { clip_id: name, split, annotation }
        })
        .collect();
    Ok(CorpusManifest {
        class_names: class_names.iter().map(|s| s.to_string()).collect(),
        seed: None,
        entries,
    })
}

/// `T' x n_classes` binary targets: a frame is active for a class when the
/// class's events cover at least half of the frame span.
pub fn frame_targets(events: &EventList, t_out: usize, clip_len_s: f64, n_classes: usize) -> Matrix {
    let span = clip_len_s / t_out as f64;
    let mut out = Matrix::zeros(t_out, n_classes);
    for class in 0..n_classes {
        let mut spans: Vec<(f64, f64)> = events.of_class(class).map(|e| (e.onset_s, e.offset_s)).collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (a, b) in spans {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        for t in 0..t_out {
            let (lo, hi) = (t as f64 * span, (t + 1) as f64 * span);
            let covered: f64 = merged.iter().map(|&(a, b)| (hi.min(b) - lo.max(a)).max(0.0)).sum();
            if covered >= 0.5 * span {
                out.set(t, class, 1.0);
            }
        }
    }
    out
}

/// Parameters of [`generate_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusParams {
    pub n_strong: usize,
    pub n_weak: usize,
    pub n_unlabeled: usize,
    pub n_validation: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub clip_len_s: f64,
    pub sample_rate_hz: u32,
    pub background_rms: f64,
    /// Event SNR range for strongly labeled clips.
    pub strong_snr_db: (f64, f64),
    /// Event SNR range for weak, unlabeled and validation clips.
    pub field_snr_db: (f64, f64),
    pub event_len_s: (f64, f64),
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            n_strong: 40,
            n_weak: 40,
            n_unlabeled: 120,
            n_validation: 0,
            n_classes: 3,
            seed: 0,
            clip_len_s: 10.0,
            sample_rate_hz: 16_000,
            background_rms: 0.02,
            strong_snr_db: (0.0, 12.0),
            field_snr_db: (0.0, 12.0),
            event_len_s: (0.5, 3.0),
        }
    }
}

impl CorpusParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_classes == 0 || self.n_classes > SIGNATURES.len() {
            return bad(format!("n_classes must be in 1..={}", SIGNATURES.len()));
        }
        if !(self.clip_len_s > 0.0) || self.sample_rate_hz == 0 {
            return bad("clip length and sample rate must be positive".into());
        }
        let (lo, hi) = self.event_len_s;
        if !(lo > 0.0 && lo <= hi && hi <= self.clip_len_s) {
            return bad(format!("event length range {:?} invalid for a {} s clip", self.event_len_s, self.clip_len_s));
        }
        for (name, (a, b)) in [("strong", self.strong_snr_db), ("field", self.field_snr_db)] {
            if !(a <= b) {
                return bad(format!("{name} SNR range is empty"));
            }
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if SIGNATURES[..self.n_classes].iter().any(|s| s.band_hz.1 * 1.3 >= nyquist) {
            return bad("sample rate too low for the class signatures".into());
        }
        Ok(())
    }
}

/// One generated clip with its hidden ground truth.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub clip_id: String,
    pub split: Split,
    pub status: LabelStatus,
    pub waveform: Waveform,
    pub truth: Vec<EventSpec>,
}

impl SynthClip {
    pub fn truth_events(&self) -> EventList {
        EventList::new(self.truth.iter().map(EventSpec::event).collect()).expect("generated events are valid")
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub params: CorpusParams,
    pub manifest: CorpusManifest,
    pub clips: Vec<SynthClip>,
}

impl SynthCorpus {
    /// Writes `<id>.wav` per clip, `manifest.jsonl` and `ground_truth.jsonl`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for clip in &self.clips {
            clip.waveform.write_wav(dir.join(format!("{}.wav", clip.clip_id)))?;
        }
        self.manifest.write_jsonl(dir.join("manifest.jsonl"))?;
        let mut w = BufWriter::new(fs::File::create(dir.join("ground_truth.jsonl"))?);
        for clip in &self.clips {
            let rec = serde_json::json!({ "clip_id": clip.clip_id, "events": clip.truth });
            writeln!(w, "{rec}")?;
        }
        w.flush()?;
        Ok(())
    }
}

impl SynthCorpus {
    /// Writes DESED-style metadata to `<dir>/metadata/`: `strong.tsv` and
    /// `validation.tsv` with `filename onset offset event_label` rows,
    /// `weak.tsv` with `filename event_labels` rows and `unlabeled.tsv`
    /// with bare filenames.
    pub fn write_desed_tsv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let meta = dir.as_ref().join("metadata");
        fs::create_dir_all(&meta)?;
        let names = &self.manifest.class_names;
        let open = |n: &str, header: &str| -> Result<BufWriter<fs::File>> {
            let mut w = BufWriter::new(fs::File::create(meta.join(n))?);
            writeln!(w, "{header}")?;
            Ok(w)
        };
        let strong_header = "filename\tonset\toffset\tevent_label";
        let mut strong = open("strong.tsv", strong_header)?;
        let mut val = open("validation.tsv", strong_header)?;
        let mut weak = open("weak.tsv", "filename\tevent_labels")?;
        let mut unlabeled = open("unlabeled.tsv", "filename")?;
        for clip in &self.clips {
            let file = format!("{}.wav", clip.clip_id);
            match (clip.split, clip.status) {
                (Split::Train, LabelStatus::Weak) => {
                    let labels: BTreeSet<usize> = clip.truth.iter().map(|e| e.class_id).collect();
                    let labels: Vec<&str> = labels.iter().map(|&c| names[c].as_str()).collect();
                    writeln!(weak, "{file}\t{}", labels.join(","))?;
                }
                (Split::Train, LabelStatus::Unlabeled) => writeln!(unlabeled, "{file}")?,
                (split, _) => {
                    let w = if split == Split::Train { &mut strong } else { &mut val };
                    if clip.truth.is_empty() {
                        writeln!(w, "{file}\t\t\t")?;
                    }
                    for e in &clip.truth {
                        writeln!(w, "{file}\t{:.3}\t{:.3}\t{}", e.onset_s, e.offset_s, names[e.class_id])?;
                    }
                }
            }
        }
        for mut w in [strong, val, weak, unlabeled] {
            w.flush()?;
        }
        Ok(())
    }
}

/// Generates a reproducible corpus; every clip is a pure function of
/// `(params, clip index)`.
pub fn generate_corpus(params: &CorpusParams) -> Result<SynthCorpus> {
    params.validate()?;
    let groups = [
        (Split::Train, LabelStatus::Strong, params.n_strong, "strong"),
        (Split::Train, LabelStatus::Weak, params.n_weak, "weak"),
        (Split::Train, LabelStatus::Unlabeled, params.n_unlabeled, "unlabeled"),
        (Split::Validation, LabelStatus::Strong, params.n_validation, "val"),
    ];
    let mut jobs = Vec::new();
    for (split, status, n, prefix) in groups {
        for i in 0..n {
            jobs.push((split, status, format!("{prefix}_{i:04}")));
        }
    }
    let clips: Vec<SynthClip> = jobs
        .into_par_iter()
        .enumerate()
        .map(|(index, (split, status, clip_id))| {
            let snr = if split == Split::Train && status == LabelStatus::Strong {
                params.strong_snr_db
            } else {
                params.field_snr_db
            };
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(index as u64);
            let (waveform, truth) = synth_clip(params, snr, &mut rng)?;
            Ok(SynthClip { clip_id, split, status, waveform, truth })
        })
        .collect::<Result<_>>()?;

    let entries = clips
        .iter()
        .map(|c| {
            let annotation = match c.status {
                LabelStatus::Strong => Annotation::Strong(c.truth_events()),
                LabelStatus::Weak => Annotation::Weak(c.truth.iter().map(|e| e.class_id).collect()),
                LabelStatus::Unlabeled => Annotation::None,
            };
            ManifestEntry { clip_id: c.clip_id.clone(), split: c.split, annotation }
        })
        .collect();
    let class_names = (0..params.n_classes)
        .map(|c| {
            let s = SIGNATURES[c];
            format!("{:?}_{}", s.kind, s.band_hz.0 as u32).to_lowercase()
        })
        .collect();
    Ok(SynthCorpus {
        params: params.clone(),
        manifest: CorpusManifest { class_names, seed: Some(params.seed), entries },
        clips,
    })
}

fn synth_clip(params: &CorpusParams, snr_db: (f64, f64), rng: &mut ChaCha8Rng) -> Result<(Waveform, Vec<EventSpec>)> {
    let sr = params.sample_rate_hz as f64;
    let n = (params.clip_len_s * sr).round() as usize;
    let mut x = pink_noise(n, rng);
    scale_to_rms(&mut x, params.background_rms);

    let n_events = [0usize, 1, 1, 1, 2, 2, 2, 3, 3][rng.random_range(0..9)];
    let mut truth: Vec<EventSpec> = Vec::new();
    for _ in 0..n_events {
        let class_id = rng.random_range(0..params.n_classes);
        let sig = SIGNATURES[class_id];
        let mut placed = None;
        for _ in 0..20 {
            let dur = rng.random_range(params.event_len_s.0..=params.event_len_s.1);
            let onset = rng.random_range(0.0..=params.clip_len_s - dur);
            // round to the sample grid so truth and audio agree exactly
            let onset = (onset * sr).round() / sr;
            let offset = ((onset + dur) * sr).round() / sr;
            let clash = truth
                .iter()
                .any(|e| e.class_id == class_id && onset < e.offset_s && e.onset_s < offset);
            if !clash && offset <= params.clip_len_s {
                placed = Some((onset, offset));
                break;
            }
        }
        let Some((onset_s, offset_s)) = placed else { continue };
        let spec = EventSpec {
            class_id,
            kind: sig.kind,
            onset_s,
            offset_s,
            base_freq_hz: rng.random_range(sig.band_hz.0..=sig.band_hz.1),
            snr_db: rng.random_range(snr_db.0..=snr_db.1),
        };
        let start = (onset_s * sr).round() as usize;
        let end = ((offset_s * sr).round() as usize).min(n);
        let mut ev = render_event(&spec, end - start, sr, rng);
        scale_to_rms(&mut ev, params.background_rms * 10f64.powf(spec.snr_db / 20.0));
        x[start..end].iter_mut().zip(&ev).for_each(|(a, b)| *a += b);
        truth.push(spec);
    }
    truth.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));

    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.99 {
        x.iter_mut().for_each(|v| *v *= 0.99 / peak);
    }
    Ok((Waveform::new(x, params.sample_rate_hz)?, truth))
}

fn scale_to_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

/// Pink noise from white Gaussian noise through Paul Kellet's filter.
fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let out = b.iter().sum::<f64>() + w * 0.5362;
            b[6] = w * 0.115926;
            out
        })
        .collect()
}

fn render_event(spec: &EventSpec, len: usize, sr: f64, rng: &mut impl Rng) -> Vec<f64> {
    use std::f64::consts::PI;
    let f0 = spec.base_freq_hz;
    let mut x: Vec<f64> = match spec.kind {
        EventKind::Tone => (0..len)
            .map(|i| {
                let t = i as f64 / sr;
                (2.0 * PI * f0 * t).sin() + 0.5 * (4.0 * PI * f0 * t).sin() + 0.25 * (6.0 * PI * f0 * t).sin()
            })
            .collect(),
        EventKind::Chirp => {
            let dur = len as f64 / sr;
            let f1 = f0 * 1.3;
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    (2.0 * PI * (f0 * t + 0.5 * (f1 - f0) / dur * t * t)).sin()
                })
                .collect()
        }
        EventKind::AmTone => {
            let fm = rng.random_range(4.0..10.0);
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    (1.0 + 0.8 * (2.0 * PI * fm * t).sin()) * (2.0 * PI * f0 * t).sin()
                })
                .collect()
        }
        EventKind::NoiseBurst => band_noise(len, f0, f0 * 1.3, sr, rng),
    };
    // 20 ms raised-cosine fades
    let fade = ((0.02 * sr) as usize).min(len / 2);
    for i in 0..fade {
        let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        x[i] *= g;
        x[len - 1 - i] *= g;
    }
    x
}

fn band_noise(len: usize, lo: f64, hi: f64, sr: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n = len.next_power_of_two();
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if f < lo || f > hi {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf[..len].iter().map(|c| c.re / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{decode, DecodingConfig};

    fn small(n_strong: usize, n_weak: usize, n_unlabeled: usize, seed: u64) -> CorpusParams {
        CorpusParams { n_strong, n_weak, n_unlabeled, seed, clip_len_s: 2.0, event_len_s: (0.3, 1.0), ..Default::default() }
    }

    #[test]
    fn split_sizes_echo_inputs() {
        let p = CorpusParams { n_strong: 40, n_weak: 40, n_unlabeled: 120, n_classes: 3, seed: 7, clip_len_s: 1.0, event_len_s: (0.2, 0.5), ..Default::default() };
        let corpus = generate_corpus(&p).unwrap();
        assert_eq!(corpus.clips.len(), 200);
        let c = corpus.manifest.counts();
        assert_eq!((c.strong, c.weak, c.unlabeled), (40, 40, 120));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_corpus(&small(3, 2, 2, 5)).unwrap();
        let b = generate_corpus(&small(3, 2, 2, 5)).unwrap();
        assert_eq!(a.manifest, b.manifest);
        for (x, y) in a.clips.iter().zip(&b.clips) {
            assert_eq!(x.waveform, y.waveform);
        }
        let c = generate_corpus(&small(3, 2, 2, 6)).unwrap();
        assert_ne!(a.clips[0].waveform, c.clips[0].waveform);
    }

    #[test]
    fn manifest_hides_what_the_status_does_not_expose() {
        let corpus = generate_corpus(&small(2, 4, 4, 1)).unwrap();
        for (entry, clip) in corpus.manifest.entries.iter().zip(&corpus.clips) {
            match &entry.annotation {
                Annotation::Strong(ev) => assert_eq!(ev, &clip.truth_events()),
                Annotation::Weak(set) => {
                    let truth: BTreeSet<usize> = clip.truth.iter().map(|e| e.class_id).collect();
                    assert_eq!(set, &truth);
                }
                Annotation::None => assert_eq!(clip.status, LabelStatus::Unlabeled),
            }
            for e in &clip.truth {
                assert!(0.0 <= e.onset_s && e.onset_s < e.offset_s && e.offset_s <= 2.0);
            }
        }
    }

    #[test]
    fn single_strong_clip_targets_match_events() {
        let corpus = generate_corpus(&small(1, 0, 0, 3)).unwrap();
        assert_eq!(corpus.clips.len(), 1);
        let events = corpus.clips[0].truth_events();
        let targets = frame_targets(&events, 40, 2.0, 3);
        let span = 2.0 / 40.0;
        for t in 0..40 {
            for c in 0..3 {
                let covered: f64 = events
                    .of_class(c)
                    .map(|e| ((t + 1) as f64 * span).min(e.offset_s) - (t as f64 * span).max(e.onset_s))
                    .map(|v| v.max(0.0))
                    .sum();
                assert_eq!(targets.get(t, c) == 1.0, covered >= 0.5 * span);
            }
        }
    }

    #[test]
    fn frame_target_edge_cases() {
        let whole = EventList::new(vec![Event { class: 1, onset_s: 0.0, offset_s: 10.0 }]).unwrap();
        let t = frame_targets(&whole, 156, 10.0, 3);
        assert!((0..156).all(|r| t.get(r, 1) == 1.0 && t.get(r, 0) == 0.0));
        assert!(frame_targets(&EventList::empty(), 156, 10.0, 3).as_slice().iter().all(|&v| v == 0.0));

        let short = EventList::new(vec![Event { class: 0, onset_s: 0.0, offset_s: 0.32 }]).unwrap();
        let t = frame_targets(&short, 156, 10.0, 1);
        let active: Vec<usize> = (0..156).filter(|&r| t.get(r, 0) == 1.0).collect();
        assert_eq!(active, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn decode_recovers_targets_within_a_frame() {
        let corpus = generate_corpus(&small(6, 0, 0, 11)).unwrap();
        let span = 2.0 / 50.0;
        let cfg = DecodingConfig { median_filter_len: 1, ..Default::default() };
        for clip in &corpus.clips {
            let truth = clip.truth_events();
            let decoded = decode(&frame_targets(&truth, 50, 2.0, 3), span, &cfg);
            for e in truth.events() {
                let crowded = truth.of_class(e.class).any(|o| {
                    o != e && o.onset_s < e.offset_s + 2.0 * span && e.onset_s < o.offset_s + 2.0 * span
                });
                if e.duration() < span || crowded {
                    continue;
                }
                let hit = decoded.of_class(e.class).any(|d| {
                    (d.onset_s - e.onset_s).abs() <= span && (d.offset_s - e.offset_s).abs() <= span
                });
                assert!(hit, "{e:?} not recovered in {decoded:?}");
            }
        }
    }

    #[test]
    fn desed_strong_and_weak_rows() {
        let dir = tempfile::tempdir().unwrap();
        let strong = dir.path().join("strong.tsv");
        fs::write(&strong, "filename\tonset\toffset\tevent_label\na.wav\t0.50\t2.10\tSpeech\na.wav\t3.0\t4.0\tDog\nc.wav\t\t\t\n").unwrap();
        let m = load_desed_metadata(&strong, &DESED_CLASSES, Split::Train).unwrap();
        assert_eq!(m.entries.len(), 2);
        match &m.entries[0].annotation {
            Annotation::Strong(ev) => {
                assert_eq!(ev.events()[0], Event { class: 8, onset_s: 0.5, offset_s: 2.1 });
                assert_eq!(ev.events()[1].class, 4);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(m.entries[1].annotation, Annotation::Strong(EventList::empty()));

        let weak = dir.path().join("weak.tsv");
        fs::write(&weak, "filename\tevent_labels\nb.wav\tDog,Speech\n").unwrap();
        let m = load_desed_metadata(&weak, &DESED_CLASSES, Split::Train).unwrap();
        assert_eq!(m.entries[0].annotation, Annotation::Weak([4usize, 8].into_iter().collect()));
    }

    #[test]
    fn desed_tsv_round_trip() {
        let mut p = small(3, 3, 2, 4);
        p.n_validation = 2;
        let corpus = generate_corpus(&p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.write_desed_tsv(dir.path()).unwrap();
        let names: Vec<&str> = corpus.manifest.class_names.iter().map(String::as_str).collect();
        let meta = dir.path().join("metadata");
        let mut loaded = Vec::new();
        for (f, split) in [("strong.tsv", Split::Train), ("weak.tsv", Split::Train), ("unlabeled.tsv", Split::Train), ("validation.tsv", Split::Validation)] {
            loaded.extend(load_desed_metadata(meta.join(f), &names, split).unwrap().entries);
        }
        assert_eq!(loaded.len(), corpus.clips.len());
        for (entry, clip) in loaded.iter().zip(&corpus.clips) {
            assert_eq!(entry.clip_id, format!("{}.wav", clip.clip_id));
            assert_eq!(entry.split, clip.split);
            match &entry.annotation {
                Annotation::Strong(ev) => {
                    assert_eq!(ev.len(), clip.truth.len());
                    for (a, b) in ev.events().iter().zip(&clip.truth) {
                        assert_eq!(a.class, b.class_id);
                        assert!((a.onset_s - b.onset_s).abs() <= 5e-4 && (a.offset_s - b.offset_s).abs() <= 5e-4);
                    }
                }
                Annotation::Weak(set) => assert_eq!(set, &clip.truth.iter().map(|e| e.class_id).collect()),
                Annotation::None => assert_eq!(clip.status, LabelStatus::Unlabeled),
            }
        }
    }

    #[test]
    fn desed_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tsv");
        fs::write(&p, "a.wav\t0.5\t1.0\tSpeech\na.wav\t0.5\tSpeech\n").unwrap();
        match load_desed_metadata(&p, &DESED_CLASSES, Split::Train) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&p, "a.wav\t0.5\t1.0\tUnicorn\n").unwrap();
        assert!(matches!(load_desed_metadata(&p, &DESED_CLASSES, Split::Train), Err(Error::Parse { line: 1, .. })));
        fs::write(&p, "").unwrap();
        assert!(load_desed_metadata(&p, &DESED_CLASSES, Split::Train).unwrap().entries.is_empty());
    }

    #[test]
    fn manifest_jsonl_round_trip() {
        let corpus = generate_corpus(&small(2, 2, 2, 9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        corpus.manifest.write_jsonl(&path).unwrap();
        assert_eq!(CorpusManifest::read_jsonl(&path).unwrap(), corpus.manifest);
    }
}

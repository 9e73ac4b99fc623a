//! Event decoding and detection scores.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub class: usize,
    pub onset_s: f64,
    pub offset_s: f64,
}

impl Event {
    pub fn duration(&self) -> f64 {
        self.offset_s - self.onset_s
    }
}

/// Events with `onset < offset`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventList(Vec<Event>);

impl EventList {
    pub fn new(events: Vec<Event>) -> Result<Self> {
        if let Some(e) = events.iter().find(|e| !(e.onset_s < e.offset_s)) {
            return Err(Error::InvalidArgument(format!(
                "event of class {} has onset {} >= offset {}",
                e.class, e.onset_s, e.offset_s
            )));
        }
        Ok(Self(events))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn events(&self) -> &[Event] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn of_class(&self, class: usize) -> impl Iterator<Item = &Event> {
        self.0.iter().filter(move |e| e.class == class)
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.0.iter().map(|e| e.class).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingConfig {
    pub threshold: f64,
    /// Odd window length in output frames; 1 disables smoothing.
    pub median_filter_len: usize,
    pub min_event_len_s: f64,
    pub min_gap_s: f64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self { threshold: 0.5, median_filter_len: 7, min_event_len_s: 0.0, min_gap_s: 0.0 }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.median_filter_len % 2 == 0 {
            return Err(Error::Config("median filter length must be odd".into()));
        }
        Ok(())
    }
}

/// Median filter of a binary sequence with half-sample symmetric
/// (`d c b a | a b c d | d c b a`) boundary handling.
pub fn median_filter_binary(x: &[bool], len: usize) -> Vec<bool> {
    if len <= 1 || x.is_empty() {
        return x.to_vec();
    }
    let n = x.len() as isize;
    let half = (len / 2) as isize;
    let reflect = |mut i: isize| -> usize {
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    (0..n)
        .map(|i| {
            let ones = (i - half..=i + half).filter(|&j| x[reflect(j)]).count();
            2 * ones > len
        })
        .collect()
}

/// Frame probabilities to events.
///
/// Per class: threshold, median filter, fill gaps shorter than
/// `min_gap_s`, drop events shorter than `min_event_len_s`.
pub fn decode(p: &Matrix, frame_span_s: f64, cfg: &DecodingConfig) -> EventList {
    let mut events = Vec::new();
    for class in 0..p.cols() {
        let active: Vec<bool> = (0..p.rows()).map(|t| p.get(t, class) > cfg.threshold).collect();
        let mut active = median_filter_binary(&active, cfg.median_filter_len);
        let mut runs = runs_of_ones(&active);
        if cfg.min_gap_s > 0.0 {
            for w in runs.windows(2) {
                let gap = (w[1].0 - w[0].1) as f64 * frame_span_s;
                if gap < cfg.min_gap_s {
                    active[w[0].1..w[1].0].iter_mut().for_each(|a| *a = true);
                }
            }
            runs = runs_of_ones(&active);
        }
        for (start, end) in runs {
            let e = Event {
                class,
                onset_s: start as f64 * frame_span_s,
                offset_s: end as f64 * frame_span_s,
            };
            if e.duration() >= cfg.min_event_len_s {
                events.push(e);
            }
        }
    }
    EventList(events)
}

/// `[start, end)` index ranges of consecutive `true` values.
fn runs_of_ones(x: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &v) in x.iter().enumerate() {
        match (v, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, x.len()));
    }
    runs
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    fn add(&mut self, o: ClassCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-class counts that can be accumulated over clips.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Counts {
    pub per_class: Vec<ClassCounts>,
}

impl F1Counts {
    fn slot(&mut self, class: usize) -> &mut ClassCounts {
        if self.per_class.len() <= class {
            self.per_class.resize(class + 1, ClassCounts::default());
        }
        &mut self.per_class[class]
    }

    pub fn merge(&mut self, other: &F1Counts) {
        for (c, counts) in other.per_class.iter().enumerate() {
            self.slot(c).add(*counts);
        }
    }

    /// Mean F1 over classes with any reference or predicted instance.
    pub fn macro_f1(&self) -> f64 {
        let scored: Vec<f64> =
            self.per_class.iter().filter(|c| !c.is_empty()).map(ClassCounts::f1).collect();
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Collars {
    pub onset_s: f64,
    /// Offset tolerance is `max(onset_s, offset_frac * reference duration)`.
    pub offset_frac: f64,
}

impl Default for Collars {
    fn default() -> Self {
        Self { onset_s: 0.2, offset_frac: 0.2 }
    }
}

impl Collars {
    pub fn matches(&self, reference: &Event, predicted: &Event) -> bool {
        reference.class == predicted.class
            && (predicted.onset_s - reference.onset_s).abs() <= self.onset_s
            && (predicted.offset_s - reference.offset_s).abs()
                <= self.onset_s.max(self.offset_frac * reference.duration())
    }
}

/// Event-based counts for one clip: greedy one-to-one matching per class,
/// references and predictions both visited in onset order.
pub fn event_counts(pred: &EventList, reference: &EventList, collars: &Collars) -> F1Counts {
    let mut counts = F1Counts::default();
    let classes: BTreeSet<usize> = pred.classes().union(&reference.classes()).copied().collect();
    for class in classes {
        let mut refs: Vec<&Event> = reference.of_class(class).collect();
        let mut preds: Vec<&Event> = pred.of_class(class).collect();
        refs.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
        preds.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
        let mut used = vec![false; preds.len()];
        let mut tp = 0;
        for r in &refs {
            if let Some(j) = (0..preds.len()).find(|&j| !used[j] && collars.matches(r, preds[j])) {
                used[j] = true;
                tp += 1;
            }
        }
        *counts.slot(class) = ClassCounts { tp, fp: preds.len() - tp, fn_: refs.len() - tp };
    }
    counts
}

/// Event-based macro F1 for a single clip.
pub fn event_f1(pred: &EventList, reference: &EventList, collars: &Collars) -> (f64, F1Counts) {
    let counts = event_counts(pred, reference, collars);
    (counts.macro_f1(), counts)
}

/// Frame-level counts of `P > threshold` against binary targets.
pub fn frame_counts(p: &Matrix, targets: &Matrix, threshold: f64) -> Result<F1Counts> {
    if !p.same_shape(targets) {
        return Err(Error::Shape(format!("{:?} vs {:?}", p.shape(), targets.shape())));
    }
    let mut counts = F1Counts { per_class: vec![ClassCounts::default(); p.cols()] };
    for t in 0..p.rows() {
        for c in 0..p.cols() {
            let predicted = p.get(t, c) > threshold;
            let actual = targets.get(t, c) > 0.5;
            let slot = &mut counts.per_class[c];
            match (predicted, actual) {
                (true, true) => slot.tp += 1,
                (true, false) => slot.fp += 1,
                (false, true) => slot.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(counts)
}

pub fn frame_f1(p: &Matrix, targets: &Matrix, threshold: f64) -> Result<f64> {
    Ok(frame_counts(p, targets, threshold)?.macro_f1())
}

/// `tr(S_b) / tr(S_w)` for labeled embedding rows.
pub fn scatter_ratio(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::InvalidArgument("need one label per embedding, at least one row".into()));
    }
    let dim = embeddings[0].len();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut mean = vec![0.0; dim];
    let mut class_sum = vec![vec![0.0; dim]; n_classes];
    let mut class_n = vec![0usize; n_classes];
    for (x, &c) in embeddings.iter().zip(labels) {
        for j in 0..dim {
            mean[j] += x[j];
            class_sum[c][j] += x[j];
        }
        class_n[c] += 1;
    }
    mean.iter_mut().for_each(|m| *m /= embeddings.len() as f64);
    for (s, &n) in class_sum.iter_mut().zip(&class_n) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let within: f64 = embeddings
        .iter()
        .zip(labels)
        .map(|(x, &c)| x.iter().zip(&class_sum[c]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    let between: f64 = class_sum
        .iter()
        .zip(&class_n)
        .map(|(mu, &n)| n as f64 * mu.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    if within == 0.0 {
        return Err(Error::InvalidArgument("zero within-class scatter".into()));
    }
    Ok(between / within)
}

/// Validation scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub frame_f1: f64,
    pub event_f1: f64,
    pub frame_counts: F1Counts,
    pub event_counts: F1Counts,
}

impl fmt::Display for Scores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frame macro F1: {:.4}", self.frame_f1)?;
        writeln!(f, "event macro F1: {:.4}", self.event_f1)?;
        writeln!(f, "{:>6} {:>8} {:>8} {:>8} {:>8}", "class", "frameF1", "eventP", "eventR", "eventF1")?;
        let n = self.frame_counts.per_class.len().max(self.event_counts.per_class.len());
        for c in 0..n {
            let fc = self.frame_counts.per_class.get(c).copied().unwrap_or_default();
            let ec = self.event_counts.per_class.get(c).copied().unwrap_or_default();
            writeln!(
                f,
                "{c:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                fc.f1(),
                ec.precision(),
                ec.recall(),
                ec.f1()
            )?;
        }
        Ok(())
    }
}

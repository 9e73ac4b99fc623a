//! Training objectives and their gradients with respect to network outputs.
//!
//! Every loss is a mean: BCE over frame-class (strong) or clip-class (weak)
//! entries, squared error over all frame-class entries, and the prototype
//! loss over its active frame-class terms. Each function returns the value
//! together with one gradient matrix per input clip.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::prototypes::PrototypePool;

pub const PROB_CLAMP: f64 = 1e-7;

/// Supervision available for one clip.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// `T' x M` frame targets in {0, 1}.
    Strong(Matrix),
    /// Clip-level presence per class in {0, 1}.
    Weak(Vec<f64>),
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Ramp-up length in steps; 0 lets the trainer derive it from the
    /// ramp-up epochs.
    pub r_max_steps: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub tau_plus: f64,
    pub tau_minus: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { r_max_steps: 0, alpha: 0.1, gamma: 0.1, tau_plus: 0.9, tau_minus: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(0.0 <= self.tau_minus && self.tau_minus < self.tau_plus && self.tau_plus <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= tau_minus < tau_plus <= 1, got {} and {}",
                self.tau_minus, self.tau_plus
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLossReport {
    pub l_sup: f64,
    pub l_mt: f64,
    pub l_clc: f64,
    pub l_pgc: f64,
    pub total: f64,
    pub ramp: f64,
    pub anchors_selected: usize,
}

/// Sigmoid ramp-up `exp(-5 (1 - min(step / r_max, 1))^2)`.
pub fn ramp(step: usize, r_max_steps: usize) -> f64 {
    if r_max_steps == 0 {
        return 1.0;
    }
    let x = (step as f64 / r_max_steps as f64).min(1.0);
    (-5.0 * (1.0 - x) * (1.0 - x)).exp()
}

/// `L_Sup + r (L_MT + L_CLC)`, plus `alpha L_PGC` in phase two.
pub fn compose(report: &BatchLossReport, alpha: f64, phase: Phase) -> f64 {
    let l1 = report.l_sup + report.ramp * (report.l_mt + report.l_clc);
    match phase {
        Phase::L1 => l1,
        Phase::L2 => l1 + alpha * report.l_pgc,
    }
}

/// Loss value with `d loss / d input` for each clip of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub value: f64,
    pub grad: Vec<Matrix>,
}

fn check_binary(values: &[f64], what: &str) -> Result<()> {
    match values.iter().find(|&&y| y != 0.0 && y != 1.0) {
        Some(y) => Err(Error::InvalidArgument(format!("{what} target {y} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Clamped binary cross-entropy and its derivative in `p` (zero where the
/// clamp is active).
pub fn bce(p: f64, y: f64) -> (f64, f64) {
    let q = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let value = -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
    let d = if q == p { (q - y) / (q * (1.0 - q)) } else { 0.0 };
    (value, d)
}

/// Frame BCE on strong clips plus clip BCE on weak clips, where the clip
/// probability is the temporal max (first frame on ties).
pub fn l_sup(p: &[Matrix], targets: &[&Target]) -> Result<Term> {
    if p.len() != targets.len() {
        return shape_err(format!("{} predictions for {} targets", p.len(), targets.len()));
    }
    let mut grad: Vec<Matrix> = p.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let n_strong = targets.iter().filter(|t| matches!(t, Target::Strong(_))).count();
    let n_weak = targets.iter().filter(|t| matches!(t, Target::Weak(_))).count();
    let (mut strong_sum, mut weak_sum) = (0.0, 0.0);
    let mut strong_n = 0usize;
    let mut weak_n = 0usize;
    for (b, (pb, tb)) in p.iter().zip(targets).enumerate() {
        match tb {
            Target::Strong(y) => {
                if !pb.same_shape(y) {
                    return shape_err(format!("clip {b}: P {:?} vs targets {:?}", pb.shape(), y.shape()));
                }
                check_binary(y.as_slice(), "strong")?;
                strong_n = pb.as_slice().len();
                for (i, (&pv, &yv)) in pb.as_slice().iter().zip(y.as_slice()).enumerate() {
                    let (l, d) = bce(pv, yv);
                    strong_sum += l;
                    grad[b].as_mut_slice()[i] = d;
                }
            }
            Target::Weak(y) => {
                if y.len() != pb.cols() {
                    return shape_err(format!("clip {b}: {} weak targets for {} classes", y.len(), pb.cols()));
                }
                check_binary(y, "weak")?;
                weak_n = pb.cols();
                for (c, &yv) in y.iter().enumerate() {
                    let mut arg = 0;
                    for t in 1..pb.rows() {
                        if pb.get(t, c) > pb.get(arg, c) {
                            arg = t;
                        }
                    }
                    let (l, d) = bce(pb.get(arg, c), yv);
                    weak_sum += l;
                    grad[b].set(arg, c, d);
                }
            }
            Target::Unlabeled => {}
        }
    }
    let strong_den = (n_strong * strong_n) as f64;
    let weak_den = (n_weak * weak_n) as f64;
    let mut value = 0.0;
    if n_strong > 0 {
        value += strong_sum / strong_den;
    }
    if n_weak > 0 {
        value += weak_sum / weak_den;
    }
    for (g, t) in grad.iter_mut().zip(targets) {
        let den = match t {
            Target::Strong(_) => strong_den,
            Target::Weak(_) => weak_den,
            Target::Unlabeled => continue,
        };
        g.as_mut_slice().iter_mut().for_each(|v| *v /= den);
    }
    Ok(Term { value, grad })
}

fn mean_squared(student: &[Matrix], target: &[Matrix], what: &str) -> Result<Term> {
    if student.len() != target.len() {
        return shape_err(format!("{what}: {} student vs {} target clips", student.len(), target.len()));
    }
    for (s, t) in student.iter().zip(target) {
        if !s.same_shape(t) {
            return shape_err(format!("{what}: {:?} vs {:?}", s.shape(), t.shape()));
        }
    }
    let n: usize = student.iter().map(|s| s.as_slice().len()).sum();
    if n == 0 {
        return Ok(Term { value: 0.0, grad: student.to_vec() });
    }
    let mut sum = 0.0;
    let grad = student
        .iter()
        .zip(target)
        .map(|(s, t)| {
            let mut g = Matrix::zeros(s.rows(), s.cols());
            for ((gv, &a), &b) in g.as_mut_slice().iter_mut().zip(s.as_slice()).zip(t.as_slice()) {
                sum += (a - b) * (a - b);
                *gv = 2.0 * (a - b) / n as f64;
            }
            g
        })
        .collect();
    Ok(Term { value: sum / n as f64, grad })
}

/// Mean squared difference between student and (detached) teacher
/// predictions on the original clips.
pub fn l_mt(student: &[Matrix], teacher: &[Matrix]) -> Result<Term> {
    mean_squared(student, teacher, "mean teacher")
}

/// Mean squared difference between the student on the mixed input and the
/// mixed teacher predictions.
pub fn l_clc(student_on_mixed: &[Matrix], mixed_teacher: &[Matrix]) -> Result<Term> {
    mean_squared(student_on_mixed, mixed_teacher, "cutmix consistency")
}

/// One active term of the prototype loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActivePair {
    pub clip: usize,
    pub frame: usize,
    pub class: usize,
}

/// Pairs whose teacher probability exceeds `tau_plus`, without any
/// anchor selection.
pub fn confident_pairs(teacher: &[Matrix], tau_plus: f64) -> Vec<ActivePair> {
    let mut out = Vec::new();
    for (clip, p) in teacher.iter().enumerate() {
        for frame in 0..p.rows() {
            for class in 0..p.cols() {
                if p.get(frame, class) > tau_plus {
                    out.push(ActivePair { clip, frame, class });
                }
            }
        }
    }
    out
}

/// InfoNCE-style prototype loss: for each active `(k, i)`,
/// `-log softmax(s_k / gamma)_i` with `s_{k,m} = max_j <v_k, c_mj>`, averaged
/// over active terms. Prototypes are constants; the gradient is only with
/// respect to `v`.
pub fn l_pgc(v: &[Matrix], pairs: &[ActivePair], pool: &PrototypePool, gamma: f64) -> Result<Term> {
    let mut grad: Vec<Matrix> = v.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    if pairs.is_empty() {
        return Ok(Term { value: 0.0, grad });
    }
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let n = pairs.len() as f64;
    let mut sum = 0.0;
    for pair in pairs {
        let vb = v
            .get(pair.clip)
            .ok_or_else(|| Error::Shape(format!("anchor clip {} out of range", pair.clip)))?;
        if pair.frame >= vb.rows() || pair.class >= pool.n_classes() {
            return shape_err(format!("anchor {pair:?} outside {:?} x {} classes", vb.shape(), pool.n_classes()));
        }
        let (s, arg) = pool.similarity_argmax(vb.row(pair.frame))?;
        let logits: Vec<f64> = s.iter().map(|x| x / gamma).collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        let log_z = top + z.ln();
        sum += log_z - logits[pair.class];
        let g = grad[pair.clip].row_mut(pair.frame);
        for m in 0..s.len() {
            let soft = (logits[m] - log_z).exp();
            let coef = (soft - (m == pair.class) as u8 as f64) / (gamma * n);
            for (gd, c) in g.iter_mut().zip(pool.prototype(m, arg[m])) {
                *gd += coef * c;
            }
        }
    }
    Ok(Term { value: sum / n, grad })
}

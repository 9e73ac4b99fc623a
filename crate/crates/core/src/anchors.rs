//! Selective anchor sampling: which student frames enter the prototype loss.

use crate::cutmix::TimeMask;
use crate::dataset::LabelStatus;
use crate::error::{shape_err, Error, Result};
use crate::losses::ActivePair;
use crate::matrix::Matrix;

/// Status of the clip that supplies each output frame of a mixed input.
pub fn frame_provenance(mask: &TimeMask, own: LabelStatus, partner: LabelStatus) -> Vec<LabelStatus> {
    mask.pooled().iter().map(|&keep| if keep { own } else { partner }).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnchorSet {
    pub pairs: Vec<ActivePair>,
    /// Distinct `(clip, frame)` with at least one active class.
    pub frames_selected: usize,
    /// Frames sourced from weak or unlabeled clips.
    pub frames_eligible: usize,
    pub per_class: Vec<usize>,
}

impl AnchorSet {
    /// Selected frames over eligible frames; 0 when nothing is eligible.
    pub fn fraction(&self) -> f64 {
        if self.frames_eligible == 0 {
            0.0
        } else {
            self.frames_selected as f64 / self.frames_eligible as f64
        }
    }
}

/// `(k, i)` is active when frame `k` comes from a weak or unlabeled clip,
/// the mixed teacher probability exceeds `tau_plus` and the student
/// probability on the mixed input is below `tau_minus`. With `selective`
/// off the student condition is dropped.
pub fn select(
    teacher_mixed: &[Matrix],
    student_mixed: &[Matrix],
    provenance: &[Vec<LabelStatus>],
    tau_plus: f64,
    tau_minus: f64,
    selective: bool,
) -> Result<AnchorSet> {
    if tau_minus >= tau_plus {
        return Err(Error::Config(format!("tau_minus {tau_minus} must be below tau_plus {tau_plus}")));
    }
    if teacher_mixed.len() != student_mixed.len() || teacher_mixed.len() != provenance.len() {
        return shape_err("teacher, student and provenance batch sizes differ");
    }
    let n_classes = teacher_mixed.first().map_or(0, Matrix::cols);
    let mut set = AnchorSet { per_class: vec![0; n_classes], ..Default::default() };
    for (clip, ((pt, ps), prov)) in teacher_mixed.iter().zip(student_mixed).zip(provenance).enumerate() {
        if !pt.same_shape(ps) || prov.len() != pt.rows() || pt.cols() != n_classes {
            return shape_err(format!("clip {clip}: mismatched teacher, student or provenance shapes"));
        }
        for (frame, status) in prov.iter().enumerate() {
            if *status == LabelStatus::Strong {
                continue;
            }
            set.frames_eligible += 1;
            let mut any = false;
            for class in 0..n_classes {
                let confident = pt.get(frame, class) > tau_plus;
                let unsure = !selective || ps.get(frame, class) < tau_minus;
                if confident && unsure {
                    set.pairs.push(ActivePair { clip, frame, class });
                    set.per_class[class] += 1;
                    any = true;
                }
            }
            set.frames_selected += any as usize;
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one(p: f64) -> Vec<Matrix> {
        vec![Matrix::filled(1, 1, p)]
    }

    #[test]
    fn threshold_examples() {
        let weak = vec![vec![LabelStatus::Weak]];
        let s = select(&one(0.95), &one(0.3), &weak, 0.9, 0.5, true).unwrap();
        assert_eq!(s.pairs, vec![ActivePair { clip: 0, frame: 0, class: 0 }]);
        assert_eq!(s.fraction(), 1.0);

        let s = select(&one(0.95), &one(0.8), &weak, 0.9, 0.5, true).unwrap();
        assert!(s.pairs.is_empty());
        let s = select(&one(0.95), &one(0.8), &weak, 0.9, 0.5, false).unwrap();
        assert_eq!(s.pairs.len(), 1);

        let strong = vec![vec![LabelStatus::Strong]];
        let s = select(&one(0.99), &one(0.01), &strong, 0.9, 0.5, true).unwrap();
        assert!(s.pairs.is_empty());
        assert_eq!(s.frames_eligible, 0);
        assert_eq!(s.fraction(), 0.0);

        assert!(select(&one(0.95), &one(0.3), &weak, 0.5, 0.5, true).is_err());
    }

    #[test]
    fn provenance_follows_pooled_mask() {
        let mask = TimeMask::from_run(8, 4, 2, 4).unwrap();
        assert_eq!(
            frame_provenance(&mask, LabelStatus::Strong, LabelStatus::Unlabeled),
            vec![LabelStatus::Unlabeled, LabelStatus::Strong, LabelStatus::Strong, LabelStatus::Unlabeled]
        );
    }

    fn random_case(seed: u64) -> (Vec<Matrix>, Vec<Matrix>, Vec<Vec<LabelStatus>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let statuses = [LabelStatus::Strong, LabelStatus::Weak, LabelStatus::Unlabeled];
        let m = |rng: &mut ChaCha8Rng| Matrix::from_vec(6, 3, (0..18).map(|_| rng.random()).collect()).unwrap();
        let t: Vec<Matrix> = (0..4).map(|_| m(&mut rng)).collect();
        let s: Vec<Matrix> = (0..4).map(|_| m(&mut rng)).collect();
        let prov = (0..4).map(|_| (0..6).map(|_| statuses[rng.random_range(0..3)]).collect()).collect();
        (t, s, prov)
    }

    proptest! {
        #[test]
        fn every_pair_satisfies_the_rule(seed in 0u64..300) {
            let (t, s, prov) = random_case(seed);
            let set = select(&t, &s, &prov, 0.7, 0.4, true).unwrap();
            for p in &set.pairs {
                prop_assert!(prov[p.clip][p.frame] != LabelStatus::Strong);
                prop_assert!(t[p.clip].get(p.frame, p.class) > 0.7);
                prop_assert!(s[p.clip].get(p.frame, p.class) < 0.4);
            }
            prop_assert!(set.fraction() <= 1.0);
        }

        #[test]
        fn monotone_in_thresholds(seed in 0u64..300, lo in 0.0f64..0.4, hi in 0.5f64..0.95, d in 0.0f64..0.04) {
            let (t, s, prov) = random_case(seed);
            let base = select(&t, &s, &prov, hi, lo, true).unwrap();
            let looser = select(&t, &s, &prov, hi, lo + d, true).unwrap();
            let stricter = select(&t, &s, &prov, hi + d, lo, true).unwrap();
            prop_assert!(base.pairs.iter().all(|p| looser.pairs.contains(p)));
            prop_assert!(stricter.pairs.iter().all(|p| base.pairs.contains(p)));
        }
    }
}

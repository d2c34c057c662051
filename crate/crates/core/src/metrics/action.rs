//! Action-level classification metrics over the two-class action space.
//!
//! Both classes always take part in the averages. A class with no gold and
//! no predicted instances has F1 0, so a perfect single-class run has macro
//! F1 0.5. Weighted F1 weights each class by its gold support.

use serde::{Deserialize, Serialize};

use crate::conversation::Action;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionScores {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
}

/// `counts[gold][predicted]`, indexed by [`Action::index`].
pub fn confusion(predicted: &[Action], gold: &[Action]) -> [[usize; 2]; 2] {
    let mut m = [[0usize; 2]; 2];
    for (p, g) in predicted.iter().zip(gold) {
        m[g.index()][p.index()] += 1;
    }
    m
}

pub fn class_f1(m: &[[usize; 2]; 2], class: Action) -> f64 {
    let c = class.index();
    let o = class.complement().index();
    let tp = m[c][c] as f64;
    let fp = m[o][c] as f64;
    let fn_ = m[c][o] as f64;
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * tp / denom
    }
}

pub fn action_metrics(predicted: &[Action], gold: &[Action]) -> Result<ActionScores> {
    if predicted.len() != gold.len() {
        return Err(Error::Precondition(format!(
            "{} predictions for {} gold labels",
            predicted.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Precondition("no labels to score".into()));
    }
    let m = confusion(predicted, gold);
    let n = gold.len() as f64;
    let correct = (m[0][0] + m[1][1]) as f64;
    let f1 = Action::ALL.map(|a| class_f1(&m, a));
    let support = Action::ALL.map(|a| (m[a.index()][0] + m[a.index()][1]) as f64);
    Ok(ActionScores {
        accuracy: correct / n,
        weighted_f1: (f1[0] * support[0] + f1[1] * support[1]) / n,
        macro_f1: (f1[0] + f1[1]) / 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Action::{Answer as A, Clarify as C};

    #[test]
    fn all_correct() {
        let s = action_metrics(&[C, A, A], &[C, A, A]).unwrap();
        assert_eq!((s.accuracy, s.weighted_f1, s.macro_f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_computed_mixed_case() {
        let s = action_metrics(&[C, A, A, A], &[C, C, A, A]).unwrap();
        assert_eq!(s.accuracy, 0.75);
        let m = confusion(&[C, A, A, A], &[C, C, A, A]);
        assert_eq!(class_f1(&m, C), 2.0 / 3.0);
        assert_eq!(class_f1(&m, A), 4.0 / 5.0);
        assert!((s.macro_f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_perfect_prediction_halves_macro() {
        let s = action_metrics(&[A, A], &[A, A]).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.macro_f1, 0.5);
        assert_eq!(s.weighted_f1, 1.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(action_metrics(&[A], &[A, C]), Err(Error::Precondition(_))));
    }
}

//! Iterative weighted majority voting.
//!
//! Starting from uniform weights, each round
//!
//! 1. predicts every item by weighted vote,
//! 2. estimates each annotator's accuracy as its agreement rate with those
//!    predictions over the items it labeled,
//! 3. sets each weight to `L * accuracy - 1`,
//!
//! until the predictions stop changing and the weights move by no more than
//! the configured tolerance. Chance-level annotators (accuracy `1/L`) end up
//! with weight zero; annotators worse than chance get negative weight.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::label::{AnnotationMatrix, ExtendedLabel};

/// How to resolve an argmax tie between labels with equal vote scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    /// Smallest encoded label index wins.
    #[default]
    LowestIndex,
    /// Largest encoded label index wins.
    HighestIndex,
}

impl FromStr for TieBreak {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lowest-index" => Ok(TieBreak::LowestIndex),
            "highest-index" => Ok(TieBreak::HighestIndex),
            other => Err(Error::input(format!("unknown tie-break rule `{other}`"))),
        }
    }
}

impl fmt::Display for TieBreak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TieBreak::LowestIndex => "lowest-index",
            TieBreak::HighestIndex => "highest-index",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleConfig {
    pub max_iterations: usize,
    /// Largest per-annotator weight change still treated as stable.
    pub weight_tolerance: f64,
    pub tie_break: TieBreak,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            max_iterations: 100,
            weight_tolerance: 1e-6,
            tie_break: TieBreak::LowestIndex,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::input("max_iterations must be at least 1"));
        }
        if self.weight_tolerance.is_nan() || self.weight_tolerance < 0.0 {
            return Err(Error::input(format!(
                "weight_tolerance must be non-negative, got {}",
                self.weight_tolerance
            )));
        }
        Ok(())
    }
}

/// Result of [`run_ensemble`].
///
/// `predictions` are those of the last round; `accuracies` are the agreement
/// rates with them and `weights` follow from `accuracies`. After convergence
/// the weights differ from the ones that produced `predictions` by at most the
/// tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    /// One weight per annotator, in `[-1, L-1]`.
    pub weights: Vec<f64>,
    /// One estimated accuracy per annotator, in `[0, 1]`.
    pub accuracies: Vec<f64>,
    /// One prediction per item; missing only for items nobody labeled.
    pub predictions: Vec<ExtendedLabel>,
    pub iterations_run: usize,
    pub converged: bool,
}

/// Snapshot handed to the observer of [`run_ensemble_observed`] after each round.
#[derive(Debug, Clone, Copy)]
pub struct Round<'a> {
    /// 1-based round number.
    pub iteration: usize,
    /// Predictions made with the weights from the previous round.
    pub predictions: &'a [ExtendedLabel],
    pub accuracies: &'a [f64],
    /// Weights computed from `accuracies`.
    pub weights: &'a [f64],
}

/// Weighted vote for item `item`: argmax over `1..=L` of the summed weights of
/// the annotators that chose each label. Returns missing when nobody labeled
/// the item.
pub fn weighted_vote(
    matrix: &AnnotationMatrix,
    item: usize,
    weights: &[f64],
    tie_break: TieBreak,
) -> Result<ExtendedLabel> {
    check_weights(matrix, weights)?;
    if item >= matrix.n_items() {
        return Err(Error::input(format!(
            "item index {item} out of range for {} items",
            matrix.n_items()
        )));
    }
    let mut scores = vec![0.0; matrix.num_labels() + 1];
    Ok(vote_item(matrix, item, weights, tie_break, &mut scores))
}

fn check_weights(matrix: &AnnotationMatrix, weights: &[f64]) -> Result<()> {
    if weights.len() != matrix.n_annotators() {
        return Err(Error::input(format!(
            "expected {} weights, got {}",
            matrix.n_annotators(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::input(format!("non-finite weight {w}")));
    }
    Ok(())
}

fn vote_item(
    matrix: &AnnotationMatrix,
    item: usize,
    weights: &[f64],
    tie_break: TieBreak,
    scores: &mut [f64],
) -> ExtendedLabel {
    let votes = matrix.item_votes(item);
    if votes.is_empty() {
        return ExtendedLabel::MISSING;
    }
    scores.iter_mut().for_each(|s| *s = 0.0);
    for &(annotator, label) in votes {
        scores[label.index()] += weights[annotator];
    }
    let mut best = 1;
    for k in 2..scores.len() {
        let better = match tie_break {
            TieBreak::LowestIndex => scores[k] > scores[best],
            TieBreak::HighestIndex => scores[k] >= scores[best],
        };
        if better {
            best = k;
        }
    }
    ExtendedLabel(best as u32)
}

fn vote_all(matrix: &AnnotationMatrix, weights: &[f64], tie_break: TieBreak) -> Vec<ExtendedLabel> {
    let mut scores = vec![0.0; matrix.num_labels() + 1];
    (0..matrix.n_items())
        .map(|j| vote_item(matrix, j, weights, tie_break, &mut scores))
        .collect()
}

/// Agreement rate of each annotator with `predictions`, over the items it
/// labeled that have a non-missing prediction. Annotators with no such items
/// get the chance level `1/L`.
pub fn estimate_accuracies(
    matrix: &AnnotationMatrix,
    predictions: &[ExtendedLabel],
) -> Result<Vec<f64>> {
    if predictions.len() != matrix.n_items() {
        return Err(Error::input(format!(
            "expected {} predictions, got {}",
            matrix.n_items(),
            predictions.len()
        )));
    }
    let chance = 1.0 / matrix.num_labels() as f64;
    Ok((0..matrix.n_annotators())
        .map(|i| {
            let (mut agree, mut seen) = (0usize, 0usize);
            for &(j, label) in matrix.annotator_labels(i) {
                let predicted = predictions[j];
                if predicted.is_missing() {
                    continue;
                }
                seen += 1;
                if predicted == label {
                    agree += 1;
                }
            }
            if seen == 0 {
                chance
            } else {
                agree as f64 / seen as f64
            }
        })
        .collect())
}

/// `v_i = L * accuracy_i - 1`.
pub fn update_weights(accuracies: &[f64], num_labels: usize) -> Result<Vec<f64>> {
    if num_labels < 2 {
        return Err(Error::input(format!(
            "need at least 2 labels, got {num_labels}"
        )));
    }
    let l = num_labels as f64;
    accuracies
        .iter()
        .map(|&a| {
            if (0.0..=1.0).contains(&a) {
                Ok(l * a - 1.0)
            } else {
                Err(Error::input(format!("accuracy {a} outside [0, 1]")))
            }
        })
        .collect()
}

/// Weights computed from known true accuracies: the idealized target the
/// iterative estimate approaches.
pub fn oracle_weights(true_accuracies: &[f64], num_labels: usize) -> Result<Vec<f64>> {
    update_weights(true_accuracies, num_labels)
}

/// Unweighted plurality vote over every item.
pub fn majority_vote(matrix: &AnnotationMatrix, tie_break: TieBreak) -> Vec<ExtendedLabel> {
    vote_all(matrix, &vec![1.0; matrix.n_annotators()], tie_break)
}

pub fn run_ensemble(matrix: &AnnotationMatrix, config: &EnsembleConfig) -> Result<EnsembleState> {
    run_ensemble_observed(matrix, config, |_| {})
}

/// [`run_ensemble`], calling `observe` after every round.
pub fn run_ensemble_observed<F>(
    matrix: &AnnotationMatrix,
    config: &EnsembleConfig,
    mut observe: F,
) -> Result<EnsembleState>
where
    F: FnMut(Round<'_>),
{
    config.validate()?;
    if matrix.stored_entries() == 0 {
        return Err(Error::input("annotation matrix has no observed entries"));
    }
    let num_labels = matrix.num_labels();
    let mut weights = vec![1.0; matrix.n_annotators()];
    let mut accuracies = vec![1.0 / num_labels as f64; matrix.n_annotators()];
    let mut previous: Option<Vec<ExtendedLabel>> = None;
    let mut predictions = Vec::new();
    let mut iterations_run = 0;
    let mut converged = false;

    while iterations_run < config.max_iterations {
        iterations_run += 1;
        predictions = vote_all(matrix, &weights, config.tie_break);
        accuracies = estimate_accuracies(matrix, &predictions)?;
        let next = update_weights(&accuracies, num_labels)?;
        let max_delta = weights
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        observe(Round {
            iteration: iterations_run,
            predictions: &predictions,
            accuracies: &accuracies,
            weights: &next,
        });
        let stable = previous.as_ref() == Some(&predictions);
        weights = next;
        if stable && max_delta <= config.weight_tolerance {
            converged = true;
            break;
        }
        previous = Some(predictions.clone());
    }

    Ok(EnsembleState {
        weights,
        accuracies,
        predictions,
        iterations_run,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::AttributeSchema;

    fn binary() -> AttributeSchema {
        AttributeSchema::new("x", ["a", "b"]).unwrap()
    }

    fn labels(v: &[u32]) -> Vec<ExtendedLabel> {
        v.iter().copied().map(ExtendedLabel).collect()
    }

    #[test]
    fn unanimous_vote() {
        let m =
            AnnotationMatrix::from_dense(binary(), &[vec![2], vec![2], vec![0], vec![2]]).unwrap();
        let out = weighted_vote(&m, 0, &[1.0; 4], TieBreak::LowestIndex).unwrap();
        assert_eq!(out, ExtendedLabel(2));
    }

    #[test]
    fn heavy_annotator_outvotes_two_light_ones() {
        let m = AnnotationMatrix::from_dense(binary(), &[vec![1], vec![1], vec![2]]).unwrap();
        let out = weighted_vote(&m, 0, &[1.0, 1.0, 3.0], TieBreak::LowestIndex).unwrap();
        assert_eq!(out, ExtendedLabel(2));
    }

    #[test]
    fn ties_follow_the_rule() {
        let m = AnnotationMatrix::from_dense(binary(), &[vec![1], vec![2]]).unwrap();
        let w = [1.0, 1.0];
        assert_eq!(
            weighted_vote(&m, 0, &w, TieBreak::LowestIndex).unwrap(),
            ExtendedLabel(1)
        );
        assert_eq!(
            weighted_vote(&m, 0, &w, TieBreak::HighestIndex).unwrap(),
            ExtendedLabel(2)
        );
        // No tie: both rules agree.
        let w = [1.0, 1.5];
        assert_eq!(
            weighted_vote(&m, 0, &w, TieBreak::LowestIndex).unwrap(),
            ExtendedLabel(2)
        );
        assert_eq!(
            weighted_vote(&m, 0, &w, TieBreak::HighestIndex).unwrap(),
            ExtendedLabel(2)
        );
    }

    #[test]
    fn unlabeled_item_abstains() {
        let m = AnnotationMatrix::from_dense(binary(), &[vec![1, 0], vec![2, 0]]).unwrap();
        assert_eq!(
            weighted_vote(&m, 1, &[1.0, 1.0], TieBreak::LowestIndex).unwrap(),
            ExtendedLabel::MISSING
        );
    }

    #[test]
    fn negative_weights_push_toward_unvoted_labels() {
        let s = AttributeSchema::new("x", ["a", "b", "c"]).unwrap();
        let m = AnnotationMatrix::from_dense(s, &[vec![1], vec![2]]).unwrap();
        let out = weighted_vote(&m, 0, &[-1.0, -0.5], TieBreak::LowestIndex).unwrap();
        assert_eq!(out, ExtendedLabel(3));
    }

    #[test]
    fn vote_rejects_bad_weights() {
        let m = AnnotationMatrix::from_dense(binary(), &[vec![1], vec![2]]).unwrap();
        assert!(weighted_vote(&m, 0, &[1.0], TieBreak::LowestIndex).is_err());
        assert!(weighted_vote(&m, 0, &[1.0, f64::NAN], TieBreak::LowestIndex).is_err());
        assert!(weighted_vote(&m, 3, &[1.0, 1.0], TieBreak::LowestIndex).is_err());
    }

    #[test]
    fn accuracy_ratios() {
        let m = AnnotationMatrix::from_dense(
            binary(),
            &[vec![1, 2, 1, 2, 1], vec![1, 1, 2, 1, 0], vec![0; 5]],
        )
        .unwrap();
        let truth = labels(&[1, 2, 1, 2, 1]);
        let acc = estimate_accuracies(&m, &truth).unwrap();
        assert_eq!(acc, vec![1.0, 0.25, 0.5]);
    }

    #[test]
    fn empty_annotator_is_at_chance() {
        let s = AttributeSchema::new("x", ["a", "b", "c", "d"]).unwrap();
        let m = AnnotationMatrix::from_dense(s, &[vec![1, 2], vec![0, 0]]).unwrap();
        let acc = estimate_accuracies(&m, &labels(&[1, 2])).unwrap();
        assert_eq!(acc[1], 0.25);
        assert_eq!(update_weights(&acc, 4).unwrap()[1], 0.0);
    }

    #[test]
    fn abstained_items_are_excluded() {
        let m = AnnotationMatrix::from_dense(binary(), &[vec![1, 2]]).unwrap();
        let acc = estimate_accuracies(&m, &labels(&[1, 0])).unwrap();
        assert_eq!(acc, vec![1.0]);
        assert!(estimate_accuracies(&m, &labels(&[1])).is_err());
    }

    #[test]
    fn weight_formula() {
        assert_eq!(update_weights(&[1.0], 3).unwrap(), vec![2.0]);
        assert_eq!(update_weights(&[1.0 / 3.0], 3).unwrap(), vec![0.0]);
        assert_eq!(update_weights(&[0.0], 2).unwrap(), vec![-1.0]);
        assert!(update_weights(&[1.1], 2).is_err());
        assert!(update_weights(&[-0.1], 2).is_err());
        assert!(update_weights(&[f64::NAN], 2).is_err());
        assert!(update_weights(&[0.5], 1).is_err());
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle_weights(&[1.0, 0.5], 2).unwrap(), vec![1.0, 0.0]);
        let w = oracle_weights(&[0.25; 3], 4).unwrap();
        assert_eq!(w, vec![0.0; 3]);
        let m = AnnotationMatrix::from_dense(
            AttributeSchema::new("x", ["a", "b", "c", "d"]).unwrap(),
            &[vec![4, 2], vec![3, 3], vec![2, 4]],
        )
        .unwrap();
        // All-zero weights tie every label; the rule decides.
        assert_eq!(
            weighted_vote(&m, 0, &w, TieBreak::LowestIndex).unwrap(),
            ExtendedLabel(1)
        );
        assert_eq!(
            weighted_vote(&m, 1, &w, TieBreak::HighestIndex).unwrap(),
            ExtendedLabel(4)
        );
    }

    #[test]
    fn single_annotator_fixed_point() {
        let s = AttributeSchema::new("x", ["a", "b", "c"]).unwrap();
        let m = AnnotationMatrix::from_dense(s, &[vec![3, 1, 2, 2, 0]]).unwrap();
        let state = run_ensemble(&m, &EnsembleConfig::default()).unwrap();
        assert_eq!(state.predictions, labels(&[3, 1, 2, 2, 0]));
        assert_eq!(state.accuracies, vec![1.0]);
        assert_eq!(state.weights, vec![2.0]);
        assert!(state.converged);
        assert!(state.iterations_run <= 2);
    }

    #[test]
    fn three_by_four_hand_iteration() {
        // Round 1 (uniform): [1,1,2,1]; accuracies 1, 3/4, 3/4; weights 1, 1/2, 1/2.
        // Round 2: item 4 scores 1.5 vs 0.5, predictions and weights unchanged: converged.
        let m = AnnotationMatrix::from_dense(
            binary(),
            &[vec![1, 1, 2, 1], vec![1, 1, 2, 2], vec![2, 1, 2, 1]],
        )
        .unwrap();
        let state = run_ensemble(&m, &EnsembleConfig::default()).unwrap();
        assert_eq!(state.predictions, labels(&[1, 1, 2, 1]));
        assert_eq!(state.accuracies, vec![1.0, 0.75, 0.75]);
        assert_eq!(state.weights, vec![1.0, 0.5, 0.5]);
        assert!(state.converged);
        assert_eq!(state.iterations_run, 2);
    }

    #[test]
    fn abstaining_item_never_counts() {
        let m = AnnotationMatrix::from_dense(binary(), &[vec![1, 0, 2], vec![1, 0, 1]]).unwrap();
        let state = run_ensemble(&m, &EnsembleConfig::default()).unwrap();
        assert_eq!(state.predictions[1], ExtendedLabel::MISSING);
        assert!(state
            .predictions
            .iter()
            .enumerate()
            .all(|(j, p)| (j == 1) == p.is_missing()));
    }

    #[test]
    fn first_round_is_majority_vote() {
        let m = AnnotationMatrix::from_dense(
            binary(),
            &[vec![1, 2, 2, 0], vec![2, 2, 1, 1], vec![2, 1, 0, 2]],
        )
        .unwrap();
        let mut first = None;
        run_ensemble_observed(&m, &EnsembleConfig::default(), |r| {
            if r.iteration == 1 {
                first = Some(r.predictions.to_vec());
            }
        })
        .unwrap();
        assert_eq!(first.unwrap(), majority_vote(&m, TieBreak::LowestIndex));
    }

    #[test]
    fn rejects_empty_matrix_and_bad_config() {
        let m = AnnotationMatrix::from_dense(binary(), &[vec![0, 0]]).unwrap();
        assert!(run_ensemble(&m, &EnsembleConfig::default()).is_err());
        let m = AnnotationMatrix::from_dense(binary(), &[vec![1, 0]]).unwrap();
        let bad = EnsembleConfig {
            max_iterations: 0,
            ..Default::default()
        };
        assert!(run_ensemble(&m, &bad).is_err());
        let bad = EnsembleConfig {
            weight_tolerance: -1.0,
            ..Default::default()
        };
        assert!(run_ensemble(&m, &bad).is_err());
    }

    #[test]
    fn tie_break_parses() {
        assert_eq!(
            "lowest-index".parse::<TieBreak>().unwrap(),
            TieBreak::LowestIndex
        );
        assert_eq!(TieBreak::HighestIndex.to_string(), "highest-index");
        assert!("random".parse::<TieBreak>().is_err());
    }
}

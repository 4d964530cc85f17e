//! Synthetic ground truth and noisy workers with known accuracies.
//!
//! Random streams: every draw comes from `ChaCha8Rng::seed_from_u64(seed)`.
//! Stream 0 produces the ground truth; worker `i` (0-based) uses stream
//! `i + 1`, so adding or removing a worker never perturbs the others.
//!
//! - Ground truth: for each item, `random_range(1..=L)`.
//! - Worker `i`, item `j`, in item order: draw `u = random::<f64>()`; the cell
//!   is missing when `u < missing_rate`. Otherwise draw `c = random::<f64>()`;
//!   the worker answers the truth when `c < accuracy`, else draws
//!   `r = random_range(0..L-1)` and answers the `r`-th wrong label in
//!   increasing index order. Missing cells consume only the first draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{AnnotationMatrix, AttributeSchema, ExtendedLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerProfile {
    pub worker_id: String,
    pub accuracy: f64,
    #[serde(default)]
    pub missing_rate: f64,
}

impl WorkerProfile {
    pub fn new(worker_id: impl Into<String>, accuracy: f64, missing_rate: f64) -> Self {
        WorkerProfile {
            worker_id: worker_id.into(),
            accuracy,
            missing_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.worker_id.trim().is_empty() {
            return Err(Error::input("worker_id is empty"));
        }
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::input(format!(
                "worker `{}`: accuracy {} outside [0, 1]",
                self.worker_id, self.accuracy
            )));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::input(format!(
                "worker `{}`: missing_rate {} outside [0, 1)",
                self.worker_id, self.missing_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub n_items: usize,
    pub schema: AttributeSchema,
    pub workers: Vec<WorkerProfile>,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn new(
        n_items: usize,
        schema: AttributeSchema,
        workers: Vec<WorkerProfile>,
        seed: u64,
    ) -> Result<Self> {
        let config = SimulationConfig {
            n_items,
            schema,
            workers,
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(Error::input("simulation needs at least one item"));
        }
        if self.workers.is_empty() {
            return Err(Error::input("simulation needs at least one worker"));
        }
        for (idx, w) in self.workers.iter().enumerate() {
            w.validate()?;
            if self.workers[..idx]
                .iter()
                .any(|o| o.worker_id == w.worker_id)
            {
                return Err(Error::input(format!(
                    "duplicate worker id `{}`",
                    w.worker_id
                )));
            }
        }
        Ok(())
    }

    /// Item ids `item-1`, `item-2`, ... zero padded to a common width.
    pub fn item_ids(&self) -> Vec<String> {
        let width = self.n_items.to_string().len();
        (1..=self.n_items)
            .map(|j| format!("item-{j:0width$}"))
            .collect()
    }

    fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }
}

/// Uniform ground truth over `1..=L`.
pub fn generate_ground_truth(config: &SimulationConfig) -> Vec<ExtendedLabel> {
    let l = config.schema.num_labels() as u32;
    let mut rng = config.stream(0);
    (0..config.n_items)
        .map(|_| ExtendedLabel(rng.random_range(1..=l)))
        .collect()
}

/// Draws every worker's labels for `truth` under symmetric noise and
/// independent missingness.
pub fn simulate_annotations(
    config: &SimulationConfig,
    truth: &[ExtendedLabel],
) -> Result<AnnotationMatrix> {
    config.validate()?;
    if truth.len() != config.n_items {
        return Err(Error::input(format!(
            "expected {} truth labels, got {}",
            config.n_items,
            truth.len()
        )));
    }
    let l = config.schema.num_labels() as u32;
    if let Some(bad) = truth.iter().find(|t| t.0 == 0 || t.0 > l) {
        return Err(Error::input(format!("truth label {bad} outside 1..={l}")));
    }

    let mut entries = Vec::new();
    for (i, worker) in config.workers.iter().enumerate() {
        let mut rng = config.stream(i as u64 + 1);
        for (j, &y) in truth.iter().enumerate() {
            if rng.random::<f64>() < worker.missing_rate {
                continue;
            }
            let label = if rng.random::<f64>() < worker.accuracy {
                y
            } else {
                let r = rng.random_range(0..l - 1) + 1;
                ExtendedLabel(if r >= y.0 { r + 1 } else { r })
            };
            entries.push((i, j, label));
        }
    }

    AnnotationMatrix::from_entries(
        config.schema.clone(),
        config.workers.iter().map(|w| w.worker_id.clone()).collect(),
        config.item_ids(),
        entries,
    )
}

/// Fraction of items predicted correctly; abstentions count as wrong.
pub fn score_accuracy(predictions: &[ExtendedLabel], truth: &[ExtendedLabel]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::input(format!(
            "{} predictions for {} truth labels",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::input("no truth labels to score against"));
    }
    if truth.iter().any(|t| t.is_missing()) {
        return Err(Error::input("truth contains a missing label"));
    }
    let correct = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Empirical accuracy of one worker's row against the truth, counting
/// missing cells as wrong.
pub fn worker_accuracy(
    matrix: &AnnotationMatrix,
    worker: usize,
    truth: &[ExtendedLabel],
) -> Result<f64> {
    let row: Vec<ExtendedLabel> = (0..matrix.n_items())
        .map(|j| matrix.get(worker, j))
        .collect();
    score_accuracy(&row, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(l: usize) -> AttributeSchema {
        AttributeSchema::new("x", (1..=l).map(|k| format!("c{k}"))).unwrap()
    }

    fn config(p: usize, l: usize, workers: Vec<WorkerProfile>, seed: u64) -> SimulationConfig {
        SimulationConfig::new(p, schema(l), workers, seed).unwrap()
    }

    #[test]
    fn truth_is_deterministic() {
        let c = config(4, 2, vec![WorkerProfile::new("w", 0.9, 0.0)], 7);
        let a = generate_ground_truth(&c);
        assert_eq!(a, generate_ground_truth(&c));
        assert!(a.iter().all(|t| (1..=2).contains(&t.0)));
    }

    #[test]
    fn single_item() {
        let c = config(1, 5, vec![WorkerProfile::new("w", 0.9, 0.0)], 1);
        let t = generate_ground_truth(&c);
        assert_eq!(t.len(), 1);
        assert!((1..=5).contains(&t[0].0));
    }

    #[test]
    fn class_frequencies_are_uniform() {
        for l in [2, 3, 5] {
            let c = config(100_000, l, vec![WorkerProfile::new("w", 1.0, 0.0)], 11);
            let t = generate_ground_truth(&c);
            for k in 1..=l as u32 {
                let f = t.iter().filter(|x| x.0 == k).count() as f64 / t.len() as f64;
                assert!((f - 1.0 / l as f64).abs() < 0.01, "L={l} k={k} f={f}");
            }
        }
    }

    #[test]
    fn perfect_worker_copies_truth() {
        let c = config(500, 3, vec![WorkerProfile::new("w", 1.0, 0.0)], 3);
        let t = generate_ground_truth(&c);
        let m = simulate_annotations(&c, &t).unwrap();
        assert_eq!(m.to_dense()[0], t.iter().map(|x| x.0).collect::<Vec<_>>());
    }

    #[test]
    fn chance_worker_agrees_at_chance() {
        let c = config(100_000, 4, vec![WorkerProfile::new("w", 0.25, 0.0)], 5);
        let t = generate_ground_truth(&c);
        let m = simulate_annotations(&c, &t).unwrap();
        let acc = worker_accuracy(&m, 0, &t).unwrap();
        assert!((acc - 0.25).abs() < 0.01, "{acc}");
    }

    #[test]
    fn wrong_answers_are_uniform_over_wrong_classes() {
        let c = config(60_000, 4, vec![WorkerProfile::new("w", 0.0, 0.0)], 9);
        let t = generate_ground_truth(&c);
        let m = simulate_annotations(&c, &t).unwrap();
        let mut counts = [0usize; 4];
        for (j, y) in t.iter().enumerate() {
            let w = m.get(0, j);
            assert_ne!(w, *y);
            // offset of the wrong label relative to the truth, in 1..=3
            counts[((w.0 + 4 - y.0) % 4) as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        for &n in &counts[1..] {
            let f = n as f64 / t.len() as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn missing_rate_frequency() {
        let c = config(100_000, 2, vec![WorkerProfile::new("w", 0.8, 0.5)], 13);
        let t = generate_ground_truth(&c);
        let m = simulate_annotations(&c, &t).unwrap();
        let stored = m.stored_entries() as f64;
        assert!((stored - 50_000.0).abs() < 1_000.0, "{stored}");
    }

    #[test]
    fn workers_use_independent_streams() {
        let a = WorkerProfile::new("a", 0.7, 0.1);
        let b = WorkerProfile::new("b", 0.6, 0.2);
        let spam = WorkerProfile::new("spam", 0.5, 0.0);
        let c1 = config(300, 2, vec![a.clone(), b.clone()], 21);
        let c2 = config(300, 2, vec![a, b, spam], 21);
        let t = generate_ground_truth(&c1);
        assert_eq!(t, generate_ground_truth(&c2));
        let m1 = simulate_annotations(&c1, &t).unwrap().to_dense();
        let m2 = simulate_annotations(&c2, &t).unwrap().to_dense();
        assert_eq!(m1[..], m2[..2]);
    }

    #[test]
    fn invalid_configs() {
        let s = schema(2);
        let w = WorkerProfile::new("w", 0.9, 0.0);
        assert!(SimulationConfig::new(0, s.clone(), vec![w.clone()], 0).is_err());
        assert!(SimulationConfig::new(1, s.clone(), vec![], 0).is_err());
        assert!(
            SimulationConfig::new(1, s.clone(), vec![WorkerProfile::new("w", 1.2, 0.0)], 0)
                .is_err()
        );
        assert!(
            SimulationConfig::new(1, s.clone(), vec![WorkerProfile::new("w", 0.5, 1.0)], 0)
                .is_err()
        );
        assert!(SimulationConfig::new(1, s, vec![w.clone(), w], 0).is_err());
    }

    #[test]
    fn scoring() {
        let t: Vec<_> = [1, 2, 1, 2].map(ExtendedLabel).to_vec();
        assert_eq!(score_accuracy(&t, &t).unwrap(), 1.0);
        assert_eq!(
            score_accuracy(&[ExtendedLabel::MISSING; 4], &t).unwrap(),
            0.0
        );
        let half: Vec<_> = [1, 2, 2, 1].map(ExtendedLabel).to_vec();
        assert_eq!(score_accuracy(&half, &t).unwrap(), 0.5);
        assert!(score_accuracy(&half[..3], &t).is_err());
        assert!(score_accuracy(
            &t,
            &half.iter().map(|_| ExtendedLabel(0)).collect::<Vec<_>>()
        )
        .is_err());
    }

    #[test]
    fn item_ids_are_padded() {
        let c = config(12, 2, vec![WorkerProfile::new("w", 1.0, 0.0)], 0);
        let ids = c.item_ids();
        assert_eq!(ids[0], "item-01");
        assert_eq!(ids[11], "item-12");
    }
}

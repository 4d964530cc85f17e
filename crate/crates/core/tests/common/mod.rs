//! Test-only helpers: a dense, loop-by-loop reference implementation of the
//! weighted voting iteration and a random matrix generator.
#![allow(dead_code)]

use llm_ensemble::{AnnotationMatrix, AttributeSchema};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRun {
    pub predictions: Vec<u32>,
    pub accuracies: Vec<f64>,
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn reference_vote(w: &[Vec<u32>], v: &[f64], l: u32) -> Vec<u32> {
    let n = w.len();
    let p = w[0].len();
    let mut out = vec![0; p];
    for j in 0..p {
        if (0..n).all(|i| w[i][j] == 0) {
            continue;
        }
        let mut best_k = 0;
        let mut best_score = f64::NEG_INFINITY;
        for k in 1..=l {
            let mut score = 0.0;
            for i in 0..n {
                if w[i][j] == k {
                    score += v[i];
                }
            }
            if score > best_score {
                best_score = score;
                best_k = k;
            }
        }
        out[j] = best_k;
    }
    out
}

/// Dense `w[i][j]` (0 = missing), `l` classes, lowest-index tie-break.
pub fn reference_ensemble(w: &[Vec<u32>], l: u32, max_iter: usize, tol: f64) -> ReferenceRun {
    let n = w.len();
    let p = w[0].len();
    let mut v = vec![1.0; n];
    let mut alpha = vec![1.0 / l as f64; n];
    let mut prev: Option<Vec<u32>> = None;
    let mut y = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        y = reference_vote(w, &v, l);
        for i in 0..n {
            let mut num = 0usize;
            let mut den = 0usize;
            for j in 0..p {
                if w[i][j] != 0 && y[j] != 0 {
                    den += 1;
                    if w[i][j] == y[j] {
                        num += 1;
                    }
                }
            }
            alpha[i] = if den == 0 {
                1.0 / l as f64
            } else {
                num as f64 / den as f64
            };
        }
        let new_v: Vec<f64> = alpha.iter().map(|a| l as f64 * a - 1.0).collect();
        let mut delta: f64 = 0.0;
        for i in 0..n {
            delta = delta.max((new_v[i] - v[i]).abs());
        }
        let same = prev.as_ref() == Some(&y);
        v = new_v;
        if same && delta <= tol {
            converged = true;
            break;
        }
        prev = Some(y.clone());
    }
    ReferenceRun {
        predictions: y,
        accuracies: alpha,
        weights: v,
        iterations,
        converged,
    }
}

pub fn schema(l: usize) -> AttributeSchema {
    AttributeSchema::new("attr", (1..=l).map(|k| format!("label{k}"))).unwrap()
}

/// Random sparse dense-form matrix with at least one observed entry.
pub fn random_dense(
    rng: &mut ChaCha8Rng,
    max_n: usize,
    max_p: usize,
    max_l: u32,
    max_missing: f64,
) -> (Vec<Vec<u32>>, u32) {
    loop {
        let n = rng.random_range(1..=max_n);
        let p = rng.random_range(1..=max_p);
        let l = rng.random_range(2..=max_l);
        let missing = rng.random_range(0.0..=max_missing);
        let w: Vec<Vec<u32>> = (0..n)
            .map(|_| {
                (0..p)
                    .map(|_| {
                        if rng.random::<f64>() < missing {
                            0
                        } else {
                            rng.random_range(1..=l)
                        }
                    })
                    .collect()
            })
            .collect();
        if w.iter().flatten().any(|&x| x != 0) {
            return (w, l);
        }
    }
}

pub fn corpus(seed: u64, count: usize) -> Vec<AnnotationMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (w, l) = random_dense(&mut rng, 6, 50, 4, 0.5);
            AnnotationMatrix::from_dense(schema(l as usize), &w).unwrap()
        })
        .collect()
}

/// All 2^(n*p) dense matrices over {1, 2}.
pub fn all_binary_dense(n: usize, p: usize) -> impl Iterator<Item = Vec<Vec<u32>>> {
    (0u32..1 << (n * p)).map(move |bits| {
        (0..n)
            .map(|i| (0..p).map(|j| 1 + ((bits >> (i * p + j)) & 1)).collect())
            .collect()
    })
}

//! The synthetic generator must be learnable by construction: a depth-0
//! baseline (logistic regression on the flattened window) has to reach 90%
//! subject-independent test accuracy. Model-level accuracy criteria then
//! measure the model, not the data.

use cardioformer::dataio::{generate_synthetic, subject_split, Sample};
use cardioformer::numerics::{Graph, Tensor};

/// Flattens windows to f64 feature vectors, standardized per feature with
/// statistics from the training rows.
fn design_matrix(samples: &[Sample], idx: &[usize], mean: &[f64], std: &[f64]) -> Tensor<f64> {
    let dim = mean.len();
    let mut data = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        for (j, &v) in samples[i].window.data().iter().enumerate() {
            data.push((v as f64 - mean[j]) / std[j]);
        }
    }
    Tensor::new(vec![idx.len(), dim], data).unwrap()
}

#[test]
fn logistic_regression_baseline_reaches_90_percent() {
    let (manifest, samples) = generate_synthetic(4, 30, 10, 250, 12, 41).unwrap();
    let split = subject_split(&manifest, (0.6, 0.2, 0.2), 41).unwrap();
    let (train_idx, _, test_idx) = split.split_indices(&manifest.samples);
    assert!(!train_idx.is_empty() && !test_idx.is_empty());

    let dim = manifest.timestamps * manifest.channels;
    let mut mean = vec![0.0f64; dim];
    for &i in &train_idx {
        for (j, &v) in samples[i].window.data().iter().enumerate() {
            mean[j] += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= train_idx.len() as f64;
    }
    let mut std = vec![0.0f64; dim];
    for &i in &train_idx {
        for (j, &v) in samples[i].window.data().iter().enumerate() {
            std[j] += (v as f64 - mean[j]).powi(2);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / train_idx.len() as f64).sqrt().max(1e-6);
    }

    let x_train = design_matrix(&samples, &train_idx, &mean, &std);
    let y_train: Vec<usize> = train_idx.iter().map(|&i| samples[i].label).collect();
    let x_test = design_matrix(&samples, &test_idx, &mean, &std);

    // Full-batch Adam on W, b.
    let classes = manifest.classes;
    let mut w = vec![0.0f64; dim * classes];
    let mut b = vec![0.0f64; classes];
    let mut m1 = vec![0.0f64; dim * classes + classes];
    let mut m2 = vec![0.0f64; dim * classes + classes];
    let (lr, beta1, beta2, eps): (f64, f64, f64, f64) = (0.05, 0.9, 0.999, 1e-8);
    for step in 1..=150 {
        let g = Graph::new();
        let xv = g.constant(x_train.clone()).unwrap();
        let wv = g.param(Tensor::new(vec![dim, classes], w.clone()).unwrap()).unwrap();
        let bv = g.param(Tensor::new(vec![classes], b.clone()).unwrap()).unwrap();
        let logits = g.add(g.matmul(xv, wv).unwrap(), bv).unwrap();
        let loss = g.cross_entropy_from_logits(logits, &y_train).unwrap();
        let grads = g.backward(loss).unwrap();
        let dw = grads.wrt(wv);
        let db = grads.wrt(bv);
        let flat: Vec<f64> = dw.data().iter().chain(db.data().iter()).copied().collect();
        let correction1 = 1.0 - beta1.powi(step);
        let correction2 = 1.0 - beta2.powi(step);
        for (j, &gj) in flat.iter().enumerate() {
            m1[j] = beta1 * m1[j] + (1.0 - beta1) * gj;
            m2[j] = beta2 * m2[j] + (1.0 - beta2) * gj * gj;
            let update = lr * (m1[j] / correction1) / ((m2[j] / correction2).sqrt() + eps);
            if j < dim * classes {
                w[j] -= update;
            } else {
                b[j - dim * classes] -= update;
            }
        }
    }

    let g = Graph::new();
    let xv = g.constant(x_test).unwrap();
    let wv = g.constant(Tensor::new(vec![dim, classes], w).unwrap()).unwrap();
    let bv = g.constant(Tensor::new(vec![classes], b).unwrap()).unwrap();
    let logits = g.value(g.add(g.matmul(xv, wv).unwrap(), bv).unwrap());
    let mut correct = 0usize;
    for (row, &i) in logits.data().chunks(classes).zip(test_idx.iter()) {
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == samples[i].label {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / test_idx.len() as f64;
    assert!(
        accuracy >= 0.90,
        "baseline accuracy {accuracy} below the 0.90 separability bar"
    );
}

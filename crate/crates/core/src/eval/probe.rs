//! Closed-form ridge regression probe on one-hot class targets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MocError, Result};

pub const DEFAULT_RIDGE_ALPHA: f64 = 1.0;
pub const FEW_SHOT_SIZES: [usize; 4] = [1, 4, 16, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    /// `dim x classes`, row-major.
    pub weights: Vec<f64>,
    pub classes: usize,
}

/// Solves `a x = b` for symmetric positive definite `a` (`n x n`) and
/// `b` with `m` right-hand-side columns.
fn cholesky_solve(a: &[f64], n: usize, b: &[f64], m: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 {
                    return Err(MocError::Shape("ridge system is not positive definite".into()));
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    let mut x = b.to_vec();
    for c in 0..m {
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i * n + k] * x[k * m + c]).sum();
            x[i * m + c] = (x[i * m + c] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k * m + c]).sum();
            x[i * m + c] = (x[i * m + c] - s) / l[i * n + i];
        }
    }
    Ok(x)
}

/// Fits `W = (Xc^T Xc + alpha I)^-1 Xc^T Yc` on centered inputs and one-hot
/// targets.
pub fn ridge_fit(x: &[Vec<f64>], y: &[usize], classes: usize, alpha: f64) -> Result<RidgeModel> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(MocError::Config("ridge alpha must be > 0".into()));
    }
    if x.is_empty() || x.len() != y.len() {
        return Err(MocError::Dimension(format!("{} samples with {} labels", x.len(), y.len())));
    }
    if let Some(&c) = y.iter().find(|&&c| c >= classes) {
        return Err(MocError::Dimension(format!("label {c} outside {classes} classes")));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(MocError::Dimension("samples differ in dimension".into()));
    }
    let n = x.len() as f64;
    let mean_x: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut mean_y = vec![0.0; classes];
    y.iter().for_each(|&c| mean_y[c] += 1.0 / n);

    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d * classes];
    for (r, &c) in x.iter().zip(y) {
        let xc: Vec<f64> = r.iter().zip(&mean_x).map(|(a, m)| a - m).collect();
        for i in 0..d {
            for j in 0..d {
                gram[i * d + j] += xc[i] * xc[j];
            }
            for k in 0..classes {
                let yk = if k == c { 1.0 } else { 0.0 } - mean_y[k];
                rhs[i * classes + k] += xc[i] * yk;
            }
        }
    }
    for i in 0..d {
        gram[i * d + i] += alpha;
    }
    let weights = cholesky_solve(&gram, d, &rhs, classes)?;
    Ok(RidgeModel {
        mean_x,
        mean_y,
        weights,
        classes,
    })
}

impl RidgeModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let d = self.mean_x.len();
        (0..self.classes)
            .map(|k| self.mean_y[k] + (0..d).map(|i| (x[i] - self.mean_x[i]) * self.weights[i * self.classes + k]).sum::<f64>())
            .collect()
    }

    /// Highest-scoring class; ties go to the lower index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        let mut best = 0;
        for k in 1..s.len() {
            if s[k] > s[best] {
                best = k;
            }
        }
        best
    }
}

/// Accuracy of a ridge probe trained on `train` and scored on `test`.
pub fn ridge_few_shot(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], classes: usize, alpha: f64) -> Result<f64> {
    if test.is_empty() {
        return Ok(0.0);
    }
    if train.is_empty() {
        return Ok(0.0);
    }
    let x: Vec<Vec<f64>> = train.iter().map(|s| s.0.clone()).collect();
    let y: Vec<usize> = train.iter().map(|s| s.1).collect();
    let model = ridge_fit(&x, &y, classes, alpha)?;
    let correct = test.iter().filter(|(e, c)| model.predict(e) == *c).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Seeded split taking `n` samples of every class for training and leaving
/// the rest for testing. A class with fewer than `n` samples contributes
/// nothing to training and all its samples to testing.
pub fn few_shot_split(samples: &[(Vec<f64>, usize)], n: usize, seed: u64) -> (Vec<(Vec<f64>, usize)>, Vec<(Vec<f64>, usize)>) {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.1).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let take = if idx.len() >= n { n } else { 0 };
        for (k, &i) in idx.iter().enumerate() {
            if k < take {
                train.push(samples[i].clone());
            } else {
                test.push(samples[i].clone());
            }
        }
    }
    (train, test)
}

/// Few-shot accuracy over labelled encodings: `n` samples per class train
/// the probe and the rest are scored. Samples of a class too small to
/// supply `n` training samples count as misclassified; with no samples
/// at all the accuracy is 0.
pub fn few_shot_accuracy(samples: &[(Vec<f64>, usize)], n: usize, seed: u64, alpha: f64) -> Result<f64> {
    let (train, test) = few_shot_split(samples, n, seed);
    if test.is_empty() || train.is_empty() {
        return Ok(0.0);
    }
    let trained: Vec<usize> = {
        let mut v: Vec<usize> = train.iter().map(|s| s.1).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let index = |c: usize| trained.binary_search(&c).ok();
    if trained.len() == 1 {
        let hits = test.iter().filter(|s| s.1 == trained[0]).count();
        return Ok(hits as f64 / test.len() as f64);
    }
    let x: Vec<Vec<f64>> = train.iter().map(|s| s.0.clone()).collect();
    let y: Vec<usize> = train.iter().map(|s| index(s.1).expect("trained class")).collect();
    let model = ridge_fit(&x, &y, trained.len(), alpha)?;
    let hits = test
        .iter()
        .filter(|(e, c)| index(*c) == Some(model.predict(e)))
        .count();
    Ok(hits as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Gauss-Jordan inverse with partial pivoting.
    fn invert(a: &[f64], n: usize) -> Vec<f64> {
        let mut m: Vec<f64> = Vec::with_capacity(n * 2 * n);
        for i in 0..n {
            m.extend_from_slice(&a[i * n..(i + 1) * n]);
            m.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
        }
        let w = 2 * n;
        for c in 0..n {
            let p = (c..n).max_by(|&x, &y| m[x * w + c].abs().total_cmp(&m[y * w + c].abs())).unwrap();
            for j in 0..w {
                m.swap(c * w + j, p * w + j);
            }
            let d = m[c * w + c];
            for j in 0..w {
                m[c * w + j] /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = m[r * w + c];
                    for j in 0..w {
                        m[r * w + j] -= f * m[c * w + j];
                    }
                }
            }
        }
        (0..n).flat_map(|i| m[i * w + n..i * w + w].to_vec()).collect()
    }

    pub(crate) fn normal_equation_oracle(x: &[Vec<f64>], y: &[usize], classes: usize, alpha: f64) -> Vec<f64> {
        let (n, d) = (x.len(), x[0].len());
        let mx: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let mut my = vec![0.0; classes];
        y.iter().for_each(|&c| my[c] += 1.0 / n as f64);
        let xc: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&mx).map(|(a, b)| a - b).collect()).collect();
        let yc: Vec<Vec<f64>> = y.iter().map(|&c| (0..classes).map(|k| (k == c) as u8 as f64 - my[k]).collect()).collect();
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..n).map(|s| xc[s][i] * xc[s][j]).sum::<f64>() + if i == j { alpha } else { 0.0 };
            }
        }
        let inv = invert(&a, d);
        let mut xty = vec![0.0; d * classes];
        for i in 0..d {
            for k in 0..classes {
                xty[i * classes + k] = (0..n).map(|s| xc[s][i] * yc[s][k]).sum();
            }
        }
        let mut w = vec![0.0; d * classes];
        for i in 0..d {
            for k in 0..classes {
                w[i * classes + k] = (0..d).map(|j| inv[i * d + j] * xty[j * classes + k]).sum();
            }
        }
        w
    }

    #[test]
    fn weights_match_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..50 {
            let (n, d, k) = (rng.gen_range(2..20), rng.gen_range(1..8), rng.gen_range(2..5));
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let m = ridge_fit(&x, &y, k, 1.0).unwrap();
            let o = normal_equation_oracle(&x, &y, k, 1.0);
            for (a, b) in m.weights.iter().zip(&o) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn orthogonal_codes_one_shot() {
        let code = |c: usize| (0..3).map(|i| if i == c { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let train: Vec<(Vec<f64>, usize)> = (0..3).map(|c| (code(c), c)).collect();
        let test: Vec<(Vec<f64>, usize)> = (0..30).map(|i| (code(i % 3), i % 3)).collect();
        assert_eq!(ridge_few_shot(&train, &test, 3, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn shuffled_labels_are_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut total = 0.0;
        let trials = 50;
        for _ in 0..trials {
            let sample = |rng: &mut ChaCha8Rng| -> (Vec<f64>, usize) {
                ((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen_range(0..2))
            };
            let train: Vec<_> = (0..16).map(|_| sample(&mut rng)).collect();
            let test: Vec<_> = (0..100).map(|_| sample(&mut rng)).collect();
            total += ridge_few_shot(&train, &test, 2, 1.0).unwrap();
        }
        assert!((total / trials as f64 - 0.5).abs() <= 0.1);
    }

    #[test]
    fn centering_makes_prediction_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let x: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let shift = [5.0, -3.0, 100.0];
        let xs: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(shift).map(|(a, s)| a + s).collect()).collect();
        let (m1, m2) = (ridge_fit(&x, &y, 3, 1.0).unwrap(), ridge_fit(&xs, &y, 3, 1.0).unwrap());
        for (a, b) in x.iter().zip(&xs) {
            assert_eq!(m1.predict(a), m2.predict(b));
        }
    }

    #[test]
    fn split_takes_n_per_class() {
        let samples: Vec<(Vec<f64>, usize)> = (0..20).map(|i| (vec![i as f64], i % 3)).collect();
        let (tr, te) = few_shot_split(&samples, 4, 1);
        assert_eq!(tr.len(), 12);
        assert_eq!(te.len(), 8);
        for c in 0..3 {
            assert_eq!(tr.iter().filter(|s| s.1 == c).count(), 4);
        }
        // class 2 has 6 samples: too few for n = 7
        let (tr, te) = few_shot_split(&samples, 7, 1);
        assert_eq!(tr.iter().filter(|s| s.1 == 2).count(), 0);
        assert_eq!(te.iter().filter(|s| s.1 == 2).count(), 6);
        assert_eq!(few_shot_split(&samples, 4, 1), few_shot_split(&samples, 4, 1));
    }

    #[test]
    fn untrainable_classes_count_as_wrong() {
        let code = |c: usize| (0..3).map(|i| if i == c { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let mut samples: Vec<(Vec<f64>, usize)> = (0..12).map(|i| (code(i % 2), i % 2)).collect();
        samples.push((code(2), 2));
        // 4 of 5 held-out samples are separable; the lone class-2 sample is not trainable
        let acc = few_shot_accuracy(&samples, 4, 0, 1.0).unwrap();
        assert!((acc - 0.8).abs() < 1e-12, "{acc}");
        assert_eq!(few_shot_accuracy(&[], 1, 0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn invalid_inputs() {
        assert!(ridge_fit(&[vec![1.0]], &[0], 1, 0.0).is_err());
        assert!(ridge_fit(&[], &[], 1, 1.0).is_err());
        assert!(ridge_fit(&[vec![1.0]], &[3], 2, 1.0).is_err());
        assert_eq!(ridge_few_shot(&[], &[(vec![1.0], 0)], 1, 1.0).unwrap(), 0.0);
    }
}

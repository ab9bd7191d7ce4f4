use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MocError, Result};

pub const KMEANS_MAX_ITER: usize = 300;

/// Normalizer in the denominator of the adjusted mutual information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmiNormalizer {
    #[default]
    Max,
    Mean,
}

/// Relabels to `0..k` in order of first appearance.
fn dense(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let next = map.len();
        out.push(*map.entry(l).or_insert(next));
    }
    (out, map.len())
}

struct Contingency {
    n: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    cells: Vec<Vec<usize>>,
}

fn contingency(c1: &[usize], c2: &[usize]) -> Result<Contingency> {
    if c1.len() != c2.len() {
        return Err(MocError::Dimension(format!("clusterings of {} and {} items", c1.len(), c2.len())));
    }
    let (a, ka) = dense(c1);
    let (b, kb) = dense(c2);
    let mut cells = vec![vec![0usize; kb]; ka];
    for (&i, &j) in a.iter().zip(&b) {
        cells[i][j] += 1;
    }
    Ok(Contingency {
        n: c1.len(),
        rows: cells.iter().map(|r| r.iter().sum()).collect(),
        cols: (0..kb).map(|j| cells.iter().map(|r| r[j]).sum()).collect(),
        cells,
    })
}

/// Entropy in nats of an assignment.
pub fn entropy(c: &[usize]) -> f64 {
    let (d, k) = dense(c);
    let n = c.len() as f64;
    let mut counts = vec![0usize; k];
    d.iter().for_each(|&i| counts[i] += 1);
    counts
        .iter()
        .filter(|&&m| m > 0)
        .map(|&m| {
            let p = m as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Empirical mutual information in nats.
pub fn mutual_information(c1: &[usize], c2: &[usize]) -> Result<f64> {
    let t = contingency(c1, c2)?;
    let n = t.n as f64;
    let mut mi = 0.0;
    for (i, row) in t.cells.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let nij = nij as f64;
            mi += nij / n * (n * nij / (t.rows[i] as f64 * t.cols[j] as f64)).ln();
        }
    }
    Ok(mi.max(0.0))
}

/// Expected mutual information of two random clusterings with the given
/// marginals, under the hypergeometric model.
fn expected_mutual_information(t: &Contingency) -> f64 {
    let n = t.n;
    let mut lf = vec![0.0f64; n + 1];
    for k in 1..=n {
        lf[k] = lf[k - 1] + (k as f64).ln();
    }
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in &t.rows {
        for &b in &t.cols {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            for nij in lo..=hi {
                let x = nij as f64;
                let term = x / nf * (nf * x / (a as f64 * b as f64)).ln();
                let log_p = lf[a] + lf[b] + lf[n - a] + lf[n - b]
                    - lf[n]
                    - lf[nij]
                    - lf[a - nij]
                    - lf[b - nij]
                    - lf[n + nij - a - b];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// Whether two assignments induce the same partition.
fn same_partition(c1: &[usize], c2: &[usize]) -> bool {
    dense(c1).0 == dense(c2).0
}

/// Mutual information adjusted for chance: 1 for identical partitions and
/// about 0 for independent ones.
pub fn adjusted_mutual_information(c1: &[usize], c2: &[usize], norm: AmiNormalizer) -> Result<f64> {
    let t = contingency(c1, c2)?;
    if t.n == 0 {
        return Ok(1.0);
    }
    let mi = mutual_information(c1, c2)?;
    let (h1, h2) = (entropy(c1), entropy(c2));
    let emi = expected_mutual_information(&t);
    let normalizer = match norm {
        AmiNormalizer::Max => h1.max(h2),
        AmiNormalizer::Mean => (h1 + h2) / 2.0,
    };
    let denom = normalizer - emi;
    if denom.abs() < 1e-12 {
        return Ok(if same_partition(c1, c2) { 1.0 } else { 0.0 });
    }
    Ok(((mi - emi) / denom).min(1.0))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means with k-means++ seeding and Lloyd iterations until the
/// assignment stops changing or [`KMEANS_MAX_ITER`] is reached.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(MocError::Config("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(MocError::Config(format!("{} points for {k} clusters", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(MocError::Dimension("points differ in dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[idx].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &centroids[centroids.len() - 1]));
        }
    }

    let nearest = |p: &[f64], cs: &[Vec<f64>]| {
        let mut best = (f64::INFINITY, 0);
        for (j, c) in cs.iter().enumerate() {
            let d = dist2(p, c);
            if d < best.0 {
                best = (d, j);
            }
        }
        best
    };
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).1).collect();
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        // an empty cluster takes the point farthest from its centroid
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        dist2(&points[a], &centroids[assign[a]])
                            .total_cmp(&dist2(&points[b], &centroids[assign[b]]))
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                centroids[j] = points[far].clone();
                counts[assign[far]] -= 1;
                assign[far] = j;
                counts[j] = 1;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(assign)
}

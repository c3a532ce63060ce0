#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use team_core::metric::ScatterPair;
use team_core::synth::{generate, SynthConfig};
use team_core::{Dataset, EmbeddingVector, Episode};

pub fn gaussian_vector<R: Rng>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_matrix<R: Rng>(r: usize, c: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Well-conditioned random SPD matrix.
pub fn random_spd<R: Rng>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let a = gaussian_matrix(d, d, rng);
    (&a * a.transpose()) / d as f64 + DMatrix::identity(d, d) * 0.5
}

/// Mean outer product of `n` random differences, as a scatter matrix would be.
pub fn random_scatter_matrix<R: Rng>(d: usize, n: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(d, d);
    for _ in 0..n {
        let v = gaussian_vector(d, rng) * scale;
        acc += &v * v.transpose();
    }
    acc / n as f64
}

pub fn random_scatter<R: Rng>(d: usize, rng: &mut R) -> ScatterPair {
    ScatterPair {
        m_tilde: random_scatter_matrix(d, 3 * d, 1.0, rng),
        c_tilde: random_scatter_matrix(d, 2 * d, 3.0, rng),
    }
}

/// Nearest class mean by squared Euclidean distance, written without the
/// library's prototype or metric code.
pub fn nearest_prototype(episode: &Episode) -> Vec<usize> {
    let d = episode.support[0].x.len();
    let mut sums = vec![vec![0.0; d]; episode.n_way];
    let mut counts = vec![0usize; episode.n_way];
    for s in &episode.support {
        for j in 0..d {
            sums[s.class][j] += s.x[j];
        }
        counts[s.class] += 1;
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n as f64).collect())
        .collect();
    episode
        .query
        .iter()
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (c, m) in means.iter().enumerate() {
                let dist: f64 = (0..d).map(|j| (q.x[j] - m[j]).powi(2)).sum();
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            best.0
        })
        .collect()
}

pub fn an16() -> Dataset {
    generate(&SynthConfig::an16()).unwrap()
}

/// Keeps the records whose label satisfies `keep`.
pub fn class_subset(dataset: &Dataset, keep: impl Fn(u32) -> bool) -> Dataset {
    let records: Vec<EmbeddingVector> =
        dataset.records().iter().filter(|r| r.label.is_some_and(&keep)).cloned().collect();
    Dataset::new(records).unwrap()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

use nalgebra::{DMatrix, DVector};

use crate::data::{Episode, PrototypeBank};
use crate::error::{Result, TeamError};

/// Per-class means of the support set, in class-index order.
pub fn compute_prototypes(episode: &Episode) -> Vec<DVector<f64>> {
    let d = episode.dim();
    let mut sums = vec![DVector::zeros(d); episode.n_way];
    let mut counts = vec![0usize; episode.n_way];
    for item in &episode.support {
        sums[item.class] += &item.x;
        counts[item.class] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| if n == 0 { s } else { s / n as f64 })
        .collect()
}

/// Must-link and cannot-link pairs of one episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintSets {
    pub must_link: Vec<(DVector<f64>, DVector<f64>)>,
    pub cannot_link: Vec<(DVector<f64>, DVector<f64>)>,
}

/// Builds the pair sets.
///
/// Must-link: unordered same-class support pairs, each support point with its
/// class prototype, and (when `transductive`) each support point with its
/// `knn_k` Euclidean nearest neighbours among query and unlabeled points.
/// Cannot-link: unordered pairs of distinct prototypes, and every prototype
/// with every bank entry.
pub fn build_constraints(
    episode: &Episode,
    prototypes: &[DVector<f64>],
    bank: &PrototypeBank,
    knn_k: usize,
    transductive: bool,
) -> Result<ConstraintSets> {
    if prototypes.len() != episode.n_way {
        return Err(TeamError::Parameter(format!(
            "expected {} prototypes, got {}",
            episode.n_way,
            prototypes.len()
        )));
    }
    let pool: Vec<&DVector<f64>> = if transductive {
        let pool: Vec<_> = episode.transductive_pool().collect();
        if knn_k == 0 || knn_k > pool.len() {
            return Err(TeamError::Parameter(format!(
                "knn_k = {knn_k} but the transductive pool holds {} points",
                pool.len()
            )));
        }
        pool
    } else {
        Vec::new()
    };

    let mut must_link = Vec::new();
    let support = &episode.support;
    for (i, a) in support.iter().enumerate() {
        for b in &support[i + 1..] {
            if a.class == b.class {
                must_link.push((a.x.clone(), b.x.clone()));
            }
        }
    }
    for s in support {
        must_link.push((s.x.clone(), prototypes[s.class].clone()));
    }
    if transductive {
        for s in support {
            for j in nearest(&s.x, &pool, knn_k) {
                must_link.push((s.x.clone(), pool[j].clone()));
            }
        }
    }

    let mut cannot_link = Vec::new();
    for (c, p) in prototypes.iter().enumerate() {
        for q in &prototypes[c + 1..] {
            cannot_link.push((p.clone(), q.clone()));
        }
    }
    for p in prototypes {
        for b in bank.prototypes() {
            if b.len() != p.len() {
                return Err(TeamError::Parameter("bank dimension differs from episode dimension".into()));
            }
            cannot_link.push((p.clone(), b.clone()));
        }
    }
    Ok(ConstraintSets { must_link, cannot_link })
}

/// Indices of the `k` closest pool points by squared Euclidean distance, ties
/// broken by index.
fn nearest(x: &DVector<f64>, pool: &[&DVector<f64>], k: usize) -> Vec<usize> {
    let mut dists: Vec<(f64, usize)> = pool.iter().enumerate().map(|(j, q)| ((*q - x).norm_squared(), j)).collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Mean outer products of pair differences over the must-link and
/// cannot-link sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPair {
    pub m_tilde: DMatrix<f64>,
    pub c_tilde: DMatrix<f64>,
}

impl ScatterPair {
    pub fn dim(&self) -> usize {
        self.m_tilde.nrows()
    }
}

pub fn scatter_matrices(cs: &ConstraintSets) -> Result<ScatterPair> {
    if cs.must_link.is_empty() {
        return Err(TeamError::Constraint("must-link set is empty".into()));
    }
    if cs.cannot_link.is_empty() {
        return Err(TeamError::Constraint("cannot-link set is empty".into()));
    }
    Ok(ScatterPair {
        m_tilde: mean_outer(&cs.must_link),
        c_tilde: mean_outer(&cs.cannot_link),
    })
}

/// Zero-difference pairs are skipped and excluded from the count. If every
/// pair is zero the result is the zero matrix.
fn mean_outer(pairs: &[(DVector<f64>, DVector<f64>)]) -> DMatrix<f64> {
    let d = pairs[0].0.len();
    let mut acc = DMatrix::zeros(d, d);
    let mut n = 0usize;
    for (a, b) in pairs {
        let v = a - b;
        if v.iter().all(|x| *x == 0.0) {
            continue;
        }
        acc.ger(1.0, &v, &v, 1.0);
        n += 1;
    }
    if n > 0 {
        acc /= n as f64;
    }
    symmetrize(acc)
}

/// Unbiased sample covariance over every point in the episode (support,
/// query and unlabeled).
pub fn task_covariance(episode: &Episode) -> Result<DMatrix<f64>> {
    let points: Vec<&DVector<f64>> = episode.support.iter().map(|s| &s.x).chain(episode.transductive_pool()).collect();
    covariance(&points)
}

fn covariance(points: &[&DVector<f64>]) -> Result<DMatrix<f64>> {
    let n = points.len();
    if n < 2 {
        return Err(TeamError::Degenerate(format!("covariance needs at least 2 points, got {n}")));
    }
    let d = points[0].len();
    let mut mean = DVector::zeros(d);
    for p in points {
        mean += *p;
    }
    mean /= n as f64;
    let mut acc = DMatrix::zeros(d, d);
    for p in points {
        let v = *p - &mean;
        acc.ger(1.0, &v, &v, 1.0);
    }
    Ok(symmetrize(acc / (n - 1) as f64))
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EpisodeConfig, EpisodeItem};
    use crate::sampler::sample_episode;
    use crate::synth::{generate, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn item(v: &[f64], class: usize) -> EpisodeItem {
        EpisodeItem {
            x: DVector::from_column_slice(v),
            class,
            row: None,
        }
    }

    fn random_episode(n: usize, k: usize, q: usize, seed: u64) -> Episode {
        let ds = generate(&SynthConfig::isotropic(8, 5, 30, 2.0, seed)).unwrap();
        sample_episode(&ds, &EpisodeConfig::new(n, k, q, 0), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn one_shot_prototype_is_the_support_point() {
        let ep = random_episode(4, 1, 2, 1);
        let protos = compute_prototypes(&ep);
        for s in &ep.support {
            assert_eq!(protos[s.class], s.x);
        }
    }

    #[test]
    fn prototype_is_mean() {
        let ep = Episode {
            n_way: 2,
            support: vec![item(&[1.0, 1.0], 0), item(&[3.0, 3.0], 0), item(&[0.0, 0.0], 1), item(&[0.0, 2.0], 1)],
            query: vec![],
            unlabeled: vec![],
        };
        let protos = compute_prototypes(&ep);
        assert_eq!(protos[0], DVector::from_vec(vec![2.0, 2.0]));
        assert_eq!(protos[1], DVector::from_vec(vec![0.0, 1.0]));
    }

    #[test]
    fn prototypes_match_column_means() {
        let ep = random_episode(5, 5, 3, 2);
        let protos = compute_prototypes(&ep);
        for c in 0..5 {
            let members: Vec<_> = ep.support.iter().filter(|s| s.class == c).collect();
            for j in 0..ep.dim() {
                let mut sum = 0.0;
                for m in &members {
                    sum += m.x[j];
                }
                assert!((protos[c][j] - sum / members.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_way_one_shot_counts() {
        let ep = random_episode(2, 1, 2, 3);
        let protos = compute_prototypes(&ep);
        let cs = build_constraints(&ep, &protos, &PrototypeBank::empty(), 3, false).unwrap();
        assert_eq!(cs.must_link.len(), 2);
        assert_eq!(cs.cannot_link.len(), 1);
    }

    /// Counts pairs by explicit enumeration of the set definitions.
    fn enumerate_counts(ep: &Episode, knn_k: usize, bank: usize, transductive: bool) -> (usize, usize) {
        let mut m = 0;
        for i in 0..ep.support.len() {
            for j in 0..ep.support.len() {
                if i < j && ep.support[i].class == ep.support[j].class {
                    m += 1;
                }
            }
            m += 1;
            if transductive {
                m += knn_k;
            }
        }
        let mut c = 0;
        for a in 0..ep.n_way {
            for b in 0..ep.n_way {
                if a < b {
                    c += 1;
                }
            }
            c += bank;
        }
        (m, c)
    }

    #[test]
    fn five_way_five_shot_transductive_counts() {
        let ep = random_episode(5, 5, 3, 4);
        let protos = compute_prototypes(&ep);
        let cs = build_constraints(&ep, &protos, &PrototypeBank::empty(), 3, true).unwrap();
        assert_eq!(enumerate_counts(&ep, 3, 0, true), (150, 10));
        assert_eq!((cs.must_link.len(), cs.cannot_link.len()), (150, 10));
    }

    #[test]
    fn bank_adds_prototype_pairs() {
        let ep = random_episode(5, 2, 3, 5);
        let protos = compute_prototypes(&ep);
        let entries: BTreeMap<u32, DVector<f64>> =
            (0..64).map(|i| (i, DVector::from_element(ep.dim(), i as f64))).collect();
        let bank = PrototypeBank::new(entries).unwrap();
        let cs = build_constraints(&ep, &protos, &bank, 3, true).unwrap();
        let (_, c) = enumerate_counts(&ep, 3, 64, true);
        assert_eq!(cs.cannot_link.len(), c);
        assert_eq!(c, 10 + 320);
    }

    #[test]
    fn knn_pairs_are_nearest_queries() {
        let ep = Episode {
            n_way: 2,
            support: vec![item(&[0.0], 0), item(&[10.0], 1)],
            query: vec![item(&[9.0], 1), item(&[1.0], 0), item(&[2.5], 0), item(&[11.5], 1)],
            unlabeled: vec![],
        };
        let protos = compute_prototypes(&ep);
        let cs = build_constraints(&ep, &protos, &PrototypeBank::empty(), 2, true).unwrap();
        let knn: Vec<(f64, f64)> = cs.must_link[2..].iter().map(|(a, b)| (a[0], b[0])).collect();
        assert_eq!(knn, vec![(0.0, 1.0), (0.0, 2.5), (10.0, 9.0), (10.0, 11.5)]);
    }

    #[test]
    fn knn_larger_than_pool_errors() {
        let ep = random_episode(2, 1, 1, 6);
        let protos = compute_prototypes(&ep);
        assert!(build_constraints(&ep, &protos, &PrototypeBank::empty(), 3, true).is_err());
        assert!(build_constraints(&ep, &protos, &PrototypeBank::empty(), 3, false).is_ok());
    }

    #[test]
    fn single_pair_scatter() {
        let cs = ConstraintSets {
            must_link: vec![(DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 0.0]))],
            cannot_link: vec![(DVector::from_vec(vec![0.0, 1.0]), DVector::from_vec(vec![0.0, 0.0]))],
        };
        let sp = scatter_matrices(&cs).unwrap();
        assert_eq!(sp.m_tilde, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(sp.c_tilde, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn duplicating_pairs_leaves_scatter_unchanged() {
        let ep = random_episode(3, 3, 2, 7);
        let protos = compute_prototypes(&ep);
        let cs = build_constraints(&ep, &protos, &PrototypeBank::empty(), 2, true).unwrap();
        let mut doubled = cs.clone();
        doubled.must_link.extend(cs.must_link.iter().cloned());
        let a = scatter_matrices(&cs).unwrap();
        let b = scatter_matrices(&doubled).unwrap();
        assert!((&a.m_tilde - &b.m_tilde).amax() < 1e-12);
    }

    #[test]
    fn zero_difference_pairs_are_dropped() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let y = DVector::from_vec(vec![2.0, 2.0]);
        let cs = ConstraintSets {
            must_link: vec![(x.clone(), x.clone()), (x.clone(), y.clone())],
            cannot_link: vec![(x.clone(), y.clone())],
        };
        let sp = scatter_matrices(&cs).unwrap();
        assert_eq!(sp.m_tilde[(0, 0)], 1.0);
        let all_zero = ConstraintSets {
            must_link: vec![(x.clone(), x.clone())],
            cannot_link: vec![(x.clone(), y)],
        };
        assert_eq!(scatter_matrices(&all_zero).unwrap().m_tilde, DMatrix::zeros(2, 2));
    }

    #[test]
    fn empty_sets_error() {
        let cs = ConstraintSets::default();
        assert!(matches!(scatter_matrices(&cs), Err(TeamError::Constraint(_))));
    }

    #[test]
    fn covariance_of_identical_points_is_zero() {
        let ep = Episode {
            n_way: 2,
            support: vec![item(&[1.0, 2.0], 0), item(&[1.0, 2.0], 1)],
            query: vec![item(&[1.0, 2.0], 0)],
            unlabeled: vec![],
        };
        assert_eq!(task_covariance(&ep).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn covariance_of_two_points() {
        let ep = Episode {
            n_way: 2,
            support: vec![item(&[0.0], 0), item(&[2.0], 1)],
            query: vec![],
            unlabeled: vec![],
        };
        assert_eq!(task_covariance(&ep).unwrap(), DMatrix::from_element(1, 1, 2.0));
        let single = Episode {
            n_way: 2,
            support: vec![item(&[0.0], 0)],
            query: vec![],
            unlabeled: vec![],
        };
        assert!(matches!(task_covariance(&single), Err(TeamError::Degenerate(_))));
    }

    #[test]
    fn covariance_includes_unlabeled_pool() {
        let mut ep = random_episode(2, 1, 1, 8);
        let base = task_covariance(&ep).unwrap();
        ep.unlabeled.push(crate::data::UnlabeledItem {
            x: DVector::from_element(ep.dim(), 50.0),
            row: None,
        });
        let with = task_covariance(&ep).unwrap();
        assert!(with.trace() > base.trace());
    }
}

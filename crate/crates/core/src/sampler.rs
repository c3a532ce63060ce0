//! N-way K-shot episode sampling, including the labeled/unlabeled split used
//! by the semi-supervised protocol.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Episode, EpisodeConfig, EpisodeItem, UnlabeledItem};
use crate::error::{Result, TeamError};

/// Draws one episode. Classes are chosen uniformly among those with enough
/// examples; rows are drawn without replacement within the episode.
pub fn sample_episode<R: Rng + ?Sized>(dataset: &Dataset, config: &EpisodeConfig, rng: &mut R) -> Result<Episode> {
    let index = dataset.class_index();
    sample_from_index(dataset, &index, config, rng).map(|(episode, _)| episode)
}

/// Returns the episode and the dataset labels of the selected classes, in
/// episode class-index order.
fn sample_from_index<R: Rng + ?Sized>(
    dataset: &Dataset,
    class_rows: &BTreeMap<u32, Vec<usize>>,
    config: &EpisodeConfig,
    rng: &mut R,
) -> Result<(Episode, Vec<u32>)> {
    config.validate()?;
    let per_class = config.k_shot + config.n_query_per_class;
    let eligible: Vec<(&u32, &Vec<usize>)> = class_rows.iter().filter(|(_, rows)| rows.len() >= per_class).collect();
    if eligible.len() < config.n_way {
        return Err(TeamError::Sampling(format!(
            "need {} classes with at least {per_class} examples each, found {} (of {} labeled classes)",
            config.n_way,
            eligible.len(),
            class_rows.len()
        )));
    }

    let chosen = index::sample(rng, eligible.len(), config.n_way);
    let mut support = Vec::with_capacity(config.n_way * config.k_shot);
    let mut query = Vec::with_capacity(config.n_queries());
    let mut labels = Vec::with_capacity(config.n_way);
    for (class, pick) in chosen.iter().enumerate() {
        let (label, rows) = eligible[pick];
        labels.push(*label);
        let draw = index::sample(rng, rows.len(), per_class);
        for (slot, i) in draw.iter().enumerate() {
            let row = rows[i];
            let item = EpisodeItem {
                x: dataset.records()[row].to_dvector(),
                class,
                row: Some(row),
            };
            if slot < config.k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok((
        Episode {
            n_way: config.n_way,
            support,
            query,
            unlabeled: Vec::new(),
        },
        labels,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemiSplitConfig {
    pub labeled_fraction: f64,
    pub split_seed: u64,
}

impl SemiSplitConfig {
    pub fn new(labeled_fraction: f64, split_seed: u64) -> Self {
        Self {
            labeled_fraction,
            split_seed,
        }
    }
}

/// A fixed per-class partition of dataset rows into labeled and unlabeled
/// parts. Both parts list rows in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemiSplit {
    labeled: BTreeMap<u32, Vec<usize>>,
    unlabeled: BTreeMap<u32, Vec<usize>>,
}

impl SemiSplit {
    pub fn new(dataset: &Dataset, config: &SemiSplitConfig) -> Result<Self> {
        let frac = config.labeled_fraction;
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(TeamError::Parameter(format!("labeled_fraction must lie in (0, 1], got {frac}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.split_seed);
        let mut labeled = BTreeMap::new();
        let mut unlabeled = BTreeMap::new();
        for (label, mut rows) in dataset.class_index() {
            let n_labeled = ((frac * rows.len() as f64).round() as usize).min(rows.len());
            rows.shuffle(&mut rng);
            let mut lab = rows[..n_labeled].to_vec();
            let mut unl = rows[n_labeled..].to_vec();
            lab.sort_unstable();
            unl.sort_unstable();
            labeled.insert(label, lab);
            unlabeled.insert(label, unl);
        }
        Ok(Self { labeled, unlabeled })
    }

    pub fn labeled(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.unlabeled
    }
}

/// Samples support and query from the labeled partition only, and attaches
/// `unlabeled_per_episode` points drawn from the unlabeled partition of the
/// episode's own classes.
pub fn sample_semi_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    config: &EpisodeConfig,
    split: &SemiSplit,
    unlabeled_per_episode: usize,
    rng: &mut R,
) -> Result<Episode> {
    let (mut episode, labels) = sample_from_index(dataset, &split.labeled, config, rng)?;
    if unlabeled_per_episode == 0 {
        return Ok(episode);
    }
    let pool: Vec<usize> = labels
        .iter()
        .flat_map(|l| split.unlabeled.get(l).into_iter().flatten().copied())
        .collect();
    if pool.is_empty() {
        return Err(TeamError::Sampling(format!(
            "unlabeled partition of the selected classes is empty but {unlabeled_per_episode} points were requested"
        )));
    }
    if pool.len() < unlabeled_per_episode {
        return Err(TeamError::Sampling(format!(
            "requested {unlabeled_per_episode} unlabeled points, only {} available in the selected classes",
            pool.len()
        )));
    }
    episode.unlabeled = index::sample(rng, pool.len(), unlabeled_per_episode)
        .iter()
        .map(|i| UnlabeledItem {
            x: dataset.records()[pool[i]].to_dvector(),
            row: Some(pool[i]),
        })
        .collect();
    Ok(episode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EmbeddingVector;
    use std::collections::HashSet;

    fn grid_dataset(classes: u32, per_class: usize) -> Dataset {
        let mut recs = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                recs.push(EmbeddingVector::labeled(vec![c as f64, i as f64], c));
            }
        }
        Dataset::new(recs).unwrap()
    }

    #[test]
    fn forced_partition_uses_every_sample() {
        let ds = grid_dataset(3, 5);
        let cfg = EpisodeConfig::new(3, 2, 3, 0);
        let ep = sample_episode(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        ep.validate().unwrap();
        let rows: HashSet<usize> = ep.support.iter().chain(&ep.query).filter_map(|i| i.row).collect();
        assert_eq!(rows.len(), 15);
    }

    #[test]
    fn same_seed_same_episode() {
        let ds = grid_dataset(10, 20);
        let cfg = EpisodeConfig::new(5, 3, 4, 0);
        let a = sample_episode(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_episode(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        let c = sample_episode(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn support_is_balanced_and_disjoint_from_query() {
        let ds = grid_dataset(8, 12);
        let cfg = EpisodeConfig::new(4, 3, 5, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let ep = sample_episode(&ds, &cfg, &mut rng).unwrap();
            ep.validate().unwrap();
            assert_eq!(ep.support.len(), 12);
            assert_eq!(ep.query.len(), 20);
            for c in 0..4 {
                assert_eq!(ep.support.iter().filter(|s| s.class == c).count(), 3);
            }
            // All members of one episode class share one dataset label.
            for c in 0..4 {
                let labels: HashSet<_> = ep
                    .support
                    .iter()
                    .chain(&ep.query)
                    .filter(|s| s.class == c)
                    .map(|s| ds.records()[s.row.unwrap()].label)
                    .collect();
                assert_eq!(labels.len(), 1);
            }
        }
    }

    #[test]
    fn insufficient_classes_error() {
        let ds = grid_dataset(3, 4);
        let err = sample_episode(&ds, &EpisodeConfig::new(4, 1, 1, 0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("need 4 classes"), "{err}");
        let err = sample_episode(&ds, &EpisodeConfig::new(2, 3, 2, 0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, TeamError::Sampling(_)));
    }

    #[test]
    fn uniform_class_selection() {
        let ds = grid_dataset(20, 3);
        let cfg = EpisodeConfig::new(5, 1, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 20];
        let draws = 10_000;
        for _ in 0..draws {
            let ep = sample_episode(&ds, &cfg, &mut rng).unwrap();
            for s in &ep.support {
                counts[ds.records()[s.row.unwrap()].label.unwrap() as usize] += 1;
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            let freq = n as f64 / draws as f64;
            assert!((freq - 0.25).abs() <= 0.02, "class {c}: {freq}");
        }
    }

    #[test]
    fn full_labeled_split_matches_plain_sampler() {
        let ds = grid_dataset(7, 9);
        let cfg = EpisodeConfig::new(3, 2, 2, 0);
        let split = SemiSplit::new(&ds, &SemiSplitConfig::new(1.0, 99)).unwrap();
        for seed in 0..20 {
            let a = sample_episode(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = sample_semi_episode(&ds, &cfg, &split, 0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn forty_sixty_split() {
        let ds = grid_dataset(4, 100);
        let split = SemiSplit::new(&ds, &SemiSplitConfig::new(0.4, 5)).unwrap();
        for (label, lab) in split.labeled() {
            let unl = &split.unlabeled()[label];
            assert_eq!(lab.len(), 40);
            assert_eq!(unl.len(), 60);
            let a: HashSet<_> = lab.iter().collect();
            assert!(unl.iter().all(|r| !a.contains(r)));
        }
    }

    #[test]
    fn split_partitions_are_disjoint_and_deterministic() {
        let ds = grid_dataset(6, 37);
        for seed in 0..10 {
            let cfg = SemiSplitConfig::new(0.4, seed);
            let split = SemiSplit::new(&ds, &cfg).unwrap();
            let lab: HashSet<usize> = split.labeled().values().flatten().copied().collect();
            let unl: HashSet<usize> = split.unlabeled().values().flatten().copied().collect();
            assert!(lab.is_disjoint(&unl));
            assert_eq!(lab.len() + unl.len(), ds.len());
            assert_eq!(split, SemiSplit::new(&ds, &cfg).unwrap());
        }
    }

    #[test]
    fn semi_episode_draws_from_the_right_partitions() {
        let ds = grid_dataset(10, 50);
        let split = SemiSplit::new(&ds, &SemiSplitConfig::new(0.4, 1)).unwrap();
        let lab: HashSet<usize> = split.labeled().values().flatten().copied().collect();
        let cfg = EpisodeConfig::new(5, 1, 15, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let ep = sample_semi_episode(&ds, &cfg, &split, 30, &mut rng).unwrap();
            assert!(ep.support.iter().chain(&ep.query).all(|i| lab.contains(&i.row.unwrap())));
            assert_eq!(ep.unlabeled.len(), 30);
            let episode_labels: HashSet<_> =
                ep.support.iter().map(|s| ds.records()[s.row.unwrap()].label).collect();
            for u in &ep.unlabeled {
                let r = u.row.unwrap();
                assert!(!lab.contains(&r));
                assert!(episode_labels.contains(&ds.records()[r].label));
            }
        }
    }

    #[test]
    fn empty_unlabeled_partition_errors() {
        let ds = grid_dataset(4, 10);
        let split = SemiSplit::new(&ds, &SemiSplitConfig::new(1.0, 1)).unwrap();
        let err = sample_semi_episode(&ds, &EpisodeConfig::new(2, 1, 1, 0), &split, 5, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(err.to_string().contains("empty"));
    }
}

//! Task internal mixing: label-preserving convex combinations of support
//! points within one episode, switched on and off by an episode schedule.

use nalgebra::DVector;
use rand::Rng;

use crate::data::{EmbeddingVector, Episode, EpisodeItem};
use crate::error::{Result, TeamError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimConfig {
    /// Lower bound of the mixing weight interval.
    pub low: f64,
    pub high: f64,
    pub mixes_per_instance: usize,
    pub warmup_episodes: usize,
    /// Episodes with mixing on per cycle.
    pub on_episodes: usize,
    /// Episodes with mixing off per cycle.
    pub off_episodes: usize,
}

impl Default for TimConfig {
    fn default() -> Self {
        Self {
            low: 0.5,
            high: 1.0,
            mixes_per_instance: 2,
            warmup_episodes: 5000,
            on_episodes: 4,
            off_episodes: 1,
        }
    }
}

impl TimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5 <= self.low && self.low < self.high && self.high <= 1.0) {
            return Err(TeamError::Parameter(format!(
                "mixing interval must satisfy 0.5 <= low < high <= 1, got [{}, {}]",
                self.low, self.high
            )));
        }
        if self.mixes_per_instance == 0 || self.on_episodes == 0 {
            return Err(TeamError::Parameter("mixes_per_instance and on_episodes must be positive".into()));
        }
        Ok(())
    }

    /// Whether mixing applies at `episode_index`.
    pub fn is_active(&self, episode_index: usize) -> bool {
        if episode_index < self.warmup_episodes {
            return false;
        }
        let cycle = self.on_episodes + self.off_episodes;
        (episode_index - self.warmup_episodes) % cycle < self.on_episodes
    }

    /// Draws a mixing weight in (0.5, high), resampling the excluded 0.5.
    fn draw_omega<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let w = rng.random_range(self.low..self.high);
            if w > 0.5 {
                return w;
            }
        }
    }
}

fn check_omega(omega: f64) -> Result<()> {
    if omega > 0.5 && omega <= 1.0 {
        Ok(())
    } else {
        Err(TeamError::Parameter(format!("mixing weight must lie in (0.5, 1], got {omega}")))
    }
}

/// `omega * x_i + (1 - omega) * x_j`, keeping `x_i`'s label.
pub fn mix_pair(x_i: &EmbeddingVector, x_j: &EmbeddingVector, omega: f64) -> Result<EmbeddingVector> {
    check_omega(omega)?;
    if x_i.dim() != x_j.dim() {
        return Err(TeamError::Parameter(format!("cannot mix dimensions {} and {}", x_i.dim(), x_j.dim())));
    }
    let values = x_i
        .values
        .iter()
        .zip(&x_j.values)
        .map(|(a, b)| omega * a + (1.0 - omega) * b)
        .collect();
    Ok(EmbeddingVector::new(values, x_i.label))
}

fn mix_vectors(a: &DVector<f64>, b: &DVector<f64>, omega: f64) -> DVector<f64> {
    a * omega + b * (1.0 - omega)
}

/// Returns the episode with its support replaced by mixed instances when the
/// schedule is active at `episode_index`, or an unchanged clone otherwise.
/// Query and unlabeled points are never touched.
pub fn augment_episode<R: Rng + ?Sized>(
    episode: &Episode,
    cfg: &TimConfig,
    episode_index: usize,
    rng: &mut R,
) -> Result<Episode> {
    cfg.validate()?;
    if !cfg.is_active(episode_index) || episode.support.is_empty() {
        return Ok(episode.clone());
    }
    let n = episode.support.len();
    let mut support = Vec::with_capacity(n * cfg.mixes_per_instance);
    for item in &episode.support {
        for _ in 0..cfg.mixes_per_instance {
            let partner = &episode.support[rng.random_range(0..n)];
            let omega = cfg.draw_omega(rng);
            support.push(EpisodeItem {
                x: mix_vectors(&item.x, &partner.x, omega),
                class: item.class,
                row: None,
            });
        }
    }
    Ok(Episode {
        support,
        ..episode.clone()
    })
}

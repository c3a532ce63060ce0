//! Parametric Gaussian-cluster datasets for desk-scale experiments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::{Dataset, EmbeddingVector};
use crate::error::{Result, TeamError};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Standard deviation of the per-class means along each signal dimension.
    pub class_sep: f64,
    /// Per-dimension noise standard deviation, length `dim`.
    pub noise_aniso: Vec<f64>,
    /// The trailing `nuisance_dims` dimensions carry no class signal.
    pub nuisance_dims: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// The default anisotropic benchmark: 20 classes, 8 signal dimensions
    /// with unit noise, 8 nuisance dimensions with noise std 3.
    pub fn an16() -> Self {
        let mut noise = vec![1.0; 8];
        noise.extend([3.0; 8]);
        Self {
            n_classes: 20,
            dim: 16,
            per_class: 200,
            class_sep: 3.0,
            noise_aniso: noise,
            nuisance_dims: 8,
            seed: 7,
        }
    }

    pub fn isotropic(n_classes: usize, dim: usize, per_class: usize, class_sep: f64, seed: u64) -> Self {
        Self {
            n_classes,
            dim,
            per_class,
            class_sep,
            noise_aniso: vec![1.0; dim],
            nuisance_dims: 0,
            seed,
        }
    }

    pub fn signal_dims(&self) -> usize {
        self.dim - self.nuisance_dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.dim == 0 || self.per_class == 0 {
            return Err(TeamError::Parameter("n_classes, dim and per_class must be positive".into()));
        }
        if self.nuisance_dims >= self.dim {
            return Err(TeamError::Parameter(format!(
                "nuisance_dims ({}) must be smaller than dim ({})",
                self.nuisance_dims, self.dim
            )));
        }
        if self.noise_aniso.len() != self.dim {
            return Err(TeamError::Parameter(format!(
                "noise_aniso has {} entries, expected {}",
                self.noise_aniso.len(),
                self.dim
            )));
        }
        if self.noise_aniso.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(TeamError::Parameter("noise stds must be positive".into()));
        }
        if !(self.class_sep >= 0.0 && self.class_sep.is_finite()) {
            return Err(TeamError::Parameter("class_sep must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-class means, `n_classes` rows of length `dim` (nuisance coordinates zero).
pub fn class_means(cfg: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(draw_means(cfg, &mut rng))
}

fn draw_means(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let signal = cfg.signal_dims();
    (0..cfg.n_classes)
        .map(|_| {
            (0..cfg.dim)
                .map(|j| {
                    if j < signal {
                        let z: f64 = StandardNormal.sample(rng);
                        cfg.class_sep * z
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Generates `per_class` points per class, classes in label order.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = draw_means(cfg, &mut rng);
    let noise: Vec<Normal<f64>> = cfg
        .noise_aniso
        .iter()
        .map(|&s| Normal::new(0.0, s).expect("validated std"))
        .collect();
    let mut records = Vec::with_capacity(cfg.n_classes * cfg.per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let values = mean.iter().zip(&noise).map(|(m, n)| m + n.sample(&mut rng)).collect();
            records.push(EmbeddingVector::labeled(values, label as u32));
        }
    }
    Dataset::new(records)
}

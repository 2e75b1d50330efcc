//! Synthetic labeled data: Gaussian class blobs in [0, 1]^D, with a paired
//! shifted variant standing in for deployment-time distribution shift.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sub_stream;
use crate::tensor::Tensor;

/// Base cluster scale; class means sit `separation * SIGMA` apart.
pub const SIGMA: f64 = 0.05;
/// Global mean displacement added per severity level.
pub const SHIFT_PER_SEVERITY: f64 = 0.04;
/// Extra noise scale added per severity level.
pub const NOISE_PER_SEVERITY: f64 = 0.012;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub separation: f64,
    pub severity: u8,
    pub seed: u64,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("DataConfig", "need at least 2 classes"));
        }
        if self.dim < 4 {
            return Err(Error::invalid("DataConfig", "need dim >= 4"));
        }
        if self.dim < self.classes {
            return Err(Error::invalid("DataConfig", "dim must be >= classes"));
        }
        if self.severity > 5 {
            return Err(Error::invalid("DataConfig", "severity must be in 0..=5"));
        }
        if self.n_per_class == 0 {
            return Err(Error::invalid("DataConfig", "n_per_class must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// New dataset from a subset of row indices.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.x.row_to_vec(i)).collect();
        Dataset {
            x: Tensor::from_rows(&rows).expect("uniform rows"),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Orthonormal class-mean directions via Gram-Schmidt on Gaussian draws.
fn orthonormal_directions(classes: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while dirs.len() < classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for d in &dirs {
            let proj: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            for (vi, di) in v.iter_mut().zip(d) {
                *vi -= proj * di;
            }
        }
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            dirs.push(v);
        }
    }
    dirs
}

/// Generate the paired (clean, shifted) blob datasets.
///
/// The shifted set reuses the clean draw and adds a severity-scaled global
/// mean displacement plus inflated noise; severity 0 reproduces the clean
/// set exactly. Values are clamped into [0, 1].
pub fn make_blobs(config: &DataConfig) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let mut rng = sub_stream(config.seed, "data");
    let dirs = orthonormal_directions(config.classes, config.dim, &mut rng);
    let radius = config.separation * SIGMA / 2.0_f64.sqrt();

    let shift_dir = {
        let mut v: Vec<f64> = (0..config.dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        v
    };
    let sev = config.severity as f64;
    let shift = SHIFT_PER_SEVERITY * sev;
    let extra_noise = NOISE_PER_SEVERITY * sev;

    let n = config.classes * config.n_per_class;
    let mut clean_rows = Vec::with_capacity(n);
    let mut shifted_rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..config.classes {
        for _ in 0..config.n_per_class {
            let g: Vec<f64> = (0..config.dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            // drawn unconditionally so severity only scales, never reorders, the stream
            let g2: Vec<f64> = (0..config.dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let mut clean = vec![0.0; config.dim];
            let mut shifted = vec![0.0; config.dim];
            for j in 0..config.dim {
                let base = 0.5 + radius * dirs[class][j] + SIGMA * g[j];
                clean[j] = base.clamp(0.0, 1.0);
                shifted[j] = (base + shift * shift_dir[j] + extra_noise * g2[j]).clamp(0.0, 1.0);
            }
            clean_rows.push(clean);
            shifted_rows.push(shifted);
            labels.push(class);
        }
    }

    let clean = Dataset {
        x: Tensor::from_rows(&clean_rows)?,
        y: labels.clone(),
        classes: config.classes,
    };
    let shifted = Dataset {
        x: Tensor::from_rows(&shifted_rows)?,
        y: labels,
        classes: config.classes,
    };
    Ok((clean, shifted))
}

/// Split indices per class, interleaved so both halves stay stratified.
pub fn stratified_split(
    ds: &Dataset,
    first_fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for class in 0..ds.classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.y[i] == class).collect();
        shuffle(&mut idx, rng);
        let cut = ((idx.len() as f64) * first_fraction).round() as usize;
        first.extend_from_slice(&idx[..cut]);
        second.extend_from_slice(&idx[cut..]);
    }
    (first, second)
}

/// Fisher-Yates with the caller's RNG, for reproducible shuffles.
pub fn shuffle(idx: &mut [usize], rng: &mut impl Rng) {
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
}

/// Draw `n` indices spread as evenly as possible across classes.
pub fn sample_stratified(
    pool: &[usize],
    labels: &[usize],
    classes: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in pool {
        by_class[labels[i]].push(i);
    }
    for bucket in by_class.iter_mut() {
        shuffle(bucket, rng);
    }
    let mut out = Vec::with_capacity(n);
    let mut round = 0;
    while out.len() < n {
        let mut progressed = false;
        for bucket in &by_class {
            if out.len() == n {
                break;
            }
            if let Some(&i) = bucket.get(round) {
                out.push(i);
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
        round += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(severity: u8, seed: u64) -> DataConfig {
        DataConfig {
            classes: 3,
            dim: 16,
            n_per_class: 40,
            separation: 6.0,
            severity,
            seed,
        }
    }

    #[test]
    fn severity_zero_matches_clean() {
        let (clean, shifted) = make_blobs(&cfg(0, 11)).unwrap();
        assert_eq!(clean, shifted);
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let (c1, s1) = make_blobs(&cfg(3, 42)).unwrap();
        let (c2, s2) = make_blobs(&cfg(3, 42)).unwrap();
        assert_eq!(c1.x.bits(), c2.x.bits());
        assert_eq!(s1.x.bits(), s2.x.bits());
    }

    #[test]
    fn values_live_in_unit_interval() {
        let (clean, shifted) = make_blobs(&cfg(5, 7)).unwrap();
        for &v in clean.x.data().iter().chain(shifted.x.data()) {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn severity_scales_displacement() {
        let (clean, s1) = make_blobs(&cfg(1, 5)).unwrap();
        let (_, s5) = make_blobs(&cfg(5, 5)).unwrap();
        let mean_shift = |a: &Dataset, b: &Dataset| {
            a.x.data()
                .iter()
                .zip(b.x.data())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / a.x.len() as f64
        };
        assert!(mean_shift(&clean, &s5) > mean_shift(&clean, &s1));
    }

    #[test]
    fn stratified_sampling_spreads_classes() {
        let (clean, _) = make_blobs(&cfg(0, 3)).unwrap();
        let pool: Vec<usize> = (0..clean.len()).collect();
        let mut rng = crate::rng::sub_stream(1, "test");
        let picked = sample_stratified(&pool, &clean.y, clean.classes, 9, &mut rng);
        assert_eq!(picked.len(), 9);
        for class in 0..3 {
            let count = picked.iter().filter(|&&i| clean.y[i] == class).count();
            assert_eq!(count, 3);
        }
    }

    #[test]
    fn select_preserves_rows() {
        let (clean, _) = make_blobs(&cfg(0, 9)).unwrap();
        let sub = clean.select(&[5, 17, 40]);
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.x.row(1), clean.x.row(17));
        assert_eq!(sub.y[2], clean.y[40]);
    }
}

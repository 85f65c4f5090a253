//! Synthetic kidney/tumor volumes with exact geometric ground truth.
//!
//! Each phantom holds one ellipsoidal "kidney" of intensity 1 with a
//! spherical, brighter "tumor" (intensity 2) fully inside it, on a zero
//! background. Edges are softened over about one voxel and Gaussian noise is
//! added; labels come straight from the geometry.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::volcore::{Dims, LabelMap, Spacing, Volume, KIDNEY, TUMOR};

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub spacing: Spacing,
    pub count: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub kidney_level: f32,
    pub tumor_level: f32,
}

impl PhantomConfig {
    pub fn new(dims: Dims, count: usize, seed: u64) -> Self {
        PhantomConfig {
            dims,
            spacing: Spacing::isotropic_unit(),
            count,
            seed,
            noise_sigma: 0.1,
            kidney_level: 1.0,
            tumor_level: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub id: String,
    pub image: Volume,
    pub labels: LabelMap,
}

/// Smooth 0..1 step: 1 well inside (`signed < 0`), 0 well outside.
fn soft_inside(signed_dist: f64) -> f64 {
    1.0 / (1.0 + (signed_dist * 4.0).exp())
}

/// Seed for case `index`, decorrelated from neighbouring indices.
pub fn case_seed(master: u64, index: usize) -> u64 {
    SplitMix64::seed_from_u64(master ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).random()
}

pub fn generate_one(config: &PhantomConfig, index: usize) -> Result<Phantom> {
    let d = config.dims;
    if d.w < 8 || d.h < 8 || d.d < 6 {
        return Err(Error::invalid(format!("phantom dims {d} too small, need at least 8x8x6")));
    }
    let mut rng = SplitMix64::seed_from_u64(case_seed(config.seed, index));
    let ext = [d.w as f64, d.h as f64, d.d as f64];
    let max_r = ext.map(|e| (e / 2.0 - 1.0).max(2.0));
    // kidney semi-axes in voxels, then a center that keeps it inside
    let radii: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.55 * max_r[a]..0.85 * max_r[a]));
    let center: [f64; 3] = std::array::from_fn(|a| {
        let lo = radii[a] + 0.5;
        let hi = ext[a] - 1.0 - radii[a] - 0.5;
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            (ext[a] - 1.0) / 2.0
        }
    });
    let min_radius = radii.iter().cloned().fold(f64::INFINITY, f64::min);
    let tumor_r = rng.random_range(0.45 * min_radius..0.65 * min_radius).max(1.5);
    // tumor center within the kidney, far enough from its surface
    let room = (min_radius - tumor_r - 0.5).max(0.0);
    let offset: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0) * room / 3f64.sqrt());
    let tumor_c: [f64; 3] = std::array::from_fn(|a| center[a] + offset[a]);

    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut image = Vec::with_capacity(d.len());
    let mut labels = Vec::with_capacity(d.len());
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                let p = [x as f64, y as f64, z as f64];
                // approximate signed distance to the ellipsoid surface, in voxels
                let q = ((0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum::<f64>()).sqrt();
                let kidney_sd = (q - 1.0) * min_radius;
                let tumor_sd = (0..3).map(|a| (p[a] - tumor_c[a]).powi(2)).sum::<f64>().sqrt() - tumor_r;
                let k = soft_inside(kidney_sd);
                let t = soft_inside(tumor_sd);
                let level = config.kidney_level as f64 * k + (config.tumor_level - config.kidney_level) as f64 * t;
                image.push((level + noise.sample(&mut rng)) as f32);
                labels.push(if tumor_sd < 0.0 {
                    TUMOR
                } else if kidney_sd < 0.0 {
                    KIDNEY
                } else {
                    0
                });
            }
        }
    }
    Ok(Phantom {
        id: format!("phantom{index:03}"),
        image: Volume::new(d, config.spacing, image)?,
        labels: LabelMap::new(d, config.spacing, labels)?,
    })
}

pub fn generate(config: &PhantomConfig) -> Result<Vec<Phantom>> {
    (0..config.count).map(|i| generate_one(config, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volcore::count_foreground;

    #[test]
    fn phantoms_are_deterministic_and_nonempty() {
        let cfg = PhantomConfig::new(Dims::new(16, 16, 8), 5, 3);
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        for p in &a {
            let tumor = count_foreground(&p.labels.tumor_mask());
            let whole = count_foreground(&p.labels.whole_mask());
            assert!(tumor >= 8, "{}: tumor {tumor}", p.id);
            assert!(whole > tumor);
            assert!(p.labels.tumor_mask().is_subset_of(&p.labels.whole_mask()));
        }
        assert_ne!(a[0].labels, a[1].labels);
    }

    #[test]
    fn tumor_is_brighter_than_kidney_on_average() {
        let p = generate_one(&PhantomConfig::new(Dims::new(16, 16, 8), 1, 9), 0).unwrap();
        let mean = |label: u8| {
            let v: Vec<f32> = p
                .image
                .data()
                .iter()
                .zip(p.labels.data())
                .filter(|(_, &l)| l == label)
                .map(|(&x, _)| x)
                .collect();
            v.iter().sum::<f32>() / v.len() as f32
        };
        assert!(mean(TUMOR) > mean(KIDNEY));
        assert!(mean(KIDNEY) > mean(0));
    }

    #[test]
    fn rejects_tiny_dims() {
        assert!(generate_one(&PhantomConfig::new(Dims::new(4, 4, 4), 1, 0), 0).is_err());
    }
}

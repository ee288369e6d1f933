//! Random-search hyperparameter draws.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Modality;
use crate::head::Architecture;
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Version {
    V1,
    V2,
}

/// Sampling ranges for one model version and modality.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub log10_lr: (f64, f64),
    pub log10_wd: (f64, f64),
    pub momentum: (f64, f64),
    pub top_k: Vec<usize>,
    pub architectures: Vec<Architecture>,
    pub heights: Vec<u32>,
}

const BASE_HEIGHTS: [u32; 5] = [1536, 1664, 1792, 1920, 2048];
const V2_FFDM_HEIGHTS: [u32; 7] = [2048, 2176, 2304, 2432, 2560, 2688, 2816];

impl SearchSpace {
    pub fn for_model(version: Version, modality: Modality) -> Self {
        match version {
            Version::V1 => SearchSpace {
                log10_lr: (-6.046, -5.456),
                log10_wd: (-3.523, -3.155),
                momentum: (0.80, 0.92),
                top_k: (4..=10).collect(),
                architectures: vec![Architecture::S, Architecture::M, Architecture::L, Architecture::X],
                heights: BASE_HEIGHTS.to_vec(),
            },
            Version::V2 => SearchSpace {
                log10_lr: (-6.046, -5.398),
                log10_wd: (-3.523, -3.260),
                momentum: (0.80, 0.92),
                top_k: (5..=9).collect(),
                architectures: vec![Architecture::L, Architecture::X],
                heights: if modality == Modality::Ffdm {
                    V2_FFDM_HEIGHTS.to_vec()
                } else {
                    BASE_HEIGHTS.to_vec()
                },
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HparamSample {
    pub version: Version,
    pub modality: Modality,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub top_k: usize,
    pub architecture: Architecture,
    pub image_height: u32,
}

pub fn sample_one<R: Rng + ?Sized>(version: Version, modality: Modality, rng: &mut R) -> HparamSample {
    let space = SearchSpace::for_model(version, modality);
    let lr = rng.random_range(space.log10_lr.0..=space.log10_lr.1);
    let wd = rng.random_range(space.log10_wd.0..=space.log10_wd.1);
    HparamSample {
        version,
        modality,
        learning_rate: 10f64.powf(lr),
        weight_decay: 10f64.powf(wd),
        momentum: rng.random_range(space.momentum.0..=space.momentum.1),
        top_k: space.top_k[rng.random_range(0..space.top_k.len())],
        architecture: space.architectures[rng.random_range(0..space.architectures.len())],
        image_height: space.heights[rng.random_range(0..space.heights.len())],
    }
}

/// `n` independent configurations from one seeded stream.
pub fn hparam_sample(version: Version, modality: Modality, n: usize, seed: u64) -> Vec<HparamSample> {
    let mut rng = seeded(seed);
    (0..n).map(|_| sample_one(version, modality, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn v1_draws_stay_in_range() {
        let s = hparam_sample(Version::V1, Modality::Dbt, 10_000, 1);
        for h in &s {
            let l = h.learning_rate.log10();
            assert!((-6.046 - 1e-12..=-5.456 + 1e-12).contains(&l));
            let w = h.weight_decay.log10();
            assert!((-3.523 - 1e-12..=-3.155 + 1e-12).contains(&w));
            assert!((0.80..=0.92).contains(&h.momentum));
            assert!((4..=10).contains(&h.top_k));
        }
        let arch: BTreeSet<String> = s.iter().map(|h| format!("{:?}", h.architecture)).collect();
        assert_eq!(arch.len(), 4);
    }

    #[test]
    fn v2_sets() {
        let s = hparam_sample(Version::V2, Modality::Ffdm, 2000, 2);
        assert!(s
            .iter()
            .all(|h| matches!(h.architecture, Architecture::L | Architecture::X)));
        assert!(s.iter().all(|h| (5..=9).contains(&h.top_k)));
        let heights: BTreeSet<u32> = s.iter().map(|h| h.image_height).collect();
        assert_eq!(heights, V2_FFDM_HEIGHTS.into_iter().collect());
        let c = hparam_sample(Version::V2, Modality::Cview, 500, 2);
        assert!(c.iter().all(|h| BASE_HEIGHTS.contains(&h.image_height)));
    }

    #[test]
    fn same_seed_same_config() {
        assert_eq!(
            hparam_sample(Version::V1, Modality::Ffdm, 5, 9),
            hparam_sample(Version::V1, Modality::Ffdm, 5, 9)
        );
        assert_ne!(
            hparam_sample(Version::V1, Modality::Ffdm, 5, 9),
            hparam_sample(Version::V1, Modality::Ffdm, 5, 10)
        );
    }
}

//! Seeded synthetic datasets: two moons and the Two-Smiles benchmark (two
//! moons plus tight in-distribution clusters labelled against their
//! surroundings, plus test-only outlier clusters).
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)`, with one
//! stream per purpose (0: moon noise, 1: split shuffles, 2: clusters, 3:
//! outliers). Normal draws use the Box-Muller transform and consume two
//! uniforms per 2-d point: `r = sqrt(-2 ln(1 - u1))`, `(r cos 2πu2, r sin 2πu2)`.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureDataset, OOD_LABEL};
use crate::error::{Error, Result};

const STREAM_MOONS: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_CLUSTERS: u64 = 2;
const STREAM_OOD: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Two independent standard normal draws.
fn normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (2.0 * PI * u2).sin_cos();
    (r * c, r * s)
}

fn linspace_angle(i: usize, count: usize) -> f64 {
    if count <= 1 {
        0.0
    } else {
        PI * i as f64 / (count - 1) as f64
    }
}

/// Interleaving half circles. Class 0 gets `n / 2` points on
/// `(cos t, sin t)`, class 1 the remaining `n - n / 2` on
/// `(1 - cos t, 0.5 - sin t)`, with `t` evenly spaced over `[0, pi]`.
pub fn make_two_moons(n: usize, noise: f64, seed: u64) -> Result<FeatureDataset> {
    if n < 2 {
        return Err(Error::InvalidConfig(
            "two moons needs at least 2 points".into(),
        ));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidConfig("noise must be nonnegative".into()));
    }
    let n0 = n / 2;
    let n1 = n - n0;
    let mut rng = stream(seed, STREAM_MOONS);
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let (px, py, label) = if i < n0 {
            let t = linspace_angle(i, n0);
            (t.cos(), t.sin(), 0)
        } else {
            let t = linspace_angle(i - n0, n1);
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        let (e0, e1) = normal_pair(&mut rng);
        x[[i, 0]] = px + noise * e0;
        x[[i, 1]] = py + noise * e1;
        y.push(label);
    }
    Ok(FeatureDataset {
        ids: (0..n).map(|i| format!("moon-{i:05}")).collect(),
        features: x,
        y_true: y,
        num_classes: 2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianCluster {
    pub center: (f64, f64),
    pub label: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSmilesConfig {
    pub n_moons: usize,
    pub moon_noise: f64,
    /// Added to every split.
    pub clusters: Vec<GaussianCluster>,
    /// Points per cluster per split.
    pub cluster_n: usize,
    pub cluster_std: f64,
    /// Test-only outlier centers.
    pub ood_centers: Vec<(f64, f64)>,
    /// Points per outlier center.
    pub ood_n: usize,
    pub ood_std: f64,
    /// Train / validation / test share of the moon points, per class.
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

impl Default for TwoSmilesConfig {
    fn default() -> Self {
        TwoSmilesConfig {
            n_moons: 6000,
            moon_noise: 0.1,
            clusters: vec![
                GaussianCluster {
                    center: (0.0, 1.5),
                    label: 1,
                },
                GaussianCluster {
                    center: (1.0, -1.0),
                    label: 0,
                },
            ],
            cluster_n: 150,
            cluster_std: 0.1,
            ood_centers: vec![(2.0, 2.0), (-1.0, -1.5)],
            ood_n: 750,
            ood_std: 0.1,
            split_fractions: [0.275, 0.275, 0.45],
            seed: 0,
        }
    }
}

impl TwoSmilesConfig {
    fn validate(&self) -> Result<()> {
        let sum: f64 = self.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split_fractions.iter().any(|&f| f < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "split fractions must be nonnegative and sum to 1, got {:?}",
                self.split_fractions
            )));
        }
        if !(self.moon_noise >= 0.0 && self.cluster_std >= 0.0 && self.ood_std >= 0.0) {
            return Err(Error::InvalidConfig(
                "standard deviations must be nonnegative".into(),
            ));
        }
        if self.clusters.iter().any(|c| !(0..2).contains(&c.label)) {
            return Err(Error::InvalidConfig("cluster labels must be 0 or 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: FeatureDataset,
    pub val: FeatureDataset,
    pub test: FeatureDataset,
}

#[derive(Default)]
struct Builder {
    ids: Vec<String>,
    rows: Vec<[f64; 2]>,
    y: Vec<i64>,
}

impl Builder {
    fn push(&mut self, id: String, p: [f64; 2], label: i64) {
        self.ids.push(id);
        self.rows.push(p);
        self.y.push(label);
    }

    fn finish(self) -> FeatureDataset {
        let n = self.rows.len();
        FeatureDataset {
            ids: self.ids,
            features: Array2::from_shape_vec((n, 2), self.rows.concat()).expect("n x 2"),
            y_true: self.y,
            num_classes: 2,
        }
    }
}

/// Builds the train / validation / test splits. Moon points are split per
/// class, so every split keeps the class balance; rows keep their original
/// moon order, followed by cluster points and (test only) outliers.
pub fn make_two_smiles(cfg: &TwoSmilesConfig) -> Result<Splits> {
    cfg.validate()?;
    let moons = make_two_moons(cfg.n_moons, cfg.moon_noise, cfg.seed)?;

    let mut split_rng = stream(cfg.seed, STREAM_SPLIT);
    let mut assignment = vec![0usize; moons.len()];
    for class in 0..2 {
        let mut members: Vec<usize> = (0..moons.len())
            .filter(|&i| moons.y_true[i] == class)
            .collect();
        members.shuffle(&mut split_rng);
        let n = members.len();
        let n_train = (cfg.split_fractions[0] * n as f64).round() as usize;
        let n_val = ((cfg.split_fractions[1] * n as f64).round() as usize).min(n - n_train);
        for (k, &i) in members.iter().enumerate() {
            assignment[i] = if k < n_train {
                0
            } else if k < n_train + n_val {
                1
            } else {
                2
            };
        }
    }

    let names = ["train", "val", "test"];
    let mut builders: [Builder; 3] = Default::default();
    for (i, &split) in assignment.iter().enumerate() {
        let p = moons.features.row(i);
        builders[split].push(
            format!("{}-{}", names[split], moons.ids[i]),
            [p[0], p[1]],
            moons.y_true[i],
        );
    }

    let mut cluster_rng = stream(cfg.seed, STREAM_CLUSTERS);
    for (split, b) in builders.iter_mut().enumerate() {
        for (k, cl) in cfg.clusters.iter().enumerate() {
            for j in 0..cfg.cluster_n {
                let (e0, e1) = normal_pair(&mut cluster_rng);
                b.push(
                    format!("{}-cluster{k}-{j:04}", names[split]),
                    [
                        cl.center.0 + cfg.cluster_std * e0,
                        cl.center.1 + cfg.cluster_std * e1,
                    ],
                    cl.label,
                );
            }
        }
    }

    let mut ood_rng = stream(cfg.seed, STREAM_OOD);
    for (k, c) in cfg.ood_centers.iter().enumerate() {
        for j in 0..cfg.ood_n {
            let (e0, e1) = normal_pair(&mut ood_rng);
            builders[2].push(
                format!("test-ood{k}-{j:04}"),
                [c.0 + cfg.ood_std * e0, c.1 + cfg.ood_std * e1],
                OOD_LABEL,
            );
        }
    }

    let [train, val, test] = builders.map(Builder::finish);
    Ok(Splits { train, val, test })
}

/// Whether an id produced by [`make_two_smiles`] belongs to an in-distribution
/// cluster.
pub fn is_cluster_id(id: &str) -> bool {
    id.contains("-cluster")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_endpoints() {
        let m = make_two_moons(10, 0.0, 1).unwrap();
        assert_eq!(m.features.row(0).to_vec(), vec![1.0, 0.0]);
        let last = m.features.row(9);
        assert!((last[0] - 2.0).abs() < 1e-15);
        assert!((last[1] - 0.5).abs() < 1e-15);
        assert_eq!(m.y_true[9], 1);
    }

    #[test]
    fn odd_count_gives_extra_point_to_class_one() {
        let m = make_two_moons(7, 0.1, 0).unwrap();
        assert_eq!(m.y_true.iter().filter(|&&y| y == 0).count(), 3);
        assert_eq!(m.y_true.iter().filter(|&&y| y == 1).count(), 4);
        assert!(make_two_moons(1, 0.1, 0).is_err());
    }

    #[test]
    fn default_moons_are_balanced_and_bounded() {
        let m = make_two_moons(6000, 0.1, 42).unwrap();
        assert_eq!(m.y_true.iter().filter(|&&y| y == 0).count(), 3000);
        for r in m.features.rows() {
            assert!((-1.6..=2.6).contains(&r[0]), "{r}");
            assert!((-1.1..=1.6).contains(&r[1]), "{r}");
        }
    }

    #[test]
    fn noise_is_roughly_standard() {
        let mut rng = stream(9, 0);
        let draws: Vec<f64> = (0..20000)
            .flat_map(|_| {
                let (a, b) = normal_pair(&mut rng);
                [a, b]
            })
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.03);
    }

    #[test]
    fn default_composition() {
        let s = make_two_smiles(&TwoSmilesConfig::default()).unwrap();
        let count = |d: &FeatureDataset, l: i64| d.y_true.iter().filter(|&&y| y == l).count();
        assert_eq!(s.test.len(), 4500);
        assert_eq!(count(&s.test, 1), 1500);
        assert_eq!(count(&s.test, 0), 1500);
        assert_eq!(count(&s.test, OOD_LABEL), 1500);
        assert_eq!(count(&s.train, OOD_LABEL), 0);
        assert_eq!(count(&s.val, OOD_LABEL), 0);
        assert_eq!(s.train.len(), 1650 + 300);
        assert_eq!(s.val.len(), 1650 + 300);
        assert_eq!(
            s.train.ids.iter().filter(|id| is_cluster_id(id)).count(),
            300
        );
    }

    #[test]
    fn splits_are_disjoint() {
        let s = make_two_smiles(&TwoSmilesConfig::default()).unwrap();
        let mut moon_ids: Vec<&str> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|d| d.ids.iter())
            .filter_map(|id| id.split_once('-').map(|(_, rest)| rest))
            .filter(|rest| rest.starts_with("moon"))
            .collect();
        let total = moon_ids.len();
        moon_ids.sort();
        moon_ids.dedup();
        assert_eq!(total, 6000);
        assert_eq!(moon_ids.len(), 6000);
    }

    #[test]
    fn disabling_outliers() {
        let s = make_two_smiles(&TwoSmilesConfig {
            ood_n: 0,
            ..TwoSmilesConfig::default()
        })
        .unwrap();
        for d in [&s.train, &s.val, &s.test] {
            assert!(d.y_true.iter().all(|&y| y >= 0));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = TwoSmilesConfig {
            seed: 17,
            ..TwoSmilesConfig::default()
        };
        assert_eq!(
            make_two_smiles(&cfg).unwrap(),
            make_two_smiles(&cfg).unwrap()
        );
        let other = make_two_smiles(&TwoSmilesConfig {
            seed: 18,
            ..cfg.clone()
        })
        .unwrap();
        assert_ne!(other, make_two_smiles(&cfg).unwrap());
    }

    #[test]
    fn bad_fractions() {
        let cfg = TwoSmilesConfig {
            split_fractions: [0.5, 0.5, 0.5],
            ..TwoSmilesConfig::default()
        };
        assert!(make_two_smiles(&cfg).is_err());
    }
}

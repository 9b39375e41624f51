//! Pseudo-labeled episode generation from unlabeled data.
//!
//! N anchors are drawn from a dataset (class labels ignored); each
//! anchor is augmented K times with distinct augmentation functions to
//! form the context, and queries are augmented anchors mixed with a
//! random external sample. Augmentations operate in embedding space.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{sample_distinct, DatasetRecord};
use crate::episodes::{Episode, EpisodeItem, EpisodeShape, Provenance};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    GaussianJitter,
    CoordinateMask,
    RandomScale,
    RandomRotation2Plane,
}

/// A parameterized stochastic vector transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    pub kind: AugKind,
    pub strength: f64,
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.strength < 0.0 {
            return Err(Error::Config("augmentation strength must be >= 0".into()));
        }
        if self.kind == AugKind::CoordinateMask && self.strength >= 1.0 {
            return Err(Error::Config("mask fraction must be in [0,1)".into()));
        }
        Ok(())
    }

    /// One stochastic application.
    pub fn apply(&self, x: &Array1<f32>, rng: &mut impl Rng) -> Array1<f32> {
        match self.kind {
            AugKind::GaussianJitter => {
                let mut out = x.clone();
                for v in out.iter_mut() {
                    let n: f64 = StandardNormal.sample(rng);
                    *v += (self.strength * n) as f32;
                }
                out
            }
            AugKind::CoordinateMask => {
                let mut out = x.clone();
                for v in out.iter_mut() {
                    if rng.gen::<f64>() < self.strength {
                        *v = 0.0;
                    }
                }
                out
            }
            AugKind::RandomScale => {
                let factor = 1.0 + self.strength * rng.gen_range(-1.0..=1.0);
                x.mapv(|v| (v as f64 * factor) as f32)
            }
            AugKind::RandomRotation2Plane => {
                let mut out = x.clone();
                if x.len() >= 2 && self.strength > 0.0 {
                    let i = rng.gen_range(0..x.len());
                    let mut j = rng.gen_range(0..x.len() - 1);
                    if j >= i {
                        j += 1;
                    }
                    let theta = rng.gen_range(-self.strength..=self.strength);
                    let (s, c) = theta.sin_cos();
                    let (a, b) = (out[i] as f64, out[j] as f64);
                    out[i] = (c * a - s * b) as f32;
                    out[j] = (s * a + c * b) as f32;
                }
                out
            }
        }
    }
}

/// Default embedding-space augmentation set, sized for K distinct draws.
pub fn default_augmentations(strength: f64) -> Vec<AugmentationSpec> {
    vec![
        AugmentationSpec {
            kind: AugKind::GaussianJitter,
            strength,
        },
        AugmentationSpec {
            kind: AugKind::GaussianJitter,
            strength: strength * 0.5,
        },
        AugmentationSpec {
            kind: AugKind::CoordinateMask,
            strength: 0.1,
        },
        AugmentationSpec {
            kind: AugKind::RandomScale,
            strength: 0.1,
        },
        AugmentationSpec {
            kind: AugKind::RandomRotation2Plane,
            strength: 0.2,
        },
    ]
}

/// Mixup coefficient configuration: Beta(alpha, beta) restricted to an
/// open interval by rejection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixupConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_range: (f64, f64),
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda_range: (0.0, 0.5),
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::Config("mixup alpha and beta must be > 0".into()));
        }
        let (lo, hi) = self.lambda_range;
        if !(0.0..1.0).contains(&lo) || hi > 1.0 || lo >= hi {
            return Err(Error::Config(format!(
                "lambda_range must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

const MAX_REJECTION_ATTEMPTS: usize = 100_000;

/// Draws lambda ~ Beta(alpha, beta) restricted to the open interval by
/// rejection; the returned value is strictly inside the range.
pub fn sample_lambda(cfg: &MixupConfig, rng: &mut impl Rng) -> Result<f64> {
    cfg.validate()?;
    let dist = Beta::new(cfg.alpha, cfg.beta)
        .map_err(|e| Error::Config(format!("invalid Beta parameters: {e}")))?;
    let (lo, hi) = cfg.lambda_range;
    for _ in 0..MAX_REJECTION_ATTEMPTS {
        let lam = dist.sample(rng);
        if lam > lo && lam < hi {
            return Ok(lam);
        }
    }
    Err(Error::Sampling(format!(
        "lambda rejection sampling exhausted {MAX_REJECTION_ATTEMPTS} attempts for range ({lo}, {hi})"
    )))
}

/// x_q = lambda * external + (1 - lambda) * anchor_aug.
pub fn mixup_query(anchor_aug: &Array1<f32>, external: &Array1<f32>, lam: f64) -> Result<Array1<f32>> {
    if anchor_aug.len() != external.len() {
        return Err(Error::Shape(format!(
            "mixup length mismatch: {} vs {}",
            anchor_aug.len(),
            external.len()
        )));
    }
    Ok(anchor_aug
        .iter()
        .zip(external.iter())
        .map(|(&a, &z)| (lam * z as f64 + (1.0 - lam) * a as f64) as f32)
        .collect())
}

/// Generates one pseudo-labeled episode from an unlabeled dataset.
pub fn sample_unsupervised_episode(
    ds: &DatasetRecord,
    shape: EpisodeShape,
    augs: &[AugmentationSpec],
    mix: &MixupConfig,
    seed: u64,
) -> Result<Episode> {
    shape.validate()?;
    mix.validate()?;
    for a in augs {
        a.validate()?;
    }
    let n = shape.n_ways;
    let k = shape.k_shots;
    if augs.len() < k {
        return Err(Error::Sampling(format!(
            "need at least K={k} augmentations, have {}",
            augs.len()
        )));
    }
    // flat view over all samples, labels ignored
    let flat: Vec<(usize, usize)> = ds
        .classes
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.len()).map(move |si| (ci, si)))
        .collect();
    if flat.len() < n + 1 {
        return Err(Error::Sampling(format!(
            "insufficient samples: dataset `{}` has {} samples, need {}",
            ds.id,
            flat.len(),
            n + 1
        )));
    }
    let mut rng = seeding::rng(seed, &[seeding::word("unsup-episode")]);
    let anchor_flat = sample_distinct(flat.len(), n, &mut rng)?;

    let anchor_feature = |slot: usize| -> Array1<f32> {
        let (ci, si) = flat[anchor_flat[slot]];
        ds.classes[ci].samples.row(si).to_owned()
    };
    let anchor_provenance = |slot: usize| -> Provenance {
        let (ci, si) = flat[anchor_flat[slot]];
        Provenance {
            dataset_id: ds.id.clone(),
            class_id: ds.classes[ci].class_id.clone(),
            sample_index: si,
        }
    };

    let mut context = Vec::with_capacity(n * k);
    for slot in 0..n {
        let feat = anchor_feature(slot);
        let prov = anchor_provenance(slot);
        // K distinct augmentation functions for this anchor
        let mut order: Vec<usize> = (0..augs.len()).collect();
        order.shuffle(&mut rng);
        for &ai in order.iter().take(k) {
            context.push(EpisodeItem {
                features: augs[ai].apply(&feat, &mut rng),
                label: slot + 1,
                provenance: prov.clone(),
            });
        }
    }

    let externals: Vec<usize> = (0..flat.len())
        .filter(|i| !anchor_flat.contains(i))
        .collect();
    let mut queries = Vec::with_capacity(shape.n_queries);
    for _ in 0..shape.n_queries {
        let slot = rng.gen_range(0..n);
        let feat = anchor_feature(slot);
        let ai = rng.gen_range(0..augs.len());
        let aug = augs[ai].apply(&feat, &mut rng);
        let ext_flat = externals[rng.gen_range(0..externals.len())];
        let (eci, esi) = flat[ext_flat];
        let external = ds.classes[eci].samples.row(esi).to_owned();
        let lam = sample_lambda(mix, &mut rng)?;
        queries.push(EpisodeItem {
            features: mixup_query(&aug, &external, lam)?,
            label: slot + 1,
            provenance: anchor_provenance(slot),
        });
    }

    Ok(Episode {
        n_ways: n,
        context,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SyntheticSpec};
    use ndarray::array;

    fn dataset(sep: f64, noise: f64, classes: usize, per_class: usize) -> DatasetRecord {
        synth_generate(&SyntheticSpec {
            n_domains: 1,
            datasets_per_domain: 1,
            classes_per_dataset: classes,
            samples_per_class: per_class,
            dim: 12,
            class_separation: sep,
            noise_scale: noise,
            seed: 31,
        })
        .unwrap()
        .remove(0)
    }

    #[test]
    fn lambda_truncated_uniform_mean() {
        let cfg = MixupConfig::default();
        let mut rng = seeding::rng(5, &[]);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let lam = sample_lambda(&cfg, &mut rng).unwrap();
            assert!(lam > 0.0 && lam < 0.5);
            sum += lam;
        }
        // Beta(1,1) truncated to (0, 0.5) is Uniform(0, 0.5)
        assert!((sum / n as f64 - 0.25).abs() < 0.01);
    }

    #[test]
    fn lambda_full_range_mean() {
        let cfg = MixupConfig {
            lambda_range: (0.0, 1.0),
            ..MixupConfig::default()
        };
        let mut rng = seeding::rng(6, &[]);
        let n = 100_000;
        let sum: f64 = (0..n)
            .map(|_| sample_lambda(&cfg, &mut rng).unwrap())
            .sum();
        assert!((sum / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn lambda_pathological_range_errors() {
        let cfg = MixupConfig {
            alpha: 40.0,
            beta: 1.0,
            lambda_range: (0.0, 1e-4),
        };
        let mut rng = seeding::rng(7, &[]);
        assert!(sample_lambda(&cfg, &mut rng).is_err());
    }

    #[test]
    fn mixup_examples() {
        let q = mixup_query(&array![4.0, 8.0], &array![0.0, 0.0], 0.25).unwrap();
        assert_eq!(q, array![3.0, 6.0]);
        let q = mixup_query(&array![0.0, 10.0], &array![10.0, 0.0], 0.4).unwrap();
        assert!((q[0] - 4.0).abs() < 1e-6 && (q[1] - 6.0).abs() < 1e-6);
        // boundary identity
        let anchor = array![1.5, -2.5, 3.0];
        let q = mixup_query(&anchor, &array![9.0, 9.0, 9.0], 0.0).unwrap();
        assert_eq!(q, anchor);
        assert!(mixup_query(&array![1.0], &array![1.0, 2.0], 0.3).is_err());
    }

    #[test]
    fn episode_construction_contract() {
        let ds = dataset(5.0, 0.3, 4, 10);
        let shape = EpisodeShape::new(5, 5, 10);
        let augs = default_augmentations(0.3);
        let ep =
            sample_unsupervised_episode(&ds, shape, &augs, &MixupConfig::default(), 1).unwrap();
        assert_eq!(ep.context.len(), 25);
        assert_eq!(ep.queries.len(), 10);
        // exactly 5 distinct anchors, each appearing 5 times
        let mut anchors = std::collections::BTreeMap::new();
        for it in &ep.context {
            *anchors
                .entry((it.provenance.class_id.clone(), it.provenance.sample_index))
                .or_insert(0usize) += 1;
        }
        assert_eq!(anchors.len(), 5);
        assert!(anchors.values().all(|&c| c == 5));
        // pseudo-label n maps to a single source sample
        for l in 1..=5 {
            let sources: std::collections::BTreeSet<_> = ep
                .context
                .iter()
                .filter(|it| it.label == l)
                .map(|it| (it.provenance.class_id.clone(), it.provenance.sample_index))
                .collect();
            assert_eq!(sources.len(), 1);
        }
    }

    #[test]
    fn zero_strength_augs_reproduce_anchor() {
        let ds = dataset(5.0, 0.3, 4, 10);
        let shape = EpisodeShape::new(5, 3, 2);
        let augs = vec![
            AugmentationSpec {
                kind: AugKind::GaussianJitter,
                strength: 0.0,
            };
            3
        ];
        let ep =
            sample_unsupervised_episode(&ds, shape, &augs, &MixupConfig::default(), 2).unwrap();
        for it in &ep.context {
            let group = ds.class(&it.provenance.class_id).unwrap();
            let anchor = group.samples.row(it.provenance.sample_index);
            assert_eq!(it.features.view(), anchor);
        }
    }

    #[test]
    fn determinism() {
        let ds = dataset(5.0, 0.3, 4, 10);
        let shape = EpisodeShape::new(5, 5, 10);
        let augs = default_augmentations(0.3);
        let a = sample_unsupervised_episode(&ds, shape, &augs, &MixupConfig::default(), 9).unwrap();
        let b = sample_unsupervised_episode(&ds, shape, &augs, &MixupConfig::default(), 9).unwrap();
        for (x, y) in a.context.iter().zip(&b.context).chain(a.queries.iter().zip(&b.queries)) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn insufficient_inputs_error() {
        let ds = dataset(5.0, 0.3, 2, 2);
        let shape = EpisodeShape::new(5, 2, 2);
        let augs = default_augmentations(0.3);
        // 4 samples < N + 1 = 6
        assert!(
            sample_unsupervised_episode(&ds, shape, &augs, &MixupConfig::default(), 1).is_err()
        );
        let ds = dataset(5.0, 0.3, 4, 10);
        let few = &augs[..1];
        assert!(
            sample_unsupervised_episode(&ds, shape, few, &MixupConfig::default(), 1).is_err()
        );
    }

    #[test]
    fn nearest_context_neighbor_solves_clean_tasks() {
        // zero-strength augs, lambda near 0.49, well-separated data;
        // many classes keep anchor class collisions (ambiguous tasks) rare
        let ds = dataset(10.0, 0.1, 60, 4);
        let shape = EpisodeShape::new(5, 3, 10);
        let augs = vec![
            AugmentationSpec {
                kind: AugKind::GaussianJitter,
                strength: 0.0,
            };
            3
        ];
        let mix = MixupConfig {
            alpha: 1.0,
            beta: 1.0,
            lambda_range: (0.485, 0.495),
        };
        let mut correct = 0usize;
        let mut total = 0usize;
        for seed in 0..30 {
            let ep = sample_unsupervised_episode(&ds, shape, &augs, &mix, seed).unwrap();
            for q in &ep.queries {
                let best = ep
                    .context
                    .iter()
                    .min_by(|a, b| {
                        let da: f32 = a
                            .features
                            .iter()
                            .zip(&q.features)
                            .map(|(x, y)| (x - y).powi(2))
                            .sum();
                        let db: f32 = b
                            .features
                            .iter()
                            .zip(&q.features)
                            .map(|(x, y)| (x - y).powi(2))
                            .sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                correct += usize::from(best.label == q.label);
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.9, "nearest-context-neighbor accuracy {acc}");
    }
}

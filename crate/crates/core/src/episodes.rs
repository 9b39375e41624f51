//! N-way K-shot episode sampling and sequence assembly.
//!
//! An episode holds NK labeled context items plus Q queries with ground
//! truth. Sampling is pure given (pool, shape, seed), so any number of
//! samplers can run concurrently on independent seed streams.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, NdFloat};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    sample_distinct, weighted_sample_distinct, ClassSplit, DatasetRecord,
};
use crate::error::{Error, Result};
use crate::seeding;

/// N-way K-shot task shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeShape {
    pub n_ways: usize,
    pub k_shots: usize,
    pub n_queries: usize,
}

impl EpisodeShape {
    pub fn new(n_ways: usize, k_shots: usize, n_queries: usize) -> Self {
        Self {
            n_ways,
            k_shots,
            n_queries,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ways < 2 {
            return Err(Error::Config("n_ways must be >= 2".into()));
        }
        if self.k_shots < 1 || self.n_queries < 1 {
            return Err(Error::Config("k_shots and n_queries must be >= 1".into()));
        }
        Ok(())
    }

    pub fn context_len(&self) -> usize {
        self.n_ways * self.k_shots
    }
}

/// Where an episode item came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_id: String,
    pub class_id: String,
    pub sample_index: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodeItem {
    pub features: Array1<f32>,
    /// Episode label in 1..=N.
    pub label: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub n_ways: usize,
    pub context: Vec<EpisodeItem>,
    pub queries: Vec<EpisodeItem>,
}

impl Episode {
    /// Debug serialization; feature vectors are elided unless requested.
    pub fn to_debug_json(&self, include_features: bool) -> serde_json::Value {
        let item = |it: &EpisodeItem| {
            let mut v = serde_json::json!({
                "label": it.label,
                "dataset_id": it.provenance.dataset_id,
                "class_id": it.provenance.class_id,
                "sample_index": it.provenance.sample_index,
            });
            if include_features {
                v["features"] = serde_json::json!(it.features.to_vec());
            }
            v
        };
        serde_json::json!({
            "n_ways": self.n_ways,
            "context": self.context.iter().map(item).collect::<Vec<_>>(),
            "queries": self.queries.iter().map(item).collect::<Vec<_>>(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Single,
    Merged,
}

/// Which class split an episode draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitUse {
    Train,
    Test,
    All,
}

/// A sampling pool: dataset records plus optional class splits.
pub struct EpisodePool<'a> {
    pub records: Vec<&'a DatasetRecord>,
    pub splits: Option<&'a BTreeMap<String, ClassSplit>>,
}

impl<'a> EpisodePool<'a> {
    pub fn new(records: Vec<&'a DatasetRecord>) -> Self {
        Self {
            records,
            splits: None,
        }
    }

    pub fn with_splits(
        records: Vec<&'a DatasetRecord>,
        splits: &'a BTreeMap<String, ClassSplit>,
    ) -> Self {
        Self {
            records,
            splits: Some(splits),
        }
    }

    fn class_allowed(&self, dataset_id: &str, class_id: &str, split: SplitUse) -> bool {
        match (split, self.splits) {
            (SplitUse::All, _) | (_, None) => true,
            (SplitUse::Train, Some(s)) => s
                .get(dataset_id)
                .map_or(true, |cs| cs.train_classes.contains(class_id)),
            (SplitUse::Test, Some(s)) => s
                .get(dataset_id)
                .map_or(true, |cs| cs.test_classes.contains(class_id)),
        }
    }

    /// Class indices of `record` usable for a (K context + 1 query) draw.
    fn eligible_classes(&self, rec: &DatasetRecord, split: SplitUse, k: usize) -> Vec<usize> {
        rec.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.len() >= k + 1 && self.class_allowed(&rec.id, &c.class_id, split))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Samples one supervised episode.
///
/// Single mode draws a dataset with probability proportional to its
/// eligible sample count, then N distinct classes uniformly within it.
/// Merged mode draws N distinct (dataset, class) pairs from the union
/// pool with per-class probability proportional to class size. Episode
/// labels are assigned to the chosen classes by a uniformly random
/// bijection onto 1..=N; queries are drawn from samples not used in
/// context.
pub fn sample_episode(
    pool: &EpisodePool,
    mode: SampleMode,
    shape: EpisodeShape,
    split: SplitUse,
    balanced_queries: bool,
    seed: u64,
) -> Result<Episode> {
    shape.validate()?;
    let mut rng = seeding::rng(seed, &[seeding::word("episode")]);
    let n = shape.n_ways;
    let k = shape.k_shots;

    // chosen classes as (record index, class index)
    let chosen: Vec<(usize, usize)> = match mode {
        SampleMode::Single => {
            let eligible: Vec<(usize, Vec<usize>)> = pool
                .records
                .iter()
                .enumerate()
                .map(|(ri, rec)| (ri, pool.eligible_classes(rec, split, k)))
                .filter(|(_, cls)| cls.len() >= n)
                .collect();
            if eligible.is_empty() {
                return Err(Error::Sampling(
                    "insufficient classes/samples: no dataset offers enough eligible classes"
                        .into(),
                ));
            }
            let weights: Vec<f64> = eligible
                .iter()
                .map(|(ri, cls)| {
                    cls.iter()
                        .map(|&ci| pool.records[*ri].classes[ci].len())
                        .sum::<usize>() as f64
                })
                .collect();
            let pick = weighted_sample_distinct(&weights, 1, &mut rng)?[0];
            let (ri, ref cls) = eligible[pick];
            sample_distinct(cls.len(), n, &mut rng)?
                .into_iter()
                .map(|i| (ri, cls[i]))
                .collect()
        }
        SampleMode::Merged => {
            let mut pairs: Vec<(usize, usize)> = Vec::new();
            let mut weights: Vec<f64> = Vec::new();
            for (ri, rec) in pool.records.iter().enumerate() {
                for ci in pool.eligible_classes(rec, split, k) {
                    pairs.push((ri, ci));
                    weights.push(rec.classes[ci].len() as f64);
                }
            }
            if pairs.len() < n {
                return Err(Error::Sampling(format!(
                    "insufficient classes/samples: union pool has {} eligible classes, need {n}",
                    pairs.len()
                )));
            }
            weighted_sample_distinct(&weights, n, &mut rng)?
                .into_iter()
                .map(|i| pairs[i])
                .collect()
        }
    };

    // uniformly random bijection classes -> 1..=N
    let mut labels: Vec<usize> = (1..=n).collect();
    labels.shuffle(&mut rng);

    let mut context = Vec::with_capacity(n * k);
    // per chosen class: sample indices not used in context
    let mut free_pools: Vec<Vec<usize>> = Vec::with_capacity(n);
    for (slot, &(ri, ci)) in chosen.iter().enumerate() {
        let rec = pool.records[ri];
        let group = &rec.classes[ci];
        let picked = sample_distinct(group.len(), k, &mut rng)?;
        for &si in &picked {
            context.push(EpisodeItem {
                features: group.samples.row(si).to_owned(),
                label: labels[slot],
                provenance: Provenance {
                    dataset_id: rec.id.clone(),
                    class_id: group.class_id.clone(),
                    sample_index: si,
                },
            });
        }
        free_pools.push((0..group.len()).filter(|i| !picked.contains(i)).collect());
    }
    context.shuffle(&mut rng);

    let mut queries = Vec::with_capacity(shape.n_queries);
    for q in 0..shape.n_queries {
        let slot = if balanced_queries {
            q % n
        } else {
            rng.gen_range(0..n)
        };
        let (ri, ci) = chosen[slot];
        let rec = pool.records[ri];
        let group = &rec.classes[ci];
        let free = &free_pools[slot];
        if free.is_empty() {
            return Err(Error::Sampling(format!(
                "insufficient classes/samples: class `{}` has no query candidates",
                group.class_id
            )));
        }
        let si = free[rng.gen_range(0..free.len())];
        queries.push(EpisodeItem {
            features: group.samples.row(si).to_owned(),
            label: labels[slot],
            provenance: Provenance {
                dataset_id: rec.id.clone(),
                class_id: group.class_id.clone(),
                sample_index: si,
            },
        });
    }

    Ok(Episode {
        n_ways: n,
        context,
        queries,
    })
}

/// Q token sequences of length NK+1, plus the query ground truth.
#[derive(Debug, Clone)]
pub struct SequenceBatch<F> {
    /// One (NK+1, token_width) matrix per query; the final row carries
    /// the unknown-label slot.
    pub tokens: Vec<Array2<F>>,
    pub truth: Vec<usize>,
    pub n_ways: usize,
}

/// Builds token sequences from already-encoded features.
///
/// Context token t = concat(feat_t, label_embed[y_t]); each query token
/// is concat(feat_q, unknown). Shared by [`assemble_sequences`] and the
/// model forward pass.
pub fn assemble_from_encoded<F: NdFloat>(
    ctx_feats: &Array2<F>,
    query_feats: &Array2<F>,
    ctx_labels: &[usize],
    label_embed: &Array2<F>,
    unknown: &Array1<F>,
) -> Result<Vec<Array2<F>>> {
    if unknown.len() != label_embed.ncols() {
        return Err(Error::Shape(format!(
            "unknown-label vector width {} != label embedding width {}",
            unknown.len(),
            label_embed.ncols()
        )));
    }
    if ctx_feats.ncols() != query_feats.ncols() {
        return Err(Error::Shape(
            "context and query feature widths differ".into(),
        ));
    }
    if ctx_feats.nrows() != ctx_labels.len() {
        return Err(Error::Shape("context labels/features length mismatch".into()));
    }
    let fw = ctx_feats.ncols();
    let lw = label_embed.ncols();
    let width = fw + lw;
    let nk = ctx_feats.nrows();
    let mut out = Vec::with_capacity(query_feats.nrows());
    for q in 0..query_feats.nrows() {
        let mut m = Array2::<F>::zeros((nk + 1, width));
        for t in 0..nk {
            let y = ctx_labels[t];
            if y == 0 || y > label_embed.nrows() {
                return Err(Error::Shape(format!(
                    "episode label {y} outside label embedding rows {}",
                    label_embed.nrows()
                )));
            }
            m.slice_mut(ndarray::s![t, ..fw]).assign(&ctx_feats.row(t));
            m.slice_mut(ndarray::s![t, fw..])
                .assign(&label_embed.row(y - 1));
        }
        m.slice_mut(ndarray::s![nk, ..fw]).assign(&query_feats.row(q));
        m.slice_mut(ndarray::s![nk, fw..]).assign(unknown);
        out.push(m);
    }
    Ok(out)
}

/// Assembles the Q sequences of an episode with an arbitrary feature
/// embedding function.
pub fn assemble_sequences<F: NdFloat>(
    ep: &Episode,
    label_embed: &Array2<F>,
    unknown: &Array1<F>,
    feat_embed: impl Fn(ArrayView1<f32>) -> Array1<F>,
) -> Result<SequenceBatch<F>> {
    let embed_rows = |items: &[EpisodeItem]| -> Result<Array2<F>> {
        let rows: Vec<Array1<F>> = items
            .iter()
            .map(|it| feat_embed(it.features.view()))
            .collect();
        let fw = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != fw) {
            return Err(Error::Shape("feature embedding width varies".into()));
        }
        let mut m = Array2::<F>::zeros((rows.len(), fw));
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).assign(r);
        }
        Ok(m)
    };
    let ctx = embed_rows(&ep.context)?;
    let qry = embed_rows(&ep.queries)?;
    let labels: Vec<usize> = ep.context.iter().map(|it| it.label).collect();
    let tokens = assemble_from_encoded(&ctx, &qry, &labels, label_embed, unknown)?;
    Ok(SequenceBatch {
        tokens,
        truth: ep.queries.iter().map(|it| it.label).collect(),
        n_ways: ep.n_ways,
    })
}

/// Replaces exactly floor((1 - correct_fraction) * NK) context labels,
/// chosen uniformly without replacement, with uniformly random
/// different labels. Queries are untouched.
pub fn perturb_context_labels(ep: &Episode, correct_fraction: f64, seed: u64) -> Episode {
    let mut out = ep.clone();
    let nk = ep.context.len();
    let n_flip = ((1.0 - correct_fraction) * nk as f64).floor() as usize;
    if n_flip == 0 {
        return out;
    }
    let mut rng = seeding::rng(seed, &[seeding::word("label-noise")]);
    let picked = sample_distinct(nk, n_flip, &mut rng).expect("n_flip <= nk");
    for &i in &picked {
        let old = out.context[i].label;
        let mut candidates: Vec<usize> = (1..=ep.n_ways).filter(|&l| l != old).collect();
        candidates.shuffle(&mut rng);
        out.context[i].label = candidates[0];
    }
    out
}

//! Dataset records, class-disjoint splits, leave-one-out partitions and
//! synthetic multi-domain generation.
//!
//! On disk a dataset is a directory holding `manifest.json` (id, domain,
//! dim, ordered class list with per-class sample counts and byte
//! offsets) and `embeddings.bin` (row-major little-endian f32), with an
//! optional `labels.csv` cross-check. A registry file is a JSON list of
//! dataset paths plus a top-level seed.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Ingested,
    Synthetic,
}

/// Per-class pool of embedded samples.
#[derive(Debug, Clone)]
pub struct ClassGroup {
    pub class_id: String,
    /// (n_samples, dim)
    pub samples: Array2<f32>,
}

impl ClassGroup {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One dataset: a domain tag plus per-class sample pools.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub id: String,
    pub domain: String,
    pub dim: usize,
    pub classes: Vec<ClassGroup>,
    pub source: Source,
}

impl DatasetRecord {
    pub fn total_samples(&self) -> usize {
        self.classes.iter().map(ClassGroup::len).sum()
    }

    pub fn class(&self, class_id: &str) -> Option<&ClassGroup> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    /// Checks the record invariants: nonempty classes, consistent sample
    /// widths, finite values, unique class identifiers.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::dataset(&self.id, "dim must be positive"));
        }
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if !seen.insert(c.class_id.as_str()) {
                return Err(Error::dataset(
                    &self.id,
                    format!("duplicate class `{}`", c.class_id),
                ));
            }
            if c.is_empty() {
                return Err(Error::dataset(
                    &self.id,
                    format!("class `{}` has no samples", c.class_id),
                ));
            }
            if c.samples.ncols() != self.dim {
                return Err(Error::dataset(
                    &self.id,
                    format!(
                        "class `{}` has sample width {} but dataset dim {}",
                        c.class_id,
                        c.samples.ncols(),
                        self.dim
                    ),
                ));
            }
            if c.samples.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "dataset `{}` class `{}`",
                    self.id, c.class_id
                )));
            }
        }
        Ok(())
    }
}

/// Class-disjoint split of one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train_classes: BTreeSet<String>,
    pub test_classes: BTreeSet<String>,
}

/// |test| = max(floor(eval_fraction * C), min_eval); the test classes are
/// the last ones in manifest order, which keeps the selection
/// deterministic for a fixed registry.
pub fn split_classes(
    ds: &DatasetRecord,
    eval_fraction: f64,
    min_eval: usize,
) -> Result<ClassSplit> {
    if !(0.0..1.0).contains(&eval_fraction) || eval_fraction == 0.0 {
        return Err(Error::Config(format!(
            "eval_fraction must be in (0,1), got {eval_fraction}"
        )));
    }
    let c = ds.classes.len();
    if c <= min_eval {
        return Err(Error::dataset(
            &ds.id,
            format!("dataset too small to split: {c} classes, min_eval {min_eval}"),
        ));
    }
    let n_test = ((eval_fraction * c as f64).floor() as usize).max(min_eval);
    let n_train = c - n_test;
    let train_classes = ds.classes[..n_train]
        .iter()
        .map(|g| g.class_id.clone())
        .collect();
    let test_classes = ds.classes[n_train..]
        .iter()
        .map(|g| g.class_id.clone())
        .collect();
    Ok(ClassSplit {
        train_classes,
        test_classes,
    })
}

/// Leave-one-out partition over a registry of datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LooPartition {
    pub held_out_domain: String,
    pub train_ids: Vec<String>,
    pub eval_ids: Vec<String>,
}

pub fn loo_partition(registry: &[DatasetRecord], held_out: &str) -> Result<LooPartition> {
    if !registry.iter().any(|d| d.domain == held_out) {
        return Err(Error::Invalid(format!(
            "unknown domain `{held_out}` in leave-one-out partition"
        )));
    }
    let (eval_ids, train_ids): (Vec<_>, Vec<_>) = registry
        .iter()
        .partition(|d| d.domain == held_out);
    if train_ids.is_empty() {
        return Err(Error::Invalid(
            "no training data: every dataset belongs to the held-out domain".into(),
        ));
    }
    Ok(LooPartition {
        held_out_domain: held_out.to_string(),
        train_ids: train_ids.iter().map(|d| d.id.clone()).collect(),
        eval_ids: eval_ids.iter().map(|d| d.id.clone()).collect(),
    })
}

/// p(D_a) = |D_a| / sum |D_b|, by total sample count.
pub fn selection_probabilities(registry: &[DatasetRecord]) -> Result<Vec<f64>> {
    selection_probabilities_from_sizes(
        &registry
            .iter()
            .map(DatasetRecord::total_samples)
            .collect::<Vec<_>>(),
    )
}

pub fn selection_probabilities_from_sizes(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Invalid("empty registry".into()));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("registry has no samples".into()));
    }
    Ok(sizes.iter().map(|&s| s as f64 / total as f64).collect())
}

/// Spec for the synthetic multi-domain generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_domains: usize,
    pub datasets_per_domain: usize,
    pub classes_per_dataset: usize,
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    pub dim: usize,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

fn default_samples_per_class() -> usize {
    40
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_domains,
            self.datasets_per_domain,
            self.classes_per_dataset,
            self.samples_per_class,
            self.dim,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("synthetic spec counts must be >= 1".into()));
        }
        if self.class_separation <= 0.0 {
            return Err(Error::Config("class_separation must be > 0".into()));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::Config("noise_scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Random orthonormal matrix via Gram-Schmidt on a Gaussian matrix.
fn random_orthonormal(dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    loop {
        let mut m = Array2::<f64>::zeros((dim, dim));
        for v in m.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let mut ok = true;
        for i in 0..dim {
            for j in 0..i {
                let proj = m.row(i).dot(&m.row(j));
                let prev = m.row(j).to_owned();
                m.row_mut(i).zip_mut_with(&prev, |a, &b| *a -= proj * b);
            }
            let norm = m.row(i).dot(&m.row(i)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            m.row_mut(i).mapv_inplace(|v| v / norm);
        }
        if ok {
            return m;
        }
    }
}

fn random_unit_vector(dim: usize, rng: &mut impl Rng) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_iter((0..dim).map(|_| StandardNormal.sample(rng)));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

/// Generates a deterministic multi-domain registry. Each domain owns a
/// random orthonormal transform and a radius; class means live on that
/// domain's sphere scaled by `class_separation`, and samples are the
/// mean plus isotropic Gaussian noise.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<DatasetRecord>> {
    spec.validate()?;
    let mut records = Vec::new();
    for dom in 0..spec.n_domains {
        let domain = format!("domain{dom:02}");
        let mut drng = seeding::rng(spec.seed, &[seeding::word("domain"), dom as u64]);
        let transform = random_orthonormal(spec.dim, &mut drng);
        let radius: f64 = drng.gen_range(0.75..1.25);
        for dsi in 0..spec.datasets_per_domain {
            let id = format!("{domain}-ds{dsi}");
            let mut rng = seeding::rng(
                spec.seed,
                &[seeding::word("dataset"), dom as u64, dsi as u64],
            );
            let mut classes = Vec::with_capacity(spec.classes_per_dataset);
            for ci in 0..spec.classes_per_dataset {
                let dir = random_unit_vector(spec.dim, &mut rng);
                let mean = transform.dot(&(dir * (radius * spec.class_separation)));
                let mut samples = Array2::<f32>::zeros((spec.samples_per_class, spec.dim));
                for mut row in samples.rows_mut() {
                    for (k, v) in row.iter_mut().enumerate() {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        *v = (mean[k] + spec.noise_scale * noise) as f32;
                    }
                }
                classes.push(ClassGroup {
                    class_id: format!("c{ci:03}"),
                    samples,
                });
            }
            let record = DatasetRecord {
                id,
                domain: domain.clone(),
                dim: spec.dim,
                classes,
                source: Source::Synthetic,
            };
            record.validate()?;
            records.push(record);
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestClass {
    class_id: String,
    n_samples: usize,
    /// Byte offset of this class block within embeddings.bin.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    id: String,
    domain: String,
    dim: usize,
    classes: Vec<ManifestClass>,
}

/// Loads a dataset directory (`manifest.json` + `embeddings.bin`).
pub fn load_dataset(path: &Path) -> Result<DatasetRecord> {
    let manifest_path = path.join("manifest.json");
    let manifest_text =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&manifest_text).map_err(|e| Error::Json {
            path: manifest_path.clone(),
            source: e,
        })?;
    if manifest.dim == 0 {
        return Err(Error::dataset(&manifest.id, "dim must be positive"));
    }
    let payload_path = path.join("embeddings.bin");
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let total: usize = manifest.classes.iter().map(|c| c.n_samples).sum();
    let expect = total * manifest.dim * 4;
    if payload.len() != expect {
        return Err(Error::dataset(
            &manifest.id,
            format!(
                "payload size mismatch: expected {expect} bytes ({} samples x dim {}), found {}",
                total,
                manifest.dim,
                payload.len()
            ),
        ));
    }
    let mut classes = Vec::with_capacity(manifest.classes.len());
    for mc in &manifest.classes {
        let nbytes = mc.n_samples * manifest.dim * 4;
        let end = mc.offset.checked_add(nbytes).filter(|&e| e <= payload.len());
        let end = end.ok_or_else(|| {
            Error::dataset(
                &manifest.id,
                format!("class `{}` block out of payload bounds", mc.class_id),
            )
        })?;
        let bytes = &payload[mc.offset..end];
        let mut samples = Array2::<f32>::zeros((mc.n_samples, manifest.dim));
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            samples[[i / manifest.dim, i % manifest.dim]] =
                f32::from_le_bytes(chunk.try_into().unwrap());
        }
        classes.push(ClassGroup {
            class_id: mc.class_id.clone(),
            samples,
        });
    }
    let record = DatasetRecord {
        id: manifest.id,
        domain: manifest.domain,
        dim: manifest.dim,
        classes,
        source: Source::Ingested,
    };
    record.validate()?;
    Ok(record)
}

/// Writes a dataset directory in the on-disk format, including the
/// `labels.csv` cross-check file.
pub fn write_dataset(record: &DatasetRecord, dir: &Path) -> Result<()> {
    record.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut classes = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut labels = String::from("row_index,class_id\n");
    let mut row = 0usize;
    for c in &record.classes {
        classes.push(ManifestClass {
            class_id: c.class_id.clone(),
            n_samples: c.len(),
            offset: payload.len(),
        });
        for sample in c.samples.rows() {
            for v in sample {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            labels.push_str(&format!("{row},{}\n", c.class_id));
            row += 1;
        }
    }
    let manifest = Manifest {
        id: record.id.clone(),
        domain: record.domain.clone(),
        dim: record.dim,
        classes,
    };
    let manifest_path = dir.join("manifest.json");
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| Error::Json {
        path: manifest_path.clone(),
        source: e,
    })?;
    f.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
    let bin_path = dir.join("embeddings.bin");
    fs::write(&bin_path, &payload).map_err(|e| Error::io(&bin_path, e))?;
    let csv_path = dir.join("labels.csv");
    fs::write(&csv_path, labels).map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

/// Registry file: dataset paths plus a top-level seed.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryFile {
    pub seed: u64,
    pub datasets: Vec<PathBuf>,
}

/// A loaded registry: the seed plus all dataset records, in file order.
#[derive(Debug)]
pub struct Registry {
    pub seed: u64,
    pub records: Vec<DatasetRecord>,
}

impl Registry {
    pub fn record(&self, id: &str) -> Option<&DatasetRecord> {
        self.records.iter().find(|d| d.id == id)
    }

    pub fn domains(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.records {
            if !out.contains(&r.domain) {
                out.push(r.domain.clone());
            }
        }
        out
    }
}

pub fn load_registry(path: &Path) -> Result<Registry> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: RegistryFile = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::with_capacity(file.datasets.len());
    let mut seen = BTreeSet::new();
    for p in &file.datasets {
        let full = if p.is_absolute() { p.clone() } else { base.join(p) };
        let rec = load_dataset(&full)?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::dataset(&rec.id, "duplicate dataset id in registry"));
        }
        records.push(rec);
    }
    Ok(Registry {
        seed: file.seed,
        records,
    })
}

/// Weighted choice of a dataset index by selection probability.
pub fn pick_dataset(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws `n` distinct indices from `0..len` with probability
/// proportional to `weights`, without replacement.
pub fn weighted_sample_distinct(
    weights: &[f64],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if n > weights.len() {
        return Err(Error::Sampling(format!(
            "cannot draw {n} distinct items from {}",
            weights.len()
        )));
    }
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut w: Vec<f64> = weights.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            // all remaining weights zero; fall back to uniform
            let k = rng.gen_range(0..remaining.len());
            out.push(remaining.remove(k));
            w.remove(k);
            continue;
        }
        let u: f64 = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = remaining.len() - 1;
        for (k, &wk) in w.iter().enumerate() {
            acc += wk;
            if u < acc {
                chosen = k;
                break;
            }
        }
        out.push(remaining.remove(chosen));
        w.remove(chosen);
    }
    Ok(out)
}

/// Uniform sample of `n` distinct indices from `0..len`.
pub fn sample_distinct(len: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::Sampling(format!(
            "cannot draw {n} distinct items from {len}"
        )));
    }
    Ok(rand::seq::index::sample(rng, len, n).into_vec())
}

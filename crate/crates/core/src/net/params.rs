use ndarray::{Array1, Array2, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::c;
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatMode {
    /// Pre-embedded inputs pass straight into the token.
    Identity,
    /// A small trainable two-layer GeLU MLP maps inputs to feat_width.
    TrainableMlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feat_mode: FeatMode,
    /// Raw input embedding dimensionality.
    pub feat_in: usize,
    /// Feature width inside the token (= feat_in in identity mode).
    pub feat_width: usize,
    pub label_width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_width: usize,
    pub n_ways_max: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, 4 heads, token width 24.
    pub fn desk(feat_in: usize, seed: u64) -> Self {
        Self {
            feat_mode: FeatMode::Identity,
            feat_in,
            feat_width: feat_in,
            label_width: 8,
            n_layers: 2,
            n_heads: 4,
            mlp_width: 64,
            n_ways_max: 5,
            seed,
        }
    }

    /// Full-scale preset: 8 layers, 8 heads, token width 2304
    /// (2048 feature + 256 label).
    pub fn paper(seed: u64) -> Self {
        Self {
            feat_mode: FeatMode::Identity,
            feat_in: 2048,
            feat_width: 2048,
            label_width: 256,
            n_layers: 8,
            n_heads: 8,
            mlp_width: 3072,
            n_ways_max: 5,
            seed,
        }
    }

    pub fn token_width(&self) -> usize {
        self.feat_width + self.label_width
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feat_in,
            self.feat_width,
            self.label_width,
            self.n_layers,
            self.n_heads,
            self.mlp_width,
            self.n_ways_max,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("all model dims must be >= 1".into()));
        }
        if self.token_width() % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "token width {} not divisible by n_heads {}",
                self.token_width(),
                self.n_heads
            )));
        }
        if self.feat_mode == FeatMode::Identity && self.feat_in != self.feat_width {
            return Err(Error::Config(
                "identity feature mode requires feat_in == feat_width".into(),
            ));
        }
        Ok(())
    }
}

/// Trainable feature encoder: Linear -> GeLU -> Linear.
#[derive(Debug, Clone)]
pub struct MlpEncoderParams<F> {
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

/// One pre-layer-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct LayerParams<F> {
    pub ln1_g: Array1<F>,
    pub ln1_b: Array1<F>,
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub ln2_g: Array1<F>,
    pub ln2_b: Array1<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

/// All trainable tensors of the model. The same structure doubles as the
/// gradient and Adam-moment container.
#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub encoder: Option<MlpEncoderParams<F>>,
    /// g_phi: one row per episode label (n_ways_max x label_width).
    pub label_embed: Array2<F>,
    /// Trainable unknown-label vector appended to query tokens.
    pub unknown: Array1<F>,
    pub layers: Vec<LayerParams<F>>,
    pub ln_f_g: Array1<F>,
    pub ln_f_b: Array1<F>,
    /// Classification head (token width x n_ways_max).
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

fn normal_matrix<F: NdFloat>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| {
        let n: f64 = StandardNormal.sample(rng);
        c(n * std)
    })
}

fn normal_vector<F: NdFloat>(len: usize, std: f64, rng: &mut impl Rng) -> Array1<F> {
    Array1::from_iter((0..len).map(|_| {
        let n: f64 = StandardNormal.sample(rng);
        c(n * std)
    }))
}

/// Deterministic parameter initialization: linear weights scaled by
/// 1/sqrt(fan_in), layer-norm scales 1, biases 0, unknown-label vector
/// std 0.02, label embedding rows std 1.
pub fn init_params<F: NdFloat>(cfg: &ModelConfig) -> Result<ModelParams<F>> {
    cfg.validate()?;
    let d = cfg.token_width();
    let mut rng = seeding::rng(cfg.seed, &[seeding::word("init")]);
    let lin = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Array2<F> {
        normal_matrix(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
    };
    let encoder = match cfg.feat_mode {
        FeatMode::Identity => None,
        FeatMode::TrainableMlp => Some(MlpEncoderParams {
            w1: lin(cfg.feat_in, cfg.feat_width, &mut rng),
            b1: Array1::zeros(cfg.feat_width),
            w2: lin(cfg.feat_width, cfg.feat_width, &mut rng),
            b2: Array1::zeros(cfg.feat_width),
        }),
    };
    let label_embed = normal_matrix(cfg.n_ways_max, cfg.label_width, 1.0, &mut rng);
    let unknown = normal_vector(cfg.label_width, 0.02, &mut rng);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerParams {
            ln1_g: Array1::ones(d),
            ln1_b: Array1::zeros(d),
            wq: lin(d, d, &mut rng),
            bq: Array1::zeros(d),
            wk: lin(d, d, &mut rng),
            bk: Array1::zeros(d),
            wv: lin(d, d, &mut rng),
            bv: Array1::zeros(d),
            wo: lin(d, d, &mut rng),
            bo: Array1::zeros(d),
            ln2_g: Array1::ones(d),
            ln2_b: Array1::zeros(d),
            w1: lin(d, cfg.mlp_width, &mut rng),
            b1: Array1::zeros(cfg.mlp_width),
            w2: lin(cfg.mlp_width, d, &mut rng),
            b2: Array1::zeros(d),
        });
    }
    Ok(ModelParams {
        config: cfg.clone(),
        encoder,
        label_embed,
        unknown,
        layers,
        ln_f_g: Array1::ones(d),
        ln_f_b: Array1::zeros(d),
        head_w: lin(d, cfg.n_ways_max, &mut rng),
        head_b: Array1::zeros(cfg.n_ways_max),
    })
}

/// Tensor reference with a stable name, used by Adam and checkpoints.
pub enum TensorRef<'a, F> {
    V1(&'a Array1<F>),
    V2(&'a Array2<F>),
}

pub enum TensorMut<'a, F> {
    V1(&'a mut Array1<F>),
    V2(&'a mut Array2<F>),
}

impl<F: NdFloat> ModelParams<F> {
    /// Same structure with every tensor zeroed.
    pub fn zeros_like(&self) -> Self {
        self.map(|_| F::zero())
    }

    /// Elementwise map preserving structure.
    pub fn map(&self, f: impl Fn(F) -> F + Copy) -> Self {
        self.convert(|x| f(x))
    }

    /// Elementwise conversion into another scalar type.
    pub fn convert<G: NdFloat>(&self, f: impl Fn(F) -> G + Copy) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            encoder: self.encoder.as_ref().map(|e| MlpEncoderParams {
                w1: e.w1.mapv(f),
                b1: e.b1.mapv(f),
                w2: e.w2.mapv(f),
                b2: e.b2.mapv(f),
            }),
            label_embed: self.label_embed.mapv(f),
            unknown: self.unknown.mapv(f),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: l.ln1_g.mapv(f),
                    ln1_b: l.ln1_b.mapv(f),
                    wq: l.wq.mapv(f),
                    bq: l.bq.mapv(f),
                    wk: l.wk.mapv(f),
                    bk: l.bk.mapv(f),
                    wv: l.wv.mapv(f),
                    bv: l.bv.mapv(f),
                    wo: l.wo.mapv(f),
                    bo: l.bo.mapv(f),
                    ln2_g: l.ln2_g.mapv(f),
                    ln2_b: l.ln2_b.mapv(f),
                    w1: l.w1.mapv(f),
                    b1: l.b1.mapv(f),
                    w2: l.w2.mapv(f),
                    b2: l.b2.mapv(f),
                })
                .collect(),
            ln_f_g: self.ln_f_g.mapv(f),
            ln_f_b: self.ln_f_b.mapv(f),
            head_w: self.head_w.mapv(f),
            head_b: self.head_b.mapv(f),
        }
    }

    /// Named tensor views in a stable order.
    pub fn tensors(&self) -> Vec<(String, TensorRef<'_, F>)> {
        let mut out: Vec<(String, TensorRef<'_, F>)> = Vec::new();
        if let Some(e) = &self.encoder {
            out.push(("encoder.w1".into(), TensorRef::V2(&e.w1)));
            out.push(("encoder.b1".into(), TensorRef::V1(&e.b1)));
            out.push(("encoder.w2".into(), TensorRef::V2(&e.w2)));
            out.push(("encoder.b2".into(), TensorRef::V1(&e.b2)));
        }
        out.push(("label_embed".into(), TensorRef::V2(&self.label_embed)));
        out.push(("unknown".into(), TensorRef::V1(&self.unknown)));
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("ln1_g"), TensorRef::V1(&l.ln1_g)));
            out.push((p("ln1_b"), TensorRef::V1(&l.ln1_b)));
            out.push((p("wq"), TensorRef::V2(&l.wq)));
            out.push((p("bq"), TensorRef::V1(&l.bq)));
            out.push((p("wk"), TensorRef::V2(&l.wk)));
            out.push((p("bk"), TensorRef::V1(&l.bk)));
            out.push((p("wv"), TensorRef::V2(&l.wv)));
            out.push((p("bv"), TensorRef::V1(&l.bv)));
            out.push((p("wo"), TensorRef::V2(&l.wo)));
            out.push((p("bo"), TensorRef::V1(&l.bo)));
            out.push((p("ln2_g"), TensorRef::V1(&l.ln2_g)));
            out.push((p("ln2_b"), TensorRef::V1(&l.ln2_b)));
            out.push((p("w1"), TensorRef::V2(&l.w1)));
            out.push((p("b1"), TensorRef::V1(&l.b1)));
            out.push((p("w2"), TensorRef::V2(&l.w2)));
            out.push((p("b2"), TensorRef::V1(&l.b2)));
        }
        out.push(("ln_f_g".into(), TensorRef::V1(&self.ln_f_g)));
        out.push(("ln_f_b".into(), TensorRef::V1(&self.ln_f_b)));
        out.push(("head_w".into(), TensorRef::V2(&self.head_w)));
        out.push(("head_b".into(), TensorRef::V1(&self.head_b)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_, F>)> {
        let mut out: Vec<(String, TensorMut<'_, F>)> = Vec::new();
        if let Some(e) = &mut self.encoder {
            out.push(("encoder.w1".into(), TensorMut::V2(&mut e.w1)));
            out.push(("encoder.b1".into(), TensorMut::V1(&mut e.b1)));
            out.push(("encoder.w2".into(), TensorMut::V2(&mut e.w2)));
            out.push(("encoder.b2".into(), TensorMut::V1(&mut e.b2)));
        }
        out.push(("label_embed".into(), TensorMut::V2(&mut self.label_embed)));
        out.push(("unknown".into(), TensorMut::V1(&mut self.unknown)));
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("ln1_g"), TensorMut::V1(&mut l.ln1_g)));
            out.push((p("ln1_b"), TensorMut::V1(&mut l.ln1_b)));
            out.push((p("wq"), TensorMut::V2(&mut l.wq)));
            out.push((p("bq"), TensorMut::V1(&mut l.bq)));
            out.push((p("wk"), TensorMut::V2(&mut l.wk)));
            out.push((p("bk"), TensorMut::V1(&mut l.bk)));
            out.push((p("wv"), TensorMut::V2(&mut l.wv)));
            out.push((p("bv"), TensorMut::V1(&mut l.bv)));
            out.push((p("wo"), TensorMut::V2(&mut l.wo)));
            out.push((p("bo"), TensorMut::V1(&mut l.bo)));
            out.push((p("ln2_g"), TensorMut::V1(&mut l.ln2_g)));
            out.push((p("ln2_b"), TensorMut::V1(&mut l.ln2_b)));
            out.push((p("w1"), TensorMut::V2(&mut l.w1)));
            out.push((p("b1"), TensorMut::V1(&mut l.b1)));
            out.push((p("w2"), TensorMut::V2(&mut l.w2)));
            out.push((p("b2"), TensorMut::V1(&mut l.b2)));
        }
        out.push(("ln_f_g".into(), TensorMut::V1(&mut self.ln_f_g)));
        out.push(("ln_f_b".into(), TensorMut::V1(&mut self.ln_f_b)));
        out.push(("head_w".into(), TensorMut::V2(&mut self.head_w)));
        out.push(("head_b".into(), TensorMut::V1(&mut self.head_b)));
        out
    }

    /// Flat views over all parameters, in tensor order.
    pub fn flat(&self) -> Vec<&[F]> {
        self.tensors()
            .into_iter()
            .map(|(_, t)| match t {
                TensorRef::V1(a) => a.as_slice().expect("standard layout"),
                TensorRef::V2(a) => a.as_slice().expect("standard layout"),
            })
            .collect()
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [F]> {
        self.tensors_mut()
            .into_iter()
            .map(|(_, t)| match t {
                TensorMut::V1(a) => a.as_slice_mut().expect("standard layout"),
                TensorMut::V2(a) => a.as_slice_mut().expect("standard layout"),
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.flat().iter().map(|s| s.len()).sum()
    }

    /// True when every tensor entry is finite.
    pub fn all_finite(&self) -> bool {
        self.flat().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::desk(16, 5);
        let a: ModelParams<f32> = init_params(&cfg).unwrap();
        let b: ModelParams<f32> = init_params(&cfg).unwrap();
        for (x, y) in a.flat().iter().zip(b.flat().iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            feat_mode: FeatMode::Identity,
            feat_in: 16,
            feat_width: 16,
            label_width: 4,
            n_layers: 2,
            n_heads: 3,
            mlp_width: 32,
            n_ways_max: 5,
            seed: 1,
        };
        assert!(init_params::<f32>(&cfg).is_err());
    }

    #[test]
    fn paper_preset_head_shape() {
        let cfg = ModelConfig::paper(1);
        let p: ModelParams<f32> = init_params(&cfg).unwrap();
        assert_eq!(p.head_w.shape(), &[2304, 5]);
        assert_eq!(p.head_b.len(), 5);
    }

    #[test]
    fn identity_mode_has_no_encoder_tensors() {
        let cfg = ModelConfig::desk(16, 2);
        let p: ModelParams<f32> = init_params(&cfg).unwrap();
        assert!(p.encoder.is_none());
        assert!(p.tensors().iter().all(|(n, _)| !n.starts_with("encoder")));
    }

    #[test]
    fn trainable_mode_exposes_encoder() {
        let cfg = ModelConfig {
            feat_mode: FeatMode::TrainableMlp,
            feat_in: 10,
            feat_width: 16,
            ..ModelConfig::desk(16, 2)
        };
        let p: ModelParams<f32> = init_params(&cfg).unwrap();
        assert!(p.encoder.is_some());
        assert_eq!(p.tensors()[0].0, "encoder.w1");
    }
}

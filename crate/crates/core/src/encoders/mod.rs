//! Siamese dual encoder mapping ground panoramas and aerial images to
//! unit-norm embeddings.
//!
//! Both branches are toy backbones with hand-written backward passes. With
//! `share_weights` there is a single parameter set that both views read and
//! update.

pub(crate) mod layers;
mod toy_attention;
mod toy_conv;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{AerialImage, Image, PanoramaImage};
use crate::losses::EmbeddingBatch;

use toy_attention::{AttentionTape, ToyAttention};
use toy_conv::{ConvTape, ToyConv};

pub use toy_attention::{BLOCKS as ATTENTION_BLOCKS, MLP_DIM as ATTENTION_MLP_DIM, MODEL_DIM as ATTENTION_MODEL_DIM, PATCH as ATTENTION_PATCH};
pub use toy_conv::CONV_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ToyConv,
    ToyAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backbone: BackboneKind,
    pub embed_dim: usize,
    pub share_weights: bool,
    /// Limited-FoV ground views are zero-padded back to full width.
    pub pad_inputs_to_full: bool,
    pub in_channels: usize,
    /// Ground input `[height, width]`; fixes the attention positional grid.
    pub ground_size: [usize; 2],
    /// Aerial input side length; fixes the attention positional grid.
    pub aerial_size: usize,
    /// Pooling grid `[rows, cols]` of the conv backbone.
    pub pool_grid: [usize; 2],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::ToyConv,
            embed_dim: 64,
            share_weights: true,
            pad_inputs_to_full: false,
            in_channels: 3,
            ground_size: [32, 128],
            aerial_size: 64,
            pool_grid: [2, 4],
        }
    }
}

impl EncoderConfig {
    /// Attention preset: separate branches, padded inputs.
    pub fn attention() -> Self {
        Self { backbone: BackboneKind::ToyAttention, share_weights: false, pad_inputs_to_full: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, message: String| Err(Error::Config { key: format!("encoder.{key}"), message });
        if self.embed_dim < 8 {
            return err("embed_dim", format!("must be at least 8, got {}", self.embed_dim));
        }
        if self.in_channels == 0 {
            return err("in_channels", "must be positive".into());
        }
        if self.pool_grid.contains(&0) {
            return err("pool_grid", format!("entries must be positive, got {:?}", self.pool_grid));
        }
        if self.backbone == BackboneKind::ToyAttention {
            if !self.pad_inputs_to_full {
                return err("pad_inputs_to_full", "toy_attention has a fixed positional grid and requires padded inputs".into());
            }
            let [h, w] = self.ground_size;
            for (key, v) in [("ground_size", h), ("ground_size", w), ("aerial_size", self.aerial_size)] {
                if v == 0 || v % toy_attention::PATCH != 0 {
                    return err(key, format!("must be a positive multiple of {}, got {v}", toy_attention::PATCH));
                }
            }
            let ground_tokens = (h / toy_attention::PATCH) * (w / toy_attention::PATCH);
            let aerial_tokens = (self.aerial_size / toy_attention::PATCH).pow(2);
            if self.share_weights && ground_tokens != aerial_tokens {
                return err(
                    "share_weights",
                    format!("shared attention weights need equal token grids, got {ground_tokens} ground vs {aerial_tokens} aerial"),
                );
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Backbone {
    Conv(ToyConv),
    Attention(ToyAttention),
}

#[derive(Debug, Clone)]
enum BackboneTape {
    Conv(ConvTape),
    Attention(AttentionTape),
}

/// Everything a backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    branch: usize,
    inner: BackboneTape,
    embedding: Vec<f64>,
    norm: f64,
}

/// One backbone with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    backbone: Backbone,
    params: Vec<ParamTensor>,
}

impl Branch {
    fn new(backbone: Backbone, rng: &mut ChaCha8Rng) -> Self {
        let layout = match &backbone {
            Backbone::Conv(b) => b.layout(),
            Backbone::Attention(b) => b.layout(),
        };
        let params = layout
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let bound = if fan_in == 0 { 0.02 } else { 1.0 / (fan_in as f64).sqrt() };
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                ParamTensor { name, shape, data }
            })
            .collect();
        Self { backbone, params }
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    fn in_channels(&self) -> usize {
        match &self.backbone {
            Backbone::Conv(b) => b.in_channels(),
            Backbone::Attention(b) => b.in_channels(),
        }
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.channels() != self.in_channels() {
            return Err(Error::shape(format!("{} channels", self.in_channels()), format!("{} channels", image.channels())));
        }
        if let Backbone::Attention(b) = &self.backbone {
            let (h, w) = b.input_size();
            if (image.height(), image.width()) != (h, w) {
                return Err(Error::shape(format!("{h}x{w} input"), format!("{}x{}", image.height(), image.width())));
            }
        }
        Ok(())
    }

    fn forward(&self, image: &Image) -> Result<(Vec<f64>, BackboneTape)> {
        self.check_input(image)?;
        let planar = image.to_planar_f64();
        let (y, tape) = match &self.backbone {
            Backbone::Conv(b) => {
                let (y, t) = b.forward(&self.params, &planar, image.height(), image.width());
                (y, BackboneTape::Conv(t))
            }
            Backbone::Attention(b) => {
                let (y, t) = b.forward(&self.params, &planar);
                (y, BackboneTape::Attention(t))
            }
        };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder produced a non-finite activation".into()));
        }
        Ok((y, tape))
    }

    fn backward(&self, tape: &BackboneTape, d_y: &[f64], grads: &mut [Vec<f64>]) {
        match (&self.backbone, tape) {
            (Backbone::Conv(b), BackboneTape::Conv(t)) => b.backward(&self.params, t, d_y, grads),
            (Backbone::Attention(b), BackboneTape::Attention(t)) => b.backward(&self.params, t, d_y, grads),
            _ => unreachable!("tape recorded by a different backbone"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Ground,
    Aerial,
}

/// Gradient buffers shaped like the encoder's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub branches: Vec<Vec<Vec<f64>>>,
}

impl EncoderGrads {
    pub fn scale(&mut self, s: f64) {
        for v in self.branches.iter_mut().flatten().flatten() {
            *v *= s;
        }
    }

    pub fn add(&mut self, other: &EncoderGrads) {
        for (a, b) in self.branches.iter_mut().flatten().zip(other.branches.iter().flatten()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    config: EncoderConfig,
    branches: Vec<Branch>,
}

impl DualEncoder {
    /// Parameters are drawn uniformly in `±1/√fan_in` (positional grids
    /// `±0.02`) from a ChaCha stream seeded with `seed`.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = (config.pool_grid[0], config.pool_grid[1]);
        let make = |view: View| match config.backbone {
            BackboneKind::ToyConv => Backbone::Conv(ToyConv::new(config.in_channels, grid, config.embed_dim)),
            BackboneKind::ToyAttention => {
                let (h, w) = match view {
                    View::Ground => (config.ground_size[0], config.ground_size[1]),
                    View::Aerial => (config.aerial_size, config.aerial_size),
                };
                Backbone::Attention(ToyAttention::new(config.in_channels, h, w, config.embed_dim))
            }
        };
        let mut branches = vec![Branch::new(make(View::Ground), &mut rng)];
        if !config.share_weights {
            branches.push(Branch::new(make(View::Aerial), &mut rng));
        }
        Ok(Self { config, branches })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn branch_index(&self, view: View) -> usize {
        match view {
            View::Aerial if !self.config.share_weights => 1,
            _ => 0,
        }
    }

    pub fn branch(&self, view: View) -> &Branch {
        &self.branches[self.branch_index(view)]
    }

    pub fn ground_branch(&self) -> &Branch {
        self.branch(View::Ground)
    }

    pub fn aerial_branch(&self) -> &Branch {
        self.branch(View::Aerial)
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branches_mut(&mut self) -> &mut [Branch] {
        &mut self.branches
    }

    /// Distinct parameters (shared weights counted once).
    pub fn parameter_count(&self) -> usize {
        self.branches.iter().map(Branch::parameter_count).sum()
    }

    /// Checkpoint prefix of each branch, in branch order.
    pub fn branch_prefixes(&self) -> &'static [&'static str] {
        if self.config.share_weights {
            &["shared"]
        } else {
            &["ground", "aerial"]
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, &ParamTensor)> {
        self.branch_prefixes()
            .iter()
            .zip(&self.branches)
            .flat_map(|(prefix, b)| b.params.iter().map(move |p| (format!("{prefix}.{}", p.name), p)))
            .collect()
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            branches: self
                .branches
                .iter()
                .map(|b| b.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
                .collect(),
        }
    }

    /// Unit-norm embedding of one image plus the tape for [`backward`](Self::backward).
    pub fn forward(&self, view: View, image: &Image) -> Result<(Vec<f64>, Tape)> {
        let branch = self.branch_index(view);
        let (y, inner) = self.branches[branch].forward(image)?;
        let (embedding, norm) = layers::l2_normalize(&y);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::NonFinite(format!("embedding norm {norm}")));
        }
        Ok((embedding.clone(), Tape { branch, inner, embedding, norm }))
    }

    /// Accumulates parameter gradients for `d_embedding` (the gradient with
    /// respect to the unit-norm output of [`forward`](Self::forward)).
    pub fn backward(&self, tape: &Tape, d_embedding: &[f64], grads: &mut EncoderGrads) {
        let d_y = layers::l2_normalize_backward(&tape.embedding, tape.norm, d_embedding);
        self.branches[tape.branch].backward(&tape.inner, &d_y, &mut grads.branches[tape.branch]);
    }

    fn encode(&self, view: View, images: &[&Image]) -> Result<EmbeddingBatch> {
        let first = images.first().ok_or_else(|| Error::invalid("cannot encode an empty batch"))?;
        let mut data = Vec::with_capacity(images.len() * self.config.embed_dim);
        for img in images {
            if img.shape() != first.shape() {
                return Err(Error::shape(format!("{:?}", first.shape()), format!("{:?}", img.shape())));
            }
            let (e, _) = self.forward(view, img)?;
            data.extend(e);
        }
        EmbeddingBatch::new(images.len(), self.config.embed_dim, data)
    }

    pub fn encode_ground(&self, images: &[PanoramaImage]) -> Result<EmbeddingBatch> {
        let refs: Vec<&Image> = images.iter().map(|p| &p.image).collect();
        self.encode(View::Ground, &refs)
    }

    pub fn encode_aerial(&self, images: &[AerialImage]) -> Result<EmbeddingBatch> {
        let refs: Vec<&Image> = images.iter().map(|a| a.image()).collect();
        self.encode(View::Aerial, &refs)
    }
}

/// Anything that can embed both views; evaluation runs against this.
pub trait Embedder {
    fn embed_ground(&self, images: &[PanoramaImage]) -> Result<EmbeddingBatch>;
    fn embed_aerial(&self, images: &[AerialImage]) -> Result<EmbeddingBatch>;
    /// Whether limited-FoV ground views must be padded back to full width.
    fn pads_ground_inputs(&self) -> bool {
        false
    }
}

impl Embedder for DualEncoder {
    fn embed_ground(&self, images: &[PanoramaImage]) -> Result<EmbeddingBatch> {
        self.encode_ground(images)
    }

    fn embed_aerial(&self, images: &[AerialImage]) -> Result<EmbeddingBatch> {
        self.encode_aerial(images)
    }

    fn pads_ground_inputs(&self) -> bool {
        self.config.pad_inputs_to_full
    }
}

//! Batch construction over the four image streams and the optimization loop.
//!
//! Every batch item draws an orientation `θ ~ U[0, 360)`, a uniform `u` that
//! picks the FoV inside the configured range, and a quarter turn `k ∈ {1,2,3}`,
//! whatever the configuration. Ablated or baseline runs therefore consume the
//! random stream exactly like the full model does.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LocationRecord, Split};
use crate::encoders::{DualEncoder, EncoderConfig, EncoderGrads, Tape, View};
use crate::error::{Error, Result};
use crate::image::{AerialImage, Image, PanoramaImage};
use crate::losses::{paired_loss, soft_triplet_loss, BaseLoss, EmbeddingBatch, LossComponents, LossConfig};
use crate::transforms::{aerial_rotate_with_shift, apply_ground_transform, QuarterTurn, TransformSpec};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// FoV range of the "+FoV" augmentation baseline.
pub const AUG_FOV_RANGE: (f64, f64) = (70.0, 360.0);
/// FoV range used when the training FoV is `"random"`.
pub const RANDOM_ALPHA_RANGE: (f64, f64) = (180.0, 360.0);

/// FoV of the transformed training queries: a fixed angle, a `[min, max]`
/// range, or `"random"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AlphaRepr", into = "AlphaRepr")]
pub enum TrainAlpha {
    Fixed(f64),
    Range { min: f64, max: f64 },
    Random,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AlphaRepr {
    Fixed(f64),
    Range([f64; 2]),
    Named(String),
}

impl TryFrom<AlphaRepr> for TrainAlpha {
    type Error = String;

    fn try_from(r: AlphaRepr) -> std::result::Result<Self, String> {
        let alpha = match r {
            AlphaRepr::Fixed(a) => TrainAlpha::Fixed(a),
            AlphaRepr::Range([min, max]) => TrainAlpha::Range { min, max },
            AlphaRepr::Named(s) if s == "random" => TrainAlpha::Random,
            AlphaRepr::Named(s) => return Err(format!("expected a number, [min, max] or \"random\", got \"{s}\"")),
        };
        alpha.check().map(|_| alpha)
    }
}

impl From<TrainAlpha> for AlphaRepr {
    fn from(a: TrainAlpha) -> Self {
        match a {
            TrainAlpha::Fixed(v) => AlphaRepr::Fixed(v),
            TrainAlpha::Range { min, max } => AlphaRepr::Range([min, max]),
            TrainAlpha::Random => AlphaRepr::Named("random".into()),
        }
    }
}

impl TrainAlpha {
    fn check(self) -> std::result::Result<(), String> {
        let ok = |a: f64| a > 0.0 && a <= 360.0;
        match self {
            TrainAlpha::Fixed(a) if !ok(a) => Err(format!("FoV must lie in (0, 360], got {a}")),
            TrainAlpha::Range { min, max } if !(ok(min) && ok(max) && min <= max) => {
                Err(format!("FoV range must satisfy 0 < min <= max <= 360, got [{min}, {max}]"))
            }
            _ => Ok(()),
        }
    }

    /// Maps a uniform draw `u ∈ [0, 1)` to an angle.
    pub fn sample(self, u: f64) -> f64 {
        match self {
            TrainAlpha::Fixed(a) => a,
            TrainAlpha::Range { min, max } => min + u * (max - min),
            TrainAlpha::Random => RANDOM_ALPHA_RANGE.0 + u * (RANDOM_ALPHA_RANGE.1 - RANDOM_ALPHA_RANGE.0),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

impl Schedule {
    /// Learning rate for 0-based `step` of `total` steps.
    pub fn lr_at(self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine if total == 0 => base,
            Schedule::Cosine => {
                let t = (step.min(total)) as f64 / total as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Which ConGeo objectives run, and which transform components feed the
/// ground single-modal and the cross-modal objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub use_single_q: bool,
    pub use_single_r: bool,
    pub use_cross: bool,
    pub single_q_shift: bool,
    pub single_q_fov: bool,
    pub cross_shift: bool,
    pub cross_fov: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        Self {
            use_single_q: true,
            use_single_r: true,
            use_cross: true,
            single_q_shift: true,
            single_q_fov: true,
            cross_shift: true,
            cross_fov: true,
        }
    }

    /// Only the plain query/reference objective.
    pub fn vanilla() -> Self {
        Self { use_single_q: false, use_single_r: false, use_cross: false, ..Self::full() }
    }

    pub fn any_component(&self) -> bool {
        self.use_single_q || self.use_single_r || self.use_cross
    }
}

/// Plain data augmentation of the training queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugBaseline {
    pub shift: bool,
    pub fov: bool,
    /// Rotate the aerial by the drawn quarter turn and shift the panorama to match.
    pub rotate: bool,
}

impl AugBaseline {
    pub fn any(&self) -> bool {
        self.shift || self.fov || self.rotate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub train_alpha: TrainAlpha,
    pub ablation: AblationFlags,
    pub aug_baseline: AugBaseline,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.01,
            schedule: Schedule::Cosine,
            train_alpha: TrainAlpha::Fixed(180.0),
            ablation: AblationFlags::full(),
            aug_baseline: AugBaseline::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, message: String| Err(Error::Config { key: format!("train.{key}"), message });
        if self.batch_size < 2 {
            return err("batch_size", format!("must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err("weight_decay", format!("must be nonnegative, got {}", self.weight_decay));
        }
        if let Err(message) = self.train_alpha.check() {
            return err("train_alpha", message);
        }
        Ok(())
    }

    pub fn vanilla() -> Self {
        Self { ablation: AblationFlags::vanilla(), ..Self::default() }
    }
}

/// Random quantities drawn for one batch item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemDraw {
    pub theta_deg: f64,
    pub alpha_u: f64,
    pub turn: QuarterTurn,
}

/// `I_Q`, `I_Q*`, `I_R`, `I_R*` for one batch. `cross_queries` is present
/// only when the cross-modal transform differs from the ground single-modal one.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub queries: Vec<PanoramaImage>,
    pub transformed_queries: Vec<PanoramaImage>,
    pub cross_queries: Option<Vec<PanoramaImage>>,
    pub references: Vec<AerialImage>,
    pub rotated_references: Vec<AerialImage>,
    pub draws: Vec<ItemDraw>,
}

fn star_spec(draw: &ItemDraw, alpha: f64, shift: bool, fov: bool, pad: bool) -> TransformSpec {
    TransformSpec {
        theta_deg: if shift { draw.theta_deg } else { 0.0 },
        alpha_deg: if fov { alpha } else { 360.0 },
        pad_to_full: pad,
    }
}

/// Builds the four streams for `records` in the given order. `pad` zero-pads
/// limited-FoV views back to full width.
pub fn build_batch(records: &[&LocationRecord], cfg: &TrainConfig, pad: bool, rng: &mut impl Rng) -> Result<Batch> {
    if records.len() < 2 {
        return Err(Error::InsufficientRecords { needed: 2, available: records.len() });
    }
    let flags = &cfg.ablation;
    let aug = &cfg.aug_baseline;
    let n = records.len();
    let mut batch = Batch {
        ids: Vec::with_capacity(n),
        queries: Vec::with_capacity(n),
        transformed_queries: Vec::with_capacity(n),
        cross_queries: None,
        references: Vec::with_capacity(n),
        rotated_references: Vec::with_capacity(n),
        draws: Vec::with_capacity(n),
    };
    let separate_cross = (flags.single_q_shift, flags.single_q_fov) != (flags.cross_shift, flags.cross_fov);
    let mut cross = Vec::new();
    for rec in records {
        let draw = ItemDraw {
            theta_deg: rng.random_range(0.0..360.0),
            alpha_u: rng.random::<f64>(),
            turn: QuarterTurn::try_from(90 * rng.random_range(1..=3u32)).expect("quarter turn"),
        };
        let mut pano = rec.ground()?.into_owned();
        let mut aerial = rec.aerial()?.into_owned();
        if aug.rotate {
            (aerial, pano) = aerial_rotate_with_shift(&aerial, &pano, draw.turn);
        }
        let query = if aug.shift || aug.fov {
            let alpha = AUG_FOV_RANGE.0 + draw.alpha_u * (AUG_FOV_RANGE.1 - AUG_FOV_RANGE.0);
            apply_ground_transform(&pano, &star_spec(&draw, alpha, aug.shift, aug.fov, pad))?
        } else {
            pano.clone()
        };
        let alpha = cfg.train_alpha.sample(draw.alpha_u);
        batch
            .transformed_queries
            .push(apply_ground_transform(&pano, &star_spec(&draw, alpha, flags.single_q_shift, flags.single_q_fov, pad))?);
        if separate_cross {
            cross.push(apply_ground_transform(&pano, &star_spec(&draw, alpha, flags.cross_shift, flags.cross_fov, pad))?);
        }
        batch.rotated_references.push(aerial.rotate_ccw(draw.turn.turns()));
        batch.references.push(aerial);
        batch.queries.push(query);
        batch.ids.push(rec.id.clone());
        batch.draws.push(draw);
    }
    if separate_cross {
        batch.cross_queries = Some(cross);
    }
    Ok(batch)
}

/// Adaptive moment estimates for the encoder and the four log-temperatures.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: EncoderGrads,
    pub v: EncoderGrads,
    pub tau_m: [f64; 4],
    pub tau_v: [f64; 4],
}

/// One logged optimizer step. Temperatures are listed as `[τ_q, τ_r, τ_v, τ_c]`
/// after the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub losses: LossComponents,
    pub tau: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: DualEncoder,
    /// `ln τ` in the order `[q, r, v, c]`.
    pub log_tau: [f64; 4],
    pub adam: AdamState,
    pub step: u64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    /// Encoder parameters come from `seed`; the batch stream uses an
    /// independent ChaCha stream of the same seed.
    pub fn new(encoder: EncoderConfig, loss: &LossConfig, seed: u64) -> Result<Self> {
        loss.validate()?;
        let encoder = DualEncoder::init(encoder, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            adam: AdamState { m: encoder.zero_grads(), v: encoder.zero_grads(), tau_m: [0.0; 4], tau_v: [0.0; 4] },
            encoder,
            log_tau: [loss.tau_q.ln(), loss.tau_r.ln(), loss.tau_v.ln(), loss.tau_c.ln()],
            step: 0,
            epoch: 0,
            rng,
            history: Vec::new(),
        })
    }

    pub fn temperatures(&self) -> [f64; 4] {
        self.log_tau.map(f64::exp)
    }
}

struct Stream {
    embeddings: EmbeddingBatch,
    tapes: Vec<Tape>,
}

fn forward_stream(enc: &DualEncoder, view: View, images: &[&Image]) -> Result<Stream> {
    let mut data = Vec::with_capacity(images.len() * enc.config().embed_dim);
    let mut tapes = Vec::with_capacity(images.len());
    for img in images {
        let (e, tape) = enc.forward(view, img)?;
        data.extend(e);
        tapes.push(tape);
    }
    Ok(Stream { embeddings: EmbeddingBatch::new(images.len(), enc.config().embed_dim, data)?, tapes })
}

fn backward_stream(enc: &DualEncoder, stream: &Stream, d: &[f64], grads: &mut EncoderGrads) {
    let dim = stream.embeddings.dim();
    for (tape, g) in stream.tapes.iter().zip(d.chunks_exact(dim)) {
        if g.iter().any(|&v| v != 0.0) {
            enc.backward(tape, g, grads);
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn pano_refs(v: &[PanoramaImage]) -> Vec<&Image> {
    v.iter().map(|p| &p.image).collect()
}

fn aerial_refs(v: &[AerialImage]) -> Vec<&Image> {
    v.iter().map(AerialImage::image).collect()
}

/// Loss value and gradients of the configured total objective, without
/// touching the optimizer.
pub fn loss_and_gradients(
    state: &TrainState,
    batch: &Batch,
    loss: &LossConfig,
    flags: &AblationFlags,
) -> Result<(LossComponents, f64, EncoderGrads, [f64; 4])> {
    let enc = &state.encoder;
    let tau = state.temperatures();
    let q = forward_stream(enc, View::Ground, &pano_refs(&batch.queries))?;
    let r = forward_stream(enc, View::Aerial, &aerial_refs(&batch.references))?;
    let mut d_q = vec![0.0; q.embeddings.data().len()];
    let mut d_r = vec![0.0; r.embeddings.data().len()];
    let mut d_log_tau = [0.0; 4];
    let mut parts = LossComponents::default();

    match loss.base {
        BaseLoss::InfoNce => {
            let l = paired_loss(&q.embeddings, &r.embeddings, tau[2], loss.symmetric)?;
            parts.vanilla = l.value;
            axpy(&mut d_q, 1.0, &l.d_anchors);
            axpy(&mut d_r, 1.0, &l.d_candidates);
            d_log_tau[2] = l.d_tau * tau[2];
        }
        BaseLoss::SoftTriplet => {
            let l = soft_triplet_loss(&q.embeddings, &r.embeddings)?;
            parts.vanilla = l.value;
            axpy(&mut d_q, 1.0, &l.d_queries);
            axpy(&mut d_r, 1.0, &l.d_references);
        }
    }

    let mut grads = enc.zero_grads();
    let need_star = flags.use_single_q || (flags.use_cross && batch.cross_queries.is_none());
    let q_star = if need_star { Some(forward_stream(enc, View::Ground, &pano_refs(&batch.transformed_queries))?) } else { None };
    let mut d_q_star = vec![0.0; q.embeddings.data().len()];

    if flags.use_single_q {
        let qs = q_star.as_ref().expect("computed above");
        let l = paired_loss(&qs.embeddings, &q.embeddings, tau[0], loss.symmetric)?;
        parts.single_q = l.value;
        axpy(&mut d_q_star, loss.w1, &l.d_anchors);
        axpy(&mut d_q, loss.w1, &l.d_candidates);
        d_log_tau[0] = loss.w1 * l.d_tau * tau[0];
    }
    if flags.use_single_r {
        let rs = forward_stream(enc, View::Aerial, &aerial_refs(&batch.rotated_references))?;
        let l = paired_loss(&rs.embeddings, &r.embeddings, tau[1], loss.symmetric)?;
        parts.single_r = l.value;
        let mut d_rs = vec![0.0; l.d_anchors.len()];
        axpy(&mut d_rs, loss.w2, &l.d_anchors);
        axpy(&mut d_r, loss.w2, &l.d_candidates);
        d_log_tau[1] = loss.w2 * l.d_tau * tau[1];
        backward_stream(enc, &rs, &d_rs, &mut grads);
    }
    if flags.use_cross {
        let separate = match &batch.cross_queries {
            Some(c) => Some(forward_stream(enc, View::Ground, &pano_refs(c))?),
            None => None,
        };
        let qc = separate.as_ref().unwrap_or_else(|| q_star.as_ref().expect("computed above"));
        let l = paired_loss(&qc.embeddings, &r.embeddings, tau[3], loss.symmetric)?;
        parts.cross = l.value;
        axpy(&mut d_r, loss.w3, &l.d_candidates);
        d_log_tau[3] = loss.w3 * l.d_tau * tau[3];
        match &separate {
            Some(s) => {
                let mut d_c = vec![0.0; l.d_anchors.len()];
                axpy(&mut d_c, loss.w3, &l.d_anchors);
                backward_stream(enc, s, &d_c, &mut grads);
            }
            None => axpy(&mut d_q_star, loss.w3, &l.d_anchors),
        }
    }
    if let Some(qs) = &q_star {
        backward_stream(enc, qs, &d_q_star, &mut grads);
    }
    backward_stream(enc, &q, &d_q, &mut grads);
    backward_stream(enc, &r, &d_r, &mut grads);

    let cfg = LossConfig {
        w1: if flags.use_single_q { loss.w1 } else { 0.0 },
        w2: if flags.use_single_r { loss.w2 } else { 0.0 },
        w3: if flags.use_cross { loss.w3 } else { 0.0 },
        ..*loss
    };
    let total = crate::losses::total_loss(&parts, &cfg);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss {total} ({parts:?}) at step {}; batch ids: {}",
            state.step,
            batch.ids.join(",")
        )));
    }
    Ok((parts, total, grads, d_log_tau))
}

#[allow(clippy::too_many_arguments)]
fn adam_update(p: &mut f64, m: &mut f64, v: &mut f64, g: f64, lr: f64, wd: f64, c1: f64, c2: f64) {
    *p *= 1.0 - lr * wd;
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
}

/// One AdamW update of encoder parameters and log-temperatures against the
/// total loss; `total_steps` sizes the learning-rate schedule.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    loss: &LossConfig,
    cfg: &TrainConfig,
    total_steps: u64,
) -> Result<StepRecord> {
    let (parts, total, grads, d_log_tau) = loss_and_gradients(state, batch, loss, &cfg.ablation)?;
    let lr = cfg.schedule.lr_at(cfg.lr, state.step, total_steps);
    let t = (state.step + 1) as i32;
    let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    let wd = cfg.weight_decay;

    let adam = &mut state.adam;
    for (bi, branch) in state.encoder.branches_mut().iter_mut().enumerate() {
        for (pi, param) in branch.params_mut().iter_mut().enumerate() {
            let g = &grads.branches[bi][pi];
            let m = &mut adam.m.branches[bi][pi];
            let v = &mut adam.v.branches[bi][pi];
            for (((p, m), v), &g) in param.data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                adam_update(p, m, v, g, lr, wd, c1, c2);
            }
        }
    }
    let tau_state = state.log_tau.iter_mut().zip(adam.tau_m.iter_mut()).zip(adam.tau_v.iter_mut());
    for (((p, m), v), g) in tau_state.zip(d_log_tau) {
        adam_update(p, m, v, g, lr, wd, c1, c2);
    }
    let tau = state.temperatures();
    if tau.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(Error::NonFinite(format!("temperatures {tau:?} after step {}", state.step)));
    }
    let record = StepRecord { epoch: state.epoch, step: state.step, lr, total, losses: parts, tau };
    state.step += 1;
    state.history.push(record.clone());
    Ok(record)
}

/// Progress notifications from [`fit`].
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    EpochEnd(&'a TrainState),
}

pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train / batch_size
}

/// Runs epochs `state.epoch..cfg.epochs` over the train split. Each epoch
/// reshuffles with the state's generator and drops the incomplete last batch.
pub fn fit(
    state: &mut TrainState,
    records: &[LocationRecord],
    loss: &LossConfig,
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    loss.validate()?;
    let train: Vec<&LocationRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    if cfg.epochs > state.epoch && train.len() < cfg.batch_size {
        return Err(Error::InsufficientRecords { needed: cfg.batch_size, available: train.len() });
    }
    let per_epoch = steps_per_epoch(train.len(), cfg.batch_size);
    let total_steps = (cfg.epochs * per_epoch) as u64;
    let pad = state.encoder.config().pad_inputs_to_full;
    while state.epoch < cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut state.rng);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let recs: Vec<&LocationRecord> = chunk.iter().map(|&i| train[i]).collect();
            let batch = build_batch(&recs, cfg, pad, &mut state.rng)?;
            let record = train_step(state, &batch, loss, cfg, total_steps)?;
            on_event(TrainEvent::Step(&record))?;
        }
        state.epoch += 1;
        on_event(TrainEvent::EpochEnd(state))?;
    }
    Ok(())
}

pub fn train(records: &[LocationRecord], encoder: &EncoderConfig, loss: &LossConfig, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let mut state = TrainState::new(encoder.clone(), loss, cfg.seed)?;
    fit(&mut state, records, loss, cfg, &mut |_| Ok(()))?;
    Ok(state)
}

/// Vanilla objective only, with the training queries replaced by their
/// augmented variants per `cfg.aug_baseline`.
pub fn train_augmentation_baseline(
    records: &[LocationRecord],
    encoder: &EncoderConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    let cfg = TrainConfig { ablation: AblationFlags::vanilla(), ..cfg.clone() };
    train(records, encoder, loss, &cfg)
}

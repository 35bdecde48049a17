//! Ground-view variations (orientation shift, FoV crop), paired aerial
//! rotation, unseen-variation perturbations, and the aerial polar unwrap.
//!
//! Every function here is pure; the randomized ones take an explicit seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{AerialImage, Image, PanoramaImage};

/// Noise standard deviation per severity level, as a fraction of the `[0, 1]`
/// dynamic range.
pub const NOISE_STD_BY_SEVERITY: [f32; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
/// Motion-blur kernel length in pixels per severity level.
pub const BLUR_LENGTH_BY_SEVERITY: [usize; 5] = [3, 5, 7, 9, 15];

pub const MIN_ZOOM: f64 = 0.5;
pub const MAX_ZOOM: f64 = 2.0;

#[inline]
fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Column offset for an azimuth shift of `theta_deg` on a `width`-column panorama.
pub fn shift_columns(width: usize, theta_deg: f64) -> usize {
    let theta = theta_deg.rem_euclid(360.0);
    let k = round_half_up(width as f64 * theta / 360.0) as usize;
    k % width
}

/// Content width kept by a FoV crop.
pub fn fov_width(width: usize, alpha_deg: f64) -> usize {
    round_half_up(width as f64 * alpha_deg / 360.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub theta_deg: f64,
    pub alpha_deg: f64,
    #[serde(default)]
    pub pad_to_full: bool,
}

impl TransformSpec {
    pub fn new(theta_deg: f64, alpha_deg: f64, pad_to_full: bool) -> Result<Self> {
        let spec = Self { theta_deg, alpha_deg, pad_to_full };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity() -> Self {
        Self { theta_deg: 0.0, alpha_deg: 360.0, pad_to_full: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..360.0).contains(&self.theta_deg) {
            return Err(Error::invalid(format!("theta {} outside [0, 360)", self.theta_deg)));
        }
        validate_alpha(self.alpha_deg)
    }
}

fn validate_alpha(alpha_deg: f64) -> Result<()> {
    if !(alpha_deg > 0.0 && alpha_deg <= 360.0) {
        return Err(Error::invalid(format!("FoV {alpha_deg} outside (0, 360]")));
    }
    Ok(())
}

/// Rolls the panorama left so that the center column afterwards shows the
/// azimuth that was `theta_deg` to the right of it.
pub fn cyclic_shift(pano: &PanoramaImage, theta_deg: f64) -> PanoramaImage {
    let w = pano.width();
    let k = shift_columns(w, theta_deg);
    PanoramaImage {
        image: pano.image.roll_columns_left(k),
        north_column: (pano.north_column + w - k) % w,
    }
}

/// Keeps `round(W·α/360)` columns centered on the current center column.
/// With `pad_to_full` the kept columns stay where they were and everything
/// else is zeroed, so the output keeps width `W`.
///
/// Without padding, `north_column` is re-expressed in the crop's columns
/// modulo the original width; it can land outside the crop when North is
/// not in view.
pub fn fov_crop(pano: &PanoramaImage, alpha_deg: f64, pad_to_full: bool) -> Result<PanoramaImage> {
    validate_alpha(alpha_deg)?;
    let w = pano.width();
    let keep = fov_width(w, alpha_deg);
    if keep == 0 {
        return Err(Error::invalid(format!("FoV {alpha_deg} keeps no columns of a width-{w} panorama")));
    }
    if keep >= w {
        return Ok(pano.clone());
    }
    let start = (pano.center_column() + w - keep / 2) % w;
    let content = pano.image.wrapped_columns(start, keep);
    if pad_to_full {
        Ok(PanoramaImage { image: pad_centered(&content, w), north_column: pano.north_column })
    } else {
        Ok(PanoramaImage { image: content, north_column: (pano.north_column + w - start) % w })
    }
}

/// Places `content` in a zero image of `full_width` columns so that its
/// center column lands on `full_width / 2`.
pub fn pad_centered(content: &Image, full_width: usize) -> Image {
    let (h, cw, c) = content.shape();
    if cw >= full_width {
        return content.clone();
    }
    let left = full_width / 2 - cw / 2;
    let mut out = Image::zeros(h, full_width, c);
    for r in 0..h {
        for col in 0..cw {
            out.pixel_mut(r, left + col).copy_from_slice(content.pixel(r, col));
        }
    }
    out
}

/// Shift first, then crop.
pub fn apply_ground_transform(pano: &PanoramaImage, spec: &TransformSpec) -> Result<PanoramaImage> {
    spec.validate()?;
    fov_crop(&cyclic_shift(pano, spec.theta_deg), spec.alpha_deg, spec.pad_to_full)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum QuarterTurn {
    Deg90,
    Deg180,
    Deg270,
}

impl QuarterTurn {
    pub fn degrees(self) -> u32 {
        match self {
            QuarterTurn::Deg90 => 90,
            QuarterTurn::Deg180 => 180,
            QuarterTurn::Deg270 => 270,
        }
    }

    pub fn turns(self) -> usize {
        self.degrees() as usize / 90
    }
}

impl TryFrom<u32> for QuarterTurn {
    type Error = Error;

    fn try_from(deg: u32) -> Result<Self> {
        match deg {
            90 => Ok(QuarterTurn::Deg90),
            180 => Ok(QuarterTurn::Deg180),
            270 => Ok(QuarterTurn::Deg270),
            other => Err(Error::invalid(format!("rotation must be 90, 180 or 270 degrees, got {other}"))),
        }
    }
}

impl From<QuarterTurn> for u32 {
    fn from(q: QuarterTurn) -> u32 {
        q.degrees()
    }
}

/// Rotates the aerial counter-clockwise and shifts the panorama by the same
/// angle, so the view that ends up facing the aerial's top edge is the one
/// at the panorama's center column.
pub fn aerial_rotate_with_shift(
    aerial: &AerialImage,
    pano: &PanoramaImage,
    angle: QuarterTurn,
) -> (AerialImage, PanoramaImage) {
    (aerial.rotate_ccw(angle.turns()), cyclic_shift(pano, angle.degrees() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    RandomFov,
    Zoom,
    GaussianNoise,
    MotionBlur,
}

impl PerturbationKind {
    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::RandomFov => "random_fov",
            PerturbationKind::Zoom => "zoom",
            PerturbationKind::GaussianNoise => "gaussian_noise",
            PerturbationKind::MotionBlur => "motion_blur",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationSpec {
    /// FoV drawn uniformly from `[min_deg, max_deg]`.
    RandomFov { min_deg: f64, max_deg: f64 },
    /// Ratio drawn uniformly from `[min_ratio, max_ratio]`; `> 1` magnifies.
    Zoom { min_ratio: f64, max_ratio: f64 },
    GaussianNoise { severity: u8 },
    MotionBlur { severity: u8 },
}

impl PerturbationSpec {
    pub fn kind(&self) -> PerturbationKind {
        match self {
            PerturbationSpec::RandomFov { .. } => PerturbationKind::RandomFov,
            PerturbationSpec::Zoom { .. } => PerturbationKind::Zoom,
            PerturbationSpec::GaussianNoise { .. } => PerturbationKind::GaussianNoise,
            PerturbationSpec::MotionBlur { .. } => PerturbationKind::MotionBlur,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PerturbationSpec::RandomFov { min_deg, max_deg } => {
                validate_alpha(min_deg)?;
                validate_alpha(max_deg)?;
                if min_deg > max_deg {
                    return Err(Error::invalid(format!("FoV range [{min_deg}, {max_deg}] is empty")));
                }
            }
            PerturbationSpec::Zoom { min_ratio, max_ratio } => {
                let ok = |r: f64| (MIN_ZOOM..=MAX_ZOOM).contains(&r);
                if !ok(min_ratio) || !ok(max_ratio) || min_ratio > max_ratio {
                    return Err(Error::invalid(format!(
                        "zoom range [{min_ratio}, {max_ratio}] must lie within [{MIN_ZOOM}, {MAX_ZOOM}]"
                    )));
                }
            }
            PerturbationSpec::GaussianNoise { severity } | PerturbationSpec::MotionBlur { severity } => {
                if !(1..=5).contains(&severity) {
                    return Err(Error::invalid(format!("severity {severity} outside 1..=5")));
                }
            }
        }
        Ok(())
    }
}

fn draw_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Applies an unseen-variation perturbation to a ground view.
pub fn perturb(pano: &PanoramaImage, spec: &PerturbationSpec, seed: u64) -> Result<PanoramaImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *spec {
        PerturbationSpec::RandomFov { min_deg, max_deg } => {
            let alpha = draw_in(&mut rng, min_deg, max_deg);
            fov_crop(pano, alpha, false)
        }
        _ => Ok(PanoramaImage {
            image: perturb_with(&pano.image, spec, &mut rng)?,
            north_column: pano.north_column,
        }),
    }
}

/// Image-level perturbations (everything but `RandomFov`, which needs a
/// panorama).
pub fn perturb_image(image: &Image, spec: &PerturbationSpec, seed: u64) -> Result<Image> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_with(image, spec, &mut rng)
}

fn perturb_with(image: &Image, spec: &PerturbationSpec, rng: &mut ChaCha8Rng) -> Result<Image> {
    match *spec {
        PerturbationSpec::RandomFov { .. } => {
            Err(Error::invalid("random FoV applies to panoramas only"))
        }
        PerturbationSpec::Zoom { min_ratio, max_ratio } => {
            Ok(zoom(image, draw_in(rng, min_ratio, max_ratio)))
        }
        PerturbationSpec::GaussianNoise { severity } => {
            let std = NOISE_STD_BY_SEVERITY[severity as usize - 1];
            let mut out = image.clone();
            for v in out.data_mut() {
                let n: f32 = StandardNormal.sample(rng);
                *v += std * n;
            }
            Ok(out)
        }
        PerturbationSpec::MotionBlur { severity } => {
            Ok(motion_blur(image, BLUR_LENGTH_BY_SEVERITY[severity as usize - 1]))
        }
    }
}

/// Rescales about the image center; pixels mapping outside the source read
/// as zero.
pub fn zoom(image: &Image, ratio: f64) -> Image {
    if ratio == 1.0 {
        return image.clone();
    }
    let (h, w, c) = image.shape();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(h, w, c);
    let mut px = vec![0.0f32; c];
    for y in 0..h {
        for x in 0..w {
            let sy = cy + (y as f64 - cy) / ratio;
            let sx = cx + (x as f64 - cx) / ratio;
            image.sample_bilinear(sy, sx, &mut px);
            out.pixel_mut(y, x).copy_from_slice(&px);
        }
    }
    out
}

/// Horizontal box blur of `length` taps, edges clamped.
pub fn motion_blur(image: &Image, length: usize) -> Image {
    let (h, w, c) = image.shape();
    let half = (length / 2) as isize;
    let norm = 1.0 / length as f32;
    let mut out = Image::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for t in -half..=(length as isize - 1 - half) {
                    let sx = (x as isize + t).clamp(0, w as isize - 1) as usize;
                    acc += image.get(y, sx, ch);
                }
                out.set(y, x, ch, acc * norm);
            }
        }
    }
    out
}

/// Unwraps a square aerial into an `out_h × out_w` strip. The bottom row
/// samples the image center, the top row the inscribed circle's rim; column
/// `j` looks along azimuth `360°·(j − out_w/2)/out_w` clockwise from North.
pub fn polar_transform(aerial: &AerialImage, out_h: usize, out_w: usize) -> Result<PanoramaImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("polar output dimensions must be positive"));
    }
    let img = aerial.image();
    let s = aerial.size() as f64;
    let center = (s - 1.0) / 2.0;
    let max_radius = (s - 1.0) / 2.0;
    let c = img.channels();
    let mut out = Image::zeros(out_h, out_w, c);
    let mut px = vec![0.0f32; c];
    for i in 0..out_h {
        let radius = if out_h == 1 {
            0.0
        } else {
            max_radius * (out_h - 1 - i) as f64 / (out_h - 1) as f64
        };
        for j in 0..out_w {
            let phi = std::f64::consts::TAU * (j as f64 - (out_w / 2) as f64) / out_w as f64;
            let x = center + radius * phi.sin();
            let y = center - radius * phi.cos();
            img.sample_bilinear(y, x, &mut px);
            out.pixel_mut(i, j).copy_from_slice(&px);
        }
    }
    Ok(PanoramaImage::new(out))
}

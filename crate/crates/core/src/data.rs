//! Paired ground/aerial records: a synthetic generator with a tunable
//! road-direction shortcut, and a CSV manifest loader for on-disk datasets.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{AerialImage, Image, PanoramaImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// An image held in memory or a file read on access.
#[derive(Debug, Clone, PartialEq)]
pub enum Source<T> {
    Memory(T),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationRecord {
    pub id: String,
    pub ground: Source<PanoramaImage>,
    pub aerial: Source<AerialImage>,
    pub split: Split,
    /// Ids of other records showing the same aerial reference.
    pub peers: Vec<String>,
}

impl LocationRecord {
    pub fn ground(&self) -> Result<Cow<'_, PanoramaImage>> {
        match &self.ground {
            Source::Memory(p) => Ok(Cow::Borrowed(p)),
            Source::File(path) => Ok(Cow::Owned(PanoramaImage::new(Image::read_any(path)?))),
        }
    }

    pub fn aerial(&self) -> Result<Cow<'_, AerialImage>> {
        match &self.aerial {
            Source::Memory(a) => Ok(Cow::Borrowed(a)),
            Source::File(path) => Ok(Cow::Owned(AerialImage::new(Image::read_any(path)?)?)),
        }
    }
}

pub fn records_in_split(records: &[LocationRecord], split: Split) -> Vec<&LocationRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_locations: usize,
    /// The last `n_test` locations form the test split.
    pub n_test: usize,
    /// The `n_val` locations before the test block form the validation split.
    pub n_val: usize,
    /// `[height, width]`; the width spans 360° and must be divisible by 4.
    pub pano_size: [usize; 2],
    pub aerial_size: usize,
    /// 0 renders aerial roads at directions unrelated to the ground view,
    /// 1 renders them exactly where the panorama shows them.
    pub shortcut_strength: f64,
    /// Number of palette colors forming each location's identity signature.
    pub signature_channels: usize,
    /// Amplitude of the per-location ground tint shared by both views.
    pub tint_strength: f64,
    pub blobs: usize,
    pub roads: usize,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_locations: 640,
            n_test: 128,
            n_val: 0,
            pano_size: [32, 128],
            aerial_size: 64,
            shortcut_strength: 1.0,
            signature_channels: 3,
            tint_strength: 0.15,
            blobs: 6,
            roads: 3,
            pixel_noise: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, message: String| Err(Error::Config { key: format!("dataset.synthetic.{key}"), message });
        if self.n_locations == 0 {
            return err("n_locations", "must be positive".into());
        }
        if self.n_test + self.n_val > self.n_locations {
            return err("n_test", format!("test+val ({}) exceed n_locations ({})", self.n_test + self.n_val, self.n_locations));
        }
        let [h, w] = self.pano_size;
        if h < 4 || w < 4 || w % 4 != 0 {
            return err("pano_size", format!("need height >= 4 and width divisible by 4, got {h}x{w}"));
        }
        if self.aerial_size < 8 {
            return err("aerial_size", format!("must be at least 8, got {}", self.aerial_size));
        }
        if !(0.0..=1.0).contains(&self.shortcut_strength) {
            return err("shortcut_strength", format!("must lie in [0, 1], got {}", self.shortcut_strength));
        }
        if self.signature_channels == 0 {
            return err("signature_channels", "must be positive".into());
        }
        if !(self.tint_strength >= 0.0 && self.pixel_noise >= 0.0) {
            return err("pixel_noise", "noise and tint amplitudes must be nonnegative".into());
        }
        Ok(())
    }

    fn split_of(&self, index: usize) -> Split {
        let test_start = self.n_locations - self.n_test;
        let val_start = test_start - self.n_val;
        if index >= test_start {
            Split::Test
        } else if index >= val_start {
            Split::Val
        } else {
            Split::Train
        }
    }
}

const SKY: [f64; 3] = [0.6, 0.7, 0.85];
const GROUND: [f64; 3] = [0.45, 0.42, 0.35];
const ROAD: f32 = 0.15;

fn wrap_distance(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(period);
    d.min(period - d)
}

fn color(rgb: &[f64], channels: usize) -> Vec<f32> {
    (0..channels).map(|c| rgb[c % rgb.len()] as f32).collect()
}

/// Renders one location. Both views share a palette and a ground tint (the
/// identity signature, visible at any heading) and a set of roads, each of
/// which agrees in direction between the views with probability
/// `shortcut_strength`.
fn render_location(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (PanoramaImage, AerialImage) {
    let [h, w] = spec.pano_size;
    let s = spec.aerial_size;
    let ch = 3;
    let (hf, wf, sf) = (h as f64, w as f64, s as f64);
    let vscale = hf / 32.0;
    let hscale = wf / 128.0;
    let ascale = sf / 64.0;

    let palette: Vec<[f64; 3]> = (0..spec.signature_channels)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    let ground: Vec<f64> =
        GROUND.iter().map(|g| g + rng.random_range(-1.0..=1.0) * spec.tint_strength).collect();

    let mut pano = Image::zeros(h, w, ch);
    for r in 0..h {
        let fill = color(if r < h / 2 { &SKY } else { &ground }, ch);
        for c in 0..w {
            pano.pixel_mut(r, c).copy_from_slice(&fill);
        }
    }
    let ground_px = color(&ground, ch);
    let mut aerial = Image::zeros(s, s, ch);
    for y in 0..s {
        for x in 0..s {
            aerial.pixel_mut(y, x).copy_from_slice(&ground_px);
        }
    }
    let center = (sf - 1.0) / 2.0;

    for b in 0..spec.blobs {
        let px = color(&palette[b % palette.len()], ch);
        let az = rng.random_range(0.0..wf);
        let row = rng.random_range(10.0..18.0) * vscale;
        let half_w = rng.random_range(3.0..8.0) * hscale;
        let half_h = rng.random_range(3.0..6.0) * vscale;
        for r in 0..h {
            for c in 0..w {
                let u = wrap_distance(c as f64, az, wf) / half_w;
                let v = (r as f64 - row) / half_h;
                if u * u + v * v <= 1.0 {
                    pano.pixel_mut(r, c).copy_from_slice(&px);
                }
            }
        }
        let radius = rng.random_range(0.3..0.85) * sf / 2.0;
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (bx, by) = (center + radius * angle.sin(), center - radius * angle.cos());
        let br = rng.random_range(3.0..6.0) * ascale;
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 - bx, y as f64 - by);
                if dx * dx + dy * dy <= br * br {
                    aerial.pixel_mut(y, x).copy_from_slice(&px);
                }
            }
        }
    }

    let road_px = vec![ROAD; ch];
    for _ in 0..spec.roads {
        let phi = rng.random_range(0.0..360.0);
        // with probability `shortcut_strength` the aerial road points the same
        // way as in the panorama, otherwise in an unrelated direction
        let u = (rng.random_range(-1.0..=1.0) + 1.0) / 2.0;
        let strength = spec.shortcut_strength;
        let jitter = if u <= strength { 0.0 } else { (u - strength) / (1.0 - strength) * 360.0 };
        // panorama: a band widening towards the bottom edge
        let col = wf / 2.0 + phi / 360.0 * wf;
        for r in h / 2..h {
            let half = (0.5 + (r as f64 - hf / 2.0) / (hf / 2.0) * 6.0) * hscale;
            for c in 0..w {
                if wrap_distance(c as f64, col, wf) <= half {
                    pano.pixel_mut(r, c).copy_from_slice(&road_px);
                }
            }
        }
        // aerial: a ray from the center, clockwise from North
        let dir = (phi + jitter).to_radians();
        let (ux, uy) = (dir.sin(), -dir.cos());
        let half = 2.5 * ascale;
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 - center, y as f64 - center);
                let along = dx * ux + dy * uy;
                let perp = (dy * ux - dx * uy).abs();
                if along >= 0.0 && perp <= half {
                    aerial.pixel_mut(y, x).copy_from_slice(&road_px);
                }
            }
        }
    }

    if spec.pixel_noise > 0.0 {
        let noise = Normal::new(0.0, spec.pixel_noise).expect("validated noise level");
        for v in pano.data_mut().iter_mut().chain(aerial.data_mut().iter_mut()) {
            *v += noise.sample(rng) as f32;
        }
    }
    (PanoramaImage::new(pano), AerialImage::new(aerial).expect("square by construction"))
}

/// Deterministic in `spec` (seed included). Records are ordered by index;
/// ids are `loc00000`, `loc00001`, ...
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<LocationRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_locations)
        .map(|i| {
            let (ground, aerial) = render_location(spec, &mut rng);
            LocationRecord {
                id: format!("loc{i:05}"),
                ground: Source::Memory(ground),
                aerial: Source::Memory(aerial),
                split: spec.split_of(i),
                peers: Vec::new(),
            }
        })
        .collect())
}

const REQUIRED_COLUMNS: [&str; 4] = ["id", "ground_path", "aerial_path", "split"];

/// Reads a UTF-8 CSV manifest with header `id,ground_path,aerial_path,split`
/// and an optional `peers` column (ids separated by `;`). Relative image
/// paths resolve against the manifest's directory; files are not touched
/// until a record's images are accessed.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<LocationRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest_err = |line: usize, message: String| Error::Manifest { path: path.to_path_buf(), line, message };

    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut idx = [0usize; 4];
    for (slot, name) in idx.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = column(name).ok_or_else(|| manifest_err(1, format!("missing column `{name}`")))?;
    }
    let peers_col = column("peers");

    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            manifest_err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| row.get(i).map(str::trim).unwrap_or("");
        let id = field(idx[0]).to_string();
        if id.is_empty() {
            return Err(manifest_err(line, "empty id".into()));
        }
        if let Some(&first_line) = seen.get(&id) {
            return Err(Error::DuplicateId { id, first_line, second_line: line });
        }
        let (ground, aerial) = (field(idx[1]), field(idx[2]));
        if ground.is_empty() || aerial.is_empty() {
            return Err(manifest_err(line, format!("record `{id}` is missing an image path")));
        }
        let split = field(idx[3]).parse::<Split>().map_err(|e| manifest_err(line, e.to_string()))?;
        let peers = peers_col
            .map(|c| field(c).split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default();
        seen.insert(id.clone(), line);
        records.push(LocationRecord {
            id,
            ground: Source::File(base.join(ground)),
            aerial: Source::File(base.join(aerial)),
            split,
            peers,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    /// Lossless for 8-bit content only.
    Png,
    /// Raw float grids; exact.
    Raw,
}

/// Writes images plus `manifest.csv` in the layout [`load_manifest`] reads.
pub fn export_dataset(records: &[LocationRecord], dir: impl AsRef<Path>, format: ExportFormat) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["ground", "aerial"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let ext = match format {
        ExportFormat::Png => "png",
        ExportFormat::Raw => "bin",
    };
    let manifest = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest)?;
    writer.write_record(["id", "ground_path", "aerial_path", "split", "peers"])?;
    for r in records {
        let g_rel = format!("ground/{}.{ext}", r.id);
        let a_rel = format!("aerial/{}.{ext}", r.id);
        let (g, a) = (r.ground()?, r.aerial()?);
        match format {
            ExportFormat::Png => {
                g.image.write_png(dir.join(&g_rel))?;
                a.image().write_png(dir.join(&a_rel))?;
            }
            ExportFormat::Raw => {
                g.image.write_raw(dir.join(&g_rel))?;
                a.image().write_raw(dir.join(&a_rel))?;
            }
        }
        writer.write_record([r.id.as_str(), &g_rel, &a_rel, r.split.name(), &r.peers.join(";")])?;
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Two distinct street views of one location: the record itself and one of
/// its peers drawn uniformly. Used for the ground single-modal objective when
/// no full panorama exists.
pub fn sample_street_positive_pair(
    records: &[LocationRecord],
    location_id: &str,
    rng: &mut impl Rng,
) -> Result<(PanoramaImage, PanoramaImage)> {
    let anchor = records
        .iter()
        .find(|r| r.id == location_id)
        .ok_or_else(|| Error::invalid(format!("unknown location `{location_id}`")))?;
    let others: Vec<&LocationRecord> = anchor
        .peers
        .iter()
        .filter(|p| p.as_str() != location_id)
        .filter_map(|p| records.iter().find(|r| &r.id == p))
        .collect();
    if others.is_empty() {
        return Err(Error::Inapplicable(format!(
            "location `{location_id}` has a single street image; street-street positives need at least two"
        )));
    }
    let pick = if others.len() == 1 { 0 } else { rng.random_range(0..others.len()) };
    Ok((anchor.ground()?.into_owned(), others[pick].ground()?.into_owned()))
}

//! Evaluation protocols: north-aligned, unknown orientation, limited FoV and
//! unseen variations, plus the fixed-angle orientation sweep.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LocationRecord, Split};
use crate::encoders::Embedder;
use crate::error::{Error, Result};
use crate::image::{AerialImage, PanoramaImage};
use crate::retrieval::{rank_queries, Gallery, MetricsReport, RankedResult, DEFAULT_RECALL_KS};
use crate::transforms::{apply_ground_transform, cyclic_shift, pad_centered, perturb, PerturbationKind, PerturbationSpec, TransformSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    NorthAligned,
    UnknownOrientation,
    LimitedFov,
    UnseenVariation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSetting {
    pub kind: EvalKind,
    /// Query FoV for `LimitedFov`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl EvalSetting {
    pub fn north_aligned() -> Self {
        Self { kind: EvalKind::NorthAligned, alpha_deg: None, perturbation: None, seed: 0 }
    }

    pub fn unknown_orientation(seed: u64) -> Self {
        Self { kind: EvalKind::UnknownOrientation, alpha_deg: None, perturbation: None, seed }
    }

    pub fn limited_fov(alpha_deg: f64, seed: u64) -> Self {
        Self { kind: EvalKind::LimitedFov, alpha_deg: Some(alpha_deg), perturbation: None, seed }
    }

    pub fn unseen(perturbation: PerturbationSpec, seed: u64) -> Self {
        Self { kind: EvalKind::UnseenVariation, alpha_deg: None, perturbation: Some(perturbation), seed }
    }

    /// North-aligned, then unknown orientation at FoV 360, 180, 90 and 70.
    pub fn default_suite(seed: u64) -> Vec<Self> {
        vec![
            Self::north_aligned(),
            Self::unknown_orientation(seed),
            Self::limited_fov(180.0, seed),
            Self::limited_fov(90.0, seed),
            Self::limited_fov(70.0, seed),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            EvalKind::LimitedFov => match self.alpha_deg {
                Some(a) if a > 0.0 && a <= 360.0 => Ok(()),
                Some(a) => Err(Error::invalid(format!("limited-FoV setting needs alpha in (0, 360], got {a}"))),
                None => Err(Error::invalid("limited-FoV setting needs alpha_deg")),
            },
            EvalKind::UnseenVariation => match &self.perturbation {
                Some(p) => p.validate(),
                None => Err(Error::invalid("unseen-variation setting needs a perturbation")),
            },
            _ => Ok(()),
        }
    }

    /// Stable name used as a report key, e.g. `north_aligned`, `fov_90`.
    pub fn label(&self) -> String {
        match self.kind {
            EvalKind::NorthAligned => "north_aligned".into(),
            EvalKind::UnknownOrientation => "unknown_orientation".into(),
            EvalKind::LimitedFov => format!("fov_{}", self.alpha_deg.unwrap_or(f64::NAN)),
            EvalKind::UnseenVariation => match &self.perturbation {
                Some(p) => format!("unseen_{}", p.kind().name()),
                None => "unseen".into(),
            },
        }
    }
}

fn fnv1a(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for everything random about one query; depends only on `(seed, id)`.
pub fn query_seed(seed: u64, query_id: &str) -> u64 {
    fnv1a(seed, query_id)
}

/// Orientation in `[0, 360)` assigned to a query under random-orientation settings.
pub fn query_theta(seed: u64, query_id: &str) -> f64 {
    ChaCha8Rng::seed_from_u64(query_seed(seed, query_id)).random_range(0.0..360.0)
}

/// Test-split panoramas and the aerial gallery they are ranked against.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub query_ids: Vec<String>,
    pub queries: Vec<PanoramaImage>,
    pub aerials: Vec<AerialImage>,
    /// Gallery rows counting as correct for each query: its own aerial and
    /// those of its listed peers.
    pub positives: Vec<Vec<usize>>,
}

impl EvalSet {
    pub fn from_records(records: &[LocationRecord]) -> Result<Self> {
        let test: Vec<&LocationRecord> = records.iter().filter(|r| r.split == Split::Test).collect();
        if test.is_empty() {
            return Err(Error::InsufficientRecords { needed: 1, available: 0 });
        }
        let index: BTreeMap<&str, usize> = test.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
        let mut set = EvalSet { query_ids: Vec::new(), queries: Vec::new(), aerials: Vec::new(), positives: Vec::new() };
        for (i, r) in test.iter().enumerate() {
            set.query_ids.push(r.id.clone());
            set.queries.push(r.ground()?.into_owned());
            set.aerials.push(r.aerial()?.into_owned());
            let mut pos = vec![i];
            pos.extend(r.peers.iter().filter_map(|p| index.get(p.as_str()).copied()));
            pos.sort_unstable();
            pos.dedup();
            set.positives.push(pos);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// An evaluation set with its gallery embedded once.
pub struct Evaluator<'a, E: Embedder + ?Sized> {
    embedder: &'a E,
    set: &'a EvalSet,
    gallery: Gallery,
}

impl<'a, E: Embedder + ?Sized> Evaluator<'a, E> {
    pub fn new(embedder: &'a E, set: &'a EvalSet) -> Result<Self> {
        let refs = embedder.embed_aerial(&set.aerials)?;
        let gallery = Gallery::new(set.query_ids.clone(), refs)?;
        Ok(Self { embedder, set, gallery })
    }

    pub fn gallery(&self) -> &Gallery {
        &self.gallery
    }

    fn rank(&self, queries: &[PanoramaImage]) -> Result<Vec<RankedResult>> {
        let q = self.embedder.embed_ground(queries)?;
        rank_queries(&self.set.query_ids, &q, &self.gallery, &self.set.positives)
    }

    fn pad(&self, mut p: PanoramaImage, full_width: usize) -> PanoramaImage {
        if self.embedder.pads_ground_inputs() && p.width() < full_width {
            p.image = pad_centered(&p.image, full_width);
            p.north_column = full_width / 2;
        }
        p
    }

    /// Query images as seen under `setting`.
    pub fn transformed_queries(&self, setting: &EvalSetting) -> Result<Vec<PanoramaImage>> {
        setting.validate()?;
        let pad = self.embedder.pads_ground_inputs();
        self.set
            .queries
            .iter()
            .zip(&self.set.query_ids)
            .map(|(p, id)| match setting.kind {
                EvalKind::NorthAligned => Ok(p.clone()),
                EvalKind::UnknownOrientation => Ok(cyclic_shift(p, query_theta(setting.seed, id))),
                EvalKind::LimitedFov => {
                    let alpha = setting.alpha_deg.expect("validated");
                    apply_ground_transform(p, &TransformSpec { theta_deg: query_theta(setting.seed, id), alpha_deg: alpha, pad_to_full: pad })
                }
                EvalKind::UnseenVariation => {
                    let spec = setting.perturbation.as_ref().expect("validated");
                    Ok(self.pad(perturb(p, spec, query_seed(setting.seed, id))?, p.width()))
                }
            })
            .collect()
    }

    pub fn run_detailed(&self, setting: &EvalSetting) -> Result<(MetricsReport, Vec<RankedResult>)> {
        let results = self.rank(&self.transformed_queries(setting)?)?;
        Ok((MetricsReport::from_results(&results, &DEFAULT_RECALL_KS)?, results))
    }

    pub fn run(&self, setting: &EvalSetting) -> Result<MetricsReport> {
        self.run_detailed(setting).map(|(r, _)| r)
    }

    /// R@1 with every query shifted by exactly each angle.
    pub fn sweep(&self, angles: &[f64]) -> Result<SweepResult> {
        if angles.is_empty() {
            return Err(Error::invalid("orientation sweep needs at least one angle"));
        }
        if let Some(a) = angles.iter().find(|a| !a.is_finite()) {
            return Err(Error::invalid(format!("sweep angle {a} is not finite")));
        }
        let mut curve = Vec::with_capacity(angles.len());
        for &theta in angles {
            let shifted: Vec<PanoramaImage> = self.set.queries.iter().map(|p| cyclic_shift(p, theta)).collect();
            let results = self.rank(&shifted)?;
            curve.push(crate::retrieval::recall_at_k(&results, 1)?);
        }
        Ok(SweepResult::new(angles.to_vec(), curve))
    }

    pub fn unseen_suite(&self, suite: &[PerturbationSpec], seed: u64) -> Result<BTreeMap<PerturbationKind, MetricsReport>> {
        if suite.is_empty() {
            return Err(Error::invalid("unseen-variation suite is empty"));
        }
        let mut out = BTreeMap::new();
        for spec in suite {
            let report = self.run(&EvalSetting::unseen(*spec, seed))?;
            if out.insert(spec.kind(), report).is_some() {
                return Err(Error::invalid(format!("suite lists `{}` twice", spec.kind().name())));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub angles: Vec<f64>,
    pub recall_curve: Vec<f64>,
    /// `max − min` of the curve.
    pub invariance_gap: f64,
}

impl SweepResult {
    pub fn new(angles: Vec<f64>, recall_curve: Vec<f64>) -> Self {
        let max = recall_curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = recall_curve.iter().copied().fold(f64::INFINITY, f64::min);
        Self { angles, recall_curve, invariance_gap: max - min }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["angle_deg", "recall_at_1"])?;
        for (a, r) in self.angles.iter().zip(&self.recall_curve) {
            w.write_record([a.to_string(), r.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// `0, 22.5, …, 337.5`.
pub fn default_sweep_angles() -> Vec<f64> {
    (0..16).map(|i| i as f64 * 22.5).collect()
}

pub fn run_setting<E: Embedder + ?Sized>(embedder: &E, records: &[LocationRecord], setting: &EvalSetting) -> Result<MetricsReport> {
    let set = EvalSet::from_records(records)?;
    Evaluator::new(embedder, &set)?.run(setting)
}

pub fn orientation_sweep<E: Embedder + ?Sized>(embedder: &E, records: &[LocationRecord], angles: &[f64]) -> Result<SweepResult> {
    let set = EvalSet::from_records(records)?;
    Evaluator::new(embedder, &set)?.sweep(angles)
}

pub fn run_unseen_suite<E: Embedder + ?Sized>(
    embedder: &E,
    records: &[LocationRecord],
    suite: &[PerturbationSpec],
    seed: u64,
) -> Result<BTreeMap<PerturbationKind, MetricsReport>> {
    let set = EvalSet::from_records(records)?;
    Evaluator::new(embedder, &set)?.unseen_suite(suite, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::losses::EmbeddingBatch;

    fn records() -> Vec<LocationRecord> {
        let spec = SyntheticSpec { n_locations: 10, n_test: 8, pano_size: [16, 64], aerial_size: 32, ..Default::default() };
        generate_synthetic(&spec).unwrap()
    }

    /// Embeds the mean color of each view's ground half; invariant to
    /// panorama shifts and aerial rotations. Ground and aerial differ per location
    /// only through the tint they share.
    struct MeanColor;

    fn mean_color(img: &crate::image::Image, rows: std::ops::Range<usize>) -> Vec<f64> {
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for r in rows {
            for c in 0..img.width() {
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += img.get(r, c, k) as f64;
                }
                n += 1.0;
            }
        }
        acc.iter().map(|a| a / n).collect()
    }

    impl Embedder for MeanColor {
        fn embed_ground(&self, images: &[PanoramaImage]) -> Result<EmbeddingBatch> {
            let rows: Vec<f64> = images.iter().flat_map(|p| mean_color(&p.image, 0..p.height())).collect();
            EmbeddingBatch::from_unnormalized(images.len(), 3, rows)
        }
        fn embed_aerial(&self, images: &[AerialImage]) -> Result<EmbeddingBatch> {
            let rows: Vec<f64> = images.iter().flat_map(|a| mean_color(a.image(), 0..a.size())).collect();
            EmbeddingBatch::from_unnormalized(images.len(), 3, rows)
        }
    }

    /// Ground embedding equals the aerial embedding of the same location by
    /// looking the image up in a table.
    struct Oracle {
        ground: Vec<PanoramaImage>,
        dim: usize,
    }

    impl Oracle {
        fn one_hot(&self, i: usize) -> Vec<f64> {
            let mut v = vec![0.0; self.dim];
            v[i] = 1.0;
            v
        }
    }

    impl Embedder for Oracle {
        fn embed_ground(&self, images: &[PanoramaImage]) -> Result<EmbeddingBatch> {
            let rows: Vec<f64> = images
                .iter()
                .flat_map(|p| self.one_hot(self.ground.iter().position(|g| g == p).unwrap_or(self.dim - 1)))
                .collect();
            EmbeddingBatch::new(images.len(), self.dim, rows)
        }
        fn embed_aerial(&self, images: &[AerialImage]) -> Result<EmbeddingBatch> {
            let rows: Vec<f64> = (0..images.len()).flat_map(|i| self.one_hot(i)).collect();
            EmbeddingBatch::new(images.len(), self.dim, rows)
        }
    }

    #[test]
    fn oracle_north_aligned_is_perfect() {
        let recs = records();
        let set = EvalSet::from_records(&recs).unwrap();
        let oracle = Oracle { ground: set.queries.clone(), dim: set.len() + 1 };
        let rep = run_setting(&oracle, &recs, &EvalSetting::north_aligned()).unwrap();
        assert_eq!(rep.r1(), 1.0);
        assert_eq!(rep.n_gallery, 8);
    }

    #[test]
    fn invariant_encoder_ignores_orientation() {
        let recs = records();
        let north = run_setting(&MeanColor, &recs, &EvalSetting::north_aligned()).unwrap();
        let unknown = run_setting(&MeanColor, &recs, &EvalSetting::unknown_orientation(4)).unwrap();
        assert_eq!(north, unknown);
        let sweep = orientation_sweep(&MeanColor, &recs, &default_sweep_angles()).unwrap();
        assert_eq!(sweep.invariance_gap, 0.0);
        assert_eq!(sweep.recall_curve[0], north.r1());
    }

    #[test]
    fn unknown_equals_full_fov() {
        let recs = records();
        let set = EvalSet::from_records(&recs).unwrap();
        let oracle = Oracle { ground: set.queries.iter().map(|p| cyclic_shift(p, query_theta(9, "loc00003"))).collect(), dim: 9 };
        let a = run_setting(&oracle, &recs, &EvalSetting::unknown_orientation(9)).unwrap();
        let b = run_setting(&oracle, &recs, &EvalSetting::limited_fov(360.0, 9)).unwrap();
        assert_eq!(a, b);
        let c = run_setting(&MeanColor, &recs, &EvalSetting::limited_fov(90.0, 9)).unwrap();
        assert_eq!(c, run_setting(&MeanColor, &recs, &EvalSetting::limited_fov(90.0, 9)).unwrap());
    }

    #[test]
    fn theta_depends_on_seed_and_id_only() {
        assert_eq!(query_theta(3, "a"), query_theta(3, "a"));
        assert_ne!(query_theta(3, "a"), query_theta(3, "b"));
        assert_ne!(query_theta(3, "a"), query_theta(4, "a"));
        let t = query_theta(0, "x");
        assert!((0.0..360.0).contains(&t));
    }

    #[test]
    fn identity_zoom_matches_north() {
        let recs = records();
        let north = run_setting(&MeanColor, &recs, &EvalSetting::north_aligned()).unwrap();
        let suite = [PerturbationSpec::Zoom { min_ratio: 1.0, max_ratio: 1.0 }];
        let map = run_unseen_suite(&MeanColor, &recs, &suite, 0).unwrap();
        assert_eq!(map[&PerturbationKind::Zoom], north);
        let dup = [suite[0], suite[0]];
        assert!(run_unseen_suite(&MeanColor, &recs, &dup, 0).is_err());
    }

    #[test]
    fn sweep_wraps_full_turn() {
        let recs = records();
        let set = EvalSet::from_records(&recs).unwrap();
        let oracle = Oracle { ground: set.queries.iter().map(|p| cyclic_shift(p, 45.0)).collect(), dim: 9 };
        let a = orientation_sweep(&oracle, &recs, &[0.0, 45.0, 90.0]).unwrap();
        let b = orientation_sweep(&oracle, &recs, &[360.0, 405.0, 450.0]).unwrap();
        assert_eq!(a.recall_curve, b.recall_curve);
        assert_eq!(a.recall_curve[1], 1.0);
    }

    #[test]
    fn setting_labels_and_validation() {
        let labels: Vec<String> = EvalSetting::default_suite(0).iter().map(EvalSetting::label).collect();
        assert_eq!(labels, ["north_aligned", "unknown_orientation", "fov_180", "fov_90", "fov_70"]);
        assert!(EvalSetting { alpha_deg: None, ..EvalSetting::limited_fov(90.0, 0) }.validate().is_err());
        assert!(EvalSetting { perturbation: None, ..EvalSetting::unseen(PerturbationSpec::GaussianNoise { severity: 1 }, 0) }.validate().is_err());
    }
}

//! Cosine ranking of a reference gallery and the recall / precision metrics
//! computed from the ranks.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{dot, EmbeddingBatch, UNIT_NORM_TOLERANCE};

pub const DEFAULT_RECALL_KS: [usize; 3] = [1, 5, 10];

/// Reference embeddings with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    ids: Vec<String>,
    embeddings: EmbeddingBatch,
    // position of each row when rows are sorted by id
    id_order: Vec<usize>,
}

impl Gallery {
    pub fn new(ids: Vec<String>, embeddings: EmbeddingBatch) -> Result<Self> {
        if ids.len() != embeddings.rows() {
            return Err(Error::shape(format!("{} ids", embeddings.rows()), format!("{} ids", ids.len())));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::invalid(format!("duplicate gallery id `{dup}`")));
        }
        let mut sorted: Vec<usize> = (0..ids.len()).collect();
        sorted.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        let mut id_order = vec![0; ids.len()];
        for (pos, &row) in sorted.iter().enumerate() {
            id_order[row] = pos;
        }
        Ok(Self { ids, embeddings, id_order })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &EmbeddingBatch {
        &self.embeddings
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|g| g == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    /// Gallery row indices, most similar first.
    pub order: Vec<usize>,
    /// Similarities in the same order as `order`.
    pub similarities: Vec<f64>,
    /// Sorted 0-based ranks of every ground-truth reference.
    pub positive_ranks: Vec<usize>,
}

impl RankedResult {
    pub fn rank_of_truth(&self) -> usize {
        self.positive_ranks[0]
    }

    pub fn gallery_size(&self) -> usize {
        self.order.len()
    }

    pub fn ordered_ids<'a>(&self, gallery: &'a Gallery) -> Vec<&'a str> {
        self.order.iter().map(|&i| gallery.ids[i].as_str()).collect()
    }
}

/// Descending similarity; equal similarities fall back to ascending gallery id.
pub fn rank_gallery(query_id: &str, q: &[f64], gallery: &Gallery, positives: &[usize]) -> Result<RankedResult> {
    if gallery.is_empty() {
        return Err(Error::invalid("cannot rank against an empty gallery"));
    }
    if q.len() != gallery.embeddings.dim() {
        return Err(Error::shape(format!("query of dim {}", gallery.embeddings.dim()), format!("dim {}", q.len())));
    }
    let norm = dot(q, q).sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::NotUnitNorm { row: 0, norm, tolerance: UNIT_NORM_TOLERANCE });
    }
    if positives.is_empty() {
        return Err(Error::invalid(format!("query `{query_id}` has no ground-truth reference")));
    }
    if let Some(&bad) = positives.iter().find(|&&p| p >= gallery.len()) {
        return Err(Error::IndexOutOfRange { anchor: 0, index: bad, len: gallery.len() });
    }
    let sims: Vec<f64> = gallery.embeddings.iter_rows().map(|r| dot(q, r)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| match sims[b].total_cmp(&sims[a]) {
        Ordering::Equal => gallery.id_order[a].cmp(&gallery.id_order[b]),
        o => o,
    });
    let mut rank_of = vec![0; gallery.len()];
    for (rank, &row) in order.iter().enumerate() {
        rank_of[row] = rank;
    }
    let mut positive_ranks: Vec<usize> = positives.iter().map(|&p| rank_of[p]).collect();
    positive_ranks.sort_unstable();
    positive_ranks.dedup();
    let similarities = order.iter().map(|&i| sims[i]).collect();
    Ok(RankedResult { query_id: query_id.to_string(), order, similarities, positive_ranks })
}

/// Ranks each query row against the gallery; `positives[i]` lists the gallery
/// rows that count as correct for query `i`.
pub fn rank_queries(
    query_ids: &[String],
    queries: &EmbeddingBatch,
    gallery: &Gallery,
    positives: &[Vec<usize>],
) -> Result<Vec<RankedResult>> {
    if query_ids.len() != queries.rows() || positives.len() != queries.rows() {
        return Err(Error::shape(
            format!("{} query ids and positive sets", queries.rows()),
            format!("{} ids, {} positive sets", query_ids.len(), positives.len()),
        ));
    }
    query_ids
        .iter()
        .zip(queries.iter_rows())
        .zip(positives)
        .map(|((id, q), pos)| rank_gallery(id, q, gallery, pos))
        .collect()
}

fn nonempty(results: &[RankedResult]) -> Result<()> {
    if results.is_empty() {
        return Err(Error::invalid("no ranked queries"));
    }
    Ok(())
}

/// Fraction of queries with any positive inside the top `k`; `k` larger than
/// a gallery is clamped to its size.
pub fn recall_at_k(results: &[RankedResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("recall needs k >= 1"));
    }
    nonempty(results)?;
    let hits = results.iter().filter(|r| r.rank_of_truth() < k.min(r.gallery_size())).count();
    Ok(hits as f64 / results.len() as f64)
}

/// `ceil(n / 100)`, never below 1.
pub fn one_percent_window(n_gallery: usize) -> usize {
    n_gallery.div_ceil(100).max(1)
}

pub fn recall_at_1pct(results: &[RankedResult]) -> Result<f64> {
    nonempty(results)?;
    let hits = results.iter().filter(|r| r.rank_of_truth() < one_percent_window(r.gallery_size())).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean precision at the rank of each positive hit.
pub fn query_average_precision(positive_ranks: &[usize]) -> Result<f64> {
    if positive_ranks.is_empty() {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    let mut ranks = positive_ranks.to_vec();
    ranks.sort_unstable();
    let sum: f64 = ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / (r + 1) as f64).sum();
    Ok(sum / ranks.len() as f64)
}

/// Mean over queries of [`query_average_precision`].
pub fn average_precision(results: &[RankedResult]) -> Result<f64> {
    nonempty(results)?;
    let mut total = 0.0;
    for r in results {
        total += query_average_precision(&r.positive_ranks)?;
    }
    Ok(total / results.len() as f64)
}

/// Histogram of `rank_of_truth` in `n_bins` bins of `bin_width` ranks each;
/// the last bin also collects everything beyond the covered range.
pub fn rank_distribution(results: &[RankedResult], bin_width: usize, n_bins: usize) -> Result<Vec<usize>> {
    rank_histogram(results.iter().map(RankedResult::rank_of_truth), bin_width, n_bins)
}

pub fn rank_histogram(ranks: impl IntoIterator<Item = usize>, bin_width: usize, n_bins: usize) -> Result<Vec<usize>> {
    if bin_width == 0 || n_bins == 0 {
        return Err(Error::invalid("histogram needs a positive bin width and bin count"));
    }
    let mut hist = vec![0; n_bins];
    for r in ranks {
        hist[(r / bin_width).min(n_bins - 1)] += 1;
    }
    Ok(hist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_at: BTreeMap<usize, f64>,
    pub r_at_1pct: f64,
    pub ap: f64,
    pub n_queries: usize,
    pub n_gallery: usize,
}

impl MetricsReport {
    pub fn from_results(results: &[RankedResult], ks: &[usize]) -> Result<Self> {
        nonempty(results)?;
        let mut r_at = BTreeMap::new();
        for &k in ks {
            r_at.insert(k, recall_at_k(results, k)?);
        }
        Ok(Self {
            r_at,
            r_at_1pct: recall_at_1pct(results)?,
            ap: average_precision(results)?,
            n_queries: results.len(),
            n_gallery: results[0].gallery_size(),
        })
    }

    pub fn r1(&self) -> f64 {
        self.r_at.get(&1).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Serialize)]
struct RankRecord<'a> {
    query_id: &'a str,
    rank_of_truth: usize,
    positive_ranks: &'a [usize],
    top: Vec<&'a str>,
    top_similarities: &'a [f64],
}

/// Per-query rank records with the ten best gallery ids.
pub fn write_rank_records_json(results: &[RankedResult], gallery: &Gallery, path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<RankRecord> = results
        .iter()
        .map(|r| {
            let top = r.order.len().min(10);
            RankRecord {
                query_id: &r.query_id,
                rank_of_truth: r.rank_of_truth(),
                positive_ranks: &r.positive_ranks,
                top: r.order[..top].iter().map(|&i| gallery.ids[i].as_str()).collect(),
                top_similarities: &r.similarities[..top],
            }
        })
        .collect();
    write_json(path, &records)
}

/// One row per named report: `setting,n_queries,n_gallery,r@k...,r@1%,ap`.
pub fn write_metrics_csv(rows: &[(String, MetricsReport)], path: impl AsRef<Path>) -> Result<()> {
    let ks: Vec<usize> = rows.first().map(|(_, r)| r.r_at.keys().copied().collect()).unwrap_or_default();
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["setting".to_string(), "n_queries".into(), "n_gallery".into()];
    header.extend(ks.iter().map(|k| format!("r@{k}")));
    header.extend(["r@1%".to_string(), "ap".into()]);
    w.write_record(&header)?;
    for (name, r) in rows {
        let mut rec = vec![name.clone(), r.n_queries.to_string(), r.n_gallery.to_string()];
        rec.extend(ks.iter().map(|k| r.r_at.get(k).map(|v| v.to_string()).unwrap_or_default()));
        rec.extend([r.r_at_1pct.to_string(), r.ap.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbeddingSidecar {
    rows: usize,
    dim: usize,
    ids: Vec<String>,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    let mut s = bin.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes row-major little-endian f32 values to `path` and
/// `{rows, dim, ids}` to `path.json`.
pub fn write_embeddings_raw(path: impl AsRef<Path>, ids: &[String], embeddings: &EmbeddingBatch) -> Result<()> {
    let path = path.as_ref();
    if ids.len() != embeddings.rows() {
        return Err(Error::shape(format!("{} ids", embeddings.rows()), format!("{} ids", ids.len())));
    }
    let bytes: Vec<u8> = embeddings.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = EmbeddingSidecar { rows: embeddings.rows(), dim: embeddings.dim(), ids: ids.to_vec() };
    write_json(sidecar_path(path), &side)
}

/// Reads the raw format; rows are re-normalized after the f32 round trip.
pub fn read_embeddings_raw(path: impl AsRef<Path>) -> Result<(Vec<String>, EmbeddingBatch)> {
    let path = path.as_ref();
    let side_path = sidecar_path(path);
    let side_text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: EmbeddingSidecar = serde_json::from_str(&side_text)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != side.rows * side.dim * 4 || side.ids.len() != side.rows {
        return Err(Error::shape(
            format!("{}x{} f32 values and {} ids", side.rows, side.dim, side.rows),
            format!("{} bytes and {} ids", bytes.len(), side.ids.len()),
        ));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok((side.ids, EmbeddingBatch::from_unnormalized(side.rows, side.dim, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gallery(rows: &[Vec<f64>]) -> Gallery {
        let ids = (0..rows.len()).map(|i| format!("g{i:03}")).collect();
        Gallery::new(ids, EmbeddingBatch::from_rows(rows).unwrap()).unwrap()
    }

    fn unit(angle: f64) -> Vec<f64> {
        vec![angle.cos(), angle.sin()]
    }

    fn result_with_ranks(ranks: &[usize], n: usize) -> RankedResult {
        RankedResult {
            query_id: "q".into(),
            order: (0..n).collect(),
            similarities: vec![0.0; n],
            positive_ranks: {
                let mut r = ranks.to_vec();
                r.sort_unstable();
                r
            },
        }
    }

    #[test]
    fn self_match_ranks_first() {
        let g = gallery(&[unit(0.0), unit(1.0), unit(2.0)]);
        let r = rank_gallery("q", &unit(1.0), &g, &[1]).unwrap();
        assert_eq!(r.rank_of_truth(), 0);
        assert_eq!(r.order[0], 1);
    }

    #[test]
    fn two_element_order() {
        let a = 0.9f64;
        let b = 0.1f64;
        let g = gallery(&[vec![a, (1.0 - a * a).sqrt()], vec![b, (1.0 - b * b).sqrt()]]);
        let r = rank_gallery("q", &[1.0, 0.0], &g, &[0]).unwrap();
        assert_eq!(r.order, [0, 1]);
        assert_eq!(r.similarities, [0.9, 0.1]);
    }

    #[test]
    fn ties_break_by_id_not_row() {
        let e = EmbeddingBatch::from_rows(&[unit(0.5), unit(0.5), unit(0.5)]).unwrap();
        let g = Gallery::new(vec!["c".into(), "a".into(), "b".into()], e).unwrap();
        let r = rank_gallery("q", &unit(0.5), &g, &[0]).unwrap();
        assert_eq!(r.ordered_ids(&g), ["a", "b", "c"]);
        assert_eq!(r.rank_of_truth(), 2);
    }

    #[test]
    fn ranking_errors() {
        let g = gallery(&[unit(0.0)]);
        assert!(rank_gallery("q", &[2.0, 0.0], &g, &[0]).is_err());
        assert!(rank_gallery("q", &unit(0.0), &g, &[]).is_err());
        assert!(rank_gallery("q", &unit(0.0), &g, &[1]).is_err());
        let e = EmbeddingBatch::from_rows(&[unit(0.0), unit(1.0)]).unwrap();
        assert!(Gallery::new(vec!["a".into(), "a".into()], e).is_err());
    }

    #[test]
    fn recall_examples() {
        let all_zero: Vec<_> = (0..4).map(|_| result_with_ranks(&[0], 20)).collect();
        assert_eq!(recall_at_k(&all_zero, 1).unwrap(), 1.0);
        let mixed = [result_with_ranks(&[0], 20), result_with_ranks(&[3], 20), result_with_ranks(&[10], 20)];
        assert_eq!(recall_at_k(&mixed, 5).unwrap(), 2.0 / 3.0);
        assert_eq!(recall_at_k(&mixed, 20).unwrap(), 1.0);
        assert_eq!(recall_at_k(&mixed, 500).unwrap(), 1.0);
        assert!(recall_at_k(&mixed, 0).is_err());
        let multi = [result_with_ranks(&[7, 2], 20)];
        assert_eq!(recall_at_k(&multi, 3).unwrap(), 1.0);
    }

    #[test]
    fn one_percent_windows() {
        assert_eq!(one_percent_window(100), 1);
        assert_eq!(one_percent_window(8884), 89);
        assert_eq!(one_percent_window(50), 1);
        assert_eq!(one_percent_window(101), 2);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(query_average_precision(&[0]).unwrap(), 1.0);
        assert_eq!(query_average_precision(&[0, 2]).unwrap(), (1.0 + 2.0 / 3.0) / 2.0);
        assert_eq!(query_average_precision(&[0, 1, 2]).unwrap(), 1.0);
        assert!(query_average_precision(&[]).is_err());
    }

    #[test]
    fn histogram_examples() {
        let zeros: Vec<_> = (0..6).map(|_| result_with_ranks(&[0], 10)).collect();
        assert_eq!(rank_distribution(&zeros, 1, 1).unwrap(), [6]);
        let spread: Vec<_> = (0..4).map(|r| result_with_ranks(&[r], 10)).collect();
        assert_eq!(rank_distribution(&spread, 2, 2).unwrap(), [2, 2]);
        assert_eq!(rank_distribution(&spread, 1, 2).unwrap(), [1, 3]);
    }

    #[test]
    fn report_is_monotone_in_k() {
        let results: Vec<_> = [0, 4, 9, 30, 1].iter().map(|&r| result_with_ranks(&[r], 40)).collect();
        let rep = MetricsReport::from_results(&results, &[1, 5, 10]).unwrap();
        let vals: Vec<f64> = rep.r_at.values().copied().collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!((rep.n_queries, rep.n_gallery), (5, 40));
        let json = serde_json::to_string(&rep).unwrap();
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), rep);
    }

    #[test]
    fn raw_embeddings_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let e = EmbeddingBatch::from_rows(&[unit(0.3), unit(1.7)]).unwrap();
        let ids = vec!["x".to_string(), "y".to_string()];
        let p = dir.path().join("emb.bin");
        write_embeddings_raw(&p, &ids, &e).unwrap();
        let (ids2, e2) = read_embeddings_raw(&p).unwrap();
        assert_eq!(ids2, ids);
        for (a, b) in e.data().iter().zip(e2.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

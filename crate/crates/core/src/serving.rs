//! Serving layer: an exhaustive vector index with an optional truncated
//! coarse store for two-stage (coarse-to-fine) search, per-category gallery
//! matching with calibrated thresholds, and the two deployment modes — an
//! online verification stream and an offline batch back-check.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Embedding, EncoderParams, NestedDims};
use crate::error::{Error, Result};
use crate::model::{EncodeInput, Note};

/// One entry's similarity must reach its category threshold to match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Image,
    Video,
    Note,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Image, Category::Video, Category::Note];
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub id: u64,
    pub category: Category,
    pub threshold: f32,
    pub embedding: Vec<f32>,
}

impl GalleryEntry {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::validation(format!(
                "gallery entry {} threshold {} outside [-1, 1]",
                self.id, self.threshold
            )));
        }
        if self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("gallery embedding has non-finite values"));
        }
        Ok(())
    }
}

pub fn write_gallery_jsonl(path: &Path, entries: &[GalleryEntry]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        writeln!(w, "{}", serde_json::to_string(e)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_gallery_jsonl(path: &Path) -> Result<Vec<GalleryEntry>> {
    let mut out = Vec::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: GalleryEntry = serde_json::from_str(&line)?;
        e.validate()?;
        out.push(e);
    }
    Ok(out)
}

/// Exhaustive unit-vector index with an optional coarse store at a nested
/// dim. The coarse rows are always the re-normalized truncations of the full
/// rows (recomputed on load, never stored).
#[derive(Debug, Clone)]
pub struct VectorIndex {
    pub dim: usize,
    pub k_coarse: Option<usize>,
    pub ids: Vec<u64>,
    full: Vec<f32>,
    coarse: Vec<f32>,
}

fn to_unit_f32(v: &[f64]) -> Result<Vec<f32>> {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-4 {
        return Err(Error::validation(format!(
            "index vectors must be unit norm, got {norm}"
        )));
    }
    Ok(v.iter().map(|&x| x as f32).collect())
}

fn coarse_row(full: &[f32], k: usize) -> Vec<f32> {
    let mut v: Vec<f64> = full[..k].iter().map(|&x| x as f64).collect();
    let n = crate::linalg::norm(&v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    v.into_iter().map(|x| x as f32).collect()
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn full_row(&self, i: usize) -> &[f32] {
        &self.full[i * self.dim..(i + 1) * self.dim]
    }

    fn coarse_row_ref(&self, i: usize) -> &[f32] {
        let k = self.k_coarse.expect("coarse store present");
        &self.coarse[i * k..(i + 1) * k]
    }

    pub fn append(&mut self, id: u64, emb: &Embedding) -> Result<()> {
        if emb.dim() != self.dim {
            return Err(Error::validation(format!(
                "embedding dim {} does not match index dim {}",
                emb.dim(),
                self.dim
            )));
        }
        let row = to_unit_f32(emb.values())?;
        if let Some(k) = self.k_coarse {
            self.coarse.extend(coarse_row(&row, k));
        }
        self.full.extend(row);
        self.ids.push(id);
        Ok(())
    }

    /// Index file: magic `UNIX1`, u32 dim, u32 k_coarse (0 when absent),
    /// u64 count, the full rows as f32 little-endian, then the id table as
    /// u64 little-endian. Round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"UNIX1")?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.k_coarse.unwrap_or(0) as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for v in &self.full {
            w.write_all(&v.to_le_bytes())?;
        }
        for id in &self.ids {
            w.write_all(&id.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<VectorIndex> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != b"UNIX1" {
            return Err(Error::validation("bad index magic, expected UNIX1"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let kc = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut full = vec![0f32; count * dim];
        for v in full.iter_mut() {
            r.read_exact(&mut b4)?;
            *v = f32::from_le_bytes(b4);
        }
        let mut ids = vec![0u64; count];
        for id in ids.iter_mut() {
            r.read_exact(&mut b8)?;
            *id = u64::from_le_bytes(b8);
        }
        let mut one = [0u8; 1];
        if r.read(&mut one)? != 0 {
            return Err(Error::validation("index file has trailing bytes"));
        }
        let k_coarse = (kc > 0).then_some(kc);
        let mut coarse = Vec::new();
        if let Some(k) = k_coarse {
            if k > dim {
                return Err(Error::validation("k_coarse exceeds index dim"));
            }
            coarse.reserve(count * k);
            for i in 0..count {
                coarse.extend(coarse_row(&full[i * dim..(i + 1) * dim], k));
            }
        }
        Ok(VectorIndex {
            dim,
            k_coarse,
            ids,
            full,
            coarse,
        })
    }
}

/// Builds an index over (id, unit embedding) rows. When `dims` is supplied,
/// `k_coarse` must be one of the nested dims.
pub fn build_index(
    entries: &[(u64, Embedding)],
    k_coarse: Option<usize>,
    dims: Option<&NestedDims>,
) -> Result<VectorIndex> {
    let dim = entries.first().map(|(_, e)| e.dim()).unwrap_or(0);
    if let Some(k) = k_coarse {
        if k == 0 || (dim > 0 && k > dim) {
            return Err(Error::validation("k_coarse must lie in 1..=dim"));
        }
        if let Some(d) = dims {
            if !d.contains(k) {
                return Err(Error::validation(format!(
                    "k_coarse {k} is not one of the nested dims"
                )));
            }
        }
    }
    let mut index = VectorIndex {
        dim,
        k_coarse,
        ids: Vec::with_capacity(entries.len()),
        full: Vec::with_capacity(entries.len() * dim),
        coarse: Vec::new(),
    };
    for (id, emb) in entries {
        index.append(*id, emb)?;
    }
    Ok(index)
}

fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for i in 0..a.len() {
        acc += a[i] as f64 * b[i] as f64;
    }
    acc
}

/// Exact exhaustive top-k by cosine (vectors are unit norm so dot = cosine),
/// ties broken by id ascending. k larger than the index clamps.
pub fn search(index: &VectorIndex, query: &Embedding, k: usize) -> Result<Vec<(u64, f64)>> {
    if k < 1 {
        return Err(Error::validation("k must be >= 1"));
    }
    if index.is_empty() {
        return Ok(Vec::new());
    }
    if query.dim() != index.dim {
        return Err(Error::validation(format!(
            "query dim {} does not match index dim {}",
            query.dim(),
            index.dim
        )));
    }
    let qf: Vec<f32> = query.values().iter().map(|&x| x as f32).collect();
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .map(|i| (i, dot_f32(&qf, index.full_row(i))))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite similarity")
            .then(index.ids[a.0].cmp(&index.ids[b.0]))
    });
    scored.truncate(k);
    Ok(scored.into_iter().map(|(i, s)| (index.ids[i], s)).collect())
}

/// Two-stage search: rank everything by the coarse (truncated) cosine, keep
/// the best `shortlist`, then re-rank that shortlist at full dimension.
pub fn coarse_fine_search(
    index: &VectorIndex,
    query: &Embedding,
    k: usize,
    shortlist: usize,
) -> Result<Vec<(u64, f64)>> {
    let kc = index
        .k_coarse
        .ok_or_else(|| Error::validation("index has no coarse store"))?;
    if shortlist < k {
        return Err(Error::validation("shortlist must be >= k"));
    }
    if k < 1 {
        return Err(Error::validation("k must be >= 1"));
    }
    if index.is_empty() {
        return Ok(Vec::new());
    }
    if query.dim() != index.dim {
        return Err(Error::validation("query dim mismatch"));
    }
    let mut qc: Vec<f64> = query.values()[..kc].to_vec();
    let n = crate::linalg::norm(&qc);
    if n < 1e-12 {
        return Err(Error::numeric("zero coarse query prefix"));
    }
    for x in qc.iter_mut() {
        *x /= n;
    }
    let qcf: Vec<f32> = qc.iter().map(|&x| x as f32).collect();
    let mut coarse_scored: Vec<(usize, f64)> = (0..index.len())
        .map(|i| (i, dot_f32(&qcf, index.coarse_row_ref(i))))
        .collect();
    coarse_scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite similarity")
            .then(index.ids[a.0].cmp(&index.ids[b.0]))
    });
    coarse_scored.truncate(shortlist);
    let qf: Vec<f32> = query.values().iter().map(|&x| x as f32).collect();
    let mut rescored: Vec<(usize, f64)> = coarse_scored
        .into_iter()
        .map(|(i, _)| (i, dot_f32(&qf, index.full_row(i))))
        .collect();
    rescored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite similarity")
            .then(index.ids[a.0].cmp(&index.ids[b.0]))
    });
    rescored.truncate(k);
    Ok(rescored.into_iter().map(|(i, s)| (index.ids[i], s)).collect())
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub thresholds: BTreeMap<Category, f32>,
    /// Categories where even threshold -1 cannot reach the target count.
    pub unattainable: BTreeMap<Category, bool>,
}

/// Per category, the smallest threshold whose match count (similarity >=
/// threshold over all traffic x gallery pairs) stays at or below the target.
/// A target of zero lands just above the maximum observed similarity; a
/// target at or above the number of pairs lands at -1. Targets strictly
/// above the pair count are flagged unattainable.
pub fn calibrate_thresholds(
    gallery: &[GalleryEntry],
    traffic: &[Embedding],
    target: usize,
) -> Result<Calibration> {
    if traffic.is_empty() {
        return Err(Error::validation("traffic sample must be non-empty"));
    }
    let mut thresholds = BTreeMap::new();
    let mut unattainable = BTreeMap::new();
    for cat in Category::ALL {
        let entries: Vec<&GalleryEntry> = gallery.iter().filter(|e| e.category == cat).collect();
        if entries.is_empty() {
            continue;
        }
        let mut sims: Vec<f32> = Vec::with_capacity(entries.len() * traffic.len());
        for t in traffic {
            let tf: Vec<f32> = t.values().iter().map(|&x| x as f32).collect();
            for e in &entries {
                if e.embedding.len() != tf.len() {
                    return Err(Error::validation("gallery/traffic dim mismatch"));
                }
                sims.push(dot_f32(&tf, &e.embedding) as f32);
            }
        }
        // Descending; the boundary index is found by binary search over the
        // sorted similarity values.
        sims.sort_by(|a, b| b.partial_cmp(a).expect("finite similarity"));
        let total = sims.len();
        let (thr, flag) = if target > total {
            (-1.0f32, true)
        } else if target == total {
            (-1.0f32, false)
        } else {
            // Smallest threshold excluding sims[target] and all ties with it:
            // just above that value. Clamped to 1.0, the cosine ceiling.
            let boundary = sims[target];
            let above = next_up_f32(boundary).min(1.0);
            (above.max(-1.0), false)
        };
        thresholds.insert(cat, thr);
        unattainable.insert(cat, flag);
    }
    Ok(Calibration {
        thresholds,
        unattainable,
    })
}

fn next_up_f32(x: f32) -> f32 {
    // f32::next_up is stable but spelled out here for clarity with negatives.
    if x.is_nan() || x == f32::INFINITY {
        return x;
    }
    let bits = x.to_bits();
    let next = if x == 0.0 {
        1 // smallest positive subnormal
    } else if x > 0.0 {
        bits + 1
    } else {
        bits - 1
    };
    f32::from_bits(next)
}

/// Match report for one incoming note.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyResult {
    pub incoming: u64,
    /// (gallery id, category, similarity), similarity >= entry threshold.
    pub matches: Vec<(u64, Category, f32)>,
    pub by_category: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifyRecord {
    Result(VerifyResult),
    Skipped { line: usize, reason: String },
}

pub struct VerifyRun {
    pub records: Vec<VerifyRecord>,
    /// Number of encoder invocations; exactly one per well-formed note.
    pub encode_count: usize,
}

/// Online mode: each incoming note is encoded once; the single embedding is
/// appended to the historical index and matched against every gallery entry
/// over per-category thresholds. Malformed notes are skipped with a
/// diagnostic record.
pub fn online_verify(
    stream: &[std::result::Result<Note, String>],
    gallery: &[GalleryEntry],
    index: &mut VectorIndex,
    params: &EncoderParams,
) -> Result<VerifyRun> {
    for e in gallery {
        e.validate()?;
    }
    let mut records = Vec::with_capacity(stream.len());
    let mut encode_count = 0usize;
    for (line, item) in stream.iter().enumerate() {
        let note = match item {
            Ok(n) => n,
            Err(reason) => {
                records.push(VerifyRecord::Skipped {
                    line,
                    reason: reason.clone(),
                });
                continue;
            }
        };
        let emb = match crate::encoder::encode(params, EncodeInput::Note(note)) {
            Ok(e) => {
                encode_count += 1;
                e
            }
            Err(err) => {
                records.push(VerifyRecord::Skipped {
                    line,
                    reason: err.to_string(),
                });
                continue;
            }
        };
        index.append(note.id, &emb)?;
        let ef: Vec<f32> = emb.values().iter().map(|&x| x as f32).collect();
        let mut matches = Vec::new();
        let mut by_category: BTreeMap<String, usize> = BTreeMap::new();
        for entry in gallery {
            let sim = dot_f32(&ef, &entry.embedding) as f32;
            if sim >= entry.threshold {
                matches.push((entry.id, entry.category, sim));
                *by_category
                    .entry(format!("{:?}", entry.category).to_lowercase())
                    .or_default() += 1;
            }
        }
        records.push(VerifyRecord::Result(VerifyResult {
            incoming: note.id,
            matches,
            by_category,
        }));
    }
    Ok(VerifyRun {
        records,
        encode_count,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BackcheckReport {
    pub per_query: Vec<(String, Vec<(u64, f64)>)>,
    pub total_returned: usize,
    pub distinct_ids: usize,
    pub duplicates: usize,
}

/// Offline mode: top-k retrieval per query plus a deduplicated union report.
pub fn offline_backcheck(
    queries: &[(String, Embedding)],
    index: &VectorIndex,
    k: usize,
) -> Result<BackcheckReport> {
    let mut per_query = Vec::with_capacity(queries.len());
    let mut union = BTreeMap::<u64, usize>::new();
    let mut total = 0usize;
    for (name, q) in queries {
        let hits = search(index, q, k)?;
        total += hits.len();
        for (id, _) in &hits {
            *union.entry(*id).or_default() += 1;
        }
        per_query.push((name.clone(), hits));
    }
    Ok(BackcheckReport {
        per_query,
        total_returned: total,
        distinct_ids: union.len(),
        duplicates: total - union.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> Embedding {
        let mut v = v;
        crate::linalg::normalize(&mut v);
        Embedding(v)
    }

    fn toy_index(k_coarse: Option<usize>) -> VectorIndex {
        let entries = vec![
            (10u64, unit(vec![1.0, 0.0, 0.0, 0.0])),
            (11, unit(vec![0.9, 0.1, 0.0, 0.0])),
            (12, unit(vec![0.0, 1.0, 0.0, 0.0])),
            (13, unit(vec![0.0, 0.0, 1.0, 0.0])),
            (14, unit(vec![0.5, 0.5, 0.5, 0.5])),
        ];
        build_index(&entries, k_coarse, None).unwrap()
    }

    #[test]
    fn search_exact_and_tied() {
        let idx = toy_index(None);
        let q = unit(vec![1.0, 0.0, 0.0, 0.0]);
        let hits = search(&idx, &q, 3).unwrap();
        assert_eq!(hits[0].0, 10);
        assert!((hits[0].1 - 1.0).abs() < 1e-6);
        // k > len clamps.
        let all = search(&idx, &q, 100).unwrap();
        assert_eq!(all.len(), 5);
        assert!(search(&idx, &q, 0).is_err());
        // Tie: two identical rows resolve by id ascending.
        let entries = vec![
            (7u64, unit(vec![1.0, 0.0])),
            (3, unit(vec![1.0, 0.0])),
            (5, unit(vec![0.0, 1.0])),
        ];
        let idx = build_index(&entries, None, None).unwrap();
        let hits = search(&idx, &unit(vec![1.0, 0.0]), 2).unwrap();
        assert_eq!(hits[0].0, 3);
        assert_eq!(hits[1].0, 7);
    }

    #[test]
    fn empty_index_returns_empty() {
        let idx = build_index(&[], None, None).unwrap();
        let q = unit(vec![1.0, 0.0]);
        assert!(search(&idx, &q, 5).unwrap().is_empty());
    }

    #[test]
    fn coarse_full_dim_equals_search() {
        let idx = toy_index(Some(4));
        let q = unit(vec![0.7, 0.2, 0.1, 0.0]);
        let a = search(&idx, &q, 3).unwrap();
        let b = coarse_fine_search(&idx, &q, 3, idx.len()).unwrap();
        assert_eq!(a, b);
        assert!(coarse_fine_search(&idx, &q, 3, 2).is_err());
        assert!(coarse_fine_search(&toy_index(None), &q, 3, 5).is_err());
    }

    #[test]
    fn index_round_trip_bit_exact() {
        let idx = toy_index(Some(2));
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.idx");
        let p2 = dir.path().join("b.idx");
        idx.save(&p1).unwrap();
        let back = VectorIndex::load(&p1).unwrap();
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(back.ids, idx.ids);
        assert_eq!(back.k_coarse, idx.k_coarse);
        // Coarse rows are recomputed truncations of the stored full rows.
        for i in 0..back.len() {
            let expect = coarse_row(back.full_row(i), 2);
            assert_eq!(back.coarse_row_ref(i), expect.as_slice());
        }
    }

    #[test]
    fn calibration_boundaries() {
        let gallery = vec![
            GalleryEntry {
                id: 1,
                category: Category::Image,
                threshold: 0.0,
                embedding: vec![1.0, 0.0],
            },
            GalleryEntry {
                id: 2,
                category: Category::Image,
                threshold: 0.0,
                embedding: vec![0.0, 1.0],
            },
        ];
        let traffic = vec![unit(vec![0.9, 0.1]), unit(vec![0.8, 0.2])];
        // 4 similarity pairs total.
        let cal = calibrate_thresholds(&gallery, &traffic, 0).unwrap();
        let t = cal.thresholds[&Category::Image];
        // Just above the max observed similarity: nothing matches.
        let count = count_matches(&gallery, &traffic, t);
        assert_eq!(count, 0);
        // target >= total pairs: threshold -1.
        let cal = calibrate_thresholds(&gallery, &traffic, 4).unwrap();
        assert_eq!(cal.thresholds[&Category::Image], -1.0);
        assert!(!cal.unattainable[&Category::Image]);
        let cal = calibrate_thresholds(&gallery, &traffic, 5).unwrap();
        assert_eq!(cal.thresholds[&Category::Image], -1.0);
        assert!(cal.unattainable[&Category::Image]);
        // Monotone: larger targets never raise the threshold.
        let mut prev = f32::INFINITY;
        for target in 0..=4 {
            let cal = calibrate_thresholds(&gallery, &traffic, target).unwrap();
            let t = cal.thresholds[&Category::Image];
            assert!(t <= prev);
            prev = t;
        }
        // Every calibrated threshold keeps the count at or below target.
        for target in 0..=4 {
            let cal = calibrate_thresholds(&gallery, &traffic, target).unwrap();
            let c = count_matches(&gallery, &traffic, cal.thresholds[&Category::Image]);
            assert!(c <= target, "target {target}: count {c}");
        }
        assert!(calibrate_thresholds(&gallery, &[], 1).is_err());

        // Cosine-ceiling corner: an exact similarity-1 pair cannot be
        // excluded by any threshold in [-1, 1]; the threshold clamps at 1
        // and that pair keeps matching.
        let perfect = vec![unit(vec![1.0, 0.0])];
        let cal = calibrate_thresholds(&gallery, &perfect, 0).unwrap();
        assert_eq!(cal.thresholds[&Category::Image], 1.0);
        assert_eq!(count_matches(&gallery, &perfect, 1.0), 1);
    }

    fn count_matches(gallery: &[GalleryEntry], traffic: &[Embedding], thr: f32) -> usize {
        let mut c = 0;
        for t in traffic {
            let tf: Vec<f32> = t.values().iter().map(|&x| x as f32).collect();
            for e in gallery {
                if (dot_f32(&tf, &e.embedding) as f32) >= thr {
                    c += 1;
                }
            }
        }
        c
    }

    #[test]
    fn gallery_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gal.jsonl");
        let entries = vec![GalleryEntry {
            id: 4,
            category: Category::Video,
            threshold: 0.25,
            embedding: vec![0.6, 0.8],
        }];
        write_gallery_jsonl(&p, &entries).unwrap();
        let back = read_gallery_jsonl(&p).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].id, 4);
        let bad = vec![GalleryEntry {
            id: 5,
            category: Category::Note,
            threshold: 1.5,
            embedding: vec![1.0],
        }];
        write_gallery_jsonl(&p, &bad).unwrap();
        assert!(read_gallery_jsonl(&p).is_err());
    }
}

//! Retrieval metrics (R@K for single-positive tasks, R*@K and P@K for the
//! multi-positive note-to-note task) plus the per-task evaluation runner
//! over held-out notes. Ground truth comes from synthetic provenance:
//! caption/OCR origins, parent-note ids, and stage-2 overlap order.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::encoder::{encode, truncate, Embedding, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::{Corpus, NoteId, TaskType};
use crate::pairs::{build_stage2_sample, PairSide};
use crate::rng::mix;
use crate::synth::{holdout_notes, Annotator, GenConfig};

/// Ranked retrieval output for one query.
#[derive(Debug, Clone)]
pub struct QueryResult {
    pub query: String,
    /// Top candidates, best first, no duplicates.
    pub ranked: Vec<String>,
    pub relevant: BTreeSet<String>,
}

impl QueryResult {
    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.ranked {
            if !seen.insert(r) {
                return Err(Error::validation(format!(
                    "duplicate candidate {r} in ranked list of {}",
                    self.query
                )));
            }
        }
        if self.relevant.is_empty() {
            return Err(Error::validation(format!(
                "query {} has empty relevant set",
                self.query
            )));
        }
        Ok(())
    }

    fn hits_at(&self, k: usize) -> usize {
        self.ranked
            .iter()
            .take(k)
            .filter(|c| self.relevant.contains(*c))
            .count()
    }
}

/// Fraction of queries whose unique positive appears in the top K.
pub fn recall_at_k(results: &[QueryResult], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::validation("K must be >= 1"));
    }
    if results.is_empty() {
        return Err(Error::validation("no query results"));
    }
    let mut hits = 0usize;
    for r in results {
        r.validate()?;
        if r.relevant.len() != 1 {
            return Err(Error::validation(format!(
                "recall_at_k requires singleton relevant sets, query {} has {}",
                r.query,
                r.relevant.len()
            )));
        }
        if r.hits_at(k) > 0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Mean over queries of (hits in top K) / |relevant set|.
pub fn rstar_at_k(results: &[QueryResult], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::validation("K must be >= 1"));
    }
    if results.is_empty() {
        return Err(Error::validation("no query results"));
    }
    let mut acc = 0.0;
    for r in results {
        r.validate()?;
        acc += r.hits_at(k) as f64 / r.relevant.len() as f64;
    }
    Ok(acc / results.len() as f64)
}

/// Mean over queries of (hits in top K) / K.
pub fn precision_at_k(results: &[QueryResult], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::validation("K must be >= 1"));
    }
    if results.is_empty() {
        return Err(Error::validation("no query results"));
    }
    let mut acc = 0.0;
    for r in results {
        r.validate()?;
        acc += r.hits_at(k) as f64 / k as f64;
    }
    Ok(acc / results.len() as f64)
}

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub metric: &'static str,
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub task: TaskType,
    pub dim: usize,
    pub n_queries: usize,
    pub n_targets: usize,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn value(&self, metric: &str, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.k == k)
            .map(|r| r.value)
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Seed for derived eval captions/OCR (distinct from training pairs).
    pub seed: u64,
    /// Noise candidates per note-to-note query.
    pub note2note_noise: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 5, 10],
            seed: 9090,
            note2note_noise: 10,
        }
    }
}

/// Encodes a pair side at the given nested dim.
fn embed_at(
    params: &EncoderParams,
    corpus: &Corpus,
    side: &PairSide,
    dim: usize,
) -> Result<Embedding> {
    let e = encode(params, side.encode_input(corpus)?)?;
    truncate(&e, dim, &params.dims)
}

/// Ranks gallery indices for one query embedding: descending similarity,
/// ties by gallery index ascending (galleries are in canonical id order).
fn rank_gallery(q: &Embedding, gallery: &[Embedding], top: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..gallery.len()).collect();
    let sims: Vec<f64> = gallery.iter().map(|g| dot(&q.0, &g.0)).collect();
    idx.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).expect("finite").then(a.cmp(&b)));
    idx.truncate(top);
    idx
}

struct EvalSet {
    /// (query key, query side, relevant keys)
    queries: Vec<(String, PairSide, BTreeSet<String>)>,
    /// (candidate key, candidate side) in canonical key order.
    gallery: Vec<(String, PairSide)>,
}

fn build_eval_set(
    corpus: &Corpus,
    gen_cfg: &GenConfig,
    annot: &Annotator<'_>,
    task: TaskType,
    cfg: &EvalConfig,
) -> Result<EvalSet> {
    let held = holdout_notes(gen_cfg, corpus);
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    let cap = |note: NoteId, slot: u32, img: &crate::model::ModalItem| {
        annot.derive_caption(img, mix(cfg.seed, "eval-cap", &[note, slot as u64]))
    };
    let xocr = |note: NoteId, slot: u32, img: &crate::model::ModalItem| {
        annot.derive_ocr(img, mix(cfg.seed, "eval-ocr", &[note, slot as u64]))
    };
    for note in &corpus.notes {
        if !held.contains(&note.id) {
            continue;
        }
        match task {
            TaskType::I2T | TaskType::T2I => {
                for img in &note.images {
                    let slot = img.origin.unwrap().slot;
                    let c = PairSide::Inline(cap(note.id, slot, img)?);
                    let i = PairSide::Item(img.id);
                    let (q, g) = if task == TaskType::I2T { (i, c) } else { (c, i) };
                    let gk = g.key();
                    queries.push((q.key(), q, BTreeSet::from([gk.clone()])));
                    gallery.push((gk, g));
                }
            }
            TaskType::I2Ocr | TaskType::Ocr2I => {
                for img in &note.images {
                    let slot = img.origin.unwrap().slot;
                    let o = PairSide::Inline(xocr(note.id, slot, img)?);
                    let i = PairSide::Item(img.id);
                    let (q, g) = if task == TaskType::I2Ocr { (i, o) } else { (o, i) };
                    let gk = g.key();
                    queries.push((q.key(), q, BTreeSet::from([gk.clone()])));
                    gallery.push((gk, g));
                }
            }
            TaskType::I2Note => {
                // Modal replacement keeps the query image out of its own
                // gallery note, so retrieval cannot fall back to feature
                // containment: the query is the first image, the target is
                // the note with that image swapped for its caption.
                let img = &note.images[0];
                let mut sub = crate::model::subtract_image(note, 1)?;
                sub.injected_items.push(cap(note.id, 1, img)?);
                let g = PairSide::Sub(sub);
                let gk = g.key();
                let q = PairSide::Item(img.id);
                queries.push((q.key(), q, BTreeSet::from([gk.clone()])));
                gallery.push((gk, g));
            }
            TaskType::T2Note | TaskType::Ocr2Note => {
                let note_side = PairSide::Note(note.id);
                let nk = note_side.key();
                gallery.push((nk.clone(), note_side));
                for img in &note.images {
                    let slot = img.origin.unwrap().slot;
                    let q = if task == TaskType::T2Note {
                        PairSide::Inline(cap(note.id, slot, img)?)
                    } else {
                        PairSide::Inline(xocr(note.id, slot, img)?)
                    };
                    queries.push((q.key(), q, BTreeSet::from([nk.clone()])));
                }
            }
            TaskType::Note2I | TaskType::Note2T => {
                // One query per note built from its first image.
                let img = &note.images[0];
                let caption = cap(note.id, 1, img)?;
                if task == TaskType::Note2I {
                    let mut sub = crate::model::subtract_image(note, 1)?;
                    sub.injected_items.push(caption);
                    let q = PairSide::Sub(sub);
                    let g = PairSide::Item(img.id);
                    let gk = g.key();
                    queries.push((q.key(), q, BTreeSet::from([gk.clone()])));
                    gallery.push((gk, g));
                } else {
                    let q = PairSide::Note(note.id);
                    let g = PairSide::Inline(caption);
                    let gk = g.key();
                    queries.push((q.key(), q, BTreeSet::from([gk.clone()])));
                    gallery.push((gk, g));
                }
            }
            TaskType::Note2Note => unreachable!("note2note handled separately"),
        }
    }
    gallery.sort_by(|a, b| a.0.cmp(&b.0));
    gallery.dedup_by(|a, b| a.0 == b.0);
    queries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(EvalSet { queries, gallery })
}

/// Evaluates one task at one nested dim over the held-out split.
pub fn run_task_eval(
    corpus: &Corpus,
    gen_cfg: &GenConfig,
    annot: &Annotator<'_>,
    params: &EncoderParams,
    task: TaskType,
    cfg: &EvalConfig,
    dim: usize,
) -> Result<MetricReport> {
    if !params.dims.contains(dim) {
        return Err(Error::validation(format!("eval dim {dim} not in nested set")));
    }
    if task == TaskType::Note2Note {
        return run_note2note_eval(corpus, gen_cfg, annot, params, cfg, dim);
    }
    let set = build_eval_set(corpus, gen_cfg, annot, task, cfg)?;
    if set.queries.is_empty() {
        return Err(Error::validation("empty evaluation query set"));
    }
    let max_k = *cfg.ks.iter().max().expect("ks non-empty");
    let gallery_embs: Vec<Embedding> = set
        .gallery
        .par_iter()
        .map(|(_, side)| embed_at(params, corpus, side, dim))
        .collect::<Result<_>>()?;
    let results: Vec<QueryResult> = set
        .queries
        .par_iter()
        .map(|(qkey, qside, relevant)| {
            let q = embed_at(params, corpus, qside, dim)?;
            let order = rank_gallery(&q, &gallery_embs, max_k);
            Ok(QueryResult {
                query: qkey.clone(),
                ranked: order.iter().map(|&i| set.gallery[i].0.clone()).collect(),
                relevant: relevant.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &k in &cfg.ks {
        rows.push(MetricRow {
            metric: "r",
            k,
            value: recall_at_k(&results, k)?,
        });
    }
    Ok(MetricReport {
        task,
        dim,
        n_queries: results.len(),
        n_targets: set.gallery.len(),
        rows,
    })
}

/// Note-to-note evaluation: per held-out note with m >= 4, the query is the
/// title half and the candidate pool is its own overlap-graded list plus
/// noise from other topics; the relevant set is the M overlap candidates.
/// A candidate identical to the query is excluded by construction.
fn run_note2note_eval(
    corpus: &Corpus,
    gen_cfg: &GenConfig,
    annot: &Annotator<'_>,
    params: &EncoderParams,
    cfg: &EvalConfig,
    dim: usize,
) -> Result<MetricReport> {
    let _ = annot;
    let held = holdout_notes(gen_cfg, corpus);
    let max_k = *cfg.ks.iter().max().expect("ks non-empty");
    let eligible: Vec<&crate::model::Note> = corpus
        .notes
        .iter()
        .filter(|n| held.contains(&n.id) && n.m() >= 4)
        .collect();
    if eligible.is_empty() {
        return Err(Error::validation(
            "no held-out notes with m >= 4 for note2note evaluation",
        ));
    }
    let results: Vec<QueryResult> = eligible
        .par_iter()
        .map(|note| {
            let m_rel = (note.m() as u32).div_ceil(2) as usize;
            let g = m_rel + cfg.note2note_noise;
            let sample = build_stage2_sample(note, corpus, gen_cfg, g, mix(cfg.seed, "eval-n2n", &[note.id]))?;
            let qside = PairSide::Sub(sample.query.clone());
            let qkey = qside.key();
            let q = embed_at(params, corpus, &qside, dim)?;
            let mut keyed: Vec<(String, Embedding)> = Vec::with_capacity(sample.g());
            let mut relevant = BTreeSet::new();
            for (i, cand) in sample.l_rank.iter().enumerate() {
                let key = cand.key();
                if key == qkey {
                    continue;
                }
                if i < sample.m {
                    relevant.insert(key.clone());
                }
                keyed.push((key, embed_at(params, corpus, cand, dim)?));
            }
            keyed.sort_by(|a, b| a.0.cmp(&b.0));
            let embs: Vec<Embedding> = keyed.iter().map(|(_, e)| e.clone()).collect();
            let order = rank_gallery(&q, &embs, max_k);
            Ok(QueryResult {
                query: qkey,
                ranked: order.iter().map(|&i| keyed[i].0.clone()).collect(),
                relevant,
            })
        })
        .collect::<Result<_>>()?;
    let n_targets: usize = results.iter().map(|r| r.relevant.len()).sum::<usize>()
        + eligible.len() * cfg.note2note_noise;
    let mut rows = Vec::new();
    for &k in &cfg.ks {
        rows.push(MetricRow {
            metric: "rstar",
            k,
            value: rstar_at_k(&results, k)?,
        });
        rows.push(MetricRow {
            metric: "p",
            k,
            value: precision_at_k(&results, k)?,
        });
    }
    Ok(MetricReport {
        task: TaskType::Note2Note,
        dim,
        n_queries: results.len(),
        n_targets,
        rows,
    })
}

/// CSV with one row per (task, metric, k, dim) tuple.
pub fn write_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "task,metric,k,dim,value,n_queries,n_targets")?;
    for rep in reports {
        for row in &rep.rows {
            writeln!(
                w,
                "{},{},{},{},{:.9},{},{}",
                rep.task, row.metric, row.k, rep.dim, row.value, rep.n_queries, rep.n_targets
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

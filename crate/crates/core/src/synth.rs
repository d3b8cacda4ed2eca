//! Deterministic synthetic corpus generator.
//!
//! Notes are sampled from a latent topic hierarchy: topic latents are
//! standard normal, each note adds a topic-local offset, and each image adds
//! an image-local offset around its note. Raw features are fixed orthonormal
//! projections of the latents (one projection per modality) plus per-item
//! Gaussian noise, so cosine similarity of raw features within one modality
//! reflects latent proximity. The [`LatentLedger`] records every latent for
//! test oracles; the [`Annotator`] plays the caption / expert-OCR model role
//! and is the only supported way to derive caption and OCR items.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{axpy, Mat};
use crate::model::{Corpus, ItemId, ModalItem, Modality, Note, NoteId, Origin};
use crate::rng::{splitmix64, Stream};

/// Spread of note latents around their topic latent. Sized so same-topic
/// cross-note similarity straddles the default mining band from above while
/// cross-topic similarity stays well below it.
pub const NOTE_OFFSET_SIGMA: f64 = 0.7;
/// Spread of image latents around their note latent.
pub const IMAGE_OFFSET_SIGMA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_notes: usize,
    /// Inclusive image-count range per note.
    pub m_range: (u32, u32),
    /// Latent topic dimension.
    pub d_lat: usize,
    /// Raw feature dimension.
    pub d_raw: usize,
    pub n_topics: usize,
    /// Per-channel Gaussian noise scale on raw features.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_notes: 2000,
            m_range: (2, 6),
            d_lat: 16,
            d_raw: 64,
            n_topics: 20,
            noise_sigma: 0.1,
            seed: 17,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_topics < 2 {
            return Err(Error::validation("n_topics must be >= 2"));
        }
        if self.m_range.0 < 1 || self.m_range.0 > self.m_range.1 {
            return Err(Error::validation("m_range must satisfy 1 <= min <= max"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::validation("noise_sigma must be >= 0"));
        }
        if self.d_lat < 1 {
            return Err(Error::validation("d_lat must be >= 1"));
        }
        if self.d_raw < self.d_lat {
            return Err(Error::validation(
                "d_raw must be >= d_lat: projections must not lose rank",
            ));
        }
        if self.n_topics > 2 * self.d_lat {
            return Err(Error::validation(
                "n_topics must be <= 2 * d_lat so topic directions stay separated",
            ));
        }
        if self.n_notes == 0 {
            return Err(Error::validation("n_notes must be >= 1"));
        }
        Ok(())
    }

    /// SHA-256 hex digest of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }

    /// Topic of a note under the round-robin assignment.
    pub fn topic_of(&self, note_id: NoteId) -> usize {
        (note_id % self.n_topics as u64) as usize
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<GenConfig> {
        let cfg: GenConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fixed per-modality projections from latent space into raw feature space,
/// orthonormal columns, derived from the corpus seed alone.
#[derive(Debug, Clone)]
pub struct Projections {
    pub img: Mat,
    pub txt: Mat,
    pub ocr: Mat,
}

impl Projections {
    pub fn derive(cfg: &GenConfig) -> Projections {
        Projections {
            img: orthonormal_columns(cfg.d_raw, cfg.d_lat, cfg.seed, "proj-img"),
            txt: orthonormal_columns(cfg.d_raw, cfg.d_lat, cfg.seed, "proj-txt"),
            ocr: orthonormal_columns(cfg.d_raw, cfg.d_lat, cfg.seed, "proj-ocr"),
        }
    }

    pub fn for_modality(&self, m: Modality) -> &Mat {
        match m {
            Modality::Image => &self.img,
            Modality::Text => &self.txt,
            Modality::Ocr => &self.ocr,
        }
    }
}

/// Random matrix with orthonormal columns via twice-applied Gram-Schmidt.
fn orthonormal_columns(rows: usize, cols: usize, seed: u64, tag: &str) -> Mat {
    let mut s = Stream::new(seed, tag, &[]);
    // Column-major scratch for orthogonalization.
    let mut col_vecs: Vec<Vec<f64>> = (0..cols).map(|_| s.gaussian_vec(rows)).collect();
    for pass in 0..2 {
        for c in 0..cols {
            for p in 0..c {
                let proj = crate::linalg::dot(&col_vecs[c], &col_vecs[p]);
                let prev = col_vecs[p].clone();
                axpy(&mut col_vecs[c], -proj, &prev);
            }
            let n = crate::linalg::normalize(&mut col_vecs[c]);
            assert!(n > 1e-9 || pass == 0, "degenerate column during QR");
        }
    }
    Mat::from_fn(rows, cols, |r, c| col_vecs[c][r])
}

/// Ground-truth record of every generated latent; consumed only by the
/// annotator surrogate and by test oracles, never by the trainers.
#[derive(Debug, Clone, Default)]
pub struct LatentLedger {
    pub item_latents: BTreeMap<ItemId, Vec<f64>>,
    pub note_topics: BTreeMap<NoteId, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum LedgerLine {
    Note { note: NoteId, topic: usize },
    Item { item: ItemId, latent: Vec<f64> },
}

impl LatentLedger {
    pub fn latent(&self, id: ItemId) -> Result<&Vec<f64>> {
        self.item_latents
            .get(&id)
            .ok_or_else(|| Error::validation(format!("item {id} not present in ledger")))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for (&note, &topic) in &self.note_topics {
            writeln!(
                w,
                "{}",
                serde_json::to_string(&LedgerLine::Note { note, topic })?
            )?;
        }
        for (&item, latent) in &self.item_latents {
            writeln!(
                w,
                "{}",
                serde_json::to_string(&LedgerLine::Item {
                    item,
                    latent: latent.clone()
                })?
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<LatentLedger> {
        let mut ledger = LatentLedger::default();
        for line in BufReader::new(std::fs::File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                LedgerLine::Note { note, topic } => {
                    ledger.note_topics.insert(note, topic);
                }
                LedgerLine::Item { item, latent } => {
                    if ledger.item_latents.insert(item, latent).is_some() {
                        return Err(Error::validation(format!("duplicate ledger item {item}")));
                    }
                }
            }
        }
        Ok(ledger)
    }
}

fn item_noise_stream(cfg_seed: u64, id: ItemId) -> Stream {
    // Structural key, stable regardless of generation order.
    let (kind, note, slot, sub) = match id {
        ItemId::Image { note, slot } => (1u64, note, slot as u64, 0u64),
        ItemId::Ocr { note, slot } => (2, note, slot as u64, 0),
        ItemId::Title { note } => (3, note, 0, 0),
        ItemId::Body { note } => (4, note, 0, 0),
        ItemId::Caption { note, slot, seed } => (5, note, slot as u64, seed),
        ItemId::ExpertOcr { note, slot, seed } => (6, note, slot as u64, seed),
    };
    Stream::new(cfg_seed, "item-noise", &[kind, note, slot, splitmix64(sub)])
}

fn project_with_noise(
    proj: &Mat,
    latent: &[f64],
    sigma: f64,
    stream: &mut Stream,
) -> Vec<f32> {
    let mut raw = proj.matvec(latent);
    if sigma > 0.0 {
        for v in raw.iter_mut() {
            *v += sigma * stream.gaussian();
        }
    }
    raw.into_iter().map(|v| v as f32).collect()
}

/// Generates the corpus and its ground-truth ledger. Pure function of the
/// config: equal configs yield byte-identical corpora.
pub fn gen_corpus(cfg: &GenConfig) -> Result<(Corpus, LatentLedger)> {
    cfg.validate()?;
    let digest = cfg.digest();
    let proj = Projections::derive(cfg);

    // Topic latents are random orthonormal directions scaled to the norm a
    // standard normal vector would have; topics beyond d_lat reuse a
    // direction with flipped sign. Cross-topic latent cosine is therefore
    // exactly 0 or -1, which keeps topics separated regardless of dimension.
    let n_dirs = cfg.n_topics.min(cfg.d_lat);
    let basis = orthonormal_columns(cfg.d_lat, n_dirs, cfg.seed, "topics");
    let scale = (cfg.d_lat as f64).sqrt();
    let topics: Vec<Vec<f64>> = (0..cfg.n_topics)
        .map(|k| {
            let dir = k % n_dirs;
            let sign = if k < n_dirs { 1.0 } else { -1.0 };
            (0..cfg.d_lat)
                .map(|r| sign * scale * basis.row(r)[dir])
                .collect()
        })
        .collect();

    let mut ledger = LatentLedger::default();
    let mut notes = Vec::with_capacity(cfg.n_notes);
    for n in 0..cfg.n_notes as u64 {
        let topic = cfg.topic_of(n);
        let mut ns = Stream::new(cfg.seed, "note", &[n]);
        let m = ns.range_inclusive(cfg.m_range.0, cfg.m_range.1);
        let mut note_latent = topics[topic].clone();
        for v in note_latent.iter_mut() {
            *v += NOTE_OFFSET_SIGMA * ns.gaussian();
        }

        let mut images = Vec::with_capacity(m as usize);
        let mut ocr_texts = Vec::with_capacity(m as usize);
        for slot in 1..=m {
            let mut is = Stream::new(cfg.seed, "imglat", &[n, slot as u64]);
            let mut img_latent = note_latent.clone();
            for v in img_latent.iter_mut() {
                *v += IMAGE_OFFSET_SIGMA * is.gaussian();
            }
            let img_id = ItemId::Image { note: n, slot };
            let ocr_id = ItemId::Ocr { note: n, slot };
            let img_feat = project_with_noise(
                &proj.img,
                &img_latent,
                cfg.noise_sigma,
                &mut item_noise_stream(cfg.seed, img_id),
            );
            let ocr_feat = project_with_noise(
                &proj.ocr,
                &img_latent,
                cfg.noise_sigma,
                &mut item_noise_stream(cfg.seed, ocr_id),
            );
            images.push(ModalItem {
                id: img_id,
                modality: Modality::Image,
                features: img_feat,
                origin: Some(Origin { note: n, slot }),
            });
            ocr_texts.push(ModalItem {
                id: ocr_id,
                modality: Modality::Ocr,
                features: ocr_feat,
                origin: Some(Origin { note: n, slot }),
            });
            ledger.item_latents.insert(img_id, img_latent.clone());
            ledger.item_latents.insert(ocr_id, img_latent);
        }

        let title_id = ItemId::Title { note: n };
        let body_id = ItemId::Body { note: n };
        let title = ModalItem {
            id: title_id,
            modality: Modality::Text,
            features: project_with_noise(
                &proj.txt,
                &note_latent,
                cfg.noise_sigma,
                &mut item_noise_stream(cfg.seed, title_id),
            ),
            origin: Some(Origin { note: n, slot: 0 }),
        };
        let body = ModalItem {
            id: body_id,
            modality: Modality::Text,
            features: project_with_noise(
                &proj.txt,
                &note_latent,
                cfg.noise_sigma,
                &mut item_noise_stream(cfg.seed, body_id),
            ),
            origin: Some(Origin { note: n, slot: 0 }),
        };
        ledger.item_latents.insert(title_id, note_latent.clone());
        ledger.item_latents.insert(body_id, note_latent);
        ledger.note_topics.insert(n, topic);

        notes.push(Note {
            id: n,
            images,
            ocr_texts,
            title,
            body,
        });
    }

    let corpus = Corpus {
        notes,
        d_raw: cfg.d_raw,
        seed: cfg.seed,
        config_digest: digest,
    };
    corpus.validate()?;
    Ok((corpus, ledger))
}

/// Surrogate for the annotator and expert OCR models: derives caption and
/// OCR items whose latents are the source image's own latent.
pub struct Annotator<'a> {
    cfg: &'a GenConfig,
    ledger: &'a LatentLedger,
    proj: Projections,
}

impl<'a> Annotator<'a> {
    pub fn new(cfg: &'a GenConfig, ledger: &'a LatentLedger) -> Self {
        Annotator {
            cfg,
            ledger,
            proj: Projections::derive(cfg),
        }
    }

    pub fn projections(&self) -> &Projections {
        &self.proj
    }

    fn derive(&self, image: &ModalItem, seed: u64, as_ocr: bool) -> Result<ModalItem> {
        let latent = self.ledger.latent(image.id)?;
        let origin = image.origin.ok_or_else(|| {
            Error::validation(format!("image {} has no origin", image.id))
        })?;
        let (id, modality, proj) = if as_ocr {
            (
                ItemId::ExpertOcr {
                    note: origin.note,
                    slot: origin.slot,
                    seed,
                },
                Modality::Ocr,
                &self.proj.ocr,
            )
        } else {
            (
                ItemId::Caption {
                    note: origin.note,
                    slot: origin.slot,
                    seed,
                },
                Modality::Text,
                &self.proj.txt,
            )
        };
        let features = project_with_noise(
            proj,
            latent,
            self.cfg.noise_sigma,
            &mut item_noise_stream(self.cfg.seed, id),
        );
        Ok(ModalItem {
            id,
            modality,
            features,
            origin: Some(origin),
        })
    }

    /// Semantically aligned text description of an image.
    pub fn derive_caption(&self, image: &ModalItem, seed: u64) -> Result<ModalItem> {
        self.derive(image, seed, false)
    }

    /// Expert OCR extraction from an image.
    pub fn derive_ocr(&self, image: &ModalItem, seed: u64) -> Result<ModalItem> {
        self.derive(image, seed, true)
    }
}

/// Held-out note ids: within each topic, notes are ranked by a hash of their
/// id and the top 10% (rounded up) are held out. Stratified and stable.
pub fn holdout_notes(cfg: &GenConfig, corpus: &Corpus) -> BTreeSet<NoteId> {
    let mut by_topic: BTreeMap<usize, Vec<NoteId>> = BTreeMap::new();
    for note in &corpus.notes {
        by_topic
            .entry(cfg.topic_of(note.id))
            .or_default()
            .push(note.id);
    }
    let mut held = BTreeSet::new();
    for ids in by_topic.values_mut() {
        ids.sort_by_key(|&id| (splitmix64(id), id));
        let take = ids.len().div_ceil(10);
        held.extend(ids.iter().take(take));
    }
    held
}

/// Complement of [`holdout_notes`].
pub fn train_notes(cfg: &GenConfig, corpus: &Corpus) -> BTreeSet<NoteId> {
    let held = holdout_notes(cfg, corpus);
    corpus
        .notes
        .iter()
        .map(|n| n.id)
        .filter(|id| !held.contains(id))
        .collect()
}

/// File names inside a corpus directory.
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const CONFIG_FILE: &str = "config.json";

/// Writes corpus, ledger sidecar, and the generation config into a directory.
pub fn write_corpus_dir(dir: &Path, cfg: &GenConfig, corpus: &Corpus, ledger: &LatentLedger) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    corpus.write_jsonl(&dir.join(CORPUS_FILE))?;
    ledger.write_jsonl(&dir.join(LEDGER_FILE))?;
    cfg.write_json(&dir.join(CONFIG_FILE))?;
    Ok(())
}

pub fn read_corpus_dir(dir: &Path) -> Result<(GenConfig, Corpus)> {
    let cfg = GenConfig::read_json(&dir.join(CONFIG_FILE))?;
    let corpus = Corpus::read_jsonl(&dir.join(CORPUS_FILE))?;
    Ok((cfg, corpus))
}

pub fn read_ledger(dir: &Path) -> Result<LatentLedger> {
    LatentLedger::read_jsonl(&dir.join(LEDGER_FILE))
}

//! Core domain types: modal items, composite notes, sub-note views, the
//! ten-task retrieval taxonomy, and the corpus container with its JSON-lines
//! serialization.
//!
//! All types are immutable after construction and safe to share across
//! threads.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Identifier of a note; unique corpus-wide.
pub type NoteId = u64;

/// Structured item identifier. Uniqueness is by construction: the variant,
/// owning note, slot, and (for derived items) the derivation seed pin the
/// identity. Serialized as a compact string, e.g. `img:12:3` or `cap:12:3:97`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ItemId {
    Image { note: NoteId, slot: u32 },
    Ocr { note: NoteId, slot: u32 },
    Title { note: NoteId },
    Body { note: NoteId },
    /// Text description derived from an image (annotator surrogate output).
    Caption { note: NoteId, slot: u32, seed: u64 },
    /// OCR extraction derived from an image (expert-model surrogate output).
    ExpertOcr { note: NoteId, slot: u32, seed: u64 },
}

impl ItemId {
    /// Note this item belongs to or was derived from.
    pub fn note(&self) -> NoteId {
        match *self {
            ItemId::Image { note, .. }
            | ItemId::Ocr { note, .. }
            | ItemId::Title { note }
            | ItemId::Body { note }
            | ItemId::Caption { note, .. }
            | ItemId::ExpertOcr { note, .. } => note,
        }
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ItemId::Image { note, slot } => write!(f, "img:{note}:{slot}"),
            ItemId::Ocr { note, slot } => write!(f, "ocr:{note}:{slot}"),
            ItemId::Title { note } => write!(f, "title:{note}"),
            ItemId::Body { note } => write!(f, "body:{note}"),
            ItemId::Caption { note, slot, seed } => write!(f, "cap:{note}:{slot}:{seed}"),
            ItemId::ExpertOcr { note, slot, seed } => write!(f, "xocr:{note}:{slot}:{seed}"),
        }
    }
}

impl FromStr for ItemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::validation(format!("malformed item id `{s}`"));
        let num = |t: &str| t.parse::<u64>().map_err(|_| bad());
        match parts.as_slice() {
            ["img", n, sl] => Ok(ItemId::Image {
                note: num(n)?,
                slot: num(sl)? as u32,
            }),
            ["ocr", n, sl] => Ok(ItemId::Ocr {
                note: num(n)?,
                slot: num(sl)? as u32,
            }),
            ["title", n] => Ok(ItemId::Title { note: num(n)? }),
            ["body", n] => Ok(ItemId::Body { note: num(n)? }),
            ["cap", n, sl, sd] => Ok(ItemId::Caption {
                note: num(n)?,
                slot: num(sl)? as u32,
                seed: num(sd)?,
            }),
            ["xocr", n, sl, sd] => Ok(ItemId::ExpertOcr {
                note: num(n)?,
                slot: num(sl)? as u32,
                seed: num(sd)?,
            }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ItemId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ItemId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Ocr,
}

/// (note, slot) provenance of an item; slots are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub note: NoteId,
    pub slot: u32,
}

/// A single typed constituent of a note: a feature vector of corpus-wide
/// length `d_raw` plus identity and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalItem {
    pub id: ItemId,
    pub modality: Modality,
    pub features: Vec<f32>,
    pub origin: Option<Origin>,
}

impl ModalItem {
    pub fn validate(&self, d_raw: usize) -> Result<()> {
        if self.features.len() != d_raw {
            return Err(Error::validation(format!(
                "item {} has {} features, expected d_raw = {d_raw}",
                self.id,
                self.features.len()
            )));
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation(format!(
                "item {} has non-finite features",
                self.id
            )));
        }
        Ok(())
    }
}

/// A composite multimodal item: m images, their index-aligned OCR texts, a
/// title, and a body. Videos are plain notes with more images; there is no
/// special marker.
#[derive(Debug, Clone, PartialEq)]
pub struct Note {
    pub id: NoteId,
    pub images: Vec<ModalItem>,
    pub ocr_texts: Vec<ModalItem>,
    pub title: ModalItem,
    pub body: ModalItem,
}

impl Note {
    /// Number of images.
    pub fn m(&self) -> usize {
        self.images.len()
    }

    /// Image by 1-based slot.
    pub fn image(&self, slot: u32) -> Result<&ModalItem> {
        self.images
            .get(slot as usize - 1)
            .ok_or_else(|| Error::validation(format!("note {} has no image slot {slot}", self.id)))
    }

    pub fn validate(&self, d_raw: usize) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::validation(format!("note {} has m = 0", self.id)));
        }
        if self.ocr_texts.len() != self.images.len() {
            return Err(Error::validation(format!(
                "note {}: |ocr_texts| = {} but m = {}",
                self.id,
                self.ocr_texts.len(),
                self.images.len()
            )));
        }
        for item in self.items() {
            item.validate(d_raw)?;
            let origin_note = item.origin.map(|o| o.note);
            if origin_note != Some(self.id) {
                return Err(Error::validation(format!(
                    "item {} of note {} has origin {:?}",
                    item.id, self.id, item.origin
                )));
            }
        }
        Ok(())
    }

    fn items(&self) -> impl Iterator<Item = &ModalItem> {
        self.images
            .iter()
            .chain(self.ocr_texts.iter())
            .chain(std::iter::once(&self.title))
            .chain(std::iter::once(&self.body))
    }
}

/// A view over a base note: a subset of image slots (with their aligned OCR
/// texts), optional title/body, plus injected items for modal replacement.
/// Holds the base note's id, not a deep copy; equality is structural.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubNote {
    pub base: NoteId,
    /// 1-based image slots, strictly ascending.
    pub image_subset: Vec<u32>,
    pub include_title: bool,
    pub include_body: bool,
    #[serde(default)]
    pub injected_items: Vec<ModalItem>,
}

impl SubNote {
    pub fn validate(&self, base: &Note) -> Result<()> {
        if base.id != self.base {
            return Err(Error::validation(format!(
                "subnote of {} resolved against note {}",
                self.base, base.id
            )));
        }
        let m = base.m() as u32;
        let mut prev = 0u32;
        for &s in &self.image_subset {
            if s < 1 || s > m {
                return Err(Error::validation(format!(
                    "subnote of {}: slot {s} outside 1..={m}",
                    self.base
                )));
            }
            if s <= prev {
                return Err(Error::validation(format!(
                    "subnote of {}: image_subset not strictly ascending",
                    self.base
                )));
            }
            prev = s;
        }
        let mut seen: BTreeSet<ItemId> = base
            .items()
            .filter(|it| match it.id {
                ItemId::Image { slot, .. } | ItemId::Ocr { slot, .. } => {
                    self.image_subset.contains(&slot)
                }
                ItemId::Title { .. } => self.include_title,
                ItemId::Body { .. } => self.include_body,
                _ => false,
            })
            .map(|it| it.id)
            .collect();
        for inj in &self.injected_items {
            if !seen.insert(inj.id) {
                return Err(Error::validation(format!(
                    "subnote of {}: injected item {} duplicates a selected id",
                    self.base, inj.id
                )));
            }
        }
        Ok(())
    }
}

/// Input to flattening / encoding: a bare item, a full note, or a sub-note
/// view resolved against its base note.
#[derive(Clone, Copy)]
pub enum EncodeInput<'a> {
    Item(&'a ModalItem),
    Note(&'a Note),
    Sub { base: &'a Note, sub: &'a SubNote },
}

impl<'a> EncodeInput<'a> {
    /// Canonical encoder input order: images (ascending slot), aligned OCR
    /// texts (ascending slot), title, body, then injected items in insertion
    /// order. An empty selection is rejected as degenerate.
    pub fn flatten(&self) -> Result<Vec<&'a ModalItem>> {
        let out = match *self {
            EncodeInput::Item(item) => vec![item],
            EncodeInput::Note(note) => {
                let mut v: Vec<&ModalItem> = Vec::with_capacity(2 * note.m() + 2);
                v.extend(note.images.iter());
                v.extend(note.ocr_texts.iter());
                v.push(&note.title);
                v.push(&note.body);
                v
            }
            EncodeInput::Sub { base, sub } => {
                sub.validate(base)?;
                let mut v: Vec<&ModalItem> = Vec::new();
                for &s in &sub.image_subset {
                    v.push(&base.images[s as usize - 1]);
                }
                for &s in &sub.image_subset {
                    v.push(&base.ocr_texts[s as usize - 1]);
                }
                if sub.include_title {
                    v.push(&base.title);
                }
                if sub.include_body {
                    v.push(&base.body);
                }
                v.extend(sub.injected_items.iter());
                v
            }
        };
        if out.is_empty() {
            return Err(Error::validation(
                "degenerate input: flatten selected zero items",
            ));
        }
        Ok(out)
    }
}

/// Flattens a full note. See [`EncodeInput::flatten`].
pub fn flatten_note<'a>(note: &'a Note) -> Result<Vec<&'a ModalItem>> {
    EncodeInput::Note(note).flatten()
}

/// Flattens a sub-note view against its base.
pub fn flatten_subnote<'a>(base: &'a Note, sub: &'a SubNote) -> Result<Vec<&'a ModalItem>> {
    EncodeInput::Sub { base, sub }.flatten()
}

/// Counterfactual view: the note with image `slot` (and its aligned OCR)
/// removed, keeping title and body. Maximal content overlap with the note,
/// broken membership.
pub fn subtract_image(note: &Note, slot: u32) -> Result<SubNote> {
    let m = note.m() as u32;
    if slot < 1 || slot > m {
        return Err(Error::validation(format!(
            "subtract_image: slot {slot} outside 1..={m} for note {}",
            note.id
        )));
    }
    Ok(SubNote {
        base: note.id,
        image_subset: (1..=m).filter(|&s| s != slot).collect(),
        include_title: true,
        include_body: true,
        injected_items: Vec::new(),
    })
}

/// The ten retrieval tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    I2T,
    T2I,
    I2Note,
    T2Note,
    Note2I,
    Note2T,
    Ocr2Note,
    I2Ocr,
    Ocr2I,
    Note2Note,
}

/// The five meta-task groups that partition the ten tasks (2+2+2+3+1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetaTask {
    AtomicAlignment,
    SubordinateRetrieval,
    SemanticExtraction,
    OcrPerception,
    ContentRelevance,
}

impl TaskType {
    pub const ALL: [TaskType; 10] = [
        TaskType::I2T,
        TaskType::T2I,
        TaskType::I2Note,
        TaskType::T2Note,
        TaskType::Note2I,
        TaskType::Note2T,
        TaskType::Ocr2Note,
        TaskType::I2Ocr,
        TaskType::Ocr2I,
        TaskType::Note2Note,
    ];

    /// The nine tasks trained in stage 1 (everything except Note2Note).
    pub const STAGE1: [TaskType; 9] = [
        TaskType::I2T,
        TaskType::T2I,
        TaskType::I2Note,
        TaskType::T2Note,
        TaskType::Note2I,
        TaskType::Note2T,
        TaskType::Ocr2Note,
        TaskType::I2Ocr,
        TaskType::Ocr2I,
    ];

    pub fn meta(self) -> MetaTask {
        match self {
            TaskType::I2T | TaskType::T2I => MetaTask::AtomicAlignment,
            TaskType::I2Note | TaskType::T2Note => MetaTask::SubordinateRetrieval,
            TaskType::Note2I | TaskType::Note2T => MetaTask::SemanticExtraction,
            TaskType::Ocr2Note | TaskType::I2Ocr | TaskType::Ocr2I => MetaTask::OcrPerception,
            TaskType::Note2Note => MetaTask::ContentRelevance,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskType::I2T => "i2t",
            TaskType::T2I => "t2i",
            TaskType::I2Note => "i2note",
            TaskType::T2Note => "t2note",
            TaskType::Note2I => "note2i",
            TaskType::Note2T => "note2t",
            TaskType::Ocr2Note => "ocr2note",
            TaskType::I2Ocr => "i2ocr",
            TaskType::Ocr2I => "ocr2i",
            TaskType::Note2Note => "note2note",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskType::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::validation(format!("unknown task `{s}`")))
    }
}

/// The corpus: notes plus provenance of its generation.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub notes: Vec<Note>,
    pub d_raw: usize,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    d_raw: usize,
    seed: u64,
    config_digest: String,
}

#[derive(Serialize, Deserialize)]
struct NoteLine {
    id: NoteId,
    images: Vec<Vec<f32>>,
    ocr: Vec<Vec<f32>>,
    title: Vec<f32>,
    body: Vec<f32>,
}

impl Corpus {
    pub fn note(&self, id: NoteId) -> Result<&Note> {
        self.notes
            .binary_search_by_key(&id, |n| n.id)
            .map(|i| &self.notes[i])
            .map_err(|_| Error::validation(format!("unknown note id {id}")))
    }

    pub fn validate(&self) -> Result<()> {
        let mut note_ids = BTreeSet::new();
        let mut item_ids = BTreeSet::new();
        for note in &self.notes {
            if !note_ids.insert(note.id) {
                return Err(Error::validation(format!("duplicate note id {}", note.id)));
            }
            note.validate(self.d_raw)?;
            for item in note.items() {
                if !item_ids.insert(item.id) {
                    return Err(Error::validation(format!("duplicate item id {}", item.id)));
                }
            }
        }
        Ok(())
    }

    /// Writes the corpus as JSON lines: a header carrying `{d_raw, seed,
    /// config_digest}` followed by one note per line. f32 values survive the
    /// round trip exactly (shortest round-trip decimal encoding).
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = CorpusHeader {
            d_raw: self.d_raw,
            seed: self.seed,
            config_digest: self.config_digest.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for note in &self.notes {
            let line = NoteLine {
                id: note.id,
                images: note.images.iter().map(|i| i.features.clone()).collect(),
                ocr: note.ocr_texts.iter().map(|i| i.features.clone()).collect(),
                title: note.title.features.clone(),
                body: note.body.features.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Corpus> {
        let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::validation("empty corpus file"))??;
        let header: CorpusHeader = serde_json::from_str(&header_line)?;
        let mut notes = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let nl: NoteLine = serde_json::from_str(&line)?;
            notes.push(note_from_line(nl)?);
        }
        let corpus = Corpus {
            notes,
            d_raw: header.d_raw,
            seed: header.seed,
            config_digest: header.config_digest,
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

/// Rebuilds a note with canonical item ids and origins from its raw feature
/// rows.
pub fn note_from_features(
    id: NoteId,
    images: Vec<Vec<f32>>,
    ocr: Vec<Vec<f32>>,
    title: Vec<f32>,
    body: Vec<f32>,
) -> Result<Note> {
    if images.is_empty() || images.len() != ocr.len() {
        return Err(Error::validation(format!(
            "note {id}: need m >= 1 and |ocr| = m (got {} images, {} ocr)",
            images.len(),
            ocr.len()
        )));
    }
    let mk = |idv: ItemId, modality: Modality, features: Vec<f32>, slot: u32| ModalItem {
        id: idv,
        modality,
        features,
        origin: Some(Origin { note: id, slot }),
    };
    let images: Vec<ModalItem> = images
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            let slot = i as u32 + 1;
            mk(ItemId::Image { note: id, slot }, Modality::Image, f, slot)
        })
        .collect();
    let ocr: Vec<ModalItem> = ocr
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            let slot = i as u32 + 1;
            mk(ItemId::Ocr { note: id, slot }, Modality::Ocr, f, slot)
        })
        .collect();
    Ok(Note {
        id,
        images,
        ocr_texts: ocr,
        title: mk(ItemId::Title { note: id }, Modality::Text, title, 0),
        body: mk(ItemId::Body { note: id }, Modality::Text, body, 0),
    })
}

fn note_from_line(nl: NoteLine) -> Result<Note> {
    note_from_features(nl.id, nl.images, nl.ocr, nl.title, nl.body)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn tiny_note(id: NoteId, m: usize, d: usize) -> Note {
        let feat = |k: usize| (0..d).map(|j| (k * d + j) as f32 * 0.01).collect();
        note_from_features(
            id,
            (0..m).map(|i| feat(i)).collect(),
            (0..m).map(|i| feat(100 + i)).collect(),
            feat(200),
            feat(300),
        )
        .unwrap()
    }

    #[test]
    fn flatten_note_order_and_length() {
        let n = tiny_note(1, 2, 4);
        let flat = flatten_note(&n).unwrap();
        assert_eq!(flat.len(), 6); // 2m + 2
        let ids: Vec<String> = flat.iter().map(|i| i.id.to_string()).collect();
        assert_eq!(
            ids,
            vec!["img:1:1", "img:1:2", "ocr:1:1", "ocr:1:2", "title:1", "body:1"]
        );
    }

    #[test]
    fn flatten_subnote_subset_selection() {
        let n = tiny_note(1, 2, 4);
        let sub = SubNote {
            base: 1,
            image_subset: vec![2],
            include_title: false,
            include_body: false,
            injected_items: Vec::new(),
        };
        let flat = flatten_subnote(&n, &sub).unwrap();
        let ids: Vec<String> = flat.iter().map(|i| i.id.to_string()).collect();
        assert_eq!(ids, vec!["img:1:2", "ocr:1:2"]);
    }

    #[test]
    fn flatten_subnote_injection_only() {
        let n = tiny_note(1, 2, 4);
        let injected = ModalItem {
            id: ItemId::Caption {
                note: 1,
                slot: 1,
                seed: 9,
            },
            modality: Modality::Text,
            features: vec![0.0; 4],
            origin: Some(Origin { note: 1, slot: 1 }),
        };
        let sub = SubNote {
            base: 1,
            image_subset: vec![],
            include_title: false,
            include_body: false,
            injected_items: vec![injected.clone()],
        };
        let flat = flatten_subnote(&n, &sub).unwrap();
        assert_eq!(flat.len(), 1);
        assert_eq!(flat[0].id, injected.id);
    }

    #[test]
    fn flatten_rejects_empty_selection() {
        let n = tiny_note(1, 2, 4);
        let sub = SubNote {
            base: 1,
            image_subset: vec![],
            include_title: false,
            include_body: false,
            injected_items: Vec::new(),
        };
        assert!(flatten_subnote(&n, &sub).is_err());
    }

    #[test]
    fn flatten_is_deterministic() {
        let n = tiny_note(3, 4, 4);
        let a: Vec<String> = flatten_note(&n)
            .unwrap()
            .iter()
            .map(|i| i.id.to_string())
            .collect();
        let b: Vec<String> = flatten_note(&n)
            .unwrap()
            .iter()
            .map(|i| i.id.to_string())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn subtract_image_drops_slot_and_aligned_ocr() {
        let n = tiny_note(1, 3, 4);
        let sub = subtract_image(&n, 1).unwrap();
        assert_eq!(sub.image_subset, vec![2, 3]);
        let flat = flatten_subnote(&n, &sub).unwrap();
        assert_eq!(flat.len(), flatten_note(&n).unwrap().len() - 2);
        for item in flat {
            match item.id {
                ItemId::Image { slot, .. } | ItemId::Ocr { slot, .. } => assert_ne!(slot, 1),
                _ => {}
            }
        }
    }

    #[test]
    fn subtract_image_boundary_m1() {
        let n = tiny_note(1, 1, 4);
        let sub = subtract_image(&n, 1).unwrap();
        assert!(sub.image_subset.is_empty());
        let flat = flatten_subnote(&n, &sub).unwrap();
        assert_eq!(flat.len(), 2); // title + body only
    }

    #[test]
    fn subtract_image_rejects_out_of_range() {
        let n = tiny_note(1, 2, 4);
        assert!(subtract_image(&n, 0).is_err());
        assert!(subtract_image(&n, 3).is_err());
    }

    #[test]
    fn meta_tasks_partition_ten_tasks() {
        use std::collections::HashMap;
        let mut counts: HashMap<_, usize> = HashMap::new();
        for t in TaskType::ALL {
            *counts.entry(t.meta()).or_default() += 1;
        }
        assert_eq!(counts[&MetaTask::AtomicAlignment], 2);
        assert_eq!(counts[&MetaTask::SubordinateRetrieval], 2);
        assert_eq!(counts[&MetaTask::SemanticExtraction], 2);
        assert_eq!(counts[&MetaTask::OcrPerception], 3);
        assert_eq!(counts[&MetaTask::ContentRelevance], 1);
        assert_eq!(counts.values().sum::<usize>(), 10);
    }

    #[test]
    fn item_id_string_round_trip() {
        let ids = [
            ItemId::Image { note: 12, slot: 3 },
            ItemId::Ocr { note: 0, slot: 1 },
            ItemId::Title { note: 7 },
            ItemId::Body { note: 7 },
            ItemId::Caption {
                note: 4,
                slot: 2,
                seed: 99,
            },
            ItemId::ExpertOcr {
                note: 4,
                slot: 2,
                seed: 1,
            },
        ];
        for id in ids {
            let s = id.to_string();
            assert_eq!(s.parse::<ItemId>().unwrap(), id);
        }
        assert!("cap:1".parse::<ItemId>().is_err());
        assert!("nope:1:2".parse::<ItemId>().is_err());
    }

    #[test]
    fn task_name_round_trip() {
        for t in TaskType::ALL {
            assert_eq!(t.name().parse::<TaskType>().unwrap(), t);
        }
        assert!("i2i".parse::<TaskType>().is_err());
    }

    #[test]
    fn corpus_duplicate_ids_rejected() {
        let n1 = tiny_note(1, 2, 4);
        let n2 = tiny_note(1, 2, 4);
        let corpus = Corpus {
            notes: vec![n1, n2],
            d_raw: 4,
            seed: 0,
            config_digest: String::new(),
        };
        assert!(corpus.validate().is_err());
    }
}

//! Mixed-modal sequences: discrete tokens interleaved with continuous blocks.
//!
//! A [`MixedSequence`] is an ordered list of [`Element`]s with an uncorrupted
//! prompt prefix. Gaps are numbered `0..=n` for a length-`n` sequence, gap 0
//! sitting before the first element, so insertion can build a sequence from
//! nothing. The vocabulary reserves one id past the ordinary range for the
//! image token; that id never appears in a materialized sequence — inserting
//! it expands into a fresh noise [`ImageBlock`] instead.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitRng;
use crate::schedule::ExtendedTime;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("gap index {gap} out of range for length {len}")]
    GapOutOfRange { gap: usize, len: usize },
    #[error("insertion would exceed maximum length {max_len}")]
    Capacity { max_len: usize },
    #[error("token id {id} outside vocabulary of size {size} (image id {image_id})")]
    BadToken { id: u32, size: usize, image_id: u32 },
    #[error("image block dimension {got}, expected {expected}")]
    BadImageDim { got: usize, expected: usize },
    #[error("prompt length {prompt_len} exceeds sequence length {len}")]
    BadPromptLen { prompt_len: usize, len: usize },
    #[error("record parse error: {0}")]
    Parse(String),
}

/// Token vocabulary of `size` ordinary ids `0..size`, with the image token
/// one past the ordinary range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

impl Vocabulary {
    pub fn new(size: usize) -> Self {
        assert!(size > 0, "vocabulary must have at least one token");
        Self { size, names: None }
    }

    pub fn with_names(size: usize, names: Vec<String>) -> Self {
        assert_eq!(names.len(), size, "one name per ordinary token");
        Self {
            size,
            names: Some(names),
        }
    }

    /// Names file: one name per line, line number = id.
    pub fn load_names<R: BufRead>(size: usize, reader: R) -> Result<Self, SequenceError> {
        let names: Vec<String> = reader
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|e| SequenceError::Parse(e.to_string()))?;
        if names.len() != size {
            return Err(SequenceError::Parse(format!(
                "expected {size} names, found {}",
                names.len()
            )));
        }
        Ok(Self::with_names(size, names))
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn image_token_id(&self) -> u32 {
        self.size as u32
    }

    /// Distribution support of the token head: ordinary tokens plus the image token.
    pub fn head_width(&self) -> usize {
        self.size + 1
    }

    pub fn name_of(&self, id: u32) -> String {
        if id == self.image_token_id() {
            return "<image>".to_string();
        }
        match &self.names {
            Some(names) if (id as usize) < names.len() => names[id as usize].clone(),
            _ => format!("t{id}"),
        }
    }
}

/// A continuous block standing in for an image latent, carrying its own clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBlock {
    pub values: Vec<f64>,
    pub time: ExtendedTime,
}

impl ImageBlock {
    pub fn noise(dim: usize, rng: &mut SplitRng) -> Self {
        Self {
            values: rng.normal_vec(dim),
            time: ExtendedTime::new(0.0),
        }
    }

    pub fn clean(values: Vec<f64>) -> Self {
        Self {
            values,
            time: ExtendedTime::new(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Element {
    Token(u32),
    Image(ImageBlock),
}

impl Element {
    pub fn is_image(&self) -> bool {
        matches!(self, Element::Image(_))
    }

    /// Discrete identity: the token id, or the image token id for blocks.
    pub fn id(&self, vocab: &Vocabulary) -> u32 {
        match self {
            Element::Token(id) => *id,
            Element::Image(_) => vocab.image_token_id(),
        }
    }
}

/// Capacity and dimensionality limits for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqBounds {
    pub max_len: usize,
    pub img_dim: usize,
}

/// An ordered sequence of elements with an uncorrupted prompt prefix.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MixedSequence {
    elements: Vec<Element>,
    prompt_len: usize,
}

impl MixedSequence {
    pub fn new(elements: Vec<Element>, prompt_len: usize) -> Result<Self, SequenceError> {
        if prompt_len > elements.len() {
            return Err(SequenceError::BadPromptLen {
                prompt_len,
                len: elements.len(),
            });
        }
        Ok(Self {
            elements,
            prompt_len,
        })
    }

    pub fn from_tokens(ids: &[u32]) -> Self {
        Self {
            elements: ids.iter().map(|&id| Element::Token(id)).collect(),
            prompt_len: 0,
        }
    }

    pub fn from_prompt_and_target(prompt: &[u32], target: Vec<Element>) -> Self {
        let mut elements: Vec<Element> = prompt.iter().map(|&id| Element::Token(id)).collect();
        let prompt_len = elements.len();
        elements.extend(target);
        Self {
            elements,
            prompt_len,
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// A length-n sequence has n + 1 gaps, gap 0 before the first element.
    pub fn gap_count(&self) -> usize {
        self.elements.len() + 1
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn element(&self, i: usize) -> &Element {
        &self.elements[i]
    }

    /// Gaps at which insertion is allowed: everything from the end of the
    /// prompt onward. Inserting before or inside the prompt would corrupt
    /// the conditioning.
    pub fn gap_is_editable(&self, gap: usize) -> bool {
        gap >= self.prompt_len && gap <= self.len()
    }

    /// The discrete identity sequence: ids with images mapped to the image token.
    pub fn id_skeleton(&self, vocab: &Vocabulary) -> Vec<u32> {
        self.elements.iter().map(|e| e.id(vocab)).collect()
    }

    /// Value-semantics insertion at `gap`. Inserting the image token id
    /// materializes a standard-normal [`ImageBlock`] at time 0.
    pub fn insert(
        &self,
        gap: usize,
        id: u32,
        vocab: &Vocabulary,
        bounds: &SeqBounds,
        rng: &mut SplitRng,
    ) -> Result<MixedSequence, SequenceError> {
        if gap > self.len() {
            return Err(SequenceError::GapOutOfRange {
                gap,
                len: self.len(),
            });
        }
        if self.len() + 1 > bounds.max_len {
            return Err(SequenceError::Capacity {
                max_len: bounds.max_len,
            });
        }
        if id > vocab.image_token_id() {
            return Err(SequenceError::BadToken {
                id,
                size: vocab.size(),
                image_id: vocab.image_token_id(),
            });
        }
        let element = if id == vocab.image_token_id() {
            Element::Image(ImageBlock::noise(bounds.img_dim, rng))
        } else {
            Element::Token(id)
        };
        let mut elements = self.elements.clone();
        elements.insert(gap, element);
        Ok(MixedSequence {
            elements,
            prompt_len: self.prompt_len,
        })
    }

    /// Overwrite the block at `pos` in place; used by the sampler's
    /// per-step flow updates. Panics if `pos` does not hold an image.
    pub fn update_image_block(&mut self, pos: usize, values: Vec<f64>, time: ExtendedTime) {
        match &mut self.elements[pos] {
            Element::Image(block) => {
                block.values = values;
                block.time = time;
            }
            Element::Token(_) => panic!("position {pos} does not hold an image"),
        }
    }

    pub fn validate(&self, vocab: &Vocabulary, img_dim: usize) -> Result<(), SequenceError> {
        for e in &self.elements {
            match e {
                Element::Token(id) => {
                    if *id >= vocab.image_token_id() {
                        return Err(SequenceError::BadToken {
                            id: *id,
                            size: vocab.size(),
                            image_id: vocab.image_token_id(),
                        });
                    }
                }
                Element::Image(block) => {
                    if block.values.len() != img_dim {
                        return Err(SequenceError::BadImageDim {
                            got: block.values.len(),
                            expected: img_dim,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_record(&self) -> SequenceRecord {
        let entry = |e: &Element| match e {
            Element::Token(id) => RecordEntry::Token(*id),
            Element::Image(block) => RecordEntry::Image {
                img: block.values.clone(),
                t: block.time.tau(),
            },
        };
        SequenceRecord {
            prompt: self.elements[..self.prompt_len].iter().map(entry).collect(),
            target: self.elements[self.prompt_len..].iter().map(entry).collect(),
        }
    }

    pub fn from_record(record: &SequenceRecord) -> Result<Self, SequenceError> {
        let lift = |e: &RecordEntry| -> Element {
            match e {
                RecordEntry::Token(id) => Element::Token(*id),
                RecordEntry::Image { img, t } => Element::Image(ImageBlock {
                    values: img.clone(),
                    time: ExtendedTime::new(*t),
                }),
            }
        };
        let mut elements: Vec<Element> = record.prompt.iter().map(lift).collect();
        let prompt_len = elements.len();
        elements.extend(record.target.iter().map(lift));
        Ok(Self {
            elements,
            prompt_len,
        })
    }
}

/// Exact token counts over a corpus; images counted under the image token id.
pub fn token_histogram(seqs: &[MixedSequence], vocab: &Vocabulary) -> BTreeMap<u32, u64> {
    let mut hist = BTreeMap::new();
    for seq in seqs {
        for e in seq.elements() {
            *hist.entry(e.id(vocab)).or_insert(0) += 1;
        }
    }
    hist
}

fn tau_one() -> f64 {
    1.0
}

fn tau_is_one(t: &f64) -> bool {
    *t == 1.0
}

/// One dataset line: `{"prompt": [ids...], "target": [ids or {"img": [...]}...]}`.
/// Image entries carry an explicit clock only when it differs from 1 (clean).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub prompt: Vec<RecordEntry>,
    pub target: Vec<RecordEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecordEntry {
    Token(u32),
    Image {
        img: Vec<f64>,
        #[serde(default = "tau_one", skip_serializing_if = "tau_is_one")]
        t: f64,
    },
}

/// Write one JSON record per line.
pub fn write_jsonl<W: Write>(out: &mut W, seqs: &[MixedSequence]) -> std::io::Result<()> {
    for seq in seqs {
        serde_json::to_writer(&mut *out, &seq.to_record())?;
        writeln!(out)?;
    }
    Ok(())
}

/// Read a line-oriented dataset, skipping blank lines.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<MixedSequence>, SequenceError> {
    let mut seqs = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| SequenceError::Parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SequenceRecord =
            serde_json::from_str(&line).map_err(|e| SequenceError::Parse(e.to_string()))?;
        seqs.push(MixedSequence::from_record(&record)?);
    }
    Ok(seqs)
}

//! Instruction template, byte tokenizer, sample building and batching.
//!
//! A training sequence is
//!
//! ```text
//! [patch rows, each followed by NEWLINE] " User:{instruction} Assistant:" ANSWER_START {answer} EOS
//! ```
//!
//! and only the answer bytes and EOS are supervised.

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Element, SequenceInput};
use crate::patch::{patchify, RawImage, ResizePolicy};

/// Byte ids occupy `0..256`.
pub const BYTE_TOKENS: u32 = 256;
/// Marker byte for the answer start inside rendered template text.
pub const ANSWER_MARKER: char = '\x04';

/// Reserved ids at the top of the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub newline: u32,
    pub answer_start: u32,
    pub eos: u32,
    pub pad: u32,
}

impl SpecialTokens {
    /// The last four ids of a vocabulary of `vocab` entries.
    pub fn for_vocab(vocab: usize) -> Result<Self> {
        if vocab < BYTE_TOKENS as usize + 4 {
            return Err(Error::config(format!(
                "vocab {vocab} cannot hold 256 byte ids and 4 special tokens"
            )));
        }
        let top = vocab as u32;
        Ok(Self {
            newline: top - 4,
            answer_start: top - 3,
            eos: top - 2,
            pad: top - 1,
        })
    }
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self::for_vocab(512).expect("512 fits")
    }
}

pub fn tokenize_text(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`tokenize_text`]; ids outside the byte range are skipped.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| id < BYTE_TOKENS)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone)]
pub enum ImageRef {
    Path(PathBuf),
    Inline(Arc<RawImage>),
}

impl ImageRef {
    pub fn load(&self) -> Result<Arc<RawImage>> {
        match self {
            ImageRef::Path(p) => RawImage::load(p).map(Arc::new),
            ImageRef::Inline(img) => Ok(Arc::clone(img)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct InstructionSample {
    pub image: ImageRef,
    pub instruction: String,
    pub answer: String,
    pub dataset: String,
}

/// One line of a pair file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub image: String,
    pub instruction: String,
    pub answer: String,
    #[serde(default)]
    pub dataset: String,
}

/// Reads a JSON-lines pair file. Relative image paths resolve against the
/// file's directory.
pub fn load_pairs(path: &Path) -> Result<Vec<InstructionSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| Error::Input {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", i + 1),
        })?;
        if rec.image.is_empty() {
            return Err(Error::Input {
                path: path.to_path_buf(),
                detail: format!("line {}: every pair needs an image", i + 1),
            });
        }
        out.push(InstructionSample {
            image: ImageRef::Path(base.join(&rec.image)),
            instruction: rec.instruction,
            answer: rec.answer,
            dataset: rec.dataset,
        });
    }
    Ok(out)
}

/// Text around the image tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedTemplate {
    /// `" User:{instruction} Assistant:\x04"`
    pub pre: String,
    /// The answer text; EOS is appended at tokenization.
    pub answer: String,
}

fn check_text(field: &str, text: &str) -> Result<()> {
    if text.is_empty() {
        return Err(Error::contract(format!("{field} must be non-empty")));
    }
    if text.contains(ANSWER_MARKER) {
        return Err(Error::contract(format!(
            "{field} contains the reserved answer-start byte 0x04"
        )));
    }
    Ok(())
}

pub fn render_prompt(instruction: &str) -> Result<String> {
    check_text("instruction", instruction)?;
    Ok(format!(" User:{instruction} Assistant:{ANSWER_MARKER}"))
}

pub fn render_template(instruction: &str, answer: &str) -> Result<RenderedTemplate> {
    check_text("answer", answer)?;
    Ok(RenderedTemplate {
        pre: render_prompt(instruction)?,
        answer: answer.to_string(),
    })
}

/// Byte ids of rendered prompt text, with the marker mapped to ANSWER_START.
pub fn prompt_ids(pre: &str, specials: &SpecialTokens) -> Vec<u32> {
    pre.bytes()
        .map(|b| {
            if b == ANSWER_MARKER as u8 {
                specials.answer_start
            } else {
                u32::from(b)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub dataset: String,
    /// Resized `(width, height)` before padding.
    pub resolution: (usize, usize),
    /// Patch plus newline positions.
    pub image_positions: usize,
}

#[derive(Debug, Clone)]
pub struct TokenizedSample {
    pub sequence: SequenceInput,
    /// Target id at each position; PAD at patch positions.
    pub labels: Vec<u32>,
    /// Supervised positions: the answer bytes and EOS.
    pub loss_mask: Vec<bool>,
    pub meta: SampleMeta,
}

impl TokenizedSample {
    /// Labels under the mask, in order.
    pub fn supervised_labels(&self) -> Vec<u32> {
        self.labels
            .iter()
            .zip(&self.loss_mask)
            .filter(|(_, &m)| m)
            .map(|(&l, _)| l)
            .collect()
    }
}

fn image_prefix<R: Rng + ?Sized>(
    image: &RawImage,
    policy: &ResizePolicy,
    specials: &SpecialTokens,
    rng: &mut R,
) -> Result<(SequenceInput, (usize, usize))> {
    let grid = patchify(image, policy, rng)?;
    let mut seq = SequenceInput::new();
    seq.extend_with_grid(&grid, specials.newline);
    Ok((seq, grid.resized_dims()))
}

/// Generation prompt: image layout and template text through ANSWER_START.
pub fn build_prompt<R: Rng + ?Sized>(
    image: &RawImage,
    instruction: &str,
    policy: &ResizePolicy,
    specials: &SpecialTokens,
    rng: &mut R,
) -> Result<SequenceInput> {
    let (mut seq, _) = image_prefix(image, policy, specials, rng)?;
    seq.extend_tokens(&prompt_ids(&render_prompt(instruction)?, specials));
    Ok(seq)
}

pub fn build_sample<R: Rng + ?Sized>(
    sample: &InstructionSample,
    policy: &ResizePolicy,
    specials: &SpecialTokens,
    rng: &mut R,
) -> Result<TokenizedSample> {
    let rendered = render_template(&sample.instruction, &sample.answer)?;
    let image = sample.image.load()?;
    let (mut seq, resolution) = image_prefix(&image, policy, specials, rng)?;
    let image_positions = seq.len();
    // newline positions carry their own id as label but stay unsupervised
    let mut labels = vec![specials.pad; image_positions];
    for (i, e) in seq.elements().iter().enumerate() {
        if let Element::Token(id) = e {
            labels[i] = *id;
        }
    }
    let pre = prompt_ids(&rendered.pre, specials);
    let mut answer = tokenize_text(&rendered.answer);
    answer.push(specials.eos);
    seq.extend_tokens(&pre);
    seq.extend_tokens(&answer);
    labels.extend_from_slice(&pre);
    labels.extend_from_slice(&answer);
    let mut loss_mask = vec![false; image_positions + pre.len()];
    loss_mask.resize(seq.len(), true);
    Ok(TokenizedSample {
        sequence: seq,
        labels,
        loss_mask,
        meta: SampleMeta {
            dataset: sample.dataset.clone(),
            resolution,
            image_positions,
        },
    })
}

/// Right-padded samples with per-sample key validity.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sequences: Vec<SequenceInput>,
    pub labels: Vec<Vec<u32>>,
    pub loss_mask: Vec<Vec<bool>>,
    /// False at padding positions; no query attends to them.
    pub key_valid: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

pub fn collate_batch(samples: &[TokenizedSample], pad: u32) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::contract("cannot collate an empty batch"));
    }
    let width = samples.iter().map(|s| s.sequence.len()).max().unwrap_or(0);
    let mut batch = Batch {
        sequences: Vec::with_capacity(samples.len()),
        labels: Vec::with_capacity(samples.len()),
        loss_mask: Vec::with_capacity(samples.len()),
        key_valid: Vec::with_capacity(samples.len()),
        lengths: Vec::with_capacity(samples.len()),
        width,
    };
    for s in samples {
        let n = s.sequence.len();
        let extra = width - n;
        let mut seq = s.sequence.clone();
        seq.extend_tokens(&vec![pad; extra]);
        let mut labels = s.labels.clone();
        labels.resize(width, pad);
        let mut mask = s.loss_mask.clone();
        mask.resize(width, false);
        let mut valid = vec![true; n];
        valid.resize(width, false);
        batch.sequences.push(seq);
        batch.labels.push(labels);
        batch.loss_mask.push(mask);
        batch.key_valid.push(valid);
        batch.lengths.push(n);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::token_budget;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(w: usize, h: usize, instruction: &str, answer: &str) -> InstructionSample {
        InstructionSample {
            image: ImageRef::Inline(Arc::new(RawImage::solid(w, h, [10, 200, 30]).unwrap())),
            instruction: instruction.into(),
            answer: answer.into(),
            dataset: "unit".into(),
        }
    }

    #[test]
    fn template_is_literal() {
        let t = render_template("Hi", "Yo").unwrap();
        assert_eq!(t.pre, " User:Hi Assistant:\x04");
        assert_eq!(t.answer, "Yo");
        assert_eq!(t.pre.matches(ANSWER_MARKER).count(), 1);
        assert!(render_template("", "Yo").is_err());
        assert!(render_template("a\x04b", "Yo").is_err());
        assert!(render_template("Hi", "").is_err());
    }

    #[test]
    fn byte_tokens() {
        assert!(tokenize_text("").is_empty());
        assert_eq!(tokenize_text("AB"), vec![65, 66]);
        assert_eq!(detokenize(&tokenize_text("héllo ✓")), "héllo ✓");
    }

    #[test]
    fn specials_sit_at_the_top() {
        let s = SpecialTokens::default();
        assert_eq!(
            (s.newline, s.answer_start, s.eos, s.pad),
            (508, 509, 510, 511)
        );
        assert!(SpecialTokens::for_vocab(259).is_err());
    }

    #[test]
    fn fixed_512_contributes_342_positions() {
        let specials = SpecialTokens::default();
        let s = sample(640, 480, "Describe", "A field");
        let t = build_sample(
            &s,
            &ResizePolicy::Fixed(512),
            &specials,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(t.meta.image_positions, 342);
        let pre = " User:Describe Assistant:".len() + 1;
        assert_eq!(t.sequence.len(), 342 + pre + "A field".len() + 1);
        assert_eq!(
            t.loss_mask.iter().filter(|&&m| m).count(),
            "A field".len() + 1
        );
        let mut expect = tokenize_text("A field");
        expect.push(specials.eos);
        assert_eq!(t.supervised_labels(), expect);
        // the position right before the answer holds ANSWER_START and is unsupervised
        let first = t.loss_mask.iter().position(|&m| m).unwrap();
        assert_eq!(t.labels[first - 1], specials.answer_start);
        assert!(!t.loss_mask[first - 1]);
    }

    #[test]
    fn dynamic_resolution_length_matches_budget() {
        let specials = SpecialTokens::default();
        let s = sample(100, 80, "Q", "A");
        let policy = ResizePolicy::DynamicSet(vec![448, 1024]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..12 {
            let t = build_sample(&s, &policy, &specials, &mut rng).unwrap();
            let (w, h) = t.meta.resolution;
            seen.insert(w);
            assert_eq!(t.meta.image_positions, token_budget(w, h).unwrap().total());
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn collate_pads_on_the_right() {
        let specials = SpecialTokens::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = build_sample(
            &sample(30, 30, "Q", "A"),
            &ResizePolicy::Original,
            &specials,
            &mut rng,
        )
        .unwrap();
        let b = build_sample(
            &sample(30, 30, "Q", "ABCDE"),
            &ResizePolicy::Original,
            &specials,
            &mut rng,
        )
        .unwrap();
        let batch = collate_batch(&[a.clone(), b], specials.pad).unwrap();
        assert_eq!(batch.width, a.sequence.len() + 4);
        assert_eq!(batch.key_valid[0].iter().filter(|&&v| !v).count(), 4);
        assert!(batch.loss_mask[0][a.sequence.len()..].iter().all(|&m| !m));
        let single = collate_batch(std::slice::from_ref(&a), specials.pad).unwrap();
        assert_eq!(single.width, a.sequence.len());
        assert!(collate_batch(&[], specials.pad).is_err());
    }

    #[test]
    fn pair_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let img = RawImage::solid(30, 30, [1, 2, 3]).unwrap();
        img.write_ppm(&dir.path().join("a.ppm")).unwrap();
        let path = dir.path().join("pairs.jsonl");
        std::fs::write(
            &path,
            "{\"image\":\"a.ppm\",\"instruction\":\"Q\",\"answer\":\"A\",\"dataset\":\"d\"}\n\n",
        )
        .unwrap();
        let pairs = load_pairs(&path).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!(pairs[0].image.load().is_ok());
        std::fs::write(
            &path,
            "{\"image\":\"\",\"instruction\":\"Q\",\"answer\":\"A\"}\n",
        )
        .unwrap();
        assert!(matches!(load_pairs(&path), Err(Error::Input { .. })));
        std::fs::write(&path, "not json\n").unwrap();
        let err = load_pairs(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }
}

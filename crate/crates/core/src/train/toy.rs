//! Twenty solid-colour images, each with its own one-byte answer.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::instruct::{ImageRef, InstructionSample, PairRecord};
use crate::patch::RawImage;

use super::manifest::{ManifestEntry, MixtureManifest};

pub const TOY_SIDE: usize = 60;
pub const TOY_COUNT: usize = 20;
pub const TOY_INSTRUCTION: &str = "What color?";
pub const TOY_DATASET: &str = "toy-colors";

/// Evenly spaced hues at two brightness levels, so neighbours differ in
/// more than one channel.
pub fn toy_color(i: usize) -> [u8; 3] {
    let hue = (i % 10) as f64 / 10.0 * 6.0;
    let level = if i < 10 { 1.0 } else { 0.55 };
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let q = |c: f64| (c * level * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

pub fn toy_answer(i: usize) -> String {
    char::from(b'a' + i as u8).to_string()
}

pub fn toy_samples() -> Vec<InstructionSample> {
    (0..TOY_COUNT)
        .map(|i| InstructionSample {
            image: ImageRef::Inline(Arc::new(
                RawImage::solid(TOY_SIDE, TOY_SIDE, toy_color(i)).expect("valid size"),
            )),
            instruction: TOY_INSTRUCTION.into(),
            answer: toy_answer(i),
            dataset: TOY_DATASET.into(),
        })
        .collect()
}

/// Writes the images, a pair file and a one-entry manifest into `dir`;
/// returns the manifest path.
pub fn write_toy_task(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for i in 0..TOY_COUNT {
        let name = format!("color_{i:02}.ppm");
        RawImage::solid(TOY_SIDE, TOY_SIDE, toy_color(i))?.write_ppm(&dir.join(&name))?;
        let rec = PairRecord {
            image: name,
            instruction: TOY_INSTRUCTION.into(),
            answer: toy_answer(i),
            dataset: TOY_DATASET.into(),
        };
        lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        lines.push('\n');
    }
    let pairs = dir.join("pairs.jsonl");
    std::fs::write(&pairs, lines).map_err(|e| Error::io(&pairs, e))?;
    let manifest = MixtureManifest::new(
        vec![ManifestEntry {
            name: TOY_DATASET.into(),
            path: "pairs.jsonl".into(),
            pair_count: TOY_COUNT,
        }],
        dir,
    )?;
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

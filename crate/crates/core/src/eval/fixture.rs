//! Synthetic benchmark records: simple drawn scenes with questions about
//! colour, counts, shape and position.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patch::RawImage;

use super::{write_records, MagRecord, Qtype, LETTERS};

pub const FIXTURE_SIDE: usize = 90;
pub const PER_QTYPE: usize = 5;
pub const FIXTURE_SEED: u64 = 283;

const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 30, 30]),
    ("green", [30, 180, 60]),
    ("blue", [40, 60, 220]),
    ("yellow", [235, 220, 40]),
    ("white", [250, 250, 250]),
    ("black", [5, 5, 5]),
];
const SHAPES: [&str; 4] = ["square", "horizontal bar", "vertical bar", "cross"];
const PLACES: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];
const COUNTS: [&str; 4] = ["1", "2", "3", "4"];

struct Canvas {
    px: Vec<u8>,
}

impl Canvas {
    fn new(bg: [u8; 3]) -> Self {
        Self {
            px: bg.repeat(FIXTURE_SIDE * FIXTURE_SIDE),
        }
    }

    fn rect(&mut self, x: usize, y: usize, w: usize, h: usize, c: [u8; 3]) {
        for yy in y..(y + h).min(FIXTURE_SIDE) {
            for xx in x..(x + w).min(FIXTURE_SIDE) {
                let i = (yy * FIXTURE_SIDE + xx) * 3;
                self.px[i..i + 3].copy_from_slice(&c);
            }
        }
    }

    fn image(&self) -> RawImage {
        RawImage::from_rgb8(FIXTURE_SIDE, FIXTURE_SIDE, &self.px).expect("fixed size")
    }
}

/// Gold text plus three distractors, shuffled; returns options and letter.
fn options<R: Rng>(gold: &str, pool: &[&str], rng: &mut R) -> (Vec<String>, char) {
    let mut others: Vec<&str> = pool.iter().copied().filter(|&o| o != gold).collect();
    others.shuffle(rng);
    let mut opts: Vec<String> = others[..3].iter().map(|s| s.to_string()).collect();
    opts.push(gold.to_string());
    opts.shuffle(rng);
    let idx = opts.iter().position(|o| o == gold).expect("gold present");
    (opts, LETTERS[idx])
}

fn scene<R: Rng>(
    qtype: Qtype,
    rng: &mut R,
) -> (RawImage, &'static str, String, &'static [&'static str]) {
    match qtype {
        Qtype::Color => {
            let (name, rgb) = COLORS[rng.random_range(0..COLORS.len())];
            let mut c = Canvas::new([128, 128, 128]);
            c.rect(
                rng.random_range(0..60),
                rng.random_range(0..60),
                30,
                30,
                rgb,
            );
            const NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "white", "black"];
            (c.image(), "What color is the square?", name.into(), &NAMES)
        }
        Qtype::Numerical => {
            let n = rng.random_range(1..=4);
            let mut cells: Vec<usize> = (0..9).collect();
            cells.shuffle(rng);
            let mut c = Canvas::new([10, 10, 10]);
            for &cell in &cells[..n] {
                c.rect(
                    (cell % 3) * 30 + 10,
                    (cell / 3) * 30 + 10,
                    10,
                    10,
                    [240, 240, 240],
                );
            }
            (
                c.image(),
                "How many squares are in the image?",
                n.to_string(),
                &COUNTS,
            )
        }
        Qtype::Identification => {
            let k = rng.random_range(0..SHAPES.len());
            let mut c = Canvas::new([10, 10, 10]);
            let w = [240, 240, 240];
            match k {
                0 => c.rect(30, 30, 30, 30, w),
                1 => c.rect(10, 40, 70, 10, w),
                2 => c.rect(40, 10, 10, 70, w),
                _ => {
                    c.rect(10, 40, 70, 10, w);
                    c.rect(40, 10, 10, 70, w);
                }
            }
            (
                c.image(),
                "Which shape is drawn?",
                SHAPES[k].into(),
                &SHAPES,
            )
        }
        Qtype::Other => {
            let k = rng.random_range(0..PLACES.len());
            let mut c = Canvas::new([200, 200, 200]);
            c.rect((k % 2) * 50 + 10, (k / 2) * 50 + 10, 20, 20, [200, 20, 20]);
            (
                c.image(),
                "Where is the red square?",
                PLACES[k].into(),
                &PLACES,
            )
        }
    }
}

/// `PER_QTYPE` records of each question type with their images.
pub fn synthetic_records(seed: u64) -> Vec<(MagRecord, RawImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qtypes = [
        Qtype::Identification,
        Qtype::Numerical,
        Qtype::Color,
        Qtype::Other,
    ];
    let mut out = Vec::new();
    for _ in 0..PER_QTYPE {
        for &qtype in &qtypes {
            let (image, question, gold, pool) = scene(qtype, &mut rng);
            let (options, gold_letter) = options(&gold, pool, &mut rng);
            let n = out.len();
            out.push((
                MagRecord {
                    id: format!("syn-{n:03}"),
                    image: PathBuf::from(format!("img_{n:03}.png")),
                    question: question.into(),
                    options,
                    gold_letter,
                    gold_freeform: gold,
                    qtype,
                },
                image,
            ));
        }
    }
    out
}

/// Writes `records.jsonl` and the images into `dir`; returns the dataset path.
pub fn write_fixture(dir: &Path, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let items = synthetic_records(seed);
    for (r, img) in &items {
        img.write_png(&dir.join(&r.image))?;
    }
    let records: Vec<MagRecord> = items.into_iter().map(|(r, _)| r).collect();
    let path = dir.join("records.jsonl");
    write_records(&path, &records)?;
    Ok(path)
}

//! Variable-resolution image tokenization.
//!
//! An image is resized according to a [`ResizePolicy`], padded on the bottom
//! and right edges to a multiple of [`PATCH_SIDE`], and cut into square
//! patches in raster-scan order. The token layout puts one image-newline
//! marker after every row of patches.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PATCH_SIDE: usize = 30;
pub const CHANNELS: usize = 3;
/// Length of one flattened patch vector.
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE * CHANNELS;
/// Normalized value written into the padding region.
pub const PAD_VALUE: f64 = 0.0;

/// Maps an 8-bit channel value into `[-1, 1]`.
#[inline]
pub fn normalize_u8(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

#[inline]
fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// RGB image with channels interleaved row-major, stored normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract(format!(
                "image dimensions must be >= 1, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * CHANNELS {
            return Err(Error::contract(format!(
                "{width}x{height} image needs {} channel values, got {}",
                width * height * CHANNELS,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            bytes.iter().map(|&b| normalize_u8(b)).collect(),
        )
    }

    pub fn solid(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let px = rgb.map(normalize_u8);
        let pixels = (0..width * height).flat_map(|_| px).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| denormalize(v)).collect()
    }

    /// Loads a binary PPM (P6, maxval 255) or, failing the magic check, a PNG.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Input {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let input_err = |detail: String| Error::Input {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.starts_with(b"P6") {
            let (w, h, data) = parse_ppm(&bytes).map_err(input_err)?;
            Self::from_rgb8(w, h, data)
        } else {
            let decoded = image::load_from_memory(&bytes)
                .map_err(|e| input_err(format!("unsupported image: {e}")))?
                .to_rgb8();
            Self::from_rgb8(
                decoded.width() as usize,
                decoded.height() as usize,
                decoded.as_raw(),
            )
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<(usize, usize, &[u8]), String> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "malformed PPM header".to_string())?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format!("only 8-bit PPM is supported (maxval {maxval})"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed PPM header".into());
    }
    pos += 1;
    let need = w * h * CHANNELS;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("PPM pixel data truncated (need {need} bytes)"))?;
    Ok((w, h, data))
}

/// How an image is resized before patching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResizePolicy {
    /// Square resize to `side × side`, distorting the aspect ratio if needed.
    Fixed(usize),
    /// Square resize to a side drawn uniformly per sample.
    DynamicSet(Vec<usize>),
    /// No resizing; only padding.
    Original,
}

impl ResizePolicy {
    pub fn validate(&self) -> Result<()> {
        let check = |s: usize| {
            if s < PATCH_SIDE {
                Err(Error::config(format!(
                    "resize side {s} is smaller than one patch ({PATCH_SIDE})"
                )))
            } else {
                Ok(())
            }
        };
        match self {
            ResizePolicy::Fixed(s) => check(*s),
            ResizePolicy::DynamicSet(sides) => {
                if sides.is_empty() {
                    return Err(Error::config("dynamic resolution set is empty"));
                }
                sides.iter().try_for_each(|&s| check(s))
            }
            ResizePolicy::Original => Ok(()),
        }
    }
}

impl FromStr for ResizePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_side = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("invalid resolution side {v:?}")))
        };
        let policy = match s.split_once(':') {
            None if s == "original" => ResizePolicy::Original,
            None => ResizePolicy::Fixed(parse_side(s)?),
            Some(("fixed", side)) => ResizePolicy::Fixed(parse_side(side)?),
            Some(("dynamic", sides)) => {
                ResizePolicy::DynamicSet(sides.split(',').map(parse_side).collect::<Result<_>>()?)
            }
            Some(_) => {
                return Err(Error::config(format!(
                    "unknown resolution {s:?}; expected fixed:S, dynamic:S1,S2,.. or original"
                )))
            }
        };
        policy.validate()?;
        Ok(policy)
    }
}

impl fmt::Display for ResizePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResizePolicy::Fixed(s) => write!(f, "fixed:{s}"),
            ResizePolicy::DynamicSet(sides) => {
                let parts: Vec<String> = sides.iter().map(usize::to_string).collect();
                write!(f, "dynamic:{}", parts.join(","))
            }
            ResizePolicy::Original => write!(f, "original"),
        }
    }
}

impl Serialize for ResizePolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ResizePolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Bilinear resize with align-corners sampling: output pixel `x` samples the
/// source at `x·(w_in-1)/(w_out-1)`.
pub fn resize_image(img: &RawImage, target_w: usize, target_h: usize) -> Result<RawImage> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::contract(format!(
            "resize target must be >= 1, got {target_w}x{target_h}"
        )));
    }
    if target_w == img.width && target_h == img.height {
        return Ok(img.clone());
    }
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let src = if out == 1 {
                    0.0
                } else {
                    i as f64 * (inp - 1) as f64 / (out - 1) as f64
                };
                let lo = (src.floor() as usize).min(inp - 1);
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let xs = coords(target_w, img.width);
    let ys = coords(target_h, img.height);
    let mut pixels = Vec::with_capacity(target_w * target_h * CHANNELS);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (p00, p01) = (img.pixel(x0, y0), img.pixel(x1, y0));
            let (p10, p11) = (img.pixel(x0, y1), img.pixel(x1, y1));
            for c in 0..CHANNELS {
                let top = p00[c] + (p01[c] - p00[c]) * fx;
                let bottom = p10[c] + (p11[c] - p10[c]) * fx;
                pixels.push(top + (bottom - top) * fy);
            }
        }
    }
    RawImage::new(target_w, target_h, pixels)
}

fn round_up(v: usize) -> usize {
    v.div_ceil(PATCH_SIDE) * PATCH_SIDE
}

/// Pads bottom and right edges with [`PAD_VALUE`] to the next patch multiple.
pub fn pad_to_patch_multiple(img: &RawImage) -> RawImage {
    let (w, h) = (round_up(img.width), round_up(img.height));
    if (w, h) == (img.width, img.height) {
        return img.clone();
    }
    let mut pixels = vec![PAD_VALUE; w * h * CHANNELS];
    let row_len = img.width * CHANNELS;
    for y in 0..img.height {
        let dst = y * w * CHANNELS;
        pixels[dst..dst + row_len].copy_from_slice(&img.pixels[y * row_len..(y + 1) * row_len]);
    }
    RawImage {
        width: w,
        height: h,
        pixels,
    }
}

/// Image and image-newline token counts implied by a resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub image_tokens: usize,
    pub newline_tokens: usize,
}

impl TokenBudget {
    pub fn total(&self) -> usize {
        self.image_tokens + self.newline_tokens
    }
}

pub fn token_budget(width: usize, height: usize) -> Result<TokenBudget> {
    if width == 0 || height == 0 {
        return Err(Error::contract(format!(
            "token_budget needs dimensions >= 1, got {width}x{height}"
        )));
    }
    let rows = height.div_ceil(PATCH_SIDE);
    let cols = width.div_ceil(PATCH_SIDE);
    Ok(TokenBudget {
        image_tokens: rows * cols,
        newline_tokens: rows,
    })
}

pub fn sample_dynamic_resolution<R: Rng + ?Sized>(sides: &[usize], rng: &mut R) -> Result<usize> {
    if sides.is_empty() {
        return Err(Error::contract("dynamic resolution set is empty"));
    }
    Ok(sides[rng.random_range(0..sides.len())])
}

/// One position of the image token layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutItem {
    Patch { row: usize, col: usize },
    Newline { row: usize },
}

/// Padded image cut into raster-ordered patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    /// `rows·cols` patches of [`PATCH_DIM`] values, concatenated.
    patches: Vec<f64>,
    /// Dimensions after resizing, before padding.
    resized: (usize, usize),
}

impl PatchGrid {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn resized_dims(&self) -> (usize, usize) {
        self.resized
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f64] {
        let i = row * self.cols + col;
        &self.patches[i * PATCH_DIM..(i + 1) * PATCH_DIM]
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn budget(&self) -> TokenBudget {
        TokenBudget {
            image_tokens: self.patch_count(),
            newline_tokens: self.rows,
        }
    }

    /// Patch `(r, c)` sits at `r·(cols+1)+c`; the newline of row `r` at `r·(cols+1)+cols`.
    pub fn layout(&self) -> Vec<LayoutItem> {
        let mut items = Vec::with_capacity(self.rows * (self.cols + 1));
        for row in 0..self.rows {
            items.extend((0..self.cols).map(|col| LayoutItem::Patch { row, col }));
            items.push(LayoutItem::Newline { row });
        }
        items
    }

    pub fn sequence_len(&self) -> usize {
        self.rows * (self.cols + 1)
    }
}

/// Target dimensions for an image of the given size under `policy`.
pub fn resolve_dims<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    policy: &ResizePolicy,
    rng: &mut R,
) -> Result<(usize, usize)> {
    policy.validate()?;
    Ok(match policy {
        ResizePolicy::Fixed(s) => (*s, *s),
        ResizePolicy::DynamicSet(sides) => {
            let s = sample_dynamic_resolution(sides, rng)?;
            (s, s)
        }
        ResizePolicy::Original => (width, height),
    })
}

pub fn patchify<R: Rng + ?Sized>(
    img: &RawImage,
    policy: &ResizePolicy,
    rng: &mut R,
) -> Result<PatchGrid> {
    let (w, h) = resolve_dims(img.width, img.height, policy, rng)?;
    let resized = resize_image(img, w, h)?;
    let padded = pad_to_patch_multiple(&resized);
    let rows = padded.height / PATCH_SIDE;
    let cols = padded.width / PATCH_SIDE;
    let mut patches = Vec::with_capacity(rows * cols * PATCH_DIM);
    let stride = padded.width * CHANNELS;
    for r in 0..rows {
        for c in 0..cols {
            for y in 0..PATCH_SIDE {
                let start = (r * PATCH_SIDE + y) * stride + c * PATCH_SIDE * CHANNELS;
                patches.extend_from_slice(&padded.pixels[start..start + PATCH_SIDE * CHANNELS]);
            }
        }
    }
    Ok(PatchGrid {
        rows,
        cols,
        patches,
        resized: (w, h),
    })
}

/// Reassembles the padded image from its patches.
pub fn depatchify(grid: &PatchGrid) -> RawImage {
    let (w, h) = (grid.cols * PATCH_SIDE, grid.rows * PATCH_SIDE);
    let stride = w * CHANNELS;
    let mut pixels = vec![0.0; w * h * CHANNELS];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let patch = grid.patch(r, c);
            for y in 0..PATCH_SIDE {
                let dst = (r * PATCH_SIDE + y) * stride + c * PATCH_SIDE * CHANNELS;
                let src = y * PATCH_SIDE * CHANNELS;
                pixels[dst..dst + PATCH_SIDE * CHANNELS]
                    .copy_from_slice(&patch[src..src + PATCH_SIDE * CHANNELS]);
            }
        }
    }
    RawImage {
        width: w,
        height: h,
        pixels,
    }
}

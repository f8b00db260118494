//! Lossless patchification between RGB images and token sequences, plus
//! binary PPM (P6) I/O.
//!
//! The "latent space" of the model is patchified pixel space: token `(i, j)`
//! holds the `p x p x 3` block at patch row `i`, column `j`, flattened
//! row-major with channels last.

use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const DEFAULT_PATCH: usize = 4;
pub const DEFAULT_SIZE: usize = 16;

/// Largest pixel count accepted from a PPM header.
const MAX_PIXELS: usize = 1 << 22;

/// An RGB image with values in `[0, 1]`, stored `[height, width, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::shape("image", &[height, width, CHANNELS], &[data.len()]));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data).expect("valid fill")
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for r in 0..height {
            for c in 0..width {
                data.extend(f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)), "pixel outside [0, 1]");
        let i = (row * self.width + col) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Rec. 601 luma, per pixel.
    pub fn luminance(&self) -> Vec<f32> {
        self.data.chunks_exact(CHANNELS).map(luma).collect()
    }

    pub fn map_pixels(&self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) -> Result<Self> {
        let data = self
            .data
            .chunks_exact(CHANNELS)
            .flat_map(|p| f([p[0], p[1], p[2]]))
            .collect();
        Self::new(self.height, self.width, data)
    }
}

pub fn luma(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// A patch-token sequence with its grid layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Vec<f32>,
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
}

impl TokenGrid {
    pub fn new(tokens: Vec<f32>, rows: usize, cols: usize, patch: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || patch == 0 {
            return Err(Error::Config(format!("empty token grid {rows}x{cols}, patch {patch}")));
        }
        let expected = rows * cols * patch_dim(patch);
        if tokens.len() != expected {
            return Err(Error::shape("token grid", &[rows, cols, patch_dim(patch)], &[tokens.len()]));
        }
        Ok(Self {
            tokens,
            rows,
            cols,
            patch,
        })
    }

    /// Number of tokens `L`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        patch_dim(self.patch)
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.tokens[i * d..(i + 1) * d]
    }

    pub fn same_geometry(&self, other: &TokenGrid) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.patch == other.patch
    }
}

pub fn patch_dim(patch: usize) -> usize {
    patch * patch * CHANNELS
}

pub fn encode(img: &Image, patch: usize) -> Result<TokenGrid> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        return Err(Error::Config(format!(
            "{}x{} image is not divisible into {patch}x{patch} patches",
            img.height, img.width
        )));
    }
    let (rows, cols) = (img.height / patch, img.width / patch);
    let mut tokens = Vec::with_capacity(img.data.len());
    for i in 0..rows {
        for j in 0..cols {
            for r in 0..patch {
                let start = ((i * patch + r) * img.width + j * patch) * CHANNELS;
                tokens.extend_from_slice(&img.data[start..start + patch * CHANNELS]);
            }
        }
    }
    TokenGrid::new(tokens, rows, cols, patch)
}

/// Inverse of [`encode`]. With `clamp` set, values are clamped into `[0, 1]`
/// first (model predictions); otherwise out-of-range values are an error.
pub fn decode(tok: &TokenGrid, clamp: bool) -> Result<Image> {
    let p = tok.patch;
    let (height, width) = (tok.rows * p, tok.cols * p);
    let mut data = vec![0.0f32; height * width * CHANNELS];
    let d = tok.dim();
    for i in 0..tok.rows {
        for j in 0..tok.cols {
            let t = &tok.tokens[(i * tok.cols + j) * d..][..d];
            for r in 0..p {
                let start = ((i * p + r) * width + j * p) * CHANNELS;
                data[start..start + p * CHANNELS].copy_from_slice(&t[r * p * CHANNELS..][..p * CHANNELS]);
            }
        }
    }
    if clamp {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }
    Image::new(height, width, data)
}

/// Parses a binary PPM (P6, maxval 255).
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |reason: &str| Error::format("PPM", reason);
    let mut pos = 0;
    if bytes.get(..2) != Some(b"P6") {
        return Err(bad("missing P6 magic"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if pos == start || pos - start > 9 {
            return Err(bad("bad header number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| bad("bad header number"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    if width == 0 || height == 0 || width.saturating_mul(height) > MAX_PIXELS {
        return Err(bad("unsupported dimensions"));
    }
    let n = width * height * CHANNELS;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| bad("truncated raster"))?;
    let data = raster.iter().map(|&b| f32::from(b) / 255.0).collect();
    Image::new(height, width, data)
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

/// `round(v * 255)`.
pub fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

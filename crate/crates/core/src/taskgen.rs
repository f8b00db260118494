//! Procedural exemplar/query quadruplets for known image transformations.
//!
//! Every task is a pure function of its input image. Tasks whose source image
//! needs preparation (darkened for `enhance`, decorated with a red box for
//! `redbox-segment`, watermarked for `dewatermark`) prepare the source first
//! and then define the target as `T(source)`, so `y == T(x)` holds bit-exactly
//! for every emitted pair. Sources are snapped to the 8-bit grid so that the
//! on-disk PPM copy of a source equals the in-memory one.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{luma, quantize, read_ppm, write_ppm, Image, DEFAULT_SIZE};
use crate::error::{Error, Result};

pub const DEFAULT_DARKEN: f32 = 0.25;
pub const DEFAULT_EDGE_THRESHOLD: f32 = 0.25;
const RED: [f32; 3] = [1.0, 0.0, 0.0];
const WHITE: [f32; 3] = [1.0; 3];
const BLACK: [f32; 3] = [0.0; 3];
const MIN_CONTRAST: f32 = 0.3;

/// 4x4 logo used by the watermark tasks (1 = composited pixel).
const LOGO: [[u8; 4]; 4] = [[1, 0, 0, 1], [0, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]];
const LOGO_ALPHA: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskId {
    Invert,
    Desaturate,
    Edge,
    Boxfill,
    RedboxSegment,
    Enhance,
    ChannelPermute,
    Dewatermark,
}

impl TaskId {
    pub const ALL: [TaskId; 8] = [
        TaskId::Invert,
        TaskId::Desaturate,
        TaskId::Edge,
        TaskId::Boxfill,
        TaskId::RedboxSegment,
        TaskId::Enhance,
        TaskId::ChannelPermute,
        TaskId::Dewatermark,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Invert => "invert",
            TaskId::Desaturate => "desaturate",
            TaskId::Edge => "edge",
            TaskId::Boxfill => "boxfill",
            TaskId::RedboxSegment => "redbox-segment",
            TaskId::Enhance => "enhance",
            TaskId::ChannelPermute => "channel-permute",
            TaskId::Dewatermark => "dewatermark",
        }
    }

    pub fn invertible(self) -> bool {
        matches!(
            self,
            TaskId::Invert | TaskId::Enhance | TaskId::ChannelPermute | TaskId::Dewatermark
        )
    }
}

/// Fixed task constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskParams {
    pub darken: f32,
    pub edge_threshold: f32,
    /// Top-left corner of the watermark logo.
    pub logo_at: (usize, usize),
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            darken: DEFAULT_DARKEN,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
            logo_at: (DEFAULT_SIZE - 4, DEFAULT_SIZE - 4),
        }
    }
}

/// A registered transformation, optionally in its inverse direction.
///
/// Written `name` or `name:inv`, e.g. `enhance:inv` for darkening.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: TaskId,
    pub inverse: bool,
    pub params: TaskParams,
}

impl TaskSpec {
    pub fn new(id: TaskId) -> Self {
        Self {
            id,
            inverse: false,
            params: TaskParams::default(),
        }
    }

    pub fn inverse_of(id: TaskId) -> Result<Self> {
        if !id.invertible() {
            return Err(Error::UnknownTask(format!("{}:inv", id.name())));
        }
        Ok(Self {
            inverse: true,
            ..Self::new(id)
        })
    }

    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id.name())?;
        if self.inverse {
            f.write_str(":inv")?;
        }
        Ok(())
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (base, inverse) = match s.strip_suffix(":inv") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let id = TaskId::ALL
            .into_iter()
            .find(|t| t.name() == base)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))?;
        if inverse {
            TaskSpec::inverse_of(id)
        } else {
            Ok(TaskSpec::new(id))
        }
    }
}

/// Applies the transformation.
pub fn apply_task(task: &TaskSpec, img: &Image) -> Result<Image> {
    let p = &task.params;
    match (task.id, task.inverse) {
        (TaskId::Invert, _) => img.map_pixels(|px| px.map(|v| 1.0 - v)),
        (TaskId::Desaturate, false) => img.map_pixels(|px| [luma(&px); 3]),
        (TaskId::Edge, false) => edge_map(img, p.edge_threshold),
        (TaskId::Boxfill, false) => boxfill(img),
        (TaskId::RedboxSegment, false) => redbox_segment(img),
        (TaskId::Enhance, false) => img.map_pixels(|px| px.map(|v| (v / p.darken).min(1.0))),
        (TaskId::Enhance, true) => img.map_pixels(|px| px.map(|v| v * p.darken)),
        (TaskId::ChannelPermute, false) => img.map_pixels(|[r, g, b]| [g, b, r]),
        (TaskId::ChannelPermute, true) => img.map_pixels(|[r, g, b]| [b, r, g]),
        (TaskId::Dewatermark, false) => logo_map(img, p.logo_at, |v| (2.0 * v - 1.0).clamp(0.0, 1.0)),
        (TaskId::Dewatermark, true) => logo_map(img, p.logo_at, |v| (1.0 - LOGO_ALPHA) * v + LOGO_ALPHA),
        (id, true) => Err(Error::UnknownTask(format!("{}:inv", id.name()))),
    }
}

/// Source image for a task, built from a clean scene.
fn prepare_source(task: &TaskSpec, scene: &Scene) -> Result<Image> {
    let img = scene.render()?;
    let prepared = match (task.id, task.inverse) {
        (TaskId::Enhance, false) => img.map_pixels(|px| px.map(|v| v * task.params.darken))?,
        (TaskId::Dewatermark, false) => apply_task(&TaskSpec::inverse_of(TaskId::Dewatermark)?, &img)?,
        (TaskId::RedboxSegment, false) => decorate_with_red_box(&img),
        _ => img,
    };
    snap_to_8bit(&prepared)
}

pub fn snap_to_8bit(img: &Image) -> Result<Image> {
    img.map_pixels(|px| px.map(|v| f32::from(quantize(v)) / 255.0))
}

fn logo_map(img: &Image, (r0, c0): (usize, usize), f: impl Fn(f32) -> f32) -> Result<Image> {
    let mut out = img.clone();
    for (dr, row) in LOGO.iter().enumerate() {
        for (dc, &on) in row.iter().enumerate() {
            let (r, c) = (r0 + dr, c0 + dc);
            if on == 1 && r < img.height() && c < img.width() {
                out.set_pixel(r, c, img.pixel(r, c).map(&f));
            }
        }
    }
    Ok(out)
}

/// Sobel gradient magnitude of the luminance (replicated borders), scaled so
/// a unit step reads 1, binarized at `threshold`.
fn edge_map(img: &Image, threshold: f32) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    let lum = img.luminance();
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        lum[r * w + c]
    };
    Image::from_fn(h, w, |r, c| {
        let (r, c) = (r as isize, c as isize);
        let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
            - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
        let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
            - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
        let mag = (gx * gx + gy * gy).sqrt() / 4.0;
        if mag > threshold {
            WHITE
        } else {
            BLACK
        }
    })
}

fn color_key(px: [f32; 3]) -> [u32; 3] {
    px.map(f32::to_bits)
}

/// Most frequent color, ties to the smallest key.
fn mode_color(img: &Image, skip: impl Fn([f32; 3]) -> bool) -> Option<[f32; 3]> {
    let mut counts: Vec<([u32; 3], usize)> = Vec::new();
    for px in img.data().chunks_exact(3) {
        let px = [px[0], px[1], px[2]];
        if skip(px) {
            continue;
        }
        let k = color_key(px);
        match counts.iter_mut().find(|(c, _)| *c == k) {
            Some((_, n)) => *n += 1,
            None => counts.push((k, 1)),
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(k, _)| k.map(f32::from_bits))
}

/// Background = mode color; target = the non-background color with the
/// largest luminance contrast against it (ties to the smallest key).
fn highest_contrast_color(img: &Image) -> Option<([f32; 3], [f32; 3])> {
    let bg = mode_color(img, |_| false)?;
    let mut best: Option<([f32; 3], f32)> = None;
    for px in img.data().chunks_exact(3) {
        let px = [px[0], px[1], px[2]];
        if px == bg {
            continue;
        }
        let contrast = (luma(&px) - luma(&bg)).abs();
        let better = match best {
            None => true,
            Some((c, b)) => contrast > b || (contrast == b && color_key(px) < color_key(c)),
        };
        if better {
            best = Some((px, contrast));
        }
    }
    best.map(|(c, _)| (bg, c))
}

/// Inclusive bounding box `(r0, c0, r1, c1)` of pixels matching `pred`.
fn bbox(img: &Image, pred: impl Fn([f32; 3]) -> bool) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for r in 0..img.height() {
        for c in 0..img.width() {
            if pred(img.pixel(r, c)) {
                b = Some(match b {
                    None => (r, c, r, c),
                    Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                });
            }
        }
    }
    b
}

fn boxfill(img: &Image) -> Result<Image> {
    let target = highest_contrast_color(img).and_then(|(_, color)| bbox(img, |px| px == color));
    Image::from_fn(img.height(), img.width(), |r, c| match target {
        Some((r0, c0, r1, c1)) if (r0..=r1).contains(&r) && (c0..=c1).contains(&c) => WHITE,
        _ => BLACK,
    })
}

fn decorate_with_red_box(img: &Image) -> Image {
    let mut out = img.clone();
    let Some((r0, c0, r1, c1)) = highest_contrast_color(img).and_then(|(_, color)| bbox(img, |px| px == color)) else {
        return out;
    };
    let (r0, c0) = (r0.saturating_sub(1), c0.saturating_sub(1));
    let (r1, c1) = ((r1 + 1).min(img.height() - 1), (c1 + 1).min(img.width() - 1));
    for r in r0..=r1 {
        for c in c0..=c1 {
            if r == r0 || r == r1 || c == c0 || c == c1 {
                out.set_pixel(r, c, RED);
            }
        }
    }
    out
}

/// Mask of non-background pixels strictly inside the red outline.
fn redbox_segment(img: &Image) -> Result<Image> {
    let boxed = bbox(img, |px| px == RED);
    let bg = mode_color(img, |px| px == RED);
    Image::from_fn(img.height(), img.width(), |r, c| match (boxed, bg) {
        (Some((r0, c0, r1, c1)), Some(bg)) if r > r0 && r < r1 && c > c0 && c < c1 => {
            let px = img.pixel(r, c);
            if px != bg && px != RED {
                WHITE
            } else {
                BLACK
            }
        }
        _ => BLACK,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Top-left corner and extent.
    Rect { row: usize, col: usize, height: usize, width: usize },
    /// Center (in pixel units) and radius.
    Disc { cy: f32, cx: f32, radius: f32 },
}

impl Shape {
    pub fn covers(&self, r: usize, c: usize) -> bool {
        match *self {
            Shape::Rect { row, col, height, width } => (row..row + height).contains(&r) && (col..col + width).contains(&c),
            Shape::Disc { cy, cx, radius } => {
                let (dy, dx) = (r as f32 + 0.5 - cy, c as f32 + 0.5 - cx);
                dy * dy + dx * dx <= radius * radius
            }
        }
    }
}

/// Solid shapes over a solid background, drawn in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub size: usize,
    pub background: [f32; 3],
    pub shapes: Vec<(Shape, [f32; 3])>,
}

impl Scene {
    pub fn render(&self) -> Result<Image> {
        Image::from_fn(self.size, self.size, |r, c| {
            self.shapes
                .iter()
                .rev()
                .find(|(s, _)| s.covers(r, c))
                .map_or(self.background, |(_, color)| *color)
        })
    }
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    loop {
        let c: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        if c != [255, 0, 0] {
            return c.map(|v| f32::from(v) / 255.0);
        }
    }
}

/// 1 to 3 rectangles/discs of distinct random colors on a random background,
/// with at least one visible shape contrasting by more than 0.3 luminance.
pub fn gen_scene_layout(rng: &mut impl Rng, size: usize) -> Scene {
    let max_extent = (size * 7 / 16).max(2);
    loop {
        let background = random_color(rng);
        let count = rng.random_range(1..=3);
        let mut shapes = Vec::with_capacity(count);
        while shapes.len() < count {
            let color = random_color(rng);
            if color == background || shapes.iter().any(|(_, c)| *c == color) {
                continue;
            }
            let shape = if rng.random_bool(0.5) {
                let height = rng.random_range(2..=max_extent);
                let width = rng.random_range(2..=max_extent);
                Shape::Rect {
                    row: rng.random_range(0..=size - height),
                    col: rng.random_range(0..=size - width),
                    height,
                    width,
                }
            } else {
                let radius = rng.random_range(1.5f32..=(max_extent as f32 / 2.0));
                Shape::Disc {
                    cy: rng.random_range(radius..=size as f32 - radius),
                    cx: rng.random_range(radius..=size as f32 - radius),
                    radius,
                }
            };
            shapes.push((shape, color));
        }
        let scene = Scene { size, background, shapes };
        let img = scene.render().expect("colors in range");
        let visible = scene.shapes.iter().all(|(_, color)| img.data().chunks_exact(3).any(|p| p == color));
        let contrast = highest_contrast_color(&img).is_some_and(|(bg, c)| bg == background && (luma(&c) - luma(&bg)).abs() > MIN_CONTRAST);
        if visible && contrast {
            return scene;
        }
    }
}

pub fn gen_scene(rng: &mut impl Rng) -> Image {
    gen_scene_layout(rng, DEFAULT_SIZE).render().expect("colors in range")
}

/// Exemplar pair and query pair sharing one transformation.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadruplet {
    pub id: String,
    pub task: TaskSpec,
    pub x_s: Image,
    pub x_t: Image,
    pub x_q: Image,
    pub y_q: Image,
    /// Scene seeds of the exemplar and the query.
    pub seeds: (u64, u64),
}

/// Source/target pair for one scene seed.
pub fn gen_pair(task: &TaskSpec, seed: u64, size: usize) -> Result<(Image, Image)> {
    let scene = gen_scene_layout(&mut ChaCha8Rng::seed_from_u64(seed), size);
    let x = prepare_source(task, &scene)?;
    let y = apply_task(task, &x)?;
    Ok((x, y))
}

pub fn gen_quadruplet(task: &TaskSpec, rng: &mut impl Rng) -> Result<Quadruplet> {
    let seed_s = rng.next_u64();
    let (x_s, x_t) = gen_pair(task, seed_s, DEFAULT_SIZE)?;
    loop {
        let seed_q = rng.next_u64();
        let (x_q, y_q) = gen_pair(task, seed_q, DEFAULT_SIZE)?;
        if x_q != x_s {
            return Ok(Quadruplet {
                id: format!("{}-{seed_s:016x}-{seed_q:016x}", task.id.name()),
                task: *task,
                x_s,
                x_t,
                x_q,
                y_q,
                seeds: (seed_s, seed_q),
            });
        }
    }
}

/// Per-item seed, independent of generation order.
pub fn item_seed(base: u64, task_index: usize, index: usize) -> u64 {
    base ^ ((task_index as u64) << 40) ^ index as u64
}

/// `count` quadruplets of one task with ids `<task>-<index>`.
pub fn gen_task_set(task: &TaskSpec, task_index: usize, count: usize, base_seed: u64) -> Result<Vec<Quadruplet>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(base_seed, task_index, i));
            let mut q = gen_quadruplet(task, &mut rng)?;
            q.id = format!("{}-{i:06}", task.name().replace(':', "_"));
            Ok(q)
        })
        .collect()
}

/// Deterministic shuffle-and-split. Training items sharing a scene image with
/// any test item are dropped.
pub fn split_dataset(mut quads: Vec<Quadruplet>, holdout: f64, seed: u64) -> Result<(Vec<Quadruplet>, Vec<Quadruplet>)> {
    if !(holdout > 0.0 && holdout < 1.0) {
        return Err(Error::Config(format!("holdout fraction {holdout} not in (0, 1)")));
    }
    quads.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((quads.len() as f64) * holdout).round() as usize;
    let train = quads.split_off(n_test);
    let test = quads;
    let test_scenes: HashSet<Vec<u32>> = test
        .iter()
        .flat_map(|q| [&q.x_s, &q.x_q])
        .map(scene_key)
        .collect();
    let train = train
        .into_iter()
        .filter(|q| !test_scenes.contains(&scene_key(&q.x_s)) && !test_scenes.contains(&scene_key(&q.x_q)))
        .collect();
    Ok((train, test))
}

fn scene_key(img: &Image) -> Vec<u32> {
    img.data().iter().map(|v| v.to_bits()).collect()
}

/// One manifest line: relative PPM paths of the four images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub task: String,
    pub xs: String,
    pub xt: String,
    pub xq: String,
    pub yq: String,
}

pub const MANIFEST: &str = "manifest.jsonl";

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::format("manifest", format!("line {}: {e}", i + 1)))?;
            for path in [&rec.xs, &rec.xt, &rec.xq, &rec.yq] {
                let p = Path::new(path);
                if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                    return Err(Error::format("manifest", format!("line {}: path `{path}` escapes the dataset", i + 1)));
                }
            }
            Ok(rec)
        })
        .collect()
}

/// Writes images under `dir/images/` and `dir/manifest.jsonl`.
pub fn write_dataset(dir: &Path, quads: &[Quadruplet]) -> Result<Vec<ManifestRecord>> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(quads.len());
    for q in quads {
        let rel = |tag: &str| format!("images/{}_{tag}.ppm", q.id);
        let rec = ManifestRecord {
            id: q.id.clone(),
            task: q.task.name(),
            xs: rel("xs"),
            xt: rel("xt"),
            xq: rel("xq"),
            yq: rel("yq"),
        };
        for (path, img) in [(&rec.xs, &q.x_s), (&rec.xt, &q.x_t), (&rec.xq, &q.x_q), (&rec.yq, &q.y_q)] {
            write_ppm(&dir.join(path), img)?;
        }
        records.push(rec);
    }
    let path = dir.join(MANIFEST);
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for rec in &records {
        serde_json::to_writer(&mut file, rec)?;
        file.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    file.flush().map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut text = String::new();
    for line in std::io::BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(&path, e))?);
        text.push('\n');
    }
    parse_manifest(&text)
}

/// Loads every quadruplet listed in `dir/manifest.jsonl`.
pub fn read_dataset(dir: &Path) -> Result<Vec<Quadruplet>> {
    read_manifest(dir)?
        .into_iter()
        .map(|rec| {
            let load = |p: &str| read_ppm(&dir.join(p));
            Ok(Quadruplet {
                task: rec.task.parse()?,
                x_s: load(&rec.xs)?,
                x_t: load(&rec.xt)?,
                x_q: load(&rec.xq)?,
                y_q: load(&rec.yq)?,
                id: rec.id,
                seeds: (0, 0),
            })
        })
        .collect()
}

/// Checks `y == T(x)` at 8-bit precision for both pairs of every record.
/// Returns the ids that fail.
pub fn verify_dataset(dir: &Path) -> Result<Vec<String>> {
    let mut failures = Vec::new();
    for q in read_dataset(dir)? {
        let ok = [(&q.x_s, &q.x_t), (&q.x_q, &q.y_q)].into_iter().all(|(x, y)| {
            apply_task(&q.task, x).is_ok_and(|t| t.data().iter().map(|&v| quantize(v)).eq(y.data().iter().map(|&v| quantize(v))))
        });
        if !ok {
            failures.push(q.id);
        }
    }
    Ok(failures)
}

/// Paths of one record resolved against its dataset directory.
pub fn record_paths(dir: &Path, rec: &ManifestRecord) -> [PathBuf; 4] {
    [&rec.xs, &rec.xt, &rec.xq, &rec.yq].map(|p| dir.join(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn task(s: &str) -> TaskSpec {
        s.parse().unwrap()
    }

    #[test]
    fn invert_of_black_is_white() {
        let out = apply_task(&task("invert"), &Image::filled(4, 4, BLACK)).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn edge_of_constant_image_is_black() {
        let out = apply_task(&task("edge"), &Image::filled(16, 16, [0.3, 0.6, 0.9])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_marks_both_sides_of_a_step() {
        let img = Image::from_fn(8, 8, |_, c| if c < 4 { BLACK } else { WHITE }).unwrap();
        let out = apply_task(&task("edge"), &img).unwrap();
        for r in 0..8 {
            let row: Vec<f32> = (0..8).map(|c| out.pixel(r, c)[0]).collect();
            assert_eq!(row, [0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        }
    }

    /// Brute-force bounding box of the drawn shape.
    #[test]
    fn boxfill_single_rectangle() {
        let scene = Scene {
            size: 16,
            background: [0.1; 3],
            shapes: vec![(Shape::Rect { row: 2, col: 4, height: 3, width: 5 }, [0.9; 3])],
        };
        let img = scene.render().unwrap();
        let out = apply_task(&task("boxfill"), &img).unwrap();
        let mut cells = Vec::new();
        for r in 0..16 {
            for c in 0..16 {
                if scene.shapes[0].0.covers(r, c) {
                    cells.push((r, c));
                }
            }
        }
        let (r0, r1) = (cells.iter().map(|p| p.0).min().unwrap(), cells.iter().map(|p| p.0).max().unwrap());
        let (c0, c1) = (cells.iter().map(|p| p.1).min().unwrap(), cells.iter().map(|p| p.1).max().unwrap());
        assert_eq!((r0, r1, c0, c1), (2, 4, 4, 8));
        for r in 0..16 {
            for c in 0..16 {
                let want = if (r0..=r1).contains(&r) && (c0..=c1).contains(&c) { WHITE } else { BLACK };
                assert_eq!(out.pixel(r, c), want, "({r}, {c})");
            }
        }
    }

    #[test]
    fn redbox_segment_masks_the_boxed_shape() {
        let scene = Scene {
            size: 16,
            background: [0.2; 3],
            shapes: vec![(Shape::Rect { row: 5, col: 5, height: 4, width: 3 }, [0.95, 0.9, 0.9])],
        };
        let (x, y) = {
            let x = prepare_source(&task("redbox-segment"), &scene).unwrap();
            let y = apply_task(&task("redbox-segment"), &x).unwrap();
            (x, y)
        };
        assert_eq!(x.pixel(4, 4), RED);
        assert_eq!(x.pixel(9, 8), RED);
        for r in 0..16 {
            for c in 0..16 {
                let want = if scene.shapes[0].0.covers(r, c) { WHITE } else { BLACK };
                assert_eq!(y.pixel(r, c), want);
            }
        }
    }

    #[test]
    fn involutions_and_cycles() {
        let img = gen_scene(&mut ChaCha8Rng::seed_from_u64(9));
        let inv = task("invert");
        let twice = apply_task(&inv, &apply_task(&inv, &img).unwrap()).unwrap();
        for (a, b) in twice.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= f32::EPSILON);
        }
        let perm = task("channel-permute");
        let mut cycled = img.clone();
        for _ in 0..3 {
            cycled = apply_task(&perm, &cycled).unwrap();
        }
        assert_eq!(cycled, img);
        let back = apply_task(&task("channel-permute:inv"), &apply_task(&perm, &img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn unknown_and_non_invertible_tasks() {
        assert!(matches!("blur".parse::<TaskSpec>(), Err(Error::UnknownTask(_))));
        assert!(matches!("edge:inv".parse::<TaskSpec>(), Err(Error::UnknownTask(_))));
        assert_eq!(task("enhance:inv").to_string(), "enhance:inv");
    }

    #[test]
    fn scenes_are_reproducible_and_satisfy_constraints() {
        let a = gen_scene(&mut ChaCha8Rng::seed_from_u64(77));
        let b = gen_scene(&mut ChaCha8Rng::seed_from_u64(77));
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let scene = gen_scene_layout(&mut rng, 16);
            assert!((1..=3).contains(&scene.shapes.len()));
            let img = scene.render().unwrap();
            let bg = scene.background;
            let best = scene
                .shapes
                .iter()
                .filter(|(_, c)| img.data().chunks_exact(3).any(|p| p == c))
                .map(|(_, c)| (luma(c) - luma(&bg)).abs())
                .fold(0.0f32, f32::max);
            assert!(best > 0.3);
        }
    }

    #[test]
    fn quadruplets_satisfy_their_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for id in TaskId::ALL {
            let t = TaskSpec::new(id);
            for _ in 0..20 {
                let q = gen_quadruplet(&t, &mut rng).unwrap();
                assert_eq!(apply_task(&t, &q.x_s).unwrap(), q.x_t, "{}", t);
                assert_eq!(apply_task(&t, &q.x_q).unwrap(), q.y_q, "{}", t);
                assert_ne!(q.x_s, q.x_q);
            }
        }
    }

    #[test]
    fn enhance_recovers_the_clean_scene() {
        let scene = gen_scene_layout(&mut ChaCha8Rng::seed_from_u64(3), 16);
        let clean = scene.render().unwrap();
        let x = prepare_source(&task("enhance"), &scene).unwrap();
        let y = apply_task(&task("enhance"), &x).unwrap();
        for (a, b) in y.data().iter().zip(clean.data()) {
            assert!((a - b).abs() <= 2.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn exemplar_and_query_scenes_rarely_collide() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = task("invert");
        let mut collisions = 0;
        for _ in 0..1000 {
            let seed_s = rng.next_u64();
            let seed_q = rng.next_u64();
            if gen_pair(&t, seed_s, 16).unwrap().0 == gen_pair(&t, seed_q, 16).unwrap().0 {
                collisions += 1;
            }
        }
        assert!(collisions <= 1);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let quads = gen_task_set(&task("invert"), 0, 1000, 42).unwrap();
        let (train, test) = split_dataset(quads.clone(), 0.1, 7).unwrap();
        assert_eq!((train.len(), test.len()), (900, 100));
        let test_ids: HashSet<&str> = test.iter().map(|q| q.id.as_str()).collect();
        assert!(train.iter().all(|q| !test_ids.contains(q.id.as_str())));
        let (train2, test2) = split_dataset(quads.clone(), 0.1, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        assert!(split_dataset(quads, 1.0, 7).is_err());
    }

    #[test]
    fn dataset_roundtrip_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let mut quads = Vec::new();
        for (i, id) in TaskId::ALL.into_iter().enumerate() {
            quads.extend(gen_task_set(&TaskSpec::new(id), i, 3, 11).unwrap());
        }
        let records = write_dataset(dir.path(), &quads).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), records);
        assert!(verify_dataset(dir.path()).unwrap().is_empty());
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back[0].x_s, quads[0].x_s);
    }

    #[test]
    fn manifest_rejects_escaping_paths() {
        let line = r#"{"id":"a","task":"invert","xs":"../x.ppm","xt":"b","xq":"c","yq":"d"}"#;
        assert!(parse_manifest(line).is_err());
        let extra = r#"{"id":"a","task":"invert","xs":"a","xt":"b","xq":"c","yq":"d","z":1}"#;
        assert!(parse_manifest(extra).is_err());
    }
}

//! Embedding-space task mining.
//!
//! Each `(x, y)` pair becomes a task vector `e(y) - e(x)`. Pairs are
//! clustered on their normalized task vectors, each pair is matched with its
//! most similar cluster mate, and candidate matches pass a visual-duplicate
//! check and an instruction-consistency check before becoming quadruplets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{read_ppm, Image};
use crate::error::{Error, Result};
use crate::taskgen::ManifestRecord;

pub const DEFAULT_TAU_VIS: f64 = 0.98;
pub const DEFAULT_TAU_TEXT: f64 = 0.9;
pub const SMALL_CORPUS_K: usize = 1500;
pub const LARGE_CORPUS_K: usize = 3000;
pub const LARGE_CORPUS_MIN: usize = 25_000;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const REPORT_FILE: &str = "mining_report.json";
const TOY_GRID: usize = 4;

/// One corpus line of `pairs.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    /// Source image reference (path relative to the corpus directory).
    pub x: String,
    /// Target image reference.
    pub y: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instr_vec: Option<Vec<f32>>,
    /// Known task label, used when instruction vectors are absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

pub fn parse_pairs(text: &str) -> Result<Vec<PairRecord>> {
    let mut seen = HashSet::new();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let rec: PairRecord =
                serde_json::from_str(line).map_err(|e| Error::format("pairs", format!("line {}: {e}", i + 1)))?;
            if !seen.insert(rec.id.clone()) {
                return Err(Error::format("pairs", format!("line {}: duplicate id `{}`", i + 1, rec.id)));
            }
            if rec.instr_vec.as_ref().is_some_and(|v| v.iter().any(|x| !x.is_finite())) {
                return Err(Error::format("pairs", format!("line {}: non-finite instruction vector", i + 1)));
            }
            Ok(rec)
        })
        .collect()
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::DegenerateEmbedding("zero or non-finite vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 4x4 block means of each channel (48 values, channel-major), normalized.
pub fn toy_embed(img: &Image) -> Result<Vec<f64>> {
    let (h, w) = (img.height(), img.width());
    if h % TOY_GRID != 0 || w % TOY_GRID != 0 {
        return Err(Error::Config(format!("toy embedder needs sides divisible by {TOY_GRID}, got {h}x{w}")));
    }
    let (bh, bw) = (h / TOY_GRID, w / TOY_GRID);
    let mut v = vec![0.0; 3 * TOY_GRID * TOY_GRID];
    for r in 0..h {
        for c in 0..w {
            let px = img.pixel(r, c);
            for (ch, &val) in px.iter().enumerate() {
                v[ch * TOY_GRID * TOY_GRID + (r / bh) * TOY_GRID + c / bw] += f64::from(val);
            }
        }
    }
    let area = (bh * bw) as f64;
    v.iter_mut().for_each(|x| *x /= area);
    normalize(&mut v)?;
    Ok(v)
}

/// Precomputed vectors keyed by image reference (`embeddings.bin`).
///
/// Layout, little-endian: magic `VEMB`, version u32 (1), count u32, dim u32,
/// then per entry a u16 key length, the UTF-8 key and `dim` f32 values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f32>>,
}

const EMB_MAGIC: &[u8; 4] = b"VEMB";

impl EmbeddingTable {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.vectors.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (k, v) in &self.vectors {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("embeddings", m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != EMB_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        if u32_at(take(4)?) != 1 {
            return Err(bad("unsupported version"));
        }
        let count = u32_at(take(4)?) as usize;
        let dim = u32_at(take(4)?) as usize;
        if dim == 0 {
            return Err(bad("zero dimension"));
        }
        let mut vectors = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let key = std::str::from_utf8(take(len)?).map_err(|_| bad("key is not UTF-8"))?.to_string();
            let raw = take(dim.checked_mul(4).ok_or_else(|| bad("dimension overflow"))?)?;
            let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(bad("non-finite value"));
            }
            if vectors.insert(key.clone(), v).is_some() {
                return Err(Error::format("embeddings", format!("duplicate key `{key}`")));
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Clone, Debug)]
pub enum Embedder {
    Toy,
    File(EmbeddingTable),
}

impl Embedder {
    pub fn id(&self) -> &'static str {
        match self {
            Embedder::Toy => "toy",
            Embedder::File(_) => "file",
        }
    }

    /// Unit embedding of the image stored under `key`; `load` is only called
    /// by embedders that need pixels.
    pub fn embed(&self, key: &str, load: impl FnOnce() -> Result<Image>) -> Result<Vec<f64>> {
        match self {
            Embedder::Toy => toy_embed(&load()?),
            Embedder::File(table) => {
                let raw = table
                    .vectors
                    .get(key)
                    .ok_or_else(|| Error::DegenerateEmbedding(format!("no vector for `{key}`")))?;
                let mut v: Vec<f64> = raw.iter().map(|&x| f64::from(x)).collect();
                normalize(&mut v).map_err(|_| Error::DegenerateEmbedding(format!("zero vector for `{key}`")))?;
                Ok(v)
            }
        }
    }
}

/// `e(y) - e(x)`, not renormalized.
pub fn task_vector(ex: &[f64], ey: &[f64]) -> Vec<f64> {
    ey.iter().zip(ex).map(|(b, a)| b - a).collect()
}

/// Cluster count: the override if given, else 1500 below 25k pairs and 3000
/// from 25k up, never more than `n`.
pub fn choose_k(n: usize, override_k: Option<usize>) -> usize {
    override_k
        .unwrap_or(if n < LARGE_CORPUS_MIN { SMALL_CORPUS_K } else { LARGE_CORPUS_K })
        .min(n)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances after each Lloyd update.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// Nearest centroid, ties to the lowest index.
fn nearest(v: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(v, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// D^2-weighted draw over points with positive distance.
fn sample_d2(d2: &[f64], total: f64, rng: &mut impl Rng) -> usize {
    let mut target = rng.random::<f64>() * total;
    let mut pick = None;
    for (i, &d) in d2.iter().enumerate() {
        if d > 0.0 {
            pick = Some(i);
            if target < d {
                break;
            }
            target -= d;
        }
    }
    pick.expect("positive mass")
}

/// Greedy k-means++ seeding (2 + ln K candidates per center) then Lloyd
/// iterations until assignments are stable or `max_iter` is reached. An
/// emptied cluster takes over the point farthest from its current centroid.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, rng: &mut impl Rng, max_iter: usize) -> Result<KMeans> {
    let n = vectors.len();
    if k == 0 || k > n {
        return Err(Error::Contract(format!("k-means needs 1 <= K <= n, got K={k}, n={n}")));
    }
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &vectors[chosen[0]])).collect();
    let trials = 2 + (k as f64).ln() as usize;
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            // Greedy variant: draw several D^2-weighted candidates and keep the
            // one that lowers the potential most.
            let mut best: Option<(usize, Vec<f64>, f64)> = None;
            for _ in 0..trials {
                let cand = sample_d2(&d2, total, rng);
                let nd: Vec<f64> = d2.par_iter().zip(vectors.par_iter()).map(|(d, v)| d.min(sq_dist(v, &vectors[cand]))).collect();
                let pot: f64 = nd.iter().sum();
                if best.as_ref().is_none_or(|b| pot < b.2) {
                    best = Some((cand, nd, pot));
                }
            }
            let (cand, nd, _) = best.expect("at least one trial");
            d2 = nd;
            cand
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| vectors[i].clone()).collect();
    let mut assignments = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let next: Vec<(usize, f64)> = vectors.par_iter().map(|v| nearest(v, &centroids)).collect();
        let mut next: Vec<usize> = next.into_iter().map(|(c, _)| c).collect();
        // Re-seed empty clusters, one at a time in index order.
        loop {
            let mut counts = vec![0usize; k];
            next.iter().for_each(|&c| counts[c] += 1);
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let far = (0..n)
                .filter(|&i| counts[next[i]] > 1)
                .max_by(|&a, &b| {
                    sq_dist(&vectors[a], &centroids[next[a]])
                        .total_cmp(&sq_dist(&vectors[b], &centroids[next[b]]))
                        .then(b.cmp(&a))
                })
                .expect("some cluster has two members when one is empty");
            next[far] = empty;
            centroids[empty] = vectors[far].clone();
        }
        let stable = next == assignments;
        assignments = next;
        let dim = vectors[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &c) in vectors.iter().zip(&assignments) {
            counts[c] += 1;
            sums[c].iter_mut().zip(v).for_each(|(s, x)| *s += x);
        }
        for ((cen, sum), &cnt) in centroids.iter_mut().zip(sums).zip(&counts) {
            *cen = sum.into_iter().map(|s| s / cnt as f64).collect();
        }
        objective.push(vectors.iter().zip(&assignments).map(|(v, &c)| sq_dist(v, &centroids[c])).sum());
        if stable {
            break;
        }
    }
    Ok(KMeans {
        assignments,
        centroids,
        objective,
        iterations,
    })
}

/// Cluster mate with the highest cosine to `i`; ties go to the lowest index.
pub fn retrieve_neighbor(vectors: &[Vec<f64>], assignments: &[usize], i: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..vectors.len() {
        if j == i || assignments[j] != assignments[i] {
            continue;
        }
        let s = cosine(&vectors[i], &vectors[j]);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    best.map(|(j, _)| j)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub tau_vis: f64,
    pub tau_text: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            tau_vis: DEFAULT_TAU_VIS,
            tau_text: DEFAULT_TAU_TEXT,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_vis", self.tau_vis), ("tau_text", self.tau_text)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    VisualDuplicate,
    InstructionMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterDecision {
    Accept,
    Reject(RejectReason),
}

/// What the filter needs to know about one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterView<'a> {
    /// Unit embedding of the source image.
    pub source: &'a [f64],
    pub instr: Option<&'a [f32]>,
    pub task: Option<&'a str>,
}

/// Rejects near-identical sources (`cosine > tau_vis`), then instruction
/// mismatches: `cosine < tau_text` when both pairs carry instruction
/// vectors, otherwise unequal or missing task labels.
pub fn dual_filter(a: &FilterView<'_>, b: &FilterView<'_>, cfg: &FilterConfig) -> FilterDecision {
    if cosine(a.source, b.source) > cfg.tau_vis {
        return FilterDecision::Reject(RejectReason::VisualDuplicate);
    }
    let consistent = match (a.instr, b.instr) {
        (Some(u), Some(v)) => {
            let mut u: Vec<f64> = u.iter().map(|&x| f64::from(x)).collect();
            let mut v: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
            u.len() == v.len() && normalize(&mut u).is_ok() && normalize(&mut v).is_ok() && cosine(&u, &v) >= cfg.tau_text
        }
        _ => matches!((a.task, b.task), (Some(s), Some(t)) if s == t),
    };
    if consistent {
        FilterDecision::Accept
    } else {
        FilterDecision::Reject(RejectReason::InstructionMismatch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MineConfig {
    pub k: Option<usize>,
    pub filter: FilterConfig,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            k: None,
            filter: FilterConfig::default(),
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub embedder: String,
    pub pairs: usize,
    /// Pairs skipped for degenerate embeddings or zero task vectors.
    pub skipped: Vec<String>,
    pub k: usize,
    pub tau_vis: f64,
    pub tau_text: f64,
    pub iterations: usize,
    pub cluster_sizes: Vec<usize>,
    pub singletons: usize,
    pub candidates: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<RejectReason, usize>,
    /// Majority-label purity, when every clustered pair has a task label.
    pub purity: Option<f64>,
}

pub struct MineOutput {
    pub records: Vec<ManifestRecord>,
    pub report: MiningReport,
    /// Cluster index per clustered pair id.
    pub clusters: BTreeMap<String, usize>,
}

/// Runs the full pipeline over pairs whose images come from `load`.
/// Pairs are processed in id order so ties and output order do not depend on
/// corpus line order.
pub fn mine(
    pairs: &[PairRecord],
    embedder: &Embedder,
    load: impl Fn(&str) -> Result<Image> + Sync,
    cfg: &MineConfig,
) -> Result<MineOutput> {
    cfg.filter.validate()?;
    if pairs.len() < 2 {
        return Err(Error::Config(format!("mining needs at least 2 pairs, got {}", pairs.len())));
    }
    let mut order: Vec<&PairRecord> = pairs.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));

    let embedded: Vec<Result<(Vec<f64>, Vec<f64>)>> = order
        .par_iter()
        .map(|p| {
            let ex = embedder.embed(&p.x, || load(&p.x))?;
            let ey = embedder.embed(&p.y, || load(&p.y))?;
            let mut v = task_vector(&ex, &ey);
            if ex.len() != ey.len() {
                return Err(Error::DegenerateEmbedding(format!("`{}`: embedding sizes differ", p.id)));
            }
            normalize(&mut v).map_err(|_| Error::DegenerateEmbedding(format!("`{}`: zero task vector", p.id)))?;
            Ok((ex, v))
        })
        .collect();
    let mut kept: Vec<&PairRecord> = Vec::new();
    let mut sources = Vec::new();
    let mut vectors = Vec::new();
    let mut skipped = Vec::new();
    for (p, r) in order.iter().zip(embedded) {
        match r {
            Ok((ex, v)) => {
                kept.push(p);
                sources.push(ex);
                vectors.push(v);
            }
            Err(Error::DegenerateEmbedding(msg)) => {
                log::warn!("skipping pair `{}`: {msg}", p.id);
                skipped.push(p.id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(d) = vectors.first().map(Vec::len) {
        if vectors.iter().any(|v| v.len() != d) {
            return Err(Error::Config("embeddings have inconsistent dimensions".into()));
        }
    }
    let mut report = MiningReport {
        embedder: embedder.id().into(),
        pairs: pairs.len(),
        skipped,
        tau_vis: cfg.filter.tau_vis,
        tau_text: cfg.filter.tau_text,
        ..MiningReport::default()
    };
    if vectors.len() < 2 {
        return Err(Error::Config(format!("only {} usable pairs after embedding", vectors.len())));
    }
    let k = choose_k(vectors.len(), cfg.k);
    log::info!("clustering {} task vectors into K={k}", vectors.len());
    report.k = k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let km = kmeans(&vectors, k, &mut rng, cfg.max_iter)?;
    report.iterations = km.iterations;
    report.cluster_sizes = vec![0; k];
    km.assignments.iter().for_each(|&c| report.cluster_sizes[c] += 1);
    report.purity = purity(&km.assignments, &kept.iter().map(|p| p.task.as_deref()).collect::<Vec<_>>(), k);

    let mut records = Vec::new();
    for i in 0..kept.len() {
        let Some(j) = retrieve_neighbor(&vectors, &km.assignments, i) else {
            report.singletons += 1;
            continue;
        };
        report.candidates += 1;
        let view = |n: usize| FilterView {
            source: &sources[n],
            instr: kept[n].instr_vec.as_deref(),
            task: kept[n].task.as_deref(),
        };
        match dual_filter(&view(i), &view(j), &cfg.filter) {
            FilterDecision::Accept => {
                report.accepted += 1;
                let (a, b) = (kept[i], kept[j]);
                records.push(ManifestRecord {
                    id: format!("{}+{}", a.id, b.id),
                    task: a.task.clone().unwrap_or_else(|| format!("cluster-{}", km.assignments[i])),
                    xs: a.x.clone(),
                    xt: a.y.clone(),
                    xq: b.x.clone(),
                    yq: b.y.clone(),
                });
            }
            FilterDecision::Reject(reason) => *report.rejected.entry(reason).or_default() += 1,
        }
    }
    let clusters = kept.iter().zip(&km.assignments).map(|(p, &c)| (p.id.clone(), c)).collect();
    Ok(MineOutput {
        records,
        report,
        clusters,
    })
}

/// Fraction of points carrying their cluster's majority label.
pub fn purity(assignments: &[usize], labels: &[Option<&str>], k: usize) -> Option<f64> {
    if labels.is_empty() || labels.iter().any(Option::is_none) {
        return None;
    }
    let mut counts: Vec<HashMap<&str, usize>> = vec![HashMap::new(); k];
    for (&c, l) in assignments.iter().zip(labels) {
        *counts[c].entry(l.expect("checked")).or_default() += 1;
    }
    let majority: usize = counts.iter().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Some(majority as f64 / labels.len() as f64)
}

/// Reads `dir/pairs.jsonl`, mines it, and writes `out/manifest.jsonl` (image
/// paths made relative to `out`) plus `out/mining_report.json`.
pub fn mine_dir(dir: &Path, embedder: &Embedder, cfg: &MineConfig, out: &Path) -> Result<MiningReport> {
    let path = dir.join(PAIRS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let pairs = parse_pairs(&text)?;
    for p in &pairs {
        for r in [&p.x, &p.y] {
            let rp = Path::new(r);
            if rp.is_absolute() || rp.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return Err(Error::format("pairs", format!("`{}`: image path `{r}` escapes the corpus", p.id)));
            }
        }
    }
    let result = mine(&pairs, embedder, |r| read_ppm(&dir.join(r)), cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut copied = HashSet::new();
    let mut lines = String::new();
    for rec in &result.records {
        let mut rec = rec.clone();
        for field in [&mut rec.xs, &mut rec.xt, &mut rec.xq, &mut rec.yq] {
            let rel = format!("images/{}", field.replace(['/', '\\'], "__"));
            if copied.insert(rel.clone()) {
                let from = dir.join(&*field);
                std::fs::copy(&from, out.join(&rel)).map_err(|e| Error::io(&from, e))?;
            }
            *field = rel;
        }
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    let manifest = out.join(crate::taskgen::MANIFEST);
    std::fs::write(&manifest, lines).map_err(|e| Error::io(&manifest, e))?;
    let report_path = out.join(REPORT_FILE);
    std::fs::write(&report_path, serde_json::to_string_pretty(&result.report)?).map_err(|e| Error::io(&report_path, e))?;
    Ok(result.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_embedding_of_white_is_uniform() {
        let v = toy_embed(&Image::filled(16, 16, [1.0; 3])).unwrap();
        assert_eq!(v.len(), 48);
        assert!(v.iter().all(|&x| (x - 1.0 / 48f64.sqrt()).abs() < 1e-12));
        assert!(matches!(toy_embed(&Image::filled(16, 16, [0.0; 3])), Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn toy_embedding_of_two_tone_image() {
        // Left half red 1.0, right half blue 0.5.
        let img = Image::from_fn(16, 16, |_, c| if c < 8 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 0.5] }).unwrap();
        let v = toy_embed(&img).unwrap();
        let mut raw = vec![0.0; 48];
        for r in 0..4 {
            for c in 0..4 {
                if c < 2 {
                    raw[r * 4 + c] = 1.0;
                } else {
                    raw[32 + r * 4 + c] = 0.5;
                }
            }
        }
        let n = raw.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        for (a, b) in v.iter().zip(&raw) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn choose_k_rule() {
        assert_eq!(choose_k(10_000, None), 1500);
        assert_eq!(choose_k(24_999, None), 1500);
        assert_eq!(choose_k(25_000, None), 3000);
        assert_eq!(choose_k(40, None), 40);
        assert_eq!(choose_k(40, Some(5)), 5);
    }

    fn blobs() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let centers = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut vs = Vec::new();
        let mut labels = Vec::new();
        for (l, c) in centers.iter().enumerate() {
            for _ in 0..20 {
                let mut v: Vec<f64> = c.iter().map(|x| x + rng.random_range(-0.1..0.1)).collect();
                normalize(&mut v).unwrap();
                vs.push(v);
                labels.push(l);
            }
        }
        (vs, labels)
    }

    #[test]
    fn kmeans_recovers_blobs() {
        let (vs, labels) = blobs();
        let km = kmeans(&vs, 3, &mut ChaCha8Rng::seed_from_u64(1), 100).unwrap();
        let names: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
        let refs: Vec<Option<&str>> = names.iter().map(|s| Some(s.as_str())).collect();
        assert_eq!(purity(&km.assignments, &refs, 3), Some(1.0));
        assert!(km.objective.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn kmeans_with_k_equal_n() {
        let (vs, _) = blobs();
        let km = kmeans(&vs, vs.len(), &mut ChaCha8Rng::seed_from_u64(2), 100).unwrap();
        assert_eq!(*km.objective.last().unwrap(), 0.0);
        let mut seen = km.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), vs.len());
    }

    #[test]
    fn neighbor_matches_exhaustive_scan() {
        let (vs, _) = blobs();
        let assign: Vec<usize> = (0..vs.len()).map(|i| i % 4).collect();
        for i in 0..vs.len() {
            let mut best = None;
            let mut best_s = f64::NEG_INFINITY;
            for j in 0..vs.len() {
                if j != i && assign[j] == assign[i] {
                    let s: f64 = (0..3).map(|d| vs[i][d] * vs[j][d]).sum();
                    if s > best_s {
                        best_s = s;
                        best = Some(j);
                    }
                }
            }
            assert_eq!(retrieve_neighbor(&vs, &assign, i), best);
        }
        assert_eq!(retrieve_neighbor(&vs[..2], &[0, 1], 0), None);
    }

    #[test]
    fn filter_threshold_is_strict() {
        let cfg = FilterConfig::default();
        let a = [1.0, 0.0];
        let b = [0.98, (1.0f64 - 0.98 * 0.98).sqrt()];
        assert_eq!(cosine(&a, &b), 0.98);
        let same = FilterView { source: &a, instr: None, task: Some("t") };
        let near = FilterView { source: &b, instr: None, task: Some("t") };
        let other = FilterView { source: &b, instr: None, task: Some("u") };
        assert_eq!(dual_filter(&same, &same, &cfg), FilterDecision::Reject(RejectReason::VisualDuplicate));
        assert_eq!(dual_filter(&same, &near, &cfg), FilterDecision::Accept);
        assert_eq!(dual_filter(&same, &other, &cfg), FilterDecision::Reject(RejectReason::InstructionMismatch));

        let (i1, i2) = ([1.0f32, 0.0], [0.0f32, 1.0]);
        let first = FilterView { source: &a, instr: Some(&i1), task: None };
        let agree = FilterView { source: &b, instr: Some(&i1), task: None };
        let disagree = FilterView { source: &b, instr: Some(&i2), task: None };
        assert_eq!(dual_filter(&first, &agree, &cfg), FilterDecision::Accept);
        assert_eq!(dual_filter(&first, &disagree, &cfg), FilterDecision::Reject(RejectReason::InstructionMismatch));
    }

    #[test]
    fn embeddings_roundtrip() {
        let mut t = EmbeddingTable { dim: 2, ..Default::default() };
        t.vectors.insert("a.ppm".into(), vec![1.0, 2.0]);
        t.vectors.insert("b.ppm".into(), vec![0.5, -1.0]);
        let bytes = t.to_bytes();
        assert_eq!(EmbeddingTable::from_bytes(&bytes).unwrap(), t);
        assert!(EmbeddingTable::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn pairs_parse_rejects_duplicates_and_unknown_keys() {
        let ok = "{\"id\":\"a\",\"x\":\"x.ppm\",\"y\":\"y.ppm\"}\n{\"id\":\"b\",\"x\":\"x.ppm\",\"y\":\"y.ppm\",\"task\":\"invert\"}";
        assert_eq!(parse_pairs(ok).unwrap().len(), 2);
        assert!(parse_pairs("{\"id\":\"a\",\"x\":\"x\",\"y\":\"y\"}\n{\"id\":\"a\",\"x\":\"x\",\"y\":\"y\"}").is_err());
        assert!(parse_pairs("{\"id\":\"a\",\"x\":\"x\",\"y\":\"y\",\"w\":1}").is_err());
    }
}

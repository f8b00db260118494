//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and a
//! summary. The exit status is non-zero on a failed criterion only when
//! `VICL_ACCEPTANCE_STRICT=1`, so a workspace test run reports the verdicts
//! without stopping the remaining test targets.
//!
//! The training criteria (A5 to A8) train the default model from scratch,
//! which takes the better part of an hour on one core. Set
//! `VICL_ACCEPTANCE_DIR` to keep the generated data and runs in a fixed
//! directory and reuse finished runs on the next invocation. Criterion ids
//! given as arguments (`cargo test --test acceptance -- A2 A9`) restrict the
//! run to those criteria.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vicl_core::adapters::{freeze_check, load_balance_loss, RoutingStats};
use vicl_core::backbone::{AdapterConfig, Backbone, BackboneConfig, ForwardItem};
use vicl_core::codec::{encode, Image, TokenGrid};
use vicl_core::conditioning::{rope_rotate, PositionTriple, Role, RopeTable};
use vicl_core::diffusion::{
    batch_loss, condition_from_images, gaussian, sample_tokens, FlowExample, SamplerConfig, VelocityField, DESK_SAMPLER_STEPS,
};
use vicl_core::eval::{predict, EvalReport};
use vicl_core::metrics;
use vicl_core::mining::{choose_k, cosine, dual_filter, mine, Embedder, FilterConfig, FilterDecision, FilterView, MineConfig, PairRecord};
use vicl_core::numerics::Graph;
use vicl_core::params::ParamStore;
use vicl_core::taskgen::{apply_task, gen_pair, gen_scene, read_dataset, snap_to_8bit, Quadruplet, TaskSpec};
use vicl_core::training::Checkpoint;

const BASE_TASKS: [&str; 4] = ["invert", "desaturate", "channel-permute", "enhance"];
const ADAPTER_TASKS: [&str; 2] = ["edge", "boxfill"];
/// Quadruplets generated per task; a tenth is held out, giving 100 test items.
const ITEMS_PER_TASK: usize = 1000;
const HOLDOUT: &str = "0.1";
const BASE_STEPS: u64 = 50_000;
const ADAPTER_STEPS: u64 = 30_000;
const BASE_BUDGET: Duration = Duration::from_secs(30 * 60);
const ADAPTER_BUDGET: Duration = Duration::from_secs(20 * 60);
/// Thread count the training budgets are stated for.
const BUDGET_THREADS: usize = 8;
const SEED: u64 = 2024;

#[derive(Clone)]
struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = Result<Outcome, String>;

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn vicl(args: &[&str]) -> Result<Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vicl")).args(args).output().map_err(fail)?;
    if !out.status.success() {
        return Err(format!("vicl {args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out)
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Budget verdict; only judged when the machine has the stated thread count.
fn budget(elapsed: Duration, limit: Duration) -> (bool, String) {
    let t = threads();
    let mins = elapsed.as_secs_f64() / 60.0;
    if t >= BUDGET_THREADS {
        (elapsed <= limit, format!("{mins:.1} min on {t} threads (limit {} min)", limit.as_secs() / 60))
    } else {
        (true, format!("{mins:.1} min on {t} threads (budget not judged below {BUDGET_THREADS} threads)"))
    }
}

// A1

fn a1_gradcheck() -> Check {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_vicl")).args(["gradcheck", "--seed", "0"]).output().map_err(fail)?;
    let elapsed = start.elapsed();
    let text = String::from_utf8_lossy(&out.stdout).trim().to_string();
    if !matches!(out.status.code(), Some(0 | 1)) {
        return Err(format!("gradcheck exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    let rel: f64 = text
        .split_whitespace()
        .find_map(|w| w.parse().ok())
        .ok_or_else(|| format!("no error value in `{text}`"))?;
    let ok = rel < 1e-4 && elapsed < Duration::from_secs(120);
    Ok(outcome(ok, format!("{}; {:.1}s (limit 120s)", text.replace('\n', "; "), elapsed.as_secs_f64())))
}

// A2

fn a2_moe_algebra() -> Check {
    let n = 4;
    let mut balanced = RoutingStats::new(n, 2);
    for t in 0..8 {
        balanced.record(&[0.25f64; 4], &[t % n, (t + 1) % n]);
    }
    let l_bal = load_balance_loss(&balanced).map_err(fail)?;
    let mut collapsed = RoutingStats::new(n, 1);
    for _ in 0..8 {
        collapsed.record(&[1.0f64, 0.0, 0.0, 0.0], &[0]);
    }
    let l_col = load_balance_loss(&collapsed).map_err(fail)?;

    let base_cfg = BackboneConfig {
        blocks: 2,
        ..BackboneConfig::default()
    };
    let base = Backbone::new(base_cfg.clone()).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = base.init_params(&mut rng);
    // Zero-initialized heads would make every output zero; give them values.
    for (_, prm) in params.iter_mut() {
        for v in prm.tensor.data_mut().iter_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let adapted = Backbone::new(BackboneConfig {
        adapters: AdapterConfig::hybrid(),
        ..base_cfg
    })
    .map_err(fail)?;
    let mut with_adapters = params.clone();
    adapted.add_adapters(&mut with_adapters, &mut rng);
    let added = with_adapters.len() - params.len();
    let (x_s, x_t) = gen_pair(&"invert".parse().map_err(fail)?, 1, 16).map_err(fail)?;
    let (x_q, _) = gen_pair(&"invert".parse().map_err(fail)?, 2, 16).map_err(fail)?;
    let cond = condition_from_images(&x_s, &x_t, &x_q, 4).map_err(fail)?;
    let z = TokenGrid::new(gaussian(&mut rng, 16 * 48), 4, 4, 4).map_err(fail)?;
    let v_base = base.predict_velocity(&params, &z, 0.6, &cond).map_err(fail)?;
    let v_adapted = adapted.predict_velocity(&with_adapters, &z, 0.6, &cond).map_err(fail)?;
    let identical = v_base.iter().zip(&v_adapted).all(|(a, b)| a.to_bits() == b.to_bits()) && v_base.len() == v_adapted.len();
    let nonzero = v_base.iter().any(|&v| v != 0.0);
    let ok = l_bal == 1.0 && l_col == n as f64 && identical && nonzero;
    Ok(outcome(
        ok,
        format!("balanced L_aux={l_bal}, collapsed L_aux={l_col}, zero-init adapters ({added} tensors) bit-identical: {identical}"),
    ))
}

// A3

fn rotated(v: &[f64], pos: PositionTriple, table: &RopeTable) -> Vec<f64> {
    let mut out = v.to_vec();
    rope_rotate(&mut out, &[pos], table).unwrap();
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn a3_rope() -> Check {
    let cfg = BackboneConfig::default();
    let table = RopeTable::new(cfg.rope_split().map_err(fail)?, cfg.rope_base).map_err(fail)?;
    let hd = table.head_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..hd).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let at = |role: Role, row: usize, col: usize| PositionTriple { role, row, col };

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (q, k) = (vec(&mut rng), vec(&mut rng));
        let fixed = rng.random_range(0..4);
        for delta in 0..=8 {
            let row_ref = dot(&rotated(&q, at(Role::QuerySource, 0, fixed), &table), &rotated(&k, at(Role::QuerySource, delta, fixed), &table));
            let col_ref = dot(&rotated(&q, at(Role::QuerySource, fixed, 0), &table), &rotated(&k, at(Role::QuerySource, fixed, delta), &table));
            for a in 0..=8 {
                let row = dot(&rotated(&q, at(Role::QuerySource, a, fixed), &table), &rotated(&k, at(Role::QuerySource, a + delta, fixed), &table));
                let col = dot(&rotated(&q, at(Role::QuerySource, fixed, a), &table), &rotated(&k, at(Role::QuerySource, fixed, a + delta), &table));
                worst = worst.max((row - row_ref).abs()).max((col - col_ref).abs());
            }
        }
    }

    let mut distinct = 0;
    for _ in 0..100 {
        let (q, k) = (vec(&mut rng), vec(&mut rng));
        let (r, c) = (rng.random_range(0..4), rng.random_range(0..4));
        let same = dot(&rotated(&q, at(Role::ExemplarSource, r, c), &table), &rotated(&k, at(Role::ExemplarSource, r, c), &table));
        let other = dot(&rotated(&q, at(Role::ExemplarSource, r, c), &table), &rotated(&k, at(Role::ExemplarTarget, r, c), &table));
        if (same - other).abs() > 1e-3 {
            distinct += 1;
        }
    }
    let ok = worst < 1e-5 && distinct >= 95;
    Ok(outcome(ok, format!("max shift deviation {worst:.2e} (limit 1e-5), roles distinguishable in {distinct}/100 (need 95)")))
}

// A4

/// Velocity field that knows the clean target and the starting noise.
struct Oracle {
    z0: Vec<Vec<f32>>,
    noise: Vec<Vec<f32>>,
}

impl VelocityField for Oracle {
    fn velocity(&mut self, batch: &[ForwardItem<'_>]) -> vicl_core::Result<Vec<Vec<f32>>> {
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, _)| self.noise[i].iter().zip(&self.z0[i]).map(|(e, z)| e - z).collect())
            .collect())
    }
}

fn a4_flow() -> Check {
    let quads = vicl_core::taskgen::gen_task_set(&"desaturate".parse().map_err(fail)?, 0, 8, 5).map_err(fail)?;
    let conds = quads
        .iter()
        .map(|q| condition_from_images(&q.x_s, &q.x_t, &q.x_q, 4))
        .collect::<Result<Vec<_>, _>>()
        .map_err(fail)?;
    let z0: Vec<Vec<f32>> = quads.iter().map(|q| encode(&q.y_q, 4).map(|g| g.tokens)).collect::<Result<_, _>>().map_err(fail)?;
    let seeds: Vec<u64> = (0..quads.len() as u64).map(|i| 100 + i).collect();
    // The sampler draws its starting noise from these seeds.
    let noise: Vec<Vec<f32>> = seeds.iter().map(|&s| gaussian(&mut ChaCha8Rng::seed_from_u64(s), z0[0].len())).collect();
    let mut oracle = Oracle { z0: z0.clone(), noise };
    let (out, _) = sample_tokens(&mut oracle, &conds, &seeds, 1).map_err(fail)?;
    let recon = out
        .iter()
        .zip(&z0)
        .flat_map(|(g, z)| g.tokens.iter().zip(z).map(|(a, b)| f64::from((a - b).abs())))
        .fold(0.0, f64::max);

    let backbone = Backbone::new(BackboneConfig::default()).map_err(fail)?;
    let params = backbone.init_params(&mut ChaCha8Rng::seed_from_u64(1));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<FlowExample> = conds
        .iter()
        .zip(&z0)
        .map(|(c, z)| FlowExample::new(c.clone(), z, &mut rng))
        .collect::<Result<_, _>>()
        .map_err(fail)?;
    let mut g = Graph::new();
    let terms = batch_loss(&backbone, &mut g, &params, &batch, 0.0).map_err(fail)?;
    let loss = f64::from(g.value(terms.mse).item());
    let (mut sum, mut count) = (0.0, 0usize);
    for (ex, z) in batch.iter().zip(&z0) {
        for (e, zi) in ex.state.noise.iter().zip(z) {
            sum += (f64::from(*e) - f64::from(*zi)).powi(2);
            count += 1;
        }
    }
    let analytic = sum / count as f64;
    let gap = (loss - analytic).abs();
    let ok = recon <= 1e-6 && gap < 1e-4;
    Ok(outcome(
        ok,
        format!("1-step oracle reconstruction max error {recon:.1e}; zero-init loss {loss:.6} vs analytic {analytic:.6} (gap {gap:.1e}, limit 1e-4)"),
    ))
}

// A5 to A8

struct Workspace {
    root: PathBuf,
    reuse: bool,
    _tmp: Option<tempfile::TempDir>,
}

impl Workspace {
    fn new() -> Self {
        match std::env::var_os("VICL_ACCEPTANCE_DIR") {
            Some(dir) => {
                let root = PathBuf::from(dir);
                fs::create_dir_all(&root).unwrap();
                Self { root, reuse: true, _tmp: None }
            }
            None => {
                let tmp = tempfile::tempdir().unwrap();
                Self {
                    root: tmp.path().to_path_buf(),
                    reuse: false,
                    _tmp: Some(tmp),
                }
            }
        }
    }

    fn data(&self, name: &str, tasks: &[&str]) -> Result<PathBuf, String> {
        let dir = self.root.join(name);
        if !(self.reuse && dir.join("test").join("manifest.jsonl").is_file()) {
            let seed = SEED.to_string();
            let count = ITEMS_PER_TASK.to_string();
            vicl(&["gen-data", "--tasks", &tasks.join(","), "--count", &count, "--holdout", HOLDOUT, "--seed", &seed, "--out", p(&dir)])?;
        }
        Ok(dir)
    }

    /// Runs `vicl train` unless a finished run is being reused. Returns the
    /// final checkpoint and the training time (zero when reused).
    fn train(&self, name: &str, config: &str, extra: &[&str], data: &Path) -> Result<(PathBuf, Duration), String> {
        let run = self.root.join(name);
        let ckpt = run.join("checkpoint.bin");
        if self.reuse && ckpt.is_file() {
            return Ok((ckpt, Duration::ZERO));
        }
        fs::create_dir_all(&self.root).map_err(fail)?;
        let cfg = self.root.join(format!("{name}.json"));
        fs::write(&cfg, config).map_err(fail)?;
        let start = Instant::now();
        let mut args = vec!["train", "--config", p(&cfg), "--data", p(data), "--out", p(&run)];
        args.extend_from_slice(extra);
        vicl(&args)?;
        Ok((ckpt, start.elapsed()))
    }

    fn eval(&self, name: &str, ckpt: &Path, data: &Path, metrics: &str, robustness: bool) -> Result<EvalReport, String> {
        let report = self.root.join(format!("{name}.json"));
        let steps = DESK_SAMPLER_STEPS.to_string();
        let seed = SEED.to_string();
        let mut args = vec![
            "eval", "--ckpt", p(ckpt), "--data", p(data), "--metrics", metrics, "--report", p(&report), "--steps", &steps, "--seed", &seed,
        ];
        if robustness {
            args.push("--robustness");
        }
        vicl(&args)?;
        serde_json::from_slice(&fs::read(&report).map_err(fail)?).map_err(fail)
    }
}

fn timing(elapsed: Duration, limit: Duration) -> (bool, String) {
    if elapsed.is_zero() {
        (true, "reused finished run, time not measured".into())
    } else {
        budget(elapsed, limit)
    }
}

fn a5_base(ws: &Workspace) -> Result<(PathBuf, PathBuf, Check), String> {
    let data = ws.data("base-data", &BASE_TASKS)?;
    let config = format!(r#"{{"train": {{"steps": {BASE_STEPS}, "seed": {SEED}}}}}"#);
    let (ckpt, elapsed) = ws.train("base", &config, &[], &data)?;
    let report = ws.eval("base-eval", &ckpt, &data, "psnr", true)?;
    let (in_budget, time) = timing(elapsed, BASE_BUDGET);
    let mut ok = in_budget;
    let mut parts = Vec::new();
    for task in BASE_TASKS {
        let limit = if task == "enhance" { 20.0 } else { 25.0 };
        let agg = report
            .report
            .tasks
            .get(task)
            .and_then(|v| v.get("psnr"))
            .ok_or_else(|| format!("no psnr for {task}"))?;
        ok &= agg.mean > limit && agg.count == 100;
        parts.push(format!("{task} {:.2} dB (>{limit})", agg.mean));
    }
    let detail = format!("{}; {} steps; {time}", parts.join(", "), BASE_STEPS);
    Ok((data, ckpt, Ok(outcome(ok, detail))))
}

/// Reads the robustness section of the report written for A5.
fn a8_robustness(ws: &Workspace) -> Check {
    let report: EvalReport = serde_json::from_slice(&fs::read(ws.root.join("base-eval.json")).map_err(fail)?).map_err(fail)?;
    let robust = report.robustness.ok_or("report has no robustness section")?;
    let mut ok = true;
    let mut parts = Vec::new();
    for task in BASE_TASKS {
        let agg = robust.get(task).and_then(|v| v.get("psnr")).ok_or_else(|| format!("no robustness for {task}"))?;
        ok &= agg.std < 1.0 && agg.count == 5;
        parts.push(format!("{task} std {:.3} dB", agg.std));
    }
    Ok(outcome(ok, format!("{} over 5 exemplar draws (limit 1.0)", parts.join(", "))))
}

fn load_model(ckpt: &Path) -> Result<(Backbone, Checkpoint), String> {
    let c = Checkpoint::load(ckpt).map_err(fail)?;
    let backbone = Backbone::new(c.echo().map_err(fail)?.backbone).map_err(fail)?;
    Ok((backbone, c))
}

fn a6_disambiguation(data: &Path, ckpt: &Path) -> Check {
    let (backbone, c) = load_model(ckpt)?;
    let test = read_dataset(&data.join("test")).map_err(fail)?;
    let specs: Vec<TaskSpec> = BASE_TASKS.iter().map(|t| t.parse()).collect::<Result<_, _>>().map_err(fail)?;
    let by_task: BTreeMap<String, Vec<&Quadruplet>> = vicl_core::eval::group_by_task(&test);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    // Queries are clean scenes, the source distribution shared by the tasks.
    let queries: Vec<Image> = (0..25)
        .map(|i| gen_pair(&specs[0], 9_000_000 + i, 16).map(|(x, _)| x))
        .collect::<Result<_, _>>()
        .map_err(fail)?;
    let sampler = SamplerConfig {
        steps: DESK_SAMPLER_STEPS,
        seed: SEED,
        clamp: true,
    };
    let mut wins = 0;
    let mut trials = 0;
    for (ti, spec) in specs.iter().enumerate() {
        let group = &by_task[BASE_TASKS[ti]];
        let targets: Vec<Vec<Image>> = queries
            .iter()
            .map(|q| specs.iter().map(|s| apply_task(s, q)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<_, _>>()
            .map_err(fail)?;
        let ex = group[rng.random_range(0..group.len())];
        let qrefs: Vec<&Image> = queries.iter().collect();
        let seeds: Vec<u64> = (0..queries.len() as u64).collect();
        let preds = predict(&backbone, &c.params, (&ex.x_s, &ex.x_t), &qrefs, &seeds, &sampler).map_err(fail)?;
        debug_assert_eq!(spec.name(), BASE_TASKS[ti]);
        for (pred, tgts) in preds.iter().zip(&targets) {
            let errs: Vec<f64> = tgts.iter().map(|t| metrics::mse(pred, t)).collect::<Result<_, _>>().map_err(fail)?;
            let own = errs[ti];
            if errs.iter().enumerate().all(|(j, &e)| j == ti || own < 0.5 * e) {
                wins += 1;
            }
            trials += 1;
        }
    }
    Ok(outcome(wins * 10 >= trials * 9, format!("consistent target closest by 2x in {wins}/{trials} trials (need 90%)")))
}

fn a7_adapters(ws: &Workspace, base: &Path) -> Check {
    let data = ws.data("adapter-data", &ADAPTER_TASKS)?;
    let config = format!(
        r#"{{"backbone": {{"adapters": {{"attention_lora": true, "ffn_moe": true}}}}, "train": {{"steps": {ADAPTER_STEPS}, "seed": {SEED}}}}}"#
    );
    let (ckpt, elapsed) = ws.train("adapter", &config, &["--init", p(base), "--adapter-only"], &data)?;
    let report = ws.eval("adapter-eval", &ckpt, &data, "iou,rmse255", false)?;
    let mean = |task: &str, value: &str| report.report.mean(task, value).ok_or_else(|| format!("no {value} for {task}"));
    let iou = mean("boxfill", "iou")?;
    let rmse = mean("edge", "rmse255")?;

    let before = Checkpoint::load(base).map_err(fail)?;
    let after = Checkpoint::load(&ckpt).map_err(fail)?;
    let mut frozen: ParamStore<f32> = before.params.clone();
    frozen.freeze_all();
    let freeze = freeze_check(&frozen, &after.params);
    let clean = freeze.is_clean() && freeze.checked == before.params.len();
    let (in_budget, time) = timing(elapsed, ADAPTER_BUDGET);
    let ok = iou > 0.7 && rmse < 40.0 && clean && in_budget;
    Ok(outcome(
        ok,
        format!(
            "boxfill IoU {iou:.3} (>0.7), edge RMSE255 {rmse:.2} (<40), {} base tensors bit-identical: {clean}; {ADAPTER_STEPS} steps; {time}",
            freeze.checked
        ),
    ))
}

// A9

/// Edits with a consistent footprint under the block-mean toy embedder:
/// brightening one image quadrant, or tinting the whole image red. Global
/// color tasks such as invert move the embedding in a scene-dependent
/// direction and do not form clusters under this embedder.
const MINING_EDITS: [&str; 5] = ["brighten-q0", "brighten-q1", "brighten-q2", "brighten-q3", "red-tint"];

fn mining_edit(k: usize, x: &Image) -> Result<Image, String> {
    let (h, w) = (x.height(), x.width());
    Image::from_fn(h, w, |r, c| {
        let px = x.pixel(r, c);
        let lift = |v: f32| (v + 0.4).min(1.0);
        if k == 4 {
            [lift(px[0]), px[1], px[2]]
        } else if (2 * r / h) * 2 + 2 * c / w == k {
            px.map(lift)
        } else {
            px
        }
    })
    .and_then(|img| snap_to_8bit(&img))
    .map_err(fail)
}

fn a9_mining() -> Check {
    let mut images: BTreeMap<String, Image> = BTreeMap::new();
    let mut pairs = Vec::new();
    for (ti, task) in MINING_EDITS.iter().enumerate() {
        for i in 0..40 {
            let x = gen_scene(&mut ChaCha8Rng::seed_from_u64((ti * 1000 + i) as u64));
            let y = mining_edit(ti, &x)?;
            let id = format!("{task}/{i:03}");
            images.insert(format!("{id}_x"), x);
            images.insert(format!("{id}_y"), y);
            pairs.push(PairRecord {
                id: id.clone(),
                x: format!("{id}_x"),
                y: format!("{id}_y"),
                instr_vec: None,
                task: Some(task.to_string()),
            });
        }
    }
    let cfg = MineConfig {
        k: Some(5),
        seed: SEED,
        ..MineConfig::default()
    };
    let load = |key: &str| images.get(key).cloned().ok_or_else(|| vicl_core::Error::Config(format!("no image {key}")));
    let out = mine(&pairs, &Embedder::Toy, load, &cfg).map_err(fail)?;
    let purity = out.report.purity.ok_or("no purity")?;
    let task_of = |id: &str| id.split('/').next().unwrap_or_default().to_string();
    let mixed = out
        .records
        .iter()
        .filter(|r| {
            let (a, b) = r.id.split_once('+').unwrap_or((&r.id, ""));
            task_of(a) != task_of(b)
        })
        .count();
    let (k_small, k_large) = (choose_k(24_999, None), choose_k(25_000, None));

    let a = [1.0, 0.0];
    let b = [0.98, (1.0f64 - 0.98 * 0.98).sqrt()];
    let va = FilterView { source: &a, instr: None, task: Some("t") };
    let vb = FilterView { source: &b, instr: None, task: Some("t") };
    let boundary = cosine(&a, &b) == 0.98 && dual_filter(&va, &vb, &FilterConfig::default()) == FilterDecision::Accept;
    let ok = purity >= 0.95 && mixed == 0 && !out.records.is_empty() && k_small == 1500 && k_large == 3000 && boundary;
    Ok(outcome(
        ok,
        format!(
            "purity {purity:.3} (>=0.95), {} accepted with {mixed} cross-task, K(24999)={k_small}, K(25000)={k_large}, cosine 0.98 accepted: {boundary}",
            out.records.len()
        ),
    ))
}

// A10

fn lum(img: &Image, r: usize, c: usize) -> f64 {
    let [x, y, z] = img.pixel(r, c).map(f64::from);
    0.299 * x + 0.587 * y + 0.114 * z
}

fn oracle_iou(a: &Image, b: &Image) -> f64 {
    let (mut i, mut u) = (0.0, 0.0);
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (x, y) = (lum(a, r, c) >= 0.5, lum(b, r, c) >= 0.5);
            if x && y {
                i += 1.0;
            }
            if x || y {
                u += 1.0;
            }
        }
    }
    if u == 0.0 {
        1.0
    } else {
        i / u
    }
}

fn oracle_psnr(a: &Image, b: &Image) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        s += (f64::from(*x) - f64::from(*y)) * (f64::from(*x) - f64::from(*y));
    }
    let m = s / a.data().len() as f64;
    if m == 0.0 {
        99.0
    } else {
        (-10.0 * m.log10()).min(99.0)
    }
}

fn oracle_rmse255(a: &Image, b: &Image) -> f64 {
    let mut s = 0.0;
    let n = (a.height() * a.width()) as f64;
    for r in 0..a.height() {
        for c in 0..a.width() {
            s += (255.0 * (lum(a, r, c) - lum(b, r, c))).powi(2);
        }
    }
    (s / n).sqrt()
}

/// Direct 11x11 window sum at every pixel with mirrored borders.
fn oracle_ssim(a: &Image, b: &Image) -> f64 {
    let (h, w) = (a.height() as isize, a.width() as isize);
    let weight = |d: isize| (-((d * d) as f64) / (2.0 * 1.5 * 1.5)).exp();
    let norm: f64 = (-5..=5).map(weight).sum::<f64>().powi(2);
    let mirror = |i: isize, n: isize| if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dr in -5..=5 {
                for dc in -5..=5 {
                    let wt = weight(dr) * weight(dc) / norm;
                    let (rr, cc) = (mirror(r + dr, h) as usize, mirror(c + dc, w) as usize);
                    let (x, y) = (lum(a, rr, cc), lum(b, rr, cc));
                    mx += wt * x;
                    my += wt * y;
                    xx += wt * x * x;
                    yy += wt * y * y;
                    xy += wt * x * y;
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / (h * w) as f64
}

/// Affine fit by the 2x2 normal equations.
fn oracle_depth(a: &Image, b: &Image) -> (f64, f64) {
    let mut pts = Vec::new();
    for r in 0..a.height() {
        for c in 0..a.width() {
            if lum(b, r, c) > 0.01 {
                pts.push((lum(a, r, c), lum(b, r, c)));
            }
        }
    }
    let n = pts.len() as f64;
    let (sp, sg, spp, spg) = pts.iter().fold((0.0, 0.0, 0.0, 0.0), |(a, b, c, d), &(p, g)| (a + p, b + g, c + p * p, d + p * g));
    let det = n * spp - sp * sp;
    let (s, t) = if det.abs() > 1e-300 { ((n * spg - sp * sg) / det, (spp * sg - sp * spg) / det) } else { (0.0, sg / n) };
    let mut absrel = 0.0;
    let mut good = 0.0;
    for &(p, g) in &pts {
        let d = s * p + t;
        absrel += (d - g).abs() / g;
        if d > 0.0 && d / g < 1.25 && g / d < 1.25 {
            good += 1.0;
        }
    }
    (absrel / n, good / n)
}

fn oracle_normal(a: &Image, b: &Image) -> (f64, f64) {
    let mut errs = Vec::new();
    for r in 0..a.height() {
        for c in 0..a.width() {
            let u = a.pixel(r, c).map(|v| 2.0 * f64::from(v) - 1.0);
            let v = b.pixel(r, c).map(|v| 2.0 * f64::from(v) - 1.0);
            let (nu, nv) = (dot(&u, &u).sqrt(), dot(&v, &v).sqrt());
            if nu == 0.0 || nv == 0.0 {
                continue;
            }
            let cos = (dot(&u, &v) / (nu * nv)).clamp(-1.0, 1.0);
            errs.push(cos.acos() * 180.0 / std::f64::consts::PI);
        }
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    errs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let m = errs.len();
    let median = if m % 2 == 1 { errs[m / 2] } else { (errs[m / 2 - 1] + errs[m / 2]) / 2.0 };
    (median, mean)
}

fn a10_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let random_image = |rng: &mut ChaCha8Rng| Image::from_fn(16, 16, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
    // Per-metric worst deviation and its tolerance.
    let mut worst: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    let mut note = |name: &'static str, got: f64, want: f64, tol: f64| {
        let e = worst.entry(name).or_insert((0.0, tol));
        e.0 = e.0.max((got - want).abs());
    };
    for _ in 0..200 {
        let (a, b) = (random_image(&mut rng), random_image(&mut rng));
        note("iou", metrics::iou(&a, &b).map_err(fail)?, oracle_iou(&a, &b), 1e-12);
        note("psnr", metrics::psnr(&a, &b).map_err(fail)?, oracle_psnr(&a, &b), 1e-6);
        note("ssim", metrics::ssim(&a, &b).map_err(fail)?, oracle_ssim(&a, &b), 1e-6);
        note("rmse255", metrics::rmse255(&a, &b).map_err(fail)?, oracle_rmse255(&a, &b), 1e-9);
        let (d, od) = (metrics::depth_metrics(&a, &b).map_err(fail)?, oracle_depth(&a, &b));
        note("absrel", d.0, od.0, 1e-9);
        note("delta1", d.1, od.1, 1e-9);
        let (nm, on) = (metrics::normal_metrics(&a, &b).map_err(fail)?, oracle_normal(&a, &b));
        note("normal-median", nm.0, on.0, 1e-9);
        note("normal-mean", nm.1, on.1, 1e-9);
    }
    let oracle_ok = worst.values().all(|(e, tol)| e <= tol);

    let x = random_image(&mut rng);
    let identity = metrics::iou(&x, &x).map_err(fail)? == 1.0
        && metrics::psnr(&x, &x).map_err(fail)? == 99.0
        && (metrics::ssim(&x, &x).map_err(fail)? - 1.0).abs() <= 1e-9
        && metrics::rmse255(&x, &x).map_err(fail)? == 0.0
        && metrics::depth_metrics(&x, &x).map_err(fail)? == (0.0, 1.0)
        && metrics::normal_metrics(&x, &x).map_err(fail)? == (0.0, 0.0);
    let devs: Vec<String> = worst.iter().map(|(k, (e, tol))| format!("{k} {e:.1e}/{tol:.0e}")).collect();
    Ok(outcome(oracle_ok && identity, format!("max deviation over 200 pairs: {}; identity values exact: {identity}", devs.join(", "))))
}

// A11

const TINY: &str = r#"{
  "backbone": {"blocks": 1, "dim": 32, "heads": 2, "ffn_hidden": 32, "adapters": {"ffn_moe": true}},
  "train": {"steps": 6, "batch_size": 2, "seed": 4}
}"#;

fn a11_determinism() -> Check {
    let t = tempfile::tempdir().map_err(fail)?;
    let root = t.path();
    let data = root.join("data");
    vicl(&["gen-data", "--tasks", "invert,desaturate", "--count", "8", "--holdout", "0.25", "--out", p(&data)])?;
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY).map_err(fail)?;

    let (r1, r2) = (root.join("r1"), root.join("r2"));
    for r in [&r1, &r2] {
        vicl(&["--threads", "1", "train", "--config", p(&cfg), "--data", p(&data), "--out", p(r), "--checkpoint-every", "3"])?;
    }
    let train_same = tree(&r1) == tree(&r2);

    let ckpt = r1.join("checkpoint.bin");
    let m = vicl_core::taskgen::read_manifest(&data.join("test")).map_err(fail)?;
    let test = data.join("test");
    let (o1, o2) = (root.join("o1.ppm"), root.join("o2.ppm"));
    for o in [&o1, &o2] {
        vicl(&[
            "--threads", "1", "infer", "--ckpt", p(&ckpt), "--exemplar-src", p(&test.join(&m[0].xs)), "--exemplar-tgt",
            p(&test.join(&m[0].xt)), "--query", p(&test.join(&m[1].xq)), "--out", p(o), "--steps", "5",
        ])?;
    }
    let infer_same = fs::read(&o1).map_err(fail)? == fs::read(&o2).map_err(fail)?;

    let corpus = root.join("corpus");
    fs::create_dir_all(&corpus).map_err(fail)?;
    let mut lines = String::new();
    for (ti, task) in ["invert", "edge", "boxfill"].iter().enumerate() {
        let spec: TaskSpec = task.parse().map_err(fail)?;
        for i in 0..8 {
            let (x, y) = gen_pair(&spec, (ti * 100 + i) as u64, 16).map_err(fail)?;
            let id = format!("{task}-{i}");
            vicl_core::codec::write_ppm(&corpus.join(format!("{id}_x.ppm")), &x).map_err(fail)?;
            vicl_core::codec::write_ppm(&corpus.join(format!("{id}_y.ppm")), &y).map_err(fail)?;
            lines.push_str(&format!("{{\"id\":\"{id}\",\"x\":\"{id}_x.ppm\",\"y\":\"{id}_y.ppm\",\"task\":\"{task}\"}}\n"));
        }
    }
    fs::write(corpus.join("pairs.jsonl"), lines).map_err(fail)?;
    let (m1, m2) = (root.join("m1"), root.join("m2"));
    for o in [&m1, &m2] {
        vicl(&["--threads", "1", "mine", "--pairs", p(&corpus), "--k", "3", "--out", p(o), "--seed", "1"])?;
    }
    let mine_same = tree(&m1) == tree(&m2);

    let bytes = fs::read(&ckpt).map_err(fail)?;
    let resaved = root.join("resaved.bin");
    Checkpoint::load(&ckpt).map_err(fail)?.save(&resaved).map_err(fail)?;
    let roundtrip = fs::read(&resaved).map_err(fail)? == bytes;

    let split = root.join("split");
    vicl(&["--threads", "1", "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&split), "--steps", "2"])?;
    vicl(&[
        "--threads", "1", "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&split), "--resume", p(&split.join("checkpoint.bin")),
    ])?;
    let (a, b) = (Checkpoint::load(&ckpt).map_err(fail)?, Checkpoint::load(&split.join("checkpoint.bin")).map_err(fail)?);
    let resume_same = a.params == b.params
        && a.adam == b.adam
        && a.step == b.step
        && a.rng == b.rng
        && fs::read(r1.join("loss.csv")).map_err(fail)? == fs::read(split.join("loss.csv")).map_err(fail)?;

    let ok = train_same && infer_same && mine_same && roundtrip && resume_same;
    Ok(outcome(
        ok,
        format!("byte-identical reruns: train {train_same}, infer {infer_same}, mine {mine_same}; checkpoint roundtrip {roundtrip}; resume bit-exact {resume_same}"),
    ))
}

/// Criteria that share the trained base model.
const TRAINED: [(&str, &str); 4] = [
    ("A5", "in-context learning"),
    ("A6", "cross-task disambiguation"),
    ("A7", "frozen-base adaptation"),
    ("A8", "exemplar robustness"),
];

fn report(id: &str, title: &str, check: Check, failures: &mut Vec<String>) {
    let o = check.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    println!("{id} {} {title}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    if !o.pass {
        failures.push(id.to_string());
    }
}

fn main() -> ExitCode {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('A')).collect();
    let wanted = |id: &str| only.is_empty() || only.iter().any(|o| o == id);
    let mut failures = Vec::new();
    let mut run = |id: &str, title: &str, check: &dyn Fn() -> Check| {
        if wanted(id) {
            report(id, title, check(), &mut failures);
        }
    };
    run("A1", "gradient check", &a1_gradcheck);
    run("A2", "MoE algebra", &a2_moe_algebra);
    run("A3", "RoPE properties", &a3_rope);
    run("A4", "flow exactness", &a4_flow);

    if TRAINED.iter().any(|(id, _)| wanted(id)) {
        let ws = Workspace::new();
        match a5_base(&ws) {
            Ok((data, ckpt, check)) => {
                run("A5", "in-context learning", &|| check.clone());
                run("A6", "cross-task disambiguation", &|| a6_disambiguation(&data, &ckpt));
                run("A7", "frozen-base adaptation", &|| a7_adapters(&ws, &ckpt));
                run("A8", "exemplar robustness", &|| a8_robustness(&ws));
            }
            Err(e) => {
                for (id, title) in TRAINED {
                    run(id, title, &|| Err(e.clone()));
                }
            }
        }
    }

    run("A9", "mining", &a9_mining);
    run("A10", "metric oracles", &a10_metrics);
    run("A11", "determinism and persistence", &a11_determinism);

    if failures.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", failures.join(", "));
        if std::env::var("VICL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            ExitCode::FAILURE
        } else {
            ExitCode::SUCCESS
        }
    }
}

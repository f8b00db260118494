use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use vicl_core::adapters::freeze_check;
use vicl_core::backbone::{AdapterConfig, Backbone};
use vicl_core::codec::{read_ppm, write_ppm};
use vicl_core::config::RunConfig;
use vicl_core::diffusion::{sample, SamplerConfig};
use vicl_core::eval::{evaluate, EvalConfig, ROBUSTNESS_DRAWS};
use vicl_core::gradcheck::{gradcheck_backbone, model_gradcheck, GRADCHECK_TOLERANCE};
use vicl_core::metrics::parse_metrics;
use vicl_core::mining::{mine_dir, EmbeddingTable, Embedder, FilterConfig, MineConfig, EMBEDDINGS_FILE, PAIRS_FILE};
use vicl_core::numerics::BackwardFault;
use vicl_core::taskgen::{gen_task_set, read_dataset, split_dataset, verify_dataset, write_dataset, TaskSpec, MANIFEST};
use vicl_core::training::{encode_dataset, Checkpoint, Phase, Trainer};
use vicl_core::{Error, Result};

use crate::{EvalArgs, GenDataArgs, GradcheckArgs, InferArgs, MineArgs, TrainArgs, EXIT_FAILURE};

pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";
pub const LOSS_CSV: &str = "loss.csv";
pub const LOSS_HEADER: &str = "step,loss,aux";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// `dir/split` if it holds a manifest, else `dir` itself.
fn split_dir(dir: &Path, split: &str) -> PathBuf {
    let sub = dir.join(split);
    if sub.join(MANIFEST).is_file() {
        sub
    } else {
        dir.to_path_buf()
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<ExitCode> {
    let tasks = a.tasks.iter().map(|t| t.parse::<TaskSpec>()).collect::<Result<Vec<_>>>()?;
    if a.count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut summary = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        let quads = gen_task_set(task, i, a.count, a.seed)?;
        let (tr, te) = split_dataset(quads, a.holdout, a.seed ^ i as u64)?;
        summary.push(format!("{task}: {} train, {} test", tr.len(), te.len()));
        train.extend(tr);
        test.extend(te);
    }
    write_dataset(&a.out.join("train"), &train)?;
    write_dataset(&a.out.join("test"), &test)?;
    for split in ["train", "test"] {
        let bad = verify_dataset(&a.out.join(split))?;
        if !bad.is_empty() {
            return Err(Error::Contract(format!("{} {split} items fail y = T(x): {bad:?}", bad.len())));
        }
    }
    for line in summary {
        println!("{line}");
    }
    Ok(ExitCode::SUCCESS)
}

/// Drops loss rows past `step` so a resumed run continues the file cleanly.
fn truncate_loss_csv(path: &Path, step: u64) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let file = File::open(path).map_err(io(path))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io(path))?;
        let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if row_step.is_none_or(|s| s <= step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(io(path))
}

fn build_trainer(a: &TrainArgs, cfg: &mut RunConfig) -> Result<Trainer> {
    if let Some(path) = &a.resume {
        let ckpt = Checkpoint::load(path)?;
        let echo = ckpt.echo()?;
        if echo.backbone != cfg.backbone {
            return Err(Error::Config(format!("{} was trained with a different backbone config", path.display())));
        }
        if let Some(t) = &echo.train {
            cfg.train.phase = t.phase;
        }
        log::info!("resuming from {} at step {}", path.display(), ckpt.step);
        return Trainer::from_checkpoint(ckpt, cfg.train.clone());
    }
    if a.adapter_only {
        let init = a
            .init
            .as_ref()
            .ok_or_else(|| Error::Config("--adapter-only needs a base checkpoint via --init".into()))?;
        let base = Checkpoint::load(init)?;
        let base_backbone = base.echo()?.backbone;
        if !cfg.backbone.adapters.any() {
            cfg.backbone.adapters = AdapterConfig::hybrid();
        }
        if let Some(n) = a.experts {
            cfg.backbone.adapters.experts = n;
        }
        if let Some(k) = a.top_k {
            cfg.backbone.adapters.top_k = k;
        }
        let mut bare = cfg.backbone.clone();
        bare.adapters = base_backbone.adapters.clone();
        if bare != base_backbone {
            return Err(Error::Config(format!("{} does not match the configured backbone", init.display())));
        }
        if base.params.iter().any(|(n, _)| vicl_core::backbone::is_adapter_param(n)) {
            return Err(Error::Config("base checkpoint already carries adapters".into()));
        }
        cfg.train.phase = Phase::AdapterOnly;
        cfg.validate()?;
        return Trainer::adapter_phase(Backbone::new(cfg.backbone.clone())?, base.params, cfg.train.clone());
    }
    if cfg.train.phase == Phase::AdapterOnly {
        return Err(Error::Config("phase `adapter-only` needs --init and --adapter-only".into()));
    }
    let mut trainer = Trainer::new(Backbone::new(cfg.backbone.clone())?, cfg.train.clone())?;
    if let Some(init) = &a.init {
        let base = Checkpoint::load(init)?;
        if base.echo()?.backbone != cfg.backbone {
            return Err(Error::Config(format!("{} does not match the configured backbone", init.display())));
        }
        trainer.params = base.params;
    }
    Ok(trainer)
}

pub fn train(a: &TrainArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if (a.experts.is_some() || a.top_k.is_some()) && !a.adapter_only {
        return Err(Error::Config("--experts/--top-k only apply with --adapter-only".into()));
    }
    cfg.validate()?;
    let mut trainer = build_trainer(a, &mut cfg)?;
    let quads = read_dataset(&split_dir(&a.data, "train"))?;
    let data = encode_dataset(&quads, cfg.backbone.patch)?;
    log::info!(
        "{} training items over {} tasks; {} trainable of {} parameters",
        quads.len(),
        data.len(),
        trainer.params.trainable_numel(),
        trainer.params.numel()
    );

    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    let config_path = a.out.join("config.json");
    fs::write(&config_path, cfg.to_json()?).map_err(io(&config_path))?;
    let csv_path = a.out.join(LOSS_CSV);
    if a.resume.is_some() {
        truncate_loss_csv(&csv_path, trainer.step)?;
    }
    let fresh = !csv_path.is_file();
    let csv_file = fs::OpenOptions::new().create(true).append(true).open(&csv_path).map_err(io(&csv_path))?;
    let mut csv = BufWriter::new(csv_file);
    if fresh {
        writeln!(csv, "{LOSS_HEADER}").map_err(io(&csv_path))?;
    }

    let before = trainer.params.clone();
    let start = Instant::now();
    let mut window = (0.0, 0u64);
    let out = a.out.clone();
    let result = trainer.run(&data, |t, s| {
        let aux = s.aux.map_or(String::new(), |v| v.to_string());
        writeln!(csv, "{},{},{aux}", s.step, s.loss).map_err(io(&csv_path))?;
        window.0 += s.loss;
        window.1 += 1;
        if a.log_every > 0 && s.step % a.log_every == 0 {
            log::info!("step {} loss {:.5} ({:.1}s)", s.step, window.0 / window.1 as f64, start.elapsed().as_secs_f64());
            window = (0.0, 0);
        }
        if a.checkpoint_every > 0 && s.step % a.checkpoint_every == 0 {
            csv.flush().map_err(io(&csv_path))?;
            t.checkpoint()?.save(&out.join(format!("checkpoint-{:06}.bin", s.step)))?;
        }
        Ok(())
    });
    csv.flush().map_err(io(&csv_path))?;
    if let Err(e) = result {
        if let Error::NonFinite { step, detail } = &e {
            let dump = a.out.join("abort.json");
            let body = serde_json::json!({ "step": step, "detail": detail, "last_finite_checkpoint": "abort-checkpoint.bin" });
            fs::write(&dump, serde_json::to_string_pretty(&body)?).map_err(io(&dump))?;
            trainer.checkpoint()?.save(&a.out.join("abort-checkpoint.bin"))?;
        }
        return Err(e);
    }
    trainer.checkpoint()?.save(&a.out.join(FINAL_CHECKPOINT))?;
    if trainer.config.phase == Phase::AdapterOnly {
        let report = freeze_check(&before, &trainer.params).into_result()?;
        log::info!("freeze check: {} base tensors bit-identical", report.checked);
    }
    log::info!("finished {} steps in {:.1}s", trainer.step, start.elapsed().as_secs_f64());
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &Path) -> Result<(Backbone, vicl_core::params::ParamStore<f32>)> {
    let ckpt = Checkpoint::load(path)?;
    let backbone = Backbone::new(ckpt.echo()?.backbone)?;
    Ok((backbone, ckpt.params))
}

pub fn infer(a: &InferArgs) -> Result<ExitCode> {
    let (backbone, params) = load_model(&a.ckpt)?;
    let xs = read_ppm(&a.exemplar_src)?;
    let xt = read_ppm(&a.exemplar_tgt)?;
    let xq = read_ppm(&a.query)?;
    let size = backbone.config().image_size;
    for (name, img) in [("exemplar source", &xs), ("exemplar target", &xt), ("query", &xq)] {
        if img.width() != size || img.height() != size {
            return Err(Error::Config(format!(
                "{name} is {}x{}, the model expects {size}x{size}",
                img.width(),
                img.height()
            )));
        }
    }
    let cfg = SamplerConfig {
        steps: a.steps,
        seed: a.seed,
        clamp: !a.no_clamp,
    };
    let y = sample(&backbone, &params, &xs, &xt, &xq, &cfg)?;
    write_ppm(&a.out, &y)?;
    log::info!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let metrics = parse_metrics(&a.metrics)?;
    let items = read_dataset(&split_dir(&a.data, "test"))?;
    let model = match (&a.ckpt, a.oracle) {
        (_, true) => None,
        (Some(path), false) => Some(load_model(path)?),
        (None, false) => return Err(Error::Config("--ckpt is required without --oracle".into())),
    };
    let cfg = EvalConfig {
        metrics,
        sampler: SamplerConfig {
            steps: a.steps,
            seed: a.seed,
            clamp: true,
        },
        draws: if a.robustness { ROBUSTNESS_DRAWS } else { 1 },
    };
    let start = Instant::now();
    let report = evaluate(model.as_ref().map(|(b, p)| (b, p)), &items, &cfg)?;
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(&a.report, serde_json::to_string_pretty(&report)?).map_err(io(&a.report))?;
    for (task, values) in &report.report.tasks {
        for (name, agg) in values {
            match report.robustness.as_ref().and_then(|r| r.get(task)?.get(name)) {
                Some(r) => log::info!("{task} {name}: {:.4} ± {:.4} over {} exemplars", r.mean, r.std, r.count),
                None => log::info!("{task} {name}: mean {:.4} over {} items", agg.mean, agg.count),
            }
        }
    }
    log::info!("evaluated {} items in {:.1}s", items.len(), start.elapsed().as_secs_f64());
    Ok(ExitCode::SUCCESS)
}

pub fn mine(a: &MineArgs) -> Result<ExitCode> {
    let dir = if a.pairs.is_dir() {
        a.pairs.clone()
    } else if a.pairs.file_name().is_some_and(|n| n == PAIRS_FILE) {
        a.pairs.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    } else {
        return Err(Error::Config(format!("{} is neither a corpus directory nor {PAIRS_FILE}", a.pairs.display())));
    };
    let embedder = match a.embedder.as_str() {
        "toy" => Embedder::Toy,
        "file" => {
            let path = a.embeddings.clone().unwrap_or_else(|| dir.join(EMBEDDINGS_FILE));
            Embedder::File(EmbeddingTable::load(&path)?)
        }
        other => return Err(Error::Config(format!("unknown embedder `{other}` (toy, file)"))),
    };
    let k = match a.k.as_str() {
        "auto" => None,
        s => Some(
            s.parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .ok_or_else(|| Error::Config(format!("--k must be a positive integer or `auto`, got `{s}`")))?,
        ),
    };
    let cfg = MineConfig {
        k,
        filter: FilterConfig {
            tau_vis: a.tau_vis,
            tau_text: a.tau_text,
        },
        seed: a.seed,
        max_iter: a.max_iter,
    };
    let report = mine_dir(&dir, &embedder, &cfg, &a.out)?;
    log::info!(
        "{} pairs, K={}, {} candidates, {} accepted (tau_vis={}, tau_text={})",
        report.pairs,
        report.k,
        report.candidates,
        report.accepted,
        report.tau_vis,
        report.tau_text
    );
    if let Some(p) = report.purity {
        log::info!("cluster purity {p:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let backbone = match &a.config {
        Some(path) => RunConfig::load(path)?.backbone,
        None => gradcheck_backbone(),
    };
    let fault = a.corrupt_backward.then_some(BackwardFault::MatmulLhs);
    let start = Instant::now();
    let r = model_gradcheck(&backbone, a.seed, fault)?;
    let (name, index) = r.worst.clone().unwrap_or_default();
    println!(
        "max relative error {:.3e} at {name}[{index}] (analytic {:.6e}, numeric {:.6e}) over {} coordinates",
        r.max_rel_error, r.worst_values.0, r.worst_values.1, r.coordinates
    );
    println!("max absolute error {:.3e}", r.max_abs_error);
    log::info!("gradient check took {:.1}s", start.elapsed().as_secs_f64());
    if r.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        log::error!("relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}", r.max_rel_error);
        Ok(ExitCode::from(EXIT_FAILURE))
    }
}

//! Fixed-exemplar evaluation of a trained model over a test split.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::codec::{decode, Image};
use crate::diffusion::{condition_from_images, sample_raw, SamplerConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_item, Aggregate, ItemRow, Metric, MetricReport};
use crate::params::ParamStore;
use crate::taskgen::Quadruplet;

/// Queries sampled together in one batched forward pass. Fixed so that the
/// result does not depend on how work is spread over threads.
pub const SAMPLE_CHUNK: usize = 16;

/// Number of exemplar draws in robustness mode.
pub const ROBUSTNESS_DRAWS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub sampler: SamplerConfig,
    /// Exemplar draws per task; 1 is the standard protocol.
    pub draws: usize,
}

/// Which test item lends its exemplar pair to every query of a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarChoice {
    pub task: String,
    pub draw: usize,
    pub exemplar_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub steps: usize,
    pub exemplars: Vec<ExemplarChoice>,
    /// Rows and aggregates of the first draw.
    #[serde(flatten)]
    pub report: MetricReport,
    /// Per task and value: spread of the per-draw means across draws.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robustness: Option<BTreeMap<String, BTreeMap<String, Aggregate>>>,
}

/// Groups items by task name, keeping manifest order inside each group.
pub fn group_by_task(items: &[Quadruplet]) -> BTreeMap<String, Vec<&Quadruplet>> {
    let mut groups: BTreeMap<String, Vec<&Quadruplet>> = BTreeMap::new();
    for q in items {
        groups.entry(q.task.to_string()).or_default().push(q);
    }
    groups
}

fn task_rng(seed: u64, task: &str, draw: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(task.as_bytes()) ^ (draw as u64) << 56);
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Seed-determined exemplar item for one task and draw.
pub fn choose_exemplar<'a>(group: &[&'a Quadruplet], seed: u64, task: &str, draw: usize) -> Result<&'a Quadruplet> {
    if group.is_empty() {
        return Err(Error::Contract(format!("no test items for task `{task}`")));
    }
    let i = task_rng(seed, task, draw).random_range(0..group.len());
    Ok(group[i])
}

/// Starting-noise seed of query `index` within its task.
pub fn query_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64
}

/// One-shot prediction for each `(exemplar, query)` pair, sampled in fixed
/// chunks spread over the rayon pool.
pub fn predict(
    backbone: &Backbone,
    params: &ParamStore<f32>,
    exemplar: (&Image, &Image),
    queries: &[&Image],
    seeds: &[u64],
    sampler: &SamplerConfig,
) -> Result<Vec<Image>> {
    sampler.validate()?;
    let patch = backbone.config().patch;
    let conds = queries
        .iter()
        .map(|q| condition_from_images(exemplar.0, exemplar.1, q, patch))
        .collect::<Result<Vec<_>>>()?;
    let chunks: Vec<Result<Vec<Image>>> = conds
        .par_chunks(SAMPLE_CHUNK)
        .zip(seeds.par_chunks(SAMPLE_CHUNK))
        .map(|(c, s)| {
            sample_raw(backbone, params, c, s, sampler.steps)?
                .iter()
                .map(|g| decode(g, sampler.clamp))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(queries.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Evaluates every test item against its task's fixed exemplar. With
/// `model = None` the ground truth stands in for the predictions.
pub fn evaluate(model: Option<(&Backbone, &ParamStore<f32>)>, items: &[Quadruplet], cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.draws == 0 {
        return Err(Error::Config("at least one exemplar draw is needed".into()));
    }
    if cfg.metrics.is_empty() {
        return Err(Error::Config("no metrics requested".into()));
    }
    let seed = cfg.sampler.seed;
    let groups = group_by_task(items);
    let mut exemplars = Vec::new();
    let mut draws: Vec<Vec<ItemRow>> = Vec::with_capacity(cfg.draws);
    for draw in 0..cfg.draws {
        let mut rows = Vec::with_capacity(items.len());
        for (task, group) in &groups {
            let ex = choose_exemplar(group, seed, task, draw)?;
            exemplars.push(ExemplarChoice {
                task: task.clone(),
                draw,
                exemplar_id: ex.id.clone(),
            });
            let preds = match model {
                Some((backbone, params)) => {
                    let queries: Vec<&Image> = group.iter().map(|q| &q.x_q).collect();
                    let seeds: Vec<u64> = (0..group.len()).map(|i| query_seed(seed, i)).collect();
                    predict(backbone, params, (&ex.x_s, &ex.x_t), &queries, &seeds, &cfg.sampler)?
                }
                None => group.iter().map(|q| q.y_q.clone()).collect(),
            };
            for (q, pred) in group.iter().zip(&preds) {
                rows.push(evaluate_item(&q.id, task, pred, &q.y_q, &cfg.metrics)?);
            }
        }
        draws.push(rows);
    }
    let robustness = (cfg.draws > 1).then(|| {
        let per_draw: Vec<MetricReport> = draws.iter().cloned().map(MetricReport::from_items).collect();
        let mut out: BTreeMap<String, BTreeMap<String, Aggregate>> = BTreeMap::new();
        for (task, values) in &per_draw[0].tasks {
            for value in values.keys() {
                let means: Vec<f64> = per_draw.iter().filter_map(|r| r.mean(task, value)).collect();
                out.entry(task.clone()).or_default().insert(value.clone(), Aggregate::of(&means));
            }
        }
        out
    });
    Ok(EvalReport {
        seed,
        steps: cfg.sampler.steps,
        exemplars,
        report: MetricReport::from_items(draws.swap_remove(0)),
        robustness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::parse_metrics;
    use crate::taskgen::{gen_task_set, TaskSpec};

    fn items() -> Vec<Quadruplet> {
        let mut v = gen_task_set(&"invert".parse::<TaskSpec>().unwrap(), 0, 6, 1).unwrap();
        v.extend(gen_task_set(&"boxfill".parse::<TaskSpec>().unwrap(), 3, 4, 1).unwrap());
        v
    }

    fn cfg(draws: usize) -> EvalConfig {
        EvalConfig {
            metrics: parse_metrics("iou,psnr,depth").unwrap(),
            sampler: SamplerConfig::default(),
            draws,
        }
    }

    #[test]
    fn oracle_predictions_hit_identity_values() {
        let r = evaluate(None, &items(), &cfg(1)).unwrap();
        for row in &r.report.items {
            assert_eq!(row.values["iou"], 1.0);
            assert_eq!(row.values["psnr"], 99.0);
            assert_eq!(row.values["absrel"], 0.0);
        }
        assert_eq!(r.exemplars.len(), 2);
        assert!(r.robustness.is_none());
    }

    #[test]
    fn aggregates_are_means_of_rows() {
        let r = evaluate(None, &items(), &cfg(1)).unwrap();
        let rows: Vec<f64> = r.report.items.iter().filter(|i| i.task == "invert").map(|i| i.values["psnr"]).collect();
        assert_eq!(r.report.mean("invert", "psnr").unwrap(), rows.iter().sum::<f64>() / rows.len() as f64);
    }

    #[test]
    fn exemplar_choice_is_seeded() {
        let items = items();
        let groups = group_by_task(&items);
        let g = &groups["invert"];
        let a = choose_exemplar(g, 5, "invert", 0).unwrap().id.clone();
        assert_eq!(a, choose_exemplar(g, 5, "invert", 0).unwrap().id);
        let ids: std::collections::BTreeSet<_> = (0..20).map(|d| choose_exemplar(g, 5, "invert", d).unwrap().id.clone()).collect();
        assert!(ids.len() > 1);
    }

    #[test]
    fn robustness_mode_reports_spread() {
        let r = evaluate(None, &items(), &cfg(ROBUSTNESS_DRAWS)).unwrap();
        let rob = r.robustness.unwrap();
        assert_eq!(rob["invert"]["psnr"].count, ROBUSTNESS_DRAWS);
        assert_eq!(rob["invert"]["psnr"].std, 0.0);
        assert_eq!(r.exemplars.len(), 2 * ROBUSTNESS_DRAWS);
    }
}

//! Rectified-flow objective and Euler sampling of the query target.
//!
//! `z_t = (1 - t) z_0 + t eps` with velocity target `eps - z_0`; sampling
//! integrates from pure noise at `t = 1` down to `t = 0`.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapters::RoutingStats;
use crate::backbone::{Backbone, ForwardItem};
use crate::codec::{decode, encode, Image, TokenGrid};
use crate::conditioning::{build_condition_sequence, ConditionSequence};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Var};
use crate::params::ParamStore;

/// Default weight of the routing balance term.
pub const DEFAULT_AUX_WEIGHT: f64 = 0.01;

/// A noised sample and the velocity the model should predict there.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub z_t: Vec<f32>,
    pub t: f64,
    pub noise: Vec<f32>,
    /// `noise - z_0`.
    pub velocity: Vec<f32>,
}

pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Interpolates `z0` toward fresh Gaussian noise.
pub fn forward_noise(z0: &[f32], t: f64, rng: &mut impl Rng) -> Result<FlowState> {
    let noise = gaussian(rng, z0.len());
    forward_noise_with(z0, t, noise)
}

pub fn forward_noise_with(z0: &[f32], t: f64, noise: Vec<f32>) -> Result<FlowState> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("timestep {t} outside [0, 1]")));
    }
    if noise.len() != z0.len() {
        return Err(Error::shape("forward_noise", &[z0.len()], &[noise.len()]));
    }
    let tf = t as f32;
    let z_t = z0.iter().zip(&noise).map(|(&z, &e)| (1.0 - tf) * z + tf * e).collect();
    let velocity = z0.iter().zip(&noise).map(|(&z, &e)| e - z).collect();
    Ok(FlowState { z_t, t, noise, velocity })
}

/// Uniform on `[0, 1)`.
pub fn sample_timestep(rng: &mut impl Rng) -> f64 {
    rng.random::<f64>()
}

/// One supervised example: context, clean target tokens and its noised state.
#[derive(Clone, Debug)]
pub struct FlowExample {
    pub cond: ConditionSequence,
    pub state: FlowState,
}

impl FlowExample {
    pub fn new(cond: ConditionSequence, z0: &[f32], rng: &mut impl Rng) -> Result<Self> {
        let t = sample_timestep(rng);
        Ok(Self {
            cond,
            state: forward_noise(z0, t, rng)?,
        })
    }
}

/// Encodes the three context images.
pub fn condition_from_images(x_s: &Image, x_t: &Image, x_q: &Image, patch: usize) -> Result<ConditionSequence> {
    build_condition_sequence(&encode(x_s, patch)?, &encode(x_t, patch)?, &encode(x_q, patch)?)
}

pub struct LossTerms {
    pub total: Var,
    pub mse: Var,
    pub aux: Option<Var>,
    pub routing: Vec<RoutingStats>,
}

/// `MSE(v_hat, eps - z_0)` over target tokens plus `aux_weight` times the
/// balance term, built on `g` for a whole batch.
pub fn batch_loss<T: Real>(
    backbone: &Backbone,
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    batch: &[FlowExample],
    aux_weight: f64,
) -> Result<LossTerms> {
    let items: Vec<ForwardItem<'_>> = batch
        .iter()
        .map(|ex| ForwardItem {
            cond: &ex.cond,
            noisy: &ex.state.z_t,
            t: ex.state.t,
        })
        .collect();
    let out = backbone.forward(g, params, &items)?;
    let target: Vec<T> = batch
        .iter()
        .flat_map(|ex| ex.state.velocity.iter().map(|&v| T::from_f32(v).unwrap()))
        .collect();
    let mse = g.mse_const(out.velocity, target)?;
    let total = match out.aux {
        Some(aux) if aux_weight != 0.0 => {
            let weighted = g.scale(aux, aux_weight);
            g.add(mse, weighted)?
        }
        _ => mse,
    };
    Ok(LossTerms {
        total,
        mse,
        aux: out.aux,
        routing: out.routing,
    })
}

/// Scalar training loss of one example at a given timestep.
pub fn training_loss(backbone: &Backbone, params: &ParamStore<f32>, example: &FlowExample, aux_weight: f64) -> Result<f64> {
    let mut g = Graph::new();
    let terms = batch_loss(backbone, &mut g, params, std::slice::from_ref(example), aux_weight)?;
    Ok(f64::from(g.value(terms.total).item()))
}

/// Euler sampler settings. The step count defaults to 40; 20 is the cheaper
/// desk setting used by the acceptance runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    /// Clamp decoded predictions to `[0, 1]`.
    pub clamp: bool,
}

pub const DEFAULT_SAMPLER_STEPS: usize = 40;
pub const DESK_SAMPLER_STEPS: usize = 20;

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_SAMPLER_STEPS,
            seed: 0,
            clamp: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        Ok(())
    }
}

/// Anything that predicts velocity for a batch of `(z, t, condition)`.
pub trait VelocityField {
    fn velocity(&mut self, batch: &[ForwardItem<'_>]) -> Result<Vec<Vec<f32>>>;
}

pub struct ModelField<'a> {
    pub backbone: &'a Backbone,
    pub params: &'a ParamStore<f32>,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&mut self, batch: &[ForwardItem<'_>]) -> Result<Vec<Vec<f32>>> {
        self.backbone.predict_batch(self.params, batch)
    }
}

/// Hash of the condition tokens seen at each Euler step, per query.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleTrace {
    pub cond_hashes: Vec<Vec<u64>>,
}

pub fn condition_hash(cond: &ConditionSequence) -> u64 {
    let mut h = DefaultHasher::new();
    for v in cond.tokens() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Euler integration from `t = 1` to `t = 0` with step `1 / steps`, for a
/// batch of queries. Query `i` draws its starting noise from `seeds[i]`.
/// Returns final target tokens (unclamped) and the conditioning trace.
pub fn sample_tokens(
    field: &mut impl VelocityField,
    conds: &[ConditionSequence],
    seeds: &[u64],
    steps: usize,
) -> Result<(Vec<TokenGrid>, SampleTrace)> {
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    if conds.len() != seeds.len() {
        return Err(Error::shape("sample", &[conds.len()], &[seeds.len()]));
    }
    let mut zs: Vec<Vec<f32>> = conds
        .iter()
        .zip(seeds)
        .map(|(c, &s)| gaussian(&mut ChaCha8Rng::seed_from_u64(s), c.segment_len() * c.dim()))
        .collect();
    let mut trace = SampleTrace {
        cond_hashes: vec![Vec::with_capacity(steps); conds.len()],
    };
    let dt = 1.0 / steps as f32;
    for i in 0..steps {
        let t = (steps - i) as f64 / steps as f64;
        for (hashes, c) in trace.cond_hashes.iter_mut().zip(conds) {
            hashes.push(condition_hash(c));
        }
        let items: Vec<ForwardItem<'_>> = conds
            .iter()
            .zip(&zs)
            .map(|(cond, z)| ForwardItem { cond, noisy: z, t })
            .collect();
        let vs = field.velocity(&items)?;
        for (z, v) in zs.iter_mut().zip(&vs) {
            if v.len() != z.len() {
                return Err(Error::shape("velocity", &[v.len()], &[z.len()]));
            }
            for (zi, vi) in z.iter_mut().zip(v) {
                *zi -= dt * vi;
            }
        }
    }
    let grids = conds
        .iter()
        .zip(zs)
        .map(|(c, z)| {
            let (rows, cols, patch) = c.geometry();
            TokenGrid::new(z, rows, cols, patch)
        })
        .collect::<Result<_>>()?;
    Ok((grids, trace))
}

/// Predicts the query target for each condition; outputs are clamped to `[0, 1]`.
pub fn sample_images(
    backbone: &Backbone,
    params: &ParamStore<f32>,
    conds: &[ConditionSequence],
    seeds: &[u64],
    steps: usize,
) -> Result<Vec<Image>> {
    let mut field = ModelField { backbone, params };
    let (grids, _) = sample_tokens(&mut field, conds, seeds, steps)?;
    grids.iter().map(|g| decode(g, true)).collect()
}

/// Final target tokens before decoding.
pub fn sample_raw(
    backbone: &Backbone,
    params: &ParamStore<f32>,
    conds: &[ConditionSequence],
    seeds: &[u64],
    steps: usize,
) -> Result<Vec<TokenGrid>> {
    let mut field = ModelField { backbone, params };
    Ok(sample_tokens(&mut field, conds, seeds, steps)?.0)
}

/// Single-query convenience wrapper.
pub fn sample(
    backbone: &Backbone,
    params: &ParamStore<f32>,
    x_s: &Image,
    x_t: &Image,
    x_q: &Image,
    cfg: &SamplerConfig,
) -> Result<Image> {
    cfg.validate()?;
    let cond = condition_from_images(x_s, x_t, x_q, backbone.config().patch)?;
    let grid = sample_raw(backbone, params, &[cond], &[cfg.seed], cfg.steps)?.remove(0);
    decode(&grid, cfg.clamp)
}

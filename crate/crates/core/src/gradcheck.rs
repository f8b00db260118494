//! Whole-model gradient check: every parameter of a small backbone with
//! LoRA and MoE-LoRA adapters against central differences of the full
//! training loss, in f64.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{AdapterConfig, Backbone, BackboneConfig};
use crate::codec::encode;
use crate::diffusion::{batch_loss, condition_from_images, forward_noise, FlowExample, DEFAULT_AUX_WEIGHT};
use crate::error::Result;
use crate::numerics::{gradcheck, BackwardFault, GradcheckReport, Tensor};
use crate::params::ParamStore;
use crate::taskgen::{gen_pair, TaskSpec};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// 2 blocks, D=32, 2 heads of 16 channels, 8x8 images in 4x4 patches, with
/// hybrid adapters.
pub fn gradcheck_backbone() -> BackboneConfig {
    BackboneConfig {
        blocks: 2,
        dim: 32,
        heads: 2,
        ffn_hidden: 64,
        image_size: 8,
        patch: 4,
        adapters: AdapterConfig::hybrid(),
        ..BackboneConfig::default()
    }
}

/// Parameters with every zero-initialized tensor redrawn, so that gates,
/// adapter up-projections and the output head all carry gradient.
pub fn gradcheck_params(backbone: &Backbone, seed: u64) -> BTreeMap<String, Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = backbone.init_params(&mut rng);
    if backbone.config().adapters.any() {
        backbone.add_adapters(&mut store, &mut rng);
    }
    let noise = Normal::new(0.0, 0.2).expect("valid std");
    store
        .iter()
        .map(|(name, p)| {
            let mut t: Tensor<f64> = p.tensor.cast();
            if t.data().iter().all(|&v| v == 0.0) {
                t.data_mut().iter_mut().for_each(|v| *v = noise.sample(&mut rng));
            }
            (name.clone(), t)
        })
        .collect()
}

/// Two noised examples of a seeded task pair at the backbone's image size.
pub fn gradcheck_batch(backbone: &Backbone, seed: u64) -> Result<Vec<FlowExample>> {
    let cfg = backbone.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let tasks: [TaskSpec; 2] = ["invert".parse()?, "channel-permute".parse()?];
    tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let base = seed.wrapping_mul(31).wrapping_add(4 * i as u64);
            let (xs, xt) = gen_pair(task, base, cfg.image_size)?;
            let (xq, yq) = gen_pair(task, base + 1, cfg.image_size)?;
            let cond = condition_from_images(&xs, &xt, &xq, cfg.patch)?;
            let z0 = encode(&yq, cfg.patch)?;
            let t = 0.2 + 0.6 * i as f64;
            Ok(FlowExample {
                cond,
                state: forward_noise(&z0.tokens, t, &mut rng)?,
            })
        })
        .collect()
}

/// Runs the check; `fault` corrupts the backward pass as a negative control.
pub fn model_gradcheck(config: &BackboneConfig, seed: u64, fault: Option<BackwardFault>) -> Result<GradcheckReport> {
    let backbone = Backbone::new(config.clone())?;
    let params = gradcheck_params(&backbone, seed);
    let batch = gradcheck_batch(&backbone, seed)?;
    gradcheck(&params, GRADCHECK_STEP, |g, tensors| {
        g.set_fault(fault);
        let mut store = ParamStore::new();
        for (name, t) in tensors {
            store.insert(name.clone(), t.clone(), false);
        }
        Ok(batch_loss(&backbone, g, &store, &batch, DEFAULT_AUX_WEIGHT)?.total)
    })
}

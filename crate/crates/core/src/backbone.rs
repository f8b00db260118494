//! The miniature diffusion transformer.
//!
//! One stream of `4L` tokens per example, `[z_s | z_t | z_q | noisy target]`,
//! runs through pre-norm blocks with full bidirectional self-attention and
//! adaLN-style timestep modulation. The output head reads only the target
//! positions and predicts flow velocity.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::adapters::{lora_project, moe_project, MoeVars, RoutingStats};
use crate::codec::{patch_dim, TokenGrid};
use crate::conditioning::{sequence_positions, ConditionSequence, PositionTriple, RopeSplit, RopeTable, DEFAULT_ROPE_BASE};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, RotationTable, Tensor, Var};
use crate::params::ParamStore;

/// Where adapters sit and how big they are.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// LoRA on attention q/k/v/out projections.
    pub attention_lora: bool,
    /// MoE-LoRA on the FFN output projection.
    pub ffn_moe: bool,
    pub lora_rank: usize,
    /// Defaults to the rank, i.e. scale 1.
    pub lora_alpha: Option<f64>,
    pub experts: usize,
    pub top_k: usize,
    pub moe_rank: usize,
    pub moe_alpha: Option<f64>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            attention_lora: false,
            ffn_moe: false,
            lora_rank: 4,
            lora_alpha: None,
            experts: 4,
            top_k: 2,
            moe_rank: 4,
            moe_alpha: None,
        }
    }
}

impl AdapterConfig {
    /// LoRA on attention and MoE-LoRA on the FFN output.
    pub fn hybrid() -> Self {
        Self {
            attention_lora: true,
            ffn_moe: true,
            ..Self::default()
        }
    }

    pub fn any(&self) -> bool {
        self.attention_lora || self.ffn_moe
    }

    fn lora_scale(&self) -> f64 {
        self.lora_alpha.unwrap_or(self.lora_rank as f64) / self.lora_rank as f64
    }

    fn moe_scale(&self) -> f64 {
        self.moe_alpha.unwrap_or(self.moe_rank as f64) / self.moe_rank as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub image_size: usize,
    pub patch: usize,
    /// Per-head (role, row, col) channel split; derived from the head dim when absent.
    pub rope_split: Option<RopeSplit>,
    pub rope_base: f64,
    pub adapters: AdapterConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            dim: 64,
            heads: 4,
            ffn_hidden: 256,
            image_size: 16,
            patch: 4,
            rope_split: None,
            rope_base: DEFAULT_ROPE_BASE,
            adapters: AdapterConfig::default(),
        }
    }
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn patch_dim(&self) -> usize {
        patch_dim(self.patch)
    }

    /// Tokens per image.
    pub fn tokens_per_image(&self) -> usize {
        let side = self.image_size / self.patch.max(1);
        side * side
    }

    pub fn rope_split(&self) -> Result<RopeSplit> {
        match self.rope_split {
            Some(s) => Ok(s),
            None => RopeSplit::for_head_dim(self.head_dim()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.blocks == 0 || self.dim == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return fail("blocks, dim, heads and ffn_hidden must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.dim % 2 != 0 {
            return fail("dim must be even for the timestep embedding".into());
        }
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return fail(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        let split = self.rope_split()?;
        if split.total() != self.head_dim() {
            return fail(format!("rope split {split:?} does not sum to head dim {}", self.head_dim()));
        }
        RopeTable::new(split, self.rope_base)?;
        let a = &self.adapters;
        if a.attention_lora && a.lora_rank == 0 {
            return fail("LoRA rank must be positive".into());
        }
        if a.ffn_moe && (a.moe_rank == 0 || a.experts == 0 || a.top_k == 0 || a.top_k > a.experts) {
            return fail(format!("invalid MoE-LoRA setup: N={} k={} r={}", a.experts, a.top_k, a.moe_rank));
        }
        Ok(())
    }

    /// Width of the timestep MLP output: six modulation vectors per block
    /// plus shift/scale for the final norm.
    fn modulation_width(&self) -> usize {
        (6 * self.blocks + 2) * self.dim
    }
}

/// Whether a parameter belongs to an adapter rather than the base model.
pub fn is_adapter_param(name: &str) -> bool {
    name.contains(".lora_") || name.contains(".moe_")
}

const ATTN_PROJ: [&str; 4] = ["q", "k", "v", "o"];

/// One training or inference example for the batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardItem<'a> {
    pub cond: &'a ConditionSequence,
    /// Noisy target tokens, `L x d_patch`.
    pub noisy: &'a [f32],
    pub t: f64,
}

pub struct ForwardOutput {
    /// Predicted velocity at target positions, `[B * L, d_patch]`.
    pub velocity: Var,
    /// Mean balance loss over MoE layers, when any exist.
    pub aux: Option<Var>,
    /// Per MoE layer, in block order.
    pub routing: Vec<RoutingStats>,
    /// Attention nodes, one per block.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    rope: RopeTable,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let rope = RopeTable::new(config.rope_split()?, config.rope_base)?;
        Ok(Self { config, rope })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn rope(&self) -> &RopeTable {
        &self.rope
    }

    /// Fresh parameters: zero output head and zero modulation (so every gate
    /// starts at 0 and the model predicts exactly zero velocity), zero
    /// adapter up-projections.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamStore<f32> {
        let c = &self.config;
        let (d, h, pd) = (c.dim, c.ffn_hidden, c.patch_dim());
        let mut p = ParamStore::new();
        p.insert("embed.w", xavier(rng, d, pd), false);
        p.insert("embed.b", Tensor::zeros(&[d]), false);
        p.insert("time.w1", normal(rng, &[d, d], 0.02), false);
        p.insert("time.b1", Tensor::zeros(&[d]), false);
        p.insert("time.w2", Tensor::zeros(&[c.modulation_width(), d]), false);
        p.insert("time.b2", Tensor::zeros(&[c.modulation_width()]), false);
        for b in 0..c.blocks {
            for proj in ATTN_PROJ {
                p.insert(format!("blocks.{b}.attn.{proj}.w"), xavier(rng, d, d), false);
            }
            p.insert(format!("blocks.{b}.ffn.up.w"), xavier(rng, h, d), false);
            p.insert(format!("blocks.{b}.ffn.up.b"), Tensor::zeros(&[h]), false);
            p.insert(format!("blocks.{b}.ffn.down.w"), xavier(rng, d, h), false);
            p.insert(format!("blocks.{b}.ffn.down.b"), Tensor::zeros(&[d]), false);
        }
        p.insert("final.w", Tensor::zeros(&[pd, d]), false);
        p.insert("final.b", Tensor::zeros(&[pd]), false);
        self.add_adapters(&mut p, rng);
        p
    }

    /// Adds any adapter tensors the config asks for and the store lacks.
    /// Up-projections start at zero, so the adapted model equals the base.
    pub fn add_adapters(&self, p: &mut ParamStore<f32>, rng: &mut impl Rng) {
        let c = &self.config;
        let a = &c.adapters;
        let (d, h) = (c.dim, c.ffn_hidden);
        for b in 0..c.blocks {
            if a.attention_lora {
                for proj in ATTN_PROJ {
                    let name = format!("blocks.{b}.attn.{proj}.lora_a");
                    if !p.contains(&name) {
                        p.insert(name, kaiming(rng, a.lora_rank, d), false);
                        p.insert(format!("blocks.{b}.attn.{proj}.lora_b"), Tensor::zeros(&[d, a.lora_rank]), false);
                    }
                }
            }
            if a.ffn_moe {
                let name = format!("blocks.{b}.ffn.down.moe_router");
                if !p.contains(&name) {
                    p.insert(name, kaiming(rng, a.experts, h), false);
                    let ea = normal(rng, &[a.experts, a.moe_rank, h], 1.0 / (h as f64).sqrt());
                    p.insert(format!("blocks.{b}.ffn.down.moe_a"), ea, false);
                    p.insert(format!("blocks.{b}.ffn.down.moe_b"), Tensor::zeros(&[a.experts, d, a.moe_rank]), false);
                }
            }
        }
    }

    /// Batched forward pass over `[B * 4L]` tokens.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamStore<T>, batch: &[ForwardItem<'_>]) -> Result<ForwardOutput> {
        let c = &self.config;
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let l = c.tokens_per_image();
        let pd = c.patch_dim();
        let side = c.image_size / c.patch;
        let seq = 4 * l;
        for item in batch {
            let (rows, cols, patch) = item.cond.geometry();
            if (rows, cols, patch) != (side, side, c.patch) || item.noisy.len() != l * pd {
                return Err(Error::shape("predict_velocity", &[rows, cols, patch, item.noisy.len()], &[side, side, c.patch, l * pd]));
            }
            if !(0.0..=1.0).contains(&item.t) {
                return Err(Error::Contract(format!("timestep {} outside [0, 1]", item.t)));
            }
        }
        let bsz = batch.len();

        let mut input = Vec::with_capacity(bsz * seq * pd);
        for item in batch {
            input.extend(item.cond.tokens().iter().map(|&v| T::from_f32(v).unwrap()));
            input.extend(item.noisy.iter().map(|&v| T::from_f32(v).unwrap()));
        }
        let x0 = g.constant(Tensor::new(vec![bsz * seq, pd], input)?);
        let w = params.var(g, "embed.w")?;
        let b = params.var(g, "embed.b")?;
        let h = g.matmul_nt(x0, w)?;
        let mut h = g.add_row(h, b)?;

        let temb = timestep_embedding::<T>(batch.iter().map(|i| i.t), c.dim);
        let temb = g.constant(temb);
        let modulation = self.modulation(g, params, temb)?;

        let positions = sequence_positions(side, side);
        let table: Arc<RotationTable<T>> = self.rope.rotation_table(&positions);

        let mut aux_terms = Vec::new();
        let mut routing = Vec::new();
        let mut attention = Vec::new();
        for blk in 0..c.blocks {
            let chunk = |g: &mut Graph<T>, j: usize| -> Result<Var> {
                let v = g.slice_cols(modulation, (6 * blk + j) * c.dim, c.dim)?;
                Ok(g.repeat_rows(v, seq))
            };
            let m: Vec<Var> = (0..6).map(|j| chunk(g, j)).collect::<Result<_>>()?;
            let out = self.block(g, params, blk, h, &m, bsz, &table)?;
            h = out.x;
            attention.push(out.attention);
            if let Some((aux, stats)) = out.moe {
                aux_terms.push(aux);
                routing.push(stats);
            }
        }

        let target_rows: Vec<usize> = (0..bsz).flat_map(|b| b * seq + 3 * l..(b + 1) * seq).collect();
        let h = g.select_rows(h, target_rows)?;
        let shift = g.slice_cols(modulation, 6 * c.blocks * c.dim, c.dim)?;
        let shift = g.repeat_rows(shift, l);
        let scale = g.slice_cols(modulation, (6 * c.blocks + 1) * c.dim, c.dim)?;
        let scale = g.repeat_rows(scale, l);
        let h = modulate(g, h, shift, scale)?;
        let w = params.var(g, "final.w")?;
        let b = params.var(g, "final.b")?;
        let v = g.matmul_nt(h, w)?;
        let velocity = g.add_row(v, b)?;

        let aux = match aux_terms.len() {
            0 => None,
            n => {
                let mut acc = aux_terms[0];
                for &t in &aux_terms[1..] {
                    acc = g.add(acc, t)?;
                }
                Some(g.scale(acc, 1.0 / n as f64))
            }
        };
        Ok(ForwardOutput {
            velocity,
            aux,
            routing,
            attention,
        })
    }

    fn modulation<T: Real>(&self, g: &mut Graph<T>, params: &ParamStore<T>, temb: Var) -> Result<Var> {
        let w1 = params.var(g, "time.w1")?;
        let b1 = params.var(g, "time.b1")?;
        let w2 = params.var(g, "time.w2")?;
        let b2 = params.var(g, "time.b2")?;
        let h = g.matmul_nt(temb, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.silu(h);
        let m = g.matmul_nt(h, w2)?;
        g.add_row(m, b2)
    }

    #[allow(clippy::too_many_arguments)]
    fn block<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        blk: usize,
        x: Var,
        m: &[Var],
        bsz: usize,
        table: &Arc<RotationTable<T>>,
    ) -> Result<BlockOutput> {
        let c = &self.config;
        let a = &c.adapters;
        let p = |s: &str| format!("blocks.{blk}.{s}");

        // attention sublayer
        let n = g.rmsnorm(x, None)?;
        let n = modulate(g, n, m[0], m[1])?;
        let proj = |g: &mut Graph<T>, name: &str, input: Var| -> Result<Var> {
            let w = params.var(g, &p(&format!("attn.{name}.w")))?;
            let lora = if a.attention_lora {
                let la = params.var(g, &p(&format!("attn.{name}.lora_a")))?;
                let lb = params.var(g, &p(&format!("attn.{name}.lora_b")))?;
                Some((la, lb, a.lora_scale()))
            } else {
                None
            };
            lora_project(g, input, w, lora)
        };
        let q = proj(g, "q", n)?;
        let k = proj(g, "k", n)?;
        let v = proj(g, "v", n)?;
        let q = g.rotate_pairs(q, table.clone())?;
        let k = g.rotate_pairs(k, table.clone())?;
        let attn = g.attention(q, k, v, bsz, c.heads)?;
        let o = proj(g, "o", attn)?;
        let o = g.mul(o, m[2])?;
        let x = g.add(x, o)?;

        // feed-forward sublayer
        let n = g.rmsnorm(x, None)?;
        let n = modulate(g, n, m[3], m[4])?;
        let up_w = params.var(g, &p("ffn.up.w"))?;
        let up_b = params.var(g, &p("ffn.up.b"))?;
        let hdn = g.matmul_nt(n, up_w)?;
        let hdn = g.add_row(hdn, up_b)?;
        let hdn = g.gelu(hdn);
        let down_w = params.var(g, &p("ffn.down.w"))?;
        let down_b = params.var(g, &p("ffn.down.b"))?;
        let (f, moe) = if a.ffn_moe {
            let vars = MoeVars {
                base: down_w,
                router: params.var(g, &p("ffn.down.moe_router"))?,
                experts_a: params.var(g, &p("ffn.down.moe_a"))?,
                experts_b: params.var(g, &p("ffn.down.moe_b"))?,
            };
            let out = moe_project(g, hdn, vars, a.top_k, a.moe_scale())?;
            (out.output, Some((out.aux, out.stats)))
        } else {
            (g.matmul_nt(hdn, down_w)?, None)
        };
        let f = g.add_row(f, down_b)?;
        let f = g.mul(f, m[5])?;
        let x = g.add(x, f)?;
        Ok(BlockOutput { x, attention: attn, moe })
    }

    /// Velocity prediction for a single example.
    pub fn predict_velocity(&self, params: &ParamStore<f32>, z_noisy: &TokenGrid, t: f64, cond: &ConditionSequence) -> Result<Vec<f32>> {
        let (rows, cols, patch) = cond.geometry();
        if (z_noisy.rows, z_noisy.cols, z_noisy.patch) != (rows, cols, patch) {
            return Err(Error::shape("predict_velocity", &[z_noisy.rows, z_noisy.cols, z_noisy.patch], &[rows, cols, patch]));
        }
        let item = ForwardItem {
            cond,
            noisy: &z_noisy.tokens,
            t,
        };
        Ok(self.predict_batch(params, &[item])?.pop().expect("one item"))
    }

    /// Velocity predictions for several examples in one pass.
    pub fn predict_batch(&self, params: &ParamStore<f32>, batch: &[ForwardItem<'_>]) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, params, batch)?;
        let per = self.config.tokens_per_image() * self.config.patch_dim();
        Ok(g.value(out.velocity).data().chunks_exact(per).map(<[f32]>::to_vec).collect())
    }
}

struct BlockOutput {
    x: Var,
    attention: Var,
    moe: Option<(Var, RoutingStats)>,
}

/// `x * (1 + scale) + shift`.
pub(crate) fn modulate<T: Real>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s = g.add_scalar(scale, 1.0);
    let y = g.mul(x, s)?;
    g.add(y, shift)
}

/// Sinusoidal features of `1000 t`, `[cos | sin]`, one row per timestep.
pub fn timestep_embedding<T: Real>(ts: impl Iterator<Item = f64>, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::new();
    let mut rows = 0;
    for t in ts {
        rows += 1;
        let args: Vec<f64> = (0..half)
            .map(|i| 1000.0 * t * (-(10_000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        data.extend(args.iter().map(|a| T::from_f64_lossy(a.cos())));
        data.extend(args.iter().map(|a| T::from_f64_lossy(a.sin())));
    }
    Tensor::new(vec![rows, dim], data).expect("consistent shape")
}

/// Attention over one sequence: rotate `q`/`k` by their positions, then mix
/// `v`. Inputs are `[n, heads * head_dim]`.
pub fn attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    positions: &[PositionTriple],
    rope: &RopeTable,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let table = rope.rotation_table::<T>(positions);
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let q = g.rotate_pairs(q, table.clone())?;
    let k = g.rotate_pairs(k, table)?;
    let out = g.attention(q, k, v, 1, heads)?;
    Ok(g.value(out).clone())
}

fn xavier(rng: &mut impl Rng, fan_out: usize, fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    Tensor::from_fn(&[fan_out, fan_in], |_| dist.sample(rng) as f32)
}

fn kaiming(rng: &mut impl Rng, fan_out: usize, fan_in: usize) -> Tensor<f32> {
    normal(rng, &[fan_out, fan_in], 1.0 / (fan_in as f64).sqrt())
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

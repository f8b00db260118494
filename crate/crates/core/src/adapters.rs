//! Low-rank adapters on frozen projections.
//!
//! Attention projections get a plain LoRA `h = W x + (alpha / r) B A x`. The
//! FFN output projection gets a mixture of `N` LoRA experts behind a softmax
//! router with top-k selection:
//!
//! ```text
//! g = softmax(W_g x)        S = top_k(g)
//! h = W x + sum_{i in S} g_i (alpha / r) B_i A_i x
//! ```
//!
//! Selected gates are used as-is (no renormalization over `S`). The auxiliary
//! balance loss is `N * sum_i f_i * mean_prob_i` with `f_i = count_i / (T k)`,
//! which is exactly 1 under perfectly balanced routing for any `k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, dot, Graph, Real, Tensor, Var};
use crate::params::ParamStore;

/// A frozen projection with a rank-`r` update.
#[derive(Clone, Debug)]
pub struct LoraLayer<T> {
    /// `[d_out, d_in]`, frozen.
    pub base: Tensor<T>,
    /// `[r, d_in]`.
    pub a: Tensor<T>,
    /// `[d_out, r]`, zero at initialization.
    pub b: Tensor<T>,
    pub alpha: f64,
}

impl<T: Real> LoraLayer<T> {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `W x + (alpha / r) B (A x)` for each row of `x`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let base = g.constant(self.base.clone());
        let a = g.constant(self.a.clone());
        let b = g.constant(self.b.clone());
        let out = lora_project(&mut g, xv, base, Some((a, b, self.scale())))?;
        Ok(g.value(out).clone())
    }
}

/// Dense projection plus an optional low-rank update, on the graph.
pub(crate) fn lora_project<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    base: Var,
    lora: Option<(Var, Var, f64)>,
) -> Result<Var> {
    let h = g.matmul_nt(x, base)?;
    match lora {
        None => Ok(h),
        Some((a, b, scale)) => {
            let u = g.matmul_nt(x, a)?;
            let d = g.matmul_nt(u, b)?;
            let d = g.scale(d, scale);
            g.add(h, d)
        }
    }
}

/// A frozen projection with a routed mixture of LoRA experts.
#[derive(Clone, Debug)]
pub struct MoeLoraLayer<T> {
    /// `[d_out, d_in]`, frozen.
    pub base: Tensor<T>,
    /// `[N, d_in]`.
    pub router: Tensor<T>,
    /// `[N, r, d_in]`.
    pub experts_a: Tensor<T>,
    /// `[N, d_out, r]`, zero at initialization.
    pub experts_b: Tensor<T>,
    pub top_k: usize,
    pub alpha: f64,
}

impl<T: Real> MoeLoraLayer<T> {
    pub fn experts(&self) -> usize {
        self.router.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.experts_a.shape()[1]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Gates and selected experts for one input vector.
    pub fn route(&self, x: &[T]) -> Result<(Vec<T>, Vec<usize>)> {
        let n = self.experts();
        if self.top_k == 0 || self.top_k > n {
            return Err(Error::Config(format!("top-k {} not in 1..={n}", self.top_k)));
        }
        let d_in = self.router.shape()[1];
        if x.len() != d_in {
            return Err(Error::shape("route", &[x.len()], self.router.shape()));
        }
        let logits: Vec<T> = self.router.data().chunks_exact(d_in).map(|w| dot(w, x)).collect();
        let gates = numerics::softmax(&Tensor::new(vec![n], logits)?, 0)?.into_data();
        let selected = top_k(&gates, self.top_k);
        Ok((gates, selected))
    }

    /// Adapted projection of each row of `x`, with routing statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, RoutingStats)> {
        if self.top_k == 0 || self.top_k > self.experts() {
            return Err(Error::Config(format!("top-k {} not in 1..={}", self.top_k, self.experts())));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = MoeVars {
            base: g.constant(self.base.clone()),
            router: g.constant(self.router.clone()),
            experts_a: g.constant(self.experts_a.clone()),
            experts_b: g.constant(self.experts_b.clone()),
        };
        let out = moe_project(&mut g, xv, vars, self.top_k, self.scale())?;
        Ok((g.value(out.output).clone(), out.stats))
    }
}

/// Indices of the `k` largest values, ties broken by lower index.
pub fn top_k<T: Real>(values: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct MoeVars {
    pub base: Var,
    pub router: Var,
    pub experts_a: Var,
    pub experts_b: Var,
}

pub(crate) struct MoeOutput {
    pub output: Var,
    /// Differentiable balance loss (through the mean probabilities only).
    pub aux: Var,
    pub stats: RoutingStats,
}

pub(crate) fn moe_project<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    vars: MoeVars,
    k: usize,
    scale: f64,
) -> Result<MoeOutput> {
    let base = g.matmul_nt(x, vars.base)?;
    let logits = g.matmul_nt(x, vars.router)?;
    let gates = g.softmax(logits);
    let experts = g.shape(vars.router)[0];
    if k == 0 || k > experts {
        return Err(Error::Config(format!("top-k {k} not in 1..={experts}")));
    }
    let mut stats = RoutingStats::new(experts, k);
    let mut selection = Vec::with_capacity(g.value(gates).rows() * k);
    for row in g.value(gates).data().chunks_exact(experts) {
        let s = top_k(row, k);
        stats.record(row, &s);
        selection.extend(s);
    }
    let mix = g.moe_mix(x, vars.experts_a, vars.experts_b, gates, selection, k, scale)?;
    let output = g.add(base, mix)?;
    let mean_probs = g.col_mean(gates);
    let weights = stats
        .fractions()
        .into_iter()
        .map(|f| T::from_f64_lossy(f * experts as f64))
        .collect();
    let aux = g.dot_const(mean_probs, weights)?;
    Ok(MoeOutput { output, aux, stats })
}

/// Router bookkeeping over a batch of tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub counts: Vec<u64>,
    /// Sum of router probabilities per expert.
    pub prob_sums: Vec<f64>,
    pub tokens: u64,
    pub top_k: usize,
}

impl RoutingStats {
    pub fn new(experts: usize, top_k: usize) -> Self {
        Self {
            counts: vec![0; experts],
            prob_sums: vec![0.0; experts],
            tokens: 0,
            top_k,
        }
    }

    pub fn experts(&self) -> usize {
        self.counts.len()
    }

    pub fn record<T: Real>(&mut self, gates: &[T], selected: &[usize]) {
        for &e in selected {
            self.counts[e] += 1;
        }
        for (s, g) in self.prob_sums.iter_mut().zip(gates) {
            *s += g.as_f64();
        }
        self.tokens += 1;
    }

    /// Merges another batch; order of merging does not matter for counts and
    /// is fixed by the caller for the float sums.
    pub fn merge(&mut self, other: &RoutingStats) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.prob_sums.iter_mut().zip(&other.prob_sums) {
            *a += b;
        }
        self.tokens += other.tokens;
    }

    pub fn mean_probs(&self) -> Vec<f64> {
        self.prob_sums
            .iter()
            .map(|s| s / self.tokens.max(1) as f64)
            .collect()
    }

    /// `count_i / (T k)`.
    pub fn fractions(&self) -> Vec<f64> {
        let denom = (self.tokens.max(1) * self.top_k as u64) as f64;
        self.counts.iter().map(|&c| c as f64 / denom).collect()
    }

    pub fn report(&self) -> RoutingReport {
        RoutingReport {
            counts: self.counts.clone(),
            mean_probs: self.mean_probs(),
            aux_loss: load_balance_loss(self).ok(),
        }
    }
}

/// JSON view of routing statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub counts: Vec<u64>,
    pub mean_probs: Vec<f64>,
    pub aux_loss: Option<f64>,
}

/// `N * sum_i f_i * mean_prob_i`.
pub fn load_balance_loss(stats: &RoutingStats) -> Result<f64> {
    if stats.tokens == 0 {
        return Err(Error::Contract("load balance loss over zero tokens".into()));
    }
    let n = stats.experts() as f64;
    Ok(n * stats
        .fractions()
        .iter()
        .zip(stats.mean_probs())
        .map(|(f, p)| f * p)
        .sum::<f64>())
}

/// Result of comparing frozen tensors across two parameter snapshots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FreezeReport {
    pub checked: usize,
    /// Frozen tensors that changed or disappeared.
    pub violations: Vec<String>,
    /// Trainable tensors that changed (informational).
    pub changed_trainable: Vec<String>,
}

impl FreezeReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.is_clean() {
            Ok(self)
        } else {
            Err(Error::FrozenViolation(self.violations))
        }
    }
}

/// Every tensor tagged frozen in `before` must be bit-identical in `after`.
pub fn freeze_check(before: &ParamStore<f32>, after: &ParamStore<f32>) -> FreezeReport {
    let mut report = FreezeReport::default();
    for (name, p) in before.iter() {
        let same = after.get(name).is_some_and(|q| {
            q.tensor.shape() == p.tensor.shape()
                && q.tensor
                    .data()
                    .iter()
                    .zip(p.tensor.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        });
        if p.frozen {
            report.checked += 1;
            if !same {
                report.violations.push(name.clone());
            }
        } else if !same {
            report.changed_trainable.push(name.clone());
        }
    }
    report
}

//! Optimizer, training loop and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::codec::encode;
use crate::conditioning::ConditionSequence;
use crate::diffusion::{batch_loss, condition_from_images, FlowExample, DEFAULT_AUX_WEIGHT};
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Tensor};
use crate::params::ParamStore;
use crate::taskgen::Quadruplet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub aux_weight: f64,
    /// Randomly swap exemplar and query pairs.
    pub swap_pairs: bool,
    pub phase: Phase,
    /// Tasks and their sampling weights; empty means every task in the data,
    /// equally weighted.
    pub tasks: Vec<TaskWeight>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Every tensor trains.
    #[default]
    Full,
    /// Base tensors frozen; only adapters train.
    AdapterOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskWeight {
    pub task: String,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            aux_weight: DEFAULT_AUX_WEIGHT,
            swap_pairs: true,
            phase: Phase::Full,
            tasks: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.lr)));
        }
        if let Some(t) = self.tasks.iter().find(|t| !(t.weight >= 0.0 && t.weight.is_finite())) {
            return Err(Error::Config(format!("task `{}` has invalid weight {}", t.task, t.weight)));
        }
        if !self.tasks.is_empty() && self.tasks.iter().all(|t| t.weight == 0.0) {
            return Err(Error::Config("all task weights are zero".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.weight_decay < 0.0 || self.aux_weight < 0.0 {
            return Err(Error::Config("weight decay and aux weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. Frozen tensors get neither moments nor
/// updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>, cfg: &TrainConfig, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        for (name, grad) in grads.iter() {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if param.frozen {
                return Err(Error::FrozenViolation(vec![name.clone()]));
            }
            let shape = param.tensor.shape().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            if m.shape() != shape.as_slice() || grad.shape() != shape.as_slice() {
                return Err(Error::shape("adam", m.shape(), &shape));
            }
            let decay = (lr * cfg.weight_decay) as f32;
            for (((p, g), m), v) in param
                .tensor
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = f64::from(*m) / bc1;
                let vhat = f64::from(*v) / bc2;
                *p -= decay * *p + (lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
            }
        }
        Ok(())
    }
}

/// A quadruplet with its context and target already tokenized.
#[derive(Clone, Debug)]
pub struct EncodedExample {
    pub cond: ConditionSequence,
    /// Context with exemplar and query pairs swapped.
    pub swapped: ConditionSequence,
    pub target: Vec<f32>,
    pub swapped_target: Vec<f32>,
}

/// Training split grouped by task name.
pub type TaskData = BTreeMap<String, Vec<EncodedExample>>;

pub fn encode_dataset(quads: &[Quadruplet], patch: usize) -> Result<TaskData> {
    let mut data = TaskData::new();
    for q in quads {
        data.entry(q.task.name()).or_default().push(EncodedExample {
            cond: condition_from_images(&q.x_s, &q.x_t, &q.x_q, patch)?,
            swapped: condition_from_images(&q.x_q, &q.y_q, &q.x_s, patch)?,
            target: encode(&q.y_q, patch)?.tokens,
            swapped_target: encode(&q.x_t, patch)?.tokens,
        });
    }
    Ok(data)
}

/// For each of `slots` independently: a task drawn by weight, then an index
/// drawn uniformly from that task's examples.
pub fn sample_slots(weights: &[(String, f64)], data: &TaskData, rng: &mut impl Rng, slots: usize) -> Result<Vec<(String, usize)>> {
    for (task, w) in weights {
        if *w > 0.0 && data.get(task).is_none_or(Vec::is_empty) {
            return Err(Error::Config(format!("no training data for task `{task}`")));
        }
    }
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) {
        return Err(Error::Config("no task to sample".into()));
    }
    (0..slots)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let (task, _) = weights
                .iter()
                .filter(|(_, w)| *w > 0.0)
                .find(|(_, w)| {
                    let hit = u < *w;
                    u -= w;
                    hit
                })
                .or_else(|| weights.iter().rev().find(|(_, w)| *w > 0.0))
                .expect("positive total weight");
            let n = data[task].len();
            Ok((task.clone(), rng.random_range(0..n)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub mse: f64,
    pub aux: Option<f64>,
    pub lr: f64,
}

pub struct Trainer {
    pub backbone: Backbone,
    pub params: ParamStore<f32>,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub config: TrainConfig,
}

impl Trainer {
    /// Fresh model; parameters and the data stream both derive from `config.seed`.
    pub fn new(backbone: Backbone, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.phase != Phase::Full {
            return Err(Error::Config("adapter-only training needs an initial checkpoint".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = backbone.init_params(&mut rng);
        Ok(Self {
            backbone,
            params,
            adam: Adam::new(),
            rng,
            step: 0,
            config,
        })
    }

    /// Adapter phase: freezes every tensor of `base`, then adds the adapters
    /// the backbone config asks for as the only trainable tensors.
    pub fn adapter_phase(backbone: Backbone, mut base: ParamStore<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.phase != Phase::AdapterOnly {
            return Err(Error::Config("adapter training requires phase `adapter-only`".into()));
        }
        if !backbone.config().adapters.any() {
            return Err(Error::Config("adapter-only training needs adapters enabled".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        base.freeze_all();
        backbone.add_adapters(&mut base, &mut rng);
        Ok(Self {
            backbone,
            params: base,
            adam: Adam::new(),
            rng,
            step: 0,
            config,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let echo = ckpt.echo()?;
        let backbone = Backbone::new(echo.backbone)?;
        Ok(Self {
            backbone,
            params: ckpt.params,
            adam: ckpt.adam,
            rng: ckpt.rng,
            step: ckpt.step,
            config,
        })
    }

    /// Effective `(task, weight)` list.
    pub fn task_weights(&self, data: &TaskData) -> Vec<(String, f64)> {
        if self.config.tasks.is_empty() {
            data.keys().map(|k| (k.clone(), 1.0)).collect()
        } else {
            self.config.tasks.iter().map(|t| (t.task.clone(), t.weight)).collect()
        }
    }

    pub fn sample_batch(&mut self, data: &TaskData) -> Result<Vec<FlowExample>> {
        let weights = self.task_weights(data);
        let slots = sample_slots(&weights, data, &mut self.rng, self.config.batch_size)?;
        slots
            .into_iter()
            .map(|(task, i)| {
                let ex = &data[&task][i];
                let swap = self.config.swap_pairs && self.rng.random_bool(0.5);
                let (cond, target) = if swap { (&ex.swapped, &ex.swapped_target) } else { (&ex.cond, &ex.target) };
                FlowExample::new(cond.clone(), target, &mut self.rng)
            })
            .collect()
    }

    /// One optimizer step. Aborts before touching parameters if the loss or
    /// any gradient is non-finite.
    pub fn train_step(&mut self, data: &TaskData) -> Result<StepStats> {
        let batch = self.sample_batch(data)?;
        self.step_on(&batch)
    }

    pub fn step_on(&mut self, batch: &[FlowExample]) -> Result<StepStats> {
        let mut g = Graph::new();
        let terms = batch_loss(&self.backbone, &mut g, &self.params, batch, self.config.aux_weight)?;
        let loss = f64::from(g.value(terms.total).item());
        let mse = f64::from(g.value(terms.mse).item());
        let aux = terms.aux.map(|a| f64::from(g.value(a).item()));
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("loss {loss}"),
            });
        }
        let grads = g.backward(terms.total)?;
        if let Some(bad) = grads.iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n.clone()) {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("gradient of `{bad}`"),
            });
        }
        let lr = self.config.lr;
        self.adam.step(&mut self.params, &grads, &self.config, lr)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            mse,
            aux,
            lr,
        })
    }

    /// Trains until `config.steps`, calling `on_step` after every step.
    pub fn run(&mut self, data: &TaskData, mut on_step: impl FnMut(&Self, &StepStats) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let stats = self.train_step(data)?;
            on_step(self, &stats)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let echo = ConfigEcho {
            backbone: self.backbone.config().clone(),
            train: Some(self.config.clone()),
        };
        Ok(Checkpoint {
            config: serde_json::to_string(&echo)?,
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            step: self.step,
        })
    }
}

/// Configuration stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigEcho {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

/// Parameters, optimizer moments, RNG state and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON-serialized [`ConfigEcho`].
    pub config: String,
    pub params: ParamStore<f32>,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

const MAGIC: &[u8; 4] = b"VICL";
const VERSION: u32 = 1;
const MAX_RANK: usize = 8;
const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

impl Checkpoint {
    pub fn echo(&self) -> Result<ConfigEcho> {
        serde_json::from_str(&self.config).map_err(|e| Error::format("checkpoint", format!("config echo: {e}")))
    }

    pub fn new(backbone: &BackboneConfig, params: ParamStore<f32>) -> Result<Self> {
        let echo = ConfigEcho {
            backbone: backbone.clone(),
            train: None,
        };
        Ok(Self {
            config: serde_json::to_string(&echo)?,
            params,
            adam: Adam::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            step: 0,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, bool, &Tensor<f32>)> = Vec::new();
        tensors.extend(self.params.iter().map(|(n, p)| (n.clone(), p.frozen, &p.tensor)));
        tensors.extend(self.adam.m.iter().map(|(n, t)| (format!("{MOMENT_M}{n}"), false, t)));
        tensors.extend(self.adam.v.iter().map(|(n, t)| (format!("{MOMENT_V}{n}"), false, t)));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, frozen, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::from(frozen));
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut adam = Adam::default();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
                .to_string();
            let frozen = match r.u8()? {
                0 => false,
                1 => true,
                f => return Err(Error::format("checkpoint", format!("bad frozen flag {f} for `{name}`"))),
            };
            let rank = r.u8()? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::format("checkpoint", format!("rank {rank} of `{name}`")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| Error::format("checkpoint", "dimension overflow"))?;
                numel = numel
                    .checked_mul(d)
                    .filter(|&n| n.saturating_mul(4) <= r.remaining())
                    .ok_or_else(|| Error::format("checkpoint", format!("tensor `{name}` larger than the file")))?;
                shape.push(d);
            }
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::format("checkpoint", format!("`{name}`: {e}")))?;
            let dup = if let Some(base) = name.strip_prefix(MOMENT_M) {
                adam.m.insert(base.to_string(), tensor).is_some()
            } else if let Some(base) = name.strip_prefix(MOMENT_V) {
                adam.v.insert(base.to_string(), tensor).is_some()
            } else {
                let dup = params.contains(&name);
                params.insert(name.clone(), tensor, frozen);
                dup
            };
            if dup {
                return Err(Error::format("checkpoint", format!("duplicate tensor `{name}`")));
            }
        }
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let step = r.u64()?;
        adam.t = r.u64()?;
        let len = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", "config echo is not UTF-8"))?
            .to_string();
        if r.remaining() != 0 {
            return Err(Error::format("checkpoint", format!("{} trailing bytes", r.remaining())));
        }
        for (name, m) in adam.m.iter().chain(adam.v.iter()) {
            match params.get(name) {
                Some(p) if p.tensor.shape() == m.shape() => {}
                _ => return Err(Error::format("checkpoint", format!("optimizer state for unknown `{name}`"))),
            }
        }
        Ok(Self {
            config,
            params,
            adam,
            rng,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format("checkpoint", "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

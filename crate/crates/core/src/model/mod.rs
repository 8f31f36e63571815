//! Pre-norm transformer encoder-decoder with gated bottleneck adapters for
//! the knowledge and visual modalities, and one decoder shared by all tasks.

mod example;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use example::{prepare_example, prepare_examples, Example};
pub use forward::{
    adapter_fuse, decode_step, encode, multitask_forward, AdapterTrace, DropoutStreams, Encoded,
    TaskLosses,
};

use crate::error::{Error, Result};
use crate::numerics::{NamedTensors, Tensor};
use crate::textproc::special;

pub const LN_EPS: f64 = 1e-5;

/// Parameter names shared by the forward pass and the init code.
pub mod names {
    pub const TOK_EMBED: &str = "embed.tok";
    pub const POS_EMBED: &str = "embed.pos";
    pub const ENC_FINAL_LN: &str = "enc.ln_f";
    pub const DEC_FINAL_LN: &str = "dec.ln_f";
    pub const KNOW_ADAPTER: &str = "adapter.know";
    pub const VIS_ADAPTER: &str = "adapter.vis";

    pub fn enc(layer: usize, part: &str) -> String {
        format!("enc.{layer}.{part}")
    }

    pub fn dec(layer: usize, part: &str) -> String {
        format!("dec.{layer}.{part}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Knowledge,
    Visual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    /// Adapter bottleneck width.
    pub d_adapter: usize,
    pub d_vis: usize,
    /// Knowledge vectors are pooled token embeddings, so this must equal
    /// `d_model`.
    pub d_know: usize,
    pub max_len: usize,
    /// Filled in from the vocabulary when left at 0 in a config file.
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub gate_bias_init: f64,
    /// Standard deviation of the normal init for weights and embeddings.
    pub init_std: f64,
    /// Adapters run after the last encoder layer in this order.
    pub adapter_order: [Modality; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 64,
            d_adapter: 8,
            d_vis: 24,
            d_know: 32,
            max_len: 64,
            vocab_size: 0,
            dropout_rate: 0.0,
            gate_bias_init: 2.0,
            init_std: 0.02,
            adapter_order: [Modality::Knowledge, Modality::Visual],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_ff", self.d_ff),
            ("d_adapter", self.d_adapter),
            ("d_vis", self.d_vis),
            ("d_know", self.d_know),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_adapter >= self.d_model {
            return Err(Error::config(format!(
                "d_adapter {} must be smaller than d_model {}",
                self.d_adapter, self.d_model
            )));
        }
        if self.d_know != self.d_model {
            return Err(Error::config(format!(
                "d_know {} must equal d_model {} (knowledge vectors are pooled token embeddings)",
                self.d_know, self.d_model
            )));
        }
        if self.vocab_size < special::COUNT {
            return Err(Error::config(format!(
                "vocab_size {} is smaller than the {} reserved tokens",
                self.vocab_size,
                special::COUNT
            )));
        }
        if self.max_len < 3 {
            return Err(Error::config("max_len must be at least 3"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !self.gate_bias_init.is_finite() || !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config(
                "gate_bias_init and init_std must be finite (init_std > 0)",
            ));
        }
        if self.adapter_order[0] == self.adapter_order[1] {
            return Err(Error::config("adapter_order must list each modality once"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn modality_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Knowledge => self.d_know,
            Modality::Visual => self.d_vis,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Zeros,
    Ones,
    GateBias,
}

fn attention_shapes(prefix: &str, d: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    for proj in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.{proj}.w"), vec![d, d], Init::Normal));
        out.push((format!("{prefix}.{proj}.b"), vec![d], Init::Zeros));
    }
}

fn ln_shapes(prefix: &str, d: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{prefix}.g"), vec![d], Init::Ones));
    out.push((format!("{prefix}.b"), vec![d], Init::Zeros));
}

fn ffn_shapes(prefix: &str, d: usize, f: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{prefix}.w1"), vec![d, f], Init::Normal));
    out.push((format!("{prefix}.b1"), vec![f], Init::Zeros));
    out.push((format!("{prefix}.w2"), vec![f, d], Init::Normal));
    out.push((format!("{prefix}.b2"), vec![d], Init::Zeros));
}

pub fn adapter_prefix(m: Modality) -> &'static str {
    match m {
        Modality::Knowledge => names::KNOW_ADAPTER,
        Modality::Visual => names::VIS_ADAPTER,
    }
}

/// Every parameter in init order.
fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut out = vec![
        (
            names::TOK_EMBED.to_string(),
            vec![cfg.vocab_size, d],
            Init::Normal,
        ),
        (
            names::POS_EMBED.to_string(),
            vec![cfg.max_len, d],
            Init::Normal,
        ),
    ];
    for l in 0..cfg.n_enc_layers {
        ln_shapes(&names::enc(l, "ln1"), d, &mut out);
        attention_shapes(&names::enc(l, "attn"), d, &mut out);
        ln_shapes(&names::enc(l, "ln2"), d, &mut out);
        ffn_shapes(&names::enc(l, "ffn"), d, cfg.d_ff, &mut out);
    }
    ln_shapes(names::ENC_FINAL_LN, d, &mut out);
    for m in [Modality::Knowledge, Modality::Visual] {
        let p = adapter_prefix(m);
        out.push((
            format!("{p}.wm"),
            vec![cfg.modality_dim(m), d],
            Init::Normal,
        ));
        out.push((format!("{p}.wg"), vec![2 * d, d], Init::Normal));
        out.push((format!("{p}.bg"), vec![d], Init::GateBias));
        ln_shapes(&format!("{p}.ln"), d, &mut out);
        out.push((format!("{p}.wd"), vec![d, cfg.d_adapter], Init::Normal));
        out.push((format!("{p}.wu"), vec![cfg.d_adapter, d], Init::Normal));
    }
    for l in 0..cfg.n_dec_layers {
        ln_shapes(&names::dec(l, "ln1"), d, &mut out);
        attention_shapes(&names::dec(l, "self"), d, &mut out);
        ln_shapes(&names::dec(l, "ln2"), d, &mut out);
        attention_shapes(&names::dec(l, "cross"), d, &mut out);
        ln_shapes(&names::dec(l, "ln3"), d, &mut out);
        ffn_shapes(&names::dec(l, "ffn"), d, cfg.d_ff, &mut out);
    }
    ln_shapes(names::DEC_FINAL_LN, d, &mut out);
    out
}

/// Named parameter tensors of one model. The output projection is the
/// transpose of `embed.tok`; there is no separate output matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: NamedTensors,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks names and shapes against `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = param_layout(cfg);
        if layout.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in layout {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic initialisation: weights and embeddings ~ N(0, init_std²),
/// biases 0, layer-norm gains 1, adapter gate biases `gate_bias_init`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::config(e.to_string()))?;
    let mut tensors = NamedTensors::new();
    for (name, shape, init) in param_layout(cfg) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::GateBias => vec![cfg.gate_bias_init; n],
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(ModelParams { tensors })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Model { cfg, params })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.params.tensors[names::TOK_EMBED]
    }
}

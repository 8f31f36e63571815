use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{adapter_prefix, names, Example, Modality, ModelConfig, LN_EPS};
use crate::error::{Error, Result};
use crate::knowledge::encode_knowledge;
use crate::numerics::{Bindings, Graph, Tensor, Var};
use crate::textproc::{special, TokenId};
use crate::Task;

/// Additive attention-mask value; exp underflows to exactly 0.
const MASKED: f64 = -1e9;

/// Independent dropout streams: one for the encoder, one per task decoder
/// pass, so that adding a task never shifts another task's draws.
#[derive(Debug, Clone)]
pub struct DropoutStreams {
    pub encoder: ChaCha8Rng,
    pub tasks: [ChaCha8Rng; 3],
}

impl DropoutStreams {
    pub fn new(encoder: ChaCha8Rng, tasks: [ChaCha8Rng; 3]) -> Self {
        DropoutStreams { encoder, tasks }
    }

    pub fn from_seeds(encoder: u64, tasks: [u64; 3]) -> Self {
        DropoutStreams {
            encoder: ChaCha8Rng::seed_from_u64(encoder),
            tasks: tasks.map(ChaCha8Rng::seed_from_u64),
        }
    }
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).numel();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

fn linear(g: &mut Graph, p: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{prefix}.w"))?)?;
    g.add_bias(y, p.get(&format!("{prefix}.b"))?)
}

fn layer_norm(g: &mut Graph, p: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.get(&format!("{prefix}.g"))?;
    let bias = p.get(&format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

fn ffn(g: &mut Graph, p: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let h = g.matmul(x, p.get(&format!("{prefix}.w1"))?)?;
    let h = g.add_bias(h, p.get(&format!("{prefix}.b1"))?)?;
    let h = g.relu(h)?;
    let y = g.matmul(h, p.get(&format!("{prefix}.w2"))?)?;
    g.add_bias(y, p.get(&format!("{prefix}.b2"))?)
}

/// Multi-head attention of `xq` over `xkv`. Keys with `key_valid[j] == false`
/// and, when `causal`, keys after the query position get zero weight.
#[allow(clippy::too_many_arguments)]
fn attention(
    g: &mut Graph,
    p: &Bindings,
    cfg: &ModelConfig,
    prefix: &str,
    xq: Var,
    xkv: Var,
    key_valid: &[bool],
    causal: bool,
) -> Result<Var> {
    let nq = g.value(xq).dims2()?.0;
    let nk = key_valid.len();
    let q = linear(g, p, &format!("{prefix}.q"), xq)?;
    let k = linear(g, p, &format!("{prefix}.k"), xkv)?;
    let v = linear(g, p, &format!("{prefix}.v"), xkv)?;
    let mut mask = vec![0.0; nq * nk];
    for i in 0..nq {
        for j in 0..nk {
            if !key_valid[j] || (causal && j > i) {
                mask[i * nk + j] = MASKED;
            }
        }
    }
    let mask = g.constant(Tensor::new(vec![nq, nk], mask)?);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale)?;
        let s = g.add(s, mask)?;
        let a = g.softmax(s, 1)?;
        heads.push(g.matmul(a, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    linear(g, p, &format!("{prefix}.o"), cat)
}

fn embed(g: &mut Graph, p: &Bindings, cfg: &ModelConfig, ids: &[TokenId]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::config("empty token sequence"));
    }
    if ids.len() > cfg.max_len {
        return Err(Error::config(format!(
            "sequence of {} tokens exceeds max_len {}",
            ids.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Vocab(format!(
            "token id {bad} out of range for vocab_size {}",
            cfg.vocab_size
        )));
    }
    let ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = g.gather(p.get(names::TOK_EMBED)?, &ids)?;
    let pos = g.gather(p.get(names::POS_EMBED)?, &positions)?;
    g.add(tok, pos)
}

/// Intermediate values of one adapter, kept for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct AdapterTrace {
    pub gate: Var,
    pub fused: Var,
    pub out: Var,
}

/// `m' = m·W_m`, `g = σ([h; m']·W_g + b_g)`, `fused = g⊙h + (1−g)⊙m'`,
/// `out = h + ReLU(LN(fused)·W_d)·W_u`. `m` is `[1×d_mod]`, broadcast over
/// the rows of `h`.
pub fn adapter_fuse(
    g: &mut Graph,
    p: &Bindings,
    prefix: &str,
    h: Var,
    m: Var,
) -> Result<AdapterTrace> {
    let (n, d) = g.value(h).dims2()?;
    let wm = p.get(&format!("{prefix}.wm"))?;
    let (rows, cols) = g.value(m).dims2()?;
    let (d_mod, d_out) = g.value(wm).dims2()?;
    if rows != 1 || cols != d_mod || d_out != d {
        return Err(Error::config(format!(
            "{prefix}: modality vector [{rows}×{cols}] does not fit projection [{d_mod}×{d_out}] into d_model {d}"
        )));
    }
    let mp = g.matmul(m, wm)?;
    let mp = g.repeat_rows(mp, n)?;
    let cat = g.concat_cols(&[h, mp])?;
    let z = g.matmul(cat, p.get(&format!("{prefix}.wg"))?)?;
    let z = g.add_bias(z, p.get(&format!("{prefix}.bg"))?)?;
    let gate = g.sigmoid(z)?;
    // g⊙h + (1−g)⊙m' written as m' + g⊙(h − m')
    let diff = g.sub(h, mp)?;
    let gd = g.mul(gate, diff)?;
    let fused = g.add(mp, gd)?;
    let normed = layer_norm(g, p, &format!("{prefix}.ln"), fused)?;
    let down = g.matmul(normed, p.get(&format!("{prefix}.wd"))?)?;
    let down = g.relu(down)?;
    let up = g.matmul(down, p.get(&format!("{prefix}.wu"))?)?;
    let out = g.add(h, up)?;
    Ok(AdapterTrace { gate, fused, out })
}

/// Encoder states plus what the decoder and tests need from the pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Final states after both adapters.
    pub h: Var,
    /// Text-only states (final encoder layer norm, before the adapters).
    pub text_h: Var,
    /// `false` at PAD positions.
    pub valid: Vec<bool>,
    pub adapters: Vec<(Modality, AdapterTrace)>,
}

/// Pre-norm encoder, then the knowledge and visual adapters in
/// `cfg.adapter_order`. `rng = Some(..)` enables dropout (train mode).
#[allow(clippy::too_many_arguments)]
pub fn encode(
    g: &mut Graph,
    p: &Bindings,
    cfg: &ModelConfig,
    tokens: &[TokenId],
    know: Var,
    vis: Var,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Encoded> {
    if tokens.iter().any(|&t| special::is_task(t)) {
        return Err(Error::contract(
            "task tokens are not allowed in encoder input",
        ));
    }
    let mut rng = rng;
    let valid: Vec<bool> = tokens.iter().map(|&t| t != special::PAD).collect();
    let mut x = embed(g, p, cfg, tokens)?;
    x = dropout(g, x, cfg.dropout_rate, &mut rng)?;
    for l in 0..cfg.n_enc_layers {
        let h = layer_norm(g, p, &names::enc(l, "ln1"), x)?;
        let a = attention(g, p, cfg, &names::enc(l, "attn"), h, h, &valid, false)?;
        let a = dropout(g, a, cfg.dropout_rate, &mut rng)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, p, &names::enc(l, "ln2"), x)?;
        let f = ffn(g, p, &names::enc(l, "ffn"), h)?;
        let f = dropout(g, f, cfg.dropout_rate, &mut rng)?;
        x = g.add(x, f)?;
    }
    let text_h = layer_norm(g, p, names::ENC_FINAL_LN, x)?;
    let mut h = text_h;
    let mut adapters = Vec::with_capacity(2);
    for m in cfg.adapter_order {
        let v = match m {
            Modality::Knowledge => know,
            Modality::Visual => vis,
        };
        let tr = adapter_fuse(g, p, adapter_prefix(m), h, v)?;
        h = tr.out;
        adapters.push((m, tr));
    }
    Ok(Encoded {
        h,
        text_h,
        valid,
        adapters,
    })
}

fn check_prefix(prefix: &[TokenId]) -> Result<()> {
    if prefix.len() < 2 || prefix[0] != special::BOS || !special::is_task(prefix[1]) {
        return Err(Error::contract(
            "decoder prefix must start with BOS and a task token",
        ));
    }
    if prefix[2..].iter().any(|&t| special::is_task(t)) {
        return Err(Error::contract(
            "decoder prefix contains more than one task token",
        ));
    }
    Ok(())
}

/// Logits `[prefix_len × vocab_size]` for a `[BOS, TASK, ...]` prefix.
pub fn decode_step(
    g: &mut Graph,
    p: &Bindings,
    cfg: &ModelConfig,
    prefix: &[TokenId],
    enc: &Encoded,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    check_prefix(prefix)?;
    let mut rng = rng;
    let self_valid = vec![true; prefix.len()];
    let mut x = embed(g, p, cfg, prefix)?;
    x = dropout(g, x, cfg.dropout_rate, &mut rng)?;
    for l in 0..cfg.n_dec_layers {
        let h = layer_norm(g, p, &names::dec(l, "ln1"), x)?;
        let a = attention(g, p, cfg, &names::dec(l, "self"), h, h, &self_valid, true)?;
        let a = dropout(g, a, cfg.dropout_rate, &mut rng)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, p, &names::dec(l, "ln2"), x)?;
        let c = attention(
            g,
            p,
            cfg,
            &names::dec(l, "cross"),
            h,
            enc.h,
            &enc.valid,
            false,
        )?;
        let c = dropout(g, c, cfg.dropout_rate, &mut rng)?;
        x = g.add(x, c)?;
        let h = layer_norm(g, p, &names::dec(l, "ln3"), x)?;
        let f = ffn(g, p, &names::dec(l, "ffn"), h)?;
        let f = dropout(g, f, cfg.dropout_rate, &mut rng)?;
        x = g.add(x, f)?;
    }
    let x = layer_norm(g, p, names::DEC_FINAL_LN, x)?;
    g.matmul_nt(x, p.get(names::TOK_EMBED)?)
}

/// Per-task mean cross-entropy over a batch, in the order of `tasks`.
#[derive(Debug, Clone)]
pub struct TaskLosses {
    pub losses: Vec<(Task, Var)>,
}

impl TaskLosses {
    pub fn get(&self, task: Task) -> Option<Var> {
        self.losses
            .iter()
            .find(|(t, _)| *t == task)
            .map(|&(_, v)| v)
    }
}

/// Teacher-forced losses. Each dialogue is encoded once and the encoder
/// states are shared by every task's decoder pass.
pub fn multitask_forward(
    g: &mut Graph,
    p: &Bindings,
    cfg: &ModelConfig,
    batch: &[&Example],
    tasks: &[Task],
    mut streams: Option<&mut DropoutStreams>,
) -> Result<TaskLosses> {
    if batch.is_empty() || tasks.is_empty() {
        return Err(Error::contract(
            "multitask_forward needs at least one record and one task",
        ));
    }
    let mut sums: Vec<Option<Var>> = vec![None; tasks.len()];
    for ex in batch {
        for &t in tasks {
            ex.target(t)?;
        }
        let know = encode_knowledge(g, p, &ex.knowledge, cfg.d_know)?;
        let vis = g.constant(Tensor::new(vec![1, ex.visual.len()], ex.visual.clone())?);
        let enc_rng = streams.as_deref_mut().map(|s| &mut s.encoder);
        let enc = encode(g, p, cfg, ex.input.ids(), know, vis, enc_rng)?;
        for (slot, &t) in sums.iter_mut().zip(tasks) {
            let content = ex.target(t)?;
            let mut input = Vec::with_capacity(content.len() + 2);
            input.push(special::BOS);
            input.push(t.token());
            input.extend_from_slice(content);
            let mut targets: Vec<Option<usize>> = Vec::with_capacity(input.len());
            targets.push(None);
            targets.extend(content.iter().map(|&c| Some(c as usize)));
            targets.push(Some(special::EOS as usize));
            let dec_rng = streams.as_deref_mut().map(|s| &mut s.tasks[t.index()]);
            let logits = decode_step(g, p, cfg, &input, &enc, dec_rng)?;
            let ce = g.cross_entropy(logits, &targets)?;
            *slot = Some(match *slot {
                None => ce,
                Some(acc) => g.add(acc, ce)?,
            });
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let mut losses = Vec::with_capacity(tasks.len());
    for (s, &t) in sums.into_iter().zip(tasks) {
        let s = s.expect("every task accumulated");
        let v = if batch.len() == 1 {
            s
        } else {
            g.scale(s, scale)?
        };
        losses.push((t, v));
    }
    Ok(TaskLosses { losses })
}

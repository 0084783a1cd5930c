//! Full blocks: the OSN block and the baseline pre-norm transformer block,
//! sharing the FFN / LayerNorm / dropout skeleton, deterministic
//! initialization, and exact parameter counting.
//!
//! Both blocks map `[N, D] -> [N, D]`. The only parameter difference is the
//! OSN coupling scalars: per-head bandwidths α̂ (H values) and the global
//! coupling K̂ (1 value), giving `count(OSN) − count(Transformer) = H + 1`
//! at every width.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{Gradients, NodeId, SeededRng, Tape, Tensor};
use crate::ssa::{self, MfshParams, SsaConfig, SsaTrace};
use crate::{Error, Result, Scalar};

/// LayerNorm variance floor.
pub const LN_EPS: f64 = 1e-5;
/// Weight initialization standard deviation.
pub const WEIGHT_STD: f64 = 0.02;
/// Pre-softplus α̂ init, chosen so softplus(α̂) = 0.1 (broad coupling).
pub const ALPHA_HAT_INIT: f64 = -2.2521684610440907;
/// Pre-softplus K̂ init, chosen so softplus(K̂) = 5.0 (broad locking).
pub const K_HAT_INIT: f64 = 4.993284640182216;

/// Which block variant a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Osn,
    Transformer,
}

/// Block hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    /// FFN hidden width multiplier (hidden = ffn_mult · dim).
    pub ffn_mult: usize,
    pub dropout_p: f64,
    pub kind: BlockKind,
    /// Optional top-k sparsification of the synchronization matrix.
    pub sparsity_k: Option<usize>,
    pub causal: bool,
}

impl BlockConfig {
    pub fn new(kind: BlockKind, dim: usize, heads: usize) -> Self {
        BlockConfig {
            dim,
            heads,
            ffn_mult: 4,
            dropout_p: 0.1,
            kind,
            sparsity_k: None,
            causal: false,
        }
    }

    pub fn osn(dim: usize, heads: usize) -> Self {
        Self::new(BlockKind::Osn, dim, heads)
    }

    pub fn transformer(dim: usize, heads: usize) -> Self {
        Self::new(BlockKind::Transformer, dim, heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads must divide dim: dim = {}, heads = {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.ffn_mult < 1 {
            return Err(Error::Config("ffn_mult must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn ssa_config<T: Scalar>(&self) -> SsaConfig<T> {
        let mut c = SsaConfig::new(self.heads);
        c.sparsity_k = self.sparsity_k;
        c.causal = self.causal;
        c
    }
}

/// All learnable parameters of one block.
///
/// The four projections are ω/θ/V/O for the OSN block and Q/K/V/O for the
/// baseline; every linear layer carries a bias and both LayerNorms carry
/// scale and shift (that combination is what produces the exact published
/// parameter counts).
#[derive(Debug, Clone)]
pub struct BlockParams<T: Scalar> {
    pub kind: BlockKind,
    pub heads: usize,
    pub proj_w: [Tensor<T>; 4],
    pub proj_b: [Tensor<T>; 4],
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
    pub ln1_scale: Tensor<T>,
    pub ln1_shift: Tensor<T>,
    pub ln2_scale: Tensor<T>,
    pub ln2_shift: Tensor<T>,
    /// OSN only: pre-softplus per-head coupling bandwidths, `[H]`.
    pub alpha_hat: Option<Tensor<T>>,
    /// OSN only: pre-softplus global coupling strength, `[1]`.
    pub k_hat: Option<Tensor<T>>,
}

/// Deterministic initialization: every weight matrix ~ N(0, 0.02²) drawn in
/// a fixed order from the seeded stream, biases zero, LayerNorm scale 1 and
/// shift 0, coupling scalars at their calibrated inits.
pub fn init_params<T: Scalar>(config: &BlockConfig, rng: &mut SeededRng) -> Result<BlockParams<T>> {
    config.validate()?;
    let d = config.dim;
    let hidden = config.ffn_mult * d;
    let mut weight = |shape: &[usize]| rng.gaussian_matrix::<T>(shape, 0.0, WEIGHT_STD);

    let proj_w = [
        weight(&[d, d]),
        weight(&[d, d]),
        weight(&[d, d]),
        weight(&[d, d]),
    ];
    let proj_b = [
        Tensor::zeros(&[d]),
        Tensor::zeros(&[d]),
        Tensor::zeros(&[d]),
        Tensor::zeros(&[d]),
    ];
    let ffn_w1 = weight(&[d, hidden]);
    let ffn_w2 = weight(&[hidden, d]);
    let (alpha_hat, k_hat) = match config.kind {
        BlockKind::Osn => (
            Some(Tensor::full(&[config.heads], T::from_f64_lossy(ALPHA_HAT_INIT))),
            Some(Tensor::scalar(T::from_f64_lossy(K_HAT_INIT))),
        ),
        BlockKind::Transformer => (None, None),
    };
    Ok(BlockParams {
        kind: config.kind,
        heads: config.heads,
        proj_w,
        proj_b,
        ffn_w1,
        ffn_b1: Tensor::zeros(&[hidden]),
        ffn_w2,
        ffn_b2: Tensor::zeros(&[d]),
        ln1_scale: Tensor::full(&[d], T::one()),
        ln1_shift: Tensor::zeros(&[d]),
        ln2_scale: Tensor::full(&[d], T::one()),
        ln2_shift: Tensor::zeros(&[d]),
        alpha_hat,
        k_hat,
    })
}

impl<T: Scalar> BlockParams<T> {
    /// Stable (name, tensor) listing; the order defines the checkpoint layout.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let proj_names: [&str; 4] = match self.kind {
            BlockKind::Osn => ["w_omega", "w_theta", "w_value", "w_out"],
            BlockKind::Transformer => ["w_query", "w_key", "w_value", "w_out"],
        };
        let mut out = Vec::new();
        for i in 0..4 {
            out.push((proj_names[i].to_string(), self.proj_w[i].clone()));
            out.push((format!("b_{}", &proj_names[i][2..]), self.proj_b[i].clone()));
        }
        out.push(("ffn_w1".into(), self.ffn_w1.clone()));
        out.push(("ffn_b1".into(), self.ffn_b1.clone()));
        out.push(("ffn_w2".into(), self.ffn_w2.clone()));
        out.push(("ffn_b2".into(), self.ffn_b2.clone()));
        out.push(("ln1_scale".into(), self.ln1_scale.clone()));
        out.push(("ln1_shift".into(), self.ln1_shift.clone()));
        out.push(("ln2_scale".into(), self.ln2_scale.clone()));
        out.push(("ln2_shift".into(), self.ln2_shift.clone()));
        if let Some(a) = &self.alpha_hat {
            out.push(("alpha_hat".into(), a.clone()));
        }
        if let Some(k) = &self.k_hat {
            out.push(("k_hat".into(), k.clone()));
        }
        out
    }

    /// Exact learnable-scalar count.
    pub fn count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every parameter on a tape.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> BlockNodes {
        let reg = |tape: &mut Tape<T>, t: &Tensor<T>| tape.leaf(t.clone(), requires_grad);
        BlockNodes {
            proj_w: [
                reg(tape, &self.proj_w[0]),
                reg(tape, &self.proj_w[1]),
                reg(tape, &self.proj_w[2]),
                reg(tape, &self.proj_w[3]),
            ],
            proj_b: [
                reg(tape, &self.proj_b[0]),
                reg(tape, &self.proj_b[1]),
                reg(tape, &self.proj_b[2]),
                reg(tape, &self.proj_b[3]),
            ],
            ffn_w1: reg(tape, &self.ffn_w1),
            ffn_b1: reg(tape, &self.ffn_b1),
            ffn_w2: reg(tape, &self.ffn_w2),
            ffn_b2: reg(tape, &self.ffn_b2),
            ln1_scale: reg(tape, &self.ln1_scale),
            ln1_shift: reg(tape, &self.ln1_shift),
            ln2_scale: reg(tape, &self.ln2_scale),
            ln2_shift: reg(tape, &self.ln2_shift),
            alpha_hat: self.alpha_hat.as_ref().map(|t| reg(tape, t)),
            k_hat: self.k_hat.as_ref().map(|t| reg(tape, t)),
        }
    }

    /// Plain SGD over every parameter that received a gradient.
    pub fn sgd_step(&mut self, nodes: &BlockNodes, grads: &Gradients<T>, lr: T) {
        let update = |t: &Tensor<T>, id: NodeId| -> Tensor<T> {
            match grads.get(id) {
                Some(g) => Tensor::from_fn(t.shape(), |i| t.data()[i] - lr * g.data()[i]),
                None => t.clone(),
            }
        };
        for i in 0..4 {
            self.proj_w[i] = update(&self.proj_w[i], nodes.proj_w[i]);
            self.proj_b[i] = update(&self.proj_b[i], nodes.proj_b[i]);
        }
        self.ffn_w1 = update(&self.ffn_w1, nodes.ffn_w1);
        self.ffn_b1 = update(&self.ffn_b1, nodes.ffn_b1);
        self.ffn_w2 = update(&self.ffn_w2, nodes.ffn_w2);
        self.ffn_b2 = update(&self.ffn_b2, nodes.ffn_b2);
        self.ln1_scale = update(&self.ln1_scale, nodes.ln1_scale);
        self.ln1_shift = update(&self.ln1_shift, nodes.ln1_shift);
        self.ln2_scale = update(&self.ln2_scale, nodes.ln2_scale);
        self.ln2_shift = update(&self.ln2_shift, nodes.ln2_shift);
        if let (Some(a), Some(id)) = (&self.alpha_hat, nodes.alpha_hat) {
            self.alpha_hat = Some(update(a, id));
        }
        if let (Some(k), Some(id)) = (&self.k_hat, nodes.k_hat) {
            self.k_hat = Some(update(k, id));
        }
    }
}

/// Exact parameter count for a config without materializing parameters.
pub fn count_params(config: &BlockConfig) -> Result<usize> {
    config.validate()?;
    let d = config.dim;
    let hidden = config.ffn_mult * d;
    let base = 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d) + 2 * 2 * d;
    Ok(match config.kind {
        BlockKind::Osn => base + config.heads + 1,
        BlockKind::Transformer => base,
    })
}

/// Node ids of one block's registered parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub proj_w: [NodeId; 4],
    pub proj_b: [NodeId; 4],
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub ln1_scale: NodeId,
    pub ln1_shift: NodeId,
    pub ln2_scale: NodeId,
    pub ln2_shift: NodeId,
    pub alpha_hat: Option<NodeId>,
    pub k_hat: Option<NodeId>,
}

impl BlockNodes {
    fn mfsh_params(&self) -> Result<MfshParams> {
        let alpha_hat = self
            .alpha_hat
            .ok_or_else(|| Error::Config("OSN forward needs coupling bandwidths".into()))?;
        let k_hat = self
            .k_hat
            .ok_or_else(|| Error::Config("OSN forward needs a coupling strength".into()))?;
        Ok(MfshParams {
            w_omega: self.proj_w[0],
            b_omega: self.proj_b[0],
            w_theta: self.proj_w[1],
            b_theta: self.proj_b[1],
            w_value: self.proj_w[2],
            b_value: self.proj_b[2],
            w_out: self.proj_w[3],
            b_out: self.proj_b[3],
            alpha_hat,
            k_hat,
        })
    }
}

/// Deterministic per-call dropout streams derived from (seed, call index).
#[derive(Debug, Clone)]
pub struct DropoutCtx {
    base: SeededRng,
    call_index: u64,
}

impl DropoutCtx {
    pub fn new(seed: u64) -> Self {
        DropoutCtx {
            base: SeededRng::new(seed),
            call_index: 0,
        }
    }

    fn next_stream(&mut self) -> SeededRng {
        let s = self.base.derive(self.call_index);
        self.call_index += 1;
        s
    }
}

/// Forward-pass mode: dropout active only in training.
#[derive(Debug)]
pub enum Mode {
    Eval,
    Train(DropoutCtx),
}

fn dropout<T: Scalar>(tape: &mut Tape<T>, x: NodeId, p: f64, mode: &mut Mode) -> Result<NodeId> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train(ctx) => {
            if p == 0.0 {
                return Ok(x);
            }
            let mut stream = ctx.next_stream();
            let keep_scale = T::from_f64_lossy(1.0 / (1.0 - p));
            let mask = Tensor::from_fn(tape.shape(x), |_| {
                if stream.uniform_f64() < p {
                    T::zero()
                } else {
                    keep_scale
                }
            });
            let m = tape.constant(mask);
            tape.mul(x, m)
        }
    }
}

/// LayerNorm with affine scale and shift: per-token standardization with
/// biased variance and `LN_EPS`, then `scale ⊙ x̂ + shift` (fused kernel).
pub fn layer_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    scale: NodeId,
    shift: NodeId,
) -> Result<NodeId> {
    tape.layer_norm_affine(x, scale, shift, T::from_f64_lossy(LN_EPS))
}

/// Two-layer FFN with exact-erf GELU.
pub fn ffn<T: Scalar>(tape: &mut Tape<T>, x: NodeId, nodes: &BlockNodes) -> Result<NodeId> {
    let h = tape.linear(x, nodes.ffn_w1, nodes.ffn_b1)?;
    let a = tape.gelu(h)?;
    tape.linear(a, nodes.ffn_w2, nodes.ffn_b2)
}

/// OSN block: `z = x + Dropout(MFSH(LN(x)))`, `y = z + Dropout(FFN(LN(z)))`.
pub fn osn_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    nodes: &BlockNodes,
    config: &BlockConfig,
    mode: &mut Mode,
) -> Result<(NodeId, SsaTrace)> {
    config.validate()?;
    let normed = layer_norm(tape, x, nodes.ln1_scale, nodes.ln1_shift)?;
    let trace = ssa::mfsh_forward(tape, normed, &nodes.mfsh_params()?, &config.ssa_config())?;
    let attn_dropped = dropout(tape, trace.out, config.dropout_p, mode)?;
    let z = tape.add(x, attn_dropped)?;

    let normed2 = layer_norm(tape, z, nodes.ln2_scale, nodes.ln2_shift)?;
    let f = ffn(tape, normed2, nodes)?;
    let f_dropped = dropout(tape, f, config.dropout_p, mode)?;
    let y = tape.add(z, f_dropped)?;
    Ok((y, trace))
}

/// Attention nodes recorded by the baseline block, per head.
#[derive(Debug, Clone)]
pub struct AttnTrace {
    pub scores: Vec<NodeId>,
    pub attn: Vec<NodeId>,
}

/// Param-free sinusoidal positional encoding table.
pub fn sinusoidal_pe<T: Scalar>(tokens: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[tokens, dim], |idx| {
        let (i, c) = (idx / dim, idx % dim);
        let pair = (c / 2) as f64;
        let angle = i as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        T::from_f64_lossy(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Baseline pre-norm transformer block with the identical residual/FFN
/// skeleton. `positional_encoding` adds the param-free sinusoidal table at
/// the input (off for parameter-parity comparisons).
pub fn transformer_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    nodes: &BlockNodes,
    config: &BlockConfig,
    mode: &mut Mode,
    positional_encoding: bool,
) -> Result<(NodeId, AttnTrace)> {
    config.validate()?;
    let (n, dim) = (tape.shape(x)[0], tape.shape(x)[1]);
    let d = config.head_dim();
    let x = if positional_encoding {
        let pe = tape.constant(sinusoidal_pe(n, dim));
        tape.add(x, pe)?
    } else {
        x
    };

    let normed = layer_norm(tape, x, nodes.ln1_scale, nodes.ln1_shift)?;
    let q_full = tape.linear(normed, nodes.proj_w[0], nodes.proj_b[0])?;
    let k_full = tape.linear(normed, nodes.proj_w[1], nodes.proj_b[1])?;
    let v_full = tape.linear(normed, nodes.proj_w[2], nodes.proj_b[2])?;

    let inv_sqrt_d = T::from_f64_lossy(1.0 / (d as f64).sqrt());
    let mut heads = Vec::with_capacity(config.heads);
    let mut trace = AttnTrace {
        scores: Vec::with_capacity(config.heads),
        attn: Vec::with_capacity(config.heads),
    };
    for h in 0..config.heads {
        let q = tape.slice_cols(q_full, h * d, (h + 1) * d)?;
        let k = tape.slice_cols(k_full, h * d, (h + 1) * d)?;
        let v = tape.slice_cols(v_full, h * d, (h + 1) * d)?;
        let scores = tape.matmul_transb(q, k)?;
        let scores = tape.scale(scores, inv_sqrt_d)?;
        crate::engine::alloc::record_label("scores", n * n);
        let attn = tape.softmax_rows(scores)?;
        crate::engine::alloc::record_label("attn", n * n);
        heads.push(tape.matmul(attn, v)?);
        trace.scores.push(scores);
        trace.attn.push(attn);
    }
    let concat = tape.concat_cols(&heads)?;
    let attn_out = tape.linear(concat, nodes.proj_w[3], nodes.proj_b[3])?;
    let attn_dropped = dropout(tape, attn_out, config.dropout_p, mode)?;
    let z = tape.add(x, attn_dropped)?;

    let normed2 = layer_norm(tape, z, nodes.ln2_scale, nodes.ln2_shift)?;
    let f = ffn(tape, normed2, nodes)?;
    let f_dropped = dropout(tape, f, config.dropout_p, mode)?;
    let y = tape.add(z, f_dropped)?;
    Ok((y, trace))
}

// ---- checkpoints -----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the data file.
    data_offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    /// Logical scalar type of the saved parameters.
    dtype: String,
    tensors: Vec<ManifestEntry>,
}

/// Save named tensors as `<name>.json` (manifest) plus `<name>.bin`
/// (little-endian f64 payload, elements in manifest order).
pub fn save_tensors<T: Scalar>(dir: &Path, name: &str, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        version: 1,
        dtype: T::DTYPE.to_string(),
        tensors: Vec::new(),
    };
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (tensor_name, t) in tensors {
        manifest.tensors.push(ManifestEntry {
            name: tensor_name.clone(),
            shape: t.shape().to_vec(),
            data_offset: offset,
            len: t.numel(),
        });
        for &v in t.data() {
            payload.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        offset += t.numel();
    }
    fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join(format!("{name}.bin")), payload)?;
    Ok(())
}

/// Load named tensors saved by [`save_tensors`].
pub fn load_tensors<T: Scalar>(dir: &Path, name: &str) -> Result<Vec<(String, Tensor<T>)>> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}.json")))?)?;
    let payload = fs::read(dir.join(format!("{name}.bin")))?;
    let total: usize = manifest.tensors.iter().map(|e| e.len).sum();
    if payload.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, manifest wants {}",
            payload.len(),
            total * 8
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let mut data = Vec::with_capacity(entry.len);
        for i in 0..entry.len {
            let at = (entry.data_offset + i) * 8;
            let bytes: [u8; 8] = payload[at..at + 8].try_into().expect("length checked");
            data.push(T::from_f64_lossy(f64::from_le_bytes(bytes)));
        }
        out.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)?));
    }
    Ok(out)
}

impl<T: Scalar> BlockParams<T> {
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        save_tensors(dir, name, &self.named_tensors())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward_osn_eval(
        params: &BlockParams<f64>,
        config: &BlockConfig,
        x: &Tensor<f64>,
    ) -> Tensor<f64> {
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape, false);
        let xn = tape.constant(x.clone());
        let (y, _) = osn_block_forward(&mut tape, xn, &nodes, config, &mut Mode::Eval).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn paper_scale_parameter_counts() {
        let tf = count_params(&BlockConfig::transformer(512, 8)).unwrap();
        let osn = count_params(&BlockConfig::osn(512, 8)).unwrap();
        assert_eq!(tf, 3_152_384);
        assert_eq!(osn, 3_152_393);
        assert_eq!(osn - tf, 9);
    }

    #[test]
    fn tiny_count_matches_manual_enumeration() {
        // D = 8, H = 2, ffn_mult = 4, hand count:
        // projections 4·(64+8) = 288, FFN 8·32+32 = 288 and 32·8+8 = 264,
        // LayerNorms 4·8 = 32 -> 872; OSN adds H+1 = 3.
        let tf = count_params(&BlockConfig::transformer(8, 2)).unwrap();
        assert_eq!(tf, 872);
        let osn = count_params(&BlockConfig::osn(8, 2)).unwrap();
        assert_eq!(osn, 875);
    }

    #[test]
    fn difference_is_heads_plus_one_across_widths() {
        for (d, h) in [(16, 2), (32, 4), (64, 8), (128, 4)] {
            let tf = count_params(&BlockConfig::transformer(d, h)).unwrap();
            let osn = count_params(&BlockConfig::osn(d, h)).unwrap();
            assert_eq!(osn - tf, h + 1);
        }
    }

    #[test]
    fn materialized_params_match_closed_form_count() {
        for kind in [BlockKind::Osn, BlockKind::Transformer] {
            let config = BlockConfig::new(kind, 16, 2);
            let mut rng = SeededRng::new(1);
            let params: BlockParams<f64> = init_params(&config, &mut rng).unwrap();
            assert_eq!(params.count(), count_params(&config).unwrap());
        }
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let config = BlockConfig::osn(16, 2);
        let a: BlockParams<f64> = init_params(&config, &mut SeededRng::new(7)).unwrap();
        let b: BlockParams<f64> = init_params(&config, &mut SeededRng::new(7)).unwrap();
        for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(ta.data(), tb.data(), "same seed must reproduce bit-identical params");
        }
        assert!(a.proj_b.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(a.ffn_b1.data().iter().all(|&v| v == 0.0));
        assert!(a.ln1_scale.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn weight_sample_std_near_002() {
        let config = BlockConfig::transformer(512, 8);
        let params: BlockParams<f64> = init_params(&config, &mut SeededRng::new(42)).unwrap();
        let w = &params.proj_w[0];
        let n = w.numel() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let std = (w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((std - 0.02).abs() < 0.02 * 0.02, "sample std {std}");
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let config = BlockConfig::osn(8, 2);
        let params: BlockParams<f64> = init_params(&config, &mut SeededRng::new(3)).unwrap();
        let mut rng = SeededRng::new(9);
        let x: Tensor<f64> = rng.gaussian_matrix(&[5, 8], 0.0, 1.0);
        let y1 = forward_osn_eval(&params, &config, &x);
        let y2 = forward_osn_eval(&params, &config, &x);
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn train_dropout_is_seed_deterministic_but_differs_from_eval() {
        let mut config = BlockConfig::osn(8, 2);
        config.dropout_p = 0.5;
        let params: BlockParams<f64> = init_params(&config, &mut SeededRng::new(3)).unwrap();
        let mut rng = SeededRng::new(9);
        let x: Tensor<f64> = rng.gaussian_matrix(&[5, 8], 0.0, 1.0);

        let run = |seed: u64| {
            let mut tape = Tape::new();
            let nodes = params.register(&mut tape, false);
            let xn = tape.constant(x.clone());
            let mut mode = Mode::Train(DropoutCtx::new(seed));
            let (y, _) = osn_block_forward(&mut tape, xn, &nodes, &config, &mut mode).unwrap();
            tape.value(y).clone()
        };
        let a = run(11);
        let b = run(11);
        let c = run(12);
        assert_eq!(a.data(), b.data(), "same dropout seed, same masks");
        assert!(a.max_abs_diff(&c) > 0.0, "different dropout seed should differ");
        let eval = forward_osn_eval(&params, &config, &x);
        assert!(a.max_abs_diff(&eval) > 0.0, "training masks must be active");
    }

    #[test]
    fn residual_structure_zero_projections_identity() {
        // zero W_O and FFN second layer: both residual branches vanish
        let config = BlockConfig::osn(8, 2);
        let mut params: BlockParams<f64> = init_params(&config, &mut SeededRng::new(3)).unwrap();
        params.proj_w[3] = Tensor::zeros(&[8, 8]);
        params.proj_b[3] = Tensor::zeros(&[8]);
        params.ffn_w2 = Tensor::zeros(&[32, 8]);
        params.ffn_b2 = Tensor::zeros(&[8]);
        let mut rng = SeededRng::new(10);
        let x: Tensor<f64> = rng.gaussian_matrix(&[4, 8], 0.0, 1.0);
        let y = forward_osn_eval(&params, &config, &x);
        assert!(y.max_abs_diff(&x) < 1e-15, "block must reduce to the identity");
    }

    #[test]
    fn single_token_attention_is_one() {
        let config = BlockConfig::transformer(8, 2);
        let params: BlockParams<f64> = init_params(&config, &mut SeededRng::new(5)).unwrap();
        let mut rng = SeededRng::new(6);
        let x: Tensor<f64> = rng.gaussian_matrix(&[1, 8], 0.0, 1.0);
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape, false);
        let xn = tape.constant(x);
        let (_, trace) =
            transformer_block_forward(&mut tape, xn, &nodes, &config, &mut Mode::Eval, false).unwrap();
        for &a in &trace.attn {
            assert_eq!(tape.value(a).data(), &[1.0]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let config = BlockConfig::transformer(8, 2);
        let params: BlockParams<f64> = init_params(&config, &mut SeededRng::new(5)).unwrap();
        let mut rng = SeededRng::new(6);
        let x: Tensor<f64> = rng.gaussian_matrix(&[7, 8], 0.0, 1.0);
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape, false);
        let xn = tape.constant(x);
        let (_, trace) =
            transformer_block_forward(&mut tape, xn, &nodes, &config, &mut Mode::Eval, false).unwrap();
        for &a in &trace.attn {
            let av = tape.value(a);
            for i in 0..7 {
                let s: f64 = (0..7).map(|c| av.get2(i, c)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn both_blocks_preserve_shape() {
        for n in [1usize, 3, 9] {
            let mut rng = SeededRng::new(n as u64);
            let x: Tensor<f64> = rng.gaussian_matrix(&[n, 8], 0.0, 1.0);
            let config = BlockConfig::osn(8, 2);
            let params: BlockParams<f64> = init_params(&config, &mut SeededRng::new(1)).unwrap();
            assert_eq!(forward_osn_eval(&params, &config, &x).shape(), &[n, 8]);

            let tconfig = BlockConfig::transformer(8, 2);
            let tparams: BlockParams<f64> = init_params(&tconfig, &mut SeededRng::new(1)).unwrap();
            let mut tape = Tape::new();
            let nodes = tparams.register(&mut tape, false);
            let xn = tape.constant(x.clone());
            let (y, _) =
                transformer_block_forward(&mut tape, xn, &nodes, &tconfig, &mut Mode::Eval, true)
                    .unwrap();
            assert_eq!(tape.shape(y), &[n, 8]);
        }
    }

    #[test]
    fn osn_permutation_equivariant_baseline_with_pe_not() {
        let (n, dim) = (6, 8);
        let mut rng = SeededRng::new(20);
        let x: Tensor<f64> = rng.gaussian_matrix(&[n, dim], 0.0, 1.0);
        let perm = [2usize, 4, 0, 5, 3, 1];
        let xp = Tensor::from_fn(&[n, dim], |i| x.get2(perm[i / dim], i % dim));

        let config = BlockConfig::osn(dim, 2);
        let params: BlockParams<f64> = init_params(&config, &mut SeededRng::new(2)).unwrap();
        let y = forward_osn_eval(&params, &config, &x);
        let yp = forward_osn_eval(&params, &config, &xp);
        for i in 0..n {
            for c in 0..dim {
                assert!((y.get2(perm[i], c) - yp.get2(i, c)).abs() < 1e-12);
            }
        }

        let tconfig = BlockConfig::transformer(dim, 2);
        let tparams: BlockParams<f64> = init_params(&tconfig, &mut SeededRng::new(2)).unwrap();
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::new();
            let nodes = tparams.register(&mut tape, false);
            let xn = tape.constant(input.clone());
            let (y, _) =
                transformer_block_forward(&mut tape, xn, &nodes, &tconfig, &mut Mode::Eval, true)
                    .unwrap();
            tape.value(y).clone()
        };
        let ty = run(&x);
        let typ = run(&xp);
        let mut any_diff = 0.0f64;
        for i in 0..n {
            for c in 0..dim {
                any_diff = any_diff.max((ty.get2(perm[i], c) - typ.get2(i, c)).abs());
            }
        }
        assert!(any_diff > 1e-6, "positional encoding must break equivariance");
    }

    #[test]
    fn osn_block_gradient_matches_finite_differences() {
        let config = BlockConfig::osn(8, 2);
        let params: BlockParams<f64> = init_params(&config, &mut SeededRng::new(4)).unwrap();
        let mut rng = SeededRng::new(12);
        let x: Tensor<f64> = rng.gaussian_matrix(&[4, 8], 0.0, 1.0);
        let err = crate::engine::grad_check(
            |tape, leaf| {
                let nodes = params.register(tape, true);
                let (y, _) = osn_block_forward(tape, leaf, &nodes, &config, &mut Mode::Eval)?;
                tape.mean_all(y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = std::env::temp_dir().join("osn-test-ckpt");
        let config = BlockConfig::osn(8, 2);
        let params: BlockParams<f64> = init_params(&config, &mut SeededRng::new(4)).unwrap();
        params.save(&dir, "block").unwrap();
        let loaded = load_tensors::<f64>(&dir, "block").unwrap();
        let original = params.named_tensors();
        assert_eq!(loaded.len(), original.len());
        for ((ln, lt), (on, ot)) in loaded.iter().zip(original.iter()) {
            assert_eq!(ln, on);
            assert_eq!(lt.shape(), ot.shape());
            assert_eq!(lt.data(), ot.data());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(count_params(&BlockConfig::transformer(7, 2)).is_err());
        let mut c = BlockConfig::osn(8, 2);
        c.dropout_p = 1.0;
        assert!(c.validate().is_err());
        c.dropout_p = 0.1;
        c.ffn_mult = 0;
        assert!(c.validate().is_err());
    }
}

//! The MambaNet estimator.
//!
//! Pipeline, from LS pilot estimates to a full-slot channel estimate:
//!
//! 1. tokenize the `(N_f/L_s) × N_pilot` pilot grid into an `L × 2` real
//!    sequence (real and imaginary channels);
//! 2. multi-head self-attention whose projections act along the sequence
//!    dimension, residual add, layer norm;
//! 3. gated bidirectional selective scan with channel-dimension projections,
//!    residual add, layer norm;
//! 4. residual CNN on the `(N_f/L_s) × N_pilot` map, bilinear upsampling to
//!    `N_f × N_s`, and a tall output convolution producing two channels.

mod layers;
pub mod scan;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baseband::{BasebandConfig, GridKind, SlotGrid};
use crate::error::{Error, Result};
use crate::estimators::PilotLsGrid;
use crate::tensor::{Checkpoint, ParamSet, Tensor};

pub use layers::{attention_block, mamba_block, mamba_gates, refine_head, AttentionTrace};
pub use scan::{bidirectional_scan, scan_parallel, scan_sequential, scan_sequential_into, ScanInputs, ScanMode};

/// Flattening order of the pilot grid into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenOrder {
    /// All pilot subcarriers of pilot symbol 0, then symbol 1, ...
    #[default]
    PilotSymbolMajor,
    /// All pilot symbols of subcarrier 0, then subcarrier 1, ...
    SubcarrierMajor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MambaNetConfig {
    pub n_f: usize,
    pub n_s: usize,
    /// Pilot subcarriers per pilot symbol (`N_f / L_s`).
    pub pilots_per_symbol: usize,
    pub n_pilot: usize,
    pub n_heads: usize,
    pub c_spread: usize,
    pub n_res_blocks: usize,
    pub cnn_channels: usize,
    pub head_kernel: (usize, usize),
    pub body_kernel: (usize, usize),
    pub eps: f64,
    pub token_order: TokenOrder,
    pub scan_mode: ScanMode,
}

impl MambaNetConfig {
    pub fn for_baseband(bb: &BasebandConfig) -> Self {
        Self {
            n_f: bb.n_f,
            n_s: bb.n_s,
            pilots_per_symbol: bb.pilots_per_symbol(),
            n_pilot: bb.n_pilot(),
            n_heads: bb.n_pilot(),
            c_spread: 24,
            n_res_blocks: 7,
            cnn_channels: 12,
            head_kernel: (96, 5),
            body_kernel: (5, 5),
            eps: 1e-5,
            token_order: TokenOrder::default(),
            scan_mode: ScanMode::default(),
        }
    }

    /// Sequence length `L = N_pilot · N_f / L_s`.
    pub fn seq_len(&self) -> usize {
        self.n_pilot * self.pilots_per_symbol
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, reason: &str| {
            Err(Error::Config {
                key: format!("model.{key}"),
                reason: reason.to_owned(),
            })
        };
        let l = self.seq_len();
        if l == 0 || self.n_f == 0 || self.n_s == 0 {
            return fail("seq_len", "must be positive");
        }
        if self.n_heads == 0 || l % self.n_heads != 0 {
            return fail("n_heads", "must divide the sequence length");
        }
        if self.c_spread < 2 {
            return fail("c_spread", "must be at least 2");
        }
        if self.cnn_channels == 0 {
            return fail("cnn_channels", "must be positive");
        }
        let (a, b) = self.head_kernel;
        let (c, d) = self.body_kernel;
        if a == 0 || b == 0 || c == 0 || d == 0 {
            return fail("head_kernel", "kernel extents must be positive");
        }
        if !(self.eps > 0.0) {
            return fail("eps", "must be positive");
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` of every parameter in registration order.
    /// Layer-norm gains have fan-in 0.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let l = self.seq_len();
        let c = self.c_spread;
        let ch = self.cnn_channels;
        let (bh, bw) = self.body_kernel;
        let (hh, hw) = self.head_kernel;
        let mut v: Vec<(String, Vec<usize>, usize)> = vec![
            ("attention.in_proj.weight".into(), vec![3 * l, l], l),
            ("attention.in_proj.bias".into(), vec![3 * l], l),
            ("attention.out_proj.weight".into(), vec![l, l], l),
            ("attention.out_proj.bias".into(), vec![l], l),
            ("attention.norm.weight".into(), vec![l], 0),
            ("attention.norm.bias".into(), vec![l], 0),
            ("mamba.in_proj.weight".into(), vec![2, 2 * c], 2),
            ("mamba.in_proj.bias".into(), vec![2 * c], 2),
            ("mamba.mix.weight".into(), vec![c, c], c),
            ("mamba.mix.bias".into(), vec![c], c),
            ("mamba.gate_a.weight".into(), vec![c, c], c),
            ("mamba.gate_a.bias".into(), vec![c], c),
            ("mamba.gate_b.weight".into(), vec![c, c], c),
            ("mamba.gate_b.bias".into(), vec![c], c),
            ("mamba.gate_g.weight".into(), vec![c, c], c),
            ("mamba.gate_g.bias".into(), vec![c], c),
            ("mamba.out_proj.weight".into(), vec![c, 2], c),
            ("mamba.out_proj.bias".into(), vec![2], c),
            ("mamba.norm.weight".into(), vec![l], 0),
            ("mamba.norm.bias".into(), vec![l], 0),
            ("cnn.stem.kernel".into(), vec![bh, bw, 2, ch], bh * bw * 2),
            ("cnn.stem.bias".into(), vec![ch], bh * bw * 2),
        ];
        for i in 0..self.n_res_blocks {
            for j in 1..=2 {
                v.push((format!("cnn.block{i}.conv{j}.kernel"), vec![bh, bw, ch, ch], bh * bw * ch));
                v.push((format!("cnn.block{i}.conv{j}.bias"), vec![ch], bh * bw * ch));
            }
        }
        v.push(("cnn.norm.weight".into(), vec![l], 0));
        v.push(("cnn.norm.bias".into(), vec![l], 0));
        v.push(("cnn.head.kernel".into(), vec![hh, hw, ch, 2], hh * hw * ch));
        v.push(("cnn.head.bias".into(), vec![2], hh * hw * ch));
        v
    }
}

/// Slot indices of every parameter inside the [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub attn_in_w: usize,
    pub attn_in_b: usize,
    pub attn_out_w: usize,
    pub attn_out_b: usize,
    pub ln1_w: usize,
    pub ln1_b: usize,
    pub mamba_in_w: usize,
    pub mamba_in_b: usize,
    pub mix_w: usize,
    pub mix_b: usize,
    pub a_w: usize,
    pub a_b: usize,
    pub b_w: usize,
    pub b_b: usize,
    pub g_w: usize,
    pub g_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub ln2_w: usize,
    pub ln2_b: usize,
    pub stem_k: usize,
    pub stem_b: usize,
    /// `[conv1.kernel, conv1.bias, conv2.kernel, conv2.bias]` per block.
    pub blocks: Vec<[usize; 4]>,
    pub ln3_w: usize,
    pub ln3_b: usize,
    pub head_k: usize,
    pub head_b: usize,
}

impl Layout {
    fn resolve(cfg: &MambaNetConfig, set: &ParamSet) -> Result<Self> {
        let id = |name: &str| {
            set.id(name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
        };
        let blocks = (0..cfg.n_res_blocks)
            .map(|i| {
                Ok([
                    id(&format!("cnn.block{i}.conv1.kernel"))?,
                    id(&format!("cnn.block{i}.conv1.bias"))?,
                    id(&format!("cnn.block{i}.conv2.kernel"))?,
                    id(&format!("cnn.block{i}.conv2.bias"))?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            attn_in_w: id("attention.in_proj.weight")?,
            attn_in_b: id("attention.in_proj.bias")?,
            attn_out_w: id("attention.out_proj.weight")?,
            attn_out_b: id("attention.out_proj.bias")?,
            ln1_w: id("attention.norm.weight")?,
            ln1_b: id("attention.norm.bias")?,
            mamba_in_w: id("mamba.in_proj.weight")?,
            mamba_in_b: id("mamba.in_proj.bias")?,
            mix_w: id("mamba.mix.weight")?,
            mix_b: id("mamba.mix.bias")?,
            a_w: id("mamba.gate_a.weight")?,
            a_b: id("mamba.gate_a.bias")?,
            b_w: id("mamba.gate_b.weight")?,
            b_b: id("mamba.gate_b.bias")?,
            g_w: id("mamba.gate_g.weight")?,
            g_b: id("mamba.gate_g.bias")?,
            out_w: id("mamba.out_proj.weight")?,
            out_b: id("mamba.out_proj.bias")?,
            ln2_w: id("mamba.norm.weight")?,
            ln2_b: id("mamba.norm.bias")?,
            stem_k: id("cnn.stem.kernel")?,
            stem_b: id("cnn.stem.bias")?,
            blocks,
            ln3_w: id("cnn.norm.weight")?,
            ln3_b: id("cnn.norm.bias")?,
            head_k: id("cnn.head.kernel")?,
            head_b: id("cnn.head.bias")?,
        })
    }
}

/// Configuration plus all trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaNetParams {
    pub cfg: MambaNetConfig,
    pub set: ParamSet,
    pub layout: Layout,
}

impl MambaNetParams {
    /// Uniform `±1/√fan_in` weights, zero biases, unit layer-norm gains.
    pub fn init(cfg: &MambaNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for (name, shape, fan_in) in cfg.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("norm.weight") {
                vec![1.0; n]
            } else if name.ends_with("bias") {
                vec![0.0; n]
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            set.add(&name, &shape, data)?;
        }
        Self::from_set(cfg.clone(), set)
    }

    /// Wrap a parameter set, checking every expected name and shape.
    pub fn from_set(cfg: MambaNetConfig, set: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let expected = cfg.param_shapes();
        if expected.len() != set.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                expected.len(),
                set.len()
            )));
        }
        for (name, shape, _) in &expected {
            let id = set
                .id(name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
            if set.shape(id) != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    set.shape(id)
                )));
            }
        }
        let layout = Layout::resolve(&cfg, &set)?;
        Ok(Self { cfg, set, layout })
    }
}

impl MambaNetConfig {
    /// `model.*` header entries fully describing the architecture.
    pub fn to_header(&self) -> Vec<(String, String)> {
        let order = match self.token_order {
            TokenOrder::PilotSymbolMajor => "pilot-symbol-major",
            TokenOrder::SubcarrierMajor => "subcarrier-major",
        };
        let mode = match self.scan_mode {
            ScanMode::Sequential => "sequential",
            ScanMode::Parallel => "parallel",
        };
        [
            ("n_f", self.n_f.to_string()),
            ("n_s", self.n_s.to_string()),
            ("pilots_per_symbol", self.pilots_per_symbol.to_string()),
            ("n_pilot", self.n_pilot.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("c_spread", self.c_spread.to_string()),
            ("n_res_blocks", self.n_res_blocks.to_string()),
            ("cnn_channels", self.cnn_channels.to_string()),
            ("head_kernel", format!("{}x{}", self.head_kernel.0, self.head_kernel.1)),
            ("body_kernel", format!("{}x{}", self.body_kernel.0, self.body_kernel.1)),
            ("eps", format!("{:e}", self.eps)),
            ("token_order", order.to_owned()),
            ("scan_mode", mode.to_owned()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("model.{k}"), v))
        .collect()
    }

    /// Inverse of [`MambaNetConfig::to_header`].
    pub fn from_header(header: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| {
            header
                .iter()
                .find(|(k, _)| k == &format!("model.{key}"))
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Config {
                    key: format!("model.{key}"),
                    reason: "missing from checkpoint header".into(),
                })
        };
        let bad = |key: &str, v: &str| Error::Config {
            key: format!("model.{key}"),
            reason: format!("cannot parse `{v}`"),
        };
        let num = |key: &str| -> Result<usize> {
            let v = get(key)?;
            v.parse().map_err(|_| bad(key, v))
        };
        let kernel = |key: &str| -> Result<(usize, usize)> {
            let v = get(key)?;
            let (a, b) = v.split_once('x').ok_or_else(|| bad(key, v))?;
            Ok((a.parse().map_err(|_| bad(key, v))?, b.parse().map_err(|_| bad(key, v))?))
        };
        let eps_s = get("eps")?;
        let cfg = Self {
            n_f: num("n_f")?,
            n_s: num("n_s")?,
            pilots_per_symbol: num("pilots_per_symbol")?,
            n_pilot: num("n_pilot")?,
            n_heads: num("n_heads")?,
            c_spread: num("c_spread")?,
            n_res_blocks: num("n_res_blocks")?,
            cnn_channels: num("cnn_channels")?,
            head_kernel: kernel("head_kernel")?,
            body_kernel: kernel("body_kernel")?,
            eps: eps_s.parse().map_err(|_| bad("eps", eps_s))?,
            token_order: match get("token_order")? {
                "pilot-symbol-major" => TokenOrder::PilotSymbolMajor,
                "subcarrier-major" => TokenOrder::SubcarrierMajor,
                v => return Err(bad("token_order", v)),
            },
            scan_mode: match get("scan_mode")? {
                "sequential" => ScanMode::Sequential,
                "parallel" => ScanMode::Parallel,
                v => return Err(bad("scan_mode", v)),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl MambaNetParams {
    /// Checkpoint with the architecture echoed into the header after `extra`.
    pub fn to_checkpoint(&self, extra: &[(String, String)]) -> Checkpoint {
        let mut header = extra.to_vec();
        header.extend(self.cfg.to_header());
        Checkpoint {
            header,
            params: self.set.clone(),
        }
    }

    /// Rebuild from a checkpoint, validating every shape against the header.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = MambaNetConfig::from_header(&ckpt.header)?;
        Self::from_set(cfg, ckpt.params.clone())
    }
}

/// Row permutation taking pilot-symbol-major flattening to the token order.
fn token_permutation(cfg: &MambaNetConfig) -> Vec<usize> {
    let (p, n) = (cfg.pilots_per_symbol, cfg.n_pilot);
    match cfg.token_order {
        TokenOrder::PilotSymbolMajor => (0..p * n).collect(),
        TokenOrder::SubcarrierMajor => (0..p)
            .flat_map(|i| (0..n).map(move |j| j * p + i))
            .collect(),
    }
}

/// `L × 2` token matrix (real, imaginary) from the pilot LS grid.
pub fn tokenize(ls: &PilotLsGrid, cfg: &MambaNetConfig) -> Result<Tensor> {
    if ls.rows() != cfg.pilots_per_symbol || ls.cols() != cfg.n_pilot {
        return Err(Error::ShapeMismatch {
            op: "tokenize",
            lhs: vec![ls.rows(), ls.cols()],
            rhs: vec![cfg.pilots_per_symbol, cfg.n_pilot],
        });
    }
    let vals = ls.values();
    let data = token_permutation(cfg)
        .into_iter()
        .flat_map(|src| [vals[src].re, vals[src].im])
        .collect();
    Tensor::new(&[cfg.seq_len(), 2], data)
}

/// Inverse of [`tokenize`].
pub fn detokenize(tokens: &Tensor, cfg: &MambaNetConfig) -> Result<PilotLsGrid> {
    if tokens.shape() != [cfg.seq_len(), 2] {
        return Err(Error::ShapeMismatch {
            op: "detokenize",
            lhs: tokens.shape().to_vec(),
            rhs: vec![cfg.seq_len(), 2],
        });
    }
    let d = tokens.data();
    let mut vals = vec![num_complex::Complex64::new(0.0, 0.0); cfg.seq_len()];
    for (t, src) in token_permutation(cfg).into_iter().enumerate() {
        vals[src] = num_complex::Complex64::new(d[2 * t], d[2 * t + 1]);
    }
    PilotLsGrid::new(cfg.pilots_per_symbol, cfg.n_pilot, vals)
}

/// Row order mapping tokens onto the `(N_f/L_s) × N_pilot` feature map.
pub(crate) fn map_rows(cfg: &MambaNetConfig) -> Vec<usize> {
    let perm = token_permutation(cfg);
    let mut token_of = vec![0; perm.len()];
    for (t, &src) in perm.iter().enumerate() {
        token_of[src] = t;
    }
    let (p, n) = (cfg.pilots_per_symbol, cfg.n_pilot);
    (0..p)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| token_of[j * p + i])
        .collect()
}

/// Full differentiable forward pass on bound parameter tensors; returns the
/// `N_f × N_s × 2` estimate.
pub fn forward_tensors(params: &MambaNetParams, bound: &[Tensor], tokens: &Tensor) -> Result<Tensor> {
    let x = attention_block(tokens, params, bound)?.output;
    let y = mamba_block(&x, params, bound)?;
    refine_head(&y, params, bound)
}

impl MambaNetParams {
    /// Inference on one pilot grid.
    pub fn forward(&self, ls: &PilotLsGrid) -> Result<SlotGrid> {
        self.predict_batch(std::slice::from_ref(ls)).map(|mut v| v.remove(0))
    }

    /// Inference on many pilot grids, binding the weights once.
    pub fn predict_batch(&self, inputs: &[PilotLsGrid]) -> Result<Vec<SlotGrid>> {
        let bound = self.set.bind_frozen();
        inputs
            .iter()
            .map(|ls| {
                let out = forward_tensors(self, &bound, &tokenize(ls, &self.cfg)?)?;
                SlotGrid::from_planes(GridKind::Channel, self.cfg.n_f, self.cfg.n_s, out.data())
            })
            .collect()
    }
}

/// Parameter totals with a per-module breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
    /// Attention input and output projections (weights and biases), the
    /// part that grows with `L²`.
    pub quadratic: usize,
    /// `log₂(total(2·N_f) / total(N_f))`.
    pub scaling_exponent: f64,
}

fn count_shapes(cfg: &MambaNetConfig) -> (usize, Vec<(String, usize)>, usize) {
    let mut breakdown: Vec<(String, usize)> = Vec::new();
    let mut quadratic = 0;
    let mut total = 0;
    for (name, shape, _) in cfg.param_shapes() {
        let n: usize = shape.iter().product();
        total += n;
        if name.starts_with("attention.in_proj") || name.starts_with("attention.out_proj") {
            quadratic += n;
        }
        let group = name.rsplit_once('.').map(|(g, _)| g).unwrap_or(&name).to_owned();
        match breakdown.last_mut() {
            Some((g, c)) if *g == group => *c += n,
            _ => breakdown.push((group, n)),
        }
    }
    (total, breakdown, quadratic)
}

/// Count parameters from the configured shapes.
pub fn count_parameters(cfg: &MambaNetConfig) -> ParamReport {
    let (total, breakdown, quadratic) = count_shapes(cfg);
    let doubled = MambaNetConfig {
        n_f: cfg.n_f * 2,
        pilots_per_symbol: cfg.pilots_per_symbol * 2,
        ..cfg.clone()
    };
    let (total2, _, _) = count_shapes(&doubled);
    ParamReport {
        total,
        breakdown,
        quadratic,
        scaling_exponent: (total2 as f64 / total as f64).log2(),
    }
}

#[cfg(test)]
mod tests;

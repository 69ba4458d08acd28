use super::scan::{bidirectional_scan, ScanInputs};
use super::{map_rows, MambaNetParams};
use crate::error::Result;
use crate::tensor::Tensor;

/// Attention block output together with the per-head attention weights.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub output: Tensor,
    /// One `(L/n_heads) × (L/n_heads)` row-stochastic matrix per head.
    pub weights: Vec<Tensor>,
}

/// Self-attention with sequence-dimension projections, residual add and
/// layer norm. `bound` holds the parameter leaves in registration order.
pub fn attention_block(x: &Tensor, p: &MambaNetParams, bound: &[Tensor]) -> Result<AttentionTrace> {
    let (cfg, ly) = (&p.cfg, &p.layout);
    let l = cfg.seq_len();
    let d = l / cfg.n_heads;
    let scale = 1.0 / (cfg.pilots_per_symbol as f64).sqrt();

    let qkv = bound[ly.attn_in_w].matmul(x)?.add_bias_rows(&bound[ly.attn_in_b])?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut weights = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let q = qkv.slice_rows(h * d, d)?;
        let k = qkv.slice_rows(l + h * d, d)?;
        let v = qkv.slice_rows(2 * l + h * d, d)?;
        let attn = q.matmul(&k.transpose()?)?.scale(scale).softmax_rows()?;
        heads.push(attn.matmul(&v)?);
        weights.push(attn);
    }
    let merged = Tensor::concat_rows(&heads)?;
    let projected = bound[ly.attn_out_w]
        .matmul(&merged)?
        .add_bias_rows(&bound[ly.attn_out_b])?;
    let output = projected
        .add(x)?
        .layer_norm(&bound[ly.ln1_w], &bound[ly.ln1_b], cfg.eps)?;
    Ok(AttentionTrace { output, weights })
}

/// Differentiable gate tensors `(a, b, g)`, each `L × c`.
pub(crate) fn gate_tensors(
    x: &Tensor,
    p: &MambaNetParams,
    bound: &[Tensor],
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, ly) = (p.cfg.c_spread, &p.layout);
    let u = x.matmul(&bound[ly.mamba_in_w])?.add_bias_cols(&bound[ly.mamba_in_b])?;
    let u_main = u.slice_cols(0, c)?;
    let u_gate = u.slice_cols(c, c)?;
    let x_dc = u_main.matmul(&bound[ly.mix_w])?.add_bias_cols(&bound[ly.mix_b])?.silu();
    let a = x_dc.matmul(&bound[ly.a_w])?.add_bias_cols(&bound[ly.a_b])?.sigmoid();
    let b = x_dc.matmul(&bound[ly.b_w])?.add_bias_cols(&bound[ly.b_b])?;
    let g = u_gate.matmul(&bound[ly.g_w])?.add_bias_cols(&bound[ly.g_b])?.silu();
    Ok((a, b, g))
}

/// Scan coefficients for the attention output `x[L×2]`.
pub fn mamba_gates(x: &Tensor, p: &MambaNetParams) -> Result<ScanInputs> {
    let bound = p.set.bind_frozen();
    let (a, b, g) = gate_tensors(&x.detach(), p, &bound)?;
    ScanInputs::new(
        p.cfg.seq_len(),
        p.cfg.c_spread,
        a.data().to_vec(),
        b.data().to_vec(),
        g.data().to_vec(),
    )
}

/// Gated bidirectional selective scan, channel projection back to two
/// channels, residual add and layer norm.
pub fn mamba_block(x: &Tensor, p: &MambaNetParams, bound: &[Tensor]) -> Result<Tensor> {
    let ly = &p.layout;
    let (a, b, g) = gate_tensors(x, p, bound)?;
    let h = bidirectional_scan(&a, &b, p.cfg.scan_mode)?;
    g.mul(&h)?
        .matmul(&bound[ly.out_w])?
        .add_bias_cols(&bound[ly.out_b])?
        .add(x)?
        .layer_norm(&bound[ly.ln2_w], &bound[ly.ln2_b], p.cfg.eps)
}

/// Residual CNN on the pilot-grid map, bilinear upsampling to the full slot
/// and the output convolution. Returns `N_f × N_s × 2`.
pub fn refine_head(y: &Tensor, p: &MambaNetParams, bound: &[Tensor]) -> Result<Tensor> {
    let (cfg, ly) = (&p.cfg, &p.layout);
    let (rows, cols, ch) = (cfg.pilots_per_symbol, cfg.n_pilot, cfg.cnn_channels);
    let map = y.gather_rows(&map_rows(cfg))?.reshape(&[rows, cols, 2])?;
    let stem = map.conv2d_same(&bound[ly.stem_k], &bound[ly.stem_b])?;
    let mut z = stem.clone();
    for blk in &ly.blocks {
        let inner = z
            .conv2d_same(&bound[blk[0]], &bound[blk[1]])?
            .relu()
            .conv2d_same(&bound[blk[2]], &bound[blk[3]])?;
        z = z.add(&inner)?;
    }
    let normed = stem
        .add(&z)?
        .reshape(&[rows * cols, ch])?
        .layer_norm(&bound[ly.ln3_w], &bound[ly.ln3_b], cfg.eps)?
        .reshape(&[rows, cols, ch])?;
    normed
        .bilinear_resize(cfg.n_f, cfg.n_s)?
        .conv2d_same(&bound[ly.head_k], &bound[ly.head_b])
}

//! Closed-form parameter and FLOP counts.
//!
//! FLOPs are twice the multiply-accumulate count. Only matmuls, convolutions
//! and the sum of squares inside each normalization are counted; elementwise
//! work (activations, affines, residual adds, exponentials) is not.

use serde::Serialize;

use super::ModelConfig;
use crate::error::Result;

/// Multiply-accumulates of multi-head XNorm attention over `n` tokens:
/// projections `4·n·C²`, per head context `n·d²`, mixing `n·d²`, query
/// normalization `n·d` and context normalization `d²`.
pub fn xnorm_attention_macs(n: usize, dim: usize, heads: usize) -> u64 {
    let (n, c, h) = (n as u64, dim as u64, heads as u64);
    let d = c / h;
    4 * n * c * c + h * (2 * n * d * d + n * d + d * d)
}

/// Multiply-accumulates of softmax attention: projections `4·n·C²`, per head
/// `n²·d` for the scores and `n²·d` for the weighted sum.
pub fn softmax_attention_macs(n: usize, dim: usize, heads: usize) -> u64 {
    let (n, c, h) = (n as u64, dim as u64, heads as u64);
    let d = c / h;
    4 * n * c * c + h * 2 * n * n * d
}

pub fn xnorm_attention_flops(n: usize, dim: usize, heads: usize) -> u64 {
    2 * xnorm_attention_macs(n, dim, heads)
}

pub fn softmax_attention_flops(n: usize, dim: usize, heads: usize) -> u64 {
    2 * softmax_attention_macs(n, dim, heads)
}

/// Class attention with one query over `keys` rows.
pub fn class_attention_macs(keys: usize, dim: usize, heads: usize) -> u64 {
    let (m, c, h) = (keys as u64, dim as u64, heads as u64);
    let d = c / h;
    2 * c * c + 2 * m * c * c + h * (m * d * d + d + 2 * d * d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopBreakdown {
    pub tokens: usize,
    pub stem: u64,
    /// Encoder attention with XNorm, summed over blocks.
    pub attention_xnorm: u64,
    /// The same encoder attention if it used softmax.
    pub attention_softmax: u64,
    pub lpi: u64,
    pub mlp: u64,
    pub class_blocks: u64,
    pub head: u64,
    /// Whole model with XNorm attention.
    pub total: u64,
}

/// FLOPs of one forward pass at `image_size` pixels per side.
pub fn count_flops(cfg: &ModelConfig, image_size: usize) -> Result<FlopBreakdown> {
    cfg.validate()?;
    let (rows, cols) = cfg.grid(image_size)?;
    let n = rows * cols;
    let (c, heads, hd) = (cfg.embed_dim as u64, cfg.heads, cfg.hidden_dim() as u64);
    let n64 = n as u64;

    let mut side = image_size as u64;
    let mut stem = 0;
    for (cin, cout) in cfg.stem_channels() {
        side /= 2;
        stem += cout as u64 * side * side * cin as u64 * 9;
    }
    let depth = cfg.depth as u64;
    let attention_xnorm = depth * xnorm_attention_macs(n, cfg.embed_dim, heads);
    let attention_softmax = depth * softmax_attention_macs(n, cfg.embed_dim, heads);
    let lpi = depth * 2 * 9 * c * n64;
    let mlp = depth * 2 * n64 * c * hd;
    let class_blocks =
        cfg.class_depth as u64 * (class_attention_macs(n + 1, cfg.embed_dim, heads) + 2 * c * hd);
    let head = c * cfg.num_classes as u64;
    let total = stem + attention_xnorm + lpi + mlp + class_blocks + head;
    Ok(FlopBreakdown {
        tokens: n,
        stem: 2 * stem,
        attention_xnorm: 2 * attention_xnorm,
        attention_softmax: 2 * attention_softmax,
        lpi: 2 * lpi,
        mlp: 2 * mlp,
        class_blocks: 2 * class_blocks,
        head: 2 * head,
        total: 2 * total,
    })
}

/// Per encoder block.
pub fn block_params(cfg: &ModelConfig) -> usize {
    let (c, h, hd) = (cfg.embed_dim, cfg.heads, cfg.hidden_dim());
    let affines = 3 * 2 * c;
    let attention = 4 * c * c + 2 * h;
    let lpi = 2 * (9 * c + c);
    let mlp = 2 * c * hd + hd + c;
    affines + attention + lpi + mlp
}

pub fn class_block_params(cfg: &ModelConfig) -> usize {
    let (c, h, hd) = (cfg.embed_dim, cfg.heads, cfg.hidden_dim());
    2 * 2 * c + 4 * c * c + 2 * h + 2 * c * hd + hd + c
}

pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let c = cfg.embed_dim;
    let stem: usize = cfg
        .stem_channels()
        .into_iter()
        .map(|(cin, cout)| cout * cin * 9 + cout)
        .sum();
    let pos = if cfg.pos_embed { cfg.tokens() * c } else { 0 };
    let head = c * cfg.num_classes + cfg.num_classes;
    Ok(stem
        + pos
        + cfg.depth * block_params(cfg)
        + c
        + cfg.class_depth * class_block_params(cfg)
        + 2 * c
        + head)
}

//! Model forward pass, written once against the tape. The plain entry points
//! run the same code on a throwaway tape.

use super::{Affine, BlockParams, ClassBlockParams, Conv, Lpi, Mlp, ModelConfig, ModelParams};
use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::grad::tape::{Tape, Var};
use crate::params::ParamTree;
use crate::tensor::{Element, Tensor};

fn affine<T: Element>(tape: &mut Tape<'_, T>, x: Var, a: &Affine<Var>) -> Result<Var> {
    tape.affine(x, a.scale, a.shift)
}

/// Multi-head XNorm attention with queries from `xq` and keys/values from `xkv`.
pub(crate) fn attention_on_tape<T: Element>(
    tape: &mut Tape<'_, T>,
    xq: Var,
    xkv: Var,
    p: &AttentionParams<Var>,
) -> Result<Var> {
    let c = tape.value(p.w_q).shape()[0];
    let d = c / p.heads;
    let eps = T::lit(p.eps);
    let q = tape.matmul(xq, p.w_q)?;
    let k = tape.matmul(xkv, p.w_k)?;
    let v = tape.matmul(xkv, p.w_v)?;
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice_cols(q, h * d, d)?;
        let kh = tape.slice_cols(k, h * d, d)?;
        let vh = tape.slice_cols(v, h * d, d)?;
        let context = tape.matmul_tn(kh, vh)?;
        let q_hat = tape.xnorm_rows(qh, p.gamma_q, h, eps)?;
        let c_hat = tape.xnorm_rows(context, p.gamma_c, h, eps)?;
        heads.push(tape.matmul(q_hat, c_hat)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    tape.matmul(merged, p.w_o)
}

fn mlp<T: Element>(tape: &mut Tape<'_, T>, x: Var, m: &Mlp<Var>) -> Result<Var> {
    let h = tape.matmul(x, m.w1)?;
    let h = tape.add_row_bias(h, m.b1)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, m.w2)?;
    tape.add_row_bias(o, m.b2)
}

fn lpi<T: Element>(tape: &mut Tape<'_, T>, x: Var, l: &Lpi<Var>, grid: (usize, usize)) -> Result<Var> {
    let (n, c) = tape.value(x).dims2("lpi")?;
    let xt = tape.transpose(x)?;
    let img = tape.reshape(xt, &[c, grid.0, grid.1])?;
    let h = tape.dwconv3x3(img, l.conv1.weight, l.conv1.bias)?;
    let h = tape.gelu(h);
    let h = tape.dwconv3x3(h, l.conv2.weight, l.conv2.bias)?;
    let flat = tape.reshape(h, &[c, n])?;
    tape.transpose(flat)
}

pub(crate) fn block_on_tape<T: Element>(
    tape: &mut Tape<'_, T>,
    x: Var,
    bp: &BlockParams<Var>,
    grid: (usize, usize),
) -> Result<Var> {
    let (n, _) = tape.value(x).dims2("block")?;
    if grid.0 * grid.1 != n {
        return Err(Error::Shape(format!(
            "token grid {}×{} does not hold {n} tokens",
            grid.0, grid.1
        )));
    }
    let a = affine(tape, x, &bp.aff_attn)?;
    let a = attention_on_tape(tape, a, a, &bp.attn)?;
    let x = tape.add(x, a)?;
    let l = affine(tape, x, &bp.aff_lpi)?;
    let l = lpi(tape, l, &bp.lpi, grid)?;
    let x = tape.add(x, l)?;
    let m = affine(tape, x, &bp.aff_mlp)?;
    let m = mlp(tape, m, &bp.mlp)?;
    tape.add(x, m)
}

/// Updates the class token only; `patches` are read, never written.
pub(crate) fn class_block_on_tape<T: Element>(
    tape: &mut Tape<'_, T>,
    cls: Var,
    patches: Var,
    bp: &ClassBlockParams<Var>,
) -> Result<Var> {
    let u = tape.concat_rows(&[cls, patches])?;
    let u = affine(tape, u, &bp.aff_attn)?;
    let q = tape.slice_rows(u, 0, 1)?;
    let a = attention_on_tape(tape, q, u, &bp.attn)?;
    let cls = tape.add(cls, a)?;
    let m = affine(tape, cls, &bp.aff_mlp)?;
    let m = mlp(tape, m, &bp.mlp)?;
    tape.add(cls, m)
}

pub(crate) fn stem_on_tape<T: Element>(
    tape: &mut Tape<'_, T>,
    img: Var,
    stem: &[Conv<Var>],
    pos_embed: Option<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let (cin, h, w) = tape.value(img).dims3("stem")?;
    if cin != cfg.in_channels {
        return Err(Error::Shape(format!(
            "image has {cin} channels, config expects {}",
            cfg.in_channels
        )));
    }
    if h != w {
        return Err(Error::Shape(format!("image must be square, got {h}×{w}")));
    }
    let grid = cfg.grid(h)?;
    let mut x = img;
    for (i, conv) in stem.iter().enumerate() {
        x = tape.conv2d(x, conv.weight, conv.bias, 2, 1)?;
        if i + 1 < stem.len() {
            x = tape.gelu(x);
        }
    }
    let n = grid.0 * grid.1;
    let flat = tape.reshape(x, &[cfg.embed_dim, n])?;
    let tokens = tape.transpose(flat)?;
    match pos_embed {
        Some(p) => {
            if tape.value(p).shape()[0] != n {
                return Err(Error::Shape(format!(
                    "position embedding holds {} tokens, input yields {n}",
                    tape.value(p).shape()[0]
                )));
            }
            tape.add(tokens, p)
        }
        None => Ok(tokens),
    }
}

/// Full forward pass on a tape; returns `1×num_classes` logits.
pub fn model_on_tape<T: Element>(
    tape: &mut Tape<'_, T>,
    img: Var,
    vars: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let h = tape.value(img).shape().get(1).copied().unwrap_or(0);
    let grid = cfg.grid(h)?;
    let mut x = stem_on_tape(tape, img, &vars.stem, vars.pos_embed, cfg)?;
    for bp in &vars.blocks {
        x = block_on_tape(tape, x, bp, grid)?;
    }
    let mut cls = vars.cls_token;
    for bp in &vars.class_blocks {
        cls = class_block_on_tape(tape, cls, x, bp)?;
    }
    let cls = affine(tape, cls, &vars.final_affine)?;
    let logits = tape.matmul(cls, vars.head_w)?;
    tape.add_row_bias(logits, vars.head_b)
}

/// Binds every parameter tensor as a borrowed tape leaf.
pub fn bind<'a, T: Element, S: ParamTree<Tensor<T>>>(tape: &mut Tape<'a, T>, params: &'a S) -> S::With<Var> {
    params.map_leaves("", &mut |_, t| tape.param(t))
}

/// Convolutional stem: `Cin×H×W` image to `N×C` tokens.
pub fn stem_forward<T: Element>(img: &Tensor<T>, mp: &ModelParams<Tensor<T>>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let stem: Vec<Conv<Var>> = mp.stem.iter().map(|c| bind(&mut tape, c)).collect();
    let pos = mp.pos_embed.as_ref().map(|p| tape.param(p));
    let img = tape.leaf(img.clone());
    let out = stem_on_tape(&mut tape, img, &stem, pos, cfg)?;
    Ok(tape.value(out).clone())
}

/// One encoder block on `x: N×C` laid out as a `rows×cols` token grid.
pub fn block_forward<T: Element>(x: &Tensor<T>, bp: &BlockParams<Tensor<T>>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, bp);
    let x = tape.leaf(x.clone());
    let out = block_on_tape(&mut tape, x, &vars, grid)?;
    Ok(tape.value(out).clone())
}

/// One class-attention block; returns the updated `1×C` class token.
pub fn class_block_forward<T: Element>(
    cls: &Tensor<T>,
    patches: &Tensor<T>,
    bp: &ClassBlockParams<Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, bp);
    let cls = tape.leaf(cls.clone());
    let patches = tape.leaf(patches.clone());
    let out = class_block_on_tape(&mut tape, cls, patches, &vars)?;
    Ok(tape.value(out).clone())
}

/// The class-attention stage on encoder output `tokens` (`N×C`). Returns
/// `[cls; tokens]` with the updated class token on top; the patch rows are the
/// input rows, since the stage reads them but never writes them.
pub fn class_stage_forward<T: Element>(tokens: &Tensor<T>, mp: &ModelParams<Tensor<T>>) -> Result<Tensor<T>> {
    let mut cls = mp.cls_token.clone();
    for bp in &mp.class_blocks {
        cls = class_block_forward(&cls, tokens, bp)?;
    }
    Tensor::concat_rows(&[&cls, tokens])
}

/// Logits (`num_classes`) for one `Cin×H×W` image.
pub fn model_forward<T: Element>(img: &Tensor<T>, mp: &ModelParams<Tensor<T>>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, mp);
    let img = tape.leaf(img.clone());
    let out = model_on_tape(&mut tape, img, &vars, cfg)?;
    tape.value(out).clone().reshape([cfg.num_classes])
}

//! Multi-head self-attention: XNorm linear attention and the softmax baseline.
//!
//! Both mechanisms project `x: N×C` with `W_Q`, `W_K`, `W_V`, split the
//! channels into `heads` groups of width `d = C / heads`, mix tokens per head,
//! concatenate the heads and apply `W_O`.
//!
//! XNorm attention computes `XN(Q_h) · XN(K_hᵀ V_h)` where `XN` scales each
//! row to length `γ` (smoothed by `eps`). `Q_h` is normalized per token across
//! its `d` channels and the `d×d` context `K_hᵀ V_h` is normalized per row
//! across its value channels. The `N×N` token affinity matrix is never formed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{join, ParamTree};
use crate::tensor::ops::gemm_acc;
use crate::tensor::{l2_normalize_axis, matmul, softmax_rows, transpose2d, Element, Gamma, Tensor};

/// Default smoothing constant in the normalization denominator `√(‖v‖² + eps²)`.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<P = Tensor<f64>> {
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    pub w_o: P,
    /// Per-head scale of the query normalization, length `heads`.
    pub gamma_q: P,
    /// Per-head scale of the context normalization, length `heads`.
    pub gamma_c: P,
    pub heads: usize,
    pub eps: f64,
}

impl<P> ParamTree<P> for AttentionParams<P> {
    type With<Q> = AttentionParams<Q>;

    fn map_leaves<'s, Q>(&'s self, path: &str, f: &mut dyn FnMut(&str, &'s P) -> Q) -> AttentionParams<Q> {
        AttentionParams {
            w_q: f(&join(path, "w_q"), &self.w_q),
            w_k: f(&join(path, "w_k"), &self.w_k),
            w_v: f(&join(path, "w_v"), &self.w_v),
            w_o: f(&join(path, "w_o"), &self.w_o),
            gamma_q: f(&join(path, "gamma_q"), &self.gamma_q),
            gamma_c: f(&join(path, "gamma_c"), &self.gamma_c),
            heads: self.heads,
            eps: self.eps,
        }
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(path, "w_q"), &mut self.w_q);
        f(&join(path, "w_k"), &mut self.w_k);
        f(&join(path, "w_v"), &mut self.w_v);
        f(&join(path, "w_o"), &mut self.w_o);
        f(&join(path, "gamma_q"), &mut self.gamma_q);
        f(&join(path, "gamma_c"), &mut self.gamma_c);
    }
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "embedding dim {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(dim / heads)
}

impl<T: Element> AttentionParams<Tensor<T>> {
    /// Weights uniform in `±1/√C`, unit gammas.
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, eps: f64, rng: &mut R) -> Result<Self> {
        check_heads(dim, heads)?;
        let bound = 1.0 / (dim as f64).sqrt();
        let mut w = || Tensor::uniform([dim, dim], -bound, bound, rng);
        Ok(AttentionParams {
            w_q: w(),
            w_k: w(),
            w_v: w(),
            w_o: w(),
            gamma_q: Tensor::full([heads], T::one()),
            gamma_c: Tensor::full([heads], T::one()),
            heads,
            eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.dim();
        check_heads(c, self.heads)?;
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if w.shape() != [c, c] {
                return Err(Error::Config(format!("{name} has shape {:?}, expected [{c}, {c}]", w.shape())));
            }
        }
        for (name, g) in [("gamma_q", &self.gamma_q), ("gamma_c", &self.gamma_c)] {
            if g.shape() != [self.heads] || !g.is_finite() {
                return Err(Error::Config(format!("{name} must hold {} finite values", self.heads)));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        self.validate()?;
        let (n, c) = x.dims2("attention")?;
        if c != self.dim() {
            return Err(Error::Dimension {
                op: "attention",
                lhs: x.shape().to_vec(),
                rhs: self.w_q.shape().to_vec(),
            });
        }
        Ok((n, c))
    }

    /// Column block of a projection weight belonging to head `h`.
    fn head_weight(w: &Tensor<T>, h: usize, d: usize) -> Result<Tensor<T>> {
        w.cols(h * d, d)
    }
}

/// Intermediates of one head, kept when the caller asks for them.
#[derive(Debug, Clone)]
pub struct HeadCache<T: Element> {
    /// Softmax stores `Q_h / √d` here.
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// XNorm: `d×d` context `Kᵀ V`. Softmax: `N×N` attention probabilities.
    pub mix: Tensor<T>,
    /// XNorm only: normalized query and normalized context.
    pub q_hat: Option<Tensor<T>>,
    pub mix_hat: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput<T: Element> {
    /// `N×C`, after the output projection.
    pub out: Tensor<T>,
    /// `N×C`, concatenated heads before the output projection.
    pub heads_out: Tensor<T>,
    pub cache: Option<Vec<HeadCache<T>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retain {
    Nothing,
    Intermediates,
}

/// Writes a `rows×d` head block into columns `h·d..(h+1)·d` of `dst` (`rows×C`).
fn scatter_head<T: Element>(dst: &mut Tensor<T>, block: &[T], h: usize, d: usize) {
    let c = dst.shape()[1];
    let out = dst.data_mut();
    for (i, row) in block.chunks_exact(d).enumerate() {
        out[i * c + h * d..i * c + (h + 1) * d].copy_from_slice(row);
    }
}

/// `softmax(Q_h K_hᵀ / √d) V_h` per head.
///
/// Scores for all heads are materialized together as an `(heads·N)×N` buffer,
/// then replaced by their row softmax. This is the quadratic baseline.
pub fn softmax_attention<T: Element>(x: &Tensor<T>, p: &AttentionParams<Tensor<T>>) -> Result<AttentionOutput<T>> {
    softmax_attention_with(x, p, Retain::Nothing)
}

pub fn softmax_attention_with<T: Element>(
    x: &Tensor<T>,
    p: &AttentionParams<Tensor<T>>,
    retain: Retain,
) -> Result<AttentionOutput<T>> {
    let (n, c) = p.check_input(x)?;
    let heads = p.heads;
    let d = c / heads;
    let scale = T::one() / T::lit(d as f64).sqrt();

    let mut scores = Tensor::try_zeros([heads * n, n])?;
    let mut qs = Vec::with_capacity(heads);
    let mut ks = Vec::with_capacity(heads);
    let mut vs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = matmul(x, &AttentionParams::head_weight(&p.w_q, h, d)?)?.map(|v| v * scale);
        let k = matmul(x, &AttentionParams::head_weight(&p.w_k, h, d)?)?;
        let v = matmul(x, &AttentionParams::head_weight(&p.w_v, h, d)?)?;
        let kt = transpose2d(&k)?;
        gemm_acc(
            q.data(),
            kt.data(),
            &mut scores.data_mut()[h * n * n..(h + 1) * n * n],
            n,
            d,
            n,
        );
        vs.push(v);
        if retain == Retain::Intermediates {
            qs.push(q);
            ks.push(k);
        }
    }
    let probs = softmax_rows(&scores)?;
    drop(scores);

    let mut heads_out = Tensor::try_zeros([n, c])?;
    let mut block = Tensor::try_zeros([n, d])?;
    for (h, v) in vs.iter().enumerate() {
        block.data_mut().iter_mut().for_each(|b| *b = T::zero());
        gemm_acc(&probs.data()[h * n * n..(h + 1) * n * n], v.data(), block.data_mut(), n, n, d);
        scatter_head(&mut heads_out, block.data(), h, d);
    }
    drop(block);
    let out = matmul(&heads_out, &p.w_o)?;

    let cache = match retain {
        Retain::Nothing => None,
        Retain::Intermediates => Some(
            qs.into_iter()
                .zip(ks)
                .zip(vs)
                .enumerate()
                .map(|(h, ((q, k), v))| {
                    Ok(HeadCache {
                        q,
                        k,
                        v,
                        mix: probs.rows(h * n, n)?,
                        q_hat: None,
                        mix_hat: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok(AttentionOutput { out, heads_out, cache })
}

/// Row-wise XNorm of a 2-D tensor: every row scaled to length `gamma`.
pub fn xnorm<T: Element>(a: &Tensor<T>, gamma: T, eps: T) -> Result<Tensor<T>> {
    let axis = a.rank().checked_sub(1).ok_or(Error::Axis { axis: 0, rank: 0 })?;
    l2_normalize_axis(a, axis, Gamma::Scalar(gamma), eps)
}

/// XNorm along `axis` of a tensor whose leading extent enumerates heads, with
/// one gamma per head.
pub fn xnorm_heads<T: Element>(a: &Tensor<T>, axis: usize, gammas: &[T], eps: T) -> Result<Tensor<T>> {
    if axis == 0 || axis >= a.rank() {
        return Err(Error::Axis { axis, rank: a.rank() });
    }
    let heads = a.shape()[0];
    if gammas.len() != heads {
        return Err(Error::Shape(format!("{} gammas for {heads} heads", gammas.len())));
    }
    let per_head = a.numel() / a.shape()[axis] / heads;
    let expanded: Vec<T> = gammas
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g, per_head))
        .collect();
    l2_normalize_axis(a, axis, Gamma::PerSlice(&expanded), eps)
}

/// `XN(Q_h) · XN(K_hᵀ V_h)` per head; linear in the token count.
pub fn xnorm_attention<T: Element>(x: &Tensor<T>, p: &AttentionParams<Tensor<T>>) -> Result<AttentionOutput<T>> {
    xnorm_attention_with(x, p, Retain::Nothing)
}

pub fn xnorm_attention_with<T: Element>(
    x: &Tensor<T>,
    p: &AttentionParams<Tensor<T>>,
    retain: Retain,
) -> Result<AttentionOutput<T>> {
    let (n, c) = p.check_input(x)?;
    xnorm_core(x, x, p, retain, n, c)
}

/// Shared body of self- and class attention: queries come from `xq`, keys and
/// values from `xkv`.
fn xnorm_core<T: Element>(
    xq: &Tensor<T>,
    xkv: &Tensor<T>,
    p: &AttentionParams<Tensor<T>>,
    retain: Retain,
    nq: usize,
    c: usize,
) -> Result<AttentionOutput<T>> {
    let d = c / p.heads;
    let eps = T::lit(p.eps);
    let mut heads_out = Tensor::try_zeros([nq, c])?;
    let mut cache = Vec::new();
    for h in 0..p.heads {
        let q = matmul(xq, &AttentionParams::head_weight(&p.w_q, h, d)?)?;
        let k = matmul(xkv, &AttentionParams::head_weight(&p.w_k, h, d)?)?;
        let v = matmul(xkv, &AttentionParams::head_weight(&p.w_v, h, d)?)?;
        let context = matmul(&transpose2d(&k)?, &v)?;
        let q_hat = xnorm(&q, p.gamma_q.data()[h], eps)?;
        let c_hat = xnorm(&context, p.gamma_c.data()[h], eps)?;
        let mixed = matmul(&q_hat, &c_hat)?;
        scatter_head(&mut heads_out, mixed.data(), h, d);
        if retain == Retain::Intermediates {
            cache.push(HeadCache {
                q,
                k,
                v,
                mix: context,
                q_hat: Some(q_hat),
                mix_hat: Some(c_hat),
            });
        }
    }
    let out = matmul(&heads_out, &p.w_o)?;
    Ok(AttentionOutput {
        out,
        heads_out,
        cache: (retain == Retain::Intermediates).then_some(cache),
    })
}

/// `max |(Q Kᵀ) V − Q (Kᵀ V)|`.
pub fn assoc_check<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<f64> {
    q.dims2("assoc_check")?;
    if q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(Error::Dimension {
            op: "assoc_check",
            lhs: q.shape().to_vec(),
            rhs: if q.shape() != k.shape() { k.shape().to_vec() } else { v.shape().to_vec() },
        });
    }
    let kt = transpose2d(k)?;
    let quadratic = matmul(&matmul(q, &kt)?, v)?;
    let linear = matmul(q, &matmul(&kt, v)?)?;
    quadratic.max_abs_diff(&linear)
}

/// Attention with the class token as the only query. Keys and values are
/// `[cls; tokens]`; `tokens` may be absent.
pub fn class_attention<T: Element>(
    cls: &Tensor<T>,
    tokens: Option<&Tensor<T>>,
    p: &AttentionParams<Tensor<T>>,
) -> Result<Tensor<T>> {
    let (one, c) = p.check_input(cls)?;
    if one != 1 {
        return Err(Error::Shape(format!("class token must be 1×C, got {:?}", cls.shape())));
    }
    let keys = match tokens {
        Some(t) => {
            let (_, tc) = t.dims2("class_attention")?;
            if tc != c {
                return Err(Error::Dimension {
                    op: "class_attention",
                    lhs: cls.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            Tensor::concat_rows(&[cls, t])?
        }
        None => cls.clone(),
    };
    Ok(xnorm_core(cls, &keys, p, Retain::Nothing, 1, c)?.out)
}

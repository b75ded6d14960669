//! Adjoints of the forward ops. Each takes the upstream gradient `g` and the
//! saved forward context and returns gradients for the op's inputs.

use crate::error::{Error, Result};
use crate::tensor::ops::{col2im, conv_out_extent, for_each_tap, im2col, matmul_t, AxisLayout, ConvGeometry, GELU_CUBIC, GELU_SQRT_2_OVER_PI};
use crate::tensor::{Element, Gamma, Tensor};

fn expect_same<T: Element>(g: &Tensor<T>, x: &Tensor<T>, op: &'static str) -> Result<()> {
    g.same_shape(x, op)
}

/// `grad_a = g·bᵀ`, `grad_b = aᵀ·g`.
pub fn backward_matmul<T: Element>(g: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let ga = matmul_t(g, false, b, true)?;
    let gb = matmul_t(a, true, g, false)?;
    Ok((ga, gb))
}

/// Gradient of row softmax given its output `y`: `y ⊙ (g − ⟨g, y⟩)` per row.
pub fn backward_softmax_rows<T: Element>(g: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    expect_same(g, y, "backward_softmax_rows")?;
    let (_, p) = y.dims2("backward_softmax_rows")?;
    let mut out = Tensor::zeros(y.shape().to_vec());
    for ((o, gr), yr) in out
        .data_mut()
        .chunks_mut(p)
        .zip(g.data().chunks(p))
        .zip(y.data().chunks(p))
    {
        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        for ((o, &gi), &yi) in o.iter_mut().zip(gr).zip(yr) {
            *o = yi * (gi - dot);
        }
    }
    Ok(out)
}

/// Gradient of `γ·v/n`, `n = √(‖v‖² + eps²)`, for every slice along `axis`:
/// `grad_v = (γ/n)·(g − (⟨g,v⟩/n²)·v)` and `grad_γ = ⟨g,v⟩/n`.
///
/// The gamma gradient is returned per slice; callers sum slices that share a
/// gamma.
pub fn backward_xnorm<T: Element>(
    g: &Tensor<T>,
    v: &Tensor<T>,
    axis: usize,
    gamma: Gamma<'_, T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    expect_same(g, v, "backward_xnorm")?;
    let layout = AxisLayout::new(v.shape(), axis)?;
    if let Gamma::PerSlice(gs) = gamma {
        if gs.len() != layout.slices() {
            return Err(Error::Shape(format!("{} gammas for {} slices", gs.len(), layout.slices())));
        }
    }
    let mut gv = Tensor::zeros(v.shape().to_vec());
    let mut ggamma = Vec::with_capacity(layout.slices());
    let (vd, gd) = (v.data(), g.data());
    let out = gv.data_mut();
    let eps2 = eps * eps;
    for s in 0..layout.slices() {
        let base = layout.base(s);
        let idx = (0..layout.len).map(|i| base + i * layout.inner);
        let sq: T = idx.clone().map(|i| vd[i] * vd[i]).sum();
        let dot: T = idx.clone().map(|i| gd[i] * vd[i]).sum();
        let n2 = sq + eps2;
        let n = n2.sqrt();
        let gam = match gamma {
            Gamma::Scalar(x) => x,
            Gamma::PerSlice(gs) => gs[s],
        };
        let radial = dot / n2;
        for i in idx {
            out[i] = gam / n * (gd[i] - radial * vd[i]);
        }
        ggamma.push(dot / n);
    }
    Ok((gv, ggamma))
}

/// Derivative of the tanh GELU approximation, applied to `g`.
pub fn backward_gelu<T: Element>(g: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    g.zip_map(x, "backward_gelu", |gi, xi| gi * gelu_derivative(xi))
}

pub(crate) fn gelu_derivative<T: Element>(x: T) -> T {
    let k = T::lit(GELU_SQRT_2_OVER_PI);
    let c = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// Gradients of `x ⊙ scale + shift` (per column): `(grad_x, grad_scale, grad_shift)`.
pub fn backward_affine<T: Element>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    scale: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    expect_same(g, x, "backward_affine")?;
    let (_, c) = x.dims2("backward_affine")?;
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let mut gs = Tensor::zeros([c]);
    let mut gb = Tensor::zeros([c]);
    for ((gxr, gr), xr) in gx
        .data_mut()
        .chunks_mut(c)
        .zip(g.data().chunks(c))
        .zip(x.data().chunks(c))
    {
        for j in 0..c {
            gxr[j] = gr[j] * scale.data()[j];
            gs.data_mut()[j] += gr[j] * xr[j];
            gb.data_mut()[j] += gr[j];
        }
    }
    Ok((gx, gs, gb))
}

/// Column sums of `g: M×P`, the gradient of a broadcast row bias.
pub fn backward_row_bias<T: Element>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, p) = g.dims2("backward_row_bias")?;
    let mut gb = Tensor::zeros([p]);
    for row in g.data().chunks(p) {
        for (b, &x) in gb.data_mut().iter_mut().zip(row) {
            *b += x;
        }
    }
    Ok(gb)
}

/// Gradients of [`crate::tensor::conv2d`]: `(grad_x, grad_w, grad_bias)`.
pub fn backward_conv2d<T: Element>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (cin, h, wd) = x.dims3("backward_conv2d")?;
    let (cout, oh, ow) = g.dims3("backward_conv2d")?;
    let k = w.shape()[2];
    if w.shape() != [cout, cin, k, k] {
        return Err(Error::Dimension {
            op: "backward_conv2d",
            lhs: g.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if conv_out_extent(h, k, stride, padding)? != oh || conv_out_extent(wd, k, stride, padding)? != ow {
        return Err(Error::Dimension {
            op: "backward_conv2d",
            lhs: g.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let geo = ConvGeometry { cin, h, w: wd, k, stride, padding, oh, ow };
    let patch = cin * k * k;
    let g2 = Tensor::from_vec([cout, oh * ow], g.data().to_vec())?;
    let cols = im2col(x.data(), &geo)?.reshape([patch, oh * ow])?;
    let gw = matmul_t(&g2, false, &cols, true)?.reshape(w.shape().to_vec())?;
    let w2 = Tensor::from_vec([cout, patch], w.data().to_vec())?;
    let gcols = matmul_t(&w2, true, &g2, false)?;
    let gx = col2im(gcols.data(), &geo)?;
    let gb = Tensor::from_vec([cout], g2.data().chunks_exact(oh * ow).map(|p| p.iter().copied().sum()).collect())?;
    Ok((gx, gw, gb))
}

/// Gradients of [`crate::tensor::depthwise_conv3x3`]: `(grad_x, grad_w, grad_bias)`.
pub fn backward_depthwise_conv3x3<T: Element>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    expect_same(g, x, "backward_depthwise_conv3x3")?;
    let (c, h, wd) = x.dims3("backward_depthwise_conv3x3")?;
    if w.shape() != [c, 3, 3] {
        return Err(Error::Dimension {
            op: "backward_depthwise_conv3x3",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let mut gw = Tensor::zeros([c, 3, 3]);
    let plane = h * wd;
    let gb: Vec<T> = g.data().chunks_exact(plane).map(|p| p.iter().copied().sum()).collect();
    for (((gp, xp), gxp), (wk, gwk)) in g
        .data()
        .chunks_exact(plane)
        .zip(x.data().chunks_exact(plane))
        .zip(gx.data_mut().chunks_exact_mut(plane))
        .zip(w.data().chunks_exact(9).zip(gw.data_mut().chunks_exact_mut(9)))
    {
        for_each_tap(h, wd, |tap, orow, irow, len| {
            let wv = wk[tap];
            let go = &gp[orow..orow + len];
            let mut acc = T::zero();
            for ((&go, &xi), gxi) in go.iter().zip(&xp[irow..irow + len]).zip(&mut gxp[irow..irow + len]) {
                acc += go * xi;
                *gxi += go * wv;
            }
            gwk[tap] += acc;
        });
    }
    Ok((gx, gw, Tensor::from_vec([c], gb)?))
}

/// Cross-entropy of one row of logits against `label`: `(loss, softmax − onehot)`.
pub fn cross_entropy<T: Element>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::Data(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| (z - lse).exp() - if i == label { T::one() } else { T::zero() })
        .collect();
    Ok((lse - logits[label], grad))
}

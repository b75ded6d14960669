//! The closed op set: matmul, transpose, row softmax, axis L2 normalization,
//! convolutions and GELU.

use rayon::prelude::*;

use super::{is_deterministic, DType, Element, Tensor};
use crate::error::{Error, Result};

/// Products at or above this many multiply-accumulates are split across
/// threads when deterministic mode is off.
const PAR_MACS: usize = 1 << 20;

/// `c += a · b` on raw row-major slices: `a` is `m×k`, `b` is `k×p`, `c` is `m×p`.
///
/// Splitting rows across threads leaves the per-element accumulation order
/// unchanged, so results are bit-identical with deterministic mode on or off.
pub(crate) fn gemm_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * p);
    assert_eq!(c.len(), m * p);
    if m == 0 || k == 0 || p == 0 {
        return;
    }
    if !is_deterministic() && m > 1 && m * k * p >= PAR_MACS {
        let rows = m.div_ceil(rayon::current_num_threads()).max(1);
        c.par_chunks_mut(rows * p).enumerate().for_each(|(i, cblock)| {
            let mi = cblock.len() / p;
            gemm_block(&a[i * rows * k..(i * rows + mi) * k], b, cblock, mi, k, p);
        });
    } else {
        gemm_block(a, b, c, m, k, p);
    }
}

/// Row-major `c += a·b` through the packed kernels of `matrixmultiply`.
fn gemm_block<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    gemm_strided(a, [k as isize, 1], b, [p as isize, 1], c, m, k, p);
}

/// `c += a·b` where `a` (`m×k`) and `b` (`k×p`) are read through `[row, col]`
/// strides, so transposed operands need no copy. `c` is row-major `m×p`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Element>(a: &[T], sa: [isize; 2], b: &[T], sb: [isize; 2], c: &mut [T], m: usize, k: usize, p: usize) {
    let (pc, rsc) = (c.as_mut_ptr(), p as isize);
    // SAFETY: callers guarantee every index reachable through the strides
    // lies inside `a` and `b`, and `c` holds m·p elements; `T` is exactly f32
    // or f64 as its DTYPE says.
    unsafe {
        match T::DTYPE {
            DType::F64 => matrixmultiply::dgemm(
                m, k, p, 1.0,
                a.as_ptr().cast(), sa[0], sa[1],
                b.as_ptr().cast(), sb[0], sb[1],
                1.0,
                pc.cast(), rsc, 1,
            ),
            DType::F32 => matrixmultiply::sgemm(
                m, k, p, 1.0,
                a.as_ptr().cast(), sa[0], sa[1],
                b.as_ptr().cast(), sb[0], sb[1],
                1.0,
                pc.cast(), rsc, 1,
            ),
        }
    }
}

/// `op(a)·op(b)` where `op` transposes a 2-D operand when its flag is set.
pub(crate) fn matmul_t<T: Element>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let (ar, ac) = a.dims2("matmul")?;
    let (br, bc) = b.dims2("matmul")?;
    let (m, k, sa) = if ta { (ac, ar, [1, ac as isize]) } else { (ar, ac, [ac as isize, 1]) };
    let (k2, p, sb) = if tb { (bc, br, [1, bc as isize]) } else { (br, bc, [bc as isize, 1]) };
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::try_zeros([m, p])?;
    if m > 0 && k > 0 && p > 0 {
        if !ta && !tb {
            gemm_acc(a.data(), b.data(), out.data_mut(), m, k, p);
        } else {
            gemm_strided(a.data(), sa, b.data(), sb, out.data_mut(), m, k, p);
        }
    }
    Ok(out)
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, p) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::try_zeros([m, p])?;
    gemm_acc(a.data(), b.data(), out.data_mut(), m, k, p);
    Ok(out)
}

pub fn transpose2d<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("transpose2d")?;
    let mut out = Tensor::try_zeros([k, m])?;
    let src = a.data();
    let dst = out.data_mut();
    for i in 0..m {
        for j in 0..k {
            dst[j * m + i] = src[i * k + j];
        }
    }
    Ok(out)
}

/// In-place row softmax over a flat `rows×cols` buffer.
pub(crate) fn softmax_rows_in_place<T: Element>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = T::one() / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// Softmax along each row, with the row maximum subtracted before exponentiation.
///
/// Rejects non-finite input.
pub fn softmax_rows<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, p) = a.dims2("softmax_rows")?;
    if let Some(bad) = a.data().iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("softmax_rows input contains {bad}")));
    }
    let mut out = a.clone();
    softmax_rows_in_place(out.data_mut(), p);
    Ok(out)
}

/// Scale applied after normalization: one value for every slice, or one per slice.
#[derive(Debug, Clone, Copy)]
pub enum Gamma<'a, T> {
    Scalar(T),
    PerSlice(&'a [T]),
}

/// Layout of the 1-D slices obtained by fixing every index except `axis`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisLayout {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisLayout {
    pub fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        Ok(AxisLayout {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    pub fn slices(&self) -> usize {
        self.outer * self.inner
    }

    /// Flat offset of the first element of slice `s`; elements are `inner` apart.
    pub fn base(&self, s: usize) -> usize {
        (s / self.inner) * self.len * self.inner + s % self.inner
    }
}

/// Maps every slice `v` along `axis` to `γ·v / √(‖v‖² + eps²)`.
pub fn l2_normalize_axis<T: Element>(
    a: &Tensor<T>,
    axis: usize,
    gamma: Gamma<'_, T>,
    eps: T,
) -> Result<Tensor<T>> {
    if !(eps > T::zero()) {
        return Err(Error::Numeric(format!("eps must be positive, got {eps}")));
    }
    let layout = AxisLayout::new(a.shape(), axis)?;
    if let Gamma::PerSlice(g) = gamma {
        if g.len() != layout.slices() {
            return Err(Error::Shape(format!(
                "{} gamma values for {} slices",
                g.len(),
                layout.slices()
            )));
        }
    }
    let mut out = Tensor::try_zeros(a.shape().to_vec())?;
    let src = a.data();
    let dst = out.data_mut();
    let eps2 = eps * eps;
    for s in 0..layout.slices() {
        let base = layout.base(s);
        let idx = (0..layout.len).map(|i| base + i * layout.inner);
        let sq: T = idx.clone().map(|i| src[i] * src[i]).sum();
        let g = match gamma {
            Gamma::Scalar(g) => g,
            Gamma::PerSlice(g) => g[s],
        };
        let factor = g / (sq + eps2).sqrt();
        for i in idx {
            dst[i] = src[i] * factor;
        }
    }
    Ok(out)
}

/// Per-channel 3×3 cross-correlation with one pixel of zero padding.
pub fn depthwise_conv3x3<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (c, h, wd) = x.dims3("depthwise_conv3x3")?;
    if w.shape() != [c, 3, 3] {
        return Err(Error::Dimension {
            op: "depthwise_conv3x3",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    check_bias(bias, c, "depthwise_conv3x3")?;
    let mut out = Tensor::try_zeros([c, h, wd])?;
    let plane = h * wd;
    for ((src, dst), (kw, ch)) in x
        .data()
        .chunks_exact(plane)
        .zip(out.data_mut().chunks_exact_mut(plane))
        .zip(w.data().chunks_exact(9).zip(0..))
    {
        for_each_tap(h, wd, |tap, orow, irow, len| {
            let wv = kw[tap];
            for (o, &i) in dst[orow..orow + len].iter_mut().zip(&src[irow..irow + len]) {
                *o += wv * i;
            }
        });
        if let Some(b) = bias {
            let b = b.data()[ch];
            dst.iter_mut().for_each(|o| *o += b);
        }
    }
    Ok(out)
}

/// Visits every (tap, output row) pair of a zero-padded 3×3 stencil over an
/// `h×w` plane as `f(tap, out_offset, in_offset, len)`: `len` contiguous
/// outputs starting at `out_offset` read inputs starting at `in_offset`.
#[inline]
pub(crate) fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    for ky in 0..3 {
        for kx in 0..3 {
            // Output (oy, ox) reads input (oy + ky − 1, ox + kx − 1).
            let (oy0, oy1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
            let (ox0, ox1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
            if ox1 <= ox0 {
                continue;
            }
            for oy in oy0..oy1 {
                let iy = oy + ky - 1;
                f(ky * 3 + kx, oy * w + ox0, iy * w + ox0 + kx - 1, ox1 - ox0);
            }
        }
    }
}

fn check_bias<T: Element>(bias: Option<&Tensor<T>>, channels: usize, op: &'static str) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::Dimension {
            op,
            lhs: vec![channels],
            rhs: b.shape().to_vec(),
        }),
        _ => Ok(()),
    }
}

/// Output extent of a convolution along one axis (floor division, as is
/// conventional for strided convolutions).
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("conv stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Dense 2-D cross-correlation, `x: Cin×H×W`, `w: Cout×Cin×k×k`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (cin, h, wd) = x.dims3("conv2d")?;
    let (cout, wcin, k, k2) = match w.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::Rank {
                op: "conv2d",
                expected: 4,
                shape: w.shape().to_vec(),
            })
        }
    };
    if wcin != cin || k != k2 {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    check_bias(bias, cout, "conv2d")?;
    let oh = conv_out_extent(h, k, stride, padding)?;
    let ow = conv_out_extent(wd, k, stride, padding)?;
    let geo = ConvGeometry { cin, h, w: wd, k, stride, padding, oh, ow };
    let cols = im2col(x.data(), &geo)?;
    let mut out = Tensor::try_zeros([cout, oh, ow])?;
    gemm_acc(w.data(), cols.data(), out.data_mut(), cout, cin * k * k, oh * ow);
    if let Some(b) = bias {
        for (plane, &b) in out.data_mut().chunks_exact_mut(oh * ow).zip(b.data()) {
            plane.iter_mut().for_each(|o| *o += b);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    /// Input offset read by patch row `(ci, ky, kx)` at output `(oy, ox)`,
    /// or `None` inside the zero padding.
    #[inline]
    fn source(&self, ci: usize, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (iy < self.h && ix < self.w).then(|| (ci * self.h + iy) * self.w + ix)
    }
}

/// Unfolds `x: Cin×H×W` into `(Cin·k·k) × (oh·ow)` patch columns.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeometry) -> Result<Tensor<T>> {
    let mut cols = Tensor::try_zeros([g.cin * g.k * g.k, g.oh * g.ow])?;
    let dst = cols.data_mut();
    let mut r = 0;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut dst[r * g.oh * g.ow..(r + 1) * g.oh * g.ow];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some(src) = g.source(ci, ky, kx, oy, ox) {
                            row[oy * g.ow + ox] = x[src];
                        }
                    }
                }
                r += 1;
            }
        }
    }
    Ok(cols)
}

/// Adjoint of [`im2col`]: scatters patch columns back onto `Cin×H×W`, summing
/// overlaps.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeometry) -> Result<Tensor<T>> {
    let mut x = Tensor::try_zeros([g.cin, g.h, g.w])?;
    let dst = x.data_mut();
    let mut r = 0;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[r * g.oh * g.ow..(r + 1) * g.oh * g.ow];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some(d) = g.source(ci, ky, kx, oy, ox) {
                            dst[d] += row[oy * g.ow + ox];
                        }
                    }
                }
                r += 1;
            }
        }
    }
    Ok(x)
}

/// √(2/π), the slope constant of the tanh GELU approximation.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_CUBIC: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu_scalar<T: Element>(x: T) -> T {
    let u = T::lit(GELU_SQRT_2_OVER_PI) * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`, elementwise.
pub fn gelu<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    a.map(gelu_scalar)
}

/// Per-channel `x ⊙ scale + shift` over the columns of `x: M×C`.
pub fn affine<T: Element>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = x.dims2("affine")?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::Dimension {
            op: "affine",
            lhs: x.shape().to_vec(),
            rhs: scale.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for ((o, &s), &b) in row.iter_mut().zip(scale.data()).zip(shift.data()) {
            *o = *o * s + b;
        }
    }
    Ok(out)
}

/// Adds `bias: P` to every row of `x: M×P`.
pub fn add_row_bias<T: Element>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, p) = x.dims2("add_row_bias")?;
    if bias.shape() != [p] {
        return Err(Error::Dimension {
            op: "add_row_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(p) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

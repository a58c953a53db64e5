use crate::error::{Error, Result};

/// Resolves `(m, k, n)` for `op(a) · op(b)` where `op` optionally transposes
/// a 2-D operand.
pub(crate) fn matmul_dims(
    a: &[usize],
    b: &[usize],
    ta: bool,
    tb: bool,
) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 {
        return Err(Error::Shape(format!(
            "matmul needs 2-D operands, got {a:?} and {b:?}"
        )));
    }
    let (m, ka) = if ta { (a[1], a[0]) } else { (a[0], a[1]) };
    let (kb, n) = if tb { (b[1], b[0]) } else { (b[0], b[1]) };
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: {a:?}{} x {b:?}{}",
            if ta { "ᵀ" } else { "" },
            if tb { "ᵀ" } else { "" }
        )));
    }
    Ok((m, ka, n))
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `C[m×n] = op(A)[m×k] · op(B)[k×n]`. With `ta` the buffer `a` holds a
/// `k×m` matrix; with `tb`, `b` holds `n×k`.
pub(crate) fn gemm(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_acc(&mut c, a, b, m, k, n, ta, tb);
    c
}

/// Accumulating form of [`gemm`]: `C += op(A) · op(B)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    c: &mut [f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    let at;
    let a = if ta {
        at = transpose(a, k, m);
        &at[..]
    } else {
        a
    };
    if tb {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += ar[p] * br[p];
                }
                c[i * n + j] += s;
            }
        }
    } else {
        for i in 0..m {
            let cr = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let br = &b[p * n..(p + 1) * n];
                for (cv, &bv) in cr.iter_mut().zip(br) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// Geometry of a square-kernel 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects B×C×H×W input and F×C×k×k weight, got {input:?} and {weight:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        let [batch, in_c, h, w] = [input[0], input[1], input[2], input[3]];
        let [out_c, wc, k, k2] = [weight[0], weight[1], weight[2], weight[3]];
        if wc != in_c || k != k2 {
            return Err(Error::Shape(format!(
                "conv2d weight {weight:?} incompatible with input {input:?}"
            )));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::Shape(format!(
                "kernel {k} larger than padded input {h}×{w} (pad {pad})"
            )));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            batch,
            in_c,
            h,
            w,
            out_c,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_c, self.h, self.w]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_c, self.in_c, self.k, self.k]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_c, self.oh, self.ow]
    }

    /// Rows of the unrolled patch matrix (`C·k·k`).
    pub fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    /// Output positions per image.
    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// For each (patch row, position), the flat index into one input image,
    /// or `None` when the tap falls into zero padding.
    fn tap(&self, c: usize, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + ki) as isize - self.pad as isize;
        let x = (ox * self.stride + kj) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((c * self.h + y as usize) * self.w + x as usize)
        }
    }
}

/// Unrolls one image (`C×H×W`) into a `(C·k·k) × (oh·ow)` patch matrix.
pub(crate) fn im2col<T: Copy + Default>(img: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let mut cols = vec![T::default(); g.patch_len() * p];
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some(src) = g.tap(c, ki, kj, oy, ox) {
                            dst[oy * g.ow + ox] = img[src];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters a patch matrix back into an image.
fn col2im_acc(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let src = &cols[r * p..(r + 1) * p];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some(dst) = g.tap(c, ki, kj, oy, ox) {
                            img[dst] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let img = g.in_c * g.h * g.w;
    let out_img = g.out_c * g.positions();
    let mut out = vec![0.0; g.batch * out_img];
    for b in 0..g.batch {
        let cols = im2col(&x[b * img..(b + 1) * img], g);
        gemm_acc(
            &mut out[b * out_img..(b + 1) * out_img],
            w,
            &cols,
            g.out_c,
            g.patch_len(),
            g.positions(),
            false,
            false,
        );
    }
    out
}

/// Gradient of `⟨conv2d(x, w), dy⟩` with respect to `x`.
pub(crate) fn conv2d_back_input(dy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let img = g.in_c * g.h * g.w;
    let out_img = g.out_c * g.positions();
    let mut dx = vec![0.0; g.batch * img];
    for b in 0..g.batch {
        let dcols = gemm(
            w,
            &dy[b * out_img..(b + 1) * out_img],
            g.patch_len(),
            g.out_c,
            g.positions(),
            true,
            false,
        );
        col2im_acc(&dcols, g, &mut dx[b * img..(b + 1) * img]);
    }
    dx
}

/// Gradient of `⟨conv2d(x, w), dy⟩` with respect to `w`.
pub(crate) fn conv2d_back_weight(x: &[f64], dy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let img = g.in_c * g.h * g.w;
    let out_img = g.out_c * g.positions();
    let mut dw = vec![0.0; g.out_c * g.patch_len()];
    for b in 0..g.batch {
        let cols = im2col(&x[b * img..(b + 1) * img], g);
        gemm_acc(
            &mut dw,
            &dy[b * out_img..(b + 1) * out_img],
            &cols,
            g.out_c,
            g.positions(),
            g.patch_len(),
            false,
            true,
        );
    }
    dw
}

/// 2×2 max-pool with stride 2 (floor). Returns the flat source index of each
/// output element; ties go to the first element in scan order.
pub(crate) fn max_pool2_indices(x: &[f64], shape: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
        return Err(Error::Shape(format!(
            "max_pool2 needs B×C×H×W with H, W ≥ 2, got {shape:?}"
        )));
    }
    let [b, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, vec![b, c, oh, ow]))
}

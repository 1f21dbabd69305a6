//! Raw slice kernels shared by the graph ops and their backward passes.
//!
//! Every product accumulates each output element over the inner index in
//! ascending order starting from zero, so results are reproducible bit for bit.

use crate::tensor::Scalar;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let brow = &b[t * n..(t + 1) * n];
            for (cj, &bv) in row.iter_mut().zip(brow) {
                *cj += av * bv;
            }
        }
    }
    c
}

/// `c[k×n] = aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let row = &mut c[t * n..(t + 1) * n];
            for (cj, &bv) in row.iter_mut().zip(brow) {
                *cj += av * bv;
            }
        }
    }
    c
}

/// `c[m×k] = a · bᵀ` with `a[m×n]`, `b[k×n]`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + j] = s;
        }
    }
    c
}

/// Geometry of a 2-D cross-correlation over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Returns `None` when the output extent is not integral or the kernel
    /// exceeds the padded input.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return None;
        }
        let ph = height + 2 * pad;
        let pw = width + 2 * pad;
        if kh > ph || kw > pw || !(ph - kh).is_multiple_of(stride) || !(pw - kw).is_multiple_of(stride) {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image `[C×H×W]` into columns `[C·kh·kw × H'·W']`.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.out_len();
    let mut cols = vec![T::zero(); g.patch_len() * ncols];
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &img[(c * g.height + iy as usize) * g.width..];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back into an image buffer.
pub fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let ncols = g.out_len();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + iy as usize) * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            img[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Row-wise softmax of `scores[rows×cols]`, in place.
pub fn softmax_rows<T: Scalar>(scores: &mut [T], cols: usize) {
    for row in scores.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Single-group attention forward. Returns `(output[L×dv], probs[L×S])`.
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    l: usize,
    s: usize,
    d: usize,
    dv: usize,
) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut probs = matmul_nt(q, k, l, d, s);
    for p in probs.iter_mut() {
        *p *= scale;
    }
    softmax_rows(&mut probs, s);
    let out = matmul(&probs, v, l, s, dv);
    (out, probs)
}

/// Single-group attention backward. Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    l: usize,
    s: usize,
    d: usize,
    dv: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::one() / T::of(d as f64).sqrt();
    let grad_v = matmul_tn(probs, dout, l, s, dv);
    let dp = matmul_nt(dout, v, l, dv, s);
    let mut ds = vec![T::zero(); l * s];
    for i in 0..l {
        let prow = &probs[i * s..(i + 1) * s];
        let dprow = &dp[i * s..(i + 1) * s];
        let inner: T = prow.iter().zip(dprow).map(|(&p, &g)| p * g).sum();
        for j in 0..s {
            ds[i * s + j] = prow[j] * (dprow[j] - inner) * scale;
        }
    }
    let grad_q = matmul(&ds, k, l, s, d);
    let grad_k = matmul_tn(&ds, q, l, s, d);
    (grad_q, grad_k, grad_v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_round_trip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let shape = [2, 3, 4];
        let perm = [2, 0, 1];
        let (p, pshape) = permute(&data, &shape, &perm);
        assert_eq!(pshape, vec![4, 2, 3]);
        // out[i,j,k] = in[j,k,i]
        assert_eq!(p[6 + 3 + 2], data[12 + 2 * 4 + 1]);
        let (back, bshape) = permute(&p, &pshape, &inverse_permutation(&perm));
        assert_eq!(bshape, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn conv_geometry_rejects_fractional_extent() {
        assert!(ConvGeom::new(1, 4, 4, 3, 3, 2, 1).is_none());
        let g = ConvGeom::new(1, 4, 4, 4, 4, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (2, 2));
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3×4
        let c = matmul(&a, &b, 2, 3, 4);
        // aᵀ stored as 3×2
        let (at, _) = permute(&a, &[2, 3], &[1, 0]);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), c);
        let (bt, _) = permute(&b, &[3, 4], &[1, 0]);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), c);
    }
}

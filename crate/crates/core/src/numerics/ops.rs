//! Forward kernels shared by the tape and by tape-free callers.
//!
//! All reductions run in a fixed loop order so repeated evaluations are
//! bitwise reproducible.

use crate::error::{Error, Result};

use super::tensor::{Real, Tensor};

pub fn matmul<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![E::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = E::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (k, m, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![E::zero(); m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for i in 0..m {
            let aip = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Row-wise softmax restricted to entries where `mask` is 1.
///
/// Masked entries are exactly zero. Each row is stabilized by subtracting
/// the maximum over its unmasked logits.
pub fn softmax_rows<E: Real>(x: &Tensor<E>, mask: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape() != mask.shape() || x.rank() != 2 {
        return Err(Error::shape("softmax_rows", x.shape(), mask.shape()));
    }
    let keep: Vec<bool> = mask.data().iter().map(|&m| m != E::zero()).collect();
    softmax_rows_masked(x, &keep)
}

pub(crate) fn softmax_rows_masked<E: Real>(x: &Tensor<E>, keep: &[bool]) -> Result<Tensor<E>> {
    if x.rank() != 2 || keep.len() != x.len() {
        return Err(Error::shape("softmax_rows", x.shape(), &[keep.len()]));
    }
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let row = x.row(i);
        let krow = &keep[i * n..(i + 1) * n];
        let mut max = E::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if krow[j] && v > max {
                max = v;
            }
        }
        if max == E::neg_infinity() {
            return Err(Error::EmptyMaskRow { row: i });
        }
        let orow = &mut out[i * n..(i + 1) * n];
        let mut total = E::zero();
        for j in 0..n {
            if krow[j] {
                let e = (row[j] - max).exp();
                orow[j] = e;
                total = total + e;
            }
        }
        for j in 0..n {
            if krow[j] {
                orow[j] = orow[j] / total;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Strided 1-D convolution over the leading (sequence) axis.
///
/// `x` is `[L, c_in]`, `weights` is `[kernel, c_in, c_out]`, `bias` is
/// `[c_out]`. Output position `p` reads exactly rows `p*stride .. p*stride+kernel`.
pub fn conv1d_strided<E: Real>(
    x: &Tensor<E>,
    weights: &Tensor<E>,
    bias: &Tensor<E>,
    kernel: usize,
    stride: usize,
) -> Result<Tensor<E>> {
    let (len, c_in, c_out) = conv_dims(x, weights, bias, kernel, stride)?;
    let out_len = (len - kernel) / stride + 1;
    let w = weights.data();
    let mut out = vec![E::zero(); out_len * c_out];
    for p in 0..out_len {
        let orow = &mut out[p * c_out..(p + 1) * c_out];
        orow.copy_from_slice(bias.data());
        for k in 0..kernel {
            let xrow = x.row(p * stride + k);
            for (ci, &xv) in xrow.iter().enumerate() {
                let wrow = &w[(k * c_in + ci) * c_out..(k * c_in + ci + 1) * c_out];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o = *o + xv * wv;
                }
            }
        }
    }
    Tensor::from_vec(&[out_len, c_out], out)
}

pub(crate) fn conv_dims<E: Real>(
    x: &Tensor<E>,
    weights: &Tensor<E>,
    bias: &Tensor<E>,
    kernel: usize,
    stride: usize,
) -> Result<(usize, usize, usize)> {
    if kernel == 0 || kernel != stride {
        return Err(Error::Invalid(format!(
            "conv1d requires kernel == stride > 0, got kernel={kernel} stride={stride}"
        )));
    }
    if x.rank() != 2 || weights.rank() != 3 {
        return Err(Error::shape("conv1d", x.shape(), weights.shape()));
    }
    let (len, c_in) = (x.rows(), x.cols());
    let ws = weights.shape();
    if ws[0] != kernel || ws[1] != c_in || bias.shape() != [ws[2]] {
        return Err(Error::shape("conv1d", weights.shape(), &[kernel, c_in]));
    }
    if len < kernel {
        return Err(Error::Invalid(format!(
            "conv1d input length {len} shorter than kernel {kernel}"
        )));
    }
    Ok((len, c_in, ws[2]))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization to zero mean and unit variance (no affine part).
/// Returns the normalized rows and the per-row reciprocal standard deviation.
pub fn layer_norm_rows<E: Real>(x: &Tensor<E>) -> (Tensor<E>, Vec<E>) {
    let (m, n) = (x.rows(), x.cols());
    let nf = E::from_f64(n as f64);
    let eps = E::from_f64(LAYER_NORM_EPS);
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(m);
    for i in 0..m {
        let row = out.row_mut(i);
        let mean = row.iter().fold(E::zero(), |a, &v| a + v) / nf;
        let var = row.iter().fold(E::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
        let r = E::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        rstd.push(r);
    }
    (out, rstd)
}

#[inline]
pub fn silu<E: Real>(x: E) -> E {
    x / (E::one() + (-x).exp())
}

#[inline]
pub fn silu_grad<E: Real>(x: E) -> E {
    let s = E::one() / (E::one() + (-x).exp());
    s * (E::one() + x * (E::one() - s))
}

/// Rotate consecutive coordinate pairs `(2i, 2i+1)` of every row.
///
/// `angles` has one entry per (row, pair), `rows × cols/2` values.
pub(crate) fn rotate_pairs<E: Real>(x: &Tensor<E>, angles: &[f64], inverse: bool) -> Tensor<E> {
    let (m, n) = (x.rows(), x.cols());
    let half = n / 2;
    debug_assert_eq!(angles.len(), m * half);
    let mut out = x.clone();
    for i in 0..m {
        let row = out.row_mut(i);
        for p in 0..half {
            let theta = angles[i * half + p];
            if theta == 0.0 {
                continue;
            }
            let (s, c) = theta.sin_cos();
            let (s, c) = (E::from_f64(if inverse { -s } else { s }), E::from_f64(c));
            let (a, b) = (row[2 * p], row[2 * p + 1]);
            row[2 * p] = a * c - b * s;
            row[2 * p + 1] = a * s + b * c;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeededRng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let b = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let r = matmul(&t(&[1, 2], &[1.0, 0.0]), &t(&[2, 1], &[0.0, 1.0])).unwrap();
        assert_eq!(r.data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = SeededRng::new(11);
        let a = rng.normal_tensor(&[3, 4], 1.0);
        let b = rng.normal_tensor(&[4, 2], 1.0);
        assert_eq!(matmul(&a, &b).unwrap(), triple_loop(&a, &b));
        assert_eq!(matmul_nt(&a, &b.transpose().unwrap()).unwrap(), triple_loop(&a, &b));
        assert_eq!(matmul_tn(&a.transpose().unwrap(), &b).unwrap(), triple_loop(&a, &b));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&t(&[1, 2], &[0.0, 0.0]), &t(&[1, 2], &[1.0, 1.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax_rows(&t(&[1, 3], &[5.0; 3]), &t(&[1, 3], &[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0, 0.0]);
        let x = t(&[1, 3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let p = softmax_rows(&x, &Tensor::ones(&[1, 3])).unwrap();
        for (got, want) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let err = softmax_rows(&t(&[2, 2], &[0.0; 4]), &t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        assert!(matches!(err, Err(Error::EmptyMaskRow { row: 1 })));
    }

    #[test]
    fn conv_examples() {
        let mut rng = SeededRng::new(3);
        let x = rng.normal_tensor(&[10, 3], 1.0);
        let w = rng.normal_tensor(&[5, 3, 3], 1.0);
        let b = Tensor::zeros(&[3]);
        assert_eq!(conv1d_strided(&x, &w, &b, 5, 5).unwrap().shape(), &[2, 3]);

        // averaging kernel over a constant sequence
        let c = 3;
        let mut avg = Tensor::zeros(&[5, c, c]);
        for k in 0..5 {
            for ch in 0..c {
                avg.data_mut()[(k * c + ch) * c + ch] = 0.2;
            }
        }
        let v = [0.5, -1.0, 2.0];
        let constant = Tensor::from_rows(&vec![v.to_vec(); 10]).unwrap();
        let out = conv1d_strided(&constant, &avg, &b, 5, 5).unwrap();
        for p in 0..2 {
            for ch in 0..c {
                assert!((out.at(p, ch) - v[ch]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = SeededRng::new(5);
        let x = rng.normal_tensor(&[5, 2], 1.0);
        let w = rng.normal_tensor(&[5, 2, 2], 1.0);
        let b = rng.normal_tensor(&[2], 1.0);
        let out = conv1d_strided(&x, &w, &b, 5, 5).unwrap();
        for co in 0..2 {
            let mut s = b.data()[co];
            for k in 0..5 {
                for ci in 0..2 {
                    s += x.at(k, ci) * w.data()[(k * 2 + ci) * 2 + co];
                }
            }
            assert_eq!(out.at(0, co), s);
        }
    }

    #[test]
    fn conv_rejects_short_input_and_overlap() {
        let x = Tensor::<f64>::zeros(&[4, 2]);
        let w = Tensor::zeros(&[5, 2, 2]);
        let b = Tensor::zeros(&[2]);
        assert!(conv1d_strided(&x, &w, &b, 5, 5).is_err());
        let x = Tensor::<f64>::zeros(&[10, 2]);
        assert!(conv1d_strided(&x, &w, &b, 5, 4).is_err());
    }
}

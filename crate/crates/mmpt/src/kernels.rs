//! Numeric kernels with pinned accumulation order. Every sum here runs left
//! to right over the contraction index, so repeated runs and the cached
//! inference path reproduce each other to the bit.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

fn want_rank2<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::BadShape {
            op,
            shape: t.shape().to_vec(),
            why: "expected rank 2".into(),
        });
    }
    Ok(())
}

/// `a` (M×K) times `b` (K×N). The k-loop sits in the middle, which keeps the
/// per-element accumulation order identical to the naive triple loop.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    want_rank2("matmul", a)?;
    want_rank2("matmul", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a` (M×K) times `b`ᵀ where `b` is N×K. Row-by-row dot products.
pub fn matmul_abt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    want_rank2("matmul_abt", a)?;
    want_rank2("matmul_abt", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_abt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a`ᵀ times `b` where `a` is K×M and `b` is K×N.
pub fn matmul_atb<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    want_rank2("matmul_atb", a)?;
    want_rank2("matmul_atb", b)?;
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_atb",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for kk in 0..k {
        let arow = &ad[kk * m..(kk + 1) * m];
        let brow = &bd[kk * n..(kk + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Adds a length-N bias to every row of an M×N matrix.
pub fn add_row_bias<S: Scalar>(x: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    want_rank2("add_row_bias", x)?;
    if b.rank() != 1 || b.len() != x.cols() {
        return Err(Error::ShapeMismatch {
            op: "add_row_bias",
            lhs: x.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        for (o, &bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row-wise softmax with max subtraction. `mask` (row-major, same extent)
/// marks entries that participate; masked-out entries come back as exact 0.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>, mask: Option<&[bool]>) -> Result<Tensor<S>> {
    want_rank2("softmax_rows", x)?;
    let (m, n) = (x.rows(), x.cols());
    if let Some(mk) = mask {
        if mk.len() != m * n {
            return Err(Error::BadShape {
                op: "softmax_rows",
                shape: x.shape().to_vec(),
                why: format!("mask length {} does not cover the matrix", mk.len()),
            });
        }
    }
    let mut out = vec![S::zero(); m * n];
    for r in 0..m {
        let row = &x.data()[r * n..(r + 1) * n];
        let keep = |c: usize| mask.map_or(true, |mk| mk[r * n + c]);
        let mut mx = S::neg_infinity();
        for (c, &v) in row.iter().enumerate() {
            if keep(c) && v > mx {
                mx = v;
            }
        }
        if mx == S::neg_infinity() {
            return Err(Error::FullyMaskedRow(r));
        }
        let orow = &mut out[r * n..(r + 1) * n];
        let mut denom = S::zero();
        for (c, &v) in row.iter().enumerate() {
            if keep(c) {
                let e = (v - mx).exp();
                orow[c] = e;
                denom += e;
            }
        }
        for o in orow.iter_mut() {
            *o = *o / denom;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Given softmax output `y` and upstream gradient `gy`:
/// dx = y ⊙ (gy − rowsum(gy ⊙ y)). Masked entries have y = 0 and drop out.
pub fn softmax_rows_backward<S: Scalar>(y: &Tensor<S>, gy: &Tensor<S>) -> Tensor<S> {
    let n = y.cols();
    let mut out = vec![S::zero(); y.len()];
    for r in 0..y.rows() {
        let yr = &y.data()[r * n..(r + 1) * n];
        let gr = &gy.data()[r * n..(r + 1) * n];
        let mut dot = S::zero();
        for (&yv, &gv) in yr.iter().zip(gr) {
            dot += yv * gv;
        }
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..n {
            orow[c] = yr[c] * (gr[c] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out).unwrap()
}

/// Normalizes over the last axis: (x − μ)/√(σ² + ε) · γ + β.
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<Tensor<S>> {
    let d = *x.shape().last().unwrap();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let eps = S::from_f64(LN_EPS);
    let mut out = vec![S::zero(); x.len()];
    for (orow, row) in out.chunks_mut(d).zip(x.data().chunks(d)) {
        let mut mean = S::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / S::from_f64(d as f64);
        let mut var = S::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var / S::from_f64(d as f64);
        let inv = (var + eps).sqrt().recip();
        for c in 0..d {
            orow[c] = (row[c] - mean) * inv * gamma.data()[c] + beta.data()[c];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns (gx, ggamma, gbeta).
pub fn layer_norm_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    gy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let d = *x.shape().last().unwrap();
    let dn = S::from_f64(d as f64);
    let eps = S::from_f64(LN_EPS);
    let mut gx = vec![S::zero(); x.len()];
    let mut ggamma = vec![S::zero(); d];
    let mut gbeta = vec![S::zero(); d];
    for ((grow, row), gyrow) in gx.chunks_mut(d).zip(x.data().chunks(d)).zip(gy.data().chunks(d)) {
        let mut mean = S::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / dn;
        let mut var = S::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var / dn;
        let inv = (var + eps).sqrt().recip();
        // xhat = (x - mean) * inv; g = gy * gamma
        // dx = inv * (g - mean(g) - xhat * mean(g * xhat))
        let mut mg = S::zero();
        let mut mgx = S::zero();
        for c in 0..d {
            let xhat = (row[c] - mean) * inv;
            let g = gyrow[c] * gamma.data()[c];
            mg += g;
            mgx += g * xhat;
            ggamma[c] += gyrow[c] * xhat;
            gbeta[c] += gyrow[c];
        }
        mg = mg / dn;
        mgx = mgx / dn;
        for c in 0..d {
            let xhat = (row[c] - mean) * inv;
            let g = gyrow[c] * gamma.data()[c];
            grow[c] = inv * (g - mg - xhat * mgx);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(vec![d], ggamma).unwrap(),
        Tensor::new(vec![d], gbeta).unwrap(),
    )
}

/// Exact-erf GELU: 0.5·x·(1 + erf(x/√2)).
pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let half = S::from_f64(0.5);
    let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x.map(|v| half * v * (S::one() + (v * inv_sqrt2).erf()))
}

/// d/dx gelu = Φ(x) + x·φ(x).
pub fn gelu_backward<S: Scalar>(x: &Tensor<S>, gy: &Tensor<S>) -> Tensor<S> {
    let half = S::from_f64(0.5);
    let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt2pi = S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let gd: Vec<S> = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| {
            let phi_cdf = half * (S::one() + (v * inv_sqrt2).erf());
            let phi_pdf = inv_sqrt2pi * (-half * v * v).exp();
            g * (phi_cdf + v * phi_pdf)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), gd).unwrap()
}

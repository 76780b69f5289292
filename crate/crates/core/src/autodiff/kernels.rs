//! Numeric kernels shared by the recording tape and the eager evaluator.
//!
//! Both backends call exactly these functions, so a forward pass gives
//! bit-identical values whichever backend runs it. The accumulation order of
//! every output element is independent of the batch size.

use super::Activation;

/// `y = x · wᵀ (+ b)` for `x: [rows, n_in]`, `w: [n_out, n_in]`.
pub(crate) fn affine(
    x: &[f64],
    rows: usize,
    n_in: usize,
    w: &[f64],
    n_out: usize,
    b: Option<&[f64]>,
) -> Vec<f64> {
    assert!(x.len() >= rows * n_in && w.len() >= n_out * n_in);
    let mut y = vec![0.0; rows * n_out];
    if let Some(b) = b {
        assert_eq!(b.len(), n_out);
        for yr in y.chunks_exact_mut(n_out) {
            yr.copy_from_slice(b);
        }
    }
    // SAFETY: the asserts above bound every index dgemm touches for the given
    // shapes and strides.
    unsafe {
        matrixmultiply::dgemm(
            rows, n_in, n_out,
            1.0,
            x.as_ptr(), n_in as isize, 1,
            w.as_ptr(), 1, n_in as isize,
            1.0,
            y.as_mut_ptr(), n_out as isize, 1,
        );
    }
    y
}

/// Accumulates the affine backward pass: `dx += dy · w`, `dw += dyᵀ · x`, `db += Σ_rows dy`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn affine_backward(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    rows: usize,
    n_in: usize,
    n_out: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    assert!(dy.len() >= rows * n_out && x.len() >= rows * n_in && w.len() >= n_out * n_in);
    if let Some(dx) = dx {
        assert!(dx.len() >= rows * n_in);
        // SAFETY: bounds asserted above.
        unsafe {
            matrixmultiply::dgemm(
                rows, n_out, n_in,
                1.0,
                dy.as_ptr(), n_out as isize, 1,
                w.as_ptr(), n_in as isize, 1,
                1.0,
                dx.as_mut_ptr(), n_in as isize, 1,
            );
        }
    }
    if let Some(dw) = dw {
        assert!(dw.len() >= n_out * n_in);
        // SAFETY: bounds asserted above.
        unsafe {
            matrixmultiply::dgemm(
                n_out, rows, n_in,
                1.0,
                dy.as_ptr(), 1, n_out as isize,
                x.as_ptr(), n_in as isize, 1,
                1.0,
                dw.as_mut_ptr(), n_in as isize, 1,
            );
        }
    }
    if let Some(db) = db {
        for dyr in dy.chunks_exact(n_out).take(rows) {
            for (d, g) in db.iter_mut().zip(dyr) {
                *d += *g;
            }
        }
    }
}

const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// `eˣ` by Cody–Waite reduction `x = k·ln2 + r`, `|r| ≤ ln2/2`, and a
/// degree-13 Taylor polynomial. Branch-free so slice loops vectorize.
/// Inputs below −708 flush to zero.
#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    let xc = x.clamp(-708.0, 709.0);
    let k = (xc * std::f64::consts::LOG2_E + ROUND_MAGIC) - ROUND_MAGIC;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let scale = f64::from_bits(((k as i64 + 1023) as u64) << 52);
    let y = p * scale;
    if x < -708.0 {
        0.0
    } else if x > 709.0 {
        f64::INFINITY
    } else {
        y
    }
}

/// `tanh` through a single `exp`, odd-symmetric.
#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    let t = exp(-2.0 * x.abs());
    let y = (1.0 - t) / (1.0 + t);
    if x < 0.0 { -y } else { y }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    let t = exp(-x.abs());
    let d = 1.0 / (1.0 + t);
    if x >= 0.0 { d } else { t * d }
}

/// `ln(1 + eˣ)` without overflow for large `x`.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + exp(-x.abs()).ln_1p()
}

pub(crate) fn activate_in_place(kind: Activation, v: &mut [f64]) {
    fn run(v: &mut [f64], f: impl Fn(f64) -> f64) {
        for x in v.iter_mut() {
            *x = f(*x);
        }
    }
    match kind {
        Activation::Tanh => run(v, tanh),
        Activation::Sigmoid => run(v, sigmoid),
        Activation::Softplus => run(v, softplus),
    }
}

/// `g ⊙ act'(·)` with the derivative taken from the activation output `y`.
pub(crate) fn activate_grad_mul(kind: Activation, g: &[f64], y: &[f64]) -> Vec<f64> {
    fn run(g: &[f64], y: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        g.iter().zip(y).map(|(g, y)| g * f(*y)).collect()
    }
    match kind {
        Activation::Tanh => run(g, y, |y| 1.0 - y * y),
        Activation::Sigmoid => run(g, y, |y| y * (1.0 - y)),
        Activation::Softplus => run(g, y, |y| -(-y).exp_m1()),
    }
}

/// Concatenates `[rows, c_k]` blocks along the column axis.
pub(crate) fn concat_cols(parts: &[(&[f64], usize)], rows: usize) -> Vec<f64> {
    let total: usize = parts.iter().map(|p| p.1).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (data, c) in parts {
            out.extend_from_slice(&data[r * c..(r + 1) * c]);
        }
    }
    out
}

pub(crate) fn row_sum(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| x[r * cols..(r + 1) * cols].iter().sum())
        .collect()
}

pub(crate) fn row_norm(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            x[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_matches_libm() {
        let mut worst = 0.0f64;
        let mut x = -700.0;
        while x < 700.0 {
            let rel = ((exp(x) - x.exp()) / x.exp()).abs();
            worst = worst.max(rel);
            x += 0.0137;
        }
        assert!(worst < 1e-15, "worst relative error {worst}");
        assert_eq!(exp(0.0), 1.0);
        assert_eq!(exp(-1000.0), 0.0);
        assert_eq!(exp(1000.0), f64::INFINITY);
    }

    #[test]
    fn activations_match_reference() {
        for i in -400..=400 {
            let x = i as f64 * 0.05;
            assert!((tanh(x) - x.tanh()).abs() < 1e-15);
            assert!((sigmoid(x) - 1.0 / (1.0 + (-x).exp())).abs() < 1e-15);
            assert!((softplus(x) - (1.0 + x.exp()).ln()).abs() < 1e-13 * (1.0 + x.abs()));
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(tanh(0.0), 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert!(softplus(800.0).is_finite() && softplus(-800.0) >= 0.0);
    }
}

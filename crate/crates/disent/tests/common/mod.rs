//! Test-only f64 reference implementations and the finite-difference
//! gradient harness. Everything here is independent of the engine's
//! forward/backward code paths: naive loops, f64 arithmetic.

#![allow(dead_code)]

use disent::tensor::{Tape, Tensor};

// ---------------------------------------------------------------------------
// tiny deterministic RNG for test data (xorshift*), independent of the crate's
// ---------------------------------------------------------------------------

pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> TestRng {
        TestRng(seed.max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        x.wrapping_mul(0x2545_f491_4f6c_dd1d)
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Uniform in [lo, hi] but at distance > margin from every kink point.
    pub fn away_from(&mut self, lo: f64, hi: f64, kinks: &[f64], margin: f64) -> f64 {
        loop {
            let v = self.range(lo, hi);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                return v;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// f64 reference ops (naive loops)
// ---------------------------------------------------------------------------

pub fn ref_conv2d(
    x: &[f64],
    xd: &[usize],
    w: &[f64],
    wd: &[usize],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (n, c, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
    let (oc, _, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wi + 2 * pad - kw) / stride + 1;
    let mut y = vec![0f64; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0f64;
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                    continue;
                                }
                                s += x[((b * c + ci) * h + iy as usize) * wi + ix as usize]
                                    * w[((o * c + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    y[((b * oc + o) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    (y, vec![n, oc, oh, ow])
}

pub fn ref_tconv2d(
    x: &[f64],
    xd: &[usize],
    w: &[f64],
    wd: &[usize],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (n, ic, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
    let (_, oc, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wi - 1) * stride + kw - 2 * pad;
    let mut y = vec![0f64; n * oc * oh * ow];
    for b in 0..n {
        for ci in 0..ic {
            for py in 0..h {
                for px in 0..wi {
                    let xv = x[((b * ic + ci) * h + py) * wi + px];
                    for o in 0..oc {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oy = (py * stride + ki) as isize - pad as isize;
                                let ox = (px * stride + kj) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                y[((b * oc + o) * oh + oy as usize) * ow + ox as usize] +=
                                    xv * w[((ci * oc + o) * kh + ki) * kw + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    (y, vec![n, oc, oh, ow])
}

pub fn ref_matmul(a: &[f64], ad: &[usize], b: &[f64], bd: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let (m, k, n) = (ad[0], ad[1], bd[1]);
    let mut y = vec![0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0f64;
            for l in 0..k {
                s += a[i * k + l] * b[l * n + j];
            }
            y[i * n + j] = s;
        }
    }
    (y, vec![m, n])
}

pub fn ref_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn ref_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn ref_broadcast(src: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let total: usize = to.iter().product();
    let mut strides = vec![0usize; from.len()];
    let mut acc = 1;
    for i in (0..from.len()).rev() {
        strides[i] = if from[i] == 1 { 0 } else { acc };
        acc *= from[i];
    }
    let mut out = vec![0f64; total];
    let mut idx = vec![0usize; to.len()];
    for slot in out.iter_mut() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        *slot = src[off];
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// gradcheck harness
// ---------------------------------------------------------------------------

/// One gradient check: builds the engine graph from f32-cast copies of
/// `inputs`, backpropagates, and compares each analytic gradient entry with
/// a central finite difference of `reference` evaluated in f64.
///
/// `reference` must be an independent re-implementation of the same scalar
/// function of the flattened inputs.
pub fn gradcheck(
    label: &str,
    inputs: &[(Vec<usize>, Vec<f64>)],
    engine: impl Fn(&[Tensor]) -> disent::Result<Tensor>,
    reference: impl Fn(&[Vec<f64>]) -> f64,
    rel_tol: f64,
) {
    let tape = Tape::new();
    let watched: Vec<Tensor> = inputs
        .iter()
        .map(|(dims, data)| {
            let f32s: Vec<f32> = data.iter().map(|&v| v as f32).collect();
            tape.watch(&Tensor::new(dims.clone(), f32s).unwrap())
        })
        .collect();
    let root = engine(&watched).unwrap_or_else(|e| panic!("{label}: engine forward failed: {e}"));
    assert_eq!(root.numel(), 1, "{label}: root must be scalar");

    // forward agreement between engine (f32) and reference (f64)
    let base_inputs: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let ref_val = reference(&base_inputs);
    let scale = ref_val.abs().max(1.0);
    assert!(
        (root.item() as f64 - ref_val).abs() / scale < 1e-4,
        "{label}: forward mismatch engine={} reference={}",
        root.item(),
        ref_val
    );

    let grads = tape.backward(&root).unwrap();
    for (i, t) in watched.iter().enumerate() {
        let analytic = grads
            .get_data(t)
            .unwrap_or_else(|| panic!("{label}: input {i} received no gradient"));
        for j in 0..inputs[i].1.len() {
            let h = 1e-4 * inputs[i].1[j].abs().max(1.0);
            let mut plus = base_inputs.clone();
            plus[i][j] += h;
            let mut minus = base_inputs.clone();
            minus[i][j] -= h;
            let numeric = (reference(&plus) - reference(&minus)) / (2.0 * h);
            let a = analytic[j] as f64;
            let denom = numeric.abs().max(a.abs()).max(1e-2);
            assert!(
                (a - numeric).abs() / denom < rel_tol,
                "{label}: grad mismatch at input {i} elem {j}: analytic={a} numeric={numeric}"
            );
        }
    }
}

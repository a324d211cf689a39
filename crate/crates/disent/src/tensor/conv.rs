//! CPU convolution kernels (NCHW, row-major).
//!
//! Convolution is lowered to im2col plus small dense products. The three
//! entry points cover forward, input-gradient and kernel-gradient; the
//! transpose convolution in the engine is expressed through the same three
//! routines with the roles of input and output swapped.

/// Geometry of one convolution call. `oh`/`ow` are derived via [`Conv2dDims::new`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dDims {
    /// Returns `None` when the kernel does not fit in the padded input.
    pub fn new(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        oc: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(Conv2dDims {
            n,
            c,
            h,
            w,
            oc,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_spatial(&self) -> usize {
        self.oh * self.ow
    }
}

/// Dot product with four independent accumulator lanes so the FMA chains
/// pipeline. Slices may differ in length only by the caller's mistake;
/// lengths are expected equal.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [[0f32; 8]; 4];
    let mut ca = a.chunks_exact(32);
    let mut cb = b.chunks_exact(32);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for lane in 0..4 {
            for i in 0..8 {
                acc[lane][i] += x[lane * 8 + i] * y[lane * 8 + i];
            }
        }
    }
    let mut tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for lane in acc {
        for v in lane {
            tail += v;
        }
    }
    tail
}

/// y += alpha * x
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Unpacks one sample into `col`, laid out `[oh*ow, c*kh*kw]`.
/// Out-of-frame taps read as zero.
fn im2col(x: &[f32], d: &Conv2dDims, col: &mut [f32]) {
    let k = d.patch_len();
    col.fill(0.0);
    for c in 0..d.c {
        let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let p = oy * d.ow + ox;
                let base = p * k + c * d.kh * d.kw;
                for ki in 0..d.kh {
                    let iy = oy * d.stride + ki;
                    if iy < d.pad || iy >= d.h + d.pad {
                        continue;
                    }
                    let iy = iy - d.pad;
                    for kj in 0..d.kw {
                        let ix = ox * d.stride + kj;
                        if ix < d.pad || ix >= d.w + d.pad {
                            continue;
                        }
                        col[base + ki * d.kw + kj] = xc[iy * d.w + ix - d.pad];
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column buffer back onto one sample.
fn col2im_add(col: &[f32], d: &Conv2dDims, x: &mut [f32]) {
    let k = d.patch_len();
    for c in 0..d.c {
        let xc = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let p = oy * d.ow + ox;
                let base = p * k + c * d.kh * d.kw;
                for ki in 0..d.kh {
                    let iy = oy * d.stride + ki;
                    if iy < d.pad || iy >= d.h + d.pad {
                        continue;
                    }
                    let iy = iy - d.pad;
                    for kj in 0..d.kw {
                        let ix = ox * d.stride + kj;
                        if ix < d.pad || ix >= d.w + d.pad {
                            continue;
                        }
                        xc[iy * d.w + ix - d.pad] += col[base + ki * d.kw + kj];
                    }
                }
            }
        }
    }
}

/// y[n, oc, oh, ow] = sum over (c, kh, kw) of x * w, with w laid out
/// `[oc, c, kh, kw]`.
pub fn conv2d_forward(x: &[f32], w: &[f32], d: &Conv2dDims) -> Vec<f32> {
    let k = d.patch_len();
    let p_len = d.out_spatial();
    let mut y = vec![0f32; d.n * d.oc * p_len];
    let mut col = vec![0f32; p_len * k];
    for n in 0..d.n {
        im2col(&x[n * d.c * d.h * d.w..], d, &mut col);
        let yn = &mut y[n * d.oc * p_len..(n + 1) * d.oc * p_len];
        for oc in 0..d.oc {
            let wrow = &w[oc * k..(oc + 1) * k];
            let yrow = &mut yn[oc * p_len..(oc + 1) * p_len];
            for (p, out) in yrow.iter_mut().enumerate() {
                *out = dot(wrow, &col[p * k..(p + 1) * k]);
            }
        }
    }
    y
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input(dy: &[f32], w: &[f32], d: &Conv2dDims) -> Vec<f32> {
    let k = d.patch_len();
    let p_len = d.out_spatial();
    let mut dx = vec![0f32; d.n * d.c * d.h * d.w];
    let mut dcol = vec![0f32; p_len * k];
    for n in 0..d.n {
        dcol.fill(0.0);
        let dyn_ = &dy[n * d.oc * p_len..(n + 1) * d.oc * p_len];
        for p in 0..p_len {
            let row = &mut dcol[p * k..(p + 1) * k];
            for oc in 0..d.oc {
                axpy(dyn_[oc * p_len + p], &w[oc * k..(oc + 1) * k], row);
            }
        }
        col2im_add(&dcol, d, &mut dx[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w]);
    }
    dx
}

/// Gradient with respect to the convolution kernel, `[oc, c, kh, kw]`.
pub fn conv2d_backward_kernel(x: &[f32], dy: &[f32], d: &Conv2dDims) -> Vec<f32> {
    let k = d.patch_len();
    let p_len = d.out_spatial();
    let mut dw = vec![0f32; d.oc * k];
    let mut col = vec![0f32; p_len * k];
    for n in 0..d.n {
        im2col(&x[n * d.c * d.h * d.w..], d, &mut col);
        let dyn_ = &dy[n * d.oc * p_len..(n + 1) * d.oc * p_len];
        for p in 0..p_len {
            let crow = &col[p * k..(p + 1) * k];
            for oc in 0..d.oc {
                axpy(dyn_[oc * p_len + p], crow, &mut dw[oc * k..(oc + 1) * k]);
            }
        }
    }
    dw
}

//! Dense kernels behind the graph ops. All loops run in a fixed order so
//! forward and backward results are bit-identical across runs.

use alloc::vec;

/// C += A (m x k) @ B (k x n)
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// C += A (m x k) @ B^T where B is (n x k)
pub fn matmul_abt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

/// C += A^T @ B where A is (k x m), B is (k x n)
pub fn matmul_atb_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += api * brow[j];
            }
        }
    }
}

pub struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let hp = h + 2 * pad;
        let wp = w + 2 * pad;
        if hp < kh || wp < kw || stride == 0 {
            return None;
        }
        Some(ConvDims {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_px(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let l = d.out_px();
    for c in 0..d.cin {
        let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for di in 0..d.kh {
            for dj in 0..d.kw {
                let row = &mut cols[((c * d.kh + di) * d.kw + dj) * l..][..l];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + di) as isize - d.pad as isize;
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * d.stride + dj) as isize - d.pad as isize;
                        dst[ox] = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_acc(cols: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let l = d.out_px();
    for c in 0..d.cin {
        let xc = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for di in 0..d.kh {
            for dj in 0..d.kw {
                let row = &cols[((c * d.kh + di) * d.kw + dj) * l..][..l];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + di) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src = &row[oy * d.wo..(oy + 1) * d.wo];
                    for ox in 0..d.wo {
                        let ix = (ox * d.stride + dj) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// y = conv2d(x, w) + b
pub fn conv2d_forward(x: &[f64], wgt: &[f64], bias: &[f64], d: &ConvDims, y: &mut [f64]) {
    let k = d.patch_len();
    let l = d.out_px();
    let mut cols = vec![0.0; k * l];
    im2col(x, d, &mut cols);
    for co in 0..d.cout {
        y[co * l..(co + 1) * l].fill(bias[co]);
    }
    matmul_acc(y, wgt, &cols, d.cout, k, l);
}

/// Accumulates input/weight/bias gradients for conv2d.
pub fn conv2d_backward(
    x: &[f64],
    wgt: &[f64],
    dy: &[f64],
    d: &ConvDims,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let k = d.patch_len();
    let l = d.out_px();
    if let Some(db) = db {
        for co in 0..d.cout {
            let mut acc = 0.0;
            for v in &dy[co * l..(co + 1) * l] {
                acc += v;
            }
            db[co] += acc;
        }
    }
    if let Some(dw) = dw {
        let mut cols = vec![0.0; k * l];
        im2col(x, d, &mut cols);
        matmul_abt_acc(dw, dy, &cols, d.cout, l, k);
    }
    if let Some(dx) = dx {
        let mut dcols = vec![0.0; k * l];
        matmul_atb_acc(&mut dcols, wgt, dy, k, d.cout, l);
        col2im_acc(&dcols, d, dx);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) computed without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

//! Plain loops over row-major buffers. Accumulating variants add into `out`.

use crate::scalar::Scalar;

/// out[m x n] += a[m x k] * b[k x n]
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m x k] += g[m x n] * b[k x n]^T
pub(crate) fn matmul_nt_acc<T: Scalar>(
    g: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    n: usize,
    k: usize,
) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// out[k x n] += a[m x k]^T * g[m x n]
pub(crate) fn matmul_tn_acc<T: Scalar>(
    a: &[T],
    g: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Input coordinate for output position `out` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, out: usize, k: usize, limit: usize) -> Option<usize> {
        let v = (out * self.stride + k) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < limit).then_some(v as usize)
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    for n in 0..g.n {
        for o in 0..g.o {
            let plane = &mut out[(n * g.o + o) * g.oh * g.ow..][..g.oh * g.ow];
            plane.fill(b[o]);
            for c in 0..g.c {
                let xin = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                let wk = &w[(o * g.c + c) * g.kh * g.kw..][..g.kh * g.kw];
                for oy in 0..g.oh {
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.h) else {
                            continue;
                        };
                        for ox in 0..g.ow {
                            let mut s = T::zero();
                            for kx in 0..g.kw {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    s += wk[ky * g.kw + kx] * xin[iy * g.w + ix];
                                }
                            }
                            plane[oy * g.ow + ox] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    for n in 0..g.n {
        for o in 0..g.o {
            let gplane = &gout[(n * g.o + o) * g.oh * g.ow..][..g.oh * g.ow];
            if let Some(gb) = gb.as_deref_mut() {
                gb[o] += gplane.iter().copied().sum::<T>();
            }
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                let wbase = (o * g.c + c) * g.kh * g.kw;
                for oy in 0..g.oh {
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.h) else {
                            continue;
                        };
                        for ox in 0..g.ow {
                            let go = gplane[oy * g.ow + ox];
                            if go == T::zero() {
                                continue;
                            }
                            for kx in 0..g.kw {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    let xi = xbase + iy * g.w + ix;
                                    let wi = wbase + ky * g.kw + kx;
                                    if let Some(gw) = gw.as_deref_mut() {
                                        gw[wi] += go * x[xi];
                                    }
                                    if let Some(gx) = gx.as_deref_mut() {
                                        gx[xi] += go * w[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let s: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((s - c[i * n + j]).abs() < 1e-12);
            }
        }
        // a * b via the nt kernel with b transposed
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![0.0; m * n];
        matmul_nt_acc(&a, &bt, &mut c2, m, k, n);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // a^T a through the tn kernel
        let mut ata = vec![0.0; k * k];
        matmul_tn_acc(&a, &a, &mut ata, m, k, k);
        for p in 0..k {
            for q in 0..k {
                let s: f64 = (0..m).map(|i| a[i * k + p] * a[i * k + q]).sum();
                assert!((s - ata[p * k + q]).abs() < 1e-12);
            }
        }
    }
}

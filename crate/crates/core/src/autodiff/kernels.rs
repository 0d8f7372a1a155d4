//! Raw numeric kernels shared by the graph's forward and backward passes.

use super::tensor::Real;

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `da[m×k] = dc[m×n] · bᵀ`.
pub(crate) fn matmul_grad_a<T: Real>(dc: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut da = vec![T::zero(); m * k];
    for i in 0..m {
        let dci = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] = dot(dci, brow);
        }
    }
    da
}

/// `db[k×n] = aᵀ · dc[m×n]`.
pub(crate) fn matmul_grad_b<T: Real>(dc: &[T], a: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut db = vec![T::zero(); k * n];
    for i in 0..m {
        let dci = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let row = &mut db[p * n..(p + 1) * n];
            for (d, &g) in row.iter_mut().zip(dci) {
                *d += aip * g;
            }
        }
    }
    db
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    /// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
    fn valid(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        // input index = o + k - pad must lie in [0, extent)
        let lo = self.pad.saturating_sub(k);
        let hi = (extent + self.pad).saturating_sub(k).min(out_extent);
        (lo, hi.max(lo))
    }
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    /// Unfolds image `n` into a `[c_in·k·k, oh·ow]` patch matrix.
    fn im2col<T: Real>(&self, x: &[T], n: usize, col: &mut [T]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let plane = oh * ow;
        col.fill(T::zero());
        for ci in 0..self.c_in {
            let xbase = (n * self.c_in + ci) * self.height * self.width;
            for ky in 0..self.kernel {
                let (y0, y1) = self.valid(ky, self.height, oh);
                for kx in 0..self.kernel {
                    let r = (ci * self.kernel + ky) * self.kernel + kx;
                    let (x0, x1) = self.valid(kx, self.width, ow);
                    for oy in y0..y1 {
                        let src = xbase + (oy + ky - self.pad) * self.width;
                        let dst = r * plane + oy * ow;
                        col[dst + x0..dst + x1].copy_from_slice(&x[src + x0 + kx - self.pad..src + x1 + kx - self.pad]);
                    }
                }
            }
        }
    }

    /// Adds a patch-matrix gradient back into image `n` of `dx`.
    fn col2im<T: Real>(&self, col: &[T], n: usize, dx: &mut [T]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let plane = oh * ow;
        for ci in 0..self.c_in {
            let xbase = (n * self.c_in + ci) * self.height * self.width;
            for ky in 0..self.kernel {
                let (y0, y1) = self.valid(ky, self.height, oh);
                for kx in 0..self.kernel {
                    let r = (ci * self.kernel + ky) * self.kernel + kx;
                    let (x0, x1) = self.valid(kx, self.width, ow);
                    for oy in y0..y1 {
                        let dst = xbase + (oy + ky - self.pad) * self.width + x0 + kx - self.pad;
                        let src = r * plane + oy * ow;
                        for (d, &g) in dx[dst..dst + x1 - x0].iter_mut().zip(&col[src + x0..src + x1]) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 zero-padded cross-correlation, NCHW layout, weights `[c_out, c_in, k, k]`.
pub(crate) fn conv2d<T: Real>(x: &[T], w: &[T], d: ConvDims) -> Vec<T> {
    let plane = d.out_height() * d.out_width();
    let mut out = Vec::with_capacity(d.batch * d.c_out * plane);
    let mut col = vec![T::zero(); d.patch() * plane];
    for n in 0..d.batch {
        d.im2col(x, n, &mut col);
        out.extend(matmul(w, &col, d.c_out, d.patch(), plane));
    }
    out
}

/// Returns `(dx, dw)` for [`conv2d`].
pub(crate) fn conv2d_grad<T: Real>(x: &[T], w: &[T], dout: &[T], d: ConvDims) -> (Vec<T>, Vec<T>) {
    let plane = d.out_height() * d.out_width();
    let k = d.patch();
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut col = vec![T::zero(); k * plane];
    for n in 0..d.batch {
        let g = &dout[n * d.c_out * plane..(n + 1) * d.c_out * plane];
        d.im2col(x, n, &mut col);
        for (acc, v) in dw.iter_mut().zip(matmul_grad_a(g, &col, d.c_out, k, plane)) {
            *acc += v;
        }
        d.col2im(&matmul_grad_b(g, w, d.c_out, k, plane), n, &mut dx);
    }
    (dx, dw)
}

/// Numerically stable log-sum-exp along the middle axis of an (outer, n, inner) view.
///
/// Returns the reduced values and the softmax weights (same layout as the input).
pub(crate) fn logsumexp<T: Real>(x: &[T], outer: usize, n: usize, inner: usize) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); outer * inner];
    let mut soft = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * n + a) * inner + i;
            let mut m = T::neg_infinity();
            for a in 0..n {
                m = m.max(x[idx(a)]);
            }
            let shift = if m.is_finite() { m } else { T::zero() };
            let mut s = T::zero();
            for a in 0..n {
                let e = (x[idx(a)] - shift).exp();
                soft[idx(a)] = e;
                s += e;
            }
            for a in 0..n {
                soft[idx(a)] = soft[idx(a)] / s;
            }
            out[o * inner + i] = shift + s.ln();
        }
    }
    (out, soft)
}

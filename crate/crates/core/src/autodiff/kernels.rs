//! Forward and backward kernels on flat slices. Shapes are validated by the
//! tape before these run.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub len_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn len_out(&self) -> usize {
        (self.len_in + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn cols_rows(&self) -> usize {
        self.c_in * self.kernel
    }

    fn cols_width(&self) -> usize {
        self.batch * self.len_out()
    }

    /// Output positions `t` whose tap `k` lands inside the input.
    fn valid_range(&self, k: usize) -> std::ops::Range<usize> {
        let lo = if self.padding > k { (self.padding - k).div_ceil(self.stride) } else { 0 };
        let hi = if self.len_in + self.padding > k {
            ((self.len_in - 1 + self.padding - k) / self.stride + 1).min(self.len_out())
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

/// Unfolds `x` (batch × c_in × len_in) into `(c_in·kernel) × (batch·len_out)`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let l_out = g.len_out();
    let width = g.cols_width();
    let mut cols = vec![T::zero(); g.cols_rows() * width];
    for ci in 0..g.c_in {
        for k in 0..g.kernel {
            let row = &mut cols[(ci * g.kernel + k) * width..][..width];
            let range = g.valid_range(k);
            for b in 0..g.batch {
                let src = &x[(b * g.c_in + ci) * g.len_in..][..g.len_in];
                let dst = &mut row[b * l_out..][..l_out];
                for t in range.clone() {
                    dst[t] = src[t * g.stride + k - g.padding];
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let l_out = g.len_out();
    let width = g.cols_width();
    for ci in 0..g.c_in {
        for k in 0..g.kernel {
            let row = &cols[(ci * g.kernel + k) * width..][..width];
            let range = g.valid_range(k);
            for b in 0..g.batch {
                let dst = &mut dx[(b * g.c_in + ci) * g.len_in..][..g.len_in];
                let src = &row[b * l_out..][..l_out];
                for t in range.clone() {
                    dst[t * g.stride + k - g.padding] += src[t];
                }
            }
        }
    }
}

pub fn conv1d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let l_out = g.len_out();
    let width = g.cols_width();
    let rows = g.cols_rows();
    let cols = im2col(g, x);
    let mut y_cm = vec![T::zero(); g.c_out * width];
    T::gemm(
        g.c_out,
        rows,
        width,
        T::one(),
        w,
        (rows as isize, 1),
        &cols,
        (width as isize, 1),
        T::zero(),
        &mut y_cm,
        (width as isize, 1),
    );
    let mut y = vec![T::zero(); g.batch * g.c_out * l_out];
    for co in 0..g.c_out {
        let b_val = bias.map_or(T::zero(), |b| b[co]);
        let src_row = &y_cm[co * width..][..width];
        for b in 0..g.batch {
            let dst = &mut y[(b * g.c_out + co) * l_out..][..l_out];
            for (d, s) in dst.iter_mut().zip(&src_row[b * l_out..][..l_out]) {
                *d = *s + b_val;
            }
        }
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv1d_backward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], dy: &[T], need_dx: bool) -> ConvGrads<T> {
    let l_out = g.len_out();
    let width = g.cols_width();
    let rows = g.cols_rows();
    // dy: batch × c_out × l_out  →  c_out × (batch·l_out)
    let mut dy_cm = vec![T::zero(); g.c_out * width];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            dy_cm[co * width + b * l_out..][..l_out].copy_from_slice(&dy[(b * g.c_out + co) * l_out..][..l_out]);
        }
    }
    let db = dy_cm.chunks_exact(width).map(|r| r.iter().copied().sum()).collect();
    let cols = im2col(g, x);
    let mut dw = vec![T::zero(); g.c_out * rows];
    T::gemm(
        g.c_out,
        width,
        rows,
        T::one(),
        &dy_cm,
        (width as isize, 1),
        &cols,
        (1, width as isize),
        T::zero(),
        &mut dw,
        (rows as isize, 1),
    );
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); rows * width];
        T::gemm(
            rows,
            g.c_out,
            width,
            T::one(),
            w,
            (1, rows as isize),
            &dy_cm,
            (width as isize, 1),
            T::zero(),
            &mut dcols,
            (width as isize, 1),
        );
        let mut dx = vec![T::zero(); x.len()];
        col2im_add(g, &dcols, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// `y = x·Wᵀ + b` with `x: n × d`, `W: m × d`.
pub fn linear_forward<T: Scalar>(n: usize, d: usize, m: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); n * m];
    for row in y.chunks_exact_mut(m) {
        row.copy_from_slice(b);
    }
    T::gemm(n, d, m, T::one(), x, (d as isize, 1), w, (1, d as isize), T::one(), &mut y, (m as isize, 1));
    y
}

pub struct LinearGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn linear_backward<T: Scalar>(
    n: usize,
    d: usize,
    m: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> LinearGrads<T> {
    let mut dw = vec![T::zero(); m * d];
    T::gemm(m, n, d, T::one(), dy, (1, m as isize), x, (d as isize, 1), T::zero(), &mut dw, (d as isize, 1));
    let mut db = vec![T::zero(); m];
    for row in dy.chunks_exact(m) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += *v;
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); n * d];
        T::gemm(n, m, d, T::one(), dy, (m as isize, 1), w, (d as isize, 1), T::zero(), &mut dx, (d as isize, 1));
        dx
    });
    LinearGrads { dx, dw, db }
}

/// Per-channel normalization result for an `n × c × l` input.
pub struct BnForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and biased variance (train mode only).
    pub batch_moments: Option<(Vec<f64>, Vec<f64>)>,
}

pub enum BnStats<'a, T> {
    Batch,
    Running { mean: &'a [T], var: &'a [T] },
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Scalar>(
    n: usize,
    c: usize,
    l: usize,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    stats: BnStats<'_, T>,
    eps: f64,
) -> BnForward<T> {
    let count = (n * l) as f64;
    let (mean, var, batch) = match stats {
        BnStats::Batch => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += x[(b * c + ch) * l..][..l].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = s / count;
                let mut ss = 0.0;
                for b in 0..n {
                    ss += x[(b * c + ch) * l..][..l]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = ss / count;
            }
            (mean.clone(), var.clone(), Some((mean, var)))
        }
        BnStats::Running { mean, var } => {
            (mean.iter().map(|v| v.as_f64()).collect(), var.iter().map(|v| v.as_f64()).collect(), None)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * l;
            let (mu, is) = (mean[ch], inv_std[ch]);
            let (g, bt) = (gamma[ch].as_f64(), beta[ch].as_f64());
            for i in off..off + l {
                let h = (x[i].as_f64() - mu) * is;
                xhat[i] = T::from_f64_lossy(h);
                y[i] = T::from_f64_lossy(g * h + bt);
            }
        }
    }
    BnForward { y, xhat, inv_std: inv_std.into_iter().map(T::from_f64_lossy).collect(), batch_moments: batch }
}

pub struct BnGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward<T: Scalar>(
    n: usize,
    c: usize,
    l: usize,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &[T],
    batch_stats: bool,
    need_dx: bool,
) -> BnGrads<T> {
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * l;
            for i in off..off + l {
                let g = dy[i].as_f64();
                sum_dy[ch] += g;
                sum_dy_xhat[ch] += g * xhat[i].as_f64();
            }
        }
    }
    let dx = need_dx.then(|| {
        let m = (n * l) as f64;
        let mut dx = vec![T::zero(); dy.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * l;
                let scale = gamma[ch].as_f64() * inv_std[ch].as_f64();
                for i in off..off + l {
                    let g = dy[i].as_f64();
                    dx[i] = T::from_f64_lossy(if batch_stats {
                        scale * (g - sum_dy[ch] / m - xhat[i].as_f64() * sum_dy_xhat[ch] / m)
                    } else {
                        scale * g
                    });
                }
            }
        }
        dx
    });
    BnGrads {
        dx,
        dgamma: sum_dy_xhat.into_iter().map(T::from_f64_lossy).collect(),
        dbeta: sum_dy.into_iter().map(T::from_f64_lossy).collect(),
    }
}

/// Mean cross-entropy of `logits: n × c` against class indices; also returns softmax rows.
pub fn cross_entropy_forward<T: Scalar>(c: usize, logits: &[T], labels: &[usize]) -> (f64, Vec<T>) {
    let mut total = 0.0f64;
    let mut probs = Vec::with_capacity(logits.len());
    for (row, &y) in logits.chunks_exact(c).zip(labels) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let lse = max + denom.ln();
        total += lse - row[y].as_f64();
        probs.extend(row.iter().map(|v| T::from_f64_lossy((v.as_f64() - lse).exp())));
    }
    (total / labels.len() as f64, probs)
}

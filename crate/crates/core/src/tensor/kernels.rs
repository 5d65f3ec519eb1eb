//! Raw forward/backward kernels over flat NCHW buffers.
//!
//! Reductions always run in a fixed order so that results are bit-for-bit
//! reproducible between runs.

use super::real::Real;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;

/// Running statistics of one batch-norm layer. The affine scale and shift
/// are ordinary trainable parameters and live outside this struct.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64_lossy(BN_EPSILON),
            momentum: T::from_f64_lossy(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Clone, Copy, Debug)]
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
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `oj` whose input column `oj * stride + kj - pad` lies
/// inside the image.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = (g.w + g.pad).saturating_sub(kj).div_ceil(g.stride).min(g.wo);
    (lo.min(hi), hi)
}

/// Writes the patch matrix of one sample into `cols`, row `r` starting at
/// `r * ld + offset`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, offset: usize) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld + offset..][..plane];
                let (lo, hi) = valid_cols(g, kj);
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    dst_row[..lo].fill(T::zero());
                    dst_row[hi..].fill(T::zero());
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst_row[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (t, d) in dst_row[lo..hi].iter_mut().enumerate() {
                            *d = src[first + t * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T], ld: usize, offset: usize) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + offset..][..plane];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + ii as usize) * g.w..][..g.w];
                    let src_row = &src[oi * g.wo + lo..oi * g.wo + hi];
                    for (t, &v) in src_row.iter().enumerate() {
                        let d = &mut dst[first + t * g.stride];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Upper bound on patch-matrix elements per GEMM; samples are grouped up to it.
const COLS_BUDGET: usize = 1 << 22;

impl ConvGeom {
    fn group(&self) -> usize {
        (COLS_BUDGET / (self.patch() * self.out_plane()).max(1)).clamp(1, self.n.max(1))
    }

    /// Fills `cols` (`patch x gb*plane`) for samples `b0..b0+gb`.
    fn gather_cols<T: Real>(&self, x: &[T], b0: usize, gb: usize, cols: &mut [T]) {
        let in_sample = self.c * self.h * self.w;
        let plane = self.out_plane();
        let ld = gb * plane;
        for s in 0..gb {
            let xs = &x[(b0 + s) * in_sample..][..in_sample];
            if self.is_pointwise() {
                for (c, src) in xs.chunks_exact(plane).enumerate() {
                    cols[c * ld + s * plane..][..plane].copy_from_slice(src);
                }
            } else {
                im2col(xs, self, cols, ld, s * plane);
            }
        }
    }
}

/// Moves between per-sample `o x plane` blocks (NCHW) and one `o x gb*plane`
/// matrix.
fn pack_outputs<T: Real>(nchw: &[T], mat: &mut [T], o: usize, plane: usize, b0: usize, gb: usize) {
    let ld = gb * plane;
    for s in 0..gb {
        for oi in 0..o {
            mat[oi * ld + s * plane..][..plane].copy_from_slice(&nchw[((b0 + s) * o + oi) * plane..][..plane]);
        }
    }
}

fn unpack_outputs<T: Real>(mat: &[T], nchw: &mut [T], o: usize, plane: usize, b0: usize, gb: usize) {
    let ld = gb * plane;
    for s in 0..gb {
        for oi in 0..o {
            nchw[((b0 + s) * o + oi) * plane..][..plane].copy_from_slice(&mat[oi * ld + s * plane..][..plane]);
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch();
    let group = g.group();
    let mut out = vec![T::zero(); g.n * g.o * plane];
    let mut cols = vec![T::zero(); patch * group * plane];
    let mut mat = vec![T::zero(); g.o * group * plane];
    for b0 in (0..g.n).step_by(group) {
        let gb = group.min(g.n - b0);
        let ld = gb * plane;
        g.gather_cols(x, b0, gb, &mut cols);
        T::gemm(g.o, patch, ld, T::one(), weight, patch, 1, &cols, ld, 1, T::zero(), &mut mat, ld, 1);
        unpack_outputs(&mat, &mut out, g.o, plane, b0, gb);
    }
    out
}

/// Returns `(dx, dw)`; either is skipped when not requested.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_sample = g.c * g.h * g.w;
    let plane = g.out_plane();
    let patch = g.patch();
    let group = g.group();
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * in_sample]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.o * patch]);
    let mut cols = vec![T::zero(); patch * group * plane];
    let mut dmat = vec![T::zero(); g.o * group * plane];

    for b0 in (0..g.n).step_by(group) {
        let gb = group.min(g.n - b0);
        let ld = gb * plane;
        pack_outputs(dy, &mut dmat, g.o, plane, b0, gb);
        if let Some(dw) = dw.as_mut() {
            g.gather_cols(x, b0, gb, &mut cols);
            // dw += dy (o x ld) * cols^T (ld x patch)
            T::gemm(g.o, ld, patch, T::one(), &dmat, ld, 1, &cols, 1, ld, T::one(), dw, patch, 1);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = w^T (patch x o) * dy (o x ld)
            T::gemm(patch, g.o, ld, T::one(), weight, 1, patch, &dmat, ld, 1, T::zero(), &mut cols, ld, 1);
            for s in 0..gb {
                let dxs = &mut dx[(b0 + s) * in_sample..][..in_sample];
                if g.is_pointwise() {
                    for (c, d) in dxs.chunks_exact_mut(plane).enumerate() {
                        d.copy_from_slice(&cols[c * ld + s * plane..][..plane]);
                    }
                } else {
                    col2im_add(&cols, g, dxs, ld, s * plane);
                }
            }
        }
    }
    (dx, dw)
}

pub(crate) struct BnForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Sum in a fixed order over eight interleaved lanes, so the compiler can
/// vectorize while results stay reproducible run to run.
fn lane_sum<T: Real>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a = *a + f(v);
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &v in tail {
        s = s + f(v);
    }
    s
}

fn lane_dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ta.iter().zip(tb) {
        s = s + x * y;
    }
    s
}

/// Per-plane slices of channel `ch` across the batch.
fn channel_planes<T>(x: &[T], c: usize, plane: usize, ch: usize) -> impl Iterator<Item = &[T]> {
    x.chunks_exact(c * plane).map(move |s| &s[ch * plane..(ch + 1) * plane])
}

/// Applies `y = gamma * xhat + beta` with `xhat = (x - mean) * inv_std`.
fn bn_affine<T: Real>(
    x: &[T],
    c: usize,
    plane: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for (i, p) in x.chunks_exact(plane).enumerate() {
        let ch = i % c;
        let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
        xhat.extend(p.iter().map(|&v| (v - mu) * is));
        y.extend(xhat[xhat.len() - plane..].iter().map(|&h| g * h + b));
    }
    (y, xhat)
}

/// Normalizes with batch statistics (biased variance).
pub(crate) fn batchnorm_train<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> BnForward<T> {
    let count = T::from_usize(n * plane).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let s = channel_planes(x, c, plane, ch).fold(T::zero(), |acc, p| acc + lane_sum(p, |v| v));
        let mu = s / count;
        let sq = channel_planes(x, c, plane, ch).fold(T::zero(), |acc, p| {
            acc + lane_sum(p, |v| {
                let d = v - mu;
                d * d
            })
        });
        mean[ch] = mu;
        var[ch] = sq / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let (y, xhat) = bn_affine(x, c, plane, &mean, &inv_std, gamma, beta);
    BnForward {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

pub(crate) fn batchnorm_eval<T: Real>(
    x: &[T],
    c: usize,
    plane: usize,
    gamma: &[T],
    beta: &[T],
    state: &BatchNormState<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_std: Vec<T> = state
        .running_var
        .iter()
        .map(|&v| (v + state.eps).sqrt().recip())
        .collect();
    let (y, xhat) = bn_affine(x, c, plane, &state.running_mean, &inv_std, gamma, beta);
    (y, xhat, inv_std)
}

/// Gradients of a batch-norm layer. `batch_stats` selects between the
/// training-mode formula (statistics depend on the input) and the
/// eval-mode one (fixed affine map).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    plane: usize,
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for (d, h) in channel_planes(dy, c, plane, ch).zip(channel_planes(xhat, c, plane, ch)) {
            dgamma[ch] = dgamma[ch] + lane_dot(d, h);
            dbeta[ch] = dbeta[ch] + lane_sum(d, |v| v);
        }
    }
    let count = T::from_usize(n * plane).unwrap();
    let mut dx = Vec::with_capacity(dy.len());
    for (i, (d, h)) in dy.chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
        let ch = i % c;
        let scale = gamma[ch] * inv_std[ch];
        if batch_stats {
            let mean_dy = dbeta[ch] / count;
            let mean_dy_xhat = dgamma[ch] / count;
            dx.extend(d.iter().zip(h).map(|(&g, &xh)| scale * (g - mean_dy - xh * mean_dy_xhat)));
        } else {
            dx.extend(d.iter().map(|&g| scale * g));
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn avgpool_forward<T: Real>(
    x: &[T],
    nc: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<T>, usize, usize) {
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let area = T::from_usize(window * window).unwrap();
    let mut out = vec![T::zero(); nc * ho * wo];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oi in 0..ho {
            for oj in 0..wo {
                let mut s = T::zero();
                for di in 0..window {
                    for dj in 0..window {
                        s = s + src[(oi * stride + di) * w + oj * stride + dj];
                    }
                }
                out[(p * ho + oi) * wo + oj] = s / area;
            }
        }
    }
    (out, ho, wo)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn avgpool_backward<T: Real>(
    dy: &[T],
    nc: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    window: usize,
    stride: usize,
) -> Vec<T> {
    let area = T::from_usize(window * window).unwrap();
    let mut dx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        for oi in 0..ho {
            for oj in 0..wo {
                let g = dy[(p * ho + oi) * wo + oj] / area;
                for di in 0..window {
                    for dj in 0..window {
                        let i = p * h * w + (oi * stride + di) * w + oj * stride + dj;
                        dx[i] = dx[i] + g;
                    }
                }
            }
        }
    }
    dx
}

//! Dense numeric kernels with their hand-written adjoints.
//!
//! Everything here works on plain [`Tensor`]s. The tape in
//! [`crate::autodiff`] records calls to these and dispatches to the matching
//! `*_backward` during reverse accumulation.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Stride, symmetric zero padding and channel groups of a 2-D
/// cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dConfig {
    pub fn new(stride: usize, pad: usize) -> Self {
        Conv2dConfig {
            stride,
            pad,
            groups: 1,
        }
    }

    pub fn grouped(stride: usize, pad: usize, groups: usize) -> Self {
        Conv2dConfig {
            stride,
            pad,
            groups,
        }
    }
}

struct ConvShape {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cin_g: usize,
    cout: usize,
    cout_g: usize,
    ho: usize,
    wo: usize,
}

fn conv_shape<T: Real>(x: &Tensor<T>, w: &Tensor<T>, cfg: Conv2dConfig) -> Result<ConvShape> {
    let (xd, wd) = (x.dims(), w.dims());
    if xd.len() != 3 || wd.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects input (H, W, C) and kernel (K, K, Cin/groups, Cout), got {xd:?} and {wd:?}"
        )));
    }
    if cfg.stride == 0 || cfg.groups == 0 {
        return Err(Error::shape("conv2d stride and groups must be positive"));
    }
    let (h, ww, cin) = (xd[0], xd[1], xd[2]);
    let (kh, kw, cin_g, cout) = (wd[0], wd[1], wd[2], wd[3]);
    if cin != cin_g * cfg.groups || cout % cfg.groups != 0 {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input {cin}, kernel {cin_g}x{} groups -> {cout}",
            cfg.groups
        )));
    }
    if h + 2 * cfg.pad < kh || ww + 2 * cfg.pad < kw {
        return Err(Error::shape(format!(
            "kernel {kh}x{kw} larger than padded input {h}x{ww} (pad {})",
            cfg.pad
        )));
    }
    Ok(ConvShape {
        h,
        w: ww,
        cin,
        kh,
        kw,
        cin_g,
        cout,
        cout_g: cout / cfg.groups,
        ho: (h + 2 * cfg.pad - kh) / cfg.stride + 1,
        wo: (ww + 2 * cfg.pad - kw) / cfg.stride + 1,
    })
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Visit every (output pixel, kernel tap, input pixel) triple that lies
/// inside the padded input.
fn for_each_tap(s: &ConvShape, cfg: Conv2dConfig, mut f: impl FnMut(usize, usize, usize)) {
    for oh in 0..s.ho {
        for ow in 0..s.wo {
            let o = oh * s.wo + ow;
            for kh in 0..s.kh {
                let ih = (oh * cfg.stride + kh) as isize - cfg.pad as isize;
                if ih < 0 || ih >= s.h as isize {
                    continue;
                }
                for kw in 0..s.kw {
                    let iw = (ow * cfg.stride + kw) as isize - cfg.pad as isize;
                    if iw < 0 || iw >= s.w as isize {
                        continue;
                    }
                    f(o, kh * s.kw + kw, ih as usize * s.w + iw as usize);
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation over `(H, W, C)` maps with kernel layout
/// `(K, K, Cin / groups, Cout)`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    cfg: Conv2dConfig,
) -> Result<Tensor<T>> {
    let s = conv_shape(x, w, cfg)?;
    if let Some(b) = bias {
        if b.dims() != [s.cout] {
            return Err(Error::shape(format!(
                "conv2d bias must be ({}), got {:?}",
                s.cout,
                b.dims()
            )));
        }
    }
    let mut out = vec![T::zero(); s.ho * s.wo * s.cout];
    if let Some(b) = bias {
        for px in out.chunks_exact_mut(s.cout) {
            px.copy_from_slice(b.data());
        }
    }
    let (xd, wd) = (x.data(), w.data());
    for_each_tap(&s, cfg, |o, tap, i| {
        let acc = &mut out[o * s.cout..(o + 1) * s.cout];
        let xi = &xd[i * s.cin..(i + 1) * s.cin];
        let wt = &wd[tap * s.cin_g * s.cout..(tap + 1) * s.cin_g * s.cout];
        for g in 0..cfg.groups {
            let cols = g * s.cout_g..(g + 1) * s.cout_g;
            for ci in 0..s.cin_g {
                let xv = xi[g * s.cin_g + ci];
                let row = &wt[ci * s.cout..(ci + 1) * s.cout];
                for co in cols.clone() {
                    acc[co] += xv * row[co];
                }
            }
        }
    });
    Tensor::new(vec![s.ho, s.wo, s.cout], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    cfg: Conv2dConfig,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = conv_shape(x, w, cfg)?;
    if grad_out.dims() != [s.ho, s.wo, s.cout] {
        return Err(Error::shape(format!(
            "conv2d cotangent must be {:?}, got {:?}",
            [s.ho, s.wo, s.cout],
            grad_out.dims()
        )));
    }
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); s.cout];
    for px in gd.chunks_exact(s.cout) {
        for (acc, &g) in db.iter_mut().zip(px) {
            *acc += g;
        }
    }
    for_each_tap(&s, cfg, |o, tap, i| {
        let go = &gd[o * s.cout..(o + 1) * s.cout];
        let base = tap * s.cin_g * s.cout;
        for g in 0..cfg.groups {
            let cols = g * s.cout_g..(g + 1) * s.cout_g;
            for ci in 0..s.cin_g {
                let xi = i * s.cin + g * s.cin_g + ci;
                let xv = xd[xi];
                let row = base + ci * s.cout;
                let mut acc = T::zero();
                for co in cols.clone() {
                    acc += go[co] * wd[row + co];
                    dw[row + co] += xv * go[co];
                }
                dx[xi] += acc;
            }
        }
    });
    Ok((
        Tensor::new(x.dims().to_vec(), dx)?,
        Tensor::new(w.dims().to_vec(), dw)?,
        Tensor::new(vec![s.cout], db)?,
    ))
}

fn linear_shape<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let wd = w.dims();
    let k = *x.dims().last().expect("non-empty dims");
    if wd.len() != 2 || wd[0] != k {
        return Err(Error::shape(format!(
            "linear map {wd:?} does not accept trailing axis {k} of input {:?}",
            x.dims()
        )));
    }
    Ok((x.len() / k, k, wd[1]))
}

/// `x @ w + b` over the trailing axis of `x`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (m, k, n) = linear_shape(x, w)?;
    if let Some(b) = bias {
        if b.dims() != [n] {
            return Err(Error::shape(format!(
                "linear bias must be ({n}), got {:?}",
                b.dims()
            )));
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); m * n];
    for (row, acc) in out.chunks_exact_mut(n).enumerate() {
        if let Some(b) = bias {
            acc.copy_from_slice(b.data());
        }
        for (i, &xv) in xd[row * k..(row + 1) * k].iter().enumerate() {
            let wr = &wd[i * n..(i + 1) * n];
            for (a, &wv) in acc.iter_mut().zip(wr) {
                *a += xv * wv;
            }
        }
    }
    let mut dims = x.dims().to_vec();
    *dims.last_mut().expect("non-empty dims") = n;
    Tensor::new(dims, out)
}

pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (m, k, n) = linear_shape(x, w)?;
    if grad_out.len() != m * n {
        return Err(Error::shape("linear cotangent size mismatch"));
    }
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());
    let mut dx = vec![T::zero(); m * k];
    let mut dw = vec![T::zero(); k * n];
    let mut db = vec![T::zero(); n];
    for row in 0..m {
        let g = &gd[row * n..(row + 1) * n];
        for (a, &gv) in db.iter_mut().zip(g) {
            *a += gv;
        }
        for i in 0..k {
            let wr = &wd[i * n..(i + 1) * n];
            let xv = xd[row * k + i];
            let mut acc = T::zero();
            for j in 0..n {
                acc += g[j] * wr[j];
                dw[i * n + j] += xv * g[j];
            }
            dx[row * k + i] = acc;
        }
    }
    Ok((
        Tensor::new(x.dims().to_vec(), dx)?,
        Tensor::new(w.dims().to_vec(), dw)?,
        Tensor::new(vec![n], db)?,
    ))
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `ln(1 + e^x)`, kept strictly positive.
pub fn softplus<T: Real>(x: T) -> T {
    let v = x.max(T::zero()) + (-x.abs()).exp().ln_1p();
    v.max(T::min_positive_value())
}

/// Which entries share one mean and variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormPool {
    /// One statistic per channel over `outer x inner`.
    PerChannel,
    /// One statistic per outer position over `channels x inner`.
    PerPosition,
}

/// Layout of a normalization with per-channel affine: the tensor is viewed
/// as `(outer, channels, inner)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
    pub pool: NormPool,
}

impl NormLayout {
    fn groups(&self) -> usize {
        match self.pool {
            NormPool::PerChannel => self.channels,
            NormPool::PerPosition => self.outer,
        }
    }

    fn count(&self) -> usize {
        match self.pool {
            NormPool::PerChannel => self.outer * self.inner,
            NormPool::PerPosition => self.channels * self.inner,
        }
    }

    /// `(flat index, channel)` of every entry in statistic group `g`.
    fn members(&self, g: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (outer, chans) = match self.pool {
            NormPool::PerChannel => (0..self.outer, g..g + 1),
            NormPool::PerPosition => (g..g + 1, 0..self.channels),
        };
        outer.flat_map(move |o| {
            chans.clone().flat_map(move |c| {
                let base = (o * self.channels + c) * self.inner;
                (base..base + self.inner).map(move |k| (k, c))
            })
        })
    }
}

/// Saved statistics needed by [`channel_norm_backward`].
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn channel_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    layout: NormLayout,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let c = layout.channels;
    if x.len() != layout.outer * c * layout.inner || gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::shape(format!(
            "norm layout {layout:?} does not match input {:?} / affine {:?}",
            x.dims(),
            gamma.dims()
        )));
    }
    let n = T::from_f64(layout.count() as f64);
    let xd = x.data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); layout.groups()];
    let mut out = vec![T::zero(); x.len()];
    for (g, r_slot) in rstd.iter_mut().enumerate() {
        let mut sum = T::zero();
        for (k, _) in layout.members(g) {
            sum += xd[k];
        }
        let mean = sum / n;
        let mut var = T::zero();
        for (k, _) in layout.members(g) {
            let d = xd[k] - mean;
            var += d * d;
        }
        let r = T::one() / (var / n + eps).sqrt();
        *r_slot = r;
        for (k, ch) in layout.members(g) {
            let xh = (xd[k] - mean) * r;
            xhat[k] = xh;
            out[k] = xh * gamma.data()[ch] + beta.data()[ch];
        }
    }
    Ok((Tensor::new(x.dims().to_vec(), out)?, NormStats { xhat, rstd }))
}

pub fn channel_norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    layout: NormLayout,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = layout.channels;
    let n = T::from_f64(layout.count() as f64);
    let gd = grad_out.data();
    let gm = gamma.data();
    let mut dx = vec![T::zero(); gd.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for g in 0..layout.groups() {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for (k, ch) in layout.members(g) {
            dgamma[ch] += gd[k] * stats.xhat[k];
            dbeta[ch] += gd[k];
            let d = gd[k] * gm[ch];
            sum_d += d;
            sum_dx += d * stats.xhat[k];
        }
        let r = stats.rstd[g];
        for (k, ch) in layout.members(g) {
            let d = gd[k] * gm[ch];
            dx[k] = r / n * (n * d - sum_d - stats.xhat[k] * sum_dx);
        }
    }
    Ok((
        Tensor::new(grad_out.dims().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Dims of the transition tensor built from step sizes `(.., E, S)` and
/// log-rates `(E, N, S)`.
fn decay_shape<T: Real>(dt: &Tensor<T>, a_log: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (dd, ad) = (dt.dims(), a_log.dims());
    if dd.len() < 2 || ad.len() != 3 || dd[dd.len() - 2] != ad[0] || dd[dd.len() - 1] != ad[2] {
        return Err(Error::shape(format!(
            "transition needs step sizes (.., E, S) and log-rates (E, N, S), got {dd:?} and {ad:?}"
        )));
    }
    let (e, nn, s) = (ad[0], ad[1], ad[2]);
    Ok((dt.len() / (e * s), e, nn, s))
}

/// Diagonal transition entries `exp(-dt * exp(a_log))`, laid out
/// `(.., E, N, S)`, clamped into `(0, 1]`.
pub fn decay<T: Real>(dt: &Tensor<T>, a_log: &Tensor<T>) -> Result<Tensor<T>> {
    let (outer, e, nn, s) = decay_shape(dt, a_log)?;
    let rate: Vec<T> = a_log.data().iter().map(|v| v.exp()).collect();
    let dtd = dt.data();
    let mut out = Vec::with_capacity(outer * e * nn * s);
    for o in 0..outer {
        for ei in 0..e {
            for ni in 0..nn {
                for si in 0..s {
                    let d = dtd[(o * e + ei) * s + si];
                    let a = (-(d * rate[(ei * nn + ni) * s + si])).exp();
                    out.push(a.max(T::min_positive_value()).min(T::one()));
                }
            }
        }
    }
    let mut dims = dt.dims().to_vec();
    dims.insert(dims.len() - 1, nn);
    Tensor::new(dims, out)
}

pub fn decay_backward<T: Real>(
    dt: &Tensor<T>,
    a_log: &Tensor<T>,
    a: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (outer, e, nn, s) = decay_shape(dt, a_log)?;
    let rate: Vec<T> = a_log.data().iter().map(|v| v.exp()).collect();
    let (dtd, ad, gd) = (dt.data(), a.data(), grad_out.data());
    let mut ddt = vec![T::zero(); dt.len()];
    let mut dlog = vec![T::zero(); a_log.len()];
    for o in 0..outer {
        for ei in 0..e {
            for ni in 0..nn {
                for si in 0..s {
                    let k = ((o * e + ei) * nn + ni) * s + si;
                    let di = (o * e + ei) * s + si;
                    let ri = (ei * nn + ni) * s + si;
                    let ga = gd[k] * ad[k];
                    ddt[di] -= ga * rate[ri];
                    dlog[ri] -= ga * dtd[di] * rate[ri];
                }
            }
        }
    }
    Ok((
        Tensor::new(dt.dims().to_vec(), ddt)?,
        Tensor::new(a_log.dims().to_vec(), dlog)?,
    ))
}

/// Dims of a slot-stacked selective scan: `(L, E, S)` inputs with `N`
/// state entries per channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub slots: usize,
}

impl ScanDims {
    pub fn infer<T: Real>(
        x: &Tensor<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
        c: &Tensor<T>,
        d: &Tensor<T>,
    ) -> Result<Self> {
        let xd = x.dims();
        if xd.len() != 3 {
            return Err(Error::shape(format!("scan input must be (L, E, S), got {xd:?}")));
        }
        let (l, e, s) = (xd[0], xd[1], xd[2]);
        let bd = b.dims();
        if bd.len() != 3 || bd[0] != l || bd[2] != s {
            return Err(Error::shape(format!("scan B must be (L, N, S), got {bd:?}")));
        }
        let n = bd[1];
        let dims = ScanDims {
            len: l,
            channels: e,
            state: n,
            slots: s,
        };
        if a.dims() != [l, e, n, s] || c.dims() != bd || d.dims() != [e, s] {
            return Err(Error::shape(format!(
                "scan parameter dims A {:?}, C {:?}, D {:?} inconsistent with x {xd:?}, B {bd:?}",
                a.dims(),
                c.dims(),
                d.dims()
            )));
        }
        Ok(dims)
    }
}

fn check_scan_domain<T: Real>(x: &Tensor<T>, a: &Tensor<T>) -> Result<()> {
    if let Some(v) = a
        .data()
        .iter()
        .find(|&&v| !(v > T::zero() && v <= T::one()))
    {
        return Err(Error::Domain(format!(
            "transition entry {v} outside (0, 1]"
        )));
    }
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in scan input".into()));
    }
    Ok(())
}

/// Slot-parallel diagonal selective scan with zero initial state:
///
/// `h_i = A_i * h_{i-1} + B_i x_i`, `y_i = C_i . h_i + D x_i`
///
/// per slot and channel. Returns outputs `(L, E, S)` and hidden states
/// `(L, E, N, S)`.
pub fn selective_scan<T: Real>(
    x: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let sd = ScanDims::infer(x, a, b, c, d)?;
    check_scan_domain(x, a)?;
    let ScanDims {
        len,
        channels: e,
        state: n,
        slots: s,
    } = sd;
    let (xd, ad, bd, cd, dd) = (x.data(), a.data(), b.data(), c.data(), d.data());
    let mut y = vec![T::zero(); x.len()];
    let mut hs = vec![T::zero(); a.len()];
    let mut h = vec![T::zero(); n];
    for slot in 0..s {
        for ch in 0..e {
            h.iter_mut().for_each(|v| *v = T::zero());
            let skip = dd[ch * s + slot];
            for i in 0..len {
                let xi = xd[(i * e + ch) * s + slot];
                let mut acc = skip * xi;
                for k in 0..n {
                    let ak = ((i * e + ch) * n + k) * s + slot;
                    let bk = (i * n + k) * s + slot;
                    h[k] = ad[ak] * h[k] + bd[bk] * xi;
                    hs[ak] = h[k];
                    acc += cd[bk] * h[k];
                }
                y[(i * e + ch) * s + slot] = acc;
            }
        }
    }
    Ok((
        Tensor::new(x.dims().to_vec(), y)?,
        Tensor::new(a.dims().to_vec(), hs)?,
    ))
}

/// Reverse-time adjoint of [`selective_scan`]. Returns cotangents for
/// `(x, A, B, C, D)`.
#[allow(clippy::type_complexity)]
pub fn selective_scan_backward<T: Real>(
    x: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
    states: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
    let sd = ScanDims::infer(x, a, b, c, d)?;
    let ScanDims {
        len,
        channels: e,
        state: n,
        slots: s,
    } = sd;
    let (xd, ad, bd, cd, dd, hd, gd) = (
        x.data(),
        a.data(),
        b.data(),
        c.data(),
        d.data(),
        states.data(),
        grad_out.data(),
    );
    let mut dx = vec![T::zero(); x.len()];
    let mut da = vec![T::zero(); a.len()];
    let mut db = vec![T::zero(); b.len()];
    let mut dc = vec![T::zero(); c.len()];
    let mut dd_ = vec![T::zero(); d.len()];
    let mut dh = vec![T::zero(); n];
    for slot in 0..s {
        for ch in 0..e {
            dh.iter_mut().for_each(|v| *v = T::zero());
            let skip = dd[ch * s + slot];
            for i in (0..len).rev() {
                let xi_idx = (i * e + ch) * s + slot;
                let xi = xd[xi_idx];
                let gy = gd[xi_idx];
                let mut gx = skip * gy;
                dd_[ch * s + slot] += gy * xi;
                for k in 0..n {
                    let ak = ((i * e + ch) * n + k) * s + slot;
                    let bk = (i * n + k) * s + slot;
                    let h_i = hd[ak];
                    dc[bk] += gy * h_i;
                    // dh_i = C_i gy + A_{i+1} dh_{i+1}; dh holds A_{i+1} dh_{i+1} here.
                    let g = dh[k] + cd[bk] * gy;
                    let h_prev = if i == 0 {
                        T::zero()
                    } else {
                        hd[(((i - 1) * e + ch) * n + k) * s + slot]
                    };
                    da[ak] += g * h_prev;
                    db[bk] += g * xi;
                    gx += g * bd[bk];
                    dh[k] = g * ad[ak];
                }
                dx[xi_idx] += gx;
            }
        }
    }
    Ok((
        Tensor::new(x.dims().to_vec(), dx)?,
        Tensor::new(a.dims().to_vec(), da)?,
        Tensor::new(b.dims().to_vec(), db)?,
        Tensor::new(c.dims().to_vec(), dc)?,
        Tensor::new(d.dims().to_vec(), dd_)?,
    ))
}

/// Returns `(loss, softmax probabilities)` for a single logit vector.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, label: usize) -> Result<(T, Vec<T>)> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::shape(format!(
            "label {label} out of range for {} classes",
            z.len()
        )));
    }
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let loss = total.ln() + m - z[label];
    let probs = exps.into_iter().map(|e| e / total).collect();
    Ok((loss, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(&[3, 3, 2], |i| i as f64).unwrap();
        let mut w = Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap();
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let y = conv2d(&x, &w, None, Conv2dConfig::new(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_stride_and_padding_dims() {
        let x = Tensor::<f64>::zeros(&[8, 6, 1]).unwrap();
        let w = Tensor::<f64>::zeros(&[3, 3, 1, 4]).unwrap();
        let y = conv2d(&x, &w, None, Conv2dConfig::new(2, 1)).unwrap();
        assert_eq!(y.dims(), &[4, 3, 4]);
    }

    #[test]
    fn conv_hand_example() {
        // 2x2 input, 2x2 kernel, no padding: single output = sum of products.
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, -1.0]);
        let y = conv2d(&x, &w, Some(&t(&[1], &[0.5])), Conv2dConfig::new(1, 0)).unwrap();
        assert_eq!(y.data(), &[1.0 - 4.0 + 0.5]);
    }

    #[test]
    fn grouped_conv_keeps_groups_separate() {
        let x = t(&[1, 1, 2], &[3.0, 5.0]);
        let w = t(&[1, 1, 1, 2], &[2.0, 10.0]);
        let y = conv2d(&x, &w, None, Conv2dConfig::grouped(1, 0, 2)).unwrap();
        assert_eq!(y.data(), &[6.0, 50.0]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[3, 3, 2]).unwrap();
        let w = Tensor::<f64>::zeros(&[3, 3, 3, 1]).unwrap();
        assert!(conv2d(&x, &w, None, Conv2dConfig::new(1, 1)).is_err());
    }

    #[test]
    fn linear_hand_example() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[2, 1], &[10.0, 1.0]);
        let y = linear(&x, &w, Some(&t(&[1], &[0.5]))).unwrap();
        assert_eq!(y.data(), &[12.5, 34.5]);
    }

    #[test]
    fn softplus_stays_positive() {
        assert!(softplus(-800.0f64) > 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(40.0f64) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn decay_half() {
        let dt = t(&[1, 1, 1], &[2f64.ln()]);
        let alog = t(&[1, 2, 1], &[0.0, 0.0]);
        let a = decay(&dt, &alog).unwrap();
        assert_eq!(a.dims(), &[1, 1, 2, 1]);
        for &v in a.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_never_leaves_unit_interval() {
        let dt = t(&[1, 1, 1], &[1e300]);
        let alog = t(&[1, 1, 1], &[10.0]);
        let a = decay(&dt, &alog).unwrap();
        assert!(a.data()[0] > 0.0 && a.data()[0] <= 1.0);
    }

    #[test]
    fn scan_rejects_out_of_domain_transition() {
        let x = t(&[1, 1, 1], &[1.0]);
        let a = t(&[1, 1, 1, 1], &[1.5]);
        let b = t(&[1, 1, 1], &[1.0]);
        let d = t(&[1, 1], &[0.0]);
        assert!(matches!(selective_scan(&x, &a, &b, &b, &d), Err(Error::Domain(_))));
    }

    #[test]
    fn scan_rejects_nan_input() {
        let x = t(&[1, 1, 1], &[f64::NAN]);
        let a = t(&[1, 1, 1, 1], &[0.5]);
        let b = t(&[1, 1, 1], &[1.0]);
        let d = t(&[1, 1], &[0.0]);
        assert!(matches!(selective_scan(&x, &a, &b, &b, &d), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cross_entropy_uniform() {
        let (loss, p) = cross_entropy(&t(&[4], &[0.0; 4]), 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}

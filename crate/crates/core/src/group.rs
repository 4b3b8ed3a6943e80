//! The p4 rotation group and the equivariant layer primitives built on it.
//!
//! Every layer here is weight expansion followed by a standard dense op: the
//! learnable base tensor is expanded by a cached [`Gather`] table into a
//! full kernel (the orbit) and handed to [`kernels::conv2d`] or
//! [`kernels::linear`]. The orbit is never stored as a parameter.
//!
//! Each layer exists in two forms: a `record_*` function that appends it to
//! an autodiff [`Tape`], and a plain function over tensors that wraps it.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{Conv2dConfig, NormLayout, NormPool};
use crate::tensor::{
    cached_gather, cycle_axis_gather, rotate_spatial_gather, rotated_position, Gather, Real,
    Tensor, GROUP_ORDER,
};

const T4: usize = GROUP_ORDER;

/// Epsilon of every normalization layer.
pub const NORM_EPS: f64 = 1e-5;

/// The cyclic group of quarter turns, as 2x2 matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationGroup {
    matrices: Vec<[[f64; 2]; 2]>,
}

impl RotationGroup {
    pub fn order(&self) -> usize {
        self.matrices.len()
    }

    pub fn matrix(&self, t: usize) -> [[f64; 2]; 2] {
        self.matrices[t % self.order()]
    }

    pub fn matrices(&self) -> &[[[f64; 2]; 2]] {
        &self.matrices
    }

    /// Index of the element `G_a G_b`.
    pub fn compose(&self, a: usize, b: usize) -> usize {
        (a + b) % self.order()
    }

    pub fn inverse(&self, t: usize) -> usize {
        (self.order() - t % self.order()) % self.order()
    }
}

/// `G_t = [[cos 2pi t/T, sin 2pi t/T], [-sin 2pi t/T, cos 2pi t/T]]`.
pub fn build_group(order: usize) -> Result<RotationGroup> {
    if order != T4 {
        return Err(Error::UnsupportedOrder(order));
    }
    let matrices = (0..order)
        .map(|t| {
            // Quarter turns have exact trigonometric values; avoid 6e-17 residue.
            let (c, s) = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][t];
            [[c, s], [-s, c]]
        })
        .collect();
    Ok(RotationGroup { matrices })
}

pub fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Expansion tables

fn dims4(dims: &[usize], what: &str) -> Result<[usize; 4]> {
    dims.try_into()
        .map_err(|_| Error::shape(format!("{what} must have 4 axes, got {dims:?}")))
}

fn square_kernel(k0: usize, k1: usize, what: &str) -> Result<()> {
    if k0 != k1 {
        return Err(Error::shape(format!("{what} must be square, got {k0}x{k1}")));
    }
    Ok(())
}

/// Lifting orbit: base `(K, K, C0, C1)` to a conv kernel
/// `(K, K, C0, C1 * 4)` whose output channel `c1 * 4 + t` is
/// `rotate_spatial(base, t)[.., c1]`.
pub fn lift_table(base_dims: &[usize]) -> Result<Arc<Gather>> {
    let [k, k1, c0, c1] = dims4(base_dims, "lifting kernel")?;
    square_kernel(k, k1, "lifting kernel")?;
    cached_gather("lift", base_dims, || {
        let rots: Vec<Gather> = (0..T4)
            .map(|t| rotate_spatial_gather(base_dims, t))
            .collect::<Result<_>>()?;
        let n = k * k * c0 * c1;
        let mut src = vec![0; n * T4];
        for (i, s) in src.iter_mut().enumerate() {
            let (flat, t) = (i / T4, i % T4);
            *s = rots[t].sources()[flat];
        }
        Gather::new(base_dims.to_vec(), vec![k, k, c0, c1 * T4], src)
    })
}

/// Orbit of a group kernel `(K, K, Cin, 4, Cout)` for output slot `t`:
/// `rotate_spatial(cycle_axis(base, 3, t), t)`.
fn group_orbit_gather(base_dims: &[usize], t: usize) -> Result<Gather> {
    let cyc = cycle_axis_gather(base_dims, 3, t)?;
    let rot = rotate_spatial_gather(base_dims, t)?;
    cyc.then(&rot)
}

/// Dense conv kernel `(K, K, Cin * 4, Cout * 4)` for group-to-group
/// convolution: entry `[a, b, ci * 4 + g, co * 4 + t] = orbit_t[a, b, ci, g, co]`.
pub fn group_kernel_table(base_dims: &[usize]) -> Result<Arc<Gather>> {
    if base_dims.len() != 5 || base_dims[3] != T4 {
        return Err(Error::shape(format!(
            "group kernel must be (K, K, Cin, 4, Cout), got {base_dims:?}"
        )));
    }
    let (k, cin, cout) = (base_dims[0], base_dims[2], base_dims[4]);
    square_kernel(k, base_dims[1], "group kernel")?;
    cached_gather("group_kernel", base_dims, || {
        let orbits: Vec<Gather> = (0..T4)
            .map(|t| group_orbit_gather(base_dims, t))
            .collect::<Result<_>>()?;
        let mut src = Vec::with_capacity(k * k * cin * T4 * cout * T4);
        for pos in 0..k * k {
            for ci in 0..cin {
                for g in 0..T4 {
                    for co in 0..cout {
                        for orbit in &orbits {
                            let flat = ((pos * cin + ci) * T4 + g) * cout + co;
                            src.push(orbit.sources()[flat]);
                        }
                    }
                }
            }
        }
        Gather::new(base_dims.to_vec(), vec![k, k, cin * T4, cout * T4], src)
    })
}

/// Grouped conv kernel `(K, K, 4, C * 4)` for the depthwise group conv with
/// base `(K, K, C, 4)`: each channel mixes only its own four group slots.
pub fn depthwise_kernel_table(base_dims: &[usize]) -> Result<Arc<Gather>> {
    let [k, k1, c, t4] = dims4(base_dims, "depthwise group kernel")?;
    square_kernel(k, k1, "depthwise group kernel")?;
    if t4 != T4 {
        return Err(Error::shape(format!(
            "depthwise group kernel must be (K, K, C, 4), got {base_dims:?}"
        )));
    }
    cached_gather("depthwise_kernel", base_dims, || {
        let orbits: Vec<Gather> = (0..T4)
            .map(|t| {
                let cyc = cycle_axis_gather(base_dims, 3, t)?;
                cyc.then(&rotate_spatial_gather(base_dims, t)?)
            })
            .collect::<Result<_>>()?;
        let mut src = Vec::with_capacity(k * k * T4 * c * T4);
        for pos in 0..k * k {
            for g in 0..T4 {
                for ch in 0..c {
                    for orbit in &orbits {
                        src.push(orbit.sources()[(pos * c + ch) * T4 + g]);
                    }
                }
            }
        }
        Gather::new(base_dims.to_vec(), vec![k, k, T4, c * T4], src)
    })
}

/// EQ-Linear expansion: `W (C1, 4, C2)` to `(C1 * 4, C2 * 4)` with entry
/// `[c1 * 4 + g, c2 * 4 + t] = W[c1, (g - t) mod 4, c2]`.
pub fn eq_linear_table(c1: usize, c2: usize) -> Result<Arc<Gather>> {
    cached_gather("eq_linear", &[c1, c2], || {
        let mut src = Vec::with_capacity(c1 * T4 * c2 * T4);
        for i in 0..c1 {
            for g in 0..T4 {
                for j in 0..c2 {
                    for t in 0..T4 {
                        src.push((i * T4 + (g + T4 - t) % T4) * c2 + j);
                    }
                }
            }
        }
        Gather::new(vec![c1, T4, c2], vec![c1 * T4, c2 * T4], src)
    })
}

/// Broadcast a per-channel vector `(C)` across `k` trailing copies.
pub fn repeat_table(c: usize, k: usize) -> Result<Arc<Gather>> {
    cached_gather("repeat", &[c, k], || {
        Gather::new(vec![c], vec![c * k], (0..c * k).map(|i| i / k).collect())
    })
}

/// EQ-PixelShuffle table for input dims `(H, W, C' r^2, 4)`. Group slot `t`
/// places channel `c' r^2 + k` at subpixel `(k / r, k % r)` rotated by `t`
/// quarter turns inside the `r x r` block.
pub fn pixel_shuffle_table(dims: &[usize], r: usize) -> Result<Arc<Gather>> {
    let [h, w, c, t4] = dims4(dims, "pixel shuffle input")?;
    if t4 != T4 {
        return Err(Error::shape(format!(
            "pixel shuffle input needs a group axis of 4, got {dims:?}"
        )));
    }
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape(format!(
            "{c} channels not divisible by factor^2 = {}",
            r * r
        )));
    }
    let co = c / (r * r);
    let mut key = dims.to_vec();
    key.push(r);
    cached_gather("pixel_shuffle", &key, || {
        let (ho, wo) = (h * r, w * r);
        let mut src = vec![0; ho * wo * co * T4];
        for y in 0..h {
            for x in 0..w {
                for cc in 0..co {
                    for k in 0..r * r {
                        for t in 0..T4 {
                            let ((dy, dx), _) = rotated_position(r, r, t, k / r, k % r);
                            let out = (((y * r + dy) * wo + x * r + dx) * co + cc) * T4 + t;
                            src[out] = ((y * w + x) * c + cc * r * r + k) * T4 + t;
                        }
                    }
                }
            }
        }
        Gather::new(dims.to_vec(), vec![ho, wo, co, T4], src)
    })
}

// ---------------------------------------------------------------------------
// Weights

/// Learnable base `(K, K, C_in, C_out)` of a lifting convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftingKernel<T> {
    pub base: Tensor<T>,
}

impl<T: Real> LiftingKernel<T> {
    pub fn new(base: Tensor<T>) -> Result<Self> {
        lift_table(base.dims())?;
        Ok(LiftingKernel { base })
    }

    /// Derived orbit `(K, K, C_in, C_out, 4)`; slice `t` is the base rotated
    /// `t` quarter turns.
    pub fn orbit(&self) -> Result<Tensor<T>> {
        let mut dims = self.base.dims().to_vec();
        dims.push(T4);
        lift_table(self.base.dims())?.apply(&self.base)?.reshape(&dims)
    }

    pub fn param_count(&self) -> usize {
        self.base.len()
    }
}

/// Learnable base `(K, K, C_in, 4, C_out)` of a group-to-group convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupKernel<T> {
    pub base: Tensor<T>,
}

impl<T: Real> GroupKernel<T> {
    pub fn new(base: Tensor<T>) -> Result<Self> {
        group_kernel_table(base.dims())?;
        Ok(GroupKernel { base })
    }

    /// Orbit for output slot `t`, dims `(K, K, C_in, 4, C_out)`.
    pub fn orbit(&self, t: usize) -> Result<Tensor<T>> {
        group_orbit_gather(self.base.dims(), t)?.apply(&self.base)
    }

    pub fn param_count(&self) -> usize {
        self.base.len()
    }
}

/// `W (C1, 4, C2)` and `b (C2)` of an EQ-Linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct EqLinearWeights<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> EqLinearWeights<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        let d = w.dims();
        if d.len() != 3 || d[1] != T4 || b.dims() != [d[2]] {
            return Err(Error::shape(format!(
                "EQ-Linear weights must be (C1, 4, C2) and (C2), got {d:?} and {:?}",
                b.dims()
            )));
        }
        Ok(EqLinearWeights { w, b })
    }

    pub fn zeros(c1: usize, c2: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[c1, T4, c2])?, Tensor::zeros(&[c2])?)
    }

    pub fn in_channels(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.w.dims()[2]
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Parameters of four unshared dense maps of the same shape, the
/// non-equivariant counterpart of one EQ-Linear.
pub fn independent_linear_param_count(c1: usize, c2: usize) -> usize {
    T4 * (c1 * T4 * c2 + c2)
}

// ---------------------------------------------------------------------------
// Tape recorders

fn group_dims(tape: &Tape<impl Real>, x: Var, what: &str) -> Result<[usize; 4]> {
    let d = tape.dims(x);
    if d.len() != 4 || d[3] != T4 {
        return Err(Error::shape(format!(
            "{what} expects a group feature map (H, W, C, 4), got {d:?}"
        )));
    }
    Ok([d[0], d[1], d[2], d[3]])
}

fn record_repeat<T: Real>(tape: &mut Tape<T>, b: Var, k: usize) -> Result<Var> {
    let c = tape.value(b).len();
    tape.gather(b, repeat_table(c, k)?)
}

/// EQ-Linear over the trailing `(C1, 4)` axes of `x`.
pub fn record_eq_linear<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
) -> Result<Var> {
    let wd = tape.dims(w).to_vec();
    let xd = tape.dims(x).to_vec();
    if wd.len() != 3 || wd[1] != T4 {
        return Err(Error::shape(format!("EQ-Linear weight must be (C1, 4, C2), got {wd:?}")));
    }
    let (c1, c2) = (wd[0], wd[2]);
    let r = xd.len();
    if r < 2 || xd[r - 1] != T4 || xd[r - 2] != c1 {
        return Err(Error::shape(format!(
            "EQ-Linear input must end in ({c1}, 4), got {xd:?}"
        )));
    }
    let mut flat = xd[..r - 2].to_vec();
    flat.push(c1 * T4);
    let xf = tape.reshape(x, &flat)?;
    let wf = tape.gather(w, eq_linear_table(c1, c2)?)?;
    let bf = match b {
        Some(b) => Some(record_repeat(tape, b, T4)?),
        None => None,
    };
    let y = tape.linear(xf, wf, bf)?;
    let mut out = xd[..r - 2].to_vec();
    out.extend([c2, T4]);
    tape.reshape(y, &out)
}

/// Lifting convolution of an image `(H, W, C0)` with base `(K, K, C0, C1)`.
pub fn record_lift<T: Real>(
    tape: &mut Tape<T>,
    image: Var,
    base: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let table = lift_table(tape.dims(base))?;
    let c1 = tape.dims(base)[3];
    let w = tape.gather(base, table)?;
    let b = match bias {
        Some(b) => Some(record_repeat(tape, b, T4)?),
        None => None,
    };
    let y = tape.conv2d(image, w, b, Conv2dConfig::new(stride, pad))?;
    let (ho, wo) = (tape.dims(y)[0], tape.dims(y)[1]);
    tape.reshape(y, &[ho, wo, c1, T4])
}

/// Group-to-group convolution. With `depthwise`, `base` is `(K, K, C, 4)`
/// and each channel only sees its own group slots; otherwise `base` is
/// `(K, K, C_in, 4, C_out)`.
pub fn record_group_conv<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    base: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
    depthwise: bool,
) -> Result<Var> {
    let [h, w, cin, _] = group_dims(tape, x, "group convolution")?;
    let bd = tape.dims(base).to_vec();
    let (table, cout, groups) = if depthwise {
        if bd.len() != 4 || bd[2] != cin {
            return Err(Error::shape(format!(
                "depthwise group conv needs C_in == C_out == {cin} and base (K, K, {cin}, 4), got {bd:?}"
            )));
        }
        (depthwise_kernel_table(&bd)?, cin, cin)
    } else {
        if bd.len() != 5 || bd[2] != cin {
            return Err(Error::shape(format!(
                "group conv base must be (K, K, {cin}, 4, C_out), got {bd:?}"
            )));
        }
        (group_kernel_table(&bd)?, bd[4], 1)
    };
    let xf = tape.reshape(x, &[h, w, cin * T4])?;
    let kw = tape.gather(base, table)?;
    let b = match bias {
        Some(b) => Some(record_repeat(tape, b, T4)?),
        None => None,
    };
    let y = tape.conv2d(xf, kw, b, Conv2dConfig::grouped(stride, pad, groups))?;
    let (ho, wo) = (tape.dims(y)[0], tape.dims(y)[1]);
    tape.reshape(y, &[ho, wo, cout, T4])
}

fn norm_layout(d: &[usize], pool: NormPool) -> Result<NormLayout> {
    if d.len() < 3 {
        return Err(Error::shape(format!("norm expects (H, W, C, ..), got {d:?}")));
    }
    Ok(NormLayout {
        outer: d[0] * d[1],
        channels: d[2],
        inner: d[3..].iter().product(),
        pool,
    })
}

/// Per-channel normalization of `(H, W, C, ..)` with statistics pooled over
/// every axis except `C`. On a group map this pools `(H, W, T)`.
pub fn record_channel_norm<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
) -> Result<Var> {
    let layout = norm_layout(tape.dims(x), NormPool::PerChannel)?;
    tape.channel_norm(x, gamma, beta, layout, T::from_f64(NORM_EPS))
}

/// Per-pixel normalization of `(H, W, C, ..)`: statistics pooled over
/// `(C, ..)` at each position, affine per channel. On a group map this
/// pools `(C, T)`.
pub fn record_token_norm<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
) -> Result<Var> {
    let layout = norm_layout(tape.dims(x), NormPool::PerPosition)?;
    tape.channel_norm(x, gamma, beta, layout, T::from_f64(NORM_EPS))
}

/// Strides and padding that keep a strided lift exactly equivariant.
pub fn patch_geometry(h: usize, w: usize, k: usize, stride: usize) -> Result<usize> {
    if stride == 0 || !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
        return Err(Error::PadRequired {
            height: h,
            width: w,
            divisor: stride,
        });
    }
    if k < stride || !(k - stride).is_multiple_of(2) {
        return Err(Error::shape(format!(
            "patch kernel {k} must be at least the stride {stride} with an even difference"
        )));
    }
    Ok((k - stride) / 2)
}

/// Strided lift followed by the optional equivariant norm.
pub fn record_patch_embed<T: Real>(
    tape: &mut Tape<T>,
    image: Var,
    base: Var,
    stride: usize,
    norm: Option<(Var, Var)>,
) -> Result<Var> {
    let d = tape.dims(image).to_vec();
    if d.len() != 3 {
        return Err(Error::shape(format!("patch embed expects (H, W, C), got {d:?}")));
    }
    let k = tape.dims(base)[0];
    let pad = patch_geometry(d[0], d[1], k, stride)?;
    let y = record_lift(tape, image, base, None, stride, pad)?;
    match norm {
        Some((g, b)) => record_channel_norm(tape, y, g, b),
        None => Ok(y),
    }
}

/// Stride-2, K = 2 group convolution doubling (or otherwise changing) the
/// channel count.
pub fn record_downsample<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    base: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let [h, w, _, _] = group_dims(tape, x, "downsample")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "downsample needs even spatial dims, got {h}x{w}"
        )));
    }
    let k = tape.dims(base)[0];
    if k != 2 {
        return Err(Error::shape(format!("downsample kernel must be 2x2, got {k}x{k}")));
    }
    record_group_conv(tape, x, base, bias, 2, 0, false)
}

/// Global average pool, EQ-Linear to `(classes, 4)`, mean over the group
/// axis.
pub fn record_invariant_head<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
) -> Result<Var> {
    let [h, ww, c, _] = group_dims(tape, x, "invariant head")?;
    let flat = tape.reshape(x, &[h * ww, c, T4])?;
    let pooled = tape.mean_axis(flat, 0)?;
    let z = record_eq_linear(tape, pooled, w, b)?;
    tape.mean_axis(z, 1)
}

pub fn record_pixel_shuffle<T: Real>(tape: &mut Tape<T>, x: Var, r: usize) -> Result<Var> {
    let table = pixel_shuffle_table(tape.dims(x), r)?;
    tape.gather(x, table)
}

// ---------------------------------------------------------------------------
// Tensor-level wrappers

fn run<T: Real>(
    f: impl FnOnce(&mut Tape<T>) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let out = f(&mut tape)?;
    Ok(tape.value(out).clone())
}

pub fn eq_linear<T: Real>(x: &Tensor<T>, w: &EqLinearWeights<T>) -> Result<Tensor<T>> {
    run(|tp| {
        let (xv, wv, bv) = (
            tp.constant(x.clone()),
            tp.constant(w.w.clone()),
            tp.constant(w.b.clone()),
        );
        record_eq_linear(tp, xv, wv, Some(bv))
    })
}

pub fn eq_conv_lift<T: Real>(
    image: &Tensor<T>,
    k: &LiftingKernel<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    run(|tp| {
        let (iv, kv) = (tp.constant(image.clone()), tp.constant(k.base.clone()));
        record_lift(tp, iv, kv, None, stride, pad)
    })
}

/// Group convolution; `depthwise` expects a `(K, K, C, 4)` base.
pub fn eq_conv_group<T: Real>(
    x: &Tensor<T>,
    base: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    depthwise: bool,
) -> Result<Tensor<T>> {
    run(|tp| {
        let (xv, kv) = (tp.constant(x.clone()), tp.constant(base.clone()));
        let bv = bias.map(|b| tp.constant(b.clone()));
        record_group_conv(tp, xv, kv, bv, stride, pad, depthwise)
    })
}

/// Learnable affine of the equivariant norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NormWeights<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> NormWeights<T> {
    pub fn identity(c: usize) -> Result<Self> {
        Ok(NormWeights {
            gamma: Tensor::full(&[c], T::one())?,
            beta: Tensor::zeros(&[c])?,
        })
    }
}

pub fn channel_norm<T: Real>(x: &Tensor<T>, n: &NormWeights<T>) -> Result<Tensor<T>> {
    run(|tp| {
        let xv = tp.constant(x.clone());
        let (g, b) = (tp.constant(n.gamma.clone()), tp.constant(n.beta.clone()));
        record_channel_norm(tp, xv, g, b)
    })
}

pub fn token_norm<T: Real>(x: &Tensor<T>, n: &NormWeights<T>) -> Result<Tensor<T>> {
    run(|tp| {
        let xv = tp.constant(x.clone());
        let (g, b) = (tp.constant(n.gamma.clone()), tp.constant(n.beta.clone()));
        record_token_norm(tp, xv, g, b)
    })
}

pub fn eq_patch_embed<T: Real>(
    image: &Tensor<T>,
    k: &LiftingKernel<T>,
    stride: usize,
    norm: Option<&NormWeights<T>>,
) -> Result<Tensor<T>> {
    run(|tp| {
        let (iv, kv) = (tp.constant(image.clone()), tp.constant(k.base.clone()));
        let nv = norm.map(|n| (tp.constant(n.gamma.clone()), tp.constant(n.beta.clone())));
        record_patch_embed(tp, iv, kv, stride, nv)
    })
}

pub fn eq_downsample<T: Real>(
    x: &Tensor<T>,
    k: &GroupKernel<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    run(|tp| {
        let (xv, kv) = (tp.constant(x.clone()), tp.constant(k.base.clone()));
        let bv = bias.map(|b| tp.constant(b.clone()));
        record_downsample(tp, xv, kv, bv)
    })
}

pub fn invariant_head<T: Real>(x: &Tensor<T>, w: &EqLinearWeights<T>) -> Result<Tensor<T>> {
    run(|tp| {
        let xv = tp.constant(x.clone());
        let (wv, bv) = (tp.constant(w.w.clone()), tp.constant(w.b.clone()));
        record_invariant_head(tp, xv, wv, Some(bv))
    })
}

pub fn eq_pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    pixel_shuffle_table(x.dims(), r)?.apply(x)
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(crate::kernels::silu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rotate_and_cycle, rotate_spatial};

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn quarter_turn_matrix() {
        let g = build_group(4).unwrap();
        assert_eq!(g.matrix(1), [[0.0, 1.0], [-1.0, 0.0]]);
        assert_eq!(g.matrix(0), [[1.0, 0.0], [0.0, 1.0]]);
        for a in 0..4 {
            for b in 0..4 {
                let p = mat_mul(g.matrix(a), g.matrix(b));
                let q = g.matrix(g.compose(a, b));
                for i in 0..2 {
                    for j in 0..2 {
                        assert!((p[i][j] - q[i][j]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn matrices_match_trigonometry() {
        let g = build_group(4).unwrap();
        for tt in 0..4 {
            let th = 2.0 * std::f64::consts::PI * tt as f64 / 4.0;
            let m = g.matrix(tt);
            let want = [[th.cos(), th.sin()], [-th.sin(), th.cos()]];
            for i in 0..2 {
                for j in 0..2 {
                    assert!((m[i][j] - want[i][j]).abs() < 1e-12);
                }
            }
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn other_orders_rejected() {
        assert!(matches!(build_group(8), Err(Error::UnsupportedOrder(8))));
    }

    #[test]
    fn orbit_slices_are_rotations() {
        let base = Tensor::from_fn(&[3, 3, 2, 2], |i| i as f64).unwrap();
        let k = LiftingKernel::new(base.clone()).unwrap();
        let orbit = k.orbit().unwrap();
        for tt in 0..4 {
            let r = rotate_spatial(&base, tt).unwrap();
            for (i, &v) in r.data().iter().enumerate() {
                assert_eq!(orbit.data()[i * 4 + tt].to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn one_by_one_lift_copies_into_every_slot() {
        let img = Tensor::from_fn(&[2, 3, 2], |i| i as f64 - 2.0).unwrap();
        let k = LiftingKernel::new(t(&[1, 1, 2, 1], &[0.5, -1.0])).unwrap();
        let y = eq_conv_lift(&img, &k, 1, 0).unwrap();
        assert_eq!(y.dims(), &[2, 3, 1, 4]);
        for px in 0..6 {
            let want = 0.5 * img.data()[2 * px] - img.data()[2 * px + 1];
            for g in 0..4 {
                assert_eq!(y.data()[px * 4 + g], want);
            }
        }
    }

    #[test]
    fn lift_of_zero_image_is_zero() {
        let img = Tensor::<f64>::zeros(&[4, 4, 1]).unwrap();
        let k = LiftingKernel::new(Tensor::from_fn(&[3, 3, 1, 2], |i| i as f64).unwrap()).unwrap();
        let y = eq_conv_lift(&img, &k, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slot_zero_selector_is_identity() {
        // 1x1 base with weight 1 on input slot 0: orbit_t puts it on slot t.
        let mut base = Tensor::<f64>::zeros(&[1, 1, 1, 4, 1]).unwrap();
        base.data_mut()[0] = 1.0;
        let x = Tensor::from_fn(&[2, 2, 1, 4], |i| (i as f64).cos()).unwrap();
        let y = eq_conv_group(&x, &base, None, 1, 0, false).unwrap();
        assert!(y.bit_eq(&x));
        let k = GroupKernel::new(base).unwrap();
        for tt in 0..4 {
            let o = k.orbit(tt).unwrap();
            let hot: Vec<usize> = (0..4).filter(|&g| o.data()[g] == 1.0).collect();
            assert_eq!(hot, vec![tt]);
        }
    }

    #[test]
    fn zero_group_kernel_gives_zero() {
        let x = Tensor::from_fn(&[3, 3, 2, 4], |i| i as f64).unwrap();
        let base = Tensor::<f64>::zeros(&[3, 3, 2, 4, 3]).unwrap();
        let y = eq_conv_group(&x, &base, None, 1, 1, false).unwrap();
        assert_eq!(y.dims(), &[3, 3, 3, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_rejects_channel_change() {
        let x = Tensor::<f64>::zeros(&[3, 3, 2, 4]).unwrap();
        let base = Tensor::<f64>::zeros(&[3, 3, 3, 4]).unwrap();
        assert!(eq_conv_group(&x, &base, None, 1, 1, true).is_err());
    }

    #[test]
    fn eq_linear_delta_weights() {
        let x = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let id = EqLinearWeights::new(t(&[1, 4, 1], &[1.0, 0.0, 0.0, 0.0]), t(&[1], &[0.0]))
            .unwrap();
        assert_eq!(eq_linear(&x, &id).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let sh = EqLinearWeights::new(t(&[1, 4, 1], &[0.0, 1.0, 0.0, 0.0]), t(&[1], &[0.0]))
            .unwrap();
        assert_eq!(eq_linear(&x, &sh).unwrap().data(), &[2.0, 3.0, 4.0, 1.0]);
    }

    #[test]
    fn eq_linear_param_count() {
        let w = EqLinearWeights::<f64>::zeros(3, 5).unwrap();
        assert_eq!(w.param_count(), 65);
        assert_eq!(independent_linear_param_count(3, 5), 260);
    }

    #[test]
    fn patch_mean_kernel() {
        let img = Tensor::from_fn(&[4, 4, 1], |i| i as f64).unwrap();
        let k = LiftingKernel::new(Tensor::full(&[2, 2, 1, 1], 0.25).unwrap()).unwrap();
        let y = eq_patch_embed(&img, &k, 2, None).unwrap();
        assert_eq!(y.dims(), &[2, 2, 1, 4]);
        // top-left patch holds 0, 1, 4, 5
        for g in 0..4 {
            assert_eq!(y.data()[g], 2.5);
        }
    }

    #[test]
    fn constant_image_embeds_to_constant() {
        let img = Tensor::full(&[1, 1, 2], 3.0).unwrap();
        let k = LiftingKernel::new(Tensor::from_fn(&[1, 1, 2, 3], |i| i as f64).unwrap()).unwrap();
        let y = eq_patch_embed(&img, &k, 1, None).unwrap();
        assert_eq!(y.dims(), &[1, 1, 3, 4]);
    }

    #[test]
    fn patch_embed_requires_divisible_dims() {
        let img = Tensor::<f64>::zeros(&[5, 4, 1]).unwrap();
        let k = LiftingKernel::new(Tensor::zeros(&[2, 2, 1, 1]).unwrap()).unwrap();
        assert!(matches!(
            eq_patch_embed(&img, &k, 2, None),
            Err(Error::PadRequired { divisor: 2, .. })
        ));
    }

    #[test]
    fn downsample_dims_and_constant() {
        let x = Tensor::full(&[4, 4, 1, 4], 2.0f64).unwrap();
        // Sum-preserving: total weight 1 spread over the 2x2 taps and 4 slots.
        let base = Tensor::full(&[2, 2, 1, 4, 2], 1.0 / 16.0).unwrap();
        let y = eq_downsample(&x, &GroupKernel::new(base).unwrap(), None).unwrap();
        assert_eq!(y.dims(), &[2, 2, 2, 4]);
        assert!(y.data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn downsample_rejects_odd_dims() {
        let x = Tensor::<f64>::zeros(&[3, 4, 1, 4]).unwrap();
        let base = Tensor::<f64>::zeros(&[2, 2, 1, 4, 2]).unwrap();
        assert!(eq_downsample(&x, &GroupKernel::new(base).unwrap(), None).is_err());
    }

    #[test]
    fn head_returns_bias_for_zero_weights() {
        let x = Tensor::full(&[2, 2, 3, 4], 1.0).unwrap();
        let w = EqLinearWeights::new(Tensor::zeros(&[3, 4, 2]).unwrap(), t(&[2], &[0.5, -1.5]))
            .unwrap();
        assert_eq!(invariant_head(&x, &w).unwrap().data(), &[0.5, -1.5]);
    }

    #[test]
    fn head_delta_weight_is_channel_mean() {
        let x = Tensor::from_fn(&[2, 2, 2, 4], |i| (i as f64 * 0.7).sin()).unwrap();
        let mut w = Tensor::<f64>::zeros(&[2, 4, 1]).unwrap();
        w.data_mut()[0] = 1.0;
        let head = EqLinearWeights::new(w, t(&[1], &[0.0])).unwrap();
        let logit = invariant_head(&x, &head).unwrap().data()[0];
        let mean: f64 = (0..x.len()).filter(|i| (i / 4) % 2 == 0).map(|i| x.data()[i]).sum::<f64>() / 16.0;
        assert!((logit - mean).abs() < 1e-15);
    }

    #[test]
    fn head_is_invariant() {
        let x = Tensor::from_fn(&[3, 3, 2, 4], |i| ((i * 37 % 11) as f64).sqrt()).unwrap();
        let w = EqLinearWeights::new(
            Tensor::from_fn(&[2, 4, 3], |i| (i as f64).sin()).unwrap(),
            t(&[3], &[0.1, 0.2, 0.3]),
        )
        .unwrap();
        let base = invariant_head(&x, &w).unwrap();
        for tt in 1..4 {
            let y = invariant_head(&rotate_and_cycle(&x, tt).unwrap(), &w).unwrap();
            assert!(y.max_abs_diff(&base).unwrap() < 1e-12);
        }
    }

    #[test]
    fn token_norm_pools_each_pixel() {
        let x = Tensor::from_fn(&[3, 3, 2, 4], |i| ((i * 37) % 11) as f64 - 4.0).unwrap();
        let y = token_norm(&x, &NormWeights::identity(2).unwrap()).unwrap();
        for px in y.data().chunks(8) {
            let m: f64 = px.iter().sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12);
        }
        let lhs = token_norm(&rotate_and_cycle(&x, 1).unwrap(), &NormWeights::identity(2).unwrap())
            .unwrap();
        let rhs = rotate_and_cycle(&y, 1).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn pixel_shuffle_base_placement() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as i64).unwrap().map(|v| v as f64);
        let y = eq_pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[2, 2, 1, 4]);
        // slot 0: channel k at (k / 2, k % 2)
        let slot0: Vec<f64> = (0..4).map(|p| y.data()[p * 4]).collect();
        assert_eq!(slot0, vec![0.0, 4.0, 8.0, 12.0]);
        assert!(eq_pixel_shuffle(&x, 1).unwrap().bit_eq(&x));
        assert!(eq_pixel_shuffle(&Tensor::<f64>::zeros(&[1, 1, 3, 4]).unwrap(), 2).is_err());
    }
}

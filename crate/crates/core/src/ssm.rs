//! Selective scan and the group Mamba block.
//!
//! Parameters are generated per pixel and per group slot by EQ-Linear maps,
//! flattened with the same paths as the features, and scanned slot by slot.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{scoped, uniform, Bindings, Params, Tape, Var};
use crate::error::{Error, Result};
use crate::group::{record_eq_linear, repeat_table};
use crate::kernels;
use crate::scan::{record_eq_merge, record_eq_scan};
use crate::tensor::{cached_gather, Gather, Real, Tensor, GROUP_ORDER, ZERO_FILL};

const T4: usize = GROUP_ORDER;

/// Single-slot selective scan: `x (L, C)`, `A (L, C, N)`, `B (L, N)`,
/// `C (L, N)`, `D (C)`, zero initial state.
pub fn selective_scan<T: Real>(
    x: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    let add_slot = |t: &Tensor<T>| {
        let mut dims = t.dims().to_vec();
        dims.push(1);
        t.clone().reshape(&dims)
    };
    let (y, _) = kernels::selective_scan(
        &add_slot(x)?,
        &add_slot(a)?,
        &add_slot(b)?,
        &add_slot(c)?,
        &add_slot(d)?,
    )?;
    y.reshape(x.dims())
}

/// How the input-dependent parameters are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsmMode {
    /// EQ-Linear maps mixing all four group slots.
    Group,
    /// One dense map applied to each slot separately, no cross-slot mixing.
    Independent,
}

/// Shape of the skip coefficient `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    PerChannel,
    Scalar,
}

/// Generator maps `b`, `c`, `dt` plus `a_log (E, N)` and `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMambaWeights<T> {
    pub params: Params<T>,
}

impl<T: Real> GroupMambaWeights<T> {
    fn build(
        channels: usize,
        state: usize,
        mode: SsmMode,
        skip: SkipMode,
        mut init: impl FnMut(&[usize], f64) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let mut params = Params::new();
        let fan_in = match mode {
            SsmMode::Group => channels * T4,
            SsmMode::Independent => channels,
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        for (name, out) in [("b", state), ("c", state), ("dt", channels)] {
            let w_dims = match mode {
                SsmMode::Group => vec![channels, T4, out],
                SsmMode::Independent => vec![channels, out],
            };
            params.insert(format!("{name}.w"), init(&w_dims, bound)?)?;
            params.insert(format!("{name}.b"), init(&[out], bound)?)?;
        }
        params.insert("a_log", Tensor::zeros(&[channels, state])?)?;
        let d_len = match skip {
            SkipMode::PerChannel => channels,
            SkipMode::Scalar => 1,
        };
        params.insert("d", Tensor::full(&[d_len], T::one())?)?;
        Ok(GroupMambaWeights { params })
    }

    /// Uniform `+-1/sqrt(fan_in)` generators, `a_log = 0`, `D = 1`.
    pub fn random(
        channels: usize,
        state: usize,
        mode: SsmMode,
        skip: SkipMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(channels, state, mode, skip, |dims, bound| uniform(rng, dims, bound))
    }

    /// All-zero generators and `a_log`, per-channel `D = d`.
    pub fn zeros(channels: usize, state: usize, mode: SsmMode, d: T) -> Result<Self> {
        let mut w = Self::build(channels, state, mode, SkipMode::PerChannel, |dims, _| {
            Tensor::zeros(dims)
        })?;
        w.params.get_mut("d")?.data_mut().fill(d);
        Ok(w)
    }

    pub fn mode(&self) -> Result<SsmMode> {
        mode_of(self.params.get("b.w")?.dims())
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }
}

fn mode_of(dims: &[usize]) -> Result<SsmMode> {
    match dims.len() {
        3 if dims[1] == T4 => Ok(SsmMode::Group),
        2 => Ok(SsmMode::Independent),
        _ => Err(Error::shape(format!(
            "generator weight must be (C1, 4, C2) or (C1, C2), got {dims:?}"
        ))),
    }
}

/// Expansion of a dense `(C1, C2)` map to `(C1 * 4, C2 * 4)` acting on each
/// group slot separately.
pub fn slot_linear_table(c1: usize, c2: usize) -> Result<Arc<Gather>> {
    cached_gather("slot_linear", &[c1, c2], || {
        let mut src = Vec::with_capacity(c1 * T4 * c2 * T4);
        for i in 0..c1 {
            for g in 0..T4 {
                for j in 0..c2 {
                    for t in 0..T4 {
                        src.push(if g == t { i * c2 + j } else { ZERO_FILL });
                    }
                }
            }
        }
        Gather::new(vec![c1, c2], vec![c1 * T4, c2 * T4], src)
    })
}

/// Generator map over trailing `(C1, 4)` axes; the weight rank selects
/// between EQ-Linear and the per-slot dense map.
pub fn record_generator<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let wd = tape.dims(w).to_vec();
    match mode_of(&wd)? {
        SsmMode::Group => record_eq_linear(tape, x, w, Some(b)),
        SsmMode::Independent => {
            let (c1, c2) = (wd[0], wd[1]);
            let xd = tape.dims(x).to_vec();
            let r = xd.len();
            if r < 2 || xd[r - 2] != c1 || xd[r - 1] != T4 {
                return Err(Error::shape(format!(
                    "slot map input must end in ({c1}, 4), got {xd:?}"
                )));
            }
            let mut flat = xd[..r - 2].to_vec();
            flat.push(c1 * T4);
            let xf = tape.reshape(x, &flat)?;
            let wf = tape.gather(w, slot_linear_table(c1, c2)?)?;
            let bf = tape.gather(b, repeat_table(c2, T4)?)?;
            let y = tape.linear(xf, wf, Some(bf))?;
            let mut out = xd[..r - 2].to_vec();
            out.extend([c2, T4]);
            tape.reshape(y, &out)
        }
    }
}

/// Parameters in map form and flattened along the scan paths.
#[derive(Debug, Clone, Copy)]
pub struct SsmVars {
    pub a2d: Var,
    pub b2d: Var,
    pub c2d: Var,
    pub delta2d: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub delta: Var,
    pub d: Var,
}

/// Broadcast `D` of length `E` or 1 to `(E, 4)`.
fn record_skip<T: Real>(tape: &mut Tape<T>, d: Var, e: usize) -> Result<Var> {
    let n = tape.value(d).len();
    let table = match n {
        1 => repeat_table(1, e * T4)?,
        _ if n == e => repeat_table(e, T4)?,
        _ => {
            return Err(Error::shape(format!(
                "skip coefficient must have length {e} or 1, got {n}"
            )))
        }
    };
    let flat = tape.gather(d, table)?;
    tape.reshape(flat, &[e, T4])
}

/// Generate and flatten the scan parameters for a group map `(H, W, E, 4)`.
pub fn record_generate_params<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &Bindings,
    prefix: &str,
) -> Result<SsmVars> {
    let xd = tape.dims(x).to_vec();
    if xd.len() != 4 || xd[3] != T4 {
        return Err(Error::shape(format!(
            "group Mamba expects (H, W, E, 4), got {xd:?}"
        )));
    }
    let e = xd[2];
    let a_log = p.scoped(prefix, "a_log")?;
    let ad = tape.dims(a_log).to_vec();
    if ad.len() != 2 || ad[0] != e {
        return Err(Error::shape(format!("a_log must be ({e}, N), got {ad:?}")));
    }
    let n = ad[1];
    let gen = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
        let w = p.scoped(prefix, &format!("{name}.w"))?;
        let b = p.scoped(prefix, &format!("{name}.b"))?;
        record_generator(tape, x, w, b)
    };
    let b2d = gen(tape, "b")?;
    let c2d = gen(tape, "c")?;
    let dt_raw = gen(tape, "dt")?;
    let delta2d = tape.softplus(dt_raw);
    let flat_log = tape.reshape(a_log, &[e * n])?;
    let log4 = tape.gather(flat_log, repeat_table(e * n, T4)?)?;
    let log4 = tape.reshape(log4, &[e, n, T4])?;
    let a2d = tape.decay(delta2d, log4)?;
    let d = record_skip(tape, p.scoped(prefix, "d")?, e)?;
    Ok(SsmVars {
        a: record_eq_scan(tape, a2d)?,
        b: record_eq_scan(tape, b2d)?,
        c: record_eq_scan(tape, c2d)?,
        delta: record_eq_scan(tape, delta2d)?,
        a2d,
        b2d,
        c2d,
        delta2d,
        d,
    })
}

/// Scan, slot-matched selective scans, merge.
pub fn record_group_mamba<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &Bindings,
    prefix: &str,
) -> Result<Var> {
    let origin = tape.dims(x).to_vec();
    let params = record_generate_params(tape, x, p, prefix)?;
    let seq = record_eq_scan(tape, x)?;
    let y = tape.selective_scan(seq, params.a, params.b, params.c, params.d)?;
    record_eq_merge(tape, y, &origin)
}

/// Materialized scan parameters, sequence form.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    /// `(L, E, N, 4)`
    pub a: Tensor<T>,
    /// `(L, N, 4)`
    pub b: Tensor<T>,
    /// `(L, N, 4)`
    pub c: Tensor<T>,
    /// `(E, 4)`, identical across slots
    pub d: Tensor<T>,
    /// `(L, E, 4)`
    pub delta: Tensor<T>,
}

/// Parameters in map form `(H, W, .., 4)` before flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams2d<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub delta: Tensor<T>,
}

pub fn generate_params<T: Real>(
    x: &Tensor<T>,
    w: &GroupMambaWeights<T>,
) -> Result<(SsmParams2d<T>, SsmParams<T>)> {
    let mut tape = Tape::new();
    let b = w.params.bind(&mut tape, false)?;
    let xv = tape.constant(x.clone());
    let v = record_generate_params(&mut tape, xv, &b, "")?;
    let get = |v: Var| tape.value(v).clone();
    Ok((
        SsmParams2d {
            a: get(v.a2d),
            b: get(v.b2d),
            c: get(v.c2d),
            delta: get(v.delta2d),
        },
        SsmParams {
            a: get(v.a),
            b: get(v.b),
            c: get(v.c),
            d: get(v.d),
            delta: get(v.delta),
        },
    ))
}

pub fn group_mamba<T: Real>(
    x: &Tensor<T>,
    w: &GroupMambaWeights<T>,
    mode: SsmMode,
) -> Result<Tensor<T>> {
    if w.mode()? != mode {
        return Err(Error::shape(format!(
            "weights were built for {:?} mode, {mode:?} requested",
            w.mode()?
        )));
    }
    let mut tape = Tape::new();
    let b = w.params.bind(&mut tape, false)?;
    let xv = tape.constant(x.clone());
    let y = record_group_mamba(&mut tape, xv, &b, "")?;
    Ok(tape.value(y).clone())
}

/// Scalar parameter count of a generator set for channel width `e` and
/// state size `n`.
pub fn group_mamba_param_count(e: usize, n: usize, mode: SsmMode, skip: SkipMode) -> usize {
    let lin = |o: usize| match mode {
        SsmMode::Group => e * T4 * o + o,
        SsmMode::Independent => e * o + o,
    };
    let d = match skip {
        SkipMode::PerChannel => e,
        SkipMode::Scalar => 1,
    };
    2 * lin(n) + lin(e) + e * n + d
}

/// Generator weights of the four baseline directions plus per-direction
/// `a_log (E, N, 4)` and `D (E, 4)`.
pub fn baseline_mamba_params<T: Real>(
    channels: usize,
    state: usize,
    rng: &mut impl Rng,
) -> Result<Params<T>> {
    let rank = dt_rank(channels);
    let mut p = Params::new();
    for d in 0..T4 {
        let pre = format!("dir{d}");
        p.insert(
            scoped(&pre, "x_proj"),
            uniform(rng, &[channels, rank + 2 * state], 1.0 / (channels as f64).sqrt())?,
        )?;
        let bound = 1.0 / (rank as f64).sqrt();
        p.insert(scoped(&pre, "dt_proj.w"), uniform(rng, &[rank, channels], bound)?)?;
        p.insert(scoped(&pre, "dt_proj.b"), uniform(rng, &[channels], bound)?)?;
    }
    p.insert("a_log", Tensor::zeros(&[channels, state, T4])?)?;
    p.insert("d", Tensor::full(&[channels, T4], T::one())?)?;
    Ok(p)
}

/// Low-rank width of the step-size projection.
pub fn dt_rank(channels: usize) -> usize {
    channels.div_ceil(16)
}

fn column_slice_table(rows: usize, cols: usize, start: usize, len: usize) -> Result<Arc<Gather>> {
    cached_gather("column_slice", &[rows, cols, start, len], || {
        let src = (0..rows)
            .flat_map(|r| (start..start + len).map(move |c| r * cols + c))
            .collect();
        Gather::new(vec![rows, cols], vec![rows, len], src)
    })
}

fn direction_table(l: usize, e: usize, d: usize) -> Result<Arc<Gather>> {
    cached_gather("direction", &[l, e, d], || {
        let src = (0..l * e).map(|i| i * T4 + d).collect();
        Gather::new(vec![l, e, T4], vec![l, e], src)
    })
}

/// Four-direction selective scan on sequences `(L, E, 4)` from
/// [`crate::scan::record_baseline_scan`], each direction with its own
/// generators.
pub fn record_baseline_mamba<T: Real>(
    tape: &mut Tape<T>,
    seq: Var,
    p: &Bindings,
    prefix: &str,
) -> Result<Var> {
    let sd = tape.dims(seq).to_vec();
    if sd.len() != 3 || sd[2] != T4 {
        return Err(Error::shape(format!(
            "baseline Mamba expects sequences (L, E, 4), got {sd:?}"
        )));
    }
    let (l, e) = (sd[0], sd[1]);
    let a_log = p.scoped(prefix, "a_log")?;
    let n = tape.dims(a_log)[1];
    let rank = dt_rank(e);
    let width = rank + 2 * n;
    let (mut dts, mut bs, mut cs) = (Vec::new(), Vec::new(), Vec::new());
    for d in 0..T4 {
        let pre = scoped(prefix, &format!("dir{d}"));
        let xd = tape.gather(seq, direction_table(l, e, d)?)?;
        let proj = tape.linear(xd, p.scoped(&pre, "x_proj")?, None)?;
        let low = tape.gather(proj, column_slice_table(l, width, 0, rank)?)?;
        bs.push(tape.gather(proj, column_slice_table(l, width, rank, n)?)?);
        cs.push(tape.gather(proj, column_slice_table(l, width, rank + n, n)?)?);
        let dt = tape.linear(
            low,
            p.scoped(&pre, "dt_proj.w")?,
            Some(p.scoped(&pre, "dt_proj.b")?),
        )?;
        dts.push(tape.softplus(dt));
    }
    let dt = tape.stack(&dts)?;
    let b = tape.stack(&bs)?;
    let c = tape.stack(&cs)?;
    let a = tape.decay(dt, a_log)?;
    tape.selective_scan(seq, a, b, c, p.scoped(prefix, "d")?)
}

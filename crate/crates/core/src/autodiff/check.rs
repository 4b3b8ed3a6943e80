use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Denominator floor of the relative-error metric.
pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    let hi = f(x + h)?;
    let lo = f(x - h)?;
    if !hi.is_finite() || !lo.is_finite() {
        return Err(Error::Evaluation(format!(
            "objective is non-finite near {x} (f(x+h) = {hi}, f(x-h) = {lo})"
        )));
    }
    Ok((hi - lo) / (2.0 * h))
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamGradError {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Finite-difference comparison of analytic gradients.
#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamGradError>,
    pub max_rel_error: f64,
    pub epsilon: f64,
    pub dtype: DType,
    pub coords_checked: usize,
    pub seed: u64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub h: f64,
    /// Total coordinates to probe; at least one lands in every tensor.
    pub coords: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            h: 1e-6,
            coords: 200,
            seed: 0,
        }
    }
}

/// Choose `(tensor, flat index)` probes: one per tensor, the rest spread
/// uniformly over all coordinates without repetition.
fn sample_coords(sizes: &[usize], total: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = sizes.iter().sum();
    let mut starts = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for &s in sizes {
        starts.push(acc);
        acc += s;
    }
    let mut picked = std::collections::BTreeSet::new();
    for (i, &s) in sizes.iter().enumerate() {
        if s > 0 {
            picked.insert(starts[i] + sample(&mut rng, s, 1).index(0));
        }
    }
    let want = total.max(picked.len()).min(n);
    for k in sample(&mut rng, n, n.min(want + sizes.len())) {
        if picked.len() >= want {
            break;
        }
        picked.insert(k);
    }
    picked
        .into_iter()
        .map(|flat| {
            let t = starts.partition_point(|&s| s <= flat) - 1;
            (t, flat - starts[t])
        })
        .collect()
}

/// Compare `analytic` gradients of `f` at `params` against central
/// differences.
pub fn finite_diff_check(
    f: impl Fn(&[Tensor<f64>]) -> Result<f64>,
    names: &[String],
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    cfg: FdConfig,
) -> Result<GradReport> {
    if names.len() != params.len() || analytic.len() != params.len() {
        return Err(Error::shape("names, params and gradients must align"));
    }
    for (p, g) in params.iter().zip(analytic) {
        if p.dims() != g.dims() {
            return Err(Error::shape(format!(
                "gradient dims {:?} differ from parameter dims {:?}",
                g.dims(),
                p.dims()
            )));
        }
    }
    let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
    let probes = sample_coords(&sizes, cfg.coords, cfg.seed);
    let work = params.to_vec();
    let mut per: Vec<Option<ParamGradError>> = vec![None; params.len()];
    for &(t, k) in &probes {
        let orig = params[t].data()[k];
        let numeric = central_difference(
            |x| {
                let mut local = work.clone();
                local[t].data_mut()[k] = x;
                f(&local)
            },
            orig,
            cfg.h,
        )?;
        let a = analytic[t].data()[k];
        let err = relative_error(a, numeric);
        let entry = per[t].get_or_insert_with(|| ParamGradError {
            name: names[t].clone(),
            coords_checked: 0,
            max_rel_error: -1.0,
            worst_index: k,
            analytic: a,
            numeric,
        });
        entry.coords_checked += 1;
        if err > entry.max_rel_error {
            entry.max_rel_error = err;
            entry.worst_index = k;
            entry.analytic = a;
            entry.numeric = numeric;
        }
    }
    let params: Vec<ParamGradError> = per.into_iter().flatten().collect();
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradReport {
        max_rel_error,
        epsilon: cfg.h,
        dtype: DType::F64,
        coords_checked: probes.len(),
        seed: cfg.seed,
        params,
    })
}

#![allow(dead_code)]

use eqscan::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Real>(r: &mut ChaCha8Rng, dims: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::from_f64(r.gen_range(-bound..bound))).unwrap()
}

pub fn normal(r: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    uniform(r, dims, 1.0)
}

/// Small integers stored as floats, so permutations can be compared bit for bit.
pub fn integers(r: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| r.gen_range(-1000i32..1000) as f64).unwrap()
}

/// Independent squared-relative error, written out here rather than taken
/// from the harness.
pub fn sq_rel<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        num += (x - y) * (x - y);
        den += y * y;
    }
    num / den
}

pub fn max_abs<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.max_abs_diff(b).unwrap()
}

/// Step-by-step recurrence over `x (L, E, S)`, `a (L, E, N, S)`,
/// `b, c (L, N, S)`, `d (E, S)` with its own indexing.
pub fn naive_scan(
    x: &Tensor<f64>,
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    c: &Tensor<f64>,
    d: &Tensor<f64>,
) -> Tensor<f64> {
    let [l, e, n, s]: [usize; 4] = a.dims().try_into().unwrap();
    let mut y = Tensor::zeros(&[l, e, s]).unwrap();
    for slot in 0..s {
        for ch in 0..e {
            let mut h = vec![0.0; n];
            for i in 0..l {
                let xi = x.get(&[i, ch, slot]);
                let mut out = d.get(&[ch, slot]) * xi;
                for (k, hk) in h.iter_mut().enumerate() {
                    *hk = a.get(&[i, ch, k, slot]) * *hk + b.get(&[i, k, slot]) * xi;
                    out += c.get(&[i, k, slot]) * *hk;
                }
                let off = y.offset(&[i, ch, slot]);
                y.data_mut()[off] = out;
            }
        }
    }
    y
}

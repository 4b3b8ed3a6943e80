//! Image-to-sequence flattening.
//!
//! Group slot `t` of [`eq_cross_scan`] is read along path `t`: the row-major
//! base path carried along by `t` counterclockwise quarter turns. Read in
//! the slot's own frame, that is the row-major flatten of the slot rotated
//! back by `t` turns. With this pairing, rotating the map and shifting the
//! group axis only shifts the sequences between slots, bit for bit.
//!
//! [`cross_scan_baseline`] is the usual four-direction scan (rows, columns
//! and their reverses); it has no such property and serves as the negative
//! control.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{cached_gather, rotated_position, Gather, Real, Tensor, GROUP_ORDER};

const T4: usize = GROUP_ORDER;

/// A bijection from sequence position to flat spatial index `r * W + c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanPath {
    pub height: usize,
    pub width: usize,
    pub perm: Vec<usize>,
}

impl ScanPath {
    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Grid position visited at step `i`.
    pub fn position(&self, i: usize) -> (usize, usize) {
        (self.perm[i] / self.width, self.perm[i] % self.width)
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.height * self.width];
        self.perm.len() == seen.len()
            && self.perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
    }
}

/// Path `t` of the equivariant scan on an `h x w` grid.
pub fn eq_scan_path(h: usize, w: usize, t: usize) -> Result<ScanPath> {
    crate::tensor::check_group_index(t)?;
    let back = (T4 - t) % T4;
    let (_, (_, wr)) = rotated_position(h, w, back, 0, 0);
    let mut perm = vec![0; h * w];
    for r in 0..h {
        for c in 0..w {
            let ((rr, cc), _) = rotated_position(h, w, back, r, c);
            perm[rr * wr + cc] = r * w + c;
        }
    }
    Ok(ScanPath {
        height: h,
        width: w,
        perm,
    })
}

/// The four baseline directions: row-major, column-major, reversed
/// row-major, reversed column-major.
pub fn baseline_path(h: usize, w: usize, direction: usize) -> Result<ScanPath> {
    crate::tensor::check_group_index(direction)?;
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..w).flat_map(|c| (0..h).map(move |r| r * w + c)).collect();
    let perm = match direction {
        0 => row,
        1 => col,
        2 => row.into_iter().rev().collect(),
        _ => col.into_iter().rev().collect(),
    };
    Ok(ScanPath {
        height: h,
        width: w,
        perm,
    })
}

fn split_dims(dims: &[usize], group_last: bool) -> Result<(usize, usize, usize)> {
    let min = if group_last { 4 } else { 3 };
    if dims.len() < min || (group_last && dims[dims.len() - 1] != T4) {
        return Err(Error::shape(format!(
            "scan expects (H, W, ..{}) dims, got {dims:?}",
            if group_last { ", 4" } else { "" }
        )));
    }
    let block: usize = dims[2..dims.len() - usize::from(group_last)].iter().product();
    Ok((dims[0], dims[1], block))
}

/// Gather `(H, W, .., 4) -> (L, .., 4)` for the equivariant scan.
pub fn eq_scan_table(dims: &[usize]) -> Result<Arc<Gather>> {
    let (h, w, block) = split_dims(dims, true)?;
    cached_gather("eq_scan", dims, || {
        let paths: Vec<ScanPath> = (0..T4).map(|t| eq_scan_path(h, w, t)).collect::<Result<_>>()?;
        let mut src = Vec::with_capacity(h * w * block * T4);
        for i in 0..h * w {
            for k in 0..block {
                for (t, p) in paths.iter().enumerate() {
                    src.push((p.perm[i] * block + k) * T4 + t);
                }
            }
        }
        let mut out = vec![h * w];
        out.extend_from_slice(&dims[2..]);
        Gather::new(dims.to_vec(), out, src)
    })
}

/// Inverse of [`eq_scan_table`] for a map of `origin` dims `(H, W, .., 4)`.
pub fn eq_merge_table(origin: &[usize]) -> Result<Arc<Gather>> {
    let scan = eq_scan_table(origin)?;
    cached_gather("eq_merge", origin, || {
        scan.inverse()
            .ok_or_else(|| Error::shape("scan table is not a permutation"))
    })
}

/// Gather `(H, W, ..) -> (L, .., 4)`, one trailing slot per baseline
/// direction.
pub fn baseline_scan_table(dims: &[usize]) -> Result<Arc<Gather>> {
    let (h, w, block) = split_dims(dims, false)?;
    cached_gather("baseline_scan", dims, || {
        let paths: Vec<ScanPath> =
            (0..T4).map(|d| baseline_path(h, w, d)).collect::<Result<_>>()?;
        let mut src = Vec::with_capacity(h * w * block * T4);
        for i in 0..h * w {
            for k in 0..block {
                for p in &paths {
                    src.push(p.perm[i] * block + k);
                }
            }
        }
        let mut out = vec![h * w];
        out.extend_from_slice(&dims[2..]);
        out.push(T4);
        Gather::new(dims.to_vec(), out, src)
    })
}

/// Gather `(L, .., 4) -> (H, W, .., 4)` returning each direction's sequence
/// to its own spatial copy; summing the trailing axis completes the merge.
pub fn baseline_unscan_table(origin: &[usize]) -> Result<Arc<Gather>> {
    let (h, w, block) = split_dims(origin, false)?;
    cached_gather("baseline_unscan", origin, || {
        let mut src = vec![0; h * w * block * T4];
        for d in 0..T4 {
            let p = baseline_path(h, w, d)?;
            for i in 0..h * w {
                for k in 0..block {
                    src[(p.perm[i] * block + k) * T4 + d] = (i * block + k) * T4 + d;
                }
            }
        }
        let mut seq = vec![h * w];
        seq.extend_from_slice(&origin[2..]);
        seq.push(T4);
        let mut out = origin.to_vec();
        out.push(T4);
        Gather::new(seq, out, src)
    })
}

/// Sequences `(L, C, 4)` with the spatial dims needed to merge them back.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSequence<T> {
    pub tensor: Tensor<T>,
    pub origin: Vec<usize>,
}

impl<T: Real> ScanSequence<T> {
    /// Sequences of slot `t`, `(L, ..)`.
    pub fn slot(&self, t: usize) -> Vec<T> {
        self.tensor.data().iter().skip(t).step_by(T4).copied().collect()
    }
}

pub fn eq_cross_scan<T: Real>(x: &Tensor<T>) -> Result<ScanSequence<T>> {
    Ok(ScanSequence {
        tensor: eq_scan_table(x.dims())?.apply(x)?,
        origin: x.dims().to_vec(),
    })
}

pub fn eq_cross_merge<T: Real>(seq: &ScanSequence<T>) -> Result<Tensor<T>> {
    let table = eq_merge_table(&seq.origin)?;
    if table.in_dims() != seq.tensor.dims() {
        return Err(Error::shape(format!(
            "sequence dims {:?} do not fit origin {:?}",
            seq.tensor.dims(),
            seq.origin
        )));
    }
    table.apply(&seq.tensor)
}

/// Baseline four-direction scan of an `(H, W, ..)` map to `(L, .., 4)`.
pub fn cross_scan_baseline<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    baseline_scan_table(x.dims())?.apply(x)
}

/// Sum the four directions back onto the `(H, W, ..)` grid.
pub fn cross_merge_baseline<T: Real>(seq: &Tensor<T>, origin: &[usize]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(seq.clone());
    let out = record_baseline_merge(&mut tape, v, origin)?;
    Ok(tape.value(out).clone())
}

pub fn record_eq_scan<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let table = eq_scan_table(tape.dims(x))?;
    tape.gather(x, table)
}

pub fn record_eq_merge<T: Real>(tape: &mut Tape<T>, seq: Var, origin: &[usize]) -> Result<Var> {
    let table = eq_merge_table(origin)?;
    tape.gather(seq, table)
}

pub fn record_baseline_scan<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let table = baseline_scan_table(tape.dims(x))?;
    tape.gather(x, table)
}

pub fn record_baseline_merge<T: Real>(
    tape: &mut Tape<T>,
    seq: Var,
    origin: &[usize],
) -> Result<Var> {
    let table = baseline_unscan_table(origin)?;
    let spread = tape.gather(seq, table)?;
    let axis = tape.dims(spread).len() - 1;
    tape.sum_axis(spread, axis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{cycle_group, rotate_and_cycle};

    fn slots(maps: [[i64; 4]; 4]) -> Tensor<f64> {
        // maps[t] is the 2x2 slot t in row-major order.
        Tensor::from_fn(&[2, 2, 1, 4], |i| maps[i % 4][i / 4] as f64).unwrap()
    }

    #[test]
    fn slot_zero_is_row_major() {
        let x = slots([[1, 2, 3, 4], [5, 6, 7, 8], [0; 4], [0; 4]]);
        let s = eq_cross_scan(&x).unwrap();
        assert_eq!(s.slot(0), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn slot_one_reads_the_map_turned_back() {
        // [[5,6],[7,8]] turned a quarter clockwise is [[7,5],[8,6]].
        let x = slots([[1, 2, 3, 4], [5, 6, 7, 8], [0; 4], [0; 4]]);
        let s = eq_cross_scan(&x).unwrap();
        assert_eq!(s.slot(1), vec![7.0, 5.0, 8.0, 6.0]);
        let back = eq_cross_merge(&s).unwrap();
        assert!(back.bit_eq(&x));
    }

    #[test]
    fn path_t_is_base_path_turned_t_times() {
        for (h, w) in [(3, 3), (2, 5)] {
            let p0 = eq_scan_path(h, w, 0).unwrap();
            assert_eq!(p0.perm, (0..h * w).collect::<Vec<_>>());
            for t in 0..4 {
                let p = eq_scan_path(h, w, t).unwrap();
                assert!(p.is_bijection());
                // Step i of path t sits where step i of the row-major path on
                // the turned-back grid lands after t turns.
                let (_, (hr, wr)) = rotated_position(h, w, (4 - t) % 4, 0, 0);
                for i in 0..h * w {
                    let ((r, c), _) = rotated_position(hr, wr, t, i / wr, i % wr);
                    assert_eq!(p.position(i), (r, c));
                }
            }
        }
    }

    #[test]
    fn theorem_one_on_a_small_map() {
        let x = Tensor::from_fn(&[3, 3, 2, 4], |i| ((i * 7919) % 101) as f64).unwrap();
        let s = eq_cross_scan(&x).unwrap();
        for t in 0..4 {
            let lhs = eq_cross_scan(&rotate_and_cycle(&x, t).unwrap()).unwrap();
            assert!(lhs.tensor.bit_eq(&cycle_group(&s.tensor, t).unwrap()));
        }
    }

    #[test]
    fn baseline_directions() {
        let x = Tensor::from_fn(&[2, 2, 1], |i| i as f64 + 1.0).unwrap();
        let s = cross_scan_baseline(&x).unwrap();
        let dir = |d: usize| -> Vec<f64> { (0..4).map(|i| s.data()[i * 4 + d]).collect() };
        assert_eq!(dir(0), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(dir(1), vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(dir(2), vec![4.0, 3.0, 2.0, 1.0]);
        assert_eq!(dir(3), vec![4.0, 2.0, 3.0, 1.0]);
        let merged = cross_merge_baseline(&s, x.dims()).unwrap();
        assert_eq!(merged.data(), &[4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn merge_rejects_wrong_length() {
        let seq = ScanSequence {
            tensor: Tensor::<f64>::zeros(&[5, 1, 4]).unwrap(),
            origin: vec![2, 2, 1, 4],
        };
        assert!(eq_cross_merge(&seq).is_err());
    }
}

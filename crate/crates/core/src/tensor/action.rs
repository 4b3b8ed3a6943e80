//! The three p4 actions: spatial rotation, group cyclic shift, and both.
//!
//! Conventions: `t = 1` rotates the `(H, W)` axes 90 degrees counterclockwise,
//! and the shift sends input group slot `g` to output slot `g + t`, i.e.
//! `out[g] = in[(g - t) mod 4]`.

use super::{Element, Gather, Tensor};
use crate::error::{Error, Result};

/// Order of the rotation group (p4).
pub const GROUP_ORDER: usize = 4;

pub fn check_group_index(t: usize) -> Result<()> {
    if t >= GROUP_ORDER {
        Err(Error::GroupIndex(t))
    } else {
        Ok(())
    }
}

/// Where position `(r, c)` of an `h x w` grid lands after `t` counterclockwise
/// quarter turns. Returns the new position and the rotated grid size.
pub fn rotated_position(
    h: usize,
    w: usize,
    t: usize,
    r: usize,
    c: usize,
) -> ((usize, usize), (usize, usize)) {
    let (mut r, mut c, mut h, mut w) = (r, c, h, w);
    for _ in 0..t % GROUP_ORDER {
        // out[i][j] = in[j][w - 1 - i]  <=>  in (r, c) -> out (w - 1 - c, r)
        let nr = w - 1 - c;
        let nc = r;
        r = nr;
        c = nc;
        std::mem::swap(&mut h, &mut w);
    }
    ((r, c), (h, w))
}

/// Gather table rotating axes 0 and 1 of a tensor with `dims` by `t` quarter
/// turns; trailing axes move as a block.
pub fn rotate_spatial_gather(dims: &[usize], t: usize) -> Result<Gather> {
    check_group_index(t)?;
    if dims.len() < 2 {
        return Err(Error::shape(format!(
            "spatial rotation needs rank >= 2, got dims {dims:?}"
        )));
    }
    let (h, w) = (dims[0], dims[1]);
    let block: usize = dims[2..].iter().product();
    let ((_, _), (ho, wo)) = rotated_position(h, w, t, 0, 0);
    let mut src = vec![0; h * w * block];
    for r in 0..h {
        for c in 0..w {
            let ((nr, nc), _) = rotated_position(h, w, t, r, c);
            let dst = (nr * wo + nc) * block;
            let from = (r * w + c) * block;
            for k in 0..block {
                src[dst + k] = from + k;
            }
        }
    }
    let mut out_dims = dims.to_vec();
    out_dims[0] = ho;
    out_dims[1] = wo;
    Gather::new(dims.to_vec(), out_dims, src)
}

/// Gather table cyclically shifting `axis` (which must have length 4) by `t`.
pub fn cycle_axis_gather(dims: &[usize], axis: usize, t: usize) -> Result<Gather> {
    check_group_index(t)?;
    if axis >= dims.len() || dims[axis] != GROUP_ORDER {
        return Err(Error::shape(format!(
            "group axis {axis} of dims {dims:?} must have length {GROUP_ORDER}"
        )));
    }
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut src = Vec::with_capacity(outer * GROUP_ORDER * inner);
    for o in 0..outer {
        for g in 0..GROUP_ORDER {
            let from = (g + GROUP_ORDER - t) % GROUP_ORDER;
            let base = (o * GROUP_ORDER + from) * inner;
            src.extend(base..base + inner);
        }
    }
    Gather::new(dims.to_vec(), dims.to_vec(), src)
}

/// Gather table for the joint action: rotate `(H, W)`, then shift the last
/// axis.
pub fn rotate_and_cycle_gather(dims: &[usize], t: usize) -> Result<Gather> {
    if dims.len() < 3 {
        return Err(Error::shape(format!(
            "joint action needs (H, W, .., T) dims, got {dims:?}"
        )));
    }
    let rot = rotate_spatial_gather(dims, t)?;
    let cyc = cycle_axis_gather(rot.out_dims(), dims.len() - 1, t)?;
    rot.then(&cyc)
}

/// `t` counterclockwise quarter turns of the two leading axes.
pub fn rotate_spatial<T: Element>(x: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    rotate_spatial_gather(x.dims(), t)?.apply(x)
}

/// Cyclic shift along an arbitrary length-4 axis.
pub fn cycle_axis<T: Element>(x: &Tensor<T>, axis: usize, t: usize) -> Result<Tensor<T>> {
    cycle_axis_gather(x.dims(), axis, t)?.apply(x)
}

/// Cyclic shift along the trailing group axis.
pub fn cycle_group<T: Element>(x: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let axis = x.rank() - 1;
    cycle_axis(x, axis, t)
}

/// Joint spatial rotation and group shift.
pub fn rotate_and_cycle<T: Element>(x: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    rotate_and_cycle_gather(x.dims(), t)?.apply(x)
}

use super::{check_dims, Element, Real, Tensor};
use crate::error::{Error, Result};

/// Source marker for output slots that are filled with zero.
pub const ZERO_FILL: usize = usize::MAX;

/// A precomputed index remap: `out[i] = in[src[i]]`.
///
/// Every group action, scan path and kernel orbit in the crate is one of
/// these, so equivariance is a property of integer tables and never of
/// floating-point arithmetic. Tables may repeat sources (broadcast) and may
/// contain [`ZERO_FILL`] entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gather {
    in_dims: Vec<usize>,
    out_dims: Vec<usize>,
    src: Vec<usize>,
}

impl Gather {
    pub fn new(in_dims: Vec<usize>, out_dims: Vec<usize>, src: Vec<usize>) -> Result<Self> {
        check_dims(&in_dims)?;
        check_dims(&out_dims)?;
        let n_in: usize = in_dims.iter().product();
        let n_out: usize = out_dims.iter().product();
        if src.len() != n_out {
            return Err(Error::shape(format!(
                "gather table has {} entries for output dims {out_dims:?}",
                src.len()
            )));
        }
        if let Some(&bad) = src.iter().find(|&&s| s != ZERO_FILL && s >= n_in) {
            return Err(Error::shape(format!(
                "gather source {bad} out of range for input dims {in_dims:?}"
            )));
        }
        Ok(Gather {
            in_dims,
            out_dims,
            src,
        })
    }

    pub fn identity(dims: &[usize]) -> Result<Self> {
        let n = dims.iter().product();
        Gather::new(dims.to_vec(), dims.to_vec(), (0..n).collect())
    }

    pub fn in_dims(&self) -> &[usize] {
        &self.in_dims
    }

    pub fn out_dims(&self) -> &[usize] {
        &self.out_dims
    }

    pub fn sources(&self) -> &[usize] {
        &self.src
    }

    pub fn apply<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.dims() != self.in_dims.as_slice() {
            return Err(Error::shape(format!(
                "gather expects input dims {:?}, got {:?}",
                self.in_dims,
                x.dims()
            )));
        }
        let data = x.data();
        let out = self
            .src
            .iter()
            .map(|&s| if s == ZERO_FILL { T::zero() } else { data[s] })
            .collect();
        Tensor::new(self.out_dims.clone(), out)
    }

    /// Adjoint of [`Gather::apply`]: scatter-add an output cotangent back onto
    /// the input shape.
    pub fn scatter_add<T: Real>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.dims() != self.out_dims.as_slice() {
            return Err(Error::shape(format!(
                "scatter expects dims {:?}, got {:?}",
                self.out_dims,
                grad_out.dims()
            )));
        }
        let mut acc = vec![T::zero(); self.in_dims.iter().product()];
        for (&s, &g) in self.src.iter().zip(grad_out.data()) {
            if s != ZERO_FILL {
                acc[s] += g;
            }
        }
        Tensor::new(self.in_dims.clone(), acc)
    }

    /// The gather equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &Gather) -> Result<Gather> {
        if next.in_dims != self.out_dims {
            return Err(Error::shape(format!(
                "cannot chain gather producing {:?} into one expecting {:?}",
                self.out_dims, next.in_dims
            )));
        }
        let src = next
            .src
            .iter()
            .map(|&s| if s == ZERO_FILL { ZERO_FILL } else { self.src[s] })
            .collect();
        Gather::new(self.in_dims.clone(), next.out_dims.clone(), src)
    }

    /// Reinterpret input and output dims without moving data.
    pub fn with_dims(mut self, in_dims: Vec<usize>, out_dims: Vec<usize>) -> Result<Gather> {
        let n_in: usize = in_dims.iter().product();
        let n_out: usize = out_dims.iter().product();
        if n_in != self.in_dims.iter().product::<usize>() || n_out != self.src.len() {
            return Err(Error::shape(format!(
                "cannot view gather {:?}->{:?} as {in_dims:?}->{out_dims:?}",
                self.in_dims, self.out_dims
            )));
        }
        self.in_dims = in_dims;
        self.out_dims = out_dims;
        Ok(self)
    }

    /// True when the table is a bijection between input and output slots.
    pub fn is_permutation(&self) -> bool {
        let n: usize = self.in_dims.iter().product();
        if n != self.src.len() {
            return false;
        }
        let mut seen = vec![false; n];
        for &s in &self.src {
            if s == ZERO_FILL || seen[s] {
                return false;
            }
            seen[s] = true;
        }
        true
    }

    pub fn inverse(&self) -> Option<Gather> {
        if !self.is_permutation() {
            return None;
        }
        let mut inv = vec![0; self.src.len()];
        for (i, &s) in self.src.iter().enumerate() {
            inv[s] = i;
        }
        Some(Gather {
            in_dims: self.out_dims.clone(),
            out_dims: self.in_dims.clone(),
            src: inv,
        })
    }
}

impl<T: Element> Tensor<T> {
    /// Convenience wrapper for [`Gather::apply`].
    pub fn gather(&self, g: &Gather) -> Result<Tensor<T>> {
        g.apply(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_matches_sequential_application() {
        let x = Tensor::from_fn(&[2, 3], |i| i as i64).unwrap();
        let a = Gather::new(vec![2, 3], vec![3, 2], vec![5, 4, 3, 2, 1, 0]).unwrap();
        let b = Gather::new(vec![3, 2], vec![4], vec![0, 0, ZERO_FILL, 5]).unwrap();
        let seq = b.apply(&a.apply(&x).unwrap()).unwrap();
        let fused = a.then(&b).unwrap().apply(&x).unwrap();
        assert_eq!(seq, fused);
        assert_eq!(fused.data(), &[5, 5, 0, 0]);
    }

    #[test]
    fn scatter_is_adjoint_of_gather() {
        // <G x, y> == <x, G^T y> for a broadcasting table.
        let g = Gather::new(vec![3], vec![5], vec![0, 2, 2, ZERO_FILL, 1]).unwrap();
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = Tensor::new(vec![5], vec![0.3, 1.0, -4.0, 9.0, 2.0]).unwrap();
        let gx = g.apply(&x).unwrap();
        let gty = g.scatter_add(&y).unwrap();
        let lhs: f64 = gx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_source_rejected() {
        assert!(Gather::new(vec![2], vec![1], vec![2]).is_err());
    }

    #[test]
    fn inverse_only_for_permutations() {
        let p = Gather::new(vec![3], vec![3], vec![2, 0, 1]).unwrap();
        let inv = p.inverse().unwrap();
        assert_eq!(p.then(&inv).unwrap(), Gather::identity(&[3]).unwrap());
        let q = Gather::new(vec![3], vec![3], vec![0, 0, 1]).unwrap();
        assert!(q.inverse().is_none());
    }
}

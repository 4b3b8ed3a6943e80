use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dConfig, NormLayout, NormStats};
use crate::tensor::{Gather, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Gather(Var, Arc<Gather>),
    Reshape(Var),
    Stack(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softplus(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cfg: Conv2dConfig,
    },
    Decay {
        dt: Var,
        a_log: Var,
    },
    Scan {
        x: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        states: Tensor<T>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        stats: NormStats<T>,
    },
    Reduce {
        x: Var,
        outer: usize,
        mid: usize,
        inner: usize,
        mean: bool,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        label: usize,
    },
    Custom {
        name: String,
        inputs: Vec<Var>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Dynamic reverse-mode tape. Values are recorded in execution order, which
/// is also a topological order of the graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn param_names(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].needs_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An unnamed leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A named trainable leaf. Recording the same name twice is an error.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::shape(format!("parameter `{name}` recorded twice")));
        }
        let v = self.variable(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn gather(&mut self, x: Var, table: Arc<Gather>) -> Result<Var> {
        let value = table.apply(self.value(x))?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::Gather(x, table), g))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(dims)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), g))
    }

    /// Stack equally shaped values along a new trailing axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("stack of nothing"))?;
        let dims = self.dims(first).to_vec();
        if let Some(&bad) = xs.iter().find(|&&v| self.dims(v) != dims.as_slice()) {
            return Err(Error::shape(format!(
                "stack expects {dims:?}, got {:?}",
                self.dims(bad)
            )));
        }
        let k = xs.len();
        let n = self.value(first).len();
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            for &v in xs {
                data.push(self.value(v).data()[i]);
            }
        }
        let mut out_dims = dims;
        out_dims.push(k);
        let value = Tensor::new(out_dims, data)?;
        let g = self.any_grad(xs);
        Ok(self.push(value, Op::Stack(xs.to_vec()), g))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "{what} of {:?} and {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.dims().to_vec(), data).expect("dims already checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let value = self.zip(a, b, |p, q| p + q);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let value = self.zip(a, b, |p, q| p * q);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let value = self.value(x).map(|v| v * k);
        let g = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, k), g)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::silu);
        let g = self.any_grad(&[x]);
        self.push(value, Op::Silu(x), g)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::softplus);
        let g = self.any_grad(&[x]);
        self.push(value, Op::Softplus(x), g)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let g = self.any_grad(&ins);
        Ok(self.push(value, Op::Linear { x, w, b }, g))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: Conv2dConfig) -> Result<Var> {
        let value = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), cfg)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let g = self.any_grad(&ins);
        Ok(self.push(value, Op::Conv2d { x, w, b, cfg }, g))
    }

    pub fn decay(&mut self, dt: Var, a_log: Var) -> Result<Var> {
        let value = kernels::decay(self.value(dt), self.value(a_log))?;
        let g = self.any_grad(&[dt, a_log]);
        Ok(self.push(value, Op::Decay { dt, a_log }, g))
    }

    /// Slot-stacked selective scan; see [`kernels::selective_scan`].
    pub fn selective_scan(&mut self, x: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let (y, states) = kernels::selective_scan(
            self.value(x),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(d),
        )?;
        let g = self.any_grad(&[x, a, b, c, d]);
        Ok(self.push(
            y,
            Op::Scan {
                x,
                a,
                b,
                c,
                d,
                states,
            },
            g,
        ))
    }

    pub fn channel_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        eps: T,
    ) -> Result<Var> {
        let (value, stats) =
            kernels::channel_norm(self.value(x), self.value(gamma), self.value(beta), layout, eps)?;
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                stats,
            },
            g,
        ))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() {
            return Err(Error::shape(format!("no axis {axis} in {dims:?}")));
        }
        let outer: usize = dims[..axis].iter().product();
        let mid = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * mid + m) * inner + i];
                }
            }
        }
        if mean {
            let k = T::one() / T::from_f64(mid as f64);
            out.iter_mut().for_each(|v| *v *= k);
        }
        let mut out_dims = dims;
        out_dims.remove(axis);
        if out_dims.is_empty() {
            out_dims.push(1);
        }
        let value = Tensor::new(out_dims, out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::Reduce {
                x,
                outer,
                mid,
                inner,
                mean,
            },
            g,
        ))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.sum_axis(flat, 0)
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), label)?;
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                label,
            },
            g,
        ))
    }

    /// Record a value produced outside the tape's primitive set. It has no
    /// backward rule; differentiating through it fails with
    /// [`Error::UnsupportedOp`].
    pub fn custom(&mut self, name: &str, inputs: &[Var], value: Tensor<T>) -> Var {
        let g = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                name: name.to_string(),
                inputs: inputs.to_vec(),
            },
            g,
        )
    }

    /// Reverse accumulation from `output` with cotangent `seed`.
    pub fn backward(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if seed.dims() != self.dims(output) {
            return Err(Error::shape(format!(
                "seed dims {:?} do not match output dims {:?}",
                seed.dims(),
                self.dims(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[output.0].needs_grad {
            grads[output.0] = Some(seed.clone());
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            // Leaves keep their gradient; everything else hands it upstream.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (v, dv) in self.node_backward(node, &g)? {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &d) in acc.data_mut().iter_mut().zip(dv.data()) {
                            *a += d;
                        }
                    }
                    slot => *slot = Some(dv),
                }
            }
        }
        let named = self
            .params
            .iter()
            .filter_map(|(k, v)| grads[v.0].clone().map(|g| (k.clone(), g)))
            .collect();
        Ok(Gradients { by_var: grads, named })
    }

    /// Backward of a one-element output with unit seed.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients<T>> {
        let seed = Tensor::full(self.dims(output), T::one())?;
        self.backward(output, &seed)
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        let map2 = |v: Var, f: &dyn Fn(T, T) -> T| {
            let x = val(v);
            let data = x.data().iter().zip(g.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::new(x.dims().to_vec(), data)
        };
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Gather(x, table) => vec![(*x, table.scatter_add(g)?)],
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.dims(*x))?)],
            Op::Stack(xs) => {
                let k = xs.len();
                xs.iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let data = g.data().iter().skip(j).step_by(k).copied().collect();
                        Ok((v, Tensor::new(self.dims(v).to_vec(), data)?))
                    })
                    .collect::<Result<_>>()?
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![(*a, map2(*b, &|q, d| q * d)?), (*b, map2(*a, &|p, d| p * d)?)],
            Op::Scale(x, k) => vec![(*x, g.map(|d| d * *k))],
            Op::Silu(x) => vec![(*x, map2(*x, &|p, d| kernels::silu_grad(p) * d)?)],
            Op::Softplus(x) => vec![(*x, map2(*x, &|p, d| kernels::sigmoid(p) * d)?)],
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(val(*x), val(*w), g)?;
                let mut out = vec![(*x, dx), (*w, dw)];
                out.extend(b.map(|b| (b, db)));
                out
            }
            Op::Conv2d { x, w, b, cfg } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), g, *cfg)?;
                let mut out = vec![(*x, dx), (*w, dw)];
                out.extend(b.map(|b| (b, db)));
                out
            }
            Op::Decay { dt, a_log } => {
                let (ddt, dlog) = kernels::decay_backward(val(*dt), val(*a_log), &node.value, g)?;
                vec![(*dt, ddt), (*a_log, dlog)]
            }
            Op::Scan {
                x,
                a,
                b,
                c,
                d,
                states,
            } => {
                let (dx, da, db, dc, dd) = kernels::selective_scan_backward(
                    val(*x),
                    val(*a),
                    val(*b),
                    val(*c),
                    val(*d),
                    states,
                    g,
                )?;
                vec![(*x, dx), (*a, da), (*b, db), (*c, dc), (*d, dd)]
            }
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                stats,
            } => {
                let (dx, dg, db) = kernels::channel_norm_backward(g, val(*gamma), stats, *layout)?;
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Reduce {
                x,
                outer,
                mid,
                inner,
                mean,
            } => {
                let k = if *mean {
                    T::one() / T::from_f64(*mid as f64)
                } else {
                    T::one()
                };
                let gd = g.data();
                let mut dx = Vec::with_capacity(outer * mid * inner);
                for o in 0..*outer {
                    for _ in 0..*mid {
                        dx.extend(gd[o * inner..(o + 1) * inner].iter().map(|&v| v * k));
                    }
                }
                vec![(*x, Tensor::new(self.dims(*x).to_vec(), dx)?)]
            }
            Op::CrossEntropy {
                logits,
                probs,
                label,
            } => {
                let s = g.data()[0];
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| (if i == *label { p - T::one() } else { p }) * s)
                    .collect();
                vec![(*logits, Tensor::new(self.dims(*logits).to_vec(), data)?)]
            }
            Op::Custom { name, inputs } => {
                if self.any_grad(inputs) {
                    return Err(Error::UnsupportedOp(name.clone()));
                }
                Vec::new()
            }
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    by_var: Vec<Option<Tensor<T>>>,
    named: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter.
    pub fn named(&self, name: &str) -> Option<&Tensor<T>> {
        self.named.get(name)
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor<T>> {
        self.named
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn square_has_derivative_two_w() {
        let mut tape = Tape::new();
        let w = tape.param("w", s(3.0)).unwrap();
        let y = tape.mul(w, w).unwrap();
        let g = tape.backward_scalar(y).unwrap();
        assert_eq!(g.named("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", s(2.0)).unwrap();
        let c = tape.constant(s(5.0));
        let y = tape.mul(w, c).unwrap();
        let g = tape.backward_scalar(y).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[5.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.variable(s(1.5));
        let a = tape.scale(x, 2.0);
        let b = tape.silu(x);
        let y = tape.add(a, b).unwrap();
        let g = tape.backward_scalar(y).unwrap();
        let want = 2.0 + kernels::silu_grad(1.5);
        assert!((g.get(x).unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn custom_op_has_no_backward() {
        let mut tape = Tape::new();
        let x = tape.param("x", s(1.0)).unwrap();
        let y = tape.custom("clip", &[x], s(1.0));
        match tape.backward_scalar(y) {
            Err(Error::UnsupportedOp(name)) => assert_eq!(name, "clip"),
            Err(e) => panic!("{e}"),
            Ok(_) => panic!("expected an unsupported-op error"),
        }
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut tape = Tape::<f64>::new();
        tape.param("w", s(1.0)).unwrap();
        assert!(tape.param("w", s(1.0)).is_err());
    }

    #[test]
    fn stack_backward_unstacks() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.variable(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let st = tape.stack(&[a, b]).unwrap();
        assert_eq!(tape.value(st).data(), &[1.0, 3.0, 2.0, 4.0]);
        let seed = Tensor::new(vec![2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let g = tape.backward(st, &seed).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[10.0, 30.0]);
        assert_eq!(g.get(b).unwrap().data(), &[20.0, 40.0]);
    }

    #[test]
    fn mean_axis_spreads_evenly() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_fn(&[2, 3], |i| i as f64).unwrap());
        let m = tape.mean_axis(x, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 4.0]);
        let total = tape.sum_all(m).unwrap();
        let g = tape.backward_scalar(total).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let mut tape = Tape::new();
        let z = tape.variable(Tensor::new(vec![3], vec![0.0f64, 0.0, 0.0]).unwrap());
        let l = tape.cross_entropy(z, 1).unwrap();
        let g = tape.backward_scalar(l).unwrap();
        let d = g.get(z).unwrap().data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] + 2.0 / 3.0).abs() < 1e-15);
    }
}

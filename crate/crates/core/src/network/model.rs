use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::spec::ModelSpec;
use crate::autodiff::{scoped, uniform, Bindings, Params, Tape, Var};
use crate::error::{Error, Result};
use crate::group::{
    record_channel_norm, record_downsample, record_eq_linear, record_group_conv,
    record_invariant_head, record_patch_embed, record_token_norm, patch_geometry,
};
use crate::kernels::Conv2dConfig;
use crate::scan::{record_baseline_merge, record_baseline_scan};
use crate::ssm::{baseline_mamba_params, record_baseline_mamba, record_group_mamba, GroupMambaWeights};
use crate::tensor::{cached_gather, rotate_and_cycle, rotate_spatial, Gather, Real, Tensor, GROUP_ORDER};

const T4: usize = GROUP_ORDER;

/// Parameters plus the spec that laid them out.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    params: Params<T>,
}

/// One row of [`Model::topology`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: &'static str,
    pub height: usize,
    pub width: usize,
    /// Channel count; group maps carry `channels x 4` reals per pixel.
    pub channels: usize,
}

/// Loss, logits and per-parameter gradients of one labelled sample.
#[derive(Debug, Clone)]
pub struct SampleGrad<T> {
    pub loss: T,
    pub logits: Tensor<T>,
    pub grads: Vec<Tensor<T>>,
}

/// Channels `start..start + len` along axis 2 of `(H, W, C, ..)`.
fn channel_slice_table(dims: &[usize], start: usize, len: usize) -> Result<Arc<Gather>> {
    let mut key = dims.to_vec();
    key.extend([start, len]);
    cached_gather("channel_slice", &key, || {
        if dims.len() < 3 || start + len > dims[2] {
            return Err(Error::shape(format!(
                "cannot slice channels {start}..{} of {dims:?}",
                start + len
            )));
        }
        let (hw, c) = (dims[0] * dims[1], dims[2]);
        let inner: usize = dims[3..].iter().product();
        let mut out_dims = dims.to_vec();
        out_dims[2] = len;
        let mut src = Vec::with_capacity(hw * len * inner);
        for p in 0..hw {
            for ch in start..start + len {
                let base = (p * c + ch) * inner;
                src.extend(base..base + inner);
            }
        }
        Gather::new(dims.to_vec(), out_dims, src)
    })
}

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

struct Init<'a, T> {
    rng: &'a mut ChaCha8Rng,
    params: Params<T>,
}

impl<T: Real> Init<'_, T> {
    fn uniform(&mut self, name: String, dims: &[usize], fan_in: usize) -> Result<()> {
        let t = uniform(self.rng, dims, bound(fan_in))?;
        self.params.insert(name, t)
    }

    fn fill(&mut self, name: String, dims: &[usize], v: f64) -> Result<()> {
        self.params.insert(name, Tensor::full(dims, T::from_f64(v))?)
    }

    fn norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.fill(scoped(prefix, "g"), &[c], 1.0)?;
        self.fill(scoped(prefix, "b"), &[c], 0.0)
    }
}

fn block_name(stage: usize, block: usize) -> String {
    format!("s{stage}.b{block}")
}

fn init_params<T: Real>(spec: &ModelSpec) -> Result<Params<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut init = Init {
        rng: &mut rng,
        params: Params::new(),
    };
    let eq = spec.equivariant;
    let width = |c: usize| if eq { c } else { c * spec.baseline_width };
    let (k, c0) = (spec.patch_kernel, spec.in_channels);
    let c1 = width(spec.stages[0].channels);
    init.uniform("embed.w".into(), &[k, k, c0, c1], k * k * c0)?;
    init.norm("embed.norm", c1)?;
    let dk = spec.dw_kernel;
    // Equivariant fan-ins count the four group slots of every input channel.
    let g = if eq { T4 } else { 1 };
    for (si, stage) in spec.stages.iter().enumerate() {
        let c = width(stage.channels);
        let e = spec.expand * c;
        for bi in 0..stage.depth {
            let pre = block_name(si, bi);
            if eq {
                init.uniform(scoped(&pre, "in.w"), &[c, T4, 2 * e], c * g)?;
            } else {
                init.uniform(scoped(&pre, "in.w"), &[c, 2 * e], c)?;
            }
            init.uniform(scoped(&pre, "in.b"), &[2 * e], c * g)?;
            if eq {
                init.uniform(scoped(&pre, "dw.w"), &[dk, dk, e, T4], dk * dk * g)?;
            } else {
                init.uniform(scoped(&pre, "dw.w"), &[dk, dk, 1, e], dk * dk)?;
            }
            init.uniform(scoped(&pre, "dw.b"), &[e], dk * dk * g)?;
            let ssm = if eq {
                GroupMambaWeights::random(e, spec.hidden_state, spec.ssm_mode, spec.skip, init.rng)?
                    .params
            } else {
                baseline_mamba_params(e, spec.hidden_state, init.rng)?
            };
            init.params.extend_scoped(&scoped(&pre, "ssm"), ssm)?;
            init.norm(&scoped(&pre, "norm"), e)?;
            if eq {
                init.uniform(scoped(&pre, "out.w"), &[e, T4, c], e * g)?;
            } else {
                init.uniform(scoped(&pre, "out.w"), &[e, c], e)?;
            }
            init.uniform(scoped(&pre, "out.b"), &[c], e * g)?;
        }
        if si + 1 < spec.stages.len() {
            let pre = format!("s{si}.down");
            let c2 = width(spec.stages[si + 1].channels);
            if eq {
                init.uniform(scoped(&pre, "w"), &[2, 2, c, T4, c2], 4 * c * g)?;
            } else {
                init.uniform(scoped(&pre, "w"), &[2, 2, c, c2], 4 * c)?;
            }
            init.uniform(scoped(&pre, "b"), &[c2], 4 * c * g)?;
        }
    }
    let cl = width(spec.stages.last().map_or(0, |s| s.channels));
    let classes = spec.num_classes;
    if eq {
        init.uniform("head.w".into(), &[cl, T4, classes], cl * g)?;
    } else {
        init.uniform("head.w".into(), &[cl, classes], cl)?;
    }
    init.fill("head.b".into(), &[classes], 0.0)?;
    Ok(init.params)
}

/// Gated residual block on a group map `(H, W, C, 4)`.
fn record_eq_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &Bindings,
    pre: &str,
    dw_kernel: usize,
) -> Result<Var> {
    let xz = record_eq_linear(tape, x, p.scoped(pre, "in.w")?, Some(p.scoped(pre, "in.b")?))?;
    let d = tape.dims(xz).to_vec();
    let e = d[2] / 2;
    let h = tape.gather(xz, channel_slice_table(&d, 0, e)?)?;
    let z = tape.gather(xz, channel_slice_table(&d, e, e)?)?;
    let h = record_group_conv(
        tape,
        h,
        p.scoped(pre, "dw.w")?,
        Some(p.scoped(pre, "dw.b")?),
        1,
        dw_kernel / 2,
        true,
    )?;
    let h = tape.silu(h);
    let y = record_group_mamba(tape, h, p, &scoped(pre, "ssm"))?;
    let y = record_token_norm(tape, y, p.scoped(pre, "norm.g")?, p.scoped(pre, "norm.b")?)?;
    let gate = tape.silu(z);
    let y = tape.mul(y, gate)?;
    let y = record_eq_linear(tape, y, p.scoped(pre, "out.w")?, Some(p.scoped(pre, "out.b")?))?;
    tape.add(x, y)
}

/// One group block on its own, reading the block's tensors under `prefix`
/// (`s0.b0` and so on in a built model).
pub fn eq_vss_block<T: Real>(
    x: &Tensor<T>,
    params: &Params<T>,
    prefix: &str,
    dw_kernel: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false)?;
    let xv = tape.constant(x.clone());
    let y = record_eq_block(&mut tape, xv, &p, prefix, dw_kernel)?;
    Ok(tape.value(y).clone())
}

/// The same block on a plain map `(H, W, C)` with four fixed scan
/// directions.
fn record_baseline_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &Bindings,
    pre: &str,
    dw_kernel: usize,
) -> Result<Var> {
    let xz = tape.linear(x, p.scoped(pre, "in.w")?, Some(p.scoped(pre, "in.b")?))?;
    let d = tape.dims(xz).to_vec();
    let e = d[2] / 2;
    let h = tape.gather(xz, channel_slice_table(&d, 0, e)?)?;
    let z = tape.gather(xz, channel_slice_table(&d, e, e)?)?;
    let h = tape.conv2d(
        h,
        p.scoped(pre, "dw.w")?,
        Some(p.scoped(pre, "dw.b")?),
        Conv2dConfig::grouped(1, dw_kernel / 2, e),
    )?;
    let h = tape.silu(h);
    let origin = tape.dims(h).to_vec();
    let seq = record_baseline_scan(tape, h)?;
    let y = record_baseline_mamba(tape, seq, p, &scoped(pre, "ssm"))?;
    let y = record_baseline_merge(tape, y, &origin)?;
    let y = record_token_norm(tape, y, p.scoped(pre, "norm.g")?, p.scoped(pre, "norm.b")?)?;
    let gate = tape.silu(z);
    let y = tape.mul(y, gate)?;
    let y = tape.linear(y, p.scoped(pre, "out.w")?, Some(p.scoped(pre, "out.b")?))?;
    tape.add(x, y)
}

impl<T: Real> Model<T> {
    /// Validate `spec` and initialize from its seed.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Model {
            spec: spec.clone(),
            params: init_params(spec)?,
        })
    }

    /// Attach existing parameters; names and dims must match the layout of
    /// `spec`.
    pub fn from_params(spec: &ModelSpec, params: Params<T>) -> Result<Self> {
        let layout = Self::build(spec)?;
        if layout.params.names() != params.names() {
            return Err(Error::shape("parameter names do not match the model layout"));
        }
        for ((n, a), b) in layout.params.iter().zip(params.tensors()) {
            if a.dims() != b.dims() {
                return Err(Error::shape(format!(
                    "parameter `{n}` should be {:?}, got {:?}",
                    a.dims(),
                    b.dims()
                )));
            }
        }
        Ok(Model {
            spec: spec.clone(),
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Scalar counts per layer (`embed`, `s0.b0`, `s0.down`, .., `head`) in
    /// build order.
    pub fn layer_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.params.iter() {
            let mut parts = name.split('.');
            let first = parts.next().unwrap_or_default();
            let layer = if first.starts_with('s') && first[1..].parse::<usize>().is_ok() {
                format!("{first}.{}", parts.next().unwrap_or_default())
            } else {
                first.to_string()
            };
            match out.last_mut() {
                Some((l, c)) if *l == layer => *c += t.len(),
                _ => out.push((layer, t.len())),
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }

    fn check_image(&self, dims: &[usize]) -> Result<()> {
        if dims.len() != 3 || dims[2] != self.spec.in_channels {
            return Err(Error::shape(format!(
                "input must be (H, W, {}), got {dims:?}",
                self.spec.in_channels
            )));
        }
        let div = self.spec.input_divisor();
        if !dims[0].is_multiple_of(div) || !dims[1].is_multiple_of(div) {
            return Err(Error::PadRequired {
                height: dims[0],
                width: dims[1],
                divisor: div,
            });
        }
        Ok(())
    }

    /// Backbone output before pooling: `(H', W', C, 4)` for the group
    /// model, `(H', W', C)` for the baseline.
    pub fn record_features(&self, tape: &mut Tape<T>, image: Var, p: &Bindings) -> Result<Var> {
        self.check_image(tape.dims(image))?;
        let s = &self.spec;
        let norm = Some((p.get("embed.norm.g")?, p.get("embed.norm.b")?));
        let mut x = if s.equivariant {
            record_patch_embed(tape, image, p.get("embed.w")?, s.patch_stride, norm)?
        } else {
            let d = tape.dims(image).to_vec();
            let pad = patch_geometry(d[0], d[1], s.patch_kernel, s.patch_stride)?;
            let y = tape.conv2d(
                image,
                p.get("embed.w")?,
                None,
                Conv2dConfig::new(s.patch_stride, pad),
            )?;
            record_channel_norm(tape, y, p.get("embed.norm.g")?, p.get("embed.norm.b")?)?
        };
        for (si, stage) in s.stages.iter().enumerate() {
            for bi in 0..stage.depth {
                let pre = block_name(si, bi);
                x = if s.equivariant {
                    record_eq_block(tape, x, p, &pre, s.dw_kernel)?
                } else {
                    record_baseline_block(tape, x, p, &pre, s.dw_kernel)?
                };
            }
            if si + 1 < s.stages.len() {
                let pre = format!("s{si}.down");
                let (w, b) = (p.scoped(&pre, "w")?, p.scoped(&pre, "b")?);
                x = if s.equivariant {
                    record_downsample(tape, x, w, Some(b))?
                } else {
                    tape.conv2d(x, w, Some(b), Conv2dConfig::new(2, 0))?
                };
            }
        }
        Ok(x)
    }

    pub fn record_logits(&self, tape: &mut Tape<T>, image: Var, p: &Bindings) -> Result<Var> {
        let x = self.record_features(tape, image, p)?;
        let (w, b) = (p.get("head.w")?, p.get("head.b")?);
        if self.spec.equivariant {
            record_invariant_head(tape, x, w, Some(b))
        } else {
            let d = tape.dims(x).to_vec();
            let flat = tape.reshape(x, &[d[0] * d[1], d[2]])?;
            let pooled = tape.mean_axis(flat, 0)?;
            tape.linear(pooled, w, Some(b))
        }
    }

    fn eval(
        &self,
        image: &Tensor<T>,
        f: impl FnOnce(&Self, &mut Tape<T>, Var, &Bindings) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let x = tape.constant(image.clone());
        let out = f(self, &mut tape, x, &p)?;
        let v = tape.value(out).clone();
        if !v.all_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(v)
    }

    pub fn features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(image, |m, t, x, p| m.record_features(t, x, p))
    }

    pub fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(image, |m, t, x, p| m.record_logits(t, x, p))
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<usize> {
        let z = self.logits(image)?;
        let mut best = 0;
        for (i, v) in z.data().iter().enumerate() {
            if *v > z.data()[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Cross-entropy of one sample and its gradient for every parameter,
    /// in parameter order.
    pub fn loss_and_grad(&self, image: &Tensor<T>, label: usize) -> Result<(T, Vec<Tensor<T>>)> {
        let s = self.sample_grad(image, label)?;
        Ok((s.loss, s.grads))
    }

    pub fn sample_grad(&self, image: &Tensor<T>, label: usize) -> Result<SampleGrad<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true)?;
        let x = tape.constant(image.clone());
        let z = self.record_logits(&mut tape, x, &p)?;
        let loss = tape.cross_entropy(z, label)?;
        let g = tape.backward_scalar(loss)?;
        let grads = self
            .params
            .iter()
            .map(|(n, t)| match g.named(n) {
                Some(d) => Ok(d.clone()),
                None => Tensor::zeros(t.dims()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleGrad {
            loss: tape.value(loss).data()[0],
            logits: tape.value(z).clone(),
            grads,
        })
    }

    /// Group action on backbone features: rotation plus slot cycling on
    /// the group model, rotation alone on the baseline.
    pub fn act_on_features(&self, features: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        if self.spec.equivariant {
            rotate_and_cycle(features, t)
        } else {
            rotate_spatial(features, t)
        }
    }

    /// Layer list with output spatial size for an `h x w` input.
    pub fn topology(&self, h: usize, w: usize) -> Result<Vec<LayerInfo>> {
        self.check_image(&[h, w, self.spec.in_channels])?;
        let s = &self.spec;
        let width = |c: usize| if s.equivariant { c } else { c * s.baseline_width };
        let (mut h, mut w) = (h / s.patch_stride, w / s.patch_stride);
        let mut out = vec![LayerInfo {
            name: "embed".into(),
            kind: if s.equivariant { "lift" } else { "conv" },
            height: h,
            width: w,
            channels: width(s.stages[0].channels),
        }];
        for (si, stage) in s.stages.iter().enumerate() {
            for bi in 0..stage.depth {
                out.push(LayerInfo {
                    name: block_name(si, bi),
                    kind: "vss",
                    height: h,
                    width: w,
                    channels: width(stage.channels),
                });
            }
            if si + 1 < s.stages.len() {
                h /= 2;
                w /= 2;
                out.push(LayerInfo {
                    name: format!("s{si}.down"),
                    kind: "downsample",
                    height: h,
                    width: w,
                    channels: width(s.stages[si + 1].channels),
                });
            }
        }
        out.push(LayerInfo {
            name: "head".into(),
            kind: "head",
            height: 1,
            width: 1,
            channels: s.num_classes,
        });
        Ok(out)
    }
}

/// Scalar parameter counts of the group model described by `spec` and of
/// its width-matched baseline.
pub fn param_ratio(spec: &ModelSpec) -> Result<(usize, usize, f64)> {
    let eq = ModelSpec {
        equivariant: true,
        ..spec.clone()
    };
    let a = Model::<f64>::build(&eq)?.param_count();
    let b = Model::<f64>::build(&eq.baseline())?.param_count();
    Ok((a, b, a as f64 / b as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::spec::Stage;

    fn tiny(eq: bool) -> ModelSpec {
        ModelSpec {
            stages: vec![
                Stage {
                    depth: 1,
                    channels: 2,
                },
                Stage {
                    depth: 1,
                    channels: 4,
                },
            ],
            hidden_state: 2,
            equivariant: eq,
            in_channels: 1,
            ..ModelSpec::micro()
        }
    }

    fn image(h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[h, w, c], |i| ((i * 7919) % 23) as f64 / 23.0 - 0.4).unwrap()
    }

    #[test]
    fn feature_dims() {
        let m = Model::<f64>::build(&tiny(true)).unwrap();
        assert_eq!(m.features(&image(8, 8, 1)).unwrap().dims(), &[2, 2, 4, 4]);
        let b = Model::<f64>::build(&tiny(false)).unwrap();
        assert_eq!(b.features(&image(8, 8, 1)).unwrap().dims(), &[2, 2, 16]);
        assert_eq!(b.logits(&image(8, 8, 1)).unwrap().dims(), &[4]);
    }

    #[test]
    fn micro_feature_dims() {
        let spec = ModelSpec {
            stages: vec![
                Stage {
                    depth: 1,
                    channels: 8,
                },
                Stage {
                    depth: 1,
                    channels: 16,
                },
            ],
            hidden_state: 4,
            ..ModelSpec::micro()
        };
        let m = Model::<f64>::build(&spec).unwrap();
        assert_eq!(m.features(&image(16, 16, 3)).unwrap().dims(), &[4, 4, 16, 4]);
    }

    #[test]
    fn odd_input_rejected() {
        let m = Model::<f64>::build(&tiny(true)).unwrap();
        assert!(matches!(
            m.logits(&image(6, 6, 1)),
            Err(Error::PadRequired { divisor: 4, .. })
        ));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f64>::build(&tiny(true)).unwrap();
        let b = Model::<f64>::build(&tiny(true)).unwrap();
        assert!(a.params().bit_eq(b.params()));
        let f = Model::<f32>::build(&tiny(true)).unwrap();
        assert!(f.params().bit_eq(&a.params().cast()));
    }

    #[test]
    fn topology_halves_per_stage() {
        let m = Model::<f64>::build(&tiny(true)).unwrap();
        let t = m.topology(16, 16).unwrap();
        let dims: Vec<_> = t.iter().map(|l| (l.height, l.channels)).collect();
        assert_eq!(dims, vec![(8, 2), (8, 2), (4, 4), (4, 4), (1, 4)]);
    }

    #[test]
    fn layer_counts_sum_to_total() {
        let m = Model::<f64>::build(&tiny(true)).unwrap();
        let c = m.layer_counts();
        let names: Vec<_> = c.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["embed", "s0.b0", "s0.down", "s1.b0", "head"]);
        assert_eq!(c.iter().map(|(_, n)| n).sum::<usize>(), m.param_count());
        assert_eq!(c[4].1, 4 * 4 * 4 + 4);
    }

    #[test]
    fn micro_ratio_smaller() {
        let (a, b, r) = param_ratio(&ModelSpec::micro()).unwrap();
        assert!(a < b);
        assert!(r > 0.2 && r < 0.6, "{r}");
    }

    #[test]
    fn backbone_commutes_with_rotation() {
        let m = Model::<f64>::build(&tiny(true)).unwrap();
        let x = image(8, 8, 1);
        let f = m.features(&x).unwrap();
        for t in 1..4 {
            let lhs = m.features(&rotate_spatial(&x, t).unwrap()).unwrap();
            let rhs = m.act_on_features(&f, t).unwrap();
            assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12, "t={t}");
        }
        let z = m.logits(&x).unwrap();
        let zr = m.logits(&rotate_spatial(&x, 1).unwrap()).unwrap();
        assert!(z.max_abs_diff(&zr).unwrap() < 1e-12);
    }

    #[test]
    fn gradients_cover_params() {
        let m = Model::<f64>::build(&tiny(true)).unwrap();
        let (loss, g) = m.loss_and_grad(&image(8, 8, 1), 1).unwrap();
        assert!(loss > 0.0);
        assert_eq!(g.len(), m.params().len());
        for ((n, _), gi) in m.params().iter().zip(&g) {
            assert!(gi.data().iter().any(|v| *v != 0.0), "{n} has zero gradient");
        }
    }
}

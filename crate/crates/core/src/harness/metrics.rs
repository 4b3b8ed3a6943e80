use serde::Serialize;

use super::data::ToyDataset;
use super::pool;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::{rotate_spatial, DType, Real, Tensor, GROUP_ORDER};

/// `||pred - ref||^2 / ||ref||^2`, accumulated in f64.
pub fn nmse<T: Real>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    if pred.dims() != reference.dims() {
        return Err(Error::shape(format!(
            "nmse operands differ: {:?} vs {:?}",
            pred.dims(),
            reference.dims()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&p, &r) in pred.data().iter().zip(reference.data()) {
        let (p, r) = (p.as_f64(), r.as_f64());
        num += (p - r) * (p - r);
        den += r * r;
    }
    if den == 0.0 {
        return Err(Error::Domain("nmse reference has zero norm".into()));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// Backbone output, compared against the transformed reference.
    Feature,
    /// Classifier output, compared against the untransformed reference.
    Logits,
}

/// A map whose outputs carry a known action of the rotation group.
pub trait EquivariantModel<T: Real>: Sync {
    fn id(&self) -> String;

    fn forward(&self, x: &Tensor<T>, level: Level) -> Result<Tensor<T>>;

    /// Expected transform of an output when the input is rotated by `t`.
    fn act_output(&self, y: &Tensor<T>, t: usize, level: Level) -> Result<Tensor<T>>;
}

/// `F(I) = I`; both levels act by plain rotation.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityModel;

impl<T: Real> EquivariantModel<T> for IdentityModel {
    fn id(&self) -> String {
        "identity".into()
    }

    fn forward(&self, x: &Tensor<T>, _: Level) -> Result<Tensor<T>> {
        Ok(x.clone())
    }

    fn act_output(&self, y: &Tensor<T>, t: usize, _: Level) -> Result<Tensor<T>> {
        rotate_spatial(y, t)
    }
}

impl<T: Real> EquivariantModel<T> for Model<T> {
    fn id(&self) -> String {
        let s = self.spec();
        format!(
            "{}-{}-seed{}",
            if s.equivariant { "eq" } else { "baseline" },
            s.stages
                .iter()
                .map(|st| format!("{}x{}", st.depth, st.channels))
                .collect::<Vec<_>>()
                .join("-"),
            s.seed
        )
    }

    fn forward(&self, x: &Tensor<T>, level: Level) -> Result<Tensor<T>> {
        match level {
            Level::Feature => self.features(x),
            Level::Logits => self.logits(x),
        }
    }

    fn act_output(&self, y: &Tensor<T>, t: usize, level: Level) -> Result<Tensor<T>> {
        match level {
            Level::Feature => self.act_on_features(y, t),
            Level::Logits => Ok(y.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RotationNmse {
    pub t: usize,
    pub nmse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NmseReport {
    pub model: String,
    pub dtype: DType,
    pub level: Level,
    pub samples: usize,
    /// Mean over samples for each rotation.
    pub per_rotation: Vec<RotationNmse>,
    /// Mean of `per_rotation` over the rotations counted.
    pub mean: f64,
    pub include_identity: bool,
}

impl NmseReport {
    pub fn max(&self) -> f64 {
        self.per_rotation.iter().map(|r| r.nmse).fold(0.0, f64::max)
    }
}

/// Mean per-sample NMSE between `F(rot_t I)` and `act_t F(I)`.
pub fn equivariance_report<T: Real, M: EquivariantModel<T>>(
    model: &M,
    data: &ToyDataset,
    level: Level,
    include_identity: bool,
) -> Result<NmseReport> {
    let ts: Vec<usize> = if include_identity { (0..GROUP_ORDER).collect() } else { (1..GROUP_ORDER).collect() };
    let n = data.len();
    let rows = pool::map(n, |i| -> Result<Vec<f64>> {
        let img: Tensor<T> = data.image(i)?.cast();
        let y = model.forward(&img, level)?;
        ts.iter()
            .map(|&t| {
                let lhs = model.forward(&rotate_spatial(&img, t)?, level)?;
                nmse(&lhs, &model.act_output(&y, t, level)?)
            })
            .collect()
    });
    let mut sums = vec![0.0; ts.len()];
    for (i, r) in rows.into_iter().enumerate() {
        let r = r.map_err(|e| Error::Evaluation(format!("sample {i}: {e}")))?;
        for (s, v) in sums.iter_mut().zip(r) {
            *s += v;
        }
    }
    let per_rotation: Vec<RotationNmse> = ts
        .iter()
        .zip(&sums)
        .map(|(&t, s)| RotationNmse {
            t,
            nmse: s / n.max(1) as f64,
        })
        .collect();
    let mean = per_rotation.iter().map(|r| r.nmse).sum::<f64>() / per_rotation.len() as f64;
    Ok(NmseReport {
        model: model.id(),
        dtype: T::DTYPE,
        level,
        samples: n,
        per_rotation,
        mean,
        include_identity,
    })
}

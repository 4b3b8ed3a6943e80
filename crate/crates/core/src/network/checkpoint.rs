//! Checkpoint directories.
//!
//! ```text
//! <dir>/model.spec       spec text
//! <dir>/manifest.txt     one line per parameter: name file d0,d1,..
//! <dir>/<name>.eqt       tensor file
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::model::Model;
use super::spec::ModelSpec;
use crate::autodiff::Params;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, AnyTensor, Real, Tensor};

const MANIFEST: &str = "manifest.txt";
const SPEC: &str = "model.spec";

pub fn save_checkpoint<T: Real>(model: &Model<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))?;
    model.spec().save(dir.join(SPEC))?;
    let mut manifest = String::new();
    for (name, t) in model.params().iter() {
        let file = format!("{name}.eqt");
        write_tensor(dir.join(&file), t)?;
        let dims: Vec<String> = t.dims().iter().map(usize::to_string).collect();
        let _ = writeln!(manifest, "{name} {file} {}", dims.join(","));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::from(e).at(&path))
}

fn into_real<T: Real>(t: AnyTensor) -> Result<Tensor<T>> {
    match t {
        AnyTensor::F32(t) => Ok(t.cast()),
        AnyTensor::F64(t) => Ok(t.cast()),
        AnyTensor::I64(_) => Err(Error::format(4, "parameter tensor holds integers")),
    }
}

/// Load a checkpoint, converting stored values to `T`.
pub fn load_checkpoint<T: Real>(dir: impl AsRef<Path>) -> Result<Model<T>> {
    let dir = dir.as_ref();
    let spec = ModelSpec::load(dir.join(SPEC))?;
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::from(e).at(&path))?;
    let mut params = Params::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, file, dims] = parts[..] else {
            return Err(Error::shape(format!("manifest line {}: expected `name file dims`", n + 1))
                .at(&path));
        };
        let dims: Vec<usize> = dims
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::shape(format!("manifest line {}: bad dims", n + 1)).at(&path))?;
        let fp = dir.join(file);
        let t = into_real::<T>(read_tensor(&fp)?).map_err(|e| e.at(&fp))?;
        if t.dims() != dims {
            return Err(Error::shape(format!(
                "`{name}` manifest dims {dims:?} differ from file dims {:?}",
                t.dims()
            ))
            .at(&fp));
        }
        params.insert(name, t)?;
    }
    Model::from_params(&spec, params).map_err(|e| e.at(dir))
}

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ssm::{SkipMode, SsmMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Stage {
    pub depth: usize,
    pub channels: usize,
}

/// Declarative model description.
///
/// Text form, one `key = value` per line, `#` starts a comment:
///
/// ```text
/// depths = 2,2
/// channels = 16,32
/// in_channels = 3
/// patch_stride = 2
/// patch_kernel = 2
/// hidden_state = 8
/// num_classes = 4
/// equivariant = 1
/// independent_ssm = 0
/// expand = 2
/// dw_kernel = 3
/// scalar_skip = 0
/// baseline_width = 4
/// seed = 0
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelSpec {
    pub stages: Vec<Stage>,
    pub in_channels: usize,
    pub patch_stride: usize,
    pub patch_kernel: usize,
    pub hidden_state: usize,
    pub num_classes: usize,
    pub equivariant: bool,
    pub ssm_mode: SsmMode,
    pub expand: usize,
    pub dw_kernel: usize,
    pub skip: SkipMode,
    /// Channel multiplier of the non-equivariant model, so that its plain
    /// channel count matches the `C x 4` real channels of the group model.
    pub baseline_width: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::micro()
    }
}

const KEYS: &[&str] = &[
    "depths",
    "channels",
    "in_channels",
    "patch_stride",
    "patch_kernel",
    "hidden_state",
    "num_classes",
    "equivariant",
    "independent_ssm",
    "expand",
    "dw_kernel",
    "scalar_skip",
    "baseline_width",
    "seed",
];

impl ModelSpec {
    /// Two stages, depths (2, 2), channels (16, 32), N = 8, stride 2.
    pub fn micro() -> Self {
        ModelSpec {
            stages: vec![
                Stage {
                    depth: 2,
                    channels: 16,
                },
                Stage {
                    depth: 2,
                    channels: 32,
                },
            ],
            in_channels: 3,
            patch_stride: 2,
            patch_kernel: 2,
            hidden_state: 8,
            num_classes: 4,
            equivariant: true,
            ssm_mode: SsmMode::Group,
            expand: 2,
            dw_kernel: 3,
            skip: SkipMode::PerChannel,
            baseline_width: 4,
            seed: 0,
        }
    }

    /// The same topology without group structure.
    pub fn baseline(&self) -> Self {
        ModelSpec {
            equivariant: false,
            ..self.clone()
        }
    }

    /// Every violated constraint, or `Ok` when there are none.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.stages.is_empty() {
            errs.push("at least one stage is required".to_string());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 {
                errs.push(format!("stage {i} has depth 0"));
            }
            if s.channels == 0 {
                errs.push(format!("stage {i} has 0 channels"));
            }
        }
        for (i, w) in self.stages.windows(2).enumerate() {
            if w[1].channels != 2 * w[0].channels {
                errs.push(format!(
                    "stage {} channels {} must double stage {i} channels {}",
                    i + 1,
                    w[1].channels,
                    w[0].channels
                ));
            }
        }
        let positive = [
            ("in_channels", self.in_channels),
            ("patch_stride", self.patch_stride),
            ("hidden_state", self.hidden_state),
            ("num_classes", self.num_classes),
            ("expand", self.expand),
            ("baseline_width", self.baseline_width),
        ];
        for (k, v) in positive {
            if v == 0 {
                errs.push(format!("{k} must be positive"));
            }
        }
        if self.patch_kernel < self.patch_stride
            || !(self.patch_kernel - self.patch_stride).is_multiple_of(2)
        {
            errs.push(format!(
                "patch_kernel {} must be >= patch_stride {} with an even difference",
                self.patch_kernel, self.patch_stride
            ));
        }
        if self.dw_kernel.is_multiple_of(2) {
            errs.push(format!("dw_kernel {} must be odd", self.dw_kernel));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(errs))
        }
    }

    /// Spatial divisor an input must satisfy.
    pub fn input_divisor(&self) -> usize {
        self.patch_stride << self.stages.len().saturating_sub(1)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = ModelSpec::micro();
        let mut errs = Vec::new();
        let mut depths: Option<Vec<usize>> = None;
        let mut channels: Option<Vec<usize>> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!("line {}: expected `key = value`", n + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                errs.push(format!("line {}: unknown key `{k}`", n + 1));
                continue;
            }
            let ints: std::result::Result<Vec<u64>, _> =
                v.split(',').map(|p| p.trim().parse::<u64>()).collect();
            let Ok(ints) = ints else {
                errs.push(format!("line {}: `{k}` needs non-negative integers, got `{v}`", n + 1));
                continue;
            };
            let list = || ints.iter().map(|&i| i as usize).collect::<Vec<_>>();
            if !matches!(k, "depths" | "channels") && ints.len() != 1 {
                errs.push(format!("line {}: `{k}` takes a single value", n + 1));
                continue;
            }
            let one = ints[0] as usize;
            let flag = |errs: &mut Vec<String>| match one {
                0 => Some(false),
                1 => Some(true),
                _ => {
                    errs.push(format!("line {}: `{k}` is a 0/1 flag, got {one}", n + 1));
                    None
                }
            };
            match k {
                "depths" => depths = Some(list()),
                "channels" => channels = Some(list()),
                "in_channels" => spec.in_channels = one,
                "patch_stride" => spec.patch_stride = one,
                "patch_kernel" => spec.patch_kernel = one,
                "hidden_state" => spec.hidden_state = one,
                "num_classes" => spec.num_classes = one,
                "expand" => spec.expand = one,
                "dw_kernel" => spec.dw_kernel = one,
                "baseline_width" => spec.baseline_width = one,
                "seed" => spec.seed = ints[0],
                "equivariant" => {
                    if let Some(f) = flag(&mut errs) {
                        spec.equivariant = f;
                    }
                }
                "independent_ssm" => {
                    if let Some(f) = flag(&mut errs) {
                        spec.ssm_mode = if f { SsmMode::Independent } else { SsmMode::Group };
                    }
                }
                "scalar_skip" => {
                    if let Some(f) = flag(&mut errs) {
                        spec.skip = if f { SkipMode::Scalar } else { SkipMode::PerChannel };
                    }
                }
                _ => unreachable!("key list checked above"),
            }
        }
        match (depths, channels) {
            (Some(d), Some(c)) if d.len() == c.len() => {
                spec.stages = d
                    .into_iter()
                    .zip(c)
                    .map(|(depth, channels)| Stage { depth, channels })
                    .collect();
            }
            (Some(d), Some(c)) => errs.push(format!(
                "depths has {} entries but channels has {}",
                d.len(),
                c.len()
            )),
            (None, None) => {}
            _ => errs.push("depths and channels must be given together".into()),
        }
        if !errs.is_empty() {
            return Err(Error::InvalidSpec(errs));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let join = |f: fn(&Stage) -> usize| {
            self.stages
                .iter()
                .map(|s| f(s).to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        let _ = writeln!(out, "depths = {}", join(|s| s.depth));
        let _ = writeln!(out, "channels = {}", join(|s| s.channels));
        let pairs: [(&str, u64); 12] = [
            ("in_channels", self.in_channels as u64),
            ("patch_stride", self.patch_stride as u64),
            ("patch_kernel", self.patch_kernel as u64),
            ("hidden_state", self.hidden_state as u64),
            ("num_classes", self.num_classes as u64),
            ("equivariant", self.equivariant as u64),
            ("independent_ssm", (self.ssm_mode == SsmMode::Independent) as u64),
            ("expand", self.expand as u64),
            ("dw_kernel", self.dw_kernel as u64),
            ("scalar_skip", (self.skip == SkipMode::Scalar) as u64),
            ("baseline_width", self.baseline_width as u64),
            ("seed", self.seed),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        Self::parse(&text).map_err(|e| e.at(path))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::from(e).at(path))
    }
}

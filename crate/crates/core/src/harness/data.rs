use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{rotate_spatial, Tensor, GROUP_ORDER};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Glyph classes of [`synth_shapes`], in label order.
pub const GLYPHS: [&str; 4] = ["L", "T", "arrow", "bar"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Idx { images: String, labels: String },
    Synthetic { seed: u64, split: String },
}

/// Images `(n, H, W, C)` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    /// Quarter turns applied to each image relative to its source.
    pub orientations: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl ToyDataset {
    pub fn new(
        images: Tensor<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let d = images.dims();
        if d.len() != 4 || d[0] != labels.len() {
            return Err(Error::shape(format!(
                "dataset needs images (n, H, W, C) for {} labels, got {d:?}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Domain(format!("label {bad} outside 0..{num_classes}")));
        }
        let orientations = vec![0; labels.len()];
        Ok(ToyDataset {
            images,
            labels,
            orientations,
            num_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)` of every image.
    pub fn image_dims(&self) -> [usize; 3] {
        let d = self.images.dims();
        [d[1], d[2], d[3]]
    }

    pub fn image(&self, i: usize) -> Result<Tensor<f64>> {
        let [h, w, c] = self.image_dims();
        let n = h * w * c;
        if i >= self.len() {
            return Err(Error::shape(format!("sample {i} of {}", self.len())));
        }
        Tensor::new(vec![h, w, c], self.images.data()[i * n..(i + 1) * n].to_vec())
    }

    /// Every image under all four rotations, sample-major, same labels.
    pub fn rotated(&self) -> Result<ToyDataset> {
        let [h, w, c] = self.image_dims();
        // Odd quarter turns swap H and W; the set only stays rectangular
        // for square images.
        if h != w {
            return Err(Error::shape(format!("rotated split needs square images, got {h}x{w}")));
        }
        let mut data = Vec::with_capacity(self.images.len() * GROUP_ORDER);
        let (mut labels, mut orientations) = (Vec::new(), Vec::new());
        for i in 0..self.len() {
            let img = self.image(i)?;
            for t in 0..GROUP_ORDER {
                data.extend_from_slice(rotate_spatial(&img, t)?.data());
                labels.push(self.labels[i]);
                orientations.push((self.orientations[i] + t) % GROUP_ORDER);
            }
        }
        let n = labels.len();
        Ok(ToyDataset {
            images: Tensor::new(vec![n, h, w, c], data)?,
            labels,
            orientations,
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// IDX

struct Idx {
    magic: u32,
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    if bytes.len() < 4 {
        return Err(Error::format(0, "file shorter than the IDX header"));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(Error::format(0, format!("bad IDX magic {magic}, expected unsigned-byte data")));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::format(4, format!("truncated header for {ndim} dims")));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut total: usize = 1;
    for k in 0..ndim {
        let o = 4 + 4 * k;
        let d = u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
        total = total
            .checked_mul(d)
            .ok_or_else(|| Error::format(o as u64, "dims overflow"))?;
        dims.push(d);
    }
    if bytes.len() - header != total {
        return Err(Error::format(
            header as u64,
            format!("dims {dims:?} need {total} bytes, file holds {}", bytes.len() - header),
        ));
    }
    Ok(Idx {
        magic,
        dims,
        payload: bytes[header..].to_vec(),
    })
}

fn read_idx(path: &Path, magic: u32) -> Result<Idx> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    let idx = parse_idx(&bytes).map_err(|e| e.at(path))?;
    if idx.magic != magic {
        return Err(Error::format(0, format!("magic {} where {magic} was expected", idx.magic)).at(path));
    }
    Ok(idx)
}

/// Images scaled to `[0, 1]` with a trailing channel axis.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<ToyDataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let im = read_idx(ip, IDX_IMAGES_MAGIC)?;
    let lb = read_idx(lp, IDX_LABELS_MAGIC)?;
    let [n, h, w] = im.dims[..] else {
        return Err(Error::format(3, "image file must be 3-D").at(ip));
    };
    if lb.dims != [n] {
        return Err(Error::shape(format!("{n} images but label dims {:?}", lb.dims)).at(lp));
    }
    let labels: Vec<usize> = lb.payload.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let images = Tensor::new(
        vec![n, h, w, 1],
        im.payload.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    ToyDataset::new(
        images,
        labels,
        classes,
        Provenance::Idx {
            images: ip.display().to_string(),
            labels: lp.display().to_string(),
        },
    )
}

fn idx_bytes(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Write a single-channel dataset as an IDX image/label pair, quantizing
/// pixels to bytes.
pub fn save_idx(data: &ToyDataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let [h, w, c] = data.image_dims();
    if c != 1 {
        return Err(Error::shape(format!("IDX images are single-channel, got {c}")));
    }
    if data.labels.iter().any(|&l| l > 255) {
        return Err(Error::Domain("IDX labels must fit in a byte".into()));
    }
    let px: Vec<u8> = data
        .images
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let lb: Vec<u8> = data.labels.iter().map(|&l| l as u8).collect();
    for (p, bytes) in [
        (images.as_ref(), idx_bytes(IDX_IMAGES_MAGIC, &[data.len(), h, w], &px)),
        (labels.as_ref(), idx_bytes(IDX_LABELS_MAGIC, &[data.len()], &lb)),
    ] {
        fs::write(p, bytes).map_err(|e| Error::from(e).at(p))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic glyphs

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn fill(&mut self, r0: usize, r1: usize, c0: usize, c1: usize) {
        for r in r0..r1.min(self.size) {
            for c in c0..c1.min(self.size) {
                self.px[r * self.size + c] = 1.0;
            }
        }
    }
}

/// Draw glyph `class` upright inside the box at `(r0, c0)` of side `g`.
fn draw(cv: &mut Canvas, class: usize, r0: usize, c0: usize, g: usize, th: usize) {
    let mid = c0 + g / 2 - th / 2;
    match class {
        0 => {
            cv.fill(r0, r0 + g, c0, c0 + th);
            cv.fill(r0 + g - th, r0 + g, c0, c0 + g);
        }
        1 => {
            cv.fill(r0, r0 + th, c0, c0 + g);
            cv.fill(r0, r0 + g, mid, mid + th);
        }
        2 => {
            cv.fill(r0, r0 + g, mid, mid + th);
            for k in 0..g / 2 {
                let (l, r) = (mid.saturating_sub(k), mid + k);
                cv.fill(r0 + k, r0 + k + 1, l, l + th);
                cv.fill(r0 + k, r0 + k + 1, r, r + th);
            }
        }
        _ => cv.fill(r0, r0 + g, mid, mid + th + 1),
    }
}

/// `n` upright glyph images `(n, size, size, 1)`, labels cycling through
/// the first `classes` glyphs, with seeded jitter in size, position and
/// background noise.
pub fn synth_shapes_sized(seed: u64, n: usize, classes: usize, size: usize) -> Result<ToyDataset> {
    if !(2..=GLYPHS.len()).contains(&classes) {
        return Err(Error::Domain(format!(
            "synthetic glyphs support 2..={} classes, got {classes}",
            GLYPHS.len()
        )));
    }
    if size < 12 {
        return Err(Error::Domain(format!("glyph images need size >= 12, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let g = rng.gen_range(size / 2..=size * 3 / 4);
        let th = if size >= 24 { rng.gen_range(2..=3) } else { 2 };
        let r0 = rng.gen_range(1..=size - g - 1);
        let c0 = rng.gen_range(1..=size - g - 1);
        let mut cv = Canvas {
            size,
            px: vec![0.0; size * size],
        };
        draw(&mut cv, class, r0, c0, g, th);
        for v in cv.px.iter_mut() {
            let noise: f64 = rng.gen_range(0.0..0.1);
            *v = if *v > 0.0 { 1.0 - noise } else { noise };
        }
        data.extend(cv.px);
        labels.push(class);
    }
    ToyDataset::new(
        Tensor::new(vec![n, size, size, 1], data)?,
        labels,
        classes,
        Provenance::Synthetic {
            seed,
            split: "canonical".into(),
        },
    )
}

/// 16 x 16 glyphs.
pub fn synth_shapes(seed: u64, n: usize, classes: usize) -> Result<ToyDataset> {
    synth_shapes_sized(seed, n, classes, 16)
}

#[derive(Debug, Clone)]
pub struct SynthSplits {
    pub train: ToyDataset,
    pub test: ToyDataset,
    /// `test` under all four rotations.
    pub test_rotated: ToyDataset,
}

/// Canonical train and test sets from independent streams of `seed`, plus
/// the rotated test split.
pub fn synth_splits(
    seed: u64,
    n_train: usize,
    n_test: usize,
    classes: usize,
    size: usize,
) -> Result<SynthSplits> {
    let mut train = synth_shapes_sized(seed, n_train, classes, size)?;
    train.provenance = Provenance::Synthetic {
        seed,
        split: "train".into(),
    };
    let mut test = synth_shapes_sized(seed.wrapping_add(0x5eed_0001), n_test, classes, size)?;
    test.provenance = Provenance::Synthetic {
        seed,
        split: "test".into(),
    };
    let mut test_rotated = test.rotated()?;
    test_rotated.provenance = Provenance::Synthetic {
        seed,
        split: "test_rotated".into(),
    };
    Ok(SynthSplits {
        train,
        test,
        test_rotated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic() {
        let a = synth_shapes(7, 12, 4).unwrap();
        let b = synth_shapes(7, 12, 4).unwrap();
        assert!(a.images.bit_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        assert!(!synth_shapes(8, 12, 4).unwrap().images.bit_eq(&a.images));
    }

    #[test]
    fn rotated_split_has_all_orientations() {
        let s = synth_splits(1, 4, 3, 4, 16).unwrap();
        assert_eq!(s.test_rotated.len(), 12);
        for i in 0..3 {
            let base = s.test.image(i).unwrap();
            for t in 0..4 {
                let k = i * 4 + t;
                assert_eq!(s.test_rotated.labels[k], s.test.labels[i]);
                assert_eq!(s.test_rotated.orientations[k], t);
                assert!(s.test_rotated.image(k).unwrap().bit_eq(&rotate_spatial(&base, t).unwrap()));
            }
        }
    }

    #[test]
    fn glyph_classes_differ_up_to_rotation() {
        let d = synth_shapes(3, 4, 4).unwrap();
        let bin = |t: &Tensor<f64>| t.data().iter().map(|v| *v > 0.5).collect::<Vec<_>>();
        for a in 0..4 {
            for b in 0..4 {
                if a == b {
                    continue;
                }
                let ia = d.image(a).unwrap();
                for t in 0..4 {
                    let rb = rotate_spatial(&d.image(b).unwrap(), t).unwrap();
                    assert_ne!(bin(&ia), bin(&rb));
                }
            }
        }
    }

    #[test]
    fn idx_round_trip() {
        let d = synth_shapes(2, 5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        save_idx(&d, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.image_dims(), [16, 16, 1]);
        assert!(back.images.max_abs_diff(&d.images).unwrap() <= 0.5 / 255.0 + 1e-12);
        let raw = fs::read(&ip).unwrap();
        assert_eq!(u32::from_be_bytes([raw[0], raw[1], raw[2], raw[3]]), 2051);
        let raw = fs::read(&lp).unwrap();
        assert_eq!(u32::from_be_bytes([raw[0], raw[1], raw[2], raw[3]]), 2049);
    }

    #[test]
    fn idx_rejects_bad_headers() {
        let mut bytes = idx_bytes(IDX_IMAGES_MAGIC, &[1, 2, 2], &[0, 1, 2, 3]);
        assert!(parse_idx(&bytes).is_ok());
        bytes[2] = 0x09;
        assert!(matches!(parse_idx(&bytes), Err(Error::Format { .. })));
        let huge = idx_bytes(IDX_IMAGES_MAGIC, &[u32::MAX as usize; 3], &[]);
        assert!(matches!(parse_idx(&huge), Err(Error::Format { .. })));
        let short = idx_bytes(IDX_IMAGES_MAGIC, &[1, 2, 2], &[0, 1]);
        assert!(matches!(parse_idx(&short), Err(Error::Format { offset: 16, .. })));
    }
}

//! Image pairs on disk and their conversion into training batches.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::boxes::{read_annotations, GroundTruthBox};
use crate::cube_io::{read_image, AggregatedImage, Role};
use crate::detector::Batch;
use crate::error::{invalid, Error, Result};
use crate::pipeline::config::InputMode;
use crate::tensor::Tensor;

/// Pixel value mapped to zero by [`image_tensor`].
pub const INPUT_CENTER: f64 = 127.5;
pub const INPUT_SCALE: f64 = 64.0;

/// One decoupled image pair and its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub sa: AggregatedImage,
    pub se: AggregatedImage,
    pub boxes: Vec<GroundTruthBox>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.sa.height
    }

    pub fn width(&self) -> usize {
        self.sa.width
    }

    /// The image feeding the second stream.
    pub fn second(&self, mode: InputMode) -> Option<&AggregatedImage> {
        match mode {
            InputMode::Spatial => None,
            InputMode::SpatialTwice => Some(&self.sa),
            InputMode::SpatialSpectral => Some(&self.se),
        }
    }
}

pub fn image_path(images: &Path, id: &str, role: Role) -> PathBuf {
    images.join(format!("{id}_{}.ppm", role.tag()))
}

pub fn provenance_path(images: &Path, id: &str, role: Role) -> PathBuf {
    images.join(format!("{id}_{}.provenance", role.tag()))
}

pub fn load_sample(images: &Path, annotations: &Path, id: &str) -> Result<Sample> {
    let sa = read_image(image_path(images, id, Role::SpatialAggregated), Role::SpatialAggregated)?;
    let se = read_image(image_path(images, id, Role::SpectralAggregated), Role::SpectralAggregated)?;
    if (sa.height, sa.width) != (se.height, se.width) {
        return Err(invalid!("{id}: spatial image is {}x{}, spectral image {}x{}", sa.height, sa.width, se.height, se.width));
    }
    let boxes = read_annotations(&annotations.join(format!("{id}.txt")))?;
    Ok(Sample { id: id.to_string(), sa, se, boxes })
}

pub fn load_samples(images: &Path, annotations: &Path, ids: &[String]) -> Result<Vec<Sample>> {
    ids.iter().map(|id| load_sample(images, annotations, id)).collect()
}

/// Ids listed one per line; blank lines ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// `[N, 3, H, W]` tensor of `(v − 127.5) / 64` values.
pub fn image_tensor(imgs: &[&AggregatedImage]) -> Result<Tensor<f64>> {
    let first = imgs.first().ok_or_else(|| invalid!("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(imgs.len() * 3 * h * w);
    for im in imgs {
        if (im.height, im.width) != (h, w) {
            return Err(invalid!("batch mixes {h}x{w} and {}x{} images", im.height, im.width));
        }
        for c in 0..AggregatedImage::CHANNELS {
            data.extend(im.channel(c).iter().map(|&v| (v as f64 - INPUT_CENTER) / INPUT_SCALE));
        }
    }
    Tensor::new(vec![imgs.len(), 3, h, w], data)
}

pub fn make_batch(samples: &[&Sample], mode: InputMode) -> Result<Batch<f64>> {
    let sa = image_tensor(&samples.iter().map(|s| &s.sa).collect::<Vec<_>>())?;
    let se = match mode {
        InputMode::Spatial => None,
        _ => Some(image_tensor(&samples.iter().map(|s| s.second(mode).expect("two streams")).collect::<Vec<_>>())?),
    };
    Ok(Batch { sa, se, gts: samples.iter().map(|s| s.boxes.clone()).collect() })
}

fn flip_image(t: &Tensor<f64>, i: usize, horizontal: bool, vertical: bool) -> Vec<f64> {
    let (c, h, w) = (t.shape()[1], t.shape()[2], t.shape()[3]);
    let d = t.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                out.push(d[((i * c + ch) * h + sy) * w + sx]);
            }
        }
    }
    out
}

pub fn flip_box(g: &GroundTruthBox, horizontal: bool, vertical: bool) -> GroundTruthBox {
    let mut g = *g;
    if horizontal {
        g.cx = 1.0 - g.cx;
    }
    if vertical {
        g.cy = 1.0 - g.cy;
    }
    g
}

/// Flip each image (both streams alike) horizontally and vertically with
/// probability one half each.
pub fn random_flips(batch: Batch<f64>, rng: &mut impl Rng) -> Batch<f64> {
    let n = batch.gts.len();
    let (mut sa, mut se, mut gts) = (Vec::new(), Vec::new(), Vec::with_capacity(n));
    for i in 0..n {
        let (hf, vf): (bool, bool) = (rng.gen(), rng.gen());
        sa.extend(flip_image(&batch.sa, i, hf, vf));
        if let Some(e) = &batch.se {
            se.extend(flip_image(e, i, hf, vf));
        }
        gts.push(batch.gts[i].iter().map(|g| flip_box(g, hf, vf)).collect());
    }
    let shape = batch.sa.shape().to_vec();
    Batch {
        se: batch.se.as_ref().map(|_| Tensor::new(shape.clone(), se).expect("same shape")),
        sa: Tensor::new(shape, sa).expect("same shape"),
        gts,
    }
}

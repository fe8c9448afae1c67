//! Seeded synthetic hyperspectral scenes.
//!
//! Objects are located by a flat, all-band brightness step, so any band
//! subset shows where they are. Their class is a zero-mean spectral offset
//! along a shared signature direction; per band it is small next to a
//! per-object spectral nuisance drawn orthogonal to every signature, so no
//! three-band subset can separate the classes while a projection onto the
//! signature separates them cleanly. The background carries strong
//! per-pixel variation along the signature, which makes it the second
//! principal axis of every cube.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::boxes::{BBox, GroundTruthBox};
use crate::cube_io::{default_wavelengths, HyperCube};
use crate::error::{invalid, Result};

/// One class: how it looks spatially and spectrally.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAppearance {
    /// Range of the flat brightness step added to every band.
    pub contrast: (f64, f64),
    /// Per-band offset added inside the object.
    pub signature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub objects: (usize, usize),
    /// Side length range in pixels.
    pub object_size: (usize, usize),
    pub classes: Vec<ClassAppearance>,
    pub background: Vec<f64>,
    /// Amplitude of the smooth flat illumination field.
    pub illumination: f64,
    /// Half-width of the uniform per-pixel background texture along the
    /// signature axis.
    pub texture: f64,
    /// Half-width of a weaker uniform texture along [`secondary_axis`],
    /// which pins down the third principal axis.
    pub secondary_texture: f64,
    /// Per-band standard deviation of the per-object nuisance spectrum.
    pub nuisance: f64,
    /// Per-band, per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

/// Unit-norm, zero-mean signature direction with one dominant band, so a
/// principal axis estimated along it always gets the same sign.
pub fn signature_axis(bands: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..bands).map(|b| if b % 2 == 0 { 1.0 } else { -1.0 }).collect();
    v[0] = 2.2;
    let mean = v.iter().sum::<f64>() / bands as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Unit-norm axis orthogonal to the flat direction and to `primary`, with
/// one dominant band.
pub fn secondary_axis(primary: &[f64]) -> Vec<f64> {
    let n = primary.len();
    let mut v: Vec<f64> = (0..n).map(|b| (std::f64::consts::PI * b as f64 / (n - 1).max(1) as f64).cos()).collect();
    v[n - 1] -= 1.5;
    let flat = vec![1.0 / (n as f64).sqrt(); n];
    project_out(&mut v, &[flat, primary.to_vec()]);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

impl SyntheticSceneSpec {
    /// Two classes that differ only by `±delta` along [`signature_axis`].
    pub fn two_class(height: usize, width: usize, bands: usize, delta: f64, seed: u64) -> Self {
        let axis = signature_axis(bands);
        let class = |sign: f64| ClassAppearance { contrast: (4.0, 6.0), signature: axis.iter().map(|a| sign * delta * a).collect() };
        Self {
            height,
            width,
            bands,
            objects: (1, 4),
            object_size: (14, 18),
            classes: vec![class(1.0), class(-1.0)],
            background: (0..bands).map(|b| 10.0 + 2.0 * (b as f64 * 0.4).sin()).collect(),
            illumination: 3.0,
            texture: 8.5,
            secondary_texture: 5.0,
            nuisance: 1.5,
            noise: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(invalid!("image size {}x{} must be a positive multiple of 32", self.height, self.width));
        }
        if self.bands < 3 {
            return Err(invalid!("need at least 3 bands, got {}", self.bands));
        }
        let (lo, hi) = self.objects;
        if lo > hi {
            return Err(invalid!("object count range {lo}..={hi} is empty"));
        }
        let (smin, smax) = self.object_size;
        if smin < 2 || smin > smax || smax > self.height.min(self.width) / 2 {
            return Err(invalid!("object size range {smin}..={smax} does not fit {}x{}", self.height, self.width));
        }
        if self.classes.is_empty() {
            return Err(invalid!("need at least one class"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.signature.len() != self.bands {
                return Err(invalid!("class {i} signature has {} bands, expected {}", c.signature.len(), self.bands));
            }
            if !(c.contrast.0 <= c.contrast.1) {
                return Err(invalid!("class {i} contrast range {:?} is empty", c.contrast));
            }
            for (j, d) in self.classes.iter().enumerate().skip(i + 1) {
                if c.signature == d.signature {
                    return Err(invalid!("classes {i} and {j} share a spectral signature"));
                }
            }
        }
        if self.background.len() != self.bands {
            return Err(invalid!("background spectrum has {} bands, expected {}", self.background.len(), self.bands));
        }
        let amps = [self.illumination, self.texture, self.secondary_texture, self.nuisance, self.noise];
        if amps.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(invalid!("amplitudes must be finite and non-negative: {amps:?}"));
        }
        Ok(())
    }

    /// Orthonormal basis of the span of the class signatures.
    fn signature_basis(&self) -> Vec<Vec<f64>> {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for c in &self.classes {
            let mut v = c.signature.clone();
            for u in &basis {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                basis.push(v.iter().map(|x| x / n).collect());
            }
        }
        basis
    }
}

/// One generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cube: HyperCube,
    pub boxes: Vec<GroundTruthBox>,
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for u in basis {
        let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
    }
}

/// Render `count` scenes. Scene `i` depends only on the seed and `i`.
pub fn generate(spec: &SyntheticSceneSpec, count: usize) -> Result<Vec<Scene>> {
    spec.validate()?;
    (0..count).map(|i| render_scene(spec, i as u64)).collect()
}

pub fn render_scene(spec: &SyntheticSceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let (h, w, nb) = (spec.height, spec.width, spec.bands);
    let basis = spec.signature_basis();
    let axis = basis.first().cloned().unwrap_or_else(|| vec![0.0; nb]);
    let second = secondary_axis(&axis);
    // Nuisance stays clear of the flat direction and both texture axes.
    let mut blocked = basis.clone();
    blocked.push(vec![1.0 / (nb as f64).sqrt(); nb]);
    blocked.push(second.clone());

    // Smooth illumination: a few low-frequency cosines.
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let mut data = vec![0.0f64; h * w * nb];
    for y in 0..h {
        for x in 0..w {
            let mut light = 0.0;
            for &(fy, fx, ph) in &waves {
                light += (std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + ph).cos();
            }
            light *= spec.illumination / (waves.len() as f64).sqrt();
            let tex = rng.gen_range(-1.0..=1.0) * spec.texture;
            let tex2 = rng.gen_range(-1.0..=1.0) * spec.secondary_texture;
            for b in 0..nb {
                data[(b * h + y) * w + x] = spec.background[b] + light + tex * axis[b] + tex2 * second[b];
            }
        }
    }

    let count = rng.gen_range(spec.objects.0..=spec.objects.1);
    let mut placed: Vec<BBox> = Vec::new();
    let mut boxes = Vec::new();
    let mut attempts = 0;
    while placed.len() < count && attempts < 1000 {
        attempts += 1;
        let bw = rng.gen_range(spec.object_size.0..=spec.object_size.1);
        let bh = rng.gen_range(spec.object_size.0..=spec.object_size.1);
        let x0 = rng.gen_range(0..=w - bw);
        let y0 = rng.gen_range(0..=h - bh);
        let bb = BBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64);
        // One pixel of clearance keeps objects and their centers apart.
        let grown = BBox::new(bb.x_min - 1.0, bb.y_min - 1.0, bb.x_max + 1.0, bb.y_max + 1.0);
        let overlaps = placed.iter().any(|p| grown.x_min < p.x_max && p.x_min < grown.x_max && grown.y_min < p.y_max && p.y_min < grown.y_max);
        if overlaps {
            continue;
        }
        let class_id = rng.gen_range(0..spec.classes.len());
        let class = &spec.classes[class_id];
        let contrast = if class.contrast.0 < class.contrast.1 { rng.gen_range(class.contrast.0..class.contrast.1) } else { class.contrast.0 };
        let mut nuisance: Vec<f64> = (0..nb).map(|_| StandardNormal.sample(&mut rng)).collect();
        project_out(&mut nuisance, &blocked);
        let rms = (nuisance.iter().map(|v| v * v).sum::<f64>() / nb as f64).sqrt();
        if rms > 0.0 {
            nuisance.iter_mut().for_each(|v| *v *= spec.nuisance / rms);
        }
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                // The object replaces the background texture on both axes.
                let along = |u: &[f64]| -> f64 { (0..nb).map(|b| (data[(b * h + y) * w + x] - spec.background[b]) * u[b]).sum() };
                let (t1, t2) = (along(&axis), along(&second));
                for b in 0..nb {
                    let v = &mut data[(b * h + y) * w + x];
                    *v += contrast - t1 * axis[b] - t2 * second[b] + class.signature[b] + nuisance[b];
                }
            }
        }
        placed.push(bb);
        boxes.push(GroundTruthBox::from_pixels(class_id, &bb, w, h));
    }

    for v in data.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v += spec.noise * n;
    }
    let samples: Vec<f32> = data.iter().map(|&v| v as f32).collect();
    let cube = HyperCube::new(h, w, nb, samples, default_wavelengths(nb))?;
    Ok(Scene { cube, boxes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_is_unit_and_zero_mean() {
        let a = signature_axis(16);
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.iter().sum::<f64>().abs() < 1e-12);
        let max = a.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert_eq!(a[0], max);
    }

    #[test]
    fn secondary_axis_is_orthonormal() {
        let a = signature_axis(16);
        let s = secondary_axis(&a);
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
        assert!((dot(&s, &s) - 1.0).abs() < 1e-12);
        assert!(dot(&s, &a).abs() < 1e-12);
        assert!(s.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn one_object_per_image() {
        let mut spec = SyntheticSceneSpec::two_class(32, 32, 8, 2.0, 3);
        spec.objects = (1, 1);
        spec.object_size = (4, 8);
        for s in generate(&spec, 5).unwrap() {
            assert_eq!(s.boxes.len(), 1);
            s.boxes[0].validate().unwrap();
        }
    }

    #[test]
    fn seeded() {
        let spec = SyntheticSceneSpec::two_class(64, 64, 8, 2.0, 9);
        assert_eq!(render_scene(&spec, 2).unwrap(), render_scene(&spec, 2).unwrap());
        assert_ne!(render_scene(&spec, 2).unwrap().cube, render_scene(&spec, 3).unwrap().cube);
    }

    #[test]
    fn rejects_bad_specs() {
        let ok = SyntheticSceneSpec::two_class(64, 64, 16, 2.0, 0);
        ok.validate().unwrap();
        let mut s = ok.clone();
        s.height = 40;
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.classes[1] = s.classes[0].clone();
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.classes[0].signature.pop();
        assert!(s.validate().is_err());
        let mut s = ok;
        s.objects = (3, 2);
        assert!(s.validate().is_err());
    }
}

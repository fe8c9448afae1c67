//! Hyperspectral information decoupling: a cube becomes a spatially
//! aggregated false-color image (selected bands + contrast generation) and a
//! spectrally aggregated image (PCA scores).

pub mod band_select;
pub mod eigen;
pub mod pca;
pub mod stretch;

use std::fmt::Write as _;

pub use band_select::{select_bands, BandScalar, BandSelection};
pub use pca::{fit_pca, project_pca, PcaModel};

use crate::cube_io::{AggregatedImage, HyperCube, Role};
use crate::error::{invalid, Result};

/// Percentile contrast stretch applied to selected band planes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationParams {
    pub low_percentile: f64,
    pub high_percentile: f64,
    /// Stretch each channel with its own quantiles; otherwise the three
    /// planes share one pair.
    pub per_channel: bool,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { low_percentile: 0.02, high_percentile: 0.98, per_channel: true }
    }
}

impl GenerationParams {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        let g = Self { low_percentile: low, high_percentile: high, per_channel: true };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.low_percentile, self.high_percentile);
        if !(0.0..0.5).contains(&lo) || !(hi > 0.5 && hi <= 1.0) || lo >= hi {
            return Err(invalid!("percentiles must satisfy 0 <= low < 0.5 < high <= 1, got ({lo}, {hi})"));
        }
        Ok(())
    }
}

/// Stretch three selected bands into an RGB image. The longest wavelength
/// goes to red, the shortest to blue.
pub fn compose_sa<T>(cube: &HyperCube, sel: &BandSelection<T>, gen: &GenerationParams) -> Result<AggregatedImage> {
    gen.validate()?;
    if sel.representatives.len() != 3 {
        return Err(invalid!("spatial image needs 3 selected bands, got {}", sel.representatives.len()));
    }
    if let Some(&b) = sel.representatives.iter().find(|&&b| b >= cube.bands()) {
        return Err(invalid!("selected band {b} out of range for {} bands", cube.bands()));
    }
    let mut order = sel.representatives.clone();
    order.sort_by(|&a, &b| cube.wavelengths_nm()[b].total_cmp(&cube.wavelengths_nm()[a]));

    let planes: Vec<Vec<f64>> = order
        .iter()
        .map(|&b| cube.plane(b).iter().map(|&v| v as f64).collect())
        .collect();
    let channels: Vec<Vec<u8>> = if gen.per_channel {
        planes
            .iter()
            .map(|p| stretch::percentile_stretch(p, gen.low_percentile, gen.high_percentile))
            .collect()
    } else {
        let all: Vec<f64> = planes.iter().flatten().copied().collect();
        let (lo, hi) = stretch::quantile_pair(&all, gen.low_percentile, gen.high_percentile);
        planes.iter().map(|p| stretch::linear_stretch(p, lo, hi)).collect()
    };

    let n = cube.pixels();
    let mut data = Vec::with_capacity(n * 3);
    for p in 0..n {
        data.extend([channels[0][p], channels[1][p], channels[2][p]]);
    }
    AggregatedImage::new(cube.height(), cube.width(), data, Role::SpatialAggregated)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoupleParams {
    pub k_se: usize,
    pub k_sa: usize,
    pub gen: GenerationParams,
}

impl Default for DecoupleParams {
    fn default() -> Self {
        Self { k_se: 3, k_sa: 3, gen: GenerationParams::default() }
    }
}

/// Produce the (SA, SE) pair for a cube. Both images carry a provenance
/// record of the parameters and fitted quantities.
pub fn decouple(cube: &HyperCube, params: &DecoupleParams) -> Result<(AggregatedImage, AggregatedImage)> {
    let sel = select_bands::<f64>(cube, params.k_sa)?;
    let mut sa = compose_sa(cube, &sel, &params.gen)?;
    let model = fit_pca::<f64>(cube, params.k_se)?;
    let mut se = project_pca(cube, &model)?;

    let mut common = String::new();
    let _ = writeln!(common, "cube = {}x{}x{}", cube.height(), cube.width(), cube.bands());
    let _ = writeln!(common, "k_sa = {}", params.k_sa);
    let _ = writeln!(common, "k_se = {}", params.k_se);
    let _ = writeln!(common, "low_percentile = {}", params.gen.low_percentile);
    let _ = writeln!(common, "high_percentile = {}", params.gen.high_percentile);
    let _ = writeln!(common, "per_channel = {}", params.gen.per_channel);
    let _ = writeln!(common, "selected_bands = {}", join(&sel.representatives));
    let wl: Vec<f64> = sel.representatives.iter().map(|&b| cube.wavelengths_nm()[b]).collect();
    let _ = writeln!(common, "selected_wavelengths_nm = {}", join(&wl));
    let _ = writeln!(common, "segment_boundaries = {}", join(&sel.segment_boundaries));
    let _ = writeln!(common, "band_objective = {:e}", sel.objective_value);
    let _ = writeln!(common, "explained_variance = {}", join(&model.explained_variance));

    sa.provenance = format!("role = sa\n{common}");
    se.provenance = format!("role = se\n{common}");
    Ok((sa, se))
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube_io::default_wavelengths;

    fn cube_with_plane(plane: impl Fn(usize, usize) -> f32) -> HyperCube {
        HyperCube::from_fn(4, 4, 3, default_wavelengths(3), |y, x, _| plane(y, x)).unwrap()
    }

    fn sel(reps: Vec<usize>) -> BandSelection<f64> {
        BandSelection { segment_boundaries: vec![0, 1, 2, 3], representatives: reps, objective_value: 0.0 }
    }

    #[test]
    fn constant_plane_gives_zero_channel() {
        let cube = cube_with_plane(|_, _| 5.0);
        let img = compose_sa(&cube, &sel(vec![0, 1, 2]), &GenerationParams::new(0.0, 1.0).unwrap()).unwrap();
        assert!(img.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn channel_order_is_longest_wavelength_first() {
        let cube = HyperCube::from_fn(1, 2, 3, default_wavelengths(3), |_, x, b| (x * (b + 1)) as f32).unwrap();
        let gen = GenerationParams::new(0.0, 1.0).unwrap();
        let img = compose_sa(&cube, &sel(vec![0, 1, 2]), &gen).unwrap();
        assert_eq!(img.role, Role::SpatialAggregated);
        assert_eq!(img.pixel(0, 1), [255, 255, 255]);
        // Swap in a plane that differs only in band 2 to see it land in red.
        let cube2 = HyperCube::from_fn(1, 2, 3, default_wavelengths(3), |_, x, b| if b == 2 { x as f32 } else { 0.0 }).unwrap();
        let img2 = compose_sa(&cube2, &sel(vec![1, 2, 0]), &gen).unwrap();
        assert_eq!(img2.pixel(0, 1), [255, 0, 0]);
    }

    #[test]
    fn wrong_representative_count() {
        let cube = cube_with_plane(|y, x| (y + x) as f32);
        let two = BandSelection { segment_boundaries: vec![0, 1, 3], representatives: vec![0, 1], objective_value: 0.0 };
        assert!(compose_sa(&cube, &two, &GenerationParams::default()).is_err());
        assert!(compose_sa(&cube, &sel(vec![0, 1, 7]), &GenerationParams::default()).is_err());
    }

    #[test]
    fn generation_params_validated() {
        assert!(GenerationParams::new(0.6, 0.9).is_err());
        assert!(GenerationParams::new(0.1, 0.4).is_err());
        assert!(GenerationParams::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn constant_cube_decouples_to_black() {
        let cube = HyperCube::from_fn(8, 8, 16, default_wavelengths(16), |_, _, b| 1.0 + b as f32).unwrap();
        let (sa, se) = decouple(&cube, &DecoupleParams::default()).unwrap();
        assert!(sa.data.iter().all(|&v| v == 0));
        assert!(se.data.iter().all(|&v| v == 0));
        assert_eq!((sa.height, sa.width, se.height, se.width), (8, 8, 8, 8));
        assert!(sa.provenance.contains("selected_bands"));
        assert!(se.provenance.starts_with("role = se"));
    }
}

//! Principal component analysis over the spectral axis of a cube.

use crate::cube_io::{AggregatedImage, HyperCube, Role};
use crate::error::{invalid, shape_err, Result};
use crate::hid::eigen::symmetric_eigen;
use crate::hid::stretch::min_max_to_u8;
use crate::scalar::Scalar;

/// Top-k principal directions of the pixel spectra of a cube.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel<T> {
    /// Per-band means.
    pub mean: Vec<T>,
    /// `k` rows of length `bands`, orthonormal.
    pub components: Vec<Vec<T>>,
    /// Eigenvalues matching `components`, non-increasing.
    pub explained_variance: Vec<T>,
}

impl<T: Scalar> PcaModel<T> {
    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Component scores `components · (spectrum − mean)`.
    pub fn project(&self, spectrum: &[T]) -> Vec<T> {
        self.components
            .iter()
            .map(|row| {
                row.iter()
                    .zip(spectrum.iter().zip(&self.mean))
                    .map(|(&c, (&x, &m))| c * (x - m))
                    .sum()
            })
            .collect()
    }

    /// Map scores back to spectral space.
    pub fn reconstruct(&self, scores: &[T]) -> Vec<T> {
        let mut out = self.mean.clone();
        for (row, &s) in self.components.iter().zip(scores) {
            for (o, &c) in out.iter_mut().zip(row) {
                *o += s * c;
            }
        }
        out
    }
}

/// Per-band means and the `B×B` sample covariance (divisor `max(N−1, 1)`) of
/// the pixel spectra, row-major.
pub fn spectral_covariance<T: Scalar>(cube: &HyperCube) -> (Vec<T>, Vec<T>) {
    let bands = cube.bands();
    let n = cube.pixels();
    let mean: Vec<T> = (0..bands)
        .map(|b| cube.plane(b).iter().map(|&v| T::lit(v as f64)).sum::<T>() / T::lit(n as f64))
        .collect();
    let centered: Vec<Vec<T>> = (0..bands)
        .map(|b| cube.plane(b).iter().map(|&v| T::lit(v as f64) - mean[b]).collect())
        .collect();
    let denom = T::lit(n.saturating_sub(1).max(1) as f64);
    let mut cov = vec![T::zero(); bands * bands];
    for i in 0..bands {
        for j in i..bands {
            let s: T = centered[i].iter().zip(&centered[j]).map(|(&a, &b)| a * b).sum();
            cov[i * bands + j] = s / denom;
            cov[j * bands + i] = s / denom;
        }
    }
    (mean, cov)
}

/// Fit the top-`k` principal components of the cube's pixel spectra.
///
/// Each component's largest-magnitude entry (first one on ties) is made
/// positive.
pub fn fit_pca<T: Scalar>(cube: &HyperCube, k: usize) -> Result<PcaModel<T>> {
    let bands = cube.bands();
    if k == 0 || k > bands {
        return Err(invalid!("PCA needs 1 <= k <= {bands}, got k = {k}"));
    }
    if cube.pixels() < k {
        return Err(invalid!("PCA with k = {k} needs at least {k} pixels, cube has {}", cube.pixels()));
    }
    let (mean, cov) = spectral_covariance::<T>(cube);
    let eig = symmetric_eigen(&cov, bands);

    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for (mut row, value) in eig.vectors.into_iter().zip(eig.values).take(k) {
        let mut lead = 0;
        for (i, x) in row.iter().enumerate() {
            if x.abs() > row[lead].abs() {
                lead = i;
            }
        }
        if row[lead] < T::zero() {
            row.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(row);
        // Round-off can leave tiny negative eigenvalues on rank-deficient data.
        explained_variance.push(value.max(T::zero()));
    }
    Ok(PcaModel { mean, components, explained_variance })
}

/// Score every pixel with a 3-component model and min-max scale each score
/// channel to 8 bits.
pub fn project_pca<T: Scalar>(cube: &HyperCube, model: &PcaModel<T>) -> Result<AggregatedImage> {
    if model.bands() != cube.bands() {
        return Err(shape_err!("PCA model has {} bands, cube has {}", model.bands(), cube.bands()));
    }
    if model.k() != 3 {
        return Err(invalid!("spectral image needs a 3-component model, got {}", model.k()));
    }
    let n = cube.pixels();
    let mut channels = vec![Vec::with_capacity(n); 3];
    let mut spectrum = vec![T::zero(); cube.bands()];
    for p in 0..n {
        for (b, s) in spectrum.iter_mut().enumerate() {
            *s = T::lit(cube.plane(b)[p] as f64);
        }
        for (c, score) in model.project(&spectrum).into_iter().enumerate() {
            channels[c].push(score.as_f64());
        }
    }
    let scaled: Vec<Vec<u8>> = channels.iter().map(|ch| min_max_to_u8(ch)).collect();
    let mut data = Vec::with_capacity(n * 3);
    for p in 0..n {
        data.extend([scaled[0][p], scaled[1][p], scaled[2][p]]);
    }
    AggregatedImage::new(cube.height(), cube.width(), data, Role::SpectralAggregated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube_io::default_wavelengths;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(seed: u64, h: usize, w: usize, b: usize) -> HyperCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HyperCube::from_fn(h, w, b, default_wavelengths(b), |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn single_axis_variance() {
        let ts = [0.5f32, -1.0, 2.0, 0.25, 3.0, -0.75];
        let cube = HyperCube::from_fn(1, ts.len(), 3, default_wavelengths(3), |_, x, b| {
            if b == 0 { ts[x] } else { 0.0 }
        })
        .unwrap();
        let m = fit_pca::<f64>(&cube, 1).unwrap();
        assert_eq!(m.components[0], vec![1.0, 0.0, 0.0]);
        let mean = ts.iter().map(|&t| t as f64).sum::<f64>() / ts.len() as f64;
        let var = ts.iter().map(|&t| (t as f64 - mean).powi(2)).sum::<f64>() / (ts.len() - 1) as f64;
        assert!((m.explained_variance[0] - var).abs() < 1e-12);
    }

    #[test]
    fn full_basis_reconstructs() {
        let cube = random_cube(1, 6, 6, 5);
        let m = fit_pca::<f64>(&cube, 5).unwrap();
        for p in 0..cube.pixels() {
            let x: Vec<f64> = cube.spectrum(p).into_iter().map(f64::from).collect();
            let back = m.reconstruct(&m.project(&x));
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let err = x.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(err <= 1e-5 * norm);
        }
    }

    #[test]
    fn components_orthonormal_and_signed() {
        let cube = random_cube(2, 5, 7, 16);
        let m = fit_pca::<f64>(&cube, 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let d: f64 = m.components[i].iter().zip(&m.components[j]).map(|(a, b)| a * b).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
            let lead = m.components[i].iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(lead > 0.0);
        }
        assert!(m.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn k_out_of_range() {
        let cube = random_cube(3, 2, 2, 4);
        assert!(fit_pca::<f64>(&cube, 0).is_err());
        assert!(fit_pca::<f64>(&cube, 5).is_err());
        let tiny = random_cube(3, 1, 2, 4);
        assert!(fit_pca::<f64>(&tiny, 3).is_err());
    }

    #[test]
    fn constant_cube_projects_to_zero_image() {
        let cube = HyperCube::from_fn(4, 4, 6, default_wavelengths(6), |_, _, b| b as f32).unwrap();
        let m = fit_pca::<f64>(&cube, 3).unwrap();
        assert!(m.explained_variance.iter().all(|&v| v == 0.0));
        let img = project_pca(&cube, &m).unwrap();
        assert!(img.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn two_point_cloud_is_binary_in_first_channel() {
        // spectrum = base ± direction on alternating pixels
        let dir = [0.6f32, 0.8, 0.0, 0.0];
        let cube = HyperCube::from_fn(2, 4, 4, default_wavelengths(4), |y, x, b| {
            let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            1.0 + sign * dir[b] + if b == 2 { 0.001 * x as f32 } else { 0.0 }
        })
        .unwrap();
        let m = fit_pca::<f64>(&cube, 3).unwrap();
        let img = project_pca(&cube, &m).unwrap();
        let ch0 = img.channel(0);
        assert!(ch0.iter().all(|&v| v == 0 || v == 255));
        assert!(ch0.contains(&0) && ch0.contains(&255));
    }

    #[test]
    fn band_mismatch_rejected() {
        let m = fit_pca::<f64>(&random_cube(4, 3, 3, 5), 3).unwrap();
        assert!(project_pca(&random_cube(4, 3, 3, 6), &m).is_err());
        let m4 = fit_pca::<f64>(&random_cube(4, 3, 3, 5), 4).unwrap();
        assert!(project_pca(&random_cube(4, 3, 3, 5), &m4).is_err());
    }
}

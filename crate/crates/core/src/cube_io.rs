//! Hyperspectral cube containers, the `.hdr`/`.raw` cube file format,
//! mosaic demosaicing and 8-bit aggregated images (binary PPM).

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};

/// Wavelength range covered by the 16-band snapshot mosaic sensor.
pub const DEFAULT_WAVELENGTH_RANGE_NM: (f64, f64) = (470.0, 620.0);

const MIN_WAVELENGTH_NM: f64 = 100.0;
const MAX_WAVELENGTH_NM: f64 = 3000.0;

/// `n` evenly spaced wavelengths on the default sensor range.
pub fn default_wavelengths(n: usize) -> Vec<f64> {
    let (lo, hi) = DEFAULT_WAVELENGTH_RANGE_NM;
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// An H×W×B radiance volume stored band-sequential: plane `b` occupies
/// `data[b*H*W .. (b+1)*H*W]`, row-major within the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
    wavelengths_nm: Vec<f64>,
}

impl HyperCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        data: Vec<f32>,
        wavelengths_nm: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(invalid!("cube dimensions must be positive, got {height}x{width}x{bands}"));
        }
        if data.len() != height * width * bands {
            return Err(Error::format(
                "cube",
                format!(
                    "payload holds {} samples, header declares {height}x{width}x{bands} = {}",
                    data.len(),
                    height * width * bands
                ),
            ));
        }
        validate_wavelengths(&wavelengths_nm, bands)?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format("cube", format!("non-finite sample at flat index {i}")));
        }
        Ok(Self { height, width, bands, data, wavelengths_nm })
    }

    /// Build a cube from a per-sample generator `f(y, x, band)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        bands: usize,
        wavelengths_nm: Vec<f64>,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * bands);
        for b in 0..bands {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, b));
                }
            }
        }
        Self::new(height, width, bands, data, wavelengths_nm)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn wavelengths_nm(&self) -> &[f64] {
        &self.wavelengths_nm
    }

    /// Band plane `b`, row-major.
    pub fn plane(&self, b: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn sample(&self, y: usize, x: usize, b: usize) -> f32 {
        self.data[b * self.pixels() + y * self.width + x]
    }

    /// Spectrum of the pixel at flat index `p` (= y·W + x).
    pub fn spectrum(&self, p: usize) -> Vec<f32> {
        let n = self.pixels();
        (0..self.bands).map(|b| self.data[b * n + p]).collect()
    }

    /// Same cube with every sample multiplied by `c`.
    pub fn scaled(&self, c: f32) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.bands,
            self.data.iter().map(|v| v * c).collect(),
            self.wavelengths_nm.clone(),
        )
    }
}

fn validate_wavelengths(w: &[f64], bands: usize) -> Result<()> {
    if w.len() != bands {
        return Err(Error::format(
            "cube",
            format!("{} wavelengths for {bands} bands", w.len()),
        ));
    }
    for (i, &v) in w.iter().enumerate() {
        if !(v > MIN_WAVELENGTH_NM && v < MAX_WAVELENGTH_NM) {
            return Err(Error::format("cube", format!("wavelength {v} nm out of range")));
        }
        if i > 0 && w[i - 1] >= v {
            return Err(Error::format(
                "cube",
                format!("wavelengths not strictly increasing at index {i}"),
            ));
        }
    }
    Ok(())
}

/// Split `foo`, `foo.hdr` or `foo.raw` into the header and payload paths.
pub fn cube_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("hdr") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut hdr = stem.clone().into_os_string();
    hdr.push(".hdr");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (hdr.into(), raw.into())
}

#[derive(Debug, Default)]
struct CubeHeader {
    samples: Option<usize>,
    lines: Option<usize>,
    bands: Option<usize>,
    wavelengths: Option<Vec<f64>>,
}

fn parse_header(text: &str, origin: &Path) -> Result<CubeHeader> {
    let what = origin.display().to_string();
    let mut hdr = CubeHeader::default();
    // Values in braces may span several lines.
    let mut joined = String::new();
    let mut depth = 0i32;
    let mut entries = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || (depth == 0 && (line == "ENVI" || line.starts_with(';'))) {
            continue;
        }
        if !joined.is_empty() {
            joined.push(' ');
        }
        joined.push_str(line);
        depth += line.matches('{').count() as i32 - line.matches('}').count() as i32;
        if depth <= 0 {
            entries.push(std::mem::take(&mut joined));
            depth = 0;
        }
    }
    if !joined.is_empty() {
        return Err(Error::format(&what, "unterminated brace in header"));
    }

    for entry in entries {
        let Some((key, value)) = entry.split_once('=') else {
            return Err(Error::format(&what, format!("expected `key = value`, got `{entry}`")));
        };
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim();
        let as_count = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::format(&what, format!("bad integer `{v}` for `{key}`")))
        };
        match key.as_str() {
            "samples" => hdr.samples = Some(as_count(value)?),
            "lines" => hdr.lines = Some(as_count(value)?),
            "bands" => hdr.bands = Some(as_count(value)?),
            "interleave" => {
                if !value.eq_ignore_ascii_case("bsq") {
                    return Err(Error::format(&what, format!("unsupported interleave `{value}`")));
                }
            }
            "data type" => {
                if !value.eq_ignore_ascii_case("float32le") {
                    return Err(Error::format(&what, format!("unsupported data type `{value}`")));
                }
            }
            "wavelength" => {
                let inner = value.trim_start_matches('{').trim_end_matches('}');
                let list = inner
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| Error::format(&what, format!("bad wavelength `{s}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                hdr.wavelengths = Some(list);
            }
            _ => {}
        }
    }
    Ok(hdr)
}

/// Read a cube from its `.hdr`/`.raw` pair.
pub fn read_cube(path: impl AsRef<Path>) -> Result<HyperCube> {
    let (hdr_path, raw_path) = cube_paths(path.as_ref());
    let text = fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let hdr = parse_header(&text, &hdr_path)?;
    let missing = |k: &str| Error::format(hdr_path.display().to_string(), format!("missing `{k}`"));
    let width = hdr.samples.ok_or_else(|| missing("samples"))?;
    let height = hdr.lines.ok_or_else(|| missing("lines"))?;
    let bands = hdr.bands.ok_or_else(|| missing("bands"))?;
    let wavelengths = hdr.wavelengths.unwrap_or_else(|| default_wavelengths(bands));

    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            raw_path.display().to_string(),
            format!("payload length {} is not a multiple of 4", bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    HyperCube::new(height, width, bands, data, wavelengths)
}

/// Header text for a cube, in the same layout [`read_cube`] accepts.
pub fn cube_header(cube: &HyperCube) -> String {
    let mut s = String::from("ENVI\n");
    let _ = writeln!(s, "samples = {}", cube.width);
    let _ = writeln!(s, "lines = {}", cube.height);
    let _ = writeln!(s, "bands = {}", cube.bands);
    s.push_str("interleave = bsq\n");
    s.push_str("data type = float32le\n");
    let wl: Vec<String> = cube.wavelengths_nm.iter().map(|w| format!("{w:?}")).collect();
    let _ = writeln!(s, "wavelength = {{{}}}", wl.join(", "));
    s
}

/// Write `cube` as `<name>.hdr` + `<name>.raw`.
pub fn write_cube(cube: &HyperCube, path: impl AsRef<Path>) -> Result<()> {
    let (hdr_path, raw_path) = cube_paths(path.as_ref());
    let mut payload = Vec::with_capacity(cube.data.len() * 4);
    for v in &cube.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&hdr_path, cube_header(cube)).map_err(|e| Error::io(&hdr_path, e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

/// A single-plane snapshot frame whose p×p tiles each hold p² spectral cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MosaicFrame {
    pub height: usize,
    pub width: usize,
    pub pattern_size: usize,
    pub data: Vec<f32>,
    /// Row-major p×p grid of cell wavelengths.
    pub cell_wavelengths_nm: Vec<f64>,
}

impl MosaicFrame {
    /// Frame whose cell wavelengths are the default evenly spaced grid.
    pub fn with_default_wavelengths(
        height: usize,
        width: usize,
        pattern_size: usize,
        data: Vec<f32>,
    ) -> Self {
        Self {
            height,
            width,
            pattern_size,
            data,
            cell_wavelengths_nm: default_wavelengths(pattern_size * pattern_size),
        }
    }

    fn validate(&self) -> Result<()> {
        let p = self.pattern_size;
        if p == 0 {
            return Err(invalid!("mosaic pattern size must be positive"));
        }
        if self.height % p != 0 || self.width % p != 0 || self.height == 0 || self.width == 0 {
            return Err(invalid!(
                "frame {}x{} not divisible by pattern size {p}",
                self.height,
                self.width
            ));
        }
        if self.data.len() != self.height * self.width {
            return Err(Error::format(
                "mosaic frame",
                format!("{} samples for {}x{}", self.data.len(), self.height, self.width),
            ));
        }
        if self.cell_wavelengths_nm.len() != p * p {
            return Err(Error::format(
                "mosaic frame",
                format!("{} cell wavelengths for a {p}x{p} tile", self.cell_wavelengths_nm.len()),
            ));
        }
        Ok(())
    }
}

/// Subsample a mosaic frame into a cube with one band per tile cell.
///
/// Band `k` before sorting is tile cell `(k / p, k % p)`; bands are then
/// reordered so wavelengths increase.
pub fn demosaic(frame: &MosaicFrame) -> Result<HyperCube> {
    frame.validate()?;
    let p = frame.pattern_size;
    let (h, w) = (frame.height / p, frame.width / p);
    let bands = p * p;

    let mut order: Vec<usize> = (0..bands).collect();
    order.sort_by(|&i, &j| {
        frame.cell_wavelengths_nm[i]
            .partial_cmp(&frame.cell_wavelengths_nm[j])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });

    let mut data = Vec::with_capacity(h * w * bands);
    for &k in &order {
        let (dy, dx) = (k / p, k % p);
        for y in 0..h {
            let row = (y * p + dy) * frame.width;
            for x in 0..w {
                data.push(frame.data[row + x * p + dx]);
            }
        }
    }
    let wavelengths = order.iter().map(|&k| frame.cell_wavelengths_nm[k]).collect();
    HyperCube::new(h, w, bands, data, wavelengths)
}

/// Which decoupling branch produced an [`AggregatedImage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    SpatialAggregated,
    SpectralAggregated,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::SpatialAggregated => "sa",
            Role::SpectralAggregated => "se",
        }
    }
}

/// A 3-channel 8-bit image, samples interleaved by pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
    pub role: Role,
    pub provenance: String,
}

impl AggregatedImage {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<u8>, role: Role) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("image dimensions must be positive"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::format(
                "aggregated image",
                format!("{} bytes for {height}x{width}x3", data.len()),
            ));
        }
        Ok(Self { height, width, data, role, provenance: String::new() })
    }

    pub fn zeros(height: usize, width: usize, role: Role) -> Self {
        Self { height, width, data: vec![0; height * width * 3], role, provenance: String::new() }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel `c` as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<u8> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Draw a one-pixel rectangle outline, clipped to the image.
    pub fn draw_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [u8; 3]) {
        let clamp_x = |v: f64| (v.round().max(0.0) as usize).min(self.width - 1);
        let clamp_y = |v: f64| (v.round().max(0.0) as usize).min(self.height - 1);
        let (xa, xb, ya, yb) = (clamp_x(x0), clamp_x(x1), clamp_y(y0), clamp_y(y1));
        for x in xa..=xb {
            self.set_pixel(ya, x, rgb);
            self.set_pixel(yb, x, rgb);
        }
        for y in ya..=yb {
            self.set_pixel(y, xa, rgb);
            self.set_pixel(y, xb, rgb);
        }
    }
}

/// Binary PPM (P6, maxval 255) encoding of an image.
pub fn encode_ppm(img: &AggregatedImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Decode a binary PPM. Comments in the header are skipped.
pub fn decode_ppm(bytes: &[u8], role: Role) -> Result<AggregatedImage> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("ppm", "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::format("ppm", "not a binary P6 file"));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::format("ppm", format!("bad number `{s}`")));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(Error::format("ppm", format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let need = width * height * 3;
    if bytes.len() < start + need {
        return Err(Error::format("ppm", "raster shorter than header declares"));
    }
    AggregatedImage::new(height, width, bytes[start..start + need].to_vec(), role)
}

/// Write an image as binary PPM.
pub fn render_image(img: &AggregatedImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>, role: Role) -> Result<AggregatedImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, role).map_err(|e| match e {
        Error::Format { reason, .. } => Error::format(path.display().to_string(), reason),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn small_cube_round_trips() {
        let cube = HyperCube::from_fn(2, 2, 3, vec![500.0, 510.5, 600.0], |y, x, b| {
            (y * 10 + x) as f32 + 0.25 * b as f32 - 3.0
        })
        .unwrap();
        let dir = tmp();
        let p = dir.path().join("c");
        write_cube(&cube, &p).unwrap();
        assert_eq!(read_cube(&p).unwrap(), cube);
        assert_eq!(read_cube(dir.path().join("c.hdr")).unwrap(), cube);
    }

    #[test]
    fn planes_survive_reading() {
        let cube = HyperCube::from_fn(8, 8, 16, default_wavelengths(16), |_, _, b| b as f32).unwrap();
        let dir = tmp();
        let p = dir.path().join("planes");
        write_cube(&cube, &p).unwrap();
        let back = read_cube(&p).unwrap();
        for b in 0..16 {
            assert!(back.plane(b).iter().all(|&v| v == b as f32));
        }
    }

    #[test]
    fn payload_short_by_one_plane_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("short");
        let (hdr, raw) = cube_paths(&p);
        fs::write(&hdr, "samples = 512\nlines = 256\nbands = 16\ninterleave = bsq\ndata type = float32le\n").unwrap();
        fs::write(&raw, vec![0u8; 512 * 256 * 15 * 4]).unwrap();
        let err = read_cube(&p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn full_sensor_payload_size() {
        let cube = HyperCube::new(256, 512, 16, vec![0.0; 512 * 256 * 16], default_wavelengths(16)).unwrap();
        let dir = tmp();
        let p = dir.path().join("full");
        write_cube(&cube, &p).unwrap();
        let len = fs::metadata(cube_paths(&p).1).unwrap().len();
        assert_eq!(len, 512 * 256 * 16 * 4);
    }

    #[test]
    fn zero_bands_rejected() {
        assert!(HyperCube::new(2, 2, 0, vec![], vec![]).is_err());
    }

    #[test]
    fn bad_wavelengths_and_samples_rejected() {
        assert!(HyperCube::new(1, 1, 2, vec![0.0, 0.0], vec![600.0, 500.0]).is_err());
        assert!(HyperCube::new(1, 1, 2, vec![0.0, 0.0], vec![50.0, 500.0]).is_err());
        assert!(HyperCube::new(1, 1, 2, vec![f32::NAN, 0.0], vec![500.0, 600.0]).is_err());

        let dir = tmp();
        let p = dir.path().join("nan");
        let (hdr, raw) = cube_paths(&p);
        fs::write(&hdr, "samples = 1\nlines = 1\nbands = 1\nwavelength = {500}\n").unwrap();
        fs::write(&raw, f32::INFINITY.to_le_bytes()).unwrap();
        assert!(read_cube(&p).is_err());
        assert!(matches!(read_cube(dir.path().join("absent")), Err(Error::Io { .. })));
    }

    #[test]
    fn header_without_wavelengths_uses_sensor_grid() {
        let dir = tmp();
        let p = dir.path().join("nowl");
        let (hdr, raw) = cube_paths(&p);
        fs::write(&hdr, "ENVI\nsamples = 1\nlines = 1\nbands = 16\n").unwrap();
        fs::write(&raw, vec![0u8; 64]).unwrap();
        let c = read_cube(&p).unwrap();
        assert_eq!(c.wavelengths_nm()[0], 470.0);
        assert_eq!(c.wavelengths_nm()[15], 620.0);
        assert!((c.wavelengths_nm()[1] - 480.0).abs() < 1e-12);
    }

    #[test]
    fn multiline_wavelength_block_parses() {
        let h = parse_header("samples = 1\nwavelength = {\n 500.0,\n 510.0 }\nbands = 2\n", Path::new("x")).unwrap();
        assert_eq!(h.wavelengths, Some(vec![500.0, 510.0]));
        assert_eq!(h.bands, Some(2));
    }

    #[test]
    fn demosaic_single_tile_recovers_cell_indices() {
        let frame = MosaicFrame::with_default_wavelengths(4, 4, 4, (0..16).map(|i| {
            let (y, x) = (i / 4, i % 4);
            (y * 4 + x) as f32
        }).collect());
        let cube = demosaic(&frame).unwrap();
        assert_eq!((cube.height(), cube.width(), cube.bands()), (1, 1, 16));
        for k in 0..16 {
            assert_eq!(cube.sample(0, 0, k), k as f32);
        }
    }

    #[test]
    fn demosaic_pattern_one_is_identity() {
        let data: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect();
        let frame = MosaicFrame::with_default_wavelengths(3, 4, 1, data.clone());
        let cube = demosaic(&frame).unwrap();
        assert_eq!((cube.height(), cube.width(), cube.bands()), (3, 4, 1));
        assert_eq!(cube.data(), &data[..]);
    }

    #[test]
    fn demosaic_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = 4;
        let data: Vec<f32> = (0..64).map(|_| rng.gen_range(-5.0..5.0)).collect();
        // Shuffled wavelengths exercise the band permutation.
        let cells: Vec<f64> = (0..16).map(|k| 470.0 + 10.0 * ((k * 7) % 16) as f64).collect();
        let frame = MosaicFrame { height: 8, width: 8, pattern_size: p, data: data.clone(), cell_wavelengths_nm: cells.clone() };
        let cube = demosaic(&frame).unwrap();
        for band in 0..16 {
            let wl = cube.wavelengths_nm()[band];
            let k = cells.iter().position(|&c| c == wl).unwrap();
            for y in 0..2 {
                for x in 0..2 {
                    let mut expected = f32::NAN;
                    for fy in 0..8 {
                        for fx in 0..8 {
                            if fy / p == y && fx / p == x && (fy % p) * p + fx % p == k {
                                expected = data[fy * 8 + fx];
                            }
                        }
                    }
                    assert_eq!(cube.sample(y, x, band), expected);
                }
            }
        }
        assert!(cube.wavelengths_nm().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn demosaic_rejects_indivisible_frames() {
        let frame = MosaicFrame::with_default_wavelengths(6, 8, 4, vec![0.0; 48]);
        assert!(demosaic(&frame).is_err());
    }

    #[test]
    fn ppm_round_trips() {
        let zero = AggregatedImage::zeros(3, 5, Role::SpatialAggregated);
        assert_eq!(decode_ppm(&encode_ppm(&zero), Role::SpatialAggregated).unwrap(), zero);

        let mut checker = AggregatedImage::zeros(4, 4, Role::SpectralAggregated);
        for y in 0..4 {
            for x in 0..4 {
                checker.set_pixel(y, x, if (x + y) % 2 == 0 { [255, 0, 0] } else { [0, 0, 255] });
            }
        }
        let dir = tmp();
        let p = dir.path().join("c.ppm");
        render_image(&checker, &p).unwrap();
        assert_eq!(read_image(&p, Role::SpectralAggregated).unwrap(), checker);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<u8> = (0..7 * 9 * 3).map(|_| rng.gen()).collect();
        let img = AggregatedImage::new(7, 9, data, Role::SpatialAggregated).unwrap();
        render_image(&img, &p).unwrap();
        assert_eq!(read_image(&p, Role::SpatialAggregated).unwrap().data, img.data);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode_ppm(&bytes, Role::SpatialAggregated).unwrap().pixel(0, 0), [1, 2, 3]);
    }

    #[test]
    fn render_to_missing_directory_fails() {
        let img = AggregatedImage::zeros(1, 1, Role::SpatialAggregated);
        assert!(render_image(&img, "/nonexistent/dir/x.ppm").is_err());
    }
}

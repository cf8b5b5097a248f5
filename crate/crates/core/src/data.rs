//! Cube storage, camera sensitivity functions, RGB projection, synthetic
//! data and patch sampling.
//!
//! # Cube file layout
//!
//! | offset | size | content |
//! |---|---|---|
//! | 0 | 4 | magic `HSIC` |
//! | 4 | 1 | version, `1` |
//! | 5 | 12 | `C`, `H`, `W` as little-endian `u32` |
//! | 17 | `4·C·H·W` | little-endian `f32`, band-major then row-major |
//!
//! RGB images use the same layout with `C = 3`.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BANDS: usize = 31;
pub const FIRST_WAVELENGTH_NM: f64 = 400.0;
pub const WAVELENGTH_STEP_NM: f64 = 10.0;

pub const CUBE_MAGIC: &[u8; 4] = b"HSIC";
pub const CUBE_VERSION: u8 = 1;
pub const CUBE_HEADER_LEN: usize = 17;

/// Largest element count accepted when decoding (1 GiB of samples).
const MAX_CUBE_ELEMENTS: u64 = 1 << 28;

/// Band centers in nanometres: 400, 410, ..., 700.
pub fn wavelengths() -> Vec<f64> {
    (0..BANDS)
        .map(|i| FIRST_WAVELENGTH_NM + WAVELENGTH_STEP_NM * i as f64)
        .collect()
}

/// A 31-band reflectance cube `[31, H, W]`, finite and non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    data: Tensor<f32>,
}

impl HsiCube {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        if data.rank() != 3 || data.shape()[0] != BANDS {
            return Err(Error::ShapeMismatch {
                op: "hsi cube",
                lhs: data.shape().to_vec(),
                rhs: vec![BANDS],
            });
        }
        data.check_finite("hsi cube")?;
        if let Some(v) = data.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::config(format!("hsi cube has negative value {v}")));
        }
        Ok(HsiCube { data })
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        wavelengths()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(load_tensor(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_tensor(path, &self.data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Produced by projecting a cube through a sensitivity function.
    Projected,
    /// Read from storage.
    Loaded,
}

/// A three-channel image `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    data: Tensor<f32>,
    pub provenance: Provenance,
}

impl RgbImage {
    pub fn new(data: Tensor<f32>, provenance: Provenance) -> Result<Self> {
        if data.rank() != 3 || data.shape()[0] != 3 {
            return Err(Error::ShapeMismatch {
                op: "rgb image",
                lhs: data.shape().to_vec(),
                rhs: vec![3],
            });
        }
        data.check_finite("rgb image")?;
        Ok(RgbImage { data, provenance })
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(load_tensor(path)?, Provenance::Loaded)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_tensor(path, &self.data)
    }
}

/// Serializes a `[C, H, W]` tensor in the cube layout.
pub fn encode_cube(t: &Tensor<f32>) -> Result<Vec<u8>> {
    if t.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "encode cube",
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    let mut out = Vec::with_capacity(CUBE_HEADER_LEN + 4 * t.numel());
    out.extend_from_slice(CUBE_MAGIC);
    out.push(CUBE_VERSION);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::ExtentOverflow(format!("extent {d}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses the cube layout.
pub fn decode_cube(bytes: &[u8]) -> Result<Tensor<f32>> {
    let take = |offset: usize, needed: usize| {
        bytes.get(offset..offset + needed).ok_or(Error::Truncated {
            offset,
            needed,
            available: bytes.len().saturating_sub(offset),
        })
    };
    if take(0, 4)? != CUBE_MAGIC {
        return Err(Error::BadMagic { expected: "HSIC" });
    }
    let version = take(4, 1)?[0];
    if version != CUBE_VERSION {
        return Err(Error::UnsupportedVersion(version.into()));
    }
    let mut shape = [0usize; 3];
    for (i, d) in shape.iter_mut().enumerate() {
        let raw = take(5 + 4 * i, 4)?;
        *d = u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize;
    }
    if shape.contains(&0) {
        return Err(Error::ZeroExtent(shape.to_vec()));
    }
    let count = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
    let count = match count {
        Some(c) if c <= MAX_CUBE_ELEMENTS => c as usize,
        _ => return Err(Error::ExtentOverflow(format!("{shape:?}"))),
    };
    let payload = take(CUBE_HEADER_LEN, 4 * count)?;
    let trailing = bytes.len() - CUBE_HEADER_LEN - 4 * count;
    if trailing != 0 {
        return Err(Error::TrailingBytes(trailing));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cube(&bytes)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cube(t)?).map_err(|e| Error::io(path, e))
}

const CSS_HEADER: &str = "wavelength_nm,R,G,B";
const CSS_COLUMNS: [&str; 3] = ["R", "G", "B"];

/// Camera spectral sensitivity `Φ`, a non-negative `[3, 31]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CssFunction {
    matrix: Tensor<f64>,
    wavelengths: Vec<f64>,
}

impl CssFunction {
    /// Validates `matrix` (`[3, 31]`) against the given wavelength grid.
    pub fn new(matrix: Tensor<f64>, wavelengths: Vec<f64>) -> Result<Self> {
        if matrix.shape() != [3, BANDS] || wavelengths.len() != BANDS {
            return Err(Error::ShapeMismatch {
                op: "css function",
                lhs: matrix.shape().to_vec(),
                rhs: vec![3, wavelengths.len()],
            });
        }
        matrix.check_finite("css function")?;
        for (row, pair) in wavelengths.windows(2).enumerate() {
            if !(pair[1] > pair[0]) {
                return Err(Error::CssNonMonotone { row: row + 2, value: pair[1] });
            }
        }
        for band in 0..BANDS {
            for (ch, column) in CSS_COLUMNS.iter().enumerate() {
                let value = matrix.at(&[ch, band]);
                if value < 0.0 {
                    return Err(Error::CssNegative { row: band + 1, column, value });
                }
            }
        }
        for (ch, column) in CSS_COLUMNS.iter().enumerate() {
            if (0..BANDS).all(|b| matrix.at(&[ch, b]) == 0.0) {
                return Err(Error::Css {
                    line: 0,
                    msg: format!("channel {column} has no response in any band"),
                });
            }
        }
        Ok(CssFunction { matrix, wavelengths })
    }

    pub fn matrix(&self) -> &Tensor<f64> {
        &self.matrix
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    /// Whether the wavelength grid is the 400..700 nm cube grid.
    pub fn matches_cube_grid(&self) -> bool {
        self.wavelengths
            .iter()
            .zip(wavelengths())
            .all(|(a, b)| (a - b).abs() < 1e-9)
    }

    /// `Φ` as a 1×1 convolution weight `[3, 31, 1, 1]`.
    pub fn conv_weight<E: Scalar>(&self) -> Tensor<E> {
        Tensor::from_fn([3, BANDS, 1, 1], |i| E::of(self.matrix.data()[i]))
    }
}

/// Parses the sensitivity CSV: header `wavelength_nm,R,G,B` then 31 rows.
/// Blank lines are ignored.
pub fn parse_css(text: &str) -> Result<CssFunction> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, header)) if header.trim_start_matches('\u{feff}') == CSS_HEADER => {}
        Some((line, other)) => {
            return Err(Error::Css {
                line,
                msg: format!("expected header `{CSS_HEADER}`, found `{other}`"),
            })
        }
        None => return Err(Error::CssRowCount(0)),
    }
    let mut waves = Vec::new();
    let mut values = Vec::new();
    for (line, text) in lines {
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Css {
                line,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let mut row = [0.0; 4];
        for (slot, field) in row.iter_mut().zip(&fields) {
            *slot = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Css {
                    line,
                    msg: format!("`{field}` is not a finite number"),
                })?;
        }
        let index = waves.len();
        if let Some(&prev) = waves.last() {
            if row[0] <= prev {
                return Err(Error::CssNonMonotone { row: index + 1, value: row[0] });
            }
        }
        for (c, column) in CSS_COLUMNS.iter().enumerate() {
            if row[c + 1] < 0.0 {
                return Err(Error::CssNegative { row: index + 1, column, value: row[c + 1] });
            }
        }
        waves.push(row[0]);
        values.push([row[1], row[2], row[3]]);
    }
    if waves.len() != BANDS {
        return Err(Error::CssRowCount(waves.len()));
    }
    let matrix = Tensor::from_fn([3, BANDS], |i| values[i % BANDS][i / BANDS]);
    CssFunction::new(matrix, waves)
}

pub fn load_css(path: impl AsRef<Path>) -> Result<CssFunction> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_css(&text)
}

/// The bundled sensitivity table: Gaussian R, G, B curves peaking at 600,
/// 540 and 460 nm, each row summing to one.
pub const DEFAULT_CSS_CSV: &str = include_str!("../data/default_css.csv");

pub fn default_css() -> CssFunction {
    parse_css(DEFAULT_CSS_CSV).expect("bundled css table is valid")
}

/// Applies `Φ` per pixel to `[31, H, W]` or `[N, 31, H, W]` data.
pub fn project<E: Scalar>(hsi: &Tensor<E>, css: &CssFunction) -> Result<Tensor<E>> {
    let rank = hsi.rank();
    if !(rank == 3 || rank == 4) || hsi.shape()[rank - 3] != BANDS {
        return Err(Error::ShapeMismatch {
            op: "css projection",
            lhs: hsi.shape().to_vec(),
            rhs: vec![BANDS],
        });
    }
    let n = if rank == 4 { hsi.shape()[0] } else { 1 };
    let plane = hsi.shape()[rank - 2] * hsi.shape()[rank - 1];
    let phi = css.matrix().data();
    let src = hsi.data();
    let mut out = Vec::with_capacity(n * 3 * plane);
    for s in 0..n {
        let cube = &src[s * BANDS * plane..(s + 1) * BANDS * plane];
        for ch in 0..3 {
            out.extend((0..plane).map(|p| {
                let acc: f64 = (0..BANDS).map(|b| phi[ch * BANDS + b] * cube[b * plane + p].as_f64()).sum();
                E::of(acc)
            }));
        }
    }
    let mut shape = hsi.shape().to_vec();
    shape[rank - 3] = 3;
    Tensor::new(shape, out)
}

/// Projects a cube to RGB through `css`; the css must sample the cube grid.
pub fn css_project(hsi: &HsiCube, css: &CssFunction) -> Result<RgbImage> {
    if !css.matches_cube_grid() {
        return Err(Error::WavelengthMismatch);
    }
    RgbImage::new(project(hsi.data(), css)?, Provenance::Projected)
}

/// Smallest value of a synthetic cube; keeps relative errors bounded.
pub const SYNTH_FLOOR: f32 = 0.05;

/// Generates `count` cube/RGB pairs. Each cube is a sum of 3–6 products of
/// a spatial Gaussian bump and a spectral Gaussian (20–80 nm bandwidth),
/// scaled into `[SYNTH_FLOOR, 1]` with maximum exactly 1.
pub fn synth_dataset(
    seed: u64,
    count: usize,
    height: usize,
    width: usize,
    css: &CssFunction,
) -> Result<Vec<(HsiCube, RgbImage)>> {
    if count == 0 || height == 0 || width == 0 {
        return Err(Error::config("synthetic dataset needs count, height and width >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves = wavelengths();
    (0..count)
        .map(|_| {
            let cube = synth_cube(&mut rng, height, width, &waves)?;
            let rgb = css_project(&cube, css)?;
            Ok((cube, rgb))
        })
        .collect()
}

fn synth_cube(rng: &mut impl Rng, height: usize, width: usize, waves: &[f64]) -> Result<HsiCube> {
    let plane = height * width;
    let mut acc = vec![0.0f64; BANDS * plane];
    for _ in 0..rng.random_range(3..=6) {
        let amplitude = rng.random_range(0.3..1.0);
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let sy = rng.random_range(0.15..0.6) * height as f64;
        let sx = rng.random_range(0.15..0.6) * width as f64;
        let center = rng.random_range(FIRST_WAVELENGTH_NM..=700.0);
        let bandwidth = rng.random_range(20.0..80.0);
        let spectrum: Vec<f64> = waves
            .iter()
            .map(|l| amplitude * (-(l - center).powi(2) / (2.0 * bandwidth * bandwidth)).exp())
            .collect();
        let spatial: Vec<f64> = (0..plane)
            .map(|p| {
                let (y, x) = ((p / width) as f64, (p % width) as f64);
                (-((y - cy).powi(2) / (2.0 * sy * sy) + (x - cx).powi(2) / (2.0 * sx * sx))).exp()
            })
            .collect();
        for (b, s) in spectrum.iter().enumerate() {
            for (p, g) in spatial.iter().enumerate() {
                acc[b * plane + p] += s * g;
            }
        }
    }
    let max = acc.iter().cloned().fold(0.0, f64::max);
    let floor = SYNTH_FLOOR as f64;
    let data = acc
        .iter()
        .map(|v| (floor + (1.0 - floor) * v / max) as f32)
        .collect();
    HsiCube::new(Tensor::new([BANDS, height, width], data)?)
}

/// Top-left corner of a uniformly random `size × size` window.
pub fn random_origin(rng: &mut impl Rng, height: usize, width: usize, size: usize) -> Result<(usize, usize)> {
    if size == 0 || size > height || size > width {
        return Err(Error::config(format!(
            "patch size {size} does not fit a {height}x{width} image"
        )));
    }
    Ok((rng.random_range(0..=height - size), rng.random_range(0..=width - size)))
}

/// Copies the `size × size` window at `origin` from a `[C, H, W]` tensor.
pub fn crop<E: Scalar>(t: &Tensor<E>, origin: (usize, usize), size: usize) -> Result<Tensor<E>> {
    t.slice(1, origin.0, origin.0 + size)?
        .slice(2, origin.1, origin.1 + size)
}

/// Aligned random crops from one pair, deterministic in `seed`.
pub fn sample_patches(
    pair: (&HsiCube, &RgbImage),
    patch_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let (hsi, rgb) = pair;
    if hsi.data().shape()[1..] != rgb.data().shape()[1..] {
        return Err(Error::ShapeMismatch {
            op: "sample patches",
            lhs: hsi.data().shape().to_vec(),
            rhs: rgb.data().shape().to_vec(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let origin = random_origin(&mut rng, hsi.height(), hsi.width(), patch_size)?;
            Ok((crop(hsi.data(), origin, patch_size)?, crop(rgb.data(), origin, patch_size)?))
        })
        .collect()
}

/// Draws `count` aligned crops across a dataset, choosing the source image
/// uniformly with replacement for each crop.
pub fn sample_batch(
    dataset: &[(HsiCube, RgbImage)],
    patch_size: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    (0..count)
        .map(|_| {
            let (hsi, rgb) = dataset
                .choose(rng)
                .ok_or_else(|| Error::config("dataset is empty"))?;
            let origin = random_origin(rng, hsi.height(), hsi.width(), patch_size)?;
            Ok((crop(hsi.data(), origin, patch_size)?, crop(rgb.data(), origin, patch_size)?))
        })
        .collect()
}

/// Binary PPM (P6) from row-major RGB triples.
pub fn encode_ppm(height: usize, width: usize, pixels: &[[u8; 3]]) -> Vec<u8> {
    assert_eq!(pixels.len(), height * width, "pixel count");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().flatten());
    out
}

/// PPM export of a `[3, H, W]` image: each value is multiplied by `scale`,
/// clamped to `[0, 1]` and mapped linearly onto 0..=255.
pub fn rgb_to_ppm(rgb: &Tensor<f32>, scale: f32) -> Result<Vec<u8>> {
    if rgb.rank() != 3 || rgb.shape()[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "ppm export",
            lhs: rgb.shape().to_vec(),
            rhs: vec![3],
        });
    }
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let plane = h * w;
    let byte = |v: f32| ((v * scale).clamp(0.0, 1.0) * 255.0).round() as u8;
    let pixels: Vec<[u8; 3]> = (0..plane)
        .map(|p| std::array::from_fn(|c| byte(rgb.data()[c * plane + p])))
        .collect();
    Ok(encode_ppm(h, w, &pixels))
}

//! Image standardization and tiling.
//!
//! Raw sections go through gray-world color-cast removal, then Reinhard
//! stain normalization (per-channel mean/std matching in CIE L*a*b*) against
//! a reference, and are finally cut into fixed-size tiles or spot-centered
//! patches.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TILE_SIZE: usize = 128;
/// Channels with a mean below this are left untouched by color-cast removal.
const DEGENERATE_MEAN: f64 = 1e-9;
/// Lower bound on Lab standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// H×W×3 interleaved RGB in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(RgbImage { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut s = [0.0; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                s[c] += px[c];
            }
        }
        let n = (self.height * self.width) as f64;
        s.map(|v| v / n)
    }

    /// Window `[row, row+size) × [col, col+size)` as an owned image.
    pub fn crop(&self, row: usize, col: usize, size: usize) -> Result<RgbImage> {
        if size == 0 || row + size > self.height || col + size > self.width {
            return Err(Error::OutOfBounds {
                row: row as i64,
                col: col as i64,
                size,
                height: self.height,
                width: self.width,
            });
        }
        let mut pixels = Vec::with_capacity(size * size * 3);
        for r in row..row + size {
            let start = (r * self.width + col) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + size * 3]);
        }
        Ok(RgbImage { height: size, width: size, pixels })
    }

    /// Decodes an 8-bit RGB image, scaling by 1/255.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
        Self::new(h as usize, w as usize, pixels)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::image(path, e))
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Gray-world gains: each channel is scaled by the mean of the three channel
/// means over its own mean. Degenerate channels get a gain of 1.
pub fn gray_world_gains(img: &RgbImage) -> [f64; 3] {
    let means = img.channel_means();
    let target = means.iter().sum::<f64>() / 3.0;
    means.map(|m| if m < DEGENERATE_MEAN { 1.0 } else { target / m })
}

pub fn remove_color_cast(img: &RgbImage) -> RgbImage {
    let gains = gray_world_gains(img);
    let pixels = img
        .pixels
        .chunks_exact(3)
        .flat_map(|px| [0, 1, 2].map(|c| (px[c] * gains[c]).clamp(0.0, 1.0)))
        .collect();
    RgbImage { height: img.height, width: img.width, pixels }
}

// sRGB (D65) ↔ CIE XYZ ↔ CIE L*a*b*

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
/// Reference white, the XYZ image of sRGB (1, 1, 1).
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];
const LAB_EPSILON: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    inv
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPSILON {
        t.cbrt()
    } else {
        (LAB_KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > LAB_EPSILON {
        t
    } else {
        (116.0 * f - 16.0) / LAB_KAPPA
    }
}

pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| RGB_TO_XYZ[i][j] * lin[j]).sum::<f64>() / WHITE[i]);
    let f = xyz.map(lab_f);
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// Inverse of [`rgb_to_lab_pixel`]; out-of-gamut results are not clipped.
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    let inv = invert3(&RGB_TO_XYZ);
    let fy = (lab[0] + 16.0) / 116.0;
    let f = [fy + lab[1] / 500.0, fy, fy - lab[2] / 200.0];
    let xyz: [f64; 3] = std::array::from_fn(|i| lab_f_inv(f[i]) * WHITE[i]);
    let lin: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| inv[i][j] * xyz[j]).sum());
    lin.map(|v| if v < 0.0 { -linear_to_srgb(-v) } else { linear_to_srgb(v) })
}

/// Planar L*, a*, b* values.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub height: usize,
    pub width: usize,
    pub planes: [Vec<f64>; 3],
}

impl LabImage {
    pub fn stats(&self) -> ([f64; 3], [f64; 3]) {
        let n = (self.height * self.width) as f64;
        let mean = std::array::from_fn(|c| self.planes[c].iter().sum::<f64>() / n);
        let std = std::array::from_fn(|c| {
            let m: f64 = mean[c];
            (self.planes[c].iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
        });
        (mean, std)
    }
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    let n = img.height * img.width;
    let mut planes = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for px in img.pixels.chunks_exact(3) {
        let lab = rgb_to_lab_pixel([px[0], px[1], px[2]]);
        for c in 0..3 {
            planes[c].push(lab[c]);
        }
    }
    LabImage { height: img.height, width: img.width, planes }
}

/// Converts back to RGB, clipping to `[0, 1]`.
pub fn lab_to_rgb(lab: &LabImage) -> RgbImage {
    let n = lab.height * lab.width;
    let mut pixels = Vec::with_capacity(n * 3);
    for i in 0..n {
        let rgb = lab_to_rgb_pixel([lab.planes[0][i], lab.planes[1][i], lab.planes[2][i]]);
        pixels.extend(rgb.map(|v| v.clamp(0.0, 1.0)));
    }
    RgbImage { height: lab.height, width: lab.width, pixels }
}

/// Per-channel L*a*b* statistics of a reference section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StainReference {
    pub lab_mean: [f64; 3],
    pub lab_std: [f64; 3],
}

impl StainReference {
    pub fn from_image(img: &RgbImage) -> Self {
        let (lab_mean, std) = rgb_to_lab(img).stats();
        StainReference { lab_mean, lab_std: std.map(|s| s.max(STD_FLOOR)) }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut r: StainReference = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        r.lab_std = r.lab_std.map(|s| s.max(STD_FLOOR));
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reinhard transfer in Lab, before conversion back to RGB.
pub fn stain_transfer_lab(img: &RgbImage, reference: &StainReference) -> LabImage {
    let mut lab = rgb_to_lab(img);
    let (mean, std) = lab.stats();
    for c in 0..3 {
        let scale = if std[c] < STD_FLOOR { 1.0 } else { reference.lab_std[c] / std[c] };
        for v in lab.planes[c].iter_mut() {
            *v = (*v - mean[c]) * scale + reference.lab_mean[c];
        }
    }
    lab
}

pub fn stain_normalize(img: &RgbImage, reference: &StainReference) -> RgbImage {
    lab_to_rgb(&stain_transfer_lab(img, reference))
}

/// Color-cast removal followed by stain normalization.
pub fn standardize(img: &RgbImage, reference: &StainReference) -> RgbImage {
    stain_normalize(&remove_color_cast(img), reference)
}

/// Square RGB patch cut from a source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub image: RgbImage,
    pub source_image_id: String,
    /// `(row, col)` of the top-left pixel in the source.
    pub origin: (usize, usize),
    pub spot_id: Option<String>,
}

impl Tile {
    pub fn size(&self) -> usize {
        self.image.height
    }

    pub fn mean_brightness(&self) -> f64 {
        self.image.channel_means().iter().sum::<f64>() / 3.0
    }
}

/// Non-overlapping `size`×`size` tiles in row-major order; the ragged
/// right/bottom remainder is discarded.
pub fn tile_image(img: &RgbImage, size: usize, source_image_id: &str) -> Result<Vec<Tile>> {
    if size == 0 {
        return Err(Error::InvalidArgument("tile size must be >= 1".into()));
    }
    let mut tiles = Vec::with_capacity((img.height / size) * (img.width / size));
    for tr in 0..img.height / size {
        for tc in 0..img.width / size {
            let (row, col) = (tr * size, tc * size);
            tiles.push(Tile {
                image: img.crop(row, col, size)?,
                source_image_id: source_image_id.to_string(),
                origin: (row, col),
                spot_id: None,
            });
        }
    }
    Ok(tiles)
}

/// `size`×`size` window centered on `center = (row, col)`, with origin
/// `(row − size/2, col − size/2)`.
pub fn extract_spot_patch(img: &RgbImage, center: (usize, usize), size: usize, source_image_id: &str) -> Result<Tile> {
    let row = center.0 as i64 - (size / 2) as i64;
    let col = center.1 as i64 - (size / 2) as i64;
    if size == 0 || row < 0 || col < 0 || row as usize + size > img.height || col as usize + size > img.width {
        return Err(Error::OutOfBounds { row, col, size, height: img.height, width: img.width });
    }
    Ok(Tile {
        image: img.crop(row as usize, col as usize, size)?,
        source_image_id: source_image_id.to_string(),
        origin: (row as usize, col as usize),
        spot_id: None,
    })
}

/// Grid tiles from several images, optionally dropping near-white
/// background tiles (mean brightness above `max_brightness`), then a seeded
/// subsample of at most `max_tiles` kept in source order.
pub fn sample_tiles(
    images: &[(String, RgbImage)],
    size: usize,
    max_brightness: Option<f64>,
    max_tiles: Option<usize>,
    seed: u64,
) -> Result<Vec<Tile>> {
    let mut tiles = Vec::new();
    for (id, img) in images {
        tiles.extend(
            tile_image(img, size, id)?
                .into_iter()
                .filter(|t| max_brightness.map_or(true, |m| t.mean_brightness() <= m)),
        );
    }
    if let Some(max) = max_tiles {
        if tiles.len() > max {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep = rand::seq::index::sample(&mut rng, tiles.len(), max).into_vec();
            keep.sort_unstable();
            let mut it = keep.into_iter().peekable();
            tiles = tiles
                .into_iter()
                .enumerate()
                .filter_map(|(i, t)| (it.peek() == Some(&i)).then(|| { it.next(); t }))
                .collect();
        }
    }
    Ok(tiles)
}

/// Stacks equally sized tiles into an `[N, 3, S, S]` tensor.
pub fn tiles_to_tensor(tiles: &[Tile]) -> Result<Tensor> {
    let first = tiles.first().ok_or_else(|| Error::InvalidArgument("no tiles".into()))?;
    let s = first.size();
    let mut data = Vec::with_capacity(tiles.len() * 3 * s * s);
    for t in tiles {
        if t.image.height != s || t.image.width != s {
            return Err(Error::Shape(format!("mixed tile sizes {s} and {}x{}", t.image.height, t.image.width)));
        }
        for c in 0..3 {
            data.extend(t.image.pixels.chunks_exact(3).map(|px| px[c]));
        }
    }
    Tensor::new(&[tiles.len(), 3, s, s], data)
}

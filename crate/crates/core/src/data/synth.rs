//! Seeded synthetic dataset: sections with a tumor-like and a stroma-like
//! region separated by a wavy vertical boundary, spots on a 200-px grid, and
//! Poisson counts whose means depend on the region under each spot.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{Section, Spot, StDataset, IMAGE_FILE};
use crate::error::{Error, Result};
use crate::imageprep::RgbImage;

pub const SPOT_PITCH: usize = 200;
pub const GENERATOR_FILE: &str = "generator.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub sections_per_patient: usize,
    pub image_size: usize,
    pub n_spots: usize,
    pub n_genes: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 4,
            sections_per_patient: 1,
            image_size: 1400,
            n_spots: 49,
            n_genes: 300,
            noise_sd: 0.1,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Tumor,
    Stroma,
}

impl Region {
    pub fn label(self) -> &'static str {
        match self {
            Region::Tumor => "tumor",
            Region::Stroma => "stroma",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneEffect {
    pub name: String,
    pub base_log_mean: f64,
    /// Tumor minus stroma log-mean.
    pub effect: f64,
}

impl GeneEffect {
    pub fn log_mean(&self, region: Region) -> f64 {
        match region {
            Region::Tumor => self.base_log_mean + 0.5 * self.effect,
            Region::Stroma => self.base_log_mean - 0.5 * self.effect,
        }
    }
}

/// Geometry and color cast of one generated section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionLayout {
    pub patient_id: String,
    pub section_id: String,
    pub image_size: usize,
    /// Region left of the boundary.
    pub left: Region,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
    pub color_cast: [f64; 3],
}

impl SectionLayout {
    /// Column of the boundary at a given row.
    pub fn boundary(&self, row: f64) -> f64 {
        self.image_size as f64 / 2.0 + self.amplitude * (2.0 * PI * row / self.period + self.phase).sin()
    }

    pub fn region_at(&self, row: usize, col: usize) -> Region {
        let left = (col as f64) < self.boundary(row as f64);
        match (left, self.left) {
            (true, r) => r,
            (false, Region::Tumor) => Region::Stroma,
            (false, Region::Stroma) => Region::Tumor,
        }
    }
}

/// Generator parameters, persisted as `generator.json` next to the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub genes: Vec<GeneEffect>,
    pub sections: Vec<SectionLayout>,
}

impl GroundTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn section(&self, patient_id: &str, section_id: &str) -> Option<&SectionLayout> {
        self.sections.iter().find(|s| s.patient_id == patient_id && s.section_id == section_id)
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub truth: GroundTruth,
    pub dataset: StDataset,
}

const STROMA_RGB: [f64; 3] = [0.92, 0.68, 0.80];
const TUMOR_RGB: [f64; 3] = [0.80, 0.56, 0.76];
const NUCLEUS_RGB: [f64; 3] = [0.32, 0.16, 0.46];

fn render(layout: &SectionLayout, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = layout.image_size;
    let mut mask = vec![false; s * s];
    for r in 0..s {
        for c in 0..s {
            mask[r * s + c] = layout.region_at(r, c) == Region::Tumor;
        }
    }
    let fine = Normal::new(0.0, 0.03).expect("valid sd");
    let smooth = Normal::new(0.0, 0.012).expect("valid sd");
    let (wx, wy) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let mut px = vec![0.0; s * s * 3];
    for r in 0..s {
        for c in 0..s {
            let i = r * s + c;
            if mask[i] {
                for k in 0..3 {
                    px[i * 3 + k] = TUMOR_RGB[k] + fine.sample(rng);
                }
            } else {
                let wave = 0.03
                    * (2.0 * PI * c as f64 / (s as f64 / 3.0) + wx).sin()
                    * (2.0 * PI * r as f64 / (s as f64 / 4.0) + wy).sin();
                for k in 0..3 {
                    px[i * 3 + k] = STROMA_RGB[k] + wave + smooth.sample(rng);
                }
            }
        }
    }

    // Nuclei: dark discs, clipped to the tumor region.
    let n_blobs = s * s / 60;
    for _ in 0..n_blobs {
        let (cr, cc) = (rng.gen_range(0.0..s as f64), rng.gen_range(0.0..s as f64));
        let radius: f64 = rng.gen_range(2.0..5.0);
        let shade: f64 = rng.gen_range(-0.06..0.06);
        if !mask[(cr as usize) * s + cc as usize] {
            continue;
        }
        let (r0, r1) = ((cr - radius).floor().max(0.0) as usize, ((cr + radius).ceil() as usize).min(s - 1));
        let (c0, c1) = ((cc - radius).floor().max(0.0) as usize, ((cc + radius).ceil() as usize).min(s - 1));
        for r in r0..=r1 {
            for c in c0..=c1 {
                let (dr, dc) = (r as f64 - cr, c as f64 - cc);
                if dr * dr + dc * dc <= radius * radius && mask[r * s + c] {
                    for k in 0..3 {
                        px[(r * s + c) * 3 + k] = NUCLEUS_RGB[k] + shade;
                    }
                }
            }
        }
    }

    // Quantize now so the in-memory image equals what a reader decodes.
    for (i, v) in px.iter_mut().enumerate() {
        let cast = layout.color_cast[i % 3];
        *v = f64::from(crate::imageprep::quantize(*v * cast)) / 255.0;
    }
    RgbImage::new(s, s, px).expect("pixels clamped to [0, 1]")
}

fn validate(config: &SynthConfig) -> Result<usize> {
    if config.image_size < 256 {
        return Err(Error::InvalidArgument(format!("image_size {} < 256", config.image_size)));
    }
    if config.n_genes < 2 {
        return Err(Error::InvalidArgument("n_genes must be >= 2".into()));
    }
    if config.n_patients == 0 || config.sections_per_patient == 0 || config.n_spots == 0 {
        return Err(Error::InvalidArgument("n_patients, sections_per_patient and n_spots must be >= 1".into()));
    }
    if !(config.noise_sd >= 0.0 && config.noise_sd.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_sd {} must be finite and >= 0", config.noise_sd)));
    }
    let per_axis = config.image_size / SPOT_PITCH;
    if config.n_spots > per_axis * per_axis {
        return Err(Error::InvalidArgument(format!(
            "{} spots do not fit a {}-px grid on a {}x{} image (capacity {})",
            config.n_spots,
            SPOT_PITCH,
            config.image_size,
            config.image_size,
            per_axis * per_axis
        )));
    }
    Ok(per_axis)
}

/// Generates the dataset under `out` and returns the ground truth.
pub fn synth_generate(config: &SynthConfig, out: impl AsRef<Path>) -> Result<SynthOutput> {
    let per_axis = validate(config)?;
    let out = out.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let width = config.n_genes.to_string().len().max(3);
    let effect_dist = Normal::new(0.0, 0.8).expect("valid sd");
    let genes: Vec<GeneEffect> = (0..config.n_genes)
        .map(|g| GeneEffect {
            name: format!("GENE{:0width$}", g + 1),
            base_log_mean: rng.gen_range(0.0..30f64.ln()),
            effect: effect_dist.sample(&mut rng),
        })
        .collect();
    let jitter = (config.noise_sd > 0.0).then(|| Normal::new(0.0, config.noise_sd).expect("valid sd"));

    let pwidth = config.n_patients.to_string().len();
    let mut sections = Vec::new();
    let mut patients = BTreeMap::new();
    let mut images = HashMap::new();
    for p in 0..config.n_patients {
        let pid = format!("P{:0pwidth$}", p + 1);
        let mut secs = Vec::new();
        for q in 0..config.sections_per_patient {
            let s = config.image_size as f64;
            let layout = SectionLayout {
                patient_id: pid.clone(),
                section_id: format!("S{}", q + 1),
                image_size: config.image_size,
                left: if rng.gen_bool(0.5) { Region::Tumor } else { Region::Stroma },
                amplitude: rng.gen_range(0.05..0.12) * s,
                period: rng.gen_range(0.3..0.6) * s,
                phase: rng.gen_range(0.0..2.0 * PI),
                color_cast: std::array::from_fn(|_| rng.gen_range(0.9..1.1)),
            };
            let image = render(&layout, &mut rng);
            let mut spots = Vec::with_capacity(config.n_spots);
            for i in 0..config.n_spots {
                let (gr, gc) = (i / per_axis, i % per_axis);
                let (row, col) = (SPOT_PITCH / 2 + SPOT_PITCH * gr, SPOT_PITCH / 2 + SPOT_PITCH * gc);
                let region = layout.region_at(row, col);
                let counts = genes
                    .iter()
                    .map(|g| {
                        let log_mu = g.log_mean(region) + jitter.map_or(0.0, |d| d.sample(&mut rng));
                        Poisson::new(log_mu.exp()).expect("positive mean").sample(&mut rng) as u64
                    })
                    .collect();
                spots.push(Spot {
                    spot_id: format!("{}x{}", gc + 1, gr + 1),
                    x_px: col as f64,
                    y_px: row as f64,
                    counts,
                    label: Some(region.label().to_string()),
                });
            }
            images.insert(format!("{pid}/{}", layout.section_id), image);
            secs.push(Section {
                section_id: layout.section_id.clone(),
                image_path: out.join(&pid).join(&layout.section_id).join(IMAGE_FILE),
                spots,
            });
            sections.push(layout);
        }
        patients.insert(pid, secs);
    }

    let dataset = StDataset {
        root: out.to_path_buf(),
        genes: genes.iter().map(|g| g.name.clone()).collect(),
        patients,
    };
    dataset.write(out, &images)?;
    let truth = GroundTruth { config: config.clone(), genes, sections };
    let gpath = out.join(GENERATOR_FILE);
    let mut text = serde_json::to_string_pretty(&truth).map_err(|e| Error::json(&gpath, e))?;
    text.push('\n');
    fs::write(&gpath, text).map_err(|e| Error::io(&gpath, e))?;
    Ok(SynthOutput { truth, dataset })
}

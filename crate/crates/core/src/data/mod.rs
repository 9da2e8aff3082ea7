//! Spatial-transcriptomics datasets on disk, expression matrices, and gene
//! selection.
//!
//! Layout under a dataset root:
//!
//! ```text
//! manifest.json                {"genes": [...], "patients": {"<pid>": ["<sid>", ...]}}
//! <pid>/<sid>/image.png        8-bit RGB
//! <pid>/<sid>/spots.tsv        spot_id  x_px  y_px  label
//! <pid>/<sid>/counts.tsv       spot_id  <gene1>  <gene2> ...
//! ```

mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageprep::{extract_spot_patch, tiles_to_tensor, RgbImage, Tile};
use crate::tensor::Tensor;

pub use synth::{synth_generate, GeneEffect, GroundTruth, Region, SectionLayout, SynthConfig, SynthOutput, GENERATOR_FILE, SPOT_PITCH};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_FILE: &str = "image.png";
pub const SPOTS_FILE: &str = "spots.tsv";
pub const COUNTS_FILE: &str = "counts.tsv";
pub const DEFAULT_N_GENES: usize = 250;

#[derive(Debug, Clone, PartialEq)]
pub struct Spot {
    pub spot_id: String,
    /// Column of the spot center.
    pub x_px: f64,
    /// Row of the spot center.
    pub y_px: f64,
    pub counts: Vec<u64>,
    pub label: Option<String>,
}

impl Spot {
    /// Pixel `(row, col)` nearest to the spot center.
    pub fn center(&self) -> (usize, usize) {
        (self.y_px.round() as usize, self.x_px.round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub section_id: String,
    pub image_path: PathBuf,
    pub spots: Vec<Spot>,
}

impl Section {
    pub fn load_image(&self) -> Result<RgbImage> {
        RgbImage::load_png(&self.image_path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StDataset {
    pub root: PathBuf,
    pub genes: Vec<String>,
    /// Patients in lexicographic id order, sections in manifest order.
    pub patients: BTreeMap<String, Vec<Section>>,
}

/// A spot together with where it lives.
#[derive(Debug, Clone, Copy)]
pub struct SpotRef<'a> {
    pub patient_id: &'a str,
    pub section: &'a Section,
    pub spot: &'a Spot,
}

impl SpotRef<'_> {
    pub fn key(&self) -> String {
        spot_key(self.patient_id, &self.section.section_id, &self.spot.spot_id)
    }
}

/// Dataset-wide spot identifier, `pid/sid/spot_id`.
pub fn spot_key(patient_id: &str, section_id: &str, spot_id: &str) -> String {
    format!("{patient_id}/{section_id}/{spot_id}")
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    genes: Vec<String>,
    patients: BTreeMap<String, Vec<String>>,
}

impl StDataset {
    pub fn spots(&self) -> impl Iterator<Item = SpotRef<'_>> {
        self.patients.iter().flat_map(|(pid, sections)| {
            sections
                .iter()
                .flat_map(move |section| section.spots.iter().map(move |spot| SpotRef { patient_id: pid, section, spot }))
        })
    }

    pub fn n_spots(&self) -> usize {
        self.spots().count()
    }

    pub fn patient_ids(&self) -> Vec<&str> {
        self.patients.keys().map(String::as_str).collect()
    }

    /// Writes the dataset under `root`, copying section images from their
    /// current locations unless `images` supplies replacements keyed by
    /// `pid/sid`.
    pub fn write(&self, root: impl AsRef<Path>, images: &HashMap<String, RgbImage>) -> Result<()> {
        let root = root.as_ref();
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let manifest = Manifest {
            genes: self.genes.clone(),
            patients: self
                .patients
                .iter()
                .map(|(pid, secs)| (pid.clone(), secs.iter().map(|s| s.section_id.clone()).collect()))
                .collect(),
        };
        let mpath = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
        text.push('\n');
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;

        for (pid, sections) in &self.patients {
            for section in sections {
                let dir = root.join(pid).join(&section.section_id);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let image_path = dir.join(IMAGE_FILE);
                match images.get(&format!("{pid}/{}", section.section_id)) {
                    Some(img) => img.save_png(&image_path)?,
                    None => {
                        fs::copy(&section.image_path, &image_path).map_err(|e| Error::io(&section.image_path, e))?;
                    }
                }
                write_section_tables(&dir, &self.genes, section)?;
            }
        }
        Ok(())
    }
}

fn write_section_tables(dir: &Path, genes: &[String], section: &Section) -> Result<()> {
    let mut spots = String::from("spot_id\tx_px\ty_px\tlabel\n");
    let mut counts = format!("spot_id\t{}\n", genes.join("\t"));
    for spot in &section.spots {
        spots.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            spot.spot_id,
            spot.x_px,
            spot.y_px,
            spot.label.as_deref().unwrap_or("")
        ));
        counts.push_str(&spot.spot_id);
        for c in &spot.counts {
            counts.push('\t');
            counts.push_str(&c.to_string());
        }
        counts.push('\n');
    }
    let p = dir.join(SPOTS_FILE);
    fs::write(&p, spots).map_err(|e| Error::io(&p, e))?;
    let p = dir.join(COUNTS_FILE);
    fs::write(&p, counts).map_err(|e| Error::io(&p, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Data lines of a TSV after checking its header; yields `(line_number, fields)`.
fn tsv_rows<'a>(path: &'a Path, text: &'a str, header: &[&str]) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| Error::parse(path, 1, "empty file, expected a header"))?;
    let got: Vec<&str> = first.split('\t').collect();
    if got != header {
        return Err(Error::parse(path, 1, format!("header {:?}, expected {:?}", got, header)));
    }
    Ok(lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| (i + 2, l.split('\t').collect())))
}

fn parse_coord(path: &Path, line: usize, field: &str, name: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(path, line, format!("{name} `{field}` is not a number")))?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::parse(path, line, format!("{name} {v} must be finite and nonnegative")));
    }
    Ok(v)
}

fn load_section(root: &Path, pid: &str, sid: &str, genes: &[String]) -> Result<Section> {
    let dir = root.join(pid).join(sid);
    let image_path = dir.join(IMAGE_FILE);
    if !image_path.is_file() {
        return Err(Error::io(&image_path, std::io::Error::new(std::io::ErrorKind::NotFound, "section image not found")));
    }

    let spots_path = dir.join(SPOTS_FILE);
    let text = read_text(&spots_path)?;
    let mut spots = Vec::new();
    let mut index = HashMap::new();
    for (line, f) in tsv_rows(&spots_path, &text, &["spot_id", "x_px", "y_px", "label"])? {
        if f.len() != 4 {
            return Err(Error::parse(&spots_path, line, format!("expected 4 fields, found {}", f.len())));
        }
        if f[0].is_empty() {
            return Err(Error::parse(&spots_path, line, "empty spot_id"));
        }
        if index.insert(f[0].to_string(), spots.len()).is_some() {
            return Err(Error::parse(&spots_path, line, format!("duplicate spot_id `{}`", f[0])));
        }
        spots.push(Spot {
            spot_id: f[0].to_string(),
            x_px: parse_coord(&spots_path, line, f[1], "x_px")?,
            y_px: parse_coord(&spots_path, line, f[2], "y_px")?,
            counts: Vec::new(),
            label: (!f[3].is_empty()).then(|| f[3].to_string()),
        });
    }

    let counts_path = dir.join(COUNTS_FILE);
    let text = read_text(&counts_path)?;
    let mut header = vec!["spot_id"];
    header.extend(genes.iter().map(String::as_str));
    let mut seen = HashSet::new();
    for (line, f) in tsv_rows(&counts_path, &text, &header)? {
        if f.len() != header.len() {
            return Err(Error::parse(
                &counts_path,
                line,
                format!("{} count values for {} genes", f.len().saturating_sub(1), genes.len()),
            ));
        }
        let &i = index
            .get(f[0])
            .ok_or_else(|| Error::parse(&counts_path, line, format!("spot_id `{}` not listed in {SPOTS_FILE}", f[0])))?;
        if !seen.insert(i) {
            return Err(Error::parse(&counts_path, line, format!("duplicate spot_id `{}`", f[0])));
        }
        spots[i].counts = f[1..]
            .iter()
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| Error::parse(&counts_path, line, format!("count `{v}` is not a nonnegative integer")))
            })
            .collect::<Result<_>>()?;
    }
    if let Some(s) = spots.iter().find(|s| s.counts.is_empty() && !genes.is_empty()) {
        return Err(Error::Validation(format!("{}: spot `{}` has no counts row", counts_path.display(), s.spot_id)));
    }
    Ok(Section { section_id: sid.to_string(), image_path, spots })
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<StDataset> {
    let root = root.as_ref();
    let mpath = root.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&read_text(&mpath)?).map_err(|e| Error::json(&mpath, e))?;
    if manifest.genes.is_empty() {
        return Err(Error::Validation(format!("{}: gene list is empty", mpath.display())));
    }
    let mut seen = HashSet::new();
    if let Some(g) = manifest.genes.iter().find(|g| !seen.insert(g.as_str())) {
        return Err(Error::Validation(format!("{}: duplicate gene `{g}`", mpath.display())));
    }
    let mut patients = BTreeMap::new();
    for (pid, sids) in &manifest.patients {
        let mut seen = HashSet::new();
        if let Some(s) = sids.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::Validation(format!("patient `{pid}` lists section `{s}` twice")));
        }
        let sections = sids
            .iter()
            .map(|sid| load_section(root, pid, sid, &manifest.genes))
            .collect::<Result<Vec<_>>>()?;
        patients.insert(pid.clone(), sections);
    }
    Ok(StDataset { root: root.to_path_buf(), genes: manifest.genes, patients })
}

/// Spots × genes matrix of real values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    pub spot_ids: Vec<String>,
    pub gene_names: Vec<String>,
    values: Vec<f64>,
}

impl ExpressionMatrix {
    pub fn new(spot_ids: Vec<String>, gene_names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != spot_ids.len() * gene_names.len() {
            return Err(Error::Shape(format!(
                "{} spots x {} genes needs {} values, got {}",
                spot_ids.len(),
                gene_names.len(),
                spot_ids.len() * gene_names.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("expression values must be finite".into()));
        }
        Ok(ExpressionMatrix { spot_ids, gene_names, values })
    }

    pub fn n_spots(&self) -> usize {
        self.spot_ids.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let g = self.n_genes();
        &self.values[i * g..(i + 1) * g]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_spots()).map(|i| self.values[i * self.n_genes() + j]).collect()
    }

    pub fn row_index(&self) -> HashMap<&str, usize> {
        self.spot_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }

    /// Rows in the given order; every id must be present.
    pub fn select_rows(&self, spot_ids: &[String]) -> Result<ExpressionMatrix> {
        let index = self.row_index();
        let mut values = Vec::with_capacity(spot_ids.len() * self.n_genes());
        let mut missing = Vec::new();
        for id in spot_ids {
            match index.get(id.as_str()) {
                Some(&i) => values.extend_from_slice(self.row(i)),
                None => missing.push(id.as_str()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Validation(format!("spots missing from expression matrix: {}", missing.join(", "))));
        }
        ExpressionMatrix::new(spot_ids.to_vec(), self.gene_names.clone(), values)
    }

    /// Columns for the named genes, in the given order.
    pub fn select_genes(&self, genes: &[String]) -> Result<ExpressionMatrix> {
        let index: HashMap<&str, usize> = self.gene_names.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
        let cols = genes
            .iter()
            .map(|g| index.get(g.as_str()).copied().ok_or_else(|| Error::Validation(format!("unknown gene `{g}`"))))
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::with_capacity(self.n_spots() * cols.len());
        for i in 0..self.n_spots() {
            let row = self.row(i);
            values.extend(cols.iter().map(|&j| row[j]));
        }
        ExpressionMatrix::new(self.spot_ids.clone(), genes.to_vec(), values)
    }

    /// Header `spot_id\t<genes...>`, values with 17 significant digits so a
    /// read back is exact.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("spot_id\t{}\n", self.gene_names.join("\t"));
        for (i, id) in self.spot_ids.iter().enumerate() {
            out.push_str(id);
            for v in self.row(i) {
                out.push('\t');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<ExpressionMatrix> {
        let path = path.as_ref();
        let text = read_text(path)?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| Error::parse(path, 1, "empty file"))?.split('\t').collect();
        if header.first() != Some(&"spot_id") || header.len() < 2 {
            return Err(Error::parse(path, 1, "header must be `spot_id` followed by gene names"));
        }
        let genes: Vec<String> = header[1..].iter().map(|s| s.to_string()).collect();
        let mut spot_ids = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != header.len() {
                return Err(Error::parse(path, i + 2, format!("{} values for {} genes", f.len() - 1, genes.len())));
            }
            spot_ids.push(f[0].to_string());
            for v in &f[1..] {
                let x: f64 = v.parse().map_err(|_| Error::parse(path, i + 2, format!("`{v}` is not a number")))?;
                if !x.is_finite() {
                    return Err(Error::parse(path, i + 2, format!("non-finite value `{v}`")));
                }
                values.push(x);
            }
        }
        ExpressionMatrix::new(spot_ids, genes, values)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressionOptions {
    /// Scale each spot's counts to the median library size before the log
    /// transform.
    #[serde(default)]
    pub median_normalize: bool,
}

/// `log(1 + count)` for every spot whose key passes `keep`, all genes, in
/// dataset order. Rows are keyed by [`spot_key`].
pub fn expression_matrix(dataset: &StDataset, opts: ExpressionOptions, keep: impl Fn(&SpotRef) -> bool) -> Result<ExpressionMatrix> {
    let spots: Vec<SpotRef> = dataset.spots().filter(|s| keep(s)).collect();
    let scales: Vec<f64> = if opts.median_normalize {
        let totals: Vec<f64> = spots.iter().map(|s| s.spot.counts.iter().sum::<u64>() as f64).collect();
        let median = median(&totals);
        totals.iter().map(|&t| if t > 0.0 { median / t } else { 1.0 }).collect()
    } else {
        vec![1.0; spots.len()]
    };
    let mut values = Vec::with_capacity(spots.len() * dataset.genes.len());
    for (s, scale) in spots.iter().zip(&scales) {
        values.extend(s.spot.counts.iter().map(|&c| (c as f64 * scale).ln_1p()));
    }
    ExpressionMatrix::new(spots.iter().map(SpotRef::key).collect(), dataset.genes.clone(), values)
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Genes chosen from a training split, applied verbatim to held-out data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneSelection {
    /// Selected genes by descending mean; ties keep dataset order.
    pub genes: Vec<String>,
    pub means: Vec<f64>,
    pub n_training_spots: usize,
}

impl GeneSelection {
    pub fn apply(&self, matrix: &ExpressionMatrix) -> Result<ExpressionMatrix> {
        matrix.select_genes(&self.genes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_str(&read_text(path)?).map_err(|e| Error::json(path, e))
    }
}

pub fn select_top_genes(training: &ExpressionMatrix, n_genes: usize) -> Result<GeneSelection> {
    if n_genes == 0 {
        return Err(Error::InvalidArgument("n_genes must be >= 1".into()));
    }
    if n_genes > training.n_genes() {
        return Err(Error::InvalidArgument(format!(
            "n_genes = {n_genes} exceeds the {} available genes",
            training.n_genes()
        )));
    }
    if training.n_spots() == 0 {
        return Err(Error::InvalidArgument("gene selection needs at least one spot".into()));
    }
    let n = training.n_spots() as f64;
    let means: Vec<f64> = (0..training.n_genes()).map(|j| training.column(j).iter().sum::<f64>() / n).collect();
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    order.truncate(n_genes);
    Ok(GeneSelection {
        genes: order.iter().map(|&j| training.gene_names[j].clone()).collect(),
        means: order.iter().map(|&j| means[j]).collect(),
        n_training_spots: training.n_spots(),
    })
}

/// Transformed expression of all spots restricted to the top `n_genes`.
pub fn preprocess_expression(dataset: &StDataset, n_genes: usize, opts: ExpressionOptions) -> Result<(ExpressionMatrix, GeneSelection)> {
    let all = expression_matrix(dataset, opts, |_| true)?;
    let selection = select_top_genes(&all, n_genes)?;
    Ok((selection.apply(&all)?, selection))
}

/// Spot-centered patches of one section keyed by [`spot_key`]; spots whose
/// window leaves the image are returned separately.
pub fn section_patches(patient_id: &str, section: &Section, image: &RgbImage, size: usize) -> Result<(Vec<Tile>, Vec<String>)> {
    let source = format!("{patient_id}/{}", section.section_id);
    let mut tiles = Vec::new();
    let mut skipped = Vec::new();
    for spot in &section.spots {
        let key = spot_key(patient_id, &section.section_id, &spot.spot_id);
        match extract_spot_patch(image, spot.center(), size, &source) {
            Ok(mut t) => {
                t.spot_id = Some(key);
                tiles.push(t);
            }
            Err(Error::OutOfBounds { .. }) => skipped.push(key),
            Err(e) => return Err(e),
        }
    }
    Ok((tiles, skipped))
}

/// Spot-centered patches for a whole dataset, stacked as `[N, 3, S, S]`.
#[derive(Debug, Clone)]
pub struct PatchBank {
    /// Spot keys in dataset order.
    pub ids: Vec<String>,
    pub tiles: Tensor,
    /// Spots whose window fell outside their image.
    pub skipped: Vec<String>,
}

impl PatchBank {
    /// Rows for `ids`, in the given order.
    pub fn select(&self, ids: &[String]) -> Result<Tensor> {
        let index: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut rows = Vec::with_capacity(ids.len());
        let mut missing = Vec::new();
        for id in ids {
            match index.get(id.as_str()) {
                Some(&i) => rows.push(i),
                None => missing.push(id.as_str()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Validation(format!("no patch for spots: {}", missing.join(", "))));
        }
        self.tiles.gather_batch(&rows)
    }
}

/// Loads every section image, applies `transform` (e.g. stain
/// standardization), and cuts `size`×`size` patches around each spot.
/// Sections are processed in parallel; output order is dataset order.
pub fn collect_spot_patches(
    dataset: &StDataset,
    size: usize,
    transform: impl Fn(RgbImage) -> Result<RgbImage> + Sync,
) -> Result<PatchBank> {
    let sections: Vec<(&str, &Section)> = dataset
        .patients
        .iter()
        .flat_map(|(pid, secs)| secs.iter().map(move |s| (pid.as_str(), s)))
        .collect();
    let per_section = sections
        .par_iter()
        .map(|(pid, section)| {
            let image = transform(section.load_image()?)?;
            section_patches(pid, section, &image, size)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ids = Vec::new();
    let mut tiles = Vec::new();
    let mut skipped = Vec::new();
    for (t, s) in per_section {
        ids.extend(t.iter().map(|t| t.spot_id.clone().expect("patches carry spot keys")));
        tiles.extend(t);
        skipped.extend(s);
    }
    if tiles.is_empty() {
        return Err(Error::Validation(format!("no spot patch of size {size} fits inside its image")));
    }
    Ok(PatchBank { ids, tiles: tiles_to_tensor(&tiles)?, skipped })
}

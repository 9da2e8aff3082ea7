//! Correlation metrics, k-means characterization, contingency scoring, and
//! report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ExpressionMatrix;
use crate::error::{Error, Result};

pub const DISC_RADIUS: f64 = 8.0;

/// Pearson correlation; NaN when either input has zero variance.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("pearson_r on lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(format!("pearson_r needs n >= 2, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(f64::NAN);
    }
    // sqrt of the product is exact when syy == sxx, so r(x, ±x) is exactly ±1.
    let prod = sxx * syy;
    let denom = if prod.is_normal() { prod.sqrt() } else { sxx.sqrt() * syy.sqrt() };
    Ok((sxy / denom).clamp(-1.0, 1.0))
}

fn check_aligned(pred: &ExpressionMatrix, truth: &ExpressionMatrix) -> Result<()> {
    if pred.spot_ids != truth.spot_ids {
        return Err(Error::Validation("prediction and truth spot ids differ".into()));
    }
    if pred.gene_names != truth.gene_names {
        return Err(Error::Validation("prediction and truth gene lists differ".into()));
    }
    Ok(())
}

/// Mean of the defined values and the number of NaNs skipped.
pub fn nan_mean(values: impl IntoIterator<Item = f64>) -> (f64, usize) {
    let (mut sum, mut n, mut undefined) = (0.0, 0usize, 0usize);
    for v in values {
        if v.is_nan() {
            undefined += 1;
        } else {
            sum += v;
            n += 1;
        }
    }
    (if n == 0 { f64::NAN } else { sum / n as f64 }, undefined)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpotCorrelation {
    /// `(spot_id, r)` in matrix order; NaN marks zero variance.
    pub per_spot: Vec<(String, f64)>,
    pub mean_r: f64,
    pub n_undefined: usize,
}

/// r across genes for each spot, then averaged over spots with defined r.
pub fn mean_spot_correlation(pred: &ExpressionMatrix, truth: &ExpressionMatrix) -> Result<SpotCorrelation> {
    check_aligned(pred, truth)?;
    let per_spot = (0..pred.n_spots())
        .map(|i| Ok((pred.spot_ids[i].clone(), pearson_r(pred.row(i), truth.row(i))?)))
        .collect::<Result<Vec<_>>>()?;
    let (mean_r, n_undefined) = nan_mean(per_spot.iter().map(|p| p.1));
    Ok(SpotCorrelation { per_spot, mean_r, n_undefined })
}

/// r across spots for each gene.
pub fn per_gene_correlation(pred: &ExpressionMatrix, truth: &ExpressionMatrix) -> Result<Vec<(String, f64)>> {
    check_aligned(pred, truth)?;
    (0..pred.n_genes())
        .map(|j| Ok((pred.gene_names[j].clone(), pearson_r(&pred.column(j), &truth.column(j))?)))
        .collect()
}

/// r over all spot-gene pairs at once.
pub fn pooled_correlation(pred: &ExpressionMatrix, truth: &ExpressionMatrix) -> Result<f64> {
    check_aligned(pred, truth)?;
    pearson_r(pred.values(), truth.values())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    /// `k × d`, row-major.
    pub centroids: Vec<f64>,
    pub iterations: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, lowest index on ties.
fn nearest(point: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(point, centroid);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

/// Lloyd's algorithm on `n × d` row-major points with k-means++ seeding.
pub fn kmeans(points: &[f64], d: usize, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    if d == 0 || points.len() % d != 0 {
        return Err(Error::Shape(format!("{} values do not form rows of width {d}", points.len())));
    }
    let n = points.len() / d;
    if k < 1 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in 1..={n}")));
    }
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(k * d);
    centroids.extend_from_slice(row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..d])).collect();
    while centroids.len() < k * d {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(row(i), &centroids[start..]));
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut changed = false;
        let mut wcss = 0.0;
        for (i, label) in labels.iter_mut().enumerate() {
            let (c, dist) = nearest(row(i), &centroids, d);
            wcss += dist;
            if *label != c {
                *label = c;
                changed = true;
            }
        }
        objective.push(wcss);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(KMeansResult { labels, centroids, iterations, objective })
}

/// Standardizes each column to zero mean and unit variance; constant columns
/// become zero.
pub fn zscore_columns(points: &[f64], d: usize) -> Vec<f64> {
    let n = points.len() / d;
    let mut out = points.to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| points[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (points[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for i in 0..n {
            out[i * d + j] = if sd > 0.0 { (points[i * d + j] - mean) / sd } else { 0.0 };
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contingency {
    /// Class names in sorted order (table columns).
    pub classes: Vec<String>,
    /// `table[cluster][class]` counts.
    pub table: Vec<Vec<usize>>,
    /// Class assigned to each cluster by the best matching.
    pub mapping: Vec<Option<usize>>,
    pub matched: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Best one-to-one assignment of clusters to classes by exhaustive search.
fn best_assignment(table: &[Vec<usize>], n_classes: usize) -> (Vec<Option<usize>>, usize) {
    fn go(c: usize, table: &[Vec<usize>], used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, best: &mut (Vec<Option<usize>>, usize), score: usize) {
        if c == table.len() {
            if score > best.1 || best.0.is_empty() {
                *best = (cur.clone(), score);
            }
            return;
        }
        for class in 0..used.len() {
            if !used[class] {
                used[class] = true;
                cur.push(Some(class));
                go(c + 1, table, used, cur, best, score + table[c][class]);
                cur.pop();
                used[class] = false;
            }
        }
        // Leave this cluster unmatched when clusters outnumber classes.
        let free = used.iter().filter(|u| !**u).count();
        if table.len() - c > free {
            cur.push(None);
            go(c + 1, table, used, cur, best, score);
            cur.pop();
        }
    }
    let mut best = (Vec::new(), 0);
    go(0, table, &mut vec![false; n_classes], &mut Vec::new(), &mut best, 0);
    best
}

/// Scores cluster labels against ground-truth labels; spots without a label
/// are ignored.
pub fn contingency(pred_labels: &[usize], true_labels: &[Option<String>]) -> Result<Contingency> {
    if pred_labels.len() != true_labels.len() {
        return Err(Error::Shape(format!(
            "{} predicted labels for {} ground-truth labels",
            pred_labels.len(),
            true_labels.len()
        )));
    }
    let pairs: Vec<(usize, &str)> = pred_labels
        .iter()
        .zip(true_labels)
        .filter_map(|(&p, t)| t.as_deref().map(|t| (p, t)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no spots carry a ground-truth label".into()));
    }
    let mut classes: Vec<String> = pairs.iter().map(|p| p.1.to_string()).collect();
    classes.sort();
    classes.dedup();
    if classes.len() > 8 {
        return Err(Error::InvalidArgument(format!("{} classes; contingency supports at most 8", classes.len())));
    }
    let k = pred_labels.iter().max().map_or(0, |m| m + 1).max(2);
    if k > 8 {
        return Err(Error::InvalidArgument(format!("{k} clusters; contingency supports at most 8")));
    }
    let mut table = vec![vec![0usize; classes.len()]; k];
    for (p, t) in &pairs {
        let j = classes.binary_search_by(|c| c.as_str().cmp(t)).expect("class present");
        table[*p][j] += 1;
    }
    let (mapping, matched) = best_assignment(&table, classes.len());
    let total = pairs.len();
    Ok(Contingency { classes, table, mapping, matched, total, accuracy: matched as f64 / total as f64 })
}

/// Formats with 6 significant digits and no trailing zeros.
pub fn fmt_sig6(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "NaN".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

/// Mean r over one grouping level (sections or patients).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMean {
    pub mean_r: f64,
    pub n_spots: usize,
    pub n_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean_r: f64,
    /// Spots scored, including those with undefined r.
    pub n_spots: usize,
    pub n_undefined_spots: usize,
    pub pooled_r: f64,
    /// Keyed by `pid/sid`.
    pub per_section: BTreeMap<String, GroupMean>,
    pub per_patient: BTreeMap<String, GroupMean>,
    /// Means of the section and patient means.
    pub section_mean_r: f64,
    pub patient_mean_r: f64,
    #[serde(skip)]
    pub per_spot_r: Vec<(String, f64)>,
    #[serde(skip)]
    pub per_gene_r: Vec<(String, f64)>,
    pub mean_gene_r: f64,
    pub n_undefined_genes: usize,
    pub contingency: Option<Contingency>,
    /// Emitted file names, relative to the report directory.
    pub artifacts: Vec<PathBuf>,
}

fn group_means(per_spot: &[(String, f64)], levels: usize) -> BTreeMap<String, GroupMean> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (key, r) in per_spot {
        let group = key.splitn(levels + 1, '/').take(levels).collect::<Vec<_>>().join("/");
        groups.entry(group).or_default().push(*r);
    }
    groups
        .into_iter()
        .map(|(g, rs)| {
            let (mean_r, n_undefined) = nan_mean(rs.iter().copied());
            (g, GroupMean { mean_r, n_spots: rs.len(), n_undefined })
        })
        .collect()
}

/// Spot-level, section-level, patient-level, pooled, and per-gene scores of
/// predictions keyed by `pid/sid/spot_id`.
pub fn evaluate(pred: &ExpressionMatrix, truth: &ExpressionMatrix) -> Result<EvalReport> {
    let spots = mean_spot_correlation(pred, truth)?;
    let per_gene_r = if pred.n_spots() >= 2 { per_gene_correlation(pred, truth)? } else { Vec::new() };
    let (mean_gene_r, n_undefined_genes) = nan_mean(per_gene_r.iter().map(|g| g.1));
    let per_section = group_means(&spots.per_spot, 2);
    let per_patient = group_means(&spots.per_spot, 1);
    Ok(EvalReport {
        mean_r: spots.mean_r,
        n_spots: spots.per_spot.len(),
        n_undefined_spots: spots.n_undefined,
        pooled_r: pooled_correlation(pred, truth)?,
        section_mean_r: nan_mean(per_section.values().map(|g| g.mean_r)).0,
        patient_mean_r: nan_mean(per_patient.values().map(|g| g.mean_r)).0,
        per_section,
        per_patient,
        per_spot_r: spots.per_spot,
        per_gene_r,
        mean_gene_r,
        n_undefined_genes,
        contingency: None,
        artifacts: Vec::new(),
    })
}

fn write_file(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// 8-bit grayscale map with one disc per point; `value` maps linearly from
/// min→0 to max→255, NaN points are not drawn.
pub fn render_heatmap(points: &[(f64, f64, f64)], radius: f64) -> (u32, u32, Vec<u8>) {
    let max_x = points.iter().map(|p| p.0).fold(0.0, f64::max);
    let max_y = points.iter().map(|p| p.1).fold(0.0, f64::max);
    let (w, h) = ((max_x + radius).ceil() as u32 + 1, (max_y + radius).ceil() as u32 + 1);
    let defined: Vec<f64> = points.iter().map(|p| p.2).filter(|v| !v.is_nan()).collect();
    let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !defined.is_empty() && lo == hi {
        log::warn!("heatmap values are all equal ({lo}); drawing a flat map");
    }
    let mut buf = vec![0u8; (w * h) as usize];
    for &(x, y, v) in points {
        if v.is_nan() {
            continue;
        }
        let level = if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 };
        let (r0, r1) = ((y - radius).floor().max(0.0) as u32, ((y + radius).ceil() as u32).min(h - 1));
        let (c0, c1) = ((x - radius).floor().max(0.0) as u32, ((x + radius).ceil() as u32).min(w - 1));
        for r in r0..=r1 {
            for c in c0..=c1 {
                let (dy, dx) = (f64::from(r) - y, f64::from(c) - x);
                if dx * dx + dy * dy <= radius * radius {
                    buf[(r * w + c) as usize] = level;
                }
            }
        }
    }
    (w, h, buf)
}

pub fn write_heatmap(path: &Path, points: &[(f64, f64, f64)]) -> Result<()> {
    let (w, h, buf) = render_heatmap(points, DISC_RADIUS);
    let img = image::GrayImage::from_raw(w, h, buf).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::image(path, e))
}

/// Cluster-by-class counts with the matched class per cluster, followed by a
/// summary line.
pub fn contingency_csv(c: &Contingency) -> String {
    let mut csv = format!("cluster,{},mapped_class\n", c.classes.join(","));
    for (k, row) in c.table.iter().enumerate() {
        let counts: Vec<String> = row.iter().map(usize::to_string).collect();
        let mapped = c.mapping[k].map_or("", |j| c.classes[j].as_str());
        csv.push_str(&format!("{k},{},{mapped}\n", counts.join(",")));
    }
    csv.push_str(&format!("matched,{},total,{},accuracy,{}\n", c.matched, c.total, fmt_sig6(c.accuracy)));
    csv
}

/// Writes `per_spot_r.csv`, `per_gene_r.csv`, `contingency.csv` (when
/// present), one `heatmap_r_<pid>_<sid>.png` per section, and
/// `summary.json`. `coords` maps spot keys to `(x_px, y_px)`.
pub fn emit_report(report: &mut EvalReport, coords: &BTreeMap<String, (f64, f64)>, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut paths = Vec::new();

    let mut csv = String::from("spot_id,x_px,y_px,r\n");
    let mut sections: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for (key, r) in &report.per_spot_r {
        let &(x, y) = coords
            .get(key)
            .ok_or_else(|| Error::Validation(format!("no coordinates for spot `{key}`")))?;
        csv.push_str(&format!("{key},{},{},{}\n", fmt_sig6(x), fmt_sig6(y), fmt_sig6(*r)));
        let section = key.rsplit_once('/').map_or(key.as_str(), |s| s.0).replace('/', "_");
        sections.entry(section).or_default().push((x, y, *r));
    }
    let p = out.join("per_spot_r.csv");
    write_file(&p, csv)?;
    paths.push(p);

    let mut csv = String::from("gene,r\n");
    for (g, r) in &report.per_gene_r {
        csv.push_str(&format!("{g},{}\n", fmt_sig6(*r)));
    }
    let p = out.join("per_gene_r.csv");
    write_file(&p, csv)?;
    paths.push(p);

    if let Some(c) = &report.contingency {
        let p = out.join("contingency.csv");
        write_file(&p, contingency_csv(c))?;
        paths.push(p);
    }

    for (section, points) in &sections {
        let p = out.join(format!("heatmap_r_{section}.png"));
        write_heatmap(&p, points)?;
        paths.push(p);
    }

    let p = out.join("summary.json");
    // File names only, so reports written to different directories match.
    report.artifacts = paths.iter().chain([&p]).filter_map(|q| q.file_name().map(PathBuf::from)).collect();
    let mut text = serde_json::to_string_pretty(&*report).map_err(|e| Error::json(&p, e))?;
    text.push('\n');
    write_file(&p, text)?;
    paths.push(p);
    Ok(paths)
}

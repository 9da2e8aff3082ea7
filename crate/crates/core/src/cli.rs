//! Command-line front end: argument parsing, the JSON run configuration, and
//! one function per subcommand.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    collect_spot_patches, expression_matrix, load_dataset, select_top_genes, synth_generate, ExpressionMatrix, ExpressionOptions,
    GeneSelection, StDataset, SynthConfig, DEFAULT_N_GENES,
};
use crate::error::{Error, Result};
use crate::evaluation::{contingency, contingency_csv, emit_report, evaluate, kmeans, zscore_columns};
use crate::imageprep::{remove_color_cast, standardize, tile_image, tiles_to_tensor, RgbImage, StainReference, Tile, DEFAULT_TILE_SIZE};
use crate::models::{build_autoencoder, build_histospace, load_checkpoint, save_checkpoint, AutoencoderVariant, HeadConfig};
use crate::training::{loocv, train_autoencoder, train_histospace, LoocvConfig, SpotSet, TrainConfig};

pub const THREADS_ENV: &str = "HISTOSPACE_THREADS";
pub const STAIN_REFERENCE_FILE: &str = "stain_reference.json";
pub const TILES_DIR: &str = "tiles";
pub const TILES_INDEX: &str = "tiles.tsv";
pub const GENE_SELECTION_FILE: &str = "gene_selection.json";
pub const SPLIT_FILE: &str = "split.json";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    /// Edge length of training tiles and spot patches.
    pub tile_size: usize,
    /// Stain reference statistics; defaults to the first section after
    /// color-cast removal.
    pub reference: Option<PathBuf>,
    /// Drop grid tiles brighter than this mean value (background).
    pub max_brightness: Option<f64>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions { tile_size: DEFAULT_TILE_SIZE, reference: None, max_brightness: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderOptions {
    pub variant: AutoencoderVariant,
    /// Seeded cap on the number of training tiles.
    pub max_tiles: Option<usize>,
    pub train: TrainConfig,
}

impl Default for AutoencoderOptions {
    fn default() -> Self {
        AutoencoderOptions { variant: AutoencoderVariant::Ae3, max_tiles: None, train: TrainConfig::autoencoder() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterOptions {
    pub k: usize,
    pub max_iter: usize,
    /// Standardize each gene before clustering.
    pub zscore: bool,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions { k: 2, max_iter: 100, zscore: false }
    }
}

/// Contents of `--config`. Every key is optional; the run seed replaces the
/// seeds of all nested sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub synth: SynthConfig,
    pub preprocess: PreprocessOptions,
    pub n_genes: usize,
    pub expression: ExpressionOptions,
    pub autoencoder: AutoencoderOptions,
    pub head: HeadConfig,
    pub head_train: TrainConfig,
    pub cluster: ClusterOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: None,
            synth: SynthConfig::default(),
            preprocess: PreprocessOptions::default(),
            n_genes: DEFAULT_N_GENES,
            expression: ExpressionOptions::default(),
            autoencoder: AutoencoderOptions::default(),
            head: HeadConfig::default(),
            head_train: TrainConfig::head(),
            cluster: ClusterOptions::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.preprocess.reference].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Propagates the run seed and checks option ranges.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.synth.seed = self.seed;
        self.autoencoder.train.seed = self.seed;
        self.head_train.seed = self.seed;
        self.autoencoder.train.validate()?;
        self.head_train.validate()?;
        if self.preprocess.tile_size == 0 || self.preprocess.tile_size % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "tile_size {} must be a positive multiple of 8",
                self.preprocess.tile_size
            )));
        }
        if self.n_genes == 0 {
            return Err(Error::InvalidArgument("n_genes must be >= 1".into()));
        }
        if self.cluster.k == 0 {
            return Err(Error::InvalidArgument("cluster.k must be >= 1".into()));
        }
        Ok(self)
    }
}

#[derive(Debug, Parser)]
#[command(name = "histospace", version, about = "Predict spatial gene expression from histology tiles")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Remove color casts, stain-normalize, and tile section images.
    Preprocess(PreprocessArgs),
    /// Train an autoencoder on preprocessed tiles.
    TrainAe(TrainAeArgs),
    /// Train the expression head on top of a trained encoder.
    Train(TrainArgs),
    /// Predict expression for every spot of a dataset.
    Predict(PredictArgs),
    /// Score predictions against measured expression.
    Evaluate(EvaluateArgs),
    /// Cluster predicted expression and compare with region labels.
    Cluster(ClusterArgs),
    /// Leave-one-patient-out cross-validation.
    Loocv(LoocvArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_patients: Option<usize>,
    #[arg(long)]
    pub sections_per_patient: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub n_spots: Option<usize>,
    #[arg(long)]
    pub n_genes: Option<usize>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Raw dataset root (defaults to the configured dataset).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output root: a processed copy of the dataset plus `tiles/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tile_size: Option<usize>,
    /// Stain reference JSON to normalize against.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainAeArgs {
    /// Preprocessed dataset root containing `tiles/`.
    #[arg(long)]
    pub tiles: PathBuf,
    #[arg(long, value_parser = ["ae1", "ae2", "ae3"])]
    pub variant: Option<String>,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_tiles: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub ae_checkpoint: PathBuf,
    /// Preprocessed dataset root.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub n_genes: Option<usize>,
    /// Let head training update the encoder too.
    #[arg(long)]
    pub unfreeze_encoder: bool,
    /// Use the larger head (extra conv block, doubled hidden width).
    #[arg(long)]
    pub extended_head: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Preprocessed dataset root.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output TSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Score only the validation spots of this `split.json`.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LoocvArgs {
    /// Preprocessed dataset root (with `tiles/` when no checkpoint is given).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Shared autoencoder; trained from `tiles/` when omitted.
    #[arg(long)]
    pub ae_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub n_genes: Option<usize>,
}

/// Parses `argv`, runs the subcommand, and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{}", e.render());
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Caps the worker pool from `HISTOSPACE_THREADS` (unset or 0 = automatic).
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV}=`{v}` is not a thread count")))?;
    if n > 0 {
        // A second call in the same process keeps the existing pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let config = config.resolve(cli.seed)?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&config, a),
        Command::Preprocess(a) => cmd_preprocess(&config, a),
        Command::TrainAe(a) => cmd_train_ae(&config, a),
        Command::Train(a) => cmd_train(&config, a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(&config, a),
        Command::Cluster(a) => cmd_cluster(&config, a),
        Command::Loocv(a) => cmd_loocv(&config, a),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dataset_path(flag: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| config.dataset.clone())
        .ok_or_else(|| Error::InvalidArgument("no dataset given (use --dataset or the `dataset` config key)".into()))
}

fn cmd_synth(config: &RunConfig, a: SynthArgs) -> Result<()> {
    let mut s = config.synth.clone();
    s.n_patients = a.n_patients.unwrap_or(s.n_patients);
    s.sections_per_patient = a.sections_per_patient.unwrap_or(s.sections_per_patient);
    s.image_size = a.image_size.unwrap_or(s.image_size);
    s.n_spots = a.n_spots.unwrap_or(s.n_spots);
    s.n_genes = a.n_genes.unwrap_or(s.n_genes);
    s.noise_sd = a.noise_sd.unwrap_or(s.noise_sd);
    let out = synth_generate(&s, &a.out)?;
    log::info!("wrote {} spots to {}", out.dataset.n_spots(), a.out.display());
    Ok(())
}

fn section_keys(dataset: &StDataset) -> Vec<(String, &crate::data::Section)> {
    dataset
        .patients
        .iter()
        .flat_map(|(pid, secs)| secs.iter().map(move |s| (format!("{pid}/{}", s.section_id), s)))
        .collect()
}

fn cmd_preprocess(config: &RunConfig, a: PreprocessArgs) -> Result<()> {
    let root = dataset_path(a.dataset, config)?;
    let dataset = load_dataset(&root)?;
    let tile_size = a.tile_size.unwrap_or(config.preprocess.tile_size);
    if tile_size == 0 {
        return Err(Error::InvalidArgument("tile_size must be >= 1".into()));
    }
    let sections = section_keys(&dataset);
    let reference = match a.reference.or_else(|| config.preprocess.reference.clone()) {
        Some(p) => StainReference::load(p)?,
        None => {
            let (key, first) = sections.first().ok_or_else(|| Error::Validation("dataset has no sections".into()))?;
            log::info!("stain reference: {key}");
            StainReference::from_image(&remove_color_cast(&first.load_image()?))
        }
    };
    let processed: Vec<(String, RgbImage)> = sections
        .par_iter()
        .map(|(key, s)| Ok((key.clone(), standardize(&s.load_image()?, &reference))))
        .collect::<Result<_>>()?;

    create_dir(&a.out)?;
    let images: HashMap<String, RgbImage> = processed.iter().cloned().collect();
    dataset.write(&a.out, &images)?;
    reference.save(a.out.join(STAIN_REFERENCE_FILE))?;

    let tile_dir = a.out.join(TILES_DIR);
    create_dir(&tile_dir)?;
    let mut index = String::from("file\tsource\trow\tcol\n");
    let mut n_tiles = 0;
    for (key, img) in &processed {
        let tiles = tile_image(img, tile_size, key)?;
        let kept: Vec<&Tile> = tiles
            .iter()
            .filter(|t| config.preprocess.max_brightness.map_or(true, |m| t.mean_brightness() <= m))
            .collect();
        let written: Vec<Result<String>> = kept
            .par_iter()
            .map(|t| {
                let name = format!("{}_{}_{}.png", key.replace('/', "_"), t.origin.0, t.origin.1);
                t.image.save_png(tile_dir.join(&name))?;
                Ok(format!("{name}\t{key}\t{}\t{}\n", t.origin.0, t.origin.1))
            })
            .collect();
        for line in written {
            index.push_str(&line?);
            n_tiles += 1;
        }
    }
    let p = a.out.join(TILES_INDEX);
    fs::write(&p, index).map_err(|e| Error::io(&p, e))?;
    log::info!("processed {} sections, {n_tiles} tiles of {tile_size}px", processed.len());
    Ok(())
}

/// Reads the tile index under a preprocessed root and loads a seeded subset.
fn load_tiles(root: &Path, max_tiles: Option<usize>, seed: u64) -> Result<Vec<Tile>> {
    let p = root.join(TILES_INDEX);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::parse(&p, i + 1, format!("expected 4 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(&p, i + 1, format!("`{s}` is not a pixel offset")));
        rows.push((f[0].to_string(), f[1].to_string(), num(f[2])?, num(f[3])?));
    }
    if rows.is_empty() {
        return Err(Error::Validation(format!("{} lists no tiles", p.display())));
    }
    let mut keep: Vec<usize> = (0..rows.len()).collect();
    if let Some(max) = max_tiles.filter(|&m| m < rows.len()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        keep = rand::seq::index::sample(&mut rng, rows.len(), max).into_vec();
        keep.sort_unstable();
    }
    keep.par_iter()
        .map(|&i| {
            let (file, source, r, c) = &rows[i];
            Ok(Tile {
                image: RgbImage::load_png(root.join(TILES_DIR).join(file))?,
                source_image_id: source.clone(),
                origin: (*r, *c),
                spot_id: None,
            })
        })
        .collect()
}

fn cmd_train_ae(config: &RunConfig, a: TrainAeArgs) -> Result<()> {
    let opts = &config.autoencoder;
    let variant = match &a.variant {
        Some(v) => v.parse()?,
        None => opts.variant,
    };
    let train = TrainConfig { epochs: a.epochs.unwrap_or(opts.train.epochs), ..opts.train };
    let tiles = load_tiles(&a.tiles, a.max_tiles.or(opts.max_tiles), config.seed)?;
    let size = tiles[0].size();
    let tensor = tiles_to_tensor(&tiles)?;
    let mut model = build_autoencoder(variant, size, config.seed)?;
    log::info!("training {} on {} tiles of {size}px for {} epochs", variant.tag(), tiles.len(), train.epochs);
    let history = train_autoencoder(&mut model, &tensor, &train, train.validation_fraction)?;
    save_checkpoint(&model, &a.out)?;
    history.write_csv(a.out.join(HISTORY_FILE))
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRecord {
    train: Vec<String>,
    validation: Vec<String>,
}

/// Patches of a (preprocessed) dataset at the model's input size.
fn patches(dataset: &StDataset, size: usize) -> Result<crate::data::PatchBank> {
    let bank = collect_spot_patches(dataset, size, Ok)?;
    if !bank.skipped.is_empty() {
        log::warn!("{} spots lie too close to the image border and are skipped", bank.skipped.len());
    }
    Ok(bank)
}

fn cmd_train(config: &RunConfig, a: TrainArgs) -> Result<()> {
    let ae = load_checkpoint(&a.ae_checkpoint)?;
    let dataset = load_dataset(dataset_path(a.dataset, config)?)?;
    let n_genes = a.n_genes.unwrap_or(config.n_genes);
    let head = HeadConfig {
        unfreeze_encoder: a.unfreeze_encoder || config.head.unfreeze_encoder,
        extended: a.extended_head || config.head.extended,
        ..config.head
    };
    let train_cfg = TrainConfig { epochs: a.epochs.unwrap_or(config.head_train.epochs), ..config.head_train };

    let bank = patches(&dataset, ae.input_size)?;
    let all = expression_matrix(&dataset, config.expression, |_| true)?.select_rows(&bank.ids)?;
    let (train_idx, val_idx) = crate::training::split_indices(bank.ids.len(), train_cfg.validation_fraction.max(f64::MIN_POSITIVE), config.seed)?;
    let train_ids: Vec<String> = train_idx.iter().map(|&i| bank.ids[i].clone()).collect();
    let val_ids: Vec<String> = val_idx.iter().map(|&i| bank.ids[i].clone()).collect();
    // Genes are chosen from training spots only.
    let train_expr = all.select_rows(&train_ids)?;
    let selection = select_top_genes(&train_expr, n_genes)?;
    let train = SpotSet::new(&train_ids, bank.select(&train_ids)?, &selection.apply(&train_expr)?)?;
    let val = SpotSet::new(&val_ids, bank.select(&val_ids)?, &selection.apply(&all.select_rows(&val_ids)?)?)?;

    let mut model = build_histospace(&ae, n_genes, &head, config.seed)?;
    log::info!("training head on {} spots ({} validation), {n_genes} genes", train.len(), val.len());
    let history = train_histospace(&mut model, &train, &val, &train_cfg)?;
    save_checkpoint(&model, &a.out)?;
    history.write_csv(a.out.join(HISTORY_FILE))?;
    selection.save(a.out.join(GENE_SELECTION_FILE))?;
    write_json(&a.out.join(SPLIT_FILE), &SplitRecord { train: train_ids, validation: val_ids })
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let selection = GeneSelection::load(a.checkpoint.join(GENE_SELECTION_FILE))?;
    if model.n_outputs() != Some(selection.genes.len()) {
        return Err(Error::Validation(format!(
            "checkpoint predicts {:?} genes but its gene selection lists {}",
            model.n_outputs(),
            selection.genes.len()
        )));
    }
    let dataset = load_dataset(&a.dataset)?;
    let bank = patches(&dataset, model.input_size)?;
    let pred = model.predict_expression(&bank.tiles)?;
    let matrix = ExpressionMatrix::new(bank.ids.clone(), selection.genes, pred.into_data())?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    matrix.write_tsv(&a.out)
}

/// Measured expression for the spots and genes of `pred`.
fn truth_for(dataset: &StDataset, pred: &ExpressionMatrix, opts: ExpressionOptions) -> Result<ExpressionMatrix> {
    expression_matrix(dataset, opts, |_| true)?
        .select_rows(&pred.spot_ids)?
        .select_genes(&pred.gene_names)
}

fn labels_for(dataset: &StDataset, keys: &[String]) -> Vec<Option<String>> {
    let labels: HashMap<String, Option<String>> = dataset.spots().map(|s| (s.key(), s.spot.label.clone())).collect();
    keys.iter().map(|k| labels.get(k).cloned().flatten()).collect()
}

fn cluster_predictions(pred: &ExpressionMatrix, opts: ClusterOptions, seed: u64) -> Result<Vec<usize>> {
    let d = pred.n_genes();
    let points = if opts.zscore { zscore_columns(pred.values(), d) } else { pred.values().to_vec() };
    Ok(kmeans(&points, d, opts.k, seed, opts.max_iter)?.labels)
}

fn cmd_evaluate(config: &RunConfig, a: EvaluateArgs) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    let mut pred = ExpressionMatrix::read_tsv(&a.predictions)?;
    if let Some(p) = &a.split {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let split: SplitRecord = serde_json::from_str(&text).map_err(|e| Error::json(p, e))?;
        pred = pred.select_rows(&split.validation)?;
    }
    let truth = truth_for(&dataset, &pred, config.expression)?;
    let mut report = evaluate(&pred, &truth)?;
    let labels = labels_for(&dataset, &pred.spot_ids);
    if labels.iter().any(Option::is_some) && pred.n_spots() >= config.cluster.k {
        let clusters = cluster_predictions(&pred, config.cluster, config.seed)?;
        report.contingency = Some(contingency(&clusters, &labels)?);
    }
    let coords: BTreeMap<String, (f64, f64)> = dataset.spots().map(|s| (s.key(), (s.spot.x_px, s.spot.y_px))).collect();
    emit_report(&mut report, &coords, &a.out)?;
    log::info!("mean r {:.4} over {} spots", report.mean_r, report.n_spots);
    Ok(())
}

fn cmd_cluster(config: &RunConfig, a: ClusterArgs) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    let pred = ExpressionMatrix::read_tsv(&a.predictions)?;
    let opts = ClusterOptions { k: a.k.unwrap_or(config.cluster.k), ..config.cluster };
    let clusters = cluster_predictions(&pred, opts, config.seed)?;
    let labels = labels_for(&dataset, &pred.spot_ids);
    create_dir(&a.out)?;
    let mut tsv = String::from("spot_id\tcluster\tlabel\n");
    for ((id, c), l) in pred.spot_ids.iter().zip(&clusters).zip(&labels) {
        tsv.push_str(&format!("{id}\t{c}\t{}\n", l.as_deref().unwrap_or("")));
    }
    let p = a.out.join("clusters.tsv");
    fs::write(&p, tsv).map_err(|e| Error::io(&p, e))?;
    if labels.iter().any(Option::is_some) {
        let c = contingency(&clusters, &labels)?;
        log::info!("cluster concordance {}/{} ({:.4})", c.matched, c.total, c.accuracy);
        let p = a.out.join("contingency.csv");
        fs::write(&p, contingency_csv(&c)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn cmd_loocv(config: &RunConfig, a: LoocvArgs) -> Result<()> {
    let root = dataset_path(a.dataset, config)?;
    let dataset = load_dataset(&root)?;
    let ae = match &a.ae_checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let opts = &config.autoencoder;
            let tiles = load_tiles(&root, opts.max_tiles, config.seed)?;
            let mut model = build_autoencoder(opts.variant, tiles[0].size(), config.seed)?;
            train_autoencoder(&mut model, &tiles_to_tensor(&tiles)?, &opts.train, opts.train.validation_fraction)?;
            model
        }
    };
    let bank = patches(&dataset, ae.input_size)?;
    let lc = LoocvConfig {
        n_genes: a.n_genes.unwrap_or(config.n_genes),
        head: config.head,
        train: TrainConfig { epochs: a.epochs.unwrap_or(config.head_train.epochs), ..config.head_train },
        expression: config.expression,
    };
    let summary = loocv(&dataset, &bank, &ae, &lc)?;
    create_dir(&a.out)?;
    for f in &summary.folds {
        let dir = a.out.join(format!("fold_{}", f.patient_id));
        create_dir(&dir)?;
        f.history.write_csv(dir.join(HISTORY_FILE))?;
        f.predictions.write_tsv(dir.join("predictions.tsv"))?;
    }
    log::info!("cross-validated mean r {:.4} over {} folds", summary.mean_r, summary.folds.len());
    write_json(&a.out.join("loocv_summary.json"), &summary)
}

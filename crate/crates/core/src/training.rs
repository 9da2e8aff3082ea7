//! Training loops for the autoencoder and the expression head, learning
//! curves, and leave-one-patient-out cross-validation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{expression_matrix, select_top_genes, ExpressionMatrix, ExpressionOptions, PatchBank, StDataset};
use crate::error::{Error, Result};
use crate::evaluation::{mean_spot_correlation, pearson_r};
use crate::models::{build_histospace, HeadConfig, ModelBundle, Phase, Stage};
use crate::tensor::{LossConfig, Optimizer, OptimizerConfig, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub shuffle: bool,
    /// Fraction of samples held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::head()
    }
}

impl TrainConfig {
    /// Autoencoder defaults: 150 epochs of mean squared reconstruction error.
    pub fn autoencoder() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 32,
            loss: LossConfig::mse(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            shuffle: true,
            validation_fraction: 0.1,
        }
    }

    /// Expression-head defaults: 50 epochs of Huber loss.
    pub fn head() -> Self {
        TrainConfig { epochs: 50, loss: LossConfig::huber(1.0), ..TrainConfig::autoencoder() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation_fraction {} must lie in [0, 1)",
                self.validation_fraction
            )));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Only recorded for expression training.
    pub val_mean_r: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct History {
    /// Scores of the untrained model (train loss in inference mode).
    pub baseline: Option<EpochRecord>,
    /// One record per completed epoch.
    pub epochs: Vec<EpochRecord>,
    #[serde(skip)]
    pub batch_losses: Vec<f64>,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Record for `epoch`, where 0 is the baseline.
    pub fn at(&self, epoch: usize) -> Option<&EpochRecord> {
        if epoch == 0 {
            self.baseline.as_ref()
        } else {
            self.epochs.get(epoch - 1)
        }
    }

    /// `epoch,train_loss,val_loss,val_mean_r` with the baseline as epoch 0;
    /// values are written at full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_mean_r\n");
        for r in self.baseline.iter().chain(&self.epochs) {
            let r_field = r.val_mean_r.map(|v| format!("{v:?}")).unwrap_or_default();
            out.push_str(&format!("{},{:?},{:?},{r_field}\n", r.epoch, r.train_loss, r.val_loss));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Seeded train/validation partition of `0..n`; both parts sorted.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = if fraction > 0.0 { n_val.max(1) } else { 0 };
    if n_val >= n {
        return Err(Error::InvalidArgument(format!(
            "{n} samples cannot provide a training split with validation fraction {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut val, mut train) = (order[..n_val].to_vec(), order[n_val..].to_vec());
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Batch order for every epoch, drawn from its own stream of the run seed.
struct EpochOrder {
    rng: ChaCha8Rng,
    shuffle: bool,
}

impl EpochOrder {
    fn new(seed: u64, shuffle: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        EpochOrder { rng, shuffle }
    }

    fn next(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.shuffle {
            order.shuffle(&mut self.rng);
        }
        order
    }
}

/// One optimizer step on a batch; returns the batch loss.
fn train_step(
    model: &mut ModelBundle,
    optimizer: &mut Optimizer,
    input: Tensor,
    target: Tensor,
    stages: &[Stage],
    phase: impl Fn(Stage) -> Phase,
    loss: LossConfig,
) -> Result<f64> {
    let mut fwd = model.forward(input, stages, phase, true)?;
    let t = fwd.graph.leaf(target);
    let l = fwd.graph.loss(loss, fwd.output, t)?;
    let value = fwd.graph.value(l).item().expect("loss is a scalar");
    if !value.is_finite() {
        return Err(Error::Validation(format!("training diverged: batch loss {value}")));
    }
    fwd.graph.backward(l)?;
    for (pi, v) in &fwd.param_vars {
        model.params[*pi].tensor.grad = fwd.graph.take_grad(*v);
    }
    optimizer.step(&mut model.params)?;
    model.apply_batch_stats(&fwd.batch_stats);
    Ok(value)
}

/// Runs one epoch over `inputs`/`targets` in `batch_size` chunks of the
/// given order; returns the sample-weighted mean loss.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut ModelBundle,
    optimizer: &mut Optimizer,
    inputs: &Tensor,
    targets: Option<&Tensor>,
    order: &[usize],
    config: &TrainConfig,
    stages: &[Stage],
    phase: impl Fn(Stage) -> Phase + Copy,
    batch_losses: &mut Vec<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in order.chunks(config.batch_size) {
        let x = inputs.gather_batch(batch)?;
        let y = match targets {
            Some(t) => t.gather_batch(batch)?,
            None => x.clone(),
        };
        let l = train_step(model, optimizer, x, y, stages, phase, config.loss)?;
        batch_losses.push(l);
        total += l * batch.len() as f64;
    }
    Ok(total / order.len() as f64)
}

/// Mean reconstruction loss of `tiles` in inference mode.
pub fn reconstruction_loss(model: &ModelBundle, tiles: &Tensor, loss: LossConfig) -> Result<f64> {
    let recon = model.reconstruct(tiles)?;
    loss.value(recon.data(), tiles.data())
}

/// Stage 1: fits the autoencoder to reconstruct `tiles` (`[N, 3, S, S]`).
/// A seeded `split` fraction of tiles is held out for validation.
pub fn train_autoencoder(model: &mut ModelBundle, tiles: &Tensor, config: &TrainConfig, split: f64) -> Result<History> {
    config.validate()?;
    if !model.has_stage(Stage::Encoder) || !model.has_stage(Stage::Decoder) {
        return Err(Error::InvalidArgument(format!("`{}` is not an autoencoder", model.variant_tag)));
    }
    let n = tiles.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::InvalidArgument("no tiles to train on".into()));
    }
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::InvalidArgument(format!("validation split {split} must lie in (0, 1)")));
    }
    let (train_idx, val_idx) = split_indices(n, split, config.seed)?;
    let train = tiles.gather_batch(&train_idx)?;
    let val = tiles.gather_batch(&val_idx)?;

    let mut history = History::default();
    if config.epochs == 0 {
        return Ok(history);
    }
    history.baseline = Some(EpochRecord {
        epoch: 0,
        train_loss: reconstruction_loss(model, &train, config.loss)?,
        val_loss: reconstruction_loss(model, &val, config.loss)?,
        val_mean_r: None,
    });

    let stages = [Stage::Encoder, Stage::Decoder];
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut order = EpochOrder::new(config.seed, config.shuffle);
    for epoch in 1..=config.epochs {
        let perm = order.next(train_idx.len());
        let train_loss = run_epoch(
            model,
            &mut optimizer,
            &train,
            None,
            &perm,
            config,
            &stages,
            |_| Phase::Train,
            &mut history.batch_losses,
        )?;
        let val_loss = reconstruction_loss(model, &val, config.loss)?;
        log::info!("ae epoch {epoch}/{}: train {train_loss:.6} val {val_loss:.6}", config.epochs);
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss, val_mean_r: None });
    }
    Ok(history)
}

/// Spot tiles aligned row-for-row with their expression.
#[derive(Debug, Clone)]
pub struct SpotSet {
    pub tiles: Tensor,
    pub expression: ExpressionMatrix,
}

impl SpotSet {
    /// Pairs tiles keyed by `ids` with expression rows of the same spots.
    /// Every tile needs a row and every row a tile.
    pub fn new(ids: &[String], tiles: Tensor, expression: &ExpressionMatrix) -> Result<SpotSet> {
        if tiles.shape().first() != Some(&ids.len()) {
            return Err(Error::Shape(format!("{} ids for tile tensor {:?}", ids.len(), tiles.shape())));
        }
        let rows = expression.row_index();
        let tile_ids: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        let mut unmatched: Vec<&str> = ids.iter().map(String::as_str).filter(|id| !rows.contains_key(id)).collect();
        unmatched.extend(expression.spot_ids.iter().map(String::as_str).filter(|id| !tile_ids.contains(id)));
        if !unmatched.is_empty() {
            return Err(Error::Validation(format!("tiles and expression disagree on spots: {}", unmatched.join(", "))));
        }
        Ok(SpotSet { tiles, expression: expression.select_rows(ids)? })
    }

    pub fn len(&self) -> usize {
        self.expression.n_spots()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> &[String] {
        &self.expression.spot_ids
    }

    pub fn subset(&self, rows: &[usize]) -> Result<SpotSet> {
        let ids: Vec<String> = rows.iter().map(|&i| self.expression.spot_ids[i].clone()).collect();
        Ok(SpotSet { tiles: self.tiles.gather_batch(rows)?, expression: self.expression.select_rows(&ids)? })
    }

    /// Seeded train/validation split.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(SpotSet, SpotSet)> {
        let (train, val) = split_indices(self.len(), fraction, seed)?;
        Ok((self.subset(&train)?, self.subset(&val)?))
    }

    fn targets(&self) -> Tensor {
        Tensor::new(&[self.len(), self.expression.n_genes()], self.expression.values().to_vec())
            .expect("expression matrix is spots x genes")
    }
}

fn encoder_frozen(model: &ModelBundle) -> bool {
    model.stage_params(Stage::Encoder).iter().all(|&i| !model.params[i].trainable)
}

/// Inputs for head training: cached encoder features when the encoder is
/// frozen, raw tiles otherwise.
struct HeadInputs {
    stages: &'static [Stage],
    train: Tensor,
    val: Tensor,
}

fn head_inputs(model: &ModelBundle, train: &SpotSet, val: &SpotSet) -> Result<HeadInputs> {
    if encoder_frozen(model) {
        Ok(HeadInputs {
            stages: &[Stage::Head],
            train: model.encode(&train.tiles)?,
            val: model.encode(&val.tiles)?,
        })
    } else {
        Ok(HeadInputs { stages: &[Stage::Encoder, Stage::Head], train: train.tiles.clone(), val: val.tiles.clone() })
    }
}

fn head_phase(stage: Stage) -> Phase {
    // Encoder batch norm always runs on its stored statistics.
    if stage == Stage::Head {
        Phase::Train
    } else {
        Phase::Eval
    }
}

fn score(model: &ModelBundle, inputs: &Tensor, stages: &[Stage], set: &SpotSet, loss: LossConfig) -> Result<(f64, f64)> {
    let pred = model.infer(inputs, stages)?;
    let loss = loss.value(pred.data(), set.expression.values())?;
    let pred = ExpressionMatrix::new(set.ids().to_vec(), set.expression.gene_names.clone(), pred.into_data())?;
    Ok((loss, mean_spot_correlation(&pred, &set.expression)?.mean_r))
}

/// Stage 2: fits the expression head on `train`, scoring `val` after every
/// epoch. Only trainable parameters change.
pub fn train_histospace(model: &mut ModelBundle, train: &SpotSet, val: &SpotSet, config: &TrainConfig) -> Result<History> {
    config.validate()?;
    let n_out = model
        .n_outputs()
        .ok_or_else(|| Error::InvalidArgument(format!("`{}` has no expression head", model.variant_tag)))?;
    for (name, set) in [("training", train), ("validation", val)] {
        if set.is_empty() {
            return Err(Error::InvalidArgument(format!("{name} set has no spots")));
        }
        if set.expression.n_genes() != n_out {
            return Err(Error::Shape(format!(
                "{name} expression has {} genes, model predicts {n_out}",
                set.expression.n_genes()
            )));
        }
    }
    if train.expression.gene_names != val.expression.gene_names {
        return Err(Error::Validation("training and validation gene lists differ".into()));
    }

    let mut history = History::default();
    if config.epochs == 0 {
        return Ok(history);
    }
    let inputs = head_inputs(model, train, val)?;
    let targets = train.targets();
    let (base_train, _) = score(model, &inputs.train, inputs.stages, train, config.loss)?;
    let (val_loss, val_r) = score(model, &inputs.val, inputs.stages, val, config.loss)?;
    history.baseline = Some(EpochRecord { epoch: 0, train_loss: base_train, val_loss, val_mean_r: Some(val_r) });

    let mut optimizer = Optimizer::new(config.optimizer);
    let mut order = EpochOrder::new(config.seed, config.shuffle);
    for epoch in 1..=config.epochs {
        let perm = order.next(train.len());
        let train_loss = run_epoch(
            model,
            &mut optimizer,
            &inputs.train,
            Some(&targets),
            &perm,
            config,
            inputs.stages,
            head_phase,
            &mut history.batch_losses,
        )?;
        let (val_loss, val_r) = score(model, &inputs.val, inputs.stages, val, config.loss)?;
        log::info!(
            "head epoch {epoch}/{}: train {train_loss:.6} val {val_loss:.6} r {val_r:.4}",
            config.epochs
        );
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss, val_mean_r: Some(val_r) });
    }
    Ok(history)
}

/// Predicted expression for the tiles of `set`, labelled with its spots and
/// genes.
pub fn predict_set(model: &ModelBundle, set: &SpotSet) -> Result<ExpressionMatrix> {
    let pred = model.predict_expression(&set.tiles)?;
    ExpressionMatrix::new(set.ids().to_vec(), set.expression.gene_names.clone(), pred.into_data())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoocvConfig {
    pub n_genes: usize,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub expression: ExpressionOptions,
}

impl Default for LoocvConfig {
    fn default() -> Self {
        LoocvConfig {
            n_genes: crate::data::DEFAULT_N_GENES,
            head: HeadConfig::default(),
            train: TrainConfig::head(),
            expression: ExpressionOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub patient_id: String,
    pub seed: u64,
    pub n_train_spots: usize,
    pub n_test_spots: usize,
    pub mean_r: f64,
    pub n_undefined: usize,
    pub pooled_r: f64,
    pub genes: Vec<String>,
    pub history: History,
    #[serde(skip)]
    pub predictions: ExpressionMatrix,
    #[serde(skip)]
    pub truth: ExpressionMatrix,
    #[serde(skip)]
    pub model: ModelBundle,
}

#[derive(Debug, Clone, Serialize)]
pub struct LoocvSummary {
    pub folds: Vec<FoldResult>,
    /// Arithmetic mean of the per-fold mean spot r.
    pub mean_r: f64,
    /// r over every held-out spot-gene pair of every fold.
    pub pooled_r: f64,
    /// Mean r over all held-out spots regardless of fold.
    pub spot_mean_r: f64,
    pub warnings: Vec<String>,
}

/// One fold per patient: the head is trained on every other patient's spots
/// and scored on the held-out patient. Genes are selected from the training
/// spots of each fold. The autoencoder is shared by all folds and never
/// retrained.
pub fn loocv(dataset: &StDataset, patches: &PatchBank, autoencoder: &ModelBundle, config: &LoocvConfig) -> Result<LoocvSummary> {
    config.train.validate()?;
    let patients = dataset.patient_ids();
    if patients.len() < 2 {
        return Err(Error::InvalidArgument(format!("cross-validation needs >= 2 patients, found {}", patients.len())));
    }
    let has_patch: std::collections::HashSet<&str> = patches.ids.iter().map(String::as_str).collect();
    let mut folds = Vec::new();
    let mut warnings = Vec::new();
    for (fold, &held_out) in patients.iter().enumerate() {
        let usable = |s: &crate::data::SpotRef| has_patch.contains(s.key().as_str());
        let train_expr = expression_matrix(dataset, config.expression, |s| s.patient_id != held_out && usable(s))?;
        let test_expr = expression_matrix(dataset, config.expression, |s| s.patient_id == held_out && usable(s))?;
        if test_expr.n_spots() == 0 || train_expr.n_spots() == 0 {
            let msg = format!(
                "fold {fold} (patient {held_out}) skipped: {} training and {} held-out spots with patches",
                train_expr.n_spots(),
                test_expr.n_spots()
            );
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let selection = select_top_genes(&train_expr, config.n_genes)?;
        let train_expr = selection.apply(&train_expr)?;
        let test_expr = selection.apply(&test_expr)?;
        let train = SpotSet::new(&train_expr.spot_ids, patches.select(&train_expr.spot_ids)?, &train_expr)?;
        let test = SpotSet::new(&test_expr.spot_ids, patches.select(&test_expr.spot_ids)?, &test_expr)?;

        let seed = config.train.seed + fold as u64;
        let mut model = build_histospace(autoencoder, config.n_genes, &config.head, seed)?;
        let train_cfg = TrainConfig { seed, ..config.train };
        log::info!("fold {fold}: holding out {held_out} ({} train / {} test spots)", train.len(), test.len());
        let history = train_histospace(&mut model, &train, &test, &train_cfg)?;
        let predictions = predict_set(&model, &test)?;
        let spots = mean_spot_correlation(&predictions, &test.expression)?;
        folds.push(FoldResult {
            fold,
            patient_id: held_out.to_string(),
            seed,
            n_train_spots: train.len(),
            n_test_spots: test.len(),
            mean_r: spots.mean_r,
            n_undefined: spots.n_undefined,
            pooled_r: pearson_r(predictions.values(), test.expression.values()).unwrap_or(f64::NAN),
            genes: selection.genes,
            history,
            predictions,
            truth: test.expression,
            model,
        });
    }
    if folds.is_empty() {
        return Err(Error::Validation("every cross-validation fold was skipped".into()));
    }
    let (mean_r, _) = crate::evaluation::nan_mean(folds.iter().map(|f| f.mean_r));
    let all_pred: Vec<f64> = folds.iter().flat_map(|f| f.predictions.values().iter().copied()).collect();
    let all_truth: Vec<f64> = folds.iter().flat_map(|f| f.truth.values().iter().copied()).collect();
    let pooled_r = pearson_r(&all_pred, &all_truth).unwrap_or(f64::NAN);
    let (spot_mean_r, _) = crate::evaluation::nan_mean(folds.iter().flat_map(|f| {
        (0..f.predictions.n_spots()).map(move |i| pearson_r(f.predictions.row(i), f.truth.row(i)).unwrap_or(f64::NAN))
    }));
    Ok(LoocvSummary { folds, mean_r, pooled_r, spot_mean_r, warnings })
}

//! Two-phase training: a pooled baseline first, then monomial selection on
//! its features and retraining with the invariant head.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, DenseLayer, Standardize};
use crate::error::{Error, Result};
use crate::harness::checkpoint;
use crate::harness::config::{Augmentation, DataSource, TrainConfig};
use crate::harness::data::{augment_random_rotation, load_idx, make_synthetic, stratified_subset, Dataset, Splits, SyntheticSpec};
use crate::iil::{ii_forward, IILayerState, RotationGroupSampling};
use crate::monomial::{apply_shift, fit_shift};
use crate::network::{Head, Network, Sgd};
use crate::selection::{select_monomials, SelectionTrace, StopReason};
use crate::tensor::Tensor;

/// Batch size used for inference-only passes.
const EVAL_BATCH: usize = 128;

// independent random streams, so e.g. skipping the baseline continuation
// leaves the invariant network bit-identical
const STREAM_INIT: u64 = 0;
const STREAM_PHASE1: u64 = 1;
const STREAM_PHASE2: u64 = 2;
const STREAM_BASELINE: u64 = 3;
const STREAM_HEAD: u64 = 4;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1 = pooled baseline, 2 = invariant network, 3 = baseline continued
    /// for the phase-2 budget.
    pub phase: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Test error in percent, per run and aggregated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub per_run: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (`n - 1`); 0 for a single run.
    pub std: f64,
}

impl TestSummary {
    pub fn from_runs(per_run: Vec<f64>) -> Self {
        let n = per_run.len() as f64;
        let mean = if per_run.is_empty() { 0.0 } else { per_run.iter().sum::<f64>() / n };
        let std = if per_run.len() < 2 {
            0.0
        } else {
            (per_run.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { per_run, mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub chosen: Vec<usize>,
    pub iterations: usize,
    pub best_accuracy: f64,
    pub stop_reason: StopReason,
    pub initial_exponents: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config: TrainConfig,
    pub train_samples: usize,
    pub epochs: Vec<EpochRecord>,
    pub selection: Option<SelectionSummary>,
    /// Test error of the invariant network (or of the initial model when no
    /// training ran).
    pub test: Option<TestSummary>,
    /// Test error of the baseline trained for the same total epochs.
    pub baseline_test: Option<TestSummary>,
}

impl MetricsRecord {
    pub fn empty(config: &TrainConfig, train_samples: usize) -> Self {
        Self { config: config.clone(), train_samples, epochs: Vec::new(), selection: None, test: None, baseline_test: None }
    }

    pub fn phase(&self, phase: u8) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(move |e| e.phase == phase)
    }

    pub fn final_val_accuracy(&self, phase: u8) -> Option<f64> {
        self.phase(phase).last().map(|e| e.val_accuracy)
    }

    /// Learning curve as CSV, preceded by one `# key = value` line per
    /// config entry.
    pub fn to_csv(&self) -> String {
        let mut out: String = self.config.to_kv().lines().map(|l| format!("# {l}\n")).collect();
        out.push_str("phase,epoch,train_loss,train_accuracy,val_accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{},{}\n", e.phase, e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy));
        }
        out
    }
}

/// Result of [`train_two_phase`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The invariant network, or the initial model when both epoch counts
    /// are zero.
    pub model: Network,
    /// Baseline after phase 1 plus the phase-2 budget, if trained.
    pub baseline: Option<Network>,
    pub trace: Option<SelectionTrace>,
    pub metrics: MetricsRecord,
}

impl TrainOutcome {
    pub fn ii_state(&self) -> Option<&IILayerState> {
        self.model.iil()
    }
}

/// Builds train/val/test splits from the configured source and applies the
/// training subset fraction.
pub fn prepare_data(config: &TrainConfig) -> Result<Splits> {
    let mut splits = match config.data_source {
        DataSource::Synthetic => make_synthetic(&SyntheticSpec {
            train: config.train_size,
            val: config.val_size,
            test: config.test_size,
            image_size: config.image_size,
            noise: config.noise,
            seed: config.seed,
        })?,
        DataSource::Idx => {
            let path = |p: &Option<PathBuf>, key: &str| {
                p.clone().ok_or_else(|| Error::Config(format!("data_source = idx requires {key}")))
            };
            let full = load_idx(&path(&config.train_images, "train_images")?, &path(&config.train_labels, "train_labels")?)?;
            let test = load_idx(&path(&config.test_images, "test_images")?, &path(&config.test_labels, "test_labels")?)?;
            if full.len() <= config.val_size {
                return Err(Error::Config(format!("{} training images cannot hold {} validation images", full.len(), config.val_size)));
            }
            let val_start = full.len() - config.val_size;
            let train_end = config.train_size.min(val_start);
            let classes = full.num_classes.max(test.num_classes);
            let mut train = full.subset(&(0..train_end).collect::<Vec<_>>());
            let mut val = full.subset(&(val_start..full.len()).collect::<Vec<_>>());
            let mut test = test.subset(&(0..config.test_size.min(test.len())).collect::<Vec<_>>());
            for ds in [&mut train, &mut val, &mut test] {
                ds.num_classes = classes;
            }
            Splits { train, val, test }
        }
    };
    if config.subset_fraction < 1.0 {
        splits.train = stratified_subset(&splits.train, config.subset_fraction, config.seed)?;
    }
    Ok(splits)
}

fn batched<T>(n: usize, f: impl FnMut(&[usize]) -> Result<T>) -> Result<Vec<T>> {
    let idx: Vec<usize> = (0..n).collect();
    idx.chunks(EVAL_BATCH).map(f).collect()
}

fn concat_rows(parts: Vec<Tensor>) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Shape("no batches".into()))?;
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::new(shape, parts.into_iter().flat_map(|p| p.into_data()).collect())
}

pub fn predict_dataset(net: &Network, ds: &Dataset) -> Result<Vec<usize>> {
    Ok(batched(ds.len(), |idx| net.predict(&ds.gather(idx).0))?.concat())
}

pub fn accuracy_on(net: &Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let pred = predict_dataset(net, ds)?;
    Ok(pred.iter().zip(&ds.labels).filter(|(p, l)| p == l).count() as f64 / ds.len() as f64)
}

/// `100 * (1 - accuracy)`.
pub fn test_error_percent(net: &Network, ds: &Dataset) -> Result<f64> {
    Ok(100.0 * (1.0 - accuracy_on(net, ds)?))
}

fn backbone_features(backbone: &Backbone, ds: &Dataset) -> Result<Tensor> {
    concat_rows(batched(ds.len(), |idx| backbone.features(&ds.gather(idx).0))?)
}

fn check_finite(net: &Network) -> bool {
    net.params().iter().all(|p| p.2.iter().all(|v| v.is_finite()))
}

/// Rescales all gradient blocks together so their joint L2 norm is at most
/// `max_norm` (no-op for 0).
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    dump_dir: Option<&'a Path>,
}

impl Trainer<'_> {
    fn diverged(&self, last_good: &Network, phase: u8, epoch: usize, loss: f64) -> Error {
        if let Some(dir) = self.dump_dir {
            let path = dir.join(format!("last_good_phase{phase}.ckpt"));
            match checkpoint::save(&path, last_good, Some(self.config)) {
                Ok(()) => log::error!("non-finite loss in phase {phase} epoch {epoch}; last good model written to {}", path.display()),
                Err(e) => log::error!("non-finite loss in phase {phase} epoch {epoch}; dumping last good model failed: {e}"),
            }
        }
        Error::Divergence { phase, epoch, loss }
    }

    fn run_epochs(
        &self,
        net: &mut Network,
        opt: &mut Sgd,
        data: &Splits,
        epochs: usize,
        phase: u8,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<EpochRecord>> {
        let train = &data.train;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut records = Vec::with_capacity(epochs);
        let mut best: Option<(f64, Network)> = None;
        if epochs > 0 && self.config.keep_best {
            best = Some((accuracy_on(net, &data.val)?, net.clone()));
        }
        for epoch in 0..epochs {
            let last_good = net.clone();
            order.shuffle(rng);
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for batch in order.chunks(self.config.batch_size) {
                let (mut images, labels) = train.gather(batch);
                if self.config.augmentation == Augmentation::RandomRotation {
                    images = augment_random_rotation(&images, rng)?;
                }
                let (loss, logits, mut grads) = net.loss_and_grads(&images, &labels)?;
                if !loss.is_finite() {
                    return Err(self.diverged(&last_good, phase, epoch, loss));
                }
                loss_sum += loss * batch.len() as f64;
                correct += crate::backbone::argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
                clip_global_norm(&mut grads, self.config.grad_clip);
                opt.step(net, &grads)?;
            }
            if !check_finite(net) {
                return Err(self.diverged(&last_good, phase, epoch, f64::NAN));
            }
            if let Some(iil) = net.iil() {
                if let Some(b) = iil.exponents().iter().find(|&&b| b < 0.0) {
                    log::warn!("phase {phase} epoch {epoch}: exponent {b} became negative");
                }
            }
            let rec = EpochRecord {
                phase,
                epoch,
                train_loss: loss_sum / train.len() as f64,
                train_accuracy: correct as f64 / train.len() as f64,
                val_accuracy: accuracy_on(net, &data.val)?,
            };
            log::info!(
                "phase {phase} epoch {epoch}: loss {:.4} train acc {:.3} val acc {:.3}",
                rec.train_loss,
                rec.train_accuracy,
                rec.val_accuracy
            );
            if let Some((best_val, best_net)) = &mut best {
                if rec.val_accuracy > *best_val {
                    *best_val = rec.val_accuracy;
                    *best_net = net.clone();
                }
            }
            records.push(rec);
        }
        if let Some((val, best_net)) = best {
            log::info!("phase {phase}: keeping parameters with val acc {val:.3}");
            *net = best_net;
        }
        Ok(records)
    }
}

/// Fits the input shift on the backbone's training features and selects
/// monomials on the shifted training and validation features.
pub fn select_for_backbone(
    backbone: &Backbone,
    data: &Splits,
    config: &TrainConfig,
) -> Result<(IILayerState, SelectionTrace)> {
    let train_feats = backbone_features(backbone, &data.train)?;
    let shift = fit_shift(&train_feats, config.epsilon)?;
    let n = if config.selection_samples == 0 { data.train.len() } else { config.selection_samples.min(data.train.len()) };
    let per = train_feats.len() / data.train.len();
    let mut shape = train_feats.shape().to_vec();
    shape[0] = n;
    let sel_train = apply_shift(&Tensor::new(shape, train_feats.data()[..n * per].to_vec())?, &shift)?;
    let val_feats = apply_shift(&backbone_features(backbone, &data.val)?, &shift)?;
    let (monomials, trace) =
        select_monomials(&sel_train, &data.train.labels[..n], &val_feats, &data.val.labels, &config.selection())?;
    let state = IILayerState::new(monomials, shift, RotationGroupSampling::new(config.num_angles)?)?;
    Ok((state, trace))
}

/// Initializes the pooled baseline from `config.seed` and trains it for
/// `epochs_phase1` epochs.
pub fn train_phase_one(data: &Splits, config: &TrainConfig, dump_dir: Option<&Path>) -> Result<(Network, Vec<EpochRecord>)> {
    config.validate()?;
    let (_, _, in_ch) = data.train.image_dims();
    let mut init_rng = rng_for(config.seed, STREAM_INIT);
    let backbone = Backbone::random(&mut init_rng, &config.backbone(in_ch))?;
    let dense = DenseLayer::random(&mut init_rng, backbone.out_channels(), data.train.num_classes);
    let mut baseline = Network { backbone, head: Head::Pooled { dense } };
    let trainer = Trainer { config, dump_dir };
    let mut opt = Sgd::new(&baseline, config.learning_rate, config.momentum);
    let mut rng = rng_for(config.seed, STREAM_PHASE1);
    let records = trainer.run_epochs(&mut baseline, &mut opt, data, config.epochs_phase1, 1, &mut rng)?;
    Ok((baseline, records))
}

/// Runs phase 1 (pooled baseline), shift fitting, monomial selection and
/// phase 2 (invariant network, all parameters trained including the
/// exponents). The baseline is additionally trained for `epochs_phase2`
/// more epochs so both networks get the same total budget.
///
/// On a non-finite loss training stops with [`Error::Divergence`]; if
/// `dump_dir` is given, the model from the start of the failing epoch is
/// written there first.
pub fn train_two_phase(data: &Splits, config: &TrainConfig, dump_dir: Option<&Path>) -> Result<TrainOutcome> {
    let (mut baseline, phase1) = train_phase_one(data, config, dump_dir)?;
    let num_classes = data.train.num_classes;
    let mut metrics = MetricsRecord::empty(config, data.train.len());
    if config.epochs_phase1 == 0 && config.epochs_phase2 == 0 {
        return Ok(TrainOutcome { model: baseline, baseline: None, trace: None, metrics });
    }
    metrics.epochs = phase1;
    let trainer = Trainer { config, dump_dir };

    let (iil, trace) = select_for_backbone(&baseline.backbone, data, config)?;
    let initial_exponents = iil.exponents();
    log::info!("selected {} monomials, stop: {:?}", iil.num_monomials(), trace.stop_reason);

    let backbone = baseline.backbone.clone();
    let train_feats = apply_shift(&backbone_features(&backbone, &data.train)?, &iil.shift)?;
    let ii = ii_forward(&train_feats, &iil)?;
    let d = iil.channels() * iil.num_monomials();
    let norm = Standardize::fit(&ii.reshape(&[data.train.len(), d])?)?;
    let dense = DenseLayer::random(&mut rng_for(config.seed, STREAM_HEAD), d, num_classes);
    let mut model = Network { backbone, head: Head::Invariant { iil, norm, dense } };
    debug_assert_eq!(model.iil().unwrap().exponents(), initial_exponents);

    let mut opt2 = Sgd::new(&model, config.learning_rate, config.momentum);
    if let Some(i) = model.param_names().iter().position(|n| n == "iil.exponents") {
        opt2.lr_scale[i] = config.lr_exponents / config.learning_rate;
    }
    let mut rng2 = rng_for(config.seed, STREAM_PHASE2);
    metrics.epochs.extend(trainer.run_epochs(&mut model, &mut opt2, data, config.epochs_phase2, 2, &mut rng2)?);

    let mut rng3 = rng_for(config.seed, STREAM_BASELINE);
    let mut opt3 = Sgd::new(&baseline, config.learning_rate, config.momentum);
    metrics.epochs.extend(trainer.run_epochs(&mut baseline, &mut opt3, data, config.epochs_phase2, 3, &mut rng3)?);

    metrics.selection = Some(SelectionSummary {
        chosen: trace.chosen.clone(),
        iterations: trace.iterations.len(),
        best_accuracy: trace.best_accuracy,
        stop_reason: trace.stop_reason,
        initial_exponents,
    });
    metrics.test = Some(TestSummary::from_runs(vec![test_error_percent(&model, &data.test)?]));
    metrics.baseline_test = Some(TestSummary::from_runs(vec![test_error_percent(&baseline, &data.test)?]));
    Ok(TrainOutcome { model, baseline: Some(baseline), trace: Some(trace), metrics })
}

/// Aggregate of `repeats` independent trainings (seeds `seed`, `seed + 1`,
/// ...) on the same data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub config: TrainConfig,
    pub runs: Vec<MetricsRecord>,
    pub test: TestSummary,
    pub baseline_test: TestSummary,
}

pub fn train_repeats(data: &Splits, config: &TrainConfig, dump_dir: Option<&Path>) -> Result<RepeatSummary> {
    let mut runs = Vec::with_capacity(config.repeats);
    for r in 0..config.repeats {
        let cfg = TrainConfig { seed: config.seed.wrapping_add(r as u64), ..config.clone() };
        runs.push(train_two_phase(data, &cfg, dump_dir)?.metrics);
    }
    let collect = |f: fn(&MetricsRecord) -> Option<&TestSummary>| {
        TestSummary::from_runs(runs.iter().filter_map(|m| f(m).map(|t| t.mean)).collect())
    };
    let test = collect(|m| m.test.as_ref());
    let baseline_test = collect(|m| m.baseline_test.as_ref());
    Ok(RepeatSummary { config: config.clone(), runs, test, baseline_test })
}

/// Test error of already-trained models, one per run.
pub fn evaluate(models: &[Network], test: &Dataset) -> Result<TestSummary> {
    Ok(TestSummary::from_runs(models.iter().map(|m| test_error_percent(m, test)).collect::<Result<_>>()?))
}

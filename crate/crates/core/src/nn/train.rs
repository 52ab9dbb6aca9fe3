use std::io::Write;

use log::info;
use serde::{Deserialize, Serialize};

use super::loss::softmax_row;
use super::{adam_step, AdamState, Checkpoint, ModelSpec, Network, NnError, Params, PlateauScheduler, Result, Tensor};
use crate::data::{
    self, balanced_batches, class_distribution, class_weights_present, indices_by_class, shuffled_batches, ClassLabel,
    ImageSource, Manifest, SamplerKind, WeightMode, NUM_CLASSES,
};
use crate::ensemble::{self, PredictionSet};
use crate::imaging::{augment_eval, augment_train, AugmentConfig};
use crate::metrics::{self, ConfusionMatrix};
use crate::parallel::Exec;
use crate::rng;

/// Validation metric that drives scheduling and checkpoint selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValAccuracy,
    ValMacroRecall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub sampler: SamplerKind,
    pub weight_mode: WeightMode,
    /// Per-class factors applied on top of `weight_mode`.
    pub class_weight_multipliers: [f64; NUM_CLASSES],
    pub seed: u64,
    pub monitor: Monitor,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            plateau_factor: 0.5,
            plateau_patience: 2,
            max_epochs: 30,
            batch_size: 32,
            sampler: SamplerKind::Shuffled,
            weight_mode: WeightMode::MinOverCount,
            class_weight_multipliers: [1.0; NUM_CLASSES],
            seed: 0,
            monitor: Monitor::ValAccuracy,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::InvalidConfig(m));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor {} not in (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if self
            .class_weight_multipliers
            .iter()
            .any(|m| !(*m > 0.0 && m.is_finite()))
        {
            return bad("class_weight_multipliers must be positive".into());
        }
        Ok(())
    }

    /// Seed for parameter initialization.
    pub fn init_seed(&self) -> u64 {
        rng::mix(self.seed, 0x1A17)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_recall: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

impl EpochLog {
    pub fn monitored(&self, monitor: Monitor) -> f64 {
        match monitor {
            Monitor::ValAccuracy => self.val_accuracy,
            Monitor::ValMacroRecall => self.val_macro_recall,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    /// Snapshot at the best monitored epoch.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn load_inputs<S: ImageSource + ?Sized>(
    rows: &[&data::Sample],
    source: &S,
    exec: Exec,
    prep: impl Fn(usize, &crate::imaging::ImageU8) -> Result<Vec<f64>> + Send + Sync,
) -> Result<Vec<Vec<f64>>> {
    let jobs: Vec<(usize, &data::Sample)> = rows.iter().copied().enumerate().collect();
    exec.try_map_slice(&jobs, |(pos, sample)| {
        let img = source.load(&sample.image_id)?;
        prep(*pos, &img)
    })
}

/// Softmax probabilities for every row of `m`, using the deterministic
/// evaluation preprocessing.
pub fn evaluate<S: ImageSource + ?Sized>(
    net: &Network,
    params: &Params,
    m: &Manifest,
    aug: &AugmentConfig,
    source: &S,
    exec: Exec,
) -> Result<PredictionSet> {
    if params.len() != net.param_count() {
        return Err(NnError::ShapeMismatch(format!(
            "expected {} parameters, got {}",
            net.param_count(),
            params.len()
        )));
    }
    check_input(net, aug)?;
    let rows: Vec<&data::Sample> = m.rows.iter().collect();
    let probs = exec.try_map_slice(&rows, |sample| -> Result<[f64; NUM_CLASSES]> {
        let img = source.load(&sample.image_id)?;
        let x = aug.to_input(&augment_eval(&img, aug)?);
        let p = softmax_row(&net.logits(params, &x));
        Ok(std::array::from_fn(|c| p[c]))
    })?;
    let mut out = PredictionSet::new();
    for (sample, p) in m.rows.iter().zip(probs) {
        out.insert(sample.image_id.clone(), p)
            .map_err(|e| NnError::InvalidConfig(e.to_string()))?;
    }
    Ok(out)
}

fn check_input(net: &Network, aug: &AugmentConfig) -> Result<()> {
    let side = aug.output_size();
    if net.spec().input != [3, side, side] {
        return Err(NnError::ShapeMismatch(format!(
            "model input {:?} but preprocessing yields [3, {side}, {side}]",
            net.spec().input
        )));
    }
    Ok(())
}

/// Confusion matrix of argmax predictions against the manifest labels.
pub(crate) fn confusion_of(m: &Manifest, preds: &PredictionSet) -> ConfusionMatrix {
    let truth: Vec<ClassLabel> = m.labels();
    let pred: Vec<ClassLabel> = m
        .rows
        .iter()
        .map(|r| ensemble::argmax(&preds.rows[&r.image_id]))
        .collect();
    metrics::confusion(&truth, &pred).expect("non-empty, equal lengths")
}

/// Trains `spec` on `train`, keeping the parameters of the epoch with the
/// best validation metric.
///
/// Each epoch: sample batches, augment each image with its own derived
/// generator, take one Adam step per batch, evaluate on `val`, feed the
/// monitored metric to the plateau scheduler, and snapshot on strict
/// improvement.
pub fn fit<S: ImageSource + ?Sized>(
    spec: &ModelSpec,
    train: &Manifest,
    val: &Manifest,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    source: &S,
    exec: Exec,
) -> Result<FitOutcome> {
    cfg.validate()?;
    aug.validate()?;
    if cfg.max_epochs == 0 {
        return Err(NnError::EmptyTraining);
    }
    if train.is_empty() {
        return Err(NnError::EmptyManifest("training"));
    }
    if val.is_empty() {
        return Err(NnError::EmptyManifest("validation"));
    }
    let net = Network::new(spec.clone())?;
    check_input(&net, aug)?;

    let weights =
        class_weights_present(&class_distribution(train), &cfg.weight_mode)?.scaled(&cfg.class_weight_multipliers);
    let by_class = indices_by_class(train);
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);

    let mut params = net.init_params(cfg.init_seed());
    let mut adam = AdamState::with_hyper(net.param_count(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut scheduler = PlateauScheduler::new(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience);
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 1..=cfg.max_epochs {
        let epoch_seed = rng::mix(cfg.seed, epoch as u64);
        let plan = match cfg.sampler {
            SamplerKind::Shuffled => shuffled_batches(train.len(), cfg.batch_size, epoch_seed)?,
            SamplerKind::Balanced => balanced_batches(&by_class, cfg.batch_size, batches_per_epoch, epoch_seed)?,
        };
        let lr = scheduler.lr;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, batch) in plan.batches.iter().enumerate() {
            let rows: Vec<&data::Sample> = batch.iter().map(|&i| &train.rows[i]).collect();
            let base = (bi * cfg.batch_size) as u64;
            let inputs = load_inputs(&rows, source, exec, |pos, img| {
                let mut r = rng::derived(epoch_seed, base + pos as u64);
                Ok(aug.to_input(&augment_train(img, aug, &mut r)?))
            })?;
            let tensor = Tensor::stack(&spec.input, inputs)?;
            let labels: Vec<ClassLabel> = rows.iter().map(|r| r.label).collect();
            let (loss, grad) = net.loss_and_grad(&params, &tensor, &labels, &weights, exec)?;
            adam_step(&mut params, &grad, &mut adam, lr)?;
            loss_sum += loss * rows.len() as f64;
            seen += rows.len();
        }

        let preds = evaluate(&net, &params, val, aug, source, exec)?;
        let cm = confusion_of(val, &preds);
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_accuracy: metrics::accuracy(&cm),
            val_macro_recall: metrics::macro_average(&metrics::recall_per_class(&cm), &cm.supports()),
            lr,
        };
        info!(
            "epoch {epoch}: loss {:.5} val_acc {:.4} val_macro_recall {:.4} lr {:e}",
            entry.train_loss, entry.val_accuracy, entry.val_macro_recall, lr
        );
        let metric = entry.monitored(cfg.monitor);
        scheduler.step(metric);
        if best.as_ref().is_none_or(|b| metric > b.metric) {
            best = Some(Checkpoint {
                spec: spec.clone(),
                params: params.values.clone(),
                epoch,
                metric,
                monitor: cfg.monitor,
                class_order: ClassLabel::names(),
                seed: cfg.seed,
                init_seed: cfg.init_seed(),
                weight_mode: cfg.weight_mode.clone(),
                class_weights: weights.weights,
                augment: aug.clone(),
            });
        }
        log.push(entry);
    }
    Ok(FitOutcome {
        checkpoint: best.expect("at least one epoch ran"),
        log,
    })
}

/// `epoch,train_loss,val_accuracy,val_macro_recall,lr` with shortest
/// round-trip float formatting.
pub fn write_log_csv<W: Write>(log: &[EpochLog], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,val_accuracy,val_macro_recall,lr")?;
    for e in log {
        writeln!(
            w,
            "{},{},{},{},{}",
            e.epoch, e.train_loss, e.val_accuracy, e.val_macro_recall, e.lr
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MemorySource, Sample};
    use crate::imaging::ImageU8;

    fn toy() -> (Manifest, Manifest, MemorySource) {
        let mut src = MemorySource::default();
        let mut rows = Vec::new();
        for i in 0..24 {
            let label = ClassLabel::ALL[i % 2];
            let level = if label == ClassLabel::MEL { 40 } else { 210 };
            let img = ImageU8::from_fn(4, 4, |x, y, c| level + ((x + y + c + i) % 5) as u8 * 3).unwrap();
            let id = format!("img{i}");
            src.images.insert(id.clone(), img);
            rows.push(Sample { image_id: id, label });
        }
        let all = Manifest::new(rows, "").unwrap();
        let split = data::stratified_split(&all, 0.25, 3).unwrap();
        (split.train, split.val, src)
    }

    fn aug() -> AugmentConfig {
        AugmentConfig {
            apply_color_constancy: false,
            ..AugmentConfig::native(4)
        }
    }

    #[test]
    fn zero_epochs_is_an_error() {
        let (tr, va, src) = toy();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..Default::default()
        };
        let r = fit(
            &ModelSpec::small_cnn(4, 4),
            &tr,
            &va,
            &cfg,
            &aug(),
            &src,
            Exec::Sequential,
        );
        assert!(matches!(r, Err(NnError::EmptyTraining)));
    }

    #[test]
    fn checkpoint_holds_best_epoch() {
        let (tr, va, src) = toy();
        let cfg = TrainConfig {
            max_epochs: 6,
            batch_size: 4,
            lr0: 1e-2,
            ..Default::default()
        };
        let out = fit(
            &ModelSpec::small_cnn(4, 4),
            &tr,
            &va,
            &cfg,
            &aug(),
            &src,
            Exec::Parallel,
        )
        .unwrap();
        assert_eq!(out.log.len(), 6);
        let best = out.log.iter().map(|e| e.val_accuracy).fold(f64::MIN, f64::max);
        assert_eq!(out.checkpoint.metric, best);
        let first_best = out.log.iter().find(|e| e.val_accuracy == best).unwrap().epoch;
        assert_eq!(out.checkpoint.epoch, first_best);

        // the snapshot reproduces its recorded metric
        let net = Network::new(out.checkpoint.spec.clone()).unwrap();
        let p = Params {
            values: out.checkpoint.params.clone(),
        };
        let preds = evaluate(&net, &p, &va, &aug(), &src, Exec::Sequential).unwrap();
        assert_eq!(metrics::accuracy(&confusion_of(&va, &preds)), best);
    }

    #[test]
    fn fit_is_deterministic_across_executors() {
        let (tr, va, src) = toy();
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 5,
            sampler: SamplerKind::Balanced,
            ..Default::default()
        };
        let spec = ModelSpec::small_cnn(4, 4);
        let a = fit(&spec, &tr, &va, &cfg, &aug(), &src, Exec::Sequential).unwrap();
        let b = fit(&spec, &tr, &va, &cfg, &aug(), &src, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_params_evaluate_uniform() {
        let (_, va, src) = toy();
        let net = Network::new(ModelSpec::small_cnn(4, 4)).unwrap();
        let preds = evaluate(&net, &net.zero_params(), &va, &aug(), &src, Exec::Parallel).unwrap();
        assert_eq!(preds.len(), va.len());
        for row in preds.rows.values() {
            assert!(row.iter().all(|&p| p == 0.125));
        }
        let again = evaluate(&net, &net.zero_params(), &va, &aug(), &src, Exec::Sequential).unwrap();
        assert_eq!(preds, again);
    }

    #[test]
    fn missing_image_propagates() {
        let (tr, va, _) = toy();
        let empty = MemorySource::default();
        let r = fit(
            &ModelSpec::small_cnn(4, 4),
            &tr,
            &va,
            &TrainConfig::default(),
            &aug(),
            &empty,
            Exec::Sequential,
        );
        assert!(matches!(
            r,
            Err(NnError::Data(data::DataError::MissingImageFile { .. }))
        ));
    }

    #[test]
    fn config_validation_and_json() {
        assert!(TrainConfig {
            plateau_factor: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            plateau_patience: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"sampler":"balanced","weight_mode":"literal"}"#).unwrap();
        assert_eq!(parsed.sampler, SamplerKind::Balanced);
        assert_eq!(parsed.lr0, 1e-4);
        let err = serde_json::from_str::<TrainConfig>(r#"{"learning_rate":0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn log_csv_format() {
        let log = vec![EpochLog {
            epoch: 1,
            train_loss: 0.5,
            val_accuracy: 0.75,
            val_macro_recall: 0.5,
            lr: 1e-4,
        }];
        let mut buf = Vec::new();
        write_log_csv(&log, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,val_accuracy,val_macro_recall,lr\n1,0.5,0.75,0.5,0.0001\n"
        );
    }
}

use alloc::{format, vec, vec::Vec};

use rand::seq::SliceRandom;

use super::arcface::{arcface_loss, ClassifierHead};
use super::encoder::QueryEncoder;
use super::{momentum_toward, momentum_update};
use super::optim::{warmup_linear_decay, Sgd};
use crate::fusion::{BaselineMixerParams, FamilySchema, FeatureBundle, GalleryModel, MixerConfig, MixerParams};
use crate::numerics::{Matrix, Parameters};
use crate::rng;
use crate::{Error, Result};

/// How the two networks are optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum TrainMode {
    /// Mixer and encoder trained together; `ω^q` follows `ω^mix` by momentum.
    #[default]
    Joint,
    /// The mixer is trained alone first and frozen, then the encoder is
    /// trained against it.
    TwoStage,
    /// Both losses backpropagate into a single shared classifier.
    Coupled,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::TwoStage => "two-stage",
            TrainMode::Coupled => "coupled",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    /// Epochs per training stage.
    pub epochs: usize,
    /// Epochs at the start of each stage over which the learning rate ramps
    /// up linearly. Post-norm layers blow up under a full-size first step.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// `α` in the classifier moving average.
    pub momentum: f64,
    pub margin: f64,
    pub scale: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            warmup_epochs: 2,
            batch_size: 16,
            learning_rate: 0.03,
            weight_decay: 0.01,
            momentum: 0.99,
            margin: 0.3,
            scale: 32.0,
            seed: 0,
            mode: TrainMode::Joint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config("warmup cannot outlast training".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) || self.learning_rate * self.weight_decay >= 1.0 {
            return Err(Error::Config(format!("invalid weight decay {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        ClassifierHead::new(Matrix::identity(1), self.scale, self.margin).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Aggregator {
    #[default]
    Transformer,
    Mlp,
}

/// Architecture of the trainable networks.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ModelConfig {
    pub aggregator: Aggregator,
    pub mixer: MixerConfig,
    /// Inner widths of the concatenation baseline.
    pub baseline_hidden: Vec<usize>,
    /// Inner width of the query encoder.
    pub encoder_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mixer = MixerConfig::default();
        ModelConfig {
            aggregator: Aggregator::Transformer,
            baseline_hidden: vec![2 * mixer.dim],
            encoder_hidden: 2 * mixer.dim,
            mixer,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.mixer.validate()?;
        if self.encoder_hidden == 0 || self.baseline_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Fresh networks. `ω^q` starts as a copy of `ω^mix`.
    pub fn init(
        &self,
        schema: &[FamilySchema],
        query_dim: usize,
        classes: usize,
        train: &TrainConfig,
    ) -> Result<Models> {
        self.validate()?;
        let d = self.mixer.dim;
        let mut r = rng::stream(train.seed, 1);
        let gallery = match self.aggregator {
            Aggregator::Transformer => GalleryModel::Transformer(MixerParams::init(self.mixer, schema, &mut r)?),
            Aggregator::Mlp => {
                GalleryModel::Mlp(BaselineMixerParams::init(schema, &self.baseline_hidden, d, &mut r)?)
            }
        };
        let encoder = QueryEncoder::init(query_dim, self.encoder_hidden, d, &mut r)?;
        let prototypes = rng::normal_matrix(&mut r, classes, d, 1.0);
        let mixer_head = ClassifierHead::new(prototypes, train.scale, train.margin)?;
        Ok(Models {
            gallery,
            encoder,
            query_head: mixer_head.clone(),
            mixer_head,
        })
    }
}

/// Everything that is trained or tracked.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Models {
    pub gallery: GalleryModel,
    pub encoder: QueryEncoder,
    /// `ω^mix`, trained by backpropagation.
    pub mixer_head: ClassifierHead,
    /// `ω^q`, only ever written by the moving average.
    pub query_head: ClassifierHead,
}

impl Models {
    pub fn is_finite(&self) -> bool {
        self.gallery.tensors().iter().all(|t| t.is_finite())
            && self.encoder.tensors().iter().all(|t| t.is_finite())
            && self.mixer_head.prototypes.is_finite()
            && self.query_head.prototypes.is_finite()
    }
}

/// One training pair: the gallery-side bundle (which carries the label) and
/// the query-side view of the same item.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub bundle: &'a FeatureBundle,
    pub view: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub gallery: GalleryModel,
    pub encoder: QueryEncoder,
    pub mixer_head: Matrix,
    pub query_head: Matrix,
}

impl ModelGrads {
    fn zeros_like(models: &Models) -> Self {
        ModelGrads {
            gallery: models.gallery.zeros_like(),
            encoder: models.encoder.zeros_like(),
            mixer_head: Matrix::zeros(models.mixer_head.classes(), models.mixer_head.dim()),
            query_head: Matrix::zeros(models.query_head.classes(), models.query_head.dim()),
        }
    }

    fn scale(&mut self, k: f64) {
        for t in self.gallery.tensors_mut().into_iter().chain(self.encoder.tensors_mut()) {
            t.scale(k);
        }
        self.mixer_head.scale(k);
        self.query_head.scale(k);
    }
}

/// Which losses are backpropagated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub disc: bool,
    pub comp: bool,
    /// `ℓ_comp` is taken against `ω^mix` and flows into it.
    pub shared_head: bool,
}

/// Training phase of one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Joint,
    MixerOnly,
    EncoderOnly,
}

/// Batch-mean losses of one step; a loss that was not evaluated is `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub disc: Option<f64>,
    pub comp: Option<f64>,
}

impl StepLosses {
    fn is_finite(&self) -> bool {
        self.disc.map_or(true, f64::is_finite) && self.comp.map_or(true, f64::is_finite)
    }
}

fn label_of(bundle: &FeatureBundle) -> Result<usize> {
    bundle
        .label
        .ok_or_else(|| Error::Schema(format!("training item {} has no label", bundle.id)))
}

/// Batch-mean losses of the selected terms and their gradients.
pub fn loss_gradients(batch: &[Example<'_>], models: &Models, terms: LossTerms) -> Result<(ModelGrads, StepLosses)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut grads = ModelGrads::zeros_like(models);
    let (mut disc_sum, mut comp_sum) = (0.0, 0.0);
    let comp_head = if terms.shared_head {
        &models.mixer_head
    } else {
        &models.query_head
    };
    for ex in batch {
        let label = label_of(ex.bundle)?;
        if terms.disc {
            let (g, trace) = models.gallery.forward_traced(ex.bundle)?;
            let disc = arcface_loss(&g, &models.mixer_head, label)?;
            disc_sum += disc.loss;
            models.gallery.backward(&trace, &disc.grad_feature, &mut grads.gallery);
            grads.mixer_head.add_assign(&disc.grad_prototypes);
        }
        if terms.comp {
            let (q, cache) = models.encoder.forward_traced(ex.view)?;
            let comp = arcface_loss(&q, comp_head, label)?;
            comp_sum += comp.loss;
            models.encoder.backward(&cache, &comp.grad_feature, &mut grads.encoder);
            if terms.shared_head {
                grads.mixer_head.add_assign(&comp.grad_prototypes);
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    let losses = StepLosses {
        disc: terms.disc.then_some(disc_sum * inv),
        comp: terms.comp.then_some(comp_sum * inv),
    };
    Ok((grads, losses))
}

/// One optimizer step followed by the classifier moving average (or, with a
/// shared head, a re-synchronisation of `ω^q`).
pub fn joint_step(
    batch: &[Example<'_>],
    models: &mut Models,
    phase: Phase,
    shared_head: bool,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let terms = LossTerms {
        disc: phase != Phase::EncoderOnly,
        comp: phase != Phase::MixerOnly,
        shared_head,
    };
    let (grads, losses) = loss_gradients(batch, models, terms)?;
    let sgd = Sgd {
        weight_decay: cfg.weight_decay,
    };
    if terms.disc {
        sgd.step(lr, models.gallery.tensors_mut(), grads.gallery.tensors());
    }
    if terms.comp {
        sgd.step(lr, models.encoder.tensors_mut(), grads.encoder.tensors());
    }
    if terms.disc || shared_head {
        sgd.step(lr, [&mut models.mixer_head.prototypes], [&grads.mixer_head]);
    }
    if shared_head {
        models.query_head = models.mixer_head.clone();
    } else {
        momentum_update(&mut models.query_head, &models.mixer_head, cfg.momentum)?;
    }
    Ok(losses)
}

/// Epoch-mean losses. In two-stage training the encoder stage continues the
/// epoch numbering after the mixer stage, and each stage reports only its own
/// loss.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLosses {
    pub epoch: usize,
    pub disc: Option<f64>,
    pub comp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainReport {
    pub seed: u64,
    pub mode: TrainMode,
    pub momentum: f64,
    pub steps: usize,
    pub epochs: Vec<EpochLosses>,
}

fn check_data(data: &[Example<'_>], schema: &[FamilySchema], classes: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("no training items".into()));
    }
    for ex in data {
        ex.bundle.conforms(schema)?;
        if label_of(ex.bundle)? >= classes {
            return Err(Error::Schema(format!("label of item {} out of range", ex.bundle.id)));
        }
    }
    Ok(())
}

/// Step schedule shared by every stage: shuffled batches and their learning
/// rates.
struct Schedule {
    per_epoch: usize,
    total: usize,
    warmup: usize,
}

impl Schedule {
    fn new(items: usize, cfg: &TrainConfig) -> Self {
        let per_epoch = items.div_ceil(cfg.batch_size);
        Schedule {
            per_epoch,
            total: per_epoch * cfg.epochs,
            warmup: per_epoch * cfg.warmup_epochs,
        }
    }

    fn lr(&self, cfg: &TrainConfig, epoch: usize, batch: usize) -> f64 {
        warmup_linear_decay(cfg.learning_rate, epoch * self.per_epoch + batch, self.total, self.warmup)
    }
}

/// Runs `epochs` shuffled epochs, calling `step(batch, lr)` for every batch
/// and collecting batch-size-weighted mean losses per epoch.
fn run_stage(
    data: &[Example<'_>],
    cfg: &TrainConfig,
    shuffle_stream: u64,
    first_epoch: usize,
    mut step: impl FnMut(&[Example<'_>], f64) -> Result<StepLosses>,
) -> Result<Vec<EpochLosses>> {
    let schedule = Schedule::new(data.len(), cfg);
    let mut shuffle = rng::stream(cfg.seed, shuffle_stream);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_index = first_epoch + epoch;
        order.shuffle(&mut shuffle);
        let (mut disc, mut comp) = (None::<f64>, None::<f64>);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i]));
            // Degenerate features mid-training mean the weights blew up.
            let l = match step(&batch, schedule.lr(cfg, epoch, b)) {
                Err(Error::Degenerate(_)) => return Err(Error::Diverged { epoch: epoch_index }),
                r => r?,
            };
            if !l.is_finite() {
                return Err(Error::Diverged { epoch: epoch_index });
            }
            let w = chunk.len() as f64;
            if let Some(v) = l.disc {
                *disc.get_or_insert(0.0) += v * w;
            }
            if let Some(v) = l.comp {
                *comp.get_or_insert(0.0) += v * w;
            }
        }
        let n = data.len() as f64;
        epochs.push(EpochLosses {
            epoch: epoch_index,
            disc: disc.map(|v| v / n),
            comp: comp.map(|v| v / n),
        });
    }
    Ok(epochs)
}

const MIXER_SHUFFLE: u64 = 2;
const ENCODER_SHUFFLE: u64 = 3;

/// Training settings that do not matter to the mixer in decoupled modes.
fn mixer_view(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        momentum: 0.0,
        mode: TrainMode::Joint,
        ..*cfg
    }
}

/// The mixer half of a decoupled run. Without a shared head nothing flows
/// from the encoder into the mixer, so one mixer run can be completed by
/// several encoder runs (different `α`, joint or two-stage) with results
/// bit-identical to training each combination from scratch.
#[derive(Clone, Debug)]
pub struct MixerRun {
    /// Trained mixer and `ω^mix`; the encoder and `ω^q` are still at their
    /// initial values.
    pub models: Models,
    pub epochs: Vec<EpochLosses>,
    /// `ω^mix` after every optimizer step.
    pub head_path: Vec<Matrix>,
    config: TrainConfig,
    items: usize,
}

/// Trains the mixer and `ω^mix` alone with `ℓ_disc`, recording the classifier
/// after every step.
pub fn train_mixer(
    data: &[Example<'_>],
    schema: &[FamilySchema],
    query_dim: usize,
    classes: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<MixerRun> {
    cfg.validate()?;
    check_data(data, schema, classes)?;
    let mut models = model_cfg.init(schema, query_dim, classes, cfg)?;
    let start_head = models.query_head.clone();
    let mut head_path = Vec::new();
    let epochs = run_stage(data, cfg, MIXER_SHUFFLE, 0, |batch, lr| {
        let l = joint_step(batch, &mut models, Phase::MixerOnly, false, lr, cfg)?;
        if !models.is_finite() {
            return Err(Error::Degenerate("mixer weights"));
        }
        head_path.push(models.mixer_head.prototypes.clone());
        Ok(l)
    })?;
    models.query_head = start_head;
    Ok(MixerRun {
        models,
        epochs,
        head_path,
        config: mixer_view(cfg),
        items: data.len(),
    })
}

/// Completes a [`MixerRun`] by training the query encoder. `cfg.mode` picks
/// joint (`ω^q` follows `ω^mix` step by step) or two-stage (`ω^q` follows the
/// frozen final `ω^mix` over a second pass through the data).
pub fn train_encoder(run: &MixerRun, data: &[Example<'_>], cfg: &TrainConfig) -> Result<(TrainReport, Models)> {
    cfg.validate()?;
    if mixer_view(cfg) != run.config || data.len() != run.items {
        return Err(Error::Config("encoder run does not match the mixer run".into()));
    }
    let mut models = run.models.clone();
    let sgd = Sgd {
        weight_decay: cfg.weight_decay,
    };
    let terms = LossTerms {
        disc: false,
        comp: true,
        shared_head: false,
    };
    let mut step = 0;
    let encoder_step = |batch: &[Example<'_>], lr: f64, models: &mut Models, target: &Matrix| {
        let (grads, losses) = loss_gradients(batch, models, terms)?;
        sgd.step(lr, models.encoder.tensors_mut(), grads.encoder.tensors());
        momentum_toward(&mut models.query_head, target, cfg.momentum)?;
        if !models.is_finite() {
            return Err(Error::Degenerate("encoder weights"));
        }
        Ok(losses)
    };
    let (epochs, steps) = match cfg.mode {
        TrainMode::Joint => {
            let comp = run_stage(data, cfg, MIXER_SHUFFLE, 0, |batch, lr| {
                let l = encoder_step(batch, lr, &mut models, &run.head_path[step])?;
                step += 1;
                Ok(l)
            })?;
            let epochs = run
                .epochs
                .iter()
                .zip(comp)
                .map(|(d, c)| EpochLosses {
                    epoch: d.epoch,
                    disc: d.disc,
                    comp: c.comp,
                })
                .collect();
            (epochs, run.head_path.len())
        }
        TrainMode::TwoStage => {
            for w in &run.head_path {
                momentum_toward(&mut models.query_head, w, cfg.momentum)?;
            }
            let frozen = models.mixer_head.prototypes.clone();
            let comp = run_stage(data, cfg, ENCODER_SHUFFLE, run.epochs.len(), |batch, lr| {
                step += 1;
                encoder_step(batch, lr, &mut models, &frozen)
            })?;
            let mut epochs = run.epochs.clone();
            epochs.extend(comp);
            (epochs, run.head_path.len() + step)
        }
        TrainMode::Coupled => {
            return Err(Error::Config("a shared head couples the mixer to the encoder".into()));
        }
    };
    let report = TrainReport {
        seed: cfg.seed,
        mode: cfg.mode,
        momentum: cfg.momentum,
        steps,
        epochs,
    };
    Ok((report, models))
}

/// Full training run. Deterministic for a fixed configuration: weights come
/// from stream 1 of the seed and batches from per-stage shuffle streams, so
/// the mixer follows the same trajectory in joint and two-stage runs and for
/// every `α`.
pub fn train(
    data: &[Example<'_>],
    schema: &[FamilySchema],
    query_dim: usize,
    classes: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(TrainReport, Models)> {
    if cfg.mode != TrainMode::Coupled {
        let run = train_mixer(data, schema, query_dim, classes, model_cfg, cfg)?;
        return train_encoder(&run, data, cfg);
    }
    cfg.validate()?;
    check_data(data, schema, classes)?;
    let mut models = model_cfg.init(schema, query_dim, classes, cfg)?;
    let mut steps = 0;
    let epochs = run_stage(data, cfg, MIXER_SHUFFLE, 0, |batch, lr| {
        steps += 1;
        let l = joint_step(batch, &mut models, Phase::Joint, true, lr, cfg)?;
        if !models.is_finite() {
            return Err(Error::Degenerate("weights"));
        }
        Ok(l)
    })?;
    let report = TrainReport {
        seed: cfg.seed,
        mode: cfg.mode,
        momentum: cfg.momentum,
        steps,
        epochs,
    };
    Ok((report, models))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, GenSpec, SynthDataset};

    fn tiny() -> SynthDataset {
        generate(&GenSpec {
            classes: 4,
            items_per_class: 5,
            train_per_class: 2,
            query_per_class: 1,
            ..GenSpec::default()
        })
        .unwrap()
    }

    fn examples(ds: &SynthDataset) -> Vec<Example<'_>> {
        ds.train
            .iter()
            .map(|i| Example {
                bundle: &i.bundle,
                view: &i.view,
            })
            .collect()
    }

    fn small_models() -> ModelConfig {
        let mut m = ModelConfig::default();
        m.mixer.dim = 8;
        m.mixer.hidden = 16;
        m.mixer.heads = 2;
        m.mixer.depth = 2;
        m.encoder_hidden = 8;
        m.baseline_hidden = vec![16];
        m
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        }
    }

    fn run(ds: &SynthDataset, cfg: &TrainConfig) -> (TrainReport, Models) {
        train(&examples(ds), &ds.schema, ds.query_dim, ds.classes, &small_models(), cfg).unwrap()
    }

    #[test]
    fn smoke_run_reports_every_epoch() {
        let ds = tiny();
        for mode in [TrainMode::Joint, TrainMode::TwoStage, TrainMode::Coupled] {
            let (report, _) = run(&ds, &TrainConfig { mode, ..quick() });
            let stages = if mode == TrainMode::TwoStage { 2 } else { 1 };
            assert_eq!(report.epochs.len(), 2 * stages);
            assert_eq!(report.steps, 3 * 2 * stages);
            for (i, e) in report.epochs.iter().enumerate() {
                assert_eq!(e.epoch, i);
                let stage_two = mode == TrainMode::TwoStage && i >= 2;
                let stage_one = mode == TrainMode::TwoStage && i < 2;
                assert_eq!(e.disc.is_some(), !stage_two);
                assert_eq!(e.comp.is_some(), !stage_one);
                for v in e.disc.iter().chain(&e.comp) {
                    assert!(v.is_finite() && *v >= 0.0);
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny();
        let a = run(&ds, &quick());
        let b = run(&ds, &quick());
        assert_eq!(a, b);
        let c = run(&ds, &TrainConfig { seed: 1, ..quick() });
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn mixer_trajectory_ignores_the_encoder_side() {
        let ds = tiny();
        let joint = run(&ds, &quick()).1;
        let slow = run(&ds, &TrainConfig { momentum: 0.0, ..quick() }).1;
        let staged = run(&ds, &TrainConfig { mode: TrainMode::TwoStage, ..quick() }).1;
        assert_eq!(joint.gallery, slow.gallery);
        assert_eq!(joint.gallery, staged.gallery);
        assert_eq!(joint.mixer_head, staged.mixer_head);
        assert_ne!(joint.encoder, slow.encoder);
    }

    /// Straightforward loop over `joint_step`: every network updated in the
    /// same step, stages run back to back.
    fn reference(ds: &SynthDataset, cfg: &TrainConfig) -> Models {
        let ex = examples(ds);
        let mut models = small_models().init(&ds.schema, ds.query_dim, ds.classes, cfg).unwrap();
        let stages: &[(Phase, u64)] = match cfg.mode {
            TrainMode::Joint => &[(Phase::Joint, 2)],
            TrainMode::TwoStage => &[(Phase::MixerOnly, 2), (Phase::EncoderOnly, 3)],
            TrainMode::Coupled => &[(Phase::Joint, 2)],
        };
        let per_epoch = ex.len().div_ceil(cfg.batch_size);
        let total = per_epoch * cfg.epochs;
        for &(phase, stream) in stages {
            let mut shuffle = rng::stream(cfg.seed, stream);
            let mut order: Vec<usize> = (0..ex.len()).collect();
            for epoch in 0..cfg.epochs {
                order.shuffle(&mut shuffle);
                for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                    let batch: Vec<Example<'_>> = chunk.iter().map(|&i| ex[i]).collect();
                    let lr = warmup_linear_decay(
                        cfg.learning_rate,
                        epoch * per_epoch + b,
                        total,
                        per_epoch * cfg.warmup_epochs,
                    );
                    let shared = cfg.mode == TrainMode::Coupled;
                    joint_step(&batch, &mut models, phase, shared, lr, cfg).unwrap();
                }
            }
        }
        models
    }

    #[test]
    fn split_training_matches_simultaneous_updates() {
        let ds = tiny();
        for mode in [TrainMode::Joint, TrainMode::TwoStage, TrainMode::Coupled] {
            for momentum in [0.0, 0.9] {
                let cfg = TrainConfig {
                    mode,
                    momentum,
                    epochs: 3,
                    warmup_epochs: 1,
                    ..quick()
                };
                assert_eq!(run(&ds, &cfg).1, reference(&ds, &cfg), "{mode:?} α={momentum}");
            }
        }
    }

    #[test]
    fn one_mixer_run_serves_many_encoder_runs() {
        let ds = tiny();
        let ex = examples(&ds);
        let cfg = quick();
        let mixer = train_mixer(&ex, &ds.schema, ds.query_dim, ds.classes, &small_models(), &cfg).unwrap();
        for (mode, momentum) in [(TrainMode::Joint, 0.5), (TrainMode::TwoStage, 0.99)] {
            let c = TrainConfig { mode, momentum, ..cfg };
            assert_eq!(train_encoder(&mixer, &ex, &c).unwrap(), run(&ds, &c));
        }
        let other = TrainConfig { learning_rate: 0.5, ..cfg };
        assert!(matches!(train_encoder(&mixer, &ex, &other), Err(Error::Config(_))));
        let coupled = TrainConfig { mode: TrainMode::Coupled, ..cfg };
        assert!(matches!(train_encoder(&mixer, &ex, &coupled), Err(Error::Config(_))));
    }

    #[test]
    fn zero_learning_rate_step_changes_nothing() {
        let ds = tiny();
        let ex = examples(&ds);
        let cfg = quick();
        let mut models = small_models().init(&ds.schema, ds.query_dim, ds.classes, &cfg).unwrap();
        let before = models.clone();
        for phase in [Phase::Joint, Phase::MixerOnly, Phase::EncoderOnly] {
            let l = joint_step(&ex[..3], &mut models, phase, false, 0.0, &cfg).unwrap();
            for v in l.disc.iter().chain(&l.comp) {
                assert!(v.is_finite());
            }
            assert_eq!(models.gallery, before.gallery);
            assert_eq!(models.encoder, before.encoder);
            assert_eq!(models.mixer_head, before.mixer_head);
            // α·x + (1 − α)·x need not round back to x.
            let (q, w) = (models.query_head.prototypes.as_slice(), before.query_head.prototypes.as_slice());
            for (a, b) in q.iter().zip(w) {
                assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn compatibility_loss_leaves_mixer_side_untouched() {
        let ds = tiny();
        let ex = examples(&ds);
        let models = small_models().init(&ds.schema, ds.query_dim, ds.classes, &quick()).unwrap();
        let terms = LossTerms {
            disc: false,
            comp: true,
            shared_head: false,
        };
        let (grads, _) = loss_gradients(&ex, &models, terms).unwrap();
        for t in grads.gallery.tensors() {
            assert!(t.as_slice().iter().all(|&v| v == 0.0));
        }
        assert!(grads.mixer_head.as_slice().iter().all(|&v| v == 0.0));
        assert!(grads.query_head.as_slice().iter().all(|&v| v == 0.0));
        assert!(grads.encoder.tensors().iter().any(|t| t.as_slice().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn shared_head_receives_both_losses() {
        let ds = tiny();
        let ex = examples(&ds);
        let models = small_models().init(&ds.schema, ds.query_dim, ds.classes, &quick()).unwrap();
        let terms = |disc, comp| LossTerms {
            disc,
            comp,
            shared_head: true,
        };
        let (only_disc, _) = loss_gradients(&ex, &models, terms(true, false)).unwrap();
        let (only_comp, _) = loss_gradients(&ex, &models, terms(false, true)).unwrap();
        let (both, _) = loss_gradients(&ex, &models, terms(true, true)).unwrap();
        let mut sum = only_disc.mixer_head.clone();
        sum.add_assign(&only_comp.mixer_head);
        for (a, b) in sum.as_slice().iter().zip(both.mixer_head.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn unlabeled_items_are_schema_errors() {
        let ds = tiny();
        let mut bundle = ds.train[0].bundle.clone();
        bundle.label = None;
        let ex = [Example {
            bundle: &bundle,
            view: &ds.train[0].view,
        }];
        let r = train(&ex, &ds.schema, ds.query_dim, ds.classes, &small_models(), &quick());
        assert!(matches!(r, Err(Error::Schema(_))));
    }

    #[test]
    fn default_encoder_is_lighter_than_the_mixer() {
        let ds = generate(&GenSpec::default()).unwrap();
        let m = ModelConfig::default()
            .init(&ds.schema, ds.query_dim, ds.classes, &TrainConfig::default())
            .unwrap();
        let count = |ts: Vec<&Matrix>| ts.iter().map(|t| t.len()).sum::<usize>();
        assert!(count(m.encoder.tensors()) < count(m.gallery.tensors()));
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(TrainConfig { momentum: 1.0, ..quick() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..quick() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..quick() }.validate().is_err());
        assert!(TrainConfig { margin: 2.0, ..quick() }.validate().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let ds = tiny();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            weight_decay: 0.0,
            ..quick()
        };
        let r = train(&examples(&ds), &ds.schema, ds.query_dim, ds.classes, &small_models(), &cfg);
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }
}

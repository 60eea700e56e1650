//! Per-phase pipeline: synthesizer fitting, representation learning on new data plus
//! synthetic old data, head refinement with the extractor frozen, then evaluation.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    adaptive_factors, cross_entropy, gce_loss, hkd_loss, kd_baseline, lce_loss, rrl_loss, ClassCounters,
    KdTemperature, LossWeights, RelationTransforms, ScaleFactors, TripletSelection,
};
use crate::model::{snapshot, BackboneConfig, IncrementalModel, ModelSnapshot};
use crate::nn::{Ctx, HasBatchNorm, Mode};
use crate::optim::{multistep_lr, Sgd};
use crate::protocol::{cumulative_test_view, task_train_view, DatasetView, LabelMode, TaskSchedule};
use crate::synthesizer::{sample, train_synthesizer, GeneratorNet, SynthLossValues, SynthesisConfig, SyntheticBatch};
use crate::tensor::{Scalar, Tensor};

/// Loss switches for ablations. Each removes or swaps exactly one part of the pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_rkd: bool,
    pub no_hkd: bool,
    pub no_chr: bool,
    /// Cross-entropy over the full head (new and synthetic data) instead of the local term.
    pub global_ce: bool,
    /// Softened-logit KL instead of the absolute-difference distillation.
    pub baseline_kd: bool,
    /// No synthetic data, no distillation, no refinement: plain cross-entropy on new data.
    pub naive_finetune: bool,
}

impl Ablation {
    /// Stable variant name used in reports.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.naive_finetune, "naive_finetune"),
            (self.no_rkd, "no_rkd"),
            (self.no_hkd, "no_hkd"),
            (self.no_chr, "no_chr"),
            (self.global_ce, "global_ce"),
            (self.baseline_kd, "baseline_kd"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs of supervised (first phase) or representation learning (later phases).
    pub rrl_epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub chr_epochs: usize,
    pub chr_lr: f64,
    pub kd_temperature: f64,
    /// Cap on relational triplets per batch; 0 always enumerates all of them.
    pub rkd_max_triplets: usize,
    pub lambda: LossWeights,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rrl_epochs: 20,
            lr: 0.1,
            milestones: vec![10, 15],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            chr_epochs: 10,
            chr_lr: 0.005,
            kd_temperature: 2.0,
            rkd_max_triplets: 100_000,
            lambda: LossWeights::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    /// Long-schedule settings: 160 epochs, decay at 80/120, 40 refinement epochs.
    pub fn long_schedule(weight_decay: f64) -> Self {
        TrainConfig {
            rrl_epochs: 160,
            milestones: vec![80, 120],
            weight_decay,
            batch_size: 128,
            chr_epochs: 40,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("trainer.{}", key),
                message: message.into(),
            })
        };
        for (k, v) in [
            ("lr", self.lr),
            ("chr_lr", self.chr_lr),
            ("lr_decay", self.lr_decay),
            ("kd_temperature", self.kd_temperature),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(k, "must be positive");
            }
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be nonnegative");
        }
        if self.batch_size < 3 {
            return bad("batch_size", "must be at least 3");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones", "must be strictly increasing");
        }
        for (k, v) in [("lce", self.lambda.lce), ("hkd", self.lambda.hkd), ("rkd", self.lambda.rkd)] {
            if !(v >= 0.0) {
                return bad(&format!("lambda.{}", k), "must be nonnegative");
            }
        }
        Ok(())
    }
}

/// Seed streams used within a phase.
#[derive(Clone, Copy, Debug)]
pub enum Purpose {
    Init = 1,
    Synthesis = 2,
    Rrl = 3,
    Chr = 4,
    Expansion = 5,
}

/// Generator for one (seed, phase, purpose) triple, so a phase can be replayed or
/// resumed without running the ones before it.
pub fn phase_rng(seed: u64, phase: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((phase as u64) << 8) | purpose as u64);
    r
}

/// Everything carried from one phase to the next.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PhaseState<T> {
    /// Number of completed phases.
    pub phase: usize,
    pub backbone: BackboneConfig,
    pub model: Option<IncrementalModel<T>>,
    pub snapshot: Option<ModelSnapshot<T>>,
    #[serde(skip)]
    pub generator: Option<GeneratorNet<T>>,
    #[serde(skip)]
    pub transforms: Option<RelationTransforms<T>>,
    pub factors: Option<ScaleFactors>,
    pub counters: ClassCounters,
}

impl<T: Scalar> PhaseState<T> {
    pub fn new(backbone: BackboneConfig) -> Self {
        PhaseState {
            phase: 0,
            backbone,
            model: None,
            snapshot: None,
            generator: None,
            transforms: None,
            factors: None,
            counters: ClassCounters::default(),
        }
    }
}

/// Loss components of one step. Raw values are unweighted; the weighted ones sum to `total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RrlBreakdown {
    pub classification: f64,
    pub hkd: f64,
    pub rkd: f64,
    pub weighted_classification: f64,
    pub weighted_hkd: f64,
    pub weighted_rkd: f64,
    pub total: f64,
}

impl RrlBreakdown {
    fn accumulate(&mut self, o: &RrlBreakdown) {
        self.classification += o.classification;
        self.hkd += o.hkd;
        self.rkd += o.rkd;
        self.weighted_classification += o.weighted_classification;
        self.weighted_hkd += o.weighted_hkd;
        self.weighted_rkd += o.weighted_rkd;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        for v in [
            &mut self.classification,
            &mut self.hkd,
            &mut self.rkd,
            &mut self.weighted_classification,
            &mut self.weighted_hkd,
            &mut self.weighted_rkd,
            &mut self.total,
        ] {
            *v *= s;
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub phase: usize,
    pub n_learned_classes: usize,
    pub accuracy: f64,
    /// Mean loss breakdown per training epoch.
    pub epoch_losses: Vec<RrlBreakdown>,
    /// Last synthesis step, when a generator was trained.
    pub synthesis: Option<SynthLossValues>,
    pub factors: Option<ScaleFactors>,
    pub chr_counts: Option<Vec<u64>>,
    pub seconds: f64,
}

/// Shuffled index batches; a trailing batch smaller than 3 is dropped.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).filter(|c| c.len() >= 3).map(|c| c.to_vec()).collect()
}

fn augmented<T: Scalar>(view: &DatasetView<'_>, dataset: &Dataset, positions: &[usize], rng: &mut ChaCha8Rng) -> (Tensor<T>, Vec<usize>) {
    let (mut x, y) = view.batch(positions);
    dataset.augmentation.apply(&mut x, rng);
    (x.cast(), y)
}

/// Graph-level objective of one representation-learning step.
///
/// The new batch runs through the live model with batch statistics; the synthetic batch
/// runs with running statistics, the same mode the snapshot uses, so the two agree
/// exactly right after a snapshot. Returns the loss, its breakdown and the batch-norm
/// statistics gathered from the new batch.
#[allow(clippy::too_many_arguments)]
pub fn rrl_objective<T: Scalar>(
    g: &mut Graph<T>,
    model: &IncrementalModel<T>,
    old: &ModelSnapshot<T>,
    transforms: &RelationTransforms<T>,
    factors: &ScaleFactors,
    cfg: &TrainConfig,
    new_images: &Tensor<T>,
    new_local_labels: &[usize],
    synthetic: &SyntheticBatch<T>,
    triplets: &TripletSelection,
) -> Result<(Var, RrlBreakdown, HashMap<u64, BatchStats<T>>)> {
    let ab = cfg.ablation;
    let off = old.class_count();
    let k = model.head.class_count() - off;
    let x_new = g.constant(new_images.clone());
    let mut ctx = Ctx::new(g, Mode::TRAIN);
    let out_new = model.forward(&mut ctx, x_new)?;
    let bn_updates = std::mem::take(&mut ctx.bn_updates);

    let x_syn = g.constant(synthetic.images.clone());
    let mut ctx = Ctx::new(g, Mode::TRAIN_EVAL_BN);
    let out_syn = model.forward(&mut ctx, x_syn)?;

    let cls = if ab.global_ce {
        let both = g.cat_leading(&[out_new.logits, out_syn.logits])?;
        let mut labels: Vec<usize> = new_local_labels.iter().map(|&y| off + y).collect();
        labels.extend_from_slice(&synthetic.labels);
        cross_entropy(g, both, &labels)?
    } else {
        let local = g.narrow_cols(out_new.logits, off, k)?;
        lce_loss(g, local, new_local_labels)?
    };

    let hkd = if ab.no_hkd {
        None
    } else {
        let student_old = g.narrow_cols(out_syn.logits, 0, off)?;
        let teacher = g.constant(synthetic.teacher_logits.clone());
        Some(if ab.baseline_kd {
            kd_baseline(g, teacher, student_old, KdTemperature::new(cfg.kd_temperature)?)?
        } else {
            hkd_loss(g, teacher, student_old, off)?
        })
    };

    let rkd = if ab.no_rkd {
        None
    } else {
        let (teacher_feats, _) = old.infer(new_images)?;
        let t = g.constant(teacher_feats);
        Some(transforms.loss(g, t, out_new.features, triplets)?)
    };

    let val = |g: &Graph<T>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
    let mut b = RrlBreakdown {
        classification: val(g, Some(cls)),
        hkd: val(g, hkd),
        rkd: val(g, rkd),
        ..Default::default()
    };
    b.weighted_classification = factors.effective_lce * b.classification;
    b.weighted_hkd = factors.effective_hkd * b.hkd;
    b.weighted_rkd = factors.effective_rkd * b.rkd;
    let total = rrl_loss(g, cls, hkd, rkd, Some(factors))?;
    b.total = g.value(total).item().as_f64();
    Ok((total, b, bn_updates))
}

/// Plain cross-entropy over the full head on one view with global labels.
fn supervised_epochs<T: Scalar>(
    model: &mut IncrementalModel<T>,
    view: &DatasetView<'_>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RrlBreakdown>> {
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.rrl_epochs);
    for epoch in 0..cfg.rrl_epochs {
        opt.lr = multistep_lr(cfg.lr, &cfg.milestones, cfg.lr_decay, epoch);
        let mut acc = RrlBreakdown::default();
        let batches = epoch_batches(view.len(), cfg.batch_size, rng);
        for pos in &batches {
            let (x, y) = augmented::<T>(view, dataset, pos, rng);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let mut ctx = Ctx::new(&mut g, Mode::TRAIN);
            let out = model.forward(&mut ctx, xv)?;
            let updates = std::mem::take(&mut ctx.bn_updates);
            let loss = cross_entropy(&mut g, out.logits, &y)?;
            let v = g.value(loss).item().as_f64();
            if !v.is_finite() {
                return Err(Error::state("training loss became non-finite"));
            }
            let grads = g.backward(loss)?;
            opt.step(&mut [model], &grads);
            model.extractor.apply_bn_updates(&updates);
            acc.accumulate(&RrlBreakdown {
                classification: v,
                weighted_classification: v,
                total: v,
                ..Default::default()
            });
        }
        log.push(acc.scaled(1.0 / batches.len().max(1) as f64));
    }
    Ok(log)
}

/// State borrowed by the representation-learning loop.
pub struct RrlParts<'a, T: Scalar> {
    pub model: &'a mut IncrementalModel<T>,
    pub old: &'a ModelSnapshot<T>,
    pub generator: &'a GeneratorNet<T>,
    pub transforms: &'a mut RelationTransforms<T>,
    pub factors: &'a ScaleFactors,
}

/// One optimizer step on extractor, head and transforms. Draws as many synthetic
/// samples as there are new images.
pub fn rrl_step<T: Scalar>(
    parts: &mut RrlParts<'_, T>,
    opt: &mut Sgd<T>,
    cfg: &TrainConfig,
    new_images: &Tensor<T>,
    new_local_labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<RrlBreakdown> {
    let n = new_images.dim(0);
    let synthetic = sample(parts.generator, parts.old, n, rng)?;
    let triplets = TripletSelection::for_batch(n, (cfg.rkd_max_triplets > 0).then_some(cfg.rkd_max_triplets), rng);
    let mut g = Graph::new();
    let (loss, b, updates) = rrl_objective(
        &mut g,
        parts.model,
        parts.old,
        parts.transforms,
        parts.factors,
        cfg,
        new_images,
        new_local_labels,
        &synthetic,
        &triplets,
    )?;
    if !b.total.is_finite() {
        return Err(Error::state("representation loss became non-finite"));
    }
    let grads = g.backward(loss)?;
    opt.step(&mut [&mut *parts.model, &mut *parts.transforms], &grads);
    parts.model.extractor.apply_bn_updates(&updates);
    Ok(b)
}

/// Head refinement: extractor frozen, equal real-new and fresh synthetic samples per
/// batch, class-balanced loss over every learned class. Returns the class tallies.
#[allow(clippy::too_many_arguments)]
pub fn chr_loop<T: Scalar>(
    model: &mut IncrementalModel<T>,
    old: &ModelSnapshot<T>,
    generator: &GeneratorNet<T>,
    view: &DatasetView<'_>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClassCounters> {
    let off = old.class_count();
    let mut counters = ClassCounters::new(model.head.class_count());
    let mut opt = Sgd::new(cfg.chr_lr, cfg.momentum, cfg.weight_decay);
    for _ in 0..cfg.chr_epochs {
        for pos in epoch_batches(view.len(), cfg.batch_size, rng) {
            let (x, y_local) = augmented::<T>(view, dataset, &pos, rng);
            let synthetic = sample(generator, old, pos.len(), rng)?;
            let mut labels: Vec<usize> = y_local.iter().map(|&y| off + y).collect();
            labels.extend_from_slice(&synthetic.labels);
            counters.observe(&labels)?;
            let images = Tensor::cat_leading(&[&x, &synthetic.images])?;
            let mut g = Graph::new();
            let xv = g.constant(images);
            let mut ctx = Ctx::new(&mut g, Mode::FROZEN);
            let feats = model.extractor.forward(&mut ctx, xv)?;
            let mut ctx = Ctx::new(&mut g, Mode::TRAIN);
            let logits = model.head.forward(&mut ctx, feats)?;
            let loss = gce_loss(&mut g, logits, &labels, &counters)?;
            if !g.value(loss).item().as_f64().is_finite() {
                return Err(Error::state("refinement loss became non-finite"));
            }
            let grads = g.backward(loss)?;
            opt.step(&mut [&mut model.head], &grads);
        }
    }
    Ok(counters)
}

/// Accuracy over the test data of every class learned up to `task`, argmax over all
/// current logits.
pub fn evaluate_phase<T: Scalar>(model: &IncrementalModel<T>, schedule: &TaskSchedule, dataset: &Dataset, task: usize) -> Result<f64> {
    let view = cumulative_test_view(schedule, dataset, task)?;
    if model.head.class_count() < schedule.seen_classes(task)? {
        return Err(Error::invalid("model has not learned every class of the evaluated tasks"));
    }
    let (x, y) = view.all();
    let pred = model.predict(&x.cast())?;
    crate::metrics::accuracy(&pred, &y)
}

/// Execute the next phase and advance `state`.
pub fn run_phase<T: Scalar>(
    state: &mut PhaseState<T>,
    schedule: &TaskSchedule,
    dataset: &Dataset,
    cfg: &TrainConfig,
    synth: &SynthesisConfig,
    seed: u64,
) -> Result<PhaseResult> {
    let started = Instant::now();
    let i = state.phase + 1;
    if i > schedule.n_tasks() {
        return Err(Error::state(format!(
            "all {} phases already completed",
            schedule.n_tasks()
        )));
    }
    if schedule.n_classes() != dataset.n_classes {
        return Err(Error::invalid("schedule and dataset disagree on the class count"));
    }
    cfg.validate()?;
    let view = task_train_view(schedule, dataset, i, LabelMode::Local)?;
    let global_view = task_train_view(schedule, dataset, i, LabelMode::Global)?;
    let ab = cfg.ablation;
    let mut result = PhaseResult {
        phase: i,
        n_learned_classes: schedule.seen_classes(i)?,
        accuracy: 0.0,
        epoch_losses: Vec::new(),
        synthesis: None,
        factors: None,
        chr_counts: None,
        seconds: 0.0,
    };

    if i == 1 {
        if state.model.is_some() || state.snapshot.is_some() {
            return Err(Error::state("first phase on a state that already holds a model"));
        }
        let mut rng = phase_rng(seed, i, Purpose::Init);
        let mut model = IncrementalModel::new(&state.backbone, dataset.image_shape, schedule.task_sizes[0], &mut rng)?;
        let mut rng = phase_rng(seed, i, Purpose::Rrl);
        result.epoch_losses = supervised_epochs(&mut model, &global_view, dataset, cfg, &mut rng)?;
        state.model = Some(model);
        state.generator = None;
        state.transforms = None;
        state.factors = None;
    } else {
        let old = state
            .snapshot
            .clone()
            .ok_or_else(|| Error::state(format!("phase {} needs the snapshot of phase {}", i, i - 1)))?;
        let mut model = state
            .model
            .take()
            .ok_or_else(|| Error::state("no live model to continue from"))?;
        if old.phase() != i - 1 || model.head.class_count() != schedule.seen_classes(i - 1)? {
            state.model = Some(model);
            return Err(Error::state("phases executed out of order"));
        }
        let n_new = schedule.task_sizes[i - 1];
        let mut rng = phase_rng(seed, i, Purpose::Expansion);
        model.head.expand(n_new, &mut rng)?;

        if ab.naive_finetune {
            let mut rng = phase_rng(seed, i, Purpose::Rrl);
            result.epoch_losses = supervised_epochs(&mut model, &global_view, dataset, cfg, &mut rng)?;
            state.generator = None;
            state.transforms = None;
            state.factors = None;
        } else {
            let mut rng = phase_rng(seed, i, Purpose::Synthesis);
            let (generator, slog) = train_synthesizer(&old, &dataset.normalization, synth, &mut rng)?;
            result.synthesis = slog.steps.last().copied();

            let factors = adaptive_factors(old.class_count(), n_new, cfg.lambda)?;
            let mut rng = phase_rng(seed, i, Purpose::Rrl);
            let mut transforms = RelationTransforms::new(model.extractor.embed_dim(), &mut rng);
            let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
            let mut parts = RrlParts {
                model: &mut model,
                old: &old,
                generator: &generator,
                transforms: &mut transforms,
                factors: &factors,
            };
            for epoch in 0..cfg.rrl_epochs {
                opt.lr = multistep_lr(cfg.lr, &cfg.milestones, cfg.lr_decay, epoch);
                let mut acc = RrlBreakdown::default();
                let batches = epoch_batches(view.len(), cfg.batch_size, &mut rng);
                for pos in &batches {
                    let (x, y) = augmented::<T>(&view, dataset, pos, &mut rng);
                    acc.accumulate(&rrl_step(&mut parts, &mut opt, cfg, &x, &y, &mut rng)?);
                }
                result.epoch_losses.push(acc.scaled(1.0 / batches.len().max(1) as f64));
            }

            if !ab.no_chr {
                let mut rng = phase_rng(seed, i, Purpose::Chr);
                let counters = chr_loop(&mut model, &old, &generator, &view, dataset, cfg, &mut rng)?;
                result.chr_counts = Some(counters.counts().to_vec());
                state.counters = counters;
            }
            result.factors = Some(factors);
            state.generator = Some(generator);
            state.transforms = Some(transforms);
            state.factors = Some(factors);
        }
        state.model = Some(model);
    }

    let model = state.model.as_ref().expect("model set above");
    state.snapshot = Some(snapshot(model, i));
    state.phase = i;
    result.accuracy = evaluate_phase(model, schedule, dataset, i)?;
    result.seconds = started.elapsed().as_secs_f64();
    Ok(result)
}

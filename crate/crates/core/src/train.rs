//! Batch composition, object pretraining, the three activity training
//! strategies, and evaluation.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, Write};

use rand::seq::SliceRandom;

use crate::autograd::Tape;
use crate::multitask::{Head, MixedBatch, MultitaskNet, NetError, Result};
use crate::optim::{sgd_step, SgdConfig};
use crate::relevance::RefinedClassSet;
use crate::rng::{stream, StreamRng};
use crate::tensor::Tensor;
use crate::video::{
    apply_crop, argmax, evenly_spaced, mean_subtract, predict_video, random_fixed_window,
    random_window, sample_segments, ten_crops, FrameClassifier, FrameGeometry, VideoClip,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectImage {
    pub image: Tensor,
    pub label: usize,
}

/// Labelled object images and the label string of every object class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectDataset {
    pub class_labels: Vec<String>,
    pub images: Vec<ObjectImage>,
}

impl ObjectDataset {
    pub fn class_id(&self, label: &str) -> Option<usize> {
        self.class_labels.iter().position(|l| l == label)
    }
}

/// How activity training uses the object data.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    /// Finetune the pretrained network on activities alone.
    Baseline,
    /// Multitask with object classes drawn at random.
    ObjectIncorporated,
    /// Multitask with the object classes chosen by relevance analysis.
    TextGuided { classes: Vec<String> },
}

impl Strategy {
    pub fn text_guided(refined: &RefinedClassSet) -> Self {
        Strategy::TextGuided {
            classes: refined.selected().to_vec(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::ObjectIncorporated => "object_incorporated",
            Strategy::TextGuided { .. } => "text_guided",
        }
    }

    pub fn is_multitask(&self) -> bool {
        !matches!(self, Strategy::Baseline)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub segments: usize,
    pub sgd: SgdConfig,
    pub dropout_rate: f64,
    pub seed: u64,
    pub geometry: FrameGeometry,
    /// Number of randomly drawn object classes for `ObjectIncorporated`;
    /// all classes when unset.
    pub object_class_count: Option<usize>,
    /// Forces the activity-only batch split whatever the strategy.
    pub activity_only: bool,
}

impl TrainConfig {
    pub fn new(strategy: Strategy, sgd: SgdConfig, seed: u64) -> Self {
        Self {
            strategy,
            batch_size: 32,
            segments: 3,
            sgd,
            dropout_rate: 0.25,
            seed,
            geometry: FrameGeometry::default(),
            object_class_count: None,
            activity_only: false,
        }
    }
}

/// Activity/object split of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub activity: usize,
    pub object: usize,
}

/// Multitask: the activity share is half the batch rounded to the nearest
/// multiple of `segments` (ties upward) and objects take the rest.
/// Activity-only: the largest multiple of `segments` that fits, no objects.
pub fn plan_batch(batch_size: usize, segments: usize, multitask: bool) -> Result<BatchPlan> {
    if segments == 0 {
        return Err(NetError::Config("segment count must be positive".into()));
    }
    let activity = if multitask {
        segments * ((batch_size + segments) / (2 * segments))
    } else {
        segments * (batch_size / segments)
    };
    if activity == 0 || activity > batch_size {
        return Err(NetError::Config(format!(
            "batch of {batch_size} cannot hold whole {segments}-segment videos"
        )));
    }
    Ok(BatchPlan {
        activity,
        object: if multitask { batch_size - activity } else { 0 },
    })
}

/// Draws indices without replacement, reshuffling when a pass is exhausted.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    items: Vec<usize>,
    cursor: usize,
    epochs: usize,
    rng: StreamRng,
}

impl EpochSampler {
    pub fn new(items: Vec<usize>, rng: StreamRng) -> Result<Self> {
        if items.is_empty() {
            return Err(NetError::Data("cannot sample from an empty pool".into()));
        }
        let mut s = Self {
            items,
            cursor: 0,
            epochs: 0,
            rng,
        };
        s.items.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_index(&mut self) -> usize {
        if self.cursor == self.items.len() {
            self.items.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epochs += 1;
        }
        self.cursor += 1;
        self.items[self.cursor - 1]
    }

    /// Completed passes over the pool.
    pub fn epochs(&self) -> usize {
        self.epochs
    }
}

/// Source pools and generators for batch composition.
pub struct BatchSource<'a> {
    pub clips: &'a [VideoClip],
    pub objects: &'a ObjectDataset,
    pub activity_sampler: Option<EpochSampler>,
    pub object_sampler: Option<EpochSampler>,
    pub crop_rng: StreamRng,
}

fn activity_input(
    clip: &VideoClip,
    frame: usize,
    mean: &[f64],
    geometry: &FrameGeometry,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    let f = &clip.frames[frame];
    let (h, w) = (f.shape()[1], f.shape()[2]);
    let spec = random_window(h, w, geometry.min_window, geometry.max_window, geometry.output_size, rng)?;
    Ok(apply_crop(&mean_subtract(f, mean)?, &spec)?)
}

fn object_input(image: &Tensor, mean: &[f64], output: usize, rng: &mut StreamRng) -> Result<Tensor> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let spec = random_fixed_window(h, w, output, rng)?;
    Ok(apply_crop(&mean_subtract(image, mean)?, &spec)?)
}

/// Assembles one mixed batch: `plan.activity / segments` videos with one
/// randomly cropped frame per temporal segment, then `plan.object` randomly
/// windowed object images.
pub fn compose_batch(
    source: &mut BatchSource<'_>,
    plan: BatchPlan,
    segments: usize,
    mean: &[f64],
    geometry: &FrameGeometry,
) -> Result<MixedBatch> {
    let mut batch = MixedBatch {
        segments,
        activity_frames: Vec::with_capacity(plan.activity),
        activity_labels: Vec::with_capacity(plan.activity / segments),
        object_images: Vec::with_capacity(plan.object),
        object_labels: Vec::with_capacity(plan.object),
    };
    if plan.activity > 0 {
        let sampler = source
            .activity_sampler
            .as_mut()
            .ok_or_else(|| NetError::Data("no activity pool".into()))?;
        for _ in 0..plan.activity / segments {
            let clip = &source.clips[sampler.next_index()];
            for idx in sample_segments(clip.frames.len(), segments, &mut source.crop_rng)? {
                batch
                    .activity_frames
                    .push(activity_input(clip, idx, mean, geometry, &mut source.crop_rng)?);
            }
            batch.activity_labels.push(clip.label);
        }
    }
    if plan.object > 0 {
        let sampler = source
            .object_sampler
            .as_mut()
            .ok_or_else(|| NetError::Data("no object pool".into()))?;
        for _ in 0..plan.object {
            let item = &source.objects.images[sampler.next_index()];
            batch.object_images.push(object_input(
                &item.image,
                mean,
                geometry.output_size,
                &mut source.crop_rng,
            )?);
            batch.object_labels.push(item.label);
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub total: f64,
    pub activity: Option<f64>,
    pub object: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<IterRecord>,
    pub activity_epochs: usize,
    pub object_epochs: usize,
}

impl MetricsLog {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_tsv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let opt = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |v| v.to_string());
        writeln!(w, "iter\ttotal_loss\tact_loss\tobj_loss\tlr")?;
        for r in &self.records {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                r.iteration,
                r.total,
                opt(r.activity),
                opt(r.object),
                r.lr
            )?;
        }
        Ok(())
    }
}

/// One SGD update on `batch`. Only the trunk and the heads that received
/// samples are bound as trainable, so an absent task's head is untouched.
pub fn train_step(
    net: &mut MultitaskNet,
    batch: &MixedBatch,
    sgd: &SgdConfig,
    iteration: usize,
    dropout_rng: &mut StreamRng,
) -> Result<IterRecord> {
    let mut trainable: HashSet<String> = net.trunk_param_names().into_iter().collect();
    if batch.activity_count() > 0 {
        trainable.extend(net.head_param_names(Head::Activity));
    }
    if batch.object_count() > 0 {
        trainable.extend(net.head_param_names(Head::Object));
    }
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, |n| trainable.contains(n));
    let (total, act, obj) = net.loss_on_tape(&mut tape, &bound, batch, true, dropout_rng)?;
    let record = IterRecord {
        iteration,
        total: tape.value(total).item(),
        activity: act.map(|v| tape.value(v).item()),
        object: obj.map(|v| tape.value(v).item()),
        lr: sgd.lr_at(iteration),
    };
    if !record.total.is_finite() {
        return Err(NetError::Divergence {
            iteration,
            loss: record.total,
        });
    }
    tape.backward(total)?;
    for (name, var) in bound.iter() {
        if trainable.contains(name) {
            let grad = tape.grad(var).expect("trainable leaf has a gradient");
            net.params.accumulate_grad(name, grad)?;
        }
    }
    let mut names: Vec<&str> = trainable.iter().map(String::as_str).collect();
    names.sort_unstable();
    sgd_step(&mut net.params, names, sgd, iteration)?;
    Ok(record)
}

/// Per-channel mean over every activity training frame.
pub fn fit_pixel_mean(clips: &[VideoClip]) -> Result<Vec<f64>> {
    let first = clips
        .first()
        .ok_or_else(|| NetError::Data("no clips to fit the pixel mean on".into()))?;
    let (c, h, w) = first.frame_dims();
    let mut sums = vec![0.0; c];
    let mut count = 0usize;
    for clip in clips {
        for frame in &clip.frames {
            for (ch, plane) in frame.data().chunks_exact(h * w).enumerate() {
                sums[ch] += plane.iter().sum::<f64>();
            }
            count += h * w;
        }
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Settings for the object-only pretraining stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub dropout_rate: f64,
    pub seed: u64,
    pub geometry: FrameGeometry,
}

/// Trains the trunk and object head on object classification alone; the
/// activity head keeps its initial weights.
pub fn pretrain_object(
    net: &mut MultitaskNet,
    objects: &ObjectDataset,
    config: &PretrainConfig,
) -> Result<MetricsLog> {
    if objects.images.is_empty() {
        return Err(NetError::Data("empty object dataset".into()));
    }
    config.sgd.validate()?;
    net.dropout_rate = config.dropout_rate;
    let mut log = MetricsLog::default();
    if config.sgd.total_iterations == 0 || config.batch_size == 0 {
        return Ok(log);
    }
    let no_clips: [VideoClip; 0] = [];
    let mut source = BatchSource {
        clips: &no_clips,
        objects,
        activity_sampler: None,
        object_sampler: Some(EpochSampler::new(
            (0..objects.images.len()).collect(),
            stream(config.seed, "pretrain-batch"),
        )?),
        crop_rng: stream(config.seed, "pretrain-crops"),
    };
    let mut dropout_rng = stream(config.seed, "pretrain-dropout");
    let plan = BatchPlan {
        activity: 0,
        object: config.batch_size,
    };
    let mean = net.pixel_mean.clone();
    for it in 0..config.sgd.total_iterations {
        let batch = compose_batch(&mut source, plan, 1, &mean, &config.geometry)?;
        log.records
            .push(train_step(net, &batch, &config.sgd, it, &mut dropout_rng)?);
    }
    log.object_epochs = source.object_sampler.map_or(0, |s| s.epochs());
    Ok(log)
}

/// Object class ids the strategy trains on.
pub fn strategy_classes(objects: &ObjectDataset, config: &TrainConfig) -> Result<Vec<usize>> {
    let all = objects.class_labels.len();
    match &config.strategy {
        Strategy::Baseline => Ok(Vec::new()),
        Strategy::ObjectIncorporated => {
            let count = config.object_class_count.unwrap_or(all);
            if count == 0 || count > all {
                return Err(NetError::Config(format!(
                    "cannot draw {count} of {all} object classes"
                )));
            }
            let mut ids: Vec<usize> = (0..all).collect();
            ids.shuffle(&mut stream(config.seed, "object-classes"));
            ids.truncate(count);
            ids.sort_unstable();
            Ok(ids)
        }
        Strategy::TextGuided { classes } => {
            if classes.is_empty() {
                return Err(NetError::Config("text-guided training needs a non-empty class set".into()));
            }
            let mut ids = classes
                .iter()
                .map(|label| {
                    objects.class_id(label).ok_or_else(|| {
                        NetError::Config(format!("selected class {label:?} is not in the object dataset"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            ids.sort_unstable();
            Ok(ids)
        }
    }
}

/// Trains the activity task under `config.strategy` for the configured
/// number of iterations.
pub fn train(
    net: &mut MultitaskNet,
    clips: &[VideoClip],
    objects: &ObjectDataset,
    config: &TrainConfig,
) -> Result<MetricsLog> {
    config.sgd.validate()?;
    let mut log = MetricsLog::default();
    if config.sgd.total_iterations == 0 {
        return Ok(log);
    }
    if clips.is_empty() {
        return Err(NetError::Data("no activity clips".into()));
    }
    if let Some(bad) = clips.iter().find(|c| c.label >= net.activity_classes) {
        return Err(NetError::Data(format!("clip {} has label {} out of range", bad.id, bad.label)));
    }
    let multitask = config.strategy.is_multitask() && !config.activity_only;
    let plan = plan_batch(config.batch_size, config.segments, multitask)?;
    net.dropout_rate = config.dropout_rate;

    let object_sampler = if multitask {
        let classes: HashSet<usize> = strategy_classes(objects, config)?.into_iter().collect();
        let pool: Vec<usize> = objects
            .images
            .iter()
            .enumerate()
            .filter(|(_, im)| classes.contains(&im.label))
            .map(|(i, _)| i)
            .collect();
        if pool.is_empty() {
            return Err(NetError::Config(format!(
                "{} strategy has no object images to train on",
                config.strategy
            )));
        }
        Some(EpochSampler::new(pool, stream(config.seed, "batch-object"))?)
    } else {
        None
    };

    let mut source = BatchSource {
        clips,
        objects,
        activity_sampler: Some(EpochSampler::new(
            (0..clips.len()).collect(),
            stream(config.seed, "batch-activity"),
        )?),
        object_sampler,
        crop_rng: stream(config.seed, "crops"),
    };
    let mut dropout_rng = stream(config.seed, "dropout");
    let mean = net.pixel_mean.clone();
    for it in 0..config.sgd.total_iterations {
        let batch = compose_batch(&mut source, plan, config.segments, &mean, &config.geometry)?;
        log.records
            .push(train_step(net, &batch, &config.sgd, it, &mut dropout_rng)?);
    }
    log.activity_epochs = source.activity_sampler.map_or(0, |s| s.epochs());
    log.object_epochs = source.object_sampler.map_or(0, |s| s.epochs());
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Middle frame, centre crop.
    SingleFrame,
    /// 25 evenly spaced frames × 10 crops, probabilities averaged.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn write_tsv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "class\tsupport\tcorrect\tpredicted_counts")?;
        for (i, row) in self.confusion.iter().enumerate() {
            let counts: Vec<String> = row.iter().map(usize::to_string).collect();
            let support: usize = row.iter().sum();
            writeln!(w, "{i}\t{support}\t{}\t{}", row[i], counts.join(","))?;
        }
        writeln!(w, "all\t{}\t{}\t{}", self.total, self.correct, self.accuracy())?;
        Ok(())
    }
}

/// Top-1 video accuracy of any frame classifier.
pub fn evaluate_with<C: FrameClassifier + ?Sized>(
    net: &C,
    classes: usize,
    clips: &[VideoClip],
    mean: &[f64],
    output_size: usize,
    protocol: Protocol,
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(NetError::Data("empty evaluation set".into()));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0;
    for clip in clips {
        if clip.label >= classes {
            return Err(NetError::Data(format!("clip {} label out of range", clip.id)));
        }
        let probs = match protocol {
            Protocol::Full => predict_video(net, clip, mean, output_size)?,
            Protocol::SingleFrame => {
                let frame = &clip.frames[evenly_spaced(clip.frames.len(), 1)[0]];
                let (_, h, w) = clip.frame_dims();
                let centre = ten_crops(h, w, output_size)?[4];
                let input = apply_crop(&mean_subtract(frame, mean)?, &centre)?;
                net.activity_probabilities(&[input])?.remove(0)
            }
        };
        let predicted = argmax(&probs);
        confusion[clip.label][predicted] += 1;
        correct += usize::from(predicted == clip.label);
    }
    Ok(EvalReport {
        correct,
        total: clips.len(),
        confusion,
    })
}

pub fn evaluate(net: &MultitaskNet, clips: &[VideoClip], protocol: Protocol, output_size: usize) -> Result<EvalReport> {
    evaluate_with(net, net.activity_classes, clips, &net.pixel_mean, output_size, protocol)
}

/// Object classification accuracy on centre crops.
pub fn object_accuracy(net: &MultitaskNet, images: &[ObjectImage], output_size: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(NetError::Data("empty object set".into()));
    }
    let mut correct = 0;
    for chunk in images.chunks(256) {
        let inputs = chunk
            .iter()
            .map(|im| {
                let (h, w) = (im.image.shape()[1], im.image.shape()[2]);
                let centre = ten_crops(h, w, output_size)?[4];
                Ok(apply_crop(&mean_subtract(&im.image, &net.pixel_mean)?, &centre)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let logits = net.logits(&crate::multitask::stack(&refs)?, Head::Object)?;
        for (row, im) in logits.data().chunks(net.object_classes).zip(chunk) {
            correct += usize::from(argmax(row) == im.label);
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

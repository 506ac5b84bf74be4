//! The shared-trunk network with separate activity and object softmax heads.
//!
//! The trunk (convolution blocks, global average pooling, one hidden linear
//! layer and dropout) is shared by both tasks; only the final linear
//! classifiers are task specific. A mixed batch runs every sample through the
//! trunk once, then routes activity rows to the activity head and object rows
//! to the object head.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::autograd::{softmax_rows, Tape, Var};
use crate::optim::ParamSet;
use crate::rng::stream;
use crate::tensor::{Tensor, TensorError};
use crate::video::{FrameClassifier, VideoError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: usize, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Video(#[from] VideoError),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Convolutional trunk layout. Each entry of `conv_channels` is a
/// `kernel×kernel` same-padded convolution followed by ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrunkSpec {
    pub in_channels: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
}

impl Default for TrunkSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            conv_channels: vec![8, 16],
            kernel: 3,
            hidden: 64,
        }
    }
}

impl TrunkSpec {
    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden == 0 {
            return Err(NetError::Config("channel and hidden sizes must be positive".into()));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(NetError::Config("the trunk needs at least one non-empty conv layer".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(NetError::Config(format!(
                "same padding needs an odd kernel, got {}",
                self.kernel
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Activity,
    Object,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Activity => "head.activity.",
            Head::Object => "head.object.",
        }
    }
}

pub const PIXEL_MEAN: &str = "input.pixel_mean";

/// Shared trunk plus two classifier heads, with the per-channel pixel mean
/// the inputs are centred by.
#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskNet {
    pub spec: TrunkSpec,
    pub activity_classes: usize,
    pub object_classes: usize,
    pub dropout_rate: f64,
    pub params: ParamSet,
    pub pixel_mean: Vec<f64>,
}

fn glorot(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-s..=s))
}

pub fn build_network(
    activity_classes: usize,
    object_classes: usize,
    spec: &TrunkSpec,
    seed: u64,
) -> Result<MultitaskNet> {
    if activity_classes < 2 || object_classes < 2 {
        return Err(NetError::Config(format!(
            "need at least two classes per head, got {activity_classes} activities and {object_classes} objects"
        )));
    }
    spec.validate()?;
    let mut rng = stream(seed, "init");
    let mut params = ParamSet::new();
    let k = spec.kernel;
    let mut channels = spec.in_channels;
    for (i, &out) in spec.conv_channels.iter().enumerate() {
        params.insert(
            format!("trunk.conv{i}.weight"),
            glorot(&mut rng, &[out, channels, k, k], channels * k * k, out * k * k),
        );
        params.insert(format!("trunk.conv{i}.bias"), Tensor::zeros(&[out]));
        channels = out;
    }
    params.insert(
        "trunk.fc.weight",
        glorot(&mut rng, &[channels, spec.hidden], channels, spec.hidden),
    );
    params.insert("trunk.fc.bias", Tensor::zeros(&[spec.hidden]));
    for (head, classes) in [(Head::Activity, activity_classes), (Head::Object, object_classes)] {
        params.insert(
            format!("{}weight", head.prefix()),
            glorot(&mut rng, &[spec.hidden, classes], spec.hidden, classes),
        );
        params.insert(format!("{}bias", head.prefix()), Tensor::zeros(&[classes]));
    }
    Ok(MultitaskNet {
        spec: spec.clone(),
        activity_classes,
        object_classes,
        dropout_rate: 0.25,
        params,
        pixel_mean: vec![0.0; spec.in_channels],
    })
}

/// Parameters placed on a tape for one pass.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Binds names to nodes already on a tape.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Per-task losses of one mixed batch. Absent tasks have no loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub activity: Option<f64>,
    pub object: Option<f64>,
}

/// Frames and images of one training step. Activity frames come in runs of
/// `segments` consecutive frames per video.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub segments: usize,
    pub activity_frames: Vec<Tensor>,
    pub activity_labels: Vec<usize>,
    pub object_images: Vec<Tensor>,
    pub object_labels: Vec<usize>,
}

impl MixedBatch {
    pub fn activity_count(&self) -> usize {
        self.activity_frames.len()
    }

    pub fn object_count(&self) -> usize {
        self.object_images.len()
    }

    pub fn len(&self) -> usize {
        self.activity_count() + self.object_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(NetError::Data("empty batch".into()));
        }
        if self.segments == 0 || self.activity_count() != self.activity_labels.len() * self.segments {
            return Err(NetError::Data(format!(
                "{} activity frames for {} videos of {} segments",
                self.activity_count(),
                self.activity_labels.len(),
                self.segments
            )));
        }
        if self.object_count() != self.object_labels.len() {
            return Err(NetError::Data("object images and labels differ in count".into()));
        }
        Ok(())
    }
}

/// Stacks `C×H×W` tensors into one `N×C×H×W` tensor.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| NetError::Data("nothing to stack".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != shape {
            return Err(NetError::Data(format!(
                "cannot stack {:?} with {:?}",
                t.shape(),
                shape
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend_from_slice(&shape);
    Ok(Tensor::new(full, data)?)
}

impl MultitaskNet {
    pub fn trunk_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with("trunk."))
            .map(str::to_string)
            .collect()
    }

    pub fn head_param_names(&self, head: Head) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with(head.prefix()))
            .map(str::to_string)
            .collect()
    }

    /// Puts every parameter on `tape`; those for which `trainable` holds
    /// become gradient-tracking leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| {
                let v = if trainable(name) {
                    tape.param(value.clone())
                } else {
                    tape.constant(value.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Shared features for an `N×C×H×W` input, after the trunk's dropout.
    pub fn trunk_forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let pad = self.spec.kernel / 2;
        let mut x = input;
        for i in 0..self.spec.conv_channels.len() {
            let y = tape.conv2d(x, bound.var(&format!("trunk.conv{i}.weight")), 1, pad)?;
            let y = tape.add_channel_bias(y, bound.var(&format!("trunk.conv{i}.bias")))?;
            x = tape.relu(y);
        }
        let pooled = tape.global_avg_pool(x)?;
        let h = tape.matmul(pooled, bound.var("trunk.fc.weight"))?;
        let h = tape.add_row_bias(h, bound.var("trunk.fc.bias"))?;
        let h = tape.relu(h);
        Ok(tape.dropout(h, self.dropout_rate, training, rng)?)
    }

    pub fn head_forward(&self, tape: &mut Tape, bound: &Bound, features: Var, head: Head) -> Result<Var> {
        let z = tape.matmul(features, bound.var(&format!("{}weight", head.prefix())))?;
        Ok(tape.add_row_bias(z, bound.var(&format!("{}bias", head.prefix())))?)
    }

    /// Logits of one head for a stack of inputs, without dropout.
    pub fn logits(&self, inputs: &Tensor, head: Head) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let x = tape.constant(inputs.clone());
        let mut unused = stream(0, "eval");
        let f = self.trunk_forward(&mut tape, &bound, x, false, &mut unused)?;
        let z = self.head_forward(&mut tape, &bound, f, head)?;
        Ok(tape.value(z).clone())
    }

    /// Records the mixed-batch loss on `tape`. The total is the mean
    /// per-sample cross-entropy, where each video's consensus loss counts
    /// once per segment frame. Returns `(total, activity, object)` nodes.
    pub fn loss_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &MixedBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        batch.validate()?;
        let (na, no) = (batch.activity_count(), batch.object_count());
        let items: Vec<&Tensor> = batch
            .activity_frames
            .iter()
            .chain(&batch.object_images)
            .collect();
        let input = tape.constant(stack(&items)?);
        let features = self.trunk_forward(tape, bound, input, training, rng)?;

        let mut terms = Vec::new();
        let activity = if na > 0 {
            let rows = tape.slice_rows(features, 0, na)?;
            let z = self.head_forward(tape, bound, rows, Head::Activity)?;
            let consensus = tape.group_mean(z, batch.segments)?;
            let (loss, _) = tape.softmax_cross_entropy(consensus, &batch.activity_labels)?;
            terms.push((loss, na as f64 / (na + no) as f64));
            Some(loss)
        } else {
            None
        };
        let object = if no > 0 {
            let rows = tape.slice_rows(features, na, no)?;
            let z = self.head_forward(tape, bound, rows, Head::Object)?;
            let (loss, _) = tape.softmax_cross_entropy(z, &batch.object_labels)?;
            terms.push((loss, no as f64 / (na + no) as f64));
            Some(loss)
        } else {
            None
        };
        let total = tape.linear_combination(&terms)?;
        Ok((total, activity, object))
    }

    pub fn forward_loss<R: Rng + ?Sized>(
        &self,
        batch: &MixedBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let (total, a, o) = self.loss_on_tape(&mut tape, &bound, batch, training, rng)?;
        Ok(LossBreakdown {
            total: tape.value(total).item(),
            activity: a.map(|v| tape.value(v).item()),
            object: o.map(|v| tape.value(v).item()),
        })
    }

    /// Checkpoint view: every parameter plus the pixel mean.
    pub fn to_checkpoint(&self) -> ParamSet {
        let mut ps = self.params.clone();
        ps.clear_grads();
        let mean = Tensor::new(vec![self.pixel_mean.len()], self.pixel_mean.clone())
            .expect("non-empty pixel mean");
        ps.insert(PIXEL_MEAN, mean);
        ps
    }

    /// Restores parameters from a checkpoint taken of a network with the
    /// same architecture.
    pub fn load_checkpoint(&mut self, checkpoint: &ParamSet) -> Result<()> {
        let mean = checkpoint
            .get(PIXEL_MEAN)
            .ok_or_else(|| NetError::Config("checkpoint lacks the pixel mean".into()))?;
        if mean.numel() != self.spec.in_channels {
            return Err(NetError::Config("pixel mean has the wrong channel count".into()));
        }
        let expected: Vec<&str> = self.params.names().collect();
        let found: Vec<&str> = checkpoint.names().filter(|&n| n != PIXEL_MEAN).collect();
        if expected != found {
            return Err(NetError::Config(format!(
                "checkpoint tensors {found:?} do not match the network's {expected:?}"
            )));
        }
        for &name in &expected {
            if checkpoint.get(name).map(Tensor::shape) != self.params.get(name).map(Tensor::shape) {
                return Err(NetError::Config(format!("shape mismatch for {name}")));
            }
        }
        let names: Vec<String> = expected.iter().map(|s| s.to_string()).collect();
        for name in names {
            *self.params.get_mut(&name).expect("listed") = checkpoint.get(&name).expect("listed").clone();
        }
        self.pixel_mean = mean.data().to_vec();
        Ok(())
    }
}

const EVAL_CHUNK: usize = 256;

impl FrameClassifier for MultitaskNet {
    fn activity_probabilities(&self, frames: &[Tensor]) -> std::result::Result<Vec<Vec<f64>>, VideoError> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(EVAL_CHUNK) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let input = stack(&refs).map_err(|e| VideoError::Shape(e.to_string()))?;
            let logits = self
                .logits(&input, Head::Activity)
                .map_err(|e| VideoError::Shape(e.to_string()))?;
            let probs = softmax_rows(&logits)?;
            out.extend(probs.data().chunks(self.activity_classes).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net() -> MultitaskNet {
        let spec = TrunkSpec {
            in_channels: 1,
            conv_channels: vec![3, 4],
            kernel: 3,
            hidden: 6,
        };
        build_network(5, 10, &spec, 11).unwrap()
    }

    fn inputs(n: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "inputs");
        Tensor::from_fn(&[n, 1, 6, 6], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn head_shapes_share_trunk() {
        let net = small_net();
        let x = inputs(4, 1);
        assert_eq!(net.logits(&x, Head::Activity).unwrap().shape(), &[4, 5]);
        assert_eq!(net.logits(&x, Head::Object).unwrap().shape(), &[4, 10]);
    }

    #[test]
    fn trunk_perturbation_moves_both_heads() {
        let net = small_net();
        let x = inputs(3, 2);
        let mut moved = net.clone();
        moved.params.get_mut("trunk.conv0.weight").unwrap().data_mut()[0] += 0.5;
        for head in [Head::Activity, Head::Object] {
            assert_ne!(net.logits(&x, head).unwrap(), moved.logits(&x, head).unwrap());
        }
    }

    #[test]
    fn object_head_perturbation_leaves_activity_logits() {
        let net = small_net();
        let x = inputs(3, 3);
        let mut moved = net.clone();
        moved.params.get_mut("head.object.weight").unwrap().data_mut()[7] += 3.0;
        assert_eq!(net.logits(&x, Head::Activity).unwrap(), moved.logits(&x, Head::Activity).unwrap());
        assert_ne!(net.logits(&x, Head::Object).unwrap(), moved.logits(&x, Head::Object).unwrap());
    }

    #[test]
    fn invalid_architectures() {
        let spec = TrunkSpec::default();
        assert!(matches!(build_network(1, 10, &spec, 0), Err(NetError::Config(_))));
        let even = TrunkSpec { kernel: 2, ..TrunkSpec::default() };
        assert!(matches!(build_network(5, 10, &even, 0), Err(NetError::Config(_))));
        let empty = TrunkSpec { conv_channels: vec![], ..TrunkSpec::default() };
        assert!(build_network(5, 10, &empty, 0).is_err());
    }

    #[test]
    fn initialization_bounds() {
        let net = build_network(5, 20, &TrunkSpec::default(), 4).unwrap();
        let w = net.params.get("trunk.conv1.weight").unwrap();
        let s = (6.0f64 / (8 * 9 + 16 * 9) as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= s));
        assert!(net.params.get("trunk.conv1.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    fn batch(net: &MultitaskNet, videos: usize, objects: usize, seed: u64) -> MixedBatch {
        let mut rng = stream(seed, "batch");
        let frame = |rng: &mut crate::rng::StreamRng| Tensor::from_fn(&[1, 6, 6], |_| rng.random_range(-1.0..1.0));
        MixedBatch {
            segments: 3,
            activity_frames: (0..videos * 3).map(|_| frame(&mut rng)).collect(),
            activity_labels: (0..videos).map(|i| i % net.activity_classes).collect(),
            object_images: (0..objects).map(|_| frame(&mut rng)).collect(),
            object_labels: (0..objects).map(|i| (i * 3) % net.object_classes).collect(),
        }
    }

    #[test]
    fn loss_decomposition() {
        let net = small_net();
        let b = batch(&net, 2, 5, 9);
        let mut rng = stream(1, "dropout");
        let l = net.forward_loss(&b, true, &mut rng).unwrap();
        let lhs = l.total * b.len() as f64;
        let rhs = b.activity_count() as f64 * l.activity.unwrap() + b.object_count() as f64 * l.object.unwrap();
        assert!((lhs - rhs).abs() < 1e-12);

        let only_objects = MixedBatch { activity_frames: vec![], activity_labels: vec![], ..b.clone() };
        let l = net.forward_loss(&only_objects, false, &mut rng).unwrap();
        assert_eq!(l.activity, None);
        assert_eq!(Some(l.total), l.object);
    }

    #[test]
    fn one_video_one_image_is_an_even_mean() {
        let mut net = small_net();
        net.dropout_rate = 0.0;
        let b = MixedBatch { segments: 1, ..batch(&net, 0, 0, 0) };
        let mut rng = stream(5, "x");
        let frame = Tensor::from_fn(&[1, 6, 6], |_| rng.random_range(-1.0..1.0));
        let image = Tensor::from_fn(&[1, 6, 6], |_| rng.random_range(-1.0..1.0));
        let b = MixedBatch {
            activity_frames: vec![frame.clone()],
            activity_labels: vec![2],
            object_images: vec![image.clone()],
            object_labels: vec![7],
            ..b
        };
        let l = net.forward_loss(&b, false, &mut rng).unwrap();
        let act = net.logits(&stack(&[&frame]).unwrap(), Head::Activity).unwrap();
        let obj = net.logits(&stack(&[&image]).unwrap(), Head::Object).unwrap();
        let ce = |z: &Tensor, label: usize| -softmax_rows(z).unwrap().data()[label].ln();
        let expected = (ce(&act, 2) + ce(&obj, 7)) / 2.0;
        assert!((l.total - expected).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_labels() {
        let net = small_net();
        let mut b = batch(&net, 1, 1, 2);
        b.object_labels[0] = 10;
        let mut rng = stream(0, "d");
        assert!(matches!(
            net.forward_loss(&b, false, &mut rng),
            Err(NetError::Tensor(TensorError::Label { .. }))
        ));
    }

    #[test]
    fn checkpoint_restores_parameters() {
        let mut net = small_net();
        net.pixel_mean = vec![0.125];
        let ck = net.to_checkpoint();
        let mut other = build_network(5, 10, &net.spec, 99).unwrap();
        other.load_checkpoint(&ck).unwrap();
        assert_eq!(other, net);
        let wrong = build_network(5, 11, &net.spec, 0).unwrap();
        assert!(other.load_checkpoint(&wrong.to_checkpoint()).is_err());
    }
}

//! Frame sampling, cropping and test-time view aggregation for video clips.

use std::fs;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("cannot sample {segments} segments from {frames} frames")]
    Sampling { frames: usize, segments: usize },
    #[error("crop error: {0}")]
    Crop(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("malformed clip file at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VideoError>;

/// Frames tested per clip and crops per frame at evaluation time.
pub const TEST_FRAMES: usize = 25;
pub const CROPS_PER_FRAME: usize = 10;

/// Desk-scale geometry: 16×16 frames, random windows of 10..=16 pixels,
/// network input of 12×12.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGeometry {
    pub frame_size: usize,
    pub min_window: usize,
    pub max_window: usize,
    pub output_size: usize,
}

impl Default for FrameGeometry {
    fn default() -> Self {
        Self {
            frame_size: 16,
            min_window: 10,
            max_window: 16,
            output_size: 12,
        }
    }
}

impl FrameGeometry {
    /// 256-pixel frames, 168..=256 windows, 224 network input.
    pub fn full_resolution() -> Self {
        Self {
            frame_size: 256,
            min_window: 168,
            max_window: 256,
            output_size: 224,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub label: usize,
    pub frames: Vec<Tensor>,
}

impl VideoClip {
    pub fn new(id: impl Into<String>, label: usize, frames: Vec<Tensor>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(VideoError::Shape("a clip needs at least one frame".into()));
        };
        if first.shape().len() != 3 {
            return Err(VideoError::Shape(format!(
                "frames must be C×H×W, got {:?}",
                first.shape()
            )));
        }
        if frames.iter().any(|f| f.shape() != first.shape()) {
            return Err(VideoError::Shape("frames differ in shape".into()));
        }
        Ok(Self {
            id: id.into(),
            label,
            frames,
        })
    }

    /// `(C, H, W)` of every frame.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let s = self.frames[0].shape();
        (s[0], s[1], s[2])
    }

    pub fn encode(&self) -> Vec<u8> {
        let (c, h, w) = self.frame_dims();
        let mut out = format!(
            "CLIP1\n{}\n{}\nframes {} {c} {h} {w}\n",
            self.id,
            self.label,
            self.frames.len()
        )
        .into_bytes();
        for frame in &self.frames {
            for &x in frame.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut line = |what: &str| -> Result<(usize, String)> {
            let start = pos;
            let end = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| clip_err(start, format!("unterminated {what} line")))?;
            pos = start + end + 1;
            let text = std::str::from_utf8(&bytes[start..start + end])
                .map_err(|_| clip_err(start, format!("{what} line is not UTF-8")))?;
            Ok((start, text.to_string()))
        };
        let (_, magic) = line("header")?;
        if magic != "CLIP1" {
            return Err(clip_err(0, "missing CLIP1 header"));
        }
        let (_, id) = line("id")?;
        let (label_at, label) = line("label")?;
        let label: usize = label
            .parse()
            .map_err(|_| clip_err(label_at, format!("bad label {label:?}")))?;
        let (dims_at, dims) = line("dimensions")?;
        let parts: Vec<&str> = dims.split(' ').collect();
        let parsed: Option<Vec<usize>> = match parts.as_slice() {
            ["frames", rest @ ..] if rest.len() == 4 => rest
                .iter()
                .map(|d| d.parse().ok().filter(|&v: &usize| v > 0))
                .collect(),
            _ => None,
        };
        let Some(d) = parsed else {
            return Err(clip_err(dims_at, format!("bad dimension line {dims:?}")));
        };
        let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
        let frame_len = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| clip_err(dims_at, "frame size overflows"))?;
        let total = frame_len
            .checked_mul(n)
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| clip_err(dims_at, "clip size overflows"))?;
        let body = &bytes[pos..];
        if body.len() != total {
            return Err(clip_err(
                pos,
                format!("expected {total} bytes of frame data, found {}", body.len()),
            ));
        }
        let frames = body
            .chunks_exact(frame_len * 8)
            .map(|chunk| {
                let data = chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                Tensor::new(vec![c, h, w], data)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        VideoClip::new(id, label, frames)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn clip_err(offset: usize, detail: impl Into<String>) -> VideoError {
    VideoError::Format {
        offset,
        detail: detail.into(),
    }
}

/// Splits `frame_count` frames into `segments` contiguous runs whose lengths
/// differ by at most one (earlier runs take the extra frames) and draws one
/// index uniformly from each run.
pub fn sample_segments<R: Rng + ?Sized>(
    frame_count: usize,
    segments: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    Ok(segment_bounds(frame_count, segments)?
        .into_iter()
        .map(|(lo, hi)| rng.random_range(lo..=hi))
        .collect())
}

/// Inclusive `(first, last)` frame of each segment.
pub fn segment_bounds(frame_count: usize, segments: usize) -> Result<Vec<(usize, usize)>> {
    if segments == 0 || frame_count < segments {
        return Err(VideoError::Sampling {
            frames: frame_count,
            segments,
        });
    }
    let base = frame_count / segments;
    let extra = frame_count % segments;
    let mut start = 0;
    Ok((0..segments)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let bounds = (start, start + len - 1);
            start += len;
            bounds
        })
        .collect())
}

/// `floor(i·(L−1)/(n−1))` for `i in 0..n`; the middle frame when `n == 1`.
pub fn evenly_spaced(frame_count: usize, n: usize) -> Vec<usize> {
    if frame_count == 0 || n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![(frame_count - 1) / 2];
    }
    (0..n).map(|i| i * (frame_count - 1) / (n - 1)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub window_h: usize,
    pub window_w: usize,
    pub output_size: usize,
    pub flip: bool,
}

impl CropSpec {
    pub fn fits(&self, frame_h: usize, frame_w: usize) -> bool {
        self.output_size > 0
            && self.window_h > 0
            && self.window_w > 0
            && self.top + self.window_h <= frame_h
            && self.left + self.window_w <= frame_w
    }
}

/// A window with independently uniform side lengths in
/// `[min_side, max_side]` placed uniformly inside the frame.
pub fn random_window<R: Rng + ?Sized>(
    frame_h: usize,
    frame_w: usize,
    min_side: usize,
    max_side: usize,
    output_size: usize,
    rng: &mut R,
) -> Result<CropSpec> {
    if min_side == 0 || min_side > max_side || max_side > frame_h.min(frame_w) || output_size == 0 {
        return Err(VideoError::Crop(format!(
            "window range [{min_side}, {max_side}] does not fit a {frame_h}×{frame_w} frame"
        )));
    }
    let window_h = rng.random_range(min_side..=max_side);
    let window_w = rng.random_range(min_side..=max_side);
    let top = rng.random_range(0..=frame_h - window_h);
    let left = rng.random_range(0..=frame_w - window_w);
    Ok(CropSpec {
        top,
        left,
        window_h,
        window_w,
        output_size,
        flip: false,
    })
}

/// A fixed-size window placed uniformly, with no resizing.
pub fn random_fixed_window<R: Rng + ?Sized>(
    frame_h: usize,
    frame_w: usize,
    size: usize,
    rng: &mut R,
) -> Result<CropSpec> {
    random_window(frame_h, frame_w, size, size, size, rng)
}

fn frame_dims(frame: &Tensor) -> Result<(usize, usize, usize)> {
    match frame.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(VideoError::Shape(format!("expected C×H×W frame, got {s:?}"))),
    }
}

/// Sample positions for corner-aligned bilinear resizing of `src` pixels to `dst`.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let x = if dst == 1 {
                (src - 1) as f64 / 2.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let lo = (x.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

/// Extracts the window, resizes it bilinearly to `output_size²` and mirrors
/// it horizontally when requested.
pub fn apply_crop(frame: &Tensor, spec: &CropSpec) -> Result<Tensor> {
    let (c, h, w) = frame_dims(frame)?;
    if !spec.fits(h, w) {
        return Err(VideoError::Crop(format!("{spec:?} does not fit a {h}×{w} frame")));
    }
    let s = spec.output_size;
    let rows = sample_positions(spec.window_h, s);
    let cols = sample_positions(spec.window_w, s);
    let src = frame.data();
    let mut out = vec![0.0; c * s * s];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let at = |r: usize, col: usize| plane[(spec.top + r) * w + spec.left + col];
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                let v = top * (1.0 - fr) + bottom * fr;
                let jj = if spec.flip { s - 1 - j } else { j };
                out[(ch * s + i) * s + jj] = v;
            }
        }
    }
    Ok(Tensor::new(vec![c, s, s], out)?)
}

/// Shifts every channel by its mean value.
pub fn mean_subtract(frame: &Tensor, mean: &[f64]) -> Result<Tensor> {
    let (c, h, w) = frame_dims(frame)?;
    if mean.len() != c {
        return Err(VideoError::Shape(format!(
            "{} channel means for a {c}-channel frame",
            mean.len()
        )));
    }
    let area = h * w;
    let data = frame
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x - mean[i / area])
        .collect();
    Ok(Tensor::new(vec![c, h, w], data)?)
}

/// Top-left, top-right, bottom-left, bottom-right and centre windows of
/// `output_size²`, followed by the same five mirrored.
pub fn ten_crops(frame_h: usize, frame_w: usize, output_size: usize) -> Result<Vec<CropSpec>> {
    if output_size == 0 || frame_h < output_size || frame_w < output_size {
        return Err(VideoError::Crop(format!(
            "{frame_h}×{frame_w} frame is smaller than {output_size}² crops"
        )));
    }
    let (dh, dw) = (frame_h - output_size, frame_w - output_size);
    let offsets = [(0, 0), (0, dw), (dh, 0), (dh, dw), (dh / 2, dw / 2)];
    let spec = |(top, left): (usize, usize), flip| CropSpec {
        top,
        left,
        window_h: output_size,
        window_w: output_size,
        output_size,
        flip,
    };
    Ok(offsets
        .iter()
        .map(|&o| spec(o, false))
        .chain(offsets.iter().map(|&o| spec(o, true)))
        .collect())
}

/// Anything that maps preprocessed `C×S×S` frames to activity probabilities.
pub trait FrameClassifier {
    fn activity_probabilities(&self, frames: &[Tensor]) -> Result<Vec<Vec<f64>>>;
}

/// The per-view probability vectors behind a clip prediction, in
/// frame-major, crop-minor order.
pub fn view_predictions<C: FrameClassifier + ?Sized>(
    net: &C,
    clip: &VideoClip,
    mean: &[f64],
    output_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let (_, h, w) = clip.frame_dims();
    let crops = ten_crops(h, w, output_size)?;
    let indices = evenly_spaced(clip.frames.len(), TEST_FRAMES);
    // Repeated indices (short clips) give identical views; run each frame once.
    let mut unique: Vec<usize> = indices.clone();
    unique.dedup();
    let mut inputs = Vec::with_capacity(unique.len() * crops.len());
    for &i in &unique {
        let centred = mean_subtract(&clip.frames[i], mean)?;
        for spec in &crops {
            inputs.push(apply_crop(&centred, spec)?);
        }
    }
    let probs = net.activity_probabilities(&inputs)?;
    let mut views = Vec::with_capacity(TEST_FRAMES * CROPS_PER_FRAME);
    for &i in &indices {
        let u = unique.iter().position(|&x| x == i).expect("index present");
        views.extend_from_slice(&probs[u * crops.len()..(u + 1) * crops.len()]);
    }
    Ok(views)
}

/// Mean of the per-view probability vectors of a clip.
pub fn predict_video<C: FrameClassifier + ?Sized>(
    net: &C,
    clip: &VideoClip,
    mean: &[f64],
    output_size: usize,
) -> Result<Vec<f64>> {
    Ok(average(&view_predictions(net, clip, mean, output_size)?))
}

/// Running mean, so identical inputs average to themselves exactly.
pub fn average(vectors: &[Vec<f64>]) -> Vec<f64> {
    let k = vectors.first().map_or(0, Vec::len);
    let mut out = vec![0.0; k];
    for (i, v) in vectors.iter().enumerate() {
        let n = (i + 1) as f64;
        for (o, x) in out.iter_mut().zip(v) {
            *o += (x - *o) / n;
        }
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

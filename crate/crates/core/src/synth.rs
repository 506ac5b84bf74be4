//! Synthetic worlds with known activity/object relevance.
//!
//! Every relevant object class owns a grating, every distractor a layout of
//! blobs. Activity clips blend the gratings of the activity's relevant
//! objects over time, so a trunk that recognises those objects already holds
//! the features the activity needs. Distractors appear in no clip.
//!
//! Label embeddings are built in a small latent space where each activity is
//! one axis. Relevant objects point partly along the axes of their
//! activities; distractors live entirely in the orthogonal complement. A
//! random rotation then maps the latent space into the embedding space, which
//! preserves every cosine.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::embeddings::{file_sha256, EmbeddingError, EmbeddingTable};
use crate::rng::{stream, StreamRng};
use crate::tensor::Tensor;
use crate::train::{ObjectDataset, ObjectImage};
use crate::video::{VideoClip, VideoError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub activities: usize,
    pub objects: usize,
    pub relevant_per_activity: usize,
    pub latent_dim: usize,
    pub train_clips_per_activity: usize,
    pub test_clips_per_activity: usize,
    pub train_images_per_object: usize,
    pub test_images_per_object: usize,
    pub frame_size: usize,
    pub frames_per_video: usize,
    pub noise_std: f64,
    pub embed_dim: usize,
    /// Amplitude of the random background grating in every activity frame.
    pub clutter: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            activities: 5,
            objects: 20,
            relevant_per_activity: 2,
            latent_dim: 8,
            train_clips_per_activity: 30,
            test_clips_per_activity: 30,
            train_images_per_object: 50,
            test_images_per_object: 10,
            frame_size: 16,
            frames_per_video: 12,
            noise_std: 0.5,
            embed_dim: 16,
            clutter: 0.5,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Objects relevant to at least one activity.
    pub fn relevant_count(&self) -> usize {
        self.objects / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SynthError::Config(msg));
        let counts = [
            ("activities", self.activities),
            ("objects", self.objects),
            ("relevant_per_activity", self.relevant_per_activity),
            ("latent_dim", self.latent_dim),
            ("frame_size", self.frame_size),
            ("frames_per_video", self.frames_per_video),
            ("embed_dim", self.embed_dim),
            ("train_clips_per_activity", self.train_clips_per_activity),
            ("test_clips_per_activity", self.test_clips_per_activity),
            ("train_images_per_object", self.train_images_per_object),
            ("test_images_per_object", self.test_images_per_object),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be at least 1"));
        }
        let r = self.relevant_count();
        if self.relevant_per_activity > r {
            return bad(format!(
                "{} relevant objects per activity but only {r} of {} objects are relevant",
                self.relevant_per_activity, self.objects
            ));
        }
        if self.activities * self.relevant_per_activity < r {
            return bad(format!(
                "{} activities × {} leave some of the {r} relevant objects unassigned",
                self.activities, self.relevant_per_activity
            ));
        }
        if self.latent_dim <= self.activities {
            return bad(format!(
                "latent_dim {} must exceed the activity count {}",
                self.latent_dim, self.activities
            ));
        }
        if self.embed_dim < self.latent_dim {
            return bad(format!(
                "embed_dim {} is smaller than latent_dim {}",
                self.embed_dim, self.latent_dim
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        if !(self.clutter >= 0.0 && self.clutter.is_finite()) {
            return bad(format!("clutter {} must be finite and non-negative", self.clutter));
        }
        Ok(())
    }
}

/// The appearance of one object class, rendered at a translation.
#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    /// Sinusoid with the given orientation and cycles across the frame.
    Grating { angle: f64, cycles: f64 },
    /// Fixed layout of Gaussian bumps on a torus: `(row, col, amplitude)`.
    Blobs { bumps: Vec<(f64, f64, f64)>, sigma: f64 },
}

impl Texture {
    /// Pixels of a `size²` frame with the pattern shifted by `offset` pixels.
    pub fn render(&self, size: usize, offset: (f64, f64)) -> Vec<f64> {
        let n = size as f64;
        match self {
            Texture::Grating { angle, cycles } => {
                let (s, c) = angle.sin_cos();
                let k = 2.0 * PI * cycles / n;
                (0..size * size)
                    .map(|p| {
                        let (i, j) = ((p / size) as f64 + offset.0, (p % size) as f64 + offset.1);
                        (k * (i * c + j * s)).sin()
                    })
                    .collect()
            }
            Texture::Blobs { bumps, sigma } => {
                let wrap = |d: f64| {
                    let d = d.rem_euclid(n);
                    d.min(n - d)
                };
                (0..size * size)
                    .map(|p| {
                        let (i, j) = ((p / size) as f64, (p % size) as f64);
                        bumps
                            .iter()
                            .map(|&(r, c, amp)| {
                                let (di, dj) = (wrap(i - r - offset.0), wrap(j - c - offset.1));
                                amp * (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
                            })
                            .sum()
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub activity_labels: Vec<String>,
    pub object_labels: Vec<String>,
    /// Object class ids relevant to each activity id.
    pub relevant: Vec<Vec<usize>>,
    pub textures: Vec<Texture>,
    pub embedding_table: EmbeddingTable,
    pub train_clips: Vec<VideoClip>,
    pub test_clips: Vec<VideoClip>,
    pub train_objects: ObjectDataset,
    pub test_objects: Vec<ObjectImage>,
}

impl SyntheticWorld {
    /// Activity label → labels of its truly relevant objects.
    pub fn relevance_truth(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.relevant
            .iter()
            .enumerate()
            .map(|(a, objs)| {
                (
                    self.activity_labels[a].clone(),
                    objs.iter().map(|&o| self.object_labels[o].clone()).collect(),
                )
            })
            .collect()
    }

    /// Every object label relevant to some activity.
    pub fn relevant_union(&self) -> BTreeSet<String> {
        self.relevance_truth().into_values().flatten().collect()
    }

    pub fn is_relevant(&self, object: usize) -> bool {
        self.relevant.iter().any(|r| r.contains(&object))
    }
}

fn gaussian(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

fn normalise(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Random unit vector in the span of the given latent axes.
fn unit_in(axes: std::ops::Range<usize>, dim: usize, rng: &mut StreamRng) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for i in axes {
        v[i] = gaussian(rng);
    }
    normalise(&mut v);
    v
}

/// `rows × cols` matrix with orthonormal columns, by Gram-Schmidt.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// Share of a relevant object's latent vector along its activities' axes.
const RELEVANT_ALIGNMENT: f64 = 0.8;

fn build_embeddings(
    config: &WorldConfig,
    activity_labels: &[String],
    object_labels: &[String],
    relevant: &[Vec<usize>],
    rng: &mut StreamRng,
) -> Result<EmbeddingTable> {
    let (a, l) = (config.activities, config.latent_dim);
    let mut latents: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, label) in activity_labels.iter().enumerate() {
        let mut v = vec![0.0; l];
        v[i] = 1.0;
        latents.push((label.clone(), v));
    }
    let off = (1.0 - RELEVANT_ALIGNMENT * RELEVANT_ALIGNMENT).sqrt();
    for (o, label) in object_labels.iter().enumerate() {
        let owners: Vec<usize> = (0..a).filter(|&x| relevant[x].contains(&o)).collect();
        let mut v = unit_in(a..l, l, rng);
        if !owners.is_empty() {
            let along = RELEVANT_ALIGNMENT / (owners.len() as f64).sqrt();
            v.iter_mut().for_each(|x| *x *= off);
            for &x in &owners {
                v[x] = along;
            }
        }
        latents.push((label.clone(), v));
    }
    let q = orthonormal_columns(config.embed_dim, l, rng);
    let mut table = EmbeddingTable::new(config.embed_dim);
    for (label, z) in latents {
        let e: Vec<f32> = (0..config.embed_dim)
            .map(|r| q.iter().zip(&z).map(|(col, zi)| col[r] * zi).sum::<f64>() as f32)
            .collect();
        table.insert(label.as_bytes(), &e)?;
    }
    Ok(table)
}

/// Gratings on a jittered orientation grid for the relevant objects; bump
/// layouts, which share no orientation structure, for the distractors.
fn textures(relevant: usize, total: usize, size: usize, rng: &mut StreamRng) -> Vec<Texture> {
    let mut angles: Vec<f64> = (0..relevant)
        .map(|i| (i as f64 + rng.random_range(0.2..0.8)) * PI / relevant as f64)
        .collect();
    angles.shuffle(rng);
    let mut out: Vec<Texture> = angles
        .into_iter()
        .map(|angle| Texture::Grating {
            angle,
            cycles: rng.random_range(1.5..3.5),
        })
        .collect();
    let n = size as f64;
    for _ in relevant..total {
        let bumps = (0..3)
            .map(|k| {
                let amp = if k == 0 { 1.5 } else if rng.random::<bool>() { 1.0 } else { -1.0 };
                (rng.random_range(0.0..n), rng.random_range(0.0..n), amp)
            })
            .collect();
        out.push(Texture::Blobs {
            bumps,
            sigma: rng.random_range(1.2..2.2),
        });
    }
    out
}

fn random_offset(size: usize, rng: &mut StreamRng) -> (f64, f64) {
    let n = size as f64;
    (rng.random_range(0.0..n), rng.random_range(0.0..n))
}

fn add_noise(pixels: &mut [f64], std: f64, rng: &mut StreamRng) {
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("validated std");
        pixels.iter_mut().for_each(|p| *p += normal.sample(rng));
    }
}

fn frame_tensor(size: usize, pixels: Vec<f64>) -> Tensor {
    Tensor::new(vec![1, size, size], pixels).expect("size² pixels")
}

fn render_object(texture: &Texture, config: &WorldConfig, rng: &mut StreamRng) -> Tensor {
    let amplitude = rng.random_range(0.8..1.2);
    let mut px: Vec<f64> = texture
        .render(config.frame_size, random_offset(config.frame_size, rng))
        .into_iter()
        .map(|x| amplitude * x)
        .collect();
    add_noise(&mut px, config.noise_std, rng);
    frame_tensor(config.frame_size, px)
}

/// Relevant textures fade in and out over the clip while drifting, over a
/// random background grating that belongs to no class.
fn render_clip(
    id: String,
    label: usize,
    objects: &[&Texture],
    config: &WorldConfig,
    rng: &mut StreamRng,
) -> Result<VideoClip> {
    let n = config.frames_per_video;
    let size = config.frame_size;
    let offset = rng.random_range(0.0..1.0);
    let starts: Vec<(f64, f64)> = objects.iter().map(|_| random_offset(size, rng)).collect();
    let drifts: Vec<(f64, f64)> = objects
        .iter()
        .map(|_| (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)))
        .collect();
    let background = Texture::Grating {
        angle: rng.random_range(0.0..PI),
        cycles: rng.random_range(1.0..4.0),
    };
    let bg_offset = random_offset(size, rng);
    let mut frames = Vec::with_capacity(n);
    for t in 0..n {
        let cycle = offset + t as f64 / n as f64;
        let mut weights: Vec<f64> = (0..objects.len())
            .map(|k| {
                let centre = k as f64 / objects.len() as f64;
                0.5 + 0.5 * (2.0 * PI * (cycle - centre)).cos()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let mut px: Vec<f64> = background
            .render(size, bg_offset)
            .into_iter()
            .map(|x| config.clutter * x)
            .collect();
        for (k, g) in objects.iter().enumerate() {
            let (dt, (s0, s1), (v0, v1)) = (t as f64, starts[k], drifts[k]);
            let layer = g.render(size, (s0 + v0 * dt, s1 + v1 * dt));
            px.iter_mut().zip(layer).for_each(|(p, x)| *p += weights[k] * x);
        }
        add_noise(&mut px, config.noise_std, rng);
        frames.push(frame_tensor(size, px));
    }
    Ok(VideoClip::new(id, label, frames)?)
}

pub fn activity_label(i: usize) -> String {
    format!("activity_{i:02}")
}

/// Relevant objects carry the id of the first activity they belong to.
pub fn object_label(i: usize, owner: Option<usize>) -> String {
    match owner {
        Some(a) => format!("object_obj{i:02}_rel{a:02}"),
        None => format!("object_obj{i:02}"),
    }
}

pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let r = config.relevant_count();
    let k = config.relevant_per_activity;
    let relevant: Vec<Vec<usize>> = (0..config.activities)
        .map(|a| (0..k).map(|j| (a * k + j) % r).collect())
        .collect();
    let activity_labels: Vec<String> = (0..config.activities).map(activity_label).collect();
    let object_labels: Vec<String> = (0..config.objects)
        .map(|o| object_label(o, relevant.iter().position(|rel| rel.contains(&o))))
        .collect();

    let seed = config.seed;
    let embedding_table = build_embeddings(
        config,
        &activity_labels,
        &object_labels,
        &relevant,
        &mut stream(seed, "world-embeddings"),
    )?;
    let textures = textures(r, config.objects, config.frame_size, &mut stream(seed, "world-textures"));

    let mut rng = stream(seed, "world-clips");
    let per_activity = config.train_clips_per_activity + config.test_clips_per_activity;
    let mut clips = Vec::with_capacity(per_activity * config.activities);
    for (a, rel) in relevant.iter().enumerate() {
        let objs: Vec<&Texture> = rel.iter().map(|&o| &textures[o]).collect();
        for c in 0..per_activity {
            clips.push(render_clip(format!("a{a:02}_c{c:03}"), a, &objs, config, &mut rng)?);
        }
    }
    let fraction = config.train_clips_per_activity as f64 / per_activity as f64;
    let (train_clips, test_clips) = split(clips, |c| c.label, fraction, seed ^ 0x5eed)?;

    let mut rng = stream(seed, "world-images");
    let per_object = config.train_images_per_object + config.test_images_per_object;
    let mut images = Vec::with_capacity(per_object * config.objects);
    for (o, tex) in textures.iter().enumerate() {
        for _ in 0..per_object {
            images.push(ObjectImage {
                image: render_object(tex, config, &mut rng),
                label: o,
            });
        }
    }
    let fraction = config.train_images_per_object as f64 / per_object as f64;
    let (train_images, test_objects) = split(images, |im| im.label, fraction, seed ^ 0x1a6e)?;

    Ok(SyntheticWorld {
        config: config.clone(),
        train_objects: ObjectDataset {
            class_labels: object_labels.clone(),
            images: train_images,
        },
        activity_labels,
        object_labels,
        relevant,
        textures,
        embedding_table,
        train_clips,
        test_clips,
        test_objects,
    })
}

/// Per-class stratified split: `round(n·fraction)` of each class to the
/// first part (at least one to each side), original order kept within parts.
pub fn split<T>(
    items: Vec<T>,
    label: impl Fn(&T) -> usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SynthError::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        by_class.entry(label(item)).or_default().push(i);
    }
    let mut rng = stream(seed, "split");
    let mut to_first = vec![false; items.len()];
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(SynthError::Data(format!("class {class} has fewer than two samples")));
        }
        let n = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
        idx.shuffle(&mut rng);
        for &i in &idx[..n] {
            to_first[i] = true;
        }
    }
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (item, f) in items.into_iter().zip(to_first) {
        if f {
            first.push(item);
        } else {
            second.push(item);
        }
    }
    Ok((first, second))
}

fn write_lines(path: &Path, lines: &[String]) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    for l in lines {
        writeln!(f, "{l}")?;
    }
    f.flush()
}

/// Writes the world under `dir`: label lists, the binary embedding file,
/// one clip file per video and per object image (a single-frame clip), and
/// `manifest.txt`.
pub fn write_world(world: &SyntheticWorld, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_lines(&dir.join("activities.txt"), &world.activity_labels)?;
    write_lines(&dir.join("objects.txt"), &world.object_labels)?;
    let embed_path = dir.join("embeddings.bin");
    world.embedding_table.write_binary(&embed_path)?;

    let mut checksums = Vec::new();
    let mut store = |rel: String, clip: &VideoClip| -> Result<()> {
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        clip.save(&path)?;
        checksums.push(format!("{rel}\t{}", file_sha256(&path)?));
        Ok(())
    };
    for (part, clips) in [("train", &world.train_clips), ("test", &world.test_clips)] {
        for clip in clips {
            store(format!("clips/{part}/{}.clip", clip.id), clip)?;
        }
    }
    let train_images = &world.train_objects.images;
    for (part, images) in [("train", train_images), ("test", &world.test_objects)] {
        for (i, im) in images.iter().enumerate() {
            let clip = VideoClip::new(format!("o{:02}_{i:04}", im.label), im.label, vec![im.image.clone()])?;
            store(format!("images/{part}/{}.clip", clip.id), &clip)?;
        }
    }

    let c = &world.config;
    let mut m = io::BufWriter::new(fs::File::create(dir.join("manifest.txt"))?);
    writeln!(m, "[config]")?;
    for (k, v) in [
        ("activities", c.activities.to_string()),
        ("objects", c.objects.to_string()),
        ("relevant_per_activity", c.relevant_per_activity.to_string()),
        ("latent_dim", c.latent_dim.to_string()),
        ("train_clips_per_activity", c.train_clips_per_activity.to_string()),
        ("test_clips_per_activity", c.test_clips_per_activity.to_string()),
        ("train_images_per_object", c.train_images_per_object.to_string()),
        ("test_images_per_object", c.test_images_per_object.to_string()),
        ("frame_size", c.frame_size.to_string()),
        ("frames_per_video", c.frames_per_video.to_string()),
        ("noise_std", c.noise_std.to_string()),
        ("clutter", c.clutter.to_string()),
        ("embed_dim", c.embed_dim.to_string()),
        ("seed", c.seed.to_string()),
    ] {
        writeln!(m, "{k} = {v}")?;
    }
    writeln!(m, "\n[embeddings]\npath = embeddings.bin\nsha256 = {}", file_sha256(&embed_path)?)?;
    writeln!(m, "\n[relevance]\nactivity\tobjects")?;
    for (a, objs) in world.relevance_truth() {
        writeln!(m, "{a}\t{}", objs.into_iter().collect::<Vec<_>>().join(","))?;
    }
    writeln!(m, "\n[files]\npath\tsha256")?;
    for line in checksums {
        writeln!(m, "{line}")?;
    }
    m.flush()?;
    Ok(())
}

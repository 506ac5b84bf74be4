//! Run configuration: `[section]` headers, `key = value` lines, `#` comments.
//!
//! Every key has a default, unknown sections and keys are errors, and paths
//! are resolved against the directory holding the config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::experiment::{ExperimentConfig, PhaseConfig};
use crate::train::{Protocol, Strategy};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("line {line}: unknown key {section}.{key}")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: bad value for {section}.{key}: {detail}")]
    Value {
        line: usize,
        section: String,
        key: String,
        detail: String,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Baseline,
    ObjectIncorporated,
    TextGuided,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Baseline => "baseline",
            StrategyKind::ObjectIncorporated => "object_incorporated",
            StrategyKind::TextGuided => "text_guided",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Self::Baseline, Self::ObjectIncorporated, Self::TextGuided]
            .into_iter()
            .find(|k| k.name() == s)
    }

    /// The concrete strategy; text-guided needs the selected classes.
    pub fn with_classes(self, classes: Option<Vec<String>>) -> Option<Strategy> {
        match self {
            StrategyKind::Baseline => Some(Strategy::Baseline),
            StrategyKind::ObjectIncorporated => Some(Strategy::ObjectIncorporated),
            StrategyKind::TextGuided => classes.map(|classes| Strategy::TextGuided { classes }),
        }
    }
}

/// Label files and embedding table for relevance analysis on external data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraFiles {
    pub activities: Option<PathBuf>,
    pub objects: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub tra: TraFiles,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            strategy: StrategyKind::TextGuided,
            seed: 0,
            tra: TraFiles {
                k: 3,
                ..TraFiles::default()
            },
            out_dir: None,
        }
    }
}

fn parse_seeds(s: &str) -> Option<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
        return (a < b).then(|| (a..b).collect());
    }
    let seeds: Vec<u64> = s.split(',').map(|x| x.trim().parse().ok()).collect::<Option<_>>()?;
    (!seeds.is_empty()).then_some(seeds)
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::Full => "full",
        Protocol::SingleFrame => "single_frame",
    }
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: line_no,
                    detail: format!("unterminated section header {line:?}"),
                })?;
                section = name.trim().to_string();
                if !SECTIONS.contains(&section.as_str()) {
                    return Err(ConfigError::Syntax {
                        line: line_no,
                        detail: format!("unknown section [{section}]"),
                    });
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                detail: format!("expected `key = value`, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    detail: "key outside any section".into(),
                });
            }
            cfg.set(&section, key, value, base_dir)
                .map_err(|e| match e {
                    SetError::Unknown => ConfigError::UnknownKey {
                        line: line_no,
                        section: section.clone(),
                        key: key.to_string(),
                    },
                    SetError::Bad(detail) => ConfigError::Value {
                        line: line_no,
                        section: section.clone(),
                        key: key.to_string(),
                        detail,
                    },
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> std::result::Result<Self, ConfigLoadError> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(Self::parse(&text, base)?)
    }

    fn set(&mut self, section: &str, key: &str, value: &str, base: &Path) -> std::result::Result<(), SetError> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, SetError> {
            v.parse().map_err(|_| SetError::Bad(format!("{v:?} is not a valid number")))
        }
        let path = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() { p } else { base.join(p) }
        };
        let e = &mut self.experiment;
        let w = &mut e.world;
        let phase = |p: &mut PhaseConfig, key: &str, v: &str| -> std::result::Result<(), SetError> {
            match key {
                "iterations" => p.iterations = num(v)?,
                "learning_rate" => p.learning_rate = num(v)?,
                "weight_decay" => p.weight_decay = num(v)?,
                "batch_size" => p.batch_size = num(v)?,
                _ => return Err(SetError::Unknown),
            }
            Ok(())
        };
        match (section, key) {
            ("world", "activities") => w.activities = num(value)?,
            ("world", "objects") => w.objects = num(value)?,
            ("world", "relevant_per_activity") => w.relevant_per_activity = num(value)?,
            ("world", "latent_dim") => w.latent_dim = num(value)?,
            ("world", "train_clips_per_activity") => w.train_clips_per_activity = num(value)?,
            ("world", "test_clips_per_activity") => w.test_clips_per_activity = num(value)?,
            ("world", "train_images_per_object") => w.train_images_per_object = num(value)?,
            ("world", "test_images_per_object") => w.test_images_per_object = num(value)?,
            ("world", "frame_size") => w.frame_size = num(value)?,
            ("world", "frames_per_video") => w.frames_per_video = num(value)?,
            ("world", "noise_std") => w.noise_std = num(value)?,
            ("world", "clutter") => w.clutter = num(value)?,
            ("world", "embed_dim") => w.embed_dim = num(value)?,
            ("world", "seed") => w.seed = num(value)?,
            ("network", "conv_channels") => {
                e.trunk.conv_channels =
                    parse_list(value).ok_or_else(|| SetError::Bad(format!("{value:?} is not a comma list")))?
            }
            ("network", "kernel") => e.trunk.kernel = num(value)?,
            ("network", "hidden") => e.trunk.hidden = num(value)?,
            ("network", "dropout") => e.dropout_rate = num(value)?,
            ("geometry", "min_window") => e.geometry.min_window = num(value)?,
            ("geometry", "max_window") => e.geometry.max_window = num(value)?,
            ("geometry", "output_size") => e.geometry.output_size = num(value)?,
            ("pretrain", k) => phase(&mut e.pretrain, k, value)?,
            ("train", "strategy") => {
                self.strategy = StrategyKind::parse(value)
                    .ok_or_else(|| SetError::Bad(format!("unknown strategy {value:?}")))?
            }
            ("train", "segments") => e.segments = num(value)?,
            ("train", "seed") => self.seed = num(value)?,
            ("train", k) => phase(&mut e.finetune, k, value)?,
            ("tra", "m") => e.m = Some(num(value)?),
            ("tra", "k") => self.tra.k = num(value)?,
            ("tra", "activities") => self.tra.activities = Some(path(value)),
            ("tra", "objects") => self.tra.objects = Some(path(value)),
            ("tra", "embeddings") => self.tra.embeddings = Some(path(value)),
            ("eval", "protocol") => {
                e.protocol = match value {
                    "full" => Protocol::Full,
                    "single_frame" => Protocol::SingleFrame,
                    _ => return Err(SetError::Bad(format!("unknown protocol {value:?}"))),
                }
            }
            ("experiment", "seeds") => {
                e.seeds = parse_seeds(value)
                    .ok_or_else(|| SetError::Bad(format!("{value:?} is not `a..b` or a comma list")))?
            }
            ("output", "dir") => self.out_dir = Some(path(value)),
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        e.world.validate().map_err(|err| ConfigError::Invalid(err.to_string()))?;
        let g = &e.geometry;
        if g.output_size == 0 || g.min_window == 0 || g.min_window > g.max_window || g.max_window > e.world.frame_size {
            return Err(ConfigError::Invalid(format!(
                "window range [{}, {}] and output {} do not fit {}-pixel frames",
                g.min_window, g.max_window, g.output_size, e.world.frame_size
            )));
        }
        if g.output_size > e.world.frame_size {
            return Err(ConfigError::Invalid("output_size exceeds the frame size".into()));
        }
        if e.segments == 0 || e.segments > e.world.frames_per_video {
            return Err(ConfigError::Invalid(format!(
                "{} segments cannot be drawn from {}-frame videos",
                e.segments, e.world.frames_per_video
            )));
        }
        if !(0.0..1.0).contains(&e.dropout_rate) {
            return Err(ConfigError::Invalid(format!("dropout {} outside [0, 1)", e.dropout_rate)));
        }
        if let Some(m) = e.m {
            if m > e.world.objects {
                return Err(ConfigError::Invalid(format!("m = {m} exceeds {} objects", e.world.objects)));
            }
        }
        for (name, p) in [("pretrain", &e.pretrain), ("train", &e.finetune)] {
            p.sgd().validate().map_err(|err| ConfigError::Invalid(format!("[{name}] {err}")))?;
            if p.batch_size == 0 {
                return Err(ConfigError::Invalid(format!("[{name}] batch_size must be positive")));
            }
        }
        Ok(())
    }

    /// The effective configuration in the same format, with absolute paths.
    pub fn to_text(&self) -> String {
        let e = &self.experiment;
        let w = &e.world;
        let mut s = String::new();
        let mut put = |section: &str, pairs: Vec<(&str, String)>| {
            let _ = writeln!(s, "[{section}]");
            for (k, v) in pairs {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        };
        put("world", vec![
            ("activities", w.activities.to_string()),
            ("objects", w.objects.to_string()),
            ("relevant_per_activity", w.relevant_per_activity.to_string()),
            ("latent_dim", w.latent_dim.to_string()),
            ("train_clips_per_activity", w.train_clips_per_activity.to_string()),
            ("test_clips_per_activity", w.test_clips_per_activity.to_string()),
            ("train_images_per_object", w.train_images_per_object.to_string()),
            ("test_images_per_object", w.test_images_per_object.to_string()),
            ("frame_size", w.frame_size.to_string()),
            ("frames_per_video", w.frames_per_video.to_string()),
            ("noise_std", w.noise_std.to_string()),
            ("clutter", w.clutter.to_string()),
            ("embed_dim", w.embed_dim.to_string()),
            ("seed", w.seed.to_string()),
        ]);
        let channels: Vec<String> = e.trunk.conv_channels.iter().map(usize::to_string).collect();
        put("network", vec![
            ("conv_channels", channels.join(",")),
            ("kernel", e.trunk.kernel.to_string()),
            ("hidden", e.trunk.hidden.to_string()),
            ("dropout", e.dropout_rate.to_string()),
        ]);
        put("geometry", vec![
            ("min_window", e.geometry.min_window.to_string()),
            ("max_window", e.geometry.max_window.to_string()),
            ("output_size", e.geometry.output_size.to_string()),
        ]);
        let phase = |p: &PhaseConfig| {
            vec![
                ("iterations", p.iterations.to_string()),
                ("learning_rate", p.learning_rate.to_string()),
                ("weight_decay", p.weight_decay.to_string()),
                ("batch_size", p.batch_size.to_string()),
            ]
        };
        put("pretrain", phase(&e.pretrain));
        let mut train = vec![
            ("strategy", self.strategy.name().to_string()),
            ("segments", e.segments.to_string()),
            ("seed", self.seed.to_string()),
        ];
        train.extend(phase(&e.finetune));
        put("train", train);
        let mut tra = vec![("k", self.tra.k.to_string())];
        if let Some(m) = e.m {
            tra.push(("m", m.to_string()));
        }
        for (k, p) in [
            ("activities", &self.tra.activities),
            ("objects", &self.tra.objects),
            ("embeddings", &self.tra.embeddings),
        ] {
            if let Some(p) = p {
                tra.push((k, p.display().to_string()));
            }
        }
        put("tra", tra);
        put("eval", vec![("protocol", protocol_name(e.protocol).to_string())]);
        let seeds: Vec<String> = e.seeds.iter().map(u64::to_string).collect();
        put("experiment", vec![("seeds", seeds.join(","))]);
        if let Some(dir) = &self.out_dir {
            put("output", vec![("dir", dir.display().to_string())]);
        }
        s.pop();
        s
    }
}

const SECTIONS: &[&str] = &[
    "world", "network", "geometry", "pretrain", "train", "tra", "eval", "experiment", "output",
];

enum SetError {
    Unknown,
    Bad(String),
}

#[derive(Debug, Error)]
pub enum ConfigLoadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

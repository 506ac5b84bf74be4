//! The three-strategy comparison on a synthetic world.
//!
//! Per seed the network is initialised and pretrained on every object class
//! once; each strategy then finetunes its own copy of that network.

use std::io::{self, Write};

use thiserror::Error;

use crate::multitask::{build_network, MultitaskNet, NetError, TrunkSpec};
use crate::optim::SgdConfig;
use crate::relevance::{parse_labels, rank_classes, select_top_m, RefinedClassSet, RelevanceError};
use crate::synth::{generate_world, SynthError, SyntheticWorld, WorldConfig};
use crate::train::{
    evaluate, fit_pixel_mean, pretrain_object, train, PretrainConfig, Protocol, Strategy,
    TrainConfig,
};
use crate::tsv::format_sig;
use crate::video::FrameGeometry;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Relevance(#[from] RelevanceError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl PhaseConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig::scaled_schedule(self.learning_rate, self.weight_decay, self.iterations)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub trunk: TrunkSpec,
    pub geometry: FrameGeometry,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub segments: usize,
    pub dropout_rate: f64,
    /// Object classes kept by relevance analysis and drawn at random by the
    /// object-incorporated strategy; the world's relevant count when unset.
    pub m: Option<usize>,
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            trunk: TrunkSpec::default(),
            geometry: FrameGeometry::default(),
            pretrain: PhaseConfig {
                iterations: 600,
                learning_rate: 0.3,
                weight_decay: 5e-4,
                batch_size: 32,
            },
            finetune: PhaseConfig {
                iterations: 500,
                learning_rate: 0.3,
                weight_decay: 5e-4,
                batch_size: 32,
            },
            segments: 3,
            dropout_rate: 0.25,
            m: None,
            protocol: Protocol::Full,
            seeds: (0..10).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn m(&self) -> usize {
        self.m.unwrap_or(self.world.relevant_count())
    }

    pub fn strategies(&self, refined: &RefinedClassSet) -> [Strategy; 3] {
        [
            Strategy::Baseline,
            Strategy::ObjectIncorporated,
            Strategy::text_guided(refined),
        ]
    }

    pub fn train_config(&self, strategy: Strategy, seed: u64) -> TrainConfig {
        TrainConfig {
            strategy,
            batch_size: self.finetune.batch_size,
            segments: self.segments,
            sgd: self.finetune.sgd(),
            dropout_rate: self.dropout_rate,
            seed,
            geometry: self.geometry,
            object_class_count: Some(self.m()),
            activity_only: false,
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            batch_size: self.pretrain.batch_size,
            sgd: self.pretrain.sgd(),
            dropout_rate: self.dropout_rate,
            seed,
            geometry: self.geometry,
        }
    }
}

/// Relevance analysis of the world's own labels and embeddings.
pub fn select_classes(world: &SyntheticWorld, m: usize) -> Result<RefinedClassSet> {
    let activities = parse_labels(world.activity_labels.iter().map(String::as_str))?;
    let objects = parse_labels(world.object_labels.iter().map(String::as_str))?;
    let ranking = rank_classes(&activities, &objects, &world.embedding_table)?;
    Ok(select_top_m(&ranking, m))
}

/// A freshly initialised network pretrained on all object classes.
pub fn pretrained_network(world: &SyntheticWorld, config: &ExperimentConfig, seed: u64) -> Result<MultitaskNet> {
    let mut net = build_network(
        world.activity_labels.len(),
        world.object_labels.len(),
        &config.trunk,
        seed,
    )?;
    net.pixel_mean = fit_pixel_mean(&world.train_clips)?;
    pretrain_object(&mut net, &world.train_objects, &config.pretrain_config(seed))?;
    Ok(net)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub strategy: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTable {
    pub rows: Vec<ExperimentRow>,
    pub selected: Vec<String>,
}

impl ExperimentTable {
    pub fn mean(&self, strategy: &str) -> Option<f64> {
        let accs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.strategy == strategy)
            .map(|r| r.accuracy)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn strategy_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.strategy.as_str()) {
                names.push(&r.strategy);
            }
        }
        names
    }

    pub fn write_tsv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "strategy\tseed\taccuracy")?;
        for r in &self.rows {
            writeln!(w, "{}\t{}\t{}", r.strategy, r.seed, format_sig(r.accuracy, 9))?;
        }
        for name in self.strategy_names() {
            let mean = self.mean(name).expect("strategy has rows");
            writeln!(w, "{name}\tmean\t{}", format_sig(mean, 9))?;
        }
        Ok(())
    }
}

/// Runs every strategy for every seed. `progress` sees each row as it
/// completes.
pub fn run_experiment(
    config: &ExperimentConfig,
    mut progress: impl FnMut(&ExperimentRow),
) -> Result<ExperimentTable> {
    let world = generate_world(&config.world)?;
    let refined = select_classes(&world, config.m())?;
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let pretrained = pretrained_network(&world, config, seed)?;
        for strategy in config.strategies(&refined) {
            let mut net = pretrained.clone();
            let name = strategy.name().to_string();
            train(
                &mut net,
                &world.train_clips,
                &world.train_objects,
                &config.train_config(strategy, seed),
            )?;
            let report = evaluate(&net, &world.test_clips, config.protocol, config.geometry.output_size)?;
            let row = ExperimentRow {
                strategy: name,
                seed,
                accuracy: report.accuracy(),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(ExperimentTable {
        rows,
        selected: refined.selected().to_vec(),
    })
}

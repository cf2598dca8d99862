//! Small trained pipeline shared by the integration tests.
#![allow(dead_code)]

use paragon::adapterfarm::{build_corpus, sample_tasks, AdapterCorpus, TaskGrid, TuneConfig};
use paragon::data::InteractionDataset;
use paragon::fixture::{synthetic_dataset, FixtureConfig, PrepareConfig};
use paragon::paramgen::{train_generator, DenoiserConfig, Generator, GeneratorTrainConfig};
use paragon::recmodel::{train_backbone, Arch, Backbone, BackboneConfig, BackboneTrainConfig};

pub struct Small {
    pub ds: InteractionDataset,
    pub backbone: Backbone,
    pub tune: TuneConfig,
    pub corpus: AdapterCorpus,
}

pub fn small_tune() -> TuneConfig {
    TuneConfig {
        epochs: 4,
        ..TuneConfig::default()
    }
}

/// 120-user fixture, briefly trained backbone and a corpus over the
/// 0.1-step grid plus 10 uniform tasks.
pub fn small() -> Small {
    let ds = synthetic_dataset(&FixtureConfig::small(5), &PrepareConfig::default()).unwrap();
    let bc = BackboneConfig::new(Arch::Attn, ds.num_items(), 16, ds.max_history().unwrap(), 0);
    let tc = BackboneTrainConfig {
        epochs: 10,
        ..BackboneTrainConfig::default()
    };
    let (backbone, _) = train_backbone(&ds, bc, &tc).unwrap();
    let tune = small_tune();
    let mut tasks = sample_tasks(&TaskGrid::uniform(10, 1)).unwrap();
    tasks.extend(sample_tasks(&TaskGrid::grid(0.1)).unwrap());
    let corpus = build_corpus(&tasks, &backbone, &ds, &tune, 0).unwrap();
    Small {
        ds,
        backbone,
        tune,
        corpus,
    }
}

pub fn small_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        depth: 1,
        width: 32,
        token_width: 32,
        cond_width: 32,
        ..DenoiserConfig::default()
    }
}

pub fn small_generator(corpus: &AdapterCorpus, steps: usize) -> Generator {
    let train = GeneratorTrainConfig {
        steps,
        batch_size: 32,
        ..GeneratorTrainConfig::default()
    };
    train_generator(corpus, small_denoiser(), train).unwrap()
}

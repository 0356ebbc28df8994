//! Named training recipes and their expansion into stages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::optim::OptimizerKind;
use super::train::{run_recipe, EpochLog, LossKind, LrDecay, StageSpec, TrainingRecipe};
use crate::bottleneck::{inject, insert_autoencoder, BottleneckedModel, Component, SplitConfig};
use crate::error::{Error, Result};
use crate::model::ModelGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeName {
    BottlefitFtFe,
    BottlefitKdFe,
    BottlefitFt,
    BottlefitKd,
    BaselineConventional,
    BaselineKd,
    BaselineHnd,
    BaselineAutoencoder,
}

impl RecipeName {
    pub const ALL: [RecipeName; 8] = [
        RecipeName::BottlefitFtFe,
        RecipeName::BottlefitKdFe,
        RecipeName::BottlefitFt,
        RecipeName::BottlefitKd,
        RecipeName::BaselineConventional,
        RecipeName::BaselineKd,
        RecipeName::BaselineHnd,
        RecipeName::BaselineAutoencoder,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RecipeName::BottlefitFtFe => "bottlefit_ft_fe",
            RecipeName::BottlefitKdFe => "bottlefit_kd_fe",
            RecipeName::BottlefitFt => "bottlefit_ft",
            RecipeName::BottlefitKd => "bottlefit_kd",
            RecipeName::BaselineConventional => "baseline_conventional",
            RecipeName::BaselineKd => "baseline_kd",
            RecipeName::BaselineHnd => "baseline_hnd",
            RecipeName::BaselineAutoencoder => "baseline_autoencoder",
        }
    }
}

impl fmt::Display for RecipeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecipeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RecipeName::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| Error::UnknownRecipe(s.to_string()))
    }
}

/// Knobs shared by all recipes. Two-stage recipes run `stage_epochs` per stage;
/// single-stage baselines run `2 * stage_epochs` so every recipe sees the same
/// number of epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleOptions {
    pub stage_epochs: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub ae_batch_size: usize,
    pub momentum: f64,
    pub kd_alpha: f64,
    pub kd_tau: f64,
    pub lambdas: BTreeMap<String, f64>,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            stage_epochs: 10,
            lr: 1e-3,
            decay_factor: 0.1,
            decay_every: 5,
            batch_size: 64,
            ae_batch_size: 32,
            momentum: 0.9,
            kd_alpha: 0.5,
            kd_tau: 1.0,
            lambdas: BTreeMap::new(),
        }
    }
}

impl ScheduleOptions {
    fn stage(&self, loss: LossKind, optimizer: OptimizerKind, epochs: usize, every: usize, frozen: &[Component]) -> StageSpec {
        StageSpec {
            loss,
            optimizer,
            epochs,
            initial_lr: self.lr,
            lr_decay: LrDecay { factor: self.decay_factor, every_epochs: every.max(1) },
            frozen: frozen.iter().copied().collect::<BTreeSet<_>>(),
            kd_alpha: self.kd_alpha,
            kd_tau: self.kd_tau,
            lambdas: self.lambdas.clone(),
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: 0.0,
        }
    }
}

/// Expands a recipe name into its ordered stages.
pub fn expand(name: RecipeName, opts: &ScheduleOptions, seed: u64) -> TrainingRecipe {
    use Component::*;
    let e = opts.stage_epochs;
    let pretrain = opts.stage(LossKind::Ghnd, OptimizerKind::Adam, e, opts.decay_every, &[Classifier]);
    let adapt = |loss, frozen: &[Component]| opts.stage(loss, OptimizerKind::Sgd, e, opts.decay_every, frozen);
    let single = |loss, frozen: &[Component]| opts.stage(loss, OptimizerKind::Adam, 2 * e, e, frozen);
    let stages = match name {
        RecipeName::BottlefitFtFe => vec![pretrain, adapt(LossKind::Ce, &[Encoder])],
        RecipeName::BottlefitKdFe => vec![pretrain, adapt(LossKind::Kd, &[Encoder])],
        RecipeName::BottlefitFt => vec![pretrain, adapt(LossKind::Ce, &[])],
        RecipeName::BottlefitKd => vec![pretrain, adapt(LossKind::Kd, &[])],
        RecipeName::BaselineConventional => vec![single(LossKind::Ce, &[])],
        RecipeName::BaselineKd => vec![single(LossKind::Kd, &[])],
        RecipeName::BaselineHnd => vec![single(LossKind::Hnd, &[Classifier])],
        RecipeName::BaselineAutoencoder => {
            let mut s = opts.stage(LossKind::AeRecon, OptimizerKind::Adam, 2 * e, opts.decay_every, &[Classifier]);
            s.batch_size = opts.ae_batch_size;
            vec![s]
        }
    };
    TrainingRecipe { name: name.as_str().to_string(), stages, seed }
}

/// Builds the student for `name` (injected bottleneck, or an autoencoder for
/// `baseline_autoencoder`) and trains it.
pub fn train_with_recipe(
    name: RecipeName,
    teacher: &ModelGraph<f32>,
    config: &SplitConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    opts: &ScheduleOptions,
    seed: u64,
) -> Result<(BottleneckedModel<f32>, Vec<EpochLog>)> {
    let mut model = match name {
        RecipeName::BaselineAutoencoder => insert_autoencoder(teacher, config, seed)?,
        _ => inject(teacher, config, seed)?,
    };
    let recipe = expand(name, opts, seed);
    let log = run_recipe(&mut model, teacher, &recipe, data, val)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottlefit_ft_fe_expansion() {
        let r = expand(RecipeName::BottlefitFtFe, &ScheduleOptions::default(), 0);
        assert_eq!(r.stages.len(), 2);
        let (s1, s2) = (&r.stages[0], &r.stages[1]);
        assert_eq!((s1.loss, s1.optimizer), (LossKind::Ghnd, OptimizerKind::Adam));
        assert_eq!(s1.frozen, BTreeSet::from([Component::Classifier]));
        assert_eq!((s2.loss, s2.optimizer), (LossKind::Ce, OptimizerKind::Sgd));
        assert_eq!(s2.frozen, BTreeSet::from([Component::Encoder]));
        assert_eq!((s1.epochs, s2.epochs), (10, 10));
        assert_eq!(s1.lr_at(4), 1e-3);
        assert!((s1.lr_at(5) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn baseline_kd_has_alpha_half() {
        let r = expand(RecipeName::BaselineKd, &ScheduleOptions::default(), 0);
        assert_eq!(r.stages.len(), 1);
        assert_eq!(r.stages[0].loss, LossKind::Kd);
        assert_eq!(r.stages[0].kd_alpha, 0.5);
    }

    #[test]
    fn autoencoder_schedule() {
        let r = expand(RecipeName::BaselineAutoencoder, &ScheduleOptions::default(), 0);
        let s = &r.stages[0];
        assert_eq!((s.loss, s.optimizer, s.batch_size, s.epochs), (LossKind::AeRecon, OptimizerKind::Adam, 32, 20));
        assert_eq!((s.initial_lr, s.lr_decay.every_epochs, s.lr_decay.factor), (1e-3, 5, 0.1));
    }

    #[test]
    fn names_round_trip_and_typos_fail() {
        for r in RecipeName::ALL {
            assert_eq!(r.as_str().parse::<RecipeName>().unwrap(), r);
        }
        assert!(matches!("bottlefit_ftfe".parse::<RecipeName>(), Err(Error::UnknownRecipe(_))));
    }

    #[test]
    fn every_expansion_validates() {
        for r in RecipeName::ALL {
            expand(r, &ScheduleOptions::default(), 1).validate().unwrap();
        }
    }
}

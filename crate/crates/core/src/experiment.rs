//! Experiment configuration and the per-seed orchestration shared by the
//! command-line tool and the acceptance suite.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::active::{
    run_active_prepared, run_lower_bound, run_upper_bound, LoopConfig, PreparedEval, PreparedPool, RunRecord,
    Strategy,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ArmOutcome, EvalResult};
use crate::model::{train_epochs, SegModel, TrainConfig};
use crate::phantom::{gen_dataset, Dataset, DomainSpec};
use crate::rng::tagged;
use crate::scoring::ReductionConfig;

/// Which modalities the model sees: all of them, or only modality `l`
/// (0-based). Written `multi` or `single:<l>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModalityMode {
    Multi,
    Single(usize),
}

impl std::fmt::Display for ModalityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModalityMode::Multi => f.write_str("multi"),
            ModalityMode::Single(l) => write!(f, "single:{l}"),
        }
    }
}

impl std::str::FromStr for ModalityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "multi" {
            return Ok(ModalityMode::Multi);
        }
        s.strip_prefix("single:")
            .and_then(|l| l.parse().ok())
            .map(ModalityMode::Single)
            .ok_or_else(|| Error::config(format!("modality mode {s:?} is neither \"multi\" nor \"single:<l>\"")))
    }
}

impl Serialize for ModalityMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModalityMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl ModalityMode {
    /// Restricts every sample of `data` to the selected modalities.
    pub fn apply(self, data: &Dataset) -> Result<Dataset> {
        match self {
            ModalityMode::Multi => Ok(data.clone()),
            ModalityMode::Single(l) => {
                let samples = data
                    .samples
                    .iter()
                    .map(|s| s.only_modality(l))
                    .collect::<Result<Vec<_>>>()?;
                Dataset::new(samples, data.truths.clone(), data.spec.clone())
            }
        }
    }

    /// File-name friendly form.
    pub fn slug(self) -> String {
        self.to_string().replace(':', "-")
    }
}

/// An experiment arm: a selection strategy or one of the two bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Lower,
    Upper,
    Strategy(Strategy),
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Lower => "lower",
            Arm::Upper => "upper",
            Arm::Strategy(s) => s.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: DomainSpec,
    pub target: DomainSpec,
    /// Labeled source samples used for pretraining.
    pub n_source: usize,
    /// Held-out source samples for the pretraining report.
    pub n_source_eval: usize,
    /// Target pool size.
    pub n_train: usize,
    pub n_eval: usize,
    pub budget: usize,
    pub stride: usize,
    /// Fine-tuning schedule; `total_epochs` is the loop length.
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
    pub eval_every: usize,
    pub reduction: ReductionConfig,
    pub strategies: Vec<Strategy>,
    /// Also run the lower and upper bound arms.
    pub bounds: bool,
    pub seeds: Vec<u64>,
    pub modality_mode: ModalityMode,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DomainSpec::default_source(),
            target: DomainSpec::default_target(),
            n_source: 20,
            n_source_eval: 10,
            n_train: 40,
            n_eval: 20,
            budget: 3,
            stride: 40,
            train: TrainConfig::default(),
            pretrain: TrainConfig {
                lr0: 1.0,
                total_epochs: 300,
                seed: 7,
                ..TrainConfig::default()
            },
            eval_every: 10,
            reduction: ReductionConfig::default(),
            strategies: vec![Strategy::Ours, Strategy::Random, Strategy::Oneoff, Strategy::Entropy],
            bounds: true,
            seeds: (1..=20).collect(),
            modality_mode: ModalityMode::Multi,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn classes(&self) -> usize {
        2
    }

    pub fn loop_config(&self, strategy: Strategy, seed: u64) -> LoopConfig {
        LoopConfig {
            budget: self.budget,
            stride: self.stride,
            strategy,
            train: self.train.clone(),
            seed,
            eval_every: self.eval_every,
            reduction: self.reduction,
        }
    }

    pub fn arms(&self) -> Vec<Arm> {
        let mut arms = Vec::new();
        if self.bounds {
            arms.extend([Arm::Lower, Arm::Upper]);
        }
        arms.extend(self.strategies.iter().map(|&s| Arm::Strategy(s)));
        arms
    }

    /// Every violation, so they can all be reported before anything runs.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                out.push(e.to_string());
            }
        };
        check(self.source.validate().map_err(|e| Error::config(format!("source: {e}"))));
        check(self.target.validate().map_err(|e| Error::config(format!("target: {e}"))));
        check(
            self.loop_config(Strategy::Ours, 0)
                .validate(self.classes())
                .map_err(|e| Error::config(format!("loop: {e}"))),
        );
        check(
            self.pretrain
                .validate(self.classes())
                .map_err(|e| Error::config(format!("pretrain: {e}"))),
        );
        let mut msgs = Vec::new();
        if self.source.modalities != self.target.modalities {
            msgs.push("source and target modality counts differ".to_string());
        }
        if self.source.dims != self.target.dims {
            msgs.push("source and target dims differ".to_string());
        }
        if let ModalityMode::Single(l) = self.modality_mode {
            if l >= self.target.modalities {
                msgs.push(format!("modality {l} does not exist (M = {})", self.target.modalities));
            }
        }
        if self.seeds.is_empty() {
            msgs.push("seeds must not be empty".into());
        }
        if self.strategies.is_empty() && !self.bounds {
            msgs.push("no arms to run".into());
        }
        let mut s = self.strategies.clone();
        s.sort();
        s.dedup();
        if s.len() != self.strategies.len() {
            msgs.push("strategies contain duplicates".into());
        }
        if self.n_train <= 4 * self.budget {
            msgs.push(format!(
                "n_train {} must exceed four times the budget ({})",
                self.n_train,
                4 * self.budget
            ));
        }
        if self.n_eval == 0 || self.n_source == 0 || self.n_source_eval == 0 {
            msgs.push("n_eval, n_source and n_source_eval must be at least 1".into());
        }
        out.extend(msgs);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::config(p.join("; ")))
        }
    }

    /// Source population: the first `n_source` train, the rest evaluate.
    pub fn gen_source(&self) -> Result<Dataset> {
        gen_dataset(&self.source, self.n_source + self.n_source_eval)
    }

    /// Target population, re-split per seed into pool and evaluation set.
    pub fn gen_target(&self) -> Result<Dataset> {
        gen_dataset(&self.target, self.n_train + self.n_eval)
    }
}

/// Seed-dependent partition of `0..n_train + n_eval` into (pool, eval),
/// each sorted ascending.
pub fn split(seed: u64, n_train: usize, n_eval: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n_train + n_eval).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(tagged(seed, "split")));
    let mut pool = idx[..n_train].to_vec();
    let mut eval = idx[n_train..].to_vec();
    pool.sort_unstable();
    eval.sort_unstable();
    (pool, eval)
}

/// Trains the source model from zero weights on the labeled source part and
/// evaluates it on the held-out part.
pub fn pretrain(cfg: &ExperimentConfig, source: &Dataset) -> Result<(SegModel, EvalResult)> {
    if source.len() < cfg.n_source + cfg.n_source_eval {
        return Err(Error::config(format!(
            "source dataset has {} samples, {} needed",
            source.len(),
            cfg.n_source + cfg.n_source_eval
        )));
    }
    let data = cfg.modality_mode.apply(source)?;
    let train_idx: Vec<usize> = (0..cfg.n_source).collect();
    let eval_idx: Vec<usize> = (cfg.n_source..cfg.n_source + cfg.n_source_eval).collect();
    let train = data.subset(&train_idx)?;
    let held = data.subset(&eval_idx)?;
    let m = train.samples[0].modality_count();
    let zero = SegModel::zeros(m, cfg.classes());
    let model = if cfg.pretrain.total_epochs == 0 {
        zero
    } else {
        let pairs: Vec<_> = train.samples.iter().zip(&train.truths).collect();
        train_epochs(&zero, &pairs, &cfg.pretrain, 0, cfg.pretrain.total_epochs)?.0
    };
    let report = evaluate(&model, &held)?;
    Ok((model, report))
}

/// Pool and evaluation set of one seed, featurized, with pair distances.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub pool_ids: Vec<usize>,
    pub eval_ids: Vec<usize>,
    pub pool: PreparedPool,
    pub eval: PreparedEval,
}

pub fn prepare_seed(cfg: &ExperimentConfig, target: &Dataset, seed: u64) -> Result<SeedData> {
    if target.len() != cfg.n_train + cfg.n_eval {
        return Err(Error::config(format!(
            "target dataset has {} samples, expected {}",
            target.len(),
            cfg.n_train + cfg.n_eval
        )));
    }
    let data = cfg.modality_mode.apply(target)?;
    let (pool_ids, eval_ids) = split(seed, cfg.n_train, cfg.n_eval);
    Ok(SeedData {
        seed,
        pool: PreparedPool::new(&data.subset(&pool_ids)?, cfg.reduction)?,
        eval: PreparedEval::new(&data.subset(&eval_ids)?)?,
        pool_ids,
        eval_ids,
    })
}

pub fn run_arm(cfg: &ExperimentConfig, data: &SeedData, source: &SegModel, arm: Arm) -> Result<RunRecord> {
    let mode = cfg.modality_mode.to_string();
    let strategy = match arm {
        Arm::Strategy(s) => s,
        _ => Strategy::Ours,
    };
    let lc = cfg.loop_config(strategy, data.seed);
    match arm {
        Arm::Lower => run_lower_bound(&data.eval, source, &lc, &mode),
        Arm::Upper => run_upper_bound(&data.pool, &data.eval, source, &lc, &mode),
        Arm::Strategy(_) => run_active_prepared(&data.pool, &data.eval, source, &lc, &mode),
    }
}

pub fn outcome(r: &RunRecord) -> ArmOutcome {
    ArmOutcome {
        arm: r.arm.clone(),
        seed: r.seed,
        dice_pct: r.final_eval.dice_pct,
        miou_pct: r.final_eval.miou_pct,
        labeled_count: r.labeled_ids.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_mode_text() {
        assert_eq!("multi".parse::<ModalityMode>().unwrap(), ModalityMode::Multi);
        assert_eq!("single:2".parse::<ModalityMode>().unwrap(), ModalityMode::Single(2));
        assert!("single:x".parse::<ModalityMode>().is_err());
        assert_eq!(ModalityMode::Single(1).slug(), "single-1");
        assert_eq!(serde_json::to_string(&ModalityMode::Single(0)).unwrap(), "\"single:0\"");
    }

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let c = ExperimentConfig::default();
        assert!(c.problems().is_empty(), "{:?}", c.problems());
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn all_problems_listed() {
        let c = ExperimentConfig {
            seeds: vec![],
            n_train: 12,
            budget: 3,
            ..Default::default()
        };
        assert_eq!(c.problems().len(), 2);
    }

    #[test]
    fn split_partitions() {
        let (p, e) = split(5, 40, 20);
        assert_eq!(p.len(), 40);
        let mut all: Vec<usize> = p.iter().chain(&e).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        assert_ne!(split(6, 40, 20).0, p);
    }
}

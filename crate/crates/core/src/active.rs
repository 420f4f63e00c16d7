//! The active fine-tuning loop.
//!
//! Round `r` (1-based) fires at epoch `r(r-1)/2 * stride`, so the gaps
//! between queries grow linearly and later rounds see a better-adapted
//! model. Every epoch with a non-empty labeled set runs one training step.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::election::{elect_dominant_features, ElectionResult};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_features, EvalResult};
use crate::model::{extract_features, train_epochs_on, FeatureMap, SegModel, TrainConfig, TrainingSet};
use crate::phantom::Dataset;
use crate::rng::{substream, tagged};
use crate::scoring::{
    density, fit_bases, informativeness_terms, score_candidates, select_best, PairDistanceMatrix,
    ReductionConfig, ScoreRow,
};
use crate::volume::LabelMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ours,
    Random,
    Oneoff,
    Entropy,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Ours, Strategy::Random, Strategy::Oneoff, Strategy::Entropy];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ours => "ours",
            Strategy::Random => "random",
            Strategy::Oneoff => "oneoff",
            Strategy::Entropy => "entropy",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown strategy {s:?} (expected ours, random, oneoff or entropy)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub budget: usize,
    pub stride: usize,
    pub strategy: Strategy,
    /// `train.total_epochs` is the loop length `T`; `train.seed` is ignored
    /// in favour of a stream derived from `seed`.
    pub train: TrainConfig,
    pub seed: u64,
    /// Evaluate every this many epochs (and always after the last one).
    pub eval_every: usize,
    pub reduction: ReductionConfig,
}

impl LoopConfig {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        Self {
            budget: 3,
            stride: 40,
            strategy,
            train: TrainConfig::default(),
            seed,
            eval_every: 10,
            reduction: ReductionConfig::default(),
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.train.total_epochs
    }

    /// Epoch of the last query round.
    pub fn last_query_epoch(&self) -> usize {
        self.budget * self.budget.saturating_sub(1) / 2 * self.stride
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::config("budget must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if self.reduction.patch == 0 || self.reduction.components == 0 {
            return Err(Error::config("patch size and component count must be at least 1"));
        }
        self.train.validate(classes)?;
        if self.total_epochs() < self.last_query_epoch() + 1 {
            return Err(Error::config(format!(
                "{} epochs cannot fit {} queries at stride {} (need at least {})",
                self.total_epochs(),
                self.budget,
                self.stride,
                self.last_query_epoch() + 1
            )));
        }
        Ok(())
    }

    /// Training config with the seed-derived batch stream.
    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: tagged(self.seed, "train"),
            ..self.train.clone()
        }
    }
}

/// `t == r(r-1)/2 * stride`.
pub fn is_query_step(t: usize, r: usize, stride: usize) -> bool {
    r >= 1 && t == r * (r - 1) / 2 * stride
}

/// Labeled and unlabeled bookkeeping. The unlabeled set is kept sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolState {
    pub n: usize,
    pub budget: usize,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Next round to fire (1-based).
    pub round: usize,
    pub epoch: usize,
}

impl PoolState {
    pub fn new(n: usize, budget: usize) -> Self {
        Self {
            n,
            budget,
            labeled: Vec::new(),
            unlabeled: (0..n).collect(),
            round: 1,
            epoch: 0,
        }
    }

    pub fn label(&mut self, id: usize) -> Result<()> {
        let pos = self
            .unlabeled
            .binary_search(&id)
            .map_err(|_| Error::precondition(format!("sample {id} is not unlabeled")))?;
        if self.labeled.len() >= self.budget {
            return Err(Error::precondition("labeling budget exhausted"));
        }
        self.unlabeled.remove(pos);
        self.labeled.push(id);
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.labeled.len() + self.unlabeled.len() != self.n {
            return Err(Error::InvalidValue("labeled and unlabeled sets do not cover the pool".into()));
        }
        if self.labeled.len() > self.budget {
            return Err(Error::InvalidValue("labeled set exceeds the budget".into()));
        }
        if self.labeled.iter().any(|id| self.unlabeled.binary_search(id).is_ok()) {
            return Err(Error::InvalidValue("a sample is both labeled and unlabeled".into()));
        }
        let mut seen = vec![false; self.n];
        for &id in self.labeled.iter().chain(&self.unlabeled) {
            if id >= self.n || std::mem::replace(&mut seen[id], true) {
                return Err(Error::InvalidValue(format!("sample {id} is duplicated or out of range")));
            }
        }
        Ok(())
    }
}

/// Target pool with everything that does not depend on the model computed
/// once: features, ground truth (the oracle) and pair distances.
#[derive(Debug, Clone)]
pub struct PreparedPool {
    pub features: Vec<FeatureMap>,
    pub truths: Vec<LabelMask>,
    pub distances: PairDistanceMatrix,
}

impl PreparedPool {
    pub fn new(data: &Dataset, reduction: ReductionConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::config("target pool is empty"));
        }
        for (i, s) in data.samples.iter().enumerate() {
            if s.id != i {
                return Err(Error::precondition("pool sample ids must be their positions"));
            }
        }
        let bases = fit_bases(&data.samples, reduction)?;
        Ok(Self {
            features: data.samples.iter().map(extract_features).collect(),
            truths: data.truths.clone(),
            distances: PairDistanceMatrix::compute(&data.samples, &bases)?,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_refs(&self) -> Vec<&FeatureMap> {
        self.features.iter().collect()
    }
}

#[derive(Debug, Clone)]
pub struct PreparedEval {
    pub features: Vec<FeatureMap>,
    pub truths: Vec<LabelMask>,
}

impl PreparedEval {
    pub fn new(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::config("evaluation set is empty"));
        }
        Ok(Self {
            features: data.samples.iter().map(extract_features).collect(),
            truths: data.truths.clone(),
        })
    }

    pub fn evaluate(&self, model: &SegModel) -> Result<EvalResult> {
        let f: Vec<&FeatureMap> = self.features.iter().collect();
        let t: Vec<&LabelMask> = self.truths.iter().collect();
        evaluate_features(model, &f, &t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub epoch: usize,
    pub selected: usize,
    pub election: ElectionResult,
    /// Scores of every candidate at the time of the query.
    pub scores: Vec<ScoreRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub labeled: usize,
    pub loss: Option<f64>,
    pub dice_pct: Option<f64>,
    pub miou_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Strategy name, or `lower` / `upper` for the bounds.
    pub arm: String,
    pub modality: String,
    pub seed: u64,
    pub config: LoopConfig,
    pub initial_eval: EvalResult,
    pub rounds: Vec<RoundRecord>,
    pub epochs: Vec<EpochRecord>,
    pub final_eval: EvalResult,
    pub labeled_ids: Vec<usize>,
    pub model_checksum: String,
}

impl RunRecord {
    pub fn file_stem(&self) -> String {
        format!("{}_{}_seed{}", self.arm, self.modality.replace(':', "-"), self.seed)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidValue(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format {
            offset: e.column() as u64,
            message: format!("run record: {e}"),
        })
    }

    pub fn epoch_csv(&self) -> String {
        let mut out = String::from("epoch,labeled,loss,dice,miou\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch,
                e.labeled,
                opt(e.loss),
                opt(e.dice_pct),
                opt(e.miou_pct)
            );
        }
        out
    }

    pub fn score_dump_csv(&self) -> String {
        let mut out = String::from("round,epoch,sample_id,mu,abundance,zeta,gamma,s,selected\n");
        for r in &self.rounds {
            for s in &r.scores {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.9},{},{:.9},{:.9},{:.9},{}",
                    r.round,
                    r.epoch,
                    s.sample_id,
                    s.mu,
                    s.abundance,
                    s.zeta,
                    s.gamma,
                    s.s,
                    u8::from(s.sample_id == r.selected)
                );
            }
        }
        out
    }
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn check_loop(pool: &PreparedPool, source: &SegModel, cfg: &LoopConfig) -> Result<()> {
    cfg.validate(source.classes())?;
    if cfg.budget >= pool.len() {
        return Err(Error::config(format!(
            "budget {} must be smaller than the pool size {}",
            cfg.budget,
            pool.len()
        )));
    }
    if let Some(f) = pool.features.first() {
        if f.modalities() != source.modalities() {
            return Err(Error::shape(format!(
                "source model takes {} modalities, pool has {}",
                source.modalities(),
                f.modalities()
            )));
        }
    }
    Ok(())
}

fn should_eval(t: usize, cfg: &LoopConfig) -> bool {
    (t + 1).is_multiple_of(cfg.eval_every) || t + 1 == cfg.total_epochs()
}

/// Picks one id from `unlabeled` per the strategy. `round` seeds the random arm.
fn pick(strategy: Strategy, scores: &[ScoreRow], seed: u64, round: usize) -> Result<usize> {
    match strategy {
        Strategy::Ours | Strategy::Oneoff => {
            select_best(&scores.iter().map(|r| (r.sample_id, r.s)).collect::<Vec<_>>())
        }
        Strategy::Entropy => select_best(&scores.iter().map(|r| (r.sample_id, r.mu)).collect::<Vec<_>>()),
        Strategy::Random => {
            if scores.is_empty() {
                return Err(Error::precondition("no candidates to pick from"));
            }
            let mut rng = substream(tagged(seed, "select"), round as u64);
            Ok(scores[rng.random_range(0..scores.len())].sample_id)
        }
    }
}

struct Trainer<'p> {
    pool: &'p PreparedPool,
    eval: &'p PreparedEval,
    cfg: &'p LoopConfig,
    train: TrainConfig,
    model: SegModel,
    epochs: Vec<EpochRecord>,
}

impl<'p> Trainer<'p> {
    fn epoch(&mut self, t: usize, labeled: &[usize]) -> Result<()> {
        let loss = if labeled.is_empty() {
            None
        } else {
            let mut set = TrainingSet::new(self.model.classes());
            for &id in labeled {
                set.push(&self.pool.features[id], &self.pool.truths[id])?;
            }
            Some(train_epochs_on(&mut self.model, &set, &self.train, t, 1)?[0])
        };
        let (dice_pct, miou_pct) = if should_eval(t, self.cfg) {
            let e = self.eval.evaluate(&self.model)?;
            (Some(e.dice_pct), Some(e.miou_pct))
        } else {
            (None, None)
        };
        self.epochs.push(EpochRecord {
            epoch: t,
            labeled: labeled.len(),
            loss,
            dice_pct,
            miou_pct,
        });
        Ok(())
    }
}

fn record(
    arm: &str,
    modality: &str,
    cfg: &LoopConfig,
    initial_eval: EvalResult,
    rounds: Vec<RoundRecord>,
    trainer: Trainer<'_>,
    labeled_ids: Vec<usize>,
) -> Result<RunRecord> {
    let final_eval = trainer.eval.evaluate(&trainer.model)?;
    Ok(RunRecord {
        arm: arm.to_string(),
        modality: modality.to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        initial_eval,
        rounds,
        epochs: trainer.epochs,
        final_eval,
        labeled_ids,
        model_checksum: trainer.model.checksum(),
    })
}

/// Sequential selection interleaved with fine-tuning. `modality` is only
/// echoed into the record.
pub fn run_active_prepared(
    pool: &PreparedPool,
    eval: &PreparedEval,
    source: &SegModel,
    cfg: &LoopConfig,
    modality: &str,
) -> Result<RunRecord> {
    if cfg.strategy == Strategy::Oneoff {
        return run_oneoff_prepared(pool, eval, source, cfg, modality);
    }
    check_loop(pool, source, cfg)?;
    let feats = pool.feature_refs();
    let mut state = PoolState::new(pool.len(), cfg.budget);
    let mut trainer = Trainer {
        pool,
        eval,
        cfg,
        train: cfg.effective_train(),
        model: source.clone(),
        epochs: Vec::with_capacity(cfg.total_epochs()),
    };
    let initial_eval = eval.evaluate(source)?;
    let mut rounds = Vec::with_capacity(cfg.budget);
    for t in 0..cfg.total_epochs() {
        state.epoch = t;
        if state.round <= cfg.budget && is_query_step(t, state.round, cfg.stride) {
            let scores = score_candidates(&trainer.model, &feats, &state.unlabeled, &pool.distances)?;
            let id = pick(cfg.strategy, &scores, cfg.seed, state.round)?;
            let election = elect_dominant_features(&trainer.model, id, &pool.features[id], Some(&pool.truths[id]))?;
            state.label(id)?;
            rounds.push(RoundRecord {
                round: state.round,
                epoch: t,
                selected: id,
                election,
                scores,
            });
            state.round += 1;
        }
        debug_assert!(state.check_invariants().is_ok(), "{:?}", state.check_invariants());
        debug_assert_eq!(state.labeled.len(), rounds.len().min(cfg.budget));
        trainer.epoch(t, &state.labeled)?;
    }
    debug_assert_eq!(state.labeled.len(), cfg.budget);
    if rounds.len() != cfg.budget {
        return Err(Error::InvalidValue(format!("only {} of {} rounds fired", rounds.len(), cfg.budget)));
    }
    let labeled = state.labeled.clone();
    record(cfg.strategy.name(), modality, cfg, initial_eval, rounds, trainer, labeled)
}

/// All `budget` picks made at epoch 0 with the source model; density is
/// recomputed over the shrinking pool after every pick.
pub fn run_oneoff_prepared(
    pool: &PreparedPool,
    eval: &PreparedEval,
    source: &SegModel,
    cfg: &LoopConfig,
    modality: &str,
) -> Result<RunRecord> {
    check_loop(pool, source, cfg)?;
    let mut state = PoolState::new(pool.len(), cfg.budget);
    let terms = pool
        .features
        .iter()
        .map(|f| informativeness_terms(source, f))
        .collect::<Result<Vec<_>>>()?;
    let mut rounds = Vec::with_capacity(cfg.budget);
    for r in 1..=cfg.budget {
        let scores = state
            .unlabeled
            .iter()
            .map(|&id| {
                let (mu, fg) = terms[id];
                let zeta = crate::scoring::informativeness(mu, fg);
                let gamma = density(id, &state.unlabeled, &pool.distances)?;
                Ok(ScoreRow {
                    sample_id: id,
                    mu,
                    abundance: fg,
                    zeta,
                    gamma,
                    s: crate::scoring::criterion(zeta, gamma),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let id = pick(Strategy::Oneoff, &scores, cfg.seed, r)?;
        let election = elect_dominant_features(source, id, &pool.features[id], Some(&pool.truths[id]))?;
        state.label(id)?;
        rounds.push(RoundRecord {
            round: r,
            epoch: 0,
            selected: id,
            election,
            scores,
        });
    }
    state.round = cfg.budget + 1;
    let mut trainer = Trainer {
        pool,
        eval,
        cfg,
        train: cfg.effective_train(),
        model: source.clone(),
        epochs: Vec::with_capacity(cfg.total_epochs()),
    };
    let initial_eval = eval.evaluate(source)?;
    for t in 0..cfg.total_epochs() {
        state.epoch = t;
        debug_assert!(state.check_invariants().is_ok(), "{:?}", state.check_invariants());
        trainer.epoch(t, &state.labeled)?;
    }
    let labeled = state.labeled.clone();
    record(Strategy::Oneoff.name(), modality, cfg, initial_eval, rounds, trainer, labeled)
}

/// Direct inference with the source model: no target labels, no training.
pub fn run_lower_bound(
    eval: &PreparedEval,
    source: &SegModel,
    cfg: &LoopConfig,
    modality: &str,
) -> Result<RunRecord> {
    let e = eval.evaluate(source)?;
    Ok(RunRecord {
        arm: "lower".into(),
        modality: modality.into(),
        seed: cfg.seed,
        config: cfg.clone(),
        initial_eval: e.clone(),
        rounds: Vec::new(),
        epochs: Vec::new(),
        final_eval: e,
        labeled_ids: Vec::new(),
        model_checksum: source.checksum(),
    })
}

/// Fine-tuning on the whole pool, labeled, for all `T` epochs.
pub fn run_upper_bound(
    pool: &PreparedPool,
    eval: &PreparedEval,
    source: &SegModel,
    cfg: &LoopConfig,
    modality: &str,
) -> Result<RunRecord> {
    cfg.train.validate(source.classes())?;
    let all: Vec<usize> = (0..pool.len()).collect();
    let mut trainer = Trainer {
        pool,
        eval,
        cfg,
        train: cfg.effective_train(),
        model: source.clone(),
        epochs: Vec::with_capacity(cfg.total_epochs()),
    };
    let initial_eval = eval.evaluate(source)?;
    for t in 0..cfg.total_epochs() {
        trainer.epoch(t, &all)?;
    }
    record("upper", modality, cfg, initial_eval, Vec::new(), trainer, all)
}

/// Featurizes `data` and `eval` and runs the configured strategy.
pub fn run_active_loop(data: &Dataset, source: &SegModel, eval: &Dataset, cfg: &LoopConfig) -> Result<RunRecord> {
    if cfg.budget >= data.len() {
        return Err(Error::config(format!(
            "budget {} must be smaller than the pool size {}",
            cfg.budget,
            data.len()
        )));
    }
    let pool = PreparedPool::new(data, cfg.reduction)?;
    run_active_prepared(&pool, &PreparedEval::new(eval)?, source, cfg, "multi")
}

pub fn run_oneoff_loop(data: &Dataset, source: &SegModel, eval: &Dataset, cfg: &LoopConfig) -> Result<RunRecord> {
    if cfg.budget >= data.len() {
        return Err(Error::config(format!(
            "budget {} must be smaller than the pool size {}",
            cfg.budget,
            data.len()
        )));
    }
    let pool = PreparedPool::new(data, cfg.reduction)?;
    run_oneoff_prepared(&pool, &PreparedEval::new(eval)?, source, cfg, "multi")
}

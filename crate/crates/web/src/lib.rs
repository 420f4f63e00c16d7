//! Browser bindings for a scaled-down version of the experiment: look at
//! phantom slices, inspect the selection scores of a target pool, and run a
//! short adaptation loop.

use wasm_bindgen::prelude::*;

use seqada::active::{run_active_prepared, run_upper_bound, LoopConfig, PreparedEval, PreparedPool, Strategy};
use seqada::experiment::{pretrain, split, ExperimentConfig};
use seqada::phantom::{gen_dataset, Dataset, DomainSpec};
use seqada::scoring::{score_candidates, ReductionConfig};
use seqada::volume::Dims;
use seqada::{Error, Result, SegModel};

const EDGE: usize = 16;
const POOL: usize = 14;
const EVAL: usize = 4;

fn shrink(spec: DomainSpec) -> DomainSpec {
    DomainSpec {
        dims: Dims::cube(EDGE),
        tumor_radius_range: (1.5, 4.5),
        ..spec
    }
}

fn demo_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        source: shrink(DomainSpec::default_source()),
        target: shrink(DomainSpec::default_target()),
        n_source: 8,
        n_source_eval: 4,
        n_train: POOL,
        n_eval: EVAL,
        stride: 10,
        eval_every: 2,
        ..ExperimentConfig::default()
    };
    cfg.train.total_epochs = 60;
    cfg.pretrain.total_epochs = 150;
    cfg
}

/// Domains and source model shared by every operation of the page.
pub struct Bench {
    cfg: ExperimentConfig,
    source: Dataset,
    target: Dataset,
    model: SegModel,
    source_dice: f64,
}

impl Bench {
    /// `gain` and `noise` override the target texture gain and noise level.
    pub fn new(gain: f64, noise: f64) -> Result<Self> {
        let mut cfg = demo_config();
        cfg.target.intensity_gain = vec![gain; cfg.target.modalities];
        cfg.target.noise_sigma = noise;
        cfg.validate()?;
        let source = gen_dataset(&cfg.source, cfg.n_source + cfg.n_source_eval)?;
        let target = gen_dataset(&cfg.target, cfg.n_train + cfg.n_eval)?;
        let (model, report) = pretrain(&cfg, &source)?;
        Ok(Self {
            cfg,
            source,
            target,
            model,
            source_dice: report.dice_pct,
        })
    }

    fn domain(&self, target: bool) -> &Dataset {
        if target {
            &self.target
        } else {
            &self.source
        }
    }

    /// Axial slice `z` of one modality, row-major `EDGE x EDGE`.
    pub fn slice(&self, target: bool, sample: usize, modality: usize, z: usize) -> Result<Vec<f32>> {
        let data = self.domain(target);
        let x = data
            .samples
            .get(sample)
            .ok_or_else(|| Error::Precondition(format!("no sample {sample}")))?;
        if modality >= x.modality_count() || z >= EDGE {
            return Err(Error::Precondition("modality or slice out of range".into()));
        }
        let d = x.dims();
        let v = x.modality(modality);
        Ok((0..d.ny)
            .flat_map(|y| (0..d.nx).map(move |xx| (xx, y)))
            .map(|(xx, y)| v.get(xx, y, z))
            .collect())
    }

    /// Ground truth and source-model prediction of slice `z`, one byte per
    /// voxel: bit 0 truth, bit 1 prediction.
    pub fn overlay(&self, target: bool, sample: usize, z: usize) -> Result<Vec<u8>> {
        let data = self.domain(target);
        let x = data
            .samples
            .get(sample)
            .ok_or_else(|| Error::Precondition(format!("no sample {sample}")))?;
        if z >= EDGE {
            return Err(Error::Precondition("slice out of range".into()));
        }
        let pred = self.model.predict_mask(x)?;
        let truth = &data.truths[sample];
        let d = x.dims();
        Ok((0..d.ny)
            .flat_map(|y| (0..d.nx).map(move |xx| d.index(xx, y, z)))
            .map(|k| u8::from(truth.labels()[k] != 0) | u8::from(pred.labels()[k] != 0) << 1)
            .collect())
    }

    fn seed_data(&self, seed: u64) -> Result<(PreparedPool, PreparedEval)> {
        let (pool, eval) = split(seed, self.cfg.n_train, self.cfg.n_eval);
        Ok((
            PreparedPool::new(&self.target.subset(&pool)?, ReductionConfig::default())?,
            PreparedEval::new(&self.target.subset(&eval)?)?,
        ))
    }

    /// Selection terms of every pool sample under the source model, as JSON.
    pub fn scores_json(&self, seed: u64) -> Result<String> {
        let (pool, _) = self.seed_data(seed)?;
        let all: Vec<usize> = (0..pool.len()).collect();
        let rows = score_candidates(&self.model, &pool.feature_refs(), &all, &pool.distances)?;
        serde_json::to_string(&rows).map_err(|e| Error::InvalidValue(e.to_string()))
    }

    /// Evaluation Dice after each evaluated epoch, the picks, and the upper
    /// bound, as JSON.
    pub fn run_json(&self, strategy: &str, seed: u64) -> Result<String> {
        let strategy: Strategy = strategy.parse()?;
        let (pool, eval) = self.seed_data(seed)?;
        let lc: LoopConfig = self.cfg.loop_config(strategy, seed);
        let run = run_active_prepared(&pool, &eval, &self.model, &lc, "multi")?;
        let upper = run_upper_bound(&pool, &eval, &self.model, &lc, "multi")?;
        let curve: Vec<(usize, f64)> = run
            .epochs
            .iter()
            .filter_map(|e| e.dice_pct.map(|d| (e.epoch, d)))
            .collect();
        let picks: Vec<_> = run
            .rounds
            .iter()
            .map(|r| serde_json::json!({ "epoch": r.epoch, "sample": r.selected, "modality": r.election.winner }))
            .collect();
        Ok(serde_json::json!({
            "strategy": strategy.name(),
            "initial": run.initial_eval.dice_pct,
            "final": run.final_eval.dice_pct,
            "upper": upper.final_eval.dice_pct,
            "curve": curve,
            "picks": picks,
        })
        .to_string())
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    inner: Bench,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(gain: f64, noise: f64) -> std::result::Result<Demo, JsError> {
        Bench::new(gain, noise).map(|inner| Demo { inner }).map_err(js)
    }

    pub fn edge(&self) -> usize {
        EDGE
    }

    pub fn samples(&self, target: bool) -> usize {
        self.inner.domain(target).len()
    }

    #[wasm_bindgen(js_name = sourceDice)]
    pub fn source_dice(&self) -> f64 {
        self.inner.source_dice
    }

    pub fn slice(&self, target: bool, sample: usize, modality: usize, z: usize) -> std::result::Result<Vec<f32>, JsError> {
        self.inner.slice(target, sample, modality, z).map_err(js)
    }

    pub fn overlay(&self, target: bool, sample: usize, z: usize) -> std::result::Result<Vec<u8>, JsError> {
        self.inner.overlay(target, sample, z).map_err(js)
    }

    pub fn scores(&self, seed: u64) -> std::result::Result<String, JsError> {
        self.inner.scores_json(seed).map_err(js)
    }

    pub fn run(&self, strategy: &str, seed: u64) -> std::result::Result<String, JsError> {
        self.inner.run_json(strategy, seed).map_err(js)
    }
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqada::active::{is_query_step, run_active_prepared, RunRecord, Strategy};
use seqada::experiment::{outcome, prepare_seed, pretrain, run_arm, Arm, ExperimentConfig, ModalityMode};
use seqada::metrics::{aggregate, comparison_text, sequential_gain, ArmOutcome, ComparisonRow};
use seqada::model::{cross_entropy_grad, feature_dim};
use seqada::phantom::Dataset;
use seqada::scoring::uncertainty::normalized_entropy;
use seqada::scoring::wasserstein::wasserstein_1d_unsorted;
use seqada::scoring::{density, select_best, wasserstein_lp_oracle, PairDistanceMatrix};
use seqada::volume::{
    read_mask, read_probability_map, read_volume, write_mask, write_probability_map, write_volume, Dims,
    LabelMask, ProbabilityMap, Volume3D,
};
use seqada::SegModel;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform(xs: &[f64]) -> Vec<(Vec<f64>, f64)> {
    let w = 1.0 / xs.len() as f64;
    xs.iter().map(|&x| (vec![x], w)).collect()
}

fn ot_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=16);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let fast = wasserstein_1d_unsorted(&a, &b).map_err(|e| e.to_string())?;
        let lp = wasserstein_lp_oracle(&uniform(&a), &uniform(&b)).map_err(|e| e.to_string())?;
        worst = worst.max((fast - lp).abs());
    }
    let took = start.elapsed();
    ensure(worst <= 1e-9, || format!("max |W1 - LP| = {worst:.3e}"))?;
    ensure(took < Duration::from_secs(5), || format!("took {took:?}"))?;
    Ok(format!("100 instances, max |diff| {worst:.1e}, {:.2} s", took.as_secs_f64()))
}

fn metric_axioms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cloud = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let n = rng.random_range(1..=30);
        (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
    };
    let d = |x: &[f64], y: &[f64]| wasserstein_1d_unsorted(x, y).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (a, b, c) = (cloud(&mut rng), cloud(&mut rng), cloud(&mut rng));
        worst = worst.max(d(&a, &a)).max((d(&a, &b) - d(&b, &a)).abs());
        worst = worst.max(d(&a, &c) - d(&a, &b) - d(&b, &c));
    }
    ensure(worst <= 1e-9, || format!("worst axiom violation {worst:.3e}"))?;
    Ok(format!("200 triples, worst violation {worst:.1e}"))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let classes = rng.random_range(2..=4);
        let d = feature_dim(rng.random_range(1..=3));
        let w: Vec<f64> = (0..classes * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = rng.random_range(1..=16);
        let batch: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<u16> = (0..n).map(|_| rng.random_range(0..classes) as u16).collect();
        let rows: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();
        let (_, grad) = cross_entropy_grad(&w, classes, &rows, &labels);
        let loss = |w: &[f64]| cross_entropy_grad(w, classes, &rows, &labels).0;
        let mut num = Vec::with_capacity(w.len());
        for k in 0..w.len() {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[k] += h;
            down[k] -= h;
            num.push((loss(&up) - loss(&down)) / (2.0 * h));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = grad.iter().zip(&num).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / (norm(&grad) + norm(&num)).max(1e-12);
        worst = worst.max(rel);
    }
    ensure(worst < 1e-5, || format!("relative error {worst:.3e}"))?;
    Ok(format!("50 cases, worst relative error {worst:.1e}"))
}

struct Bench {
    cfg: ExperimentConfig,
    source: Dataset,
    target: Dataset,
}

impl Bench {
    fn new() -> Self {
        let cfg = ExperimentConfig::default();
        Self {
            source: cfg.gen_source().expect("source"),
            target: cfg.gen_target().expect("target"),
            cfg,
        }
    }

    fn mode(&self, mode: ModalityMode) -> ExperimentConfig {
        ExperimentConfig {
            modality_mode: mode,
            ..self.cfg.clone()
        }
    }
}

fn schedule(bench: &Bench, model: &SegModel) -> Outcome {
    let fired: Vec<usize> = (0..=200)
        .filter(|&t| (1..=3).any(|r| is_query_step(t, r, 40)))
        .collect();
    ensure(fired == [0, 40, 120], || format!("closed form fires at {fired:?}"))?;
    let cfg = &bench.cfg;
    ensure(cfg.budget == 3 && cfg.stride == 40 && cfg.train.total_epochs == 200, || {
        "default config is not B=3, tau=40, T=200".into()
    })?;
    let data = prepare_seed(cfg, &bench.target, 1).map_err(|e| e.to_string())?;
    let r = run_arm(cfg, &data, model, Arm::Strategy(Strategy::Ours)).map_err(|e| e.to_string())?;
    let at: Vec<usize> = r.rounds.iter().map(|x| x.epoch).collect();
    ensure(at == [0, 40, 120], || format!("loop queried at {at:?}"))?;
    Ok("closed form and a full run query at t = 0, 40, 120 only".into())
}

fn pool_invariants(bench: &Bench, model: &SegModel) -> Outcome {
    let cfg = &bench.cfg;
    let data = prepare_seed(cfg, &bench.target, 2).map_err(|e| e.to_string())?;
    for s in Strategy::ALL {
        // the loop asserts disjointness and |L| <= B every epoch in debug builds
        let lc = cfg.loop_config(s, 2);
        let r = run_active_prepared(&data.pool, &data.eval, model, &lc, "multi").map_err(|e| e.to_string())?;
        ensure(r.epochs.iter().all(|e| e.labeled <= cfg.budget), || format!("{s}: |L| exceeded B"))?;
        ensure(r.epochs.last().map(|e| e.labeled) == Some(cfg.budget), || format!("{s}: final |L| != B"))?;
        let mut ids = r.labeled_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ensure(ids.len() == cfg.budget, || format!("{s}: repeated labels"))?;
        for round in &r.rounds {
            let labeled_before: Vec<usize> = r.rounds.iter().filter(|x| x.round < round.round).map(|x| x.selected).collect();
            ensure(round.scores.iter().all(|c| !labeled_before.contains(&c.sample_id)), || {
                format!("{s}: a labeled sample was scored again")
            })?;
        }
    }
    let mode = if cfg!(debug_assertions) { "in-run asserts on" } else { "in-run asserts OFF" };
    Ok(format!("all strategies, every epoch ({mode})"))
}

fn determinism(bench: &Bench, model: &SegModel) -> Outcome {
    let cfg = &bench.cfg;
    let run = || -> Result<Vec<String>, String> {
        let data = prepare_seed(cfg, &bench.target, 3).map_err(|e| e.to_string())?;
        cfg.arms()
            .into_iter()
            .map(|arm| {
                run_arm(cfg, &data, model, arm)
                    .and_then(|r| r.to_json())
                    .map_err(|e| e.to_string())
            })
            .collect()
    };
    let (a, b) = (run()?, run()?);
    for (x, y) in a.iter().zip(&b) {
        ensure(x == y, || "records differ between executions".into())?;
        let back = RunRecord::from_json(x).map_err(|e| e.to_string())?;
        ensure(back.to_json().map_err(|e| e.to_string())? == *x, || "record JSON does not roundtrip".into())?;
    }
    Ok(format!("{} arms byte-identical across two executions", a.len()))
}

struct Campaign {
    multi: Vec<ComparisonRow>,
    singles: Vec<(ModalityMode, f64)>,
    multi_time: Duration,
    seeds: usize,
}

fn run_mode(bench: &Bench, mode: ModalityMode, arms: &[Arm]) -> Result<Vec<ArmOutcome>, String> {
    let cfg = bench.mode(mode);
    let (model, _) = pretrain(&cfg, &bench.source).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let data = prepare_seed(&cfg, &bench.target, seed).map_err(|e| e.to_string())?;
        for &arm in arms {
            let r = run_arm(&cfg, &data, &model, arm).map_err(|e| e.to_string())?;
            out.push(outcome(&r));
        }
    }
    Ok(out)
}

fn campaign(bench: &Bench) -> Result<Campaign, String> {
    let start = Instant::now();
    let multi = aggregate(&run_mode(bench, ModalityMode::Multi, &bench.cfg.arms())?).map_err(|e| e.to_string())?;
    let multi_time = start.elapsed();
    let mut singles = Vec::new();
    for l in 0..bench.cfg.target.modalities {
        let mode = ModalityMode::Single(l);
        let rows = aggregate(&run_mode(bench, mode, &[Arm::Strategy(Strategy::Ours)])?).map_err(|e| e.to_string())?;
        singles.push((mode, rows[0].dice_mean));
    }
    println!("{}", comparison_text(&multi));
    for (mode, d) in &singles {
        println!("ours {mode:<9} {d:6.2}");
    }
    Ok(Campaign {
        multi,
        singles,
        multi_time,
        seeds: bench.cfg.seeds.len(),
    })
}

fn mean_of(rows: &[ComparisonRow], arm: &str) -> Result<f64, String> {
    rows.iter()
        .find(|r| r.strategy == arm)
        .map(|r| r.dice_mean)
        .ok_or_else(|| format!("no {arm} arm"))
}

fn ordering(c: &Campaign) -> Outcome {
    let (upper, ours, random) = (mean_of(&c.multi, "upper")?, mean_of(&c.multi, "ours")?, mean_of(&c.multi, "random")?);
    let summary = format!(
        "upper {upper:.2} ours {ours:.2} random {random:.2} (gap {:+.2}) over {} seeds in {:.0} s",
        ours - random,
        c.seeds,
        c.multi_time.as_secs_f64()
    );
    ensure(c.seeds >= 20, || format!("only {} seeds", c.seeds))?;
    ensure(upper >= ours && ours >= random && ours - random >= 2.0, || summary.clone())?;
    ensure(c.multi_time < Duration::from_secs(600), || format!("too slow: {summary}"))?;
    Ok(summary)
}

fn sequential(c: &Campaign) -> Outcome {
    let gain = sequential_gain(&c.multi).ok_or("missing ours or oneoff arm")?;
    let summary = format!(
        "ours {:.2} oneoff {:.2} (gap {gain:+.2})",
        mean_of(&c.multi, "ours")?,
        mean_of(&c.multi, "oneoff")?
    );
    ensure(gain >= 0.0, || summary.clone())?;
    Ok(summary)
}

fn multimodal(bench: &Bench, c: &Campaign) -> Outcome {
    let contrasts = &bench.cfg.target.tumor_contrast;
    ensure(contrasts.windows(2).any(|w| w[0] != w[1]), || "per-modality contrasts are equal".into())?;
    let multi = mean_of(&c.multi, "ours")?;
    let (best_mode, best) = c
        .singles
        .iter()
        .copied()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or("no single-modality runs")?;
    let summary = format!("multi {multi:.2} vs best single ({best_mode}) {best:.2}");
    ensure(multi >= best, || summary.clone())?;
    Ok(summary)
}

fn criterion_suite() -> Outcome {
    // kernel value at the threshold
    let m = PairDistanceMatrix::from_values(2, vec![0.0, 0.8, 0.8, 0.0], 0.8).map_err(|e| e.to_string())?;
    let k = density(0, &[0, 1], &m).map_err(|e| e.to_string())?;
    ensure((k - (-1.0f64).exp()).abs() <= 1e-12, || format!("kernel at omega_d = {k}"))?;
    // a lone candidate has nothing to be dense around
    let g = density(1, &[1], &m).map_err(|e| e.to_string())?;
    ensure(g == 0.0, || format!("empty-sum density {g}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let scores: Vec<(usize, f64)> = (0..rng.random_range(1..30)).map(|i| (i, rng.random_range(0.0..50.0))).collect();
        let c = rng.random_range(1e-3..1e3);
        let scaled: Vec<(usize, f64)> = scores.iter().map(|&(i, s)| (i, s * c)).collect();
        ensure(select_best(&scores).unwrap() == select_best(&scaled).unwrap(), || "argmax moved under scaling".into())?;
        let classes = rng.random_range(2..5);
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let h = normalized_entropy(&raw.iter().map(|v| v / s).collect::<Vec<_>>());
        ensure((-1e-12..=1.0 + 1e-12).contains(&h), || format!("entropy {h} out of [0, 1]"))?;
    }
    ensure(normalized_entropy(&[1.0, 0.0]) == 0.0, || "one-hot entropy is not 0".into())?;
    ensure((normalized_entropy(&[0.5, 0.5]) - 1.0).abs() <= 1e-12, || "uniform entropy is not 1".into())?;
    Ok("kernel e^-1, empty gamma 0, argmax scale invariance, entropy in [0, 1]".into())
}

fn random_dims(rng: &mut ChaCha8Rng) -> Dims {
    Dims::new(rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..8))
}

fn roundtrips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..1000 {
        let d = random_dims(&mut rng);
        let v = Volume3D::new(d, (0..d.len()).map(|_| rng.random_range(-1e4f32..1e4)).collect()).unwrap();
        let p = dir.path().join(format!("v{i}.avol"));
        write_volume(&p, &v).map_err(|e| e.to_string())?;
        let back = read_volume(&p).map_err(|e| e.to_string())?;
        ensure(back.voxels().iter().zip(v.voxels()).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            format!("volume {i} changed")
        })?;

        let d = random_dims(&mut rng);
        let m = LabelMask::new(d, (0..d.len()).map(|_| rng.random_range(0..4)).collect()).unwrap();
        let p = dir.path().join(format!("m{i}.avol"));
        write_mask(&p, &m).map_err(|e| e.to_string())?;
        ensure(read_mask(&p).map_err(|e| e.to_string())? == m, || format!("mask {i} changed"))?;

        let d = random_dims(&mut rng);
        let c = rng.random_range(2..5);
        let probs: Vec<f64> = (0..d.len())
            .flat_map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(move |v| f64::from((v / s) as f32))
            })
            .collect();
        let pm = ProbabilityMap::new(d, c, probs).unwrap();
        let p = dir.path().join(format!("p{i}.avol"));
        write_probability_map(&p, &pm).map_err(|e| e.to_string())?;
        let back = read_probability_map(&p).map_err(|e| e.to_string())?;
        ensure(
            back.classes() == c && back.probs().iter().zip(pm.probs()).all(|(a, b)| a.to_bits() == b.to_bits()),
            || format!("probability map {i} changed"),
        )?;
    }
    Ok("1000 volumes, 1000 masks, 1000 probability maps bit-exact".into())
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: u8, name: &str, r: Outcome| {
        match &r {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why}");
            }
        }
    };
    report(1, "OT oracle equivalence", guarded(ot_oracle));
    report(2, "W1 metric axioms", guarded(metric_axioms));
    report(3, "gradient check", guarded(gradient_check));

    let bench = Bench::new();
    let model = guarded(|| {
        let (m, e) = pretrain(&bench.cfg, &bench.source).map_err(|e| e.to_string())?;
        println!("source model: held-out source Dice {:.2}%", e.dice_pct);
        Ok(m)
    });
    let need = |f: &dyn Fn(&SegModel) -> Outcome| match &model {
        Ok(m) => guarded(|| f(m)),
        Err(e) => Err(format!("no source model: {e}")),
    };
    report(4, "query schedule", need(&|m| schedule(&bench, m)));
    report(5, "pool invariants", need(&|m| pool_invariants(&bench, m)));
    report(6, "determinism", need(&|m| determinism(&bench, m)));

    let camp = guarded(|| campaign(&bench));
    let with = |f: &dyn Fn(&Campaign) -> Outcome| match &camp {
        Ok(c) => guarded(|| f(c)),
        Err(e) => Err(e.clone()),
    };
    report(7, "statistical ordering", with(&ordering));
    report(8, "sequential vs one-off", with(&sequential));
    report(9, "multi- vs single-modal", with(&|c| multimodal(&bench, c)));

    report(10, "density and criterion suite", guarded(criterion_suite));
    report(11, "format roundtrip", guarded(roundtrips));

    if failed == 0 {
        println!("acceptance: all 11 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}

//! End-to-end acceptance checks. Run with
//! `cargo test -p rl2r --test acceptance -- --nocapture` to see the report.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use rl2r::cli::{cmd_parse_logs, cmd_train};
use rl2r::config::RunConfig;
use rl2r::data::{compose_answer, generate_world, parse_response, ClampPolicy, SyntheticWorldConfig};
use rl2r::eval::{gmad_pairs, plcc, srcc};
use rl2r::grpo::{clipped_term, kl_approx, standardize, surrogate, surrogate_value, GrpoConfig, Rollout};
use rl2r::policy::{GaussianScorer, PolicyParams, ScoringPolicy};
use rl2r::quality::{MosRecord, ScoreGroup};
use rl2r::reward::fidelity_term;
use rl2r::thurstone::{comparative_prob, ThurstoneConfig, Variant};
use rl2r::train::{RewardSource, TrainConfig, TrainRunLog, Trainer};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, format!("took {elapsed:?}, limit {limit:?}"))
}

fn equation_oracles() -> Outcome {
    const N: usize = 1000;
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0f64);
        *w = w.max(e);
    };
    for _ in 0..N {
        let p = [0.0, 0.5, 1.0][r.random_range(0..3)];
        let q: f64 = r.random();
        note("fidelity", rel_err(fidelity_term(p, q).unwrap(), fidelity(p, q)));

        let new = r.random_range(-12.0..2.0);
        let reference = new + r.random_range(-16.0..16.0);
        note("kl", rel_err(kl_approx(new, reference), kl(new, reference)));

        let ratio = (r.random_range(-1.5f64..1.5)).exp();
        let a = r.random_range(-3.0..3.0);
        let eps = r.random_range(0.05..0.5);
        note("clip", rel_err(clipped_term(ratio, a, eps), clipped(ratio, a, eps)));

        let k = r.random_range(2..9);
        let rewards: Vec<f64> = (0..k).map(|_| r.random()).collect();
        note("advantages", rel_err_vec(&standardize(&rewards).unwrap(), &advantages(&rewards)));

        let (ka, kb) = (r.random_range(2..7), r.random_range(2..7));
        let a_scores = random_group(&mut r, ka);
        let b_scores = random_group(&mut r, kb);
        let gamma = [1e-8, 1e-3, 0.5][r.random_range(0..3)];
        let idx = r.random_range(0..ka);
        let ga = ScoreGroup::new("a", a_scores.clone()).unwrap();
        let gb = ScoreGroup::new("b", b_scores.clone()).unwrap();
        for (name, variant, want) in [
            ("mean-anchored", Variant::MeanAnchored, mean_anchored(idx, &a_scores, &b_scores, gamma)),
            ("prob-average", Variant::ProbabilityAverage, prob_average(idx, &a_scores, &b_scores, gamma)),
            ("case-v", Variant::CaseV, case_v(idx, &a_scores, &b_scores)),
        ] {
            let cfg = ThurstoneConfig {
                gamma,
                variant,
                ..Default::default()
            };
            note(name, rel_err(comparative_prob(idx, &ga, &gb, &cfg).unwrap(), want));
        }
    }
    let elapsed = start.elapsed();
    let summary = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    for (name, e) in &worst {
        check(*e < 1e-10, format!("{name} max rel err {e:.3e}"))?;
    }
    within(elapsed, Duration::from_secs(10))?;
    Ok(format!("{N} inputs each, max rel err: {summary}; {elapsed:.2?}"))
}

fn random_scorer<R: Rng>(r: &mut R, d: usize) -> GaussianScorer {
    GaussianScorer::new(PolicyParams {
        weights: (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
        bias: r.random_range(-1.0..1.0),
        log_std: r.random_range(-1.5..0.0),
    })
}

fn perturbed<R: Rng>(r: &mut R, p: &GaussianScorer, scale: f64) -> GaussianScorer {
    let mut q = p.clone();
    let v: Vec<f64> = p.params().iter().map(|x| x + scale * r.random_range(-1.0..1.0)).collect();
    q.set_params(&v).unwrap();
    q
}

fn gradient_check() -> Outcome {
    const CONFIGS: usize = 200;
    let start = Instant::now();
    let mut r = rng(202);
    let mut worst = 0.0f64;
    let h = 1e-6;
    for c in 0..CONFIGS {
        let d = r.random_range(1..7);
        let theta = random_scorer(&mut r, d);
        let old = perturbed(&mut r, &theta, 0.15);
        let reference = perturbed(&mut r, &theta, 0.3);
        let cfg = GrpoConfig {
            epsilon: r.random_range(0.1..0.3),
            beta: r.random_range(0.0..0.2),
            ..Default::default()
        };
        let b = r.random_range(2..6);
        let k = r.random_range(2..7);
        let rollouts: Vec<Rollout> = (0..b)
            .map(|_| {
                let features: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
                let values: Vec<f64> = (0..k)
                    .map(|_| old.sample(&features, &mut r).unwrap().value)
                    .collect();
                let rewards: Vec<f64> = (0..k).map(|_| r.random()).collect();
                Rollout {
                    logprob_old: values.iter().map(|&v| old.logprob(&features, v).unwrap()).collect(),
                    logprob_ref: values.iter().map(|&v| reference.logprob(&features, v).unwrap()).collect(),
                    advantages: standardize(&rewards).unwrap(),
                    features,
                    values,
                }
            })
            .collect();
        let analytic = surrogate(&theta, &rollouts, &cfg).unwrap().grad;
        let base = theta.params();
        let numeric: Vec<f64> = (0..base.len())
            .map(|i| {
                let at = |delta: f64| {
                    let mut p = theta.clone();
                    let mut v = base.clone();
                    v[i] += delta;
                    p.set_params(&v).unwrap();
                    surrogate_value(&p, &rollouts, &cfg).unwrap()
                };
                (at(h) - at(-h)) / (2.0 * h)
            })
            .collect();
        let e = rel_err_vec(&analytic, &numeric);
        worst = worst.max(e);
        check(e < 1e-4, format!("config {c}: rel err {e:.3e}"))?;
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(30))?;
    Ok(format!("{CONFIGS} configurations, max rel err {worst:.1e}; {elapsed:.2?}"))
}

fn run_cfg(overrides: &[(&str, &str)]) -> (RunConfig, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    for (k, v) in overrides {
        cfg.set(k, v).unwrap();
    }
    cfg.out_dir = Some(dir.path().to_path_buf());
    (cfg, dir)
}

fn default_run() -> (f64, TrainRunLog, Duration) {
    let (cfg, dir) = run_cfg(&[]);
    let start = Instant::now();
    let (summary, log) = cmd_train(&cfg, dir.path()).unwrap();
    (summary.heldout_srcc.unwrap(), log, start.elapsed())
}

fn end_to_end(run: &(f64, TrainRunLog, Duration)) -> Outcome {
    let (s, log, elapsed) = run;
    let per_seed: Vec<String> = (1..8)
        .map(|seed| {
            let (cfg, dir) = run_cfg(&[("seed", &seed.to_string())]);
            let (summary, _) = cmd_train(&cfg, dir.path()).unwrap();
            format!("{:.3}", summary.heldout_srcc.unwrap())
        })
        .collect();
    check(*s >= 0.9, format!("held-out SRCC {s:.4} < 0.9"))?;
    within(*elapsed, Duration::from_secs(300))?;
    Ok(format!(
        "held-out SRCC {s:.4} after {} steps in {elapsed:.2?} (other seeds, not asserted: {})",
        log.steps.len(),
        per_seed.join(" ")
    ))
}

fn two_dataset_pool(scale_b: (f64, f64)) -> Vec<MosRecord> {
    let world = |seed, prefix: &str, (low, high)| {
        generate_world(&SyntheticWorldConfig {
            seed,
            n_images: 100,
            id_prefix: prefix.into(),
            dataset_id: format!("set_{prefix}"),
            mos_low: low,
            mos_high: high,
            ..Default::default()
        })
        .unwrap()
        .records
    };
    let mut pool = world(31, "a", (1.0, 5.0));
    pool.extend(world(32, "b", scale_b));
    pool
}

fn reward_trace(pool: &[MosRecord], reward: RewardSource) -> Vec<f64> {
    let cfg = TrainConfig {
        reward,
        seed: 5,
        ..Default::default()
    };
    let init = rl2r::train::init_policy(8, 5, 0.5f64.ln(), 0.01);
    let mut t = Trainer::new(init, cfg).unwrap();
    t.train(pool, None).unwrap().reward_trace()
}

fn multi_dataset() -> Outcome {
    let control = two_dataset_pool((1.0, 5.0));
    let mixed = two_dataset_pool((0.0, 100.0));
    let a = reward_trace(&control, RewardSource::Fidelity);
    let b = reward_trace(&mixed, RewardSource::Fidelity);
    check(a.len() == b.len() && !a.is_empty(), "trace lengths differ")?;
    let max_diff = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    check(max_diff <= 1e-12, format!("fidelity traces differ by {max_diff:.3e}"))?;

    let ra = reward_trace(&control, RewardSource::Regression);
    let rb = reward_trace(&mixed, RewardSource::Regression);
    let reg_diff = ra.iter().zip(&rb).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    check(reg_diff > 0.0, "regression baseline did not react to the rescale")?;
    Ok(format!(
        "{} rewards, fidelity max diff {max_diff:.1e}; regression baseline max diff {reg_diff:.3}",
        a.len()
    ))
}

fn std_decay(run: &(f64, TrainRunLog, Duration)) -> Outcome {
    let steps = &run.1.steps;
    let q = steps.len() / 4;
    check(q > 0, "too few steps")?;
    let mean = |s: &[rl2r::train::StepLog]| s.iter().map(|x| x.mean_score_std).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&steps[..q]), mean(&steps[steps.len() - q..]));
    check(last < first, format!("std first quartile {first:.4}, last {last:.4}"))?;
    Ok(format!("mean sampled std {first:.4} -> {last:.4}"))
}

fn ablation() -> Outcome {
    let rows = [
        ("fidelity + mean-anchored", "fidelity", "mean-anchored"),
        ("binary", "binary", "mean-anchored"),
        ("probability average", "fidelity", "prob-average"),
        ("case V", "fidelity", "case-v"),
    ];
    let mut table = String::from("\n    | configuration | held-out SRCC | final mean std |\n    |---|---|---|");
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for (name, reward, variant) in rows {
        let (cfg, dir) = run_cfg(&[("reward", reward), ("variant", variant)]);
        let (summary, log) = cmd_train(&cfg, dir.path()).map_err(|e| format!("{name}: {e}"))?;
        let s = summary.heldout_srcc.unwrap();
        let std = log.steps.last().unwrap().mean_score_std;
        table.push_str(&format!("\n    | {name} | {s:.4} | {std:.4} |"));
        if s < 0.8 {
            failures.push(format!("{name} SRCC {s:.4}"));
        }
        traces.push(log.reward_trace());
    }
    for i in 0..traces.len() {
        for j in i + 1..traces.len() {
            check(traces[i] != traces[j], format!("configurations {i} and {j} produced identical rewards"))?;
        }
    }
    check(failures.is_empty(), format!("{}{table}", failures.join("; ")))?;
    Ok(format!("all four configurations >= 0.8{table}"))
}

fn gmad_oracle() -> Outcome {
    let mut r = rng(707);
    let mut elapsed = Duration::ZERO;
    let trials = 200;
    let mut pairs = 0;
    for t in 0..trials {
        let ids: Vec<String> = (0..50).map(|i| format!("img{i:02}")).collect();
        let truth: Vec<f64> = (0..50).map(|_| r.random_range(0.0..1.0)).collect();
        let mut def: Vec<f64> = truth.iter().map(|q| q + r.random_range(-0.2..0.2)).collect();
        if t % 3 == 0 {
            def.iter_mut().for_each(|v| *v = (*v * 20.0).round() / 20.0);
        }
        let att: Vec<f64> = truth.iter().map(|q| q + r.random_range(-0.4..0.4)).collect();
        let levels = r.random_range(1..8);
        let tol = r.random_range(0.005..0.1);
        let dm: BTreeMap<String, f64> = ids.iter().cloned().zip(def.iter().cloned()).collect();
        let am: BTreeMap<String, f64> = ids.iter().cloned().zip(att.iter().cloned()).collect();
        let start = Instant::now();
        let got = gmad_pairs(&dm, &am, levels, tol).unwrap();
        elapsed += start.elapsed();
        let got: Vec<(usize, String, String, f64)> = got
            .pairs
            .into_iter()
            .map(|p| (p.defender_level, p.image_a, p.image_b, p.attacker_gap))
            .collect();
        let want = gmad_exhaustive(&ids, &def, &att, levels, tol);
        check(got == want, format!("trial {t}: {got:?} != {want:?}"))?;
        pairs += got.len();
    }
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("{trials} score maps of 50 images, {pairs} pairs identical; search time {elapsed:.2?}"))
}

fn response_round_trip() -> Outcome {
    for i in 100..=500 {
        let s = i as f64 / 100.0;
        let text = compose_answer(s, "edges are sharp, mild noise");
        let back = parse_response(&text, ClampPolicy::Reject).map_err(|e| e.to_string())?;
        check(back == s, format!("{s} came back as {back}"))?;
    }

    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.csv");
    std::fs::write(&world, "image_id,mos,dataset_id,f0\nx,4.1,d,0.0\ny,2.2,d,0.0\n").unwrap();
    let log = dir.path().join("responses.jsonl");
    let lines = [
        ("x", 4.0),
        ("x", 3.6),
        ("x", 4.4),
        ("y", 0.2),
        ("y", 2.5),
        ("y", 1.9),
    ];
    let text: String = lines
        .iter()
        .map(|(id, s)| {
            let answer = if *s < 1.0 {
                "<think>blurry</think><answer>0.2</answer>".to_string()
            } else {
                compose_answer(*s, "ok")
            };
            serde_json::json!({"image_id": id, "text": answer}).to_string() + "\n"
        })
        .collect();
    std::fs::write(&log, text).unwrap();

    let mut counts = Vec::new();
    for (policy, expect_clamped, expect_rejected) in [("clamp", 1, 0), ("reject", 0, 1)] {
        let out = dir.path().join(policy);
        let mut cfg = RunConfig::default();
        cfg.set("clamp", policy).unwrap();
        cfg.set("k_responses", "2").unwrap();
        cfg.world_path = Some(world.clone());
        cfg.responses = Some(log.clone());
        let report = cmd_parse_logs(&cfg, &out).map_err(|e| e.to_string())?;
        check(
            report.clamped == expect_clamped && report.rejected == expect_rejected,
            format!("{policy}: clamped {} rejected {}", report.clamped, report.rejected),
        )?;
        let y = report.images.iter().find(|g| g.image_id == "y").unwrap();
        let expected_first = if policy == "clamp" { 1.0 } else { 2.5 };
        check(y.scores[0] == expected_first, format!("{policy}: y scores {:?}", y.scores))?;
        check(
            report.images.iter().flat_map(|g| &g.rewards).all(|r| (0.0..=1.0).contains(r)),
            "reward out of [0, 1]",
        )?;
        counts.push(format!("{policy}: clamped {} rejected {}", report.clamped, report.rejected));
    }
    Ok(format!("401 two-decimal scores round-trip; 0.2 answer -> {}", counts.join(", ")))
}

fn metric_oracles() -> Outcome {
    let mut r = rng(909);
    let mut worst = 0.0f64;
    let trials = 1000;
    for t in 0..trials {
        let n = r.random_range(3..80);
        let tied = t % 2 == 0;
        let draw = |r: &mut rand_chacha::ChaCha8Rng| {
            if tied {
                r.random_range(0..6) as f64
            } else {
                r.random_range(-3.0..3.0)
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut r)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + draw(&mut r)).collect();
        let (Ok(s), Ok(p)) = (srcc(&x, &y), plcc(&x, &y)) else {
            continue;
        };
        let e = (s - spearman(&x, &y)).abs().max((p - pearson(&x, &y)).abs());
        worst = worst.max(e);
        check(e <= 1e-12, format!("trial {t}: diff {e:.3e}"))?;
    }
    Ok(format!("{trials} vector pairs with and without ties, max abs diff {worst:.1e}"))
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome, failed: &mut Vec<usize>) {
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match result {
        Ok(detail) => println!("criterion {n} ({name}): PASS - {detail}"),
        Err(why) => {
            println!("criterion {n} ({name}): FAIL - {why}");
            failed.push(n);
        }
    }
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    run(1, "equation oracles", equation_oracles, &mut failed);
    run(2, "gradient correctness", gradient_check, &mut failed);
    let default = catch_unwind(default_run).ok();
    run(3, "end-to-end learning", || end_to_end(default.as_ref().ok_or("default run panicked")?), &mut failed);
    run(4, "multi-dataset invariance", multi_dataset, &mut failed);
    run(5, "std decay", || std_decay(default.as_ref().ok_or("default run panicked")?), &mut failed);
    run(6, "ablation machinery", ablation, &mut failed);
    run(7, "gMAD oracle equivalence", gmad_oracle, &mut failed);
    run(8, "response round trip", response_round_trip, &mut failed);
    run(9, "metric oracles", metric_oracles, &mut failed);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

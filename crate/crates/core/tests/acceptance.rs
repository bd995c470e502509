//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line for each,
//! and exits nonzero if any fails.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use hirm::analysis::{
    final_probe, jaccard_probes, jaccard_topk, representation_shift, sweep, PromptRole, SweepAxis,
    SweepBase, SweepPrompts, SweepSetting,
};
use hirm::encoder::{forward_with_trace, EncoderConfig, HookKind, SupervisionPoint, TextEncoder};
use hirm::misdirection::{
    assert_frozen, build_safety_target, compare_frozen, compute_empirical_concept_vector,
    encoder_gradcheck, hirm_loss, sample_random_target, train, ErasureRun, LossSpec, TargetBuilder,
    TrainConfig,
};
use hirm::persistence::load_checkpoint;
use hirm::tensor::{CoordSample, ParamId};
use rand::Rng;

const GRADCHECK_MAX_REL: f64 = 1e-4;
const GRADCHECK_EPS: f64 = 1e-6;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const CONVERGENCE_RATIO: f64 = 0.1;
const CONVERGENCE_BUDGET: Duration = Duration::from_secs(120);
const LOCALITY_FACTOR: f64 = 2.0;
const LOCALITY_SEEDS: [u64; 3] = [0, 1, 2];
const JACCARD_K: usize = 50;
const MATCHED_LOSS_RATIO: f64 = 0.1;
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_LOSS_CASES: usize = 100;
const ORACLE_FORWARD_CASES: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn toy_run(seed: u64) -> ErasureRun {
    let cfg = EncoderConfig {
        init_seed: seed,
        ..EncoderConfig::default()
    };
    let enc = TextEncoder::init(&cfg, &toy_corpus()).unwrap();
    let tc = TrainConfig {
        learning_rate: 1e-2,
        epochs: 200,
        coefficient: 1.0,
        seed,
        ..TrainConfig::hirm_r(cfg.num_blocks)
    };
    train(&enc, &[TARGET.to_string()], &TargetBuilder::Random, &tc).unwrap()
}

fn non_targets() -> Vec<String> {
    NON_TARGETS.iter().map(|s| s.to_string()).collect()
}

fn gradient_oracle() -> Outcome {
    let cfg = EncoderConfig {
        num_blocks: 3,
        model_dim: 8,
        num_heads: 2,
        ff_dim: 32,
        max_tokens: 6,
        ..EncoderConfig::default()
    };
    let enc = TextEncoder::init(&cfg, &toy_corpus()).unwrap();
    let target = sample_random_target(6, 8, 42).with_coefficient(1.0);
    let spec = LossSpec {
        prompt: TARGET,
        target: &target,
        supervision: SupervisionPoint::default_for(3),
        over_all_slots: true,
    };
    let all: BTreeSet<ParamId> = (0..cfg.num_params()).map(ParamId).collect();
    let start = Instant::now();
    let rep = encoder_gradcheck(&enc, &spec, &all, GRADCHECK_EPS, CoordSample::All).unwrap();
    let took = start.elapsed();
    outcome(
        rep.max_rel_error < GRADCHECK_MAX_REL && took < GRADCHECK_BUDGET,
        format!(
            "max rel error {:.2e} over {} coordinates (< {GRADCHECK_MAX_REL:e}), {:.2?} (< {:?})",
            rep.max_rel_error, rep.checked, took, GRADCHECK_BUDGET
        ),
    )
}

fn freeze_invariant() -> Outcome {
    let cfg = EncoderConfig {
        num_blocks: 4,
        model_dim: 16,
        num_heads: 2,
        ff_dim: 32,
        max_tokens: 10,
        ..EncoderConfig::default()
    };
    let corpus = ["van gogh", "a photo of a dog", "naked woman on a beach", "woman on a beach"];
    let enc = TextEncoder::init(&cfg, &corpus).unwrap();
    let builders = [
        TargetBuilder::Random,
        TargetBuilder::Semantic {
            guided_prompts: vec!["a photo of a dog".into()],
        },
        TargetBuilder::Safety {
            concept_pairs: vec![("naked woman on a beach".into(), "woman on a beach".into())],
        },
    ];
    let mut checked = 0;
    for b in &builders {
        let tc = TrainConfig {
            learning_rate: 1e-2,
            epochs: 10,
            ..TrainConfig::hirm_r(4)
        };
        let run = train(&enc, &["van gogh".to_string()], b, &tc).unwrap();
        let report = match assert_frozen(&run) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("{e}")),
        };
        let moved = report.entries.iter().filter(|e| !e.trainable && e.max_abs_diff != 0.0).count();
        if moved > 0 {
            return outcome(false, format!("{moved} frozen tensors changed"));
        }
        checked += report.entries.iter().filter(|e| !e.trainable).count();
    }

    // The same invariant through the command line and the checkpoint format.
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let a = load_checkpoint(&dir.path().join("a.ckpt")).unwrap();
    let b = load_checkpoint(&dir.path().join("b.ckpt")).unwrap();
    match compare_frozen(&a.params, &b.params, &BTreeSet::from([1])) {
        Ok(r) => {
            checked += r.entries.iter().filter(|e| !e.trainable).count();
            let block1_moved = r.entries.iter().any(|e| e.trainable && e.max_abs_diff > 0.0);
            outcome(
                block1_moved,
                format!("{checked} frozen tensors bit-identical across 3 modes and the CLI; block 1 moved: {block1_moved}"),
            )
        }
        Err(e) => outcome(false, format!("{e}")),
    }
}

fn convergence(run: &ErasureRun, took: Duration) -> Outcome {
    let ratio = run.final_loss / run.initial_loss;
    outcome(
        ratio < CONVERGENCE_RATIO && took < CONVERGENCE_BUDGET,
        format!(
            "loss {:.4} -> {:.4}, ratio {ratio:.4} (< {CONVERGENCE_RATIO}), {took:.2?} (< {CONVERGENCE_BUDGET:?})",
            run.initial_loss, run.final_loss
        ),
    )
}

fn final_shifts(run: &ErasureRun) -> (f64, f64) {
    let mut prompts = vec![TARGET.to_string()];
    prompts.extend(non_targets());
    let mut roles = vec![PromptRole::Target];
    roles.extend([PromptRole::NonTarget; 5]);
    let rep = representation_shift(&run.original, &run.erased, &prompts, &roles).unwrap();
    let probe = final_probe(run.original.config().num_blocks);
    (
        rep.mean_cosine(PromptRole::Target, probe).unwrap(),
        rep.mean_cosine(PromptRole::NonTarget, probe).unwrap(),
    )
}

fn locality() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in LOCALITY_SEEDS {
        let (t, n) = final_shifts(&toy_run(seed));
        let factor = t / n;
        pass &= factor >= LOCALITY_FACTOR;
        parts.push(format!("seed {seed}: {t:.3}/{n:.3} = {factor:.2}"));
    }
    outcome(pass, format!("{} (need >= {LOCALITY_FACTOR})", parts.join(", ")))
}

fn jaccard_trend(run: &ErasureRun) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for probe in jaccard_probes(run.original.config().num_blocks) {
        let t = jaccard_topk(&run.original, &run.erased, TARGET, probe, JACCARD_K).unwrap().ratio;
        let n = NON_TARGETS
            .iter()
            .map(|p| jaccard_topk(&run.original, &run.erased, p, probe, JACCARD_K).unwrap().ratio)
            .sum::<f64>()
            / NON_TARGETS.len() as f64;
        pass &= t < n;
        parts.push(format!("{probe}: target {t:.3} vs non-target {n:.3}"));
    }
    outcome(pass, parts.join(", "))
}

fn layer_ablation() -> Outcome {
    let cfg = EncoderConfig::default();
    let l = cfg.num_blocks;
    let early = SweepSetting::SupervisionPoint(SupervisionPoint::new(1, HookKind::MlpFc2));
    let late = SweepSetting::SupervisionPoint(SupervisionPoint::new(l, HookKind::AttnOutProj));
    let prompts = SweepPrompts {
        targets: vec![TARGET.to_string()],
        non_targets: non_targets(),
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in LOCALITY_SEEDS {
        let base = SweepBase {
            encoder: EncoderConfig {
                init_seed: seed,
                ..cfg.clone()
            },
            corpus: toy_corpus(),
            train: TrainConfig {
                learning_rate: 1e-2,
                epochs: 200,
                coefficient: 1.0,
                seed,
                target_loss_ratio: Some(MATCHED_LOSS_RATIO),
                ..TrainConfig::hirm_r(l)
            },
            builder: TargetBuilder::Random,
        };
        let res = sweep(SweepAxis::SupervisionPoint, &hirm::analysis::layer_grid(l), &base, &prompts).unwrap();
        let get = |s| res.row(&s).and_then(|r| r.outcome.clone()).unwrap();
        let (e, la) = (get(early), get(late));
        pass &= e.mean_non_target_shift > la.mean_non_target_shift;
        parts.push(format!(
            "seed {seed}: 1-mlp_fc2 {:.3} (ratio {:.3}, {} ep) vs {l}-attn_out_proj {:.3} (ratio {:.3}, {} ep)",
            e.mean_non_target_shift,
            e.loss_ratio(),
            e.epochs_run,
            la.mean_non_target_shift,
            la.loss_ratio(),
            la.epochs_run
        ));
    }
    outcome(pass, parts.join("; "))
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng(7);
    let mut worst_loss: f64 = 0.0;
    for _ in 0..ORACLE_LOSS_CASES {
        let enc = random_encoder(&mut r);
        let cfg = enc.config().clone();
        let (seq, trace) = enc.trace(&random_prompt(&mut r)).unwrap();
        let sp = SupervisionPoint::new(
            r.random_range(1..=cfg.num_blocks),
            HookKind::SUPERVISION[r.random_range(0..3)],
        );
        let c = r.random_range(-3.0..600.0);
        let all = r.random_bool(0.5);
        let target = sample_random_target(cfg.max_tokens, cfg.model_dim, r.random()).with_coefficient(c);
        let h = trace.hook(sp).unwrap();
        let rows = if all { cfg.max_tokens } else { seq.real_len };
        let mut sum = 0.0;
        for t in 0..rows {
            for j in 0..cfg.model_dim {
                sum += (h.row(t)[j] - c * target.matrix.row(t)[j]).powi(2);
            }
        }
        let want = sum / rows as f64;
        let got = hirm_loss(&trace, &target, sp, all, seq.real_len).unwrap().item().unwrap();
        worst_loss = worst_loss.max((got - want).abs() / want.abs().max(1.0));
    }
    let mut worst_fwd: f64 = 0.0;
    for _ in 0..ORACLE_FORWARD_CASES {
        let enc = random_encoder(&mut r);
        let seq = enc.tokenize(&random_prompt(&mut r)).unwrap();
        let got = forward_with_trace(&enc.params, &seq).unwrap();
        let want = oracle_forward(&enc.params, &seq.ids);
        for (l, b) in got.blocks.iter().enumerate() {
            worst_fwd = worst_fwd
                .max(max_diff(&b.attn_out, &want.attn_out[l]))
                .max(max_diff(&b.mlp_hidden, &want.mlp_hidden[l]))
                .max(max_diff(&b.mlp_out, &want.mlp_out[l]))
                .max(max_diff(&b.block_out, &want.block_out[l]));
        }
        worst_fwd = worst_fwd.max(max_diff(&got.final_out, &want.final_out));
    }
    outcome(
        worst_loss <= ORACLE_TOL && worst_fwd <= ORACLE_TOL,
        format!(
            "loss {ORACLE_LOSS_CASES} cases worst {worst_loss:.1e}, forward {ORACLE_FORWARD_CASES} configs worst {worst_fwd:.1e} (<= {ORACLE_TOL:e})"
        ),
    )
}

const PIPELINE_CONFIG: &str = r#"
[encoder]
L = 4
d = 16
heads = 2
ff_dim = 64
T = 12
seed = 5

[erase]
mode = "random"
prompts = ["van gogh"]
lr = 0.01
epochs = 20
coefficient = 1.0
seed = 42

[analyze]
non_target_prompts = ["a photo of a dog", "red sports car", "mountain lake sunrise"]
"#;

fn pipeline(dir: &Path) {
    let bin = env!("CARGO_BIN_EXE_hirm");
    std::fs::write(dir.join("run.toml"), PIPELINE_CONFIG).unwrap();
    let steps: [&[&str]; 4] = [
        &["init", "--config", "run.toml", "--out", "a.ckpt"],
        &["erase", "--config", "run.toml", "--in", "a.ckpt", "--out", "b.ckpt", "--report", "erase.jsonl"],
        &["analyze", "--original", "a.ckpt", "--erased", "b.ckpt", "--config", "run.toml", "--report", "analyze.jsonl"],
        &["analyze", "--original", "a.ckpt", "--erased", "b.ckpt", "--config", "run.toml", "--report", "analyze.csv"],
    ];
    for args in steps {
        let out = Command::new(bin).current_dir(dir).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let files = ["a.ckpt", "b.ckpt", "erase.jsonl", "analyze.jsonl", "analyze.csv"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap())
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two runs", files.len())
        } else {
            format!("differing: {differing:?}")
        },
    )
}

fn safety_algebra() -> Outcome {
    let corpus = [
        "naked woman in the apartment",
        "nude man on the beach",
        "topless person by the pool",
        "naked nude bare exposed",
    ];
    let enc = TextEncoder::init(&EncoderConfig::default(), &corpus).unwrap();
    let sp = SupervisionPoint::default_for(4);
    let prompt = "naked nude bare exposed";
    let (_, trace) = enc.trace(prompt).unwrap();
    let z = trace.hook(sp).unwrap();

    let same = vec![("woman".to_string(), "woman".to_string())];
    let zero = compute_empirical_concept_vector(&enc, &same, sp).unwrap();
    let zero_exact = zero.matrix.data().iter().all(|v| v.to_bits() == 0);

    let pairs = vec![
        ("naked woman in the apartment".to_string(), "woman in the apartment".to_string()),
        ("nude man on the beach".to_string(), "man on the beach".to_string()),
        ("topless person by the pool".to_string(), "person by the pool".to_string()),
    ];
    let ve = compute_empirical_concept_vector(&enc, &pairs, sp).unwrap();
    let s = build_safety_target(&enc, prompt, &ve, sp).unwrap();
    let back = s.matrix.zip_map(&ve.matrix, |a, b| a + b).unwrap();
    let mismatched = back
        .data()
        .iter()
        .zip(z.data())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    outcome(
        zero_exact && mismatched == 0,
        format!(
            "identical pairs give exact zero: {zero_exact}; (Z - V_e) + V_e bitwise mismatches {mismatched}/{} (max abs diff {:.1e})",
            z.numel(),
            back.max_abs_diff(z).unwrap()
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "gradient oracle", gradient_oracle()));
    results.push((2, "freeze invariant", freeze_invariant()));
    let start = Instant::now();
    let run = toy_run(42);
    let took = start.elapsed();
    results.push((3, "convergence", convergence(&run, took)));
    results.push((4, "locality", locality()));
    results.push((5, "jaccard trend", jaccard_trend(&run)));
    results.push((6, "layer ablation trend", layer_ablation()));
    results.push((7, "oracle equivalence", oracle_equivalence()));
    results.push((8, "determinism", determinism()));
    results.push((9, "safety-target algebra", safety_algebra()));

    println!();
    let mut failed = 0;
    for (n, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("acceptance {n} {name}: {tag} | {}", o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any of them fails. The trainability runs dominate the wall time.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::{cos, gen, hd_oracle, localness_oracle, random_maps, randn, tc_oracle};
use emha::attention::{emha_forward, m2m_pairs, m2m_logits, project_heads, standard_logits};
use emha::attention::{AttnConfig, AttnParams, ForwardCtx, Kernels, Placement, Variant};
use emha::harness::task::entropy_rate;
use emha::harness::train::{log_csv, smoothed_loss};
use emha::harness::{evaluate, grad_check, train, RunConfig, TaskKind, TrainOutcome};
use emha::interaction::DeiVars;
use emha::metrics;
use emha::model::{self, checkpoint, model_forward, NormStyle, RunMode};
use emha::ndtensor::{Tape, Tensor};
use emha::rng;
use rand::Rng;

type Outcome = Result<String, String>;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn load(name: &str) -> RunConfig {
    RunConfig::load(&config(name)).expect("shipped config loads")
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn mhsa_equivalence() -> Outcome {
    let mut g = gen(101);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let (m, t) = ([2, 4][i % 2], [3, 5][(i / 2) % 2]);
        let base = AttnConfig { causal: i % 3 == 0, ..AttnConfig::mhsa(16, m) };
        let eit = AttnConfig {
            variant: Variant::Eit,
            r: g.gen_range(1..=m),
            isi_hidden: 2 * m,
            csi_hidden: 2,
            eeit_hidden: 2 * m,
            kernels: Kernels::ONES,
            enable_isi: false,
            enable_csi: false,
            ..base.clone()
        };
        let w: Vec<Tensor> = (0..4).map(|_| randn(&mut g, &[16, 16])).collect();
        let x = randn(&mut g, &[t, 16]);
        let run = |cfg: &AttnConfig| {
            let mut tape = Tape::new();
            let p = AttnParams {
                wq: tape.param(w[0].clone()),
                wk: tape.param(w[1].clone()),
                wv: tape.param(w[2].clone()),
                wo: tape.param(w[3].clone()),
                dei: DeiVars::default(),
            };
            let xv = tape.constant(x.clone());
            let out = emha_forward(&mut tape, xv, &p, cfg, &ForwardCtx::eval()).map_err(|e| e.to_string())?;
            Ok::<_, String>(tape.value(out.out).clone())
        };
        worst = worst.max(run(&eit)?.max_abs_diff(&run(&base)?));
    }
    ensure(worst <= 1e-12, format!("max |diff| {worst:e}"))?;
    Ok(format!("10 instances, max |diff| {worst:e}"))
}

fn gradient_suite() -> Outcome {
    let base = load("toy-grad.json");
    let mut worst = (0.0f64, String::new());
    for variant in Variant::ALL {
        for placement in Placement::ALL {
            for norm in [NormStyle::PreNorm, NormStyle::PostNorm] {
                let mut cfg = base.model.clone();
                cfg.attn.variant = variant;
                cfg.attn.placement = placement;
                cfg.norm_style = norm;
                cfg.layers = 1;
                let params = model::build(&cfg, 0).map_err(|e| e.to_string())?;
                let ex = base.task().unwrap().generate(0, 7, 1).unwrap().remove(0);
                let mode = RunMode::train(0, rng::stream_id(&[rng::tag::DROPOUT, 0]));
                let report = grad_check(&params, &cfg, &ex, &mode, base.train.label_smoothing)
                    .map_err(|e| e.to_string())?;
                let err = report.max_rel_err();
                if err >= worst.0 {
                    let name = report.worst().map(|p| p.name.clone()).unwrap_or_default();
                    worst = (err, format!("{variant:?}/{placement:?}/{norm:?} {name}"));
                }
            }
        }
    }
    ensure(worst.0 < 1e-4, format!("max relative error {:e} at {}", worst.0, worst.1))?;
    Ok(format!("18 models, max relative error {:e} ({})", worst.0, worst.1))
}

fn cli_delta(cfg: &str, variant: &str) -> Result<i64, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_emha"))
        .args(["param-count", "--config", config(cfg).to_str().unwrap(), "--variant", variant, "--diff", "mhsa"])
        .output()
        .map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&out.stdout);
    ensure(out.status.success(), format!("param-count exited with {}", out.status))?;
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("delta ({variant} - mhsa): ")))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format!("no delta line in {text:?}"))
}

fn parameter_delta() -> Outcome {
    let eit = cli_delta("base-ende.json", "eit")?;
    let eeit = cli_delta("base-ende-eeit.json", "eeit")?;
    ensure((60_000..=80_000).contains(&eit), format!("EIT delta {eit}"))?;
    ensure((15_000..=30_000).contains(&eeit), format!("E-EIT delta {eeit}"))?;
    Ok(format!("EIT delta {eit}, E-EIT delta {eeit}"))
}

fn index_formula() -> Outcome {
    let pairs = m2m_pairs(4, 4);
    // 1-based positions: i=4 is (Q1, K4), i=16 is (Q4, K4)
    ensure(pairs[3] == (0, 3), format!("i=4 is {:?}", pairs[3]))?;
    ensure(pairs[15] == (3, 3), format!("i=16 is {:?}", pairs[15]))?;
    let mut g = gen(104);
    for m in 1..=4 {
        let d = 3 * m;
        let mut tape = Tape::new();
        let x = tape.constant(randn(&mut g, &[5, d]));
        let w: Vec<_> = (0..3).map(|_| tape.param(randn(&mut g, &[d, d]))).collect();
        let heads = project_heads(&mut tape, x, w[0], w[1], w[2], m).unwrap();
        let a = m2m_logits(&mut tape, &heads, 1).unwrap();
        let b = standard_logits(&mut tape, &heads).unwrap();
        ensure(a.value(&tape) == b.value(&tape), format!("r=1 differs from one-to-one logits at M={m}"))?;
    }
    Ok("(Q1,K4) at i=4, (Q4,K4) at i=16, r=1 bitwise equal to one-to-one logits".into())
}

struct Runs {
    tag: Vec<(Variant, TrainOutcome)>,
    lm: TrainOutcome,
}

fn run_all(stage: &str) -> Result<Runs, String> {
    let cfg = load("toy-tag.json");
    let mut tag = Vec::new();
    for v in Variant::ALL {
        let c = cfg.clone().with_variant(v);
        let start = Instant::now();
        let out = train(&c.model, c.task().unwrap(), &c.train, None).map_err(|e| format!("{v:?}: {e}"))?;
        eprintln!("[{stage}] toy-tag {v:?}: {} steps in {:.0?}", c.train.steps, start.elapsed());
        tag.push((v, out));
    }
    let lm_cfg = load("toy-lm.json");
    let start = Instant::now();
    let lm = train(&lm_cfg.model, lm_cfg.task().unwrap(), &lm_cfg.train, None).map_err(|e| format!("toy-lm: {e}"))?;
    eprintln!("[{stage}] toy-lm: {} steps in {:.0?}", lm_cfg.train.steps, start.elapsed());
    Ok(Runs { tag, lm })
}

fn trainability(runs: &Runs) -> Outcome {
    let cfg = load("toy-tag.json");
    ensure(cfg.train.steps <= 3000 && cfg.train.seed == 0, "toy-tag must train at most 3000 steps from seed 0")?;
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (v, out) in &runs.tag {
        let c = cfg.clone().with_variant(*v);
        let res = evaluate(&out.params, &c.model, c.task().unwrap(), c.train.seed, 1000, None).map_err(|e| e.to_string())?;
        let early = smoothed_loss(&out.log, 100, 100);
        let late = smoothed_loss(&out.log, 2000, 100);
        let trend = if late < early { "loss falls" } else { "loss does not fall" };
        parts.push(format!("{} acc {:.4} ({trend})", v.short_name(), res.token_accuracy));
        if res.token_accuracy < 0.99 {
            failures.push(format!("{v:?} accuracy {}", res.token_accuracy));
        }
    }
    let lm_cfg = load("toy-lm.json");
    let task = lm_cfg.task().unwrap();
    let h = match (&task.kind, &task.transition) {
        (TaskKind::MarkovLM, Some(p)) => entropy_rate(p),
        _ => return Err(format!("toy-lm task is {:?}", task.kind)),
    };
    let res = evaluate(&runs.lm.params, &lm_cfg.model, task, lm_cfg.train.seed, 1000, None).map_err(|e| e.to_string())?;
    parts.push(format!("lm nll {:.4} vs H* {h:.4}", res.nll));
    if (res.nll - h).abs() > 0.05 {
        failures.push(format!("LM nll {} is {:.4} from H*", res.nll, res.nll - h));
    }
    if failures.is_empty() {
        Ok(parts.join(", "))
    } else {
        Err(format!("{} [{}]", failures.join("; "), parts.join(", ")))
    }
}

fn causal_soundness(runs: &Runs) -> Outcome {
    let cfg = load("toy-lm.json").model;
    let t = load("toy-lm.json").task().unwrap().seq_len;
    let v = cfg.vocab_size;
    let mut g = gen(106);
    let logits = |ids: &[usize]| {
        let mut tape = Tape::new();
        let bound = runs.lm.params.bind(&mut tape, false);
        let out = model_forward(&mut tape, ids, &bound, &cfg, &RunMode::eval(), None).unwrap();
        tape.value(out).clone()
    };
    for trial in 0..100 {
        let ids: Vec<usize> = (0..t).map(|_| g.gen_range(0..v)).collect();
        let cut = g.gen_range(1..t);
        let mut alt = ids.clone();
        alt[cut] = (alt[cut] + 1) % v;
        for id in &mut alt[cut + 1..] {
            *id = g.gen_range(0..v);
        }
        let (a, b) = (logits(&ids), logits(&alt));
        ensure(a.data()[..cut * v] == b.data()[..cut * v], format!("trial {trial}: prefix before {cut} changed"))?;
    }
    Ok("100 suffix perturbations, prefix logits bitwise equal".into())
}

fn metric_oracles() -> Outcome {
    let mut g = gen(107);
    let mut worst = 0.0f64;
    let mut track = |got: f64, want: f64| worst = worst.max((got - want).abs());
    for _ in 0..50 {
        let m = g.gen_range(2..=3);
        let t = g.gen_range(1..=4);
        let samples: Vec<Tensor> = (0..2).map(|_| random_maps(&mut g, m, t)).collect();
        track(metrics::head_similarity(&samples).unwrap(), hd_oracle(&samples));
    }
    for _ in 0..50 {
        let (t, d) = (g.gen_range(2..=4), g.gen_range(2..=5));
        let samples: Vec<Tensor> = (0..2).map(|_| randn(&mut g, &[t, d])).collect();
        track(metrics::token_correlation(&samples).unwrap(), tc_oracle(&samples));
    }
    for _ in 0..50 {
        let (m, t) = (g.gen_range(1..=3), g.gen_range(1..=4));
        let a = random_maps(&mut g, m, t);
        let w = g.gen_range(1..=2 * t);
        track(metrics::localness(&a, w).unwrap(), localness_oracle(&a, w));
    }
    for _ in 0..50 {
        let (l, t, d) = (g.gen_range(1..=3), g.gen_range(1..=4), g.gen_range(1..=5));
        let feats: Vec<Tensor> = (0..l).map(|_| randn(&mut g, &[t, d])).collect();
        let sims = metrics::cross_layer_similarity(&feats).unwrap();
        for (x, s) in feats.iter().zip(sims) {
            let want = (0..t).map(|i| cos(&x.data()[i * d..(i + 1) * d], &feats[0].data()[i * d..(i + 1) * d])).sum::<f64>()
                / t as f64;
            track(s, want);
        }
    }
    for _ in 0..50 {
        let shape = [g.gen_range(1..=4), g.gen_range(2..=5)];
        let f = randn(&mut g, &shape);
        let res = randn(&mut g, &shape);
        let combined = Tensor::from_fn(&shape, |i| f.data()[i] + res.data()[i]);
        let std = |x: &[f64]| {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
        };
        track(metrics::ur(&f, &combined).unwrap(), std(f.data()) / std(combined.data()));
    }
    ensure(worst <= 1e-12, format!("oracle mismatch {worst:e}"))?;

    let one = random_maps(&mut g, 1, 4);
    let same = Tensor::stack(&[one.index_axis0(0), one.index_axis0(0)]).unwrap();
    let hd = metrics::head_similarity(&[same]).unwrap();
    let v = [0.5, -1.0, 2.0, 0.0];
    let anti = Tensor::new(vec![2, 4], v.iter().copied().chain(v.iter().map(|x| -x)).collect()).unwrap();
    let tc = metrics::token_correlation(&[anti]).unwrap();
    let c1 = metrics::localness(&Tensor::full(&[1, 10, 10], 0.1), 1).unwrap();
    let f = randn(&mut g, &[3, 4]);
    let u = metrics::ur(&f, &f.map(|x| 2.0 * x)).unwrap();
    let anchors = [(hd, 1.0, "HD"), (tc, -1.0, "TC"), (c1, 0.1, "C(1)"), (u, 0.5, "UR")];
    for (got, want, name) in anchors {
        ensure((got - want).abs() < 1e-12, format!("{name} anchor {got} != {want}"))?;
    }
    Ok(format!("250 randomized instances, max |diff| {worst:e}; anchors hold"))
}

fn ablation_matrix() -> Outcome {
    let cfg = load("toy-tag.json").with_variant(Variant::Eit);
    let mut runs = Vec::new();
    for bits in 0..8u8 {
        let mut c = cfg.clone();
        c.model.attn.enable_m2m = bits & 1 != 0;
        c.model.attn.enable_isi = bits & 2 != 0;
        c.model.attn.enable_csi = bits & 4 != 0;
        runs.push((format!("m2m={} isi={} csi={}", bits & 1, (bits >> 1) & 1, (bits >> 2) & 1), c));
    }
    for p in Placement::ALL {
        let mut c = cfg.clone();
        c.model.attn.placement = p;
        runs.push((format!("{p:?}"), c));
    }
    for (name, mut c) in runs {
        c.train.steps = 200;
        let out = train(&c.model, c.task().unwrap(), &c.train, None).map_err(|e| format!("{name}: {e}"))?;
        ensure(out.log.len() == 200, format!("{name}: {} steps logged", out.log.len()))?;
        ensure(out.log.iter().all(|r| r.loss.is_finite()), format!("{name}: non-finite loss"))?;
    }
    Ok("8 toggle combinations and 3 placements, 200 steps each, finite loss".into())
}

fn determinism(first: &Runs) -> Outcome {
    let again = run_all("repeat")?;
    let pairs = first.tag.iter().map(|(v, o)| (format!("{v:?}"), o)).chain([("toy-lm".to_string(), &first.lm)]);
    let seconds = again.tag.iter().map(|(_, o)| o).chain([&again.lm]);
    for ((name, a), b) in pairs.zip(seconds) {
        let ca = checkpoint::encode(&a.params).map_err(|e| e.to_string())?;
        let cb = checkpoint::encode(&b.params).map_err(|e| e.to_string())?;
        ensure(ca == cb, format!("{name}: checkpoints differ"))?;
        ensure(log_csv(&a.log) == log_csv(&b.log), format!("{name}: logs differ"))?;
    }
    Ok("checkpoints and train logs byte-identical for all four runs".into())
}

fn main() {
    let runs = run_all("first");
    let from_runs = |f: fn(&Runs) -> Outcome| match &runs {
        Ok(r) => f(r),
        Err(e) => Err(format!("training failed: {e}")),
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("1 interaction-free EIT equals MHSA", mhsa_equivalence()),
        ("2 whole-model gradient check", gradient_suite()),
        ("3 base En-De parameter deltas", parameter_delta()),
        ("4 M2M index formula", index_formula()),
        ("5 trainability", from_runs(trainability)),
        ("6 causal soundness", from_runs(causal_soundness)),
        ("7 metric oracles", metric_oracles()),
        ("8 ablation matrix", ablation_matrix()),
        ("9 determinism", from_runs(determinism)),
    ];
    let mut failed = 0;
    for (name, res) in &results {
        match res {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the lines always reach stdout; exits non-zero if any gating criterion
//! fails. Set DEKWS_GSC_ROOT to a Speech Commands v1 directory to include
//! the long full-scale run.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use dekws_cli::config::ExperimentFile;
use dekws_cli::{cmd_gradcheck, execute, MATRIX_FILE};
use dekws_core::buffer::{BufferEntry, ReservoirBuffer};
use dekws_core::dataset::Example;
use dekws_core::dsp::FeatureMatrix;
use dekws_core::engine::{Learner, Strategy, TrainConfig};
use dekws_core::metrics::{compute_acc, compute_bwt, AccuracyMatrix};
use dekws_core::model::{TcResNet8, TcResNet8Config};
use dekws_core::rng::{stream, Stream};
use rand::Rng as _;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Verdict = Result<String, String>;
/// Matrix rows with hand-evaluated ACC and BWT.
type WorkedMatrix = (&'static [&'static [f64]], f64, Option<f64>);
type ToyCriterion = fn(&Bench) -> Verdict;

struct Outcome {
    id: &'static str,
    verdict: Verdict,
    elapsed: Duration,
    gating: bool,
}

fn timed(id: &'static str, budget: Option<Duration>, f: impl FnOnce() -> Verdict) -> Outcome {
    let start = Instant::now();
    let mut verdict = f();
    let elapsed = start.elapsed();
    if let (Some(b), Ok(detail)) = (budget, &verdict) {
        if elapsed > b {
            verdict = Err(format!("{detail}; took {:.0}s, budget {:.0}s", elapsed.as_secs_f64(), b.as_secs_f64()));
        }
    }
    let o = Outcome { id, verdict, elapsed, gating: true };
    report(&o);
    o
}

fn report(o: &Outcome) {
    let (tag, detail) = match &o.verdict {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {:<26} {detail} ({:.1}s)", o.id, o.elapsed.as_secs_f64());
}

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Verdict {
    match cmd_gradcheck(0, None) {
        Ok(reports) => {
            let worst_op = reports.iter().filter(|r| r.tolerance < 1e-3).map(|r| r.max_rel_err).fold(0.0, f64::max);
            let model = reports.last().unwrap();
            Ok(format!("ops max rel err {worst_op:.2e} <= 1e-4, model {:.2e} <= 1e-3", model.max_rel_err))
        }
        Err(e) => Err(e.to_string()),
    }
}

fn reservoir() -> Verdict {
    let (capacity, len, trials) = (50usize, 1000usize, 10_000u64);
    let mut hits = vec![0u64; len];
    for trial in 0..trials {
        let mut b = ReservoirBuffer::<f64>::new(capacity, 1, stream(trial, Stream::Reservoir));
        for id in 0..len {
            let f = FeatureMatrix::new(1, 1, vec![id as f64]).unwrap();
            b.insert(BufferEntry { features: Arc::new(f), label: 0, logits: vec![0.0] }).unwrap();
        }
        for e in b.entries() {
            hits[e.features.values()[0] as usize] += 1;
        }
    }
    let expected = trials as f64 * capacity as f64 / len as f64;
    let worst = hits.iter().map(|&h| (h as f64 / trials as f64 - 0.05).abs()).fold(0.0, f64::max);
    let chi2: f64 = hits.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((len - 1) as f64).unwrap().inverse_cdf(0.99);
    check(
        worst <= 0.01 && chi2 < critical,
        format!("max |freq - 0.05| = {worst:.4}, chi2 = {chi2:.1} vs critical {critical:.1}"),
    )
}

fn metric_oracle() -> Verdict {
    let cases: [WorkedMatrix; 4] = [
        (&[&[0.9], &[0.8, 0.7]], (0.8 + 0.7) / 2.0, Some(0.8 - 0.9)),
        (&[&[0.9], &[0.85, 0.8], &[0.6, 0.7, 0.7]], (0.6 + 0.7 + 0.7) / 3.0, Some(((0.6 - 0.9) + (0.7 - 0.8)) / 2.0)),
        (&[&[1.0], &[0.25, 0.5]], (0.25 + 0.5) / 2.0, Some(0.25 - 1.0)),
        (&[&[0.9]], 0.9, None),
    ];
    for (rows, acc, bwt) in cases {
        let m = AccuracyMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
            .map_err(|e| e.to_string())?;
        let got = compute_acc(&m).map_err(|e| e.to_string())?;
        if (got - acc).abs() > 1e-12 {
            return Err(format!("ACC {got} != {acc} on {rows:?}"));
        }
        match (compute_bwt(&m), bwt) {
            (Ok(g), Some(b)) if (g - b).abs() <= 1e-12 => {}
            (Err(_), None) => {}
            (g, b) => return Err(format!("BWT {g:?} != {b:?} on {rows:?}")),
        }
    }
    Ok(format!("{} worked matrices within 1e-12", cases.len()))
}

fn parameter_budget() -> Verdict {
    let model = TcResNet8::<f64>::build(TcResNet8Config::default(), 0).map_err(|e| e.to_string())?;
    let n = model.count_parameters();
    // stem conv+BN, three residual blocks (two k9 convs, 1x1 shortcut, three BNs), linear head
    let conv_bn = |c_in: usize, c_out: usize, k: usize| c_in * c_out * k + 2 * c_out;
    let block = |c_in, c_out| conv_bn(c_in, c_out, 9) + conv_bn(c_out, c_out, 9) + conv_bn(c_in, c_out, 1);
    let oracle = conv_bn(40, 16, 3) + block(16, 24) + block(24, 32) + block(32, 48) + 48 * 30 + 30;
    let rel = (n as f64 - 64_480.0).abs() / 64_480.0;
    check(
        n == oracle && n == 66_062 && rel <= 0.05,
        format!("{n} parameters (oracle {oracle}), {:.2}% from 64,480", rel * 100.0),
    )
}

fn reduction_identity() -> Verdict {
    let mut rng = stream(11, Stream::Synth);
    let data: Vec<Example<f64>> = (0..64)
        .map(|i| {
            let label = i % 4;
            let values =
                (0..20 * 40).map(|k| if k % 4 == label { 0.8 } else { 0.0 } + rng.random_range(-0.5..0.5)).collect();
            Example { features: Arc::new(FeatureMatrix::new(20, 40, values).unwrap()), label }
        })
        .collect();
    let base = TrainConfig { lr: 0.01, batch_size: 8, seed: 5, ..Default::default() };
    let reduced = TrainConfig { strategy: Strategy::DeKws, alpha: 0.0, beta: 0.0, buffer_capacity: 0, ..base.clone() };
    let finetune = TrainConfig { strategy: Strategy::Finetune, alpha: 0.0, beta: 0.0, buffer_capacity: 0, ..base };
    let mut a = Learner::new(reduced, TcResNet8Config::with_classes(4)).map_err(|e| e.to_string())?;
    let mut b = Learner::new(finetune, TcResNet8Config::with_classes(4)).map_err(|e| e.to_string())?;
    let bits = |l: &Learner<f64>| -> Vec<u64> {
        l.model().params().iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect()
    };
    while a.steps() < 50 {
        a.train_epoch(&data).map_err(|e| e.to_string())?;
        b.train_epoch(&data).map_err(|e| e.to_string())?;
        if bits(&a) != bits(&b) {
            return Err(format!("trajectories diverge by step {}", a.steps()));
        }
    }
    Ok(format!("bit-identical parameters after each of {} epochs ({} steps)", a.steps() / 8, a.steps()))
}

const TOY: &str = r#"
[dataset.synthetic]
num_classes = 12
examples_per_class = 60
noise_amplitude = 0.3

[schedule]
layout = { first = 3, per_task = 3 }

[train]
lr = 0.01
batch_size = 128
epochs_per_task = 10
precision = "f32"
"#;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Variant {
    name: &'static str,
    train: &'static str,
}

const VARIANTS: [Variant; 8] = [
    Variant { name: "joint", train: "strategy = \"joint\"" },
    Variant { name: "de_kws", train: "strategy = \"de_kws\"\nbuffer_capacity = 200" },
    Variant { name: "naive_rehearsal", train: "strategy = \"naive_rehearsal\"\nbuffer_capacity = 200" },
    Variant { name: "finetune", train: "strategy = \"finetune\"" },
    Variant { name: "alpha0", train: "strategy = \"de_kws\"\nalpha = 0.0\nbuffer_capacity = 200" },
    Variant { name: "beta0", train: "strategy = \"de_kws\"\nbeta = 0.0\nbuffer_capacity = 200" },
    Variant { name: "buffer50", train: "strategy = \"de_kws\"\nbuffer_capacity = 50" },
    Variant { name: "buffer400", train: "strategy = \"de_kws\"\nbuffer_capacity = 400" },
];

fn toy_text(train: &str) -> String {
    format!("{TOY}{train}\n")
}

struct Summary {
    acc: f64,
    bwt: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Bench(Vec<(&'static str, Summary)>);

impl Bench {
    fn get(&self, name: &str) -> &Summary {
        &self.0.iter().find(|(n, _)| *n == name).expect("variant ran").1
    }
}

fn toy_benchmark() -> Result<Bench, String> {
    let mut out = Vec::new();
    for v in &VARIANTS {
        let file = ExperimentFile::parse(&toy_text(v.train), Path::new("toy")).map_err(|e| e.to_string())?;
        let (mut accs, mut bwts) = (Vec::new(), Vec::new());
        for seed in SEEDS {
            let exp = file.resolve(Path::new("."), Some(seed), None).map_err(|e| e.to_string())?;
            let m = execute(&exp).map_err(|e| format!("{} seed {seed}: {e}", v.name))?.report.metrics;
            accs.push(m.acc);
            bwts.push(m.bwt.unwrap_or(0.0));
        }
        println!("     {:<16} ACC {:?}  BWT {:?}", v.name, fmt(&accs), fmt(&bwts));
        out.push((v.name, Summary { acc: median(accs), bwt: median(bwts) }));
    }
    Ok(Bench(out))
}

fn fmt(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:.4}")).collect()
}

fn ordering(b: &Bench) -> Verdict {
    let (j, d, n, f) = (b.get("joint").acc, b.get("de_kws").acc, b.get("naive_rehearsal").acc, b.get("finetune").acc);
    let (bd, bf) = (b.get("de_kws").bwt, b.get("finetune").bwt);
    check(
        j > d && d > n && n > f && d - f >= 0.2 && bd > bf,
        format!("median ACC joint {j:.4} > de_kws {d:.4} > NR {n:.4} > finetune {f:.4}; gap {:.1} pts; BWT {bd:.4} vs {bf:.4}", (d - f) * 100.0),
    )
}

fn ablation(b: &Bench) -> Verdict {
    let d = b.get("de_kws").acc;
    let (drop_a, drop_b) = (d - b.get("alpha0").acc, d - b.get("beta0").acc);
    check(
        drop_a >= 0.0 && drop_b >= 0.0 && drop_b > drop_a,
        format!("drop without rehearsal term {drop_a:.4}, without distillation term {drop_b:.4}"),
    )
}

fn buffer_trend(b: &Bench) -> Verdict {
    let accs = [b.get("buffer50").acc, b.get("de_kws").acc, b.get("buffer400").acc];
    check(accs[0] <= accs[1] && accs[1] <= accs[2], format!("median ACC at 50/200/400: {:?}", fmt(&accs)))
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("toy.toml");
    fs::write(&cfg, toy_text("strategy = \"de_kws\"\nbuffer_capacity = 200")).map_err(|e| e.to_string())?;
    let mut matrices = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("run{i}"));
        let status = Command::new(env!("CARGO_BIN_EXE_dekws"))
            .args(["run", "--config", cfg.to_str().unwrap(), "--seed", "3", "--out", out.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        matrices.push(fs::read(out.join(MATRIX_FILE)).map_err(|e| e.to_string())?);
    }
    check(matrices[0] == matrices[1], format!("two runs, {} bytes of matrix.csv each, identical", matrices[0].len()))
}

fn full_scale(root: &str) -> Verdict {
    let text = format!(
        "seed = 0\n[dataset.gsc]\nroot = {root:?}\n[schedule]\nlayout = \"6task\"\n[train]\nstrategy = \"de_kws\"\nbuffer_capacity = 500\n"
    );
    let exp = ExperimentFile::parse(&text, Path::new("gsc"))
        .and_then(|f| f.resolve(Path::new("."), None, None))
        .map_err(|e| e.to_string())?;
    let acc = execute(&exp).map_err(|e| e.to_string())?.report.metrics.acc * 100.0;
    check((acc - 89.24).abs() <= 3.0, format!("ACC {acc:.2} vs 89.24 +/- 3"))
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));
    let mut outcomes = vec![
        timed("1 gradient-correctness", minutes(2), gradients),
        timed("2 reservoir-uniformity", minutes(1), reservoir),
        timed("3 metric-oracle", None, metric_oracle),
        timed("4 parameter-budget", None, parameter_budget),
        timed("5 reduction-identity", None, reduction_identity),
    ];

    let start = Instant::now();
    let bench = toy_benchmark();
    let bench_time = start.elapsed();
    let toy_criteria: [(&'static str, ToyCriterion); 3] =
        [("6 cil-ordering", ordering), ("7 ablation-direction", ablation), ("8 buffer-size-trend", buffer_trend)];
    for (id, criterion) in toy_criteria {
        let verdict = match &bench {
            Ok(b) => criterion(b),
            Err(e) => Err(e.clone()),
        };
        let verdict = match verdict {
            Ok(d) if id.starts_with('6') && bench_time > Duration::from_secs(15 * 60) => {
                Err(format!("{d}; benchmark took {:.0}s, budget 900s", bench_time.as_secs_f64()))
            }
            v => v,
        };
        let o = Outcome { id, verdict, elapsed: bench_time, gating: true };
        report(&o);
        outcomes.push(o);
    }

    outcomes.push(timed("9 determinism", None, determinism));

    match std::env::var("DEKWS_GSC_ROOT") {
        Ok(root) => {
            let mut o = timed("10 full-scale (optional)", None, || full_scale(&root));
            o.gating = false;
            outcomes.push(o);
        }
        Err(_) => println!("SKIP 10 full-scale (optional)   DEKWS_GSC_ROOT not set"),
    }

    let failed: Vec<&str> = outcomes.iter().filter(|o| o.gating && o.verdict.is_err()).map(|o| o.id).collect();
    if failed.is_empty() {
        println!("acceptance: all gating criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}

//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset: `cargo test --test acceptance -- 3 7`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gradleak::attack::{extract_candidates, extract_from_model, EPS_ACTIVE};
use gradleak::data::{gen_synthetic, load_mnist_dir, Dataset, DatasetKind};
use gradleak::defense::clip;
use gradleak::experiment::{self, run_trial, ArchKind, ArchSpec, Command, ExperimentConfig, Report, TrialSpec};
use gradleak::fl::RoundConfig;
use gradleak::init::{init_random, init_trap_layer, RandomScheme, TrapConfig};
use gradleak::nn::{self, Conv2d, Dense, Layer, Model, Padding, Task};
use gradleak::rng::{self, streams};
use gradleak::{Result, Tensor};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn mnist() -> Result<Dataset> {
    load_mnist_dir(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn run_cfg(cfg: &ExperimentConfig) -> Result<(Report, tempfile::TempDir)> {
    let dir = tempfile::tempdir()?;
    let mut cfg = cfg.clone();
    cfg.out = dir.path().to_path_buf();
    Ok((experiment::run(&cfg)?, dir))
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        d / n
    } else {
        d
    }
}

fn c1_single_input() -> Result<Verdict> {
    let ds = mnist()?;
    let arch = ArchSpec::new(ArchKind::Fcnn, 1000);
    let picks = index::sample(&mut rng::stream(2024, streams::DATA), ds.len(), 100).into_vec();
    let mut model = arch.build(&ds.kind, ds.classes)?;
    let (mut with_active, mut worst, mut rows) = (0, 0.0f64, 0);
    for (t, &i) in picks.iter().enumerate() {
        // a fresh init every ten images
        if t % 10 == 0 {
            init_random(&mut model, RandomScheme::XavierUniform, &mut rng::stream(t as u64, streams::INIT))?;
        }
        let x = ds.features.select_rows(&[i])?;
        // only the first-layer gradient is read, so only it is materialized
        let (gw, gb) = nn::dense_gradients(&model, &x, &ds.labels.select_rows(&[i])?, 0)?;
        let ex = extract_candidates(&gw, &gb, EPS_ACTIVE)?;
        if ex.active() > 0 {
            with_active += 1;
        }
        rows += ex.active();
        for c in &ex.candidates {
            worst = worst.max(rel_l2(c.x.data(), x.data()));
        }
    }
    verdict(
        worst <= 1e-6 && with_active >= 99,
        format!("{with_active}/100 with an active row, {rows} rows, worst rel err {worst:.2e}"),
    )
}

fn c2_passive() -> Result<Verdict> {
    let mut cfg = ExperimentConfig::preset(Command::Passive);
    cfg.schemes = vec![
        RandomScheme::Gaussian { sigma: 0.5 },
        RandomScheme::Gaussian { sigma: 2.0 },
        RandomScheme::Gaussian { sigma: 0.01 },
    ];
    let (rep, _dir) = run_cfg(&cfg)?;
    let r: Vec<f64> = rep.variants.iter().map(|v| v.mean_r()).collect();
    verdict(
        (r[0] - 0.050).abs() <= 0.03 && r[1] >= r[2],
        format!("mean R: σ=0.5 {:.3}, σ=2 {:.3}, σ=0.01 {:.3}", r[0], r[1], r[2]),
    )
}

fn c3_active_peak() -> Result<Verdict> {
    let mut cfg = ExperimentConfig::preset(Command::SweepS);
    cfg.s_grid = vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    let (rep, _dir) = run_cfg(&cfg)?;
    let s = rep.variant("s0.7").expect("s = 0.7 ran").summary();
    let curve: Vec<(f64, f64)> = cfg.s_grid.iter().zip(&rep.variants).map(|(&s, v)| (s, v.mean_r())).collect();
    let best = curve.iter().fold((0.0, f64::MIN), |b, &p| if p.1 > b.1 { p } else { b }).0;
    let text: Vec<String> = curve.iter().map(|(s, r)| format!("{s}:{r:.3}")).collect();
    verdict(
        (s.mean_r - 0.540).abs() <= 0.10 && (s.mean_a - 0.796).abs() <= 0.10 && [0.6, 0.7, 0.8].contains(&best),
        format!("s=0.7 R {:.3} A {:.3}; curve {}; argmax s={best}", s.mean_r, s.mean_a, text.join(" ")),
    )
}

fn c4_batch_neurons() -> Result<Verdict> {
    let mut cfg = ExperimentConfig::preset(Command::SweepBn);
    cfg.neurons_grid = vec![1000];
    cfg.batch_grid = vec![20, 50, 100, 200];
    let (rep, _dir) = run_cfg(&cfg)?;
    let col: Vec<f64> = rep.variants.iter().map(|v| v.mean_r()).collect();
    cfg.neurons_grid = vec![3000];
    cfg.batch_grid = vec![20];
    let (rep, _dir2) = run_cfg(&cfg)?;
    let big = rep.variants[0].mean_r();
    let decreasing = col.windows(2).all(|w| w[1] < w[0]);
    verdict(
        big >= 0.95 && decreasing,
        format!("N=3000,B=20 R {big:.3}; N=1000 over B=20,50,100,200: {col:.3?}"),
    )
}

fn c5_averaging() -> Result<Verdict> {
    let mut cfg = ExperimentConfig::preset(Command::Averaging);
    cfg.k_grid = vec![1, 20];
    let (rep, _dir) = run_cfg(&cfg)?;
    let (k1, k20) = (rep.variants[0].mean_r(), rep.variants[1].mean_r());
    verdict(k1 >= 0.45 && k20 <= 0.06, format!("mean R k=1 {k1:.3}, k=20 {k20:.3}"))
}

fn c6_clipping() -> Result<Verdict> {
    let ds = mnist()?;
    let arch = ArchSpec {
        width: 0.1,
        ..ArchSpec::new(ArchKind::Fcnn, 1000)
    };
    let mut model = arch.build(&ds.kind, ds.classes)?;
    let (mut worst, mut worst_rel, mut largest, mut mismatched, mut compared) = (0.0f64, 0.0f64, 0.0f64, 0, 0);
    for u in 0..50u64 {
        if u % 10 == 0 {
            init_random(&mut model, RandomScheme::XavierUniform, &mut rng::stream(u, streams::INIT))?;
            init_trap_layer(&mut model, 0, &TrapConfig::new(0.7, u), &mut rng::stream(u, streams::TRAP))?;
        }
        let idx = index::sample(&mut rng::stream(u, streams::SAMPLE), ds.len(), 100).into_vec();
        let g = nn::gradients(&model, &ds.features.select_rows(&idx)?, &ds.labels.select_rows(&idx)?)?;
        let before = extract_from_model(&model, &g, 0, None, EPS_ACTIVE)?;
        for c in [0.25, 1.0, 4.0] {
            let after = extract_from_model(&model, &clip(&g, c)?, 0, None, EPS_ACTIVE)?;
            let rows = |e: &gradleak::attack::Extraction| e.candidates.iter().map(|c| c.row).collect::<Vec<_>>();
            if rows(&before) != rows(&after) {
                mismatched += 1;
                continue;
            }
            for (a, b) in before.candidates.iter().zip(&after.candidates) {
                compared += 1;
                for (p, q) in a.x.data().iter().zip(b.x.data()) {
                    worst = worst.max((p - q).abs());
                    worst_rel = worst_rel.max((p - q).abs() / p.abs().max(1.0));
                    largest = largest.max(p.abs());
                }
            }
        }
    }
    verdict(
        // 1e-12 absolute is below f64 resolution for spurious candidates far
        // outside the data range, so the bound is scaled by max(1, |x|)
        mismatched == 0 && worst_rel <= 1e-12,
        format!("{compared} candidates compared, {mismatched} row-set mismatches, max abs diff {worst:.2e}, max diff/max(1,|x|) {worst_rel:.2e}, largest |x| {largest:.2e}"),
    )
}

fn c7_noise() -> Result<Verdict> {
    let mut cfg = ExperimentConfig::preset(Command::Defend);
    cfg.defenses.retain(|d| ["none", "noise", "dpsgd_malicious_server"].contains(&d.label.as_str()));
    let (rep, _dir) = run_cfg(&cfg)?;
    let none = rep.variant("none").expect("ran").summary();
    let noise = rep.variant("noise").expect("ran").summary();
    let mal = rep.variant("dpsgd_malicious_server").expect("ran").summary();
    let err = noise.mean_rel_err.unwrap_or(0.0);
    verdict(
        err > 0.5 && noise.mean_r == 0.0 && (mal.mean_r - none.mean_r).abs() <= 0.02,
        format!(
            "user noise σ=1: mean rel err {err:.3e}, R {:.3}; undefended R {:.3}, malicious-server DPSGD R {:.3}",
            noise.mean_r, none.mean_r, mal.mean_r
        ),
    )
}

fn c8_text() -> Result<Verdict> {
    let kind = DatasetKind::Tokens {
        seq_len: 250,
        vocab: 1000,
    };
    let ds = gen_synthetic(kind, 1000, 2, 0)?;
    let user = ds.clone().into_user(0, 0)?;
    let arch = ArchSpec::new(ArchKind::Text, 1000);
    let mut means = Vec::new();
    for b in [20, 200] {
        let mut r = 0.0;
        for seed in 0..10u64 {
            let spec = TrialSpec {
                arch: &arch,
                init: RandomScheme::XavierUniform,
                trap: Some(TrapConfig::new(0.99, seed)),
                round: RoundConfig::new(b),
                defense: None,
                seed,
                keep_extraction: false,
            };
            r += run_trial(&ds, &user, &spec)?.metrics.r;
        }
        means.push(r / 10.0);
    }
    verdict(
        means[0] >= 0.95 && means[1] <= 0.35,
        format!("token-level mean R: B=20 {:.3}, B=200 {:.3}", means[0], means[1]),
    )
}

fn c9_dlg() -> Result<Verdict> {
    let cfg = ExperimentConfig::preset(Command::Dlg);
    let (rep, _dir) = run_cfg(&cfg)?;
    let cases = &rep.dlg;
    let analytic_ok = cases.iter().all(|c| c.analytic_err <= 1e-6);
    let worse = cases.iter().filter(|c| c.dlg_err > c.analytic_err).count();
    let t_an: f64 = cases.iter().map(|c| c.analytic_ms).sum();
    let t_dlg: f64 = cases.iter().map(|c| c.dlg_ms).sum();
    let worst_an = cases.iter().map(|c| c.analytic_err).fold(0.0, f64::max);
    let mean_dlg = cases.iter().map(|c| c.dlg_err).sum::<f64>() / cases.len() as f64;
    verdict(
        cases.len() == 20 && analytic_ok && worse >= 18 && t_dlg >= 100.0 * t_an,
        format!(
            "analytic worst err {worst_an:.1e}; DLG worse in {worse}/20 (mean err {mean_dlg:.3}); time {t_dlg:.0} ms vs {t_an:.2} ms ({:.0}×)",
            t_dlg / t_an.max(1e-9)
        ),
    )
}

fn random_model(t: usize, r: &mut rng::Rng) -> Result<Model> {
    let dense = |i, o| Layer::Dense(Dense::new(i, o));
    let mut m = if t % 2 == 0 {
        let inp = r.random_range(1..=16);
        let h = r.random_range(2..=8);
        let binary = r.random_bool(0.3);
        let out = if binary { 1 } else { r.random_range(2..=5) };
        let mut layers = vec![dense(inp, h), Layer::Relu];
        if r.random_bool(0.5) {
            let h2 = r.random_range(2..=6);
            layers.extend([dense(h, h2), Layer::Relu, dense(h2, out)]);
        } else {
            layers.push(dense(h, out));
        }
        Model::new(vec![inp], layers, if binary { Task::Binary } else { Task::Multiclass })?
    } else {
        let (c, h, w) = (r.random_range(1..=2), r.random_range(3..=4), r.random_range(3..=4usize));
        let (c, h, w) = if c * h * w > 16 { (1, h, w) } else { (c, h, w) };
        let k = if r.random_bool(0.5) { 3 } else { 2 };
        let stride = r.random_range(1..=2);
        let padding = if r.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        let f = r.random_range(1..=3);
        let axis = |n: usize| match padding {
            Padding::Same => n.div_ceil(stride),
            Padding::Valid => (n - k) / stride + 1,
        };
        let flat = f * axis(h) * axis(w);
        let classes = r.random_range(2..=4);
        Model::new(
            vec![c, h, w],
            vec![
                Layer::Conv2d(Conv2d::new(c, f, k, stride, padding)),
                Layer::Relu,
                Layer::Flatten,
                dense(flat, classes),
            ],
            Task::Multiclass,
        )?
    };
    let n = Normal::new(0.0, 0.5).expect("valid");
    for p in m.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = n.sample(r));
    }
    Ok(m)
}

fn c10_gradients() -> Result<Verdict> {
    let mut r = rng::seeded(10);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for t in 0..50 {
        let mut m = random_model(t, &mut r)?;
        let b = r.random_range(1..=3);
        let x = Tensor::from_fn(&[b, m.input_len()], |_| r.random::<f64>());
        let classes = m.output_dim();
        let y = match m.task() {
            Task::Binary => Tensor::new(vec![b], (0..b).map(|_| r.random_range(0..2) as f64).collect())?,
            Task::Multiclass => Tensor::new(vec![b], (0..b).map(|_| r.random_range(0..classes) as f64).collect())?,
        };
        let analytic = nn::gradients(&m, &x, &y)?;
        let loss = |m: &Model| -> Result<f64> {
            let (logits, _) = nn::forward(m, &x)?;
            m.loss(&logits, &y)
        };
        let (mut scale, mut err) = (0.0f64, 0.0f64);
        let shapes: Vec<usize> = m.params().map(|p| p.len()).collect();
        for (ti, len) in shapes.into_iter().enumerate() {
            for j in 0..len {
                let orig = m.params().nth(ti).expect("tensor").data()[j];
                m.params_mut().nth(ti).expect("tensor").data_mut()[j] = orig + h;
                let fp = loss(&m)?;
                m.params_mut().nth(ti).expect("tensor").data_mut()[j] = orig - h;
                let fm = loss(&m)?;
                m.params_mut().nth(ti).expect("tensor").data_mut()[j] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic.tensors().nth(ti).expect("tensor").data()[j];
                err = err.max((fd - an).abs());
                scale = scale.max(fd.abs()).max(an.abs());
            }
        }
        worst = worst.max(if scale > 0.0 { err / scale } else { err });
    }
    verdict(worst <= 1e-4, format!("50 models, worst relative disagreement {worst:.2e}"))
}

// Uniform synthetic pixels are dense and centred at 0.5, so the trap needs a
// larger s than sparse MNIST digits to keep about 1/B of the rows active.
const S_DENSE_IMAGES: f64 = 0.9;

fn c11_conv_forwarding() -> Result<Verdict> {
    let kind = DatasetKind::Image {
        height: 16,
        width: 16,
        channels: 3,
    };
    let ds = gen_synthetic(kind, 1000, 10, 11)?;
    let user = ds.clone().into_user(0, 0)?;
    let arch = ArchSpec {
        width: 1.0 / 16.0,
        ..ArchSpec::new(ArchKind::Cnn, 500)
    };
    let (mut exact, mut worst) = (0, 0.0f64);
    for seed in 0..100u64 {
        let spec = TrialSpec {
            arch: &arch,
            init: RandomScheme::XavierUniform,
            trap: Some(TrapConfig::new(S_DENSE_IMAGES, seed)),
            round: RoundConfig::new(1),
            defense: None,
            seed,
            keep_extraction: true,
        };
        let o = run_trial(&ds, &user, &spec)?;
        let ex = o.extraction.expect("kept");
        let x = ds.features.row(o.samples[0]);
        let dev = ex
            .candidates
            .iter()
            .flat_map(|c| c.x.data().iter().zip(x).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        worst = worst.max(dev);
        if !ex.candidates.is_empty() && dev <= 1e-9 {
            exact += 1;
        }
    }
    let mut r = 0.0;
    for seed in 0..10u64 {
        let spec = TrialSpec {
            arch: &arch,
            init: RandomScheme::XavierUniform,
            trap: Some(TrapConfig::new(S_DENSE_IMAGES, seed)),
            round: RoundConfig::new(20),
            defense: None,
            seed,
            keep_extraction: false,
        };
        r += run_trial(&ds, &user, &spec)?.metrics.r;
    }
    r /= 10.0;
    verdict(
        exact == 100 && r >= 0.5,
        format!("B=1 pixel-exact {exact}/100 (max dev {worst:.1e}); B=20 mean R {r:.3}"),
    )
}

type Criterion = (u32, &'static str, Option<Duration>, fn() -> Result<Verdict>);

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let all: Vec<Criterion> = vec![
        (1, "exact single-input extraction", secs(10), c1_single_input),
        (2, "passive baseline", secs(300), c2_passive),
        (3, "active attack peak", secs(600), c3_active_peak),
        (4, "batch/neuron tradeoff", secs(1200), c4_batch_neurons),
        (5, "averaging degradation", secs(600), c5_averaging),
        (6, "clipping invariance", secs(60), c6_clipping),
        (7, "noise only defends when applied", secs(300), c7_noise),
        (8, "text extraction", secs(600), c8_text),
        (9, "analytic vs optimization baseline", None, c9_dlg),
        (10, "gradient engine vs finite differences", secs(60), c10_gradients),
        (11, "conv forwarding exactness", None, c11_conv_forwarding),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, budget, f) in all {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let res = f();
        let el = t.elapsed();
        let (pass, detail) = match res {
            Ok(v) => (v.pass && budget.map_or(true, |b| el <= b), v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        let limit = budget.map_or("no limit".to_string(), |b| format!("limit {} s", b.as_secs()));
        println!(
            "{} {:>2} {} [{:.1} s, {limit}]: {}",
            if pass { "PASS" } else { "FAIL" },
            id,
            name,
            el.as_secs_f64(),
            detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

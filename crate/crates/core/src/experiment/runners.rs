use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{self, build_embedding_lookup, extract_from_model, score_tokens, Extraction, EPS_ACTIVE, TOL_REL};
use crate::data::{self, write_metrics, write_reconstruction_grid, write_trace_csv, Dataset, DatasetKind, MetricsFormat, MetricsRow};
use crate::defense::DefenseConfig;
use crate::dlg::{self, DlgConfig};
use crate::error::{config_err, Result};
use crate::fl::{run_round, Dispatch, RoundConfig, RoundView, UserNode};
use crate::init::{init_random, RandomScheme, TrapConfig};
use crate::nn::Layer;
use crate::rng::{self, streams};

use super::{trap_recipe, ArchSpec, Command, ExperimentConfig};

/// One seeded attack run.
#[derive(Debug, Clone, Copy)]
pub struct TrialSpec<'a> {
    pub arch: &'a ArchSpec,
    pub init: RandomScheme,
    /// `None` for an honest server.
    pub trap: Option<TrapConfig>,
    pub round: RoundConfig,
    pub defense: Option<&'a DefenseConfig>,
    pub seed: u64,
    pub keep_extraction: bool,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub metrics: attack::AttackMetrics,
    /// Mean nearest-match relative error (feature-space datasets only).
    pub mean_rel_err: Option<f64>,
    pub wallclock_ms: f64,
    /// Dataset rows in the batch, in sampling order.
    pub samples: Vec<usize>,
    pub extraction: Option<Extraction>,
    /// Per batch example, the index of an exact candidate if any.
    pub recovered: Vec<Option<usize>>,
}

/// Builds and initializes the model, runs one round with a single user
/// holding `data`, and attacks that user's update at the server.
pub fn run_trial(data: &Dataset, user: &UserNode, spec: &TrialSpec<'_>) -> Result<TrialOutcome> {
    let start = Instant::now();
    let mut model = spec.arch.build(&data.kind, data.classes)?;
    init_random(&mut model, spec.init, &mut rng::stream(spec.seed, streams::INIT))?;
    let dispatch = match spec.trap {
        Some(t) => Dispatch::Malicious {
            recipe: trap_recipe(&model, t),
            targets: None,
        },
        None => Dispatch::Honest,
    };
    let mut result: Option<TrialOutcome> = None;
    let mut hook = |v: &RoundView<'_>| -> Result<()> {
        let up = &v.updates[0];
        let m = v.model_for(up);
        let (target, plan) = match v.trapped.filter(|_| up.trapped) {
            Some(d) => (d.target_layer, d.plan.as_ref()),
            None => (m.first_dense(), None),
        };
        let ex = extract_from_model(m, &up.grads, target, plan, EPS_ACTIVE)?;
        let (metrics, mean_rel_err, recovered) = match (&data.kind, &m.layers()[0]) {
            (DatasetKind::Tokens { .. }, Layer::Embedding(e)) => {
                let lookup = build_embedding_lookup(&e.table, 6)?;
                let tokens = data.features.select_rows(&up.samples)?;
                (score_tokens(&ex, &lookup, &tokens)?, None, Vec::new())
            }
            _ => {
                let truth = data.features.select_rows(&up.samples)?;
                let sc = attack::score(&ex, &truth, TOL_REL)?;
                let mut rec = vec![None; up.samples.len()];
                for mt in sc.matches.iter().filter(|mt| mt.rel_err <= TOL_REL) {
                    rec[mt.nearest].get_or_insert(mt.candidate);
                }
                (sc.metrics, sc.mean_rel_err(), rec)
            }
        };
        result = Some(TrialOutcome {
            metrics,
            mean_rel_err,
            wallclock_ms: 0.0,
            samples: up.samples.clone(),
            extraction: spec.keep_extraction.then_some(ex),
            recovered,
        });
        Ok(())
    };
    let mut round = spec.round;
    round.users_per_round = 1;
    round.lr = 0.0;
    run_round(
        &mut model,
        std::slice::from_ref(user),
        &round,
        &dispatch,
        spec.defense,
        0,
        spec.seed,
        &mut hook,
    )?;
    let mut out = result.expect("hook ran");
    out.wallclock_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

/// All runs of one configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub rows: Vec<MetricsRow>,
    pub rel_errs: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub mean_a: f64,
    pub mean_p: f64,
    pub mean_r: f64,
    pub mean_rel_err: Option<f64>,
    pub mean_wallclock_ms: f64,
}

impl Variant {
    pub fn summary(&self) -> VariantSummary {
        let n = self.rows.len().max(1) as f64;
        let (a, p, r) = data::mean_metrics(&self.rows).unwrap_or((0.0, 0.0, 0.0));
        let errs: Vec<f64> = self.rel_errs.iter().flatten().copied().collect();
        VariantSummary {
            variant: self.name.clone(),
            seeds: self.rows.iter().map(|r| r.seed).collect(),
            mean_a: a,
            mean_p: p,
            mean_r: r,
            mean_rel_err: (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64),
            mean_wallclock_ms: self.rows.iter().map(|r| r.wallclock_ms).sum::<f64>() / n,
        }
    }

    pub fn mean_r(&self) -> f64 {
        self.summary().mean_r
    }
}

/// Per-target result of the optimization baseline comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlgCase {
    pub seed: u64,
    /// Worst relative error over the active rows; 1 without any.
    pub analytic_err: f64,
    pub analytic_ms: f64,
    pub active_rows: usize,
    pub dlg_err: f64,
    pub dlg_loss: f64,
    pub dlg_iterations: usize,
    pub dlg_ms: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub command: Command,
    pub variants: Vec<Variant>,
    pub dlg: Vec<DlgCase>,
    pub files: Vec<PathBuf>,
}

impl Report {
    pub fn variant(&self, name: &str) -> Option<&Variant> {
        self.variants.iter().find(|v| v.name == name)
    }
}

fn mnist_default_dir() -> PathBuf {
    std::env::var_os("GRADLEAK_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn load(cfg: &ExperimentConfig) -> Result<Dataset> {
    let seed = cfg.seeds[0];
    data::load_dataset(&cfg.dataset, &mnist_default_dir(), cfg.examples, cfg.classes, seed)
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    data: Dataset,
    user: UserNode,
    files: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn row(&self, seed: u64, s: Option<f64>, sigma: Option<f64>, n: usize, round: &RoundConfig, o: &TrialOutcome) -> MetricsRow {
        MetricsRow {
            seed,
            dataset: self.data.name.clone(),
            s,
            sigma,
            b: round.batch_size,
            n,
            k: round.local_batches,
            a: o.metrics.a,
            p: o.metrics.p,
            r: o.metrics.r,
            wallclock_ms: o.wallclock_ms,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn sweep(
        &mut self,
        name: String,
        arch: &ArchSpec,
        init: RandomScheme,
        s: Option<f64>,
        sigma: Option<f64>,
        round: RoundConfig,
        defense: Option<&DefenseConfig>,
    ) -> Result<Variant> {
        let mut v = Variant {
            name,
            rows: Vec::new(),
            rel_errs: Vec::new(),
        };
        for (i, &seed) in self.cfg.seeds.iter().enumerate() {
            let grid = self.cfg.grids && i == 0 && matches!(self.data.kind, DatasetKind::Image { .. });
            let spec = TrialSpec {
                arch,
                init,
                trap: s.map(|s| self.cfg.trap.with_seed(s, seed)),
                round,
                defense,
                seed,
                keep_extraction: grid,
            };
            let o = run_trial(&self.data, &self.user, &spec)?;
            if grid {
                self.write_grids(&v.name, seed, &o)?;
            }
            v.rows.push(self.row(seed, s, sigma, arch.neurons, &round, &o));
            v.rel_errs.push(o.mean_rel_err);
        }
        Ok(v)
    }

    fn write_grids(&mut self, name: &str, seed: u64, o: &TrialOutcome) -> Result<()> {
        let shape = self.data.example_shape();
        let cols = (o.samples.len() as f64).sqrt().ceil() as usize;
        let ex = o.extraction.as_ref().expect("kept");
        let rec: Vec<Option<&[f64]>> = o
            .recovered
            .iter()
            .map(|c| c.map(|c| ex.candidates[c].x.data()))
            .collect();
        let p = self.cfg.out.join(format!("{name}_seed{seed}_recovered.pgm"));
        self.files.extend(write_reconstruction_grid(&rec, &shape, cols, &p)?);
        let truth: Vec<Option<&[f64]>> = o.samples.iter().map(|&i| Some(self.data.features.row(i))).collect();
        let p = self.cfg.out.join(format!("{name}_seed{seed}_truth.pgm"));
        self.files.extend(write_reconstruction_grid(&truth, &shape, cols, &p)?);
        Ok(())
    }

    fn emit(&mut self, file: &str, variants: &[&Variant]) -> Result<()> {
        let rows: Vec<MetricsRow> = variants.iter().flat_map(|v| v.rows.iter().cloned()).collect();
        let ext = match self.cfg.format {
            MetricsFormat::Csv => "csv",
            MetricsFormat::Json => "json",
        };
        let p = self.cfg.out.join(format!("{file}.{ext}"));
        write_metrics(&rows, &p, self.cfg.format)?;
        self.files.push(p);
        Ok(())
    }
}

fn scheme_sigma(s: &RandomScheme) -> Option<f64> {
    match s {
        RandomScheme::Gaussian { sigma } => Some(*sigma),
        _ => None,
    }
}

/// Runs `cfg.command`, writing every output under `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let cfg_path = cfg.out.join("config.json");
    fs::write(&cfg_path, cfg.to_json()?)?;
    let data = load(cfg)?;
    let user = data.clone().into_user(0, 0)?;
    let mut ctx = Ctx {
        cfg,
        data,
        user,
        files: vec![cfg_path],
    };
    let arch = cfg.arch;
    let mut variants = Vec::new();
    let mut dlg_cases = Vec::new();
    match cfg.command {
        Command::Passive => {
            for scheme in &cfg.schemes {
                let v = ctx.sweep(scheme.label(), &arch, *scheme, None, scheme_sigma(scheme), cfg.round, None)?;
                ctx.emit(&format!("passive_{}", v.name), &[&v])?;
                variants.push(v);
            }
        }
        Command::Active => {
            let v = ctx.sweep(format!("s{}", cfg.trap.s), &arch, cfg.init, Some(cfg.trap.s), None, cfg.round, None)?;
            ctx.emit("active", &[&v])?;
            variants.push(v);
        }
        Command::SweepS => {
            for &s in &cfg.s_grid {
                variants.push(ctx.sweep(format!("s{s}"), &arch, cfg.init, Some(s), None, cfg.round, None)?);
            }
            ctx.emit("sweep_s", &variants.iter().collect::<Vec<_>>())?;
        }
        Command::SweepBn => {
            for &n in &cfg.neurons_grid {
                let a = ArchSpec { neurons: n, ..arch };
                for &b in &cfg.batch_grid {
                    let round = RoundConfig {
                        batch_size: b,
                        ..cfg.round
                    };
                    variants.push(ctx.sweep(format!("N{n}_B{b}"), &a, cfg.init, Some(cfg.trap.s), None, round, None)?);
                }
            }
            ctx.emit("sweep_bn", &variants.iter().collect::<Vec<_>>())?;
        }
        Command::Averaging => {
            for &k in &cfg.k_grid {
                let round = RoundConfig {
                    local_batches: k,
                    ..cfg.round
                };
                variants.push(ctx.sweep(format!("k{k}"), &arch, cfg.init, Some(cfg.trap.s), None, round, None)?);
            }
            ctx.emit("averaging", &variants.iter().collect::<Vec<_>>())?;
        }
        Command::Defend => {
            for case in &cfg.defenses {
                let sigma = case.defense.map(|d| d.noise_sigma);
                let v = ctx.sweep(
                    case.label.clone(),
                    &arch,
                    cfg.init,
                    Some(cfg.trap.s),
                    sigma,
                    cfg.round,
                    case.defense.as_ref(),
                )?;
                ctx.emit(&format!("defend_{}", case.label), &[&v])?;
                variants.push(v);
            }
        }
        Command::Text => {
            for (name, trap) in [("passive", None), ("active", Some(cfg.trap.s))] {
                let mut vs = Vec::new();
                for &b in &cfg.batch_grid {
                    let round = RoundConfig {
                        batch_size: b,
                        ..cfg.round
                    };
                    vs.push(ctx.sweep(format!("{name}_B{b}"), &arch, cfg.init, trap, None, round, None)?);
                }
                ctx.emit(&format!("text_{name}"), &vs.iter().collect::<Vec<_>>())?;
                variants.extend(vs);
            }
        }
        Command::Dlg => {
            dlg_cases = run_dlg(&mut ctx, &arch)?;
        }
    }
    let summaries: Vec<VariantSummary> = variants.iter().map(Variant::summary).collect();
    let sp = cfg.out.join("summary.json");
    fs::write(
        &sp,
        serde_json::to_string_pretty(&serde_json::json!({
            "command": cfg.command,
            "seeds": cfg.seeds,
            "variants": summaries,
            "dlg": dlg_cases,
        }))?,
    )?;
    ctx.files.push(sp);
    Ok(Report {
        command: cfg.command,
        variants,
        dlg: dlg_cases,
        files: ctx.files,
    })
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        d / n
    } else {
        d
    }
}

fn run_dlg(ctx: &mut Ctx<'_>, arch: &ArchSpec) -> Result<Vec<DlgCase>> {
    let cfg = ctx.cfg;
    if cfg.round.batch_size != 1 || cfg.round.local_batches != 1 {
        return Err(config_err!("the optimization baseline handles B = 1, k = 1 only"));
    }
    let dcfg: DlgConfig = cfg.dlg;
    let mut cases = Vec::new();
    let mut out = csv::Writer::from_path(cfg.out.join("dlg.csv"))?;
    for &seed in &cfg.seeds {
        let mut model = arch.build(&ctx.data.kind, ctx.data.classes)?;
        init_random(&mut model, cfg.init, &mut rng::stream(seed, streams::INIT))?;
        let mut hold = None;
        let mut hook = |v: &RoundView<'_>| -> Result<()> {
            hold = Some(v.updates[0].clone());
            Ok(())
        };
        run_round(
            &mut model,
            std::slice::from_ref(&ctx.user),
            &cfg.round,
            &Dispatch::Honest,
            None,
            0,
            seed,
            &mut hook,
        )?;
        let up = hold.expect("hook ran");
        let x = ctx.data.features.row(up.samples[0]).to_vec();

        let t0 = Instant::now();
        let ex = extract_from_model(&model, &up.grads, model.first_dense(), None, EPS_ACTIVE)?;
        let analytic_ms = t0.elapsed().as_secs_f64() * 1e3;
        let analytic_err = if ex.candidates.is_empty() {
            1.0
        } else {
            ex.candidates
                .iter()
                .map(|c| rel_l2(c.x.data(), &x))
                .fold(0.0, f64::max)
        };

        let run = dlg::dlg_reconstruct(&model, &up.grads, &dcfg, &mut rng::stream(seed, streams::DLG))?;
        let tp = cfg.out.join(format!("dlg_trace_seed{seed}.csv"));
        write_trace_csv(&run.losses, &tp)?;
        ctx.files.push(tp);
        let case = DlgCase {
            seed,
            analytic_err,
            analytic_ms,
            active_rows: ex.active(),
            dlg_err: rel_l2(run.x.data(), &x),
            dlg_loss: run.final_loss(),
            dlg_iterations: run.iterations,
            dlg_ms: run.wallclock_ms,
            diverged: run.diverged,
        };
        out.serialize(&case)?;
        cases.push(case);
    }
    out.flush()?;
    ctx.files.push(cfg.out.join("dlg.csv"));
    Ok(cases)
}

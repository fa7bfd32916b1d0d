//! Experiment configuration and the runners behind each CLI subcommand.

mod arch;
mod runners;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::MetricsFormat;
use crate::defense::{DefenseConfig, NoiseSite};
use crate::dlg::DlgConfig;
use crate::error::{config_err, Result};
use crate::fl::RoundConfig;
use crate::init::{RandomScheme, TrapConfig};

pub use arch::{trap_recipe, ArchKind, ArchSpec};
pub use runners::{run, run_trial, DlgCase, Report, TrialOutcome, TrialSpec, Variant, VariantSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Passive,
    Active,
    SweepS,
    SweepBn,
    Averaging,
    Defend,
    Dlg,
    Text,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Passive => "passive",
            Command::Active => "active",
            Command::SweepS => "sweep_s",
            Command::SweepBn => "sweep_bn",
            Command::Averaging => "averaging",
            Command::Defend => "defend",
            Command::Dlg => "dlg",
            Command::Text => "text",
        }
    }
}

/// Trap parameters; the trap seed is the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapParams {
    pub s: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "half")]
    pub sigma: f64,
}

fn half() -> f64 {
    0.5
}

impl TrapParams {
    pub fn with_seed(&self, s: f64, seed: u64) -> TrapConfig {
        TrapConfig {
            mu: self.mu,
            sigma: self.sigma,
            s,
            seed,
        }
    }
}

/// One defended (or undefended, `defense = None`) configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseCase {
    pub label: String,
    #[serde(default)]
    pub defense: Option<DefenseConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: Command,
    /// `mnist`, `mnist:<dir>`, `image:HxWxC`, `tabular:D` or `tokens:SEQxVOCAB`.
    pub dataset: String,
    /// Size of generated datasets.
    pub examples: usize,
    pub classes: usize,
    pub arch: ArchSpec,
    pub init: RandomScheme,
    /// Init schemes compared by `passive`.
    pub schemes: Vec<RandomScheme>,
    pub trap: TrapParams,
    pub s_grid: Vec<f64>,
    pub round: RoundConfig,
    pub neurons_grid: Vec<usize>,
    pub batch_grid: Vec<usize>,
    pub k_grid: Vec<usize>,
    pub defenses: Vec<DefenseCase>,
    pub dlg: DlgConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Also write reconstruction grids (image datasets, first seed).
    pub grids: bool,
    pub format: MetricsFormat,
}

fn defaults_for(command: Command) -> ExperimentConfig {
    let mut round = RoundConfig::new(100);
    round.local_batches = 1;
    let noise = |sigma: f64, site: NoiseSite, dpsgd: bool, malicious_server: bool| DefenseConfig {
        clip_norm: dpsgd.then_some(1.0),
        noise_sigma: sigma,
        noise_site: site,
        dpsgd,
        malicious_server,
        ..DefenseConfig::default()
    };
    let mut cfg = ExperimentConfig {
        command,
        dataset: "mnist".into(),
        examples: 5000,
        classes: 10,
        arch: ArchSpec::new(ArchKind::Fcnn, 1000),
        init: RandomScheme::XavierUniform,
        schemes: vec![
            RandomScheme::Gaussian { sigma: 0.01 },
            RandomScheme::Gaussian { sigma: 0.5 },
            RandomScheme::Gaussian { sigma: 2.0 },
            RandomScheme::XavierNormal,
            RandomScheme::XavierUniform,
        ],
        trap: TrapParams {
            s: 0.7,
            mu: 0.0,
            sigma: 0.5,
        },
        s_grid: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999],
        round,
        neurons_grid: vec![1000, 3000],
        batch_grid: vec![20, 50, 100, 200],
        k_grid: vec![1, 5, 10, 20],
        defenses: vec![
            DefenseCase {
                label: "none".into(),
                defense: None,
            },
        ],
        dlg: DlgConfig::default(),
        seeds: (0..10).collect(),
        out: PathBuf::from("out"),
        grids: false,
        format: MetricsFormat::Csv,
    };
    match command {
        Command::Defend => {
            for c in [0.5, 1.0, 2.0] {
                cfg.defenses.push(DefenseCase {
                    label: format!("clip_{c}"),
                    defense: Some(DefenseConfig {
                        clip_norm: Some(c),
                        ..DefenseConfig::default()
                    }),
                });
            }
            cfg.defenses.push(DefenseCase {
                label: "noise".into(),
                defense: Some(noise(1.0, NoiseSite::User, false, false)),
            });
            cfg.defenses.push(DefenseCase {
                label: "dpsgd_user".into(),
                defense: Some(noise(1.0, NoiseSite::User, true, false)),
            });
            cfg.defenses.push(DefenseCase {
                label: "dpsgd_malicious_server".into(),
                defense: Some(noise(1.0, NoiseSite::Server, true, true)),
            });
            cfg.seeds = (0..3).collect();
        }
        Command::Dlg => {
            cfg.dataset = "image:8x8x1".into();
            cfg.examples = 1000;
            cfg.arch = ArchSpec::new(ArchKind::Mlp, 32);
            cfg.round = RoundConfig::new(1);
            cfg.seeds = (0..20).collect();
        }
        Command::Text => {
            cfg.dataset = "tokens:250x1000".into();
            cfg.examples = 1000;
            cfg.classes = 2;
            cfg.arch = ArchSpec::new(ArchKind::Text, 1000);
            cfg.trap.s = 0.99;
            cfg.batch_grid = vec![20, 200];
        }
        Command::SweepBn => {
            cfg.trap.s = 0.7;
        }
        _ => {}
    }
    cfg
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Defaults for `command`.
    pub fn preset(command: Command) -> Self {
        defaults_for(command)
    }

    /// Parses a (possibly partial) JSON document over the preset of
    /// `command`. A `command` key in the document must agree.
    pub fn from_json(command: Command, text: &str) -> Result<Self> {
        let over: serde_json::Value = serde_json::from_str(text)?;
        if !over.is_object() {
            return Err(config_err!("config must be a JSON object"));
        }
        let mut base = serde_json::to_value(Self::preset(command))?;
        merge(&mut base, over);
        let cfg: Self = serde_json::from_value(base)?;
        if cfg.command != command {
            return Err(config_err!(
                "config is for {:?}, subcommand is {:?}",
                cfg.command.name(),
                command.name()
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err!("at least one seed is required"));
        }
        self.round.validate()?;
        self.init.validate()?;
        self.schemes.iter().try_for_each(|s| s.validate())?;
        self.trap.with_seed(self.trap.s, 0).validate()?;
        for &s in &self.s_grid {
            self.trap.with_seed(s, 0).validate()?;
        }
        for d in self.defenses.iter().filter_map(|d| d.defense.as_ref()) {
            d.validate()?;
        }
        self.dlg.validate()?;
        if self.neurons_grid.contains(&0) || self.batch_grid.contains(&0) || self.k_grid.contains(&0) {
            return Err(config_err!("grid values must be positive"));
        }
        if self.classes < 2 {
            return Err(config_err!("need at least two classes"));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }
}

/// Parses `7`, `1,2,5` or `0..10` (half-open).
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || config_err!("bad seed list {:?}", text);
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

/// Comma-separated list of numbers.
pub fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>> {
    let v: Option<Vec<T>> = text.split(',').map(|s| s.trim().parse().ok()).collect();
    match v {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(config_err!("bad list {:?}", text)),
    }
}

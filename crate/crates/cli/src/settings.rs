//! Resolved run settings.
//!
//! Every setting has a key equal to its long flag name. A config file holds
//! `key = value` lines with `#` comments; flags override file values, which
//! override the defaults. The dry-run output is itself a valid config file.

use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use feddg::distbank::LambdaMode;
use feddg::federation::{ExperimentConfig, Method};
use feddg::metrics::HausdorffKind;
use feddg::synthdata::SuiteConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    /// The generated four-domain suite.
    Synth4,
    /// A dataset directory in the external format.
    External(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum HoldOut {
    All,
    Domains(Vec<u32>),
}

#[derive(Clone, Debug)]
pub struct Settings {
    pub task: Task,
    pub suite: SuiteConfig,
    pub hold_out: HoldOut,
    pub modes: Vec<Method>,
    pub no_cfsi: bool,
    pub no_bel: bool,
    pub no_boundary_loss: bool,
    pub lambda_modes: Vec<LambdaMode>,
    pub seeds: Vec<u64>,
    pub clients: Option<RangeInclusive<usize>>,
    pub out: PathBuf,
    /// Template for every run; held-out, sources, method, λ and seed are
    /// filled in per run.
    pub base: ExperimentConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            task: Task::Synth4,
            suite: SuiteConfig::default(),
            hold_out: HoldOut::Domains(vec![3]),
            modes: vec![Method::ELCFS],
            no_cfsi: false,
            no_bel: false,
            no_boundary_loss: false,
            lambda_modes: vec![LambdaMode::default()],
            seeds: vec![1],
            clients: None,
            out: PathBuf::from("runs"),
            base: ExperimentConfig::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow!("{key}: cannot parse `{value}`: {e}"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => bail!("{key}: expected true or false, got `{other}`"),
    }
}

fn list<T>(key: &str, value: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = value.split(',').map(|s| item(s.trim())).collect::<Result<_>>()?;
    if items.is_empty() {
        bail!("{key}: empty list");
    }
    Ok(items)
}

/// `A`..`Z` or a numeric id.
pub fn parse_domain(s: &str) -> Result<u32> {
    match s.as_bytes() {
        [c @ b'A'..=b'Z'] => Ok(u32::from(c - b'A')),
        [c @ b'a'..=b'z'] => Ok(u32::from(c - b'a')),
        _ => s.parse().map_err(|_| anyhow!("unknown domain `{s}`")),
    }
}

/// `n` or `lo..hi` (inclusive).
fn parse_range(s: &str) -> Result<RangeInclusive<usize>> {
    let range = match s.split_once("..") {
        Some((lo, hi)) => num::<usize>("clients", lo.trim())?..=num::<usize>("clients", hi.trim().trim_start_matches('='))?,
        None => {
            let n = num::<usize>("clients", s)?;
            n..=n
        }
    };
    if range.is_empty() || *range.start() == 0 {
        bail!("clients: `{s}` is not a range of positive counts");
    }
    Ok(range)
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let e = &mut self.base.episodic;
        match key {
            "task" => {
                self.task = if v == "synth4" { Task::Synth4 } else { Task::External(PathBuf::from(v)) };
            }
            "size" => self.suite.size = num(key, v)?,
            "n-train" => self.suite.n_train = num(key, v)?,
            "n-test" => self.suite.n_test = num(key, v)?,
            "data-seed" => self.suite.seed = num(key, v)?,
            "hold-out" => {
                self.hold_out = if v == "all" {
                    HoldOut::All
                } else {
                    HoldOut::Domains(list(key, v, parse_domain)?)
                };
            }
            "mode" => {
                self.modes = list(key, v, |m| Method::from_label(m).map_err(|e| anyhow!("mode: {e}")))?;
            }
            "no-cfsi" => self.no_cfsi = flag(key, v)?,
            "no-bel" => self.no_bel = flag(key, v)?,
            "no-boundary-loss" => self.no_boundary_loss = flag(key, v)?,
            // Uniform modes contain a comma, so several modes are separated
            // by whitespace.
            "lambda-mode" => {
                self.lambda_modes = v
                    .split_whitespace()
                    .map(|m| m.parse::<LambdaMode>().map_err(|e| anyhow!("lambda-mode: {e}")))
                    .collect::<Result<_>>()?;
                if self.lambda_modes.is_empty() {
                    bail!("lambda-mode: empty");
                }
            }
            "alpha" => self.base.alpha = num(key, v)?,
            "gamma" => e.gamma = num(key, v)?,
            "tau" => e.contrastive.tau = num(key, v)?,
            "beta" => e.beta = num(key, v)?,
            "infonce-standard" => e.contrastive.infonce_standard = flag(key, v)?,
            "lr" => self.base.lr = num(key, v)?,
            "rounds" => self.base.rounds = num(key, v)?,
            "local-epochs" => self.base.local_epochs = num(key, v)?,
            "batch" => self.base.batch = num(key, v)?,
            "seed" => self.seeds = list(key, v, |s| num(key, s))?,
            "clients" => self.clients = if v == "all" { None } else { Some(parse_range(v)?) },
            "base-width" => self.base.net.base_width = num(key, v)?,
            "depth" => self.base.net.depth = num(key, v)?,
            "eval-interval" => self.base.eval_interval = num(key, v)?,
            "hd95" => {
                self.base.hd_kind = if flag(key, v)? { HausdorffKind::Percentile95 } else { HausdorffKind::Exact };
            }
            "parallel-clients" => self.base.parallel_clients = flag(key, v)?,
            "out" => self.out = PathBuf::from(v),
            other => bail!("unknown setting `{other}`"),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), n + 1))?;
            self.set(key.trim(), value)
                .with_context(|| format!("{}:{}", path.display(), n + 1))?;
        }
        Ok(())
    }

    /// The requested methods after the component switches. Returns the
    /// methods and whether any ELCFS request collapsed to the baseline.
    pub fn methods(&self) -> (Vec<Method>, bool) {
        let mut collapsed = false;
        let mut out: Vec<Method> = Vec::new();
        for &m in &self.modes {
            let mut m = m;
            if !m.is_baseline() {
                m.cfsi &= !self.no_cfsi;
                m.bel &= !self.no_bel;
                m.boundary_loss &= !self.no_boundary_loss;
                collapsed |= m.is_baseline();
            }
            if !out.contains(&m) {
                out.push(m);
            }
        }
        (out, collapsed)
    }

    pub fn hold_out_ids(&self, domains: usize) -> Vec<u32> {
        match &self.hold_out {
            HoldOut::All => (0..domains as u32).collect(),
            HoldOut::Domains(d) => d.clone(),
        }
    }

    /// The settings as a config file.
    pub fn render(&self) -> String {
        let b = &self.base;
        let e = &b.episodic;
        let join = |v: Vec<String>, sep: &str| v.join(sep);
        let values: Vec<(&str, String)> = vec![
            (
                "task",
                match &self.task {
                    Task::Synth4 => "synth4".into(),
                    Task::External(p) => p.display().to_string(),
                },
            ),
            ("size", self.suite.size.to_string()),
            ("n-train", self.suite.n_train.to_string()),
            ("n-test", self.suite.n_test.to_string()),
            ("data-seed", self.suite.seed.to_string()),
            (
                "hold-out",
                match &self.hold_out {
                    HoldOut::All => "all".into(),
                    HoldOut::Domains(d) => join(d.iter().map(|&i| feddg::dataset::domain_letter(i)).collect(), ","),
                },
            ),
            ("mode", join(self.modes.iter().map(Method::label).collect(), ",")),
            ("no-cfsi", self.no_cfsi.to_string()),
            ("no-bel", self.no_bel.to_string()),
            ("no-boundary-loss", self.no_boundary_loss.to_string()),
            ("lambda-mode", join(self.lambda_modes.iter().map(ToString::to_string).collect(), " ")),
            ("alpha", b.alpha.to_string()),
            ("gamma", e.gamma.to_string()),
            ("tau", e.contrastive.tau.to_string()),
            ("beta", e.beta.to_string()),
            ("infonce-standard", e.contrastive.infonce_standard.to_string()),
            ("lr", b.lr.to_string()),
            ("rounds", b.rounds.to_string()),
            ("local-epochs", b.local_epochs.to_string()),
            ("batch", b.batch.to_string()),
            ("seed", join(self.seeds.iter().map(ToString::to_string).collect(), ",")),
            (
                "clients",
                match &self.clients {
                    None => "all".into(),
                    Some(r) => format!("{}..{}", r.start(), r.end()),
                },
            ),
            ("base-width", b.net.base_width.to_string()),
            ("depth", b.net.depth.to_string()),
            ("eval-interval", b.eval_interval.to_string()),
            ("hd95", (b.hd_kind == HausdorffKind::Percentile95).to_string()),
            ("parallel-clients", b.parallel_clients.to_string()),
            ("out", self.out.display().to_string()),
        ];
        let mut s = String::new();
        for (k, v) in values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

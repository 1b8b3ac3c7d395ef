//! Expands settings into experiments, runs them and writes the reports.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use feddg::dataset::{domain_letter, load_external, DomainData};
use feddg::federation::{client_sweep, run_many, summarize, thread_cap, write_rounds_csv, ExperimentConfig};
use feddg::synthdata::default_domain_suite;
use feddg::tape::save_checkpoint;

use crate::settings::{Settings, Task};

fn load_domains(s: &Settings) -> Result<Vec<DomainData>> {
    Ok(match &s.task {
        Task::Synth4 => default_domain_suite(&s.suite)?,
        Task::External(dir) => load_external(dir).with_context(|| format!("loading {}", dir.display()))?,
    })
}

/// One config per held-out domain, method, λ mode, source set and seed.
pub fn plan(s: &Settings, domains: usize) -> Result<Vec<ExperimentConfig>> {
    let (methods, _) = s.methods();
    let mut configs = Vec::new();
    for held_out in s.hold_out_ids(domains) {
        let source_sets = match &s.clients {
            Some(range) => client_sweep(held_out, domains, range.clone())?.into_iter().map(Some).collect(),
            None => vec![None],
        };
        for &method in &methods {
            for &lambda in &s.lambda_modes {
                for sources in &source_sets {
                    for &seed in &s.seeds {
                        let cfg = ExperimentConfig {
                            held_out,
                            sources: sources.clone(),
                            method,
                            lambda,
                            seed,
                            ..s.base.clone()
                        };
                        cfg.validate(domains)?;
                        configs.push(cfg);
                    }
                }
            }
        }
    }
    Ok(configs)
}

/// File-name stem of one run.
pub fn run_name(cfg: &ExperimentConfig, domains: usize) -> String {
    let sources: String = cfg.source_ids(domains).iter().map(|&d| domain_letter(d)).collect();
    let raw = format!(
        "{}_{}_{}_{}_s{}",
        cfg.method.label(),
        domain_letter(cfg.held_out),
        cfg.lambda,
        sources,
        cfg.seed
    );
    raw.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

pub fn run(s: &Settings, dry_run: bool) -> Result<()> {
    let (_, collapsed) = s.methods();
    if collapsed {
        eprintln!("warning: --no-cfsi together with --no-bel removes every ELCFS component; running the FedAvg baseline");
    }
    let domains = load_domains(s)?;
    let configs = plan(s, domains.len())?;
    if configs.is_empty() {
        bail!("nothing to run");
    }
    if dry_run {
        print!("{}", s.render());
        println!("# {} domains, {} runs, up to {} threads", domains.len(), configs.len(), thread_cap());
        for c in &configs {
            println!("#   {}", run_name(c, domains.len()));
        }
        return Ok(());
    }

    let out = &s.out;
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::create_dir_all(out.join("ledgers"))?;
    fs::write(out.join("config.txt"), s.render())?;
    eprintln!("{} runs on up to {} threads", configs.len(), thread_cap());
    let reports = run_many(&configs, &domains)?;

    write_rounds_csv(&reports, BufWriter::new(File::create(out.join("report.csv"))?))?;
    let summary = summarize(&reports);
    fs::write(out.join("summary.json"), summary.to_json()?)?;
    for r in &reports {
        let name = run_name(&r.config, domains.len());
        save_checkpoint(&r.model.params, &out.join("checkpoints").join(format!("{name}.ckpt")))?;
        r.ledger
            .write_csv(BufWriter::new(File::create(out.join("ledgers").join(format!("{name}.csv")))?))?;
    }
    print_table(&summary, out);
    Ok(())
}

fn print_table(summary: &feddg::federation::Summary, out: &Path) {
    println!("{:<28} {:<16} {:>7} {:>16} {:>16}", "method", "lambda", "sources", "dice", "hd");
    for row in &summary.overall {
        println!(
            "{:<28} {:<16} {:>7} {:>8.4} ± {:<6.4} {:>8.2} ± {:<6.2}",
            row.method, row.lambda, row.num_sources, row.dice.mean, row.dice.std, row.hd.mean, row.hd.std
        );
    }
    println!("reports written to {}", out.display());
}

//! Component ablations and scheme comparisons that share one vanilla pass
//! and one correspondence pass.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::output::{run_dir, write_phase1, write_phase2, write_phase3, Phase3Artifacts, Phase3Inputs};
use super::phases::Session;
use crate::error::{Error, Result};
use crate::metrics::TSV_HEADER;
use crate::schemes::{QkInject, Scheme, SchemeOptions};

pub const ABLATION_FILE: &str = "ablation.tsv";
pub const SCHEMES_FILE: &str = "schemes.tsv";

/// The configured base followed by one variant per switched-off component.
pub fn ablation_grid(base: &SchemeOptions) -> Vec<(&'static str, SchemeOptions)> {
    let with = |f: &dyn Fn(&mut SchemeOptions)| {
        let mut o = *base;
        f(&mut o);
        o
    };
    vec![
        ("base", *base),
        ("no-adain", with(&|o| o.adain = false)),
        ("keys-only", with(&|o| o.qk = QkInject::KeysOnly)),
        ("queries-only", with(&|o| o.qk = QkInject::QueriesOnly)),
        ("no-qk", with(&|o| o.qk = QkInject::None)),
        ("no-vsd", with(&|o| o.vsd = false)),
        ("no-crossing", with(&|o| o.crossing = false)),
    ]
}

#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub name: String,
    pub artifacts: Phase3Artifacts,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub runs: Vec<ExperimentRun>,
}

impl ExperimentReport {
    pub fn to_tsv(&self, label: &str) -> String {
        let mut out = String::new();
        let header = TSV_HEADER.replacen("row", label, 1);
        writeln!(out, "{header}").unwrap();
        for r in &self.runs {
            writeln!(out, "{}\t{}", r.name, r.artifacts.metrics.summary_cells()).unwrap();
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&ExperimentRun> {
        self.runs.iter().find(|r| r.name == name)
    }
}

fn shared_phases(config: &RunConfig, out_root: &Path) -> Result<(PathBuf, Phase3Inputs)> {
    let session = Session::new(config.clone())?;
    let dir = run_dir(config, out_root);
    write_phase1(&session, &dir)?;
    write_phase2(&session, &dir)?;
    let inputs = Phase3Inputs::load(&dir, config.batch_size)?;
    Ok((dir, inputs))
}

fn run_variants(
    config: &RunConfig,
    out_root: &Path,
    group: &str,
    variants: Vec<(String, RunConfig)>,
    table: &str,
    label: &str,
) -> Result<ExperimentReport> {
    let (dir, inputs) = shared_phases(config, out_root)?;
    let mut runs = Vec::with_capacity(variants.len());
    for (name, variant) in variants {
        log::info!("{group} variant {name}");
        let session = Session::new(variant)?;
        let artifacts = write_phase3(
            &session,
            &inputs,
            &dir,
            &format!("{group}/{name}"),
            &format!("{group}:{name}"),
        )?;
        runs.push(ExperimentRun { name, artifacts });
    }
    let report = ExperimentReport { dir, runs };
    let path = report.dir.join(table);
    std::fs::write(&path, report.to_tsv(label)).map_err(|e| Error::io(path, e))?;
    Ok(report)
}

/// Seven phase-3 runs of the ConsiStyle scheme under `ablate/<variant>/`.
pub fn ablate(config: &RunConfig, out_root: &Path) -> Result<ExperimentReport> {
    let base = config.with_scheme(Scheme::ConsiStyle);
    let variants = ablation_grid(&base.options)
        .into_iter()
        .map(|(name, options)| (name.to_string(), base.with_options(options)))
        .collect();
    run_variants(&base, out_root, "ablate", variants, ABLATION_FILE, "variant")
}

/// One phase-3 run per scheme under `schemes/<token>/`.
pub fn compare_schemes(config: &RunConfig, out_root: &Path) -> Result<ExperimentReport> {
    let variants = Scheme::ALL
        .iter()
        .map(|&s| (s.token().to_string(), config.with_scheme(s)))
        .collect();
    run_variants(config, out_root, "schemes", variants, SCHEMES_FILE, "scheme")
}

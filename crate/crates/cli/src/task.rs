//! Task and scenario selection shared by the subcommands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use hrc_core::bench::{generate_random_htm, Scenario};
use hrc_core::{chair, parse_htm, Htm, ScenarioConfig};

use crate::CliError;

#[derive(Debug, Clone, Args)]
pub struct TaskArgs {
    /// Task document (JSON). Repeatable for `bench`.
    #[arg(long, value_name = "FILE")]
    pub htm: Vec<PathBuf>,
    /// Built-in task. Only `chair` exists.
    #[arg(long, value_name = "NAME")]
    pub builtin: Vec<String>,
    /// Random task of n actions, e.g. `--random 8,1`.
    #[arg(long, value_name = "N,SEED")]
    pub random: Vec<String>,
    /// Scenario file (JSON). Defaults to nominal-noise settings.
    #[arg(long, value_name = "FILE")]
    pub scenario: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn parse_random(spec: &str) -> Result<(usize, u64), CliError> {
    let bad = || CliError::Config(format!("--random expects N,SEED, got {spec:?}"));
    let (n, seed) = spec.split_once(',').ok_or_else(bad)?;
    Ok((n.trim().parse().map_err(|_| bad())?, seed.trim().parse().map_err(|_| bad())?))
}

impl TaskArgs {
    pub fn config(&self) -> Result<ScenarioConfig, CliError> {
        match &self.scenario {
            Some(p) => ScenarioConfig::parse(&read(p)?).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))),
            None => Ok(ScenarioConfig::default()),
        }
    }

    /// Every selected task, named. Defaults to the chair when nothing is given.
    pub fn tasks(&self) -> Result<Vec<(String, Htm)>, CliError> {
        let mut out = Vec::new();
        for name in &self.builtin {
            match name.as_str() {
                "chair" => out.push(("chair".to_string(), chair())),
                other => return Err(CliError::Config(format!("unknown built-in task {other:?}"))),
            }
        }
        for spec in &self.random {
            let (n, seed) = parse_random(spec)?;
            let htm = generate_random_htm(n, seed).map_err(|e| CliError::Config(e.to_string()))?;
            out.push((format!("random{n}s{seed}"), htm));
        }
        for p in &self.htm {
            let htm = parse_htm(&read(p)?).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let name = p.file_stem().map_or_else(|| "task".into(), |s| s.to_string_lossy().into_owned());
            out.push((name, htm));
        }
        if out.is_empty() {
            out.push(("chair".to_string(), chair()));
        }
        Ok(out)
    }

    pub fn single(&self) -> Result<Scenario, CliError> {
        let mut tasks = self.tasks()?;
        if tasks.len() > 1 {
            return Err(CliError::Config("this command takes a single task".into()));
        }
        let (name, htm) = tasks.remove(0);
        Ok(Scenario { name, htm: Arc::new(htm), cfg: self.config()? })
    }
}

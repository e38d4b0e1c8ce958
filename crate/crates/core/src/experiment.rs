//! Replication experiments: a TOML-configured DGP, model set, prior and
//! sampler, run over seeded independent trials.

use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compare::{compare_models, ModelRanking};
use crate::data::{format_float, Dataset};
use crate::dgp::{generate, DgpSpec};
use crate::error::{BetelError, Result};
use crate::misspec::PseudoTrueSearch;
use crate::moment_model::{build_grand_model, default_prior, make_model, training_sample_prior, GrandModelBundle, MomentModel, ModelSpec, PriorSpec};
use crate::posterior::McmcConfig;
use crate::seed::derive_seed;

/// Trial count used when `full_scale` is set.
pub const FULL_SCALE_TRIALS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorChoice {
    #[default]
    Default,
    /// Recentre at the ETEL estimate on the first `count` observations, which
    /// are then removed from the analysis sample.
    Training {
        #[serde(default = "default_training_count")]
        count: usize,
    },
}

fn default_training_count() -> usize {
    50
}

fn default_population() -> usize {
    5_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoTrueConfig {
    #[serde(default = "default_population")]
    pub population: usize,
    pub search: PseudoTrueSearch,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "one")]
    pub trials: usize,
    /// Run the full trial count instead of `trials`.
    #[serde(default)]
    pub full_scale: bool,
    #[serde(default)]
    pub dgp: Option<DgpSpec>,
    #[serde(default)]
    pub prior: PriorChoice,
    #[serde(default)]
    pub mcmc: McmcConfig,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub pseudo_true: Option<PseudoTrueConfig>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| BetelError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(BetelError::Config("trials must be at least 1".into()));
        }
        if self.models.is_empty() {
            return Err(BetelError::Config("at least one [[models]] entry is required".into()));
        }
        if self.mcmc.draws < 2 || !(self.mcmc.df > 0.0) || !(self.mcmc.scale > 0.0) {
            return Err(BetelError::Config("mcmc needs draws >= 2, df > 0, scale > 0".into()));
        }
        if let Some(d) = &self.dgp {
            d.validate()?;
        }
        Ok(())
    }

    pub fn effective_trials(&self) -> usize {
        if self.full_scale { FULL_SCALE_TRIALS } else { self.trials }
    }

    pub fn models(&self) -> Result<Vec<MomentModel>> {
        self.models
            .iter()
            .enumerate()
            .map(|(k, spec)| {
                let m = make_model(spec)?;
                Ok(if spec.name.is_none() { m.with_name(format!("M{}", k + 1)) } else { m })
            })
            .collect()
    }

    pub fn bundle(&self) -> Result<GrandModelBundle> {
        build_grand_model(&self.models()?)
    }

    /// Splits off the training slice when the prior needs one.
    pub fn split_training(&self, data: &Dataset) -> Result<(Option<Dataset>, Dataset)> {
        match self.prior {
            PriorChoice::Default => Ok((None, data.clone())),
            PriorChoice::Training { count } => {
                if count >= data.n_rows() {
                    return Err(BetelError::Config(format!(
                        "training slice of {count} rows leaves no analysis data ({} rows)",
                        data.n_rows()
                    )));
                }
                Ok((Some(data.slice_rows(0..count)), data.slice_rows(count..data.n_rows())))
            }
        }
    }

    pub fn priors(&self, models: &[MomentModel], training: Option<&Dataset>) -> Result<Vec<PriorSpec>> {
        models
            .iter()
            .map(|m| match training {
                None => Ok(default_prior(m.dim())),
                Some(t) => training_sample_prior(m, t),
            })
            .collect()
    }

    /// Rows to simulate per trial: the analysis size plus any training slice.
    pub fn rows_per_trial(&self) -> Result<usize> {
        let dgp = self.dgp.as_ref().ok_or_else(|| BetelError::Config("no [dgp] section".into()))?;
        Ok(dgp.n + match self.prior {
            PriorChoice::Default => 0,
            PriorChoice::Training { count } => count,
        })
    }

    /// FNV-1a hash of the canonical JSON form, as 16 hex digits.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(text.as_bytes()))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Compares the bundle on one dataset, splitting off a training slice first
/// when the prior asks for one.
pub fn compare_on(
    config: &ExperimentConfig,
    bundle: &GrandModelBundle,
    data: &Dataset,
    seed: u64,
) -> Result<ModelRanking> {
    let (training, analysis) = config.split_training(data)?;
    let priors = config.priors(&bundle.reformulated, training.as_ref())?;
    compare_models(bundle, &priors, &analysis, &config.mcmc, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub winner: Option<String>,
    /// Set when any model in the trial failed or the trial could not run.
    pub failed: bool,
    pub log_mls: Vec<Option<f64>>,
    pub errors: Vec<Option<String>>,
}

fn run_trial(config: &ExperimentConfig, bundle: &GrandModelBundle, trial: usize) -> TrialRecord {
    let seed = derive_seed(config.master_seed, trial as u64);
    let k = bundle.reformulated.len();
    let outcome = config.rows_per_trial().and_then(|rows| {
        let dgp = config.dgp.as_ref().expect("checked by rows_per_trial");
        let data = generate(&dgp.with(rows, seed))?;
        compare_on(config, bundle, &data, derive_seed(seed, 0x636d70))
    });
    match outcome {
        Ok(r) => TrialRecord {
            trial,
            seed,
            winner: if r.failures() == 0 { r.winner().map(|m| m.name.clone()) } else { None },
            failed: r.failures() > 0 || r.winner().is_none(),
            log_mls: r.models.iter().map(|m| m.estimate.as_ref().map(|e| e.log_ml)).collect(),
            errors: r.models.iter().map(|m| m.error.clone()).collect(),
        },
        Err(e) => TrialRecord {
            trial,
            seed,
            winner: None,
            failed: true,
            log_mls: vec![None; k],
            errors: vec![Some(e.to_string()); k],
        },
    }
}

/// Runs the given trial indices in parallel; records come back sorted by
/// trial index whatever the execution order.
pub fn run_trials(config: &ExperimentConfig, bundle: &GrandModelBundle, trials: &[usize]) -> Vec<TrialRecord> {
    let mut records: Vec<TrialRecord> = trials.par_iter().map(|t| run_trial(config, bundle, *t)).collect();
    records.sort_by_key(|r| r.trial);
    records
}

/// Share of non-failed trials in which each model ranked first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFrequencyTable {
    pub n: usize,
    pub trials: usize,
    pub failed_trials: usize,
    pub models: Vec<String>,
    pub selected: Vec<usize>,
    pub percent: Vec<f64>,
}

impl SelectionFrequencyTable {
    pub fn from_records(n: usize, models: Vec<String>, records: &[TrialRecord]) -> Self {
        let mut selected = vec![0; models.len()];
        for r in records.iter().filter(|r| !r.failed) {
            if let Some(k) = r.winner.as_ref().and_then(|w| models.iter().position(|m| m == w)) {
                selected[k] += 1;
            }
        }
        let ok = records.iter().filter(|r| !r.failed).count();
        let percent = selected
            .iter()
            .map(|s| if ok == 0 { 0.0 } else { 100.0 * *s as f64 / ok as f64 })
            .collect();
        Self {
            n,
            trials: records.len(),
            failed_trials: records.len() - ok,
            models,
            selected,
            percent,
        }
    }

    pub fn percent_of(&self, model: &str) -> Option<f64> {
        self.models.iter().position(|m| m == model).map(|k| self.percent[k])
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        wtr.write_record(["model", "n", "trials", "failed_trials", "selected", "percent"])?;
        for (k, m) in self.models.iter().enumerate() {
            wtr.write_record([
                m.clone(),
                self.n.to_string(),
                self.trials.to_string(),
                self.failed_trials.to_string(),
                self.selected[k].to_string(),
                format_float(self.percent[k]),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub table: SelectionFrequencyTable,
    pub records: Vec<TrialRecord>,
    pub bundle_notes: Vec<String>,
}

impl ReplicationOutcome {
    /// Per-trial log: trial, seed, winner, status, then log m(x) per model.
    pub fn write_trials_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let mut header: Vec<String> = ["trial", "seed", "winner", "status"].map(String::from).to_vec();
        header.extend(self.table.models.iter().map(|m| format!("log_ml[{m}]")));
        wtr.write_record(&header)?;
        for r in &self.records {
            let status = match r.errors.iter().flatten().next() {
                Some(e) => format!("failed: {e}"),
                None if r.failed => "failed".to_string(),
                None => "ok".to_string(),
            };
            let mut rec = vec![r.trial.to_string(), r.seed.to_string(), r.winner.clone().unwrap_or_default(), status];
            rec.extend(r.log_mls.iter().map(|v| v.map(format_float).unwrap_or_default()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Simulates, fits and ranks the model set in every trial.
pub fn run_replication(config: &ExperimentConfig) -> Result<ReplicationOutcome> {
    config.validate()?;
    let dgp = config.dgp.as_ref().ok_or_else(|| BetelError::Config("replication needs a [dgp] section".into()))?;
    let bundle = config.bundle()?;
    let trials: Vec<usize> = (0..config.effective_trials()).collect();
    let records = run_trials(config, &bundle, &trials);
    let table = SelectionFrequencyTable::from_records(dgp.n, bundle.model_names(), &records);
    Ok(ReplicationOutcome { table, records, bundle_notes: bundle.notes.clone() })
}

//! Experiment spec files (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use trustfed_core::corpus::CorpusConfig;
use trustfed_core::harness::Seeds;
use trustfed_core::model::TrainConfig;
use trustfed_core::seed::derive_seed;
use trustfed_core::trust::{self, synth_trust_dataset, train_trust_evaluator_federated, EmbeddingTable};
use trustfed_core::{AlphaSchedule, FedError, FederationConfig, StrategyConfig, TrustEvaluator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub output_dir: PathBuf,
    /// Sequences held out of training and split into (context, reference) pairs.
    pub eval_pairs: usize,
    pub corpus: CorpusConfig,
    pub evaluator: EvaluatorSpec,
    #[serde(default)]
    pub compare: CompareSpec,
    pub federation: FederationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorSpec {
    DeterministicF1 {
        embedding_dim: usize,
        seed: u64,
    },
    /// Logistic-linear scorer trained federatedly on synthetic labelled pairs
    /// before the dialogue federation starts; frozen afterwards.
    LearnedLinear {
        embedding_dim: usize,
        seed: u64,
        train_pairs: usize,
        train_clients: usize,
        train_rounds: usize,
        label_noise: f64,
        learning_rate: f64,
        local_steps: usize,
        batch_size: usize,
    },
    Constant {
        value: f64,
    },
}

/// Settings used only by `compare` and `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    pub fedprox_mu: f64,
    /// Schedule for the adaptive rows when the main strategy is not adaptive.
    pub schedule: AlphaSchedule,
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self {
            fedprox_mu: 0.01,
            schedule: AlphaSchedule::default(),
        }
    }
}

fn cfg_err(field: &str, reason: &str) -> anyhow::Error {
    FedError::Config {
        field: field.to_string(),
        reason: reason.to_string(),
    }
    .into()
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let spec: Self = toml::from_str(text).context("failed to parse experiment spec")?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid spec {}", path.display()))
    }

    /// Canonical TOML form.
    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let name_ok = !self.name.is_empty()
            && self.name != "."
            && self.name != ".."
            && self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if !name_ok {
            return Err(cfg_err("name", "must be non-empty and use only [A-Za-z0-9._-]"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(cfg_err("output_dir", "must be non-empty"));
        }
        self.corpus.validate()?;
        if self.eval_pairs == 0 || self.eval_pairs >= self.corpus.n_sequences {
            return Err(cfg_err("eval_pairs", "must lie in 1..corpus.n_sequences"));
        }
        self.federation.validate()?;
        if self.corpus.n_sequences - self.eval_pairs < self.federation.n_clients {
            return Err(cfg_err("n_clients", "more clients than training sequences"));
        }
        if !(self.compare.fedprox_mu > 0.0) {
            return Err(cfg_err("fedprox_mu", "must be positive"));
        }
        self.compare.schedule.validate()?;
        match &self.evaluator {
            EvaluatorSpec::DeterministicF1 { embedding_dim, .. } if *embedding_dim == 0 => {
                Err(cfg_err("embedding_dim", "must be at least 1"))
            }
            EvaluatorSpec::LearnedLinear {
                embedding_dim,
                train_pairs,
                train_clients,
                train_rounds,
                label_noise,
                learning_rate,
                local_steps,
                batch_size,
                ..
            } => {
                if *embedding_dim == 0 {
                    return Err(cfg_err("embedding_dim", "must be at least 1"));
                }
                if *train_clients == 0 || train_pairs < train_clients {
                    return Err(cfg_err("train_clients", "need 1 <= train_clients <= train_pairs"));
                }
                if *train_rounds == 0 {
                    return Err(cfg_err("train_rounds", "must be at least 1"));
                }
                if !(*label_noise >= 0.0) {
                    return Err(cfg_err("label_noise", "must be non-negative"));
                }
                TrainConfig {
                    learning_rate: *learning_rate,
                    local_steps: *local_steps,
                    batch_size: *batch_size,
                    seed: 0,
                }
                .validate()?;
                Ok(())
            }
            EvaluatorSpec::Constant { value } if !(0.0..=1.0).contains(value) => {
                Err(cfg_err("value", "must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Replaces every seed in the spec file with one derived from `base`.
    pub fn override_seeds(&mut self, base: u64) {
        self.corpus.seed = derive_seed(base, &[10]);
        self.federation.seeds = Seeds::from_base(derive_seed(base, &[11]));
        match &mut self.evaluator {
            EvaluatorSpec::DeterministicF1 { seed, .. } | EvaluatorSpec::LearnedLinear { seed, .. } => {
                *seed = derive_seed(base, &[12]);
            }
            EvaluatorSpec::Constant { .. } => {}
        }
    }

    pub fn build_evaluator(&self) -> anyhow::Result<TrustEvaluator> {
        let vocab = self.corpus.vocab_size;
        Ok(match &self.evaluator {
            EvaluatorSpec::DeterministicF1 { embedding_dim, seed } => TrustEvaluator::DeterministicF1 {
                table: EmbeddingTable::random(vocab, *embedding_dim, *seed)?,
            },
            EvaluatorSpec::LearnedLinear {
                embedding_dim,
                seed,
                train_pairs,
                train_clients,
                train_rounds,
                label_noise,
                learning_rate,
                local_steps,
                batch_size,
            } => {
                let table = EmbeddingTable::random(vocab, *embedding_dim, *seed)?;
                let pairs = synth_trust_dataset(derive_seed(*seed, &[1]), *train_pairs, &table, *label_noise)?;
                let per = pairs.len().div_ceil(*train_clients);
                let partitions: Vec<Vec<trust::ScoredPair<f64>>> = pairs.chunks(per).map(<[_]>::to_vec).collect();
                let cfg = TrainConfig {
                    learning_rate: *learning_rate,
                    local_steps: *local_steps,
                    batch_size: *batch_size,
                    seed: derive_seed(*seed, &[2]),
                };
                train_trust_evaluator_federated(&table, &partitions, *train_rounds, &cfg)?
            }
            EvaluatorSpec::Constant { value } => TrustEvaluator::Constant { value: *value },
        })
    }

    /// Adaptive schedule for comparison rows.
    pub fn adaptive_schedule(&self) -> AlphaSchedule {
        match &self.federation.strategy {
            StrategyConfig::FedDtre(s) => *s,
            _ => self.compare.schedule,
        }
    }
}

pub fn ensure_alphas(alphas: &[f64]) -> anyhow::Result<()> {
    if alphas.is_empty() {
        bail!("at least one --alpha value is required");
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(cfg_err("alpha", &format!("{a} is outside [0, 1]")));
    }
    Ok(())
}

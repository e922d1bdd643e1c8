use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;
use trustfed_core::corpus::{dialogue_split, markov_corpus};
use trustfed_core::harness::{run_experiment, RoundRecord, SUMMARY_HEADER};
use trustfed_core::metrics::format_table;
use trustfed_core::{ExperimentResult, FederationConfig, StrategyConfig, TokenSequence, TrustEvaluator};

use crate::spec::{ensure_alphas, ExperimentSpec};

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub seed_override: Option<u64>,
    pub out: Option<PathBuf>,
}

/// A finished member run of a command.
pub struct LabeledRun {
    pub label: String,
    pub result: ExperimentResult,
}

pub struct Outcome {
    pub output_dir: PathBuf,
    pub runs: Vec<LabeledRun>,
}

struct Prepared {
    spec: ExperimentSpec,
    output_dir: PathBuf,
    train: Vec<TokenSequence>,
    eval: Vec<(TokenSequence, TokenSequence)>,
    evaluator: TrustEvaluator,
}

fn prepare(spec_path: &Path, opts: &Options) -> anyhow::Result<Prepared> {
    let mut spec = ExperimentSpec::load(spec_path)?;
    if let Some(seed) = opts.seed_override {
        spec.override_seeds(seed);
    }
    let output_dir = opts.out.clone().unwrap_or_else(|| spec.output_dir.clone());
    let corpus = markov_corpus(&spec.corpus)?;
    let (train, eval) = dialogue_split(corpus, spec.eval_pairs)?;
    let evaluator = spec.build_evaluator()?;
    Ok(Prepared {
        spec,
        output_dir,
        train,
        eval,
        evaluator,
    })
}

fn run_members(p: &Prepared, members: Vec<(String, StrategyConfig)>) -> anyhow::Result<Vec<LabeledRun>> {
    members
        .into_par_iter()
        .map(|(label, strategy)| {
            let cfg = FederationConfig {
                strategy,
                ..p.spec.federation.clone()
            };
            let result = run_experiment(&cfg, p.spec.corpus.vocab_size, &p.train, &p.eval, &p.evaluator)
                .with_context(|| format!("run `{label}` failed"))?;
            Ok(LabeledRun { label, result })
        })
        .collect()
}

#[derive(Serialize)]
struct RoundLine<'a> {
    run: &'a str,
    #[serde(flatten)]
    record: &'a RoundRecord,
}

fn write_outputs(p: &Prepared, first_column: &str, runs: &[LabeledRun]) -> anyhow::Result<()> {
    let dir = &p.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;

    let mut rounds = BufWriter::new(fs::File::create(dir.join(ROUNDS_FILE))?);
    for run in runs {
        for record in &run.result.rounds {
            serde_json::to_writer(&mut rounds, &RoundLine { run: &run.label, record })?;
            rounds.write_all(b"\n")?;
        }
    }
    rounds.flush()?;

    let mut csv = csv::Writer::from_path(dir.join(SUMMARY_FILE))?;
    csv.write_record(SUMMARY_HEADER)?;
    let seed = p.spec.federation.seeds.training;
    for run in runs {
        let mut row = run.result.summary_row(seed);
        row[0] = run.label.clone();
        csv.write_record(&row)?;
    }
    csv.flush()?;

    let c = &p.spec.corpus;
    let s = &p.spec.federation.seeds;
    let mut report = format!(
        "experiment: {}\ncorpus: vocab={} sequences={} len={}..={} branching={} seed={}\n\
         federation: clients={} per_round={} rounds={} seeds=data:{} sampling:{} training:{} eval:{}\n\
         scores: sentence-level means, shown x100\n\n",
        p.spec.name,
        c.vocab_size,
        c.n_sequences,
        c.min_len,
        c.max_len,
        c.branching,
        c.seed,
        p.spec.federation.n_clients,
        p.spec.federation.clients_per_round,
        p.spec.federation.rounds,
        s.data,
        s.sampling,
        s.training,
        s.eval,
    );
    let rows: Vec<(String, _)> = runs.iter().map(|r| (r.label.clone(), r.result.metrics.clone())).collect();
    report.push_str(&format_table(first_column, &rows));
    fs::write(dir.join(REPORT_FILE), report)?;
    Ok(())
}

pub fn cmd_run(spec_path: &Path, opts: &Options) -> anyhow::Result<Outcome> {
    let p = prepare(spec_path, opts)?;
    let label = p.spec.federation.strategy.label();
    let runs = run_members(&p, vec![(label, p.spec.federation.strategy.clone())])?;
    write_outputs(&p, "Method", &runs)?;
    Ok(Outcome {
        output_dir: p.output_dir,
        runs,
    })
}

/// Local-only, FedAvg, FedProx and FedDTRE under shared seeds.
pub fn cmd_compare(spec_path: &Path, opts: &Options) -> anyhow::Result<Outcome> {
    let p = prepare(spec_path, opts)?;
    let members = vec![
        StrategyConfig::LocalOnly,
        StrategyConfig::FedAvg,
        StrategyConfig::FedProx {
            mu: p.spec.compare.fedprox_mu,
        },
        StrategyConfig::FedDtre(p.spec.adaptive_schedule()),
    ]
    .into_iter()
    .map(|s| (s.label(), s))
    .collect();
    let runs = run_members(&p, members)?;
    write_outputs(&p, "Method", &runs)?;
    Ok(Outcome {
        output_dir: p.output_dir,
        runs,
    })
}

/// One fixed-alpha run per value, plus the adaptive run, under shared seeds.
pub fn cmd_ablate(spec_path: &Path, alphas: &[f64], opts: &Options) -> anyhow::Result<Outcome> {
    ensure_alphas(alphas)?;
    let p = prepare(spec_path, opts)?;
    let mut members: Vec<(String, StrategyConfig)> = alphas
        .iter()
        .map(|&alpha| (format!("alpha = {alpha}"), StrategyConfig::FixedAlpha { alpha }))
        .collect();
    members.push(("dynamic".to_string(), StrategyConfig::FedDtre(p.spec.adaptive_schedule())));
    let runs = run_members(&p, members)?;
    write_outputs(&p, "Fixed alpha", &runs)?;
    Ok(Outcome {
        output_dir: p.output_dir,
        runs,
    })
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cedar_core::evaluation::{self, PredictionRecord};
use cedar_core::fixture::{generate_fixture, write_fixture, FixtureSpec};
use cedar_core::pipeline::{self, PipelineConfig, Predictor, Stage};
use cedar_core::{io, Corpus, Error};

#[derive(Parser)]
#[command(name = "cedar", version, about = "Event detection over a large type ontology")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct StageArgs {
    /// Pipeline configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override one configuration key, e.g. `--set ranker.top_k=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    stage: Option<StageArgs>,
    /// Score a prediction file against a gold corpus without a pipeline.
    #[arg(long, requires = "pred", conflicts_with = "config")]
    gold: Option<PathBuf>,
    #[arg(long, requires = "gold")]
    pred: Option<PathBuf>,
    /// Cutoffs for Hit@K [default: 1,2,5,10,20,50].
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
}

#[derive(Args)]
struct SelfLabelArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Minimum confidence margin for a pseudo-label.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Args)]
struct ErrorAnalysisArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Prefer child/parent/sibling over extended_roleset when both apply.
    #[arg(long)]
    prioritize_hierarchy: bool,
}

#[derive(Args)]
struct PredictTiArgs {
    #[command(flatten)]
    infer: InferArgs,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_span_len: Option<usize>,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    infer: InferArgs,
    /// Number of ranked types per sentence [default: ranker.report_k].
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Args, Clone)]
struct InferArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// One sentence per line: plain text, or `{"sent_id", "tokens"}` JSON.
    #[arg(long)]
    input: PathBuf,
    /// Write JSON lines here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Clean, filter, attach candidates and split.
    BuildData(StageArgs),
    /// Train the trigger identifier.
    TrainTi(StageArgs),
    /// Train the type ranker.
    TrainRank(StageArgs),
    /// Encode every type description with the trained ranker.
    BuildIndex(StageArgs),
    /// Train the classifier on clean mentions.
    TrainClsBase(StageArgs),
    /// Assign pseudo-labels to partially labeled mentions.
    SelfLabel(SelfLabelArgs),
    /// Retrain the classifier on clean plus pseudo-labeled mentions.
    TrainClsFinal(StageArgs),
    /// Predict events on the dev and test splits.
    Predict(StageArgs),
    /// Score predictions, from a pipeline run or from explicit files.
    Evaluate(EvaluateArgs),
    /// Categorize classification errors.
    ErrorAnalysis(ErrorAnalysisArgs),
    /// Run every stage in order.
    RunAll(StageArgs),
    /// Print the resolved configuration.
    ShowConfig(StageArgs),
    /// Decode triggers in raw sentences.
    PredictTi(PredictTiArgs),
    /// Rank types for raw sentences.
    Rank(RankArgs),
    /// Full inference on raw sentences.
    Classify(InferArgs),
    /// Write a synthetic ontology and corpus with planted type vocabulary.
    GenerateFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        num_types: usize,
        #[arg(long, default_value_t = 50)]
        sentences_per_type: usize,
        #[arg(long, default_value_t = 0.3)]
        noise_rate: f64,
        /// Fraction of noisy mentions whose trigger comes from another candidate type.
        #[arg(long, default_value_t = 0.3)]
        ambiguity_rate: f64,
        /// Types that only ever appear with several candidate types.
        #[arg(long, default_value_t = 4)]
        noisy_only_types: usize,
        #[arg(long, default_value_t = 13)]
        seed: u64,
    },
}

fn load_config(args: &StageArgs) -> anyhow::Result<PipelineConfig> {
    let overrides = args
        .overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Argument(format!("`--set {kv}` is not KEY=VALUE")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PipelineConfig::load(&args.config, &overrides)?)
}

/// `args` with `key=value` appended for every flag that was given.
fn with_flags(args: &StageArgs, flags: &[(&str, Option<String>)]) -> StageArgs {
    let mut out = args.clone();
    for (key, value) in flags {
        if let Some(v) = value {
            out.overrides.push(format!("{key}={v}"));
        }
    }
    out
}

fn stage(args: &StageArgs, st: Stage) -> anyhow::Result<serde_json::Value> {
    let cfg = load_config(args)?;
    Ok(serde_json::to_value(pipeline::run_stage(&cfg, st)?)?)
}

#[derive(Deserialize)]
struct InputLine {
    sent_id: String,
    tokens: Vec<String>,
}

fn read_sentences(path: &Path) -> anyhow::Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('{') {
            let l: InputLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                location: format!("{}:{}", path.display(), i + 1),
                message: e.to_string(),
            })?;
            out.push((l.sent_id, l.tokens));
        } else {
            out.push((
                format!("line{}", i + 1),
                line.split_whitespace().map(str::to_string).collect(),
            ));
        }
    }
    Ok(out)
}

fn emit<T: Serialize>(records: &[T], output: Option<&Path>) -> anyhow::Result<()> {
    match output {
        Some(p) => io::write_jsonl(p, records)?,
        None => {
            let mut out = std::io::stdout().lock();
            for r in records {
                serde_json::to_writer(&mut out, r)?;
                writeln!(out)?;
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SpanLine {
    start: usize,
    end: usize,
    prob: f64,
}

#[derive(Serialize)]
struct TriggerLine {
    sent_id: String,
    spans: Vec<SpanLine>,
}

#[derive(Serialize)]
struct RankLine {
    sent_id: String,
    topk: Vec<cedar_core::RankedType>,
}

enum Infer {
    Triggers,
    Rank(Option<usize>),
    Classify,
}

fn infer(args: &InferArgs, what: Infer) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.stage)?;
    if let Infer::Rank(Some(k)) = what {
        cfg.ranker.report_k = k.max(cfg.ranker.top_k);
    }
    let predictor = Predictor::load(&cfg)?;
    let sentences = read_sentences(&args.input)?;
    let out = args.output.as_deref();
    match what {
        Infer::Triggers => {
            let lines = sentences
                .iter()
                .map(|(id, t)| {
                    let spans = predictor.triggers(t)?;
                    let spans = spans
                        .iter()
                        .map(|s| SpanLine {
                            start: s.span.start,
                            end: s.span.end,
                            prob: s.probability,
                        })
                        .collect();
                    Ok(TriggerLine {
                        sent_id: id.clone(),
                        spans,
                    })
                })
                .collect::<cedar_core::Result<Vec<_>>>()?;
            emit(&lines, out)
        }
        Infer::Rank(k) => {
            let lines = sentences
                .iter()
                .map(|(id, t)| {
                    let mut topk = predictor.rank(t)?;
                    topk.truncate(k.unwrap_or(usize::MAX));
                    Ok(RankLine {
                        sent_id: id.clone(),
                        topk,
                    })
                })
                .collect::<cedar_core::Result<Vec<_>>>()?;
            emit(&lines, out)
        }
        Infer::Classify => emit(&pipeline::predict_end_to_end(&predictor, &sentences)?, out),
    }
}

fn evaluate(args: &EvaluateArgs) -> anyhow::Result<serde_json::Value> {
    match (&args.stage, &args.gold, &args.pred) {
        (_, Some(gold), Some(pred)) => {
            let gold = Corpus::load(gold)?;
            let preds: Vec<PredictionRecord> = io::read_jsonl(pred)?;
            let ks = args.ks.clone().unwrap_or_else(|| evaluation::DEFAULT_KS.to_vec());
            let report = evaluation::evaluate(&preds, &evaluation::gold_mentions(&gold), &ks);
            Ok(serde_json::to_value(report)?)
        }
        (Some(stage_args), None, None) => {
            let ks = args.ks.as_ref().map(|ks| {
                let list: Vec<String> = ks.iter().map(usize::to_string).collect();
                format!("[{}]", list.join(", "))
            });
            stage(&with_flags(stage_args, &[("evaluation.ks", ks)]), Stage::Evaluate)
        }
        _ => Err(anyhow!(Error::Argument(
            "evaluate needs --config or --gold with --pred".into()
        ))),
    }
}

fn run(cli: Cli) -> anyhow::Result<Option<serde_json::Value>> {
    let value = match &cli.cmd {
        Cmd::BuildData(a) => stage(a, Stage::BuildData)?,
        Cmd::TrainTi(a) => stage(a, Stage::TrainTi)?,
        Cmd::TrainRank(a) => stage(a, Stage::TrainRank)?,
        Cmd::BuildIndex(a) => stage(a, Stage::BuildIndex)?,
        Cmd::TrainClsBase(a) => stage(a, Stage::TrainClsBase)?,
        Cmd::SelfLabel(a) => {
            let flags = [
                (
                    "self_label.confidence_margin_threshold",
                    a.threshold.map(|t| format!("{t:?}")),
                ),
                ("self_label.rounds", a.rounds.map(|r| r.to_string())),
            ];
            stage(&with_flags(&a.stage, &flags), Stage::SelfLabel)?
        }
        Cmd::TrainClsFinal(a) => stage(a, Stage::TrainClsFinal)?,
        Cmd::Predict(a) => stage(a, Stage::Predict)?,
        Cmd::Evaluate(a) => evaluate(a)?,
        Cmd::ErrorAnalysis(a) => {
            let flag = a.prioritize_hierarchy.then(|| "true".to_string());
            stage(
                &with_flags(&a.stage, &[("evaluation.prioritize_hierarchy", flag)]),
                Stage::ErrorAnalysis,
            )?
        }
        Cmd::RunAll(a) => serde_json::to_value(pipeline::run_all(&load_config(a)?)?)?,
        Cmd::ShowConfig(a) => {
            print!("{}", load_config(a)?.to_toml()?);
            return Ok(None);
        }
        Cmd::PredictTi(a) => {
            let flags = [
                ("trigger.threshold", a.threshold.map(|t| format!("{t:?}"))),
                ("trigger.max_span_len", a.max_span_len.map(|n| n.to_string())),
            ];
            let args = InferArgs {
                stage: with_flags(&a.infer.stage, &flags),
                ..a.infer.clone()
            };
            infer(&args, Infer::Triggers)?;
            return Ok(None);
        }
        Cmd::Rank(a) => {
            infer(&a.infer, Infer::Rank(a.topk))?;
            return Ok(None);
        }
        Cmd::Classify(a) => {
            infer(a, Infer::Classify)?;
            return Ok(None);
        }
        Cmd::GenerateFixture {
            out,
            num_types,
            sentences_per_type,
            noise_rate,
            ambiguity_rate,
            noisy_only_types,
            seed,
        } => {
            let spec = FixtureSpec {
                num_types: *num_types,
                sentences_per_type: *sentences_per_type,
                noise_rate: *noise_rate,
                ambiguity_rate: *ambiguity_rate,
                noisy_only_types: *noisy_only_types,
                seed: *seed,
                ..FixtureSpec::default()
            };
            let fx = generate_fixture(&spec)?;
            write_fixture(&fx, out)?;
            serde_json::json!({
                "types": fx.ontology.num_types(),
                "sentences": fx.corpus.sentences.len(),
                "mentions": fx.corpus.num_mentions(),
                "noisy": fx.truth.iter().filter(|t| t.noisy).count(),
            })
        }
    };
    Ok(Some(value))
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let kind = err.downcast_ref::<Error>().map_or("internal", Error::kind);
    let mut v = serde_json::json!({ "error": kind, "message": format!("{err:#}") });
    if let Some(Error::Dependency { stage, missing }) = err.downcast_ref::<Error>() {
        v["stage"] = stage.clone().into();
        v["missing"] = missing.clone().into();
    }
    v
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(Some(v)) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value serializes"));
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}

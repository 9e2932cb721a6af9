use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use lora_override::adapter::{
    interpolate, layer_scores, select_top_layers, AdapterTransform, BoostTarget, LayerSelection,
};
use lora_override::adapter_io::{load_adapter, save_adapter};
use lora_override::bench::{
    build_report, evaluate_results, load_questions, save_questions, ConflictQuestion, Dimension,
    EvalOptions, Method,
};
use lora_override::desk::{build_scenario, DeskSpec, ScenarioSpec};
use lora_override::gate::{gate_decide, load_acronyms, load_stopwords, GateConfig, GatePolicy};
use lora_override::margin::{
    confusion_matrix, dose_response, fit_logistic, linear_fit_rss, measure_margins,
    min_beta_search, write_margin_csv, DEFAULT_BETA_GRID,
};
use lora_override::provider::{
    AdapterPlan, DeskProvider, GenerationRequest, HttpProvider, Provider, TokenAggregation,
};
use lora_override::router::{
    load_markers, probe_metrics, probe_uncertain, ProbeConfig, ProbeMode, ProbeObservation,
};
use lora_override::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "lora-override",
    version,
    about = "Adapter boosting and knowledge-override experiments"
)]
struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON run configuration; its settings win over the equivalent flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
enum Command {
    /// Boost, zero or interpolate an adapter directory.
    Boost(BoostArgs),
    /// Layer importance table.
    ScoreLayers(ScoreArgs),
    /// Run a method over a question set.
    Eval(EvalArgs),
    /// Dose-response over a beta grid with a logistic fit.
    Sweep(SweepArgs),
    /// Smallest boosting beta that yields the document answer, per question.
    MinBeta(MinBetaArgs),
    /// Prior and adapter margins per conflict question.
    Margins(MarginArgs),
    /// Relevance-gate decisions over a question file.
    Gate(GateArgs),
    /// Conflict-aware probe metrics.
    Probe(ProbeArgs),
    /// Build or query desk fixtures.
    #[command(subcommand)]
    Desk(DeskCommand),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum BoostMode {
    Selective,
    Global,
    Zero,
    Interpolate,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SelectArg {
    Top,
    Bottom,
    Random,
}

#[derive(Args, Debug, Serialize)]
struct BoostArgs {
    #[arg(long)]
    adapter: PathBuf,
    #[arg(long, value_enum, default_value = "selective")]
    mode: BoostMode,
    #[arg(long, default_value_t = 25.0)]
    k: f64,
    #[arg(long, default_value_t = 1.75)]
    beta: f64,
    #[arg(long, default_value = "a")]
    target: BoostTarget,
    #[arg(long, value_enum, default_value = "top")]
    select: SelectArg,
    /// Comma-separated layer ids for `--mode zero`.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    /// Second adapter for `--mode interpolate`.
    #[arg(long)]
    other: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    t: f64,
}

#[derive(Args, Debug, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    adapter: PathBuf,
    #[arg(long, default_value_t = 25.0)]
    k: f64,
}

/// Where generations come from.
#[derive(Args, Debug, Serialize)]
struct ProviderArgs {
    /// Desk fixture JSON.
    #[arg(long, conflicts_with = "endpoint")]
    desk: Option<PathBuf>,
    /// HTTP generation endpoint base URL.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    #[arg(long)]
    endpoint_logprobs: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum MethodArg {
    Base,
    Baseline,
    Slb,
    Global,
    Ca,
    RgCa,
    Gated,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long)]
    questions: PathBuf,
    #[arg(long, value_enum, default_value = "baseline")]
    method: MethodArg,
    #[arg(long, default_value_t = 25.0)]
    k: f64,
    #[arg(long, default_value_t = 1.75)]
    beta: f64,
    #[arg(long, default_value = "a")]
    target: BoostTarget,
    #[command(flatten)]
    gate: GateFlags,
    #[command(flatten)]
    probe: ProbeFlags,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    /// Worker threads; 0 picks automatically.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Exclude failed generations from accuracy denominators.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args, Debug, Serialize)]
struct GateFlags {
    #[arg(long, default_value = "strict4")]
    policy: GatePolicy,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long)]
    acronyms: Option<PathBuf>,
    /// Pass probability for the random policy.
    #[arg(long, default_value_t = 0.5)]
    gate_p: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ProbeModeArg {
    Lexical,
    MaxProb,
}

#[derive(Args, Debug, Serialize)]
struct ProbeFlags {
    #[arg(long, value_enum, default_value = "lexical")]
    probe_mode: ProbeModeArg,
    #[arg(long, default_value_t = 0.35)]
    threshold: f64,
    /// Marker phrases, one per line.
    #[arg(long)]
    markers: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long)]
    questions: PathBuf,
    /// `start:stop:step`, inclusive.
    #[arg(long, default_value = "1.0:3.0:0.25")]
    grid: String,
    #[arg(long, default_value_t = 25.0)]
    k: f64,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
}

#[derive(Args, Debug, Serialize)]
struct MinBetaArgs {
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long)]
    questions: PathBuf,
    /// Comma-separated ascending betas.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 25.0)]
    k: f64,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
}

#[derive(Args, Debug, Serialize)]
struct MarginArgs {
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long)]
    questions: PathBuf,
    #[arg(long, default_value_t = 25.0)]
    k: f64,
    /// 1.0 measures the unmodified adapter.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long)]
    mean_over_tokens: bool,
}

#[derive(Args, Debug, Serialize)]
struct GateArgs {
    /// Question file (JSON lines); each prompt is gated against its document.
    #[arg(long)]
    queries: PathBuf,
    #[command(flatten)]
    gate: GateFlags,
}

#[derive(Args, Debug, Serialize)]
struct ProbeArgs {
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long)]
    questions: PathBuf,
    #[command(flatten)]
    probe: ProbeFlags,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case", tag = "action")]
enum DeskCommand {
    /// Write a desk fixture and its question set.
    Build(DeskBuildArgs),
    /// Generate from a desk fixture.
    Run(DeskRunArgs),
}

#[derive(Args, Debug, Serialize)]
struct DeskBuildArgs {
    #[arg(long, default_value_t = 40)]
    conflicts: usize,
    #[arg(long, default_value_t = 10)]
    novel: usize,
    #[arg(long, default_value_t = 0)]
    retention: usize,
    /// Comma-separated log10 prior frequencies, cycled over conflicts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    freqs: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    phrasings: usize,
}

#[derive(Args, Debug, Serialize)]
struct DeskRunArgs {
    #[arg(long)]
    desk: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Document to internalize into an adapter.
    #[arg(long)]
    document: Option<String>,
    #[arg(long, default_value_t = 25.0)]
    k: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1)]
    max_tokens: usize,
}

/// Structured settings read from `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    seed: Option<u64>,
    method: Option<Method>,
    options: Option<EvalOptions>,
    gate: Option<GateConfig>,
    probe: Option<ProbeConfig>,
    scenario: Option<ScenarioSpec>,
    grid: Option<Vec<f64>>,
}

struct Ctx {
    seed: u64,
    out: PathBuf,
    config: RunConfig,
    /// Echoed into reports; excludes the output path so reruns elsewhere match.
    snapshot: serde_json::Value,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n")
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn make_provider(args: &ProviderArgs) -> Result<Box<dyn Provider>> {
    match (&args.desk, &args.endpoint) {
        (Some(desk), None) => {
            let spec = DeskSpec::load(desk)?;
            let model = spec.build()?;
            Ok(Box::new(DeskProvider::new(model, spec.adapter_profile)))
        }
        (None, Some(url)) => Ok(Box::new(
            HttpProvider::with_timeout(
                url.clone(),
                std::time::Duration::from_secs(args.timeout_secs),
            )
            .with_logprobs(args.endpoint_logprobs),
        )),
        _ => Err(Error::InvalidParameter(
            "give exactly one of --desk or --endpoint".into(),
        )),
    }
}

fn load_nonempty_questions(path: &Path) -> Result<Vec<ConflictQuestion>> {
    let questions = load_questions(path)?;
    if questions.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no questions in {}",
            path.display()
        )));
    }
    Ok(questions)
}

fn gate_config(flags: &GateFlags, ctx: &Ctx) -> Result<GateConfig> {
    if let Some(cfg) = &ctx.config.gate {
        return Ok(cfg.clone());
    }
    let mut cfg = GateConfig::for_policy(flags.policy);
    if let Some(path) = &flags.stopwords {
        cfg.stopwords = load_stopwords(path)?;
    }
    if let Some(path) = &flags.acronyms {
        cfg.acronym_map = load_acronyms(path)?;
    }
    cfg.random_p = flags.gate_p;
    cfg.seed = ctx.seed;
    Ok(cfg)
}

fn probe_config(flags: &ProbeFlags, ctx: &Ctx) -> Result<ProbeConfig> {
    if let Some(cfg) = &ctx.config.probe {
        return Ok(cfg.clone());
    }
    let mut cfg = match flags.probe_mode {
        ProbeModeArg::Lexical => ProbeConfig::default(),
        ProbeModeArg::MaxProb => ProbeConfig::max_prob(flags.threshold),
    };
    if let Some(path) = &flags.markers {
        cfg.markers = load_markers(path)?;
    }
    Ok(cfg)
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidParameter(format!("grid `{spec}` is not start:stop:step"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0) || stop < start {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    // rounded to 1e-9 so 1.0:3.0:0.1 prints as written
    Ok((0..=n)
        .map(|i| ((start + step * i as f64) * 1e9).round() / 1e9)
        .collect())
}

fn run_boost(args: &BoostArgs, ctx: &Ctx) -> Result<serde_json::Value> {
    let adapter = load_adapter(&args.adapter)?;
    let selection = match args.select {
        SelectArg::Top => LayerSelection::Top,
        SelectArg::Bottom => LayerSelection::Bottom,
        SelectArg::Random => LayerSelection::Random { seed: ctx.seed },
    };
    let out = match args.mode {
        BoostMode::Selective => AdapterTransform::Boost {
            k: args.k,
            beta: args.beta,
            target: args.target,
            selection,
        }
        .apply(&adapter)?,
        BoostMode::Global => AdapterTransform::Global {
            beta: args.beta,
            target: args.target,
        }
        .apply(&adapter)?,
        BoostMode::Zero => AdapterTransform::Zero {
            layers: args.layers.iter().copied().collect(),
        }
        .apply(&adapter)?,
        BoostMode::Interpolate => {
            let other = args.other.as_ref().ok_or_else(|| {
                Error::InvalidParameter("--mode interpolate needs --other".into())
            })?;
            interpolate(&adapter, &load_adapter(other)?, args.t)?
        }
    };
    save_adapter(&out, &ctx.out)?;
    Ok(json!({ "layers": out.layer_ids().collect::<Vec<_>>() }))
}

fn run_score(args: &ScoreArgs, ctx: &Ctx) -> Result<serde_json::Value> {
    let adapter = load_adapter(&args.adapter)?;
    let scores = layer_scores(&adapter);
    let top = select_top_layers(&scores, args.k)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer_id", "a_norm", "b_norm", "score", "selected"])?;
    for s in &scores {
        let layer = adapter.layer(s.layer_id)?;
        w.write_record([
            s.layer_id.to_string(),
            layer.a_matrix.frobenius_norm().to_string(),
            layer.b_matrix.frobenius_norm().to_string(),
            s.score.to_string(),
            top.contains(&s.layer_id).to_string(),
        ])?;
    }
    ctx.write("layer_scores.csv", csv_bytes(w)?)?;
    Ok(json!({ "selected": top }))
}

fn csv_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner()
        .map_err(|e| Error::InvalidParameter(e.to_string()))
}

fn eval_method(args: &EvalArgs, ctx: &Ctx) -> Result<Method> {
    if let Some(m) = &ctx.config.method {
        return Ok(m.clone());
    }
    Ok(match args.method {
        MethodArg::Base => Method::Base,
        MethodArg::Baseline => Method::Baseline,
        MethodArg::Slb => Method::Slb {
            k: args.k,
            beta: args.beta,
            target: args.target,
            selection: LayerSelection::Top,
        },
        MethodArg::Global => Method::Global {
            beta: args.beta,
            target: args.target,
        },
        MethodArg::Ca => Method::ca(probe_config(&args.probe, ctx)?),
        MethodArg::RgCa => Method::rg_ca(
            gate_config(&args.gate, ctx)?,
            probe_config(&args.probe, ctx)?,
        ),
        MethodArg::Gated => Method::Gated {
            gate: gate_config(&args.gate, ctx)?,
            transform: AdapterTransform::Identity,
        },
    })
}

fn run_eval(args: &EvalArgs, ctx: &Ctx) -> Result<serde_json::Value> {
    let questions = load_nonempty_questions(&args.questions)?;
    let provider = make_provider(&args.provider)?;
    let method = eval_method(args, ctx)?;
    let options = ctx.config.options.clone().unwrap_or(EvalOptions {
        max_tokens: args.max_tokens,
        seed: ctx.seed,
        jobs: args.jobs,
        strict: !args.lenient,
        ..EvalOptions::default()
    });
    let results = evaluate_results(&method, &questions, provider.as_ref(), &options)?;
    let report = build_report(&method, &options, Some(ctx.snapshot.clone()), results)?;
    ctx.write("report.json", report.to_json()?)?;
    let mut csv_buf = Vec::new();
    report.write_csv(&mut csv_buf)?;
    ctx.write("results.csv", csv_buf)?;
    Ok(json!({ "accuracy": report.group("all").and_then(|g| g.accuracy) }))
}

fn run_sweep(args: &SweepArgs, ctx: &Ctx) -> Result<serde_json::Value> {
    let questions = load_nonempty_questions(&args.questions)?;
    let provider = make_provider(&args.provider)?;
    let grid = match &ctx.config.grid {
        Some(g) => g.clone(),
        None => parse_grid(&args.grid)?,
    };
    let points = dose_response(
        provider.as_ref(),
        &questions,
        &grid,
        args.k,
        args.max_tokens,
    )?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["beta", "conflict_accuracy", "novel_accuracy"])?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in &points {
        w.write_record([
            p.beta.to_string(),
            cell(p.conflict_accuracy),
            cell(p.novel_accuracy),
        ])?;
    }
    ctx.write("sweep.csv", csv_bytes(w)?)?;
    let xy: Vec<(f64, f64)> = points
        .iter()
        .filter_map(|p| p.conflict_accuracy.map(|a| (p.beta, a)))
        .collect();
    let fit = if xy.len() >= 4 {
        Some(json!({
            "logistic": fit_logistic(&xy)?,
            "linear_rss": linear_fit_rss(&xy)?,
        }))
    } else {
        None
    };
    ctx.write_json("logistic.json", &fit)?;
    Ok(json!({ "points": points.len() }))
}

fn run_min_beta(args: &MinBetaArgs, ctx: &Ctx) -> Result<serde_json::Value> {
    let questions = load_nonempty_questions(&args.questions)?;
    let provider = make_provider(&args.provider)?;
    let grid = match (&ctx.config.grid, args.grid.is_empty()) {
        (Some(g), _) => g.clone(),
        (None, false) => args.grid.clone(),
        (None, true) => DEFAULT_BETA_GRID.to_vec(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["question_id", "tier", "min_beta"])?;
    let mut found = 0;
    let conflicts: Vec<&ConflictQuestion> = questions.iter().filter(|q| q.is_conflict()).collect();
    for q in &conflicts {
        let beta = min_beta_search(provider.as_ref(), q, &grid, args.k, args.max_tokens)?;
        found += usize::from(beta.is_some());
        w.write_record([
            q.id.clone(),
            q.tier.map(|t| t.to_string()).unwrap_or_default(),
            beta.map(|b| b.to_string()).unwrap_or_default(),
        ])?;
    }
    ctx.write("min_beta.csv", csv_bytes(w)?)?;
    Ok(json!({ "questions": conflicts.len(), "resolved": found }))
}

fn run_margins(args: &MarginArgs, ctx: &Ctx) -> Result<serde_json::Value> {
    let questions = load_nonempty_questions(&args.questions)?;
    let provider = make_provider(&args.provider)?;
    let transform = if args.beta == 1.0 {
        AdapterTransform::Identity
    } else {
        AdapterTransform::selective(args.k, args.beta)
    };
    let aggregation = if args.mean_over_tokens {
        TokenAggregation::MeanOverTokens
    } else {
        TokenAggregation::FirstToken
    };
    let records = questions
        .iter()
        .filter(|q| q.is_conflict())
        .map(|q| measure_margins(provider.as_ref(), q, &transform, aggregation))
        .collect::<Result<Vec<_>>>()?;
    let mut buf = Vec::new();
    write_margin_csv(&mut buf, &records)?;
    ctx.write("margins.csv", buf)?;
    let confusion = confusion_matrix(&records);
    ctx.write_json("confusion.json", &confusion)?;
    Ok(serde_json::to_value(confusion)?)
}

fn run_gate(args: &GateArgs, ctx: &Ctx) -> Result<serde_json::Value> {
    let questions = load_nonempty_questions(&args.queries)?;
    let cfg = gate_config(&args.gate, ctx)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["question_id", "pass", "shared_tokens"])?;
    let mut passed = 0;
    for q in &questions {
        let d = gate_decide(&q.prompt, &q.document, q.relevant, &cfg)?;
        passed += usize::from(d.pass);
        w.write_record([q.id.clone(), d.pass.to_string(), d.shared_tokens.join(" ")])?;
    }
    ctx.write("gate.csv", csv_bytes(w)?)?;
    Ok(json!({ "policy": cfg.policy, "passed": passed, "total": questions.len() }))
}

fn run_probe(args: &ProbeArgs, ctx: &Ctx) -> Result<serde_json::Value> {
    let questions = load_nonempty_questions(&args.questions)?;
    let provider = make_provider(&args.provider)?;
    let cfg = probe_config(&args.probe, ctx)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "question_id",
        "needs_boost",
        "strong",
        "max_prob",
        "probe_answer",
    ])?;
    let mut observations = Vec::new();
    for q in &questions {
        let outcome = probe_uncertain(provider.as_ref(), &q.prompt, &cfg).map_err(|source| {
            Error::Provider {
                question: q.id.clone(),
                source,
            }
        })?;
        let needs_boost = q.dimension == Dimension::C;
        let score = match (cfg.mode, outcome.max_prob) {
            (ProbeMode::MaxProb, Some(p)) | (ProbeMode::Lexical, Some(p)) => p,
            (_, None) => f64::from(u8::from(!outcome.uncertain)),
        };
        w.write_record([
            q.id.clone(),
            needs_boost.to_string(),
            (!outcome.uncertain).to_string(),
            outcome.max_prob.map(|p| p.to_string()).unwrap_or_default(),
            outcome.answer.clone(),
        ])?;
        observations.push(ProbeObservation {
            strong: !outcome.uncertain,
            needs_boost,
            score,
        });
    }
    ctx.write("probe.csv", csv_bytes(w)?)?;
    let metrics = probe_metrics(&observations);
    ctx.write_json("probe.json", &metrics)?;
    Ok(serde_json::to_value(metrics)?)
}

fn run_desk(cmd: &DeskCommand, ctx: &Ctx) -> Result<serde_json::Value> {
    match cmd {
        DeskCommand::Build(args) => {
            let spec = ctx.config.scenario.clone().unwrap_or_else(|| ScenarioSpec {
                n_retention: args.retention,
                phrasings: args.phrasings,
                ..ScenarioSpec::standard(args.conflicts, args.novel, args.freqs.clone(), ctx.seed)
            });
            let (desk, questions) = build_scenario(&spec)?;
            desk.save(&ctx.path("desk.json"))?;
            save_questions(&ctx.path("questions.jsonl"), &questions)?;
            Ok(json!({ "questions": questions.len(), "vocab": desk.config.vocab.len() }))
        }
        DeskCommand::Run(args) => {
            let spec = DeskSpec::load(&args.desk)?;
            let provider = DeskProvider::new(spec.build()?, spec.adapter_profile)
                .with_answer_budget(args.max_tokens);
            let plan = args.document.as_ref().map(|doc| AdapterPlan {
                document_id: "cli".into(),
                document: doc.clone(),
                transform: if args.beta == 1.0 {
                    AdapterTransform::Identity
                } else {
                    AdapterTransform::selective(args.k, args.beta)
                },
            });
            let mut request = GenerationRequest::greedy(&args.prompt, args.max_tokens);
            request.seed = ctx.seed;
            request.want_logprobs = true;
            let response = provider
                .generate(&request, plan.as_ref())
                .map_err(|source| Error::Provider {
                    question: args.prompt.clone(),
                    source,
                })?;
            ctx.write_json("generation.json", &response)?;
            Ok(serde_json::to_value(response)?)
        }
    }
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let config = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    let seed = config.seed.unwrap_or(cli.seed);
    let snapshot = json!({
        "seed": seed,
        "invocation": serde_json::to_value(&cli.command)?,
        "config": serde_json::to_value(&config)?,
    });
    fs::create_dir_all(&cli.out).map_err(|e| io_err(&cli.out, e))?;
    let ctx = Ctx {
        seed,
        out: cli.out.clone(),
        config,
        snapshot,
    };
    ctx.write_json("config.json", &ctx.snapshot)?;
    match &cli.command {
        Command::Boost(a) => run_boost(a, &ctx),
        Command::ScoreLayers(a) => run_score(a, &ctx),
        Command::Eval(a) => run_eval(a, &ctx),
        Command::Sweep(a) => run_sweep(a, &ctx),
        Command::MinBeta(a) => run_min_beta(a, &ctx),
        Command::Margins(a) => run_margins(a, &ctx),
        Command::Gate(a) => run_gate(a, &ctx),
        Command::Probe(a) => run_probe(a, &ctx),
        Command::Desk(c) => run_desk(c, &ctx),
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string()),
    }
}

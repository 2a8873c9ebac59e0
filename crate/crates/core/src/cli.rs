//! Command-line front end.
//!
//! Every setting lives in one flat [`PipelineConfig`]. Values come from the
//! defaults, then an optional JSON file given as `--config=FILE`, then
//! `--key=value` (or `--key value`) arguments. Artifacts are read from and
//! written to the output directory, which defaults to `$MOE_COMPRESS_OUT`
//! or `./moe-out`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::allocator::{allocate_model, AllocationParams, BitAllocation, Strategy};
use crate::error::{arg_err, Error, Result};
use crate::harness::{
    activation_accounting, emit_report, evaluate, protection_sweep, random_corpus, read_corpus,
    sample_corpus, size_accounting, write_corpus, BitsRow, Corpus, RunReport,
};
use crate::model::{ModelConfig, MoEModel};
use crate::numerics::SeededRng;
use crate::profiler::{collect_all, EpsTarget, ExpertStats, ProfileOptions};
use crate::pruner::{calibrate_mu, PruneMode, PruningPolicy, ProtectionScope};
use crate::quantizer::{quantize_model, QuantMode, QuantSpec, QuantizeOptions, QuantizedModel};

pub const OUT_DIR_ENV: &str = "MOE_COMPRESS_OUT";

pub const MODEL_FILE: &str = "model.mckp";
pub const CALIB_FILE: &str = "calib.txt";
pub const EVAL_FILE: &str = "eval.txt";
pub const STATS_FILE: &str = "stats.json";
pub const ALLOCATION_FILE: &str = "allocation.json";
pub const POLICY_FILE: &str = "policy.json";
pub const CONTAINER_FILE: &str = "model.mcqz";

#[derive(Parser, Debug)]
#[command(
    name = "moe-compress",
    about = "Mixed-precision quantization and dynamic pruning for MoE models",
    after_help = "Settings are given as --key=value, e.g. --k=2.5 --strategy=frequency --threads=4.\n\
                  --config=FILE loads a flat JSON object of the same keys first."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic model plus calibration and evaluation corpora.
    GenModel(Rest),
    /// Measure routing statistics and per-expert quantization error.
    Profile(Rest),
    /// Solve the per-layer bit allocation.
    Allocate(Rest),
    /// Quantize the model with the allocated widths.
    Quantize(Rest),
    /// Evaluate the quantized model with the configured pruning policy.
    Eval(Rest),
    /// Run every stage in order.
    Pipeline(Rest),
}

#[derive(clap::Args, Debug)]
struct Rest {
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    settings: Vec<String>,
}

/// Where calibration and evaluation text comes from when none is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// Sampled from the full-precision model.
    Sampled,
    /// Uniform random token ids.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out: Option<PathBuf>,
    /// Existing checkpoint; when unset the synthetic model in `out` is used.
    pub model: Option<PathBuf>,
    pub seed: u64,
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub intermediate: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub vocab: usize,

    pub calib: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub corpus_source: CorpusSource,
    pub temperature: f64,
    pub calib_seqs: usize,
    pub calib_len: usize,
    pub eval_seqs: usize,
    pub eval_len: usize,

    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub strategy: Strategy,
    pub floors: bool,
    pub eps_target: EpsTarget,

    pub quant_mode: QuantMode,
    pub group_size: usize,
    pub block_size: usize,
    pub damp: f64,
    pub non_expert_bits: u8,

    pub policy: PruneMode,
    pub p: f64,
    pub full_drop_ratio: f64,
    pub scope: ProtectionScope,
    pub protection_sweep: Vec<f64>,
    /// Extra expert bit targets evaluated by `pipeline` for the bits curve.
    pub bits_sweep: Vec<f64>,

    pub threads: Option<usize>,
    pub force: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let spec = QuantSpec::default();
        let alloc = AllocationParams::default();
        Self {
            out: None,
            model: None,
            seed: 0,
            n_layers: 4,
            hidden: 64,
            n_heads: 4,
            intermediate: 128,
            n_experts: 8,
            top_k: 2,
            vocab: 256,
            calib: None,
            eval: None,
            corpus_source: CorpusSource::Sampled,
            temperature: 1.0,
            calib_seqs: 32,
            calib_len: 128,
            eval_seqs: 16,
            eval_len: 128,
            k: alloc.k,
            alpha: alloc.alpha,
            beta: alloc.beta,
            gamma: alloc.gamma,
            strategy: alloc.strategy,
            floors: alloc.floors,
            eps_target: EpsTarget::FinalHidden,
            quant_mode: spec.mode,
            group_size: spec.group_size,
            block_size: spec.block_size,
            damp: spec.damp,
            non_expert_bits: 4,
            policy: PruneMode::Protected,
            p: crate::pruner::DEFAULT_PROTECT_RATIO,
            full_drop_ratio: crate::pruner::DEFAULT_FULL_DROP_RATIO,
            scope: ProtectionScope::PerLayer,
            protection_sweep: vec![0.0, 0.02, 0.05, 0.1],
            bits_sweep: Vec::new(),
            threads: None,
            force: false,
        }
    }
}

impl PipelineConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            hidden: self.hidden,
            n_heads: self.n_heads,
            intermediate: self.intermediate,
            n_experts: self.n_experts,
            top_k: self.top_k,
            vocab: self.vocab,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("moe-out"))
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir().join(name)
    }

    fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.artifact(MODEL_FILE))
    }

    fn calib_path(&self) -> PathBuf {
        self.calib.clone().unwrap_or_else(|| self.artifact(CALIB_FILE))
    }

    fn eval_path(&self) -> PathBuf {
        self.eval.clone().unwrap_or_else(|| self.artifact(EVAL_FILE))
    }

    pub fn quant_options(&self) -> QuantizeOptions {
        QuantizeOptions {
            spec: QuantSpec {
                bits: self.non_expert_bits,
                group_size: self.group_size,
                mode: self.quant_mode,
                block_size: self.block_size,
                damp: self.damp,
            },
            non_expert_bits: self.non_expert_bits,
        }
    }

    pub fn allocation_params(&self, k: f64) -> AllocationParams {
        AllocationParams {
            k,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            strategy: self.strategy,
            floors: self.floors,
            seed: self.seed,
        }
    }

    pub fn profile_options(&self) -> ProfileOptions {
        ProfileOptions { group_size: self.group_size, target: self.eps_target, ..Default::default() }
    }

    pub fn policy_with(&self, mu: Vec<f32>) -> PruningPolicy {
        PruningPolicy {
            mode: self.policy,
            p: self.p,
            mu,
            full_drop_ratio: if self.policy == PruneMode::FullDrop { self.full_drop_ratio } else { 0.0 },
            scope: self.scope,
            attention_head: None,
        }
    }

    /// Defaults, then `--config=FILE`, then the remaining `--key=value` settings.
    pub fn from_args(settings: &[String]) -> Result<Self> {
        let pairs = parse_settings(settings)?;
        let mut value = serde_json::to_value(Self::default())?;
        if let Some((_, file)) = pairs.iter().find(|(k, _)| k == "config") {
            let text = std::fs::read(file)
                .map_err(|e| Error::Argument(format!("cannot read config file {file}: {e}")))?;
            let loaded: Value = serde_json::from_slice(&text)
                .map_err(|e| Error::Argument(format!("config file {file}: {e}")))?;
            let Value::Object(map) = loaded else {
                return arg_err(format!("config file {file} must hold a JSON object"));
            };
            for (k, v) in map {
                set_key(&mut value, &k, v)?;
            }
        }
        for (k, raw) in pairs.iter().filter(|(k, _)| k != "config") {
            let current = value.get(k.as_str()).cloned();
            let Some(current) = current else {
                return arg_err(format!("unknown setting '--{k}'"));
            };
            set_key(&mut value, k, coerce(k, raw, &current)?)?;
        }
        serde_json::from_value(value).map_err(|e| Error::Argument(format!("configuration: {e}")))
    }
}

fn set_key(value: &mut Value, key: &str, v: Value) -> Result<()> {
    let map = value.as_object_mut().expect("config serializes to an object");
    if !map.contains_key(key) {
        return arg_err(format!("unknown setting '{key}'"));
    }
    map.insert(key.to_string(), v);
    Ok(())
}

/// Interprets a command-line string using the type of the current value.
fn coerce(key: &str, raw: &str, current: &Value) -> Result<Value> {
    let bad = || Error::Argument(format!("cannot use '{raw}' for --{key}"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(_) => serde_json::from_str::<Value>(raw)
            .ok()
            .filter(Value::is_number)
            .ok_or_else(bad)?,
        Value::Array(_) => {
            let items = raw
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| serde_json::from_str::<Value>(s.trim()).ok().filter(Value::is_number).ok_or_else(bad))
                .collect::<Result<Vec<_>>>()?;
            Value::Array(items)
        }
        Value::Null => match raw.parse::<u64>() {
            // optional counts such as threads
            Ok(n) if key == "threads" => Value::from(n),
            _ => Value::String(raw.to_string()),
        },
        _ => Value::String(raw.to_string()),
    })
}

/// `--key=value`, `--key value` and bare `--flag` (meaning `true`).
fn parse_settings(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let Some(body) = args[i].strip_prefix("--") else {
            return arg_err(format!("unexpected argument '{}'; settings look like --key=value", args[i]));
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => match args.get(i + 1) {
                Some(next) if !next.starts_with("--") => {
                    i += 1;
                    (body.to_string(), next.clone())
                }
                _ => (body.to_string(), "true".to_string()),
            },
        };
        out.push((key.replace('-', "_"), value));
        i += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyArtifact {
    pub config_digest: String,
    pub policy: PruningPolicy,
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing {what} '{}'", path.display()),
        )))
    }
}

fn check_digest(cfg: &PipelineConfig, artifact: &str, found: &str, expected: &str) -> Result<()> {
    if found == expected {
        return Ok(());
    }
    if cfg.force {
        eprintln!("warning: {artifact} was made for model {found}, current model is {expected}");
        return Ok(());
    }
    Err(Error::Digest(format!(
        "{artifact} was made for model {found}, current model is {expected}; pass --force to proceed"
    )))
}

fn load_model(cfg: &PipelineConfig) -> Result<MoEModel> {
    let path = cfg.model_path();
    require(&path, "model checkpoint")?;
    MoEModel::load(&path)
}

fn load_corpus(path: &Path, what: &str) -> Result<Corpus> {
    require(path, what)?;
    read_corpus(path)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    require(path, what)?;
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn gen_model(cfg: &PipelineConfig) -> Result<MoEModel> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let mut rng = SeededRng::new(cfg.seed);
    let model = MoEModel::gen_synthetic(&cfg.model_config(), &mut rng)?;
    model.save(&cfg.model_path())?;
    let (calib, eval) = match cfg.corpus_source {
        CorpusSource::Sampled => (
            sample_corpus(&model, cfg.calib_seqs, cfg.calib_len, cfg.temperature, cfg.seed ^ 0xC0FFEE)?,
            sample_corpus(&model, cfg.eval_seqs, cfg.eval_len, cfg.temperature, cfg.seed ^ 0xE7A1)?,
        ),
        CorpusSource::Uniform => {
            let mut r = rng.fork(1);
            (
                random_corpus(cfg.vocab, cfg.calib_seqs, cfg.calib_len, &mut r),
                random_corpus(cfg.vocab, cfg.eval_seqs, cfg.eval_len, &mut r),
            )
        }
    };
    if cfg.calib.is_none() {
        write_corpus(&cfg.calib_path(), &calib)?;
    }
    if cfg.eval.is_none() {
        write_corpus(&cfg.eval_path(), &eval)?;
    }
    println!("model {} written to {}", model.digest(), cfg.model_path().display());
    Ok(model)
}

pub fn profile(cfg: &PipelineConfig) -> Result<ExpertStats> {
    let model = load_model(cfg)?;
    let calib = load_corpus(&cfg.calib_path(), "calibration corpus")?;
    let stats = collect_all(&model, &calib, &cfg.profile_options())?;
    std::fs::create_dir_all(cfg.out_dir())?;
    stats.write_json(&cfg.artifact(STATS_FILE))?;
    if model.config.top_k == 2 {
        let policy = PolicyArtifact {
            config_digest: stats.config_digest.clone(),
            policy: cfg.policy_with(calibrate_mu(&stats)?),
        };
        write_json(&cfg.artifact(POLICY_FILE), &policy)?;
    }
    println!("profiled {} calibration tokens", stats.n_tokens);
    Ok(stats)
}

fn allocate_k(cfg: &PipelineConfig, k: f64) -> Result<BitAllocation> {
    let model = load_model(cfg)?;
    let stats: ExpertStats = read_json(&cfg.artifact(STATS_FILE), "profiling stats")?;
    check_digest(cfg, STATS_FILE, &stats.config_digest, &model.digest())?;
    allocate_model(&stats, &cfg.allocation_params(k))
}

pub fn allocate(cfg: &PipelineConfig) -> Result<BitAllocation> {
    let alloc = allocate_k(cfg, cfg.k)?;
    alloc.write_json(&cfg.artifact(ALLOCATION_FILE))?;
    println!("allocated {} layers at k = {}", alloc.bits.len(), alloc.k);
    Ok(alloc)
}

fn quantize_with(cfg: &PipelineConfig, model: &MoEModel, alloc: &BitAllocation) -> Result<QuantizedModel> {
    check_digest(cfg, ALLOCATION_FILE, &alloc.config_digest, &model.digest())?;
    let calib = load_corpus(&cfg.calib_path(), "calibration corpus")?;
    let qm = quantize_model(model, alloc, &calib, &cfg.quant_options())?;
    for w in &qm.warnings {
        eprintln!("warning: {w}");
    }
    Ok(qm)
}

pub fn quantize(cfg: &PipelineConfig) -> Result<QuantizedModel> {
    let model = load_model(cfg)?;
    let alloc = BitAllocation::read_json(&{
        let p = cfg.artifact(ALLOCATION_FILE);
        require(&p, "bit allocation")?;
        p
    })?;
    let qm = quantize_with(cfg, &model, &alloc)?;
    qm.save(&cfg.artifact(CONTAINER_FILE))?;
    println!("quantized model written to {}", cfg.artifact(CONTAINER_FILE).display());
    Ok(qm)
}

fn load_policy(cfg: &PipelineConfig, digest: &str, n_layers: usize) -> Result<PruningPolicy> {
    if cfg.policy == PruneMode::Off {
        return Ok(PruningPolicy::off(n_layers));
    }
    let art: PolicyArtifact = read_json(&cfg.artifact(POLICY_FILE), "pruning policy")?;
    check_digest(cfg, POLICY_FILE, &art.config_digest, digest)?;
    Ok(cfg.policy_with(art.policy.mu))
}

pub fn eval(cfg: &PipelineConfig) -> Result<RunReport> {
    eval_rows(cfg, Vec::new())
}

fn eval_rows(cfg: &PipelineConfig, mut bits_rows: Vec<BitsRow>) -> Result<RunReport> {
    let start = Instant::now();
    let path = cfg.artifact(CONTAINER_FILE);
    require(&path, "quantized model")?;
    let qm = QuantizedModel::load(&path)?;
    let model = qm.to_model()?;
    let corpus = load_corpus(&cfg.eval_path(), "evaluation corpus")?;
    let policy = load_policy(cfg, &qm.source_digest, model.config.n_layers)?;
    let ev = evaluate(&model, &corpus, &policy)?;
    let sizes = size_accounting(&qm);
    let act = activation_accounting(&ev, &sizes, &model.digest(), &model.config)?;
    let alloc: Option<BitAllocation> = BitAllocation::read_json(&cfg.artifact(ALLOCATION_FILE)).ok();
    let (strategy, k) = alloc
        .as_ref()
        .map_or((cfg.strategy.name().to_string(), cfg.k), |a| (a.strategy.name().to_string(), a.k));
    if !bits_rows.iter().any(|r| r.k == k) {
        bits_rows.push(BitsRow {
            strategy: strategy.clone(),
            k,
            avg_bits: sizes.avg_payload_bits_experts,
            perplexity: ev.perplexity,
        });
    }
    bits_rows.sort_by(|a, b| a.k.total_cmp(&b.k));
    let protection_rows = if policy.mode == PruneMode::Off || cfg.protection_sweep.is_empty() {
        Vec::new()
    } else {
        protection_sweep(&model, &corpus, &policy, &cfg.protection_sweep)?
    };
    let report = RunReport {
        config_digest: qm.source_digest.clone(),
        strategy,
        k,
        avg_bits_overall: sizes.avg_bits_overall,
        avg_bits_experts: sizes.avg_bits_experts,
        avg_payload_bits_experts: sizes.avg_payload_bits_experts,
        total_bytes: sizes.total_bytes,
        mean_activated_bytes_per_token: act.mean_activated_bytes_per_token,
        invocation_reduction: act.invocation_reduction,
        perplexity: ev.perplexity,
        prune_mode: policy.mode,
        layers: ev.layers,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        notes: qm.warnings.clone(),
    };
    emit_report(&cfg.out_dir(), &report, &bits_rows, &protection_rows)?;
    println!(
        "perplexity {:.4}, avg bits {:.4} (experts {:.4}), invocation reduction {:.4}",
        report.perplexity, report.avg_bits_overall, report.avg_bits_experts, report.invocation_reduction
    );
    Ok(report)
}

pub fn pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    if cfg.model.is_none() {
        gen_model(cfg)?;
    }
    profile(cfg)?;
    let mut rows = Vec::new();
    let model = load_model(cfg)?;
    let corpus = load_corpus(&cfg.eval_path(), "evaluation corpus")?;
    for &k in cfg.bits_sweep.iter().filter(|&&k| k != cfg.k) {
        let alloc = allocate_k(cfg, k)?;
        let qm = quantize_with(cfg, &model, &alloc)?;
        let ev = evaluate(&qm.to_model()?, &corpus, &PruningPolicy::off(model.config.n_layers))?;
        rows.push(BitsRow {
            strategy: cfg.strategy.name().to_string(),
            k,
            avg_bits: size_accounting(&qm).avg_payload_bits_experts,
            perplexity: ev.perplexity,
        });
    }
    allocate(cfg)?;
    quantize(cfg)?;
    eval_rows(cfg, rows)
}

fn dispatch(command: &Command) -> Result<()> {
    let settings = match command {
        Command::GenModel(r)
        | Command::Profile(r)
        | Command::Allocate(r)
        | Command::Quantize(r)
        | Command::Eval(r)
        | Command::Pipeline(r) => &r.settings,
    };
    let cfg = PipelineConfig::from_args(settings)?;
    let work = || -> Result<()> {
        match command {
            Command::GenModel(_) => gen_model(&cfg).map(drop),
            Command::Profile(_) => profile(&cfg).map(drop),
            Command::Allocate(_) => allocate(&cfg).map(drop),
            Command::Quantize(_) => quantize(&cfg).map(drop),
            Command::Eval(_) => eval(&cfg).map(drop),
            Command::Pipeline(_) => pipeline(&cfg).map(drop),
        }
    };
    match cfg.threads {
        Some(0) => arg_err("--threads must be at least 1"),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

/// Runs one command given the full argument vector (program name first) and
/// returns the process exit status.
pub fn run(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

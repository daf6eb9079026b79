use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use introspect_core::conformal::{self, calibrate, CpConfig, CpThreshold, DEFAULT_BETA};
use introspect_core::eval::{cross_validate, render_report, CpFactory, HelpMethod, ReportFormat, TransformerFactory};
use introspect_core::features::{step_mean_entropy, step_token_features, NormStats, DEFAULT_TOP_K};
use introspect_core::model::{
    load_checkpoint, save_checkpoint, train_strong, train_weak, EpisodeClassifierConfig, ModelKind,
    StepClassifierConfig, TrainConfig,
};
use introspect_core::monitor::{self, Monitor, DEFAULT_MAX_TOKENS};
use introspect_core::rollout::{read_episodes, stratified_holdout, synthesize_dataset, write_episodes, EpisodeRecord, SynthConfig};

use crate::args::{self, CpOpts, ModelOpts, SynthOpts, TrainOpts};
use crate::UsageError;

/// Default token width for training and evaluation.
pub const DEFAULT_MAX_TOKENS_TRAIN: usize = 64;
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;
pub const DEFAULT_FOLDS: usize = 10;

/// Option values from a JSON config file, consumed group by group.
struct ConfigFile {
    values: Map<String, Value>,
    used: BTreeSet<String>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self> {
        let values = match path {
            None => Map::new(),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(UsageError(format!("{}: config must be a JSON object", p.display())).into()),
                    Err(e) => return Err(UsageError(format!("{}: {e}", p.display())).into()),
                }
            }
        };
        Ok(ConfigFile {
            values,
            used: BTreeSet::new(),
        })
    }

    /// Fills options the command line left unset from the file.
    fn resolve<T: Serialize + DeserializeOwned>(&mut self, flags: &T) -> Result<T> {
        let Value::Object(mut merged) = serde_json::to_value(flags)? else {
            unreachable!("option groups serialize to objects")
        };
        for (key, value) in merged.iter_mut() {
            self.used.insert(key.clone());
            if value.is_null() {
                if let Some(v) = self.values.get(key) {
                    *value = v.clone();
                }
            }
        }
        serde_json::from_value(Value::Object(merged))
            .map_err(|e| UsageError(format!("config file: {e}")).into())
    }

    fn scalar<T: DeserializeOwned>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        self.used.insert(key.to_string());
        match (flag, self.values.get(key)) {
            (Some(v), _) => Ok(Some(v)),
            (None, Some(v)) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| UsageError(format!("config file key {key}: {e}")).into()),
            (None, None) => Ok(None),
        }
    }

    /// Rejects keys that no option consumed.
    fn finish(&self) -> Result<()> {
        let unknown: Vec<&String> = self.values.keys().filter(|k| !self.used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(UsageError(format!("unknown config keys: {unknown:?}")).into())
        }
    }
}

/// Written beside every output as `<output>.manifest.json`.
#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    tool_version: &'a str,
    seed: Option<u64>,
    config: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started_unix_ms: u128,
    wall_clock_ms: u128,
}

struct Run {
    subcommand: &'static str,
    started: Instant,
    started_unix_ms: u128,
}

impl Run {
    fn start(subcommand: &'static str) -> Self {
        Run {
            subcommand,
            started: Instant::now(),
            started_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis()),
        }
    }

    fn finish(self, seed: Option<u64>, config: Value, inputs: &[&Path], output: &Path) -> Result<()> {
        let manifest = RunManifest {
            subcommand: self.subcommand,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: vec![output.display().to_string()],
            started_unix_ms: self.started_unix_ms,
            wall_clock_ms: self.started.elapsed().as_millis(),
        };
        let path = manifest_path(output);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn synth_config(o: &SynthOpts, seed: Option<u64>) -> SynthConfig {
    let d = SynthConfig::s1();
    SynthConfig {
        vocab_size: o.vocab_size.unwrap_or(d.vocab_size),
        top_k: o.top_k.unwrap_or(d.top_k),
        episodes_total: o.episodes.unwrap_or(d.episodes_total),
        failure_fraction: o.failure_fraction.unwrap_or(d.failure_fraction),
        steps_range: (o.steps_min.unwrap_or(d.steps_range.0), o.steps_max.unwrap_or(d.steps_range.1)),
        tokens_range: (o.tokens_min.unwrap_or(d.tokens_range.0), o.tokens_max.unwrap_or(d.tokens_range.1)),
        nominal_concentration: o.nominal_concentration.unwrap_or(d.nominal_concentration),
        degraded_concentration: o.degraded_concentration.unwrap_or(d.degraded_concentration),
        onset_range: (o.onset_min.unwrap_or(d.onset_range.0), o.onset_max.unwrap_or(d.onset_range.1)),
        step_spread: o.step_spread.unwrap_or(d.step_spread),
        token_spread: o.token_spread.unwrap_or(d.token_spread),
        seed: seed.unwrap_or(d.seed),
    }
}

fn model_config(o: &ModelOpts) -> EpisodeClassifierConfig {
    let d = EpisodeClassifierConfig::new(o.max_tokens.unwrap_or(DEFAULT_MAX_TOKENS_TRAIN));
    EpisodeClassifierConfig {
        step: StepClassifierConfig {
            d_model: o.d_model.unwrap_or(d.step.d_model),
            n_heads: o.n_heads.unwrap_or(d.step.n_heads),
            n_layers: o.n_layers.unwrap_or(d.step.n_layers),
            ff_dim: o.ff_dim.unwrap_or(d.step.ff_dim),
            head_hidden: o.head_hidden.unwrap_or(d.step.head_hidden),
            dropout: o.dropout.unwrap_or(d.step.dropout),
            top_k: o.top_k.unwrap_or(d.step.top_k),
            ..d.step
        },
        pool_beta: o.pool_beta.unwrap_or(d.pool_beta),
    }
}

fn train_config(o: &TrainOpts, seed: Option<u64>) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        learning_rate: o.learning_rate.unwrap_or(d.learning_rate),
        batch_steps: o.batch_steps.unwrap_or(d.batch_steps),
        batch_episodes: o.batch_episodes.unwrap_or(d.batch_episodes),
        max_epochs: o.max_epochs.unwrap_or(d.max_epochs),
        patience: o.patience.unwrap_or(d.patience),
        weight_decay: o.weight_decay.unwrap_or(d.weight_decay),
        grad_clip: o.grad_clip.unwrap_or(d.grad_clip),
        seed: seed.unwrap_or(d.seed),
        threshold: o.threshold.unwrap_or(d.threshold),
        pos_weight: o.pos_weight.or(d.pos_weight),
    }
}

fn cp_config(o: &CpOpts) -> Result<CpConfig> {
    let score = match o.score.ok_or_else(|| UsageError("--score is required".into()))? {
        args::Score::Entropy => conformal::ScoreKind::Entropy,
        args::Score::Perplexity => conformal::ScoreKind::Perplexity,
    };
    let regime = match o.regime.ok_or_else(|| UsageError("--regime is required".into()))? {
        args::Regime::Strong => conformal::Regime::Strong,
        args::Regime::Weak => conformal::Regime::Weak,
    };
    let aggregation = match o.aggregation.unwrap_or(args::Aggregation::Mean) {
        args::Aggregation::Mean => conformal::Aggregation::Mean,
        args::Aggregation::Max => conformal::Aggregation::Max,
    };
    let cfg = CpConfig {
        score,
        regime,
        beta: o.beta.unwrap_or(DEFAULT_BETA),
        aggregation,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<Vec<EpisodeRecord>> {
    read_episodes(path).with_context(|| format!("reading dataset {}", path.display()))
}

/// Writes to standard output; a closed pipe (as with `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e).context("writing to standard output"),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_synth(a: &args::GenSynth) -> Result<()> {
    let run = Run::start("gen-synth");
    let mut file = ConfigFile::load(a.config.as_deref())?;
    let seed = file.scalar("seed", a.seed)?;
    let opts = file.resolve(&a.synth)?;
    file.finish()?;
    let cfg = synth_config(&opts, seed);
    let episodes = synthesize_dataset(&cfg)?;
    write_episodes(&episodes, &a.out)?;
    let failures = episodes.iter().filter(|e| e.weak_label).count();
    emit(&format!(
        "wrote {} episodes ({failures} failures) to {}\n",
        episodes.len(),
        a.out.display()
    ))?;
    run.finish(Some(cfg.seed), json!({ "synth": cfg }), &[], &a.out)
}

#[derive(Serialize)]
struct ChannelSummary {
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
}

pub fn extract_features(a: &args::ExtractFeatures) -> Result<()> {
    let run = Run::start("extract-features");
    let mut file = ConfigFile::load(a.config.as_deref())?;
    let top_k = file.scalar("top_k", a.top_k)?.unwrap_or(DEFAULT_TOP_K);
    file.finish()?;
    let episodes = load_dataset(&a.data)?;

    let mut tokens = Vec::new();
    let (mut nominal, mut degraded, mut unlabeled) = (Vec::new(), Vec::new(), 0usize);
    let mut steps = 0;
    for e in &episodes {
        for s in &e.steps {
            tokens.extend(
                step_token_features(s, top_k)
                    .with_context(|| format!("episode {} step {}", e.episode_id, s.step_index))?,
            );
            let h = step_mean_entropy(s)?;
            match s.strong_label {
                Some(true) => degraded.push(h),
                Some(false) => nominal.push(h),
                None => unlabeled += 1,
            }
            steps += 1;
        }
    }
    let norm = NormStats::fit(tokens.iter()).context("dataset has no tokens")?;
    let names = ["entropy", "neg_log_prob", "aleatoric", "epistemic"];
    let mut channels = Map::new();
    for (c, name) in names.iter().enumerate() {
        let values = tokens.iter().map(|t| t.to_array()[c]);
        let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        channels.insert(
            name.to_string(),
            serde_json::to_value(ChannelSummary {
                mean: norm.mean[c],
                std: norm.std[c],
                min,
                max,
            })?,
        );
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let summary = json!({
        "episodes": episodes.len(),
        "failures": episodes.iter().filter(|e| e.weak_label).count(),
        "steps": steps,
        "tokens": tokens.len(),
        "top_k": top_k,
        "channels": channels,
        "step_mean_entropy": {
            "nominal": mean(&nominal),
            "degraded": mean(&degraded),
            "nominal_steps": nominal.len(),
            "degraded_steps": degraded.len(),
            "unlabeled_steps": unlabeled,
        },
    });
    match &a.out {
        Some(out) => {
            write_json(out, &summary)?;
            run.finish(None, json!({ "top_k": top_k }), &[&a.data], out)
        }
        None => {
            emit(&(serde_json::to_string_pretty(&summary)? + "\n"))
        }
    }
}

pub fn train(a: &args::Train) -> Result<()> {
    let run = Run::start("train");
    let mut file = ConfigFile::load(a.config.as_deref())?;
    let seed = file.scalar("seed", a.seed)?;
    let model_opts = file.resolve(&a.model)?;
    let train_opts = file.resolve(&a.train)?;
    file.finish()?;
    let model = model_config(&model_opts);
    let tc = train_config(&train_opts, seed);
    let val_fraction = train_opts.val_fraction.unwrap_or(DEFAULT_VAL_FRACTION);
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(UsageError(format!("--val-fraction {val_fraction} outside [0, 1)")).into());
    }

    let episodes = load_dataset(&a.data)?;
    let refs: Vec<&EpisodeRecord> = episodes.iter().collect();
    let (fit, val) = stratified_holdout(&refs, val_fraction, tc.seed);
    let ckpt = match a.mode {
        args::Regime::Strong => train_strong(&fit, &val, &model.step, &tc)?,
        args::Regime::Weak => train_weak(&fit, &val, &model, &tc)?,
    };
    save_checkpoint(&ckpt, &a.out)?;
    emit(&format!(
        "trained {} model ({} parameters): best epoch {} of {}, train loss {:.5}, validation loss {:.5}\n",
        ckpt.kind.as_str(),
        ckpt.model.parameter_count(),
        ckpt.meta.best_epoch,
        ckpt.meta.epochs_run,
        ckpt.meta.train_loss,
        ckpt.meta.val_loss
    ))?;
    let config = json!({
        "mode": a.mode,
        "model": model,
        "train": tc,
        "val_fraction": val_fraction,
    });
    run.finish(Some(tc.seed), config, &[&a.data], &a.out)
}

pub fn calibrate_cp(a: &args::CalibrateCp) -> Result<()> {
    let run = Run::start("calibrate-cp");
    let mut file = ConfigFile::load(a.config.as_deref())?;
    let opts = file.resolve(&a.cp)?;
    file.finish()?;
    let cfg = cp_config(&opts)?;
    let episodes = load_dataset(&a.data)?;
    let refs: Vec<&EpisodeRecord> = episodes.iter().collect();
    let threshold = calibrate(&refs, &cfg)?;
    write_json(&a.out, &threshold)?;
    emit(&format!("tau = {} from {} calibration scores\n", threshold.tau, threshold.n))?;
    run.finish(None, json!({ "cp": cfg }), &[&a.data], &a.out)
}

pub fn evaluate(a: &args::Evaluate) -> Result<()> {
    let run = Run::start("evaluate");
    let mut file = ConfigFile::load(a.config.as_deref())?;
    let seed = file.scalar("seed", a.seed)?.unwrap_or(0);
    let k = file.scalar("folds", a.folds)?.unwrap_or(DEFAULT_FOLDS);
    let mode = file.scalar("mode", a.mode)?;
    let model_opts = file.resolve(&a.model)?;
    let train_opts = file.resolve(&a.train)?;
    let cp_opts = file.resolve(&a.cp)?;
    file.finish()?;

    let episodes = load_dataset(&a.data)?;
    let dataset_id = a.dataset_id.clone().unwrap_or_else(|| {
        a.data
            .file_stem()
            .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned())
    });
    let (report, config) = match a.method {
        args::Method::Transformer => {
            let mode = mode.ok_or_else(|| UsageError("--mode strong|weak is required for the transformer".into()))?;
            let factory = TransformerFactory {
                mode: match mode {
                    args::Regime::Strong => ModelKind::Strong,
                    args::Regime::Weak => ModelKind::Weak,
                },
                model: model_config(&model_opts),
                train: train_config(&train_opts, Some(seed)),
                val_fraction: train_opts.val_fraction.unwrap_or(DEFAULT_VAL_FRACTION),
            };
            let report = cross_validate(&episodes, &factory, k, seed, &dataset_id)?;
            (report, json!({ "method": "transformer", "folds": k, "factory": factory }))
        }
        args::Method::Cp => {
            let factory = CpFactory {
                config: cp_config(&cp_opts)?,
            };
            let report = cross_validate(&episodes, &factory, k, seed, &dataset_id)?;
            (report, json!({ "method": "cp", "folds": k, "factory": factory }))
        }
    };
    fs::write(&a.out, render_report(&report, ReportFormat::Json)?)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let shown = match a.format {
        args::OutputFormat::Text => ReportFormat::Text,
        args::OutputFormat::Json => ReportFormat::Json,
    };
    emit(&render_report(&report, shown)?)?;
    run.finish(Some(seed), config, &[&a.data], &a.out)
}

pub fn monitor(a: &args::Monitor) -> Result<()> {
    let method: Arc<dyn HelpMethod> = match (&a.checkpoint, &a.cp_threshold) {
        (Some(path), None) => Arc::new(load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let th: CpThreshold = serde_json::from_str(&text)
                .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
            Arc::new(th)
        }
        _ => return Err(UsageError("exactly one of --checkpoint or --cp-threshold is required".into()).into()),
    };
    let m = Monitor::new(method, a.max_tokens.unwrap_or(DEFAULT_MAX_TOKENS))?;
    match &a.listen {
        None => {
            let stdin = io::stdin();
            let stdout = io::stdout();
            monitor::serve(&m, stdin.lock(), BufWriter::new(stdout.lock()))?;
            Ok(())
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            let shutdown = Arc::new(AtomicBool::new(false));
            let flag = Arc::clone(&shutdown);
            ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
                .map_err(|e| anyhow!("installing signal handler: {e}"))?;
            eprintln!(
                "serving {} on {}",
                m.method_name(),
                listener.local_addr().map_or_else(|_| addr.clone(), |a| a.to_string())
            );
            io::stderr().flush().ok();
            monitor::serve_tcp(Arc::new(m), listener, shutdown)?;
            Ok(())
        }
    }
}

//! The `search` subcommand: run lifecycle, artifacts and resume.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::anyhow;
use clap::Args;
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use robnas_core::config::{EvaluatorKind, SearchConfig};
use robnas_core::dispatch::{Dispatcher, PoolEvaluator, TcpLink};
use robnas_core::engine::{history_line, parse_history, EngineError, StopReason};
use robnas_core::fitness::{Evaluator, SurrogateEvaluator};
use robnas_core::Engine;

use crate::{cause, fail, Classify, Code, Failure};

pub const MANIFEST_FORMAT: &str = "robnas-manifest/1";

#[derive(Args)]
pub struct SearchArgs {
    /// Search configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for manifest, checkpoint, history and best record.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `engine.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Worker endpoints to dial; selects the worker evaluator.
    #[arg(long, value_delimiter = ',', conflicts_with = "surrogate")]
    pub workers: Option<Vec<String>>,
    /// Address to accept worker connections on; selects the worker evaluator.
    #[arg(long, conflicts_with = "surrogate")]
    pub listen: Option<String>,
    /// Score candidates with the surrogate landscape.
    #[arg(long)]
    pub surrogate: bool,
    /// Pause after this many generations, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Paused,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPaths {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub best: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    /// SHA-256 of the configuration file bytes.
    pub config_digest: String,
    /// SHA-256 of the effective configuration after flag overrides; the
    /// checkpoint is bound to this value.
    pub run_digest: String,
    pub seed: u64,
    pub evaluator: EvaluatorKind,
    pub resumed: bool,
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
    pub status: RunStatus,
    pub stop_reason: Option<StopReason>,
    pub generations: Option<u64>,
    pub evaluations: Option<usize>,
    pub best_fitness: Option<f64>,
    pub paths: ManifestPaths,
}

fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let io_err = |e: std::io::Error| fail(Code::Io, anyhow!("cannot write {}: {e}", path.display()));
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).map_err(io_err)?;
        f.write_all(bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

fn engine_failure(e: EngineError) -> Failure {
    let code = match &e {
        EngineError::PoolEmpty => Code::Protocol,
        EngineError::Checkpoint(_) => Code::Checkpoint,
        EngineError::Config(_) | EngineError::Space(_) => Code::Config,
        _ => Code::Search,
    };
    fail(code, e.into())
}

/// Loads the configuration and applies flag overrides.
fn load_config(args: &SearchArgs) -> Result<(SearchConfig, String), Failure> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| fail(Code::Io, anyhow!("cannot read {}: {e}", args.config.display())))?;
    let loaded = SearchConfig::from_json(&text)
        .map_err(|e| fail(Code::Config, anyhow!("{}: {e}", args.config.display())))?;
    let mut cfg = loaded.config;
    if let Some(seed) = args.seed {
        cfg.engine.seed = seed;
    }
    if args.surrogate {
        cfg.evaluator.kind = EvaluatorKind::Surrogate;
    }
    if let Some(w) = &args.workers {
        cfg.evaluator.kind = EvaluatorKind::Workers;
        cfg.evaluator.workers = w.iter().filter(|s| !s.is_empty()).cloned().collect();
    }
    if let Some(l) = &args.listen {
        cfg.evaluator.kind = EvaluatorKind::Workers;
        cfg.evaluator.listen = Some(l.clone());
    }
    cfg.check().class(Code::Config)?;
    if cfg.evaluator.kind == EvaluatorKind::Workers && cfg.evaluator.workers.is_empty() && cfg.evaluator.listen.is_none() {
        return Err(fail(Code::Config, anyhow!("worker evaluator needs evaluator.workers or evaluator.listen")));
    }
    Ok((cfg, loaded.digest))
}

struct Run<'a> {
    args: &'a SearchArgs,
    cfg: SearchConfig,
    run_digest: String,
    paths: ManifestPaths,
    manifest: RunManifest,
}

impl Run<'_> {
    fn write_manifest(&self) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(&self.manifest).class(Code::Io)?;
        write_atomic(&self.paths.config.with_file_name("manifest.json"), text.as_bytes())
    }

    fn write_checkpoint<E: Evaluator>(&self, engine: &Engine<E>) -> Result<(), Failure> {
        write_atomic(&self.paths.checkpoint, engine.checkpoint(&self.run_digest).as_bytes())
    }

    fn write_history<E: Evaluator>(&self, engine: &Engine<E>) -> Result<(), Failure> {
        let mut text = String::new();
        for rec in engine.history() {
            text.push_str(&history_line(rec));
            text.push('\n');
        }
        write_atomic(&self.paths.history, text.as_bytes())
    }

    /// Fresh initialisation, or a resume from the output directory.
    fn start<E: Evaluator>(&self, evaluator: E) -> Result<Engine<E>, Failure> {
        if !self.args.resume {
            let engine =
                Engine::init(self.cfg.space.clone(), self.cfg.engine.clone(), evaluator).map_err(engine_failure)?;
            info!("initial population of {} evaluated; best fitness {:.4}", engine.population().len(), engine.best().fitness);
            self.write_history(&engine)?;
            self.write_checkpoint(&engine)?;
            return Ok(engine);
        }
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| fail(Code::Io, anyhow!("cannot read {}: {e}", p.display())));
        let ckpt = read(&self.paths.checkpoint)?;
        let mut history_text = read(&self.paths.history)?;
        // a crash mid-append leaves a partial final line; it postdates the checkpoint
        if !history_text.is_empty() && !history_text.ends_with('\n') {
            let keep = history_text.rfind('\n').map_or(0, |i| i + 1);
            warn!("discarding a partial final line in {}", self.paths.history.display());
            history_text.truncate(keep);
        }
        let history = parse_history(&history_text).map_err(|(line, e)| {
            fail(Code::Parse, anyhow!("{} line {line}, column {}: {}", self.paths.history.display(), e.column(), cause(&e)))
        })?;
        let engine = Engine::resume(
            self.cfg.space.clone(),
            self.cfg.engine.clone(),
            evaluator,
            &self.run_digest,
            &ckpt,
            history,
        )
        .map_err(engine_failure)?;
        info!("resumed at generation {} with {} recorded evaluations", engine.generation(), engine.history().len());
        // drop records written after the checkpoint
        self.write_history(&engine)?;
        Ok(engine)
    }

    fn finish<E: Evaluator>(&mut self, engine: &Engine<E>, status: RunStatus) -> Result<(), Failure> {
        self.write_checkpoint(engine)?;
        if engine.best().fitness.is_finite() {
            write_atomic(&self.paths.best, format!("{}\n", engine.best().arch.to_pretty()).as_bytes())?;
        }
        self.manifest.finished_unix_ms = Some(unix_ms());
        self.manifest.status = status;
        self.manifest.stop_reason = engine.stop_reason();
        self.manifest.generations = Some(engine.generation());
        self.manifest.evaluations = Some(engine.history().len());
        self.manifest.best_fitness = engine.best().fitness.is_finite().then_some(engine.best().fitness);
        self.write_manifest()
    }

    fn fail_with<E: Evaluator>(&mut self, engine: &Engine<E>, e: EngineError) -> Failure {
        let failure = engine_failure(e);
        if let Err(f) = self.finish(engine, RunStatus::Failed) {
            warn!("could not record the failed run: {f}");
        }
        failure
    }

    /// Sequential generations, one history line each, checkpointing on the
    /// configured interval.
    fn drive<E: Evaluator>(&mut self, mut engine: Engine<E>) -> Result<ExitCode, Failure> {
        let file = OpenOptions::new()
            .append(true)
            .open(&self.paths.history)
            .map_err(|e| fail(Code::Io, anyhow!("cannot open {}: {e}", self.paths.history.display())))?;
        let mut history = BufWriter::new(file);
        let mut steps = 0u64;
        let mut paused = false;
        while engine.stop_reason().is_none() {
            if self.args.stop_after == Some(steps) {
                paused = true;
                break;
            }
            match engine.step() {
                Ok(r) => {
                    steps += 1;
                    let rec = engine.history().last().expect("offspring recorded");
                    writeln!(history, "{}", history_line(rec)).class(Code::Io)?;
                    debug!(
                        "generation {}: offspring {} fitness {:.4}, eliminated {}, best {:.4}",
                        r.generation, r.offspring.id, r.offspring.fitness, r.eliminated, r.best_fitness
                    );
                    if r.improved {
                        info!("generation {}: new best fitness {:.4}", r.generation, r.best_fitness);
                    }
                    if engine.generation().is_multiple_of(self.cfg.checkpoint_every) {
                        history.flush().class(Code::Io)?;
                        self.write_checkpoint(&engine)?;
                    }
                }
                Err(e) => {
                    history.flush().class(Code::Io)?;
                    return Err(self.fail_with(&engine, e));
                }
            }
        }
        history.flush().class(Code::Io)?;
        let status = if paused { RunStatus::Paused } else { RunStatus::Completed };
        self.finish(&engine, status)?;
        match engine.stop_reason() {
            Some(reason) => info!("search stopped ({reason}) after {} generations; best fitness {:.4}", engine.generation(), engine.best().fitness),
            None => info!("search paused at generation {}; continue with --resume", engine.generation()),
        }
        Ok(ExitCode::SUCCESS)
    }

    fn drive_concurrent(&mut self, mut engine: Engine<PoolEvaluator<TcpLink>>) -> Result<ExitCode, Failure> {
        if self.args.stop_after.is_some() {
            warn!("--stop-after is ignored when more than one evaluation is in flight");
        }
        let outcome = engine.run_concurrent();
        self.write_history(&engine)?;
        match outcome {
            Ok(r) => {
                self.finish(&engine, RunStatus::Completed)?;
                info!("search stopped ({}) after {} generations; best fitness {:.4}", r.stop, r.generations, r.best.fitness);
                Ok(ExitCode::SUCCESS)
            }
            Err(e) => Err(self.fail_with(&engine, e)),
        }
    }
}

fn worker_pool(cfg: &SearchConfig) -> Result<PoolEvaluator<TcpLink>, Failure> {
    let ev = &cfg.evaluator;
    let mut link = match &ev.listen {
        Some(addr) => {
            let mut link = TcpLink::listen(addr.as_str())
                .map_err(|e| fail(Code::Io, anyhow!("cannot listen on {addr}: {e}")))?;
            if let Some(a) = link.local_addr() {
                info!("accepting workers on {a}");
            }
            link.dial(&ev.workers).map_err(|e| fail(Code::Protocol, anyhow!("cannot reach worker: {e}")))?;
            link
        }
        None => TcpLink::dial_only(&ev.workers).map_err(|e| fail(Code::Protocol, anyhow!("cannot reach worker: {e}")))?,
    };
    let mut d = Dispatcher::new(cfg.dispatch.clone(), cfg.shape, cfg.eval_config.clone());
    let wanted = ev.min_workers.max(1);
    let got = link.wait_for_workers(&mut d, wanted, cfg.dispatch.connect_timeout);
    if got < wanted {
        return Err(fail(
            Code::Protocol,
            anyhow!("only {got} of {wanted} workers said hello within {:?}", cfg.dispatch.connect_timeout),
        ));
    }
    info!("{got} workers registered");
    Ok(PoolEvaluator::new(d, link))
}

pub fn cmd_search(args: SearchArgs) -> Result<ExitCode, Failure> {
    let (cfg, config_digest) = load_config(&args)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| fail(Code::Io, anyhow!("cannot create {}: {e}", args.out.display())))?;
    let paths = ManifestPaths {
        config: args.out.join("config.json"),
        checkpoint: args.out.join("checkpoint.jsonl"),
        history: args.out.join("history.jsonl"),
        best: args.out.join("best.json"),
    };
    if args.resume && !paths.checkpoint.exists() {
        return Err(fail(Code::Checkpoint, anyhow!("no checkpoint in {} to resume from", args.out.display())));
    }
    if !args.resume && paths.checkpoint.exists() {
        return Err(fail(
            Code::Config,
            anyhow!("{} already holds a run; pass --resume or choose another directory", args.out.display()),
        ));
    }
    // the effective configuration is saved and digested so that resume can
    // detect a changed file or changed overrides
    let effective = serde_json::to_string_pretty(&cfg).class(Code::Io)?;
    let run_digest = SearchConfig::from_json(&effective).class(Code::Config)?.digest;
    write_atomic(&paths.config, format!("{effective}\n").as_bytes())?;
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        config_digest,
        run_digest: run_digest.clone(),
        seed: cfg.engine.seed,
        evaluator: cfg.evaluator.kind,
        resumed: args.resume,
        started_unix_ms: unix_ms(),
        finished_unix_ms: None,
        status: RunStatus::Running,
        stop_reason: None,
        generations: None,
        evaluations: None,
        best_fitness: None,
        paths: paths.clone(),
    };
    let mut run = Run { args: &args, cfg, run_digest, paths, manifest };
    run.write_manifest()?;
    match run.cfg.evaluator.kind {
        EvaluatorKind::Surrogate => {
            let ev = SurrogateEvaluator::new(run.cfg.surrogate.clone(), run.cfg.shape);
            let engine = run.start(ev)?;
            run.drive(engine)
        }
        EvaluatorKind::Workers => {
            let pool = worker_pool(&run.cfg)?;
            let engine = run.start(pool)?;
            if run.cfg.engine.in_flight > 1 {
                run.drive_concurrent(engine)
            } else {
                run.drive(engine)
            }
        }
    }
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use attnfault::diagnose::{diagnose_with, DiagnoseOptions, ObservedClass, LATENT_HORIZON};
use attnfault::engine::AttentionConfig;
use attnfault::harness::{self, OUT_DIR_ENV};
use attnfault::inject::Proportions;
use attnfault::kernels::KernelRegistry;
use attnfault::metrics::DEFAULT_MIN_SUPPORT;
use attnfault::taxonomy::{taxonomy_document, RootCause};

const EXIT_USAGE: u8 = 1;
const EXIT_FAULT: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "attnfault", version, about = "Inject and diagnose attention faults")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = harness::DEFAULT_OUT_DIR)]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one forward pass and write its trace.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Kernel registry JSON; the built-in registry otherwise.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Inject one root cause and write the case.
    Inject {
        root_cause: String,
        /// Base config; the built-in default otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Diagnose a trace file.
    Diagnose {
        trace: PathBuf,
        /// Clean trace to compare against.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long, default_value_t = LATENT_HORIZON)]
        latent_horizon: usize,
    },
    /// Diagnose a corpus and write the metrics report.
    Evaluate {
        corpus: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_SUPPORT)]
        min_support: usize,
        #[arg(long, default_value_t = LATENT_HORIZON)]
        latent_horizon: usize,
    },
    /// Generate a stratified corpus.
    Corpus {
        #[arg(long, default_value_t = 1000)]
        size: usize,
        /// `published` or `uniform`.
        #[arg(long, default_value = "published")]
        proportions: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the taxonomy and the built-in kernel registry.
    TaxonomyExport,
}

/// An error that should exit with the usage code.
#[derive(Debug)]
struct Usage(anyhow::Error);

fn usage<E: Into<anyhow::Error>>(e: E) -> Usage {
    Usage(e.into())
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn base_config(path: Option<&Path>) -> Result<AttentionConfig, Usage> {
    match path {
        Some(p) => harness::load_config(p).map_err(usage),
        None => Ok(AttentionConfig::default()),
    }
}

fn run(cli: Cli) -> Result<u8, Usage> {
    let out = cli.out;
    match cli.command {
        Command::Run { config, seed, registry } => {
            let mut c = harness::load_config(&config).map_err(usage)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            let reg = registry
                .map(|p| KernelRegistry::load(&p).with_context(|| format!("loading {}", p.display())))
                .transpose()
                .map_err(Usage)?;
            let trace = harness::run_config(&c, reg.as_ref());
            let path = out.join("run.trace.jsonl");
            harness::save_trace(&trace, &path).map_err(usage)?;
            print_json(&serde_json::json!({
                "trace": path,
                "raised_error": trace.raised_error,
            }))
            .map_err(Usage)?;
            Ok(if trace.raised_error.is_some() { EXIT_FAULT } else { 0 })
        }
        Command::Inject { root_cause, config, seed } => {
            let rc: RootCause = root_cause.parse().map_err(usage)?;
            let base = base_config(config.as_deref())?;
            let case = harness::inject_to_dir(rc, &base, seed, &out).map_err(usage)?;
            print_json(&serde_json::json!({
                "case_id": case.case_id,
                "label": case.label,
                "expected_observability": case.expected_observability,
                "trace": harness::trace_path(&out, &case.case_id),
                "raised_error": case.trace.raised_error,
            }))
            .map_err(Usage)?;
            Ok(0)
        }
        Command::Diagnose { trace, oracle, latent_horizon } => {
            let t = harness::load_trace(&trace).map_err(usage)?;
            let o = oracle.map(|p| harness::load_trace(&p)).transpose().map_err(usage)?;
            let report = diagnose_with(&t, o.as_ref(), &DiagnoseOptions { latent_horizon }).map_err(usage)?;
            harness::write_json(&report, &out.join("diagnosis.json")).map_err(usage)?;
            print_json(&report).map_err(Usage)?;
            Ok(if report.observability == ObservedClass::Clean { 0 } else { EXIT_FAULT })
        }
        Command::Evaluate { corpus, min_support, latent_horizon } => {
            let (report, diagnoses) =
                harness::evaluate_corpus(&corpus, min_support, &DiagnoseOptions { latent_horizon }).map_err(usage)?;
            harness::write_json(&report, &out.join("report.json")).map_err(usage)?;
            let mut lines = String::new();
            for d in &diagnoses {
                lines.push_str(&serde_json::to_string(d).map_err(usage)?);
                lines.push('\n');
            }
            fs::create_dir_all(&out).map_err(usage)?;
            fs::write(out.join("diagnoses.jsonl"), lines).map_err(usage)?;
            print_json(&report).map_err(Usage)?;
            Ok(0)
        }
        Command::Corpus { size, proportions, seed, config } => {
            let Some(p) = Proportions::preset(&proportions) else {
                return Err(Usage(anyhow::anyhow!("unknown proportions preset `{proportions}`, expected published or uniform")));
            };
            let base = base_config(config.as_deref())?;
            let manifest = harness::corpus_to_dir(size, &p, &base, seed, &out).map_err(usage)?;
            print_json(&serde_json::json!({
                "manifest": out.join(harness::MANIFEST_FILE),
                "cases": manifest.cases.len(),
            }))
            .map_err(Usage)?;
            Ok(0)
        }
        Command::TaxonomyExport => {
            harness::write_json(&taxonomy_document(), &out.join("taxonomy.json")).map_err(usage)?;
            let reg = out.join("kernel_registry.json");
            KernelRegistry::standard().save(&reg).map_err(usage)?;
            print_json(&serde_json::json!({
                "taxonomy": out.join("taxonomy.json"),
                "kernel_registry": reg,
            }))
            .map_err(Usage)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

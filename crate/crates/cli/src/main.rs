//! Command-line front end for the shape phylogeny pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shapephylo::config::PipelineConfig;
use shapephylo::fourier::{write_descriptor_binary, Truncation};
use shapephylo::phylo::{Metric, TreeMethod};
use shapephylo::pipeline::{
    history_path, run_baseline, run_compare, run_embed, run_fourier, run_mask, run_pipeline, run_synth, run_train,
    run_tree,
};
use shapephylo::{Error, ErrorClass};

const AFTER_HELP: &str = "\
Outputs: tabular artifacts are CSV with a header row (descriptors:
specimen_id,species_id,v0..; embeddings: specimen_id,species_id,e0..;
matching: edge_t1,edge_t2,score). Scores are printed to standard output as one
JSON object per line.

Exit codes: 0 success, 1 input error, 2 numeric failure, 3 contract violation.";

#[derive(Parser)]
#[command(name = "shapephylo", version, about = "Shape-based phylogeny inference", after_help = AFTER_HELP)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fail when any input is skipped.
    #[arg(long, global = true)]
    strict: bool,
    /// Suppress progress and summary lines on standard error.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Binarize images and trace their outlines.
    Mask {
        /// Dataset root laid out as <split>/<species>/<image>.
        in_dir: PathBuf,
        out_dir: PathBuf,
        #[arg(long)]
        threshold: Option<u8>,
    },
    /// Compute Fourier descriptors of traced outlines.
    Fourier(FourierArgs),
    /// Train the encoder on a descriptor CSV.
    Train {
        descriptors: PathBuf,
        checkpoint: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        standardize: bool,
    },
    /// Embed descriptors with a trained encoder.
    Embed {
        checkpoint: PathBuf,
        descriptors: PathBuf,
        out: PathBuf,
    },
    /// Build a species tree from an embedding or descriptor CSV.
    Tree {
        rows: PathBuf,
        out: PathBuf,
        /// upgma or nj.
        #[arg(long)]
        method: Option<TreeMethod>,
        /// euclidean or cosine.
        #[arg(long)]
        metric: Option<Metric>,
    },
    /// Score an estimated tree against a reference tree.
    Compare {
        estimated: PathBuf,
        truth: PathBuf,
        /// Write the matched edge pairs as CSV.
        #[arg(long)]
        matching: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with a known tree.
    Synth {
        out_dir: PathBuf,
        #[arg(long)]
        n_species: Option<usize>,
        #[arg(long)]
        per_species: Option<usize>,
    },
    /// Score random trees against a reference tree.
    Baseline {
        truth: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run every stage and print the final score record.
    Pipeline {
        work_dir: PathBuf,
        /// Image dataset to use instead of a synthetic one.
        #[arg(long, requires = "truth")]
        data_dir: Option<PathBuf>,
        #[arg(long, requires = "data_dir")]
        truth: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FourierArgs {
    contour_dir: PathBuf,
    out_file: PathBuf,
    #[arg(long)]
    harmonics: Option<usize>,
    /// Comma-separated term counts for the reconstruction report.
    #[arg(long, value_delimiter = ',')]
    report: Option<Vec<usize>>,
    /// Where to write the report CSV.
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Max reconstruction error above which a specimen is flagged.
    #[arg(long)]
    suspect_threshold: Option<f64>,
    /// Truncation order of the report: amplitude or low-frequency.
    #[arg(long)]
    truncation: Option<Truncation>,
    /// Also write the packed binary descriptor file.
    #[arg(long)]
    binary: Option<PathBuf>,
}

struct Ctx {
    cfg: PipelineConfig,
    strict: bool,
    quiet: bool,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn set(cfg: &mut PipelineConfig, key: &str, value: Option<impl ToString>) -> shapephylo::Result<()> {
    match value {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn run(command: Command, mut ctx: Ctx) -> shapephylo::Result<()> {
    match command {
        Command::Mask {
            in_dir,
            out_dir,
            threshold,
        } => {
            set(&mut ctx.cfg, "threshold", threshold)?;
            let summary = run_mask(&in_dir, &out_dir, &ctx.cfg)?;
            for (path, err) in &summary.failures {
                eprintln!("{}: {err}", path.display());
            }
            ctx.note(summary.line());
            if ctx.strict && !summary.failures.is_empty() {
                return Err(Error::Precondition(format!(
                    "{} images failed under --strict",
                    summary.failures.len()
                )));
            }
        }
        Command::Fourier(a) => {
            set(&mut ctx.cfg, "harmonics", a.harmonics)?;
            set(&mut ctx.cfg, "suspect_threshold", a.suspect_threshold)?;
            if let Some(t) = a.truncation {
                ctx.cfg.truncation = t;
            }
            if let Some(terms) = a.report {
                ctx.cfg.report_terms = terms;
            } else if a.report_out.is_none() {
                ctx.cfg.report_terms.clear();
            }
            ctx.cfg.validate()?;
            let out = run_fourier(&a.contour_dir, &a.out_file, &ctx.cfg)?;
            if let Some(path) = &a.binary {
                write_descriptor_binary(path, &out.records)?;
            }
            if let Some(path) = &a.report_out {
                std::fs::write(path, out.report_csv())?;
            } else if !out.reports.is_empty() {
                print!("{}", out.report_csv());
            }
            for s in out.suspects() {
                ctx.note(format!("suspect: {} ({})", s.specimen_id, s.species_id));
            }
            ctx.note(format!("described {} contours", out.records.len()));
        }
        Command::Train {
            descriptors,
            checkpoint,
            epochs,
            learning_rate,
            standardize,
        } => {
            set(&mut ctx.cfg, "epochs", epochs)?;
            set(&mut ctx.cfg, "learning_rate", learning_rate)?;
            ctx.cfg.standardize |= standardize;
            ctx.cfg.validate()?;
            let history = run_train(&descriptors, &checkpoint, &ctx.cfg)?;
            for line in &history.log {
                ctx.note(line);
            }
            for (i, l) in history.epoch_losses.iter().enumerate() {
                ctx.note(format!("epoch {} mean loss {l:.6}", i + 1));
            }
            ctx.note(format!(
                "{} optimizer steps; history in {}",
                history.optimizer_steps(),
                history_path(&checkpoint).display()
            ));
        }
        Command::Embed {
            checkpoint,
            descriptors,
            out,
        } => {
            let m = run_embed(&checkpoint, &descriptors, &out)?;
            ctx.note(format!("embedded {} specimens", m.rows.len()));
        }
        Command::Tree {
            rows,
            out,
            method,
            metric,
        } => {
            if let Some(m) = method {
                ctx.cfg.tree_method = m;
            }
            if let Some(m) = metric {
                ctx.cfg.metric = m;
            }
            let tree = run_tree(&rows, &out, &ctx.cfg)?;
            ctx.note(format!("tree with {} leaves", tree.leaf_count()));
        }
        Command::Compare {
            estimated,
            truth,
            matching,
        } => {
            let score = run_compare(&estimated, &truth, matching.as_deref())?;
            println!("{}", serde_json::to_string(&score).expect("plain data serializes"));
        }
        Command::Synth {
            out_dir,
            n_species,
            per_species,
        } => {
            set(&mut ctx.cfg, "n_species", n_species)?;
            set(&mut ctx.cfg, "per_species", per_species)?;
            ctx.cfg.validate()?;
            let ds = run_synth(&out_dir, &ctx.cfg)?;
            ctx.note(format!(
                "{} species, {} specimens in {}",
                ds.species.len(),
                ds.specimens.len(),
                out_dir.display()
            ));
        }
        Command::Baseline { truth, trials } => {
            set(&mut ctx.cfg, "baseline_trials", trials)?;
            ctx.cfg.validate()?;
            let summary = run_baseline(&truth, &ctx.cfg)?;
            println!("{}", serde_json::to_string(&summary).expect("plain data serializes"));
        }
        Command::Pipeline {
            work_dir,
            data_dir,
            truth,
        } => {
            if data_dir.is_some() {
                ctx.cfg.data_dir = data_dir;
                ctx.cfg.truth = truth;
            }
            let (report, masks) = run_pipeline(&work_dir, &ctx.cfg)?;
            for (path, err) in &masks.failures {
                eprintln!("{}: {err}", path.display());
            }
            ctx.note(masks.line());
            if ctx.strict && !masks.failures.is_empty() {
                return Err(Error::Precondition(format!(
                    "{} images failed under --strict",
                    masks.failures.len()
                )));
            }
            println!("{}", report.to_json());
        }
    }
    Ok(())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> shapephylo::Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn exit_code(err: &Error) -> u8 {
    match err.class() {
        ErrorClass::Input => 1,
        ErrorClass::Numeric => 2,
        ErrorClass::Contract => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = load_config(cli.config.as_deref(), cli.seed).and_then(|cfg| {
        run(
            cli.command,
            Ctx {
                cfg,
                strict: cli.strict,
                quiet: cli.quiet,
            },
        )
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

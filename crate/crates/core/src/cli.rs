//! Command-line surface: `init`, `erase`, `analyze`, `ablate`, `gradcheck`
//! and `export-embeddings`.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{
    analyze, default_grid, sweep, to_csv, to_jsonl, CsvRecord, SweepBase, SweepPrompts,
};
use crate::encoder::{SupervisionPoint, TextEncoder};
use crate::error::{Error, Result};
use crate::misdirection::{
    assert_frozen, encoder_gradcheck, sample_random_target, train, FreezeEntry, LossSpec,
};
use crate::persistence::{atomic_write, load_checkpoint, save_checkpoint, RunConfigFile};
use crate::tensor::{CoordSample, ParamId};

/// Gradient checks fail at or above this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "hirm", version, about = "First-block concept erasure for causal text encoders")]
pub struct Cli {
    /// Log progress at info level (twice for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary from the config's prompts and initialize parameters.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the first block and write the erased checkpoint and loss curve.
    Erase {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Shift, top-k overlap and 2-D projection between two checkpoints.
    Analyze {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        erased: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Sweep supervision point, seed or coefficient.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["layer", "seed", "coefficient"])]
        axis: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference check of first-block gradients through the full model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Perturbation size.
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Check at most this many coordinates per tensor.
        #[arg(long)]
        max_coords: Option<usize>,
    },
    /// Write raw activations at a probe point as CSV.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        /// One prompt per line.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        probe: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                msg.push_str(&format!("\n  caused by: {s}"));
                src = s.source();
            }
            eprintln!("{msg}");
            1
        }
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn check_matches(file: &RunConfigFile, encoder: &TextEncoder) -> Result<()> {
    let want = file.encoder_config()?;
    let have = encoder.config();
    let same = want.num_blocks == have.num_blocks
        && want.model_dim == have.model_dim
        && want.num_heads == have.num_heads
        && want.ff_dim == have.ff_dim
        && want.max_tokens == have.max_tokens;
    if !same {
        return Err(Error::Config(
            "the [encoder] section does not match the checkpoint".into(),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EraseLine<'a> {
    Summary {
        mode: crate::misdirection::TargetKind,
        supervision: SupervisionPoint,
        target_prompts: &'a [String],
        initial_loss: f64,
        final_loss: f64,
        epochs_run: usize,
    },
    Loss {
        epoch: usize,
        loss: f64,
    },
    Freeze(&'a FreezeEntry),
}

fn execute(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Init { config, out } => {
            let file = RunConfigFile::load(config)?;
            let encoder = TextEncoder::init(&file.encoder_config()?, &file.vocab_corpus())?;
            save_checkpoint(&encoder, out)?;
            log::info!("wrote {} ({} tokens)", out.display(), encoder.vocab.len());
            Ok(0)
        }
        Command::Erase {
            config,
            input,
            out,
            report,
        } => {
            let file = RunConfigFile::load(config)?;
            let reference = load_checkpoint(input)?;
            check_matches(&file, &reference)?;
            let tc = file.train_config()?;
            let builder = file.target_builder()?;
            let run = train(&reference, &file.erase.prompts, &builder, &tc)?;
            let freeze = assert_frozen(&run)?;

            let bytes = if is_csv(report) {
                let sp = tc.supervision.to_string();
                let mut records: Vec<CsvRecord> = run
                    .loss_curve
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| CsvRecord {
                        label: format!("epoch {i}"),
                        metric: "loss".into(),
                        probe: sp.clone(),
                        value: v,
                    })
                    .collect();
                for (metric, value) in [("initial_loss", run.initial_loss), ("final_loss", run.final_loss)] {
                    records.push(CsvRecord {
                        label: "summary".into(),
                        metric: metric.into(),
                        probe: sp.clone(),
                        value,
                    });
                }
                to_csv(&records)?
            } else {
                let mut lines = vec![EraseLine::Summary {
                    mode: builder.kind(),
                    supervision: tc.supervision,
                    target_prompts: &run.target_prompts,
                    initial_loss: run.initial_loss,
                    final_loss: run.final_loss,
                    epochs_run: run.epochs_run(),
                }];
                lines.extend(
                    run.loss_curve
                        .iter()
                        .enumerate()
                        .map(|(epoch, &loss)| EraseLine::Loss { epoch, loss }),
                );
                lines.extend(freeze.entries.iter().map(EraseLine::Freeze));
                to_jsonl(lines)?
            };
            save_checkpoint(&run.erased, out)?;
            atomic_write(report, &bytes)?;
            log::info!(
                "loss {:.6e} -> {:.6e} in {} epochs",
                run.initial_loss,
                run.final_loss,
                run.epochs_run()
            );
            Ok(0)
        }
        Command::Analyze {
            original,
            erased,
            config,
            report,
        } => {
            let file = RunConfigFile::load(config)?;
            let a = load_checkpoint(original)?;
            let b = load_checkpoint(erased)?;
            check_matches(&file, &a)?;
            let rep = analyze(
                &a,
                &b,
                &file.erase.prompts,
                &file.analyze.non_target_prompts,
                &file.jaccard_probes()?,
                file.top_k(),
            )?;
            let bytes = if is_csv(report) { rep.to_csv()? } else { rep.to_jsonl()? };
            atomic_write(report, &bytes)?;
            Ok(0)
        }
        Command::Ablate { config, axis, report } => {
            let file = RunConfigFile::load(config)?;
            let axis = axis.parse()?;
            let base = SweepBase {
                encoder: file.encoder_config()?,
                corpus: file.vocab_corpus(),
                train: file.train_config()?,
                builder: file.target_builder()?,
            };
            let prompts = SweepPrompts {
                targets: file.erase.prompts.clone(),
                non_targets: file.analyze.non_target_prompts.clone(),
            };
            let grid = default_grid(axis, file.encoder.blocks);
            let res = sweep(axis, &grid, &base, &prompts)?;
            let bytes = if is_csv(report) { res.to_csv()? } else { res.to_jsonl()? };
            atomic_write(report, &bytes)?;
            Ok(0)
        }
        Command::Gradcheck {
            config,
            eps,
            max_coords,
        } => {
            let file = RunConfigFile::load(config)?;
            let encoder = TextEncoder::init(&file.encoder_config()?, &file.vocab_corpus())?;
            let tc = file.train_config()?;
            let prompt = file.erase.prompts.first().map(String::as_str).unwrap_or("");
            let (_, trace) = encoder.trace(prompt)?;
            let (t, d) = trace.hook(tc.supervision)?.dims2()?;
            let target = sample_random_target(t, d, tc.seed).with_coefficient(tc.coefficient);
            let spec = LossSpec {
                prompt,
                target: &target,
                supervision: tc.supervision,
                over_all_slots: tc.loss_over_all_slots,
            };
            let ids: BTreeSet<ParamId> = encoder
                .config()
                .block_param_ids(tc.trainable_blocks.iter().copied())
                .into_iter()
                .collect();
            let sample = max_coords.map_or(CoordSample::All, CoordSample::AtMost);
            let rep = encoder_gradcheck(&encoder, &spec, &ids, *eps, sample)?;
            println!(
                "checked {} coordinates, max relative error {:.3e}",
                rep.checked, rep.max_rel_error
            );
            if rep.max_rel_error < GRADCHECK_TOLERANCE {
                Ok(0)
            } else {
                eprintln!("gradient check failed: tolerance {GRADCHECK_TOLERANCE:e}");
                Ok(1)
            }
        }
        Command::ExportEmbeddings {
            ckpt,
            prompts,
            probe,
            out,
        } => {
            let encoder = load_checkpoint(ckpt)?;
            let probe: SupervisionPoint = probe.parse()?;
            probe.check(encoder.config().num_blocks)?;
            let text = std::fs::read_to_string(prompts).map_err(Error::file(prompts))?;
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header_written = false;
            for prompt in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                let (seq, trace) = encoder.trace(prompt)?;
                let act = trace.hook(probe)?;
                let (_, width) = act.dims2()?;
                if !header_written {
                    let mut header = vec!["prompt".to_string(), "position".into(), "token".into()];
                    header.extend((0..width).map(|j| format!("v{j}")));
                    w.write_record(&header)?;
                    header_written = true;
                }
                for pos in 0..seq.real_len {
                    let token = encoder.vocab.token(seq.ids[pos]).unwrap_or("<unk>");
                    let mut rec = vec![prompt.to_string(), pos.to_string(), token.to_string()];
                    rec.extend(act.row(pos).iter().map(|v| v.to_string()));
                    w.write_record(&rec)?;
                }
            }
            w.flush()?;
            let bytes = w.into_inner().map_err(|e| e.into_error())?;
            atomic_write(out, &bytes)?;
            Ok(0)
        }
    }
}

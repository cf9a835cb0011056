//! `tmodel`: command-line front end for synthesis, regridding, training,
//! transformation and evaluation of velocity fields.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure. Failures print one `error class=... exit=...
//! message="..."` line on stderr.

use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transform_model::field::{align_temporal, align_vertical, fld, regrid_horizontal_with, MaskRule};
use transform_model::metrics::{evaluate, write_report};
use transform_model::pipeline::{
    prepare, run_experiment, save_levels, train_levels, transform_bank, write_train_log, EpochStats, ExperimentSpec,
};
use transform_model::stunet::{checkpoint, Direction};
use transform_model::synth::{reference_gain, twin_experiment, write_pair, SynthSpec};
use transform_model::{Error, Result};

#[derive(Parser)]
#[command(name = "tmodel", version, about = "Train and apply velocity-field transform models")]
struct Cli {
    /// Seed for all randomness; overrides the seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-level training.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment spec (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the spec.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_direction)]
    direction: Option<Direction>,
    /// Level indices as `a..b` (half-open) or a single index.
    #[arg(long, value_parser = parse_range)]
    levels: Option<Range<usize>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic truth/model pair (truth.fld, model.fld) and the
    /// default twin experiment spec for it (experiment.json).
    Synth {
        /// Synthetic spec (JSON); the default twin spec when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Held-out frames `a..b` used to report the gain brackets.
        #[arg(long, value_parser = parse_range)]
        test: Option<Range<usize>>,
    },
    /// Resample a field file horizontally, vertically and in time.
    Regrid {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        ny: Option<usize>,
        /// Comma-separated destination depths in meters.
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<f64>>,
        /// Destination interval in hours (block mean).
        #[arg(long)]
        dt_hours: Option<f64>,
        #[arg(long, value_parser = parse_mask_rule, default_value = "all_support")]
        mask_rule: MaskRule,
    },
    /// Train the per-level models of an experiment and write checkpoints.
    Train(ExperimentArgs),
    /// Apply a checkpoint bank to a model field.
    Transform {
        /// Directory holding manifest.json and the level checkpoints.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Numerical-model field on the network grid.
        #[arg(long)]
        input: PathBuf,
        /// Frames `a..b`; all admissible frames when absent.
        #[arg(long, value_parser = parse_range)]
        frames: Option<Range<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score model and transformed fields against a reference.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        transformed: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frame index of the first frame, for the MSE table.
        #[arg(long, default_value_t = 0)]
        first_frame: usize,
    },
    /// End-to-end experiment: align, train, transform, evaluate.
    Run(ExperimentArgs),
    /// Print the header of a field file, checkpoint or checkpoint directory.
    Info { path: PathBuf },
}

fn parse_direction(s: &str) -> std::result::Result<Direction, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mask_rule(s: &str) -> std::result::Result<MaskRule, String> {
    match s {
        "all_support" => Ok(MaskRule::AllSupport),
        "nearest" => Ok(MaskRule::Nearest),
        _ => Err(format!("unknown mask rule {s:?} (all_support|nearest)")),
    }
}

fn parse_range(s: &str) -> std::result::Result<Range<usize>, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    match s.split_once("..") {
        Some((a, b)) => Ok(num(a)?..num(b)?),
        None => {
            let a = num(s)?;
            Ok(a..a + 1)
        }
    }
}

fn progress(_level: usize, e: &EpochStats) {
    eprintln!("{},{},{},{}", e.epoch, e.loss, e.rmse, e.lr);
}

fn load_experiment(args: &ExperimentArgs, seed: Option<u64>) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::from_file(&args.config)?;
    if let Some(out) = &args.out {
        spec.out_dir = out.clone();
    }
    if let Some(d) = args.direction {
        spec.direction = d;
    }
    if let Some(r) = &args.levels {
        spec.levels = Some(r.clone().collect());
    }
    if let Some(s) = seed {
        spec.train.seed = s;
    }
    Ok(spec)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    let mut say = |line: String| {
        let _ = writeln!(stdout, "{line}");
    };
    match cli.command {
        Command::Synth { config, out, test } => {
            let mut spec = match config {
                Some(path) => {
                    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    serde_json::from_slice::<SynthSpec>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => SynthSpec::default(),
            };
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            spec.validate()?;
            write_pair(&spec, &out)?;
            let experiment = out.join("experiment.json");
            let text = serde_json::to_string_pretty(&twin_experiment(&spec, ""))?;
            std::fs::write(&experiment, text).map_err(|e| Error::io(&experiment, e))?;
            say(format!(
                "wrote {}, {} and {}",
                out.join("truth.fld").display(),
                out.join("model.fld").display(),
                experiment.display()
            ));
            if let Some(test) = test {
                let r = reference_gain(&spec, test)?;
                say(format!(
                    "persistence_gain_pct {} oracle_gain_pct {} mean_mse_biased {}",
                    r.persistence_gain_pct, r.oracle_gain_pct, r.mean_mse_biased
                ));
            }
        }
        Command::Regrid { input, out, nx, ny, depths, dt_hours, mask_rule } => {
            let mut fs = fld::read(&input)?;
            if let Some(dt) = dt_hours {
                fs = align_temporal(&fs, dt)?;
            }
            if let Some(d) = depths {
                fs = align_vertical(&fs, &d)?;
            }
            if nx.is_some() || ny.is_some() {
                let (nx, ny) = (nx.unwrap_or(fs.spec().nx), ny.unwrap_or(fs.spec().ny));
                fs = regrid_horizontal_with(&fs, nx, ny, mask_rule)?;
            }
            fld::write(&fs, &out)?;
            say(format!("wrote {}", out.display()));
        }
        Command::Train(args) => {
            let spec = load_experiment(&args, cli.seed)?;
            let prepared = prepare(&spec)?;
            let results = train_levels(&spec, &prepared, cli.jobs, &progress)?;
            create_dir(&spec.out_dir)?;
            save_levels(spec.out_dir.join("checkpoints"), &results)?;
            write_train_log(&spec.out_dir.join("train_log.csv"), &results)?;
            say(format!("wrote {}", spec.out_dir.join("checkpoints").display()));
        }
        Command::Transform { checkpoints, input, frames, out } => {
            let bank: Vec<_> = checkpoint::load_bank(&checkpoints)?
                .into_iter()
                .map(|(entry, model)| (entry.depth_m, model))
                .collect();
            let fs = fld::read(&input)?;
            let frames = frames.unwrap_or(0..fs.nt());
            fld::write(&transform_bank(&bank, &fs, frames)?, &out)?;
            say(format!("wrote {}", out.display()));
        }
        Command::Eval { reference, model, transformed, out, first_frame } => {
            let r = fld::read(&reference)?;
            let report = evaluate(&r, &fld::read(&model)?, &fld::read(&transformed)?, first_frame)?;
            write_report(&report, &out, &r)?;
            let g = report.headline_gain();
            say(format!("gain_pct {} signed_pct {}", g.gain_pct, g.signed_pct));
        }
        Command::Run(args) => {
            let spec = load_experiment(&args, cli.seed)?;
            let outcome = run_experiment(&spec, cli.jobs, &progress)?;
            let g = outcome.report.headline_gain();
            let (mm, mt) = outcome.report.mean_mse();
            say(format!(
                "gain_pct {} signed_pct {} mean_mse_model {mm} mean_mse_transformed {mt}",
                g.gain_pct, g.signed_pct
            ));
        }
        Command::Info { path } => {
            let file = if path.is_dir() { path.join(checkpoint::MANIFEST) } else { path.clone() };
            let mut magic = [0u8; 4];
            let mut f = std::fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
            std::io::Read::read_exact(&mut f, &mut magic).map_err(|_| Error::BadField {
                path: file.clone(),
                reason: "file too short".into(),
            })?;
            if &magic == b"FLD1" {
                let h = fld::read_header(&file)?;
                say(format!("format FLD1\ndims [t,z,y,x,c] = {:?}", h.dims()));
                say(format!("depths_m {:?}\ndt_hours {}\nt0 {}", h.grid.depths_m, h.grid.dt_hours, h.grid.t0));
                say(format!("valid_cells {}", h.mask()?.iter().filter(|&&m| m).count()));
            } else if &magic == checkpoint::MAGIC {
                let h = checkpoint::read_header(&file)?;
                say(format!("format STU1\n{}", serde_json::to_string_pretty(&h)?));
            } else if path.is_dir() {
                for (entry, model) in checkpoint::load_bank(&path)? {
                    say(format!("level {} depth_m {} file {} params {}", entry.level, entry.depth_m, entry.file, model.param_count()));
                }
            } else {
                return Err(Error::BadField {
                    path: file,
                    reason: "neither a FLD1 field nor a STU1 checkpoint".into(),
                });
            }
        }
    }
    Ok(())
}

fn fail(class: &str, code: u8, message: &str) -> ExitCode {
    eprintln!("error class={class} exit={code} message={message:?}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error");
            return fail("usage", 1, first.trim_start_matches("error: "));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            fail(class.as_str(), class.exit_code() as u8, &e.to_string())
        }
    }
}

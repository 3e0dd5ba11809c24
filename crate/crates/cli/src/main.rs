//! `pcgc`: encode, decode, train, evaluate and inspect.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pcgc::codec::{decode_pointcloud, encode_pointcloud, Bitstream, EncodeOptions, LatentCoding, RhoMetric};
use pcgc::eval::{eval_run, rd_table_csv, RunModel};
use pcgc::io::{parse_ply, write_ply, PointSet};
use pcgc::preprocess::ScaleConfig;
use pcgc::trainer::{gen_synthetic_dataset, loss_curve_csv, train, TrainConfig};
use pcgc::{ModelF32, ModelF64};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] pcgc::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use pcgc::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::File { .. } => 2,
            CliError::Core(E::Shape(_) | E::NonFinite(_) | E::Diverged { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "pcgc", version, about = "Learned point cloud geometry codec")]
struct Cli {
    /// Worker threads for cube-level parallelism; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RhoArg {
    D1,
    D2,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compress a PLY point cloud.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Downscaling factor `a/b` applied before partitioning.
        #[arg(long, default_value = "1")]
        scale: String,
        /// Cube width W, a power of two.
        #[arg(long, default_value_t = 64, value_parser = parse_width)]
        cube_size: usize,
        #[arg(long)]
        output: PathBuf,
        /// Replace each transmitted k by the count minimizing this metric.
        #[arg(long, value_enum)]
        rho_metric: Option<RhoArg>,
        /// Code latents with the factorized model only.
        #[arg(long)]
        no_hyperprior: bool,
    },
    /// Reconstruct a PLY point cloud from a bitstream.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train on a generated synthetic corpus.
    Train {
        /// TOML or JSON file with training settings.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to start from instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Where to write the per-step loss curve.
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Seed of the synthetic training corpus.
        #[arg(long, default_value_t = 1)]
        data_seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
    /// Write an RD table for checkpoints over a directory of PLY files.
    Eval {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// λ of each checkpoint, in order; recorded in the table.
        #[arg(long = "lambda")]
        lambdas: Vec<f64>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long = "scale", default_value = "1")]
        scales: Vec<String>,
        #[arg(long, default_value_t = 64, value_parser = parse_width)]
        cube_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic training cubes as PLY files.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 16, value_parser = parse_width)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print header fields and per-cube bit accounting.
    Info {
        #[arg(long)]
        input: PathBuf,
    },
}

fn parse_width(s: &str) -> std::result::Result<usize, String> {
    let w: usize = s.parse().map_err(|_| format!("'{s}' is not an integer"))?;
    if w < 2 || !w.is_power_of_two() || w > 1 << 10 {
        return Err(format!("cube size must be a power of two in [2, 1024], got {w}"));
    }
    Ok(w)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::File { path: path.into(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| CliError::File { path: path.into(), source })
}

fn load_model(path: &Path) -> Result<ModelF64> {
    Ok(ModelF64::from_bytes(&read(path)?)?)
}

fn parse_scale(s: &str) -> Result<ScaleConfig> {
    ScaleConfig::parse(s).map_err(|e| CliError::Usage(e.to_string()))
}

fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = String::from_utf8(read(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let bad = |e: String| CliError::Usage(format!("{}: {e}", path.display()));
    let cfg: TrainConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?,
        Some("toml") => toml::from_str(&text).map_err(|e| bad(e.to_string()))?,
        _ => return Err(CliError::Usage(format!("{}: expected a .toml or .json config", path.display()))),
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Encode {
            input,
            model,
            scale,
            cube_size,
            output,
            rho_metric,
            no_hyperprior,
        } => {
            let mut opts = EncodeOptions::new(parse_scale(&scale)?, cube_size);
            opts.coding = if no_hyperprior { LatentCoding::Factorized } else { LatentCoding::Hyperprior };
            opts.rho_metric = rho_metric.map(|m| match m {
                RhoArg::D1 => RhoMetric::D1,
                RhoArg::D2 => RhoMetric::D2,
            });
            let model: ModelF32 = load_model(&model)?.cast();
            model
                .config()
                .check_width(cube_size)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let points = parse_ply(&read(&input)?)?;
            let bs = encode_pointcloud(&points, &model, &opts)?;
            write(&output, &bs.to_bytes()?)?;
            let acc = bs.accounting()?;
            println!("bpp {:.6}", acc.total_bits() as f64 / points.len() as f64);
            println!("meta_bits {}", acc.meta_bits());
            println!("payload_bits {}", acc.payload_bits);
        }
        Command::Decode { input, model, output } => {
            let model: ModelF32 = load_model(&model)?.cast();
            let bs = Bitstream::from_bytes(&read(&input)?)?;
            let points = decode_pointcloud(&bs, &model)?;
            write(&output, &write_ply(&points))?;
            println!("points {}", points.len());
        }
        Command::Train {
            config,
            out,
            init,
            curve,
            data_seed,
            count,
        } => {
            let cfg = load_train_config(&config)?;
            let init = init.map(|p| load_model(&p)).transpose()?;
            let data = gen_synthetic_dataset(data_seed, count, cfg.width)?;
            let heldout = gen_synthetic_dataset(data_seed.wrapping_add(1), count.div_ceil(10), cfg.width)?;
            let outcome = train(&cfg, &data, &heldout, init.as_ref())?;
            write(&out, &outcome.model.to_bytes())?;
            if let Some(path) = curve {
                write(&path, loss_curve_csv(&outcome.curve).as_bytes())?;
            }
            if let Some((step, l)) = outcome.evals.last() {
                println!("step {step} R_y {:.3} R_z {:.3} D {:.5} J {:.3}", l.r_y, l.r_z, l.d, l.j);
            }
        }
        Command::Eval {
            models,
            lambdas,
            corpus,
            scales,
            cube_size,
            out,
        } => {
            if !lambdas.is_empty() && lambdas.len() != models.len() {
                return Err(CliError::Usage(format!(
                    "{} --lambda values for {} --model checkpoints",
                    lambdas.len(),
                    models.len()
                )));
            }
            let scales = scales.iter().map(|s| parse_scale(s)).collect::<Result<Vec<_>>>()?;
            let loaded = models
                .iter()
                .map(|p| load_model(p).map(|m| m.cast::<f32>()))
                .collect::<Result<Vec<_>>>()?;
            let runs: Vec<RunModel<f32>> = loaded
                .iter()
                .enumerate()
                .map(|(i, model)| RunModel {
                    model,
                    lambda: lambdas.get(i).copied(),
                })
                .collect();
            let clouds = read_corpus(&corpus)?;
            let rows = eval_run(&runs, &clouds, &scales, &EncodeOptions::new(ScaleConfig::identity(), cube_size))?;
            write(&out, rd_table_csv(&rows).as_bytes())?;
            println!("rows {}", rows.len());
        }
        Command::GenData { seed, count, width, out } => {
            fs::create_dir_all(&out).map_err(|source| CliError::File { path: out.clone(), source })?;
            let precision = width.trailing_zeros() as u8;
            for (i, sample) in gen_synthetic_dataset(seed, count, width)?.iter().enumerate() {
                let points = sample
                    .to_cube()
                    .occupied_local()
                    .iter()
                    .map(|l| l.map(i64::from))
                    .collect();
                write(
                    &out.join(format!("cube_{i:05}.ply")),
                    &write_ply(&PointSet::new(points, precision)),
                )?;
            }
            println!("cubes {count}");
        }
        Command::Info { input } => {
            print!("{}", Bitstream::from_bytes(&read(&input)?)?.describe()?);
        }
    }
    Ok(())
}

/// Every `.ply` file of `dir`, sorted by name.
fn read_corpus(dir: &Path) -> Result<Vec<(String, PointSet)>> {
    let entries = fs::read_dir(dir).map_err(|source| CliError::File { path: dir.into(), source })?;
    let mut paths = Vec::new();
    for e in entries {
        let path = e.map_err(|source| CliError::File { path: dir.into(), source })?.path();
        if path.extension().is_some_and(|x| x == "ply") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no .ply files in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, parse_ply(&read(&p)?)?))
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

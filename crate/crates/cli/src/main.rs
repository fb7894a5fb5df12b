mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rls_core::bench::{
    fcn_grad_check, fcn_init, run_benchmark, ClsMethod, FcnMethod, FcnModel, FcnParams, RlsMethod, Segmenter,
    METHODS,
};
use rls_core::pgm::{read_pgm, write_pgm};
use rls_core::rls::{init_params, Parameterization, ParamSet, RlsConfig};
use rls_core::synth::{build_dataset, load_dataset, sha256_hex, write_dataset, Dataset, MANIFEST_FILE};
use rls_core::train::{
    fit, grad_check, load_opt_state, save_opt_state, BpttMode, GradCheckReport, History, HistoryRow, Model,
    OptState, RlsModel, Trainable, TrainConfig,
};
use rls_core::Field;

use crate::config::{write_run_meta, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Check(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Shape(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Shape(_) => 4,
        }
    }
}

impl From<rls_core::Error> for CliError {
    fn from(e: rls_core::Error) -> Self {
        use rls_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Dimension(_) => CliError::Shape(msg),
            E::Io { .. } | E::Format { .. } => CliError::Io(msg),
            E::Config(_) | E::Invalid(_) | E::EmptyDataset => CliError::Usage(msg),
        }
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Parser)]
#[command(name = "rls", version, about = "Level-set segmentation: data generation, training and evaluation")]
struct Cli {
    /// Worker threads for parallel sections (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Rls,
    Fcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodKind {
    Cls,
    Rls,
    Fcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Truncated,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on the train split of a dataset.
    Train {
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Total epoch count, overriding the config.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the checkpoint already in --out.
        #[arg(long)]
        resume: bool,
        /// Score the test split after every epoch.
        #[arg(long)]
        validate: bool,
    },
    /// Segment one PGM image.
    Segment {
        #[arg(long, value_enum)]
        method: MethodKind,
        #[arg(long)]
        input: PathBuf,
        /// Parameter file or checkpoint directory.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark methods on the test split and write a CSV report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated; defaults to the bench section of the config.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        rls_ckpt: Option<PathBuf>,
        #[arg(long)]
        fcn_ckpt: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "truncated")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "rls")]
        model: ModelKind,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        diagonal: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { config, out, force } => gen_data(config.as_deref(), &out, force),
        Command::Train {
            model,
            data,
            config,
            out,
            epochs,
            resume,
            validate,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            train(model, &data, &cfg, &out, resume, validate)
        }
        Command::Segment {
            method,
            input,
            ckpt,
            config,
            out,
        } => segment_one(method, &input, ckpt.as_deref(), config.as_deref(), &out),
        Command::Eval {
            data,
            methods,
            out,
            config,
            rls_ckpt,
            fcn_ckpt,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(m) = methods {
                cfg.bench.methods = m.into_iter().map(|s| s.trim().to_string()).collect();
            }
            cfg.validate()?;
            eval(&data, &cfg, &out, rls_ckpt.as_deref(), fcn_ckpt.as_deref())
        }
        Command::Gradcheck {
            mode,
            model,
            size,
            steps,
            seed,
            h,
            tol,
            diagonal,
        } => gradcheck(mode, model, size, steps, seed, h, tol, diagonal),
    }
}

fn gen_data(config: Option<&Path>, out: &Path, force: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    if !force {
        if let Ok(mut entries) = std::fs::read_dir(out) {
            if entries.next().is_some() {
                return Err(CliError::Io(format!(
                    "{} exists and is not empty; pass --force to overwrite",
                    out.display()
                )));
            }
        }
    }
    create_dir(out)?;
    let ds = build_dataset(&cfg.data)?;
    write_dataset(&ds, out)?;
    write_run_meta(out, "gen-data", &cfg)?;
    println!("train {} test {}", ds.train.len(), ds.test.len());
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(CliError::Io(format!("{}: no {MANIFEST_FILE}", dir.display())));
    }
    Ok(load_dataset(dir)?)
}

fn check_grid(ds: &Dataset, height: usize, width: usize) -> Result<(), CliError> {
    let got = ds.train.iter().chain(&ds.test).map(|s| s.image.shape()).next();
    match got {
        Some(shape) if shape != (height, width) => Err(CliError::Shape(format!(
            "model grid is {height}x{width} but the dataset holds {}x{} images",
            shape.0, shape.1
        ))),
        _ => Ok(()),
    }
}

fn params_path(ckpt: &Path) -> PathBuf {
    if ckpt.is_dir() {
        ckpt.join("params.bin")
    } else {
        ckpt.to_path_buf()
    }
}

fn train(
    kind: ModelKind,
    data: &Path,
    cfg: &RunConfig,
    out: &Path,
    resume: bool,
    validate: bool,
) -> Result<(), CliError> {
    cfg.validate()?;
    let ds = load_data(data)?;
    create_dir(out)?;
    match kind {
        ModelKind::Rls => {
            check_grid(&ds, cfg.rls.height, cfg.rls.width)?;
            let model = RlsModel {
                cfg: cfg.rls.clone(),
                mode: cfg.train.bptt,
            };
            let params = if resume {
                let (p, steps) = ParamSet::load(out.join("params.bin"))?;
                if steps != cfg.rls.steps || p.height != cfg.rls.height || p.width != cfg.rls.width {
                    return Err(CliError::Shape("checkpoint does not match the rls config".into()));
                }
                p
            } else {
                init_params(&cfg.rls)
            };
            run_training(&model, params, &ds, cfg, out, resume, validate, |p, path| {
                p.save(cfg.rls.steps, path)
            })
        }
        ModelKind::Fcn => {
            let fcn_cfg = cfg.fcn_config();
            check_grid(&ds, fcn_cfg.height, fcn_cfg.width)?;
            let model = FcnModel {
                height: fcn_cfg.height,
                width: fcn_cfg.width,
            };
            let params = if resume {
                let p = FcnParams::load(out.join("params.bin"))?;
                if p.height != fcn_cfg.height || p.width != fcn_cfg.width || p.hidden() != fcn_cfg.hidden_units() {
                    return Err(CliError::Shape("checkpoint does not match the fcn config".into()));
                }
                p
            } else {
                fcn_init(&fcn_cfg)
            };
            run_training(&model, params, &ds, cfg, out, resume, validate, |p, path| p.save(path))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_training<M>(
    model: &M,
    mut params: M::Params,
    ds: &Dataset,
    cfg: &RunConfig,
    out: &Path,
    resume: bool,
    validate: bool,
    save: impl Fn(&M::Params, &Path) -> rls_core::Result<()>,
) -> Result<(), CliError>
where
    M: Model,
    M::Params: Trainable,
{
    let tc: &TrainConfig = &cfg.train;
    let (opt_json, opt_bin, hist) = (
        out.join("opt_state.json"),
        out.join("opt_state.bin"),
        out.join("history.csv"),
    );
    let (mut opt, mut history_text) = if resume {
        let opt = load_opt_state(&params, &opt_json, &opt_bin)?;
        let text = std::fs::read_to_string(&hist).map_err(|e| CliError::Io(format!("{}: {e}", hist.display())))?;
        println!("resuming at epoch {}", opt.epoch);
        (opt, text)
    } else {
        (OptState::new(&params), History::default().to_csv())
    };
    let validation = validate.then_some(ds.test.as_slice());
    let history = fit(model, &mut params, &mut opt, &ds.train, tc, validation, |row: &HistoryRow| {
        match row.val_fmeasure {
            Some(f) => println!("epoch {} lr {:e} loss {:.6} val_f {:.4}", row.epoch, row.lr, row.mean_loss, f),
            None => println!("epoch {} lr {:e} loss {:.6}", row.epoch, row.lr, row.mean_loss),
        }
    })?;
    for line in history.to_csv().lines().skip(1) {
        history_text.push_str(line);
        history_text.push('\n');
    }
    save(&params, &out.join("params.bin"))?;
    save_opt_state(&opt, &params, tc, &opt_json, &opt_bin)?;
    write_file(&hist, history_text.as_bytes())?;
    write_file(&out.join("config.json"), cfg.to_json().as_bytes())?;
    write_run_meta(out, "train", cfg)
}

fn load_rls(ckpt: Option<&Path>, cfg: &RunConfig) -> Result<RlsMethod, CliError> {
    let ckpt = ckpt.ok_or_else(|| CliError::Usage("the rls method needs --ckpt".into()))?;
    let (params, steps) = ParamSet::load(params_path(ckpt))?;
    let rls_cfg = RlsConfig {
        height: params.height,
        width: params.width,
        steps,
        ..cfg.rls.clone()
    };
    Ok(RlsMethod { params, cfg: rls_cfg })
}

fn load_fcn(ckpt: Option<&Path>) -> Result<FcnMethod, CliError> {
    let ckpt = ckpt.ok_or_else(|| CliError::Usage("the fcn method needs --ckpt".into()))?;
    Ok(FcnMethod(FcnParams::load(params_path(ckpt))?))
}

fn segment_one(
    method: MethodKind,
    input: &Path,
    ckpt: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let method: Box<dyn Segmenter> = match method {
        MethodKind::Cls => Box::new(ClsMethod(cfg.cls.clone())),
        MethodKind::Rls => Box::new(load_rls(ckpt, &cfg)?),
        MethodKind::Fcn => Box::new(load_fcn(ckpt)?),
    };
    let image: Field = read_pgm(input)?;
    let start = Instant::now();
    let mask = method.segment(&image)?;
    println!("inference {:.6} s", start.elapsed().as_secs_f64());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    Ok(write_pgm(&mask, out)?)
}

fn eval(
    data: &Path,
    cfg: &RunConfig,
    out: &Path,
    rls_ckpt: Option<&Path>,
    fcn_ckpt: Option<&Path>,
) -> Result<(), CliError> {
    if cfg.bench.methods.is_empty() {
        return Err(CliError::Usage(format!(
            "no methods given; valid methods are {}",
            METHODS.join(", ")
        )));
    }
    let mut owned: Vec<Box<dyn Segmenter>> = Vec::new();
    for m in &cfg.bench.methods {
        owned.push(match m.as_str() {
            "cls" => Box::new(ClsMethod(cfg.cls.clone())),
            "rls" => Box::new(load_rls(rls_ckpt, cfg)?),
            "fcn" => Box::new(load_fcn(fcn_ckpt)?),
            other => unreachable!("validated method {other}"),
        });
    }
    let ds = load_data(data)?;
    let manifest_bytes = std::fs::read(data.join(MANIFEST_FILE))
        .map_err(|e| CliError::Io(format!("{}: {e}", data.display())))?;
    let methods: Vec<&dyn Segmenter> = owned.iter().map(|b| b.as_ref()).collect();
    let report = run_benchmark(
        &ds.test,
        &methods,
        cfg.bench.timing_runs,
        &sha256_hex(&manifest_bytes),
        &cfg.digest(),
    )?;
    let dir = match out.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from("."),
    };
    create_dir(&dir)?;
    write_file(out, report.to_csv().as_bytes())?;
    report.write_masks(&ds.test, dir.join("masks"))?;
    write_file(&dir.join(MANIFEST_FILE), &manifest_bytes)?;
    write_run_meta(&dir, "eval", cfg)?;
    print!("{}", report.to_csv());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn gradcheck(
    mode: Mode,
    model: ModelKind,
    size: usize,
    steps: usize,
    seed: u64,
    h: f64,
    tol: f64,
    diagonal: bool,
) -> Result<(), CliError> {
    let report: GradCheckReport = match model {
        ModelKind::Rls => {
            let cfg = RlsConfig {
                height: size,
                width: size,
                steps,
                seed,
                parameterization: if diagonal {
                    Parameterization::Diagonal
                } else {
                    Parameterization::Dense
                },
                ..RlsConfig::default()
            };
            let mode = match mode {
                Mode::Truncated => BpttMode::Truncated,
                Mode::Full => BpttMode::Full,
            };
            grad_check(&cfg, mode, h, tol, seed)?
        }
        ModelKind::Fcn => fcn_grad_check(size, size, h, tol, seed)?,
    };
    for b in &report.blocks {
        println!(
            "{:<4} entries {:>7} max_rel_err {:.3e} max_abs_err {:.3e}",
            b.name, b.entries, b.max_rel_err, b.max_abs_err
        );
    }
    if report.passed {
        println!("PASS max_rel_err {:.3e} <= {:.0e}", report.max_rel_err(), tol);
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient check failed: max_rel_err {:.3e} > {:.0e}",
            report.max_rel_err(),
            tol
        )))
    }
}

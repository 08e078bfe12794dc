use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use mofs::checkpoint::Checkpoint;
use mofs::config::{Ablations, TrainConfig};
use mofs::data::{load_dataset, save_dataset, OperatorDataset, Variant};
use mofs::error::{MofsError, Result};
use mofs::eval::{self, Column};
use mofs::fusion::VisionSource;
use mofs::model::MofsModel;
use mofs::plots::{emit_plots, PlotInputs};
use mofs::pretrain;
use mofs::text::{HashEncoder, TextEncoder, DEFAULT_MAX_TOKENS};
use mofs::train::{self, Stage, TrainSet};

pub const DATA_EXT: &str = "mofsd";

#[derive(Parser)]
#[command(name = "mofs", version, about = "Multi-operator few-shot learning for PDE solution operators")]
struct Cli {
    /// JSON file mirroring TrainConfig; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Darcy,
    Ns,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    j: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    alpha_freq: Option<f64>,
    /// Epochs for the stage being run.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one operator family, or the whole default suite with --all.
    Generate {
        #[arg(long, value_enum, default_value = "darcy")]
        family: Family,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        ic_seed: u64,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write every default variant into this directory instead.
        #[arg(long, conflicts_with = "out")]
        all: Option<PathBuf>,
        #[arg(long, required_unless_present = "all")]
        out: Option<PathBuf>,
    },
    /// Masked reconstruction pretraining of the encoder.
    Pretrain {
        #[arg(long)]
        data_dir: PathBuf,
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1 or stage 2 meta-training.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        data_dir: PathBuf,
        /// Pretraining checkpoint (stage 1).
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Stage-1 checkpoint to continue from (stage 2).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        ablate: Option<String>,
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-operator-out comparison against the baselines.
    Eval {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        leave_out: Vec<String>,
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Leave-one-operator-out ablation table.
    Ablate {
        #[arg(long)]
        data_dir: PathBuf,
        /// Comma-separated flags, e.g. `no_text,no_memory`; the full table when absent.
        #[arg(long)]
        flags: Option<String>,
        #[arg(long)]
        leave_out: Vec<String>,
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Figure panels from checkpoints; missing ones are skipped.
    Plot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        stage2: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        j: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print a dataset's description and write its pooled text embedding.
    Describe {
        #[arg(long)]
        data: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    path.map_or_else(|| Ok(TrainConfig::default()), TrainConfig::load)
}

fn apply(cfg: &mut TrainConfig, o: &Overrides, stage_epochs: impl FnOnce(&mut TrainConfig) -> &mut usize) -> Result<()> {
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = o.$f { cfg.$f = v; })* };
    }
    set!(seed, grid, d, blocks, modes, j, lr, rho, alpha_freq);
    if let Some(e) = o.epochs {
        *stage_epochs(cfg) = e;
    }
    cfg.validate()
}

/// Every dataset file in `dir`, ordered by operator id.
fn load_dir(dir: &Path) -> Result<Vec<OperatorDataset>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == DATA_EXT) {
            out.push(load_dataset(&p)?);
        }
    }
    if out.is_empty() {
        return Err(MofsError::Config(format!("no .{DATA_EXT} files in {}", dir.display())));
    }
    out.sort_by(|a, b| (a.operator_id, &a.name).cmp(&(b.operator_id, &b.name)));
    if out.windows(2).any(|w| w[0].operator_id == w[1].operator_id) {
        warn!("duplicate operator ids in {}; renumbering by name", dir.display());
        out = out.into_iter().enumerate().map(|(k, d)| d.with_operator_id(k)).collect();
    }
    Ok(out)
}

/// Loads `dir` and takes the grid from the data unless `--grid` was given.
fn load_for(dir: &Path, cfg: &mut TrainConfig, o: &Overrides) -> Result<Vec<OperatorDataset>> {
    let data = load_dir(dir)?;
    if o.grid.is_none() {
        cfg.grid = data[0].dims().0;
        cfg.validate()?;
    }
    Ok(data)
}

fn text_encoder(cfg: &TrainConfig) -> HashEncoder {
    HashEncoder { d_bert: cfg.d_bert, max_tokens: DEFAULT_MAX_TOKENS }
}

fn write_report(report: &eval::EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    report.save(dir.join("report.csv"), dir.join("report.txt"))?;
    print!("{}", report.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg_path = cli.config.as_deref();
    match cli.cmd {
        Command::Generate { family, beta, ic_seed, n, size, seed, all, out } => {
            let ns = load_config(cfg_path)?.ns;
            if let Some(dir) = all {
                std::fs::create_dir_all(&dir)?;
                for ds in mofs::data::generate_suite(&mofs::data::default_variants(), n, size, seed, ns)? {
                    let p = dir.join(format!("{}.{DATA_EXT}", ds.name));
                    save_dataset(&ds, &p)?;
                    info!("wrote {}", p.display());
                }
                return Ok(());
            }
            let v = match family {
                Family::Darcy => Variant::Darcy { beta },
                Family::Ns => Variant::NavierStokes { ic_seed },
            };
            let out = out.expect("clap enforces --out");
            save_dataset(&v.generate(n, size, seed, ns)?, &out)?;
            info!("wrote {}", out.display());
        }
        Command::Pretrain { data_dir, o, out } => {
            let mut cfg = load_config(cfg_path)?;
            apply(&mut cfg, &o, |c| &mut c.pretrain_epochs)?;
            let data = load_for(&data_dir, &mut cfg, &o)?;
            let (ck, trace) = eval::pretrain_on(&data, &cfg)?;
            ck.save(&out)?;
            pretrain::write_trace_csv(&trace, out.with_extension("trace.csv"))?;
        }
        Command::Train { stage, data_dir, pretrained, init, ablate, o, out } => {
            let mut cfg = load_config(cfg_path)?;
            if let Some(f) = ablate {
                cfg.ablations = Ablations::parse(&f)?;
            }
            let stage = if stage == 1 { Stage::One } else { Stage::Two };
            apply(&mut cfg, &o, |c| if stage == Stage::One { &mut c.stage1_epochs } else { &mut c.stage2_epochs })?;
            let data = load_for(&data_dir, &mut cfg, &o)?;
            let text = text_encoder(&cfg);
            let mut model = match (stage, init) {
                (Stage::Two, Some(p)) => {
                    MofsModel::from_checkpoint(&Checkpoint::load(p)?, &VisionSource { weights: None, strict: cfg.strict_vision })?
                }
                (Stage::Two, None) => return Err(MofsError::Config("stage 2 needs --init <stage-1 checkpoint>".into())),
                (Stage::One, _) => {
                    let ck = pretrained.map(Checkpoint::load).transpose()?;
                    if ck.is_none() && !cfg.ablations.no_pretrain {
                        warn!("no --pretrained checkpoint; the encoder starts from random weights");
                    }
                    train::build_model(&cfg, &data, ck.as_ref(), &text)?
                }
            };
            let trace = train::train_stage(&mut model, &TrainSet::new(&data)?, &cfg, stage)?;
            model.to_checkpoint(serde_json::json!({ "stage": stage.number() })).save(&out)?;
            train::write_trace_csv(&trace, out.with_extension("trace.csv"))?;
        }
        Command::Eval { data_dir, leave_out, runs, o, out_dir } => {
            let mut cfg = load_config(cfg_path)?;
            if let Some(r) = runs {
                cfg.runs = r;
            }
            apply(&mut cfg, &o, |c| &mut c.stage2_epochs)?;
            let data = load_for(&data_dir, &mut cfg, &o)?;
            let report = eval::evaluate_leave_one_out(&data, &cfg, &Column::comparison(), &leave_out, &text_encoder(&cfg))?;
            write_report(&report, &out_dir)?;
        }
        Command::Ablate { data_dir, flags, leave_out, runs, o, out_dir } => {
            let mut cfg = load_config(cfg_path)?;
            if let Some(r) = runs {
                cfg.runs = r;
            }
            apply(&mut cfg, &o, |c| &mut c.stage2_epochs)?;
            let columns = match flags {
                Some(f) => {
                    let a = Ablations::parse(&f)?;
                    vec![Column::mofs(), Column::Mofs { label: a.label(), ablations: a }]
                }
                None => Column::ablation_table(),
            };
            let data = load_for(&data_dir, &mut cfg, &o)?;
            let report = eval::evaluate_leave_one_out(&data, &cfg, &columns, &leave_out, &text_encoder(&cfg))?;
            write_report(&report, &out_dir)?;
        }
        Command::Plot { data, test, pretrained, stage1, stage2, index, seed, j, out_dir } => {
            let load = |p: Option<PathBuf>, what: &str| -> Option<Checkpoint> {
                let p = p?;
                match Checkpoint::load(&p) {
                    Ok(ck) => Some(ck),
                    Err(e) => {
                        warn!("{what} checkpoint {}: {e}; skipping its panels", p.display());
                        None
                    }
                }
            };
            let (pre, s1, s2) = (load(pretrained, "pretraining"), load(stage1, "stage-1"), load(stage2, "stage-2"));
            let ds = load_dataset(&data)?;
            let test = test.map(load_dataset).transpose()?;
            let inputs = PlotInputs {
                pretrain: pre.as_ref(),
                stage1: s1.as_ref(),
                stage2: s2.as_ref(),
                dataset: &ds,
                test: test.as_ref(),
                index,
                seed,
                j,
            };
            for p in emit_plots(&inputs, &out_dir)? {
                println!("{}", p.display());
            }
        }
        Command::Describe { data } => {
            let ds = load_dataset(&data)?;
            println!("{}", ds.description_text);
            let cfg = load_config(cfg_path)?;
            let pooled = text_encoder(&cfg).encode(&ds.description_text).pooled();
            let bytes: Vec<u8> = pooled.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            let mut out = data.into_os_string();
            out.push(".textvec");
            std::fs::write(&out, bytes)?;
        }
    }
    Ok(())
}

fn exit_code(e: &MofsError) -> u8 {
    match e {
        _ if e.is_numerical() => 3,
        MofsError::Config(_) | MofsError::Shape(_) | MofsError::UnknownOperator(_) | MofsError::NoDemonstrations => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `ddad` command-line tool.
//!
//! Each command resolves its configuration from, in increasing precedence: built-in defaults,
//! the run descriptor left in `--out` by an earlier command, `--config <file.toml>`, and flags.
//! The resolved configuration is written back to `<out>/run.json`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ddad::data::{generate_toy_corpus, Manifest, MANIFEST_FILE};
use ddad::nets::Backbone;
use ddad::pipeline::{self, Models, RunConfig, EVAL_DIR, RUN_DESCRIPTOR, SPLITS_FILE};
use ddad::scoring::{parse_kinds, SigmaAgg};
use ddad::training::ModuleTag;
use ddad::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ddad", version, about = "Dual-distribution discrepancy anomaly detection")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every other seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Validate and print the resolved plan without touching the filesystem.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Log debug output.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override configuration fields.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    side: Option<usize>,
    #[arg(long, global = true)]
    backbone: Option<Backbone>,
    /// Ensemble size K.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Stage-1 epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Stage-1 learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    asr_epochs: Option<usize>,
    #[arg(long, global = true)]
    asr_lr: Option<f64>,
    /// Focal-loss focusing parameter.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    pairs_per_epoch: Option<usize>,
    #[arg(long, global = true)]
    anomaly_ratio: Option<f64>,
    #[arg(long, global = true)]
    n_normal: Option<usize>,
    #[arg(long, global = true)]
    n_unlabeled: Option<usize>,
    #[arg(long, global = true)]
    n_test_normal: Option<usize>,
    #[arg(long, global = true)]
    n_test_abnormal: Option<usize>,
    /// σ pooling across AE-U members (var_mean | std_mean).
    #[arg(long, global = true)]
    sigma_agg: Option<SigmaAgg>,
    /// Histogram bins.
    #[arg(long, global = true)]
    bins: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a toy corpus or validate an existing one, then write the splits.
    Prepare(PrepareArgs),
    /// Train the NDM and/or UDM ensembles.
    TrainStage1 {
        #[arg(long, value_enum, default_value_t = ModuleArg::Both)]
        module: ModuleArg,
    },
    /// Train the refinement networks on synthetic anomalies.
    TrainAsr {
        /// Train only the intra-only network.
        #[arg(long, conflicts_with = "dual_only")]
        intra_only: bool,
        /// Train only the dual network.
        #[arg(long)]
        dual_only: bool,
    },
    /// Score the test split and write reports.
    Eval {
        /// Comma-separated score kinds (default: every kind the trained models support).
        #[arg(long)]
        kinds: Option<String>,
        /// Write one 16-bit map image per test image and kind.
        #[arg(long)]
        export_maps: bool,
        /// Run an anomaly-ratio sweep instead, e.g. 0,0.2,0.4,0.6,0.8,1.0.
        #[arg(long)]
        sweep_ar: Option<String>,
    },
    /// Retrain the UDM and dual refiner per anomaly ratio and tabulate the metrics.
    SweepAr {
        /// Comma-separated anomaly ratios.
        #[arg(long, default_value = "0,0.2,0.4,0.6,0.8,1.0")]
        values: String,
        #[arg(long)]
        kinds: Option<String>,
    },
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Generate a procedural toy corpus under `<out>/corpus`.
    #[arg(long, conflicts_with = "source")]
    toy: bool,
    #[arg(long, default_value_t = 1800, requires = "toy")]
    normal: usize,
    #[arg(long, default_value_t = 800, requires = "toy")]
    abnormal: usize,
    /// Directory holding a `manifest.csv`.
    #[arg(long)]
    source: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModuleArg {
    Ndm,
    Udm,
    Both,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_target(false).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let out = cli.out.clone();
    let mut cfg = match (&cli.config, &out) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(dir)) if dir.join(RUN_DESCRIPTOR).exists() => pipeline::read_run_descriptor(dir)?.config,
        _ => RunConfig::default(),
    };
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let o = &cli.overrides;
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value.clone() {
                $field = v;
            }
        };
    }
    set!(cfg.manifest, o.manifest);
    set!(cfg.net.side, o.side);
    set!(cfg.net.backbone, o.backbone);
    set!(cfg.stage1.k, o.k);
    set!(cfg.stage1.epochs, o.epochs);
    set!(cfg.stage1.learning_rate, o.lr);
    set!(cfg.stage1.batch_size, o.batch_size);
    set!(cfg.asr.epochs, o.asr_epochs);
    set!(cfg.asr.learning_rate, o.asr_lr);
    set!(cfg.asr.gamma, o.gamma);
    set!(cfg.eval.sigma_agg, o.sigma_agg);
    set!(cfg.eval.bins, o.bins);
    if o.pairs_per_epoch.is_some() {
        cfg.asr.pairs_per_epoch = o.pairs_per_epoch;
    }
    if o.anomaly_ratio.is_some() {
        cfg.split.anomaly_ratio = o.anomaly_ratio;
    }
    for (field, value) in [
        (&mut cfg.split.n_normal, o.n_normal),
        (&mut cfg.split.n_unlabeled, o.n_unlabeled),
        (&mut cfg.split.n_test_normal, o.n_test_normal),
        (&mut cfg.split.n_test_abnormal, o.n_test_abnormal),
    ] {
        if value.is_some() {
            *field = value;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_ratios(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::validation(format!("bad anomaly ratio {s:?}: {e}"))))
        .collect()
}

fn print_plan(cfg: &RunConfig, steps: &[String]) {
    println!("# plan");
    for s in steps {
        println!("#   {s}");
    }
    println!("# config_digest = {}", cfg.digest());
    print!("{}", cfg.to_toml());
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::validation(format!("{what} {} does not exist", path.display())))
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    let out = cfg.out_dir.display().to_string();
    match &cli.command {
        Command::Prepare(args) => {
            if args.toy {
                cfg.manifest = cfg.out_dir.join("corpus").join(MANIFEST_FILE);
            } else if let Some(src) = &args.source {
                if !src.is_dir() {
                    return Err(Error::validation(format!("source directory {} does not exist", src.display())));
                }
                cfg.manifest = src.join(MANIFEST_FILE);
            }
            if cli.dry_run {
                let mut steps = Vec::new();
                if args.toy {
                    steps.push(format!(
                        "generate toy corpus: {} normal, {} abnormal, side {} -> {}",
                        args.normal,
                        args.abnormal,
                        cfg.net.side,
                        cfg.manifest.display()
                    ));
                } else {
                    require_file(&cfg.manifest, "manifest")?;
                    Manifest::load(&cfg.manifest)?;
                }
                steps.push(format!("write {out}/{SPLITS_FILE}"));
                print_plan(&cfg, &steps);
                return Ok(());
            }
            if args.toy {
                let dir = cfg.manifest.parent().expect("corpus dir").to_path_buf();
                generate_toy_corpus(&dir, args.normal, args.abnormal, cfg.net.side, cfg.seed)?;
            } else {
                require_file(&cfg.manifest, "manifest")?;
            }
            pipeline::write_run_descriptor(&cfg, "prepare")?;
            let split = pipeline::prepare(&cfg)?;
            println!(
                "prepared {}: {} normal, {} unlabeled, {} test",
                cfg.path(SPLITS_FILE).display(),
                split.normal.len(),
                split.unlabeled.len(),
                split.test.len()
            );
        }
        Command::TrainStage1 { module } => {
            let tags: Vec<ModuleTag> = match module {
                ModuleArg::Ndm => vec![ModuleTag::Ndm],
                ModuleArg::Udm => vec![ModuleTag::Udm],
                ModuleArg::Both => vec![ModuleTag::Ndm, ModuleTag::Udm],
            };
            if cli.dry_run {
                let split = pipeline::load_split(&cfg)?;
                let steps: Vec<String> = tags
                    .iter()
                    .map(|t| {
                        let n = match t {
                            ModuleTag::Ndm => split.normal.len(),
                            ModuleTag::Udm => split.normal.len() + split.unlabeled.len(),
                        };
                        format!(
                            "train {} (K={}, {} epochs) on {n} images -> {out}/{}",
                            t.dir_name(),
                            cfg.stage1.k,
                            cfg.stage1.epochs,
                            t.dir_name()
                        )
                    })
                    .collect();
                print_plan(&cfg, &steps);
                return Ok(());
            }
            let split = pipeline::load_split(&cfg)?;
            pipeline::write_run_descriptor(&cfg, "train-stage1")?;
            for tag in tags {
                pipeline::train_module(&cfg, &split, tag, &cfg.out_dir)?;
                println!("trained {}", cfg.path(tag.dir_name()).display());
            }
        }
        Command::TrainAsr { intra_only, dual_only } => {
            let split = pipeline::load_split(&cfg)?;
            let ndm_dir = cfg.path(ModuleTag::Ndm.dir_name());
            let udm_dir = cfg.path(ModuleTag::Udm.dir_name());
            if !ndm_dir.exists() {
                return Err(Error::validation(format!("{} not found; run `train-stage1` first", ndm_dir.display())));
            }
            let want_dual = !intra_only;
            if want_dual && !udm_dir.exists() {
                return Err(Error::validation(format!(
                    "{} not found; train the UDM or pass --intra-only",
                    udm_dir.display()
                )));
            }
            if cli.dry_run {
                let mut steps = Vec::new();
                if want_dual {
                    steps.push(format!(
                        "train dual refinement network ({} epochs) -> {out}/{}",
                        cfg.asr.epochs,
                        pipeline::ASR_DUAL_DIR
                    ));
                }
                if !dual_only {
                    steps.push(format!("train intra-only refinement network -> {out}/{}", pipeline::ASR_INTRA_DIR));
                }
                print_plan(&cfg, &steps);
                return Ok(());
            }
            pipeline::write_run_descriptor(&cfg, "train-asr")?;
            let ndm = pipeline::load_module(&cfg.out_dir, ModuleTag::Ndm)?;
            let udm = if want_dual { Some(pipeline::load_module(&cfg.out_dir, ModuleTag::Udm)?) } else { None };
            pipeline::train_refiners(&cfg, &split, &ndm, udm.as_ref(), !dual_only, &cfg.out_dir)?;
            println!("trained refinement networks under {out}");
        }
        Command::Eval { kinds, export_maps, sweep_ar } => {
            if let Some(k) = kinds {
                cfg.eval.kinds = parse_kinds(k)?;
            }
            cfg.eval.export_maps |= *export_maps;
            if let Some(list) = sweep_ar {
                return sweep(&cfg, &parse_ratios(list)?, cli.dry_run);
            }
            let split = pipeline::load_split(&cfg)?;
            let models = Models::load(&cfg.out_dir)?;
            if kinds.is_none() {
                cfg.eval.kinds.retain(|k| match k {
                    ddad::scoring::ScoreKind::AInter => models.udm.is_some(),
                    ddad::scoring::ScoreKind::RDual => models.r_dual.is_some(),
                    ddad::scoring::ScoreKind::RIntra => models.r_intra.is_some(),
                    _ => true,
                });
            }
            if cli.dry_run {
                let names: Vec<&str> = cfg.eval.kinds.iter().map(|k| k.as_str()).collect();
                print_plan(
                    &cfg,
                    &[format!("score {} test images with {} -> {out}/{EVAL_DIR}", split.test.len(), names.join(","))],
                );
                return Ok(());
            }
            pipeline::write_run_descriptor(&cfg, "eval")?;
            let res = pipeline::evaluate(&cfg, &split, &models, &cfg.eval.kinds, &cfg.path(EVAL_DIR))?;
            print!("{}", ddad::eval::report_table_text(&res.report));
        }
        Command::SweepAr { values, kinds } => {
            if let Some(k) = kinds {
                cfg.eval.kinds = parse_kinds(k)?;
            }
            return sweep(&cfg, &parse_ratios(values)?, cli.dry_run);
        }
    }
    Ok(())
}

fn sweep(cfg: &RunConfig, ratios: &[f64], dry_run: bool) -> Result<()> {
    require_file(&cfg.manifest, "manifest")?;
    if let Some(bad) = ratios.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::validation(format!("anomaly ratio {bad} outside [0, 1]")));
    }
    if dry_run {
        let steps: Vec<String> = std::iter::once("train NDM once".to_string())
            .chain(ratios.iter().map(|a| format!("AR {a}: rebuild D_u, train UDM and dual refiner, evaluate")))
            .collect();
        print_plan(cfg, &steps);
        return Ok(());
    }
    pipeline::write_run_descriptor(cfg, "sweep-ar")?;
    let table = pipeline::ar_sweep(cfg, ratios)?;
    print!("{}", ddad::eval::sweep_table_text(&table));
    Ok(())
}

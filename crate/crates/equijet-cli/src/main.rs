//! `equijet`: generate toy jet datasets, train and evaluate taggers, run
//! self-verification, and sweep the architecture ablation ladder.

mod config;
mod dataset;
mod train;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::{parse_class, FileConfig};
use equijet_core::datagen::generate_events;
use equijet_core::metrics::{median_iqr, roc_summary, RocSummary};
use equijet_core::models::ModelConfig;
use equijet_core::verify;
use equijet_core::{build_model, JetEvent, ModelClass};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "equijet", version, about = "Rotation-equivariant jet tagging workflows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by all subcommands.
#[derive(Args, Clone)]
struct Common {
    /// Sectioned TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base RNG seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

/// Flags overriding the `[model]` config section.
#[derive(Args, Clone)]
struct ModelFlags {
    /// Model class: baseline, vector, or tensor.
    #[arg(long)]
    model: Option<String>,
    /// Enable or disable bilinear mixing layers.
    #[arg(long)]
    bilinear: Option<bool>,
    /// Enable or disable the axis-equivariant linear layers.
    #[arg(long)]
    so2: Option<bool>,
}

/// Flags overriding the `[train]` config section.
#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Randomly rotate each training batch about the beam axis.
    #[arg(long)]
    augment: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/validation/test datasets.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on generated datasets.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Directory holding train.bin / val.bin (defaults to --out).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue a previous run from its last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (defaults to <out>/run/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory holding test.bin (defaults to --out).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the equivariance, gradient, and generator self-checks.
    Check {
        #[command(flatten)]
        common: Common,
    },
    /// Train the model ladder across seeds and tabulate median metrics.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Directory holding train.bin / val.bin / test.bin (defaults to --out).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training runs per ladder row.
        #[arg(long)]
        seeds: Option<usize>,
        /// Comma-separated subset of ladder rows to run.
        #[arg(long)]
        rows: Option<String>,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { common } => cmd_gen(&common),
        Command::Train { common, model, train, data, resume } => {
            cmd_train(&common, &model, &train, data.as_deref(), resume)
        }
        Command::Eval { common, checkpoint, data } => {
            cmd_eval(&common, checkpoint.as_deref(), data.as_deref())
        }
        Command::Check { common } => cmd_check(&common),
        Command::Ablate { common, train, data, seeds, rows } => {
            cmd_ablate(&common, &train, data.as_deref(), seeds, rows.as_deref())
        }
    }
}

/// Derives a well-separated stream seed for a named purpose.
fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined value.
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn resolved_train(file: &FileConfig, flags: &TrainFlags) -> config::TrainSection {
    let mut t = file.train.clone();
    if let Some(e) = flags.epochs {
        t.epochs = e;
    }
    if let Some(b) = flags.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = flags.lr {
        t.lr = lr;
    }
    if flags.augment {
        t.augment = true;
    }
    t
}

fn resolved_model(file: &FileConfig, flags: &ModelFlags, seed: u64) -> Result<ModelConfig> {
    let mut m = file.model.clone();
    if let Some(class) = &flags.model {
        parse_class(class)?;
        m.class = class.clone();
    }
    if let Some(b) = flags.bilinear {
        m.bilinear = b;
    }
    if let Some(s) = flags.so2 {
        m.so2 = s;
    }
    m.to_model_config(seed)
}

fn cmd_gen(common: &Common) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    std::fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;

    let splits = [
        ("train.bin", file.gen.n_train, 1u64),
        ("val.bin", file.gen.n_val, 2),
        ("test.bin", file.gen.n_test, 3),
    ];
    for (name, n, stream) in splits {
        let cfg = file.gen.to_gen_config(derive_seed(common.seed, stream));
        cfg.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        let events = generate_events(&cfg, n);
        let path = common.out.join(name);
        dataset::write_dataset(&path, &events)?;
        let n_sig = events.iter().filter(|e| e.label == 1).count();
        println!("wrote {} ({n} events, {n_sig} signal)", path.display());
    }
    file.save(&common.out.join("gen-config.toml"))?;
    Ok(())
}

fn load_split(dir: &Path, name: &str) -> Result<Vec<JetEvent>> {
    dataset::read_dataset(&dir.join(name))
}

fn cmd_train(
    common: &Common,
    model_flags: &ModelFlags,
    train_flags: &TrainFlags,
    data: Option<&Path>,
    resume: bool,
) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let data_dir = data.unwrap_or(&common.out);
    let train_events = load_split(data_dir, "train.bin")?;
    let val_events = load_split(data_dir, "val.bin")?;

    let model_cfg = resolved_model(&file, model_flags, common.seed)?;
    let params = resolved_train(&file, train_flags);
    let run_dir = common.out.join("run");
    std::fs::create_dir_all(&run_dir)?;

    let mut resolved = file.clone();
    resolved.model.class = match model_cfg.class {
        ModelClass::BaselinePfn => "baseline".into(),
        ModelClass::Vector => "vector".into(),
        ModelClass::Tensor => "tensor".into(),
    };
    resolved.model.bilinear = model_cfg.enable_bilinear;
    resolved.model.so2 = model_cfg.enable_so2;
    resolved.train = params.clone();
    resolved.save(&run_dir.join("run-config.toml"))?;

    let outcome = train::train_run(&model_cfg, &train_events, &val_events, &params, &run_dir, resume)?;
    println!(
        "trained {} epoch(s); best validation loss {:.6} at epoch {}{}",
        outcome.epochs_run,
        outcome.best_val_loss,
        outcome.best_epoch,
        if outcome.stopped_early { " (stopped early)" } else { "" },
    );
    println!("best checkpoint: {}", outcome.best_checkpoint.display());
    println!("metrics log: {}", run_dir.join("metrics.log").display());
    Ok(())
}

fn format_rejection(r: f64) -> String {
    if r.is_infinite() {
        "inf".into()
    } else {
        format!("{r:.4}")
    }
}

fn write_summary(dir: &Path, summary: &RocSummary) -> Result<()> {
    let mut text = format!("auc {:.6}\n", summary.auc);
    for (eff, rej) in &summary.rejections {
        let _ = writeln!(text, "rejection@{:.2} {}", eff, format_rejection(*rej));
    }
    std::fs::write(dir.join("summary.txt"), &text)?;

    let mut roc = String::from("# efficiency rejection\n");
    for (eff, rej) in &summary.curve {
        let _ = writeln!(roc, "{:.6} {}", eff, format_rejection(*rej));
    }
    std::fs::write(dir.join("roc.txt"), roc)?;
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let data_dir = data.unwrap_or(&common.out);
    let test_events = load_split(data_dir, "test.bin")?;
    let default_ckpt = common.out.join("run").join("model.ckpt");
    let ckpt = checkpoint.unwrap_or(&default_ckpt);
    let model = train::read_checkpoint(ckpt)?;

    let samples = train::score_events(&model, &test_events)?;
    let summary = roc_summary(&samples, &[0.7, 0.85]).map_err(|e| anyhow::anyhow!("{e}"))?;
    std::fs::create_dir_all(&common.out)?;
    write_summary(&common.out, &summary)?;

    println!("auc {:.6}", summary.auc);
    for (eff, rej) in &summary.rejections {
        println!("rejection@{:.2} {}", eff, format_rejection(*rej));
    }
    println!("wrote {} and {}", common.out.join("summary.txt").display(), common.out.join("roc.txt").display());
    Ok(())
}

fn cmd_check(common: &Common) -> Result<()> {
    let seed = common.seed;
    let gen_cfg = FileConfig::load(common.config.as_deref())?
        .gen
        .to_gen_config(derive_seed(seed, 7));
    let events = generate_events(&gen_cfg, 20);
    let labels: Vec<u8> = events.iter().map(|e| e.label).collect();
    let model_cfg = ModelConfig {
        class: ModelClass::Tensor,
        enable_bilinear: true,
        enable_so2: true,
        latent: 8,
        hidden: 32,
        rep_width: 4,
        seed: derive_seed(seed, 8),
    };
    let model = build_model(&model_cfg).map_err(|e| anyhow::anyhow!("{e}"))?;

    let mut report = verify::CheckReport::new();
    report.merge(verify::layer_equivariance_suite(100, derive_seed(seed, 9)));
    report.merge(verify::axis_layer_suite(100, derive_seed(seed, 10)));
    report.merge(verify::model_invariance_suite(&model, &events, 50, derive_seed(seed, 11)));
    report.merge(verify::gradient_audit(
        &model,
        &events[..4],
        &labels[..4],
        64,
        1e-5,
        derive_seed(seed, 12),
    ));
    let control_events = generate_events(&gen_cfg, 60);
    report.merge(verify::negative_controls(&model, &control_events, derive_seed(seed, 13)));

    let width = report.entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
    for e in &report.entries {
        println!(
            "{}  {:width$}  value {:11.4e}  bound {:9.2e}",
            if e.pass { "PASS" } else { "FAIL" },
            e.name,
            e.value,
            e.threshold,
        );
    }
    if report.all_passed() {
        println!("all {} checks passed", report.entries.len());
        Ok(())
    } else {
        bail!("{} check(s) failed", report.entries.iter().filter(|e| !e.pass).count());
    }
}

/// The ablation ladder: row name plus architecture settings.
const LADDER: [(&str, &str, bool, bool); 7] = [
    ("baseline", "baseline", false, false),
    ("vector", "vector", false, false),
    ("vector+BiL", "vector", true, false),
    ("vector+BiL+SO2", "vector", true, true),
    ("tensor", "tensor", false, false),
    ("tensor+BiL", "tensor", true, false),
    ("tensor+BiL+SO2", "tensor", true, true),
];

struct RowStats {
    name: &'static str,
    auc: (f64, f64),
    r70: (f64, f64),
    r85: (f64, f64),
}

fn median_pair(values: &[f64]) -> (f64, f64) {
    if values.iter().any(|v| v.is_infinite()) {
        // Medians stay meaningful when a minority of runs hit zero false
        // positives; an infinite median is reported as such.
        let mut sorted: Vec<f64> = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
        let med = sorted[sorted.len() / 2];
        return (med, f64::INFINITY);
    }
    median_iqr(values).expect("nonempty")
}

fn cmd_ablate(
    common: &Common,
    train_flags: &TrainFlags,
    data: Option<&Path>,
    seeds: Option<usize>,
    rows: Option<&str>,
) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let data_dir = data.unwrap_or(&common.out);
    let train_events = load_split(data_dir, "train.bin")?;
    let val_events = load_split(data_dir, "val.bin")?;
    let test_events = load_split(data_dir, "test.bin")?;

    let n_seeds = seeds.unwrap_or(file.ablate.seeds).max(1);
    let params = resolved_train(&file, train_flags);

    let selected: Vec<&(&str, &str, bool, bool)> = match rows {
        None => LADDER.iter().collect(),
        Some(list) => {
            let mut picked = Vec::new();
            for want in list.split(',') {
                let want = want.trim();
                let row = LADDER
                    .iter()
                    .find(|(name, ..)| *name == want)
                    .with_context(|| format!("unknown ladder row '{want}'"))?;
                picked.push(row);
            }
            picked
        }
    };

    std::fs::create_dir_all(&common.out)?;
    let mut runs_csv = String::from("row,seed,auc,r70,r85,best_epoch\n");
    let mut stats = Vec::new();

    for (name, class, bilinear, so2) in selected.iter().copied() {
        let mut aucs = Vec::new();
        let mut r70s = Vec::new();
        let mut r85s = Vec::new();
        for s in 0..n_seeds {
            let mut section = file.model.clone();
            section.class = (*class).into();
            section.bilinear = *bilinear;
            section.so2 = *so2;
            let model_cfg = section.to_model_config(derive_seed(common.seed, 100 + s as u64))?;
            let run_dir = common
                .out
                .join("ablate")
                .join(name.replace('+', "_"))
                .join(format!("seed{s}"));
            let outcome =
                train::train_run(&model_cfg, &train_events, &val_events, &params, &run_dir, false)?;
            let best = train::read_checkpoint(&outcome.best_checkpoint)?;
            let samples = train::score_events(&best, &test_events)?;
            let summary =
                roc_summary(&samples, &[0.7, 0.85]).map_err(|e| anyhow::anyhow!("{e}"))?;
            let (r70, r85) = (summary.rejections[0].1, summary.rejections[1].1);
            println!(
                "{name} seed {s}: auc {:.4} r70 {} r85 {} (best epoch {})",
                summary.auc,
                format_rejection(r70),
                format_rejection(r85),
                outcome.best_epoch,
            );
            let _ = writeln!(
                runs_csv,
                "{name},{s},{:.6},{},{},{}",
                summary.auc,
                format_rejection(r70),
                format_rejection(r85),
                outcome.best_epoch
            );
            aucs.push(summary.auc);
            r70s.push(r70);
            r85s.push(r85);
        }
        stats.push(RowStats {
            name,
            auc: median_pair(&aucs),
            r70: median_pair(&r70s),
            r85: median_pair(&r85s),
        });
    }

    let baseline_r70 = stats.iter().find(|s| s.name == "baseline").map(|s| s.r70.0);
    let mut table = format!(
        "{:<16} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>8}\n",
        "model", "auc", "auc_iqr", "r70", "r70_iqr", "r85", "r85_iqr", "impr70"
    );
    let mut record = String::from("row,median_auc,iqr_auc,median_r70,iqr_r70,median_r85,iqr_r85,improvement_r70\n");
    for s in &stats {
        let impr = match baseline_r70 {
            Some(base) if base.is_finite() && s.r70.0.is_finite() => {
                format!("{:+.3}", s.r70.0 / base - 1.0)
            }
            _ => "-".into(),
        };
        let _ = writeln!(
            table,
            "{:<16} {:>8.4} {:>8.4} {:>9} {:>9} {:>9} {:>9} {:>8}",
            s.name,
            s.auc.0,
            s.auc.1,
            format_rejection(s.r70.0),
            format_rejection(s.r70.1),
            format_rejection(s.r85.0),
            format_rejection(s.r85.1),
            impr,
        );
        let _ = writeln!(
            record,
            "{},{:.6},{:.6},{},{},{},{},{}",
            s.name,
            s.auc.0,
            s.auc.1,
            format_rejection(s.r70.0),
            format_rejection(s.r70.1),
            format_rejection(s.r85.0),
            format_rejection(s.r85.1),
            impr,
        );
    }
    print!("{table}");
    std::fs::write(common.out.join("ablation.txt"), &table)?;
    std::fs::write(common.out.join("ablation.csv"), &record)?;
    std::fs::write(common.out.join("runs.csv"), &runs_csv)?;
    println!(
        "wrote {}, {}, {}",
        common.out.join("ablation.txt").display(),
        common.out.join("ablation.csv").display(),
        common.out.join("runs.csv").display()
    );
    Ok(())
}

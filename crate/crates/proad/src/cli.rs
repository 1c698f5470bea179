//! Command-line harness: dataset synthesis, training, evaluation, the
//! ablation matrix, and the parameter ledger. Every run snapshots its
//! effective config into the output directory and is reproducible from
//! (config, seed).

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{write_text, Checkpoint};
use crate::config::RunConfig;
use crate::datagen::{self, generate_dataset, hash_tree, load_mvtec_layout, write_mvtec_layout};
use crate::decoder::count_parameters;
use crate::error::{ProadError, Result};
use crate::eval::{evaluate, EvalOutcome};
use crate::model::ProAdModel;
use crate::train::{train, ResumeState};

#[derive(Parser)]
#[command(name = "proad", version, about = "Prototype-guided reconstruction anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset in the MVTec-AD directory layout
    SynthData(SynthDataArgs),
    /// Train on the normal split of a dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split
    Eval(EvalArgs),
    /// Train and evaluate the four ablation rows under identical seeds
    Ablate(AblateArgs),
    /// Print the learnable-parameter ledger
    Params(ParamsArgs),
}

/// Config file plus per-field flag overrides; flags win over the file, the
/// file wins over defaults. PROAD_SEED is the seed of last resort.
#[derive(Args, Clone, Default)]
pub struct ConfigOverrides {
    /// Flat key = value config file applied before flags
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed (fallback: env PROAD_SEED, then 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image side length after loading (synthesis size)
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Encoder patch size
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Feature dimension C
    #[arg(long)]
    pub dim: Option<usize>,
    /// Frozen encoder depth
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    /// First encoder layer in the fusion range (1-based)
    #[arg(long)]
    pub fuse_from: Option<usize>,
    /// Last encoder layer in the fusion range (1-based)
    #[arg(long)]
    pub fuse_to: Option<usize>,
    /// Decoder layer count
    #[arg(long = "layers")]
    pub decoder_layers: Option<usize>,
    /// Prototype token count (defaults to the patch count)
    #[arg(long)]
    pub prototypes: Option<usize>,
    /// Attention activation: elu_plus_one or relu
    #[arg(long)]
    pub phi: Option<String>,
    /// Disable row normalization inside linear attention
    #[arg(long)]
    pub no_normalize: bool,
    /// Normalizer floor inside linear attention
    #[arg(long)]
    pub lca_eps: Option<f64>,
    /// Bottleneck dropout rate for image features
    #[arg(long)]
    pub drop_prob: Option<f64>,
    /// Run the bottleneck noise-free (ablation row)
    #[arg(long)]
    pub no_anb: bool,
    /// Freeze prototypes after the first update (static decoder)
    #[arg(long)]
    pub no_dynamic: bool,
    /// Drop the prototype-based constraint from reconstruction
    #[arg(long)]
    pub no_constraint: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Decay-loss exponent
    #[arg(long)]
    pub tau: Option<f64>,
    /// Optimizer per-tensor update-RMS clamp
    #[arg(long)]
    pub clip_threshold: Option<f64>,
    /// Synthetic dataset: number of classes
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_normal_per_class: Option<usize>,
    #[arg(long)]
    pub test_anomalous_per_class: Option<usize>,
    /// Comma-separated defect kinds (scratch, blob, color_patch,
    /// missing_part, misplacement)
    #[arg(long)]
    pub defects: Option<String>,
    /// Dataset seed, decoupled from the run seed
    #[arg(long)]
    pub data_seed: Option<u64>,
}

impl ConfigOverrides {
    /// Effective config: defaults ← PROAD_SEED ← file ← flags, then the
    /// prototype count snaps to the patch count unless set explicitly.
    pub fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Ok(env_seed) = std::env::var("PROAD_SEED") {
            cfg.seed = env_seed
                .parse()
                .map_err(|_| ProadError::Usage(format!("PROAD_SEED not a u64: '{env_seed}'")))?;
        }
        let mut file_keys: HashSet<String> = HashSet::new();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| ProadError::io(path, e))?;
            for line in text.lines() {
                if let Some((k, _)) = line.split_once('=') {
                    file_keys.insert(k.trim().to_string());
                }
            }
            cfg.apply_kv(&text)?;
        }
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
            Ok(())
        };
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("image_size", self.image_size.map(|v| v.to_string()))?;
        set("patch_size", self.patch_size.map(|v| v.to_string()))?;
        set("dim", self.dim.map(|v| v.to_string()))?;
        set("encoder_layers", self.encoder_layers.map(|v| v.to_string()))?;
        set("fuse_from", self.fuse_from.map(|v| v.to_string()))?;
        set("fuse_to", self.fuse_to.map(|v| v.to_string()))?;
        set("decoder_layers", self.decoder_layers.map(|v| v.to_string()))?;
        set("prototypes", self.prototypes.map(|v| v.to_string()))?;
        set("phi", self.phi.clone())?;
        set("lca_eps", self.lca_eps.map(|v| v.to_string()))?;
        set("drop_prob", self.drop_prob.map(|v| v.to_string()))?;
        set("epochs", self.epochs.map(|v| v.to_string()))?;
        set("batch_size", self.batch_size.map(|v| v.to_string()))?;
        set("lr", self.lr.map(|v| v.to_string()))?;
        set("weight_decay", self.weight_decay.map(|v| v.to_string()))?;
        set("warmup_epochs", self.warmup_epochs.map(|v| v.to_string()))?;
        set("tau", self.tau.map(|v| v.to_string()))?;
        set("clip_threshold", self.clip_threshold.map(|v| v.to_string()))?;
        set("num_classes", self.classes.map(|v| v.to_string()))?;
        set("train_per_class", self.train_per_class.map(|v| v.to_string()))?;
        set(
            "test_normal_per_class",
            self.test_normal_per_class.map(|v| v.to_string()),
        )?;
        set(
            "test_anomalous_per_class",
            self.test_anomalous_per_class.map(|v| v.to_string()),
        )?;
        set("defects", self.defects.clone())?;
        set("data_seed", self.data_seed.map(|v| v.to_string()))?;
        if self.no_normalize {
            cfg.model.normalize = false;
        }
        if self.no_anb {
            cfg.model.anb = false;
        }
        if self.no_dynamic {
            cfg.model.dynamic = false;
        }
        if self.no_constraint {
            cfg.model.constraint = false;
        }
        if self.prototypes.is_none() && !file_keys.contains("prototypes") {
            cfg.model.prototypes = cfg.model.num_patches();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct SynthDataArgs {
    /// Output dataset root
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset root in the MVTec-AD layout
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for config, log, and checkpoint
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from an existing checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Bilinear-resize side before cropping (defaults to --crop)
    #[arg(long)]
    pub resize: Option<usize>,
    /// Center-crop side; becomes the working image size
    #[arg(long)]
    pub crop: Option<usize>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root in the MVTec-AD layout
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the report (and maps)
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one min-max normalized anomaly-map PNG per test image
    #[arg(long)]
    pub dump_maps: bool,
    /// Optional config to cross-check against the checkpoint
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Dataset root shared by all rows
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; each row trains under rowN/
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Args)]
pub struct ParamsArgs {
    /// Use the published-scale preset (C=768, 8 layers, M=789)
    #[arg(long)]
    pub paper_scale: bool,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(args) => cmd_synth_data(&args),
        Command::Train(args) => cmd_train(&args).map(|_| ()),
        Command::Eval(args) => cmd_eval(&args).map(|_| ()),
        Command::Ablate(args) => cmd_ablate(&args).map(|_| ()),
        Command::Params(args) => cmd_params(&args),
    }
}

pub fn cmd_synth_data(args: &SynthDataArgs) -> Result<()> {
    let mut cfg = args.overrides.build()?;
    if args.overrides.data_seed.is_none() {
        cfg.data.seed = cfg.seed;
    }
    cfg.data.validate(cfg.model.patch_size)?;
    let samples = generate_dataset(&cfg.data)?;
    fs::create_dir_all(&args.out).map_err(|e| ProadError::io(&args.out, e))?;
    write_mvtec_layout(&samples, &args.out)?;
    write_text(&args.out.join("synth_config.txt"), &cfg.to_kv())?;
    println!(
        "wrote {} samples over {} classes to {}",
        samples.len(),
        cfg.data.num_classes,
        args.out.display()
    );
    Ok(())
}

/// Loads a dataset with the transform contract of the run config.
fn load_dataset(data: &Path, cfg: &RunConfig, resize: Option<usize>, crop: Option<usize>) -> Result<Vec<datagen::ImageSample>> {
    let crop_to = crop.unwrap_or(cfg.model.image_size);
    let resize_to = resize.unwrap_or(crop_to);
    load_mvtec_layout(data, resize_to, crop_to)
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = args.overrides.build()?;
    if let Some(crop) = args.crop {
        cfg.set("image_size", &crop.to_string())?;
        if args.overrides.prototypes.is_none() {
            cfg.model.prototypes = cfg.model.num_patches();
        }
    }
    cfg.validate()?;
    let samples = load_dataset(&args.data, &cfg, args.resize, args.crop)?;
    let model = ProAdModel::build(&cfg.model, cfg.seed)?;

    let resume = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            diff_model_config(&ckpt.config, &cfg)?;
            ckpt.apply_to(&model)?;
            let optimizer = ckpt.restore_optimizer(
                &model.named_params(),
                cfg.train.weight_decay,
                cfg.train.clip_threshold,
            )?;
            Some(ResumeState {
                start_epoch: ckpt.trained_epochs,
                global_step: ckpt.global_step,
                optimizer,
            })
        }
        None => None,
    };

    let (report, optimizer) = train(&model, &samples, &cfg.train, cfg.seed, resume)?;
    fs::create_dir_all(&args.out).map_err(|e| ProadError::io(&args.out, e))?;
    write_text(&args.out.join("config.txt"), &cfg.to_kv())?;
    write_text(&args.out.join("train_log.txt"), &report.log_text())?;
    let ckpt_path = args.out.join("checkpoint.bin");
    Checkpoint::capture(&model, &cfg, cfg.train.epochs, report.global_step, &optimizer)
        .save(&ckpt_path)?;
    println!(
        "trained {} epochs ({} steps, {} rejected), final loss {:.6}; checkpoint at {}",
        report.epochs_run,
        report.global_step,
        report.rejected_steps,
        report.final_loss().unwrap_or(f64::NAN),
        ckpt_path.display()
    );
    Ok(ckpt_path)
}

/// First differing architecture field between a checkpoint and a config.
fn diff_model_config(stored: &RunConfig, requested: &RunConfig) -> Result<()> {
    let a = &stored.model;
    let b = &requested.model;
    let fields: [(&str, String, String); 11] = [
        ("image_size", a.image_size.to_string(), b.image_size.to_string()),
        ("patch_size", a.patch_size.to_string(), b.patch_size.to_string()),
        ("dim", a.dim.to_string(), b.dim.to_string()),
        (
            "encoder_layers",
            a.encoder_layers.to_string(),
            b.encoder_layers.to_string(),
        ),
        ("fuse_from", a.fuse_from.to_string(), b.fuse_from.to_string()),
        ("fuse_to", a.fuse_to.to_string(), b.fuse_to.to_string()),
        (
            "decoder_layers",
            a.decoder_layers.to_string(),
            b.decoder_layers.to_string(),
        ),
        ("prototypes", a.prototypes.to_string(), b.prototypes.to_string()),
        ("phi", a.phi.to_string(), b.phi.to_string()),
        ("normalize", a.normalize.to_string(), b.normalize.to_string()),
        ("lca_eps", a.lca_eps.to_string(), b.lca_eps.to_string()),
    ];
    for (name, stored_v, requested_v) in fields {
        if stored_v != requested_v {
            return Err(ProadError::Config(format!(
                "checkpoint/config mismatch on '{name}': checkpoint has {stored_v}, config has {requested_v}"
            )));
        }
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutcome> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let cfg = ckpt.config.clone();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| ProadError::io(path, e))?;
        let mut requested = cfg.clone();
        requested.apply_kv(&text)?;
        diff_model_config(&cfg, &requested)?;
    }
    let model = ProAdModel::build(&cfg.model, cfg.seed)?;
    ckpt.apply_to(&model)?;
    let samples = load_dataset(&args.data, &cfg, None, None)?;
    let outcome = evaluate(&model, &samples, &cfg)?;

    fs::create_dir_all(&args.out).map_err(|e| ProadError::io(&args.out, e))?;
    write_text(&args.out.join("report.txt"), &outcome.report.to_text())?;
    if args.dump_maps {
        let maps_dir = args.out.join("maps");
        fs::create_dir_all(&maps_dir).map_err(|e| ProadError::io(&maps_dir, e))?;
        let test: Vec<&datagen::ImageSample> = samples.iter().filter(|s| !s.is_train()).collect();
        for (map, sample) in outcome.maps.iter().zip(&test) {
            let lo = map.smoothed.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = map.smoothed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let bytes: Vec<u8> = map
                .smoothed
                .iter()
                .map(|&v| (((v - lo) / span) * 255.0).round() as u8)
                .collect();
            let name = format!("{}_amap.png", sample.id.replace('/', "_"));
            datagen::save_gray_png(&maps_dir.join(name), &bytes, sample.height, sample.width)?;
        }
    }
    println!("{}", outcome.report.to_text());
    Ok(outcome)
}

/// Metric row of the ablation table.
pub struct AblationRow {
    pub anb: bool,
    pub dynamic: bool,
    pub constraint: bool,
    pub metrics: [f64; 7],
}

pub fn ablation_rows() -> [(bool, bool, bool); 4] {
    [
        (false, false, false),
        (true, false, false),
        (true, true, false),
        (true, true, true),
    ]
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<Vec<AblationRow>> {
    let base = args.overrides.build()?;
    base.validate()?;
    let dataset_hash = hash_tree(&args.data)?;
    let samples = load_dataset(&args.data, &base, None, None)?;
    fs::create_dir_all(&args.out).map_err(|e| ProadError::io(&args.out, e))?;

    let mut rows = Vec::new();
    for (i, (anb, dynamic, constraint)) in ablation_rows().into_iter().enumerate() {
        let mut cfg = base.clone();
        cfg.model.anb = anb;
        cfg.model.dynamic = dynamic;
        cfg.model.constraint = constraint;
        let row_dir = args.out.join(format!("row{}", i + 1));
        fs::create_dir_all(&row_dir).map_err(|e| ProadError::io(&row_dir, e))?;
        let model = ProAdModel::build(&cfg.model, cfg.seed)?;
        let (report, optimizer) = train(&model, &samples, &cfg.train, cfg.seed, None)?;
        write_text(&row_dir.join("config.txt"), &cfg.to_kv())?;
        write_text(&row_dir.join("train_log.txt"), &report.log_text())?;
        Checkpoint::capture(&model, &cfg, cfg.train.epochs, report.global_step, &optimizer)
            .save(&row_dir.join("checkpoint.bin"))?;
        let outcome = evaluate(&model, &samples, &cfg)?;
        write_text(&row_dir.join("report.txt"), &outcome.report.to_text())?;
        let r = &outcome.report;
        rows.push(AblationRow {
            anb,
            dynamic,
            constraint,
            metrics: [
                r.image.auroc,
                r.image.ap,
                r.image.f1_max,
                r.pixel.auroc,
                r.pixel.ap,
                r.pixel.f1_max,
                r.pixel.aupro.unwrap_or(0.0),
            ],
        });
        eprintln!(
            "row {} (anb={anb} dynamic={dynamic} constraint={constraint}) done",
            i + 1
        );
    }

    let mut table = String::new();
    table.push_str(&format!("dataset_hash: {dataset_hash}\n"));
    table.push_str(&format!("seed: {}\n", base.seed));
    table.push_str("anb dynamic constraint i_auroc i_ap i_f1max p_auroc p_ap p_f1max p_aupro\n");
    for row in &rows {
        table.push_str(&format!(
            "{} {} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            u8::from(row.anb),
            u8::from(row.dynamic),
            u8::from(row.constraint),
            row.metrics[0],
            row.metrics[1],
            row.metrics[2],
            row.metrics[3],
            row.metrics[4],
            row.metrics[5],
            row.metrics[6],
        ));
    }
    write_text(&args.out.join("ablation.txt"), &table)?;
    println!("{table}");
    Ok(rows)
}

fn with_thousands(v: usize) -> String {
    let digits = v.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn cmd_params(args: &ParamsArgs) -> Result<()> {
    let cfg = if args.paper_scale {
        crate::config::ModelConfig::paper_scale()
    } else {
        args.overrides.build()?.model
    };
    let ledger = count_parameters(&cfg);
    println!("Bottleneck {}", with_thousands(ledger.bottleneck));
    println!("Decoder {}", with_thousands(ledger.decoder));
    println!("Prototypes {}", with_thousands(ledger.prototypes));
    println!("Total {}", with_thousands(ledger.total()));
    Ok(())
}

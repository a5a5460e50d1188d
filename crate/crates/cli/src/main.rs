use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mega_core::attack::MaskSource;
use mega_core::dataset::{
    export_manifest, generate_toy_dataset, load_image_folder, read_manifest, Dataset, LoadOptions, Naming, Sample,
    Split, SplitSpec,
};
use mega_core::meta_trainer::{
    generator_from_checkpoint, train, train_config_from_checkpoint, TrainConfig, TrainMode, TrainOptions,
};
use mega_core::nets::{
    build_toy_embedder, config_digest, embedder_from_checkpoint, load_checkpoint, save_checkpoint, train_embedder,
    victim_checkpoint, Arch, Embedder, VictimTrainConfig,
};
use mega_core::retrieval_eval::{evaluate_attack, render_retrieval_grid, render_table, QueryAttack};

#[derive(Parser)]
#[command(name = "mega", version, about = "Transferable adversarial attacks on re-ID embedders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic re-ID dataset (PNG images plus manifest.csv).
    Toygen(ToygenArgs),
    /// Train a toy victim embedder.
    TrainVictim(VictimArgs),
    /// Train the perturbation generator.
    AttackTrain(AttackArgs),
    /// Evaluate clean and attacked retrieval on one or more target models.
    Eval(EvalArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value configuration file with TrainConfig field names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Manifest file, folder containing manifest.csv, or image folder.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Filename convention for image folders: reid_underscore or flat_unlabeled.
    #[arg(long, default_value = "reid_underscore")]
    naming: String,
    /// Split for image folders: a split name or `dir=split,...`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
}

#[derive(Args)]
struct ToygenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 16)]
    num_ids: usize,
    #[arg(long, default_value_t = 8)]
    imgs_per_id: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
}

#[derive(Args)]
struct VictimArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "A")]
    arch: String,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 120)]
    epochs: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long)]
    no_augment: bool,
}

/// Every TrainConfig field; unset flags keep the file or default value.
#[derive(Args, Clone, Default)]
struct TrainOverrides {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Triplet margin.
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Budget on the 0-255 scale.
    #[arg(long, alias = "eps")]
    eps_255: Option<f64>,
    #[arg(long)]
    flip_prob: Option<f64>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    /// Shorthand for `--mode unsupervised`.
    #[arg(long)]
    unsupervised: bool,
    #[arg(long, overrides_with = "no_use_meta")]
    use_meta: bool,
    #[arg(long, overrides_with = "use_meta")]
    no_use_meta: bool,
    #[arg(long, overrides_with = "no_use_mask")]
    use_mask: bool,
    #[arg(long, overrides_with = "use_mask")]
    no_use_mask: bool,
    #[arg(long, overrides_with = "no_meta_update_per_batch")]
    meta_update_per_batch: bool,
    #[arg(long, overrides_with = "meta_update_per_batch")]
    no_meta_update_per_batch: bool,
    #[arg(long, overrides_with = "no_meta_clamp")]
    meta_clamp: bool,
    #[arg(long, overrides_with = "meta_clamp")]
    no_meta_clamp: bool,
    #[arg(long, overrides_with = "no_non_saturating")]
    non_saturating: bool,
    #[arg(long, overrides_with = "non_saturating")]
    no_non_saturating: bool,
    #[arg(long)]
    iters_per_epoch: Option<usize>,
    #[arg(long)]
    generator_width: Option<usize>,
}

fn switch(on: bool, off: bool, target: &mut bool) {
    if on {
        *target = true;
    }
    if off {
        *target = false;
    }
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<(), CliError> {
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = self.$f { cfg.$f = v; } )*};
        }
        set!(lr, beta1, beta2, epochs, m, lambda, eps_255, flip_prob, p, k, iters_per_epoch, generator_width);
        if let Some(mode) = &self.mode {
            cfg.mode = mode.parse()?;
        }
        if self.unsupervised {
            cfg.mode = TrainMode::Unsupervised;
        }
        switch(self.use_meta, self.no_use_meta, &mut cfg.use_meta);
        switch(self.use_mask, self.no_use_mask, &mut cfg.use_mask);
        switch(self.meta_update_per_batch, self.no_meta_update_per_batch, &mut cfg.meta_update_per_batch);
        switch(self.meta_clamp, self.no_meta_clamp, &mut cfg.meta_clamp);
        switch(self.non_saturating, self.no_non_saturating, &mut cfg.non_saturating);
        Ok(())
    }
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainOverrides,
    /// Victim checkpoint used as the frozen surrogate.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// Meta-test dataset (manifest, manifest folder, or image folder).
    #[arg(long)]
    meta_dataset: Option<PathBuf>,
    #[arg(long)]
    meta_naming: Option<String>,
    #[arg(long)]
    meta_split: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Attack checkpoint; without it only clean metrics are reported.
    #[arg(long)]
    attack: Option<PathBuf>,
    /// Comma-separated victim checkpoints, or architecture names resolved
    /// as `<victims-dir>/victim_<name>.ckpt`.
    #[arg(long, value_delimiter = ',', required = true)]
    targets: Vec<String>,
    #[arg(long, default_value = ".")]
    victims_dir: PathBuf,
    /// Mask queries with the surrogate before generating perturbations.
    #[arg(long)]
    mask_at_inference: bool,
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// Write retrieval strips for the first N queries.
    #[arg(long, default_value_t = 0)]
    figures: usize,
    #[arg(long, default_value_t = 5)]
    figure_k: usize,
    /// Camera filtering: auto (on when cameras are known), on, off.
    #[arg(long, default_value = "auto")]
    cam_filter: String,
}

struct CliError {
    kind: String,
    message: String,
    usage: bool,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage".into(),
            message: message.into(),
            usage: true,
        }
    }
}

impl From<mega_core::Error> for CliError {
    fn from(e: mega_core::Error) -> Self {
        Self {
            kind: e.kind().into(),
            message: e.to_string(),
            usage: false,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        mega_core::Error::from(e).into()
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    config: serde_json::Value,
    seed: u64,
    artifacts: BTreeMap<String, PathBuf>,
    version: String,
    wall_time_s: f64,
}

impl RunManifest {
    /// Written to a temporary file first, then renamed into place.
    fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("run_manifest.json");
        let tmp = dir.join(".run_manifest.json.tmp");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&tmp, text).map_err(|e| mega_core::Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| mega_core::Error::io(&path, e))?;
        Ok(path)
    }
}

fn manifest(command: &str, config: serde_json::Value, seed: u64, artifacts: BTreeMap<String, PathBuf>, start: Instant) -> RunManifest {
    RunManifest {
        command: command.into(),
        args: std::env::args().collect(),
        config,
        seed,
        artifacts,
        version: format!("mega {}", env!("CARGO_PKG_VERSION")),
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| mega_core::Error::io(dir, e).into())
}

const MARKET_LAYOUT: [(&str, Split); 3] = [
    ("bounding_box_train", Split::MetaTrain),
    ("query", Split::Query),
    ("bounding_box_test", Split::Gallery),
];

fn load_dataset(path: &Path, naming: &str, split: Option<&str>, height: usize, width: usize) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::usage(format!("dataset path {} does not exist", path.display())));
    }
    let opts = LoadOptions { height, width };
    if path.is_file() {
        return Ok(read_manifest(path, &opts)?);
    }
    let manifest = path.join("manifest.csv");
    if manifest.is_file() && split.is_none() {
        return Ok(read_manifest(&manifest, &opts)?);
    }
    let naming: Naming = naming.parse()?;
    let spec = match split {
        Some(s) => s.parse::<SplitSpec>()?,
        None if MARKET_LAYOUT.iter().any(|(d, _)| path.join(d).is_dir()) => SplitSpec::Subdirs(
            MARKET_LAYOUT
                .iter()
                .filter(|(d, _)| path.join(d).is_dir())
                .map(|(d, s)| (d.to_string(), *s))
                .collect(),
        ),
        None => SplitSpec::All(Split::MetaTrain),
    };
    let (ds, report) = load_image_folder(path, naming, &spec, &opts)?;
    for (p, why) in &report.skipped {
        log::warn!("skipped {}: {why}", p.display());
    }
    Ok(ds)
}

fn require_data(data: &DataArgs) -> Result<Dataset, CliError> {
    let path = data
        .data
        .as_ref()
        .ok_or_else(|| CliError::usage("--data <path> is required"))?;
    load_dataset(path, &data.naming, data.split.as_deref(), data.height, data.width)
}

fn load_victim(path: &Path) -> Result<mega_core::nets::ToyEmbedder, CliError> {
    let loaded = load_checkpoint(path, None)?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    Ok(embedder_from_checkpoint(&loaded.checkpoint)?)
}

fn cmd_toygen(args: &ToygenArgs) -> Result<(), CliError> {
    if args.num_ids < 2 {
        return Err(CliError::usage(format!("--num-ids must be >= 2, got {}", args.num_ids)));
    }
    if args.imgs_per_id < 2 {
        return Err(CliError::usage(format!("--imgs-per-id must be >= 2, got {}", args.imgs_per_id)));
    }
    let seed = args.common.seed.unwrap_or(0);
    let ds = generate_toy_dataset(args.num_ids, args.imgs_per_id, args.image_size, seed)?;
    create_dir(&args.common.out_dir)?;
    let (manifest, _) = export_manifest(&ds, &args.common.out_dir)?;
    println!("{} images, {} identities -> {}", ds.len(), ds.num_identities(), manifest.display());
    Ok(())
}

fn split_refs(ds: &Dataset, split: Split) -> Vec<&Sample> {
    ds.split_samples(split)
}

fn cmd_train_victim(args: &VictimArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let ds = require_data(&args.data)?;
    let arch: Arch = args.arch.parse()?;
    let seed = args.common.seed.unwrap_or(0);
    let cfg = VictimTrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        seed,
        augment: !args.no_augment,
    };
    let f = train_embedder(&ds, build_toy_embedder(arch, args.dim, seed)?, &cfg)?;
    create_dir(&args.common.out_dir)?;
    let config = serde_json::json!({"victim": cfg, "arch": arch, "dim": args.dim, "dataset": ds.name()});
    let hash = config_digest(&config)?;
    let path = args.common.out_dir.join(format!("victim_{arch}.ckpt"));
    save_checkpoint(&path, &victim_checkpoint(&f, cfg.epochs as u64, &hash)?)?;
    let (query, gallery) = (split_refs(&ds, Split::Query), split_refs(&ds, Split::Gallery));
    if !query.is_empty() && !gallery.is_empty() {
        let out = evaluate_attack(&f, None, &query, &gallery, ds.name(), query[0].camera.is_some(), &hash)?;
        println!(
            "{}: clean mAP {:.2}%, R-1 {:.2}%",
            f.name(),
            out.report.map_before * 100.0,
            out.report.r1_before * 100.0
        );
    }
    println!("victim checkpoint -> {}", path.display());
    let artifacts = BTreeMap::from([("checkpoint".to_string(), path)]);
    manifest("train-victim", config, seed, artifacts, start).write(&args.common.out_dir)?;
    Ok(())
}

fn resolve_train_config(common: &Common, overrides: &TrainOverrides) -> Result<TrainConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_attack_train(args: &AttackArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg = resolve_train_config(&args.common, &args.train)?;
    if cfg.use_meta && args.meta_dataset.is_none() {
        return Err(CliError::usage("meta-learning is enabled but --meta-dataset was not given (or pass --no-use-meta)"));
    }
    let surrogate_path = args
        .surrogate
        .as_ref()
        .ok_or_else(|| CliError::usage("--surrogate <victim checkpoint> is required"))?;
    let mut ds_t = require_data(&args.data)?;
    let mut ds_a = match (&args.meta_dataset, cfg.use_meta) {
        (Some(path), true) => Some(load_dataset(
            path,
            args.meta_naming.as_deref().unwrap_or(&args.data.naming),
            args.meta_split.as_deref(),
            args.data.height,
            args.data.width,
        )?),
        _ => None,
    };
    if cfg.mode == TrainMode::Unsupervised {
        ds_t = ds_t.without_labels();
        ds_a = ds_a.map(|d| d.without_labels());
    }
    let f = load_victim(surrogate_path)?;
    let opts = TrainOptions {
        out_dir: Some(args.common.out_dir.clone()),
        audit: false,
    };
    log::info!("training cell {} ({} mode)", cfg.cell_name(), cfg.mode);
    let outcome = train(&ds_t, ds_a.as_ref(), &f, &cfg, &opts)?;
    if let Some(last) = outcome.trace.last() {
        println!("last step: {}", last.to_line());
    }
    println!(
        "attack checkpoint ({}) -> {}",
        cfg.cell_name(),
        outcome.artifacts["checkpoint"].display()
    );
    let config = serde_json::json!({
        "train": cfg,
        "dataset": ds_t.name(),
        "meta_dataset": ds_a.as_ref().map(|d| d.name().to_string()),
        "surrogate": surrogate_path,
    });
    manifest("attack-train", config, cfg.seed, outcome.artifacts, start).write(&args.common.out_dir)?;
    Ok(())
}

fn resolve_target(item: &str, victims_dir: &Path) -> PathBuf {
    let direct = PathBuf::from(item);
    if direct.is_file() {
        direct
    } else {
        victims_dir.join(format!("victim_{item}.ckpt"))
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let ds = require_data(&args.data)?;
    let (query, gallery) = (split_refs(&ds, Split::Query), split_refs(&ds, Split::Gallery));
    if query.is_empty() || gallery.is_empty() {
        return Err(CliError::usage(format!("dataset '{}' needs query and gallery splits", ds.name())));
    }
    let cam_filter = match args.cam_filter.as_str() {
        "auto" => query.iter().chain(&gallery).all(|s| s.camera.is_some()),
        "on" => true,
        "off" => false,
        other => return Err(CliError::usage(format!("--cam-filter must be auto, on or off, got '{other}'"))),
    };
    let attack_ckpt = match &args.attack {
        Some(path) => Some(load_checkpoint(path, None)?.checkpoint),
        None => None,
    };
    let generator = attack_ckpt.as_ref().map(generator_from_checkpoint).transpose()?;
    let train_cfg = attack_ckpt.as_ref().map(train_config_from_checkpoint).transpose()?;
    let budget = match &train_cfg {
        Some(c) => Some(c.budget()?),
        None => None,
    };
    let surrogate = if args.mask_at_inference {
        let path = args
            .surrogate
            .as_ref()
            .ok_or_else(|| CliError::usage("--mask-at-inference needs --surrogate <victim checkpoint>"))?;
        Some(load_victim(path)?)
    } else {
        None
    };
    let config_hash = attack_ckpt.as_ref().map(|c| c.config_hash.clone()).unwrap_or_default();
    create_dir(&args.common.out_dir)?;
    let mut reports = Vec::new();
    let mut artifacts = BTreeMap::new();
    for item in &args.targets {
        let path = resolve_target(item, &args.victims_dir);
        if !path.is_file() {
            return Err(mega_core::Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "target checkpoint not found"),
            )
            .into());
        }
        let target = load_victim(&path)?;
        let spec = match (&generator, budget) {
            (Some(g), Some(b)) => Some(QueryAttack {
                generator: g,
                budget: b,
                mask: surrogate.as_ref().map(|s| MaskSource {
                    embedder: s as &dyn Embedder,
                    margin: train_cfg.as_ref().map(|c| c.m).unwrap_or(1.0),
                    seed: args.common.seed.unwrap_or(0),
                }),
            }),
            _ => None,
        };
        let out = evaluate_attack(&target, spec.as_ref(), &query, &gallery, ds.name(), cam_filter, &config_hash)?;
        if args.figures > 0 {
            let dir = args.common.out_dir.join("figures");
            create_dir(&dir)?;
            for q in 0..args.figures.min(query.len()) {
                let qid = query[q].identity.unwrap_or(usize::MAX);
                let clean = dir.join(format!("q{q:03}_{}_clean.png", target.name()));
                render_retrieval_grid(&query[q].image, qid, out.before.row(q), &gallery, args.figure_k, &clean)?;
                if let Some(after) = &out.after {
                    let adv = dir.join(format!("q{q:03}_{}_attacked.png", target.name()));
                    render_retrieval_grid(&out.attacked_queries[q], qid, after.row(q), &gallery, args.figure_k, &adv)?;
                }
            }
            artifacts.insert("figures".to_string(), dir);
        }
        reports.push(out.report);
    }
    let records = args.common.out_dir.join("reports.jsonl");
    let mut text = String::new();
    for r in &reports {
        text.push_str(&r.to_json_line()?);
        text.push('\n');
    }
    std::fs::write(&records, text).map_err(|e| mega_core::Error::io(&records, e))?;
    print!("{}", render_table(&reports));
    artifacts.insert("reports".to_string(), records);
    let config = serde_json::json!({
        "dataset": ds.name(),
        "attack": args.attack,
        "targets": args.targets,
        "mask_at_inference": args.mask_at_inference,
        "cam_filter": cam_filter,
        "train": train_cfg,
    });
    manifest("eval", config, args.common.seed.unwrap_or(0), artifacts, start).write(&args.common.out_dir)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Toygen(a) => cmd_toygen(a),
        Command::TrainVictim(a) => cmd_train_victim(a),
        Command::AttackTrain(a) => cmd_attack_train(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind, e.message.replace('\n', "; "));
            ExitCode::from(if e.usage { 2 } else { 1 })
        }
    }
}

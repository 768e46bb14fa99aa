//! Command-line interface. Exit codes: 0 success, 1 usage error, 2
//! runtime failure, 3 verification failure.

use crate::data::{make_dataset, read_cloud, Augment, DatasetSpec};
use crate::error::Error;
use crate::eval::{
    pose_dataset, run_few_shot, split_per_class, train_probe, FewShotConfig, ProbeConfig,
    ProbeKind,
};
use crate::losses::chamfer_l2;
use crate::masking::{comask_mc, comask_probability, MaskModel};
use crate::model::init_params;
use crate::tensor::{ParamStore, Tape};
use crate::training::{
    latest_checkpoint, load_checkpoint, TrainConfig, Trainer,
};
use crate::verify::{binomial, oracle_gradients, run_all};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "pointcmae",
    version,
    about = "Dual-masked point cloud autoencoder: pre-training, probing and analytics"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train on synthetic shapes and write a run directory.
    Pretrain(PretrainArgs),
    /// Train a classifier on a pre-trained backbone and report accuracy.
    Probe(ProbeArgs),
    /// Few-shot episodes over a labeled pool.
    Fewshot(FewshotArgs),
    /// Co-mask analytics: closed forms against simulation.
    Maskstats(MaskstatsArgs),
    /// Finite-difference check of the training objective's gradients.
    Gradcheck(GradcheckArgs),
    /// Chamfer distance between two point cloud files.
    Chamfer(ChamferArgs),
    /// Run every built-in oracle.
    Verify(VerifyArgs),
    /// Pre-train and probe across a list of mask ratios.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    /// Desk-scale model and recipe.
    Tiny,
    /// Full-scale architecture and 300-epoch recipe.
    Full,
    /// Full-scale recipe with base learning rate 1e-3.
    FullAltLr,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeKindArg {
    /// Fine-tune the whole backbone with the classifier.
    Full,
    /// Frozen backbone, single affine layer.
    MlpLinear,
    /// Frozen backbone, two hidden layers of 256.
    Mlp3,
}

impl From<ProbeKindArg> for ProbeKind {
    fn from(k: ProbeKindArg) -> Self {
        match k {
            ProbeKindArg::Full => ProbeKind::Full,
            ProbeKindArg::MlpLinear => ProbeKind::MlpLinear,
            ProbeKindArg::Mlp3 => ProbeKind::Mlp3,
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// Run directory for config snapshot, metrics and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "tiny")]
    preset: PresetArg,
    #[arg(long)]
    epochs: Option<usize>,
    /// Defaults to a tenth of the epochs when --epochs shrinks below the
    /// preset's warmup.
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Contrastive weight in the total objective.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    clouds_per_class: Option<usize>,
    #[arg(long)]
    points_per_cloud: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Train one masked branch only (requires --no-contrastive).
    #[arg(long)]
    no_dual_mask: bool,
    /// Drop the contrastive term, keeping both reconstructions.
    #[arg(long)]
    no_contrastive: bool,
    /// Use one decoder for both branches.
    #[arg(long)]
    share_decoder: bool,
    /// Give each branch its own encoder weights.
    #[arg(long)]
    separate_encoders: bool,
    /// Disable train-time augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Keep scale/translate augmentation but skip the random rotation.
    #[arg(long)]
    no_rotate: bool,
    /// Continue from the latest checkpoint in --out (recipe flags are
    /// ignored; the checkpoint's config wins).
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint produced by pretrain.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "mlp-linear")]
    kind: ProbeKindArg,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Number of probe repetitions with consecutive seeds.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    data_seed: u64,
    #[arg(long, default_value_t = 24)]
    clouds_per_class: usize,
    /// Defaults to the checkpoint's training value.
    #[arg(long)]
    points_per_cloud: Option<usize>,
    #[arg(long, default_value_t = 0.75)]
    train_fraction: f64,
    /// Score a freshly initialized backbone instead of the checkpoint
    /// weights (baseline).
    #[arg(long)]
    random_init: bool,
    /// Evaluate on raw generated clouds instead of drawing one pose per
    /// cloud from the pre-training augmentation distribution.
    #[arg(long)]
    canonical_pose: bool,
}

#[derive(Args)]
struct FewshotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 10)]
    shot: usize,
    #[arg(long, default_value_t = 20)]
    queries: usize,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// Epochs for the per-episode linear head.
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    data_seed: u64,
    #[arg(long, default_value_t = 32)]
    clouds_per_class: usize,
    /// Defaults to the checkpoint's training value.
    #[arg(long)]
    points_per_cloud: Option<usize>,
    /// Evaluate on raw generated clouds instead of drawing one pose per
    /// cloud from the pre-training augmentation distribution.
    #[arg(long)]
    canonical_pose: bool,
}

#[derive(Args)]
struct MaskstatsArgs {
    /// Patch tokens per cloud.
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0.6)]
    ratio: f64,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Finite-difference probes per objective variant.
    #[arg(long, default_value_t = 40)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ChamferArgs {
    /// First cloud file (text "x y z" lines or binary).
    pred: PathBuf,
    /// Second cloud file.
    gt: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 20_000)]
    trials: usize,
    #[arg(long, default_value_t = 24)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// Mask ratios to pre-train and probe at.
    #[arg(long, value_delimiter = ',', default_value = "0.45,0.6,0.75")]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long, default_value_t = 40)]
    probe_epochs: usize,
    #[arg(long, default_value_t = 16)]
    clouds_per_class: usize,
    #[arg(long, default_value_t = 256)]
    points_per_cloud: usize,
    #[arg(long, default_value_t = 24)]
    probe_clouds_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    quiet: bool,
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult = std::result::Result<i32, CliError>;

/// Parse arguments and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Fewshot(a) => cmd_fewshot(a),
        Command::Maskstats(a) => cmd_maskstats(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Chamfer(a) => cmd_chamfer(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match outcome {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Exclusive ownership of a run directory for the process lifetime.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> CliResult2<Self> {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        let path = dir.join("run.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Runtime(Error::contract(format!(
                    "{} exists; another run owns this directory (delete it if stale)",
                    path.display()
                ))))
            }
            Err(e) => Err(CliError::Runtime(Error::from(e))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

type CliResult2<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn base_config(preset: PresetArg) -> TrainConfig {
    match preset {
        PresetArg::Tiny => TrainConfig::tiny(),
        PresetArg::Full => TrainConfig::full(),
        PresetArg::FullAltLr => TrainConfig::full_alt_lr(),
    }
}

fn cmd_pretrain(a: PretrainArgs) -> CliResult {
    if a.no_dual_mask && !a.no_contrastive {
        return Err(usage(
            "--no-dual-mask produces one branch, so the contrastive term has \
             nothing to compare; pass --no-contrastive as well",
        ));
    }
    if a.no_dual_mask && a.share_decoder {
        return Err(usage(
            "--share-decoder is meaningless with --no-dual-mask (only one decoder runs)",
        ));
    }
    if a.no_dual_mask && a.separate_encoders {
        return Err(usage(
            "--separate-encoders is meaningless with --no-dual-mask (only one branch runs)",
        ));
    }
    if let Some(r) = a.mask_ratio {
        if !(0.0 < r && r < 1.0) {
            return Err(usage(format!("--mask-ratio {r} outside (0, 1)")));
        }
    }

    let _lock = DirLock::acquire(&a.out)?;
    let mut trainer = if a.resume {
        let ck = latest_checkpoint(&a.out)?.ok_or_else(|| {
            CliError::Runtime(Error::contract(format!(
                "--resume found no checkpoint in {}",
                a.out.display()
            )))
        })?;
        if !a.quiet {
            eprintln!("resuming from {}", ck.display());
        }
        load_checkpoint(&ck)?
    } else {
        let mut cfg = base_config(a.preset);
        if let Some(v) = a.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = a.warmup_epochs {
            cfg.warmup_epochs = v;
        } else if cfg.warmup_epochs >= cfg.epochs {
            cfg.warmup_epochs = (cfg.epochs / 10).max(1).min(cfg.epochs.saturating_sub(1));
        }
        if let Some(v) = a.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = a.seed {
            cfg.seed = v;
        }
        if let Some(v) = a.mask_ratio {
            cfg.model.mask_ratio = v;
        }
        if let Some(v) = a.lambda {
            cfg.model.lambda = v;
        }
        if let Some(v) = a.base_lr {
            cfg.base_lr = v;
        }
        if let Some(v) = a.clouds_per_class {
            cfg.clouds_per_class = v;
        }
        if let Some(v) = a.points_per_cloud {
            cfg.points_per_cloud = v;
        }
        if let Some(v) = a.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        if a.no_dual_mask {
            cfg.model.dual_mask = false;
        }
        if a.no_contrastive {
            cfg.model.contrastive = false;
        }
        if a.share_decoder {
            cfg.model.share_decoder = true;
        }
        if a.separate_encoders {
            cfg.model.share_encoder = false;
        }
        if a.no_augment {
            cfg.augment = Augment::none();
        }
        if a.no_rotate {
            cfg.augment.rotate = false;
        }
        Trainer::new(cfg)?
    };

    let config_text = toml::to_string_pretty(&trainer.cfg)
        .map_err(|e| Error::contract(format!("config serialization: {e}")))?;
    std::fs::write(a.out.join("config.toml"), config_text).map_err(Error::from)?;

    let dataset: Vec<_> = make_dataset(&DatasetSpec {
        clouds_per_class: trainer.cfg.clouds_per_class,
        points_per_cloud: trainer.cfg.points_per_cloud,
        seed: trainer.cfg.seed,
    })?
    .into_iter()
    .map(|lc| lc.cloud)
    .collect();

    let metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(a.resume)
        .truncate(!a.resume)
        .write(true)
        .open(a.out.join("metrics.jsonl"))
        .map_err(Error::from)?;
    let mut metrics = BufWriter::new(metrics_file);

    let records = trainer.run(&dataset, Some(&mut metrics), Some(&a.out), !a.quiet)?;
    metrics.flush().map_err(Error::from)?;

    if let Some(last) = records.last() {
        println!(
            "pretrained {} epochs ({} steps): final batch loss {:.6}",
            trainer.completed_epochs, trainer.step, last.total
        );
    } else {
        println!(
            "nothing to do: checkpoint already covers {} epochs",
            trainer.completed_epochs
        );
    }
    println!("run directory: {}", a.out.display());
    Ok(0)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn cmd_probe(a: ProbeArgs) -> CliResult {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    if !(0.0 < a.train_fraction && a.train_fraction < 1.0) {
        return Err(usage(format!(
            "--train-fraction {} outside (0, 1)",
            a.train_fraction
        )));
    }
    let loaded = load_checkpoint(&a.checkpoint)?;
    let model_cfg = loaded.cfg.model.clone();
    let backbone: ParamStore<f32> = if a.random_init {
        init_params(&model_cfg, a.seed.wrapping_add(0x5241_4e44))?
    } else {
        loaded.store
    };
    let points = a.points_per_cloud.unwrap_or(loaded.cfg.points_per_cloud);
    let mut data = make_dataset(&DatasetSpec {
        clouds_per_class: a.clouds_per_class,
        points_per_cloud: points,
        seed: a.data_seed,
    })?;
    if !a.canonical_pose {
        pose_dataset(&mut data, loaded.cfg.augment, a.data_seed);
    }
    let classes = data.iter().map(|lc| lc.label).max().unwrap() + 1;
    let (train, test) = split_per_class(&data, a.train_fraction)?;

    let kind: ProbeKind = a.kind.into();
    println!(
        "probe {} on {} backbone: {} train / {} test clouds, {} classes, {} poses",
        kind.name(),
        if a.random_init { "random-init" } else { "pretrained" },
        train.len(),
        test.len(),
        classes,
        if a.canonical_pose { "canonical" } else { "drawn" }
    );
    let mut accs = Vec::with_capacity(a.seeds);
    for s in 0..a.seeds {
        let probe_cfg = ProbeConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            warmup_epochs: (a.epochs / 10).max(1),
            seed: a.seed.wrapping_add(s as u64),
            ..ProbeConfig::default()
        };
        let out = train_probe(&backbone, &model_cfg, &probe_cfg, kind, &train, &test, classes)?;
        println!(
            "  seed {}: test accuracy {:.4} (train {:.4})",
            probe_cfg.seed, out.test_accuracy, out.train_accuracy
        );
        if kind != ProbeKind::Full {
            debug_assert_eq!(out.backbone_hash_before, out.backbone_hash_after);
        }
        accs.push(out.test_accuracy);
    }
    let (mean, std) = mean_std(&accs);
    println!("test accuracy over {} seed(s): {:.4} +- {:.4}", a.seeds, mean, std);
    Ok(0)
}

fn cmd_fewshot(a: FewshotArgs) -> CliResult {
    let loaded = load_checkpoint(&a.checkpoint)?;
    let model_cfg = loaded.cfg.model.clone();
    let points = a.points_per_cloud.unwrap_or(loaded.cfg.points_per_cloud);
    let mut pool = make_dataset(&DatasetSpec {
        clouds_per_class: a.clouds_per_class,
        points_per_cloud: points,
        seed: a.data_seed,
    })?;
    if !a.canonical_pose {
        pose_dataset(&mut pool, loaded.cfg.augment, a.data_seed);
    }
    let probe_cfg = ProbeConfig {
        epochs: a.epochs,
        batch_size: 32,
        warmup_epochs: (a.epochs / 10).max(1),
        seed: a.seed,
        ..ProbeConfig::default()
    };
    let fs = FewShotConfig {
        way: a.way,
        shot: a.shot,
        queries_per_class: a.queries,
        episodes: a.episodes,
        seed: a.seed,
    };
    let res = run_few_shot(&loaded.store, &model_cfg, &probe_cfg, &fs, &pool)?;
    println!("{}-way {}-shot over {} episodes:", res.way, res.shot, a.episodes);
    for (i, acc) in res.per_episode.iter().enumerate() {
        println!("  episode {i}: accuracy {acc:.4}");
    }
    println!(
        "mean accuracy {:.4} +- {:.4}",
        res.mean_accuracy, res.std_accuracy
    );
    Ok(0)
}

fn cmd_maskstats(a: MaskstatsArgs) -> CliResult {
    if !(0.0 < a.ratio && a.ratio < 1.0) {
        return Err(usage(format!("--ratio {} outside (0, 1)", a.ratio)));
    }
    if a.n == 0 || a.trials == 0 {
        return Err(usage("--n and --trials must be positive"));
    }
    let m = (a.ratio * a.n as f64).floor() as usize;
    if m == 0 {
        return Err(usage(format!(
            "ratio {} leaves no masked tokens at n {}",
            a.ratio, a.n
        )));
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);

    println!("tokens n = {}, ratio = {}, fixed mask size m = {m}", a.n, a.ratio);
    println!();
    let p = comask_probability(a.n, a.ratio)?;
    let bern = comask_mc(a.n, a.ratio, a.trials, MaskModel::Bernoulli, &mut rng)?;
    println!("independent-flip model (each token masked with prob r in both branches):");
    println!("  P(overlap) closed form 1-(1-r^2)^n = {p:.12}");
    println!("  miss probability (1-r^2)^n        = {:.6e}", 1.0 - p);
    println!(
        "  P(overlap) simulated               = {:.6} +- {:.6}  ({} trials)",
        bern.overlap_rate, bern.overlap_stderr, a.trials
    );
    println!(
        "  mean co-masked tokens n r^2 = {:.6}; simulated {:.6} +- {:.6}",
        a.n as f64 * a.ratio * a.ratio,
        bern.mean_comask,
        bern.comask_stderr
    );
    println!();
    let fixed = comask_mc(a.n, a.ratio, a.trials, MaskModel::FixedCount, &mut rng)?;
    let miss = binomial((a.n - m) as u64, m as u64) / binomial(a.n as u64, m as u64);
    println!("fixed-count sampler (exactly m tokens per branch, the one training uses):");
    println!("  P(overlap) exact 1 - C(n-m,m)/C(n,m) = {:.12}", 1.0 - miss);
    println!("  miss probability C(n-m,m)/C(n,m)     = {miss:.6e}");
    println!(
        "  P(overlap) simulated                 = {:.6} +- {:.6}",
        fixed.overlap_rate, fixed.overlap_stderr
    );
    println!(
        "  mean co-masked tokens m^2/n = {:.6}; simulated {:.6} +- {:.6}",
        (m * m) as f64 / a.n as f64,
        fixed.mean_comask,
        fixed.comask_stderr
    );
    let floor = 2 * m as i64 - a.n as i64;
    println!(
        "  pigeonhole floor max(0, 2m - n) = {}",
        floor.max(0)
    );
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    if a.probes == 0 {
        return Err(usage("--probes must be at least 1"));
    }
    let report = oracle_gradients(a.probes, a.seed)?;
    println!("{report}");
    Ok(if report.passed { 0 } else { 3 })
}

fn cmd_chamfer(a: ChamferArgs) -> CliResult {
    let pred = read_cloud(&a.pred)?;
    let gt = read_cloud(&a.gt)?;
    if pred.len() != gt.len() {
        return Err(CliError::Runtime(Error::dim(format!(
            "clouds differ in size: {} vs {} points",
            pred.len(),
            gt.len()
        ))));
    }
    let k = pred.len();
    let mut tape: Tape<f32> = Tape::new();
    let flat = |c: &crate::geometry::PointCloud| -> Vec<f32> {
        c.points.iter().flat_map(|p| p.iter().copied()).collect()
    };
    let p = tape.leaf(flat(&pred), k, 3)?;
    let g = tape.leaf(flat(&gt), k, 3)?;
    let loss = chamfer_l2(&mut tape, p, g, 1, k)?;
    println!("{:.9}", tape.scalar(loss)?);
    Ok(0)
}

fn cmd_verify(a: VerifyArgs) -> CliResult {
    if a.trials == 0 || a.probes == 0 {
        return Err(usage("--trials and --probes must be positive"));
    }
    let reports = run_all(a.trials, a.probes, a.seed)?;
    let mut all_pass = true;
    for r in &reports {
        println!("{r}");
        all_pass &= r.passed;
    }
    println!();
    println!(
        "{} of {} oracles passed",
        reports.iter().filter(|r| r.passed).count(),
        reports.len()
    );
    Ok(if all_pass { 0 } else { 3 })
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    if a.ratios.is_empty() {
        return Err(usage("--ratios needs at least one value"));
    }
    for &r in &a.ratios {
        if !(0.0 < r && r < 1.0) {
            return Err(usage(format!("ratio {r} outside (0, 1)")));
        }
    }
    let mut probe_data = make_dataset(&DatasetSpec {
        clouds_per_class: a.probe_clouds_per_class,
        points_per_cloud: a.points_per_cloud,
        seed: a.seed.wrapping_add(1000),
    })?;
    pose_dataset(
        &mut probe_data,
        TrainConfig::tiny().augment,
        a.seed.wrapping_add(1000),
    );
    let classes = probe_data.iter().map(|lc| lc.label).max().unwrap() + 1;
    let (train, test) = split_per_class(&probe_data, 0.75)?;

    let mut rows = Vec::new();
    for &ratio in &a.ratios {
        let mut cfg = TrainConfig::tiny();
        cfg.model.mask_ratio = ratio;
        cfg.epochs = a.epochs;
        cfg.warmup_epochs = (a.epochs / 10).max(1);
        cfg.batch_size = 16;
        cfg.clouds_per_class = a.clouds_per_class;
        cfg.points_per_cloud = a.points_per_cloud;
        cfg.seed = a.seed;
        cfg.checkpoint_every = 0;
        let dataset: Vec<_> = make_dataset(&DatasetSpec {
            clouds_per_class: cfg.clouds_per_class,
            points_per_cloud: cfg.points_per_cloud,
            seed: cfg.seed,
        })?
        .into_iter()
        .map(|lc| lc.cloud)
        .collect();
        let mut trainer = Trainer::new(cfg)?;
        if !a.quiet {
            eprintln!("pretraining at mask ratio {ratio}");
        }
        let records = trainer.run(&dataset, None, None, false)?;
        let final_loss = records.last().map_or(f64::NAN, |r| r.total);
        let probe_cfg = ProbeConfig {
            epochs: a.probe_epochs,
            batch_size: 32,
            warmup_epochs: (a.probe_epochs / 10).max(1),
            seed: a.seed,
            ..ProbeConfig::default()
        };
        let out = train_probe(
            &trainer.store,
            &trainer.cfg.model,
            &probe_cfg,
            ProbeKind::MlpLinear,
            &train,
            &test,
            classes,
        )?;
        rows.push((ratio, final_loss, out.test_accuracy));
    }
    println!("{:>7} {:>12} {:>10}", "ratio", "final loss", "accuracy");
    for (ratio, loss, acc) in rows {
        println!("{ratio:>7.3} {loss:>12.6} {acc:>10.4}");
    }
    Ok(0)
}

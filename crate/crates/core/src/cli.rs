//! `skeladv` command line: data generation, training, attack, defense,
//! certification, combined evaluation, and rendering.
//!
//! Every flag may also be supplied through an optional JSON config file
//! (`--config`), keyed by the long flag name; explicit flags win. The seed
//! falls back to the `SKELADV_SEED` environment variable. All outputs are
//! written atomically and contain no timestamps, so identical invocations
//! produce byte-identical artifacts.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attack::AttackConfig;
use crate::dataio::{
    self, generate_synthetic_dataset, read_dataset, write_atomic, write_sequence, Dataset,
    GeneratorConfig, SequenceRecord,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_attack, evaluate_certified, evaluate_transfer, AttackMethod, EnvironmentStamp,
    GoalRule,
};
use crate::model::{
    argmax, train_reference_model, Classifier, LossMode, LossSpec, ReferenceClassifier,
    TrainConfig,
};
use crate::render::render_frames;
use crate::smoothing::{smoothed_predict, SmoothingConfig};
use crate::topology::SkeletonTopology;

const SEED_ENV: &str = "SKELADV_SEED";

#[derive(Parser)]
#[command(
    name = "skeladv",
    version,
    about = "Constrained adversarial skeleton actions: attack, defense, certification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic forward-kinematics dataset.
    GenData(GenDataArgs),
    /// Train the reference classifier on a dataset directory.
    Train(TrainArgs),
    /// Run the ADMM (or C&W) attack over a dataset's test split.
    Attack(AttackArgs),
    /// Smoothed (noisy, filtered) inference over a sequence directory.
    Defend(DefendArgs),
    /// Certify sequences and tabulate certified-accuracy curves.
    Certify(CertifyArgs),
    /// Attack + baseline + transfer in one report tree.
    Evaluate(EvaluateArgs),
    /// Render frames of a sequence (optionally overlaying an adversarial one).
    Render(RenderArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long = "per-class")]
    per_class: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    topology: Option<String>,
    /// Std of the per-sequence angle jitter (radians).
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    embed: Option<usize>,
    /// Comma-separated hidden layer widths.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Gaussian input-noise augmentation std (meters); 0 disables.
    #[arg(long = "noise-std")]
    noise_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct AttackFlags {
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    outer: Option<usize>,
    #[arg(long)]
    inner: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "eps-bone")]
    eps_bone: Option<f64>,
    #[arg(long = "eps-joint")]
    eps_joint: Option<f64>,
    #[arg(long = "eps-speed")]
    eps_speed: Option<f64>,
    #[arg(long)]
    conf: Option<f64>,
    /// Targeted mode (requires --target or --random-targets).
    #[arg(long)]
    targeted: bool,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long = "random-targets")]
    random_targets: bool,
    /// Use cross-entropy instead of the margin loss in targeted mode.
    #[arg(long = "cross-entropy")]
    cross_entropy: bool,
    /// Trade-off constant of the C&W baseline.
    #[arg(long = "cw-tradeoff")]
    cw_tradeoff: Option<f64>,
    /// Attack at most this many test sequences.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = ["admm", "cw"])]
    method: Option<String>,
    #[command(flatten)]
    flags: AttackFlags,
    /// Write per-sequence loss-evolution traces to traces.json.
    #[arg(long = "dump-traces")]
    dump_traces: bool,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DefendArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long = "kernel-sigma")]
    kernel_sigma: Option<f64>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated noise levels.
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long = "kernel-sigma")]
    kernel_sigma: Option<f64>,
    /// Comma-separated radius grid.
    #[arg(long)]
    radii: Option<String>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    flags: AttackFlags,
    /// Also run the C&W baseline on the same sequences.
    #[arg(long)]
    cw: bool,
    /// Evaluate transfer of the ADMM adversarial sequences to this model.
    #[arg(long = "transfer-model")]
    transfer_model: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    adv: Option<PathBuf>,
    /// Topology name; alternatively take it from --data's manifest.
    #[arg(long)]
    topology: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated frame indices.
    #[arg(long)]
    frames: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Entry point; returns the process exit status (0 ok, 1 domain error,
/// 2 usage error).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Defend(args) => cmd_defend(args),
        Command::Certify(args) => cmd_certify(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Render(args) => cmd_render(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

// ---------------------------------------------------------------------------
// Config-file merging
// ---------------------------------------------------------------------------

/// Flag defaults loaded from a JSON object keyed by long flag names.
struct FileConfig(BTreeMap<String, serde_json::Value>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self(BTreeMap::new()));
        };
        let text = std::fs::read_to_string(path)?;
        let map = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self(map))
    }

    fn f64(&self, key: &str) -> Option<f64> {
        self.0.get(key).and_then(|v| v.as_f64())
    }

    fn usize(&self, key: &str) -> Option<usize> {
        self.0.get(key).and_then(|v| v.as_u64()).map(|v| v as usize)
    }

    fn u64(&self, key: &str) -> Option<u64> {
        self.0.get(key).and_then(|v| v.as_u64())
    }

    fn string(&self, key: &str) -> Option<String> {
        self.0.get(key).and_then(|v| v.as_str()).map(str::to_string)
    }
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok())
}

fn resolve_seed(cli: Option<u64>, file: &FileConfig) -> u64 {
    cli.or_else(|| file.u64("seed")).or_else(env_seed).unwrap_or(0)
}

fn parse_f64_list(text: &str, flag: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("--{flag}: cannot parse `{s}` as a number")))
        })
        .collect()
}

fn parse_usize_list(text: &str, flag: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("--{flag}: cannot parse `{s}` as an index")))
        })
        .collect()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    write_atomic(path, text.as_bytes())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(args: GenDataArgs) -> Result<i32> {
    let file = FileConfig::load(args.config.as_deref())?;
    let cfg = GeneratorConfig {
        num_classes: args.classes.or_else(|| file.usize("classes")).unwrap_or(4),
        sequences_per_class: args
            .per_class
            .or_else(|| file.usize("per-class"))
            .unwrap_or(600),
        num_frames: args.frames.or_else(|| file.usize("frames")).unwrap_or(48),
        topology: args
            .topology
            .or_else(|| file.string("topology"))
            .unwrap_or_else(|| "ntu25".into()),
        bone_lengths: None,
        class_trajectories: None,
        angle_noise_std: args.noise.or_else(|| file.f64("noise")).unwrap_or(0.05),
        seed: resolve_seed(args.seed, &file),
    };
    let dataset = generate_synthetic_dataset(&cfg)?;
    dataio::write_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} train + {} test sequences ({} classes, T={}) to {}",
        dataset.train.len(),
        dataset.test.len(),
        dataset.num_classes,
        dataset.num_frames,
        args.out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let file = FileConfig::load(args.config.as_deref())?;
    let hidden = match args.hidden.or_else(|| file.string("hidden")) {
        Some(text) => parse_usize_list(&text, "hidden")?,
        None => vec![64, 32],
    };
    let cfg = TrainConfig {
        embed_dim: args.embed.or_else(|| file.usize("embed")).unwrap_or(32),
        hidden_dims: hidden,
        learning_rate: args.lr.or_else(|| file.f64("lr")).unwrap_or(1e-3),
        batch_size: args.batch.or_else(|| file.usize("batch")).unwrap_or(32),
        epochs: args.epochs.or_else(|| file.usize("epochs")).unwrap_or(30),
        seed: resolve_seed(args.seed, &file),
        noise_std: args.noise_std.or_else(|| file.f64("noise-std")).unwrap_or(0.0),
    };
    let dataset = read_dataset(&args.data)?;
    let outcome = train_reference_model(&dataset, &cfg)?;
    outcome.model.save(&args.out)?;
    println!(
        "trained on {} sequences; held-out accuracy {:.4}; model written to {}",
        dataset.train.len(),
        outcome.holdout_accuracy,
        args.out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// attack / evaluate shared plumbing
// ---------------------------------------------------------------------------

struct AttackPlan {
    cfg: AttackConfig,
    goal: GoalRule,
    limit: Option<usize>,
}

fn build_attack_plan(flags: &AttackFlags, seed: u64, file: &FileConfig) -> Result<AttackPlan> {
    let targeted =
        flags.targeted || flags.target.is_some() || flags.random_targets;
    if flags.target.is_some() && flags.random_targets {
        return Err(Error::Config(
            "--target and --random-targets are mutually exclusive".into(),
        ));
    }
    if flags.targeted && flags.target.is_none() && !flags.random_targets {
        return Err(Error::Config(
            "--targeted requires --target <label> or --random-targets".into(),
        ));
    }
    let conf = flags.conf.or_else(|| file.f64("conf")).unwrap_or(1.0);
    let mode = if targeted {
        if flags.cross_entropy {
            LossMode::TargetedCrossEntropy
        } else {
            LossMode::TargetedMargin
        }
    } else {
        LossMode::UntargetedMargin
    };
    // Placeholder labels; the batch driver instantiates them per sequence.
    let loss = LossSpec {
        mode,
        true_label: 0,
        target_label: if targeted { Some(usize::MAX) } else { None },
        conf,
    };
    let goal = if !targeted {
        GoalRule::Untargeted
    } else if let Some(t) = flags.target {
        GoalRule::TargetedFixed(t)
    } else {
        GoalRule::TargetedRandom
    };
    let mut constraints = crate::constraints::ConstraintConfig::default();
    constraints.eps_bone = flags.eps_bone.or_else(|| file.f64("eps-bone")).unwrap_or(0.03);
    constraints.eps_joint = flags.eps_joint.or_else(|| file.f64("eps-joint")).unwrap_or(0.2);
    constraints.eps_speed = flags.eps_speed.or_else(|| file.f64("eps-speed")).unwrap_or(0.1);
    let defaults = AttackConfig::default();
    let mut adam = defaults.adam;
    adam.learning_rate = flags.lr.or_else(|| file.f64("lr")).unwrap_or(adam.learning_rate);
    let cfg = AttackConfig {
        beta: flags.beta.or_else(|| file.f64("beta")).unwrap_or(defaults.beta),
        outer_iters: flags.outer.or_else(|| file.usize("outer")).unwrap_or(defaults.outer_iters),
        inner_steps: flags.inner.or_else(|| file.usize("inner")).unwrap_or(defaults.inner_steps),
        adam,
        loss,
        constraints,
        seed,
        cw_tradeoff: flags
            .cw_tradeoff
            .or_else(|| file.f64("cw-tradeoff"))
            .unwrap_or(1.0),
        ..Default::default()
    };
    Ok(AttackPlan {
        cfg,
        goal,
        limit: flags.limit.or_else(|| file.usize("limit")),
    })
}

fn load_model_and_data(model: &Path, data: &Path) -> Result<(ReferenceClassifier, Dataset)> {
    let model = ReferenceClassifier::load(model)?;
    let dataset = read_dataset(data)?;
    Ok((model, dataset))
}

fn test_slice(dataset: &Dataset, limit: Option<usize>) -> &[crate::sequence::SkeletonSequence] {
    match limit {
        Some(n) => &dataset.test[..n.min(dataset.test.len())],
        None => &dataset.test,
    }
}

/// Writes the attacked batch as a dataset-like directory (adv_*.json plus a
/// manifest), so defend/certify/render can consume it directly.
fn write_adversarial_dir(
    dataset: &Dataset,
    results: &[crate::attack::AttackResult],
    rows: &[crate::evaluation::SequenceRow],
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (row, result) in rows.iter().zip(results) {
        let name = format!("adv_{:05}.json", row.index);
        let mut record = SequenceRecord::from_sequence(&result.adversarial);
        // Keep the true label for downstream accuracy evaluation; the attack
        // goal travels in the metadata.
        record.label = row.label;
        let mut meta = BTreeMap::new();
        meta.insert("source_index".into(), row.index.to_string());
        meta.insert("success".into(), result.success.to_string());
        meta.insert("predicted".into(), result.predicted.to_string());
        meta.insert(
            "goal".into(),
            match result.loss_spec.mode {
                LossMode::UntargetedMargin => "untargeted".to_string(),
                LossMode::TargetedMargin => "targeted_margin".to_string(),
                LossMode::TargetedCrossEntropy => "targeted_cross_entropy".to_string(),
            },
        );
        if let Some(t) = result.loss_spec.target_label {
            meta.insert("target_label".into(), t.to_string());
        }
        record.metadata = Some(meta);
        write_sequence(&record, &dir.join(&name))?;
        entries.push(dataio::ManifestEntry {
            path: name,
            label: row.label,
            split: dataio::Split::Test,
        });
    }
    let manifest = dataio::DatasetManifest {
        format_version: dataio::FILE_FORMAT_VERSION,
        topology: dataset.topology_name.clone(),
        parent_list: dataset.topology.parent_list(),
        num_frames: dataset.num_frames,
        num_classes: dataset.num_classes,
        class_names: dataset.class_names.clone(),
        entries,
    };
    write_json(&manifest, &dir.join("manifest.json"))
}

fn run_attack_eval(
    model: &ReferenceClassifier,
    dataset: &Dataset,
    plan: &AttackPlan,
    method: AttackMethod,
    jobs: Option<usize>,
    out: &Path,
    dump_traces: bool,
) -> Result<crate::evaluation::AttackEvaluation> {
    let sequences = test_slice(dataset, plan.limit);
    let eval = evaluate_attack(model, &dataset.topology, sequences, &plan.cfg, method, plan.goal, jobs)?;
    std::fs::create_dir_all(out)?;
    write_json(&eval.report, &out.join("report.json"))?;
    write_atomic(&out.join("report.txt"), eval.report.to_text_table().as_bytes())?;
    write_adversarial_dir(dataset, &eval.results, &eval.report.rows, out)?;
    if dump_traces {
        let traces: Vec<_> = eval.results.iter().map(|r| &r.trace).collect();
        write_json(&traces, &out.join("traces.json"))?;
    }
    Ok(eval)
}

fn cmd_attack(args: AttackArgs) -> Result<i32> {
    let file = FileConfig::load(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, &file);
    let plan = match build_attack_plan(&args.flags, seed, &file) {
        Ok(plan) => plan,
        Err(e) => {
            // Mutually required flags are a usage error, not a domain error.
            eprintln!("error: {e}");
            return Ok(2);
        }
    };
    let method = match args
        .method
        .or_else(|| file.string("method"))
        .unwrap_or_else(|| "admm".into())
        .as_str()
    {
        "cw" => AttackMethod::Cw,
        _ => AttackMethod::Admm,
    };
    let (model, dataset) = load_model_and_data(&args.model, &args.data)?;
    let eval = run_attack_eval(&model, &dataset, &plan, method, args.jobs, &args.out, args.dump_traces)?;
    if let Some(a) = &eval.report.aggregates {
        println!(
            "attacked {} sequences: success_rate {:.4}, delta_bone_rel_mean {:.6}, l2_mean {:.6}",
            eval.report.rows.len(),
            a.success_rate,
            a.delta_bone_rel_mean,
            a.l2_mean
        );
    } else {
        println!("attacked 0 sequences (empty batch)");
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// defend
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DefenseRow {
    index: usize,
    label: usize,
    plain_predicted: usize,
    smoothed_predicted: usize,
}

#[derive(Serialize)]
struct DefenseReport {
    rows: Vec<DefenseRow>,
    plain_accuracy: f64,
    smoothed_accuracy: f64,
    config: serde_json::Value,
    environment: EnvironmentStamp,
}

fn cmd_defend(args: DefendArgs) -> Result<i32> {
    let file = FileConfig::load(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, &file);
    let smoothing = SmoothingConfig {
        sigma: args.sigma.or_else(|| file.f64("sigma")).unwrap_or(0.02),
        num_samples: args.samples.or_else(|| file.usize("samples")).unwrap_or(50),
        kernel_size: args.kernel.or_else(|| file.usize("kernel")).unwrap_or(5),
        kernel_sigma: args
            .kernel_sigma
            .or_else(|| file.f64("kernel-sigma"))
            .unwrap_or(1.0),
        seed,
        ..Default::default()
    };
    let (model, dataset) = load_model_and_data(&args.model, &args.data)?;
    let limit = args.limit.or_else(|| file.usize("limit"));
    let sequences = test_slice(&dataset, limit);

    let rows = crate::evaluation::run_indexed(args.jobs, sequences.len(), |i| {
        let mut cfg = smoothing.clone();
        cfg.seed = crate::evaluation::derive_seed(seed, i as u64);
        let plain = argmax(&model.forward(&sequences[i])?);
        let (smoothed, _) = smoothed_predict(&model, &sequences[i], &cfg)?;
        Ok(DefenseRow {
            index: i,
            label: sequences[i].label(),
            plain_predicted: plain,
            smoothed_predicted: smoothed,
        })
    })?;

    let n = rows.len().max(1) as f64;
    let plain_accuracy = rows.iter().filter(|r| r.plain_predicted == r.label).count() as f64 / n;
    let smoothed_accuracy =
        rows.iter().filter(|r| r.smoothed_predicted == r.label).count() as f64 / n;
    let report = DefenseReport {
        rows,
        plain_accuracy,
        smoothed_accuracy,
        config: serde_json::json!({
            "sigma": smoothing.sigma,
            "samples": smoothing.num_samples,
            "kernel": smoothing.kernel_size,
            "kernel-sigma": smoothing.kernel_sigma,
        }),
        environment: EnvironmentStamp::new(seed),
    };
    write_json(&report, &args.out)?;
    println!(
        "defense over {} sequences: plain accuracy {:.4}, smoothed accuracy {:.4}",
        report.rows.len(),
        plain_accuracy,
        smoothed_accuracy
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// certify
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CertifyReport {
    curves: Vec<crate::evaluation::CertifiedCurve>,
    config: serde_json::Value,
    environment: EnvironmentStamp,
}

fn default_radius_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.005).collect()
}

fn cmd_certify(args: CertifyArgs) -> Result<i32> {
    let file = FileConfig::load(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, &file);
    let sigmas = match args.sigma.or_else(|| file.string("sigma")) {
        Some(text) => parse_f64_list(&text, "sigma")?,
        None => vec![0.02],
    };
    let radii = match args.radii.or_else(|| file.string("radii")) {
        Some(text) => parse_f64_list(&text, "radii")?,
        None => default_radius_grid(),
    };
    let samples = args.samples.or_else(|| file.usize("samples")).unwrap_or(1000);
    if samples < 100 {
        eprintln!("warning: --samples {samples} is below the recommended minimum of 100");
    }
    let base = SmoothingConfig {
        sigma: sigmas[0],
        num_samples: samples,
        kernel_size: args.kernel.or_else(|| file.usize("kernel")).unwrap_or(5),
        kernel_sigma: args
            .kernel_sigma
            .or_else(|| file.f64("kernel-sigma"))
            .unwrap_or(1.0),
        alpha: args.alpha.or_else(|| file.f64("alpha")).unwrap_or(0.05),
        seed,
        ..Default::default()
    };
    let (model, dataset) = load_model_and_data(&args.model, &args.data)?;
    let limit = args.limit.or_else(|| file.usize("limit"));
    let sequences = test_slice(&dataset, limit);
    let curves = evaluate_certified(&model, sequences, &base, &sigmas, &radii, args.jobs)?;

    std::fs::create_dir_all(&args.out)?;
    let mut table = String::new();
    table.push_str("sigma   radius  certified_accuracy\n");
    for curve in &curves {
        for (r, acc) in curve.radii.iter().zip(&curve.certified_accuracy) {
            table.push_str(&format!("{:<7.4} {:<7.4} {:.4}\n", curve.sigma, r, acc));
        }
    }
    let report = CertifyReport {
        curves,
        config: serde_json::json!({
            "samples": samples,
            "alpha": base.alpha,
            "kernel": base.kernel_size,
            "kernel-sigma": base.kernel_sigma,
            "sigmas": sigmas,
        }),
        environment: EnvironmentStamp::new(seed),
    };
    write_json(&report, &args.out.join("cert.json"))?;
    write_atomic(&args.out.join("cert.txt"), table.as_bytes())?;
    println!("certified {} sequences at {} noise level(s)", sequences.len(), report.curves.len());
    Ok(0)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn cmd_evaluate(args: EvaluateArgs) -> Result<i32> {
    let file = FileConfig::load(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, &file);
    let plan = match build_attack_plan(&args.flags, seed, &file) {
        Ok(plan) => plan,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(2);
        }
    };
    let (model, dataset) = load_model_and_data(&args.model, &args.data)?;
    std::fs::create_dir_all(&args.out)?;

    let admm = run_attack_eval(
        &model,
        &dataset,
        &plan,
        AttackMethod::Admm,
        args.jobs,
        &args.out.join("admm"),
        false,
    )?;
    let mut summary = String::new();
    if let Some(a) = &admm.report.aggregates {
        summary.push_str(&format!(
            "admm: success_rate {:.4} delta_bone_rel_mean {:.6} delta_joint_mean {:.6} l2_mean {:.6}\n",
            a.success_rate, a.delta_bone_rel_mean, a.delta_joint_mean, a.l2_mean
        ));
    }
    if args.cw {
        let cw = run_attack_eval(
            &model,
            &dataset,
            &plan,
            AttackMethod::Cw,
            args.jobs,
            &args.out.join("cw"),
            false,
        )?;
        if let Some(a) = &cw.report.aggregates {
            summary.push_str(&format!(
                "cw:   success_rate {:.4} delta_bone_rel_mean {:.6} delta_joint_mean {:.6} l2_mean {:.6}\n",
                a.success_rate, a.delta_bone_rel_mean, a.delta_joint_mean, a.l2_mean
            ));
        }
    }
    if let Some(path) = &args.transfer_model {
        let target = ReferenceClassifier::load(path)?;
        let transfer = evaluate_transfer(&admm.results, &target)?;
        write_json(&transfer, &args.out.join("transfer.json"))?;
        summary.push_str(&format!(
            "transfer: {}/{} = {:.4}\n",
            transfer.transferred, transfer.total, transfer.transfer_rate
        ));
    }
    write_atomic(&args.out.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(0)
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

fn cmd_render(args: RenderArgs) -> Result<i32> {
    let file = FileConfig::load(args.config.as_deref())?;
    let topo = if let Some(dir) = &args.data {
        let manifest = dataio::read_manifest(dir)?;
        SkeletonTopology::from_parent_list(&manifest.parent_list)?
    } else {
        let name = args
            .topology
            .or_else(|| file.string("topology"))
            .unwrap_or_else(|| "ntu25".into());
        SkeletonTopology::by_name(&name)?
    };
    let frames = parse_usize_list(&args.frames, "frames")?;
    let seq = dataio::read_sequence(&args.input)?.to_sequence()?;
    let adv = match &args.adv {
        Some(path) => Some(dataio::read_sequence(path)?.to_sequence()?),
        None => None,
    };
    render_frames(&seq, adv.as_ref(), &topo, &frames, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(0)
}

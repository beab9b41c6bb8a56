//! `mrssm`: generate data, train, evaluate and inspect MRSSM models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mrssm::config::RunConfig;
use mrssm::eval::{
    control_baseline, evaluate, final_pose_error, integrate_pose, true_relative_pose, Anchor, ModelPredictor,
    VelocityPredictor,
};
use mrssm::experiment::{eval_config_for, generate_data, train_into, CHECKPOINT};
use mrssm::model::{Mrssm, Subset};
use mrssm::selftest::run_selftest;
use mrssm::simulator::{read_dataset, write_dataset, Dataset};
use mrssm::training::ElboVariant;
use mrssm::Error;

const TRAIN_SPLIT: &str = "train";
const HELD_OUT_SPLIT: &str = "held_out";

#[derive(Parser)]
#[command(name = "mrssm", version, about = "Multimodal recurrent state-space model with product-of-experts fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file of flat dotted keys, applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=20`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate training and held-out trajectories.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; receives `train/` and `held_out/`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (its `train/` split when present).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Objective: mvae, new or concat.
        #[arg(long)]
        elbo: Option<ElboVariant>,
    },
    /// Final-pose errors for every ablation, horizon and terrain group.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (its `held_out/` split when present).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predicted vs. true final pose for one anchor.
    Predict {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (its `held_out/` split when present).
        #[arg(long)]
        data: PathBuf,
        /// Trajectory index.
        #[arg(long)]
        trajectory: usize,
        /// Anchor step: filtering ends here.
        #[arg(long)]
        t: usize,
        /// Prediction horizon in steps.
        #[arg(long, default_value_t = 30)]
        horizon: usize,
        /// Observed modalities: `all`, `none` or names joined by `+`.
        #[arg(long, default_value = "all")]
        subset: String,
    },
    /// Property suite: PoE/KL oracles, gradient checks, pose integration.
    Selftest {
        #[command(flatten)]
        config: ConfigArgs,
        /// Trained checkpoint for the missing-modality check; a miniature
        /// model is trained when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 1 } else { 2 };
        Failure { code, message: e.to_string() }
    }
}

fn load_config(args: &ConfigArgs, extra: &[String]) -> Result<RunConfig, Failure> {
    let mut sets = args.sets.clone();
    sets.extend_from_slice(extra);
    Ok(RunConfig::load(args.config.as_deref(), &sets)?)
}

fn read_split(dir: &Path, split: &str) -> Result<Dataset, Failure> {
    let sub = dir.join(split);
    let path = if sub.join("meta.json").exists() { sub } else { dir.to_path_buf() };
    Ok(read_dataset(&path)?)
}

fn path_set(key: &str, path: &Path) -> String {
    format!("{key}={}", serde_json::Value::String(path.display().to_string()))
}

fn gen_data(config: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let config = load_config(config, &[])?;
    let (train, held_out) = generate_data(&config)?;
    write_dataset(&train, &out.join(TRAIN_SPLIT))?;
    write_dataset(&held_out, &out.join(HELD_OUT_SPLIT))?;
    config.write_resolved(out)?;
    println!(
        "wrote {} training and {} held-out trajectories to {}",
        train.trajectories.len(),
        held_out.trajectories.len(),
        out.display()
    );
    Ok(())
}

fn train(config: &ConfigArgs, data: &Path, out: &Path, elbo: Option<ElboVariant>) -> Result<(), Failure> {
    let mut extra = vec![path_set("paths.data", data), path_set("paths.out", out)];
    if let Some(elbo) = elbo {
        extra.push(format!("train.elbo=\"{elbo}\""));
    }
    let config = load_config(config, &extra)?;
    let dataset = read_split(data, TRAIN_SPLIT)?;
    let trained = train_into(&config, &dataset, out, false, |m| {
        eprintln!("epoch {:>3}  loss {:>12.3}  kl {:>9.3}  grad-norm {:>8.3}", m.epoch, m.loss, m.kl, m.grad_norm)
    })?;
    if let (Some(first), Some(last)) = (trained.metrics.first(), trained.metrics.last()) {
        println!("trained {} epochs: loss {:.3} -> {:.3}; checkpoint {}", last.epoch, first.loss, last.loss, out.join(CHECKPOINT).display());
    }
    Ok(())
}

fn eval(config: &ConfigArgs, checkpoint: &Path, data: &Path, out: &Path) -> Result<(), Failure> {
    let extra = [path_set("paths.data", data), path_set("paths.out", out), path_set("paths.checkpoint", checkpoint)];
    let config = load_config(config, &extra)?;
    let model = Mrssm::load(checkpoint)?;
    let dataset = read_split(data, HELD_OUT_SPLIT)?;
    let report = evaluate(&model, &dataset, &eval_config_for(&config, &model))?;
    report.write(out)?;
    config.write_resolved(out)?;
    print!("{}", report.to_csv());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn predict(
    config: &ConfigArgs,
    checkpoint: &Path,
    data: &Path,
    trajectory: usize,
    t: usize,
    horizon: usize,
    subset: &str,
) -> Result<(), Failure> {
    let config = load_config(config, &[])?;
    let model = Mrssm::load(checkpoint)?;
    let dataset = read_split(data, HELD_OUT_SPLIT)?;
    let usage = |m: String| Failure { code: 1, message: m };
    let traj = dataset
        .trajectories
        .get(trajectory)
        .ok_or_else(|| usage(format!("trajectory {trajectory} out of range ({} available)", dataset.trajectories.len())))?;
    let context = config.eval.context;
    if horizon == 0 || t + 1 < context || t + horizon >= traj.len() {
        return Err(usage(format!(
            "anchor t={t} with horizon {horizon} needs {} <= t and t + horizon < {}",
            context - 1,
            traj.len()
        )));
    }
    let subset = Subset::parse(subset, &model.config().modalities)?;
    let predictor = ModelPredictor::new(&model, &config.eval)?;
    let anchor = Anchor { traj: trajectory, t };
    let (v, w) = predictor.predict(&dataset, &[anchor], context, subset, horizon)?.remove(0);
    let dt = traj.dt;
    let predicted = integrate_pose(&v, &w, dt)?;
    let truth = true_relative_pose(&dataset, anchor, horizon)?;
    let control = control_baseline(&traj.actions[t..t + horizon], dt)?;
    println!("step  v_pred   v_true   w_pred   w_true");
    for k in 0..horizon {
        let s = &traj.states[t + 1 + k];
        println!("{:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", k + 1, v[k], s.v, w[k], s.omega);
    }
    println!("true pose      x {:>8.4}  y {:>8.4}  theta {:>8.4}", truth.x, truth.y, truth.theta);
    println!("predicted pose x {:>8.4}  y {:>8.4}  theta {:>8.4}  error {:.4} m", predicted.x, predicted.y, predicted.theta, final_pose_error(&predicted, &truth));
    println!("control pose   x {:>8.4}  y {:>8.4}  theta {:>8.4}  error {:.4} m", control.x, control.y, control.theta, final_pose_error(&control, &truth));
    Ok(())
}

fn selftest(config: &ConfigArgs, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let config = load_config(config, &[])?;
    let model = checkpoint.map(Mrssm::load).transpose()?;
    let results = run_selftest(model.as_ref(), &config.sim, |c| println!("{c}"));
    let failed = results.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure { code: 3, message: format!("{failed} selftest criteria failed") });
    }
    println!("selftest passed");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train { config, data, out, elbo } => train(&config, &data, &out, elbo),
        Command::Eval { config, checkpoint, data, out } => eval(&config, &checkpoint, &data, &out),
        Command::Predict { config, checkpoint, data, trajectory, t, horizon, subset } => {
            predict(&config, &checkpoint, &data, trajectory, t, horizon, &subset)
        }
        Command::Selftest { config, checkpoint } => selftest(&config, checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

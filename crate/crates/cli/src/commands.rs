//! Command implementations. Exit-code contract: 0 success, 1 check failure,
//! 2 usage/config error, 3 numeric failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use multistream::checkpoint;
use multistream::data::{generate_synthetic, read_features, write_features, FrameBatch, TaskSpec};
use multistream::model::{param_count, Model};
use multistream::tensor::gradcheck::{finite_diff_check, GradCheckOptions};
use multistream::tensor::{Mode, Tensor};
use multistream::train::{evaluate, Trainer};
use multistream::Error;

use crate::config::{load_config, RunConfig};

pub enum CmdError {
    Core(Error),
    /// A check ran and failed (gradient offenders, count mismatch).
    CheckFailed(String),
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        CmdError::Core(e)
    }
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Core(e) => e.exit_code(),
            CmdError::CheckFailed(_) => 1,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CmdError::Core(e) => e.to_string(),
            CmdError::CheckFailed(m) => m.clone(),
        }
    }
}

pub type CmdResult = Result<(), CmdError>;

fn eval_task(task: &TaskSpec) -> TaskSpec {
    TaskSpec {
        seed: task.seed + 1,
        num_sequences: task.num_eval_sequences,
        ..task.clone()
    }
}

fn read_labeled(path: &Path) -> Result<Vec<FrameBatch>, CmdError> {
    let outcome = read_features(path)?;
    for w in &outcome.warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    if outcome.batches.iter().any(|b| b.labels.is_none()) {
        return Err(CmdError::Core(Error::Config(format!(
            "{} has no labels; training and evaluation need labeled data",
            path.display()
        ))));
    }
    Ok(outcome.batches)
}

/// Training (or eval) sequences: an explicit container file wins, otherwise
/// the `[task]` section generates them.
fn resolve_data(
    config: &RunConfig,
    file: Option<&PathBuf>,
    eval: bool,
) -> Result<Vec<FrameBatch>, CmdError> {
    if let Some(path) = file {
        return read_labeled(path);
    }
    let task = config.task.as_ref().ok_or_else(|| {
        CmdError::Core(Error::Config(
            "no data file given and the config has no [task] section to generate from".into(),
        ))
    })?;
    let spec = if eval { eval_task(task) } else { task.clone() };
    Ok(generate_synthetic(&spec)?)
}

fn check_data_compat(model: &Model, data: &[FrameBatch]) -> CmdResult {
    let want = model.config().input_dim;
    for b in data {
        if b.input_dim != want {
            return Err(CmdError::Core(Error::Config(format!(
                "data has input_dim {} but the model expects {want}",
                b.input_dim
            ))));
        }
    }
    Ok(())
}

fn check_task_compat(config: &RunConfig) -> CmdResult {
    if let Some(task) = &config.task {
        if task.input_dim != config.model.input_dim {
            return Err(CmdError::Core(Error::Config(format!(
                "task.input_dim {} != model.input_dim {}",
                task.input_dim, config.model.input_dim
            ))));
        }
        if task.num_classes != config.model.num_classes {
            return Err(CmdError::Core(Error::Config(format!(
                "task.num_classes {} != model.num_classes {}",
                task.num_classes, config.model.num_classes
            ))));
        }
    }
    Ok(())
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
}

pub fn cmd_train(args: TrainArgs) -> CmdResult {
    let config = load_config(&args.config, &args.overrides)?;
    check_task_compat(&config)?;
    let model = Model::build(config.model.clone())?;

    let train_file = args.data.clone().or_else(|| config.paths.train_data.clone());
    let data = resolve_data(&config, train_file.as_ref(), false)?;
    check_data_compat(&model, &data)?;
    let eval_file = args.eval_data.clone().or_else(|| config.paths.eval_data.clone());
    let eval_data = if eval_file.is_some() || config.task.is_some() {
        let d = resolve_data(&config, eval_file.as_ref(), true)?;
        check_data_compat(&model, &d)?;
        Some(d)
    } else {
        None
    };

    let metrics_path = args.metrics_out.clone().or_else(|| config.paths.metrics.clone());
    let mut metrics_file = match &metrics_path {
        Some(p) => Some(std::fs::File::create(p).map_err(Error::Io)?),
        None => None,
    };

    let epochs = config.train.epochs;
    let steps = Trainer::steps_per_epoch(data.len(), config.train.batch_size);
    let mut trainer = Trainer::new(&model, config.train.clone(), steps);
    for epoch in 0..epochs {
        let mut metrics = trainer.train_epoch(epoch, &data)?;
        if let Some(eval_set) = &eval_data {
            let (l, a) = evaluate(&model, eval_set)?;
            metrics.eval_loss = Some(l);
            metrics.eval_accuracy = Some(a);
        }
        let line = metrics.to_json_line();
        println!("{line}");
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{line}").map_err(Error::Io)?;
        }
    }

    let ck_path = args
        .checkpoint_out
        .clone()
        .or_else(|| config.paths.checkpoint.clone())
        .unwrap_or_else(|| PathBuf::from("checkpoint.msac"));
    checkpoint::save(&model, &ck_path)?;
    eprintln!("checkpoint written to {}", ck_path.display());
    Ok(())
}

pub struct EvaluateArgs {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
}

pub fn cmd_evaluate(args: EvaluateArgs) -> CmdResult {
    let config = load_config(&args.config, &args.overrides)?;
    let model = checkpoint::load(&args.checkpoint)?;
    let file = args.data.clone().or_else(|| config.paths.eval_data.clone());
    let data = resolve_data(&config, file.as_ref(), true)?;
    check_data_compat(&model, &data)?;
    let (loss, accuracy) = evaluate(&model, &data)?;
    let frames: usize = data.iter().map(|b| b.len()).sum();
    println!(
        "{}",
        serde_json::json!({ "loss": loss, "accuracy": accuracy, "frames": frames })
    );
    Ok(())
}

pub struct GradCheckArgs {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub eps: f64,
    pub tolerance: f64,
    pub max_coords: usize,
    pub frames: usize,
    pub corrupt_backward: bool,
}

pub fn cmd_gradcheck(args: GradCheckArgs) -> CmdResult {
    let config = load_config(&args.config, &args.overrides)?;
    let model = Model::build(config.model.clone())?;
    let classes = model.config().num_classes;
    let t = args.frames;

    // Tiny random batch, pinned by the model seed.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(model.config().seed ^ 0x67726164);
    let features = Tensor::new(
        vec![t, model.config().input_dim],
        (0..t * model.config().input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..classes)).collect();

    let opts = GradCheckOptions {
        eps: args.eps,
        tolerance: args.tolerance,
        max_coords_per_param: Some(args.max_coords),
        sample_seed: 1,
    };
    let mut first_call = true;
    let corrupt = args.corrupt_backward;
    let report = finite_diff_check(model.parameters(), &opts, || {
        model.reseed_dropout(0xd70b0a);
        let logits = model.forward(&features, Mode::Train)?;
        let loss = logits.cross_entropy_sum(&labels)?.scale(1.0 / t as f64);
        // Negative-control hook: scaling only the analytic pass simulates a
        // broken backward implementation.
        let loss = if corrupt && first_call { loss.scale(1.001) } else { loss };
        first_call = false;
        Ok(loss)
    })?;

    println!(
        "{:<40} {:>10} {:>14} {:>14}  {}",
        "parameter", "coords", "max rel err", "max abs err", "status"
    );
    for e in &report.entries {
        println!(
            "{:<40} {:>4}/{:<5} {:>14.3e} {:>14.3e}  {}",
            e.name,
            e.checked,
            e.total,
            e.max_rel_err,
            e.max_abs_err,
            if e.max_rel_err <= report.tolerance { "ok" } else { "FAIL" }
        );
    }
    println!(
        "checked {} parameters at eps {:.1e}, tolerance {:.1e}",
        report.entries.len(),
        args.eps,
        args.tolerance
    );

    if report.pass() {
        println!("gradient check: PASS");
        Ok(())
    } else {
        let offenders: Vec<String> =
            report.offenders().iter().map(|e| format!("{} ({:.3e})", e.name, e.max_rel_err)).collect();
        println!("gradient check: FAIL");
        Err(CmdError::CheckFailed(format!(
            "gradient check failed for: {}",
            offenders.join(", ")
        )))
    }
}

pub struct ParamCountArgs {
    pub config: PathBuf,
    pub overrides: Vec<String>,
}

pub fn cmd_paramcount(args: ParamCountArgs) -> CmdResult {
    let config = load_config(&args.config, &args.overrides)?;
    let counted = param_count(&config.model)?;
    for (name, count) in &counted.components {
        println!("{name:<28} {count:>12}");
    }
    println!("{:<28} {:>12}", "total (closed form)", counted.total);

    let model = Model::build(config.model.clone())?;
    let enumerated = model.enumerate_params();
    println!("{:<28} {:>12}", "total (enumerated)", enumerated);
    if counted.total != enumerated {
        return Err(CmdError::CheckFailed(format!(
            "closed-form count {} != enumerated count {enumerated}; this is a bug",
            counted.total
        )));
    }
    Ok(())
}

pub struct DataGenArgs {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub out: PathBuf,
    pub eval_out: Option<PathBuf>,
}

pub fn cmd_datagen(args: DataGenArgs) -> CmdResult {
    let config = load_config(&args.config, &args.overrides)?;
    let task = config.task.as_ref().ok_or_else(|| {
        CmdError::Core(Error::Config("data-gen needs a [task] section".into()))
    })?;
    let data = generate_synthetic(task)?;
    write_features(&args.out, &data)?;
    let frames: usize = data.iter().map(|b| b.len()).sum();
    println!(
        "{}",
        serde_json::json!({ "path": args.out.display().to_string(), "sequences": data.len(), "frames": frames })
    );
    if let Some(eval_out) = &args.eval_out {
        let eval = generate_synthetic(&eval_task(task))?;
        write_features(eval_out, &eval)?;
        let frames: usize = eval.iter().map(|b| b.len()).sum();
        println!(
            "{}",
            serde_json::json!({ "path": eval_out.display().to_string(), "sequences": eval.len(), "frames": frames })
        );
    }
    Ok(())
}

pub struct DumpArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
}

pub fn cmd_dump(args: DumpArgs) -> CmdResult {
    let model = checkpoint::load(&args.checkpoint)?;
    let outcome = read_features(&args.input)?;
    for w in &outcome.warnings {
        eprintln!("warning: {}: {w}", args.input.display());
    }
    let d_model = model.config().d_model;
    let mut embedded = Vec::with_capacity(outcome.batches.len());
    for batch in &outcome.batches {
        if batch.input_dim != model.config().input_dim {
            return Err(CmdError::Core(Error::Config(format!(
                "input features have dim {} but the checkpoint expects {}",
                batch.input_dim,
                model.config().input_dim
            ))));
        }
        let x = Tensor::new(vec![batch.len(), batch.input_dim], batch.feature_rows())?;
        let emb = model.embed(&x, Mode::Infer)?;
        let values: Vec<f32> = emb.values().iter().map(|&v| v as f32).collect();
        embedded.push(FrameBatch::new(d_model, values, None)?);
    }
    if embedded.is_empty() {
        return Err(CmdError::Core(Error::EmptyInput(format!(
            "{} contains no non-empty utterances",
            args.input.display()
        ))));
    }
    write_features(&args.out, &embedded)?;
    let frames: usize = embedded.iter().map(|b| b.len()).sum();
    println!(
        "{}",
        serde_json::json!({ "path": args.out.display().to_string(), "sequences": embedded.len(), "frames": frames, "dim": d_model })
    );
    Ok(())
}

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use msl_core::imageio;
use msl_core::lambda_opt::{self, LambdaOptConfig};
use msl_core::metrics::{self, MetricReport};
use msl_core::model::{LambdaField, MslModel};
use msl_core::training::{Dataset, TrainConfig, Trainer};
use msl_core::{MslError, Result};

use crate::server::{self, ServerConfig};
use crate::workflow::{self, CaseInput, InputSet};

#[derive(Debug, Parser)]
#[command(name = "msl", version, about = "Multi-sensor learning for hybrid CT/MRI imaging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate paired phantoms and their simulated sensory data.
    GenData(GenDataArgs),
    /// Train a model and write `model.mslc` and `curve.csv`.
    Train(TrainArgs),
    /// Decode one case at a global lambda or a lambda map.
    Infer(InferArgs),
    /// Decode over a lambda grid and tabulate metrics.
    Sweep(SweepArgs),
    /// Optimize a spatial lambda map for one case.
    OptimizeLambda(OptimizeArgs),
    /// Mean metric report over a set of held-out cases.
    Eval(EvalArgs),
    /// Per-case mean token-group features as CSV.
    ExportFeatures(ExportArgs),
    /// Serve the HTTP inference API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of training pairs.
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
    #[arg(long, default_value_t = 2)]
    pub heldout: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sensor and size settings; flags given explicitly override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print a progress line every N iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct CaseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Case directory (sinogram.mgt and/or kspace.mgt, optional ground truth).
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long, value_enum, default_value_t = InputSet::Both)]
    pub inputs: InputSet,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("hybrid").required(true).args(["lambda", "lambda_map"]))]
pub struct InferArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    #[arg(long, value_parser = parse_lambda, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Lambda map file (`.mgt` or 8-bit `.png`) at image or representation size.
    #[arg(long)]
    pub lambda_map: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    /// Number of evenly spaced lambda values in [0, 1].
    #[arg(long, default_value_t = 11)]
    pub grid: usize,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory (its `heldout/` split is used) or a directory of cases.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 11)]
    pub grid: usize,
    #[arg(long, value_enum, default_value_t = InputSet::Both)]
    pub inputs: InputSet,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = InputSet::Both)]
    pub inputs: InputSet,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory whose case subdirectories can be opened by id.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Listening port; defaults to `MSL_PORT`, then 8080.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

fn parse_lambda(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("lambda {v} outside [0, 1]"))
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 2 for usage errors and 1
/// for runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Infer(a) => infer(&a),
        Command::Sweep(a) => sweep(&a),
        Command::OptimizeLambda(a) => optimize(&a),
        Command::Eval(a) => eval(&a),
        Command::ExportFeatures(a) => export_features(&a),
        Command::Serve(a) => serve(a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = a.size {
        cfg.model.image_size = s;
    }
    if let Some(v) = a.views {
        cfg.views = v;
    }
    if let Some(r) = a.rate {
        cfg.kspace_rate = r;
    }
    cfg.validate()?;
    let ds = Dataset::generate(a.pairs, a.heldout, a.seed, cfg.model.image_size, &cfg.sensors())?;
    ds.save(&a.out)?;
    println!(
        "wrote {} training and {} held-out pairs to {}",
        ds.train.len(),
        ds.heldout.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let file_cfg = a.config.as_deref().map(TrainConfig::load).transpose()?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(p, file_cfg)?,
        None => Trainer::new(file_cfg.unwrap_or_else(TrainConfig::desk))?,
    };
    if let Some(n) = a.iterations {
        trainer.config.iterations = n;
    }
    if let Some(lr) = a.lr {
        trainer.config.lr = lr;
    }
    trainer.config.validate()?;
    let ds = Dataset::load(&a.data)?;
    if ds.train.is_empty() {
        return Err(MslError::InvalidInput(format!(
            "{} has no training cases",
            a.data.display()
        )));
    }
    let size = trainer.config.model.image_size;
    if ds.train[0].pair.ct_gt.height != size {
        return Err(MslError::Config(format!(
            "dataset images are {}x{} but the model expects {size}x{size}",
            ds.train[0].pair.ct_gt.height, ds.train[0].pair.ct_gt.width
        )));
    }
    let every = a.log_every;
    let total = trainer.config.iterations;
    trainer.run(&ds.train, Some(&a.out), |row| {
        if every > 0 && ((row.iteration + 1) % every == 0 || row.iteration + 1 == total) {
            println!(
                "iteration {} total {:.5} lr {:.2e}",
                row.iteration + 1,
                row.loss.total,
                row.lr
            );
        }
    })?;
    println!("wrote {}", a.out.join("model.mslc").display());
    Ok(())
}

fn open(c: &CaseArgs) -> Result<(MslModel, CaseInput)> {
    let model = MslModel::load(&c.checkpoint)?;
    let case = CaseInput::load(&c.case, c.inputs, model.config.image_size)?;
    fs::create_dir_all(&c.out)?;
    Ok((model, case))
}

fn write_image(dir: &Path, stem: &str, r: &workflow::Rendered) -> Result<()> {
    fs::write(dir.join(format!("{stem}.mgt")), workflow::image_mgt(&r.image))?;
    fs::write(dir.join(format!("{stem}.png")), &r.png)?;
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    let (model, case) = open(&a.case)?;
    let lam = match (&a.lambda, &a.lambda_map) {
        (Some(l), _) => LambdaField::Scalar(*l),
        (None, Some(p)) => LambdaField::from_map(lambda_opt::load_lambda_map(p)?, model.rep_size())?,
        (None, None) => unreachable!("clap requires one of --lambda, --lambda-map"),
    };
    let rep = model.representation(&case.inputs)?;
    let out = workflow::render(&model, &rep, &lam)?;
    let stem = workflow::output_stem(&lam);
    write_image(&a.case.out, &stem, &out)?;
    println!("wrote {}", a.case.out.join(format!("{stem}.mgt")).display());
    let label = match &lam {
        LambdaField::Scalar(l) => *l,
        LambdaField::Map(m) => workflow::map_mean(m),
    };
    if let Some(row) = workflow::metrics_for(&case, label, &out.image)? {
        println!(
            "mae_vs_ct {:.5} ssim_vs_ct {:.5} mae_vs_mri {:.5} ssim_vs_mri {:.5}",
            row.mae_vs_ct, row.ssim_vs_ct, row.mae_vs_mri, row.ssim_vs_mri
        );
    }
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let (model, case) = open(&a.case)?;
    let rep = model.representation(&case.inputs)?;
    let mut outputs = Vec::new();
    for (i, l) in metrics::lambda_grid(a.grid)?.into_iter().enumerate() {
        let out = workflow::render(&model, &rep, &LambdaField::Scalar(l))?;
        write_image(&a.case.out, &format!("lambda_{i:02}"), &out)?;
        outputs.push((l, out.image));
    }
    match case.ground_truth() {
        Some((ct, mri)) => {
            let report = metrics::sweep_report(&outputs, ct, mri)?;
            report.write(&a.case.out.join("report.csv"))?;
            fs::write(a.case.out.join("paired.csv"), report.paired_csv()?)?;
            println!(
                "wrote {} images and report.csv to {}",
                outputs.len(),
                a.case.out.display()
            );
        }
        None => println!(
            "wrote {} images to {} (no ground truth, no report)",
            outputs.len(),
            a.case.out.display()
        ),
    }
    Ok(())
}

fn optimize(a: &OptimizeArgs) -> Result<()> {
    let (model, case) = open(&a.case)?;
    let mut cfg = LambdaOptConfig::default();
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.iters {
        cfg.iterations = v;
    }
    if let Some(v) = a.step {
        cfg.step = v;
    }
    let rep = model.representation(&case.inputs)?;
    let res = lambda_opt::optimize_lambda_map(&model, &rep, &cfg)?;
    let out = &a.case.out;
    lambda_opt::save_lambda_map(&out.join("lambda_map.mgt"), &res.map)?;
    let r = workflow::Rendered {
        png: imageio::encode_png(&res.image)?,
        image: res.image.clone(),
    };
    write_image(out, "msl_opt", &r)?;
    let mut trace = String::from("iteration,objective\n");
    for (i, v) in res.trace.iter().enumerate() {
        trace.push_str(&format!("{i},{v}\n"));
    }
    fs::write(out.join("trace.csv"), trace)?;
    println!(
        "objective {:.6} (initial {:.6}) at iteration {}; wrote lambda_map.mgt and msl_opt.mgt to {}",
        res.objective,
        res.trace[0],
        res.best_iteration,
        out.display()
    );
    Ok(())
}

/// Case directories of a dataset's held-out split, or of `dir` itself.
fn case_dirs(dir: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let root = if dir.join(split).is_dir() {
        dir.join(split)
    } else {
        dir.to_path_buf()
    };
    if !root.is_dir() {
        return Err(MslError::InvalidInput(format!("{} is not a directory", root.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(MslError::InvalidInput(format!(
            "no case directories under {}",
            root.display()
        )));
    }
    Ok(dirs)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = MslModel::load(&a.checkpoint)?;
    let grid = metrics::lambda_grid(a.grid)?;
    let mut reports = Vec::new();
    let mut fusion = Vec::new();
    let mut lines = vec!["case,fbp_mae_vs_ct,zero_filled_mae_vs_mri,msl_ct_mae_vs_ct,msl_mri_mae_vs_mri".to_string()];
    for dir in case_dirs(&a.data, "heldout")? {
        let case = CaseInput::load(&dir, a.inputs, model.config.image_size)?;
        let (ct_gt, mri_gt) = case
            .ground_truth()
            .ok_or_else(|| MslError::InvalidInput(format!("{} lacks ground truth", dir.display())))?;
        let rep = model.representation(&case.inputs)?;
        let outputs = grid
            .iter()
            .map(|&l| Ok((l, model.decode(&rep, &LambdaField::Scalar(l))?)))
            .collect::<Result<Vec<_>>>()?;
        let report = metrics::sweep_report(&outputs, ct_gt, mri_gt)?;
        let blends = grid
            .iter()
            .map(|&l| Ok((l, metrics::pixel_blend(ct_gt, mri_gt, l)?)))
            .collect::<Result<Vec<_>>>()?;
        fusion.push(metrics::sweep_report(&blends, ct_gt, mri_gt)?);
        let (fbp, zf) = workflow::baseline_mae(&case)?;
        let first = &report.rows[0];
        let last = report.rows.last().expect("grid is nonempty");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        lines.push(format!(
            "{},{},{},{},{}",
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            opt(fbp),
            opt(zf),
            first.mae_vs_ct,
            last.mae_vs_mri
        ));
        reports.push(report);
    }
    let mean = MetricReport::mean(&reports)?;
    fs::create_dir_all(&a.out)?;
    mean.write(&a.out.join("report.csv"))?;
    fs::write(a.out.join("paired.csv"), mean.paired_csv()?)?;
    MetricReport::mean(&fusion)?.write(&a.out.join("fusion_report.csv"))?;
    fs::write(a.out.join("baselines.csv"), lines.join("\n") + "\n")?;
    print!("{}", mean.to_csv()?);
    Ok(())
}

fn export_features(a: &ExportArgs) -> Result<()> {
    let model = MslModel::load(&a.checkpoint)?;
    let mut dirs = Vec::new();
    for split in ["train", "heldout"] {
        if a.data.join(split).is_dir() {
            dirs.extend(case_dirs(&a.data, split)?.into_iter().map(|d| (split, d)));
        }
    }
    if dirs.is_empty() {
        dirs = case_dirs(&a.data, "")?.into_iter().map(|d| ("", d)).collect();
    }
    let d = model.config.model_dim;
    let mut text = String::from("split,case,group");
    for k in 0..d {
        text.push_str(&format!(",f{k}"));
    }
    text.push('\n');
    let mut rows = 0;
    for (split, dir) in dirs {
        let case = CaseInput::load(&dir, a.inputs, model.config.image_size)?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        for (group, feat) in model.group_features(&case.inputs)? {
            text.push_str(&format!("{split},{name},{group}"));
            for v in feat {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
            rows += 1;
        }
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, text)?;
    println!("wrote {rows} feature rows to {}", a.out.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let port = match a.port {
        Some(p) => p,
        None => match std::env::var("MSL_PORT") {
            Ok(v) => v
                .parse()
                .map_err(|_| MslError::Config(format!("MSL_PORT `{v}` is not a port number")))?,
            Err(_) => 8080,
        },
    };
    let config = ServerConfig {
        data_dir: a.data,
        ..ServerConfig::default()
    };
    let state = server::AppState::from_checkpoint(&a.checkpoint, config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let addr = format!("{}:{port}", a.host);
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, server::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}

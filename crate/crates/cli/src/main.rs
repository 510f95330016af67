mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use equipatch::data::{generate_dataset, load_folder, load_images, stratified_split, DatasetIndex, LabeledSet};
use equipatch::evalsuite::{
    emit_reports, rotation_sweep, token_equivariance, write_token_summary_json, write_tokens_csv,
};
use equipatch::gmr::{build_basis, gmr_param_count, kernel_invariance_report, ring_spec, write_grids_csv};
use equipatch::tensorkit::{set_gelu_grad_fault, GradCheckOptions, Tensor};
use equipatch::trainer::{load_checkpoint, save_checkpoint, train, write_history_csv, OptimizerState};
use equipatch::vit::{build_model, count_params, model_grad_check, StageKind, ViTModel, INIT_STD};
use equipatch::{Error, Result};
use rand::{Rng, SeedableRng};

use config::{EvalSubset, FillPolicy, RunConfig};

#[derive(Parser)]
#[command(
    name = "equipatch",
    version,
    about = "Rotation-equivariant patch embeddings for a compact ViT"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seeds of the section the command uses.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic image folder and manifest.json.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on an image folder; writes the checkpoint and history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Accuracy over rotated copies of the evaluation images.
    EvalRotation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated degrees, replacing the configured list.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        angles: Option<Vec<i64>>,
        /// Label used in summary.json and the chart legend.
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Token-grid equivariance of the embedding under quarter turns.
    AnalyzeTokens {
        #[command(flatten)]
        common: Common,
        /// Without a checkpoint, a model is freshly initialized from the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        n_images: Option<usize>,
    },
    /// Finite-difference check of every parameter gradient of the configured model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupt the GELU derivative to show that the check notices.
        #[arg(long)]
        inject_gelu_fault: bool,
        /// Upper bound on checked scalars across all parameters.
        #[arg(long, default_value_t = 2000)]
        max_params: usize,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Parameter and memory table of the configured model.
    Params {
        #[command(flatten)]
        common: Common,
    },
    /// Export embedding kernels of one stage with their symmetry report.
    KernelDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
}

/// Failure classes map to exit codes.
enum Failure {
    Check(String),
    Lib(Error),
    Checkpoint(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Checkpoint(_) => 5,
            Failure::Lib(e) => match e {
                Error::Config(_) | Error::Argument(_) | Error::Split(_) | Error::Dimension(_) | Error::Geometry(_) => 2,
                Error::Io { .. } | Error::Decode { .. } => 3,
                Error::Numeric(_) | Error::DegenerateVariance => 4,
                Error::Format(_) | Error::UnsupportedVersion(_) | Error::Corruption(_) => 5,
                Error::Index(_) | Error::Contract(_) => 1,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Check(m) => m.clone(),
            Failure::Lib(e) | Failure::Checkpoint(e) => e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    equipatch::init_thread_pool();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::SynthData { common } => synth_data(&common),
        Command::Train { common, data } => train_cmd(&common, data),
        Command::EvalRotation {
            common,
            checkpoint,
            data,
            angles,
            model_id,
        } => eval_rotation(&common, &checkpoint, data, angles, model_id),
        Command::AnalyzeTokens {
            common,
            checkpoint,
            data,
            n_images,
        } => analyze_tokens(&common, checkpoint, data, n_images),
        Command::Gradcheck {
            common,
            inject_gelu_fault,
            max_params,
            tol,
        } => gradcheck(&common, inject_gelu_fault, max_params, tol),
        Command::Params { common } => params(&common),
        Command::KernelDump {
            common,
            checkpoint,
            layer,
        } => kernel_dump(&common, &checkpoint, layer),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    RunConfig::load(common.config.as_deref())
}

fn out_dir(common: &Common, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn data_root(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.data.folder.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data.folder".into()))
}

fn open_checkpoint(path: &Path) -> std::result::Result<ViTModel, Failure> {
    load_checkpoint(path).map(|c| c.model).map_err(Failure::Checkpoint)
}

fn synth_data(common: &Common) -> CmdResult {
    let cfg = load_config(common)?;
    let mut spec = cfg.data.synth_spec();
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.out_dir.join("data"));
    let index = generate_dataset(&spec, cfg.data.n_per_class, &out)?;
    println!(
        "wrote {} images in {} classes to {}",
        index.len(),
        index.n_classes(),
        out.display()
    );
    Ok(())
}

/// Train and evaluation sides of the configured split.
fn split(cfg: &RunConfig, root: &Path) -> Result<(DatasetIndex, DatasetIndex)> {
    let index = load_folder(root)?;
    stratified_split(&index, cfg.data.test_frac, cfg.data.split_seed)
}

fn train_cmd(common: &Common, data: Option<PathBuf>) -> CmdResult {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.train.validate()?;
    let vit = cfg.model.vit_config()?;
    let root = data_root(data, &cfg)?;
    let out = out_dir(common, &cfg)?;
    let (train_index, _) = split(&cfg, &root)?;
    if train_index.n_classes() != vit.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            train_index.n_classes(),
            vit.n_classes
        ))
        .into());
    }
    let set = load_images(&train_index, vit.in_channels)?;
    let mut model = build_model(&vit, cfg.train.seed)?;
    let mut state = OptimizerState::new(model.params());
    let ckpt = out.join(&cfg.paths.checkpoint);
    eprintln!("training on {} images, {} epochs", set.len(), cfg.train.epochs);
    let history = train(&mut model, &set, &cfg.train, &mut state, |r| {
        eprintln!("epoch {:>3}  loss {:.5}  acc {:.4}", r.epoch, r.mean_loss, r.train_acc)
    });
    let history = match history {
        Ok(h) => h,
        Err(e) => {
            // Never leave a checkpoint behind that does not match this run.
            let _ = std::fs::remove_file(&ckpt);
            return Err(e.into());
        }
    };
    save_checkpoint(&model, Some(&state), &ckpt)?;
    write_history_csv(&history, &out.join("history.csv"))?;
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn eval_set(cfg: &RunConfig, root: &Path, channels: usize) -> Result<(LabeledSet, Vec<f32>)> {
    let (train_index, test_index) = split(cfg, root)?;
    let eval_index = match cfg.eval.subset {
        EvalSubset::Test => test_index,
        EvalSubset::All => load_folder(root)?,
    };
    let set = load_images(&eval_index, channels)?;
    let fill = match cfg.eval.fill {
        FillPolicy::Constant => vec![cfg.eval.fill_value; channels],
        FillPolicy::TrainMean => load_images(&train_index, channels)?.channel_mean(),
    };
    Ok((set, fill))
}

fn eval_rotation(
    common: &Common,
    checkpoint: &Path,
    data: Option<PathBuf>,
    angles: Option<Vec<i64>>,
    model_id: Option<String>,
) -> CmdResult {
    let cfg = load_config(common)?;
    let model = open_checkpoint(checkpoint)?;
    let root = data_root(data, &cfg)?;
    let out = out_dir(common, &cfg)?;
    let (set, fill) = eval_set(&cfg, &root, model.config().in_channels)?;
    let angles = angles.unwrap_or_else(|| cfg.eval.angles.clone());
    let report = rotation_sweep(&model, &set, &angles, &fill)?;
    let id = model_id.unwrap_or_else(|| {
        checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    emit_reports(&report, &out, &id, common.seed.unwrap_or(cfg.train.seed))?;
    println!(
        "{id}: orig {:.2}  rot {:.2} +- {:.2}  ({} images, {} angles)",
        report.orig_acc * 100.0,
        report.mean * 100.0,
        report.std * 100.0,
        report.n_total,
        report.angles.len()
    );
    Ok(())
}

fn analyze_tokens(
    common: &Common,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    n_images: Option<usize>,
) -> CmdResult {
    let cfg = load_config(common)?;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let (model, id) = match &checkpoint {
        Some(p) => (
            open_checkpoint(p)?,
            p.file_stem().map(|s| s.to_string_lossy().into_owned()),
        ),
        None => (build_model(&cfg.model.vit_config()?, seed)?, None),
    };
    let id = id.unwrap_or_else(|| format!("init-{seed}"));
    let n = n_images.unwrap_or(cfg.eval.n_images);
    if n == 0 {
        return Err(Error::Argument("--n-images must be positive".into()).into());
    }
    let vit = model.config();
    let images: Vec<Tensor<f32>> = match data.or_else(|| cfg.data.folder.clone()) {
        Some(root) => {
            let (_, test) = split(&cfg, &root)?;
            let picked = DatasetIndex::new(
                test.entries().iter().take(n).cloned().collect(),
                test.class_names().to_vec(),
            );
            load_images(&picked, vit.in_channels)?.images
        }
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| Tensor::from_fn(&[vit.in_channels, vit.img_size, vit.img_size], |_| rng.gen::<f32>()))
                .collect()
        }
    };
    let out = out_dir(common, &cfg)?;
    let report = token_equivariance(&model, &images, &[0, 90, 180, 270])?;
    write_tokens_csv(&report, &out.join("tokens.csv"))?;
    write_token_summary_json(&report, &id, &out.join("tokens_summary.json"))?;
    println!("rotation  median      mean        min         frac>=0.99");
    for s in &report.summaries {
        println!(
            "{:>8}  {:<10.6}  {:<10.6}  {:<10.6}  {:.4}",
            s.rotation, s.median, s.mean, s.min, s.frac_ge_099
        );
    }
    Ok(())
}

fn gradcheck(common: &Common, fault: bool, max_params: usize, tol: f64) -> CmdResult {
    let cfg = load_config(common)?;
    let vit = cfg.model.vit_config()?;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let model = build_model(&vit, seed)?.jittered(INIT_STD, seed ^ 1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 2);
    let n = 2;
    let images = Tensor::from_fn(&[n, vit.in_channels, vit.img_size, vit.img_size], |_| rng.gen::<f32>());
    let labels: Vec<usize> = (0..n).map(|i| i % vit.n_classes).collect();
    let per_param = (max_params / model.params().len()).max(1);
    let opts = GradCheckOptions {
        eps: 1e-4,
        tol,
        max_per_param: Some(per_param),
        seed,
    };
    set_gelu_grad_fault(fault);
    let reports = model_grad_check(&model, &images, &labels, &opts);
    set_gelu_grad_fault(false);
    let reports = reports?;
    let mut table = String::from("parameter,checked,max_rel_error,status\n");
    println!("{:<32} {:>7} {:>14}  status", "parameter", "checked", "max rel err");
    for r in &reports {
        let status = if r.passed { "pass" } else { "FAIL" };
        println!("{:<32} {:>7} {:>14.3e}  {status}", r.name, r.checked, r.max_rel_error);
        table.push_str(&format!("{},{},{:e},{status}\n", r.name, r.checked, r.max_rel_error));
    }
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let path = dir.join("gradcheck.csv");
        std::fs::write(&path, table).map_err(|e| Error::Io { path, source: e })?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Check(format!(
            "{failed} of {} parameter groups failed",
            reports.len()
        )));
    }
    println!("all {} parameter groups pass at tol {tol:e}", reports.len());
    Ok(())
}

fn params(common: &Common) -> CmdResult {
    let cfg = load_config(common)?;
    let vit = cfg.model.vit_config()?;
    let report = count_params(&vit)?;
    let mut csv = String::from("component,params,bytes\n");
    println!("{:<12} {:>12} {:>12}", "component", "params", "bytes");
    for (name, n) in &report.per_component {
        println!("{name:<12} {n:>12} {:>12}", n * 4);
        csv.push_str(&format!("{name},{n},{}\n", n * 4));
    }
    println!(
        "{:<12} {:>12} {:>12}",
        "embedding", report.embedding_total, report.embedding_bytes
    );
    println!("{:<12} {:>12} {:>12}", "total", report.total, report.total * 4);
    csv.push_str(&format!(
        "embedding,{},{}\n",
        report.embedding_total, report.embedding_bytes
    ));
    csv.push_str(&format!("total,{},{}\n", report.total, report.total * 4));

    println!("\nstage  k   c_in  c_out  gmr_params  dense_params  ratio");
    let mut c_in = vit.in_channels;
    for (i, st) in vit.conv_stages().iter().enumerate() {
        let p = gmr_param_count(c_in, st.c_out, st.k);
        println!(
            "{i:<5}  {:<2}  {c_in:<4}  {:<5}  {:<10}  {:<12}  {:.2}",
            st.k, st.c_out, p.params, p.dense_equivalent, p.ratio
        );
        c_in = st.c_out;
    }
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let path = dir.join("params.csv");
        std::fs::write(&path, csv).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn kernel_dump(common: &Common, checkpoint: &Path, layer: usize) -> CmdResult {
    let cfg = load_config(common)?;
    let model = open_checkpoint(checkpoint)?;
    let stages = model.config().conv_stages();
    let st = stages.get(layer).ok_or_else(|| {
        Error::Argument(format!(
            "layer {layer} does not exist; the embedding has {} stages",
            stages.len()
        ))
    })?;
    let kernels = match st.kind {
        StageKind::Gmr => {
            let basis = build_basis(&ring_spec(st.k, model.config().embed.sigma_ratio)?);
            let w = model
                .param(&format!("embed.{layer}.ring_weights"))
                .expect("gmr stage has ring weights");
            let b = model.param(&format!("embed.{layer}.bias")).expect("stage has a bias");
            equipatch::gmr::GmrConvLayer::new(basis.spec().clone(), w.clone(), b.clone(), st.stride, st.pad)?
                .synthesize_kernels(&basis)?
        }
        StageKind::Dense => model
            .param(&format!("embed.{layer}.weight"))
            .expect("dense stage has weights")
            .clone(),
    };
    let out = out_dir(common, &cfg)?;
    write_grids_csv(&kernels, "filter", &out.join(format!("kernels_layer{layer}.csv")))?;
    let r = kernel_invariance_report(&kernels)?;
    let json = format!(
        "{{\n  \"layer\": {layer},\n  \"kind\": \"{}\",\n  \"k\": {},\n  \"rot90_dev\": {},\n  \"flip_dev\": {},\n  \"continuous_dev\": {},\n  \"max_abs\": {}\n}}\n",
        if st.kind == StageKind::Gmr { "gmr" } else { "dense" },
        st.k,
        equipatch::format::sig9(r.rot90_dev),
        equipatch::format::sig9(r.flip_dev),
        equipatch::format::sig9(r.continuous_dev),
        equipatch::format::sig9(r.max_abs)
    );
    let path = out.join(format!("invariance_layer{layer}.json"));
    std::fs::write(&path, json).map_err(|e| Error::Io { path, source: e })?;
    println!(
        "layer {layer} ({:?}, k={}): rot90_dev {:.3e}  flip_dev {:.3e}  continuous_dev {:.3e}  max|K| {:.3e}",
        st.kind, st.k, r.rot90_dev, r.flip_dev, r.continuous_dev, r.max_abs
    );
    Ok(())
}

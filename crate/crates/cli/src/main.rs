use std::path::PathBuf;
use std::process::ExitCode;

use bana_core::crf::{mean_field, CrfParams};
use bana_core::io::{read_boxes, read_features, read_image, read_json, read_tensor, write_json, write_labels, write_tensor, Tensor};
use bana_core::pipeline::{
    evaluate_dirs, generate_labels, label_image, load_head, nal_train_dirs, run_pipeline, train_head_dirs,
    PipelineConfig,
};
use bana_core::pseudolabel::{filling_rate_rows, write_filling_rate_csv};
use bana_core::synth::{synth_corpus, SynthConfig};
use bana_core::{Error, Result, Stack};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bana", version, about = "Pseudo segmentation labels from bounding boxes")]
struct Cli {
    /// Pipeline config (JSON); flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the (L+1)-way classification head on pooled box features.
    TrainHead(TrainHeadArgs),
    /// Generate CRF, retrieval and fused labels.
    Labels(LabelsArgs),
    /// Dense CRF inference on a unary tensor.
    Crf(CrfArgs),
    /// Train a segmentation head with the noise-aware loss.
    NalTrain(NalTrainArgs),
    /// Score predicted label maps against references.
    Eval(EvalArgs),
    /// Write a synthetic corpus.
    Synth(SynthArgs),
    /// Run the enabled pipeline stages.
    Run(RunArgs),
}

#[derive(Args)]
struct TrainHeadArgs {
    #[arg(long)]
    features_dir: Option<PathBuf>,
    #[arg(long)]
    boxes_dir: Option<PathBuf>,
    /// Number of foreground classes.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Weights file; defaults to OUT_DIR/head/head.btf.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct LabelsArgs {
    /// Single-image mode: feature map of the image.
    #[arg(long, requires_all = ["boxes", "image", "out_crf", "out_ret", "out_fused"])]
    features: Option<PathBuf>,
    #[arg(long)]
    boxes: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    out_crf: Option<PathBuf>,
    #[arg(long)]
    out_ret: Option<PathBuf>,
    #[arg(long)]
    out_fused: Option<PathBuf>,
    /// Attention map as a rank-2 tensor.
    #[arg(long)]
    out_attention: Option<PathBuf>,
    /// Filling-rate CSV for the CRF labels.
    #[arg(long)]
    filling_rate: Option<PathBuf>,
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    attn_threshold: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    crf: CrfFlags,
}

#[derive(Args)]
struct CrfFlags {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    w2: Option<f64>,
    #[arg(long)]
    theta_alpha: Option<f64>,
    #[arg(long)]
    theta_beta: Option<f64>,
    #[arg(long)]
    theta_gamma: Option<f64>,
}

impl CrfFlags {
    fn apply(&self, p: &mut CrfParams) {
        set(&mut p.iterations, self.iters);
        set(&mut p.w1, self.w1);
        set(&mut p.w2, self.w2);
        set(&mut p.theta_alpha, self.theta_alpha);
        set(&mut p.theta_beta, self.theta_beta);
        set(&mut p.theta_gamma, self.theta_gamma);
    }
}

#[derive(Args)]
struct CrfArgs {
    /// Unary scores, rank 3 (L+1, H, W).
    #[arg(long)]
    unary: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Final marginals as a rank-3 tensor.
    #[arg(long)]
    marginals: Option<PathBuf>,
    #[command(flatten)]
    crf: CrfFlags,
}

#[derive(Args)]
struct NalTrainArgs {
    #[arg(long)]
    features_dir: Option<PathBuf>,
    #[arg(long)]
    labels_crf_dir: Option<PathBuf>,
    #[arg(long)]
    labels_ret_dir: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Share of disagreement pixels given a random wrong CRF label.
    #[arg(long)]
    noise: Option<f64>,
    /// Also write confidence maps next to the head.
    #[arg(long)]
    dump_confidence: bool,
    #[arg(long)]
    out_head: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    ref_dir: PathBuf,
    /// Number of foreground classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Skip IGNORE pixels in the predictions instead of rejecting them.
    #[arg(long)]
    skip_unlabeled: bool,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    images: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Synthetic-corpus layout: sets features/images/boxes/gt directories.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    /// Skip stages whose recorded settings match.
    #[arg(long)]
    resume: bool,
    /// Disagreement-region label noise for the NAL stage.
    #[arg(long)]
    noise: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.jobs, cli.jobs);
    Ok(cfg)
}

fn train_head(cli: &Cli, a: &TrainHeadArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    set(&mut cfg.features_dir, a.features_dir.clone());
    set(&mut cfg.boxes_dir, a.boxes_dir.clone());
    set(&mut cfg.num_classes, a.classes);
    set(&mut cfg.head.grid_size, a.grid_size);
    set(&mut cfg.head.schedule.epochs, a.epochs);
    set(&mut cfg.head.schedule.lr, a.lr);
    set(&mut cfg.out_dir, a.out_dir.clone());
    cfg.validate()?;
    let out = a.out.clone().unwrap_or_else(|| cfg.layout().head());
    let (_, summary) = train_head_dirs(
        &cfg.features_dir,
        &cfg.boxes_dir,
        cfg.num_classes,
        &cfg.head,
        cfg.seed,
        cfg.jobs,
        &out,
    )?;
    print_json(&summary)
}

fn labels(cli: &Cli, a: &LabelsArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    set(&mut cfg.num_classes, a.classes);
    set(&mut cfg.labels.grid_size, a.grid_size);
    set(&mut cfg.labels.attn_threshold, a.attn_threshold);
    set(&mut cfg.out_dir, a.out_dir.clone());
    set(&mut cfg.head_path, a.head.clone().map(Some));
    a.crf.apply(&mut cfg.labels.crf);
    let head_path = cfg.head_path.clone().unwrap_or_else(|| cfg.layout().head());
    let head = load_head(&head_path)?;
    if cfg.num_classes == 0 {
        cfg.num_classes = head.num_classes();
    }
    cfg.validate()?;

    let Some(features) = &a.features else {
        let summary = generate_labels(&cfg, &head)?;
        return print_json(&summary);
    };
    let need = |p: &Option<PathBuf>| p.clone().expect("clap enforces requires_all");
    let f = read_features(features)?;
    let boxes = read_boxes(need(&a.boxes), Some(cfg.num_classes))?;
    let image = read_image(need(&a.image))?;
    let out = label_image(&f, &boxes, &image, &head, &cfg.labels)?;
    write_labels(need(&a.out_crf), &out.labels.crf)?;
    write_labels(need(&a.out_ret), &out.labels.ret)?;
    write_labels(need(&a.out_fused), &out.labels.fused)?;
    if let Some(p) = &a.out_attention {
        write_tensor(p, &Tensor::from(&out.attention))?;
    }
    if let Some(p) = &a.filling_rate {
        let name = features.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        write_filling_rate_csv(p, &filling_rate_rows(name, &out.labels.crf, &boxes)?)?;
    }
    log::info!(
        "labels: {} of {} pixels in the agreement region",
        out.labels.agreement_count(),
        out.labels.fused.data().len()
    );
    Ok(())
}

fn crf(cli: &Cli, a: &CrfArgs) -> Result<()> {
    let mut params = load_config(cli)?.labels.crf;
    a.crf.apply(&mut params);
    params.validate()?;
    let unary = Stack::try_from(read_tensor(&a.unary)?).map_err(|e| e.at(&a.unary))?;
    let image = read_image(&a.image)?;
    let out = mean_field(&unary, &image, &params)?;
    write_labels(&a.out, &out.labels)?;
    if let Some(p) = &a.marginals {
        write_tensor(p, &Tensor::from(&out.marginals))?;
    }
    Ok(())
}

fn nal_train(cli: &Cli, a: &NalTrainArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    set(&mut cfg.features_dir, a.features_dir.clone());
    set(&mut cfg.num_classes, a.classes);
    set(&mut cfg.nal.gamma, a.gamma);
    set(&mut cfg.nal.lambda, a.lambda);
    set(&mut cfg.nal.schedule.epochs, a.epochs);
    set(&mut cfg.nal.schedule.lr, a.lr);
    set(&mut cfg.nal.disagreement_noise, a.noise);
    set(&mut cfg.out_dir, a.out_dir.clone());
    cfg.nal.dump_confidence |= a.dump_confidence;
    cfg.validate()?;
    let layout = cfg.layout();
    let crf_dir = a.labels_crf_dir.clone().unwrap_or_else(|| layout.labels("crf"));
    let ret_dir = a.labels_ret_dir.clone().unwrap_or_else(|| layout.labels("ret"));
    let out = a.out_head.clone().unwrap_or_else(|| layout.seg_head());
    let (_, summary) = nal_train_dirs(
        &cfg.features_dir,
        &crf_dir,
        &ret_dir,
        cfg.num_classes,
        &cfg.nal,
        cfg.seed,
        cfg.jobs,
        &out,
    )?;
    print_json(&summary)
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let classes = match a.classes {
        Some(l) => l,
        None => load_config(cli)?.num_classes,
    };
    if classes == 0 {
        return Err(Error::Invalid("--classes is required".into()));
    }
    let report = evaluate_dirs(&a.pred_dir, &a.ref_dir, classes, a.skip_unlabeled)?;
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    print_json(&report)
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: cli.seed.unwrap_or(0),
        n_images: a.images,
        size: a.size,
        n_classes: a.classes,
        ..SynthConfig::default()
    };
    let names = synth_corpus(&cfg, &a.out)?;
    log::info!("synth: wrote {} images to {}", names.len(), a.out.display());
    Ok(())
}

fn run(cli: &Cli, a: &RunArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(corpus) = &a.corpus {
        let c = PipelineConfig::for_corpus(corpus, cfg.out_dir.clone(), cfg.num_classes);
        cfg.features_dir = c.features_dir;
        cfg.images_dir = c.images_dir;
        cfg.boxes_dir = c.boxes_dir;
        cfg.gt_dir = c.gt_dir;
        if cfg.num_classes == 0 {
            let meta: Option<SynthConfig> = read_json(corpus.join("corpus.json")).ok();
            cfg.num_classes = meta.map_or(0, |m| m.n_classes);
        }
    }
    set(&mut cfg.out_dir, a.out_dir.clone());
    set(&mut cfg.num_classes, a.classes);
    set(&mut cfg.nal.disagreement_noise, a.noise);
    cfg.resume |= a.resume;
    let summary = run_pipeline(&cfg)?;
    write_json(cfg.out_dir.join("config.json"), &cfg)?;
    print_json(&summary)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainHead(a) => train_head(cli, a),
        Command::Labels(a) => labels(cli, a),
        Command::Crf(a) => crf(cli, a),
        Command::NalTrain(a) => nal_train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Synth(a) => synth(cli, a),
        Command::Run(a) => run(cli, a),
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
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use svtr::ctc::{best_path, greedy_decode, Charset};
use svtr::data::{from_pnm, gen_dataset, load_dataset, stack_images, write_dataset, PnmImage, Style};
use svtr::gradcheck;
use svtr::model::audit::{self, FlopKind};
use svtr::model::{SvtrConfig, SvtrModel, PRESET_NAMES};
use svtr::train::{evaluate, train, Checkpoint, TrainOptions};
use svtr::SvtrError;

#[derive(Parser)]
#[command(name = "svtr", version, about = "Train, evaluate and audit SVTR text recognizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory or on freshly generated samples
    Train(TrainArgs),
    /// Word accuracy of a checkpoint on a dataset directory
    Eval(EvalArgs),
    /// Decode images with a checkpoint
    Infer(InferArgs),
    /// Render a synthetic dataset to a directory
    GenData(GenArgs),
    /// Parameter breakdown per module
    Params(ConfigArg),
    /// Multiply-accumulate breakdown per module
    Flops(FlopsArgs),
    /// Write attention maps of one block as PGM heatmaps
    AttnDump(AttnArgs),
    /// Finite-difference gradient checks
    Gradcheck(GradcheckArgs),
}

/// Unknown presets are usage errors; file contents are checked later.
fn config_source(s: &str) -> Result<String, String> {
    if PRESET_NAMES.contains(&s) || std::path::Path::new(s).is_file() {
        Ok(s.to_string())
    } else {
        Err(format!("neither a preset ({}) nor an existing file", PRESET_NAMES.join(", ")))
    }
}

#[derive(Args)]
struct ConfigArg {
    /// Preset name or config file
    #[arg(long, default_value = "svtr-t", value_parser = config_source)]
    config: String,
}

#[derive(Args)]
struct SeedArg {
    /// Seed for every random choice
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct CharsetArg {
    /// Charset file, one symbol per line (default: digits and lowercase letters)
    #[arg(long)]
    charset: Option<PathBuf>,
}

impl CharsetArg {
    fn load(&self, cfg: &SvtrConfig) -> anyhow::Result<Charset> {
        let cs = match &self.charset {
            Some(p) => Charset::load(p)?,
            None => Charset::english(),
        };
        if cs.num_classes() != cfg.charset_size {
            return Err(SvtrError::Config(format!(
                "charset has {} classes but config charset_size is {}",
                cs.num_classes(),
                cfg.charset_size
            ))
            .into());
        }
        Ok(cs)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    charset: CharsetArg,
    /// Training data directory (labels.tsv); generated when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out directory for per-epoch accuracy (default: the training set)
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Samples to generate when --data is omitted
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Peak learning rate (default 5e-4 * batch / 2048)
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    warmup_steps: u64,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    /// Disable gradient-norm clipping
    #[arg(long)]
    no_clip: bool,
    /// Output directory for checkpoints and metrics.log
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    charset: CharsetArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Print one line per sample
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    charset: CharsetArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// PGM or PPM images
    #[arg(long = "image", required = true)]
    images: Vec<PathBuf>,
    /// Write raw logits as text, one row per frame
    #[arg(long)]
    dump_logits: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    charset: CharsetArg,
    /// Geometry source (input size and maximum label length)
    #[arg(long, default_value = "svtr-t", value_parser = config_source)]
    config: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    min_len: usize,
    /// Defaults to the config's maximum label length
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Override the input size, e.g. 32x100
    #[arg(long)]
    input: Option<String>,
}

#[derive(Args)]
struct AttnArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    seed: SeedArg,
    /// Trained weights; a freshly initialized model is used when omitted
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    stage: usize,
    #[arg(long)]
    block: usize,
    /// Every head when omitted
    #[arg(long)]
    head: Option<usize>,
    /// Query token index within the stage grid
    #[arg(long, conflicts_with = "char_index", required_unless_present = "char_index")]
    query: Option<usize>,
    /// Query at the frame that emits the n-th decoded character (0-based)
    #[arg(long = "char")]
    char_index: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    seed: SeedArg,
    /// Elements probed per model parameter tensor (default: all)
    #[arg(long)]
    per_tensor: Option<usize>,
    /// Only the per-op suites
    #[arg(long)]
    skip_model: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let body: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("For more information"))
                .collect();
            eprintln!("error[usage]: {}", body.join(" ").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<SvtrError>().map(SvtrError::kind).unwrap_or("cli");
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::GenData(a) => cmd_gen(a),
        Command::Params(a) => cmd_params(a),
        Command::Flops(a) => cmd_flops(a),
        Command::AttnDump(a) => cmd_attn(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn load_images(paths: &[PathBuf], cfg: &SvtrConfig) -> anyhow::Result<Vec<svtr::Tensor>> {
    paths
        .iter()
        .map(|p| Ok(from_pnm(&PnmImage::read(p)?, cfg.input_h, cfg.input_w)))
        .collect()
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = SvtrConfig::resolve(&a.config.config)?;
    let cs = a.charset.load(&cfg)?;
    let data = match &a.data {
        Some(dir) => load_dataset(dir, &cs, cfg.input_h, cfg.input_w, cfg.max_label_len)?,
        None => gen_dataset(
            a.samples,
            &cs,
            1..=cfg.max_label_len,
            cfg.input_h,
            cfg.input_w,
            &Style::default(),
            a.seed.seed,
        )?,
    };
    let val = match &a.val_data {
        Some(dir) => load_dataset(dir, &cs, cfg.input_h, cfg.input_w, cfg.max_label_len)?,
        None => data.clone(),
    };
    let mut model: SvtrModel = SvtrModel::new(cfg, a.seed.seed)?;
    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed.seed,
        peak_lr: a.lr,
        warmup_steps: a.warmup_steps,
        clip_norm: (!a.no_clip).then_some(5.0),
        adamw: svtr::train::AdamWConfig {
            weight_decay: a.weight_decay,
            ..Default::default()
        },
        checkpoint_dir: Some(a.out.clone()),
        log_path: Some(a.out.join("metrics.log")),
        stop_at_accuracy: None,
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report = train(&mut model, &data, &val, &opts)?;
    println!(
        "trained {} epochs ({} steps): final accuracy {:.4}, best {:.4}",
        report.epochs_run, report.steps, report.final_accuracy, report.best_accuracy
    );
    println!("checkpoints in {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let cfg = SvtrConfig::resolve(&a.config.config)?;
    let cs = a.charset.load(&cfg)?;
    let (model, _, _) = Checkpoint::<f32>::load_model(&a.checkpoint, &cfg)?;
    let data = load_dataset(&a.data, &cs, cfg.input_h, cfg.input_w, cfg.max_label_len)?;
    let r = evaluate(&model, &data, a.batch_size)?;
    if let Some(w) = &r.warning {
        eprintln!("warning: {w}");
    }
    if a.verbose {
        for s in &r.records {
            println!("{}\t{}\t{}\t{}", s.id, cs.decode(&s.predicted), cs.decode(&s.truth), s.exact);
        }
    }
    println!("samples={} word_accuracy={:.4} norm_edit_sim={:.4}", r.records.len(), r.word_accuracy, r.norm_edit_sim);
    Ok(())
}

fn cmd_infer(a: InferArgs) -> anyhow::Result<()> {
    let cfg = SvtrConfig::resolve(&a.config.config)?;
    let cs = a.charset.load(&cfg)?;
    let (model, _, _) = Checkpoint::<f32>::load_model(&a.checkpoint, &cfg)?;
    let images = load_images(&a.images, &cfg)?;
    let logits = model.predict(&stack_images(&images)?)?;
    let decoded = greedy_decode(&logits)?;
    if let Some(p) = &a.dump_logits {
        let n = cfg.charset_size;
        let mut text = String::new();
        for (i, row) in logits.data().chunks(n).enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            text.push_str(&format!("{}\t{}\t{}\n", i / cfg.frames(), i % cfg.frames(), vals.join(" ")));
        }
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    let mut out = String::new();
    for (path, label) in a.images.iter().zip(&decoded) {
        let id = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
        out.push_str(&format!("{id}\t{}\n", cs.decode(label)));
    }
    print!("{out}");
    Ok(())
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<()> {
    let cfg = SvtrConfig::resolve(&a.config)?;
    let cs = a.charset.load(&cfg)?;
    let max_len = a.max_len.unwrap_or(cfg.max_label_len);
    if a.min_len == 0 || a.min_len > max_len || max_len > cfg.max_label_len {
        bail!(SvtrError::Config(format!(
            "label lengths {}..={max_len} must lie within 1..={}",
            a.min_len, cfg.max_label_len
        )));
    }
    let style = Style {
        scale: a.scale,
        noise_sigma: a.noise,
        ..Style::default()
    };
    let samples = gen_dataset(a.count, &cs, a.min_len..=max_len, cfg.input_h, cfg.input_w, &style, a.seed.seed)?;
    write_dataset(&a.out, &samples, &cs)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn millions(n: usize) -> f64 {
    n as f64 / 1e6
}

fn cmd_params(a: ConfigArg) -> anyhow::Result<()> {
    let cfg = SvtrConfig::resolve(&a.config)?;
    let breakdown = audit::param_breakdown(&cfg);
    println!("{:<12} {:>12}", "module", "params");
    for (module, n) in &breakdown {
        println!("{module:<12} {n:>12}");
    }
    let total = audit::count_params(&cfg);
    let head = audit::classifier_params(&cfg);
    println!("{:<12} {:>12}  ({:.2} M, classifier excluded)", "total", total, millions(total));
    println!("{:<12} {:>12}  ({:.2} M, classifier included)", "total+head", total + head, millions(total + head));
    println!();
    println!("{:<8} {:>10} {:>10} {:>8}", "preset", "ours (M)", "ref (M)", "delta");
    for name in &PRESET_NAMES[..4] {
        let ours = millions(audit::count_params(&SvtrConfig::preset(name)?));
        let (reference, _) = audit::reference(name).expect("reference preset");
        println!("{name:<8} {ours:>10.2} {reference:>10.2} {:>+7.1}%", 100.0 * (ours / reference - 1.0));
    }
    Ok(())
}

fn parse_hw(s: &str) -> anyhow::Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| SvtrError::Config(format!("input size must look like 32x128, got {s:?}")))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn cmd_flops(a: FlopsArgs) -> anyhow::Result<()> {
    let mut cfg = SvtrConfig::resolve(&a.config.config)?;
    if let Some(s) = &a.input {
        let (h, w) = parse_hw(s)?;
        cfg.input_h = h;
        cfg.input_w = w;
        cfg.max_label_len = cfg.max_label_len.min(w / 4);
        cfg.validate()?;
    }
    let entries = audit::flop_breakdown(&cfg);
    println!("input {}x{}, classifier excluded", cfg.input_h, cfg.input_w);
    println!("{:<12} {:>14} {:>14} {:>14}", "module", "conv", "linear", "attn-matmul");
    let mut modules: Vec<&str> = Vec::new();
    for e in &entries {
        if !modules.contains(&e.module.as_str()) {
            modules.push(&e.module);
        }
    }
    for m in modules {
        let sum = |k: FlopKind| -> u64 { entries.iter().filter(|e| e.module == m && e.kind == k).map(|e| e.macs).sum() };
        println!(
            "{m:<12} {:>14} {:>14} {:>14}",
            sum(FlopKind::Conv),
            sum(FlopKind::Linear),
            sum(FlopKind::AttentionMatmul)
        );
    }
    let total = audit::count_flops(&cfg);
    println!("total MACs         {total} ({:.3} G, 1 MAC = 1 FLOP)", total as f64 / 1e9);
    println!("total FLOPs        {} ({:.3} G, 1 MAC = 2 FLOPs)", 2 * total, 2.0 * total as f64 / 1e9);
    if let Some((_, gflops)) = PRESET_NAMES[..4]
        .iter()
        .find(|n| a.config.config == **n)
        .and_then(|n| audit::reference(n))
    {
        println!("reference          {gflops:.2} G");
    }
    Ok(())
}

fn cmd_attn(a: AttnArgs) -> anyhow::Result<()> {
    let cfg = SvtrConfig::resolve(&a.config.config)?;
    let model: SvtrModel = match &a.checkpoint {
        Some(p) => Checkpoint::<f32>::load_model(p, &cfg)?.0,
        None => SvtrModel::new(cfg.clone(), a.seed.seed)?,
    };
    let image = load_images(std::slice::from_ref(&a.image), &cfg)?.remove(0);
    let geo = cfg.stage_geometry();
    if a.stage >= 3 {
        bail!(SvtrError::Index(format!("stage {} out of range 0..3", a.stage)));
    }
    let query = match (a.query, a.char_index) {
        (Some(q), _) => q,
        (None, Some(k)) => {
            let logits = model.predict(&stack_images([&image])?)?;
            let path = best_path(logits.data(), cfg.charset_size);
            let frame = char_frame(&path, k)
                .ok_or_else(|| SvtrError::Index(format!("character {k} not present in the decoded text")))?;
            let g = geo[a.stage];
            (g.h / 2) * g.w + frame
        }
        (None, None) => unreachable!("clap requires --query or --char"),
    };
    let heads: Vec<usize> = match a.head {
        Some(h) => vec![h],
        None => (0..cfg.heads[a.stage]).collect(),
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for h in heads {
        let map = model.export_attention(&image, a.stage, a.block, h, query)?;
        let max = map.data().iter().copied().fold(0.0f32, f32::max);
        let pixels = map
            .data()
            .iter()
            .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect();
        let (rows, cols) = (map.shape()[0], map.shape()[1]);
        let path = a.out.join(format!("attn_s{}_b{}_h{h}_q{query}.pgm", a.stage, a.block));
        PnmImage::gray(cols, rows, pixels).write(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

/// First frame emitting the `k`-th character of the collapsed path.
fn char_frame(path: &[usize], k: usize) -> Option<usize> {
    let mut seen = 0;
    let mut prev = None;
    for (t, &c) in path.iter().enumerate() {
        if c != 0 && prev != Some(c) {
            if seen == k {
                return Some(t);
            }
            seen += 1;
        }
        prev = Some(c);
    }
    None
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let mut reports = gradcheck::check_ops(a.seed.seed)?;
    if !a.skip_model {
        let cfg = gradcheck::model_check_config();
        let per = gradcheck::check_model(&cfg, a.seed.seed, a.per_tensor)?;
        reports.extend(per.into_iter().map(|mut r| {
            r.name = format!("model:{}", r.name);
            r
        }));
    }
    println!("{:<48} {:>5} {:>8} {:>12} {:>6}", "check", "dtype", "elems", "max rel err", "ok");
    let mut failed = 0;
    for r in &reports {
        println!(
            "{:<48} {:>5} {:>8} {:>12.3e} {:>6}",
            r.name,
            r.dtype,
            r.elements,
            r.max_rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        bail!(SvtrError::Contract(format!("{failed} gradient checks exceeded tolerance")));
    }
    Ok(())
}

//! `nerfcodec`: synthesize scenes, train the shared networks, encode scenes
//! into bitstreams, decode and render them, and benchmark the modes.

mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nerfcodec::codec::unpack;
use nerfcodec::entropy::Bitstream;
use nerfcodec::model::Pretrained;
use nerfcodec::peft::Mode;
use nerfcodec::render::{render_image, RenderConfig, SceneModel};
use nerfcodec::scene::{load_poses, load_scene, save_png, save_scene, synth_scene, Scene, SynthSpec};
use nerfcodec::train::{write_csv, BaseTrainer, FinetuneState, MetricsRow, TrainConfig, TrainMode};
use nerfcodec::triplane::Triplanes;
use nerfcodec::{CodecError, Profile};
use serde_json::json;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Codec(CodecError::Autodiff(_)) => "autodiff",
            CliError::Codec(CodecError::Io { .. }) | CliError::Io { .. } => "io",
            CliError::Codec(CodecError::Parse { .. }) => "parse",
            CliError::Codec(CodecError::Scene(_)) => "scene",
            CliError::Codec(CodecError::Config(_)) => "config",
            CliError::Codec(CodecError::Shape(_)) => "shape",
            CliError::Codec(CodecError::Bitstream(_)) => "bitstream",
            CliError::Codec(CodecError::Diverged { .. }) => "diverged",
            CliError::Usage(_) => "usage",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io<P: AsRef<Path>>(path: P) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.as_ref().to_path_buf();
    move |source| CliError::Io { path, source }
}

#[derive(Parser)]
#[command(name = "nerfcodec", version, about = "Triplane radiance-field codec")]
struct Cli {
    /// Training configuration (TOML); command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into a directory with a pose manifest.
    Synth(SynthArgs),
    /// Train the shared encoder, code path, generator and decoder.
    TrainBase(TrainBaseArgs),
    /// Encode a scene into a bitstream, optionally finetuning first.
    Encode(EncodeArgs),
    /// Rebuild the radiance field from a bitstream and dump its planes.
    Decode(DecodeArgs),
    /// Render a bitstream at the poses of a manifest.
    Render(RenderArgs),
    /// Run several modes on one scene and report metrics and sizes.
    Bench(BenchArgs),
    /// Print payload sizes of a profile without training anything.
    Sizes(SizesArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description (TOML, or JSON by extension).
    #[arg(long, conflicts_with = "random")]
    spec: Option<PathBuf>,
    /// Seed of a random scene.
    #[arg(long)]
    random: Option<u64>,
    #[arg(long, default_value_t = 50)]
    views: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainBaseArgs {
    /// Scene directories to train on.
    #[arg(long, num_args = 1..)]
    scenes: Vec<PathBuf>,
    /// Additional random synthetic scenes.
    #[arg(long, default_value_t = 0)]
    synthetic: usize,
    #[arg(long, default_value_t = 50)]
    views: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    profile: Option<String>,
    /// Continue from a base-training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write a resumable checkpoint here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    log_every: u64,
    /// Where the trained networks go.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneFlags {
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    lambda_rate: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
    #[command(flatten)]
    flags: FinetuneFlags,
    /// Per-checkpoint metrics as CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output directory for `planes.raw` and `report.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Pose manifest (images are not read).
    #[arg(long)]
    poses: PathBuf,
    /// Image size as `WxH` when the manifest has no principal points.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "wo-ft,full-ft,peft,peft++")]
    modes: Vec<Mode>,
    #[command(flatten)]
    flags: FinetuneFlags,
    /// Keep the wall-clock column (it differs between identical runs).
    #[arg(long)]
    timing: bool,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Markdown size table destination; standard output when absent.
    #[arg(long)]
    markdown: Option<PathBuf>,
}

#[derive(Args)]
struct SizesArgs {
    #[arg(long, default_value = "objaverse")]
    profile: String,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or("expected WxH")?;
    let p = |v: &str| v.parse::<usize>().map_err(|e| e.to_string());
    Ok((p(w)?, p(h)?))
}

fn base_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn finetune_config(base: TrainConfig, mode: Option<Mode>, f: &FinetuneFlags) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(m) = mode {
        cfg = cfg.with_mode(m);
    }
    if let Some(i) = f.iters {
        cfg.iterations = i;
    }
    if let Some(l) = f.lambda_rate {
        cfg.lambda_rate = l;
    }
    if let Some(s) = f.seed {
        cfg.seed = s;
    }
    if !cfg.checkpoints.contains(&cfg.iterations) {
        cfg.checkpoints.push(cfg.iterations);
    }
    cfg.checkpoints.retain(|&c| c <= cfg.iterations);
    cfg.validate()?;
    cfg.finetune_mode()?;
    Ok(cfg)
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = match (&a.spec, a.random) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(io(path))?;
            let parsed = if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| e.to_string())
            } else {
                toml::from_str(&text).map_err(|e| e.to_string())
            };
            parsed.map_err(|detail| CodecError::Parse {
                path: path.clone(),
                detail,
            })?
        }
        (None, Some(seed)) => SynthSpec::random(seed, a.views, a.size),
        (None, None) => return Err(CliError::Usage("give --spec or --random".into())),
    };
    let (scene, _) = synth_scene(&spec)?;
    save_scene(&scene, &a.out)?;
    println!("{}", json!({"views": scene.views.len(), "size": scene.image_size(), "out": a.out}));
    Ok(())
}

fn train_base(a: TrainBaseArgs, config: Option<&Path>) -> Result<()> {
    let mut cfg = base_config(config)?;
    cfg.mode = TrainMode::TrainBase;
    if let Some(i) = a.iters {
        cfg.iterations = i;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = &a.profile {
        cfg.profile = p.clone();
    }
    cfg.validate()?;
    let mut scenes: Vec<Scene> = a.scenes.iter().map(|p| load_scene(p)).collect::<nerfcodec::Result<_>>()?;
    for i in 0..a.synthetic {
        let spec = SynthSpec::random(cfg.seed.wrapping_mul(1000).wrapping_add(i as u64), a.views, a.size);
        scenes.push(synth_scene(&spec)?.0);
    }
    if scenes.is_empty() {
        return Err(CliError::Usage("give --scenes or --synthetic".into()));
    }
    let model = Pretrained::new(Profile::by_name(&cfg.profile)?, cfg.seed)?;
    let mut trainer = BaseTrainer::new(model, scenes, &cfg)?;
    if let Some(r) = &a.resume {
        trainer = trainer.resume(r, &cfg)?;
    }
    let every = a.log_every.max(1);
    trainer.run(&cfg, |it, s| {
        if it % every == 0 || it == cfg.iterations {
            eprintln!("{}", json!({"iteration": it, "rgb": s.rgb, "vq": s.vq, "tv": s.tv, "total": s.total}));
        }
    })?;
    trainer.model.save(&a.out)?;
    if let Some(c) = &a.checkpoint {
        trainer.save(c)?;
    }
    Ok(())
}

/// Finetunes and packs one scene; a diverging run leaves its last state
/// next to `diagnostic`.
fn run_mode(
    model: &Pretrained,
    scene: &Scene,
    cfg: &TrainConfig,
    diagnostic: &Path,
) -> Result<(Vec<MetricsRow>, Bitstream)> {
    let idx = model.encode_indices(scene)?;
    let mode = cfg.finetune_mode()?;
    let mut st = FinetuneState::new(model.scene_from_indices(&idx)?, mode, &model.profile, cfg)?;
    let rows = match st.run(scene, &model.profile, &idx, cfg, |_| {}) {
        Ok(r) => r,
        Err(e @ CodecError::Diverged { .. }) => {
            let path = diagnostic.with_extension("diverged.ckpt");
            st.save(&path)?;
            eprintln!("{}", json!({"diagnostic_checkpoint": path}));
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    Ok((rows, st.pack(&model.profile, &idx)?))
}

fn encode(a: EncodeArgs, config: Option<&Path>) -> Result<()> {
    let cfg = finetune_config(base_config(config)?, a.mode, &a.flags)?;
    let model = Pretrained::load(&a.model)?;
    let scene = load_scene(&a.scene)?;
    let (rows, bs) = run_mode(&model, &scene, &cfg, &a.out)?;
    let bytes = bs.to_bytes();
    fs::write(&a.out, &bytes).map_err(io(&a.out))?;
    if let Some(m) = &a.metrics {
        fs::write(m, write_csv(&rows, true)).map_err(io(m))?;
    }
    let last = rows.last();
    println!(
        "{}",
        json!({
            "mode": cfg.finetune_mode()?.to_string(),
            "bytes": bytes.len(),
            "sizes": bs.size_report(),
            "psnr": last.map(|r| r.psnr),
        })
    );
    Ok(())
}

fn read_bitstream(path: &Path) -> Result<Bitstream> {
    let bytes = fs::read(path).map_err(io(path))?;
    Ok(Bitstream::from_bytes(&bytes)?)
}

/// Planes with any delta folded in.
fn effective_planes(s: &SceneModel) -> Result<Triplanes> {
    let mut planes = s.planes.clone();
    if let Some(d) = &s.delta {
        for sc in 0..3 {
            for k in 0..3 {
                let delta = d.materialize(k, sc);
                let p = planes.plane_mut(sc, k).make_mut();
                p.data_mut().iter_mut().zip(delta.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(planes)
}

fn decode(a: DecodeArgs) -> Result<()> {
    let model = Pretrained::load(&a.model)?;
    let bs = read_bitstream(&a.input)?;
    let decoded = unpack(&model, &bs)?;
    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    effective_planes(&decoded.scene)?.save_raw(&a.out.join("planes.raw"))?;
    let report = json!({"mode": bs.header.mode.to_string(), "sizes": bs.size_report()});
    let path = a.out.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&report).expect("json")).map_err(io(&path))?;
    println!("{report}");
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let model = Pretrained::load(&a.model)?;
    let decoded = unpack(&model, &read_bitstream(&a.input)?)?;
    let poses = load_poses(&a.poses, a.size)?;
    let cfg = RenderConfig::for_profile(&model.profile, poses.background);
    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    for v in &poses.views {
        let img = render_image(v, poses.near, poses.far, &decoded.scene, &cfg)?;
        let stem = Path::new(&v.name).file_stem().map_or_else(|| v.name.clone(), |s| s.to_string_lossy().into_owned());
        save_png(&a.out.join(format!("{stem}.png")), &img)?;
    }
    println!("{}", json!({"rendered": poses.views.len(), "out": a.out}));
    Ok(())
}

fn bench(a: BenchArgs, config: Option<&Path>) -> Result<()> {
    let base = base_config(config)?;
    let model = Pretrained::load(&a.model)?;
    let scene = load_scene(&a.scene)?;
    let mut table = Vec::new();
    let mut csv = String::new();
    for (i, &mode) in a.modes.iter().enumerate() {
        let cfg = finetune_config(base.clone(), Some(mode), &a.flags)?;
        let (rows, bs) = run_mode(&model, &scene, &cfg, &a.csv.clone().unwrap_or_else(|| "bench".into()))?;
        let text = report::with_mode_column(&write_csv(&rows, a.timing), mode);
        csv.push_str(if i == 0 { &text } else { text.split_once('\n').map_or("", |(_, rest)| rest) });
        table.push((mode, bs.size_report()));
    }
    let md = report::size_table(&table);
    match &a.csv {
        Some(p) => fs::write(p, &csv).map_err(io(p))?,
        None => print!("{csv}"),
    }
    match &a.markdown {
        Some(p) => fs::write(p, &md).map_err(io(p))?,
        None => print!("\n{md}"),
    }
    Ok(())
}

fn sizes(a: SizesArgs) -> Result<()> {
    let p = Profile::by_name(&a.profile)?;
    print!("{}", report::size_table(&report::analytic_sizes(&p)?));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainBase(a) => train_base(a, config),
        Command::Encode(a) => encode(a, config),
        Command::Decode(a) => decode(a),
        Command::Render(a) => render(a),
        Command::Bench(a) => bench(a, config),
        Command::Sizes(a) => sizes(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprint!("{}", e.render());
            eprintln!("{}", json!({"error": "usage", "message": e.kind().to_string()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if matches!(e, CliError::Usage(_)) { 2 } else { 1 };
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(code)
        }
    }
}

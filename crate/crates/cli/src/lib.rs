//! Command-line tools and the HTTP render service.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use avatar_core::avatar::{Avatar, AvatarConfig};
use avatar_core::knn_search::{bench_knn, bench_scene, KnnMode};
use avatar_core::metrics_io::{
    encode_png, evaluation_mask, load_checkpoint, masked_psnr, masked_ssim, model_dump_text, model_to_bytes, save_checkpoint,
    save_image, KeyValues,
};
use avatar_core::param_mesh::{make_synthetic_model, with_anchor_count, ExpressionInput, DEFAULT_ANCHOR_COUNT};
use avatar_core::trainer::{
    avatar_for, evaluate_heldout, generate_synthetic_dataset, train_step, DatasetConfig, TrainConfig, TrainState,
    TRAIN_LOG_HEADER,
};
use avatar_core::volume_renderer::{bench_fps, render_avatar, Camera, FlopsModel, RenderOptions, SamplingPlan};
use avatar_core::{Error, Result, Vec3};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::sync::Semaphore;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_MAX_RESOLUTION: usize = 512;
pub const DEFAULT_FOV: f64 = 0.66;
pub const DEFAULT_DISTANCE: f64 = 4.0;

/// A render request: expression, pose, orbit camera and quality.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderRequest {
    pub psi: Vec<f64>,
    pub theta: Vec<f64>,
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
    pub fov: f64,
    pub width: usize,
    pub height: usize,
    pub plan: SamplingPlan,
    pub knn: KnnMode,
}

impl RenderRequest {
    pub fn neutral(avatar: &Avatar) -> Self {
        Self {
            psi: vec![0.0; avatar.model.expression_dim()],
            theta: vec![0.0; avatar.model.joints.len()],
            azimuth: 0.0,
            elevation: 0.0,
            distance: DEFAULT_DISTANCE,
            fov: DEFAULT_FOV,
            width: 64,
            height: 64,
            plan: SamplingPlan::default(),
            knn: KnnMode::default(),
        }
    }

    /// Parse `key = value` lines on top of the neutral request. Keys: `psi`,
    /// `theta` (comma lists), `azimuth`, `elevation`, `distance`, `fov`,
    /// `resolution` or `width`/`height`, `quality` (fast, standard, high),
    /// `coarse`, `fine`, `knn`.
    pub fn parse(text: &str, avatar: &Avatar) -> Result<Self> {
        let mut kv: KeyValues = text.parse()?;
        let mut r = Self::neutral(avatar);
        if let Some(psi) = kv.take_list::<f64>("psi")? {
            r.psi = psi;
        }
        if let Some(theta) = kv.take_list::<f64>("theta")? {
            r.theta = theta;
        }
        kv.take_into("azimuth", &mut r.azimuth)?;
        kv.take_into("elevation", &mut r.elevation)?;
        kv.take_into("distance", &mut r.distance)?;
        kv.take_into("fov", &mut r.fov)?;
        if let Some(res) = kv.take::<usize>("resolution")? {
            r.width = res;
            r.height = res;
        }
        kv.take_into("width", &mut r.width)?;
        kv.take_into("height", &mut r.height)?;
        if let Some(q) = kv.take::<String>("quality")? {
            r.plan = quality_plan(&q)?;
        }
        kv.take_into("coarse", &mut r.plan.n_coarse)?;
        kv.take_into("fine", &mut r.plan.n_fine)?;
        kv.take_into("knn", &mut r.knn)?;
        kv.finish()?;
        r.validate(avatar)?;
        Ok(r)
    }

    pub fn validate(&self, avatar: &Avatar) -> Result<()> {
        let field = |name: &str, msg: String| Err(Error::InvalidInput(format!("field `{name}`: {msg}")));
        if self.psi.len() != avatar.model.expression_dim() {
            return field("psi", format!("expected {} values, got {}", avatar.model.expression_dim(), self.psi.len()));
        }
        if self.theta.len() != avatar.model.joints.len() {
            return field("theta", format!("expected {} values, got {}", avatar.model.joints.len(), self.theta.len()));
        }
        for (name, v) in [("psi", &self.psi), ("theta", &self.theta)] {
            if v.iter().any(|x| !x.is_finite()) {
                return field(name, "values must be finite".into());
            }
        }
        for (name, v) in [("azimuth", self.azimuth), ("elevation", self.elevation), ("distance", self.distance), ("fov", self.fov)] {
            if !v.is_finite() {
                return field(name, "must be finite".into());
            }
        }
        if self.distance <= 0.0 {
            return field("distance", "must be positive".into());
        }
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return field("fov", "must lie in (0, π)".into());
        }
        if self.width == 0 || self.height == 0 {
            return field("resolution", "must be positive".into());
        }
        if self.plan.n_coarse == 0 {
            return field("coarse", "must be positive".into());
        }
        Ok(())
    }

    pub fn expression(&self) -> ExpressionInput {
        ExpressionInput {
            psi: self.psi.clone(),
            theta: self.theta.clone(),
            frame_id: None,
        }
    }

    /// Orbit camera around the neutral mesh centroid.
    pub fn camera(&self, avatar: &Avatar) -> Result<Camera> {
        let pts = &avatar.model.neutral_positions;
        let centroid = pts.iter().sum::<Vec3>() / pts.len().max(1) as f64;
        Camera::orbit(centroid, self.azimuth, self.elevation, self.distance, self.fov, self.width, self.height)
    }

    pub fn pixels(&self) -> usize {
        self.width.saturating_mul(self.height)
    }
}

/// Samples per ray for a named quality preset.
pub fn quality_plan(name: &str) -> Result<SamplingPlan> {
    let n = match name {
        "fast" => 16,
        "standard" => 32,
        "high" => 64,
        _ => return Err(Error::InvalidInput(format!("field `quality`: unknown preset `{name}`"))),
    };
    Ok(SamplingPlan {
        n_coarse: n,
        n_fine: n,
        jitter: false,
    })
}

/// Render a request to PNG bytes; shared by the CLI and the service.
pub fn render_png(avatar: &Avatar, request: &RenderRequest) -> Result<(Vec<u8>, f64)> {
    let start = Instant::now();
    request.validate(avatar)?;
    let options = RenderOptions {
        plan: request.plan,
        ..RenderOptions::default()
    };
    let out = render_avatar(avatar, &request.expression(), &request.camera(avatar)?, &options, request.knn, None)?;
    let png = encode_png(&out.image)?;
    Ok((png, start.elapsed().as_secs_f64() * 1e3))
}

/// Service description served at `/info`.
pub fn info_text(avatar: &Avatar, max_resolution: usize) -> String {
    let mut kv = KeyValues::default();
    kv.insert("version", VERSION);
    kv.insert("vertices", avatar.model.vertex_count());
    kv.insert("anchors", avatar.anchors());
    kv.insert("psi_dim", avatar.model.expression_dim());
    kv.insert("theta_dim", avatar.model.joints.len());
    let names: Vec<&str> = avatar.model.joints.iter().map(|j| j.name.as_str()).collect();
    kv.insert("joints", names.join(","));
    let limits: Vec<String> = avatar.model.joints.iter().map(|j| format!("{}", j.limit)).collect();
    kv.insert("theta_limits", limits.join(","));
    kv.insert("blendshapes", avatar.config.blendshapes());
    kv.insert("parameters", avatar.param_count());
    kv.insert("max_resolution", max_resolution);
    kv.insert("qualities", "fast,standard,high");
    kv.to_text()
}

/// Shared state of the render service.
pub struct ServiceState {
    pub avatar: Arc<Avatar>,
    pub max_resolution: usize,
    /// Caps concurrent renders; waiting requests queue in arrival order.
    pub workers: Semaphore,
}

impl ServiceState {
    pub fn new(avatar: Avatar, max_resolution: usize, workers: usize) -> Arc<Self> {
        Arc::new(Self {
            avatar: Arc::new(avatar),
            max_resolution,
            workers: Semaphore::new(workers.max(1)),
        })
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/info", get(info_handler))
        .route("/render", post(render_handler))
        .with_state(state)
}

async fn info_handler(State(state): State<Arc<ServiceState>>) -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], info_text(&state.avatar, state.max_resolution))
}

fn text_error(status: StatusCode, msg: String) -> Response {
    (status, [(header::CONTENT_TYPE, "text/plain; charset=utf-8")], msg + "\n").into_response()
}

async fn render_handler(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let Ok(text) = std::str::from_utf8(&body) else {
        return text_error(StatusCode::BAD_REQUEST, "body must be utf-8 key=value lines".into());
    };
    let request = match RenderRequest::parse(text, &state.avatar) {
        Ok(r) => r,
        Err(e) => return text_error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if request.width > state.max_resolution || request.height > state.max_resolution {
        return text_error(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("field `resolution`: {}x{} exceeds the maximum {}", request.width, request.height, state.max_resolution),
        );
    }
    let Ok(_permit) = state.workers.acquire().await else {
        return text_error(StatusCode::SERVICE_UNAVAILABLE, "service shutting down".into());
    };
    let avatar = state.avatar.clone();
    match tokio::task::spawn_blocking(move || render_png(&avatar, &request)).await {
        Ok(Ok((png, ms))) => (
            StatusCode::OK,
            [(header::CONTENT_TYPE, "image/png".to_string()), (header::HeaderName::from_static("x-render-ms"), format!("{ms:.3}"))],
            png,
        )
            .into_response(),
        Ok(Err(e)) => text_error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e) => text_error(StatusCode::INTERNAL_SERVER_ERROR, format!("render task failed: {e}")),
    }
}

/// Bind and serve until the process is stopped.
pub async fn serve(state: Arc<ServiceState>, addr: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "avatar", version, about = "Mesh-anchored hash-table blendshape head avatars", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic head model and rendered training views
    Synth(SynthArgs),
    /// Train an avatar on the synthetic scene
    Train(TrainArgs),
    /// Render one image from a checkpoint
    Render(RenderArgs),
    /// Masked PSNR/SSIM of a checkpoint on the synthetic scene
    Eval(EvalArgs),
    /// Time brute-force against hierarchical k-NN
    BenchKnn(BenchKnnArgs),
    /// Time end-to-end frame rendering
    BenchFps(BenchFpsArgs),
    /// Analytic per-frame operation count
    Flops(FlopsArgs),
    /// Serve renders over HTTP
    Serve(ServeArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SceneArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub cameras: usize,
    #[arg(long, default_value_t = 8)]
    pub expressions: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
}

impl SceneArgs {
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            cameras: self.cameras,
            expressions: self.expressions,
            resolution: self.resolution,
            ..DatasetConfig::toy(self.seed)
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// key=value training config; flags below override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base schedule: desk or full
    #[arg(long, default_value = "desk")]
    pub scale: String,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, default_value_t = 5)]
    pub blendshapes: usize,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step CSV log
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub no_warp: bool,
}

#[derive(Args, Debug)]
pub struct RequestArgs {
    /// key=value render request; flags below override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated expression coefficients
    #[arg(long, allow_hyphen_values = true)]
    pub psi: Option<String>,
    /// Comma-separated joint angles
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub azimuth: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub elevation: Option<f64>,
    #[arg(long)]
    pub distance: Option<f64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub quality: Option<String>,
    #[arg(long)]
    pub knn: Option<String>,
}

impl RequestArgs {
    /// Request text: the config file followed by flag overrides.
    pub fn request_text(&self) -> Result<String> {
        let mut kv: KeyValues = match &self.config {
            Some(p) => read_text(p)?.parse()?,
            None => KeyValues::default(),
        };
        let flags: [(&str, Option<String>); 8] = [
            ("psi", self.psi.clone()),
            ("theta", self.theta.clone()),
            ("azimuth", self.azimuth.map(|v| v.to_string())),
            ("elevation", self.elevation.map(|v| v.to_string())),
            ("distance", self.distance.map(|v| v.to_string())),
            ("resolution", self.resolution.map(|v| v.to_string())),
            ("quality", self.quality.clone()),
            ("knn", self.knn.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                kv.insert(k, v);
            }
        }
        Ok(kv.to_text())
    }
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub request: RequestArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value = "exact")]
    pub knn: String,
}

#[derive(Args, Debug)]
pub struct BenchKnnArgs {
    #[arg(long, default_value_t = 100_000)]
    pub queries: usize,
    #[arg(long, default_value_t = DEFAULT_ANCHOR_COUNT)]
    pub anchors: usize,
    #[arg(long, default_value_t = 5023)]
    pub vertices: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 12)]
    pub candidates: usize,
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchFpsArgs {
    /// Trained checkpoint; a freshly initialised avatar when omitted
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value = "standard")]
    pub quality: String,
    #[arg(long, default_value = "hierarchical")]
    pub knn: String,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[arg(long, default_value_t = 512)]
    pub resolution: usize,
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    /// Checkpoint whose network sizes to count; full sizes when omitted
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = DEFAULT_MAX_RESOLUTION)]
    pub max_resolution: usize,
    /// Concurrent renders; defaults to the core count
    #[arg(long)]
    pub workers: Option<usize>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Load a checkpoint with a clear message when the file is absent.
pub fn open_checkpoint(path: &Path) -> Result<TrainState> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint not found: {}", path.display()),
        )));
    }
    load_checkpoint(path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

/// Training configuration from the scale preset, config file and flags.
pub fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match args.scale.as_str() {
        "desk" => TrainConfig::desk(),
        "full" => TrainConfig::full(),
        other => return Err(Error::InvalidInput(format!("unknown scale `{other}`: expected desk or full"))),
    };
    if let Some(p) = &args.config {
        let mut kv: KeyValues = read_text(p)?.parse()?;
        config.apply(&mut kv)?;
        kv.finish()?;
    }
    if let Some(s) = args.steps {
        config.total_steps = s;
    }
    if args.no_warp {
        config.use_warp = false;
    }
    config.validate()?;
    Ok(config)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Render(a) => {
            let state = open_checkpoint(&a.checkpoint)?;
            let request = RenderRequest::parse(&a.request.request_text()?, &state.avatar)?;
            let (png, ms) = render_png(&state.avatar, &request)?;
            std::fs::write(&a.out, &png)?;
            println!("wrote {} ({}x{}, {ms:.1} ms)", a.out.display(), request.width, request.height);
            Ok(())
        }
        Command::Eval(a) => eval(&a),
        Command::BenchKnn(a) => bench_knn_cmd(&a),
        Command::BenchFps(a) => bench_fps_cmd(&a),
        Command::Flops(a) => {
            let model = match &a.checkpoint {
                Some(p) => FlopsModel::for_avatar(&open_checkpoint(p)?.avatar, a.resolution, a.resolution, a.samples),
                None => FlopsModel::full(a.resolution, a.resolution, a.samples)?,
            };
            print!("{}", flops_report(&model));
            Ok(())
        }
        Command::Serve(a) => {
            let state = open_checkpoint(&a.checkpoint)?;
            let workers = a.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let service = ServiceState::new(state.avatar, a.max_resolution, workers);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(service, &format!("{}:{}", a.host, a.port)))
        }
    }
}

/// Per-component operation counts in GFLOPs.
pub fn flops_report(model: &FlopsModel) -> String {
    let b = model.breakdown();
    let g = |v: f64| v / 1e9;
    format!(
        "resolution {}x{}, {} samples/ray\nmlp      {:>12.4} GFLOPs\nhash     {:>12.4} GFLOPs\nblend    {:>12.4} GFLOPs\nencoding {:>12.4} GFLOPs\nuvnet    {:>12.4} GFLOPs\nmerge    {:>12.4} GFLOPs\ntotal    {:>12.4} GFLOPs\n",
        model.width,
        model.height,
        model.samples_per_ray,
        g(b.mlp),
        g(b.hash),
        g(b.blend),
        g(b.encoding),
        g(b.uvnet),
        g(b.merge),
        g(b.total())
    )
}

fn synth(a: &SynthArgs) -> Result<()> {
    let ds = generate_synthetic_dataset(&a.scene.dataset_config())?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("model.avhm"), model_to_bytes(&ds.model))?;
    write_text(&a.out.join("model.txt"), &model_dump_text(&ds.model))?;
    for img in 0..ds.image_count() {
        let (c, e) = ds.image_source(img);
        save_image(&a.out.join(format!("cam{c}_expr{e}.png")), &ds.targets[img])?;
    }
    let mut expr = String::from("expression,psi,theta\n");
    for (i, e) in ds.expressions.iter().enumerate() {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
        expr += &format!("{i},{},{}\n", join(&e.psi), join(&e.theta));
    }
    write_text(&a.out.join("expressions.csv"), &expr)?;
    println!("wrote {} views of {} expressions to {}", ds.image_count(), ds.expressions.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let config = train_config(a)?;
    let ds = generate_synthetic_dataset(&a.scene.dataset_config())?;
    let mut state = match &a.resume {
        Some(p) => open_checkpoint(p)?,
        None => TrainState::new(avatar_for(&ds, a.blendshapes, a.scene.seed)?, a.scene.seed),
    };
    let mut log = format!("{TRAIN_LOG_HEADER}\n");
    while state.step < config.total_steps {
        let entry = train_step(&mut state, &config, &ds)?;
        log += &entry.csv_row();
        log.push('\n');
        if entry.step % 100 == 0 {
            eprintln!("step {} loss {:.6}", entry.step, entry.loss.total);
        }
        if let Some(every) = a.checkpoint_every {
            if every > 0 && state.step % every == 0 {
                save_checkpoint(&a.out, &state)?;
            }
        }
    }
    save_checkpoint(&a.out, &state)?;
    if let Some(p) = &a.log {
        write_text(p, &log)?;
    }
    println!("trained to step {}; checkpoint {}", state.step, a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let state = open_checkpoint(&a.checkpoint)?;
    let knn: KnnMode = a.knn.parse()?;
    let ds = generate_synthetic_dataset(&a.scene.dataset_config())?;
    if ds.model != state.avatar.model {
        return Err(Error::InvalidInput("checkpoint was trained on a different synthetic scene".into()));
    }
    println!("split,camera,psnr,ssim,lpips");
    for (c, cam) in ds.cameras.iter().enumerate() {
        let (mut p, mut s) = (0.0, 0.0);
        for (e, expr) in ds.expressions.iter().enumerate() {
            let img = c * ds.expressions.len() + e;
            let out = render_avatar(&state.avatar, expr, cam, &ds.render, knn, None)?;
            let mask = evaluation_mask(&ds.masks[img], cam.width, cam.height);
            p += masked_psnr(&out.image, &ds.targets[img], &mask)?;
            s += masked_ssim(&out.image, &ds.targets[img], &mask)?;
        }
        let n = ds.expressions.len() as f64;
        println!("train,{c},{:.3},{:.4},n/a", p / n, s / n);
    }
    let held = evaluate_heldout(&state.avatar, &ds, knn)?;
    println!("heldout,0,{:.3},{:.4},n/a", held.psnr, held.ssim);
    Ok(())
}

fn bench_knn_cmd(a: &BenchKnnArgs) -> Result<()> {
    let (q, anchors) = bench_scene(a.vertices, a.anchors, a.queries, a.seed)?;
    let report = bench_knn(&q, &anchors, a.k, a.candidates, a.grid, a.repeats)?;
    let csv = report.to_csv();
    print!("{csv}");
    println!("# recall {:.6}", report.recall);
    if let Some(p) = &a.out {
        write_text(p, &csv)?;
    }
    Ok(())
}

fn bench_fps_cmd(a: &BenchFpsArgs) -> Result<()> {
    let avatar = match &a.checkpoint {
        Some(p) => open_checkpoint(p)?.avatar,
        None => {
            let model = with_anchor_count(make_synthetic_model(a.seed, 1000, 8)?, 300)?;
            Avatar::new(model, AvatarConfig::desk(5, 1), a.seed)?
        }
    };
    let ds_model = avatar.model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let exprs: Vec<ExpressionInput> = (0..a.frames)
        .map(|_| {
            let mut e = ExpressionInput::neutral(&ds_model);
            e.psi.iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
            e
        })
        .collect();
    let request = RenderRequest {
        width: a.resolution,
        height: a.resolution,
        plan: quality_plan(&a.quality)?,
        knn: a.knn.parse()?,
        ..RenderRequest::neutral(&avatar)
    };
    let options = RenderOptions {
        plan: request.plan,
        ..RenderOptions::default()
    };
    let report = bench_fps(&avatar, &request.camera(&avatar)?, &exprs, a.repeats, &options, request.knn, None)?;
    let csv = report.to_csv();
    print!("{csv}");
    println!("# mean {:.3} ms, {:.2} fps", report.mean_ms(), report.mean_fps());
    if let Some(p) = &a.out {
        write_text(p, &csv)?;
    }
    Ok(())
}

/// Process entry: parse, run, map failures to exit codes (2 usage, 1 runtime).
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

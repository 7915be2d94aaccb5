use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flatsplat::gradcheck::{check_objective, GradCheckConfig, Objective};
use flatsplat::io::{
    load_dataset, read_checkpoint, read_ply, save_dataset, write_checkpoint, write_csv, write_pfm_scalar, write_pfm_vector,
    write_png, write_png_gray, PlyFormat, SceneDataset,
};
use flatsplat::metrics::{chamfer_distance, psnr, sample_mesh, ssim, PointCloud};
use flatsplat::regularizers::{mdrr_loss, mne_loss, select_neighbor, ViewPair};
use flatsplat::render::render;
use flatsplat::surface::{fuse_scene, FusionConfig};
use flatsplat::synth::{generate_synthetic, AnalyticSurface, ShapeSpec, SyntheticSpec};
use flatsplat::trainer::{initialize_scene, train_with, TrainConfig, TrainError, TrainObserver, TrainState, LOSS_CSV_HEADER};

const SPEC_FILE: &str = "synthetic.toml";
const THREADS_ENV: &str = "FLATSPLAT_THREADS";

#[derive(Parser)]
#[command(name = "flatsplat", version, about = "Flat-Gaussian splatting with multi-view geometric regularization")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    Plane,
    Sphere,
    Box,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset rendered by analytic ray casting.
    Synth {
        #[arg(long, value_enum, default_value = "plane")]
        shape: Shape,
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize Gaussians from the dataset and optimize them.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML file with training settings; missing fields keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (default: <data>/train).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        geometric_start: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write a checkpoint every N iterations in addition to the final one.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Write residual maps and mask codes of the final iteration's view pair.
        #[arg(long)]
        diagnostics: bool,
    },
    /// Render color, depth, normal, distance and alpha buffers.
    Render {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint (default: <data>/train/scene.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// View indices; all views when omitted.
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
    },
    /// Fuse rendered depths into a TSDF volume and extract a mesh.
    Fuse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Mesh path (default: <data>/train/mesh.ply).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        #[arg(long)]
        ascii: bool,
    },
    /// Print chamfer distance against the analytic surface and image metrics.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic gradients with finite differences on random small scenes.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        gaussians: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

type CliResult = Result<(), Failure>;

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = value.trim().parse().map_err(|_| format!("{THREADS_ENV} must be a positive integer, got {value:?}"))?;
    if n == 0 {
        return Err(format!("{THREADS_ENV} must be positive"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Synth { shape, views, size, seed, out } => synth(shape, views, size, seed, &out),
        Command::Train { data, config, out, iters, geometric_start, seed, checkpoint_every, diagnostics } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
                    TrainConfig::from_toml(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
                }
                None => TrainConfig::default(),
            };
            if let Some(n) = iters {
                cfg.total_iters = n;
                cfg.geometric_phase_start = cfg.geometric_phase_start.min(n);
            }
            if let Some(n) = geometric_start {
                cfg.geometric_phase_start = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            if checkpoint_every == Some(0) {
                return Err(Failure::Usage("--checkpoint-every must be positive".into()));
            }
            let out = out.unwrap_or_else(|| data.join("train"));
            train(&data, &cfg, &out, checkpoint_every, diagnostics)
        }
        Command::Render { data, checkpoint, out, views } => {
            let checkpoint = checkpoint.unwrap_or_else(|| default_checkpoint(&data));
            let out = out.unwrap_or_else(|| data.join("render"));
            render_views(&data, &checkpoint, &out, &views)
        }
        Command::Fuse { data, checkpoint, out, resolution, ascii } => {
            if resolution < 2 {
                return Err(Failure::Usage("--resolution must be at least 2".into()));
            }
            let checkpoint = checkpoint.unwrap_or_else(|| default_checkpoint(&data));
            let out = out.unwrap_or_else(|| data.join("train").join("mesh.ply"));
            fuse(&data, &checkpoint, &out, resolution, ascii)
        }
        Command::Eval { data, checkpoint, mesh, samples, seed } => {
            if samples == 0 {
                return Err(Failure::Usage("--samples must be positive".into()));
            }
            eval(&data, checkpoint, mesh, samples, seed)
        }
        Command::CheckGrad { seed, gaussians, size } => {
            if gaussians == 0 || gaussians > 20 || size < 4 {
                return Err(Failure::Usage("check-grad needs 1..=20 gaussians and size >= 4".into()));
            }
            check_grad(seed, gaussians, size)
        }
    }
}

fn default_checkpoint(data: &Path) -> PathBuf {
    data.join("train").join("scene.ckpt")
}

fn synth(shape: Shape, views: usize, size: usize, seed: u64, out: &Path) -> CliResult {
    let spec = match shape {
        Shape::Plane => SyntheticSpec::plane(views, size, seed),
        Shape::Sphere => SyntheticSpec::sphere(views, size, seed),
        Shape::Box => SyntheticSpec { shape: ShapeSpec::Box { extent: 1.2 }, ..SyntheticSpec::sphere(views, size, seed) },
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let fixture = generate_synthetic(&spec).map_err(runtime)?;
    save_dataset(&fixture.dataset, out).map_err(runtime)?;
    let text = toml::to_string(&spec).map_err(runtime)?;
    fs::write(out.join(SPEC_FILE), text).map_err(runtime)?;
    println!("wrote {} views to {}", fixture.dataset.len(), out.display());
    Ok(())
}

struct Checkpointer<'a> {
    every: Option<usize>,
    dir: &'a Path,
}

impl TrainObserver for Checkpointer<'_> {
    fn after_iteration(&mut self, state: &TrainState) -> Result<(), TrainError> {
        if let Some(n) = self.every {
            if state.iteration % n == 0 {
                let path = self.dir.join(format!("checkpoint_{:06}.ckpt", state.iteration));
                write_checkpoint(&path, &state.scene).map_err(|e| TrainError::Hook(e.to_string()))?;
            }
        }
        Ok(())
    }
}

fn train(data: &Path, cfg: &TrainConfig, out: &Path, every: Option<usize>, diagnostics: bool) -> CliResult {
    let dataset = load_dataset(data).map_err(runtime)?;
    fs::create_dir_all(out).map_err(runtime)?;
    let scene = initialize_scene(&dataset, &cfg.init, cfg.seed);
    log::info!("initialized {} gaussians", scene.len());
    let mut observer = Checkpointer { every, dir: out };
    let state = train_with(cfg, scene, &dataset, &mut observer).map_err(runtime)?;
    write_checkpoint(&out.join("scene.ckpt"), &state.scene).map_err(runtime)?;
    write_csv(&out.join("loss.csv"), &LOSS_CSV_HEADER, state.history.iter().map(|r| r.csv_row())).map_err(runtime)?;
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(runtime)?;
    if diagnostics {
        write_diagnostics(&dataset, cfg, &state, out)?;
    }
    if let Some(last) = state.history.last() {
        let t = last.terms;
        println!(
            "trained {} iterations: photometric {:.6} dist {:.6e} nor {:.6e} gaussians {}",
            state.iteration,
            t.photometric,
            t.dist,
            t.nor,
            state.scene.len()
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn write_diagnostics(dataset: &SceneDataset, cfg: &TrainConfig, state: &TrainState, out: &Path) -> CliResult {
    let r = state.history.last().map(|h| h.reference).unwrap_or(0);
    let n = select_neighbor(&dataset.cameras, r, &cfg.baseline).ok_or_else(|| runtime("no neighbor view"))?;
    let (cr, cn) = (&dataset.cameras[r], &dataset.cameras[n]);
    let (br, bn) = (render(&state.scene, cr), render(&state.scene, cn));
    let pair = ViewPair::new(cr, cn, &br, &bn, &dataset.images[r], &dataset.images[n]);
    let reg = cfg.regularizer();
    let dist = mdrr_loss(&pair, &reg);
    let nor = mne_loss(&pair, &reg);
    let dir = out.join("diagnostics");
    fs::create_dir_all(&dir).map_err(runtime)?;
    write_pfm_scalar(&dir.join("dist_residual.pfm"), &dist.residual).map_err(runtime)?;
    write_pfm_scalar(&dir.join("nor_residual.pfm"), &nor.residual).map_err(runtime)?;
    write_png_gray(&dir.join("dist_mask.png"), &dist.mask.codes()).map_err(runtime)?;
    write_png_gray(&dir.join("nor_mask.png"), &nor.mask.codes()).map_err(runtime)?;
    println!("diagnostics for views {r} -> {n}: dist {:.6e} ({} valid), nor {:.6e} ({} valid)", dist.value, dist.valid_count(), nor.value, nor.valid_count());
    Ok(())
}

fn render_views(data: &Path, checkpoint: &Path, out: &Path, views: &[usize]) -> CliResult {
    let dataset = load_dataset(data).map_err(runtime)?;
    let scene = read_checkpoint(checkpoint).map_err(runtime)?;
    let views: Vec<usize> = if views.is_empty() { (0..dataset.len()).collect() } else { views.to_vec() };
    if let Some(&bad) = views.iter().find(|&&v| v >= dataset.len()) {
        return Err(Failure::Usage(format!("view {bad} out of range (dataset has {})", dataset.len())));
    }
    fs::create_dir_all(out).map_err(runtime)?;
    for v in views {
        let b = render(&scene, &dataset.cameras[v]);
        let name = &dataset.names[v];
        write_png(&out.join(format!("{name}_color.png")), &b.color).map_err(runtime)?;
        write_pfm_scalar(&out.join(format!("{name}_depth.pfm")), &b.depth).map_err(runtime)?;
        write_pfm_scalar(&out.join(format!("{name}_distance.pfm")), &b.distance).map_err(runtime)?;
        write_pfm_scalar(&out.join(format!("{name}_alpha.pfm")), &b.alpha).map_err(runtime)?;
        write_pfm_vector(&out.join(format!("{name}_normal.pfm")), &b.normal).map_err(runtime)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn fuse(data: &Path, checkpoint: &Path, out: &Path, resolution: usize, ascii: bool) -> CliResult {
    let dataset = load_dataset(data).map_err(runtime)?;
    let scene = read_checkpoint(checkpoint).map_err(runtime)?;
    let cfg = FusionConfig { resolution, ..Default::default() };
    let result = fuse_scene(&scene, &dataset.cameras, &cfg).map_err(runtime)?;
    if let Some(w) = &result.warning {
        eprintln!("warning: {w}");
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(runtime)?;
    }
    let format = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
    flatsplat::io::write_ply(out, &result.mesh, format).map_err(runtime)?;
    println!("mesh: {} vertices, {} triangles -> {}", result.mesh.vertices.len(), result.mesh.triangles.len(), out.display());
    Ok(())
}

fn eval(data: &Path, checkpoint: Option<PathBuf>, mesh: Option<PathBuf>, samples: usize, seed: u64) -> CliResult {
    let dataset = load_dataset(data).map_err(runtime)?;
    let mesh_path = mesh.clone().unwrap_or_else(|| data.join("train").join("mesh.ply"));
    let checkpoint_path = checkpoint.clone().unwrap_or_else(|| default_checkpoint(data));
    let mut reported = false;

    if mesh.is_some() || mesh_path.exists() {
        let spec_path = data.join(SPEC_FILE);
        let text = fs::read_to_string(&spec_path).map_err(|e| runtime(format!("{}: {e}", spec_path.display())))?;
        let spec: SyntheticSpec = toml::from_str(&text).map_err(|e| runtime(format!("{}: {e}", spec_path.display())))?;
        let surface = AnalyticSurface::from_spec(&spec.shape);
        let mesh = read_ply(&mesh_path).map_err(runtime)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = PointCloud::new(surface.sample(samples, &mut rng));
        match sample_mesh(&mesh, samples, seed.wrapping_add(1)) {
            Ok(cloud) => {
                let cd = chamfer_distance(&cloud, &reference).map_err(runtime)?;
                let mad = cloud.points.iter().map(|p| surface.distance(p).abs()).sum::<f64>() / cloud.len() as f64;
                println!("chamfer distance: {cd:.6}");
                println!("mean surface distance: {mad:.6}");
            }
            Err(e) => println!("chamfer distance: unavailable ({e})"),
        }
        reported = true;
    }
    if checkpoint.is_some() || checkpoint_path.exists() {
        let scene = read_checkpoint(&checkpoint_path).map_err(runtime)?;
        let (mut sum_psnr, mut sum_ssim) = (0.0, 0.0);
        for (k, cam) in dataset.cameras.iter().enumerate() {
            let b = render(&scene, cam);
            let p = psnr(&b.color, &dataset.images[k]).map_err(runtime)?;
            let s = ssim(&b.color, &dataset.images[k]).map_err(runtime)?;
            println!("view {}: psnr {p:.4} dB ssim {s:.6}", dataset.names[k]);
            sum_psnr += p;
            sum_ssim += s;
        }
        let n = dataset.len() as f64;
        println!("mean psnr: {:.4} dB", sum_psnr / n);
        println!("mean ssim: {:.6}", sum_ssim / n);
        reported = true;
    }
    if !reported {
        return Err(runtime(format!("nothing to evaluate: neither {} nor {} exists", mesh_path.display(), checkpoint_path.display())));
    }
    Ok(())
}

fn check_grad(seed: u64, gaussians: usize, size: usize) -> CliResult {
    let cfg = GradCheckConfig::default();
    let mut worst: f64 = 0.0;
    let mut failed = false;
    for obj in Objective::ALL {
        let (value, report) = check_objective(seed, gaussians, size, obj, &cfg);
        let err = report.max_error();
        worst = worst.max(err);
        failed |= !report.passed();
        println!(
            "{:<12} value {value:.6e} max error {err:.3e} checked {} non-smooth {}",
            obj.name(),
            report.checks.len() - report.non_smooth(),
            report.non_smooth()
        );
    }
    println!("max error: {worst:.3e}");
    if failed {
        return Err(runtime(format!("gradient check failed: max error {worst:.3e} exceeds {:.0e}", cfg.rel_tol)));
    }
    Ok(())
}

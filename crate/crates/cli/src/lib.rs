//! The `svgs` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
//! inconsistent input), 3 numerical failure during optimization.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use svgs::config::Config;
use svgs::dataset::{self, load_blender, Dataset, View};
use svgs::gaussians::{load_ply, save_ply};
use svgs::imaging::{save_png_gray, save_png_rgb, RgbImage};
use svgs::mesh::{self, MeshFormat};
use svgs::pipeline::{self, InitReport};
use svgs::raster::render;
use svgs::relevance::{self, Mask, PrecomputedDenoiser};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] svgs::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "svgs", version, about = "Sparse-view Gaussian splatting toolkit")]
pub struct Cli {
    /// TOML config file; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Heldout,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the configured synthetic scene into a dataset directory.
    Synth {
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Carve the visual hull of a dataset and write the initial cloud.
    Carve {
        data: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Initialize and train a cloud on the training views.
    Reconstruct {
        data: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Training log (tab-separated).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Write a checkpoint cloud to this directory at every log record.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Render a cloud from dataset cameras to PNG and DPTH files.
    Render {
        cloud: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Threshold the relevance of two noise predictions into a mask.
    Mask {
        /// Prediction with the text condition (LTNT).
        #[arg(long)]
        text_pred: PathBuf,
        /// Prediction without the text condition (LTNT).
        #[arg(long)]
        null_pred: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        blur: bool,
        /// Resample the mask to WIDTHxHEIGHT before writing.
        #[arg(long, value_parser = parse_size)]
        size: Option<(usize, usize)>,
        /// Mask PNG (0 / 255).
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the normalized relevance map as a gray PNG.
        #[arg(long)]
        relevance_out: Option<PathBuf>,
        /// Edited latent to blend into `--orig` under the mask.
        #[arg(long, requires_all = ["orig", "blend_out"])]
        edit: Option<PathBuf>,
        #[arg(long, requires_all = ["edit", "blend_out"])]
        orig: Option<PathBuf>,
        #[arg(long, requires_all = ["edit", "orig"])]
        blend_out: Option<PathBuf>,
    },
    /// Extract a triangle mesh from a cloud.
    ExportMesh {
        cloud: PathBuf,
        /// `.ply` or `.obj`.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Score a cloud against dataset views (PSNR / SSIM, tab-separated).
    Eval {
        cloud: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "heldout")]
        split: SplitArg,
        #[arg(long, default_value = "svgs")]
        method: String,
    },
    /// Print the effective config as TOML.
    Config,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: usize = w.parse().map_err(|_| "bad width")?;
    let h: usize = h.parse().map_err(|_| "bad height")?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Normal output goes to `out`, diagnostics to stderr.
pub fn main_with(args: impl IntoIterator<Item = impl Into<OsString> + Clone>, out: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let base = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    base.with_overrides(&cli.overrides).map_err(|e| CliError::Usage(e.to_string()))
}

fn views<'a>(ds: &'a Dataset, split: SplitArg) -> Vec<&'a View> {
    match split {
        SplitArg::Train => ds.train().collect(),
        SplitArg::Heldout => ds.heldout().collect(),
        SplitArg::All => ds.views.iter().collect(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| svgs::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| svgs::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn file_stem(name: &str) -> String {
    name.replace(['/', '\\'], "_")
}

fn report(out: &mut dyn Write, r: &InitReport) {
    let _ = writeln!(
        out,
        "initialized {} gaussians ({} hull points, {} unseen)",
        r.gaussians, r.carved, r.excluded
    );
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Config => {
            let _ = write!(out, "{}", cfg.to_toml());
        }
        Command::Synth { out: dir } => {
            let ds = dataset::synth(&cfg.scene, &dir)?;
            let _ = writeln!(
                out,
                "wrote {} train and {} held-out views to {}",
                ds.train().count(),
                ds.heldout().count(),
                dir.display()
            );
        }
        Command::Carve { data, out: path } => {
            let ds = load_blender(&data)?;
            let (cloud, r) = pipeline::hull_cloud(&ds, &cfg.init)?;
            save_ply(&cloud, &path)?;
            report(out, &r);
        }
        Command::Reconstruct {
            data,
            out: path,
            log,
            checkpoints,
        } => {
            let ds = load_blender(&data)?;
            let rc = cfg.reconstruct().for_dataset(&ds);
            ds.validate()?;
            let (init, r) = pipeline::initialize(&ds, &rc.init)?;
            report(out, &r);
            if let Some(dir) = &checkpoints {
                create_dir(dir)?;
            }
            let train_views: Vec<&View> = ds.train().collect();
            let (cloud, train_log) = svgs::optim::train_with(&train_views, init, &rc.train, |it, c| {
                if let Some(dir) = &checkpoints {
                    save_ply(c, dir.join(format!("iter_{it:06}.ply")))?;
                }
                Ok(())
            })?;
            save_ply(&cloud, &path)?;
            if let Some(p) = &log {
                write_text(p, &train_log.to_text())?;
            }
            if let Some(last) = train_log.records.last() {
                let _ = writeln!(out, "iteration {} loss {:.6} gaussians {}", last.iteration, last.total, cloud.len());
            }
        }
        Command::Render {
            cloud,
            data,
            split,
            out: dir,
        } => {
            let ds = load_blender(&data)?;
            let cloud = load_ply(&cloud)?;
            create_dir(&dir)?;
            let mut settings = cfg.train.render.clone();
            settings.background = ds.background;
            for v in views(&ds, split) {
                let r = render(&cloud, &v.camera, &settings)?;
                let stem = file_stem(&v.name);
                let img = RgbImage {
                    width: r.width,
                    height: r.height,
                    data: r.color,
                };
                save_png_rgb(&img, dir.join(format!("{stem}.png")))?;
                dataset::write_depth(dir.join(format!("{stem}.dpth")), r.width, r.height, &r.depth)?;
                let _ = writeln!(out, "{stem}");
            }
        }
        Command::Mask {
            text_pred,
            null_pred,
            tau,
            blur,
            size,
            out: path,
            relevance_out,
            edit,
            orig,
            blend_out,
        } => {
            let d = PrecomputedDenoiser::load(&text_pred, &null_pred)?;
            let r = relevance::relevance_from_predictions(&d.with_text, &d.without_text)?;
            let tau = tau.unwrap_or(cfg.relevance.tau);
            let mask = relevance::threshold_mask(&r, tau, blur || cfg.relevance.blur);
            if let Some(p) = &relevance_out {
                save_png_gray(&r.values, r.width, r.height, p)?;
            }
            if let (Some(e), Some(o), Some(b)) = (&edit, &orig, &blend_out) {
                let blended = relevance::blend_latents(&relevance::read_latent(e)?, &relevance::read_latent(o)?, &mask)?;
                relevance::write_latent(b, &blended)?;
            }
            let written: Mask = match size {
                Some((w, h)) => relevance::upsample_mask(&mask, w, h)?,
                None => mask.clone(),
            };
            relevance::save_mask_png(&written, &path)?;
            let _ = writeln!(
                out,
                "mask {}x{}: {} of {} latent cells above {tau}",
                written.width,
                written.height,
                mask.count(),
                mask.values.len()
            );
        }
        Command::ExportMesh { cloud, out: path } => {
            let format = MeshFormat::from_path(&path).map_err(|e| CliError::Usage(e.to_string()))?;
            let cloud = load_ply(&cloud)?;
            let bounds = mesh::cloud_bounds(&cloud)?;
            let m = mesh::extract_mesh(&cloud, &bounds, &cfg.mesh)?;
            mesh::write_mesh(&m, &path, format)?;
            let _ = writeln!(out, "{} vertices, {} faces", m.vertices.len(), m.faces.len());
        }
        Command::Eval {
            cloud,
            data,
            split,
            method,
        } => {
            let ds = load_blender(&data)?;
            let cloud = load_ply(&cloud)?;
            let mut settings = cfg.train.render.clone();
            settings.background = ds.background;
            let scores = pipeline::evaluate(&cloud, views(&ds, split), &settings)?;
            let _ = writeln!(out, "method\tview\tpsnr\tssim");
            for s in &scores {
                let _ = writeln!(out, "{method}\t{}\t{:.4}\t{:.4}", s.name, s.psnr, s.ssim);
            }
            let (p, s) = pipeline::mean_score(&scores);
            let _ = writeln!(out, "{method}\tmean\t{p:.4}\t{s:.4}");
        }
    }
    Ok(())
}

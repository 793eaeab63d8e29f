mod config;
mod remote;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use arbot_core::archive::{validate, write_archive, SessionArchive};
use arbot_core::demo::Demonstration;
use arbot_core::export::{encode_png, export_imagebc, export_peract, write_dataset, PerActOptions};
use arbot_core::pipeline::{bench, process, replay, write_output, LoadedSession, ProcessOptions};
use arbot_core::synthetic::{generate, SyntheticOptions};
use arbot_core::KinematicChain;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arbot", version, about = "Demonstration recording, processing and export tools")]
struct Cli {
    /// Base directory for relative archive and output paths.
    #[arg(long, global = true, env = "ARBOT_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// Arm description (TOML). Defaults to the built-in Franka-style arm.
    #[arg(long, global = true)]
    robot: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check an archive's schema, checksums, timestamps and dimensions.
    Validate { archive: PathBuf },
    /// Run the kinesthetic pipeline on an archive and write a dataset.
    Process(ProcessArgs),
    /// Render a demonstration over its scene frames as PNGs.
    Replay {
        archive: PathBuf,
        /// demonstration.json written by `process`, `export` or the service.
        #[arg(long)]
        demo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Measure lift → smooth → IK throughput and print a JSON report.
    Bench {
        /// Archive to time; omitted means a freshly generated synthetic session.
        archive: Option<PathBuf>,
        /// Minimum single-thread measurement time, seconds.
        #[arg(long, default_value_t = 2.0)]
        min_seconds: f64,
        #[arg(long, default_value_t = 640)]
        width: u32,
        #[arg(long, default_value_t = 480)]
        height: u32,
    },
    /// Write a synthetic tabletop recording with a scripted hand.
    GenSynthetic {
        out: PathBuf,
        #[arg(long, default_value_t = 640)]
        width: u32,
        #[arg(long, default_value_t = 480)]
        height: u32,
        /// Frames held at each waypoint.
        #[arg(long, default_value_t = 8)]
        hold_frames: usize,
        /// Frames per move between waypoints.
        #[arg(long, default_value_t = 16)]
        move_frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_masks: bool,
        #[arg(long)]
        no_plate: bool,
    },
    /// Re-export a saved demonstration against its scene archive.
    Export {
        archive: PathBuf,
        #[arg(long)]
        demo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        formats: Formats,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Run the HTTP session service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
    /// Talk to a running session service.
    Session(remote::SessionArgs),
}

#[derive(Args, Clone, Copy)]
struct Formats {
    /// Write only PerAct samples.
    #[arg(long, conflicts_with = "imagebc_only")]
    peract_only: bool,
    /// Write only image behavior-cloning samples.
    #[arg(long)]
    imagebc_only: bool,
}

impl Formats {
    fn peract(self) -> bool {
        !self.imagebc_only
    }

    fn imagebc(self) -> bool {
        !self.peract_only
    }
}

#[derive(Args)]
struct ProcessArgs {
    archive: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML options file; its keys override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "demonstration")]
    goal: String,
    #[command(flatten)]
    formats: Formats,
    /// Image-BC frame stride.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Collision grid resolution in meters; 0 disables collision checks.
    #[arg(long, default_value_t = 0.02)]
    collision_resolution: f64,
}

struct Ctx {
    data_root: Option<PathBuf>,
    robot: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.data_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn chain(&self) -> Result<KinematicChain> {
        match &self.robot {
            Some(p) => KinematicChain::from_file(&self.path(p)).with_context(|| format!("loading {}", p.display())),
            None => Ok(KinematicChain::franka_style()),
        }
    }

    fn session(&self, archive: &Path) -> Result<LoadedSession> {
        let archive = SessionArchive::open(&self.path(archive))?;
        Ok(LoadedSession::load(&archive)?)
    }
}

/// Pretty JSON on stdout; a closed pipe is not an error.
pub(crate) fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn read_demo(path: &Path) -> Result<Demonstration> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let ctx = Ctx { data_root: cli.data_root, robot: cli.robot };
    match cli.command {
        Command::Validate { archive } => {
            let report = validate(&ctx.path(&archive));
            print_json(&report)?;
            return Ok(if report.ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::Process(a) => {
            let mut opts = ProcessOptions {
                language_goal: a.goal,
                export_peract: a.formats.peract(),
                export_imagebc: a.formats.imagebc(),
                imagebc_stride: a.stride,
                collision_resolution: a.collision_resolution,
                ..ProcessOptions::default()
            };
            if let Some(c) = &a.config {
                opts = config::overlay(&opts, &ctx.path(c))?;
            }
            let chain = ctx.chain()?;
            let session = ctx.session(&a.archive)?;
            let out = process(&session, &chain, &opts)?;
            let manifest = write_output(&ctx.path(&a.out), &out, &opts)?;
            print_json(&manifest)?;
        }
        Command::Replay { archive, demo, out, stride } => {
            if stride == 0 {
                bail!("stride must be at least 1");
            }
            let demo = read_demo(&ctx.path(&demo))?;
            let chain = ctx.chain()?.with_base_pose(demo.base_pose);
            let session = ctx.session(&archive)?;
            let frames = replay(&chain, &demo, &session, stride)?;
            let out = ctx.path(&out);
            fs::create_dir_all(&out)?;
            let (w, h) = (session.frames[0].width(), session.frames[0].height());
            for (i, rgb) in frames.iter().enumerate() {
                fs::write(out.join(format!("{i:06}.png")), encode_png(rgb, w, h)?)?;
            }
            print_json(&serde_json::json!({ "frames": frames.len(), "out": out }))?;
        }
        Command::Bench { archive, min_seconds, width, height } => {
            let chain = ctx.chain()?;
            let session = match archive {
                Some(a) => ctx.session(&a)?,
                None => {
                    let dir = tempfile::tempdir()?;
                    let opts = SyntheticOptions { width, height, ..SyntheticOptions::default() };
                    write_archive(dir.path(), &generate(&chain, &opts))?;
                    LoadedSession::load(&SessionArchive::open(dir.path())?)?
                }
            };
            print_json(&bench(&session, &chain, &ProcessOptions::default(), min_seconds)?)?;
        }
        Command::GenSynthetic { out, width, height, hold_frames, move_frames, seed, no_masks, no_plate } => {
            let opts =
                SyntheticOptions { width, height, hold_frames, move_frames, seed, masks: !no_masks, plate: !no_plate };
            let out = ctx.path(&out);
            let contents = generate(&ctx.chain()?, &opts);
            write_archive(&out, &contents)?;
            print_json(&validate(&out))?;
        }
        Command::Export { archive, demo, out, formats, stride } => {
            let demo = read_demo(&ctx.path(&demo))?;
            let chain = ctx.chain()?.with_base_pose(demo.base_pose);
            let s = ctx.session(&archive)?;
            let masks = s.masks.as_deref();
            let opts = PerActOptions::default();
            let peract = formats
                .peract()
                .then(|| export_peract(&demo, &s.frames, masks, &opts))
                .transpose()?;
            let imagebc = formats
                .imagebc()
                .then(|| export_imagebc(&chain, &demo, &s.frames, masks, &s.hand_present, s.plate.as_deref(), stride))
                .transpose()?;
            let manifest = write_dataset(
                &ctx.path(&out),
                &demo,
                peract.as_deref().map(|p| (&opts, p)),
                imagebc.as_deref().map(|i| (stride, i)),
            )?;
            print_json(&manifest)?;
        }
        Command::Serve { addr } => {
            let root = ctx.data_root.clone().unwrap_or_else(|| PathBuf::from("."));
            let state = arbot_service::AppState::new(root, ctx.chain()?);
            tokio::runtime::Runtime::new()?.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                tracing::info!("listening on {}", listener.local_addr()?);
                arbot_service::serve(listener, state, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
                anyhow::Ok(())
            })?;
        }
        Command::Session(args) => remote::run(args)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

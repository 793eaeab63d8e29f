//! `arbot session ...`: thin wrappers over the service client.

use anyhow::Result;
use arbot_client::api::ExportRequest;
use arbot_client::Client;
use arbot_core::demo::InteractionMode;
use arbot_core::handtrack::GripperState;
use clap::{Args, Subcommand, ValueEnum};

#[derive(Args)]
pub struct SessionArgs {
    /// Service base URL.
    #[arg(long, default_value = "http://127.0.0.1:7878", env = "ARBOT_SERVICE")]
    url: String,
    #[command(subcommand)]
    command: SessionCommand,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Pointing,
    Gui,
    Kinesthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Gripper {
    Open,
    Closed,
}

#[derive(Subcommand)]
enum SessionCommand {
    /// Service liveness.
    Health,
    /// List open sessions.
    List,
    /// Open a session on a scene archive (path relative to the service data root).
    Create { scene: String },
    /// Print a session's state.
    Show { id: String },
    /// Close a session.
    Delete { id: String },
    /// Place the robot base on the support plane.
    Anchor {
        id: String,
        #[arg(num_args = 3, allow_negative_numbers = true)]
        point: Vec<f64>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Switch input mode.
    Mode { id: String, mode: Mode },
    /// Submit a TCP keypoint and print the preview summary.
    Keypoint {
        id: String,
        #[arg(num_args = 3, allow_negative_numbers = true)]
        point: Vec<f64>,
        #[arg(long, value_enum, default_value = "open")]
        gripper: Gripper,
        #[arg(long, default_value_t = 0.0)]
        dwell: f64,
        /// Accept the preview immediately.
        #[arg(long)]
        accept: bool,
    },
    /// Mirror the scene recording's hand track.
    Replay {
        id: String,
        #[arg(long)]
        accept: bool,
    },
    /// Commit a preview.
    Accept { id: String, preview: String, token: String },
    /// Drop a preview.
    Discard { id: String, preview: String },
    /// Abort a running plan.
    Cancel { id: String },
    /// Export the session's demonstration.
    Finalize {
        id: String,
        goal: String,
        #[arg(long)]
        imagebc: bool,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
}

fn show<T: serde::Serialize>(v: &T) -> Result<()> {
    crate::print_json(v)
}

fn point(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

pub fn run(args: SessionArgs) -> Result<()> {
    let c = Client::new(args.url);
    tokio::runtime::Runtime::new()?.block_on(async move {
        use SessionCommand::*;
        match args.command {
            Health => show(&c.health().await?),
            List => show(&c.list_sessions().await?),
            Create { scene } => show(&c.create_session(&scene).await?),
            Show { id } => show(&c.session(&id).await?),
            Delete { id } => Ok(c.delete_session(&id).await?),
            Anchor { id, point: p, threshold } => show(&c.anchor(&id, point(&p), threshold).await?),
            Mode { id, mode } => {
                let mode = match mode {
                    self::Mode::Pointing => InteractionMode::Pointing,
                    self::Mode::Gui => InteractionMode::Gui,
                    self::Mode::Kinesthetic => InteractionMode::Kinesthetic,
                };
                show(&c.set_mode(&id, mode).await?)
            }
            Keypoint { id, point: p, gripper, dwell, accept } => {
                let g = match gripper {
                    Gripper::Open => GripperState::Open,
                    Gripper::Closed => GripperState::Closed,
                };
                let preview = c.submit_keypoint(&id, point(&p), g, dwell).await?;
                show(&preview)?;
                if accept {
                    show(&c.accept(&id, &preview.preview_id, &preview.token).await?)?;
                }
                Ok(())
            }
            Replay { id, accept } => {
                let preview = c.send_hand_frames(&id, &[]).await?;
                show(&preview)?;
                if accept {
                    show(&c.accept(&id, &preview.preview_id, &preview.token).await?)?;
                }
                Ok(())
            }
            Accept { id, preview, token } => show(&c.accept(&id, &preview, &token).await?),
            Discard { id, preview } => show(&c.discard(&id, &preview).await?),
            Cancel { id } => show(&c.cancel(&id).await?),
            Finalize { id, goal, imagebc, stride } => {
                show(&c.finalize(&id, &goal, ExportRequest { peract: true, imagebc, stride }).await?)
            }
        }
    })
}

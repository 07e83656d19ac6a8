use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use pcan::harness::ablate::ablate_with_progress;
use pcan::harness::output::{find_scene, infer_scene, inspect_pam, write_eval_outputs, write_training_outputs};
use pcan::harness::{load_data, AblationAxis, Checkpoint, RunConfig};
use pcan::synthdata::grammar::token_id;
use pcan::synthdata::{generate_dataset, write_dataset, DatasetManifest, SceneRecord, Split};
use pcan::{PcanError, Result};

#[derive(Parser)]
#[command(name = "pcan", version, about = "Referring segmentation on synthetic shape scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; PCAN_* variables override its keys
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => RunConfig::from_toml_with_overrides("", std::env::vars()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset generation
    Synth {
        #[command(subcommand)]
        action: SynthCommand,
    },
    /// Train a model and write checkpoint, metrics, loss curve and overlays
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root; defaults to the checkpoint's data settings
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Run an ablation sweep
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        /// components, prior_type, k_boxes or g_groups
        #[arg(long)]
        axis: String,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Segment one scene with a trained checkpoint
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        scene_id: usize,
        /// Replace the scene's expression
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value = "runs/infer")]
        out: PathBuf,
    },
    /// Position-aware module tools
    Pam {
        #[command(subcommand)]
        action: PamCommand,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Write a dataset to disk
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Subcommand)]
enum PamCommand {
    /// Draw the contrastive groups built for one scene
    Inspect {
        #[arg(long)]
        scene_id: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "runs/pam")]
        out: PathBuf,
    },
}

fn all_scenes(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<SceneRecord>> {
    let mut cfg = cfg.clone();
    if let Some(d) = data {
        cfg.data.root = Some(d.to_path_buf());
    }
    let d = load_data(&cfg)?;
    Ok(d.train.into_iter().chain(d.val).collect())
}

fn tokenize(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|w| token_id(&w.to_lowercase()).ok_or_else(|| PcanError::Config(format!("word `{w}` is not in the vocabulary"))))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { action: SynthCommand::Generate { n, seed, out, config } } => {
            let cfg = config.load()?;
            let scenes = generate_dataset(n, seed, &cfg.data.scene)?;
            write_dataset(&out, &DatasetManifest { seed, n_scenes: n, config: cfg.data.scene.clone() }, &scenes)?;
            let val = scenes.iter().filter(|s| s.split == Split::Val).count();
            println!("wrote {} scenes ({} train, {val} val) to {}", n, n - val, out.display());
        }
        Command::Train { config, out } => {
            let cfg = config.load()?;
            let data = load_data(&cfg)?;
            info!("training on {} scenes, validating on {}", data.train.len(), data.val.len());
            let outcome = pcan::harness::train_with_progress(&cfg, &data, |r| {
                info!("epoch {} loss {:?} val oIoU {:.4} ({:.1}s)", r.epoch, r.train_loss, r.val.oiou, r.seconds)
            })?;
            write_training_outputs(&out, &cfg, &outcome, &data.val)?;
            println!("{}", std::fs::read_to_string(out.join("report.txt")).unwrap_or_default());
            if let Some(a) = outcome.aborted {
                return Err(PcanError::Config(format!("training aborted ({a}); last good checkpoint kept")));
            }
        }
        Command::Eval { checkpoint, data, split, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut cfg = ckpt.config.clone();
            if data.is_some() {
                cfg.data.root = data;
            }
            let d = load_data(&cfg)?;
            let scenes = match split.as_str() {
                "val" => d.val,
                "train" => d.train,
                other => return Err(PcanError::Config(format!("unknown split `{other}`"))),
            };
            let report = write_eval_outputs(&out, &ckpt, &scenes)?;
            println!("{}", report.to_table());
        }
        Command::Ablate { config, axis, out } => {
            let cfg = config.load()?;
            let axis: AblationAxis = axis.parse()?;
            let data = load_data(&cfg)?;
            let report = ablate_with_progress(&cfg, &data, axis, |r| info!("{}: oIoU {:.4}", r.label, r.report.oiou))?;
            std::fs::create_dir_all(&out).map_err(|e| PcanError::Io { path: out.clone(), source: e })?;
            let json = out.join(format!("ablation_{axis}.json"));
            std::fs::write(&json, report.to_json()?).map_err(|e| PcanError::Io { path: json, source: e })?;
            let txt = out.join("report.txt");
            std::fs::write(&txt, report.to_table()).map_err(|e| PcanError::Io { path: txt, source: e })?;
            println!("{}", report.to_table());
        }
        Command::Infer { checkpoint, data, scene_id, text, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let scenes = all_scenes(&ckpt.config, data.as_deref())?;
            let scene = find_scene(&scenes, scene_id)?;
            let tokens = text.as_deref().map(tokenize).transpose()?;
            let model = ckpt.inference_model()?;
            let (p, path) = infer_scene(&out, &model, scene, tokens.as_deref())?;
            let fg = p.mask.iter().filter(|&&m| m != 0).count();
            println!(
                "scene {scene_id}: query {} score {:.3} box {:?}, {fg} foreground pixels, overlay {}",
                p.query,
                p.score,
                p.bbox,
                path.display()
            );
        }
        Command::Pam { action: PamCommand::Inspect { scene_id, data, config, out } } => {
            let cfg = config.load()?;
            let scenes = all_scenes(&cfg, data.as_deref())?;
            let scene = find_scene(&scenes, scene_id)?;
            let (groups, path) = inspect_pam(&out, &cfg, scene)?;
            println!("\"{}\"", scene.text);
            for (g, grp) in groups.groups.iter().enumerate() {
                for s in grp {
                    let c = s.bbox.corners();
                    println!("group {g} {:?} conf {:.2} [{:.3} {:.3} {:.3} {:.3}]", s.label, s.confidence, c[0], c[1], c[2], c[3]);
                }
            }
            println!("overlay {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

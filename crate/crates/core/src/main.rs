use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deform_mvs::ablation::{ablation_csv, run_ablation, AblationAxis};
use deform_mvs::checkpoint::{load_checkpoint, save_checkpoint};
use deform_mvs::config::Config;
use deform_mvs::formats::{read_pfm, write_pfm};
use deform_mvs::fusion::{consistency_filter, write_ply, FusionParams, FusionView};
use deform_mvs::metrics::{evaluate, report_table};
use deform_mvs::model::{predict, ModelParams};
use deform_mvs::synth::{list_bundles, make_suite, Preset, SceneBundle};
use deform_mvs::training::{train, TrainState};
use deform_mvs::{MvsError, Result};

#[derive(Parser)]
#[command(name = "deform-mvs", version, about = "Cascade multi-view stereo with deformable sampling")]
struct Cli {
    /// key=value configuration file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set eta=2.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scene bundles.
    GenScenes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value = "clean")]
        preset: Preset,
        #[arg(long, default_value_t = 3, value_parser = parse_views)]
        views: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on every bundle under --data and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint; its configuration is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total epoch count (overrides the configuration).
        #[arg(long)]
        epochs: Option<usize>,
        /// Metrics log path; defaults to <out>.log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict depth and confidence for every view of every bundle.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted depth maps with ground truth and write a CSV report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse one scene's predicted depth maps into a PLY point cloud.
    Fuse {
        /// Scene bundle directory (images and cameras).
        #[arg(long)]
        scene: PathBuf,
        /// Directory holding depth_<i>.pfm for that scene.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        reproj_px_tol: f64,
        #[arg(long, default_value_t = 0.01)]
        depth_rel_tol: f64,
        #[arg(long, default_value_t = 2)]
        min_views: usize,
        /// Dedup voxel edge in metres (default: half the ground sampling distance; 0 disables).
        #[arg(long)]
        voxel: Option<f64>,
    },
    /// Train and evaluate the variants of one ablation axis.
    Ablate {
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn parse_views(s: &str) -> std::result::Result<usize, String> {
    match s {
        "3" => Ok(3),
        "5" => Ok(5),
        _ => Err(format!("views must be 3 or 5, got '{s}'")),
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::from_text(&fs::read_to_string(p).map_err(|e| MvsError::io(p, e))?)
            .map_err(|e| MvsError::Config(format!("{}: {e}", p.display())))?,
        None => Config::default(),
    };
    apply_overrides(&mut cfg, &cli.overrides)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut Config, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| MvsError::Config(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()
}

fn load_scenes(root: &Path) -> Result<Vec<(String, SceneBundle)>> {
    let dirs = list_bundles(root)?;
    if dirs.is_empty() {
        return Err(MvsError::invalid(format!("no scene bundles under {}", root.display())));
    }
    dirs.iter()
        .map(|d| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, SceneBundle::read(d)?))
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MvsError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| MvsError::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    if cli.print_config {
        print!("{}", load_config(&cli)?.to_text());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(MvsError::Config("no subcommand given (try --help)".into()));
    };
    match command {
        Command::GenScenes {
            out,
            n,
            preset,
            views,
            seed,
        } => {
            for (k, spec) in make_suite(*n, *preset, *seed, *views)?.iter().enumerate() {
                spec.render()?.write(&out.join(format!("scene_{k:03}")))?;
            }
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::Train {
            data,
            out,
            resume,
            epochs,
            log,
        } => {
            let (mut cfg, mut state) = match resume {
                Some(p) => {
                    let (mut cfg, state) = load_checkpoint(p)?;
                    apply_overrides(&mut cfg, &cli.overrides)?;
                    if cfg.model != state.params.config {
                        return Err(MvsError::Config("model settings cannot change when resuming".into()));
                    }
                    (cfg, state)
                }
                None => {
                    let cfg = load_config(&cli)?;
                    let state = TrainState::new(ModelParams::init(&cfg.model)?);
                    (cfg, state)
                }
            };
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let scenes: Vec<SceneBundle> = load_scenes(data)?.into_iter().map(|(_, s)| s).collect();
            let log_path = log.clone().unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log");
                PathBuf::from(p)
            });
            let mut buf = Vec::new();
            let result = train(&scenes, &cfg, &mut state, &mut Tee(&mut buf));
            let mut log_text = String::from_utf8_lossy(&buf).into_owned();
            if let Err(e) = &result {
                log_text.push_str(&format!("aborted: {e}\n"));
            }
            write_text(&log_path, &log_text)?;
            result?;
            save_checkpoint(out, &cfg, &state)?;
            println!("wrote checkpoint {} after {} epochs", out.display(), state.epoch);
        }
        Command::Predict { ckpt, data, out } => {
            let (_, state) = load_checkpoint(ckpt)?;
            for (name, scene) in load_scenes(data)? {
                let dir = out.join(&name);
                fs::create_dir_all(&dir).map_err(|e| MvsError::io(&dir, e))?;
                for v in 0..scene.n_views() {
                    let stages = predict(&state.params, &scene.view_set(v))?;
                    let last = &stages[2];
                    write_pfm(&dir.join(format!("depth_{v}.pfm")), &last.depth)?;
                    write_pfm(&dir.join(format!("conf_{v}.pfm")), &last.confidence())?;
                }
            }
            println!("wrote predictions to {}", out.display());
        }
        Command::Eval { data, pred, out } => {
            let mut reports = Vec::new();
            for (name, scene) in load_scenes(data)? {
                for v in 0..scene.n_views() {
                    let path = pred.join(&name).join(format!("depth_{v}.pfm"));
                    if !path.is_file() {
                        continue;
                    }
                    let p = read_pfm(&path)?;
                    let gt = &scene.depths[v];
                    let valid = gt.map(|d| if d.is_finite() && d > 0.0 { 1.0 } else { 0.0 });
                    reports.push((format!("{name}/{v}"), evaluate(&p, gt, &valid, scene.cams[v].depth_interval)?));
                }
            }
            if reports.is_empty() {
                return Err(MvsError::invalid(format!("no predictions found under {}", pred.display())));
            }
            let table = report_table(&reports)?;
            print!("{table}");
            if let Some(o) = out {
                write_text(o, &table)?;
            }
        }
        Command::Fuse {
            scene,
            pred,
            out,
            reproj_px_tol,
            depth_rel_tol,
            min_views,
            voxel,
        } => {
            let bundle = SceneBundle::read(scene)?;
            let views = (0..bundle.n_views())
                .map(|v| {
                    Ok(FusionView {
                        depth: read_pfm(&pred.join(format!("depth_{v}.pfm")))?,
                        cam: bundle.cams[v].clone(),
                        image: bundle.images[v].clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let params = FusionParams {
                reproj_px_tol: *reproj_px_tol,
                depth_rel_tol: *depth_rel_tol,
                min_views: *min_views,
                voxel: *voxel,
            };
            let cloud = consistency_filter(&views, &params)?;
            write_ply(&cloud, out)?;
            println!("wrote {} points to {}", cloud.len(), out.display());
        }
        Command::Ablate { axis, data, out, epochs } => {
            let mut cfg = load_config(&cli)?;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let scenes: Vec<SceneBundle> = load_scenes(data)?.into_iter().map(|(_, s)| s).collect();
            let rows = run_ablation(&scenes, &cfg, *axis, &mut std::io::stderr())?;
            let table = ablation_csv(&rows)?;
            print!("{table}");
            if let Some(o) = out {
                write_text(o, &table)?;
            }
        }
    }
    Ok(())
}

/// Copies writes to stdout as well as the inner buffer.
struct Tee<'a>(&'a mut Vec<u8>);

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write_all(buf)?;
        self.0.extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stdout().flush()
    }
}

fn exit_code(e: &MvsError) -> u8 {
    match e {
        MvsError::Config(_) => 2,
        MvsError::Numeric(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

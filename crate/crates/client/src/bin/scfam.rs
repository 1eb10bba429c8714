use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use base64::Engine;
use clap::{Parser, Subcommand};
use serde::Serialize;

use scfam_api::*;
use scfam_client::{Client, DEFAULT_SERVER, SERVER_ENV};
use scfam_core::divergence::DomainFeatureSet;
use scfam_core::rf::{FieldRect, StackConfig};
use scfam_core::scene::BoxAnnotation;
use scfam_core::synth::SynthConfig;

#[derive(Parser)]
#[command(name = "scfam", version, about = "Client for the scfam service")]
struct Cli {
    #[arg(long, env = SERVER_ENV, default_value = DEFAULT_SERVER, global = true)]
    server: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check the server is up.
    Health,
    /// Receptive fields of one layer of a stack.
    Rf {
        /// TOML file with `layers = [{ kernel, stride, padding }, ...]`.
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        layer: usize,
        /// Image size as HxW.
        #[arg(long, value_parser = parse_hw)]
        image: [usize; 2],
        /// Positions as u,v; all positions when omitted.
        #[arg(long = "pos", value_parser = parse_pair)]
        positions: Vec<[usize; 2]>,
    },
    /// Semantic label vector of one field, or label maps of a scene.
    Label {
        /// JSON array of boxes `{x0, y0, x1, y1, class}`.
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long, default_value_t = 3)]
        num_classes: usize,
        #[arg(long, default_value_t = 0.6)]
        zeta: f64,
        /// Field as x0,y0,x1,y1.
        #[arg(long, value_parser = parse_rect, conflicts_with = "stack")]
        field: Option<FieldRect>,
        /// Stack TOML with `taps`, for scene labeling.
        #[arg(long, requires = "image")]
        stack: Option<PathBuf>,
        #[arg(long, value_parser = parse_hw)]
        image: Option<[usize; 2]>,
    },
    /// Domain divergence of a JSONL feature set.
    Divergence {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum, default_value = "mch")]
        mode: Mode,
        /// Also write the per-subset table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate a synthetic two-domain dataset on the server.
    Synth {
        /// Directory relative to the server's output root.
        #[arg(long)]
        out: String,
        /// TOML synth config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one experiment.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Print the job id and return without waiting.
        #[arg(long)]
        no_wait: bool,
    },
    /// Train every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        no_wait: bool,
    },
    /// Merge metrics CSVs and draw loss and divergence curves.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Show a job.
    Job { id: u64 },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    Mch,
    Classwise,
    Pooled,
}

fn parse_hw(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    Ok([h.trim().parse().map_err(|e| format!("{e}"))?, w.trim().parse().map_err(|e| format!("{e}"))?])
}

fn parse_pair(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once(',').ok_or("expected u,v")?;
    Ok([a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?])
}

fn parse_rect(s: &str) -> Result<FieldRect, String> {
    let v: Vec<i64> = s.split(',').map(|p| p.trim().parse::<i64>().map_err(|e| format!("{e}"))).collect::<Result<_, _>>()?;
    match v[..] {
        [x0, y0, x1, y1] => Ok(FieldRect::new(x0, y0, x1, y1)),
        _ => Err("expected x0,y0,x1,y1".into()),
    }
}

fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn print<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

async fn follow(c: &Client, id: u64) -> Result<JobStatus> {
    let mut last = usize::MAX;
    let j = c
        .wait(id, Duration::from_secs(1), |j| {
            if j.done != last {
                last = j.done;
                eprintln!("job {id}: {}/{}", j.done, j.total);
            }
        })
        .await?;
    Ok(j)
}

async fn run(cli: Cli) -> Result<bool> {
    let c = Client::new(&cli.server);
    match cli.cmd {
        Cmd::Health => print(&c.health().await?)?,
        Cmd::Rf { stack, layer, image, positions } => {
            let stack: StackConfig = toml::from_str(&read(&stack)?)?;
            let req = RfRequest {
                layers: stack.layers,
                layer,
                image,
                positions: (!positions.is_empty()).then_some(positions),
            };
            print(&c.rf(&req).await?)?;
        }
        Cmd::Label { boxes, num_classes, zeta, field, stack, image } => {
            let boxes: Vec<BoxAnnotation> = serde_json::from_str(&read(&boxes)?)?;
            let scene = match (stack, image) {
                (Some(s), Some(image)) => {
                    let s: StackConfig = toml::from_str(&read(&s)?)?;
                    let taps = s.taps.context("stack file needs a `taps` table for scene labeling")?;
                    Some(SceneSpec { image, layers: s.layers, taps })
                }
                _ => None,
            };
            if field.is_none() && scene.is_none() {
                bail!("give --field, or --stack with --image");
            }
            print(&c.label(&LabelRequest { boxes, num_classes, zeta, field, scene }).await?)?;
        }
        Cmd::Divergence { features, mode, csv } => {
            let set = DomainFeatureSet::read_jsonl(&features)?;
            let mode = match mode {
                Mode::Mch => DivergenceMode::Mch,
                Mode::Classwise => DivergenceMode::Classwise,
                Mode::Pooled => DivergenceMode::Pooled,
            };
            let resp = c
                .divergence(&DivergenceRequest {
                    samples: set.samples,
                    mode,
                    trainer: Default::default(),
                })
                .await?;
            if let (Some(path), Some(table)) = (csv, &resp.csv) {
                std::fs::write(&path, table).with_context(|| format!("writing {}", path.display()))?;
            }
            print(&resp)?;
        }
        Cmd::Synth { out, config } => {
            let config: SynthConfig = match config {
                Some(p) => toml::from_str(&read(&p)?)?,
                None => SynthConfig::default(),
            };
            print(&c.synth(&SynthRequest { config, dir: out }).await?)?;
        }
        Cmd::Train { config, no_wait } => {
            let id = c.train(&TrainRequest { config_toml: read(&config)? }).await?.id;
            if no_wait {
                print(&JobAccepted { id })?;
                return Ok(true);
            }
            let j = follow(&c, id).await?;
            print(&j)?;
            return Ok(j.state == JobState::Succeeded);
        }
        Cmd::Ablate { config, grid, no_wait } => {
            let req = AblateRequest {
                config_toml: read(&config)?,
                grid_toml: read(&grid)?,
            };
            let id = c.ablate(&req).await?.id;
            if no_wait {
                print(&JobAccepted { id })?;
                return Ok(true);
            }
            let j = follow(&c, id).await?;
            if let Some(JobResult::Ablate(r)) = &j.result {
                print!("{}", r.table_csv);
                return Ok(r.all_ok);
            }
            print(&j)?;
            return Ok(false);
        }
        Cmd::Report { csv, out } => {
            let runs = csv
                .iter()
                .map(|p| {
                    Ok(NamedCsv {
                        name: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                        csv: read(p)?,
                    })
                })
                .collect::<Result<_>>()?;
            let r = c.report(&ReportRequest { runs }).await?;
            std::fs::create_dir_all(&out)?;
            let b64 = base64::engine::general_purpose::STANDARD;
            std::fs::write(out.join("metrics.csv"), &r.metrics_csv)?;
            std::fs::write(out.join("loss.png"), b64.decode(&r.loss_png)?)?;
            std::fs::write(out.join("divergence.png"), b64.decode(&r.divergence_png)?)?;
            println!("{}", out.display());
        }
        Cmd::Job { id } => {
            let j = c.job(id).await?;
            print(&j)?;
            return Ok(j.state != JobState::Failed);
        }
    }
    Ok(true)
}

#[tokio::main]
async fn main() -> ExitCode {
    match run(Cli::parse()).await {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

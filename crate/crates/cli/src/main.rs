mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use capsule_ldm::autoencoder::{images_to_tensor, train_autoencoder, AEConfig, AeTrainOptions};
use capsule_ldm::config::{load_config, ConfigError, LoadedConfig};
use capsule_ldm::datasets::{self, Layout, ToyRenderSpec};
use capsule_ldm::eval::{self, Aggregation};
use capsule_ldm::maskpipe::{self, FovSpec};
use capsule_ldm::sampler::{self, Generator, PrepOptions};
use capsule_ldm::trainer::{self, TrainLog};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::json;

use manifest::RunManifest;

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (",
    env!("CAPSULE_GIT_HASH"),
    ")"
);

#[derive(Parser)]
#[command(name = "capsule", version = LONG_VERSION, about = "Mask-conditioned latent diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert a color-coded mask to a label raster, blanking the corners.
    Maskprep(MaskprepArgs),
    /// Synthetic toy datasets.
    Toyset {
        #[command(subcommand)]
        cmd: ToysetCmd,
    },
    /// Standalone autoencoder training.
    Ae {
        #[command(subcommand)]
        cmd: AeCmd,
    },
    /// Config-driven training stages.
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// Generate images for one mask and a list of seeds.
    Sample(SampleArgs),
    /// Contact sheet: masks on top, one row per seed.
    Sheet(SheetArgs),
    /// Blinded real/fake rating sessions.
    Vtt {
        #[command(subcommand)]
        cmd: VttCmd,
    },
    /// Check a run config and print it with defaults filled in.
    ValidateConfig {
        /// Config file (TOML).
        path: PathBuf,
    },
}

#[derive(Args)]
struct MaskprepArgs {
    /// Color-coded (or label) mask image.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output label raster (PNG).
    #[arg(long)]
    out: PathBuf,
    /// Field of view as `cx,cy,r` in pixels; defaults to the inscribed circle.
    #[arg(long, value_parser = parse_fov)]
    fov: Option<FovSpec>,
    /// Also write y_d/y_c/y_f/y_a rasters into this directory.
    #[arg(long)]
    emit_bundle: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ToysetCmd {
    /// Render a paired toy dataset (images/, masks/, manifest.tsv).
    Make {
        /// Number of samples.
        #[arg(long, default_value_t = 2048)]
        n: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

#[derive(Subcommand)]
enum AeCmd {
    /// Train an autoencoder with the default architecture on a data folder.
    Train {
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Optimizer steps.
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Training seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Folder layout.
        #[arg(long, value_enum, default_value = "paired")]
        layout: LayoutArg,
        /// Resize images to this square side.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Batch size.
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Adam learning rate.
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum LayoutArg {
    Paired,
    Kvasir,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Paired => Layout::Paired,
            LayoutArg::Kvasir => Layout::Kvasir,
        }
    }
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Train the autoencoder stage of a config.
    Ae {
        /// Config file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint [default: ae.ckpt next to the config].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the latent diffusion stage on top of a trained autoencoder.
    Ldm {
        /// Config file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Autoencoder checkpoint from `train ae`.
        #[arg(long)]
        ae: PathBuf,
        /// Run directory [default: ldm/ next to the config].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this LDM checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SamplerArgs {
    /// LDM checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Autoencoder checkpoint.
    #[arg(long)]
    ae: PathBuf,
    /// Reverse steps (respaced); defaults to the trained T.
    #[arg(long)]
    steps: Option<usize>,
    /// Field of view as `cx,cy,r`; defaults to the inscribed circle.
    #[arg(long, value_parser = parse_fov)]
    fov: Option<FovSpec>,
    /// Fail instead of resampling masks of another size.
    #[arg(long)]
    no_resample: bool,
}

impl SamplerArgs {
    fn prep(&self) -> PrepOptions {
        PrepOptions {
            fov: self.fov,
            resample: !self.no_resample,
        }
    }

    fn manifest(&self, seeds: Vec<u64>) -> anyhow::Result<RunManifest> {
        RunManifest::new(seeds).input(&self.ckpt)?.input(&self.ae)
    }
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    model: SamplerArgs,
    /// Semantic mask (color-coded or label PNG).
    #[arg(long)]
    mask: PathBuf,
    /// Seeds: `1..6` (inclusive), `3,7,7` or a single value.
    #[arg(long, value_parser = parse_seeds, default_value = "1..6")]
    seeds: SeedList,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SheetArgs {
    #[command(flatten)]
    model: SamplerArgs,
    /// Comma-separated mask files, one column each.
    #[arg(long, value_delimiter = ',', required = true)]
    masks: Vec<PathBuf>,
    /// Rows of samples (seeds 1..=n).
    #[arg(long, default_value_t = 6)]
    n_seeds: usize,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum VttCmd {
    /// Draw and shuffle images into a rater sheet plus a separate key.
    Build {
        /// Folder of real images.
        #[arg(long)]
        real: PathBuf,
        /// Folder of generated images.
        #[arg(long)]
        fake: PathBuf,
        /// Items per kind (real and fake).
        #[arg(long, default_value_t = 80)]
        n: usize,
        /// Real items [default: --n].
        #[arg(long)]
        n_real: Option<usize>,
        /// Fake items [default: --n].
        #[arg(long)]
        n_fake: Option<usize>,
        /// Shuffle seed.
        #[arg(long, default_value_t = 3)]
        seed: u64,
        /// Session directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a response file against a session key.
    Score {
        /// Session directory from `vtt build`.
        #[arg(long)]
        session: PathBuf,
        /// Tab-separated rater_id, item_id, answer (real|fake).
        #[arg(long)]
        answers: PathBuf,
        /// Pool all answers instead of averaging per rater.
        #[arg(long)]
        pooled: bool,
        /// Tabular report path [default: <session>/score.tsv].
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
}

#[derive(Clone, Debug)]
struct SeedList(Vec<u64>);

fn parse_seeds(s: &str) -> Result<SeedList, String> {
    let bad = |p: &str| format!("invalid seed {p:?}");
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad(part))?;
            let b: u64 = b
                .trim()
                .trim_start_matches('=')
                .parse()
                .map_err(|_| bad(part))?;
            if b < a {
                return Err(format!("empty seed range {part:?}"));
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad(part))?);
        }
    }
    Ok(SeedList(out))
}

fn parse_fov(s: &str) -> Result<FovSpec, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected cx,cy,r numbers, got {s:?}"))?;
    match v[..] {
        [center_x, center_y, radius] => Ok(FovSpec {
            center_x,
            center_y,
            radius,
        }),
        _ => Err(format!("expected three values cx,cy,r, got {}", v.len())),
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load(path: &Path) -> anyhow::Result<LoadedConfig> {
    load_config(path).with_context(|| format!("config {}", path.display()))
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Maskprep(a) => {
            let map = maskpipe::load_any_mask(&a.input)?;
            let fov = a
                .fov
                .unwrap_or_else(|| FovSpec::inscribed(map.width(), map.height()));
            fov.validate(map.width(), map.height())?;
            let map = maskpipe::reassign_corners(&map, &fov);
            maskpipe::save_label_mask(&map, &a.out)?;
            if let Some(dir) = &a.emit_bundle {
                maskpipe::split_channels(&map).save_dir(dir)?;
            }
            let h = map.histogram();
            println!(
                "blank\tclean\tdark\tfloats\n{}\t{}\t{}\t{}",
                h[0], h[1], h[2], h[3]
            );
        }
        Cmd::Toyset {
            cmd: ToysetCmd::Make { n, out, seed, size },
        } => {
            let m = datasets::make_toy_dataset(n, &out, &ToyRenderSpec::default(), seed, size)?;
            println!("wrote {} samples to {}", m.entries.len(), out.display());
        }
        Cmd::Ae {
            cmd:
                AeCmd::Train {
                    data,
                    out,
                    steps,
                    seed,
                    layout,
                    size,
                    batch_size,
                    lr,
                },
        } => {
            let samples = datasets::load_folder_resized(&data, layout.into(), Some(size))?;
            let images = images_to_tensor(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
            let cfg = AEConfig::default();
            let opts = AeTrainOptions {
                steps,
                batch_size,
                learning_rate: lr,
                seed,
                ..Default::default()
            };
            let log_path = sibling(&out, "train_log.tsv");
            let mut log = TrainLog::create(&log_path, true, false)?;
            let mut io_err = None;
            let ae = train_autoencoder(&images, &cfg, &opts, |step, loss| {
                if let Err(e) = log.record(step, loss) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            let ds_hash = trainer::dataset_hash(&samples);
            ae.to_archive(json!({ "dataset_hash": ds_hash, "image_size": size }))
                .save(&out)?;
            let mut m = RunManifest::new(vec![seed]);
            m.dataset_hash = Some(ds_hash);
            m.write(&sibling(&out, manifest::FILE_NAME))?;
        }
        Cmd::Train {
            cmd: TrainCmd::Ae { config, out },
        } => {
            let lc = load(&config)?;
            let out = out.unwrap_or_else(|| config_dir(&config).join("ae.ckpt"));
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let mut log = TrainLog::create(&sibling(&out, "ae_train_log.tsv"), true, false)?;
            trainer::train_ae_stage(&lc.config, &lc.text, &out, Some(&mut log))?;
            let mut m = RunManifest::new(vec![lc.config.seed]).input(&config)?;
            m.config_hash = Some(trainer::config_hash(&lc.text));
            m.dataset_hash = Some(trainer::dataset_hash(&trainer::load_dataset(&lc.config)?));
            m.write(&sibling(&out, "ae_run_manifest.json"))?;
        }
        Cmd::Train {
            cmd:
                TrainCmd::Ldm {
                    config,
                    ae,
                    out,
                    resume,
                },
        } => {
            let lc = load(&config)?;
            let out = out.unwrap_or_else(|| config_dir(&config).join("ldm"));
            let state =
                trainer::train_ldm_stage(&lc.config, &lc.text, &ae, &out, resume.as_deref(), true)?;
            let mut m = RunManifest::new(vec![lc.config.seed])
                .input(&config)?
                .input(&ae)?;
            m.config_hash = Some(trainer::config_hash(&lc.text));
            m.dataset_hash = Some(trainer::dataset_hash(&trainer::load_dataset(&lc.config)?));
            m.write(&out.join(manifest::FILE_NAME))?;
            eprintln!("trained to step {} → {}", state.step, out.display());
        }
        Cmd::Sample(a) => {
            let seeds = a.seeds.0;
            let gen = Generator::load(&a.model.ckpt, &a.model.ae, a.model.steps)?;
            let done = sampler::generate(&gen, &a.mask, &seeds, &a.out, &a.model.prep())?;
            a.model
                .manifest(seeds)?
                .input(&a.mask)?
                .write(&a.out.join(manifest::FILE_NAME))?;
            for p in &done.images {
                println!("{}", p.display());
            }
            println!("{}", done.grid.display());
        }
        Cmd::Sheet(a) => {
            let gen = Generator::load(&a.model.ckpt, &a.model.ae, a.model.steps)?;
            let masks: Vec<PathBuf> = a
                .masks
                .iter()
                .filter(|p| !p.as_os_str().is_empty())
                .cloned()
                .collect();
            let g = sampler::make_sheet(&gen, &masks, a.n_seeds, &a.out, &a.model.prep())?;
            let mut m = a.model.manifest((1..=a.n_seeds as u64).collect())?;
            for p in &masks {
                m = m.input(p)?;
            }
            m.write(&sibling(
                &a.out,
                &format!("{}.manifest.json", file_stem(&a.out)),
            ))?;
            println!("{} ({} columns × {} rows)", a.out.display(), g.cols, g.rows);
        }
        Cmd::Vtt {
            cmd:
                VttCmd::Build {
                    real,
                    fake,
                    n,
                    n_real,
                    n_fake,
                    seed,
                    out,
                },
        } => {
            let s = eval::vtt_build(
                &real,
                &fake,
                n_real.unwrap_or(n),
                n_fake.unwrap_or(n),
                seed,
                &out,
            )?;
            println!(
                "{} items in {}; hand raters {} only",
                s.items.len(),
                out.display(),
                out.join(eval::SHEET_DIR).display()
            );
        }
        Cmd::Vtt {
            cmd:
                VttCmd::Score {
                    session,
                    answers,
                    pooled,
                    tsv,
                },
        } => {
            let mut s = eval::load_session(&session)?;
            let text = std::fs::read_to_string(&answers)
                .with_context(|| format!("reading {}", answers.display()))?;
            s.add_responses(eval::parse_responses(&text)?)?;
            let agg = if pooled {
                Aggregation::Pooled
            } else {
                Aggregation::RaterMean
            };
            let score = eval::vtt_score(&s, agg)?;
            print!("{}", score.to_text());
            let tsv = tsv.unwrap_or_else(|| session.join("score.tsv"));
            std::fs::write(&tsv, score.to_tsv())
                .with_context(|| format!("writing {}", tsv.display()))?;
        }
        Cmd::ValidateConfig { path } => match load_config(&path) {
            Ok(lc) => print!("{}", lc.config.to_toml()),
            Err(ConfigError::Invalid(v)) => {
                for line in &v {
                    eprintln!("{line}");
                }
                bail!("{} config violation(s) in {}", v.len(), path.display());
            }
            Err(e) => return Err(e.into()),
        },
    }
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent()
        .map(|d| d.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Cmd::Sheet(a) = &cli.cmd {
        if a.masks.iter().all(|p| p.as_os_str().is_empty()) {
            Cli::command()
                .error(
                    ErrorKind::ValueValidation,
                    "--masks needs at least one mask file",
                )
                .exit();
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! `matx`: project material maps into a tileable generator, transfer
//! appearance from photos, render previews and check tileability.
//!
//! Exit codes: 0 ok, 1 check failed, 2 bad input, 3 optimization failure.
//! `MATX_THREADS` is read and validated, but every run is single-threaded so
//! that fixed seeds reproduce outputs byte for byte.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use matx_core::engine::{
    per_pixel_transfer, Engine, OptimSettings, PriorMode, Target, TransferRule,
};
use matx_core::featnet::FeatureExtractor;
use matx_core::prior::{seam_scores, GeneratorWeights, LatentTheta};
use matx_core::render::{render, tile_render, RenderConfig};
use matx_core::statloss::LossKind;
use matx_core::{Extractor32, Generator32, Latent32};

use matx_cli::io::{self, BitDepth};
use matx_cli::{demo, CliError, EXTRACTOR_SEED};

#[derive(Parser)]
#[command(
    name = "matx",
    version,
    about = "Appearance transfer for tileable SVBRDF material maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON settings file with `settings` and `extractor` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extractor weight file; defaults to the built-in seeded filters.
    #[arg(long)]
    extractor: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a latent code to a material pack.
    Project {
        #[arg(long)]
        pack: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Transfer appearance from target photos onto a projected material.
    Transfer {
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        pack: PathBuf,
        /// Input label map; defaults to label 0 everywhere.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// `IMG[:LABELS]`, repeatable.
        #[arg(long, required = true)]
        target: Vec<String>,
        /// `IN:TI:TL`, repeatable; defaults to `0:0:0`.
        #[arg(long)]
        rule: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss: Option<LossKind>,
        /// Optimize the map pixels directly instead of the latent code.
        #[arg(long)]
        per_pixel: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Render a pack under the co-located light.
    Render {
        #[arg(long)]
        pack: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        tile: usize,
        #[arg(long)]
        light_height: Option<f64>,
        #[arg(long)]
        intensity: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Report seam scores; exit 1 if any map shows a seam.
    CheckTileable {
        #[arg(long)]
        pack: PathBuf,
    },
    /// Write procedural packs, targets, labels and a generator.
    MakeDemo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    settings: OptimSettings,
    extractor: Option<PathBuf>,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile, CliError> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

struct Setup {
    settings: OptimSettings,
    extractor: Extractor32,
}

fn setup(common: &Common) -> Result<Setup, CliError> {
    let cfg = read_config(common.config.as_deref())?;
    let mut settings = cfg.settings;
    if let Some(seed) = common.seed {
        settings.seed = seed;
    }
    settings.validate()?;
    let extractor = match common.extractor.as_ref().or(cfg.extractor.as_ref()) {
        Some(p) => FeatureExtractor::load_weights(p)
            .map_err(|e| CliError::input(format!("{}: {e}", p.display())))?,
        None => FeatureExtractor::init_random(EXTRACTOR_SEED),
    };
    Ok(Setup {
        settings,
        extractor,
    })
}

fn load_generator(path: &Path) -> Result<Generator32, CliError> {
    GeneratorWeights::load(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("MATX_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::input(format!(
                "MATX_THREADS must be a positive integer, got '{v}'"
            ))),
        },
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    threads()?;
    match cli.command {
        Command::Project {
            pack,
            generator,
            out,
            common,
        } => {
            let s = setup(&common)?;
            let pack = io::load_pack(&pack)?;
            let gen = load_generator(&generator)?;
            let engine = Engine::new(&s.extractor, &gen, &s.settings);
            let p = engine.project(&pack.maps, None)?;
            p.theta.save(&out)?;
            write_text(&out.with_extension("json"), &p.report.to_json())?;
            if let Some(w) = p.weights {
                let path = out.with_extension("generator.bin");
                w.save(&path)?;
                println!("fitted generator: {}", path.display());
            }
            println!(
                "projected in {} iterations, best loss {:.6} at {}",
                p.report.iterations, p.report.best_loss, p.report.best_iteration
            );
            Ok(0)
        }
        Command::Transfer {
            theta,
            generator,
            pack,
            labels,
            target,
            rule,
            out,
            loss,
            per_pixel,
            common,
        } => {
            let mut s = setup(&common)?;
            if let Some(l) = loss {
                s.settings.loss = l;
            }
            if s.settings.prior == PriorMode::Dip {
                return Err(CliError::input(
                    "transfer keeps the generator fixed; dip mode applies to project",
                ));
            }
            let pack_data = io::load_pack(&pack)?;
            let size = pack_data.maps.size();
            let labels = labels.as_deref().map(io::load_labels).transpose()?;
            let mut targets = Vec::with_capacity(target.len());
            for spec in &target {
                let (img, lab) = io::split_target(spec);
                let image = io::load_rgb(&img)?;
                let lab = lab.as_deref().map(io::load_labels).transpose()?;
                let (image, lab) = io::prepare_target(image, lab, size)?;
                targets.push(Target::new(image, lab));
            }
            let rules = if rule.is_empty() {
                vec![TransferRule::new(0, 0, 0)]
            } else {
                rule.iter()
                    .map(|r| r.parse())
                    .collect::<Result<Vec<_>, _>>()?
            };
            let result = if per_pixel {
                per_pixel_transfer(
                    &s.extractor,
                    &pack_data.maps,
                    labels.as_ref(),
                    &targets,
                    &rules,
                    &s.settings,
                )?
            } else {
                let gen = load_generator(&generator)?;
                let theta: Latent32 = LatentTheta::load(&theta)
                    .map_err(|e| CliError::input(format!("{}: {e}", theta.display())))?;
                Engine::new(&s.extractor, &gen, &s.settings).transfer(
                    &theta,
                    &pack_data.maps,
                    labels.as_ref(),
                    &targets,
                    &rules,
                )?
            };
            io::save_pack(&result.maps, pack_data.depth, &out)?;
            let cfg = s.settings.render;
            io::save_image(
                &render(&result.maps, &cfg)?,
                BitDepth::Eight,
                &out.join("render.png"),
            )?;
            io::save_image(
                &tile_render(&result.maps, &cfg, 2)?,
                BitDepth::Eight,
                &out.join("tiled2x2.png"),
            )?;
            if let Some(t) = &result.theta {
                t.save(&out.join("theta.bin"))?;
            }
            write_text(&out.join("report.json"), &result.report.to_json())?;
            let style = &result.report.losses.style;
            println!(
                "transferred in {} iterations, style loss {:.6} -> {:.6}",
                result.report.iterations,
                style.first().copied().unwrap_or(f64::NAN),
                style.last().copied().unwrap_or(f64::NAN)
            );
            Ok(0)
        }
        Command::Render {
            pack,
            out,
            tile,
            light_height,
            intensity,
            gamma,
        } => {
            let pack = io::load_pack(&pack)?;
            let mut cfg = RenderConfig::default();
            cfg.light_height = light_height.unwrap_or(cfg.light_height);
            cfg.light_intensity = intensity.unwrap_or(cfg.light_intensity);
            cfg.gamma = gamma.unwrap_or(cfg.gamma);
            cfg.validate()?;
            if tile == 0 {
                return Err(CliError::input("--tile must be at least 1"));
            }
            let img = tile_render(&pack.maps, &cfg, tile)?;
            io::save_image(&img, BitDepth::Eight, &out)?;
            Ok(0)
        }
        Command::CheckTileable { pack } => {
            let pack = io::load_pack(&pack)?;
            let m = &pack.maps;
            let mut worst = f64::NEG_INFINITY;
            for (name, t) in [
                ("albedo", &m.albedo),
                ("normal", &m.normal),
                ("roughness", &m.roughness),
                ("specular", &m.specular),
            ] {
                let score = seam_scores(t).into_iter().fold(f64::NEG_INFINITY, f64::max);
                worst = worst.max(score);
                println!(
                    "{name:<10} {score:+.6} {}",
                    if score <= 0.0 { "ok" } else { "SEAM" }
                );
            }
            Ok(if worst <= 0.0 { 0 } else { 1 })
        }
        Command::MakeDemo { out, seed, size } => {
            if size < 8 || !size.is_power_of_two() {
                return Err(CliError::input(format!(
                    "--size {size} must be a power of two of at least 8"
                )));
            }
            for p in demo::write_demo(&out, seed, size)? {
                println!("{p}");
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

//! `featsplat` command-line front end.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use featsplat::checkpoint::Checkpoint;
use featsplat::config::Config;
use featsplat::dataset::{load_dataset, Dataset};
use featsplat::fixture::make_synthetic_scene;
use featsplat::image::ImageBuffer;
use featsplat::metrics::{psnr, ssim};
use featsplat::optim::OptimState;
use featsplat::pipeline::{init_model, render_view, train_settings};
use featsplat::scene::Tier;
use featsplat::train::{train_stage1, train_stage2, SplitEvent};

#[derive(Parser)]
#[command(name = "featsplat", version, about = "Feature Gaussian splatting with coarse-to-fine super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to read (or, for train-coarse, to write).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 runs single-threaded and deterministic.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train the coarse model on LR views.
    TrainCoarse(Common),
    /// Refine a coarse checkpoint at HR with selective splitting.
    TrainFine(Common),
    /// Render every view of the dataset.
    Render {
        #[command(flatten)]
        common: Common,
        /// Resolution multiplier; defaults to the dataset's SR factor.
        #[arg(long)]
        scale: Option<usize>,
    },
    /// PSNR/SSIM of the held-out views.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Compare PNGs in this directory (named like the views) instead of
        /// rendering the checkpoint.
        #[arg(long)]
        renders: Option<PathBuf>,
    },
    /// Report densification events and tier counts.
    SplitStats(Common),
    /// Write the synthetic fixture scene.
    MakeFixture(Common),
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::TrainCoarse(c) | Command::TrainFine(c) | Command::SplitStats(c) | Command::MakeFixture(c) => c,
        Command::Render { common, .. } | Command::Eval { common, .. } => common,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads.max(1))
        .build_global()
        .context("configuring the thread pool")?;
    match &cli.command {
        Command::TrainCoarse(c) => train_coarse(c),
        Command::TrainFine(c) => train_fine(c),
        Command::Render { common, scale } => render(common, *scale),
        Command::Eval { common, renders } => eval(common, renders.as_deref()),
        Command::SplitStats(c) => split_stats(c),
        Command::MakeFixture(c) => make_fixture(c),
    }
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_data(cfg: &Config) -> Result<Dataset> {
    let Some(m) = &cfg.manifest else {
        bail!("the config does not name a dataset manifest");
    };
    load_dataset(m).with_context(|| format!("loading dataset {}", m.display()))
}

fn need_checkpoint(c: &Common) -> Result<&Path> {
    c.checkpoint.as_deref().context("--checkpoint is required")
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn losses_json(losses: &[f64]) -> Vec<Value> {
    losses
        .iter()
        .enumerate()
        .map(|(i, l)| json!({"iteration": i + 1, "loss": l}))
        .collect()
}

fn train_coarse(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = load_data(&cfg)?;
    std::fs::create_dir_all(&c.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(&cfg, &mut rng)?;
    let mut optim = OptimState::new(&model);
    let views = data.train_views();
    let settings = train_settings(&cfg, &data);
    info!("stage 1: {} views, {} Gaussians, {} iterations", views.len(), model.gaussians.len(), cfg.stage1.iterations);
    let out = train_stage1(&mut model, &mut optim, &views, &cfg.stage1_plan(), &settings, &mut rng)?;
    let path = c.checkpoint.clone().unwrap_or_else(|| c.out.join("coarse.sgs"));
    Checkpoint {
        model,
        optim,
        iteration: out.losses.len() as u64,
        config_echo: cfg.to_toml(),
    }
    .save(&path)?;
    write_jsonl(&c.out.join("coarse_loss.jsonl"), losses_json(&out.losses))?;
    write_jsonl(&c.out.join("coarse_events.jsonl"), &out.events)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn train_fine(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = load_data(&cfg)?;
    std::fs::create_dir_all(&c.out)?;
    let ck = Checkpoint::load(need_checkpoint(c)?)?;
    let mut model = ck.model;
    let mut optim = if cfg.stage2.reset_optimizer {
        OptimState::new(&model)
    } else {
        ck.optim
    };
    // Decorrelate from the coarse stage's stream under the same seed.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f1ae);
    let views = data.train_views();
    let settings = train_settings(&cfg, &data);
    info!("stage 2: x{} on {} views, {} iterations", data.sr_factor, views.len(), cfg.stage2.iterations);
    let out = train_stage2(&mut model, &mut optim, &views, &cfg.stage2_plan(), &settings, &mut rng)?;
    let path = c.out.join("fine.sgs");
    Checkpoint {
        model,
        optim,
        iteration: ck.iteration + out.losses.len() as u64,
        config_echo: cfg.to_toml(),
    }
    .save(&path)?;
    write_jsonl(&c.out.join("fine_loss.jsonl"), losses_json(&out.losses))?;
    write_jsonl(&c.out.join("split_stats.jsonl"), &out.events)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn render(c: &Common, scale: Option<usize>) -> Result<()> {
    let cfg = load_config(c)?;
    let data = load_data(&cfg)?;
    let ck = Checkpoint::load(need_checkpoint(c)?)?;
    let scale = scale.unwrap_or(data.sr_factor);
    std::fs::create_dir_all(&c.out)?;
    for v in &data.views {
        let img = render_view(&ck.model, &v.camera, scale)?;
        img.save_png(&c.out.join(format!("{}.png", v.name)))?;
    }
    info!("rendered {} views at x{scale}", data.views.len());
    Ok(())
}

fn finite_or_tag(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!("inf")
    }
}

fn eval(c: &Common, renders: Option<&Path>) -> Result<()> {
    let cfg = load_config(c)?;
    let data = load_data(&cfg)?;
    let model = match renders {
        Some(_) => None,
        None => Some(Checkpoint::load(need_checkpoint(c)?)?.model),
    };
    std::fs::create_dir_all(&c.out)?;
    let mut rows = Vec::new();
    let (mut sum_psnr, mut sum_ssim) = (0.0, 0.0);
    let test = data.test_indices();
    for &i in &test {
        let v = &data.views[i];
        let (gt, scale) = match &v.hr {
            Some(hr) => (hr, data.sr_factor),
            None => (&v.lr, 1),
        };
        let img = match (&model, renders) {
            (Some(m), _) => render_view(m, &v.camera, scale)?,
            (None, Some(dir)) => ImageBuffer::load_png(&dir.join(format!("{}.png", v.name)))?,
            (None, None) => unreachable!(),
        };
        let p = psnr(&img, gt)?;
        let s = ssim(&img, gt)?;
        sum_psnr += p;
        sum_ssim += s;
        rows.push(json!({"view": v.name, "scale": scale, "psnr": finite_or_tag(p), "ssim": s}));
    }
    let n = test.len().max(1) as f64;
    rows.push(json!({"view": "mean", "psnr": finite_or_tag(sum_psnr / n), "ssim": sum_ssim / n}));
    for r in &rows {
        println!("{r}");
    }
    write_jsonl(&c.out.join("metrics.jsonl"), &rows)?;
    Ok(())
}

fn split_stats(c: &Common) -> Result<()> {
    let events_path = c.out.join("split_stats.jsonl");
    if events_path.exists() {
        for line in std::fs::read_to_string(&events_path)?.lines() {
            let e: SplitEvent = serde_json::from_str(line)
                .with_context(|| format!("parsing {}", events_path.display()))?;
            println!("{}", serde_json::to_string(&e)?);
        }
    }
    if let Some(p) = &c.checkpoint {
        let g = Checkpoint::load(p)?.model.gaussians;
        println!(
            "{}",
            json!({"checkpoint": p.display().to_string(), "coarse": g.count_tier(Tier::Coarse), "fine": g.count_tier(Tier::Fine), "total": g.len()})
        );
    }
    Ok(())
}

fn make_fixture(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let fixture = make_synthetic_scene(cfg.seed, &cfg.fixture)?;
    fixture.write(&c.out)?;
    info!(
        "fixture with {} Gaussians and {} views written to {}",
        fixture.gaussians.len(),
        fixture.cameras.len(),
        c.out.display()
    );
    Ok(())
}

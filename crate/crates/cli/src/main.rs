use std::fs;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use segrefine_core::io::{read_binary_mask, read_image, read_soft_mask, write_binary_png};
use segrefine_core::pipeline::{prepare, run_prepared, summarize};
use segrefine_core::rng::derive;
use segrefine_core::segmentor::bridge::serve_echo;
use segrefine_core::synth::{list_items, load_item, severity_tag, write_dataset, Skip};
use segrefine_core::{
    dice, run_sweep, severity_for_regime, Backend, BridgeSegmentor, NegativeStrategy, Oracle,
    PhantomConfig, PromptableSegmentor, RefinementConfig,
};

#[derive(Parser)]
#[command(
    name = "segrefine",
    version,
    about = "Refine coarse segmentation masks with optimized point prompts"
)]
struct Cli {
    /// JSON file with refinement settings; missing fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed.
    #[arg(long, global = true, env = "SEGREFINE_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
    },
    /// Refine one coarse mask.
    Refine {
        #[arg(long)]
        image: PathBuf,
        /// Soft coarse mask (.srf or .png).
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        tendon: PathBuf,
        /// Ground-truth pathology mask; adds Dice scores to the report.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate strategies across simulated data regimes.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated training-set percentages; may be empty.
        #[arg(long, default_value = "100,35,15,8,5")]
        regimes: String,
        #[arg(long, default_value = "optimized,random,none")]
        strategies: String,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the echo bridge protocol on stdin/stdout.
    #[command(hide = true)]
    EchoBridge,
}

#[derive(Args)]
struct RunArgs {
    /// `oracle` or `bridge:ADDR` (ADDR is host:port or `stdio:CMD ARGS`).
    #[arg(long)]
    backend: Option<Backend>,
    #[arg(long)]
    strategy: Option<NegativeStrategy>,
    #[arg(long)]
    n_init: Option<usize>,
}

impl RunArgs {
    fn apply(&self, cfg: &mut RefinementConfig) {
        if let Some(b) = &self.backend {
            cfg.backend = b.clone();
        }
        if let Some(s) = self.strategy {
            cfg.negative_strategy = s;
        }
        if let Some(n) = self.n_init {
            cfg.n_init = n;
        }
    }
}

fn load_config(cli: &Cli) -> Result<RefinementConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RefinementConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn segmentor(cfg: &RefinementConfig) -> Result<Box<dyn PromptableSegmentor<f64>>> {
    Ok(match &cfg.backend {
        Backend::Oracle => Box::new(Oracle::new(cfg.oracle).map_err(anyhow::Error::msg)?),
        Backend::Bridge(addr) => Box::new(
            BridgeSegmentor::connect(addr)
                .with_context(|| format!("connecting to bridge {addr}"))?,
        ),
    })
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad {what} '{p}': {e}"))
        })
        .collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn generate(out: &Path, count: usize, width: usize, height: usize, seed: u64) -> Result<()> {
    let template = PhantomConfig {
        width,
        height,
        ..PhantomConfig::default()
    };
    let m = write_dataset(out, count, seed, &template)?;
    println!("wrote {} phantoms to {}", m.images.len(), out.display());
    Ok(())
}

fn refine(
    cfg: &RefinementConfig,
    image: &Path,
    coarse: &Path,
    tendon: &Path,
    gt: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let img = read_image::<f64>(image)?;
    let coarse = read_soft_mask::<f64>(coarse)?;
    let tendon = read_binary_mask(tendon)?;
    let gt = gt.map(read_binary_mask).transpose()?;
    let seg = segmentor(cfg)?;
    let prep = prepare(&coarse, &tendon, cfg)?;
    fs::create_dir_all(out)?;

    let mut runs = Vec::new();
    let mut scores = Vec::new();
    for i in 0..cfg.n_init as u64 {
        let seed = derive(cfg.seed, i);
        let res = run_prepared(&img, &prep, seg.as_ref(), cfg, seed)?;
        write_binary_png(&out.join(format!("refined_{i}.png")), &res.mask)?;
        let score = gt.as_ref().map(|g| dice::<f64>(&res.mask, g)).transpose()?;
        scores.extend(score);
        runs.push(json!({
            "init": i,
            "seed": seed,
            "status": res.status,
            "chosen_k": res.chosen_k,
            "steps": res.steps,
            "converged": res.converged,
            "warnings": res.warnings,
            "prompts": res.prompts.to_records(),
            "dice": score,
        }));
    }
    let summary = match &gt {
        Some(g) if !scores.is_empty() => {
            let (mean, std, max) = summarize(&scores);
            json!({
                "coarse_dice": dice::<f64>(&prep.coarse_mask, g)?,
                "mean_dice": mean,
                "std_dice": std,
                "max_dice": max,
            })
        }
        _ => serde_json::Value::Null,
    };
    let report = json!({
        "backend": seg.name(),
        "config": cfg,
        "runs": runs,
        "summary": summary,
    });
    write_json(&out.join("report.json"), &report)?;
    if let Some(m) = summary.get("mean_dice") {
        println!(
            "mean dice {:.4} over {} inits",
            m.as_f64().unwrap_or(f64::NAN),
            cfg.n_init
        );
    }
    println!(
        "wrote {} masks and report.json to {}",
        cfg.n_init,
        out.display()
    );
    Ok(())
}

fn sweep(
    cfg: &RefinementConfig,
    data: &Path,
    regimes: &str,
    strategies: &str,
    out: &Path,
) -> Result<()> {
    let regimes: Vec<u32> = parse_list(regimes, "regime")?;
    let strategies: Vec<NegativeStrategy> = parse_list(strategies, "strategy")?;
    if strategies.is_empty() {
        bail!("at least one strategy is required");
    }
    let severities = regimes
        .iter()
        .map(|&r| severity_for_regime(r))
        .collect::<Result<Vec<_>, _>>()?;
    let seg = segmentor(cfg)?;

    let mut items = Vec::new();
    let mut load_skips = Vec::new();
    if !regimes.is_empty() {
        for (id, dir) in list_items(data).with_context(|| format!("listing {}", data.display()))? {
            // load what exists; a missing coarse mask becomes a per-regime skip in the sweep
            let present: Vec<f64> = severities
                .iter()
                .copied()
                .filter(|&s| {
                    dir.join(format!("coarse_s{}.srf", severity_tag(s)))
                        .exists()
                })
                .collect();
            match load_item::<f64>(&id, &dir, &present) {
                Ok(item) => items.push(item),
                Err(e) => load_skips.push(Skip {
                    item: id,
                    reason: e.to_string(),
                }),
            }
        }
    }
    let mut report = run_sweep(&items, &regimes, &strategies, seg.as_ref(), cfg)?;
    load_skips.append(&mut report.skips);
    report.skips = load_skips;

    fs::create_dir_all(out)?;
    fs::write(out.join("sweep.csv"), report.to_csv())?;
    write_json(&out.join("sweep.json"), &serde_json::to_value(&report)?)?;
    for a in &report.aggregates {
        println!(
            "regime {:>3}% {:<9} images {:>3}  coarse {:.4}  refined {:.4}  gain {:+.4}",
            a.regime, a.strategy, a.images, a.coarse_dice, a.mean_dice, a.mean_gain
        );
    }
    for s in &report.skips {
        eprintln!("skipped {}: {}", s.item, s.reason);
    }
    println!("wrote sweep.csv and sweep.json to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| -> Result<()> {
        match &cli.command {
            Command::EchoBridge => {
                let stdin = io::stdin();
                serve_echo(BufReader::new(stdin.lock()), io::stdout().lock())?;
                Ok(())
            }
            Command::Generate {
                out,
                count,
                width,
                height,
            } => generate(out, *count, *width, *height, cli.seed.unwrap_or(0)),
            Command::Refine {
                image,
                coarse,
                tendon,
                gt,
                run,
                out,
            } => {
                let mut cfg = load_config(&cli)?;
                run.apply(&mut cfg);
                cfg.validate()?;
                refine(&cfg, image, coarse, tendon, gt.as_deref(), out)
            }
            Command::Sweep {
                data,
                regimes,
                strategies,
                run,
                out,
            } => {
                let mut cfg = load_config(&cli)?;
                run.apply(&mut cfg);
                cfg.validate()?;
                sweep(&cfg, data, regimes, strategies, out)
            }
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

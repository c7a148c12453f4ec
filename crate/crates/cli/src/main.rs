use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use strm_core::checkpoint;
use strm_core::config::Config;
use strm_core::eval::{format_distance_csv, format_summary, CmcResult};
use strm_core::gradcheck::{check_module, GradModule, SuiteShape};
use strm_core::inspect::{occlusion_gates, write_trace};
use strm_core::synthdata::{load_frame, render_sequence, EVAL_INDEX_BASE};
use strm_core::trainer::{StepMetrics, Trainer};
use strm_core::Tensor;

#[derive(Parser)]
#[command(name = "strm", version, about = "Gated refinement and spatio-temporal integration for video re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, metrics and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Seed for initialization, batches and synthetic data.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// `key=value` overrides, e.g. `use_rru=false,use_lp=false`.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Evaluate a checkpoint and write the CMC/mAP summary.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `synthetic`, `synthetic:key=value,...` or a frame-directory root.
        #[arg(long, default_value = "synthetic")]
        data: String,
        /// Split file for a frame-directory root.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the first trial's probe × gallery distances as CSV.
        #[arg(long)]
        distances: Option<PathBuf>,
    },
    /// Finite-difference check of module gradients.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ModuleArg::All)]
        module: ModuleArg,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Write per-frame gate, raw and refined maps of one sequence.
    InspectGates {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `synthetic:id=I,camera=C,index=N,occlusion=P` or a directory of
        /// frame images.
        #[arg(long)]
        sequence: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render synthetic sequences as PNG frames and PGM occlusion masks.
    SynthPreview {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        id: usize,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    All,
    Rru,
    Stim,
    Loss,
    Backbone,
}

impl ModuleArg {
    fn modules(self) -> Vec<GradModule> {
        match self {
            ModuleArg::All => GradModule::ALL.to_vec(),
            ModuleArg::Rru => vec![GradModule::Rru],
            ModuleArg::Stim => vec![GradModule::Stim],
            ModuleArg::Loss => vec![GradModule::Loss],
            ModuleArg::Backbone => vec![GradModule::Backbone],
        }
    }
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn load_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Config::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn train(config: &Path, seed: Option<u64>, out: &Path, ablation: Option<&str>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    if let Some(a) = ablation {
        cfg.apply_overrides(a).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut trainer = Trainer::new(cfg)?;
    write(&out.join("config.txt"), trainer.config.to_text())?;
    let metrics_path = out.join("metrics.csv");
    let file = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut metrics = BufWriter::new(file);
    writeln!(metrics, "{}", StepMetrics::CSV_HEADER)?;
    let start = Instant::now();
    let mut io_err = None;
    trainer.fit(
        |m| {
            if let Err(e) = writeln!(metrics, "{}", m.csv_row()) {
                io_err.get_or_insert(e);
            }
            if m.iteration % 25 == 0 {
                info!("iteration {} total {:.4} ({:.0}s)", m.iteration, m.total, start.elapsed().as_secs_f64());
            }
        },
        |it, s| info!("iteration {it}: rank-1 {:.4} mAP {:.4}", s.mean.rank1(), s.mean.map),
    )?;
    if let Some(e) = io_err {
        return Err(e).context("writing metrics.csv");
    }
    metrics.flush()?;
    checkpoint::save(&out.join("checkpoint.strm"), &trainer)?;
    println!("trained {} iterations in {:.1}s", trainer.iteration, start.elapsed().as_secs_f64());
    Ok(())
}

fn eval(
    ckpt: &Path,
    data: &str,
    split: Option<PathBuf>,
    trials: usize,
    out: &Path,
    distances: Option<&Path>,
) -> Result<()> {
    if trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let mut trainer = checkpoint::load(ckpt)?;
    let mut d = trainer.config.data.clone();
    if let Some(rest) = data.strip_prefix("synthetic") {
        d.root = None;
        d.split = None;
        if let Some(over) = rest.strip_prefix(':') {
            let mut c = trainer.config.clone();
            c.data = d;
            for item in over.split(',').filter(|s| !s.is_empty()) {
                let (k, v) = item.split_once('=').ok_or_else(|| usage(format!("bad data override `{item}`")))?;
                c.set("data", k.trim(), v.trim()).map_err(usage)?;
            }
            d = c.data;
        } else if !rest.is_empty() {
            return Err(usage(format!("bad data spec `{data}`")));
        }
    } else {
        d.root = Some(PathBuf::from(data));
        d.split = split;
    }
    trainer.set_data(d)?;
    let mut results: Vec<CmcResult> = Vec::with_capacity(trials);
    for t in 0..trials as u64 {
        let set = trainer.eval_set(t)?;
        let dist = set.distances()?;
        if t == 0 {
            if let Some(p) = distances {
                write(p, format_distance_csv(&dist))?;
            }
        }
        results.push(strm_core::eval::score_distances(&dist, &set.probe_ids, &set.gallery_ids, set.strict)?);
    }
    let summary = strm_core::eval::multi_trial(&results)?;
    let mut mean = summary.mean.clone();
    let max_rank = trainer.config.eval.max_rank;
    if max_rank > 0 {
        mean.cmc.truncate(max_rank);
    }
    let text = format_summary(&mean);
    write(out, &text)?;
    println!(
        "rank-1 {:.4} (std {:.4}) mAP {:.4} (std {:.4}) over {} trials",
        summary.mean.rank1(),
        summary.cmc_std[0],
        summary.mean.map,
        summary.map_std,
        summary.trials
    );
    Ok(())
}

fn gradcheck(module: ModuleArg, tol: f64, seeds: u64) -> Result<bool> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(usage("--tol must be positive"));
    }
    let shape = SuiteShape::default();
    println!(
        "shape C={} T={} H={} W={}, {seeds} seeds, tol {tol:e}",
        shape.channels, shape.frames, shape.height, shape.width
    );
    println!("{:<10} {:>14} {:>8} {:>8}  result", "module", "max_rel_err", "checked", "skipped");
    let mut all = true;
    for m in module.modules() {
        let r = check_module(m, &shape, 0, seeds, tol)?;
        all &= r.pass;
        println!(
            "{:<10} {:>14.3e} {:>8} {:>8}  {}",
            m.name(),
            r.max_rel_err,
            r.checked,
            r.skipped,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    Ok(all)
}

struct SyntheticSpec {
    id: usize,
    camera: usize,
    index: u64,
    occlusion: Option<f64>,
}

fn parse_synthetic(spec: &str) -> Result<SyntheticSpec> {
    let mut s = SyntheticSpec {
        id: 0,
        camera: 0,
        index: EVAL_INDEX_BASE,
        occlusion: None,
    };
    for item in spec.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = item.split_once('=').ok_or_else(|| usage(format!("bad sequence field `{item}`")))?;
        let bad = |_| usage(format!("bad value for `{k}`: {v}"));
        match k.trim() {
            "id" => s.id = v.trim().parse().map_err(bad)?,
            "camera" => s.camera = v.trim().parse().map_err(bad)?,
            "index" => s.index = v.trim().parse().map_err(bad)?,
            "occlusion" => s.occlusion = Some(v.trim().parse().map_err(|_| usage(format!("bad occlusion {v}")))?),
            other => return Err(usage(format!("unknown sequence field `{other}`"))),
        }
    }
    Ok(s)
}

fn inspect_gates(ckpt: &Path, sequence: &str, out: &Path) -> Result<()> {
    let mut trainer = checkpoint::load(ckpt)?;
    let b = trainer.config.model.backbone.clone();
    let (frames, masks) = if let Some(rest) = sequence.strip_prefix("synthetic") {
        let spec = parse_synthetic(rest.strip_prefix(':').unwrap_or(rest))?;
        let cfg = trainer.config.synth();
        let mut corruption = cfg.corruption.clone();
        if let Some(p) = spec.occlusion {
            corruption.occlusion_prob = p;
        }
        let seq = render_sequence(&cfg, spec.id, spec.camera, cfg.frames, &corruption, spec.index).map_err(usage)?;
        (seq.frames, Some(seq.occlusion))
    } else {
        let dir = Path::new(sequence);
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            bail!("{}: no frames", dir.display());
        }
        let mut data = Vec::new();
        for f in &files {
            data.extend_from_slice(load_frame(f, b.image_height, b.image_width)?.data());
        }
        (Tensor::new([files.len(), 3, b.image_height, b.image_width], data)?, None)
    };
    let trace = trainer.model.trace(&mut trainer.store, &frames)?;
    let written = write_trace(out, &trace)?;
    println!("wrote {} files to {}", written.len(), out.display());
    if let Some(masks) = masks {
        match occlusion_gates(&trace, &masks, b.image_height, b.image_width)? {
            Some(s) => {
                let text = format!(
                    "inside\t{:.16e}\noutside\t{:.16e}\ninside_cells\t{}\noutside_cells\t{}\n",
                    s.inside, s.outside, s.inside_cells, s.outside_cells
                );
                write(&out.join("occlusion.txt"), &text)?;
                print!("{text}");
            }
            None => println!("no occluded cells after the first frame"),
        }
    }
    Ok(())
}

fn synth_preview(config: Option<&Path>, id: usize, camera: usize, index: u64, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => Config::default(),
    };
    let synth = cfg.synth();
    let seq = render_sequence(&synth, id, camera, synth.frames, &synth.corruption, index).map_err(usage)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (h, w) = (synth.height, synth.width);
    for (t, mask) in seq.occlusion.iter().enumerate() {
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|c| {
                (seq.frames.get(&[t, c, y as usize, x as usize]) * 255.0).round() as u8
            }))
        });
        let path = out.join(format!("frame_{t:03}.png"));
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
        let values: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        write(&out.join(format!("mask_{t:03}.pgm")), strm_core::inspect::to_pgm(&values, h, w))?;
    }
    println!("wrote {} frames to {}", seq.occlusion.len(), out.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("STRM_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| usage(format!("STRM_THREADS must be a number, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            ablation,
        } => train(&config, seed, &out, ablation.as_deref()).map(|_| true),
        Command::Eval {
            checkpoint,
            data,
            split,
            trials,
            out,
            distances,
        } => eval(&checkpoint, &data, split, trials, &out, distances.as_deref()).map(|_| true),
        Command::Gradcheck { module, tol, seeds } => gradcheck(module, tol, seeds),
        Command::InspectGates {
            checkpoint,
            sequence,
            out,
        } => inspect_gates(&checkpoint, &sequence, &out).map(|_| true),
        Command::SynthPreview {
            config,
            id,
            camera,
            index,
            out,
        } => synth_preview(config.as_deref(), id, camera, index, &out).map(|_| true),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<strm_core::Error>(), Some(strm_core::Error::Config(_)));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

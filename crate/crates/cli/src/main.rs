//! Command-line driver: train, eval, gradcheck, bench, gen-data, inspect.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use missformer::bench::{run_bench, to_csv};
use missformer::check::{run_suite, SuiteOptions};
use missformer::checkpoint::Checkpoint;
use missformer::config::{split_override, RunConfig};
use missformer::data::{gen_dataset, save_dataset, SynthSpec};
use missformer::metrics::CSV_HEADER;
use missformer::model::{Missformer, STAGES};
use missformer::tensor::OpKind;
use missformer::train::{evaluate_checkpoint, train, METRICS_FILE};

#[derive(Parser)]
#[command(
    name = "missformer",
    version,
    about = "Train and evaluate the segmentation transformer"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, metrics.csv, and resolved.toml.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Dotted-path overrides such as `--bridge.depth=4` or `--train.epochs=50`.
        #[arg(
            trailing_var_arg = true,
            allow_hyphen_values = true,
            value_name = "KEY=VALUE"
        )]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on the dataset described by a config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config supplying the dataset; defaults to the data settings
        /// stored next to the checkpoint's training run, if any.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// CSV destination (default: eval.csv inside the checkpoint directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(
            trailing_var_arg = true,
            allow_hyphen_values = true,
            value_name = "KEY=VALUE"
        )]
        overrides: Vec<String>,
    },
    /// Finite-difference check of every op family and a small end-to-end model.
    Gradcheck {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Coordinates sampled per tensor in module-level checks.
        #[arg(long, default_value_t = 6)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Compare attention FLOPs and wall time across reduction ratios.
    Bench {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Square grid sides, comma separated.
        #[arg(long, value_delimiter = ',')]
        sides: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        reductions: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate and cache a synthetic dataset.
    GenData {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(
            trailing_var_arg = true,
            allow_hyphen_values = true,
            value_name = "KEY=VALUE"
        )]
        overrides: Vec<String>,
    },
    /// Print a checkpoint's config, parameter count, and layer shapes.
    Inspect { checkpoint: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

fn parse_overrides(raw: &[String]) -> missformer::Result<Vec<(String, String)>> {
    raw.iter()
        .map(|a| split_override(a).map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> missformer::Result<RunConfig> {
    let ov = parse_overrides(overrides)?;
    match path {
        Some(p) => RunConfig::load(p, &ov),
        None => RunConfig::from_toml_with("", &ov),
    }
}

fn cmd_train(config: &Path, overrides: &[String]) -> anyhow::Result<()> {
    let run = load_config(Some(config), overrides)?;
    let report = train(&run)?;
    let mean = report.final_train.mean();
    println!("iterations {}", report.iterations);
    println!(
        "final loss {:.6}",
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("train dsc {:.4} hd95 {:.3}", mean.dsc, mean.hd95);
    if let Some(v) = &report.final_val {
        let m = v.mean();
        println!("val dsc {:.4} hd95 {:.3}", m.dsc, m.hd95);
    }
    println!(
        "outputs in {}",
        report.output.join(METRICS_FILE).parent().unwrap().display()
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    config: Option<&Path>,
    split: Split,
    out: Option<&Path>,
    overrides: &[String],
) -> anyhow::Result<()> {
    let ck = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    // a checkpoint inside <run>/checkpoints/<name> finds its run's resolved config
    let sibling = checkpoint
        .parent()
        .and_then(Path::parent)
        .map(|d| d.join("resolved.toml"));
    let config = config
        .map(Path::to_path_buf)
        .or(sibling.filter(|p| p.exists()));
    let data = match config {
        Some(p) => load_config(Some(&p), overrides)?.data,
        None => SynthSpec {
            height: ck.model.height,
            width: ck.model.width,
            num_classes: ck.model.num_classes,
            ..Default::default()
        },
    };
    if data.num_classes != ck.model.num_classes {
        return Err(missformer::Error::Config(format!(
            "data.num_classes: dataset has {} classes, checkpoint predicts {}",
            data.num_classes, ck.model.num_classes
        ))
        .into());
    }
    let ds = gen_dataset(&data)?;
    let mut csv = format!("{CSV_HEADER}\n");
    let splits: Vec<(&str, &[_])> = match split {
        Split::Train => vec![("train", &ds.train)],
        Split::Val => vec![("val", &ds.val)],
        Split::All => vec![("train", &ds.train), ("val", &ds.val)],
    };
    for (name, samples) in splits {
        if samples.is_empty() {
            bail!("{name} split is empty");
        }
        let table = evaluate_checkpoint(&ck, samples)?;
        println!("{name}: {} samples", table.samples);
        println!("  class      dsc     hd95    hd100");
        for (i, c) in table.classes.iter().enumerate() {
            println!(
                "  {:>5} {:8.4} {:8.3} {:8.3}",
                i + 1,
                c.dsc,
                c.hd95,
                c.hd100
            );
        }
        let m = table.mean();
        println!(
            "  {:>5} {:8.4} {:8.3} {:8.3}",
            "mean", m.dsc, m.hd95, m.hd100
        );
        csv.push_str(&table.csv_rows(ck.meta.epoch, name));
    }
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.join("eval.csv"));
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_gradcheck(
    config: Option<&Path>,
    coords: usize,
    seed: u64,
    fault: Option<&str>,
) -> anyhow::Result<bool> {
    if let Some(p) = config {
        load_config(Some(p), &[])?;
    }
    let fault = match fault {
        Some(name) => Some(
            OpKind::from_name(name)
                .ok_or_else(|| missformer::Error::Config(format!("unknown op kind {name}")))?,
        ),
        None => None,
    };
    let results = run_suite(&SuiteOptions {
        fault,
        coords,
        seed,
    });
    let mut failing = Vec::new();
    println!(
        "{:<12} {:>12} {:>10} {:>8}  status",
        "family", "worst_rel", "tolerance", "coords"
    );
    for r in &results {
        match &r.outcome {
            Ok(rep) => println!(
                "{:<12} {:>12.3e} {:>10.0e} {:>8}  {}",
                r.family,
                rep.max_rel_error,
                r.tolerance,
                rep.coords_checked,
                if r.passed() { "ok" } else { "FAIL" }
            ),
            Err(e) => println!(
                "{:<12} {:>12} {:>10.0e} {:>8}  ERROR {e}",
                r.family, "-", r.tolerance, "-"
            ),
        }
        if !r.passed() {
            failing.push(r.family);
        }
    }
    if failing.is_empty() {
        println!("all {} families passed", results.len());
        Ok(true)
    } else {
        println!("failing: {}", failing.join(", "));
        Ok(false)
    }
}

fn cmd_bench(
    config: Option<&Path>,
    sides: Option<Vec<usize>>,
    reductions: Option<Vec<usize>>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config, &[])?.bench;
    if let Some(s) = sides {
        cfg.grid_sides = s;
    }
    if let Some(r) = reductions {
        cfg.reductions = r;
    }
    let (rows, warnings) = run_bench(&cfg)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let csv = to_csv(&rows);
    match out {
        Some(p) => fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_gen_data(config: Option<&Path>, out: &Path, overrides: &[String]) -> anyhow::Result<()> {
    let run = load_config(config, overrides)?;
    let ds = gen_dataset(&run.data)?;
    let manifest = save_dataset(&ds, out)?;
    println!(
        "wrote {} train and {} val samples ({} files) to {}",
        ds.train.len(),
        ds.val.len(),
        manifest.files.len(),
        out.display()
    );
    Ok(())
}

fn cmd_inspect(path: &Path) -> anyhow::Result<()> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let m = &ck.model;
    #[derive(serde::Serialize)]
    struct Wrapped<'a> {
        model: &'a missformer::model::ModelConfig,
    }
    print!("{}", toml::to_string(&Wrapped { model: m })?);
    println!();
    println!("epoch {} iteration {}", ck.meta.epoch, ck.meta.iteration);
    if let Some(d) = ck.meta.mean_dsc {
        println!("mean dsc {d:.4}");
    }
    println!("parameters {}", ck.params.num_scalars());
    let grids = m.grids();
    let r = m.effective_reductions();
    for i in 0..STAGES {
        let (h, w) = grids[i];
        println!(
            "encoder stage {}: grid {h}x{w}, channels {}, heads {}, reduction {}",
            i + 1,
            m.channels[i],
            m.heads[i],
            r[i]
        );
    }
    let model = Missformer::attach(m, &ck.params)?;
    if let Some(b) = &model.bridge {
        let stages: Vec<String> = b
            .layout
            .segments
            .iter()
            .map(|s| (s.stage + 1).to_string())
            .collect();
        println!(
            "bridge: depth {}, stages {}, {} tokens of width {}",
            b.layers.len(),
            stages.join(","),
            b.layout.total(),
            b.layout.width
        );
    }
    println!();
    for (name, t) in ck.params.iter() {
        println!("{name} {:?}", t.shape());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<missformer::Error>() {
        Some(e) if e.is_config() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::Train { config, overrides } => cmd_train(config, overrides),
        Command::Eval {
            checkpoint,
            config,
            split,
            out,
            overrides,
        } => cmd_eval(
            checkpoint,
            config.as_deref(),
            *split,
            out.as_deref(),
            overrides,
        ),
        Command::Gradcheck {
            config,
            coords,
            seed,
            inject_fault,
        } => match cmd_gradcheck(config.as_deref(), *coords, *seed, inject_fault.as_deref()) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Bench {
            config,
            sides,
            reductions,
            out,
        } => cmd_bench(
            config.as_deref(),
            sides.clone(),
            reductions.clone(),
            out.as_deref(),
        ),
        Command::GenData {
            config,
            out,
            overrides,
        } => cmd_gen_data(config.as_deref(), out, overrides),
        Command::Inspect { checkpoint } => cmd_inspect(checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

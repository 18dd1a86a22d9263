mod demo;

use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use univip_core::checks::{op_cases, run_case, ObjectiveFixture};
use univip_core::data::{write_dataset, DatasetManifest};
use univip_core::losses::LossTerms;
use univip_core::model::read_checkpoint;
use univip_core::ot::sinkhorn_traced;
use univip_core::proposals::{generate_proposals, recall_counts, ProposalConfig};
use univip_core::rng::{derive_seed, rng_from};
use univip_core::train::{
    extract_features, instance_dataset, knn_accuracy, linear_probe, train, ProbeConfig, TrainConfig,
};
use univip_core::views::{create_overlapping_views, ViewConfig};
use univip_core::{Error, Profile};

#[derive(Parser)]
#[command(
    name = "univip",
    version,
    about = "Multi-instance self-supervised pre-training at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene dataset with labelled boxes.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "desk")]
        profile: Profile,
    },
    /// Print unsupervised proposals per image as JSON lines.
    Propose {
        #[arg(long)]
        data: PathBuf,
        /// Only this sample.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Print one overlapping view pair per image as JSON lines.
    MakeViews {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train from a config file; any key can be overridden with
    /// `--section.key value`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Linear-probe accuracy of a checkpoint's frozen encoder.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Cosine kNN accuracy of a checkpoint's frozen encoder.
    Knn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Finite-difference check of every op and the full objective.
    CheckGrad {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Solve one transport problem read from a text file.
    SinkhornDemo { file: PathBuf },
}

/// Malformed invocation detected after clap has parsed the arguments.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. } | Error::Numeric(_) | Error::Degenerate(_)) => 3,
        Some(Error::InvalidArgument(_)) => 1,
        _ => 2,
    }
}

/// `--a.b 1 --c.d=x` into `[("a.b", "1"), ("c.d", "x")]`.
fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Usage(format!("expected `--key value`, found `{arg}`")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Usage(format!("`--{key}` needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn print_line(out: &mut impl Write, v: &serde_json::Value) -> Result<()> {
    writeln!(out, "{v}")?;
    Ok(())
}

fn propose(data: &Path, index: Option<usize>) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    let cfg = ProposalConfig::for_profile(manifest.profile);
    let mut out = BufWriter::new(io::stdout().lock());
    let indices: Vec<usize> = match index {
        Some(i) => vec![i],
        None => (0..manifest.len()).collect(),
    };
    for i in indices {
        let s = manifest.read_sample(i)?;
        let proposals = generate_proposals(&s.image, &cfg);
        let (hits, total) = recall_counts(&proposals, &s.boxes, 0.5);
        print_line(
            &mut out,
            &json!({"index": i, "proposals": proposals, "gt_hits": hits, "gt_total": total}),
        )?;
    }
    Ok(())
}

fn make_views(data: &Path, seed: u64, limit: Option<usize>) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    let pcfg = ProposalConfig::for_profile(manifest.profile);
    let vcfg = ViewConfig::for_profile(manifest.profile);
    let mut out = BufWriter::new(io::stdout().lock());
    for i in 0..limit.unwrap_or(manifest.len()).min(manifest.len()) {
        let s = manifest.read_sample(i)?;
        let proposals = generate_proposals(&s.image, &pcfg);
        let sample_seed = derive_seed(seed, i as u64);
        let view = create_overlapping_views(
            s.image.width(),
            s.image.height(),
            &proposals,
            &vcfg,
            &mut rng_from(sample_seed),
        )?;
        print_line(&mut out, &json!({"index": i, "seed": sample_seed, "view": view}))?;
    }
    Ok(())
}

fn probe_features(
    checkpoint: &Path,
    data: &Path,
    cfg: &ProbeConfig,
) -> Result<(Vec<Vec<f64>>, univip_core::train::InstanceSet)> {
    let state = read_checkpoint::<f32>(checkpoint)?;
    let manifest = DatasetManifest::load(data)?;
    let set = instance_dataset(&manifest, cfg)?;
    let features = extract_features(&state, &set.crops, cfg.chunk)?;
    Ok((features, set))
}

fn check_grad(seeds: u64, h: f64, tol: f64) -> Result<()> {
    let mut failed = Vec::new();
    for case in op_cases() {
        let r = run_case(&case, seeds, h, tol)?;
        println!(
            "{:<16} {} runs, worst rel err {:.2e}  {}",
            r.name,
            r.runs,
            r.worst_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.name);
        }
    }
    let mut worst = 0.0f64;
    let mut objective_ok = true;
    for seed in 0..seeds.min(5) {
        let report = ObjectiveFixture::new(seed, 2, 2, LossTerms::default())?.check(h, tol)?;
        worst = worst.max(report.max_rel_err());
        objective_ok &= report.passed();
    }
    println!(
        "{:<16} worst rel err {worst:.2e}  {}",
        "objective",
        if objective_ok { "ok" } else { "FAIL" }
    );
    if !objective_ok {
        failed.push("objective".into());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            count,
            seed,
            profile,
        } => {
            let m = write_dataset(&out, seed, count, profile)?;
            println!("wrote {} {} scenes to {}", m.len(), profile, out.display());
        }
        Command::Propose { data, index } => propose(&data, index)?,
        Command::MakeViews { data, seed, limit } => make_views(&data, seed, limit)?,
        Command::Train { config, overrides } => {
            let overrides = parse_overrides(&overrides)?;
            let cfg = match &config {
                Some(p) => TrainConfig::load(p, &overrides)?,
                None => TrainConfig::from_toml("", Path::new("<defaults>"), &overrides)?,
            };
            info!("training into {}", cfg.run.out_dir.display());
            let outcome = train(&cfg)?;
            let last = outcome
                .checkpoints
                .last()
                .ok_or_else(|| anyhow!("no checkpoint written"))?;
            println!("{} steps; final checkpoint {}", outcome.steps, last.display());
        }
        Command::Probe {
            checkpoint,
            data,
            iterations,
        } => {
            let manifest = DatasetManifest::load(&data)?;
            let mut cfg = ProbeConfig::for_profile(manifest.profile);
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            let (features, set) = probe_features(&checkpoint, &data, &cfg)?;
            let acc = linear_probe(&features, &set.labels, &set.train, set.classes, &cfg)?;
            println!(
                "{}",
                json!({"linear_probe_accuracy": acc, "instances": set.labels.len()})
            );
        }
        Command::Knn { checkpoint, data, k } => {
            let manifest = DatasetManifest::load(&data)?;
            let cfg = ProbeConfig::for_profile(manifest.profile);
            let (features, set) = probe_features(&checkpoint, &data, &cfg)?;
            let acc = knn_accuracy(&features, &set.labels, &set.train, set.classes, k)?;
            println!(
                "{}",
                json!({"knn_accuracy": acc, "k": k, "instances": set.labels.len()})
            );
        }
        Command::CheckGrad { seeds, h, tol } => check_grad(seeds, h, tol)?,
        Command::SinkhornDemo { file } => {
            let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
            let problem = demo::parse(&text, &file)?;
            let (plan, trace) = sinkhorn_traced(&problem.cost, &problem.supply, &problem.demand, &problem.config)?;
            let k = plan.k();
            for m in 0..k {
                let row: Vec<String> = (0..k).map(|n| format!("{:.6}", plan.get(m, n))).collect();
                println!("{}", row.join(" "));
            }
            println!(
                "cost {:.6}  iterations {}  converged {}  max violation {:.2e}  final dual {:.6}",
                plan.cost(&problem.cost),
                plan.iterations,
                plan.converged,
                plan.max_violation,
                trace.last().copied().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

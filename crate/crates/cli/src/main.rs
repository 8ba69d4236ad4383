//! `sortition`: count, sample, reweight, evaluate and publish panel lotteries.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sortition::evaluation::holdout_csv;
use sortition::instance::choose_anchor;
use sortition::optimizer::{interiorize, panel_frequencies, SampledGradient};
use sortition::oracle::ExactGradient;
use sortition::sampler::DEFAULT_MAX_ATTEMPTS;
use sortition::*;

mod failure;
use failure::Failure;

#[derive(Parser)]
#[command(name = "sortition", version, about = "Maximum-entropy selection of citizens' assembly panels")]
struct Cli {
    /// Worker threads for sampling and table construction.
    #[arg(long, global = true, default_value_t = 5)]
    threads: usize,
    /// Memory budget for one counting table, in MiB.
    #[arg(long, global = true, default_value_t = 8192)]
    memory_budget_mib: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct InstanceArgs {
    /// Instance JSON file.
    #[arg(long, required_unless_present = "pool_csv", conflicts_with = "pool_csv")]
    instance: Option<PathBuf>,
    /// Pool CSV (`id,<feature>...`); needs --quotas-csv and --panel-size.
    #[arg(long, requires_all = ["quotas_csv", "panel_size"])]
    pool_csv: Option<PathBuf>,
    /// Quotas CSV (`feature,value,min,max`).
    #[arg(long)]
    quotas_csv: Option<PathBuf>,
    #[arg(long)]
    panel_size: Option<usize>,
}

impl InstanceArgs {
    fn load(&self) -> Result<Instance, Failure> {
        let source = match (&self.instance, &self.pool_csv, &self.quotas_csv, self.panel_size) {
            (Some(p), ..) => InstanceSource::Json(p),
            (None, Some(pool), Some(quotas), Some(panel_size)) => InstanceSource::CsvPair {
                pool,
                quotas,
                panel_size,
            },
            _ => return Err(Failure::usage("an instance is required: --instance or the CSV pair")),
        };
        Ok(parse_instance(source)?)
    }

    fn name(&self) -> String {
        self.instance
            .as_ref()
            .or(self.pool_csv.as_ref())
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "instance".into())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Exact number of quota-compliant panels.
    Count {
        #[command(flatten)]
        input: InstanceArgs,
        /// Comma-separated features to enforce (default: all).
        #[arg(long, value_delimiter = ',')]
        features: Option<Vec<String>>,
        /// Add features one at a time and report counts and layer statistics
        /// as JSON lines on stderr.
        #[arg(long)]
        report_layers: bool,
    },
    /// Uniform (maximum-entropy) panels as JSON lines.
    Sample {
        #[command(flatten)]
        input: InstanceArgs,
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MAX_ATTEMPTS)]
        max_attempts: u64,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fits member weights so selection probabilities match targets.
    FairSample {
        #[command(flatten)]
        input: InstanceArgs,
        /// JSON object mapping member id to target probability.
        #[arg(long)]
        targets: PathBuf,
        /// Blend targets with this much of the uniform selection probabilities.
        #[arg(long)]
        interiorize: Option<f64>,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 10_000)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        grad_tol: f64,
        #[arg(long)]
        budget_seconds: Option<f64>,
        /// Exact gradients by enumeration (small instances only).
        #[arg(long)]
        exact: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Panels to draw with the fitted weights.
        #[arg(long, default_value_t = 0)]
        num: usize,
        /// Weights and diagnostics as JSON.
        #[arg(long)]
        out: PathBuf,
        /// Where to write the `--num` panels (JSON lines).
        #[arg(long)]
        panels_out: Option<PathBuf>,
    },
    /// Selection probabilities, fairness and diversity of sampled panels.
    Evaluate {
        #[command(flatten)]
        input: InstanceArgs,
        #[arg(long)]
        panels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write scalar metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// How often panels sampled without a feature's quotas meet them anyway.
    Holdout {
        #[command(flatten)]
        input: InstanceArgs,
        #[arg(long, conflicts_with = "all_features", required_unless_present = "all_features")]
        feature: Option<String>,
        #[arg(long)]
        all_features: bool,
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add the exact count ratio to each row.
        #[arg(long)]
        exact: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Publishes `m` independently sampled panels.
    Lottery {
        #[command(flatten)]
        input: InstanceArgs,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = lottery::DEFAULT_DELTA)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Picks the final panel of a published lottery.
    LotteryDraw {
        #[arg(long)]
        lottery: PathBuf,
        #[arg(long, conflicts_with = "seed", required_unless_present = "seed")]
        index: Option<u64>,
        /// Public random number; the index is `seed mod m`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cross-checks counting and sampling against brute-force enumeration.
    Verify {
        #[command(flatten)]
        input: InstanceArgs,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn progress(value: serde_json::Value) {
    eprintln!("{value}");
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn write_all(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn plan_config(budget_mib: u64, seed: u64) -> PlanConfig {
    PlanConfig {
        seed,
        dp_options: DpOptions {
            memory_budget_bytes: budget_mib << 20,
            ..DpOptions::default()
        },
        ..PlanConfig::default()
    }
}

fn count(input: &InstanceArgs, features: Option<&[String]>, report: bool, budget_mib: u64) -> Result<(), Failure> {
    let inst = input.load()?;
    let wanted = match features {
        Some(names) => inst.resolve_features(names)?,
        None => (0..inst.features().len()).collect(),
    };
    let weights = WeightVector::uniform(inst.pool_size());
    let options = DpOptions {
        memory_budget_bytes: budget_mib << 20,
        retain_counts: report,
        ..DpOptions::default()
    };
    if !report {
        let table = build_dp(&inst, &wanted, &weights, None, &options)?;
        println!("{}", table.total_count());
        return Ok(());
    }
    let anchor = choose_anchor(&inst, &wanted);
    let order: Vec<usize> = anchor
        .into_iter()
        .chain(wanted.iter().copied().filter(|&f| Some(f) != anchor))
        .collect();
    let start = Instant::now();
    let mut table = build_dp(&inst, &[], &weights, None, &options)?;
    progress(json!({"event": "feature_added", "features": [], "count": table.total_count().to_string()}));
    for i in 1..=order.len() {
        table = build_dp(&inst, &order[..i], &weights, (i > 1).then_some(&table), &options)?;
        let names: Vec<&str> = order[..i].iter().map(|&f| inst.features()[f].name.as_str()).collect();
        progress(json!({
            "event": "feature_added",
            "feature": names[i - 1],
            "features": names,
            "count": table.total_count().to_string(),
            "states": table.total_states(),
            "elapsed_ms": start.elapsed().as_millis() as u64,
        }));
    }
    for s in table.layer_stats() {
        progress(json!({"event": "layer", "stats": s}));
    }
    println!("{}", table.total_count());
    Ok(())
}

fn sampler_for(inst: Instance, weights: &WeightVector, config: &PlanConfig, max_attempts: u64) -> Result<PanelSampler, Failure> {
    let mut sampler = PanelSampler::build(Arc::new(inst), weights, config)?;
    sampler.max_attempts = max_attempts;
    progress(json!({"event": "plan", "plan": sampler.plan(), "count": sampler.table().total_count().to_string()}));
    Ok(sampler)
}

fn write_panels(out: Option<&Path>, panels: &[PanelSample]) -> Result<(), Failure> {
    let mut w: Box<dyn Write> = match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for p in panels {
        writeln!(w, "{}", p.to_json_line()).map_err(|e| Failure::io(e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::io(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
fn fair_sample(
    input: &InstanceArgs,
    targets: &Path,
    eps: Option<f64>,
    iters: usize,
    batch: usize,
    grad_tol: f64,
    budget_seconds: Option<f64>,
    exact: bool,
    seed: u64,
    num: usize,
    out: &Path,
    panels_out: Option<&Path>,
    budget_mib: u64,
) -> Result<(), Failure> {
    let inst = input.load()?;
    let text = std::fs::read_to_string(targets).map_err(|e| Failure::io(format!("{}: {e}", targets.display())))?;
    let mut goal = TargetMarginals::from_json(&inst, &text)?;
    let config = plan_config(budget_mib, seed);
    let uniform_sampler = PanelSampler::build(Arc::new(inst.clone()), &WeightVector::uniform(inst.pool_size()), &config)?;
    if let Some(eps) = eps {
        let panels = uniform_sampler.sample_many_indices(seed ^ 0x5eed, batch)?;
        goal = interiorize(&goal, &panel_frequencies(inst.pool_size(), &panels), eps);
    }
    let opt_config = OptimizerConfig {
        batch_size: batch,
        grad_tol,
        max_iters: iters,
        budget: budget_seconds.map(Duration::from_secs_f64),
        seed,
        ..OptimizerConfig::default()
    };
    let outcome = if exact {
        optimize(&mut ExactGradient::new(&inst)?, &goal, &opt_config)?
    } else {
        optimize(&mut SampledGradient::new(uniform_sampler.clone(), batch, seed), &goal, &opt_config)?
    };
    for rec in &outcome.diagnostics {
        progress(json!({"event": "iteration", "record": rec}));
    }
    if let Some(w) = &outcome.warning {
        progress(json!({"event": "warning", "message": w}));
    }
    let ids = (0..inst.pool_size()).map(|i| inst.member_id(i).to_string());
    let weights: serde_json::Map<String, serde_json::Value> =
        ids.clone().zip(outcome.weights.as_slice().iter().map(|&w| json!(w))).collect();
    let theta: serde_json::Map<String, serde_json::Value> =
        ids.zip(outcome.iterate.theta.iter().map(|&t| json!(t))).collect();
    let report = json!({
        "weights": weights,
        "theta": theta,
        "targets": goal.to_map(&inst),
        "converged": outcome.converged,
        "diverging": outcome.diverging,
        "warning": outcome.warning,
        "iterations": outcome.iterate.grad_norm_history.len(),
        "final_grad_norm": outcome.iterate.grad_norm_history.last(),
    });
    write_all(out, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    if num > 0 {
        let fitted = uniform_sampler.reweighted(&outcome.weights)?;
        write_panels(panels_out, &fitted.sample_many(seed, num)?)?;
    }
    Ok(())
}

fn read_panels(inst: &Instance, path: &Path) -> Result<Vec<Vec<usize>>, Failure> {
    let file = File::open(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let mut panels = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Failure::io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Failure::io(format!("{}:{}: {m}", path.display(), i + 1));
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let members = v
            .get("members")
            .and_then(|m| m.as_array())
            .ok_or_else(|| bad("missing \"members\" array".into()))?;
        let mut panel = members
            .iter()
            .map(|m| {
                m.as_str()
                    .and_then(|id| inst.member_index(id))
                    .ok_or_else(|| bad(format!("unknown member {m}")))
            })
            .collect::<Result<Vec<usize>, _>>()?;
        panel.sort_unstable();
        panels.push(panel);
    }
    Ok(panels)
}

fn run(cli: Cli) -> Result<(), Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| Failure::usage(e.to_string()))?;
    let budget = cli.memory_budget_mib;
    match cli.command {
        Command::Count {
            input,
            features,
            report_layers,
        } => count(&input, features.as_deref(), report_layers, budget),
        Command::Sample {
            input,
            num,
            seed,
            max_attempts,
            out,
        } => {
            let inst = input.load()?;
            let n = inst.pool_size();
            let sampler = sampler_for(inst, &WeightVector::uniform(n), &plan_config(budget, seed), max_attempts)?;
            write_panels(out.as_deref(), &sampler.sample_many(seed, num)?)
        }
        Command::FairSample {
            input,
            targets,
            interiorize,
            iters,
            batch,
            grad_tol,
            budget_seconds,
            exact,
            seed,
            num,
            out,
            panels_out,
        } => fair_sample(
            &input,
            &targets,
            interiorize,
            iters,
            batch,
            grad_tol,
            budget_seconds,
            exact,
            seed,
            num,
            &out,
            panels_out.as_deref(),
            budget,
        ),
        Command::Evaluate { input, panels, out, csv } => {
            let inst = input.load()?;
            let panels = read_panels(&inst, &panels)?;
            let report = evaluate(&inst, &panels);
            write_all(&out, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
            if let Some(csv) = csv {
                write_all(&csv, &report.to_csv())?;
            }
            Ok(())
        }
        Command::Holdout {
            input,
            feature,
            all_features: _,
            num,
            seed,
            exact,
            out,
        } => {
            let inst = input.load()?;
            let features = match feature {
                Some(f) => inst.resolve_features(&[f])?,
                None => (0..inst.features().len()).collect(),
            };
            let config = plan_config(budget, seed);
            let mut rows = Vec::with_capacity(features.len());
            for f in features {
                let row = holdout_experiment(&inst, f, None, num, seed, &config, exact)?;
                progress(json!({"event": "holdout", "row": row}));
                rows.push(row);
            }
            write_all(&out, &holdout_csv(&input.name(), &rows))
        }
        Command::Lottery {
            input,
            m,
            delta,
            seed,
            out,
        } => {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(Failure::usage("--delta must lie in (0, 1)"));
            }
            let inst = input.load()?;
            let n = inst.pool_size();
            let sampler = sampler_for(inst, &WeightVector::uniform(n), &plan_config(budget, seed), DEFAULT_MAX_ATTEMPTS)?;
            let lot = build_lottery(&sampler, m, seed, delta)?;
            lot.write(create(&out)?)?;
            progress(json!({"event": "lottery", "header": lot.header}));
            Ok(())
        }
        Command::LotteryDraw { lottery, index, seed } => {
            let file = File::open(&lottery).map_err(|e| Failure::io(format!("{}: {e}", lottery.display())))?;
            let lot = Lottery::read(BufReader::new(file))?;
            let key = match (index, seed) {
                (Some(i), _) => DrawKey::Index(i),
                (None, Some(s)) => DrawKey::Seed(s),
                (None, None) => return Err(Failure::usage("--index or --seed is required")),
            };
            let (i, members) = lot.draw(key)?;
            println!("{}", json!({"index": i, "members": members}));
            Ok(())
        }
        Command::Verify { input, samples, seed } => {
            let inst = input.load()?;
            let report = verify_instance(&inst, samples, seed)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if report.passed {
                Ok(())
            } else {
                Err(Failure::verification("verification failed"))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let f = Failure::usage(e.to_string());
            f.report();
            return f.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report();
            f.exit_code()
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sevrate::clean::{clean_reported, deweekify, impute_daily, outlier_truncate, DEFAULT_IQR_MULT, DEFAULT_OUTLIER_WINDOW};
use sevrate::delay::{discretized_gamma, SD_TO_MEAN, DEFAULT_SUPPORT};
use sevrate::experiment::config::parse_entries;
use sevrate::experiment::{delay_mean_scan, io, region_data, run_experiment, ExperimentConfig};
use sevrate::ratios::{default_lag, ratio_estimate, RatioKind, Setting};
use sevrate::solver::{lambda_max_bound, solve, DeconvProblem, DeconvSpec};
use sevrate::tune::{cv_tune, forward_validate_gamma, forward_validate_window, Grid, Method, Rule, ValidationCurve};
use sevrate::CountSeries;

#[derive(Parser)]
#[command(name = "sevrate", version, about = "Severity rate estimation from primary and secondary event counts")]
struct Cli {
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic primary counts, true rates and secondary replicates.
    Simulate(ConfigArgs),
    /// Clean reported secondary counts, or expand weekly totals to days.
    Clean(CleanArgs),
    /// Estimate a severity curve from count files.
    Fit(FitArgs),
    /// Print the validation curve used to pick a hyperparameter.
    Tune(FitArgs),
    /// Run a simulation study and write its tables.
    Evaluate(ConfigArgs),
    /// Run a study over shifted delay means.
    SweepMisspec(SweepArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Delay-mean offsets in days; defaults depend on the setting.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    offsets: Option<Vec<f64>>,
}

#[derive(Args)]
struct CleanArgs {
    /// `date,count` file; counts may be negative unless `--weekly` is set.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = CleanOp::Pipeline)]
    op: CleanOp,
    #[arg(long, default_value_t = DEFAULT_OUTLIER_WINDOW)]
    outlier_window: usize,
    #[arg(long, default_value_t = DEFAULT_IQR_MULT)]
    iqr_mult: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum CleanOp {
    /// Dumps, negatives and day-of-week effects.
    Pipeline,
    /// Outlier truncation only.
    Outliers,
    /// Day-of-week removal only.
    Deweekify,
    /// Weekly totals to daily counts.
    Weekly,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FitMethod {
    Lagged,
    Conv,
    #[value(name = "deconv-0")]
    Deconv0,
    #[value(name = "deconv-1")]
    Deconv1,
    #[value(name = "deconv-2")]
    Deconv2,
}

impl FitMethod {
    fn label(self) -> &'static str {
        match self {
            FitMethod::Lagged => "lagged",
            FitMethod::Conv => "conv",
            FitMethod::Deconv0 => "deconv-0",
            FitMethod::Deconv1 => "deconv-1",
            FitMethod::Deconv2 => "deconv-2",
        }
    }

    fn order(self) -> Option<usize> {
        match self {
            FitMethod::Deconv0 => Some(0),
            FitMethod::Deconv1 => Some(1),
            FitMethod::Deconv2 => Some(2),
            _ => None,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    primary: PathBuf,
    #[arg(long)]
    secondary: PathBuf,
    /// Delay mean in days; scanned from the data when omitted.
    #[arg(long)]
    delay_mean: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_SUPPORT)]
    delay_support: usize,
    #[arg(long, value_enum, default_value_t = FitMethod::Deconv0)]
    method: FitMethod,
    /// Use only data through the last day and return the causal estimate.
    #[arg(long)]
    realtime: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value = "1se")]
    rule: String,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 28)]
    forward_steps: usize,
    #[arg(long, default_value_t = 20)]
    lambda_points: usize,
    /// Secondary days kept for real-time fits.
    #[arg(long, default_value_t = 180)]
    history: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn load_config(args: &ConfigArgs, extra: &[(String, String)]) -> Result<ExperimentConfig> {
    let (mut entries, base) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            (parse_entries(&text)?, path.parent().unwrap_or(Path::new(".")).to_path_buf())
        }
        None => (Default::default(), PathBuf::from(".")),
    };
    for s in &args.set {
        let Some((k, v)) = s.split_once('=') else {
            bail!(sevrate::Error::Parse(format!("--set expects KEY=VALUE, got {s:?}")));
        };
        entries.insert(k.trim().to_string(), v.trim().to_string());
    }
    let named = [
        ("seed", args.seed.map(|v| v.to_string())),
        ("replicates", args.replicates.map(|v| v.to_string())),
        ("threads", args.threads.map(|v| v.to_string())),
        ("output", args.output.as_ref().map(|v| v.display().to_string())),
    ];
    for (k, v) in named {
        if let Some(v) = v {
            entries.insert(k.to_string(), v);
        }
    }
    for (k, v) in extra {
        entries.insert(k.clone(), v.clone());
    }
    Ok(ExperimentConfig::from_entries(entries, &base)?)
}

fn simulate(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args, &[])?;
    fs::create_dir_all(&cfg.output)?;
    for (ri, region) in cfg.regions.iter().enumerate() {
        let data = region_data(region, &cfg)?;
        let name = &region.name;
        io::write_counts(&cfg.output.join(format!("{name}_primary.csv")), &data.primary)?;
        io::write_curve(&cfg.output.join(format!("{name}_truth.csv")), &data.truth)?;
        for rep in 0..cfg.replicates {
            let seed = sevrate::experiment::cell_seed(cfg.seed, ri, rep);
            let y = sevrate::experiment::run::simulate_cell(&cfg, &data, seed)?;
            io::write_counts(&cfg.output.join(format!("{name}_secondary_rep{rep:02}.csv")), &y)?;
        }
    }
    println!("wrote {}", cfg.output.display());
    Ok(())
}

fn clean(args: &CleanArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let out = match args.op {
        CleanOp::Weekly => {
            let (origin, weekly) = io::read_weekly(&args.input)?;
            impute_daily(origin, &weekly, &mut rng)
        }
        CleanOp::Pipeline => {
            let (origin, values) = io::read_signed_counts(&args.input)?;
            let cleaned = clean_reported(origin, &values, args.seed)?;
            eprintln!("dumps={} negatives={}", cleaned.dumps, cleaned.negatives);
            cleaned.series
        }
        CleanOp::Outliers => {
            let series = io::read_counts(&args.input)?;
            let (out, change) = outlier_truncate(&series, args.outlier_window, args.iqr_mult)?;
            eprintln!("total_change={change}");
            out
        }
        CleanOp::Deweekify => deweekify(&io::read_counts(&args.input)?, &mut rng)?,
    };
    io::write_counts(&args.output, &out)?;
    Ok(())
}

struct FitInputs {
    x: CountSeries,
    y: CountSeries,
    delay: sevrate::DelayDistribution,
    problem: DeconvProblem,
    rule: Rule,
}

fn fit_inputs(args: &FitArgs) -> Result<FitInputs> {
    let x = io::read_counts(&args.primary)?;
    let y = io::read_counts(&args.secondary)?;
    let mean = match args.delay_mean {
        Some(m) => m,
        None => delay_mean_scan(&x, &y, 45)?.best_lag.max(1) as f64,
    };
    let delay = discretized_gamma(mean, SD_TO_MEAN * mean, args.delay_support)?;
    let mut problem = DeconvProblem::new(&x, &y, &delay)?;
    if args.realtime {
        problem = problem.trailing(args.history)?;
    }
    Ok(FitInputs {
        x,
        y,
        delay,
        problem,
        rule: Rule::parse(&args.rule)?,
    })
}

fn ratio_kind(method: FitMethod, inputs: &FitInputs) -> RatioKind {
    match method {
        FitMethod::Lagged => RatioKind::Lagged {
            lag: default_lag(&inputs.delay),
        },
        _ => RatioKind::Convolutional,
    }
}

fn setting(args: &FitArgs) -> Setting {
    if args.realtime {
        Setting::RealTime
    } else {
        Setting::Retrospective
    }
}

/// Validation curves for the method's hyperparameters, in tuning order.
fn validation(args: &FitArgs, inputs: &FitInputs) -> Result<Vec<(&'static str, ValidationCurve)>> {
    let p = &inputs.problem;
    match args.method.order() {
        None => {
            let kind = ratio_kind(args.method, inputs);
            let grid = Grid::window_default();
            let curve = if args.realtime {
                forward_validate_window(p, kind, &grid, args.forward_steps)?
            } else {
                cv_tune(p, &Method::Ratio(kind), &grid, args.folds)?
            };
            Ok(vec![("window", curve)])
        }
        Some(order) => {
            let base = if args.realtime {
                DeconvSpec::realtime(order, 0.0, 0.0)
            } else {
                DeconvSpec::retrospective(order, 0.0)
            };
            let bound = lambda_max_bound(p, &base, 50)?;
            let grid = Grid::lambda(bound.value, args.lambda_points)?;
            let lambda_curve = cv_tune(p, &Method::Deconv(base), &grid, args.folds)?;
            let mut out = vec![("lambda", lambda_curve)];
            if args.realtime {
                let lambda = args.lambda.unwrap_or_else(|| out[0].1.selected(inputs.rule));
                let g = forward_validate_gamma(p, order, lambda, &Grid::gamma_default(), args.forward_steps)?;
                out.push(("gamma", g));
            }
            Ok(out)
        }
    }
}

fn tune(args: &FitArgs) -> Result<()> {
    let inputs = fit_inputs(args)?;
    let mut text = String::from("parameter,candidate,mean_error,se,selected_min,selected_1se\n");
    for (name, curve) in validation(args, &inputs)? {
        for (i, c) in curve.candidates.iter().enumerate() {
            text.push_str(&format!(
                "{name},{c:.6e},{:.8e},{:.8e},{},{}\n",
                curve.mean[i],
                curve.se[i],
                u8::from(i == curve.min_index),
                u8::from(i == curve.one_se_index)
            ));
        }
    }
    emit(args.output.as_deref(), &text)
}

fn fit(args: &FitArgs) -> Result<()> {
    let inputs = fit_inputs(args)?;
    let label = args.method.label();
    let mut text = String::from("date,method,estimate,clipped_flag\n");
    match args.method.order() {
        None => {
            let window = match args.window {
                Some(w) => w,
                None => validation(args, &inputs)?[0].1.selected(inputs.rule) as usize,
            };
            let kind = ratio_kind(args.method, &inputs);
            let est = ratio_estimate(&inputs.x, &inputs.y, &inputs.delay, kind, setting(args), window, None)?;
            for (i, v) in est.values().iter().enumerate() {
                let v = v.map_or_else(|| "NA".to_string(), |v| format!("{v:.8}"));
                text.push_str(&format!("{},{label},{v},{}\n", est.date(i), u8::from(est.clipped()[i])));
            }
        }
        Some(order) => {
            let (lambda, gamma) = match (args.lambda, args.gamma, args.realtime) {
                (Some(l), _, false) => (l, 0.0),
                (Some(l), Some(g), true) => (l, g),
                _ => {
                    let curves = validation(args, &inputs)?;
                    let lambda = args.lambda.unwrap_or_else(|| curves[0].1.selected(inputs.rule));
                    let gamma = args
                        .gamma
                        .or_else(|| curves.get(1).map(|c| c.1.selected(inputs.rule)))
                        .unwrap_or(0.0);
                    (lambda, gamma)
                }
            };
            let spec = if args.realtime {
                DeconvSpec::realtime(order, lambda, gamma)
            } else {
                DeconvSpec::retrospective(order, lambda)
            };
            let result = solve(&inputs.problem, &spec)?;
            log::info!(
                "lambda={lambda:.6e} gamma={gamma:.6e} iterations={} converged={}",
                result.iterations,
                result.converged
            );
            let curve = &result.curve;
            for (i, v) in curve.values().iter().enumerate() {
                text.push_str(&format!("{},{label},{v:.8},0\n", curve.date(i)));
            }
        }
    }
    emit(args.output.as_deref(), &text)
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn evaluate(args: &ConfigArgs, extra: &[(String, String)]) -> Result<()> {
    let cfg = load_config(args, extra)?;
    let report = run_experiment(&cfg)?;
    println!("method,rule,mae_x1e3,se_x1e3");
    for line in report.best_rules() {
        let rule = report.best_rule_of(&line.method).unwrap_or("best");
        let se = line.mae.se.map_or_else(|| "NA".to_string(), |s| format!("{:.4}", s * 1e3));
        println!("{},{rule},{:.4},{se}", line.method, line.mae.mean * 1e3);
    }
    let failed = report.failures().count();
    if failed > 0 {
        eprintln!("{failed} cells failed; see failures.csv");
    }
    println!("wrote {}", cfg.output.display());
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let base = load_config(&args.config, &[])?;
    let offsets = args.offsets.clone().unwrap_or_else(|| match base.setting {
        Setting::Retrospective => vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0],
        Setting::RealTime => vec![-5.0, -3.0, -1.0, 1.0, 3.0, 5.0],
    });
    let list = offsets.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(",");
    let extra = [
        ("misspec_offsets".to_string(), list),
        ("replicates".to_string(), base.misspec_replicates.to_string()),
    ];
    let cfg = load_config(&args.config, &extra)?;
    let report = run_experiment(&cfg)?;
    println!("offset,method,mae_x1e3");
    for l in report.misspec.iter().filter(|l| l.rule == "best") {
        println!("{},{},{:.4}", l.offset, l.method, l.mae.mean * 1e3);
    }
    println!("wrote {}", cfg.output.display());
    Ok(())
}

fn json_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Clean(a) => clean(a),
        Command::Fit(a) => fit(a),
        Command::Tune(a) => tune(a),
        Command::Evaluate(a) => evaluate(a, &[]),
        Command::SweepMisspec(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<sevrate::Error>())
                .map_or("other", sevrate::Error::kind);
            eprintln!(
                "{{\"error\":{{\"kind\":{},\"message\":{}}}}}",
                json_string(kind),
                json_string(&format!("{e:#}"))
            );
            ExitCode::from(2)
        }
    }
}

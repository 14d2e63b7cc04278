use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use collapse_lab::collapse::TokenPreset;
use collapse_lab::counting::{
    counterexample_gap, counting_collapse_demo, fit_count_readout, generic_counting_model, ratio_invariance_check,
};
use collapse_lab::harness::{
    self, emit_svg, parse_config, parse_lengths, parse_list, parse_ratios, preset_registry, seed_range, write_csv,
    write_table, Experiment, ExperimentSpec, PlotSpec,
};
use collapse_lab::selftest;
use collapse_lab::squash::{
    bound_check, bound_consistent, limit_case, path_sum_bound, random_attention, sensitivity_profile,
    write_profile_csv, BoundCheckSpec, BoundConstants,
};
use collapse_lab::{
    collapse::SymbolTable, rng::LabRng, rng::stream, FloatFormat, LabError, Mat64, ModelConfig, PeScheme, Result,
    TokenSequence, Transformer,
};

#[derive(Parser, Debug)]
#[command(name = "collapse-lab", version, about = "Representational collapse and over-squashing experiments")]
struct Cli {
    /// Print the experiment registry and exit.
    #[arg(long)]
    list: bool,
    /// key=value file with defaults for any flag; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (also COLLAPSE_LAB_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Repeated-token collapse sweeps.
    #[command(subcommand)]
    Collapse(CollapseCmd),
    /// Softmax total variation under a perturbed prefix.
    Tv(TvArgs),
    /// Total variation of alternating sequences.
    AltTv(AltTvArgs),
    /// Sensitivity profiles and the path-sum bound.
    #[command(subcommand)]
    Squash(SquashCmd),
    /// Powers of (attention + I)/2.
    LimitCase(LimitArgs),
    /// Ratio invariance and the counting collapse.
    #[command(subcommand)]
    Counting(CountingCmd),
    /// Render a curve CSV as SVG.
    Plot(PlotArgs),
    /// Run the acceptance battery.
    Selftest(SelftestArgs),
}

#[derive(Subcommand, Debug)]
enum CollapseCmd {
    /// Distances between a sequence and the same sequence with its last token repeated.
    Run(SweepArgs),
    /// First length at which the pair becomes bitwise identical.
    Threshold(SweepArgs),
    /// Plain ones against ones with periodic separators.
    Separator {
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long)]
        period: Option<usize>,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct ModelArgs {
    /// Comma list of nope, ape, rope, alibi.
    #[arg(long)]
    pe: Option<String>,
    /// RoPE / sinusoid base.
    #[arg(long)]
    theta: Option<f64>,
    /// ALiBi slope.
    #[arg(long)]
    slope: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Base seed (also COLLAPSE_LAB_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// ones, digits, commas or gaussian.
    #[arg(long)]
    preset: Option<String>,
    /// `a..b` (doubling) or a comma list.
    #[arg(long)]
    lengths: Option<String>,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Comma list of f64, f32, f16, bf16.
    #[arg(long)]
    precision: Option<String>,
    /// Add sinusoids to the token embeddings.
    #[arg(long)]
    embed_ape: bool,
    /// Prepend a start symbol.
    #[arg(long)]
    start_token: bool,
    /// Output CSV (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TvArgs {
    #[arg(long)]
    lengths: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AltTvArgs {
    #[arg(long)]
    lengths: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum SquashCmd {
    /// Frobenius norm of d y_n / d v_i for every token, next to the bound.
    Profile {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random bound-consistent instances checked against the bound.
    BoundCheck {
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        max_n: Option<usize>,
        #[arg(long)]
        max_layers: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    LimitCase(LimitArgs),
}

#[derive(Args, Debug)]
struct LimitArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the identity, which violates the hypothesis.
    #[arg(long)]
    identity: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum CountingCmd {
    /// Class representations for scaled symbol counts.
    RatioCheck {
        #[command(flatten)]
        model: ModelArgs,
        /// e.g. 1:1,1:2,2:3
        #[arg(long)]
        ratios: Option<String>,
        /// e.g. 2,4,8
        #[arg(long)]
        multipliers: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Find consecutive counts whose outputs are bitwise equal.
    CollapseDemo {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        precision: Option<String>,
        #[arg(long)]
        n_max: Option<usize>,
        /// Readout is fitted on counts 1..=train.
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Curve CSV.
    #[arg(long)]
    input: PathBuf,
    /// Output SVG (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    title: Option<String>,
    #[arg(long)]
    linear_x: bool,
    #[arg(long)]
    linear_y: bool,
    /// Smallest value shown on a log y axis.
    #[arg(long)]
    floor: Option<f64>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Directory for the CSV tables.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flag, environment and config-file lookup; earlier sources win.
struct Settings {
    file: BTreeMap<String, String>,
}

impl Settings {
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| LabError::validation(format!("config value {key}='{v}' is not valid"))),
            None => Ok(None),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    fn string(&self, flag: &Option<String>, key: &str, default: &str) -> String {
        flag.clone().or_else(|| self.file.get(key).cloned()).unwrap_or_else(|| default.to_string())
    }

    fn flag(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.get::<bool>(None, key)?.unwrap_or(false))
    }

    fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if let Some(s) = harness::env_seed()? {
            return Ok(s);
        }
        self.or(None, "seed", 0)
    }

    fn pes(&self, m: &ModelArgs, default: &str) -> Result<Vec<PeScheme>> {
        let theta = self.get(m.theta, "theta")?;
        let slope = self.get(m.slope, "slope")?;
        self.string(&m.pe, "pe", default)
            .split(',')
            .map(|t| PeScheme::from_tag(t.trim(), theta, slope))
            .collect()
    }

    fn model(&self, m: &ModelArgs, d: usize, layers: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            layers: self.or(m.layers, "layers", layers)?,
            seed: self.seed(m.seed)?,
            ..ModelConfig::with_dim(self.or(m.d, "d", d)?)
        };
        if cfg.layers == 0 {
            return Err(LabError::validation("layers must be at least 1"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn precisions(&self, flag: &Option<String>, default: &str) -> Result<Vec<FloatFormat>> {
        parse_list(&self.string(flag, "precision", default))
    }

    fn out(&self, flag: &Option<PathBuf>) -> Option<PathBuf> {
        flag.clone().or_else(|| self.file.get("out").map(PathBuf::from))
    }
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            Box::new(BufWriter::new(File::create(p)?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn sweep_spec(s: &Settings, a: &SweepArgs, experiment: Experiment, precision: &str) -> Result<ExperimentSpec> {
    let model = s.model(&a.model, 64, 1)?;
    let base = model.seed;
    Ok(ExperimentSpec {
        preset: s.string(&a.preset, "preset", "ones").parse::<TokenPreset>()?,
        pes: s.pes(&a.model, "nope")?,
        precisions: s.precisions(&a.precision, precision)?,
        embed_ape: s.flag(a.embed_ape, "embed-ape")?,
        start_token: s.flag(a.start_token, "start-token")?,
        model,
        ..ExperimentSpec::new(
            experiment,
            parse_lengths(&s.string(&a.lengths, "lengths", "16..4096"))?,
            seed_range(base, s.or(a.seeds, "seeds", 5)?),
        )
    })
}

fn run_sweep(s: &Settings, a: &SweepArgs, experiment: Experiment, precision: &str) -> Result<()> {
    let spec = sweep_spec(s, a, experiment, precision)?;
    let rows = harness::run(&spec)?;
    if spec.experiment == Experiment::Threshold {
        for pe in &spec.pes {
            for fmt in &spec.precisions {
                let firsts: Vec<String> = spec
                    .seeds
                    .iter()
                    .map(|&seed| {
                        rows.iter()
                            .filter(|r| {
                                r.pe == pe.tag() && r.precision == fmt.tag() && r.seed == seed && r.metric == "identical" && r.value == 1.0
                            })
                            .map(|r| r.n)
                            .min()
                            .map_or("none".into(), |n| n.to_string())
                    })
                    .collect();
                eprintln!("threshold {} {}: {}", pe.tag(), fmt.tag(), firsts.join(" "));
            }
        }
    }
    write_csv(open_out(s.out(&a.out).as_deref())?, &rows)
}

fn squash_profile(s: &Settings, m: &ModelArgs, n: Option<usize>, out: &Option<PathBuf>) -> Result<()> {
    let n = s.or(n, "n", 16)?;
    let pe = *s.pes(m, "nope")?.first().expect("non-empty");
    let cfg = bound_consistent(&ModelConfig { pe, ..s.model(m, 16, 2)? });
    let model = Transformer::init(cfg.clone())?;
    let mut rng = LabRng::new(cfg.seed, stream::DATA);
    let seq = TokenSequence::new((0..n).map(|_| rng.gaussian_vec(cfg.d, 1.0)).collect())?;
    let frozen = model.forward(&seq)?.attention;
    let profile = sensitivity_profile(&model, &seq, Some(&frozen))?;
    let bound = path_sum_bound(&frozen, &BoundConstants::for_model(&model)?)?;
    let root_d = (cfg.d as f64).sqrt();
    let scaled: Vec<f64> = bound.values().iter().map(|b| root_d * b).collect();
    write_profile_csv(open_out(s.out(out).as_deref())?, &profile.frobenius(), &scaled)
}

fn squash_bound_check(s: &Settings, spec: BoundCheckSpec, out: &Option<PathBuf>) -> Result<()> {
    let report = bound_check(&spec)?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.instance.to_string(),
                r.seed.to_string(),
                r.n.to_string(),
                r.layers.to_string(),
                r.token.to_string(),
                format!("{:e}", r.spectral),
                format!("{:e}", r.frobenius),
                format!("{:e}", r.bound),
                r.holds.to_string(),
            ]
        })
        .collect();
    write_table(
        open_out(s.out(out).as_deref())?,
        &["instance", "seed", "n", "layers", "token", "spectral", "frobenius", "bound", "holds"],
        &rows,
    )?;
    let violations = report.violations().len();
    eprintln!("{violations} violations over {} rows, tightest spectral/bound {:.3}", report.rows.len(), report.tightest());
    if violations > 0 {
        return Err(LabError::Invariant(format!("{violations} bound violations")));
    }
    Ok(())
}

fn run_limit(s: &Settings, a: &LimitArgs) -> Result<()> {
    let n = s.or(a.n, "n", 16)?;
    if n == 0 {
        return Err(LabError::validation("n must be at least 1"));
    }
    let lambda = if s.flag(a.identity, "identity")? {
        Mat64::identity(n)
    } else {
        random_attention(n, &mut LabRng::new(s.seed(a.seed)?, stream::DATA))
    };
    let report = limit_case(&lambda, s.or(a.l_max, "l-max", 4096)?)?;
    let rows: Vec<Vec<String>> = report
        .distances
        .iter()
        .enumerate()
        .map(|(l, d)| vec![(l + 1).to_string(), format!("{d:e}")])
        .collect();
    write_table(open_out(s.out(&a.out).as_deref())?, &["power", "distance"], &rows)?;
    match report.converged_at {
        Some(l) => eprintln!("converged at L = {l}"),
        None => eprintln!(
            "no convergence (final distance {:e}); hypothesis holds: {}",
            report.final_distance(),
            report.hypothesis_holds
        ),
    }
    Ok(())
}

fn run_counting(s: &Settings, cmd: &CountingCmd) -> Result<()> {
    match cmd {
        CountingCmd::RatioCheck { model, ratios, multipliers, out } => {
            let cfg = s.model(model, 16, 1)?;
            let symbols = SymbolTable::new(cfg.d, 0);
            let (m, used) = generic_counting_model(cfg.d, cfg.layers, cfg.seed, &symbols)?;
            let ratios = parse_ratios(&s.string(ratios, "ratios", "1:1,1:2,2:3"))?;
            let multipliers: Vec<usize> = parse_list(&s.string(multipliers, "multipliers", "2,4,8"))?;
            let report = ratio_invariance_check(&m, &symbols, &ratios, &multipliers)?;
            let rows: Vec<Vec<String>> = report
                .rows
                .iter()
                .map(|r| vec![r.n0.to_string(), r.n1.to_string(), r.multiplier.to_string(), format!("{:e}", r.gap)])
                .collect();
            write_table(open_out(s.out(out).as_deref())?, &["n0", "n1", "multiplier", "gap"], &rows)?;
            eprintln!(
                "weights seed {used}: max gap {:e}; 1:1 vs 1:2 gap {:e}",
                report.max_gap(),
                counterexample_gap(&m, &symbols, (1, 1), (1, 2))?
            );
            Ok(())
        }
        CountingCmd::CollapseDemo { model, precision, n_max, train, out } => {
            let pe = *s.pes(model, "rope")?.first().expect("non-empty");
            let cfg = ModelConfig { pe, ..s.model(model, 64, 1)? };
            let symbols = SymbolTable::new(cfg.d, 0);
            let m = Transformer::init(cfg)?;
            let train: Vec<usize> = (1..=s.or(*train, "train", 16)?).collect();
            let fit = fit_count_readout(&m, &symbols, &train)?;
            let fmt: FloatFormat = s.string(precision, "precision", "bf16").parse()?;
            let demo = counting_collapse_demo(&m, &fit.readout, &symbols, fmt, s.or(*n_max, "n-max", 8192)?)?;
            let rows: Vec<Vec<String>> = demo
                .checked
                .iter()
                .map(|&n| vec![fmt.tag().to_string(), n.to_string(), (demo.collapse_at == Some(n)).to_string()])
                .collect();
            write_table(open_out(s.out(out).as_deref())?, &["precision", "n", "identical_to_next"], &rows)?;
            match (demo.collapse_at, demo.predictions) {
                (Some(n), Some((a, b))) => {
                    eprintln!("counts {n} and {} give identical {fmt} outputs; readout says {a} and {b}", n + 1)
                }
                _ => eprintln!("no collapse found"),
            }
            Ok(())
        }
    }
}

fn run_plot(s: &Settings, a: &PlotArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input)?;
    let spec = PlotSpec {
        metric: s.string(&a.metric, "metric", "l1"),
        title: s.string(&a.title, "title", ""),
        log_x: !a.linear_x,
        log_y: !a.linear_y,
        floor: s.or(a.floor, "floor", harness::LOG_FLOOR)?,
        ..PlotSpec::default()
    };
    let svg = emit_svg(&text, &spec)?;
    let mut out = open_out(s.out(&a.out).as_deref())?;
    out.write_all(svg.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn run_selftest(s: &Settings, a: &SelftestArgs) -> Result<bool> {
    let dir = s.out(&a.out).unwrap_or_else(|| PathBuf::from("selftest-out"));
    let mut all = true;
    for (id, _) in selftest::CRITERIA {
        let r = selftest::run_criterion(id);
        println!("{}", r.outcome.line());
        selftest::write_artifacts(&dir, &r.artifacts)?;
        all &= r.outcome.passed;
    }
    println!("{}", if all { "all criteria passed" } else { "some criteria failed" });
    Ok(all)
}

fn print_registry() {
    let mut out = io::stdout().lock();
    for e in preset_registry() {
        if writeln!(out, "{:<11} {:<58} {}", e.family, e.command, e.anchor).is_err() {
            break;
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let file = match &cli.config {
        Some(p) => parse_config(&std::fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    let s = Settings { file };
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => harness::env_threads()?,
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(LabError::validation("thread count must be at least 1"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    if cli.list {
        print_registry();
        return Ok(ExitCode::SUCCESS);
    }
    let Some(command) = cli.command else {
        return Err(LabError::validation("no subcommand given (try --help or --list)"));
    };
    match command {
        Command::Collapse(CollapseCmd::Run(a)) => run_sweep(&s, &a, Experiment::Collapse, "f64")?,
        Command::Collapse(CollapseCmd::Threshold(a)) => run_sweep(&s, &a, Experiment::Threshold, "bf16")?,
        Command::Collapse(CollapseCmd::Separator { sweep, period }) => {
            let period = s.or(period, "period", 3)?;
            run_sweep(&s, &sweep, Experiment::Separator { period }, "f64")?
        }
        Command::Tv(a) => {
            let spec = ExperimentSpec::new(
                Experiment::Tv {
                    k: s.or(a.k, "k", 200)?,
                    noise: s.or(a.noise, "noise", 0.1)?,
                },
                parse_lengths(&s.string(&a.lengths, "lengths", "1000,10000,100000"))?,
                seed_range(s.seed(a.seed)?, s.or(a.seeds, "seeds", 5)?),
            );
            write_csv(open_out(s.out(&a.out).as_deref())?, &harness::run(&spec)?)?
        }
        Command::AltTv(a) => {
            let spec = ExperimentSpec::new(Experiment::AltTv, parse_lengths(&s.string(&a.lengths, "lengths", "2..8192"))?, vec![0]);
            write_csv(open_out(s.out(&a.out).as_deref())?, &harness::run(&spec)?)?
        }
        Command::Squash(SquashCmd::Profile { model, n, out }) => squash_profile(&s, &model, n, &out)?,
        Command::Squash(SquashCmd::BoundCheck { instances, max_n, max_layers, d, seed, out }) => {
            let spec = BoundCheckSpec {
                instances: s.or(instances, "instances", 100)?,
                max_n: s.or(max_n, "max-n", 16)?,
                max_layers: s.or(max_layers, "max-layers", 3)?,
                d: s.or(d, "d", 16)?,
                seed: s.seed(seed)?,
            };
            squash_bound_check(&s, spec, &out)?
        }
        Command::Squash(SquashCmd::LimitCase(a)) | Command::LimitCase(a) => run_limit(&s, &a)?,
        Command::Counting(cmd) => run_counting(&s, &cmd)?,
        Command::Plot(a) => run_plot(&s, &a)?,
        Command::Selftest(a) => {
            if !run_selftest(&s, &a)? {
                return Ok(ExitCode::from(selftest::EXIT_FAILED as u8));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! The acceptance battery: fourteen numerical checks, each producing a
//! pass/fail outcome and the CSV tables it was decided on.

use std::path::Path;
use std::time::{Duration, Instant};

use crate::collapse::{
    alternating_tv_limit, softmax_tail_gap, tv_oracle_bound, SymbolTable, TokenPreset,
    DEFAULT_ENTRY_BOUND,
};
use crate::counting::{
    counterexample_gap, fit_count_readout, generic_counting_model, permutation_gap, ratio_invariance_check,
    counting_collapse_demo,
};
use crate::error::{LabError, Result};
use crate::harness::{run, write_csv, write_table, Experiment, ExperimentSpec, ResultRow};
use crate::model::{fmt_value, AttentionStack, ModelConfig, TokenSequence, Transformer};
use crate::numerics::{median, FloatFormat, Mat64};
use crate::posenc::PeScheme;
use crate::rng::{stream, LabRng};
use crate::squash::{
    bound_check, causality_violations, fd_relative_error, limit_case, path_sums, path_sums_enumerated,
    random_attention, stochastic_lemma_checks, BoundCheckSpec,
};

/// Lengths at or above this have a softmax tail gap below `1e-3`.
///
/// With entries in `[-10, 10]` the gap is at most `e^{b+c} / Z^2 <= e^20 / Z^2`,
/// where `Z` sums `n - 1` weights of mean `sinh(10)/10 ~ 1101`. The gap drops
/// below `1e-3` once `Z > 7e5`, i.e. `n ~ 630` at the mean; `2000` leaves a
/// factor three for fluctuations of `Z`.
pub const TAIL_GAP_MIN_N: usize = 2000;
/// Required ratio of separated to plain distances at `n = 2048`.
pub const SEPARATOR_MARGIN: f64 = 1.5;
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const EXIT_FAILED: i32 = 3;

pub const CRITERIA: [(u8, &str); 14] = [
    (1, "softmax tail gap"),
    (2, "alternating total variation"),
    (3, "total variation decay"),
    (4, "synthetic collapse"),
    (5, "collapse per positional encoding"),
    (6, "separator mitigation"),
    (7, "precision thresholds"),
    (8, "jacobian cross-validation"),
    (9, "path-sum bound"),
    (10, "limit case"),
    (11, "stochastic matrix lemmas"),
    (12, "ratio invariance"),
    (13, "counting collapse"),
    (14, "determinism"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "{} C{:02} {:<32} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// A CSV table produced by a criterion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionRun {
    pub outcome: Outcome,
    pub artifacts: Vec<Artifact>,
}

struct Check {
    passed: bool,
    detail: String,
    artifacts: Vec<Artifact>,
    budget: Option<Duration>,
}

fn name_of(id: u8) -> &'static str {
    CRITERIA.iter().find(|c| c.0 == id).map(|c| c.1).unwrap_or("unknown")
}

fn rows_artifact(name: &str, rows: &[ResultRow]) -> Result<Artifact> {
    let mut bytes = Vec::new();
    write_csv(&mut bytes, rows)?;
    Ok(Artifact { name: name.into(), bytes })
}

fn table_artifact(name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<Artifact> {
    let mut bytes = Vec::new();
    write_table(&mut bytes, header, rows)?;
    Ok(Artifact { name: name.into(), bytes })
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

/// Runs one criterion. Errors inside a check count as a failure.
pub fn run_criterion(id: u8) -> CriterionRun {
    let start = Instant::now();
    let result = match id {
        1 => tail_gap(),
        2 => alternating(),
        3 => tv_decay(),
        4 => synthetic_collapse(),
        5 => pe_ablation(),
        6 => separator(),
        7 => thresholds(),
        8 => jacobians(),
        9 => path_bound(),
        10 => limit(),
        11 => lemmas(),
        12 => ratios(),
        13 => counting(),
        14 => determinism(),
        other => Err(LabError::validation(format!("no criterion {other}"))),
    };
    let elapsed = start.elapsed();
    let (passed, detail, artifacts) = match result {
        Ok(c) => match c.budget {
            Some(b) if elapsed > b => (false, format!("{}; over the {}s budget", c.detail, b.as_secs()), c.artifacts),
            _ => (c.passed, c.detail, c.artifacts),
        },
        Err(e) => (false, format!("error: {e}"), Vec::new()),
    };
    CriterionRun {
        outcome: Outcome {
            id,
            name: name_of(id),
            passed,
            detail,
            elapsed,
        },
        artifacts,
    }
}

/// Runs every criterion, writing artifacts to `out` if given.
pub fn run_all(out: Option<&Path>) -> Result<Vec<CriterionRun>> {
    let mut runs = Vec::new();
    for (id, _) in CRITERIA {
        let r = run_criterion(id);
        log::info!("{}", r.outcome.line());
        if let Some(dir) = out {
            write_artifacts(dir, &r.artifacts)?;
        }
        runs.push(r);
    }
    Ok(runs)
}

pub fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for a in artifacts {
        std::fs::write(dir.join(&a.name), &a.bytes)?;
    }
    Ok(())
}

/// Every CSV table of criteria 1 to 13.
pub fn collect_artifacts() -> Vec<Artifact> {
    (1..=13).flat_map(|id| run_criterion(id).artifacts).collect()
}

fn tail_gap() -> Result<Check> {
    const INSTANCES: u64 = 10_000;
    const MAX_N: f64 = 1e4;
    let rows = (0..INSTANCES)
        .map(|i| {
            let mut rng = LabRng::substream(0, stream::DATA, i);
            let n = (MAX_N.powf(rng.uniform()).floor() as usize).clamp(2, MAX_N as usize);
            let b_ = DEFAULT_ENTRY_BOUND;
            let a: Vec<f64> = (0..n - 1).map(|_| rng.uniform_range(-b_, b_)).collect();
            let b = rng.uniform_range(-b_, b_);
            let c = rng.uniform_range(-b_, b_);
            Ok((i, n, softmax_tail_gap(&a, b, c, b_)?.gap))
        })
        .collect::<Result<Vec<_>>>()?;
    let nonpositive = rows.iter().filter(|r| !(r.2 > 0.0)).count();
    let large_tail = rows.iter().filter(|r| r.1 >= TAIL_GAP_MIN_N && r.2 >= 1e-3).count();
    let observed = rows.iter().filter(|r| r.2 >= 1e-3).map(|r| r.1).max().unwrap_or(0);
    let table: Vec<Vec<String>> = rows.iter().map(|r| vec![r.0.to_string(), r.1.to_string(), fmt_value(r.2)]).collect();
    Ok(Check {
        passed: nonpositive == 0 && large_tail == 0,
        detail: format!(
            "{nonpositive} non-positive gaps, {large_tail} gaps >= 1e-3 at n >= {TAIL_GAP_MIN_N}; largest n with gap >= 1e-3: {observed}"
        ),
        artifacts: vec![table_artifact("tail_gap.csv", &["instance", "n", "gap"], &table)?],
        budget: secs(10),
    })
}

fn alternating() -> Result<Check> {
    let lengths: Vec<usize> = (1..=5000).map(|k| 2 * k).collect();
    let rows = run(&ExperimentSpec::new(Experiment::AltTv, lengths, vec![0]))?;
    let limit = alternating_tv_limit();
    let worst = rows.iter().map(|r| (r.value - limit).abs()).fold(0.0, f64::max);
    Ok(Check {
        passed: worst <= 1e-12 && rows.len() == 5000,
        detail: format!("max |tv - {limit:.7}| = {worst:.2e} over {} lengths", rows.len()),
        artifacts: vec![rows_artifact("alt_tv.csv", &rows)?],
        budget: secs(5),
    })
}

fn tv_decay() -> Result<Check> {
    let (k, noise) = (200, 0.1);
    let lengths = vec![1_000, 10_000, 100_000];
    let rows = run(&ExperimentSpec::new(Experiment::Tv { k, noise }, lengths.clone(), SEEDS.to_vec()))?;
    let medians: Vec<f64> = lengths
        .iter()
        .map(|&n| median(&rows.iter().filter(|r| r.n == n).map(|r| r.value).collect::<Vec<_>>()))
        .collect();
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let bound = tv_oracle_bound(100_000, k, noise);
    let worst = rows.iter().filter(|r| r.n == 100_000).map(|r| r.value).fold(0.0, f64::max);
    Ok(Check {
        passed: decreasing && worst < bound,
        detail: format!(
            "median tv {}; max tv at 1e5 {worst:.3e} vs bound {bound:.3e}",
            medians.iter().map(|m| format!("{m:.3e}")).collect::<Vec<_>>().join(" > ")
        ),
        artifacts: vec![rows_artifact("tv.csv", &rows)?],
        budget: secs(30),
    })
}

fn median_at(rows: &[ResultRow], pe: &str, n: usize) -> f64 {
    median(&rows.iter().filter(|r| r.pe == pe && r.n == n && r.metric == "l1").map(|r| r.value).collect::<Vec<_>>())
}

fn synthetic_collapse() -> Result<Check> {
    let spec = ExperimentSpec {
        preset: TokenPreset::Gaussian,
        // Sinusoids enter through the embeddings only, as an absolute PE.
        pes: vec![PeScheme::NoPe],
        embed_ape: true,
        ..ExperimentSpec::new(Experiment::Collapse, vec![16, 64, 256, 1024, 4096], SEEDS.to_vec())
    };
    let rows = run(&spec)?;
    let pe = rows.first().map(|r| r.pe.clone()).unwrap_or_default();
    let (short, long) = (median_at(&rows, &pe, 16), median_at(&rows, &pe, 4096));
    Ok(Check {
        passed: long < 0.1 * short,
        detail: format!("{pe}: median l1 {short:.3e} at n=16, {long:.3e} at n=4096 (ratio {:.3e})", long / short),
        artifacts: vec![rows_artifact("collapse_ape.csv", &rows)?],
        budget: secs(120),
    })
}

fn pe_ablation() -> Result<Check> {
    let spec = ExperimentSpec {
        preset: TokenPreset::Gaussian,
        pes: PeScheme::all_default().to_vec(),
        ..ExperimentSpec::new(Experiment::Collapse, vec![64, 256, 1024, 4096], SEEDS.to_vec())
    };
    let rows = run(&spec)?;
    let mut failing = Vec::new();
    let mut ratios = Vec::new();
    for pe in PeScheme::all_default() {
        let at = |n: usize, seed: u64| {
            rows.iter()
                .find(|r| r.pe == pe.tag() && r.n == n && r.seed == seed && r.metric == "l1")
                .map(|r| r.value)
                .unwrap_or(f64::NAN)
        };
        let mut worst: f64 = 0.0;
        for seed in SEEDS {
            let (a, b) = (at(64, seed), at(4096, seed));
            worst = worst.max(b / a);
            if !(b < a) {
                failing.push(format!("{}/{seed}", pe.tag()));
            }
        }
        ratios.push(format!("{} {worst:.3}", pe.tag()));
    }
    Ok(Check {
        passed: failing.is_empty(),
        detail: format!("worst d(4096)/d(64): {}; failing {:?}", ratios.join(", "), failing),
        artifacts: vec![rows_artifact("collapse_pe.csv", &rows)?],
        budget: secs(300),
    })
}

fn separator() -> Result<Check> {
    let n = 2048;
    let spec = ExperimentSpec {
        start_token: true,
        pes: PeScheme::all_default().to_vec(),
        ..ExperimentSpec::new(Experiment::Separator { period: 3 }, vec![16, 256, n], SEEDS.to_vec())
    };
    let rows = run(&spec)?;
    let mut failing = Vec::new();
    let mut ratios = Vec::new();
    for pe in PeScheme::all_default() {
        let at = |preset: &str, seed: u64| {
            rows.iter()
                .find(|r| r.pe == pe.tag() && r.preset.starts_with(preset) && r.n == n && r.seed == seed && r.metric == "l1")
                .map(|r| r.value)
                .unwrap_or(f64::NAN)
        };
        let mut min_ratio = f64::INFINITY;
        for seed in SEEDS {
            let (plain, sep) = (at("ones", seed), at("commas", seed));
            min_ratio = min_ratio.min(sep / plain);
            if !(sep > SEPARATOR_MARGIN * plain) {
                failing.push(format!("{}/{seed}", pe.tag()));
            }
        }
        ratios.push(format!("{} {min_ratio:.3}", pe.tag()));
    }
    Ok(Check {
        passed: failing.is_empty(),
        detail: format!("min separated/plain at n={n}: {}; failing {:?}", ratios.join(", "), failing),
        artifacts: vec![rows_artifact("separator.csv", &rows)?],
        budget: None,
    })
}

fn thresholds() -> Result<Check> {
    let lengths: Vec<usize> = (0..=13).map(|k| 1usize << k).collect();
    let spec = ExperimentSpec {
        experiment: Experiment::Threshold,
        start_token: true,
        pes: PeScheme::all_default().to_vec(),
        precisions: vec![FloatFormat::BFloat16, FloatFormat::Binary32],
        ..ExperimentSpec::new(Experiment::Threshold, lengths, SEEDS.to_vec())
    };
    let rows = run(&spec)?;
    let first = |pe: &str, fmt: FloatFormat, seed: u64| {
        rows.iter()
            .filter(|r| r.pe == pe && r.precision == fmt.tag() && r.seed == seed && r.metric == "identical" && r.value == 1.0)
            .map(|r| r.n)
            .min()
    };
    let mut problems = Vec::new();
    let mut summary = Vec::new();
    for pe in PeScheme::all_default() {
        let mut worst_bf = 0;
        let mut f32_hits = 0;
        for seed in SEEDS {
            let bf = first(pe.tag(), FloatFormat::BFloat16, seed);
            let single = first(pe.tag(), FloatFormat::Binary32, seed);
            match bf {
                Some(t) if t <= 8192 => worst_bf = worst_bf.max(t),
                _ => problems.push(format!("{}/{seed}: no bf16 collapse", pe.tag())),
            }
            if let Some(s) = single {
                f32_hits += 1;
                if bf.map_or(true, |b| b > s) {
                    problems.push(format!("{}/{seed}: bf16 {bf:?} > f32 {s}", pe.tag()));
                }
            }
        }
        summary.push(format!("{} bf16<={worst_bf} f32 {f32_hits}/5", pe.tag()));
    }
    Ok(Check {
        passed: problems.is_empty(),
        detail: format!("{}; problems {:?}", summary.join(", "), problems),
        artifacts: vec![rows_artifact("threshold.csv", &rows)?],
        budget: None,
    })
}

fn jacobians() -> Result<Check> {
    let mut table = Vec::new();
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    for i in 0..20u64 {
        let mut rng = LabRng::substream(0, stream::DATA, i);
        let n = 1 + rng.below(16);
        let layers = 1 + rng.below(3);
        let cfg = ModelConfig {
            layers,
            seed: i,
            pe: PeScheme::all_default()[i as usize % 4],
            ..ModelConfig::with_dim(16)
        };
        let model = Transformer::init(cfg)?;
        let seq = TokenSequence::new((0..n).map(|_| rng.gaussian_vec(16, 1.0)).collect())?;
        for token in 0..n {
            let err = fd_relative_error(&model, &seq, token, 1e-5)?;
            worst = worst.max(err);
            table.push(vec![i.to_string(), n.to_string(), layers.to_string(), token.to_string(), fmt_value(err)]);
        }
        violations += causality_violations(&model, &seq)?;
    }
    Ok(Check {
        passed: worst < 1e-5 && violations == 0,
        detail: format!("max relative error {worst:.2e}, {violations} non-causal derivative entries"),
        artifacts: vec![table_artifact("jacobian.csv", &["instance", "n", "layers", "token", "rel_error"], &table)?],
        budget: None,
    })
}

fn path_bound() -> Result<Check> {
    let report = bound_check(&BoundCheckSpec::default())?;
    let table: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.instance.to_string(),
                r.seed.to_string(),
                r.n.to_string(),
                r.layers.to_string(),
                r.token.to_string(),
                fmt_value(r.spectral),
                fmt_value(r.frobenius),
                fmt_value(r.bound),
            ]
        })
        .collect();
    let mut enum_diff: f64 = 0.0;
    let mut stacks = 0;
    for n in 1..=6 {
        for layers in 1..=3 {
            for rep in 0..5u64 {
                let mut rng = LabRng::substream((n * 10 + layers) as u64, stream::DATA, rep);
                let mats: Vec<Mat64> = (0..layers).map(|_| random_attention(n, &mut rng)).collect();
                let stack = AttentionStack::new(mats)?;
                let beta = rng.uniform_range(0.5, 2.0);
                let (a, b) = (path_sums(&stack, beta)?, path_sums_enumerated(&stack, beta)?);
                enum_diff = enum_diff.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
                stacks += 1;
            }
        }
    }
    let violations = report.violations().len();
    Ok(Check {
        passed: violations == 0 && enum_diff <= 1e-10,
        detail: format!(
            "{violations} violations over {} rows (tightest spectral/bound {:.3}); enumeration vs product max diff {enum_diff:.2e} over {stacks} stacks",
            report.rows.len(),
            report.tightest()
        ),
        artifacts: vec![table_artifact(
            "bound.csv",
            &["instance", "seed", "n", "layers", "token", "spectral", "frobenius", "bound"],
            &table,
        )?],
        budget: None,
    })
}

fn limit() -> Result<Check> {
    let mut table = Vec::new();
    let mut unconverged = 0;
    for i in 0..20u64 {
        let mut rng = LabRng::substream(0, stream::DATA, i);
        let n = 2 + rng.below(63);
        let report = limit_case(&random_attention(n, &mut rng), 4096)?;
        if report.converged_at.is_none() || !report.hypothesis_holds {
            unconverged += 1;
        }
        table.push(vec![
            i.to_string(),
            n.to_string(),
            report.converged_at.map(|l| l.to_string()).unwrap_or_default(),
            fmt_value(report.final_distance()),
        ]);
    }
    let identity = limit_case(&Mat64::identity(8), 4096)?;
    let flagged = !identity.hypothesis_holds && identity.converged_at.is_none();
    table.push(vec![
        "identity".into(),
        "8".into(),
        identity.converged_at.map(|l| l.to_string()).unwrap_or_default(),
        fmt_value(identity.final_distance()),
    ]);
    let slowest = table.iter().filter_map(|r| r[2].parse::<usize>().ok()).max().unwrap_or(0);
    Ok(Check {
        passed: unconverged == 0 && flagged,
        detail: format!(
            "{unconverged}/20 random matrices failed to converge (slowest L = {slowest}); identity flagged: {flagged}"
        ),
        artifacts: vec![table_artifact("limit_case.csv", &["matrix", "n", "converged_at", "final_distance"], &table)?],
        budget: None,
    })
}

fn lemmas() -> Result<Check> {
    let r = stochastic_lemma_checks(1000, 16, 0)?;
    let table = vec![vec![
        r.samples.to_string(),
        fmt_value(r.eigvec_error),
        fmt_value(r.spectral_radius),
        fmt_value(r.product_row_error),
        r.products_triangular.to_string(),
        r.products_nonnegative.to_string(),
    ]];
    Ok(Check {
        passed: r.holds(),
        detail: format!(
            "|A1-1| {:.1e}, radius {:.12}, product row error {:.1e}, triangular {}, nonnegative {}",
            r.eigvec_error, r.spectral_radius, r.product_row_error, r.products_triangular, r.products_nonnegative
        ),
        artifacts: vec![table_artifact(
            "lemmas.csv",
            &["samples", "eigvec_error", "spectral_radius", "product_row_error", "triangular", "nonnegative"],
            &table,
        )?],
        budget: None,
    })
}

fn ratios() -> Result<Check> {
    let symbols = SymbolTable::new(16, 0);
    let ratios = [(1, 1), (1, 2), (2, 3)];
    let multipliers = [2, 4, 8];
    let mut table = Vec::new();
    let (mut ratio_gap, mut perm_gap, mut counter): (f64, f64, f64) = (0.0, 0.0, f64::INFINITY);
    for layers in 1..=3 {
        let (model, _) = generic_counting_model(16, layers, 0, &symbols)?;
        let report = ratio_invariance_check(&model, &symbols, &ratios, &multipliers)?;
        for r in &report.rows {
            table.push(vec![
                layers.to_string(),
                r.n0.to_string(),
                r.n1.to_string(),
                r.multiplier.to_string(),
                fmt_value(r.gap),
            ]);
        }
        ratio_gap = ratio_gap.max(report.max_gap());
        perm_gap = perm_gap.max(permutation_gap(&model, &symbols, 5, 7, layers as u64)?);
        counter = counter.min(counterexample_gap(&model, &symbols, (1, 1), (1, 2))?);
    }
    Ok(Check {
        passed: ratio_gap < 1e-10 && perm_gap <= 1e-12 && counter > 1e-6,
        detail: format!("ratio gap {ratio_gap:.2e}, permutation gap {perm_gap:.2e}, 1:1 vs 1:2 gap {counter:.3e}"),
        artifacts: vec![table_artifact("ratio.csv", &["layers", "n0", "n1", "multiplier", "gap"], &table)?],
        budget: None,
    })
}

fn counting() -> Result<Check> {
    let symbols = SymbolTable::new(64, 0);
    let model = Transformer::init(ModelConfig {
        pe: PeScheme::rope(),
        ..ModelConfig::with_dim(64)
    })?;
    let train: Vec<usize> = (1..=16).collect();
    let fit = fit_count_readout(&model, &symbols, &train)?;
    let demo = counting_collapse_demo(&model, &fit.readout, &symbols, FloatFormat::BFloat16, 8192)?;
    let table: Vec<Vec<String>> = demo
        .checked
        .iter()
        .map(|&n| {
            let collapsed = demo.collapse_at == Some(n);
            vec![demo.format.tag().to_string(), n.to_string(), collapsed.to_string()]
        })
        .collect();
    let detail = match (demo.collapse_at, demo.predictions) {
        (Some(n), Some((a, b))) => format!(
            "bf16 outputs for counts {n} and {} are bitwise equal; readout says {a} and {b} (train rms {:.2e})",
            n + 1,
            fit.residual
        ),
        _ => format!("no bitwise collapse up to n = {}", demo.checked.last().copied().unwrap_or(0)),
    };
    Ok(Check {
        passed: demo.collapse_at.is_some() && demo.forced_error(),
        detail,
        artifacts: vec![table_artifact("counting.csv", &["precision", "n", "identical_to_next"], &table)?],
        budget: None,
    })
}

fn determinism() -> Result<Check> {
    let a = collect_artifacts();
    let b = collect_artifacts();
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.name.as_str())
        .collect();
    let same_shape = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.name == y.name);
    let bytes: usize = a.iter().map(|x| x.bytes.len()).sum();
    Ok(Check {
        passed: same_shape && differing.is_empty() && !a.is_empty(),
        detail: format!("{} tables, {bytes} bytes; differing {:?}", a.len(), differing),
        artifacts: Vec::new(),
        budget: None,
    })
}

//! Representational collapse.
//!
//! Softmax over a growing sequence spreads its mass thinner, so appending a
//! token moves the distribution less and less (tail gap, total-variation
//! decay), except for sequences whose perturbation grows with them (the
//! alternating construction). Through a Transformer this means the last-token
//! representation of a sequence and of the same sequence with its final token
//! repeated converge with length, and reduced precision eventually makes
//! them bitwise identical.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::model::{ModelConfig, TokenSequence, Transformer};
use crate::posenc::{sinusoid_row, DEFAULT_BASE_THETA};
use crate::numerics::{l1_dist, linf_dist, median, softmax, total_variation, FloatFormat};
use crate::rng::{stream, LabRng};

/// Entry bound for the tail-gap instances.
pub const DEFAULT_ENTRY_BOUND: f64 = 10.0;

/// A sequence and the same sequence with its last token repeated.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePair {
    pub base: TokenSequence,
    pub extended: TokenSequence,
}

pub fn build_repeated_pair(base: &TokenSequence) -> Result<SequencePair> {
    if base.is_empty() {
        return Err(LabError::contract("cannot repeat the last token of an empty sequence"));
    }
    Ok(SequencePair {
        base: base.clone(),
        extended: base.pushed(base.last())?,
    })
}

/// Last-position probabilities of `softmax([a, c])` and `softmax([a, b, c])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailGap {
    pub s_n: f64,
    pub s_star: f64,
    pub gap: f64,
}

/// Inserting `b` before the final entry `c` strictly lowers the softmax mass
/// on `c`; the gap shrinks as `a` grows. All entries must lie in
/// `[-bound, bound]`.
pub fn softmax_tail_gap(a: &[f64], b: f64, c: f64, bound: f64) -> Result<TailGap> {
    if let Some(v) = a.iter().chain([&b, &c]).find(|v| !(v.abs() <= bound)) {
        return Err(LabError::contract(format!("entry {v} exceeds the bound {bound}")));
    }
    let mut short = a.to_vec();
    short.push(c);
    let mut long = a.to_vec();
    long.push(b);
    long.push(c);
    let s_n = *softmax(&short)?.last().expect("non-empty");
    let s_star = *softmax(&long)?.last().expect("non-empty");
    Ok(TailGap {
        s_n,
        s_star,
        gap: s_n - s_star,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvRecord {
    pub n: usize,
    pub seed: u64,
    pub tv: f64,
}

/// Total variation between `softmax(x)` and `softmax(x*)`, with `x` uniform
/// on `[0, 1]^n` and `x*` adding uniform `[0, noise]` to its first `k`
/// entries. One record per `(n, seed)`, sorted by `(n, seed)`.
pub fn tv_decay_experiment(n_values: &[usize], k: usize, noise: f64, seeds: &[u64]) -> Result<Vec<TvRecord>> {
    let min_n = n_values.iter().copied().min().ok_or_else(|| LabError::validation("no lengths given"))?;
    if k >= min_n {
        return Err(LabError::validation(format!("k = {k} must be below the smallest length {min_n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(LabError::validation(format!("noise must be nonnegative, got {noise}")));
    }
    let cells: Vec<(usize, u64)> = n_values.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    let mut out = cells
        .into_par_iter()
        .map(|(n, seed)| {
            let mut data = LabRng::substream(seed, stream::DATA, n as u64);
            let mut noise_rng = LabRng::substream(seed, stream::NOISE, n as u64);
            let x: Vec<f64> = (0..n).map(|_| data.uniform()).collect();
            let mut perturbed = x.clone();
            for v in perturbed.iter_mut().take(k) {
                *v += noise * noise_rng.uniform();
            }
            let tv = total_variation(&softmax(&x)?, &softmax(&perturbed)?)?;
            Ok(TvRecord { n, seed, tv })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|r| (r.n, r.seed));
    Ok(out)
}

/// Upper bound on [`tv_decay_experiment`] values.
///
/// With weights `w_i = e^{x_i}` and `w*_i >= w_i`, the total variation is at
/// most `2 (Z* - Z) / Z`. Entries in `[0, 1]` give `Z >= n`, and each of the
/// `k` perturbed weights grows by at most `e (e^noise - 1)`.
pub fn tv_oracle_bound(n: usize, k: usize, noise: f64) -> f64 {
    2.0 * k as f64 * std::f64::consts::E * noise.exp_m1() / n as f64
}

/// Total variation between the softmax of `(1, 0, 1, 0, ...)` and of
/// `(0, 1, 0, 1, ...)` of even length `n`; equal to `2 (e - 1) / (e + 1)`
/// for every even `n`.
pub fn alternating_tv(n: usize) -> Result<f64> {
    if n < 2 || n % 2 != 0 {
        return Err(LabError::contract(format!("alternating sequences need an even length >= 2, got {n}")));
    }
    let x: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let y: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
    total_variation(&softmax(&x)?, &softmax(&y)?)
}

pub fn alternating_tv_limit() -> f64 {
    let e = std::f64::consts::E;
    2.0 * (e - 1.0) / (e + 1.0)
}

/// Fixed unit-norm symbol vectors: digits `0..=9`, a separator and a start
/// token.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolTable {
    digits: Vec<Vec<f64>>,
    separator: Vec<f64>,
    start: Vec<f64>,
}

impl SymbolTable {
    /// Drawn from the symbols stream of `symbols_seed`, independent of any
    /// weights seed.
    pub fn new(d: usize, symbols_seed: u64) -> Self {
        let mut rng = LabRng::new(symbols_seed, stream::SYMBOLS);
        let digits = (0..10).map(|_| rng.unit_vec(d)).collect();
        let separator = rng.unit_vec(d);
        let start = rng.unit_vec(d);
        SymbolTable { digits, separator, start }
    }

    pub fn digit(&self, k: usize) -> &[f64] {
        &self.digits[k]
    }

    pub fn separator(&self) -> &[f64] {
        &self.separator
    }

    pub fn start(&self) -> &[f64] {
        &self.start
    }

    pub fn dim(&self) -> usize {
        self.separator.len()
    }

    /// Same digits with a different separator vector.
    pub fn with_separator(mut self, separator: Vec<f64>) -> Self {
        self.separator = separator;
        self
    }
}

/// How base sequences of a given length are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenPreset {
    /// `n` copies of the digit one.
    Ones,
    /// `n` digits drawn uniformly per `(seed, n)`.
    Digits,
    /// `n` ones with a separator after every `period`-th one.
    Commas { period: usize },
    /// `n` i.i.d. standard Gaussian vectors per `(seed, n)`.
    Gaussian,
}

impl TokenPreset {
    pub fn name(&self) -> &'static str {
        match self {
            TokenPreset::Ones => "ones",
            TokenPreset::Digits => "digits",
            TokenPreset::Commas { .. } => "commas",
            TokenPreset::Gaussian => "gaussian",
        }
    }

    pub const NAMES: [&'static str; 4] = ["ones", "digits", "commas", "gaussian"];

    /// Base sequence for length parameter `n`.
    pub fn build(&self, n: usize, seed: u64, symbols: &SymbolTable) -> Result<TokenSequence> {
        if n == 0 {
            return Err(LabError::validation("sequence length must be at least 1"));
        }
        let tokens = match *self {
            TokenPreset::Ones => vec![symbols.digit(1).to_vec(); n],
            TokenPreset::Digits => {
                let mut rng = LabRng::substream(seed, stream::DATA, n as u64);
                (0..n).map(|_| symbols.digit(rng.below(10)).to_vec()).collect()
            }
            TokenPreset::Commas { period } => {
                if period < 2 {
                    return Err(LabError::validation(format!("separator period must be >= 2, got {period}")));
                }
                let mut out = Vec::with_capacity(n + n / period);
                for i in 1..=n {
                    out.push(symbols.digit(1).to_vec());
                    if i % period == 0 {
                        out.push(symbols.separator().to_vec());
                    }
                }
                out
            }
            TokenPreset::Gaussian => {
                let mut rng = LabRng::substream(seed, stream::DATA, n as u64);
                (0..n).map(|_| rng.gaussian_vec(symbols.dim(), 1.0)).collect()
            }
        };
        TokenSequence::new(tokens)
    }
}

impl fmt::Display for TokenPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TokenPreset {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ones" => Ok(TokenPreset::Ones),
            "digits" => Ok(TokenPreset::Digits),
            "commas" => Ok(TokenPreset::Commas { period: 3 }),
            "gaussian" => Ok(TokenPreset::Gaussian),
            other => Err(LabError::validation(format!(
                "unknown preset '{other}' (valid: {})",
                TokenPreset::NAMES.join(", ")
            ))),
        }
    }
}

/// Which representation of the last token is compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Measure {
    /// `y_n`, after the final norm.
    #[default]
    Output,
    /// `v_n^(L)`, before the final norm.
    PreNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseRecord {
    pub preset: String,
    pub pe: &'static str,
    pub precision: FloatFormat,
    pub n: usize,
    pub seed: u64,
    pub l1: f64,
    pub linf: f64,
    /// Whether the two compared vectors are bitwise identical.
    pub identical: bool,
}

/// A sweep over lengths and seeds for one model configuration.
#[derive(Debug, Clone)]
pub struct CurveSpec {
    pub model: ModelConfig,
    pub preset: TokenPreset,
    pub n_values: Vec<usize>,
    /// Weights seeds; the data stream of each preset uses the same seed.
    pub seeds: Vec<u64>,
    pub symbols_seed: u64,
    pub measure: Measure,
    /// Add the sinusoid table to the base tokens before the last token is
    /// repeated, as an embedding layer would. The repeated token then carries
    /// the same positional component as the one it copies.
    pub embed_ape: bool,
    /// Prepend the start symbol to every base sequence.
    pub start_token: bool,
}

impl CurveSpec {
    pub fn new(model: ModelConfig, preset: TokenPreset, n_values: Vec<usize>, seeds: Vec<u64>) -> Self {
        CurveSpec {
            model,
            preset,
            n_values,
            seeds,
            symbols_seed: 0,
            measure: Measure::Output,
            embed_ape: false,
            start_token: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() {
            return Err(LabError::validation("no lengths given"));
        }
        if self.seeds.is_empty() {
            return Err(LabError::validation("no seeds given"));
        }
        self.model.validate()
    }
}

fn last_rep(model: &Transformer, seq: &TokenSequence, measure: Measure) -> Result<Vec<f64>> {
    match measure {
        Measure::Output => model.last_token(seq),
        Measure::PreNorm => model.last_state_at(seq, model.config().precision),
    }
}

/// `v_i + s_i` with the default sinusoid table.
pub fn add_sinusoids(seq: &TokenSequence) -> Result<TokenSequence> {
    let d = seq.dim();
    TokenSequence::new(
        seq.tokens()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                t.iter()
                    .zip(sinusoid_row(d, DEFAULT_BASE_THETA, i))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect(),
    )
}

/// Distance between the last-token representations of `base` and of `base`
/// with its last token repeated.
pub fn pair_distance(model: &Transformer, base: &TokenSequence, measure: Measure) -> Result<(f64, f64, bool)> {
    let pair = build_repeated_pair(base)?;
    let a = last_rep(model, &pair.base, measure)?;
    let b = last_rep(model, &pair.extended, measure)?;
    let identical = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok((l1_dist(&a, &b)?, linf_dist(&a, &b)?, identical))
}

/// Runs every `(seed, n)` cell of the sweep. Records are sorted by
/// `(n, seed)`.
pub fn collapse_curve(spec: &CurveSpec) -> Result<Vec<CollapseRecord>> {
    spec.validate()?;
    let symbols = SymbolTable::new(spec.model.d, spec.symbols_seed);
    collapse_curve_with(spec, &symbols)
}

pub fn collapse_curve_with(spec: &CurveSpec, symbols: &SymbolTable) -> Result<Vec<CollapseRecord>> {
    spec.validate()?;
    let models = spec
        .seeds
        .iter()
        .map(|&seed| Transformer::init(ModelConfig { seed, ..spec.model.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..spec.seeds.len())
        .flat_map(|s| spec.n_values.iter().map(move |&n| (s, n)))
        .collect();
    let mut records = cells
        .into_par_iter()
        .map(|(s, n)| {
            let seed = spec.seeds[s];
            let mut base = spec.preset.build(n, seed, symbols)?;
            if spec.start_token {
                base = base.prepended(symbols.start())?;
            }
            if spec.embed_ape {
                base = add_sinusoids(&base)?;
            }
            let (l1, linf, identical) = pair_distance(&models[s], &base, spec.measure)?;
            Ok(CollapseRecord {
                preset: spec.preset.name().to_string(),
                pe: if spec.embed_ape { "ape-embed" } else { spec.model.pe.tag() },
                precision: spec.model.precision,
                n,
                seed,
                l1,
                linf,
                identical,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| (r.n, r.seed));
    Ok(records)
}

/// Median of `metric` over seeds at each length, in increasing `n`.
pub fn median_by_length(records: &[CollapseRecord], metric: impl Fn(&CollapseRecord) -> f64) -> Vec<(usize, f64)> {
    let mut lengths: Vec<usize> = records.iter().map(|r| r.n).collect();
    lengths.sort_unstable();
    lengths.dedup();
    lengths
        .into_iter()
        .map(|n| {
            let values: Vec<f64> = records.iter().filter(|r| r.n == n).map(&metric).collect();
            (n, median(&values))
        })
        .collect()
}

/// Looks up the record for `(n, seed)`.
pub fn record_at(records: &[CollapseRecord], n: usize, seed: u64) -> Option<&CollapseRecord> {
    records.iter().find(|r| r.n == n && r.seed == seed)
}

/// Plain repeated-token curve and the same curve with separators.
#[derive(Debug, Clone)]
pub struct SeparatorCurves {
    pub plain: Vec<CollapseRecord>,
    pub separated: Vec<CollapseRecord>,
}

impl SeparatorCurves {
    /// Seeds whose separated distance at `n` is not strictly above the plain
    /// one.
    pub fn failing_seeds(&self, n: usize, seeds: &[u64]) -> Vec<u64> {
        seeds
            .iter()
            .copied()
            .filter(|&s| match (record_at(&self.plain, n, s), record_at(&self.separated, n, s)) {
                (Some(p), Some(q)) => !(q.l1 > p.l1),
                _ => true,
            })
            .collect()
    }
}

/// Repeated ones with and without a separator after every `period` ones.
pub fn separator_experiment(spec: &CurveSpec, period: usize) -> Result<SeparatorCurves> {
    let symbols = SymbolTable::new(spec.model.d, spec.symbols_seed);
    separator_experiment_with(spec, period, &symbols)
}

pub fn separator_experiment_with(spec: &CurveSpec, period: usize, symbols: &SymbolTable) -> Result<SeparatorCurves> {
    if period < 2 {
        return Err(LabError::validation(format!("separator period must be >= 2, got {period}")));
    }
    let plain = collapse_curve_with(
        &CurveSpec {
            preset: TokenPreset::Ones,
            ..spec.clone()
        },
        symbols,
    )?;
    let separated = collapse_curve_with(
        &CurveSpec {
            preset: TokenPreset::Commas { period },
            ..spec.clone()
        },
        symbols,
    )?;
    Ok(SeparatorCurves { plain, separated })
}

/// First length, per seed, at which the pair's last-token representations
/// are bitwise identical.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdReport {
    pub format: FloatFormat,
    pub per_seed: Vec<(u64, Option<usize>)>,
    pub records: Vec<CollapseRecord>,
}

impl ThresholdReport {
    pub fn threshold(&self, seed: u64) -> Option<usize> {
        self.per_seed.iter().find(|(s, _)| *s == seed).and_then(|(_, t)| *t)
    }

    /// Largest per-seed threshold, `None` if some seed never collapsed.
    pub fn worst(&self) -> Option<usize> {
        self.per_seed.iter().map(|(_, t)| *t).collect::<Option<Vec<_>>>()?.into_iter().max()
    }
}

/// Scans `spec.n_values` in increasing order under `fmt`.
pub fn precision_threshold(spec: &CurveSpec, fmt: FloatFormat) -> Result<ThresholdReport> {
    let mut sorted = spec.n_values.clone();
    sorted.sort_unstable();
    sorted.dedup();
    let quantized = CurveSpec {
        model: ModelConfig {
            precision: fmt,
            ..spec.model.clone()
        },
        n_values: sorted.clone(),
        ..spec.clone()
    };
    let records = collapse_curve(&quantized)?;
    let per_seed = spec
        .seeds
        .iter()
        .map(|&s| {
            let first = sorted
                .iter()
                .copied()
                .find(|&n| record_at(&records, n, s).is_some_and(|r| r.identical));
            (s, first)
        })
        .collect();
    Ok(ThresholdReport {
        format: fmt,
        per_seed,
        records,
    })
}

//! Counting.
//!
//! Without positional encodings and without a causal mask, attention over a
//! two-symbol sequence only sees the ratio of the symbol counts: every token
//! of a class gets the same representation, and scaling both counts leaves
//! it unchanged. With a causal mask and positions, counts are visible in
//! principle, but collapse under finite precision makes sequences of
//! consecutive counts indistinguishable, so any readout miscounts one of
//! them.

use rayon::prelude::*;

use crate::collapse::SymbolTable;
use crate::error::{LabError, Result};
use crate::model::{AttentionMask, ModelConfig, NormKind, TokenSequence, Transformer};
use crate::numerics::{dot, linf_dist, FloatFormat, Mat64};
use crate::posenc::PeScheme;
use crate::rng::{stream, LabRng};

/// Same-class tokens must agree this closely at every layer.
pub const CLASS_TOL: f64 = 1e-12;
/// Class representations closer than this count as degenerate weights.
pub const DEGENERATE_TOL: f64 = 1e-6;
pub const RIDGE_LAMBDA: f64 = 1e-8;

/// An arrangement of zero and one symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoSymbolSequence {
    /// `true` marks a one.
    ones: Vec<bool>,
}

impl TwoSymbolSequence {
    pub fn new(ones: Vec<bool>) -> Result<Self> {
        if ones.is_empty() {
            return Err(LabError::validation("a two-symbol sequence needs at least one symbol"));
        }
        Ok(TwoSymbolSequence { ones })
    }

    /// `n0` zeros followed by `n1` ones.
    pub fn blocks(n0: usize, n1: usize) -> Result<Self> {
        Self::new(std::iter::repeat(false).take(n0).chain(std::iter::repeat(true).take(n1)).collect())
    }

    /// A uniformly shuffled arrangement of the same counts.
    pub fn shuffled(n0: usize, n1: usize, seed: u64) -> Result<Self> {
        let mut s = Self::blocks(n0, n1)?;
        let mut rng = LabRng::new(seed, stream::DATA);
        for i in (1..s.ones.len()).rev() {
            let j = rng.below(i + 1);
            s.ones.swap(i, j);
        }
        Ok(s)
    }

    pub fn n0(&self) -> usize {
        self.ones.iter().filter(|o| !**o).count()
    }

    pub fn n1(&self) -> usize {
        self.ones.iter().filter(|o| **o).count()
    }

    pub fn arrangement(&self) -> &[bool] {
        &self.ones
    }

    /// Zeros map to digit 0, ones to digit 1.
    pub fn tokens(&self, symbols: &SymbolTable) -> Result<TokenSequence> {
        TokenSequence::new(
            self.ones
                .iter()
                .map(|&one| symbols.digit(usize::from(one)).to_vec())
                .collect(),
        )
    }
}

/// The model of the ratio argument: no positional encoding, full attention,
/// no norms.
pub fn bidirectional_config(d: usize, layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        layers,
        seed,
        pe: PeScheme::NoPe,
        mask: AttentionMask::Full,
        norm: NormKind::Off,
        ..ModelConfig::with_dim(d)
    }
}

/// Final-layer representation of each class present in the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReps {
    pub zero: Option<Vec<f64>>,
    pub one: Option<Vec<f64>>,
}

impl ClassReps {
    /// Max-abs difference over the classes both sides contain.
    pub fn gap(&self, other: &ClassReps) -> Result<f64> {
        let mut gap: f64 = 0.0;
        let mut shared = 0;
        for (a, b) in [(&self.zero, &other.zero), (&self.one, &other.one)] {
            match (a, b) {
                (Some(a), Some(b)) => {
                    gap = gap.max(linf_dist(a, b)?);
                    shared += 1;
                }
                (None, None) => {}
                _ => return Err(LabError::contract("compared sequences contain different symbol classes")),
            }
        }
        if shared == 0 {
            return Err(LabError::contract("no class to compare"));
        }
        Ok(gap)
    }

    /// Distance between the two classes, if both are present.
    pub fn separation(&self) -> Option<f64> {
        match (&self.zero, &self.one) {
            (Some(a), Some(b)) => linf_dist(a, b).ok(),
            _ => None,
        }
    }
}

/// Runs a position-free, unmasked model and returns one representation per
/// class, checking at every layer that all tokens of a class coincide.
pub fn nope_bidirectional_forward(
    model: &Transformer,
    seq: &TwoSymbolSequence,
    symbols: &SymbolTable,
) -> Result<ClassReps> {
    let cfg = model.config();
    if cfg.pe != PeScheme::NoPe || cfg.mask != AttentionMask::Full {
        return Err(LabError::contract("the ratio argument needs a NoPE model with full attention"));
    }
    let trace = model.forward(&seq.tokens(symbols)?)?;
    let mut layers: Vec<&[Vec<f64>]> = trace.states.iter().map(|s| s.as_slice()).collect();
    layers.push(&trace.outputs);
    for (l, states) in layers.iter().enumerate() {
        for class in [false, true] {
            let mut members = seq.ones.iter().zip(states.iter()).filter(|(c, _)| **c == class).map(|(_, s)| s);
            if let Some(first) = members.next() {
                for (k, other) in members.enumerate() {
                    let gap = linf_dist(first, other)?;
                    if gap > CLASS_TOL {
                        return Err(LabError::Invariant(format!(
                            "layer {l}: token {k} of class {} differs from its class by {gap:e}",
                            u8::from(class)
                        )));
                    }
                }
            }
        }
    }
    let pick = |class: bool| {
        seq.ones
            .iter()
            .position(|c| *c == class)
            .map(|i| trace.outputs[i].clone())
    };
    Ok(ClassReps {
        zero: pick(false),
        one: pick(true),
    })
}

/// A bidirectional model whose two classes stay apart on `(1, 1)`. Seeds
/// are tried from `seed` upwards; degenerate draws are logged and skipped.
pub fn generic_counting_model(d: usize, layers: usize, seed: u64, symbols: &SymbolTable) -> Result<(Transformer, u64)> {
    let probe = TwoSymbolSequence::blocks(1, 1)?;
    for s in seed..seed.saturating_add(100) {
        let model = Transformer::init(bidirectional_config(d, layers, s))?;
        let sep = nope_bidirectional_forward(&model, &probe, symbols)?.separation().unwrap_or(0.0);
        if sep > DEGENERATE_TOL {
            return Ok((model, s));
        }
        log::info!("weights seed {s} leaves the two classes {sep:e} apart; re-seeding");
    }
    Err(LabError::Numerical {
        layer: layers,
        token: 0,
        what: "no non-degenerate weights in 100 seeds".into(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioRow {
    pub n0: usize,
    pub n1: usize,
    pub multiplier: usize,
    /// Class gap between `(n0, n1)` and `(m n0, m n1)`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioReport {
    pub rows: Vec<RatioRow>,
}

impl RatioReport {
    pub fn max_gap(&self) -> f64 {
        self.rows.iter().map(|r| r.gap).fold(0.0, f64::max)
    }
}

pub fn ratio_invariance_check(
    model: &Transformer,
    symbols: &SymbolTable,
    ratios: &[(usize, usize)],
    multipliers: &[usize],
) -> Result<RatioReport> {
    if ratios.is_empty() || multipliers.is_empty() {
        return Err(LabError::validation("ratio check needs ratios and multipliers"));
    }
    if multipliers.contains(&0) {
        return Err(LabError::validation("multipliers must be at least 1"));
    }
    let cells: Vec<((usize, usize), usize)> =
        ratios.iter().flat_map(|&r| multipliers.iter().map(move |&m| (r, m))).collect();
    let rows = cells
        .into_par_iter()
        .map(|((n0, n1), m)| {
            let base = nope_bidirectional_forward(model, &TwoSymbolSequence::blocks(n0, n1)?, symbols)?;
            let scaled = nope_bidirectional_forward(model, &TwoSymbolSequence::blocks(m * n0, m * n1)?, symbols)?;
            Ok(RatioRow {
                n0,
                n1,
                multiplier: m,
                gap: base.gap(&scaled)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RatioReport { rows })
}

/// Class gap between the block arrangement and a shuffled one.
pub fn permutation_gap(model: &Transformer, symbols: &SymbolTable, n0: usize, n1: usize, seed: u64) -> Result<f64> {
    let a = nope_bidirectional_forward(model, &TwoSymbolSequence::blocks(n0, n1)?, symbols)?;
    let b = nope_bidirectional_forward(model, &TwoSymbolSequence::shuffled(n0, n1, seed)?, symbols)?;
    a.gap(&b)
}

/// Class gap between two count pairs with different ratios.
pub fn counterexample_gap(model: &Transformer, symbols: &SymbolTable, a: (usize, usize), b: (usize, usize)) -> Result<f64> {
    let ra = nope_bidirectional_forward(model, &TwoSymbolSequence::blocks(a.0, a.1)?, symbols)?;
    let rb = nope_bidirectional_forward(model, &TwoSymbolSequence::blocks(b.0, b.1)?, symbols)?;
    ra.gap(&rb)
}

/// The ratio check repeated with RMS norms switched on. Norms act per token,
/// so classes stay uniform and the gap stays at rounding level.
pub fn normed_ratio_gap(
    model: &Transformer,
    symbols: &SymbolTable,
    ratios: &[(usize, usize)],
    multipliers: &[usize],
) -> Result<f64> {
    let normed = model.with_config(ModelConfig {
        norm: NormKind::Rms,
        ..model.config().clone()
    })?;
    Ok(ratio_invariance_check(&normed, symbols, ratios, multipliers)?.max_gap())
}

/// The counting sequence: the start symbol followed by `count` ones.
pub fn count_sequence(symbols: &SymbolTable, count: usize) -> Result<TokenSequence> {
    let mut tokens = Vec::with_capacity(count + 1);
    tokens.push(symbols.start().to_vec());
    tokens.extend(std::iter::repeat(symbols.digit(1).to_vec()).take(count));
    TokenSequence::new(tokens)
}

/// Linear count head on `y_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountReadout {
    pub w: Vec<f64>,
    pub b: f64,
}

impl CountReadout {
    pub fn predict(&self, y: &[f64]) -> f64 {
        dot(&self.w, y) + self.b
    }

    pub fn count(&self, y: &[f64]) -> i64 {
        self.predict(y).round() as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutFit {
    pub readout: CountReadout,
    /// Root-mean-square training error.
    pub residual: f64,
    /// Whether the ridge fallback was needed.
    pub ridge: bool,
}

/// Least squares for `[X 1] (w, b) ~ t`, through the Gram matrix of whichever
/// side is smaller. A singular system is retried with ridge `lambda`.
pub fn least_squares(features: &[Vec<f64>], targets: &[f64]) -> Result<(Vec<f64>, bool)> {
    let m = features.len();
    if m == 0 || m != targets.len() {
        return Err(LabError::validation("least squares needs one target per feature row"));
    }
    let rows: Vec<Vec<f64>> = features.iter().map(|f| f.iter().copied().chain([1.0]).collect()).collect();
    let x = Mat64::from_rows(&rows)?;
    let p = x.cols();
    let attempt = |lambda: f64| -> Result<Vec<f64>> {
        if m <= p {
            // Minimum-norm solution x^T (x x^T + lambda I)^-1 t.
            let gram = x.matmul(&x.transpose()).add(&Mat64::identity(m).scale(lambda));
            Ok(x.matvec_t(&gram.solve(targets)?))
        } else {
            let gram = x.transpose().matmul(&x).add(&Mat64::identity(p).scale(lambda));
            gram.solve(&x.matvec_t(targets))
        }
    };
    match attempt(0.0) {
        Ok(sol) => Ok((sol, false)),
        Err(LabError::Contract(_)) => {
            log::info!("singular least-squares system; using ridge {RIDGE_LAMBDA:e}");
            attempt(RIDGE_LAMBDA).map(|s| (s, true))
        }
        Err(e) => Err(e),
    }
}

/// Fits a readout mapping `y_n` of each counting sequence to its count, in
/// binary64.
pub fn fit_count_readout(model: &Transformer, symbols: &SymbolTable, train_counts: &[usize]) -> Result<ReadoutFit> {
    let exact = model.with_config(ModelConfig {
        precision: FloatFormat::Binary64,
        ..model.config().clone()
    })?;
    let features = train_counts
        .par_iter()
        .map(|&c| exact.last_token(&count_sequence(symbols, c)?))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<f64> = train_counts.iter().map(|&c| c as f64).collect();
    let (sol, ridge) = least_squares(&features, &targets)?;
    let (b, w) = sol.split_last().expect("bias term");
    let readout = CountReadout { w: w.to_vec(), b: *b };
    let sq: f64 = features.iter().zip(&targets).map(|(f, t)| (readout.predict(f) - t).powi(2)).sum();
    Ok(ReadoutFit {
        readout,
        residual: (sq / targets.len() as f64).sqrt(),
        ridge,
    })
}

/// Outcome of scanning consecutive counts for identical representations.
#[derive(Debug, Clone, PartialEq)]
pub struct CountingDemo {
    pub format: FloatFormat,
    /// Counts `n` that were checked against `n + 1`.
    pub checked: Vec<usize>,
    /// First `n` whose count-`n` and count-`n+1` outputs are bitwise equal.
    pub collapse_at: Option<usize>,
    /// Readout counts for `n` and `n + 1` at the collapse point.
    pub predictions: Option<(i64, i64)>,
}

impl CountingDemo {
    /// At a collapse both sequences get the same count, so one is wrong.
    pub fn forced_error(&self) -> bool {
        match (self.collapse_at, self.predictions) {
            (Some(n), Some((a, b))) => a == b && (a != n as i64 || b != n as i64 + 1),
            _ => false,
        }
    }
}

/// Checks counts `1, 2, 4, ... <= n_max` under `fmt`.
pub fn counting_collapse_demo(
    model: &Transformer,
    readout: &CountReadout,
    symbols: &SymbolTable,
    fmt: FloatFormat,
    n_max: usize,
) -> Result<CountingDemo> {
    if n_max == 0 {
        return Err(LabError::validation("n_max must be at least 1"));
    }
    let mut demo = CountingDemo {
        format: fmt,
        checked: Vec::new(),
        collapse_at: None,
        predictions: None,
    };
    let mut n = 1;
    while n <= n_max {
        demo.checked.push(n);
        let a = model.last_token_at(&count_sequence(symbols, n)?, fmt)?;
        let b = model.last_token_at(&count_sequence(symbols, n + 1)?, fmt)?;
        if a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) {
            let (pa, pb) = (readout.count(&a), readout.count(&b));
            if pa != pb {
                return Err(LabError::Invariant("identical representations gave different counts".into()));
            }
            demo.collapse_at = Some(n);
            demo.predictions = Some((pa, pb));
            break;
        }
        n *= 2;
    }
    Ok(demo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(layers: usize) -> (Transformer, SymbolTable) {
        let symbols = SymbolTable::new(16, 0);
        let (model, _) = generic_counting_model(16, layers, 1, &symbols).unwrap();
        (model, symbols)
    }

    #[test]
    fn sequence_construction() {
        let s = TwoSymbolSequence::blocks(2, 3).unwrap();
        assert_eq!((s.n0(), s.n1()), (2, 3));
        let t = TwoSymbolSequence::shuffled(2, 3, 7).unwrap();
        assert_eq!((t.n0(), t.n1()), (2, 3));
        assert!(TwoSymbolSequence::blocks(0, 0).is_err());
    }

    #[test]
    fn single_class_is_length_independent() {
        let (model, symbols) = setup(2);
        let a = nope_bidirectional_forward(&model, &TwoSymbolSequence::blocks(0, 1).unwrap(), &symbols).unwrap();
        for n in [2, 7, 50] {
            let b = nope_bidirectional_forward(&model, &TwoSymbolSequence::blocks(0, n).unwrap(), &symbols).unwrap();
            assert!(a.gap(&b).unwrap() < 1e-12);
            assert!(b.zero.is_none());
        }
    }

    #[test]
    fn ratios_not_counts() {
        for layers in 1..=3 {
            let (model, symbols) = setup(layers);
            let r = ratio_invariance_check(&model, &symbols, &[(1, 1), (1, 2), (2, 3)], &[1, 2, 4, 8]).unwrap();
            assert!(r.rows.iter().filter(|r| r.multiplier == 1).all(|r| r.gap == 0.0));
            assert!(r.max_gap() < 1e-10, "{}", r.max_gap());
            assert!(counterexample_gap(&model, &symbols, (1, 1), (1, 2)).unwrap() > DEGENERATE_TOL);
            assert!(permutation_gap(&model, &symbols, 3, 4, 5).unwrap() < 1e-12);
            assert!(normed_ratio_gap(&model, &symbols, &[(1, 2)], &[4]).unwrap() < 1e-10);
        }
    }

    #[test]
    fn rejects_positional_or_causal_models() {
        let symbols = SymbolTable::new(16, 0);
        let causal = Transformer::init(ModelConfig::with_dim(16)).unwrap();
        assert!(nope_bidirectional_forward(&causal, &TwoSymbolSequence::blocks(1, 1).unwrap(), &symbols).is_err());
    }

    #[test]
    fn least_squares_interpolates_and_ignores_duplicates() {
        let f = vec![vec![1.0, 2.0]];
        let (sol, ridge) = least_squares(&f, &[5.0]).unwrap();
        assert!(!ridge);
        assert!((sol[0] * 1.0 + sol[1] * 2.0 + sol[2] - 5.0).abs() < 1e-12);

        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (a, _) = least_squares(&rows, &[1.0, 2.0]).unwrap();
        let dup = vec![rows[0].clone(), rows[0].clone(), rows[1].clone()];
        let (b, ridge) = least_squares(&dup, &[1.0, 1.0, 2.0]).unwrap();
        assert!(ridge);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "{a:?} vs {b:?}");
        }

        // Overdetermined: exact line through consistent data.
        let many: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let t: Vec<f64> = (0..10).map(|i| 3.0 * i as f64 + 1.0).collect();
        let (sol, _) = least_squares(&many, &t).unwrap();
        assert!((sol[0] - 3.0).abs() < 1e-10 && (sol[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn single_training_count_is_exact() {
        let symbols = SymbolTable::new(16, 0);
        let model = Transformer::init(ModelConfig {
            pe: PeScheme::rope(),
            ..ModelConfig::with_dim(16)
        })
        .unwrap();
        let fit = fit_count_readout(&model, &symbols, &[5]).unwrap();
        assert!(fit.residual < 1e-9, "{}", fit.residual);
    }

    #[test]
    fn demo_collapses_in_bfloat16_not_binary64() {
        let symbols = SymbolTable::new(32, 0);
        let model = Transformer::init(ModelConfig {
            pe: PeScheme::rope(),
            ..ModelConfig::with_dim(32)
        })
        .unwrap();
        let fit = fit_count_readout(&model, &symbols, &[1, 2, 3, 4, 6, 8, 12, 16]).unwrap();
        let demo = counting_collapse_demo(&model, &fit.readout, &symbols, FloatFormat::BFloat16, 8192).unwrap();
        assert!(demo.collapse_at.is_some());
        assert!(demo.forced_error());
        let exact = counting_collapse_demo(&model, &fit.readout, &symbols, FloatFormat::Binary64, 1024).unwrap();
        assert_eq!(exact.collapse_at, None);
        assert!(!exact.forced_error());
    }
}

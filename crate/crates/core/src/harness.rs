//! Experiment runner, CSV and SVG output, configuration parsing and the
//! registry of experiment presets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::collapse::{
    alternating_tv, collapse_curve, precision_threshold, separator_experiment, tv_decay_experiment, CollapseRecord,
    CurveSpec, Measure, TokenPreset,
};
use crate::error::{LabError, Result};
use crate::model::{fmt_value, ModelConfig};
use crate::numerics::{median, FloatFormat};
use crate::posenc::PeScheme;

pub const ENV_SEED: &str = "COLLAPSE_LAB_SEED";
pub const ENV_THREADS: &str = "COLLAPSE_LAB_THREADS";
/// Smallest value drawn on a log-scaled axis.
pub const LOG_FLOOR: f64 = 1e-16;

#[derive(Debug, Clone, PartialEq)]
pub enum Experiment {
    /// Last-token distances of repeated-token pairs.
    Collapse,
    /// Plain ones against ones with a separator every `period` tokens.
    Separator { period: usize },
    /// Collapse distances under each precision, with a bitwise-equality flag.
    Threshold,
    /// Softmax total variation with the first `k` entries perturbed.
    Tv { k: usize, noise: f64 },
    /// Total variation of the alternating sequences.
    AltTv,
}

impl Experiment {
    pub fn id(&self) -> &'static str {
        match self {
            Experiment::Collapse => "collapse",
            Experiment::Separator { .. } => "separator",
            Experiment::Threshold => "threshold",
            Experiment::Tv { .. } => "tv",
            Experiment::AltTv => "alt-tv",
        }
    }

    /// Metric columns, in output order.
    pub fn metrics(&self) -> &'static [&'static str] {
        match self {
            Experiment::Collapse | Experiment::Separator { .. } => &["l1", "linf"],
            Experiment::Threshold => &["l1", "linf", "identical"],
            Experiment::Tv { .. } | Experiment::AltTv => &["tv"],
        }
    }
}

/// One sweep: every combination of PE scheme, precision, length and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub preset: TokenPreset,
    /// Template; `pe`, `precision` and `seed` are set per cell.
    pub model: ModelConfig,
    pub lengths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub pes: Vec<PeScheme>,
    pub precisions: Vec<FloatFormat>,
    pub symbols_seed: u64,
    pub measure: Measure,
    pub embed_ape: bool,
    pub start_token: bool,
}

impl ExperimentSpec {
    pub fn new(experiment: Experiment, lengths: Vec<usize>, seeds: Vec<u64>) -> Self {
        ExperimentSpec {
            experiment,
            preset: TokenPreset::Ones,
            model: ModelConfig::default(),
            lengths,
            seeds,
            pes: vec![PeScheme::NoPe],
            precisions: vec![FloatFormat::Binary64],
            symbols_seed: 0,
            measure: Measure::Output,
            embed_ape: false,
            start_token: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() {
            return Err(LabError::validation("no lengths given"));
        }
        if self.lengths.contains(&0) {
            return Err(LabError::validation("lengths must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(LabError::validation("no seeds given"));
        }
        if self.pes.is_empty() || self.precisions.is_empty() {
            return Err(LabError::validation("no positional encodings or precisions given"));
        }
        match self.experiment {
            Experiment::Tv { k, noise } => {
                let min = *self.lengths.iter().min().expect("non-empty");
                if k >= min {
                    return Err(LabError::validation(format!("k = {k} must be below the smallest length {min}")));
                }
                if !(noise >= 0.0 && noise.is_finite()) {
                    return Err(LabError::validation(format!("noise must be nonnegative, got {noise}")));
                }
            }
            Experiment::AltTv => {
                if let Some(n) = self.lengths.iter().find(|n| **n % 2 != 0) {
                    return Err(LabError::validation(format!("alternating sequences need even lengths, got {n}")));
                }
            }
            Experiment::Separator { period } if period < 2 => {
                return Err(LabError::validation(format!("separator period must be >= 2, got {period}")));
            }
            _ => {}
        }
        for pe in &self.pes {
            ModelConfig { pe: *pe, ..self.model.clone() }.validate()?;
        }
        Ok(())
    }

    fn curve(&self, pe: PeScheme, precision: FloatFormat) -> CurveSpec {
        CurveSpec {
            symbols_seed: self.symbols_seed,
            measure: self.measure,
            embed_ape: self.embed_ape,
            start_token: self.start_token,
            ..CurveSpec::new(
                ModelConfig {
                    pe,
                    precision,
                    ..self.model.clone()
                },
                self.preset,
                self.lengths.clone(),
                self.seeds.clone(),
            )
        }
    }
}

/// One metric value of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub preset: String,
    pub pe: String,
    pub precision: String,
    pub n: usize,
    pub seed: u64,
    pub metric: &'static str,
    pub value: f64,
}

impl ResultRow {
    fn key(&self) -> (&str, &str, &str, &str, usize, u64) {
        (&self.experiment, &self.preset, &self.pe, &self.precision, self.n, self.seed)
    }
}

fn collapse_rows(experiment: &str, records: &[CollapseRecord], with_identical: bool) -> Vec<ResultRow> {
    let mut out = Vec::new();
    for r in records {
        let row = |metric, value| ResultRow {
            experiment: experiment.to_string(),
            preset: r.preset.clone(),
            pe: r.pe.to_string(),
            precision: r.precision.tag().to_string(),
            n: r.n,
            seed: r.seed,
            metric,
            value,
        };
        out.push(row("l1", r.l1));
        out.push(row("linf", r.linf));
        if with_identical {
            out.push(row("identical", if r.identical { 1.0 } else { 0.0 }));
        }
    }
    out
}

/// Runs every cell of the sweep. Rows come back sorted by
/// `(experiment, preset, pe, precision, n, seed)`, metrics in column order.
pub fn run(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let id = spec.experiment.id();
    let mut rows = Vec::new();
    match spec.experiment {
        Experiment::Collapse | Experiment::Separator { .. } | Experiment::Threshold => {
            for &pe in &spec.pes {
                for &precision in &spec.precisions {
                    let cell = |e: LabError| match e {
                        LabError::Numerical { layer, token, what } => LabError::Numerical {
                            layer,
                            token,
                            what: format!("{what} (cell {id} pe={pe} precision={precision})"),
                        },
                        other => other,
                    };
                    match spec.experiment {
                        Experiment::Collapse => {
                            rows.extend(collapse_rows(id, &collapse_curve(&spec.curve(pe, precision)).map_err(cell)?, false))
                        }
                        Experiment::Separator { period } => {
                            let c = separator_experiment(&spec.curve(pe, precision), period).map_err(cell)?;
                            rows.extend(collapse_rows(id, &c.plain, false));
                            rows.extend(collapse_rows(id, &c.separated, false));
                        }
                        _ => {
                            let base = spec.curve(pe, FloatFormat::Binary64);
                            let r = precision_threshold(&base, precision).map_err(cell)?;
                            rows.extend(collapse_rows(id, &r.records, true));
                        }
                    }
                }
            }
        }
        Experiment::Tv { k, noise } => {
            for r in tv_decay_experiment(&spec.lengths, k, noise, &spec.seeds)? {
                rows.push(ResultRow {
                    experiment: id.into(),
                    preset: "uniform".into(),
                    pe: "-".into(),
                    precision: FloatFormat::Binary64.tag().into(),
                    n: r.n,
                    seed: r.seed,
                    metric: "tv",
                    value: r.tv,
                });
            }
        }
        Experiment::AltTv => {
            for &n in &spec.lengths {
                rows.push(ResultRow {
                    experiment: id.into(),
                    preset: "alternating".into(),
                    pe: "-".into(),
                    precision: FloatFormat::Binary64.tag().into(),
                    n,
                    seed: 0,
                    metric: "tv",
                    value: alternating_tv(n)?,
                });
            }
        }
    }
    if let Some(bad) = rows.iter().find(|r| !r.value.is_finite()) {
        return Err(LabError::Numerical {
            layer: 0,
            token: 0,
            what: format!(
                "non-finite {} in cell {} {} {} {} n={} seed={}",
                bad.metric, bad.experiment, bad.preset, bad.pe, bad.precision, bad.n, bad.seed
            ),
        });
    }
    let order = spec.experiment.metrics();
    let rank = |m: &str| order.iter().position(|o| *o == m).unwrap_or(order.len());
    rows.sort_by(|a, b| a.key().cmp(&b.key()).then(rank(a.metric).cmp(&rank(b.metric))));
    Ok(rows)
}

/// Wide CSV: key columns, then one column per metric.
pub fn write_csv<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    let mut metrics: Vec<&'static str> = Vec::new();
    for r in rows {
        if !metrics.contains(&r.metric) {
            metrics.push(r.metric);
        }
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["experiment", "preset", "pe", "precision", "n", "seed"];
    header.extend(&metrics);
    w.write_record(&header)?;
    let mut i = 0;
    while i < rows.len() {
        let key = rows[i].key();
        let mut values: Vec<Option<f64>> = vec![None; metrics.len()];
        while i < rows.len() && rows[i].key() == key {
            let r = &rows[i];
            if !r.value.is_finite() {
                return Err(LabError::Numerical {
                    layer: 0,
                    token: 0,
                    what: format!("refusing to write non-finite {}", r.metric),
                });
            }
            values[metrics.iter().position(|m| *m == r.metric).expect("collected")] = Some(r.value);
            i += 1;
        }
        let mut record = vec![
            key.0.to_string(),
            key.1.to_string(),
            key.2.to_string(),
            key.3.to_string(),
            key.4.to_string(),
            key.5.to_string(),
        ];
        record.extend(values.into_iter().map(|v| v.map(fmt_value).unwrap_or_default()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain table writer for experiment-specific outputs.
pub fn write_table<W: Write>(out: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(LabError::LengthMismatch {
                expected: header.len(),
                actual: r.len(),
            });
        }
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// What to draw from a curve CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub metric: String,
    pub x: String,
    pub log_x: bool,
    pub log_y: bool,
    pub floor: f64,
    pub title: String,
    pub width: f64,
    pub height: f64,
}

impl Default for PlotSpec {
    fn default() -> Self {
        PlotSpec {
            metric: "l1".into(),
            x: "n".into(),
            log_x: true,
            log_y: true,
            floor: LOG_FLOOR,
            title: String::new(),
            width: 720.0,
            height: 480.0,
        }
    }
}

struct Series {
    label: String,
    /// `(x, median, min, max)` sorted by `x`.
    points: Vec<(f64, f64, f64, f64)>,
}

fn parse_series(csv_text: &str, spec: &PlotSpec) -> Result<Vec<Series>> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let x_col = col(&spec.x).ok_or_else(|| LabError::validation(format!("CSV has no '{}' column", spec.x)))?;
    let y_col = col(&spec.metric).ok_or_else(|| LabError::validation(format!("CSV has no '{}' column", spec.metric)))?;
    let group_cols: Vec<usize> = ["preset", "pe", "precision"].iter().filter_map(|c| col(c)).collect();
    let mut groups: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    let mut xs: BTreeMap<u64, f64> = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let parse = |c: usize| {
            field(c)
                .parse::<f64>()
                .map_err(|_| LabError::validation(format!("row {}: cannot parse '{}' as a number", line + 2, field(c))))
        };
        let (x, y) = (parse(x_col)?, parse(y_col)?);
        let label = group_cols.iter().map(|&c| field(c)).collect::<Vec<_>>().join(" / ");
        xs.insert(x.to_bits(), x);
        groups.entry(label).or_default().entry(x.to_bits()).or_default().push(y);
    }
    if groups.is_empty() {
        return Err(LabError::validation("CSV contains no data rows"));
    }
    Ok(groups
        .into_iter()
        .map(|(label, by_x)| {
            let mut points: Vec<(f64, f64, f64, f64)> = by_x
                .into_iter()
                .map(|(bits, ys)| {
                    let min = ys.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (xs[&bits], median(&ys), min, max)
                })
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

/// Median line with a min/max band per `(preset, pe, precision)` group.
pub fn emit_svg(csv_text: &str, spec: &PlotSpec) -> Result<String> {
    let mut series = parse_series(csv_text, spec)?;
    if spec.log_y {
        let mut clamped = 0;
        for s in &mut series {
            for p in &mut s.points {
                for v in [&mut p.1, &mut p.2, &mut p.3] {
                    if *v < spec.floor {
                        *v = spec.floor;
                        clamped += 1;
                    }
                }
            }
        }
        if clamped > 0 {
            log::warn!("{clamped} values below {:e} clamped for the log axis", spec.floor);
        }
    }
    if spec.log_x && series.iter().flat_map(|s| &s.points).any(|p| p.0 <= 0.0) {
        return Err(LabError::validation("log x axis needs positive x values"));
    }
    let tx = |x: f64| if spec.log_x { x.log10() } else { x };
    let ty = |y: f64| if spec.log_y { y.log10() } else { y };
    let all = series.iter().flat_map(|s| &s.points);
    let (mut x0, mut x1) = all.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(tx(p.0)), b.max(tx(p.0))));
    let (mut y0, mut y1) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(ty(p.2)), b.max(ty(p.3))));
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let (pw, ph) = (spec.width - left - right, spec.height - top - bottom);
    let px = |x: f64| left + (tx(x) - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + (1.0 - (ty(y) - y0) / (y1 - y0)) * ph;
    let tick = |v: f64, log: bool| if log { format!("{:.0e}", 10f64.powf(v)) } else { format!("{v:.3}") };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = spec.width,
        h = spec.height
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if !spec.title.is_empty() {
        let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(&spec.title));
    }
    let _ = writeln!(svg, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for (v, anchor_x) in [(x0, left), (x1, left + pw)] {
        let _ = writeln!(svg, r#"<text x="{anchor_x}" y="{}" text-anchor="middle">{}</text>"#, top + ph + 16.0, tick(v, spec.log_x));
    }
    for (v, anchor_y) in [(y0, top + ph), (y1, top)] {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 6.0, anchor_y + 4.0, tick(v, spec.log_y));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, spec.height - 12.0, escape(&spec.x));
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(&spec.metric)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if s.points.len() == 1 {
            let p = s.points[0];
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#, px(p.0), py(p.1));
        } else {
            let upper = s.points.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.3)));
            let lower = s.points.iter().rev().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.2)));
            let band: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(svg, r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#, band.join(" "));
            let line: Vec<String> = s.points.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1))).collect();
            let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(svg, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, lx + 24.0, ly + 4.0, escape(&s.label));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// A runnable experiment preset and the result it reproduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegistryEntry {
    pub family: &'static str,
    pub command: &'static str,
    pub anchor: &'static str,
}

static REGISTRY: [RegistryEntry; 15] = [
    RegistryEntry { family: "collapse", command: "collapse run --preset ones", anchor: "repeated constant token: last-token representations converge with length" },
    RegistryEntry { family: "collapse", command: "collapse run --preset digits", anchor: "repeated last digit of a random digit string" },
    RegistryEntry { family: "collapse", command: "collapse run --preset gaussian --embed-ape", anchor: "Gaussian tokens with sinusoids added to the embeddings" },
    RegistryEntry { family: "collapse", command: "collapse run --preset gaussian --pe nope,ape,rope,alibi", anchor: "collapse under each positional encoding" },
    RegistryEntry { family: "separator", command: "collapse separator --period 3", anchor: "a separator every third token keeps representations apart" },
    RegistryEntry { family: "threshold", command: "collapse threshold --precision bf16", anchor: "reduced precision makes the representations bitwise equal" },
    RegistryEntry { family: "tv", command: "tv", anchor: "softmax total variation decays when a fixed prefix is perturbed" },
    RegistryEntry { family: "tv", command: "alt-tv", anchor: "alternating sequences keep total variation 2(e-1)/(e+1)" },
    RegistryEntry { family: "squash", command: "squash profile", anchor: "sensitivity of the last output to each input token" },
    RegistryEntry { family: "squash", command: "squash bound-check", anchor: "Jacobian norms never exceed the attention path-sum bound" },
    RegistryEntry { family: "limit-case", command: "squash limit-case", anchor: "powers of (attention + I)/2 concentrate on the first token" },
    RegistryEntry { family: "limit-case", command: "limit-case", anchor: "same as squash limit-case" },
    RegistryEntry { family: "counting", command: "counting ratio-check", anchor: "position-free full attention only sees symbol ratios" },
    RegistryEntry { family: "counting", command: "counting collapse-demo", anchor: "consecutive counts become identical under bfloat16" },
    RegistryEntry { family: "selftest", command: "selftest", anchor: "the full acceptance battery" },
];

pub fn preset_registry() -> &'static [RegistryEntry] {
    &REGISTRY
}

/// Distinct experiment families, in registry order.
pub fn families() -> Vec<&'static str> {
    let mut out: Vec<&'static str> = Vec::new();
    for e in &REGISTRY {
        if e.family != "selftest" && !out.contains(&e.family) {
            out.push(e.family);
        }
    }
    out
}

/// Looks up a token preset by name.
pub fn preset_by_name(name: &str) -> Result<TokenPreset> {
    name.parse()
}

/// Lengths: `a..b` doubles from `a` up to `b`; otherwise a comma list.
pub fn parse_lengths(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    let bad = || LabError::validation(format!("cannot parse lengths '{s}' (expected a..b or a,b,c)"));
    let out = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a == 0 || a > b {
            return Err(bad());
        }
        std::iter::successors(Some(a), |x| x.checked_mul(2)).take_while(|x| *x <= b).collect()
    } else {
        parse_list::<usize>(s)?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok(out)
}

pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|_| LabError::validation(format!("cannot parse '{}' in '{s}'", p.trim()))))
        .collect()
}

/// `1:1,1:2` style ratio lists.
pub fn parse_ratios(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|p| {
            let (a, b) = p
                .trim()
                .split_once(':')
                .ok_or_else(|| LabError::validation(format!("ratio '{p}' is not of the form a:b")))?;
            let a: usize = a.trim().parse().map_err(|_| LabError::validation(format!("bad ratio '{p}'")))?;
            let b: usize = b.trim().parse().map_err(|_| LabError::validation(format!("bad ratio '{p}'")))?;
            if a + b == 0 {
                return Err(LabError::validation(format!("ratio '{p}' is empty")));
            }
            Ok((a, b))
        })
        .collect()
}

/// `count` consecutive seeds starting at `base`.
pub fn seed_range(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| LabError::validation(format!("config line {}: expected key=value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(LabError::validation(format!("config line {}: empty key", i + 1)));
        }
        out.insert(k.replace('_', "-"), v.trim().to_string());
    }
    Ok(out)
}

/// Base seed from the environment, if set.
pub fn env_seed() -> Result<Option<u64>> {
    env_parse(ENV_SEED)
}

/// Worker count from the environment, if set.
pub fn env_threads() -> Result<Option<usize>> {
    env_parse(ENV_THREADS)
}

fn env_parse<T: std::str::FromStr>(var: &str) -> Result<Option<T>> {
    match std::env::var(var) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| LabError::validation(format!("{var}='{v}' is not a valid value"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_collapse() -> ExperimentSpec {
        ExperimentSpec {
            preset: TokenPreset::Digits,
            model: ModelConfig::with_dim(8),
            pes: vec![PeScheme::rope()],
            ..ExperimentSpec::new(Experiment::Collapse, vec![4, 8, 16], vec![0, 1])
        }
    }

    fn csv_of(rows: &[ResultRow]) -> String {
        let mut buf = Vec::new();
        write_csv(&mut buf, rows).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn collapse_run_shape_and_determinism() {
        let spec = small_collapse();
        let rows = run(&spec).unwrap();
        assert_eq!(rows.iter().filter(|r| r.metric == "l1").count(), 6);
        assert_eq!(rows.iter().filter(|r| r.metric == "linf").count(), 6);
        let a = csv_of(&rows);
        let b = csv_of(&run(&spec).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.lines().next(), Some("experiment,preset,pe,precision,n,seed,l1,linf"));
        assert_eq!(a.lines().count(), 7);
    }

    #[test]
    fn rows_are_sorted() {
        let spec = ExperimentSpec {
            pes: vec![PeScheme::rope(), PeScheme::NoPe],
            ..small_collapse()
        };
        let rows = run(&spec).unwrap();
        let keys: Vec<_> = rows.iter().map(|r| r.key()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn validation_before_work() {
        let mut spec = small_collapse();
        spec.lengths.clear();
        assert!(matches!(run(&spec), Err(LabError::Validation(_))));
        let spec = ExperimentSpec::new(Experiment::Tv { k: 200, noise: 0.1 }, vec![100], vec![0]);
        assert!(run(&spec).is_err());
        let spec = ExperimentSpec::new(Experiment::AltTv, vec![3], vec![0]);
        assert!(run(&spec).is_err());
    }

    #[test]
    fn tv_and_alt_tv_rows() {
        let rows = run(&ExperimentSpec::new(Experiment::Tv { k: 2, noise: 0.1 }, vec![10, 20], vec![0, 1, 2])).unwrap();
        assert_eq!(rows.len(), 6);
        let rows = run(&ExperimentSpec::new(Experiment::AltTv, vec![2, 4], vec![0])).unwrap();
        assert!(rows.iter().all(|r| (r.value - crate::collapse::alternating_tv_limit()).abs() < 1e-12));
    }

    #[test]
    fn threshold_rows_flag_identity() {
        let spec = ExperimentSpec {
            experiment: Experiment::Threshold,
            preset: TokenPreset::Ones,
            precisions: vec![FloatFormat::BFloat16],
            ..small_collapse()
        };
        let text = csv_of(&run(&spec).unwrap());
        assert!(text.starts_with("experiment,preset,pe,precision,n,seed,l1,linf,identical"));
    }

    #[test]
    fn svg_grouping_band_and_floor() {
        let csv = "experiment,preset,pe,precision,n,seed,l1\n\
                   c,ones,nope,f64,16,0,1e-3\nc,ones,nope,f64,16,1,2e-3\nc,ones,nope,f64,32,0,0\n\
                   c,ones,rope,f64,16,0,1\nc,ones,rope,f64,32,0,0.5\n\
                   c,digits,nope,f64,16,0,1\nc,digits,nope,f64,32,0,0.5\n\
                   c,digits,rope,f64,16,0,1\nc,digits,rope,f64,32,0,0.5\n";
        let svg = emit_svg(csv, &PlotSpec::default()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert_eq!(svg.matches("<polygon").count(), 4);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("1e-16"));
    }

    #[test]
    fn svg_single_point_and_errors() {
        let csv = "preset,pe,precision,n,seed,l1\nones,nope,f64,16,0,0.5\n";
        let svg = emit_svg(csv, &PlotSpec::default()).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(emit_svg("n,l1\n16,abc\n", &PlotSpec::default()).is_err());
        assert!(emit_svg("n,linf\n16,1\n", &PlotSpec::default()).is_err());
        assert!(emit_svg("n,l1\n", &PlotSpec::default()).is_err());
    }

    #[test]
    fn registry_contents() {
        assert_eq!(families().len(), 7);
        assert!(preset_registry().iter().all(|e| !e.anchor.is_empty() && !e.command.is_empty()));
        let err = preset_by_name("commaz").unwrap_err().to_string();
        for name in TokenPreset::NAMES {
            assert!(err.contains(name));
        }
    }

    #[test]
    fn parsers() {
        assert_eq!(parse_lengths("16..128").unwrap(), vec![16, 32, 64, 128]);
        assert_eq!(parse_lengths("16..100").unwrap(), vec![16, 32, 64]);
        assert_eq!(parse_lengths("3, 5,7").unwrap(), vec![3, 5, 7]);
        assert!(parse_lengths("0..8").is_err());
        assert!(parse_lengths("8..4").is_err());
        assert!(parse_lengths("").is_err());
        assert_eq!(parse_ratios("1:1, 2:3").unwrap(), vec![(1, 1), (2, 3)]);
        assert!(parse_ratios("1-2").is_err());
        assert_eq!(seed_range(5, 3), vec![5, 6, 7]);
        let cfg = parse_config("# comment\nseeds = 5\n\npe=rope\nembed_ape = true\n").unwrap();
        assert_eq!(cfg["seeds"], "5");
        assert_eq!(cfg["pe"], "rope");
        assert_eq!(cfg["embed-ape"], "true");
        assert!(parse_config("novalue").is_err());
    }
}

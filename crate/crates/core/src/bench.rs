//! Time and peak-memory scaling of attention versus token count.
//!
//! Peak memory comes from the tensor allocation tracker, not the OS: it is
//! deterministic and counts exactly the buffers an attention call creates.
//! Because the tracker is process-global, only one measurement may run at a
//! time. Benchmarks run in f32.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{softmax_attention, xnorm_attention, AttentionParams, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::model::count::{softmax_attention_flops, xnorm_attention_flops};
use crate::model::{count_flops, model_forward, ModelConfig, ModelParams};
use crate::tensor::alloc::{alloc_stats, reset_peak};
use crate::tensor::{Element, Tensor};

pub const CSV_HEADER: &str = "mechanism,N,C,heads,batch,iters,warmup_iters,mean_ms,std_ms,peak_bytes,flops_est";

/// Environment variable holding an additive widening of the time-exponent
/// thresholds for noisy machines. Memory thresholds are never widened.
pub const TIME_SLACK_ENV: &str = "XVIT_TIME_SLACK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Xnorm,
    Softmax,
}

impl Mechanism {
    pub const ALL: [Mechanism; 2] = [Mechanism::Xnorm, Mechanism::Softmax];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Xnorm => "xnorm",
            Mechanism::Softmax => "softmax",
        }
    }

    pub fn flops(self, n: usize, dim: usize, heads: usize) -> u64 {
        match self {
            Mechanism::Xnorm => xnorm_attention_flops(n, dim, heads),
            Mechanism::Softmax => softmax_attention_flops(n, dim, heads),
        }
    }

    pub fn run<T: Element>(self, x: &Tensor<T>, p: &AttentionParams<Tensor<T>>) -> Result<Tensor<T>> {
        let out = match self {
            Mechanism::Xnorm => xnorm_attention(x, p)?,
            Mechanism::Softmax => softmax_attention(x, p)?,
        };
        Ok(out.out)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xnorm" => Ok(Mechanism::Xnorm),
            "softmax" => Ok(Mechanism::Softmax),
            _ => Err(Error::Data(format!("unknown mechanism {s:?}, expected xnorm or softmax"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub n: usize,
    pub c: usize,
    pub heads: usize,
    pub batch: usize,
    pub iters: usize,
    pub warmup_iters: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// High-water mark over the measured iterations, above what was live
    /// when they started (inputs and parameters are excluded).
    pub peak_bytes: u64,
    pub flops_est: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub mechanism: Mechanism,
    pub n_list: Vec<usize>,
    pub dim: usize,
    pub heads: usize,
    pub batch: usize,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Sizes whose measured peak exceeds this many bytes count as out of memory.
    pub memory_budget: Option<u64>,
}

impl BenchSpec {
    pub fn new(mechanism: Mechanism, n_list: Vec<usize>, dim: usize, heads: usize) -> Self {
        BenchSpec {
            mechanism,
            n_list,
            dim,
            heads,
            batch: 1,
            iters: 10,
            warmup: 3,
            seed: 0,
            memory_budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub n: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    /// Median iteration time, parallel to `records`.
    pub median_ms: Vec<f64>,
    /// Sizes not measured because this or a smaller size ran out of memory.
    pub skipped: Vec<Skipped>,
}

struct Timing {
    mean_ms: f64,
    std_ms: f64,
    median_ms: f64,
    peak_bytes: u64,
}

/// Runs `body` for `warmup` untimed then `iters` timed iterations.
fn measure(iters: usize, warmup: usize, mut body: impl FnMut() -> Result<()>) -> Result<Timing> {
    if iters == 0 {
        return Err(Error::Config("iters must be at least 1".into()));
    }
    for _ in 0..warmup {
        body()?;
    }
    reset_peak();
    let base = alloc_stats().live_bytes;
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        body()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let peak_bytes = (alloc_stats().peak_bytes - base) as u64;
    let mean_ms = times.iter().sum::<f64>() / iters as f64;
    let std_ms = if iters > 1 {
        (times.iter().map(|t| (t - mean_ms).powi(2)).sum::<f64>() / (iters - 1) as f64).sqrt()
    } else {
        0.0
    };
    times.sort_by(f64::total_cmp);
    let median_ms = if iters % 2 == 1 {
        times[iters / 2]
    } else {
        0.5 * (times[iters / 2 - 1] + times[iters / 2])
    };
    Ok(Timing { mean_ms, std_ms, median_ms, peak_bytes })
}

fn over_budget(t: &Timing, budget: Option<u64>) -> Result<()> {
    match budget {
        Some(b) if t.peak_bytes > b => Err(Error::OutOfMemory { bytes: t.peak_bytes as usize }),
        _ => Ok(()),
    }
}

fn check_n_list(n_list: &[usize]) -> Result<()> {
    if n_list.is_empty() || n_list.contains(&0) {
        return Err(Error::Config("need a non-empty list of positive token counts".into()));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("token counts must be strictly ascending, got {n_list:?}")));
    }
    Ok(())
}

fn skip_rest(report: &mut BenchReport, rest: &[usize], err: &Error) {
    for (i, &n) in rest.iter().enumerate() {
        let reason = if i == 0 { err.to_string() } else { "skipped after a smaller size ran out of memory".into() };
        report.skipped.push(Skipped { n, reason });
    }
}

/// Benchmarks one attention mechanism in isolation at each token count.
///
/// Inputs are drawn once per size before timing starts. Running out of memory
/// at some size ends the sweep; the records measured so far are returned.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    check_n_list(&spec.n_list)?;
    if spec.batch == 0 {
        return Err(Error::Config("batch must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let params: AttentionParams<Tensor<f32>> = AttentionParams::init(spec.dim, spec.heads, DEFAULT_EPS, &mut rng)?;
    let mut report = BenchReport::default();
    for (i, &n) in spec.n_list.iter().enumerate() {
        let inputs: Vec<Tensor<f32>> =
            (0..spec.batch).map(|_| Tensor::uniform([n, spec.dim], -1.0, 1.0, &mut rng)).collect();
        let timing = measure(spec.iters, spec.warmup, || {
            for x in &inputs {
                spec.mechanism.run(x, &params)?;
            }
            Ok(())
        })
        .and_then(|t| over_budget(&t, spec.memory_budget).map(|()| t));
        let t = match timing {
            Ok(t) => t,
            Err(e @ Error::OutOfMemory { .. }) => {
                skip_rest(&mut report, &spec.n_list[i..], &e);
                break;
            }
            Err(e) => return Err(e),
        };
        report.records.push(BenchRecord {
            mechanism: spec.mechanism,
            n,
            c: spec.dim,
            heads: spec.heads,
            batch: spec.batch,
            iters: spec.iters,
            warmup_iters: spec.warmup,
            mean_ms: t.mean_ms,
            std_ms: t.std_ms,
            peak_bytes: t.peak_bytes,
            flops_est: spec.batch as u64 * spec.mechanism.flops(n, spec.dim, spec.heads),
        });
        report.median_ms.push(t.median_ms);
    }
    Ok(report)
}

/// Benchmarks the whole model forward pass at several image sizes. Records
/// carry the token count as `N` and the whole-model FLOPs.
pub fn run_model_bench(
    cfg: &ModelConfig,
    image_sizes: &[usize],
    batch: usize,
    iters: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport> {
    check_n_list(image_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = BenchReport::default();
    for &size in image_sizes {
        let mut c = cfg.clone();
        c.image_size = size;
        let flops = count_flops(&c, size)?;
        let mp: ModelParams<Tensor<f32>> = ModelParams::init(&c, &mut rng)?;
        let inputs: Vec<Tensor<f32>> = (0..batch)
            .map(|_| Tensor::uniform([c.in_channels, size, size], 0.0, 1.0, &mut rng))
            .collect();
        let t = measure(iters, warmup, || {
            for x in &inputs {
                model_forward(x, &mp, &c)?;
            }
            Ok(())
        })?;
        report.records.push(BenchRecord {
            mechanism: Mechanism::Xnorm,
            n: flops.tokens,
            c: c.embed_dim,
            heads: c.heads,
            batch,
            iters,
            warmup_iters: warmup,
            mean_ms: t.mean_ms,
            std_ms: t.std_ms,
            peak_bytes: t.peak_bytes,
            flops_est: batch as u64 * flops.total,
        });
        report.median_ms.push(t.median_ms);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    MeanMs,
    PeakBytes,
}

impl Field {
    pub fn name(self) -> &'static str {
        match self {
            Field::MeanMs => "mean_ms",
            Field::PeakBytes => "peak_bytes",
        }
    }

    pub fn get(self, r: &BenchRecord) -> f64 {
        match self {
            Field::MeanMs => r.mean_ms,
            Field::PeakBytes => r.peak_bytes as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

/// Least-squares line through `(ln n, ln value)`.
pub fn fit_points(points: &[(f64, f64)]) -> Result<ScalingFit> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::Data(format!("need ≥ 4 distinct N values for a fit, got {}", distinct.len())));
    }
    if distinct[0] <= 0.0 || distinct[distinct.len() - 1] < 8.0 * distinct[0] {
        return Err(Error::Data(format!(
            "N values must be positive and span at least 8×, got {}..{}",
            distinct[0],
            distinct[distinct.len() - 1]
        )));
    }
    if let Some(&(n, v)) = points.iter().find(|p| !(p.1 > 0.0) || !p.1.is_finite()) {
        return Err(Error::Data(format!("non-positive value {v} at N={n} cannot be fitted on a log scale")));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(ScalingFit { exponent, intercept, r2, points: points.len() })
}

/// Power-law fit of `field` against `N` over records of one mechanism.
pub fn fit_scaling(records: &[BenchRecord], field: Field) -> Result<ScalingFit> {
    if let Some(r) = records.iter().find(|r| r.mechanism != records[0].mechanism) {
        return Err(Error::Data(format!(
            "records mix mechanisms {} and {}",
            records[0].mechanism, r.mechanism
        )));
    }
    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.n as f64, field.get(r))).collect();
    fit_points(&points)
}

/// Additive widening of the time-exponent thresholds from [`TIME_SLACK_ENV`].
pub fn time_slack() -> Result<Option<f64>> {
    match std::env::var(TIME_SLACK_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(Some(v)),
            _ => Err(Error::Config(format!("{TIME_SLACK_ENV} must be a non-negative number, got {s:?}"))),
        },
    }
}

/// Formats with six significant digits, without trailing zeros.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = trim(format!("{x:.decimals$}"));
        // Rounding can carry into a new digit (9.999995 → 10.00000); reformat.
        if s.trim_start_matches('-').replace('.', "").trim_start_matches('0').len() > 6 {
            return trim(format!("{x:.prec$}", prec = decimals.saturating_sub(1)));
        }
        s
    } else {
        let s = format!("{x:.5e}");
        let (mant, e) = s.split_once('e').expect("exponent form");
        format!("{}e{e}", trim(mant.to_string()))
    }
}

fn record_row(r: &BenchRecord) -> [String; 11] {
    [
        r.mechanism.name().to_string(),
        r.n.to_string(),
        r.c.to_string(),
        r.heads.to_string(),
        r.batch.to_string(),
        r.iters.to_string(),
        r.warmup_iters.to_string(),
        sig6(r.mean_ms),
        sig6(r.std_ms),
        r.peak_bytes.to_string(),
        r.flops_est.to_string(),
    ]
}

/// CSV text: header, one row per record, then `comments` as `# ` lines.
pub fn to_csv_string(records: &[BenchRecord], comments: &[String]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(','))?;
    for r in records {
        w.write_record(record_row(r))?;
    }
    let mut out = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    for c in comments {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    Ok(String::from_utf8(out).expect("CSV fields are ASCII"))
}

pub fn write_csv(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    write_csv_with_comments(records, &[], path)
}

pub fn write_csv_with_comments(records: &[BenchRecord], comments: &[String], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_csv_string(records, comments)?)?;
    Ok(())
}

fn field<T: FromStr>(row: &csv::StringRecord, i: usize, line: usize) -> Result<T>
where
    T::Err: fmt::Display,
{
    let raw = row.get(i).unwrap_or("");
    raw.parse().map_err(|e| {
        Error::Data(format!(
            "line {line}: column {} = {raw:?}: {e}",
            CSV_HEADER.split(',').nth(i).unwrap_or("?")
        ))
    })
}

/// Parses CSV text in the [`CSV_HEADER`] schema; `#` lines are ignored.
pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Data(format!("unexpected CSV header {:?}", header.join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        let line = i + 2;
        if row.len() != 11 {
            return Err(Error::Data(format!("line {line}: expected 11 columns, found {}", row.len())));
        }
        out.push(BenchRecord {
            mechanism: field(&row, 0, line)?,
            n: field(&row, 1, line)?,
            c: field(&row, 2, line)?,
            heads: field(&row, 3, line)?,
            batch: field(&row, 4, line)?,
            iters: field(&row, 5, line)?,
            warmup_iters: field(&row, 6, line)?,
            mean_ms: field(&row, 7, line)?,
            std_ms: field(&row, 8, line)?,
            peak_bytes: field(&row, 9, line)?,
            flops_est: field(&row, 10, line)?,
        });
    }
    Ok(out)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<BenchRecord>> {
    parse_csv(&fs::read_to_string(path)?)
}

/// Writes one whitespace-separated `.dat` file per mechanism next to `stem`
/// (`<stem>.<mechanism>.dat`) and returns their paths.
pub fn write_gnuplot(records: &[BenchRecord], stem: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let stem = stem.as_ref();
    let mut paths = Vec::new();
    for mech in Mechanism::ALL {
        let rows: Vec<&BenchRecord> = records.iter().filter(|r| r.mechanism == mech).collect();
        if rows.is_empty() {
            continue;
        }
        let mut text = String::from("# N mean_ms std_ms peak_bytes flops_est\n");
        for r in rows {
            text.push_str(&format!(
                "{} {} {} {} {}\n",
                r.n,
                sig6(r.mean_ms),
                sig6(r.std_ms),
                r.peak_bytes,
                r.flops_est
            ));
        }
        let mut name = stem.as_os_str().to_owned();
        name.push(format!(".{mech}.dat"));
        let path = PathBuf::from(name);
        fs::write(&path, text)?;
        paths.push(path);
    }
    Ok(paths)
}

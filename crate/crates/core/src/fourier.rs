//! Fourier epicycle descriptors of closed outlines.
//!
//! A contour sampled at `M` points is read as the complex signal
//! `p_j = x_j + i y_j` and decomposed as `c_k = (1/M) sum_j p_j exp(-2 pi i k j / M)`.
//! Term `k` is an epicycle of radius `|c_k|` turning `k` times per traversal.
//! The learning input keeps `c_0` and `c_k` for `k = +-1 ..= +-100`, which
//! flattens to 402 reals.

use std::f64::consts::TAU;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{format_err, Error, Result};
use crate::shape_io::Contour;

pub const DEFAULT_HARMONICS: usize = 100;
/// `2 + 4 * DEFAULT_HARMONICS`.
pub const DESCRIPTOR_LEN: usize = 402;
/// Number of epicycles in a default descriptor.
pub const MAX_TERMS: usize = 2 * DEFAULT_HARMONICS;

const BINARY_MAGIC: &[u8; 4] = b"FDSC";

#[derive(Debug, Clone, PartialEq)]
pub struct FourierCoefficients {
    c0: Complex64,
    positive: Vec<Complex64>,
    negative: Vec<Complex64>,
    samples: usize,
}

impl FourierCoefficients {
    /// `positive[i]` holds `c_{i+1}`, `negative[i]` holds `c_{-(i+1)}`.
    pub fn new(
        c0: Complex64,
        positive: Vec<Complex64>,
        negative: Vec<Complex64>,
        samples: usize,
    ) -> Result<Self> {
        if positive.len() != negative.len() || positive.is_empty() {
            return Err(Error::Shape(format!(
                "{} positive and {} negative harmonics",
                positive.len(),
                negative.len()
            )));
        }
        Ok(FourierCoefficients {
            c0,
            positive,
            negative,
            samples,
        })
    }

    pub fn c0(&self) -> Complex64 {
        self.c0
    }

    pub fn harmonics(&self) -> usize {
        self.positive.len()
    }

    /// Sample count `M` of the contour the coefficients came from.
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn term_count(&self) -> usize {
        2 * self.harmonics()
    }

    /// Coefficient at signed frequency `k`; zero outside the stored band.
    pub fn get(&self, k: i64) -> Complex64 {
        let idx = k.unsigned_abs() as usize;
        match k.signum() {
            0 => self.c0,
            1 if idx <= self.positive.len() => self.positive[idx - 1],
            -1 if idx <= self.negative.len() => self.negative[idx - 1],
            _ => Complex64::new(0.0, 0.0),
        }
    }

    pub fn set(&mut self, k: i64, value: Complex64) {
        let idx = k.unsigned_abs() as usize;
        match k.signum() {
            0 => self.c0 = value,
            1 => self.positive[idx - 1] = value,
            _ => self.negative[idx - 1] = value,
        }
    }

    /// Nonzero frequencies in descriptor order: 1, -1, 2, -2, ...
    pub fn frequencies(&self) -> impl Iterator<Item = i64> {
        (1..=self.harmonics() as i64).flat_map(|k| [k, -k])
    }

    /// Angular velocity of term `k` in radians per closed traversal.
    pub fn angular_velocity(k: i64) -> f64 {
        TAU * k as f64
    }

    pub fn band_energy(&self) -> f64 {
        self.c0.norm_sqr()
            + self
                .positive
                .iter()
                .chain(&self.negative)
                .map(|c| c.norm_sqr())
                .sum::<f64>()
    }

    /// Evaluates `p(t) = c0 + sum c_k exp(2 pi i k t)` over the given terms.
    pub fn evaluate(&self, terms: &[i64], t: f64) -> Complex64 {
        terms.iter().fold(self.c0, |acc, &k| {
            acc + self.get(k) * Complex64::from_polar(1.0, TAU * k as f64 * t)
        })
    }
}

pub fn contour_to_complex(c: &Contour) -> Vec<Complex64> {
    c.points()
        .iter()
        .map(|p| Complex64::new(p[0], p[1]))
        .collect()
}

/// Normalised DFT restricted to `c_0` and `k = +-1 ..= +-n_harmonics`.
pub fn dft_coefficients(signal: &[Complex64], n_harmonics: usize) -> Result<FourierCoefficients> {
    let m = signal.len();
    if n_harmonics == 0 || m <= 2 * n_harmonics {
        return Err(Error::InsufficientSamples {
            signal_len: m,
            harmonics: n_harmonics,
        });
    }
    if signal.iter().any(|p| !p.re.is_finite() || !p.im.is_finite()) {
        return Err(Error::NonFinite("DFT input".into()));
    }
    let mut buf = signal.to_vec();
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    let scale = 1.0 / m as f64;
    let positive = (1..=n_harmonics).map(|k| buf[k] * scale).collect();
    let negative = (1..=n_harmonics).map(|k| buf[m - k] * scale).collect();
    FourierCoefficients::new(buf[0] * scale, positive, negative, m)
}

/// Resamples nothing: `c` must already carry the intended sample count.
pub fn contour_coefficients(c: &Contour, n_harmonics: usize) -> Result<FourierCoefficients> {
    dft_coefficients(&contour_to_complex(c), n_harmonics)
}

/// `[Re c0, Im c0, Re c1, Im c1, Re c-1, Im c-1, Re c2, ...]`.
pub fn assemble_descriptor(fc: &FourierCoefficients) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 + 2 * fc.term_count());
    out.extend([fc.c0.re, fc.c0.im]);
    for k in fc.frequencies() {
        let c = fc.get(k);
        out.extend([c.re, c.im]);
    }
    out
}

/// Inverse of [`assemble_descriptor`]. The sample count is not part of the
/// descriptor and must be supplied.
pub fn parse_descriptor(values: &[f64], samples: usize) -> Result<FourierCoefficients> {
    if values.len() < 6 || (values.len() - 2) % 4 != 0 {
        return Err(Error::Shape(format!(
            "descriptor length {} is not 2 + 4n",
            values.len()
        )));
    }
    let n = (values.len() - 2) / 4;
    let at = |i: usize| Complex64::new(values[i], values[i + 1]);
    let positive = (0..n).map(|i| at(2 + 4 * i)).collect();
    let negative = (0..n).map(|i| at(4 + 4 * i)).collect();
    FourierCoefficients::new(at(0), positive, negative, samples)
}

/// Which epicycles survive truncation to `K` terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Truncation {
    /// Largest `|c_k|` first; ties go to smaller `|k|`, then positive `k`.
    #[default]
    Amplitude,
    /// Frequencies in descriptor order 1, -1, 2, -2, ...
    LowFrequency,
}

impl std::str::FromStr for Truncation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amplitude" => Ok(Truncation::Amplitude),
            "low-frequency" => Ok(Truncation::LowFrequency),
            other => Err(Error::Config(format!("unknown truncation order {other:?}"))),
        }
    }
}

pub fn select_terms(fc: &FourierCoefficients, k_terms: usize, order: Truncation) -> Result<Vec<i64>> {
    if k_terms == 0 || k_terms > fc.term_count() {
        return Err(Error::TermCountOutOfRange(k_terms));
    }
    let mut freqs: Vec<i64> = fc.frequencies().collect();
    if order == Truncation::Amplitude {
        freqs.sort_by(|&a, &b| {
            fc.get(b)
                .norm()
                .total_cmp(&fc.get(a).norm())
                .then(a.abs().cmp(&b.abs()))
                .then(b.cmp(&a))
        });
    }
    freqs.truncate(k_terms);
    Ok(freqs)
}

/// Outline points of the `K`-term reconstruction at `t = j / samples`, in
/// parameter order (no orientation fix-up).
pub fn reconstruct_points(
    fc: &FourierCoefficients,
    k_terms: usize,
    samples: usize,
    order: Truncation,
) -> Result<Vec<[f64; 2]>> {
    let terms = select_terms(fc, k_terms, order)?;
    let top = terms.iter().map(|k| k.unsigned_abs() as usize).max().unwrap_or(0);
    if samples <= 2 * top {
        // aliased; evaluate each term directly
        return Ok((0..samples)
            .map(|j| {
                let p = fc.evaluate(&terms, j as f64 / samples as f64);
                [p.re, p.im]
            })
            .collect());
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); samples];
    buf[0] = fc.c0;
    for &k in &terms {
        buf[k.rem_euclid(samples as i64) as usize] = fc.get(k);
    }
    FftPlanner::new().plan_fft_inverse(samples).process(&mut buf);
    Ok(buf.iter().map(|p| [p.re, p.im]).collect())
}

pub fn reconstruct(
    fc: &FourierCoefficients,
    k_terms: usize,
    samples: usize,
    order: Truncation,
) -> Result<Contour> {
    Contour::new(reconstruct_points(fc, k_terms, samples, order)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionReport {
    pub terms: usize,
    pub rms_error: f64,
    pub max_error: f64,
}

impl ReconstructionReport {
    pub fn is_suspect(&self, max_error_threshold: f64) -> bool {
        self.max_error > max_error_threshold
    }
}

/// Pointwise error between `original` and its `K`-term reconstruction at the
/// same parameter values `t = j / M`.
pub fn reconstruction_error(
    original: &Contour,
    fc: &FourierCoefficients,
    k_terms: usize,
    order: Truncation,
) -> Result<ReconstructionReport> {
    let m = original.len();
    if m != fc.samples() {
        return Err(Error::SampleMismatch {
            expected: fc.samples(),
            actual: m,
        });
    }
    let rec = reconstruct_points(fc, k_terms, m, order)?;
    let mut sum_sq = 0.0;
    let mut max_error: f64 = 0.0;
    for (p, q) in original.points().iter().zip(&rec) {
        let e = (p[0] - q[0]).hypot(p[1] - q[1]);
        sum_sq += e * e;
        max_error = max_error.max(e);
    }
    let rms_error = (sum_sq / m as f64).sqrt().min(max_error);
    Ok(ReconstructionReport {
        terms: k_terms,
        rms_error,
        max_error,
    })
}

/// One specimen's descriptor with its identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorRecord {
    pub specimen_id: String,
    pub species_id: String,
    pub values: Vec<f64>,
}

/// CSV with header `specimen_id,species_id,v0,...`. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_descriptor_csv(path: &Path, records: &[DescriptorRecord]) -> Result<()> {
    let dim = records.first().map_or(DESCRIPTOR_LEN, |r| r.values.len());
    let mut out = String::from("specimen_id,species_id");
    for i in 0..dim {
        out.push_str(&format!(",v{i}"));
    }
    out.push('\n');
    for r in records {
        if r.values.len() != dim {
            return Err(Error::Shape(format!(
                "record {} has {} values, expected {dim}",
                r.specimen_id,
                r.values.len()
            )));
        }
        out.push_str(&r.specimen_id);
        out.push(',');
        out.push_str(&r.species_id);
        for v in &r.values {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_descriptor_csv(path: &Path) -> Result<Vec<DescriptorRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_labeled_csv(&text, "descriptor", "v")
}

/// Shared reader for `id,species,<prefix>0,...` tables.
pub(crate) fn parse_labeled_csv(
    text: &str,
    kind: &'static str,
    prefix: &str,
) -> Result<Vec<DescriptorRecord>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| format_err(kind, 1, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "specimen_id" || cols[1] != "species_id" {
        return Err(format_err(kind, 1, format!("bad header {header:?}")));
    }
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("{prefix}{i}") {
            return Err(format_err(kind, 1, format!("unexpected column {c:?}")));
        }
    }
    let dim = cols.len() - 2;
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(format_err(
                kind,
                i + 1,
                format!("{} fields, expected {}", fields.len(), dim + 2),
            ));
        }
        let values = fields[2..]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| format_err(kind, i + 1, e.to_string()))
            })
            .collect::<Result<Vec<f64>>>()?;
        records.push(DescriptorRecord {
            specimen_id: fields[0].to_string(),
            species_id: fields[1].to_string(),
            values,
        });
    }
    Ok(records)
}

/// Packed little-endian form: `FDSC`, u32 record count, then every value as f64.
pub fn write_descriptor_binary(path: &Path, records: &[DescriptorRecord]) -> Result<()> {
    let mut out = Vec::new();
    out.write_all(BINARY_MAGIC)?;
    out.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        for v in &r.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads the packed form back into one value vector per record.
pub fn read_descriptor_binary(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_descriptor_binary(&bytes)
}

pub fn decode_descriptor_binary(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    if bytes.len() < 8 || &bytes[..4] != BINARY_MAGIC {
        return Err(format_err("descriptor binary", 0, "missing FDSC magic"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() % 8 != 0 || (count == 0 && !body.is_empty()) {
        return Err(format_err("descriptor binary", 0, "truncated payload"));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let values = body.len() / 8;
    if values % count != 0 {
        return Err(format_err(
            "descriptor binary",
            0,
            format!("{values} values do not split into {count} records"),
        ));
    }
    let floats: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(floats.chunks(values / count).map(<[f64]>::to_vec).collect())
}

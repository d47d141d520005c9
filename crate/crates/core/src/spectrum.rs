//! Lorentzian ODMR spectra built from transition tables, measured-spectrum
//! containers and the CSV formats used for both.
//!
//! Peaks are unit-area Lorentzians parameterised by their half width at half
//! maximum, so a peak's amplitude is exactly its area. Positive values are
//! fluorescence dips.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spin_core::NvLabel;
use crate::transitions::TransitionTable;

/// `γ / (π ((f - c)² + γ²))`.
pub fn lorentzian(f: f64, center: f64, hwhm: f64) -> f64 {
    let d = f - center;
    hwhm / (std::f64::consts::PI * (d * d + hwhm * hwhm))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub center_mhz: f64,
    pub hwhm_mhz: f64,
    pub amplitude: f64,
}

impl Peak {
    pub fn at(&self, f: f64) -> f64 {
        self.amplitude * lorentzian(f, self.center_mhz, self.hwhm_mhz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumModel {
    pub peaks: Vec<Peak>,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Product of all normalisation factors applied to `values` and peak
    /// amplitudes.
    pub scale: f64,
}

impl SpectrumModel {
    /// Sum of analytic peak areas.
    pub fn total_area(&self) -> f64 {
        self.peaks.iter().map(|p| p.amplitude).sum()
    }

    /// Values rescaled so the largest magnitude is 1.
    pub fn normalize(&self) -> Result<SpectrumModel> {
        let k = 1.0 / peak_magnitude(&self.values)?;
        Ok(SpectrumModel {
            peaks: self
                .peaks
                .iter()
                .map(|p| Peak {
                    amplitude: p.amplitude * k,
                    ..*p
                })
                .collect(),
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * k).collect(),
            scale: self.scale * k,
        })
    }
}

/// Ascending, finite, nonempty, no repeated points.
pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("frequency grid is empty"));
    }
    if grid.iter().any(|f| !f.is_finite()) {
        return Err(Error::invalid("frequency grid contains non-finite values"));
    }
    if let Some(k) = grid.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!(
            "frequency grid not strictly ascending at index {}",
            k + 1
        )));
    }
    Ok(())
}

/// `start, start + step, ...` up to and including `stop` (within 1e-9 step).
pub fn uniform_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !start.is_finite() || !stop.is_finite() || stop < start {
        return Err(Error::invalid(format!(
            "bad grid {start}:{step}:{stop} (need start <= stop, step > 0)"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    if n > 10_000_000 {
        return Err(Error::Resource(format!("grid of {n} points")));
    }
    Ok((0..n).map(|k| start + k as f64 * step).collect())
}

fn peak_magnitude(values: &[f64]) -> Result<f64> {
    let m = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if m > 0.0 && m.is_finite() {
        Ok(m)
    } else {
        Err(Error::invalid("cannot normalise an all-zero spectrum"))
    }
}

pub fn peaks_from_table(table: &TransitionTable, hwhm_mhz: f64) -> Vec<Peak> {
    table
        .rows
        .iter()
        .map(|r| Peak {
            center_mhz: r.freq_mhz,
            hwhm_mhz,
            amplitude: r.intensity,
        })
        .collect()
}

pub fn evaluate(peaks: &[Peak], grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&f| peaks.iter().map(|p| p.at(f)).sum()).collect()
}

/// One common-width Lorentzian per table row, area equal to its intensity.
pub fn synthesize(table: &TransitionTable, hwhm_mhz: f64, grid: &[f64]) -> Result<SpectrumModel> {
    if !(hwhm_mhz > 0.0 && hwhm_mhz.is_finite()) {
        return Err(Error::invalid(format!("line width must be positive, got {hwhm_mhz}")));
    }
    validate_grid(grid)?;
    let peaks = peaks_from_table(table, hwhm_mhz);
    Ok(SpectrumModel {
        values: evaluate(&peaks, grid),
        peaks,
        grid: grid.to_vec(),
        scale: 1.0,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMeta {
    pub current_a: Option<f64>,
    pub b_mt: Option<f64>,
    pub contrast_pct: Option<f64>,
    /// Normalisation factor already applied to the values.
    pub scale: Option<f64>,
    /// Unrecognised `# key=value` lines, kept verbatim.
    pub extra: BTreeMap<String, String>,
}

impl SpectrumMeta {
    fn set(&mut self, key: &str, value: &str, path: &Path, line: usize) -> Result<()> {
        let slot = match key {
            "current_a" => &mut self.current_a,
            "b_mt" => &mut self.b_mt,
            "contrast_pct" => &mut self.contrast_pct,
            "scale" => &mut self.scale,
            _ => {
                self.extra.insert(key.to_string(), value.to_string());
                return Ok(());
            }
        };
        let v: f64 = value
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad number for '{key}'")))?;
        if !v.is_finite() {
            return Err(Error::parse(path, line, format!("non-finite value for '{key}'")));
        }
        *slot = Some(v);
        Ok(())
    }

    fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in [
            ("current_a", self.current_a),
            ("b_mt", self.b_mt),
            ("contrast_pct", self.contrast_pct),
            ("scale", self.scale),
        ] {
            if let Some(v) = v {
                out.push(format!("# {k}={}", fmt9(v)));
            }
        }
        for (k, v) in &self.extra {
            out.push(format!("# {k}={v}"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredSpectrum {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Per-point uncertainty; unit weights when absent.
    pub sigma: Option<Vec<f64>>,
    pub meta: SpectrumMeta,
}

impl MeasuredSpectrum {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let s = MeasuredSpectrum {
            grid,
            values,
            sigma: None,
            meta: SpectrumMeta::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.grid)?;
        if self.values.len() != self.grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} grid points",
                self.values.len(),
                self.grid.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("spectrum values must be finite"));
        }
        if let Some(s) = &self.sigma {
            if s.len() != self.grid.len() {
                return Err(Error::GridMismatch(format!(
                    "{} sigmas for {} grid points",
                    s.len(),
                    self.grid.len()
                )));
            }
            if s.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(Error::invalid("sigma must be positive and finite"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn sigma_at(&self, k: usize) -> f64 {
        self.sigma.as_ref().map_or(1.0, |s| s[k])
    }

    pub fn normalize(&self) -> Result<MeasuredSpectrum> {
        let k = 1.0 / peak_magnitude(&self.values)?;
        let mut meta = self.meta.clone();
        meta.scale = Some(meta.scale.unwrap_or(1.0) * k);
        Ok(MeasuredSpectrum {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * k).collect(),
            sigma: self.sigma.as_ref().map(|s| s.iter().map(|x| x * k).collect()),
            meta,
        })
    }

    /// Every `factor`-th point starting from the first.
    pub fn subsample(&self, factor: usize) -> Result<MeasuredSpectrum> {
        if factor == 0 {
            return Err(Error::invalid("subsampling factor must be positive"));
        }
        let pick = |v: &[f64]| v.iter().step_by(factor).copied().collect::<Vec<_>>();
        Ok(MeasuredSpectrum {
            grid: pick(&self.grid),
            values: pick(&self.values),
            sigma: self.sigma.as_deref().map(pick),
            meta: self.meta.clone(),
        })
    }
}

/// Reads `freq_mhz,value[,sigma]` with optional `# key=value` meta lines.
/// `negate` flips the sign of the values, for files that record dips as
/// negative numbers.
pub fn read_spectrum(path: &Path, negate: bool) -> Result<MeasuredSpectrum> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_spectrum_from(BufReader::new(file), path, negate)
}

pub fn read_spectrum_from(reader: impl BufRead, path: &Path, negate: bool) -> Result<MeasuredSpectrum> {
    let mut meta = SpectrumMeta::default();
    let mut header: Option<bool> = None;
    let (mut grid, mut values, mut sigma) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if let Some(comment) = text.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                meta.set(k.trim(), v.trim(), path, lineno)?;
            }
            continue;
        }
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        let Some(with_sigma) = header else {
            header = Some(match fields.as_slice() {
                ["freq_mhz", "value"] => false,
                ["freq_mhz", "value", "sigma"] => true,
                _ => {
                    return Err(Error::parse(
                        path,
                        lineno,
                        "expected header 'freq_mhz,value' or 'freq_mhz,value,sigma'",
                    ))
                }
            });
            continue;
        };
        let want = if with_sigma { 3 } else { 2 };
        if fields.len() != want {
            return Err(Error::parse(path, lineno, format!("expected {want} columns, got {}", fields.len())));
        }
        let num = |s: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad number '{s}'")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(path, lineno, format!("non-finite number '{s}'")))
            }
        };
        let f = num(fields[0])?;
        if let Some(&last) = grid.last() {
            if f <= last {
                return Err(Error::parse(path, lineno, "frequencies must be strictly ascending"));
            }
        }
        grid.push(f);
        let v = num(fields[1])?;
        values.push(if negate { -v } else { v });
        if with_sigma {
            let s = num(fields[2])?;
            if s <= 0.0 {
                return Err(Error::parse(path, lineno, "sigma must be positive"));
            }
            sigma.push(s);
        }
    }
    if header.is_none() {
        return Err(Error::parse(path, 1, "missing 'freq_mhz,value' header"));
    }
    if grid.is_empty() {
        return Err(Error::parse(path, 1, "no data rows"));
    }
    let spec = MeasuredSpectrum {
        grid,
        values,
        sigma: if header == Some(true) { Some(sigma) } else { None },
        meta,
    };
    spec.validate()?;
    Ok(spec)
}

/// Nine significant digits, `%.9g` style: fixed notation for exponents in
/// `[-5, 9)`, otherwise scientific. Trailing zeros are dropped.
pub fn fmt9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..9).contains(&exp) {
        trim(&format!("{x:.*}", (8 - exp) as usize))
    } else {
        format!("{}e{}{:02}", trim(mant), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

pub fn write_spectrum_to(
    mut w: impl Write,
    grid: &[f64],
    values: &[f64],
    sigma: Option<&[f64]>,
    meta: &SpectrumMeta,
) -> std::io::Result<()> {
    for line in meta.lines() {
        writeln!(w, "{line}")?;
    }
    match sigma {
        Some(s) => {
            writeln!(w, "freq_mhz,value,sigma")?;
            for ((f, v), s) in grid.iter().zip(values).zip(s) {
                writeln!(w, "{},{},{}", fmt9(*f), fmt9(*v), fmt9(*s))?;
            }
        }
        None => {
            writeln!(w, "freq_mhz,value")?;
            for (f, v) in grid.iter().zip(values) {
                writeln!(w, "{},{}", fmt9(*f), fmt9(*v))?;
            }
        }
    }
    w.flush()
}

pub fn write_measured(path: &Path, spec: &MeasuredSpectrum) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_spectrum_to(
        std::io::BufWriter::new(file),
        &spec.grid,
        &spec.values,
        spec.sigma.as_deref(),
        &spec.meta,
    )
    .map_err(|e| Error::io(path, e))
}

pub fn write_model(path: &Path, model: &SpectrumModel, meta: &SpectrumMeta) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_spectrum_to(std::io::BufWriter::new(file), &model.grid, &model.values, None, meta)
        .map_err(|e| Error::io(path, e))
}

/// `b_mt,freq_mhz,intensity,label_from,label_to`, one line per row.
pub fn write_transitions_to(w: impl Write, tables: &[TransitionTable]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Internal(format!("csv: {e}"));
    out.write_record(["b_mt", "freq_mhz", "intensity", "label_from", "label_to"])
        .map_err(csv_err)?;
    for t in tables {
        for r in &t.rows {
            out.write_record([
                fmt9(t.b_mt),
                fmt9(r.freq_mhz),
                fmt9(r.intensity),
                r.label_from.to_string(),
                r.label_to.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush().map_err(|e| Error::Internal(format!("csv flush: {e}")))
}

pub fn write_transitions(path: &Path, tables: &[TransitionTable]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_transitions_to(std::io::BufWriter::new(file), tables)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub b_mt: f64,
    pub freq_mhz: f64,
    pub intensity: f64,
}

/// Follows the transition between two nominal labels across a sweep.
///
/// Labels without carbon projections match every 13C configuration and the
/// matching rows are summed. Points where no row survives the intensity
/// floor report zero intensity at the eigenvalue difference of the two
/// levels.
pub fn track_transition(sweep: &[TransitionTable], from: &NvLabel, to: &NvLabel) -> Result<Vec<TrackPoint>> {
    let matches = |want: &NvLabel, got: &NvLabel| {
        if want.mj2.is_empty() {
            got.matches_nv(want.ms, want.mi)
        } else {
            want == got
        }
    };
    sweep
        .iter()
        .map(|t| {
            let level = |want: &NvLabel| {
                t.levels
                    .iter()
                    .find(|(l, _)| matches(want, l))
                    .map(|(_, e)| *e)
                    .ok_or_else(|| Error::invalid(format!("no level labelled {want} at B = {} mT", t.b_mt)))
            };
            let (e_from, e_to) = (level(from)?, level(to)?);
            let mut intensity = 0.0;
            let mut best: Option<(f64, f64)> = None;
            for r in &t.rows {
                let forward = matches(from, &r.label_from) && matches(to, &r.label_to);
                let backward = matches(from, &r.label_to) && matches(to, &r.label_from);
                if forward || backward {
                    intensity += r.intensity;
                    if best.is_none_or(|(w, _)| r.intensity > w) {
                        best = Some((r.intensity, r.freq_mhz));
                    }
                }
            }
            Ok(TrackPoint {
                b_mt: t.b_mt,
                freq_mhz: best.map_or((e_to - e_from).abs(), |(_, f)| f),
                intensity,
            })
        })
        .collect()
}

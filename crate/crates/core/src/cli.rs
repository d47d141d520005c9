//! Command-line front end. `main.rs` only parses arguments, caps the
//! thread pool and maps errors to exit codes.
//!
//! Settings resolve as flag, then `--config` TOML file, then default.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::carbon13::{self, mc_average_spectrum, McConfig};
use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::fitting::{
    calibrate_field, fit_spectrum, polarization::DEFAULT_EXCLUSION_MT, polarization_sweep, FitBounds, FitOptions,
    FitParams, FitResult, NelderMead, PolarizationPoint,
};
use crate::hamiltonian::{gslac_field, FieldConfig};
use crate::spectrum::{
    fmt9, read_spectrum, synthesize, uniform_grid, write_spectrum_to, write_transitions_to, SpectrumMeta,
};
use crate::transitions::{transition_sweep, IntensityOptions, SpinTemperature, TransitionMode, TransitionTable};

pub const THREADS_ENV: &str = "NVGSLAC_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "nvgslac", version, about = "NV-centre hyperfine levels, ODMR spectra and fits near the ground-state level anticrossing")]
pub struct Cli {
    /// `key = value` overrides of the physical constants.
    #[arg(long, global = true)]
    pub constants: Option<PathBuf>,
    /// TOML file of default settings (flags take precedence).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (simulate, mc13) or file (other commands; stdout if absent).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Transition table and Lorentzian spectrum at one field or over a sweep.
    Simulate {
        #[command(flatten)]
        field: FieldArgs,
        #[command(flatten)]
        line: LineArgs,
    },
    /// Fit a measured spectrum and write a JSON report.
    Fit {
        input: PathBuf,
        #[command(flatten)]
        field: FieldArgs,
        #[command(flatten)]
        line: LineArgs,
        /// Recorded in the report provenance.
        #[arg(long)]
        seed: Option<u64>,
        /// Values in the file are negative dips.
        #[arg(long)]
        negate: bool,
        #[arg(long)]
        max_evaluations: Option<usize>,
    },
    /// Straight-line field calibration from a `current_a,b_mt` CSV.
    Calibrate { input: PathBuf },
    /// Orientation and alignment from fit reports (JSON) or spectra (CSV, fitted first).
    Polarization {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        line: LineArgs,
        /// Half width of the low-confidence window around the crossing (mT).
        #[arg(long)]
        exclusion_mt: Option<f64>,
    },
    /// Monte Carlo average over random 13C placements.
    Mc13 {
        #[command(flatten)]
        field: FieldArgs,
        #[command(flatten)]
        line: LineArgs,
        #[command(flatten)]
        mc: McArgs,
    },
    /// Print the effective physical constants.
    Constants,
}

#[derive(Debug, Clone, Default, Args)]
pub struct FieldArgs {
    #[arg(long)]
    pub b_mt: Option<f64>,
    #[arg(long)]
    pub b_start: Option<f64>,
    #[arg(long)]
    pub b_stop: Option<f64>,
    #[arg(long)]
    pub b_step: Option<f64>,
    #[arg(long)]
    pub theta_deg: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct LineArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    /// Lorentzian half width at half maximum (MHz).
    #[arg(long)]
    pub width_mhz: Option<f64>,
    /// Frequency grid `start:stop:step` in MHz.
    #[arg(long)]
    pub grid: Option<String>,
    /// `hi` (m_S = 0 → +1), `lo` (0 ↔ −1) or `all`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Fraction of lower-state population in m_S = 0.
    #[arg(long)]
    pub split: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct McArgs {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub occupancy: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Lattice family CSV (bundled table if absent).
    #[arg(long)]
    pub families: Option<PathBuf>,
}

/// Keys accepted in the `--config` TOML file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub b_mt: Option<f64>,
    pub b_start: Option<f64>,
    pub b_stop: Option<f64>,
    pub b_step: Option<f64>,
    pub theta_deg: Option<f64>,
    pub beta: Option<f64>,
    pub width_mhz: Option<f64>,
    pub grid: Option<String>,
    pub mode: Option<String>,
    pub split: Option<f64>,
    pub iterations: Option<usize>,
    pub occupancy: Option<f64>,
    pub seed: Option<u64>,
    pub families: Option<PathBuf>,
    pub constants: Option<PathBuf>,
    pub format: Option<Format>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| {
            let line = e
                .span()
                .map_or(1, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::parse(path, line, e.message().to_string())
        })
    }
}

/// Settings after merging flags, config file and defaults.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Effective {
    pub b_mt: Option<f64>,
    pub b_start: Option<f64>,
    pub b_stop: Option<f64>,
    pub b_step: Option<f64>,
    pub theta_deg: f64,
    pub beta: f64,
    pub width_mhz: f64,
    pub grid: Option<String>,
    pub mode: String,
    pub split: f64,
    pub iterations: usize,
    pub occupancy: f64,
    pub seed: u64,
    pub families: Option<PathBuf>,
    pub constants: Option<PathBuf>,
    pub format: Format,
}

impl Effective {
    fn resolve(cli: &Cli, field: &FieldArgs, line: &LineArgs, mc: &McArgs, seed: Option<u64>, file: ConfigFile) -> Self {
        let default_format = match cli.command {
            Command::Fit { .. } | Command::Calibrate { .. } => Format::Json,
            _ => Format::Csv,
        };
        Effective {
            b_mt: field.b_mt.or(file.b_mt),
            b_start: field.b_start.or(file.b_start),
            b_stop: field.b_stop.or(file.b_stop),
            b_step: field.b_step.or(file.b_step),
            theta_deg: field.theta_deg.or(file.theta_deg).unwrap_or(0.0),
            beta: line.beta.or(file.beta).unwrap_or(0.0),
            width_mhz: line.width_mhz.or(file.width_mhz).unwrap_or(1.0),
            grid: line.grid.clone().or(file.grid),
            mode: line.mode.clone().or(file.mode).unwrap_or_else(|| "hi".into()),
            split: line.split.or(file.split).unwrap_or(1.0),
            iterations: mc.iterations.or(file.iterations).unwrap_or(400),
            occupancy: mc.occupancy.or(file.occupancy).unwrap_or(carbon13::DEFAULT_OCCUPANCY),
            seed: mc.seed.or(seed).or(file.seed).unwrap_or(0),
            families: mc.families.clone().or(file.families),
            constants: cli.constants.clone().or(file.constants),
            format: cli.format.or(file.format).unwrap_or(default_format),
        }
    }

    fn mode(&self) -> Result<TransitionMode> {
        self.mode.parse()
    }

    fn physical_constants(&self) -> Result<PhysicalConstants> {
        match &self.constants {
            Some(p) => PhysicalConstants::load(p),
            None => Ok(PhysicalConstants::default()),
        }
    }

    /// A single `--b-mt`, or the `--b-start/--b-stop/--b-step` sweep.
    fn fields(&self) -> Result<Vec<f64>> {
        let sweep = [self.b_start, self.b_stop, self.b_step];
        match (self.b_mt, sweep) {
            (Some(b), [None, None, None]) => Ok(vec![b]),
            (None, [Some(a), Some(z), Some(s)]) => {
                if !(s > 0.0) {
                    return Err(Error::invalid(format!("--b-step must be positive, got {s}")));
                }
                uniform_grid(a, z, s)
            }
            (Some(_), _) => Err(Error::invalid("give either --b-mt or a --b-start/--b-stop/--b-step sweep, not both")),
            _ => Err(Error::invalid("a field is required: --b-mt, or all of --b-start, --b-stop, --b-step")),
        }
    }

    fn intensity(&self) -> IntensityOptions {
        IntensityOptions {
            manifold_split: self.split,
            ..Default::default()
        }
    }

    fn grid_for(&self, c: &PhysicalConstants, mode: TransitionMode, fields: &[f64]) -> Result<Vec<f64>> {
        if let Some(spec) = &self.grid {
            return parse_grid(spec);
        }
        match mode {
            TransitionMode::Hi => {
                let lo = fields.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = fields.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                uniform_grid(c.d_g + c.gamma_e * lo - 20.0, c.d_g + c.gamma_e * hi + 20.0, 0.05)
            }
            TransitionMode::Lo => uniform_grid(0.0, 40.0, 0.05),
            TransitionMode::All => Err(Error::invalid("--grid is required with --mode all")),
        }
    }
}

pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').map(str::trim).collect();
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::invalid(format!("--grid expects start:stop:step in MHz, got '{spec}'")))?;
    match nums.as_slice() {
        [a, z, s] => uniform_grid(*a, *z, *s),
        _ => Err(Error::invalid(format!("--grid expects start:stop:step in MHz, got '{spec}'"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub command: String,
    pub input_file: Option<String>,
    pub seed: u64,
    pub constants_hash: String,
    pub config: serde_json::Value,
}

impl Provenance {
    fn new(command: &str, input: Option<&Path>, eff: &Effective, c: &PhysicalConstants) -> Self {
        Provenance {
            tool: format!("nvgslac {}", env!("CARGO_PKG_VERSION")),
            command: command.into(),
            input_file: input.map(|p| p.display().to_string()),
            seed: eff.seed,
            constants_hash: c.fingerprint(),
            config: serde_json::to_value(eff).expect("plain struct serialises"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    #[serde(flatten)]
    pub result: FitResult,
    pub provenance: Provenance,
}

/// Exit status for an error: 2 validation, 3 parse, 4 non-convergence,
/// 5 resource cap, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Range(_) | Error::GridMismatch(_) | Error::Io { .. } => 2,
        Error::Parse { .. } => 3,
        Error::NonConvergence { .. } => 4,
        Error::Resource(_) => 5,
        Error::Internal(_) => 1,
    }
}

/// Thread cap from `NVGSLAC_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::invalid(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
    }
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serialises");
    s.push('\n');
    s
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())
                .and_then(|_| so.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn out_dir(out: Option<&Path>) -> Result<PathBuf> {
    let dir = out.map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn spectrum_text(grid: &[f64], values: &[f64], meta: &SpectrumMeta) -> String {
    let mut buf = Vec::new();
    write_spectrum_to(&mut buf, grid, values, None, meta).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

fn transitions_text(tables: &[TransitionTable]) -> Result<String> {
    let mut buf = Vec::new();
    write_transitions_to(&mut buf, tables)?;
    Ok(String::from_utf8(buf).expect("ascii output"))
}

fn meta_for(b: f64) -> SpectrumMeta {
    SpectrumMeta {
        b_mt: Some(b),
        ..Default::default()
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let none_f = FieldArgs::default();
    let none_l = LineArgs::default();
    let none_m = McArgs::default();
    match &cli.command {
        Command::Simulate { field, line } => {
            let eff = Effective::resolve(&cli, field, line, &none_m, None, file);
            cmd_simulate(&eff, cli.out.as_deref())
        }
        Command::Fit {
            input,
            field,
            line,
            seed,
            negate,
            max_evaluations,
        } => {
            let eff = Effective::resolve(&cli, field, line, &none_m, *seed, file);
            cmd_fit(&eff, input, *negate, *max_evaluations, cli.out.as_deref())
        }
        Command::Calibrate { input } => {
            let eff = Effective::resolve(&cli, &none_f, &none_l, &none_m, None, file);
            cmd_calibrate(&eff, input, cli.out.as_deref())
        }
        Command::Polarization {
            inputs,
            line,
            exclusion_mt,
        } => {
            let eff = Effective::resolve(&cli, &none_f, line, &none_m, None, file);
            cmd_polarization(&eff, inputs, exclusion_mt.unwrap_or(DEFAULT_EXCLUSION_MT), cli.out.as_deref())
        }
        Command::Mc13 { field, line, mc } => {
            let eff = Effective::resolve(&cli, field, line, mc, None, file);
            cmd_mc13(&eff, cli.out.as_deref())
        }
        Command::Constants => {
            let eff = Effective::resolve(&cli, &none_f, &none_l, &none_m, None, file);
            cmd_constants(&eff, cli.out.as_deref())
        }
    }
}

#[derive(Serialize)]
struct SimulatedPoint<'a> {
    b_mt: f64,
    transitions: &'a TransitionTable,
    grid: &'a [f64],
    values: Vec<f64>,
}

pub fn cmd_simulate(eff: &Effective, out: Option<&Path>) -> Result<()> {
    let c = eff.physical_constants()?;
    let mode = eff.mode()?;
    let fields = eff.fields()?;
    let grid = eff.grid_for(&c, mode, &fields)?;
    if !(eff.width_mhz > 0.0) {
        return Err(Error::invalid(format!("--width-mhz must be positive, got {}", eff.width_mhz)));
    }
    FieldConfig::new(fields[0], eff.theta_deg, 0.0)?;
    let beta = SpinTemperature::new(eff.beta)?;
    let opts = eff.intensity();
    opts.validate()?;
    let dir = out_dir(out)?;

    let tables: Vec<TransitionTable> = transition_sweep(&c, &fields, eff.theta_deg, beta, &opts)?
        .into_iter()
        .map(|t| t.select(mode))
        .collect();
    let spectra = tables
        .par_iter()
        .map(|t| synthesize(t, eff.width_mhz, &grid).map(|s| s.values))
        .collect::<Result<Vec<_>>>()?;
    let prov = Provenance::new("simulate", None, eff, &c);
    match eff.format {
        Format::Csv => {
            write_file(&dir.join("transitions.csv"), &transitions_text(&tables)?)?;
            for (k, (t, values)) in tables.iter().zip(&spectra).enumerate() {
                let name = if fields.len() == 1 {
                    "spectrum.csv".to_string()
                } else {
                    format!("spectrum_{k:04}.csv")
                };
                write_file(&dir.join(name), &spectrum_text(&grid, values, &meta_for(t.b_mt)))?;
            }
            write_file(&dir.join("provenance.json"), &json(&prov))?;
        }
        Format::Json => {
            let points: Vec<SimulatedPoint> = tables
                .iter()
                .zip(spectra)
                .map(|(t, values)| SimulatedPoint {
                    b_mt: t.b_mt,
                    transitions: t,
                    grid: &grid,
                    values,
                })
                .collect();
            write_file(
                &dir.join("simulation.json"),
                &json(&serde_json::json!({ "points": points, "provenance": prov })),
            )?;
        }
    }
    Ok(())
}

fn fit_file(
    c: &PhysicalConstants,
    eff: &Effective,
    input: &Path,
    negate: bool,
    max_evaluations: Option<usize>,
) -> Result<FitResult> {
    let data = read_spectrum(input, negate)?;
    let mode = eff.mode()?;
    let b = eff.b_mt.or(data.meta.b_mt).ok_or_else(|| {
        Error::invalid(format!("{}: no field given (use --b-mt or a '# b_mt=' line)", input.display()))
    })?;
    let initial = FitParams {
        beta: eff.beta,
        b_mt: b,
        width_mhz: eff.width_mhz,
        theta_deg: eff.theta_deg,
        manifold_split: eff.split,
    };
    let mut opts = FitOptions::for_mode(mode);
    if let Some(m) = max_evaluations {
        opts.optimizer = NelderMead {
            max_evaluations: m,
            ..opts.optimizer
        };
    }
    fit_spectrum(c, &data, &initial, &FitBounds::around(b), &opts)
}

fn fit_csv(r: &FitResult) -> String {
    let p = &r.params;
    let mut s = String::from("key,value\n");
    for (k, v) in [
        ("beta", p.beta),
        ("b_mt", p.b_mt),
        ("width_mhz", p.width_mhz),
        ("theta_deg", p.theta_deg),
        ("manifold_split", p.manifold_split),
        ("chi2_red", r.chi2_red),
        ("amplitude_scale", r.amplitude_scale),
    ] {
        s.push_str(&format!("{k},{}\n", fmt9(v)));
    }
    for a in &r.peak_areas {
        s.push_str(&format!("\"area {}\",{}\n", a.label, fmt9(a.area)));
    }
    s
}

pub fn cmd_fit(
    eff: &Effective,
    input: &Path,
    negate: bool,
    max_evaluations: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let c = eff.physical_constants()?;
    let prov = Provenance::new("fit", Some(input), eff, &c);
    let (result, err) = match fit_file(&c, eff, input, negate, max_evaluations) {
        Ok(r) => (r, None),
        Err(Error::NonConvergence { evaluations, best }) => {
            ((*best).clone(), Some(Error::NonConvergence { evaluations, best }))
        }
        Err(e) => return Err(e),
    };
    let text = match eff.format {
        Format::Json => json(&FitReport { result, provenance: prov }),
        Format::Csv => fit_csv(&result),
    };
    emit(out, &text)?;
    err.map_or(Ok(()), Err)
}

#[derive(Debug, Deserialize)]
struct CalibrationRow {
    current_a: f64,
    b_mt: f64,
}

/// Reads `current_a,b_mt` rows.
pub fn read_calibration_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(path, 1, format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?;
    if header.iter().ne(["current_a", "b_mt"]) {
        return Err(Error::parse(path, 1, "expected header 'current_a,b_mt'"));
    }
    let mut points = Vec::new();
    for row in reader.deserialize::<CalibrationRow>() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        points.push((row.current_a, row.b_mt));
    }
    if points.is_empty() {
        return Err(Error::parse(path, 1, "no data rows"));
    }
    Ok(points)
}

pub fn cmd_calibrate(eff: &Effective, input: &Path, out: Option<&Path>) -> Result<()> {
    let c = eff.physical_constants()?;
    let b0 = gslac_field(&c);
    let all = read_calibration_points(input)?;
    let (kept, excluded): (Vec<_>, Vec<_>) = all.iter().partition(|(_, b)| (b - b0).abs() > 0.5);
    let model = calibrate_field(&kept)?;
    let text = match eff.format {
        Format::Json => json(&serde_json::json!({
            "slope_mt_per_a": model.slope,
            "intercept_mt": model.intercept,
            "fit_range": model.fit_range,
            "excluded_near_gslac": excluded.len(),
            "provenance": Provenance::new("calibrate", Some(input), eff, &c),
        })),
        Format::Csv => format!(
            "slope_mt_per_a,intercept_mt,points,excluded_near_gslac\n{},{},{},{}\n",
            fmt9(model.slope),
            fmt9(model.intercept),
            kept.len(),
            excluded.len()
        ),
    };
    emit(out, &text)
}

pub fn cmd_polarization(eff: &Effective, inputs: &[PathBuf], exclusion_mt: f64, out: Option<&Path>) -> Result<()> {
    let c = eff.physical_constants()?;
    if !(exclusion_mt >= 0.0) {
        return Err(Error::invalid("--exclusion-mt must be nonnegative"));
    }
    let mut fits = inputs
        .par_iter()
        .map(|p| {
            if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let report: FitReport = serde_json::from_str(&text)
                    .map_err(|e| Error::parse(p, e.line(), e.to_string()))?;
                Ok(report.result)
            } else {
                fit_file(&c, eff, p, false, None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    fits.sort_by(|a, b| a.params.b_mt.total_cmp(&b.params.b_mt));
    let points = polarization_sweep(&fits, gslac_field(&c), exclusion_mt);
    let text = match eff.format {
        Format::Json => json(&serde_json::json!({
            "points": points,
            "provenance": Provenance::new("polarization", None, eff, &c),
        })),
        Format::Csv => polarization_csv(&points),
    };
    emit(out, &text)
}

fn polarization_csv(points: &[PolarizationPoint]) -> String {
    let mut s = String::from("b_mt,orientation,alignment,n_plus1,n_0,n_minus1,low_confidence\n");
    for p in points {
        let (o, a, n) = match &p.report {
            Some(r) => (fmt9(r.orientation), fmt9(r.alignment), r.populations.map(fmt9)),
            None => ("nan".into(), "nan".into(), ["nan".into(), "nan".into(), "nan".into()]),
        };
        s.push_str(&format!(
            "{},{o},{a},{},{},{},{}\n",
            fmt9(p.b_mt),
            n[0],
            n[1],
            n[2],
            p.low_confidence
        ));
    }
    s
}

pub fn cmd_mc13(eff: &Effective, out: Option<&Path>) -> Result<()> {
    let c = eff.physical_constants()?;
    let mode = eff.mode()?;
    let b = match eff.fields()?.as_slice() {
        [b] => *b,
        _ => return Err(Error::invalid("mc13 takes a single --b-mt")),
    };
    let field = FieldConfig::new(b, eff.theta_deg, 0.0)?;
    let grid = eff.grid_for(&c, mode, &[b])?;
    let cfg = McConfig {
        iterations: eff.iterations,
        occupancy: eff.occupancy,
        seed: eff.seed,
        family_file: eff.families.clone(),
        ..Default::default()
    };
    cfg.validate()?;
    let families = cfg.families()?;
    let sites = carbon13::total_sites(&families);
    if !families.is_empty() && sites != carbon13::DEFAULT_SITE_COUNT {
        eprintln!(
            "warning: family table has {sites} sites, expected {}",
            carbon13::DEFAULT_SITE_COUNT
        );
    }
    let opts = eff.intensity();
    let r = mc_average_spectrum(
        &cfg,
        &families,
        &field,
        &c,
        SpinTemperature::new(eff.beta)?,
        &opts,
        mode,
        eff.width_mhz,
        &grid,
    )?;
    let dir = out_dir(out)?;
    let prov = Provenance::new("mc13", eff.families.as_deref(), eff, &c);
    match eff.format {
        Format::Csv => {
            write_file(&dir.join("spectrum.csv"), &spectrum_text(&grid, &r.mean.values, &meta_for(b)))?;
            write_file(&dir.join("stderr.csv"), &spectrum_text(&grid, &r.stderr, &meta_for(b)))?;
            write_file(&dir.join("provenance.json"), &json(&prov))?;
        }
        Format::Json => write_file(
            &dir.join("mc13.json"),
            &json(&serde_json::json!({
                "b_mt": b,
                "grid": grid,
                "mean": r.mean.values,
                "stderr": r.stderr,
                "iterations": r.iterations,
                "mean_c13": r.mean_c13,
                "provenance": prov,
            })),
        )?,
    }
    Ok(())
}

pub fn cmd_constants(eff: &Effective, out: Option<&Path>) -> Result<()> {
    let c = eff.physical_constants()?;
    let text = match eff.format {
        Format::Csv => c.to_string(),
        Format::Json => json(&c),
    };
    emit(out, &text)
}

//! On-disk formats: versioned JSON artifacts, full-precision CSV and the
//! run manifest.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use infolqg::maxdet::SolverSettings;
use infolqg::model::{CovarianceSchedule, RiccatiTables, SensorPolicy, SimulationReport, Trajectory};
use infolqg::{ProblemSpec, RankTolerance};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA_VERSION: &str = "1.0";
const SCHEMA_MAJOR: &str = "1";

pub fn nats_to_bits(x: f64) -> f64 {
    x / std::f64::consts::LN_2
}

/// Hex SHA-256 of the canonical JSON form of `spec`.
pub fn spec_hash(spec: &ProblemSpec) -> String {
    let bytes = serde_json::to_vec(&spec.to_json_value()).expect("spec serializes");
    hex::encode(Sha256::digest(bytes))
}

pub fn check_schema(version: &str, what: &str) -> Result<(), CliError> {
    match version.split('.').next() {
        Some(SCHEMA_MAJOR) => Ok(()),
        _ => Err(CliError::mismatch(format!("{what}: unsupported schema_version `{version}`"))),
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::mismatch(format!("{}: {e}", path.display())))
}

/// 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn riccati_csv(tables: &RiccatiTables) -> String {
    let mut out = String::from("t,matrix,row,col,value\n");
    for t in 0..tables.horizon() {
        let named = [
            ("S", &tables.s[t]),
            ("M", &tables.m[t]),
            ("N", &tables.n[t]),
            ("K", &tables.k[t]),
            ("Theta", &tables.theta[t]),
        ];
        for (name, m) in named {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    writeln!(out, "{},{name},{},{},{}", t + 1, i + 1, j + 1, num(m[(i, j)])).unwrap();
                }
            }
        }
    }
    out
}

/// `trial,t,x_1..x_n,xhat_1..xhat_n,u_1..u_m,y_1..y_r`, padded to the largest
/// dimension over the horizon. Row `T+1` carries the final state only.
pub fn trajectories_csv(trajs: &[Trajectory]) -> String {
    let width = |f: &dyn Fn(&Trajectory) -> &Vec<Vec<f64>>| {
        trajs.iter().flat_map(|tr| f(tr).iter().map(Vec::len)).max().unwrap_or(0)
    };
    let (n, m, r) = (width(&|tr| &tr.states), width(&|tr| &tr.inputs), width(&|tr| &tr.measurements));
    let mut out = String::from("trial,t");
    for (prefix, k) in [("x", n), ("xhat", n), ("u", m), ("y", r)] {
        for i in 1..=k {
            write!(out, ",{prefix}_{i}").unwrap();
        }
    }
    out.push('\n');
    let cells = |v: Option<&Vec<f64>>, k: usize, out: &mut String| {
        for i in 0..k {
            match v.and_then(|v| v.get(i)) {
                Some(x) => write!(out, ",{}", num(*x)).unwrap(),
                None => out.push(','),
            }
        }
    };
    for tr in trajs {
        for t in 0..tr.states.len() {
            write!(out, "{},{}", tr.trial, t + 1).unwrap();
            cells(tr.states.get(t), n, &mut out);
            cells(tr.estimates.get(t), n, &mut out);
            cells(tr.inputs.get(t), m, &mut out);
            cells(tr.measurements.get(t), r, &mut out);
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleArtifact {
    pub schema_version: String,
    pub spec_hash: String,
    pub gamma_scale: f64,
    pub info_cost_bits: f64,
    #[serde(flatten)]
    pub schedule: CovarianceSchedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyArtifact {
    pub schema_version: String,
    pub spec_hash: String,
    pub gamma_scale: f64,
    pub rank_tolerance: RankTolerance,
    #[serde(flatten)]
    pub policy: SensorPolicy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportArtifact {
    pub schema_version: String,
    pub spec_hash: String,
    pub master_seed: u64,
    pub total_info_cost_bits: f64,
    /// `|empirical − predicted| / standard_error`.
    pub z_score: f64,
    pub within_3_se: bool,
    pub policy: SimulationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<SimulationReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: String,
    pub tool_version: String,
    pub command: String,
    pub input: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub spec_hash: Option<String>,
    pub settings: serde_json::Value,
    pub outputs: Vec<String>,
    pub timings: Vec<StageTiming>,
}

impl RunManifest {
    pub fn new(command: &str, input: Option<&Path>, output_dir: &Path) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            input: input.map(Path::to_path_buf),
            output_dir: output_dir.to_path_buf(),
            spec_hash: None,
            settings: serde_json::Value::Null,
            outputs: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = std::time::Instant::now();
        let out = f();
        self.timings.push(StageTiming { stage: stage.into(), seconds: start.elapsed().as_secs_f64() });
        out
    }

    pub fn write_output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&dir.join(name), bytes)?;
        self.outputs.push(name.into());
        Ok(())
    }

    pub fn write_json_output<T: Serialize>(&mut self, dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
        write_json(&dir.join(name), value)?;
        self.outputs.push(name.into());
        Ok(())
    }

    pub fn finish(self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join("manifest.json"), &self)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthesisSettings<'a> {
    pub solver: &'a SolverSettings,
    pub rank_tolerance: RankTolerance,
    pub gamma_scale: f64,
}

//! Problem data and the shared value types passed between pipeline stages.
//!
//! Indexing convention: vectors are 0-based in code, while every
//! human-facing message and file uses 1-based step numbers (`W_1` is
//! `w[0]`).

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::linalg::{self, SYMMETRY_TOLERANCE};

/// Time-varying LQG data: `x_{t+1} = A_t x_t + B_t u_t + w_t`,
/// `w_t ~ N(0, W_t)`, `x_1 ~ N(0, P_init)`, stage cost
/// `½(‖x_{t+1}‖²_{Q_t} + ‖u_t‖²_{R_t})`, information price `γ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub horizon: usize,
    /// `n_1, …, n_{T+1}`.
    pub state_dims: Vec<usize>,
    /// `m_1, …, m_T`.
    pub input_dims: Vec<usize>,
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub w: Vec<DMatrix<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub gamma: Vec<f64>,
    pub p_init: DMatrix<f64>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid problem: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("malformed problem file: {0}")]
    Format(String),
    #[error("problem file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// One failed invariant, naming the field and (1-based) step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub step: Option<usize>,
    pub message: String,
}

impl Violation {
    fn at(field: &str, step: usize, message: impl Into<String>) -> Self {
        Self { field: field.to_string(), step: Some(step + 1), message: message.into() }
    }

    fn global(field: &str, message: impl Into<String>) -> Self {
        Self { field: field.to_string(), step: None, message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(t) => write!(f, "{}_{} {}", self.field, t, self.message),
            None => write!(f, "{} {}", self.field, self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every structural and definiteness assumption of the problem.
pub fn validate_problem(spec: &ProblemSpec) -> ValidationReport {
    let mut out = Vec::new();
    let t_len = spec.horizon;
    if t_len == 0 {
        out.push(Violation::global("horizon", "must be positive"));
        return ValidationReport { violations: out };
    }
    if spec.state_dims.len() != t_len + 1 {
        out.push(Violation::global("state_dims", format!("must have {} entries", t_len + 1)));
    }
    if spec.input_dims.len() != t_len {
        out.push(Violation::global("input_dims", format!("must have {t_len} entries")));
    }
    for (name, len) in [
        ("A", spec.a.len()),
        ("B", spec.b.len()),
        ("W", spec.w.len()),
        ("Q", spec.q.len()),
        ("R", spec.r.len()),
        ("gamma", spec.gamma.len()),
    ] {
        if len != t_len {
            out.push(Violation::global(name, format!("must have {t_len} per-step entries, found {len}")));
        }
    }
    if !out.is_empty() {
        return ValidationReport { violations: out };
    }
    if spec.state_dims.contains(&0) {
        out.push(Violation::global("state_dims", "must be positive"));
    }
    if spec.input_dims.contains(&0) {
        out.push(Violation::global("input_dims", "must be positive"));
    }

    let n1 = spec.state_dims[0];
    let shape_ok = |m: &DMatrix<f64>, r: usize, c: usize| m.nrows() == r && m.ncols() == c;
    if !shape_ok(&spec.p_init, n1, n1) {
        out.push(Violation::global("P_init", "dimension mismatch"));
    } else {
        check_symmetric_pd(&mut out, "P_init", None, &spec.p_init, Definiteness::Pd);
    }

    for t in 0..t_len {
        let (n, n_next, m) = (spec.state_dims[t], spec.state_dims[t + 1], spec.input_dims[t]);
        if !shape_ok(&spec.a[t], n_next, n) {
            out.push(Violation::at("A", t, "dimension mismatch"));
        }
        if !shape_ok(&spec.b[t], n_next, m) {
            out.push(Violation::at("B", t, "dimension mismatch"));
        }
        for (name, mat, dim, def) in [
            ("W", &spec.w[t], n_next, Definiteness::Pd),
            ("Q", &spec.q[t], n_next, Definiteness::Psd),
            ("R", &spec.r[t], m, Definiteness::Pd),
        ] {
            if !shape_ok(mat, dim, dim) {
                out.push(Violation::at(name, t, "dimension mismatch"));
            } else {
                check_symmetric_pd(&mut out, name, Some(t), mat, def);
            }
        }
        for (name, mat) in [("A", &spec.a[t]), ("B", &spec.b[t])] {
            if mat.iter().any(|v| !v.is_finite()) {
                out.push(Violation::at(name, t, "has non-finite entries"));
            }
        }
        let g = spec.gamma[t];
        if !(g.is_finite() && g > 0.0) {
            out.push(Violation::at("gamma", t, "must be positive and finite"));
        }
    }
    ValidationReport { violations: out }
}

#[derive(Clone, Copy)]
enum Definiteness {
    Pd,
    Psd,
}

fn check_symmetric_pd(
    out: &mut Vec<Violation>,
    name: &str,
    step: Option<usize>,
    m: &DMatrix<f64>,
    def: Definiteness,
) {
    let push = |out: &mut Vec<Violation>, msg: &str| match step {
        Some(t) => out.push(Violation::at(name, t, msg)),
        None => out.push(Violation::global(name, msg)),
    };
    if m.iter().any(|v| !v.is_finite()) {
        push(out, "has non-finite entries");
        return;
    }
    if linalg::asymmetry(m) > SYMMETRY_TOLERANCE {
        push(out, "not symmetric");
        return;
    }
    match def {
        Definiteness::Pd if !linalg::is_positive_definite(m) => push(out, "not positive definite"),
        Definiteness::Psd if !linalg::is_positive_semidefinite(m) => {
            push(out, "not positive semidefinite")
        }
        _ => {}
    }
}

impl ProblemSpec {
    /// Builds a spec from per-step matrices, inferring `n_{t+1}` from
    /// `W_t`, `m_t` from `R_t`, and `n_1` from `P_init`. The result is
    /// validated and symmetrized.
    #[allow(clippy::too_many_arguments)]
    pub fn from_steps(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        w: Vec<DMatrix<f64>>,
        q: Vec<DMatrix<f64>>,
        r: Vec<DMatrix<f64>>,
        gamma: Vec<f64>,
        p_init: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        let horizon = a.len();
        let mut state_dims = vec![p_init.nrows()];
        state_dims.extend(w.iter().map(DMatrix::nrows));
        let input_dims = r.iter().map(DMatrix::nrows).collect();
        ProblemSpec { horizon, state_dims, input_dims, a, b, w, q, r, gamma, p_init }.validated()
    }

    /// Same data at every step.
    #[allow(clippy::too_many_arguments)]
    pub fn time_invariant(
        horizon: usize,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        w: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        gamma: f64,
        p_init: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        Self::from_steps(
            vec![a; horizon],
            vec![b; horizon],
            vec![w; horizon],
            vec![q; horizon],
            vec![r; horizon],
            vec![gamma; horizon],
            p_init,
        )
    }

    /// Validates and symmetrizes the symmetric fields.
    pub fn validated(mut self) -> Result<Self, ModelError> {
        let report = validate_problem(&self);
        if !report.is_ok() {
            return Err(ModelError::Invalid(report.violations));
        }
        self.p_init = linalg::symmetrize(&self.p_init);
        for m in self.w.iter_mut().chain(self.q.iter_mut()).chain(self.r.iter_mut()) {
            *m = linalg::symmetrize(m);
        }
        Ok(self)
    }

    /// `n_t` for 0-based step `t` (`t ≤ T`).
    pub fn n(&self, t: usize) -> usize {
        self.state_dims[t]
    }

    pub fn m(&self, t: usize) -> usize {
        self.input_dims[t]
    }

    /// Copy with every `γ_t` multiplied by `scale`.
    pub fn with_gamma_scale(&self, scale: f64) -> Self {
        let mut out = self.clone();
        for g in &mut out.gamma {
            *g *= scale;
        }
        out
    }

    /// Parses the problem-file JSON format (keys `horizon`, `A`, `B`, `W`,
    /// `Q`, `R`, `gamma`, `P_init`). A single matrix is broadcast to
    /// every step; a bare number is a 1×1 matrix.
    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        let doc: Value = serde_json::from_str(text)?;
        let obj = doc.as_object().ok_or_else(|| ModelError::Format("top level must be an object".into()))?;
        let horizon = obj
            .get("horizon")
            .and_then(Value::as_u64)
            .ok_or_else(|| ModelError::Format("`horizon` must be a positive integer".into()))?
            as usize;
        if horizon == 0 {
            return Err(ModelError::Invalid(vec![Violation::global("horizon", "must be positive")]));
        }
        let per_step = |key: &str| -> Result<Vec<DMatrix<f64>>, ModelError> {
            let v = obj.get(key).ok_or_else(|| ModelError::Format(format!("missing key `{key}`")))?;
            parse_per_step_matrices(key, v, horizon)
        };
        let a = per_step("A")?;
        let b = per_step("B")?;
        let w = per_step("W")?;
        let q = per_step("Q")?;
        let r = per_step("R")?;
        let gamma = match obj.get("gamma") {
            Some(Value::Number(x)) => vec![x.as_f64().unwrap_or(f64::NAN); horizon],
            Some(Value::Array(items)) => {
                let g: Option<Vec<f64>> = items.iter().map(Value::as_f64).collect();
                let g = g.ok_or_else(|| ModelError::Format("`gamma` entries must be numbers".into()))?;
                if g.len() != horizon {
                    return Err(ModelError::Format(format!(
                        "`gamma` has {} entries, expected {horizon}",
                        g.len()
                    )));
                }
                g
            }
            _ => return Err(ModelError::Format("`gamma` must be a number or an array".into())),
        };
        let p_init = obj
            .get("P_init")
            .ok_or_else(|| ModelError::Format("missing key `P_init`".into()))
            .and_then(|v| parse_matrix("P_init", v))?;

        let mut state_dims = vec![p_init.nrows()];
        state_dims.extend(w.iter().map(DMatrix::nrows));
        let mut input_dims: Vec<usize> = r.iter().map(DMatrix::nrows).collect();
        if let Some(v) = obj.get("state_dims") {
            state_dims = parse_dims("state_dims", v)?;
        }
        if let Some(v) = obj.get("input_dims") {
            input_dims = parse_dims("input_dims", v)?;
        }
        ProblemSpec { horizon, state_dims, input_dims, a, b, w, q, r, gamma, p_init }.validated()
    }

    /// Canonical JSON form: every per-step list written out in full.
    pub fn to_json_value(&self) -> Value {
        let mats = |v: &[DMatrix<f64>]| Value::from(v.iter().map(rows_value).collect::<Vec<_>>());
        serde_json::json!({
            "horizon": self.horizon,
            "state_dims": self.state_dims,
            "input_dims": self.input_dims,
            "A": mats(&self.a),
            "B": mats(&self.b),
            "W": mats(&self.w),
            "Q": mats(&self.q),
            "R": mats(&self.r),
            "gamma": self.gamma,
            "P_init": rows_value(&self.p_init),
        })
    }
}

fn rows_value(m: &DMatrix<f64>) -> Value {
    serde_json::to_value(linalg::to_rows(m)).expect("finite matrix serializes")
}

fn parse_dims(key: &str, v: &Value) -> Result<Vec<usize>, ModelError> {
    v.as_array()
        .and_then(|a| a.iter().map(|x| x.as_u64().map(|d| d as usize)).collect::<Option<Vec<_>>>())
        .ok_or_else(|| ModelError::Format(format!("`{key}` must be an array of integers")))
}

/// Nesting depth of the first element chain: number → 0, [..] → 1, …
fn depth(v: &Value) -> usize {
    match v {
        Value::Array(items) => 1 + items.first().map_or(0, depth),
        _ => 0,
    }
}

fn parse_matrix(key: &str, v: &Value) -> Result<DMatrix<f64>, ModelError> {
    match v {
        Value::Number(x) => Ok(DMatrix::from_element(1, 1, x.as_f64().unwrap_or(f64::NAN))),
        Value::Array(_) if depth(v) == 2 => {
            let rows: Vec<Vec<f64>> = serde_json::from_value(v.clone())
                .map_err(|_| ModelError::Format(format!("`{key}` must contain numbers only")))?;
            linalg::from_rows(&rows).ok_or_else(|| ModelError::Format(format!("`{key}` has ragged rows")))
        }
        _ => Err(ModelError::Format(format!("`{key}` must be a number or a nested row-major array"))),
    }
}

fn parse_per_step_matrices(key: &str, v: &Value, horizon: usize) -> Result<Vec<DMatrix<f64>>, ModelError> {
    let list = match (v, depth(v)) {
        (Value::Array(items), 1) | (Value::Array(items), 3) => items
            .iter()
            .enumerate()
            .map(|(t, item)| parse_matrix(&format!("{key}_{}", t + 1), item))
            .collect::<Result<Vec<_>, _>>()?,
        _ => vec![parse_matrix(key, v)?; horizon],
    };
    if list.len() != horizon {
        return Err(ModelError::Format(format!(
            "`{key}` has {} per-step entries, expected {horizon}",
            list.len()
        )));
    }
    Ok(list)
}

/// Output of the backward Riccati recursion, one entry per step.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiTables {
    pub s: Vec<DMatrix<f64>>,
    pub m: Vec<DMatrix<f64>>,
    pub n: Vec<DMatrix<f64>>,
    pub k: Vec<DMatrix<f64>>,
    pub theta: Vec<DMatrix<f64>>,
}

impl RiccatiTables {
    pub fn horizon(&self) -> usize {
        self.s.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    /// Most negative eigenvalue over all constraint slacks, clipped at 0
    /// and sign-flipped: 0 means feasible.
    pub feasibility_residual: f64,
    /// Duality-gap bound at termination.
    pub optimality_residual: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    /// Final barrier weight on the objective; dual estimates are
    /// `Z_i = F_i⁻¹ / barrier_parameter`.
    pub barrier_parameter: f64,
    pub epsilon: f64,
    pub converged: bool,
}

/// Optimal covariance schedule and its cost decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSchedule {
    #[serde(rename = "P_post", with = "serde_mats")]
    pub p_post: Vec<DMatrix<f64>>,
    /// `Π_t` for every step; `Π_T = P_post_T`.
    #[serde(rename = "Pi", with = "serde_mats")]
    pub pi: Vec<DMatrix<f64>>,
    #[serde(rename = "P_prior", with = "serde_mats")]
    pub p_prior: Vec<DMatrix<f64>>,
    pub objective_value: f64,
    #[serde(rename = "info_cost_nats")]
    pub info_cost: f64,
    pub control_cost_predicted: f64,
    /// Constant term added to the max-det objective.
    pub constant: f64,
    pub diagnostics: SolverDiagnostics,
}

impl CovarianceSchedule {
    pub fn horizon(&self) -> usize {
        self.p_post.len()
    }
}

/// `P_prior_1 = P_init`, `P_prior_{t+1} = A_t P_post_t A_tᵀ + W_t`.
pub fn prior_covariances(spec: &ProblemSpec, p_post: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(p_post.len());
    out.push(spec.p_init.clone());
    for t in 1..p_post.len() {
        let a = &spec.a[t - 1];
        out.push(linalg::symmetrize(&(a * &p_post[t - 1] * a.transpose() + &spec.w[t - 1])));
    }
    out
}

/// Per-step information rates `½ ln det P_prior_t − ½ ln det P_post_t`
/// (nats) along `P_prior_1 = P_init`, `P_prior_{t+1} = A_t P_post_t A_tᵀ + W_t`.
///
/// Each rate is computed from the gap `P_prior_t − P_post_t` so rates near
/// zero keep full relative accuracy. `NaN` marks a non-PD posterior.
pub fn information_rates(
    a: &[DMatrix<f64>],
    w: &[DMatrix<f64>],
    p_init: &DMatrix<f64>,
    p_post: &[DMatrix<f64>],
) -> Vec<f64> {
    (0..p_post.len())
        .map(|t| {
            let gap = if t == 0 {
                p_init - &p_post[0]
            } else {
                linalg::propagation_gap(&a[t - 1], &p_post[t - 1], &w[t - 1], &p_post[t])
            };
            linalg::log_det_increase(&p_post[t], &gap).map_or(f64::NAN, |v| 0.5 * v)
        })
        .collect()
}

/// Linear sensor, Kalman gains and controller gains for every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorPolicy {
    pub r: Vec<usize>,
    #[serde(rename = "C", with = "serde_mats")]
    pub c: Vec<DMatrix<f64>>,
    #[serde(rename = "V", with = "serde_mats")]
    pub v: Vec<DMatrix<f64>>,
    #[serde(rename = "L", with = "serde_mats")]
    pub l: Vec<DMatrix<f64>>,
    #[serde(rename = "K", with = "serde_mats")]
    pub k: Vec<DMatrix<f64>>,
}

impl SensorPolicy {
    pub fn horizon(&self) -> usize {
        self.r.len()
    }
}

/// One recorded closed-loop sample path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub trial: usize,
    /// `x_1 … x_{T+1}`.
    pub states: Vec<Vec<f64>>,
    /// `x̂_1 … x̂_T` (filtered estimates used by the controller).
    pub estimates: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// Measurements; empty when `r_t = 0`.
    pub measurements: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub num_trials: usize,
    pub empirical_control_cost: f64,
    pub standard_error: f64,
    pub predicted_control_cost: f64,
    #[serde(rename = "info_rates_nats", with = "serde_f64s")]
    pub info_rates: Vec<f64>,
    #[serde(rename = "total_info_cost_nats", with = "serde_f64")]
    pub total_info_cost: f64,
    /// Sample covariance of `x_t − x̂_t` across trials, per step.
    #[serde(rename = "empirical_error_cov", with = "serde_mats")]
    pub empirical_error_cov: Vec<DMatrix<f64>>,
    #[serde(skip)]
    pub trajectories: Vec<Trajectory>,
}

/// Serde adapter: `Vec<DMatrix>` as a list of row-major nested arrays.
pub mod serde_mats {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        // 0-row matrices keep their column count so r_t = 0 round-trips.
        #[derive(Serialize)]
        #[serde(untagged)]
        enum Repr {
            Rows(Vec<Vec<f64>>),
            Empty { rows: usize, cols: usize },
        }
        let items: Vec<Repr> = v
            .iter()
            .map(|m| {
                if m.nrows() == 0 || m.ncols() == 0 {
                    Repr::Empty { rows: m.nrows(), cols: m.ncols() }
                } else {
                    Repr::Rows(crate::linalg::to_rows(m))
                }
            })
            .collect();
        items.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Rows(Vec<Vec<f64>>),
            Empty { rows: usize, cols: usize },
        }
        let items = Vec::<Repr>::deserialize(d)?;
        items
            .into_iter()
            .map(|r| match r {
                Repr::Rows(rows) => crate::linalg::from_rows(&rows).ok_or_else(|| D::Error::custom("ragged matrix")),
                Repr::Empty { rows, cols } => Ok(DMatrix::zeros(rows, cols)),
            })
            .collect()
    }
}

/// Serde adapter writing non-finite floats as strings (`"inf"`, `"-inf"`, `"nan"`).
pub mod serde_f64 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    pub(crate) enum Repr {
        Num(f64),
        Text(String),
    }

    pub(crate) fn from_repr<E: Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("unexpected float literal `{other}`"))),
            },
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }
}

pub mod serde_f64s {
    use serde::{ser::SerializeSeq, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        struct One(f64);
        impl serde::Serialize for One {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                super::serde_f64::serialize(&self.0, s)
            }
        }
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&One(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<super::serde_f64::Repr>::deserialize(d)?
            .into_iter()
            .map(super::serde_f64::from_repr)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one() -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }

    fn scalar_parts() -> ProblemSpec {
        ProblemSpec {
            horizon: 1,
            state_dims: vec![1, 1],
            input_dims: vec![1],
            a: vec![one()],
            b: vec![one()],
            w: vec![one()],
            q: vec![one()],
            r: vec![one()],
            gamma: vec![1.0],
            p_init: one(),
        }
    }

    #[test]
    fn all_identity_scalar_is_valid() {
        assert!(validate_problem(&scalar_parts()).is_ok());
    }

    #[test]
    fn zero_process_noise_is_rejected() {
        let mut spec = scalar_parts();
        spec.w[0] = DMatrix::zeros(1, 1);
        let report = validate_problem(&spec);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].to_string(), "W_1 not positive definite");
    }

    #[test]
    fn wrong_a_shape_is_rejected() {
        let mut spec = scalar_parts();
        spec.a[0] = DMatrix::from_element(2, 1, 1.0);
        let report = validate_problem(&spec);
        assert_eq!(report.violations[0].to_string(), "A_1 dimension mismatch");
    }

    #[test]
    fn other_invariants() {
        let mut spec = scalar_parts();
        spec.gamma[0] = 0.0;
        spec.r[0] = DMatrix::zeros(1, 1);
        spec.q[0] = DMatrix::from_element(1, 1, -1.0);
        spec.p_init = DMatrix::from_element(1, 1, -2.0);
        let msgs: Vec<String> = validate_problem(&spec).violations.iter().map(ToString::to_string).collect();
        assert!(msgs.contains(&"P_init not positive definite".to_string()));
        assert!(msgs.contains(&"R_1 not positive definite".to_string()));
        assert!(msgs.contains(&"Q_1 not positive semidefinite".to_string()));
        assert!(msgs.contains(&"gamma_1 must be positive and finite".to_string()));
    }

    #[test]
    fn small_asymmetry_is_symmetrized_large_is_rejected() {
        let mut spec = scalar_parts();
        spec.state_dims = vec![2, 2];
        spec.a[0] = DMatrix::identity(2, 2);
        spec.b[0] = DMatrix::from_element(2, 1, 1.0);
        spec.q[0] = DMatrix::identity(2, 2);
        spec.w[0] = DMatrix::from_row_slice(2, 2, &[1.0, 0.1 + 1e-12, 0.1, 1.0]);
        spec.p_init = DMatrix::identity(2, 2);
        let ok = spec.clone().validated().unwrap();
        assert_eq!(ok.w[0][(0, 1)], ok.w[0][(1, 0)]);

        spec.w[0][(0, 1)] = 0.3;
        let err = spec.validated().unwrap_err();
        assert!(err.to_string().contains("W_1 not symmetric"));
    }

    #[test]
    fn validation_is_pure() {
        let mut spec = scalar_parts();
        spec.w[0] = DMatrix::zeros(1, 1);
        assert_eq!(validate_problem(&spec), validate_problem(&spec));
    }

    #[test]
    fn json_broadcast_and_per_step_lists() {
        let text = r#"{
            "horizon": 2,
            "A": [[1.0]],
            "B": 1,
            "W": [[[1.0]], [[2.0]]],
            "Q": [[1]],
            "R": [[1]],
            "gamma": [1, 0.5],
            "P_init": [[1]]
        }"#;
        let spec = ProblemSpec::from_json_str(text).unwrap();
        assert_eq!(spec.horizon, 2);
        assert_eq!(spec.w[1][(0, 0)], 2.0);
        assert_eq!(spec.b[1][(0, 0)], 1.0);
        assert_eq!(spec.gamma, vec![1.0, 0.5]);
        let again = ProblemSpec::from_json_str(&spec.to_json_value().to_string()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn json_names_offending_field() {
        let text = r#"{"horizon":1,"A":[[1]],"B":[[1]],"W":[[0]],"Q":[[1]],"R":[[1]],"gamma":1,"P_init":[[1]]}"#;
        let err = ProblemSpec::from_json_str(text).unwrap_err();
        assert!(err.to_string().contains("W_1"), "{err}");
        let missing = r#"{"horizon":1,"A":[[1]]}"#;
        assert!(matches!(ProblemSpec::from_json_str(missing), Err(ModelError::Format(_))));
    }

    #[test]
    fn time_varying_dimensions_are_supported() {
        let spec = ProblemSpec::from_steps(
            vec![DMatrix::from_element(2, 1, 1.0), DMatrix::from_element(1, 2, 0.5)],
            vec![DMatrix::from_element(2, 1, 1.0), DMatrix::from_element(1, 1, 1.0)],
            vec![DMatrix::identity(2, 2), DMatrix::identity(1, 1)],
            vec![DMatrix::identity(2, 2), DMatrix::identity(1, 1)],
            vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
            vec![1.0, 1.0],
            DMatrix::identity(1, 1),
        )
        .unwrap();
        assert_eq!(spec.state_dims, vec![1, 2, 1]);
    }

    #[test]
    fn non_finite_floats_round_trip() {
        #[derive(Serialize, Deserialize)]
        struct Wrap {
            #[serde(with = "serde_f64")]
            x: f64,
        }
        let s = serde_json::to_string(&Wrap { x: f64::INFINITY }).unwrap();
        assert_eq!(s, r#"{"x":"inf"}"#);
        let back: Wrap = serde_json::from_str(&s).unwrap();
        assert!(back.x.is_infinite());
    }
}

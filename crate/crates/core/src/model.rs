//! Problem instances: coefficient schedules, weights, validation and the
//! aggregate (base + mean-field) view used by the Riccati solvers.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::max_norm;

/// Relative Frobenius asymmetry accepted (and removed) for symmetric weights.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;
/// Absolute max-norm tolerance for [`special_case_predicate`].
pub const SPECIAL_CASE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimensions {
    /// State dimension.
    pub n: usize,
    /// Control dimension.
    pub m: usize,
    /// Horizon end time.
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Number of uniform Riccati grid steps.
    pub n_t: usize,
}

/// Piecewise-constant matrix-valued function of time on `[0, T]`.
///
/// Piece `k` covers `[start_k, start_{k+1})`; the last piece extends to `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSchedule {
    pieces: Vec<(f64, DMatrix<f64>)>,
}

impl MatrixSchedule {
    pub fn constant(m: DMatrix<f64>) -> Self {
        MatrixSchedule {
            pieces: vec![(0.0, m)],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(DMatrix::zeros(rows, cols))
    }

    /// Unchecked construction; [`validate_spec`] enforces the partition.
    pub fn piecewise(pieces: Vec<(f64, DMatrix<f64>)>) -> Self {
        MatrixSchedule { pieces }
    }

    pub fn pieces(&self) -> &[(f64, DMatrix<f64>)] {
        &self.pieces
    }

    pub fn starts(&self) -> impl Iterator<Item = f64> + '_ {
        self.pieces.iter().map(|(t, _)| *t)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pieces
            .first()
            .map(|(_, m)| m.shape())
            .unwrap_or((0, 0))
    }

    /// Matrix of the interval containing `t`.
    pub fn at(&self, t: f64) -> &DMatrix<f64> {
        let idx = self.pieces.partition_point(|(s, _)| *s <= t);
        &self.pieces[idx.saturating_sub(1)].1
    }

    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        MatrixSchedule {
            pieces: self.pieces.iter().map(|(t, m)| (*t, f(m))).collect(),
        }
    }

    /// Pointwise combination on the union of both breakpoint sets.
    pub fn zip_with(
        &self,
        other: &MatrixSchedule,
        f: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>,
    ) -> Self {
        let starts = merged_starts(&[self, other]);
        MatrixSchedule {
            pieces: starts
                .into_iter()
                .map(|t| (t, f(self.at(t), other.at(t))))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.pieces
            .iter()
            .map(|(_, m)| max_norm(m))
            .fold(0.0, f64::max)
    }
}

pub(crate) fn merged_starts(schedules: &[&MatrixSchedule]) -> Vec<f64> {
    let mut starts: Vec<f64> = schedules.iter().flat_map(|s| s.starts()).collect();
    starts.sort_by(|a, b| a.total_cmp(b));
    starts.dedup();
    starts
}

/// State coefficients of the agent dynamics (base and mean-field parts).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub a: MatrixSchedule,
    pub a_bar: MatrixSchedule,
    pub b: MatrixSchedule,
    pub b_bar: MatrixSchedule,
    pub c: MatrixSchedule,
    pub c_bar: MatrixSchedule,
    pub d: MatrixSchedule,
    pub d_bar: MatrixSchedule,
    pub c0: MatrixSchedule,
    pub c0_bar: MatrixSchedule,
    pub d0: MatrixSchedule,
    pub d0_bar: MatrixSchedule,
}

impl CoefficientSet {
    pub fn zeros(n: usize, m: usize) -> Self {
        let nn = || MatrixSchedule::zeros(n, n);
        let nm = || MatrixSchedule::zeros(n, m);
        CoefficientSet {
            a: nn(),
            a_bar: nn(),
            b: nm(),
            b_bar: nm(),
            c: nn(),
            c_bar: nn(),
            d: nm(),
            d_bar: nm(),
            c0: nn(),
            c0_bar: nn(),
            d0: nm(),
            d0_bar: nm(),
        }
    }

    /// `(name, schedule, is_state_block)` for every coefficient.
    pub fn named(&self) -> [(&'static str, &MatrixSchedule, bool); 12] {
        [
            ("A", &self.a, true),
            ("A_bar", &self.a_bar, true),
            ("B", &self.b, false),
            ("B_bar", &self.b_bar, false),
            ("C", &self.c, true),
            ("C_bar", &self.c_bar, true),
            ("D", &self.d, false),
            ("D_bar", &self.d_bar, false),
            ("C0", &self.c0, true),
            ("C0_bar", &self.c0_bar, true),
            ("D0", &self.d0, false),
            ("D0_bar", &self.d0_bar, false),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut MatrixSchedule); 12] {
        [
            ("A", &mut self.a),
            ("A_bar", &mut self.a_bar),
            ("B", &mut self.b),
            ("B_bar", &mut self.b_bar),
            ("C", &mut self.c),
            ("C_bar", &mut self.c_bar),
            ("D", &mut self.d),
            ("D_bar", &mut self.d_bar),
            ("C0", &mut self.c0),
            ("C0_bar", &mut self.c0_bar),
            ("D0", &mut self.d0),
            ("D0_bar", &mut self.d0_bar),
        ]
    }

    /// The six mean-field (bar) coefficients.
    pub fn bars(&self) -> [(&'static str, &MatrixSchedule); 6] {
        [
            ("A_bar", &self.a_bar),
            ("B_bar", &self.b_bar),
            ("C_bar", &self.c_bar),
            ("D_bar", &self.d_bar),
            ("C0_bar", &self.c0_bar),
            ("D0_bar", &self.d0_bar),
        ]
    }
}

/// Cost weights. `q`, `r`, `g` are symmetric but may be indefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub q: MatrixSchedule,
    pub r: MatrixSchedule,
    pub g: DMatrix<f64>,
    pub gamma1: MatrixSchedule,
    pub gamma2: DMatrix<f64>,
}

/// Unvalidated problem data.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemCandidate {
    pub dims: Dimensions,
    pub coeffs: CoefficientSet,
    pub weights: WeightSet,
    pub x0: Vec<f64>,
}

impl ProblemCandidate {
    /// All dynamics zero, `Q = G = 0`, `R = I`, `Gamma1 = Gamma2 = 0`.
    pub fn zeros(n: usize, m: usize, horizon: f64, n_t: usize) -> Self {
        ProblemCandidate {
            dims: Dimensions { n, m, horizon, n_t },
            coeffs: CoefficientSet::zeros(n, m),
            weights: WeightSet {
                q: MatrixSchedule::zeros(n, n),
                r: MatrixSchedule::constant(DMatrix::identity(m, m)),
                g: DMatrix::zeros(n, n),
                gamma1: MatrixSchedule::zeros(n, n),
                gamma2: DMatrix::zeros(n, n),
            },
            x0: vec![0.0; n],
        }
    }

    pub fn validate(self) -> Result<ProblemSpec> {
        validate_spec(self)
    }

    /// Zeroes every mean-field coefficient and sets both tracking matrices
    /// to `gamma * I`.
    pub fn decoupled(mut self, gamma: f64) -> Self {
        let n = self.dims.n;
        for (name, s) in self.coeffs.named_mut() {
            if name.ends_with("_bar") {
                let (r, c) = s.shape();
                *s = MatrixSchedule::zeros(r, c);
            }
        }
        self.weights.gamma1 = MatrixSchedule::constant(DMatrix::identity(n, n) * gamma);
        self.weights.gamma2 = DMatrix::identity(n, n) * gamma;
        self
    }
}

/// A validated problem instance. Construct through [`validate_spec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub dims: Dimensions,
    pub coeffs: CoefficientSet,
    pub weights: WeightSet,
    pub x0: Vec<f64>,
    _validated: (),
}

impl ProblemSpec {
    pub fn to_candidate(&self) -> ProblemCandidate {
        ProblemCandidate {
            dims: self.dims,
            coeffs: self.coeffs.clone(),
            weights: self.weights.clone(),
            x0: self.x0.clone(),
        }
    }

    /// Every coefficient and its aggregate evaluated at `t`.
    pub fn snapshot(&self, t: f64) -> Snapshot {
        let c = &self.coeffs;
        let w = &self.weights;
        let a = c.a.at(t).clone();
        let a_bar = c.a_bar.at(t).clone();
        let b = c.b.at(t).clone();
        let b_bar = c.b_bar.at(t).clone();
        let cc = c.c.at(t).clone();
        let c_bar = c.c_bar.at(t).clone();
        let d = c.d.at(t).clone();
        let d_bar = c.d_bar.at(t).clone();
        let c0 = c.c0.at(t).clone();
        let c0_bar = c.c0_bar.at(t).clone();
        let d0 = c.d0.at(t).clone();
        let d0_bar = c.d0_bar.at(t).clone();
        let q = w.q.at(t).clone();
        let gamma1 = w.gamma1.at(t).clone();
        Snapshot {
            a_cal: &a + &a_bar,
            b_cal: &b + &b_bar,
            c_cal: &cc + &c_bar,
            d_cal: &d + &d_bar,
            c0_cal: &c0 + &c0_bar,
            d0_cal: &d0 + &d0_bar,
            q_hat: congruence(&q, &gamma1),
            r: w.r.at(t).clone(),
            a,
            a_bar,
            b,
            b_bar,
            c: cc,
            c_bar,
            d,
            d_bar,
            c0,
            c0_bar,
            d0,
            d0_bar,
            q,
            gamma1,
        }
    }

    /// Breakpoints of every schedule in the problem.
    pub fn schedule_nodes(&self) -> Vec<f64> {
        let mut all: Vec<&MatrixSchedule> =
            self.coeffs.named().iter().map(|(_, s, _)| *s).collect();
        all.push(&self.weights.q);
        all.push(&self.weights.r);
        all.push(&self.weights.gamma1);
        merged_starts(&all)
    }
}

/// `(I - gamma)^T w (I - gamma)`, symmetrized.
pub fn congruence(w: &DMatrix<f64>, gamma: &DMatrix<f64>) -> DMatrix<f64> {
    let k = DMatrix::identity(gamma.nrows(), gamma.ncols()) - gamma;
    let out = k.transpose() * w * &k;
    (&out + out.transpose()) * 0.5
}

/// Pointwise coefficient values at one instant.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub a: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub d_bar: DMatrix<f64>,
    pub c0: DMatrix<f64>,
    pub c0_bar: DMatrix<f64>,
    pub d0: DMatrix<f64>,
    pub d0_bar: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub gamma1: DMatrix<f64>,
    pub a_cal: DMatrix<f64>,
    pub b_cal: DMatrix<f64>,
    pub c_cal: DMatrix<f64>,
    pub d_cal: DMatrix<f64>,
    pub c0_cal: DMatrix<f64>,
    pub d0_cal: DMatrix<f64>,
    pub q_hat: DMatrix<f64>,
}

/// Aggregated coefficients `X + X_bar` and the congruence weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateView {
    pub a_cal: MatrixSchedule,
    pub b_cal: MatrixSchedule,
    pub c_cal: MatrixSchedule,
    pub d_cal: MatrixSchedule,
    pub c0_cal: MatrixSchedule,
    pub d0_cal: MatrixSchedule,
    pub q_hat: MatrixSchedule,
    pub g_hat: DMatrix<f64>,
}

pub fn aggregates(spec: &ProblemSpec) -> AggregateView {
    let c = &spec.coeffs;
    let add = |x: &DMatrix<f64>, y: &DMatrix<f64>| x + y;
    AggregateView {
        a_cal: c.a.zip_with(&c.a_bar, add),
        b_cal: c.b.zip_with(&c.b_bar, add),
        c_cal: c.c.zip_with(&c.c_bar, add),
        d_cal: c.d.zip_with(&c.d_bar, add),
        c0_cal: c.c0.zip_with(&c.c0_bar, add),
        d0_cal: c.d0.zip_with(&c.d0_bar, add),
        q_hat: spec.weights.q.zip_with(&spec.weights.gamma1, congruence),
        g_hat: congruence(&spec.weights.g, &spec.weights.gamma2),
    }
}

/// Residuals behind the MC/MG coincidence condition.
#[derive(Debug, Clone, Serialize)]
pub struct SpecialCaseReport {
    pub holds: bool,
    pub tolerance: f64,
    /// Max-norm of each mean-field coefficient over its schedule.
    pub bar_residuals: Vec<(String, f64)>,
    /// `max_t ||Gamma1^T Q - Gamma1^T Q Gamma1||`.
    pub gamma1_residual: f64,
    /// `||Gamma2^T G - Gamma2^T G Gamma2||`.
    pub gamma2_residual: f64,
}

fn tracking_residual(w: &DMatrix<f64>, gamma: &DMatrix<f64>) -> f64 {
    let gw = gamma.transpose() * w;
    max_norm(&(&gw - &gw * gamma))
}

pub fn special_case_predicate(spec: &ProblemSpec, tol: f64) -> SpecialCaseReport {
    let bar_residuals: Vec<(String, f64)> = spec
        .coeffs
        .bars()
        .iter()
        .map(|(name, s)| (name.to_string(), s.max_abs()))
        .collect();
    let w = &spec.weights;
    let gamma1_residual = merged_starts(&[&w.q, &w.gamma1])
        .into_iter()
        .map(|t| tracking_residual(w.q.at(t), w.gamma1.at(t)))
        .fold(0.0, f64::max);
    let gamma2_residual = tracking_residual(&w.g, &w.gamma2);
    let holds = bar_residuals.iter().all(|(_, r)| *r <= tol)
        && gamma1_residual <= tol
        && gamma2_residual <= tol;
    SpecialCaseReport {
        holds,
        tolerance: tol,
        bar_residuals,
        gamma1_residual,
        gamma2_residual,
    }
}

fn check_schedule(
    field: &str,
    s: &MatrixSchedule,
    shape: (usize, usize),
    horizon: f64,
) -> Result<()> {
    let pieces = s.pieces();
    if pieces.is_empty() {
        return Err(Error::validation(field, "empty schedule"));
    }
    if pieces[0].0 != 0.0 {
        return Err(Error::validation(field, "first interval must start at 0"));
    }
    for w in pieces.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::validation(
                field,
                "interval starts must be strictly increasing",
            ));
        }
    }
    if let Some((t, _)) = pieces.last() {
        if !(*t < horizon) {
            return Err(Error::validation(field, "interval start outside [0, T)"));
        }
    }
    for (t, m) in pieces {
        if !t.is_finite() {
            return Err(Error::validation(field, "non-finite interval start"));
        }
        if m.shape() != shape {
            return Err(Error::validation(
                field,
                format!("expected shape {:?}, got {:?}", shape, m.shape()),
            ));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(field, "non-finite entry"));
        }
    }
    Ok(())
}

fn symmetrize(field: &str, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let asym = (m - m.transpose()).norm();
    let scale = m.norm();
    if asym > SYMMETRY_TOLERANCE * scale {
        return Err(Error::validation(
            field,
            format!("asymmetric weight (relative asymmetry {:e})", asym / scale),
        ));
    }
    Ok((m + m.transpose()) * 0.5)
}

/// Checks every structural invariant and symmetrizes the weights.
pub fn validate_spec(raw: ProblemCandidate) -> Result<ProblemSpec> {
    let ProblemCandidate {
        dims,
        mut coeffs,
        weights,
        x0,
    } = raw;
    if dims.n == 0 {
        return Err(Error::validation("dims.n", "must be at least 1"));
    }
    if dims.m == 0 {
        return Err(Error::validation("dims.m", "must be at least 1"));
    }
    if !(dims.horizon > 0.0 && dims.horizon.is_finite()) {
        return Err(Error::validation("dims.T", "horizon must be positive"));
    }
    if dims.n_t < 2 {
        return Err(Error::validation("dims.n_t", "need at least 2 grid steps"));
    }
    let (n, m, horizon) = (dims.n, dims.m, dims.horizon);
    for (name, s) in coeffs.named_mut() {
        let shape = if name.starts_with('B') || name.starts_with('D') {
            (n, m)
        } else {
            (n, n)
        };
        check_schedule(&format!("coeffs.{name}"), s, shape, horizon)?;
    }
    check_schedule("weights.Q", &weights.q, (n, n), horizon)?;
    check_schedule("weights.R", &weights.r, (m, m), horizon)?;
    check_schedule("weights.Gamma1", &weights.gamma1, (n, n), horizon)?;
    for (field, mat) in [
        ("weights.G", &weights.g),
        ("weights.Gamma2", &weights.gamma2),
    ] {
        if mat.shape() != (n, n) {
            return Err(Error::validation(
                field,
                format!("expected shape {:?}, got {:?}", (n, n), mat.shape()),
            ));
        }
        if mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(field, "non-finite entry"));
        }
    }
    let q = MatrixSchedule::piecewise(
        weights
            .q
            .pieces()
            .iter()
            .map(|(t, mm)| symmetrize("weights.Q", mm).map(|s| (*t, s)))
            .collect::<Result<_>>()?,
    );
    let r = MatrixSchedule::piecewise(
        weights
            .r
            .pieces()
            .iter()
            .map(|(t, mm)| symmetrize("weights.R", mm).map(|s| (*t, s)))
            .collect::<Result<_>>()?,
    );
    let g = symmetrize("weights.G", &weights.g)?;
    if x0.len() != n {
        return Err(Error::validation(
            "x0",
            format!("expected length {n}, got {}", x0.len()),
        ));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("x0", "non-finite entry"));
    }
    Ok(ProblemSpec {
        dims,
        coeffs,
        weights: WeightSet {
            q,
            r,
            g,
            gamma1: weights.gamma1,
            gamma2: weights.gamma2,
        },
        x0,
        _validated: (),
    })
}

// ---------------------------------------------------------------------------
// JSON problem files

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixJson {
    Constant(Vec<Vec<f64>>),
    Schedule(Vec<PieceJson>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PieceJson {
    t_start: f64,
    matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoeffsJson {
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    a: Option<MatrixJson>,
    #[serde(rename = "A_bar", default, skip_serializing_if = "Option::is_none")]
    a_bar: Option<MatrixJson>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    b: Option<MatrixJson>,
    #[serde(rename = "B_bar", default, skip_serializing_if = "Option::is_none")]
    b_bar: Option<MatrixJson>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    c: Option<MatrixJson>,
    #[serde(rename = "C_bar", default, skip_serializing_if = "Option::is_none")]
    c_bar: Option<MatrixJson>,
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    d: Option<MatrixJson>,
    #[serde(rename = "D_bar", default, skip_serializing_if = "Option::is_none")]
    d_bar: Option<MatrixJson>,
    #[serde(rename = "C0", default, skip_serializing_if = "Option::is_none")]
    c0: Option<MatrixJson>,
    #[serde(rename = "C0_bar", default, skip_serializing_if = "Option::is_none")]
    c0_bar: Option<MatrixJson>,
    #[serde(rename = "D0", default, skip_serializing_if = "Option::is_none")]
    d0: Option<MatrixJson>,
    #[serde(rename = "D0_bar", default, skip_serializing_if = "Option::is_none")]
    d0_bar: Option<MatrixJson>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsJson {
    #[serde(rename = "Q")]
    q: MatrixJson,
    #[serde(rename = "R")]
    r: MatrixJson,
    #[serde(rename = "G")]
    g: Vec<Vec<f64>>,
    #[serde(rename = "Gamma1", default, skip_serializing_if = "Option::is_none")]
    gamma1: Option<MatrixJson>,
    #[serde(rename = "Gamma2", default, skip_serializing_if = "Option::is_none")]
    gamma2: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemJson {
    dims: Dimensions,
    x0: Vec<f64>,
    #[serde(default)]
    coeffs: CoeffsJson,
    weights: WeightsJson,
}

fn rows_to_matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if nrows == 0 || ncols == 0 {
        return Err(Error::validation(field, "empty matrix"));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::validation(field, "ragged rows"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl MatrixJson {
    fn into_schedule(self, field: &str) -> Result<MatrixSchedule> {
        match self {
            MatrixJson::Constant(rows) => {
                Ok(MatrixSchedule::constant(rows_to_matrix(field, &rows)?))
            }
            MatrixJson::Schedule(pieces) => {
                if pieces.is_empty() {
                    return Err(Error::validation(field, "empty schedule"));
                }
                Ok(MatrixSchedule::piecewise(
                    pieces
                        .into_iter()
                        .map(|p| rows_to_matrix(field, &p.matrix).map(|m| (p.t_start, m)))
                        .collect::<Result<_>>()?,
                ))
            }
        }
    }

    fn from_schedule(s: &MatrixSchedule) -> Self {
        match s.pieces() {
            [(_, m)] => MatrixJson::Constant(matrix_to_rows(m)),
            pieces => MatrixJson::Schedule(
                pieces
                    .iter()
                    .map(|(t, m)| PieceJson {
                        t_start: *t,
                        matrix: matrix_to_rows(m),
                    })
                    .collect(),
            ),
        }
    }
}

/// Parses a problem file. Missing coefficients default to zero, missing
/// `Gamma1`/`Gamma2` to zero; unknown keys are rejected.
pub fn parse_problem_json(text: &str) -> Result<ProblemSpec> {
    let raw: ProblemJson =
        serde_json::from_str(text).map_err(|e| Error::validation("problem", e.to_string()))?;
    let dims = raw.dims;
    let (n, m) = (dims.n, dims.m);
    let mut coeffs = CoefficientSet::zeros(n, m);
    let cj = raw.coeffs;
    let slots: [(&str, Option<MatrixJson>, &mut MatrixSchedule); 12] = [
        ("coeffs.A", cj.a, &mut coeffs.a),
        ("coeffs.A_bar", cj.a_bar, &mut coeffs.a_bar),
        ("coeffs.B", cj.b, &mut coeffs.b),
        ("coeffs.B_bar", cj.b_bar, &mut coeffs.b_bar),
        ("coeffs.C", cj.c, &mut coeffs.c),
        ("coeffs.C_bar", cj.c_bar, &mut coeffs.c_bar),
        ("coeffs.D", cj.d, &mut coeffs.d),
        ("coeffs.D_bar", cj.d_bar, &mut coeffs.d_bar),
        ("coeffs.C0", cj.c0, &mut coeffs.c0),
        ("coeffs.C0_bar", cj.c0_bar, &mut coeffs.c0_bar),
        ("coeffs.D0", cj.d0, &mut coeffs.d0),
        ("coeffs.D0_bar", cj.d0_bar, &mut coeffs.d0_bar),
    ];
    for (field, value, slot) in slots {
        if let Some(v) = value {
            *slot = v.into_schedule(field)?;
        }
    }
    let w = raw.weights;
    let weights = WeightSet {
        q: w.q.into_schedule("weights.Q")?,
        r: w.r.into_schedule("weights.R")?,
        g: rows_to_matrix("weights.G", &w.g)?,
        gamma1: match w.gamma1 {
            Some(g) => g.into_schedule("weights.Gamma1")?,
            None => MatrixSchedule::zeros(n, n),
        },
        gamma2: match w.gamma2 {
            Some(g) => rows_to_matrix("weights.Gamma2", &g)?,
            None => DMatrix::zeros(n, n),
        },
    };
    validate_spec(ProblemCandidate {
        dims,
        coeffs,
        weights,
        x0: raw.x0,
    })
}

/// Serializes a spec in the problem-file format.
pub fn problem_to_json(spec: &ProblemSpec) -> String {
    let c = &spec.coeffs;
    let s = MatrixJson::from_schedule;
    let doc = ProblemJson {
        dims: spec.dims,
        x0: spec.x0.clone(),
        coeffs: CoeffsJson {
            a: Some(s(&c.a)),
            a_bar: Some(s(&c.a_bar)),
            b: Some(s(&c.b)),
            b_bar: Some(s(&c.b_bar)),
            c: Some(s(&c.c)),
            c_bar: Some(s(&c.c_bar)),
            d: Some(s(&c.d)),
            d_bar: Some(s(&c.d_bar)),
            c0: Some(s(&c.c0)),
            c0_bar: Some(s(&c.c0_bar)),
            d0: Some(s(&c.d0)),
            d0_bar: Some(s(&c.d0_bar)),
        },
        weights: WeightsJson {
            q: s(&spec.weights.q),
            r: s(&spec.weights.r),
            g: matrix_to_rows(&spec.weights.g),
            gamma1: Some(s(&spec.weights.gamma1)),
            gamma2: Some(matrix_to_rows(&spec.weights.gamma2)),
        },
    };
    serde_json::to_string_pretty(&doc).expect("problem serialization is infallible")
}


#[cfg(test)]
mod proptests {
    use super::*;
    use crate::analysis::paper::paper_spec;
    use proptest::prelude::*;

    fn permute(m: &DMatrix<f64>, p: &[usize], rows: bool, cols: bool) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
            let ii = if rows { p[i] } else { i };
            let jj = if cols { p[j] } else { j };
            m[(ii, jj)]
        })
    }

    proptest! {
        #[test]
        fn aggregates_are_pointwise_sums(t in 0.0..1.0f64, k in 0usize..3) {
            let mut c = paper_spec().to_candidate();
            c.coeffs.a_bar = MatrixSchedule::piecewise(vec![
                (0.0, DMatrix::from_element(2, 2, 1.0)),
                (0.3, DMatrix::from_element(2, 2, 2.0 + k as f64)),
            ]);
            let spec = validate_spec(c).unwrap();
            let agg = aggregates(&spec);
            for node in spec.schedule_nodes().into_iter().chain([t]) {
                let expect = spec.coeffs.a.at(node) + spec.coeffs.a_bar.at(node);
                prop_assert_eq!(agg.a_cal.at(node), &expect);
                let qh = agg.q_hat.at(node);
                prop_assert_eq!(qh, &qh.transpose());
            }
        }

        #[test]
        fn weights_congruences_are_symmetric(v in proptest::collection::vec(-2.0..2.0f64, 8)) {
            let w = DMatrix::from_row_slice(2, 2, &[v[0], v[1], v[1], v[2]]);
            let g = DMatrix::from_row_slice(2, 2, &v[3..7]);
            let out = congruence(&w, &g);
            prop_assert_eq!(&out, &out.transpose());
        }

        #[test]
        fn special_case_invariant_under_permutation(swap in proptest::bool::ANY, zero_bars in proptest::bool::ANY) {
            let mut c = paper_spec().to_candidate();
            if zero_bars {
                for s in [&mut c.coeffs.a_bar, &mut c.coeffs.b_bar, &mut c.coeffs.c_bar,
                          &mut c.coeffs.d_bar, &mut c.coeffs.c0_bar, &mut c.coeffs.d0_bar] {
                    *s = MatrixSchedule::zeros(2, 2);
                }
                c.weights.gamma1 = MatrixSchedule::constant(DMatrix::identity(2, 2));
                c.weights.gamma2 = DMatrix::identity(2, 2);
            }
            let base = special_case_predicate(&validate_spec(c.clone()).unwrap(), SPECIAL_CASE_TOLERANCE);
            let p: Vec<usize> = if swap { vec![1, 0] } else { vec![0, 1] };
            let mut pc = c.clone();
            for (name, s) in pc.coeffs.named_mut() {
                let state_block = !(name.starts_with('B') || name.starts_with('D'));
                *s = s.map(|m| permute(m, &p, true, state_block));
            }
            pc.weights.q = pc.weights.q.map(|m| permute(m, &p, true, true));
            pc.weights.gamma1 = pc.weights.gamma1.map(|m| permute(m, &p, true, true));
            pc.weights.g = permute(&pc.weights.g, &p, true, true);
            pc.weights.gamma2 = permute(&pc.weights.gamma2, &p, true, true);
            pc.x0 = p.iter().map(|&i| c.x0[i]).collect();
            let permuted = special_case_predicate(&validate_spec(pc).unwrap(), SPECIAL_CASE_TOLERANCE);
            prop_assert_eq!(base.holds, permuted.holds);
            prop_assert!((base.gamma1_residual - permuted.gamma1_residual).abs() < 1e-14);
        }
    }
}

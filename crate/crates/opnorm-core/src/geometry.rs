//! Steepest-descent directions for each supported operator-norm geometry,
//! width-aware scaling factors, the Newton-Schulz matrix sign, and the
//! per-parameter-role update rules.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::linalg::{matmul, svd, LinalgError, Matrix};
use crate::norms::{
    dual_exponent, exponent_recip, op_norm_exact, vec_norm, NormError, OperatorNormSpec,
    VectorNormSpec,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("infeasible direction: operator norm {norm} exceeds 1")]
    InfeasibleDirection { norm: f64 },
    #[error("{family} requires the mean-normalized flag for width-aware scaling")]
    ScaleNeedsMeanFlag { family: &'static str },
    #[error("no attention logit rule for the spectral geometry")]
    NoAttentionRule,
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// The four families with computable steepest-descent directions.
///
/// `Sign`, `ColNorm(inf)`, and `RowNorm(1)` induce the same direction (the
/// entrywise sign); the spectral family is the matrix sign `U V^T`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum GeometryFamily {
    Sign,
    ColNorm { q: f64 },
    RowNorm { p: f64 },
    Spectral,
}

/// A descent geometry: family plus the mean-normalized flag. With the flag
/// set, directions absorb the width-aware scaling factor of the
/// mean-normalized operator norm.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeometrySpec {
    pub family: GeometryFamily,
    pub mean_normalized: bool,
}

impl GeometrySpec {
    pub fn sign() -> Self {
        Self {
            family: GeometryFamily::Sign,
            mean_normalized: false,
        }
    }

    pub fn colnorm(q: f64) -> Self {
        assert!(q >= 1.0, "colnorm exponent must satisfy q >= 1, got {q}");
        Self {
            family: GeometryFamily::ColNorm { q },
            mean_normalized: false,
        }
    }

    pub fn rownorm(p: f64) -> Self {
        assert!(p >= 1.0, "rownorm exponent must satisfy p >= 1, got {p}");
        Self {
            family: GeometryFamily::RowNorm { p },
            mean_normalized: false,
        }
    }

    pub fn spectral() -> Self {
        Self {
            family: GeometryFamily::Spectral,
            mean_normalized: false,
        }
    }

    pub fn mean(mut self) -> Self {
        self.mean_normalized = true;
        self
    }

    /// The operator norm this geometry performs steepest descent under.
    pub fn operator_spec(&self) -> OperatorNormSpec {
        let (input, output) = match self.family {
            GeometryFamily::Sign => (VectorNormSpec::lp(1.0), VectorNormSpec::linf()),
            GeometryFamily::ColNorm { q } => (VectorNormSpec::lp(1.0), VectorNormSpec::lp(q)),
            GeometryFamily::RowNorm { p } => (VectorNormSpec::lp(p), VectorNormSpec::linf()),
            GeometryFamily::Spectral => (VectorNormSpec::lp(2.0), VectorNormSpec::lp(2.0)),
        };
        if self.mean_normalized {
            OperatorNormSpec::new(
                VectorNormSpec {
                    mean_normalized: true,
                    ..input
                },
                VectorNormSpec {
                    mean_normalized: true,
                    ..output
                },
            )
        } else {
            OperatorNormSpec::new(input, output)
        }
    }
}

/// Width-aware scaling factor multiplying the unit-norm direction when the
/// geometry is mean-normalized.
///
/// Column: `d_out^(1/q) / d_in`. Row: `d_in^(-1/p)`. Sign: `1/d_in` (the
/// `(1,mean) -> inf` case, recovering the muP rule). Spectral:
/// `sqrt(d_in/d_out)`. Column and row families require the mean flag; sign
/// and spectral are accepted with or without it.
pub fn moga_scale(spec: &GeometrySpec, d_in: usize, d_out: usize) -> Result<f64, GeometryError> {
    let din = d_in as f64;
    let dout = d_out as f64;
    match spec.family {
        GeometryFamily::Sign => Ok(1.0 / din),
        GeometryFamily::Spectral => Ok((din / dout).sqrt()),
        GeometryFamily::ColNorm { q } => {
            if !spec.mean_normalized {
                return Err(GeometryError::ScaleNeedsMeanFlag { family: "ColNorm" });
            }
            Ok(dout.powf(exponent_recip(q)) / din)
        }
        GeometryFamily::RowNorm { p } => {
            if !spec.mean_normalized {
                return Err(GeometryError::ScaleNeedsMeanFlag { family: "RowNorm" });
            }
            Ok(din.powf(-exponent_recip(p)))
        }
    }
}

/// Steepest-descent direction for the linear model `<g, D>` under `spec`.
///
/// Returns the minimizer, i.e. a direction whose entries oppose the
/// gradient. For the plain (non-mean) geometries the result has unit
/// operator norm whenever `g` has no zero row/column; zero rows and columns
/// map to zero (`sign(0) = 0`, `0/0 = 0`). With the mean flag the result is
/// additionally multiplied by [`moga_scale`].
pub fn descent_direction(g: &Matrix, spec: &GeometrySpec) -> Result<Matrix, GeometryError> {
    let base = match spec.family {
        GeometryFamily::Sign => sign_direction(g),
        GeometryFamily::ColNorm { q } => colnorm_direction(g, q),
        GeometryFamily::RowNorm { p } => rownorm_direction(g, p),
        GeometryFamily::Spectral => matrix_sign_svd(g)?.scale(-1.0),
    };
    if spec.mean_normalized {
        let scale = moga_scale(spec, g.cols(), g.rows())?;
        Ok(base.scale(scale))
    } else {
        Ok(base)
    }
}

fn sign_direction(g: &Matrix) -> Matrix {
    Matrix::from_fn(g.rows(), g.cols(), |r, c| -sign0(g.get(r, c)))
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// Per column c: -sign(g) .* |g|^(q*-1) / ||g_col||_{q*}^(q*-1). Computed on
// entries rescaled by the column max so |g/max| <= 1 keeps powers in range
// for any exponent.
fn colnorm_direction(g: &Matrix, q: f64) -> Matrix {
    let qd = dual_exponent(q);
    let mut out = Matrix::zeros(g.rows(), g.cols());
    for c in 0..g.cols() {
        let col = g.col(c);
        let dir = dual_normalize(&col, qd);
        for (r, d) in dir.iter().enumerate() {
            out.set(r, c, -d);
        }
    }
    out
}

// Per row r: -sign(g) .* |g|^(p-1) / ||g_row||_p^(p-1). The row formula uses
// the primal exponent: it is the Hoelder-equality direction for the dual
// norm ||.||_{p*} constraint on the row.
fn rownorm_direction(g: &Matrix, p: f64) -> Matrix {
    let mut out = Matrix::zeros(g.rows(), g.cols());
    for r in 0..g.rows() {
        let dir = dual_normalize(g.row(r), p);
        for (c, d) in dir.iter().enumerate() {
            out.set(r, c, -d);
        }
    }
    out
}

// Hoelder-equality normalization of a slice with exponent e (the POSITIVE
// direction, maximizing <v, out> over the unit dual ball):
//   out_i = sign(v_i) |v_i|^(e-1) / ||v||_e^(e-1).
// e = 1 gives the sign map; e = inf puts unit mass on the first max entry.
fn dual_normalize(v: &[f64], e: f64) -> Vec<f64> {
    let mut out = alloc::vec![0.0; v.len()];
    let scale = v.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
    if scale == 0.0 {
        return out;
    }
    if e == 1.0 {
        for (o, &x) in out.iter_mut().zip(v) {
            *o = sign0(x);
        }
        return out;
    }
    if e.is_infinite() {
        let argmax = v
            .iter()
            .position(|&x| x.abs() == scale)
            .expect("scale > 0 implies a max entry exists");
        out[argmax] = sign0(v[argmax]);
        return out;
    }
    // u_i = |v_i|/scale in [0, 1]; out_i = sign * u_i^(e-1) / (sum u^e)^((e-1)/e).
    let sum: f64 = v.iter().map(|&x| (x.abs() / scale).powf(e)).sum();
    let denom = sum.powf((e - 1.0) / e);
    for (o, &x) in out.iter_mut().zip(v) {
        *o = sign0(x) * (x.abs() / scale).powf(e - 1.0) / denom;
    }
    out
}

/// Dual norm of `g` under the geometry's operator norm: the optimal value of
/// the steepest-descent subproblem.
///
/// Sign: `sum |g_ij|`. Column: `sum_c ||g_col||_{q*}`. Row:
/// `sum_r ||g_row||_p`. Spectral: the nuclear norm. Mean-normalized
/// geometries multiply by [`moga_scale`] (the dual of a scaled norm scales
/// inversely).
pub fn dual_norm(g: &Matrix, spec: &GeometrySpec) -> Result<f64, GeometryError> {
    let base = match spec.family {
        GeometryFamily::Sign => g.as_slice().iter().map(|x| x.abs()).sum(),
        GeometryFamily::ColNorm { q } => {
            let qd = VectorNormSpec::lp(dual_exponent(q));
            (0..g.cols()).map(|c| vec_norm(&g.col(c), qd)).sum()
        }
        GeometryFamily::RowNorm { p } => {
            let pn = VectorNormSpec::lp(p);
            (0..g.rows()).map(|r| vec_norm(g.row(r), pn)).sum()
        }
        GeometryFamily::Spectral => svd(g)?.s.as_slice().iter().sum(),
    };
    if spec.mean_normalized {
        Ok(base * moga_scale(spec, g.cols(), g.rows())?)
    } else {
        Ok(base)
    }
}

/// Optimality certificate for a candidate direction: `<g, d> + ||g||_*`.
///
/// Zero (up to rounding) if and only if `d` solves the steepest-descent
/// subproblem; positive otherwise. Errors if `d` is infeasible (operator
/// norm above `1 + 1e-9`).
pub fn duality_gap(g: &Matrix, d: &Matrix, spec: &GeometrySpec) -> Result<f64, GeometryError> {
    let norm = op_norm_exact(d, &spec.operator_spec())?;
    if norm > 1.0 + 1e-9 {
        return Err(GeometryError::InfeasibleDirection { norm });
    }
    let inner: f64 = g
        .as_slice()
        .iter()
        .zip(d.as_slice())
        .map(|(&x, &y)| x * y)
        .sum();
    Ok(inner + dual_norm(g, spec)?)
}

/// Exact matrix sign from the SVD: `U V^T` over the singular values above
/// `1e-12 * sigma_max` (rank-deficient inputs map their null directions to
/// zero). Used as the oracle for [`newton_schulz_sign`].
pub fn matrix_sign_svd(g: &Matrix) -> Result<Matrix, GeometryError> {
    let decomp = svd(g)?;
    let smax = decomp.s[0];
    if smax == 0.0 {
        return Ok(Matrix::zeros(g.rows(), g.cols()));
    }
    let kept: usize = decomp
        .s
        .as_slice()
        .iter()
        .take_while(|&&s| s > 1e-12 * smax)
        .count();
    let u_kept = Matrix::from_fn(g.rows(), kept, |r, c| decomp.u.get(r, c));
    let v_kept = Matrix::from_fn(g.cols(), kept, |r, c| decomp.v.get(r, c));
    Ok(matmul(&u_kept, &v_kept.transpose())?)
}

/// Output of [`newton_schulz_sign`]. `zero_input` flags the degenerate case
/// where the input was the zero matrix and the zero matrix is returned.
#[derive(Debug, Clone)]
pub struct MatrixSign {
    pub sign: Matrix,
    pub zero_input: bool,
}

/// Odd-polynomial coefficient schedule for the matrix-sign iteration: each
/// step applies `X <- a*X + b*X(X^T X) + c*X(X^T X)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NsSchedule {
    /// Aggressive warm-start quintic steps followed by the classical quintic
    /// polish `(15x - 10x^3 + 3x^5)/8`. At 10 iterations this drives every
    /// singular value in `[2e-3, 1]` of the normalized input to 1 within
    /// rounding error.
    Tuned,
    /// Classical cubic `1.5x - 0.5x^3`. Monotone but slow from small
    /// singular values; kept for parity experiments.
    Cubic,
}

// Warm-start coefficients: large first-step gain to lift small singular
// values, with overshoot bounded so the polish phase contracts it.
const NS_WARM: [(f64, f64, f64); 5] = [
    (8.157, -22.483, 15.879),
    (4.043, -2.809, 0.5),
    (3.892, -2.772, 0.506),
    (3.286, -2.368, 0.464),
    (2.347, -1.71, 0.423),
];
const NS_POLISH: (f64, f64, f64) = (1.875, -1.25, 0.375);
const NS_CUBIC: (f64, f64, f64) = (1.5, -0.5, 0.0);

/// Coefficients for iteration `k` of the schedule.
pub fn ns_coefficients(schedule: NsSchedule, k: usize) -> (f64, f64, f64) {
    match schedule {
        NsSchedule::Tuned => {
            if k < NS_WARM.len() {
                NS_WARM[k]
            } else {
                NS_POLISH
            }
        }
        NsSchedule::Cubic => NS_CUBIC,
    }
}

/// Newton-Schulz approximation of the matrix sign `U V^T`, with the tuned
/// schedule and 10 iterations as the default configuration.
pub fn newton_schulz_sign(g: &Matrix, iters: usize) -> MatrixSign {
    newton_schulz_sign_with(g, iters, NsSchedule::Tuned)
}

/// See [`newton_schulz_sign`]; `schedule` selects the iteration polynomial.
pub fn newton_schulz_sign_with(g: &Matrix, iters: usize, schedule: NsSchedule) -> MatrixSign {
    assert!(iters >= 1, "newton_schulz_sign requires iters >= 1");
    let fro = g.frobenius_norm();
    if fro == 0.0 {
        return MatrixSign {
            sign: Matrix::zeros(g.rows(), g.cols()),
            zero_input: true,
        };
    }
    // Work on the orientation with rows <= cols so the Gram matrix X X^T is
    // the small side.
    let transpose = g.rows() > g.cols();
    let mut x = if transpose {
        g.transpose()
    } else {
        g.clone()
    };
    // Frobenius pre-normalization with a small safety margin bounds every
    // singular value strictly below 1.
    x = x.scale(1.0 / (fro * 1.02));
    for k in 0..iters {
        let (a, b, c) = ns_coefficients(schedule, k);
        let gram = matmul(&x, &x.transpose()).expect("square by construction");
        // m = b*gram + c*gram^2, then x <- a*x + m*x.
        let m = if c != 0.0 {
            let gram2 = matmul(&gram, &gram).expect("square");
            gram.scale(b).add_scaled(c, &gram2)
        } else {
            gram.scale(b)
        };
        x = x.scale(a).add_scaled(1.0, &matmul(&m, &x).expect("shapes agree"));
    }
    let sign = if transpose { x.transpose() } else { x };
    MatrixSign {
        sign,
        zero_input: false,
    }
}

/// What a parameter block does in the architecture, with its fan dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamRole {
    pub kind: RoleKind,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum RoleKind {
    Embedding,
    HiddenWeight,
    OutputWeight,
    Bias,
    LayerNormWeight,
    LayerNormBias,
    AttentionQkv,
    AttentionOut,
    Unembedding,
}

impl ParamRole {
    pub fn new(kind: RoleKind, d_in: usize, d_out: usize) -> Self {
        assert!(d_in >= 1 && d_out >= 1);
        Self { kind, d_in, d_out }
    }

    pub fn is_vector_param(&self) -> bool {
        matches!(
            self.kind,
            RoleKind::Bias | RoleKind::LayerNormWeight | RoleKind::LayerNormBias
        )
    }
}

/// Update rule for a parameter role under a base geometry: the direction
/// geometry (always returned without the mean flag) and the explicit scalar
/// multiplying its unit-norm direction.
///
/// Vector parameters always take unscaled sign steps. Embeddings (and the
/// tied unembedding) take `d_out^(1/q) * colnorm_q` under a column base and
/// plain sign steps otherwise, reflecting that one-hot inputs live in the
/// plain `l1` ball. Matrix parameters take the base direction scaled by
/// [`moga_scale`].
pub fn role_rule(
    role: &ParamRole,
    base: &GeometrySpec,
) -> Result<(GeometrySpec, f64), GeometryError> {
    if role.is_vector_param() {
        return Ok((GeometrySpec::sign(), 1.0));
    }
    match role.kind {
        RoleKind::Embedding | RoleKind::Unembedding => match base.family {
            GeometryFamily::ColNorm { q } => Ok((
                GeometrySpec::colnorm(q),
                (role.d_out as f64).powf(exponent_recip(q)),
            )),
            _ => Ok((GeometrySpec::sign(), 1.0)),
        },
        _ => {
            let scale = moga_scale(&base.mean(), role.d_in, role.d_out)?;
            let direction = GeometrySpec {
                family: base.family,
                mean_normalized: false,
            };
            Ok((direction, scale))
        }
    }
}

/// Attention-logit normalization keeping `q^T k` at constant scale: `1/d_v`
/// under row (and sign) geometry, `d_v^(-max(1, 2/q))` under column
/// geometry. The spectral geometry has no rule.
pub fn attention_logit_scale(geometry: &GeometrySpec, d_v: usize) -> Result<f64, GeometryError> {
    assert!(d_v >= 1);
    let dv = d_v as f64;
    match geometry.family {
        GeometryFamily::RowNorm { .. } | GeometryFamily::Sign => Ok(1.0 / dv),
        GeometryFamily::ColNorm { q } => Ok(dv.powf(-(2.0 * exponent_recip(q)).max(1.0))),
        GeometryFamily::Spectral => Err(GeometryError::NoAttentionRule),
    }
}

//! Vector p-norms and (p, mean) norms, exact operator norms for the
//! computable families, the network block norm, and a brute-force
//! operator-norm estimator used as a test oracle.
//!
//! The infinity exponent is encoded as `f64::INFINITY` with explicit
//! branches; `d^(1/inf)` is taken to be 1 everywhere.

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::linalg::{gaussian_vector, seeded_rng, svd, LinalgError, Matrix, Vector};

/// A vector norm: plain `l_p` or the mean-normalized `(p, mean)` variant
/// `(1/n * sum |x_i|^p)^(1/p)`.
///
/// `(inf, mean)` coincides with the plain max norm.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VectorNormSpec {
    pub p: f64,
    pub mean_normalized: bool,
}

impl VectorNormSpec {
    pub fn lp(p: f64) -> Self {
        assert!(p >= 1.0, "norm exponent must satisfy p >= 1, got {p}");
        Self {
            p,
            mean_normalized: false,
        }
    }

    pub fn lp_mean(p: f64) -> Self {
        assert!(p >= 1.0, "norm exponent must satisfy p >= 1, got {p}");
        Self {
            p,
            mean_normalized: true,
        }
    }

    pub fn linf() -> Self {
        Self {
            p: f64::INFINITY,
            mean_normalized: false,
        }
    }
}

/// Operator-norm geometry `input -> output` on matrices (fan-in space to
/// fan-out space).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OperatorNormSpec {
    pub input: VectorNormSpec,
    pub output: VectorNormSpec,
}

impl OperatorNormSpec {
    pub fn new(input: VectorNormSpec, output: VectorNormSpec) -> Self {
        Self { input, output }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NormError {
    #[error("no exact rule for operator norm with input p={input_p}, output q={output_q}; computable families are 1->q, p->inf, and 2->2")]
    UnsupportedPair { input_p: f64, output_q: f64 },
    #[error("block norm needs at least 2 layers, got {k}")]
    TooFewLayers { k: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// `1/p` with the convention `1/inf = 0`.
pub fn exponent_recip(p: f64) -> f64 {
    if p.is_infinite() {
        0.0
    } else {
        1.0 / p
    }
}

/// Dual exponent `p* = p/(p-1)`, with `1* = inf` and `inf* = 1` handled
/// symbolically.
pub fn dual_exponent(p: f64) -> f64 {
    if p == 1.0 {
        f64::INFINITY
    } else if p.is_infinite() {
        1.0
    } else {
        p / (p - 1.0)
    }
}

/// Vector norm of `x` under `spec`.
pub fn vec_norm(x: &[f64], spec: VectorNormSpec) -> f64 {
    if spec.p.is_infinite() {
        return x.iter().fold(0.0, |m, &v| m.max(v.abs()));
    }
    // Factor out the max to keep |x_i|^p in range for large p.
    let scale = x.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for &v in x {
        sum += (v.abs() / scale).powf(spec.p);
    }
    if spec.mean_normalized {
        sum /= x.len() as f64;
    }
    scale * sum.powf(1.0 / spec.p)
}

// Multiplier relating a mean-normalized operator norm to its classical base:
// d_in^(1/p) / d_out^(1/q), with each factor present only when the
// corresponding side is mean-normalized.
fn mean_factor(spec: &OperatorNormSpec, d_in: usize, d_out: usize) -> f64 {
    let fin = if spec.input.mean_normalized {
        (d_in as f64).powf(exponent_recip(spec.input.p))
    } else {
        1.0
    };
    let fout = if spec.output.mean_normalized {
        (d_out as f64).powf(exponent_recip(spec.output.p))
    } else {
        1.0
    };
    fin / fout
}


/// Exact operator norm of `a` under `spec`.
///
/// Supported families: `1 -> q` (max column q-norm), `p -> inf` (max row
/// dual-norm), and `2 -> 2` (spectral, via the Jacobi SVD), each optionally
/// mean-normalized on either side.
pub fn op_norm_exact(a: &Matrix, spec: &OperatorNormSpec) -> Result<f64, NormError> {
    let p = spec.input.p;
    let q = spec.output.p;
    let base = if p == 1.0 {
        let col_spec = VectorNormSpec::lp(q);
        let mut best = 0.0_f64;
        for c in 0..a.cols() {
            best = best.max(vec_norm(&a.col(c), col_spec));
        }
        best
    } else if q.is_infinite() {
        let row_spec = VectorNormSpec::lp(dual_exponent(p));
        let mut best = 0.0_f64;
        for r in 0..a.rows() {
            best = best.max(vec_norm(a.row(r), row_spec));
        }
        best
    } else if p == 2.0 && q == 2.0 {
        svd(a)?.s[0]
    } else {
        return Err(NormError::UnsupportedPair {
            input_p: p,
            output_q: q,
        });
    };
    Ok(base * mean_factor(spec, a.cols(), a.rows()))
}

/// Exact operator norm of the rank-one matrix `u * v^T` under `spec`,
/// computed from the factors without materializing the matrix.
///
/// Uses the closed forms `max_c |v_c| * ||u||_q` (1 -> q),
/// `max_r |u_r| * ||v||_{p*}` (p -> inf), and `||u||_2 ||v||_2` (2 -> 2).
pub fn rank_one_op_norm(u: &[f64], v: &[f64], spec: &OperatorNormSpec) -> Result<f64, NormError> {
    let p = spec.input.p;
    let q = spec.output.p;
    let base = if p == 1.0 {
        vec_norm(v, VectorNormSpec::linf()) * vec_norm(u, VectorNormSpec::lp(q))
    } else if q.is_infinite() {
        vec_norm(u, VectorNormSpec::linf()) * vec_norm(v, VectorNormSpec::lp(dual_exponent(p)))
    } else if p == 2.0 && q == 2.0 {
        let nu = vec_norm(u, VectorNormSpec::lp(2.0));
        let nv = vec_norm(v, VectorNormSpec::lp(2.0));
        nu * nv
    } else {
        return Err(NormError::UnsupportedPair {
            input_p: p,
            output_q: q,
        });
    };
    Ok(base * mean_factor(spec, v.len(), u.len()))
}

/// Sampling estimate of the operator norm from below.
///
/// Evaluates the output norm over `samples` Gaussian directions rescaled to
/// the unit input-norm sphere, plus all signed standard basis vectors. The
/// result never exceeds the exact operator norm; for `1 -> q` geometries the
/// basis vectors attain it.
pub fn op_norm_bruteforce(a: &Matrix, spec: &OperatorNormSpec, samples: usize, seed: u64) -> f64 {
    assert!(samples >= 1, "op_norm_bruteforce requires samples >= 1");
    let mut best = 0.0_f64;
    let mut probe = |x: &Vector| {
        let in_norm = vec_norm(x.as_slice(), spec.input);
        if in_norm == 0.0 {
            return;
        }
        let y = a
            .mat_vec(&x.scale(1.0 / in_norm))
            .expect("probe length matches a.cols");
        best = best.max(vec_norm(y.as_slice(), spec.output));
    };

    for c in 0..a.cols() {
        for sign in [1.0, -1.0] {
            let e = Vector::from_fn(a.cols(), |i| if i == c { sign } else { 0.0 });
            probe(&e);
        }
    }
    let mut rng = seeded_rng(seed);
    for _ in 0..samples {
        let x = gaussian_vector(&mut rng, a.cols());
        probe(&x);
    }
    best
}

/// Per-position operator-norm spec for layer `i` of `k` inside the block
/// norm: `1 -> (q,mean)` for the first layer, `(p,mean) -> (q,mean)` for the
/// middle layers, and `(p,mean) -> inf` for the last.
pub fn layer_norm_spec(i: usize, k: usize, p: f64, q: f64) -> OperatorNormSpec {
    if i == 0 {
        OperatorNormSpec::new(VectorNormSpec::lp(1.0), VectorNormSpec::lp_mean(q))
    } else if i + 1 == k {
        OperatorNormSpec::new(VectorNormSpec::lp_mean(p), VectorNormSpec::linf())
    } else {
        OperatorNormSpec::new(VectorNormSpec::lp_mean(p), VectorNormSpec::lp_mean(q))
    }
}

/// Network block norm: the max over per-layer weight operator norms (with
/// layer-position geometries from [`layer_norm_spec`]) and bias max norms.
pub fn block_norm(weights: &[Matrix], biases: &[Vector], p: f64, q: f64) -> Result<f64, NormError> {
    let k = weights.len();
    if k < 2 {
        return Err(NormError::TooFewLayers { k });
    }
    let mut best = 0.0_f64;
    for (i, w) in weights.iter().enumerate() {
        best = best.max(op_norm_exact(w, &layer_norm_spec(i, k, p, q))?);
    }
    for b in biases {
        best = best.max(vec_norm(b.as_slice(), VectorNormSpec::linf()));
    }
    Ok(best)
}

/// Result of fuzzing the four mean-norm inequalities.
///
/// Lemma order: (0) monotonicity in p, (1) norm comparison with the
/// `n^(max(0, 1/q - 1/p))` factor, (2) Hadamard-product bound with the
/// `n^(max(0, 2/q - 1/p))` factor, (3) inner-product bound with the
/// `n^(max(1, 1/p + 1/q))` factor.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LemmaReport {
    pub trials: usize,
    pub violations: usize,
    pub worst_ratio_per_lemma: [f64; 4],
}

// Relative slack for calling an inequality violated: equality cases are
// attained (basis vectors, constant vectors) and must not trip on rounding.
const LEMMA_SLACK: f64 = 1e-9;

/// Fuzzes the four inequalities over random sizes, vectors, and exponents.
///
/// Each trial draws `n` in `[2, 512]`, Gaussian `x`, `y`, and exponents from
/// `[1, 8]` plus the infinity sentinel. Violations are counted, not thrown.
pub fn check_lemma_inequalities(trials: usize, seed: u64) -> LemmaReport {
    assert!(trials >= 1, "check_lemma_inequalities requires trials >= 1");
    let mut rng = seeded_rng(seed);
    let mut violations = 0usize;
    let mut worst = [0.0_f64; 4];

    let record = |slot: &mut f64, lhs: f64, rhs: f64, violations: &mut usize| {
        let ratio = if rhs > 0.0 {
            lhs / rhs
        } else if lhs == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if ratio > 1.0 + LEMMA_SLACK {
            *violations += 1;
        }
        if ratio > *slot {
            *slot = ratio;
        }
    };

    for _ in 0..trials {
        let n = rng.random_range(2..=512usize);
        let x = gaussian_vector(&mut rng, n);
        let y = gaussian_vector(&mut rng, n);
        let p = random_exponent(&mut rng);
        let q = random_exponent(&mut rng);
        let nf = n as f64;

        let mean = |e: f64| VectorNormSpec {
            p: e,
            mean_normalized: true,
        };

        // (i) monotonicity: ||x||_(lo,mean) <= ||x||_(hi,mean) for lo <= hi.
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        record(
            &mut worst[0],
            vec_norm(x.as_slice(), mean(lo)),
            vec_norm(x.as_slice(), mean(hi)),
            &mut violations,
        );

        // (ii) ||x||_(p,mean) <= n^max(0, 1/q - 1/p) ||x||_(q,mean).
        let factor_ii = nf.powf((exponent_recip(q) - exponent_recip(p)).max(0.0));
        record(
            &mut worst[1],
            vec_norm(x.as_slice(), mean(p)),
            factor_ii * vec_norm(x.as_slice(), mean(q)),
            &mut violations,
        );

        // (iii) ||x . y||_(p,mean) <= n^max(0, 2/q - 1/p) ||x||_(q,mean) ||y||_(q,mean).
        let factor_iii = nf.powf((2.0 * exponent_recip(q) - exponent_recip(p)).max(0.0));
        record(
            &mut worst[2],
            vec_norm(x.hadamard(&y).as_slice(), mean(p)),
            factor_iii * vec_norm(x.as_slice(), mean(q)) * vec_norm(y.as_slice(), mean(q)),
            &mut violations,
        );

        // (iv) |<x, y>| <= n^max(1, 1/p + 1/q) ||x||_(p,mean) ||y||_(q,mean).
        let factor_iv = nf.powf((exponent_recip(p) + exponent_recip(q)).max(1.0));
        record(
            &mut worst[3],
            x.dot(&y).abs(),
            factor_iv * vec_norm(x.as_slice(), mean(p)) * vec_norm(y.as_slice(), mean(q)),
            &mut violations,
        );
    }

    LemmaReport {
        trials,
        violations,
        worst_ratio_per_lemma: worst,
    }
}

fn random_exponent<R: rand::Rng>(rng: &mut R) -> f64 {
    if rng.random_range(0..8u32) == 0 {
        f64::INFINITY
    } else {
        rng.random_range(1.0..=8.0f64)
    }
}

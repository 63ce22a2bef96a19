//! K-layer tanh feedforward network with exact first- and second-order
//! directional derivatives.
//!
//! Shapes follow the fan-out x fan-in convention: `W_1` is `w x d`, the
//! middle layers are `w x w`, and the last layer is `1 x w`; the activation
//! is applied at every layer including the last, so the output is
//! `sigma(z_K)`. The loss is `logcosh(y_K - target)`, whose first and second
//! derivatives are bounded by 1.
//!
//! Directional derivatives propagate the per-layer state
//! `lambda_i = sigma'(z_i) .* (dW_i y_{i-1} + db_i + W_i lambda_{i-1})`
//! forward in one sweep; directional Hessians additionally carry one
//! second-order state per layer. Summing the per-block recursions into a
//! single sweep is exact by bilinearity.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::linalg::{gaussian_matrix, gaussian_vector, seeded_rng, LinalgError, Matrix, Vector};
use crate::norms::{self, layer_norm_spec, op_norm_exact, vec_norm, NormError, VectorNormSpec};

/// Bound on `|tanh'|` (the activation Lipschitz constant).
pub const ACTIVATION_DERIV_BOUND: f64 = 1.0;
/// Bound on `|tanh''|`, attained at `z = +-atanh(1/sqrt(3))`: `4/(3*sqrt(3))`.
pub const ACTIVATION_SECOND_DERIV_BOUND: f64 = 0.769800358919501;
/// Bound on `|d/dz logcosh(z)| = |tanh(z)|`.
pub const LOSS_DERIV_BOUND: f64 = 1.0;
/// Bound on `|d^2/dz^2 logcosh(z)| = sech^2(z)`.
pub const LOSS_SECOND_DERIV_BOUND: f64 = 1.0;

/// Identifier stored in the serialized header; tanh is the only shipped
/// activation.
pub const ACTIVATION_ID_TANH: u32 = 0;

const HEADER_MAGIC: [u8; 4] = *b"ONMP";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetworkError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch must be nonempty")]
    EmptyBatch,
    #[error("malformed parameter container: {0}")]
    MalformedContainer(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Norm(#[from] NormError),
}

fn activate(z: f64) -> f64 {
    z.tanh()
}

fn activate_d1(z: f64) -> f64 {
    let t = z.tanh();
    1.0 - t * t
}

fn activate_d2(z: f64) -> f64 {
    let t = z.tanh();
    -2.0 * t * (1.0 - t * t)
}

/// `log(cosh(z))`, evaluated without overflow for large `|z|`.
pub fn log_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - core::f64::consts::LN_2
}

/// Loss derivative `d/dy logcosh(y - target) = tanh(y - target)`.
pub fn loss_d1(y: f64, target: f64) -> f64 {
    (y - target).tanh()
}

/// Loss second derivative `sech^2(y - target)`.
pub fn loss_d2(y: f64, target: f64) -> f64 {
    let t = (y - target).tanh();
    1.0 - t * t
}

/// The expected shape of weight block `i` in a depth-`k` network.
pub fn layer_shape(i: usize, k: usize, width: usize, input_dim: usize) -> (usize, usize) {
    if i == 0 {
        (width, input_dim)
    } else if i + 1 == k {
        (1, width)
    } else {
        (width, width)
    }
}

/// Block-structured parameters of the feedforward network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    weights: Vec<Matrix>,
    biases: Vec<Vector>,
}

impl ModelParams {
    pub fn new(weights: Vec<Matrix>, biases: Vec<Vector>) -> Result<Self, NetworkError> {
        let k = weights.len();
        if k < 2 {
            return Err(NetworkError::ShapeMismatch(format!(
                "need at least 2 layers, got {k}"
            )));
        }
        if biases.len() != k {
            return Err(NetworkError::ShapeMismatch(format!(
                "{k} weight blocks but {} bias blocks",
                biases.len()
            )));
        }
        let width = weights[0].rows();
        let input_dim = weights[0].cols();
        for (i, w) in weights.iter().enumerate() {
            let expect = layer_shape(i, k, width, input_dim);
            if (w.rows(), w.cols()) != expect {
                return Err(NetworkError::ShapeMismatch(format!(
                    "weight {i} is {}x{}, expected {}x{}",
                    w.rows(),
                    w.cols(),
                    expect.0,
                    expect.1
                )));
            }
            if biases[i].len() != w.rows() {
                return Err(NetworkError::ShapeMismatch(format!(
                    "bias {i} has length {}, expected {}",
                    biases[i].len(),
                    w.rows()
                )));
            }
        }
        Ok(Self { weights, biases })
    }

    pub fn zeros(k: usize, width: usize, input_dim: usize) -> Self {
        let weights = (0..k)
            .map(|i| {
                let (r, c) = layer_shape(i, k, width, input_dim);
                Matrix::zeros(r, c)
            })
            .collect();
        let biases = (0..k)
            .map(|i| Vector::zeros(layer_shape(i, k, width, input_dim).0))
            .collect();
        Self { weights, biases }
    }

    /// Gaussian initialization rescaled so every weight block sits at norm
    /// `c/2` (in its block-norm geometry) and every bias at max-norm `c/4`,
    /// strictly inside the radius-`c` ball.
    pub fn random_in_ball(
        k: usize,
        width: usize,
        input_dim: usize,
        c: f64,
        p: f64,
        q: f64,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        assert!(c > 0.0);
        let mut rng = seeded_rng(seed);
        let mut weights = Vec::with_capacity(k);
        let mut biases = Vec::with_capacity(k);
        for i in 0..k {
            let (r, cdim) = layer_shape(i, k, width, input_dim);
            let raw = gaussian_matrix(&mut rng, r, cdim);
            let norm = op_norm_exact(&raw, &layer_norm_spec(i, k, p, q))?;
            weights.push(raw.scale(0.5 * c / norm.max(1e-300)));
            let braw = gaussian_vector(&mut rng, r);
            let bnorm = braw.max_abs();
            biases.push(braw.scale(0.25 * c / bnorm.max(1e-300)));
        }
        let params = Self::new(weights, biases)?;
        params.project_to_ball(c, p, q)
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn width(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vector] {
        &self.biases
    }

    pub fn weight(&self, i: usize) -> &Matrix {
        &self.weights[i]
    }

    pub fn bias(&self, i: usize) -> &Vector {
        &self.biases[i]
    }

    pub fn block_norm(&self, p: f64, q: f64) -> Result<f64, NormError> {
        norms::block_norm(&self.weights, &self.biases, p, q)
    }

    /// `self + t * direction`, blockwise.
    pub fn add_scaled(&self, t: f64, d: &Perturbation) -> Result<ModelParams, NetworkError> {
        d.check_shapes(self)?;
        let weights = self
            .weights
            .iter()
            .zip(&d.dweights)
            .map(|(w, dw)| w.add_scaled(t, dw))
            .collect();
        let biases = self
            .biases
            .iter()
            .zip(&d.dbiases)
            .map(|(b, db)| b.add_scaled(t, db))
            .collect();
        Ok(ModelParams { weights, biases })
    }

    /// Rescales every block whose norm exceeds `c` down to the cap, leaving
    /// blocks already inside untouched, so the block norm ends at most `c`.
    pub fn project_to_ball(&self, c: f64, p: f64, q: f64) -> Result<ModelParams, NetworkError> {
        assert!(c > 0.0);
        let k = self.depth();
        let mut weights = Vec::with_capacity(k);
        for (i, w) in self.weights.iter().enumerate() {
            let norm = op_norm_exact(w, &layer_norm_spec(i, k, p, q))?;
            weights.push(if norm > c { w.scale(c / norm) } else { w.clone() });
        }
        let biases = self
            .biases
            .iter()
            .map(|b| {
                let norm = b.max_abs();
                if norm > c {
                    b.scale(c / norm)
                } else {
                    b.clone()
                }
            })
            .collect();
        Ok(ModelParams { weights, biases })
    }

    /// Flat binary container: `ONMP` magic, format version, `(K, w, d,
    /// activation id)` header, then row-major weight and bias blocks in
    /// layer order, all little-endian `f64`. Round-trips bit-exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&HEADER_MAGIC);
        for v in [
            1u32,
            self.depth() as u32,
            self.width() as u32,
            self.input_dim() as u32,
            ACTIVATION_ID_TANH,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for &x in w.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for &x in b.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetworkError> {
        let header_len = 4 + 5 * 4;
        if bytes.len() < header_len {
            return Err(NetworkError::MalformedContainer(String::from(
                "container shorter than header",
            )));
        }
        if bytes[..4] != HEADER_MAGIC {
            return Err(NetworkError::MalformedContainer(String::from("bad magic")));
        }
        let mut words = [0u32; 5];
        for (i, w) in words.iter_mut().enumerate() {
            let off = 4 + 4 * i;
            *w = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        }
        let [version, k, width, input_dim, activation] = words;
        if version != 1 {
            return Err(NetworkError::MalformedContainer(format!(
                "unsupported format version {version}"
            )));
        }
        if activation != ACTIVATION_ID_TANH {
            return Err(NetworkError::MalformedContainer(format!(
                "unsupported activation id {activation}"
            )));
        }
        let (k, width, input_dim) = (k as usize, width as usize, input_dim as usize);
        let mut offset = header_len;
        let read_f64s = |count: usize, offset: &mut usize| -> Result<Vec<f64>, NetworkError> {
            let need = count * 8;
            if bytes.len() < *offset + need {
                return Err(NetworkError::MalformedContainer(String::from(
                    "container truncated",
                )));
            }
            let out = bytes[*offset..*offset + need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *offset += need;
            Ok(out)
        };
        let mut weights = Vec::with_capacity(k);
        let mut biases = Vec::with_capacity(k);
        for i in 0..k {
            let (r, c) = layer_shape(i, k, width, input_dim);
            let wdata = read_f64s(r * c, &mut offset)?;
            let bdata = read_f64s(r, &mut offset)?;
            weights.push(
                Matrix::new(r, c, wdata).map_err(|e| NetworkError::MalformedContainer(format!("{e}")))?,
            );
            biases.push(
                Vector::new(bdata).map_err(|e| NetworkError::MalformedContainer(format!("{e}")))?,
            );
        }
        if offset != bytes.len() {
            return Err(NetworkError::MalformedContainer(format!(
                "{} trailing bytes",
                bytes.len() - offset
            )));
        }
        Self::new(weights, biases)
    }
}

/// A parameter-space direction with the same block structure as
/// [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub dweights: Vec<Matrix>,
    pub dbiases: Vec<Vector>,
}

impl Perturbation {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            dweights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            dbiases: params.biases.iter().map(|b| Vector::zeros(b.len())).collect(),
        }
    }

    pub fn gaussian<R: Rng>(params: &ModelParams, rng: &mut R) -> Self {
        Self {
            dweights: params
                .weights
                .iter()
                .map(|w| gaussian_matrix(rng, w.rows(), w.cols()))
                .collect(),
            dbiases: params
                .biases
                .iter()
                .map(|b| gaussian_vector(rng, b.len()))
                .collect(),
        }
    }

    pub fn check_shapes(&self, params: &ModelParams) -> Result<(), NetworkError> {
        if self.dweights.len() != params.weights.len() || self.dbiases.len() != params.biases.len()
        {
            return Err(NetworkError::ShapeMismatch(String::from(
                "perturbation depth differs from parameters",
            )));
        }
        for (i, (dw, w)) in self.dweights.iter().zip(&params.weights).enumerate() {
            if (dw.rows(), dw.cols()) != (w.rows(), w.cols()) {
                return Err(NetworkError::ShapeMismatch(format!(
                    "perturbation weight {i} is {}x{}, expected {}x{}",
                    dw.rows(),
                    dw.cols(),
                    w.rows(),
                    w.cols()
                )));
            }
        }
        for (i, (db, b)) in self.dbiases.iter().zip(&params.biases).enumerate() {
            if db.len() != b.len() {
                return Err(NetworkError::ShapeMismatch(format!(
                    "perturbation bias {i} has length {}, expected {}",
                    db.len(),
                    b.len()
                )));
            }
        }
        Ok(())
    }

    pub fn block_norm(&self, p: f64, q: f64) -> Result<f64, NormError> {
        norms::block_norm(&self.dweights, &self.dbiases, p, q)
    }

    pub fn scale(&self, c: f64) -> Perturbation {
        Perturbation {
            dweights: self.dweights.iter().map(|w| w.scale(c)).collect(),
            dbiases: self.dbiases.iter().map(|b| b.scale(c)).collect(),
        }
    }

    /// `self + c * other`, blockwise.
    pub fn add_scaled(&self, c: f64, other: &Perturbation) -> Perturbation {
        Perturbation {
            dweights: self
                .dweights
                .iter()
                .zip(&other.dweights)
                .map(|(a, b)| a.add_scaled(c, b))
                .collect(),
            dbiases: self
                .dbiases
                .iter()
                .zip(&other.dbiases)
                .map(|(a, b)| a.add_scaled(c, b))
                .collect(),
        }
    }

    /// Frobenius inner product over all blocks.
    pub fn inner(&self, other: &Perturbation) -> f64 {
        let mut sum = 0.0;
        for (a, b) in self.dweights.iter().zip(&other.dweights) {
            sum += a
                .as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(&x, &y)| x * y)
                .sum::<f64>();
        }
        for (a, b) in self.dbiases.iter().zip(&other.dbiases) {
            sum += a.dot(b);
        }
        sum
    }

    pub fn has_nan(&self) -> bool {
        self.dweights
            .iter()
            .any(|w| w.as_slice().iter().any(|x| x.is_nan()))
            || self
                .dbiases
                .iter()
                .any(|b| b.as_slice().iter().any(|x| x.is_nan()))
    }
}

/// Forward evaluation record: pre-activations, activations, and the
/// activation derivative diagonals needed by the derivative sweeps.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub x: Vector,
    pub z: Vec<Vector>,
    pub y: Vec<Vector>,
    pub sigma1: Vec<Vector>,
    pub sigma2: Vec<Vector>,
}

impl ForwardTrace {
    /// The scalar network output `y_K`.
    pub fn output(&self) -> f64 {
        self.y.last().expect("depth >= 2")[0]
    }
}

/// Per-layer accumulators from a directional sweep: `lambda[i]` is the
/// derivative of `y_i` along the perturbation, `xi[i]` the second derivative
/// along the pair (empty for first-order sweeps).
#[derive(Debug, Clone)]
pub struct DirectionalState {
    pub lambda: Vec<Vector>,
    pub xi: Vec<Vector>,
}

/// Full forward pass of the network on `x`.
pub fn forward(params: &ModelParams, x: &Vector) -> Result<ForwardTrace, NetworkError> {
    if x.len() != params.input_dim() {
        return Err(NetworkError::ShapeMismatch(format!(
            "input has length {}, expected {}",
            x.len(),
            params.input_dim()
        )));
    }
    let k = params.depth();
    let mut z = Vec::with_capacity(k);
    let mut y = Vec::with_capacity(k);
    let mut sigma1 = Vec::with_capacity(k);
    let mut sigma2 = Vec::with_capacity(k);
    let mut prev = x.clone();
    for i in 0..k {
        let zi = params.weights[i]
            .mat_vec(&prev)?
            .add_scaled(1.0, &params.biases[i]);
        let yi = Vector::from_fn(zi.len(), |j| activate(zi[j]));
        sigma1.push(Vector::from_fn(zi.len(), |j| activate_d1(zi[j])));
        sigma2.push(Vector::from_fn(zi.len(), |j| activate_d2(zi[j])));
        prev = yi.clone();
        z.push(zi);
        y.push(yi);
    }
    Ok(ForwardTrace {
        x: x.clone(),
        z,
        y,
        sigma1,
        sigma2,
    })
}

/// Loss of a single sample.
pub fn sample_loss(params: &ModelParams, x: &Vector, target: f64) -> Result<f64, NetworkError> {
    Ok(log_cosh(forward(params, x)?.output() - target))
}

/// Mean loss over a batch.
pub fn batch_loss(params: &ModelParams, batch: &[(Vector, f64)]) -> Result<f64, NetworkError> {
    if batch.is_empty() {
        return Err(NetworkError::EmptyBatch);
    }
    let mut total = 0.0;
    for (x, target) in batch {
        total += sample_loss(params, x, *target)?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean loss and exact gradient over a batch, by reverse accumulation.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[(Vector, f64)],
) -> Result<(f64, Perturbation), NetworkError> {
    if batch.is_empty() {
        return Err(NetworkError::EmptyBatch);
    }
    let k = params.depth();
    let mut grad = Perturbation::zeros_like(params);
    let mut total = 0.0;
    for (x, target) in batch {
        let trace = forward(params, x)?;
        total += log_cosh(trace.output() - *target);
        // delta_i = dLoss/dz_i, swept backwards.
        let mut delta =
            Vector::from_fn(1, |_| loss_d1(trace.output(), *target) * trace.sigma1[k - 1][0]);
        for i in (0..k).rev() {
            let below = if i == 0 { &trace.x } else { &trace.y[i - 1] };
            accumulate_outer(&mut grad.dweights[i], &delta, below);
            for (gb, dv) in grad.dbiases[i].as_mut_slice().iter_mut().zip(delta.as_slice()) {
                *gb += dv;
            }
            if i > 0 {
                let back = params.weights[i].mat_vec_transposed(&delta)?;
                delta = Vector::from_fn(back.len(), |j| back[j] * trace.sigma1[i - 1][j]);
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    Ok((total * inv, grad.scale(inv)))
}

// dst += u * v^T, the rank-one gradient contribution of one layer.
fn accumulate_outer(dst: &mut Matrix, u: &Vector, v: &Vector) {
    let cols = dst.cols();
    let data = dst.as_mut_slice();
    for r in 0..u.len() {
        let ur = u[r];
        let row = &mut data[r * cols..(r + 1) * cols];
        for (slot, &vc) in row.iter_mut().zip(v.as_slice()) {
            *slot += ur * vc;
        }
    }
}

/// Exact directional derivative of the sample loss along `d`.
pub fn dir_derivative(
    params: &ModelParams,
    x: &Vector,
    target: f64,
    d: &Perturbation,
) -> Result<f64, NetworkError> {
    d.check_shapes(params)?;
    let trace = forward(params, x)?;
    let state = first_order_sweep(params, &trace, d)?;
    let lambda_out = state.lambda.last().expect("depth >= 2")[0];
    Ok(loss_d1(trace.output(), target) * lambda_out)
}

/// Exact directional Hessian of the sample loss along the pair `(d1, d2)`.
pub fn dir_hessian(
    params: &ModelParams,
    x: &Vector,
    target: f64,
    d1: &Perturbation,
    d2: &Perturbation,
) -> Result<f64, NetworkError> {
    d1.check_shapes(params)?;
    d2.check_shapes(params)?;
    let trace = forward(params, x)?;
    let k = params.depth();

    // Single sweep carrying the two first-order pre-activation states and
    // one second-order state.
    let mut u_prev: Option<Vector> = None; // dy_{i-1}[d1]
    let mut v_prev: Option<Vector> = None; // dy_{i-1}[d2]
    let mut h_prev: Option<Vector> = None; // d2y_{i-1}[d1, d2]
    let mut u_out = 0.0;
    let mut v_out = 0.0;
    let mut h_out = 0.0;
    for i in 0..k {
        let below = if i == 0 { &trace.x } else { &trace.y[i - 1] };
        let mut a = d1.dweights[i].mat_vec(below)?.add_scaled(1.0, &d1.dbiases[i]);
        let mut c = d2.dweights[i].mat_vec(below)?.add_scaled(1.0, &d2.dbiases[i]);
        let mut s = Vector::zeros(a.len());
        if let (Some(u), Some(v), Some(h)) = (&u_prev, &v_prev, &h_prev) {
            a = a.add_scaled(1.0, &params.weights[i].mat_vec(u)?);
            c = c.add_scaled(1.0, &params.weights[i].mat_vec(v)?);
            s = d1.dweights[i].mat_vec(v)?;
            s = s.add_scaled(1.0, &d2.dweights[i].mat_vec(u)?);
            s = s.add_scaled(1.0, &params.weights[i].mat_vec(h)?);
        }
        let s1 = &trace.sigma1[i];
        let s2 = &trace.sigma2[i];
        let u_i = Vector::from_fn(a.len(), |j| s1[j] * a[j]);
        let v_i = Vector::from_fn(c.len(), |j| s1[j] * c[j]);
        let h_i = Vector::from_fn(a.len(), |j| s2[j] * a[j] * c[j] + s1[j] * s[j]);
        if i + 1 == k {
            u_out = u_i[0];
            v_out = v_i[0];
            h_out = h_i[0];
        }
        u_prev = Some(u_i);
        v_prev = Some(v_i);
        h_prev = Some(h_i);
    }
    let out = trace.output();
    Ok(loss_d2(out, target) * u_out * v_out + loss_d1(out, target) * h_out)
}

/// Per-layer directional accumulators for diagnostics and tests: the
/// first-order state for `d1` and, when `d2` is given, the second-order
/// state for the pair.
pub fn directional_state(
    params: &ModelParams,
    x: &Vector,
    d1: &Perturbation,
    d2: Option<&Perturbation>,
) -> Result<DirectionalState, NetworkError> {
    d1.check_shapes(params)?;
    let trace = forward(params, x)?;
    let first = first_order_sweep(params, &trace, d1)?;
    let Some(d2) = d2 else {
        return Ok(first);
    };
    d2.check_shapes(params)?;
    let second = first_order_sweep(params, &trace, d2)?;
    let k = params.depth();
    let mut xi: Vec<Vector> = Vec::with_capacity(k);
    for i in 0..k {
        let a = pre_activation_state(params, &trace, d1, i, &first.lambda)?;
        let c = pre_activation_state(params, &trace, d2, i, &second.lambda)?;
        let mut s = Vector::zeros(a.len());
        if i > 0 {
            s = d1.dweights[i].mat_vec(&second.lambda[i - 1])?;
            s = s.add_scaled(1.0, &d2.dweights[i].mat_vec(&first.lambda[i - 1])?);
            s = s.add_scaled(1.0, &params.weights[i].mat_vec(&xi[i - 1])?);
        }
        let s1 = &trace.sigma1[i];
        let s2 = &trace.sigma2[i];
        xi.push(Vector::from_fn(a.len(), |j| {
            s2[j] * a[j] * c[j] + s1[j] * s[j]
        }));
    }
    Ok(DirectionalState {
        lambda: first.lambda,
        xi,
    })
}

// Pre-activation first-order state a_i = dW_i y_{i-1} + db_i + W_i lambda_{i-1}.
fn pre_activation_state(
    params: &ModelParams,
    trace: &ForwardTrace,
    d: &Perturbation,
    i: usize,
    lambda: &[Vector],
) -> Result<Vector, NetworkError> {
    let below = if i == 0 { &trace.x } else { &trace.y[i - 1] };
    let mut a = d.dweights[i].mat_vec(below)?.add_scaled(1.0, &d.dbiases[i]);
    if i > 0 {
        a = a.add_scaled(1.0, &params.weights[i].mat_vec(&lambda[i - 1])?);
    }
    Ok(a)
}

fn first_order_sweep(
    params: &ModelParams,
    trace: &ForwardTrace,
    d: &Perturbation,
) -> Result<DirectionalState, NetworkError> {
    let k = params.depth();
    let mut lambda: Vec<Vector> = Vec::with_capacity(k);
    for i in 0..k {
        let a = pre_activation_state(params, trace, d, i, &lambda)?;
        let s1 = &trace.sigma1[i];
        lambda.push(Vector::from_fn(a.len(), |j| s1[j] * a[j]));
    }
    Ok(DirectionalState {
        lambda,
        xi: Vec::new(),
    })
}

/// Hidden-state norm profile `||y_i||_(q,mean)` for `i = 1..K-1`.
pub fn hidden_state_norms(trace: &ForwardTrace, q: f64) -> Vec<f64> {
    let k = trace.y.len();
    trace.y[..k - 1]
        .iter()
        .map(|y| vec_norm(y.as_slice(), VectorNormSpec::lp_mean(q)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn small_params(seed: u64, k: usize, w: usize, d: usize) -> ModelParams {
        ModelParams::random_in_ball(k, w, d, 2.0, 2.0, 2.0, seed).unwrap()
    }

    #[test]
    fn shape_validation() {
        let weights = vec![Matrix::zeros(4, 2), Matrix::zeros(2, 4)];
        let biases = vec![Vector::zeros(4), Vector::zeros(2)];
        assert!(ModelParams::new(weights, biases).is_err());
        let weights = vec![Matrix::zeros(4, 2), Matrix::zeros(1, 4)];
        let biases = vec![Vector::zeros(4), Vector::zeros(1)];
        assert!(ModelParams::new(weights, biases).is_ok());
    }

    #[test]
    fn zero_params_output_is_zero() {
        let params = ModelParams::zeros(3, 4, 2);
        let x = Vector::new(vec![0.3, -0.8]).unwrap();
        let trace = forward(&params, &x).unwrap();
        assert_eq!(trace.output(), 0.0);
    }

    #[test]
    fn scalar_chain_hand_value() {
        // K=2, w=1, unit weights, zero bias, x = 0.5: tanh(tanh(0.5)).
        let weights = vec![
            Matrix::new(1, 1, vec![1.0]).unwrap(),
            Matrix::new(1, 1, vec![1.0]).unwrap(),
        ];
        let biases = vec![Vector::zeros(1), Vector::zeros(1)];
        let params = ModelParams::new(weights, biases).unwrap();
        let x = Vector::new(vec![0.5]).unwrap();
        let out = forward(&params, &x).unwrap().output();
        assert!((out - 0.4318081805950961).abs() < 1e-15, "out {out}");
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let params = ModelParams::zeros(2, 3, 2);
        let x = Vector::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(forward(&params, &x).is_err());
    }

    #[test]
    fn zero_everything_gives_zero_loss_and_grad() {
        let params = ModelParams::zeros(2, 3, 2);
        let batch = vec![(Vector::new(vec![0.4, 0.6]).unwrap(), 0.0)];
        let (loss, grad) = loss_and_grad(&params, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.dweights.iter().all(|w| w.is_zero()));
        assert!(grad.dbiases.iter().all(|b| b.as_slice().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn gradient_matches_directional_derivative() {
        let params = small_params(3, 3, 8, 4);
        let x = Vector::from_fn(4, |i| 0.3 * (i as f64) - 0.4);
        let target = 0.25;
        let (_, grad) = loss_and_grad(&params, &[(x.clone(), target)]).unwrap();
        let mut rng = seeded_rng(77);
        for _ in 0..10 {
            let d = Perturbation::gaussian(&params, &mut rng);
            let adjoint = grad.inner(&d);
            let sweep = dir_derivative(&params, &x, target, &d).unwrap();
            assert!(
                (adjoint - sweep).abs() <= 1e-10 * adjoint.abs().max(1.0),
                "{adjoint} vs {sweep}"
            );
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let params = small_params(5, 3, 8, 4);
        let x = Vector::from_fn(4, |i| 0.2 * (i as f64) - 0.3);
        let target = -0.4;
        let (_, grad) = loss_and_grad(&params, &[(x.clone(), target)]).unwrap();
        let h = 1e-5;
        let mut rng = seeded_rng(90);
        // Spot-check random coordinates in every block.
        for layer in 0..params.depth() {
            for _ in 0..5 {
                let r = rng.random_range(0..params.weight(layer).rows());
                let c = rng.random_range(0..params.weight(layer).cols());
                let mut probe = Perturbation::zeros_like(&params);
                probe.dweights[layer].set(r, c, 1.0);
                let plus = sample_loss(&params.add_scaled(h, &probe).unwrap(), &x, target).unwrap();
                let minus =
                    sample_loss(&params.add_scaled(-h, &probe).unwrap(), &x, target).unwrap();
                let fd = (plus - minus) / (2.0 * h);
                let analytic = grad.dweights[layer].get(r, c);
                let rel = (analytic - fd).abs() / (analytic.abs() + 1e-8);
                assert!(rel <= 1e-6, "layer {layer} ({r},{c}): {analytic} vs {fd}");
            }
        }
    }

    #[test]
    fn single_neuron_closed_form() {
        // K=2, w=1: f = logcosh(sigma(w2 * sigma(w1 x)) - t); perturb w1 only.
        let (w1, w2, xv, t, dw) = (1.3, -0.8, 0.7, 0.2, 0.37);
        let weights = vec![
            Matrix::new(1, 1, vec![w1]).unwrap(),
            Matrix::new(1, 1, vec![w2]).unwrap(),
        ];
        let biases = vec![Vector::zeros(1), Vector::zeros(1)];
        let params = ModelParams::new(weights, biases).unwrap();
        let mut d = Perturbation::zeros_like(&params);
        d.dweights[0].set(0, 0, dw);

        let z1 = w1 * xv;
        let y1 = z1.tanh();
        let z2 = w2 * y1;
        let y2 = z2.tanh();
        let expected =
            (y2 - t).tanh() * (1.0 - y2 * y2) * w2 * (1.0 - y1 * y1) * xv * dw;

        let x = Vector::new(vec![xv]).unwrap();
        let got = dir_derivative(&params, &x, t, &d).unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn zero_direction_derivatives_vanish() {
        let params = small_params(8, 3, 6, 3);
        let x = Vector::from_fn(3, |i| 0.1 + i as f64 * 0.2);
        let zero = Perturbation::zeros_like(&params);
        assert_eq!(dir_derivative(&params, &x, 0.1, &zero).unwrap(), 0.0);
        assert_eq!(dir_hessian(&params, &x, 0.1, &zero, &zero).unwrap(), 0.0);
    }

    #[test]
    fn hessian_symmetry() {
        let params = small_params(11, 4, 8, 4);
        let x = Vector::from_fn(4, |i| (i as f64 - 1.5) * 0.4);
        let mut rng = seeded_rng(13);
        for _ in 0..5 {
            let d1 = Perturbation::gaussian(&params, &mut rng);
            let d2 = Perturbation::gaussian(&params, &mut rng);
            let a = dir_hessian(&params, &x, 0.3, &d1, &d2).unwrap();
            let b = dir_hessian(&params, &x, 0.3, &d2, &d1).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn hessian_matches_cross_stencil() {
        let params = small_params(17, 3, 8, 4);
        let x = Vector::from_fn(4, |i| 0.25 * (i as f64) - 0.5);
        let target = 0.1;
        let mut rng = seeded_rng(14);
        let d1 = Perturbation::gaussian(&params, &mut rng);
        let d2 = Perturbation::gaussian(&params, &mut rng);
        let analytic = dir_hessian(&params, &x, target, &d1, &d2).unwrap();
        let t = 1e-4;
        let mut eval = |a: f64, b: f64| {
            let shifted = params
                .add_scaled(a, &d1)
                .unwrap()
                .add_scaled(b, &d2)
                .unwrap();
            sample_loss(&shifted, &x, target).unwrap()
        };
        let fd = (eval(t, t) - eval(t, -t) - eval(-t, t) + eval(-t, -t)) / (4.0 * t * t);
        let rel = (analytic - fd).abs() / (analytic.abs() + 1e-6);
        assert!(rel <= 1e-4, "{analytic} vs {fd}");
    }

    #[test]
    fn hessian_bilinear() {
        let params = small_params(21, 3, 6, 3);
        let x = Vector::from_fn(3, |i| 0.3 * i as f64);
        let mut rng = seeded_rng(15);
        let d1 = Perturbation::gaussian(&params, &mut rng);
        let d2 = Perturbation::gaussian(&params, &mut rng);
        let d3 = Perturbation::gaussian(&params, &mut rng);
        let (alpha, beta) = (0.7, -1.3);
        let combo = d1.scale(alpha).add_scaled(beta, &d3);
        let lhs = dir_hessian(&params, &x, 0.0, &combo, &d2).unwrap();
        let rhs = alpha * dir_hessian(&params, &x, 0.0, &d1, &d2).unwrap()
            + beta * dir_hessian(&params, &x, 0.0, &d3, &d2).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn directional_state_layers_match_scalar_results() {
        let params = small_params(23, 3, 5, 3);
        let x = Vector::from_fn(3, |i| 0.2 * (i as f64 + 1.0));
        let mut rng = seeded_rng(16);
        let d1 = Perturbation::gaussian(&params, &mut rng);
        let d2 = Perturbation::gaussian(&params, &mut rng);
        let state = directional_state(&params, &x, &d1, Some(&d2)).unwrap();
        assert_eq!(state.lambda.len(), params.depth());
        assert_eq!(state.xi.len(), params.depth());

        let trace = forward(&params, &x).unwrap();
        let out = trace.output();
        let target = 0.6;
        let expect_dd = loss_d1(out, target) * state.lambda.last().unwrap()[0];
        let got_dd = dir_derivative(&params, &x, target, &d1).unwrap();
        assert!((expect_dd - got_dd).abs() < 1e-14);

        let lambda2 = directional_state(&params, &x, &d2, None).unwrap().lambda;
        let expect_h = loss_d2(out, target)
            * state.lambda.last().unwrap()[0]
            * lambda2.last().unwrap()[0]
            + loss_d1(out, target) * state.xi.last().unwrap()[0];
        let got_h = dir_hessian(&params, &x, target, &d1, &d2).unwrap();
        assert!((expect_h - got_h).abs() <= 1e-13 * got_h.abs().max(1.0));
    }

    #[test]
    fn hidden_states_obey_ball_bound() {
        // For params in the radius-C ball and ||x||_2 <= C, the (q,mean)
        // norms satisfy ||y_i|| <= (2 L C)^i * C.
        let c = 2.0;
        let (p, q) = (2.0, 2.0);
        for seed in 0..5 {
            let params = ModelParams::random_in_ball(3, 16, 4, c, p, q, seed).unwrap();
            let mut rng = seeded_rng(seed + 100);
            let raw = gaussian_vector(&mut rng, 4);
            let x = raw.scale(c / raw.norm2());
            let trace = forward(&params, &x).unwrap();
            for (i, norm) in hidden_state_norms(&trace, q).iter().enumerate() {
                let bound = (2.0 * ACTIVATION_DERIV_BOUND * c).powi(i as i32 + 1) * c;
                assert!(norm <= &bound, "layer {i}: {norm} > {bound}");
            }
        }
    }

    #[test]
    fn project_to_ball_caps_blocks() {
        let (p, q) = (2.0, f64::INFINITY);
        let params = small_params(31, 3, 6, 3);
        let c_small = 0.25;
        let projected = params.project_to_ball(c_small, p, q).unwrap();
        assert!(projected.block_norm(p, q).unwrap() <= c_small + 1e-12);

        // Already-inside params are untouched.
        let wide = params.project_to_ball(1e6, p, q).unwrap();
        assert_eq!(wide, params);
    }

    #[test]
    fn project_to_ball_scales_single_violating_block() {
        let c = 1.0;
        let mut params = ModelParams::zeros(3, 4, 2);
        // Middle block with (2,mean)->(2,mean) norm 2c: identity * 2c
        // (square mean factor is 1, spectral norm 2c).
        let w1 = Matrix::from_fn(4, 4, |r, cc| if r == cc { 2.0 * c } else { 0.0 });
        params = ModelParams::new(
            vec![params.weight(0).clone(), w1, params.weight(2).clone()],
            params.biases().to_vec(),
        )
        .unwrap();
        let projected = params.project_to_ball(c, 2.0, 2.0).unwrap();
        let half = projected.weight(1).get(0, 0);
        assert!((half - c).abs() < 1e-12, "expected halving, got {half}");
        assert!(projected.weight(0).is_zero());
    }

    #[test]
    fn bytes_round_trip_bit_exact() {
        let params = small_params(41, 4, 5, 3);
        let bytes = params.to_bytes();
        let back = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(params, back);
        for (a, b) in params
            .weights()
            .iter()
            .zip(back.weights())
            .flat_map(|(x, y)| x.as_slice().iter().zip(y.as_slice()))
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn from_bytes_rejects_garbage() {
        assert!(ModelParams::from_bytes(b"nope").is_err());
        let params = ModelParams::zeros(2, 3, 2);
        let mut bytes = params.to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(ModelParams::from_bytes(&bytes).is_err());
        let mut bytes = params.to_bytes();
        bytes.push(0);
        assert!(ModelParams::from_bytes(&bytes).is_err());
    }

    #[test]
    fn random_in_ball_is_inside_and_nontrivial() {
        for &(p, q) in &[(2.0, 2.0), (1.0, 2.0), (2.0, f64::INFINITY)] {
            let params = ModelParams::random_in_ball(3, 12, 4, 2.0, p, q, 7).unwrap();
            let bn = params.block_norm(p, q).unwrap();
            assert!(bn <= 2.0 + 1e-12);
            assert!(bn >= 0.4, "suspiciously small block norm {bn}");
        }
    }

    #[test]
    fn log_cosh_large_arguments() {
        assert!((log_cosh(15.0) - 14.306852819440149).abs() < 1e-12);
        assert!((log_cosh(-2.0) - 1.3250027473578645).abs() < 1e-14);
        assert!(log_cosh(1e8).is_finite());
        assert_eq!(log_cosh(0.0), 0.0);
    }
}

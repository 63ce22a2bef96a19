//! Geometry-aware steepest descent with momentum, plus SignSGD, AdamW, and
//! Muon baselines.
//!
//! Every step keeps the exponential moving average
//! `M^t = beta1 M^{t-1} + (1 - beta1) G` and builds the update from the
//! lookahead momentum `Mt = beta2 M^{t-1} + (1 - beta2) G`, formed from the
//! pre-update buffer. Weight blocks move along the normalized steepest
//! descent direction of `Mt` times the width-aware scale of their role;
//! vector blocks take sign steps. Decoupled weight decay
//! `theta <- (1 - lr * lambda) theta` is applied before the step and is off
//! by default. No bias correction is applied to the moving averages of the
//! geometry steps (AdamW keeps its usual corrections).
//!
//! Step functions are pure: they return the updated parameters and state and
//! leave their inputs untouched, so identical seeds and configs give
//! bit-identical trajectories.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::geometry::{
    descent_direction, newton_schulz_sign_with, role_rule, GeometryError, GeometrySpec, NsSchedule,
    ParamRole, RoleKind,
};
use crate::linalg::Matrix;
use crate::network::{ModelParams, NetworkError, Perturbation};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimizerError {
    #[error("schedule step {t} outside 0..={total_steps}")]
    LrOutOfRange { t: usize, total_steps: usize },
    #[error("gradient contains NaN; state left unmodified")]
    NanGradient,
    #[error("expected {expected} weight roles, got {got}")]
    RoleCount { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Update rule selector.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Method {
    /// Row-normalized steepest descent under `(p,mean) -> inf`.
    MogaRow { p: f64 },
    /// Column-normalized steepest descent under `(1,mean) -> (q,mean)`.
    MogaCol { q: f64 },
    /// Sign steps with the `1/d_in` width scale on weights.
    SignSgd,
    /// Bias-corrected AdamW with decoupled decay.
    AdamW,
    /// Newton-Schulz orthogonalized update under the spectral geometry.
    Muon,
}

impl Method {
    /// The base descent geometry of the method, if it has one.
    pub fn base_geometry(&self) -> Option<GeometrySpec> {
        match *self {
            Method::MogaRow { p } => Some(GeometrySpec::rownorm(p)),
            Method::MogaCol { q } => Some(GeometrySpec::colnorm(q)),
            Method::SignSgd => Some(GeometrySpec::sign()),
            Method::Muon => Some(GeometrySpec::spectral()),
            Method::AdamW => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimizerConfig {
    pub method: Method,
    pub lr_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub total_steps: usize,
    pub ns_iters: usize,
    pub adam_eps: f64,
    /// Use the `sqrt(max(d_out, d_in))` Muon multiplier instead of
    /// `sqrt(d_in / d_out)`. Both rules appear in practice; neither is a
    /// resolved default, so the choice is explicit.
    pub muon_max_dim_scale: bool,
    /// Ablation switch: when false, weight blocks use unit scale instead of
    /// the width-aware factor. Leave on outside of transfer ablations.
    pub width_scaling: bool,
}

impl OptimizerConfig {
    pub fn new(method: Method, lr_max: f64, total_steps: usize) -> Self {
        assert!(lr_max > 0.0 && total_steps >= 1);
        Self {
            method,
            lr_max,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            warmup_frac: 0.1,
            total_steps,
            ns_iters: 10,
            adam_eps: 1e-8,
            muon_max_dim_scale: false,
            width_scaling: true,
        }
    }

    pub fn with_momentum(mut self, beta1: f64, beta2: f64) -> Self {
        assert!((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2));
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn with_weight_decay(mut self, lambda: f64) -> Self {
        assert!(lambda >= 0.0);
        self.weight_decay = lambda;
        self
    }
}

/// Momentum buffers and step counter. `second_moment` is present for AdamW
/// only.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: Perturbation,
    pub second_moment: Option<Perturbation>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, method: Method) -> Self {
        Self {
            momentum: Perturbation::zeros_like(params),
            second_moment: matches!(method, Method::AdamW)
                .then(|| Perturbation::zeros_like(params)),
            step: 0,
        }
    }
}

/// Learning rate at schedule position `t` in `0..=total_steps`: linear
/// warmup from 0 to `lr_max` over `warmup_frac` of the steps, then cosine
/// decay to the terminal rate `lr_max / 10`.
pub fn lr_at(config: &OptimizerConfig, t: usize) -> Result<f64, OptimizerError> {
    if t > config.total_steps {
        return Err(OptimizerError::LrOutOfRange {
            t,
            total_steps: config.total_steps,
        });
    }
    let warmup = (config.warmup_frac * config.total_steps as f64).round() as usize;
    if t < warmup {
        return Ok(config.lr_max * t as f64 / warmup as f64);
    }
    let lr_min = config.lr_max / 10.0;
    if config.total_steps == warmup {
        return Ok(config.lr_max);
    }
    let progress = (t - warmup) as f64 / (config.total_steps - warmup) as f64;
    Ok(lr_min + 0.5 * (config.lr_max - lr_min) * (1.0 + (core::f64::consts::PI * progress).cos()))
}

/// Weight-block roles matching the feedforward shapes: hidden everywhere,
/// output for the last layer.
pub fn default_roles(params: &ModelParams) -> Vec<ParamRole> {
    let k = params.depth();
    params
        .weights()
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let kind = if i + 1 == k {
                RoleKind::OutputWeight
            } else {
                RoleKind::HiddenWeight
            };
            ParamRole::new(kind, w.cols(), w.rows())
        })
        .collect()
}

struct StepPlan {
    lr: f64,
    momentum_new: Perturbation,
    lookahead: Perturbation,
}

fn prepare_step(
    params: &ModelParams,
    grad: &Perturbation,
    state: &OptimizerState,
    config: &OptimizerConfig,
    roles: &[ParamRole],
) -> Result<StepPlan, OptimizerError> {
    grad.check_shapes(params)?;
    if grad.has_nan() {
        return Err(OptimizerError::NanGradient);
    }
    if roles.len() != params.depth() {
        return Err(OptimizerError::RoleCount {
            expected: params.depth(),
            got: roles.len(),
        });
    }
    let lr = lr_at(config, state.step + 1)?;
    let momentum_new = state.momentum.scale(config.beta1).add_scaled(1.0 - config.beta1, grad);
    let lookahead = state.momentum.scale(config.beta2).add_scaled(1.0 - config.beta2, grad);
    Ok(StepPlan {
        lr,
        momentum_new,
        lookahead,
    })
}

fn decayed(block: &Matrix, lr: f64, lambda: f64) -> Matrix {
    if lambda > 0.0 {
        block.scale(1.0 - lr * lambda)
    } else {
        block.clone()
    }
}

// Shared implementation of the geometry steps (row, column, sign): weight
// blocks move along role_rule directions of the lookahead momentum, biases
// take sign steps.
fn geometry_step(
    params: &ModelParams,
    grad: &Perturbation,
    state: &OptimizerState,
    config: &OptimizerConfig,
    roles: &[ParamRole],
    base: &GeometrySpec,
) -> Result<(ModelParams, OptimizerState), OptimizerError> {
    let plan = prepare_step(params, grad, state, config, roles)?;
    let lambda = config.weight_decay;

    let mut weights = Vec::with_capacity(params.depth());
    for (i, w) in params.weights().iter().enumerate() {
        let (dir_spec, scale) = role_rule(&roles[i], base)?;
        let scale = if config.width_scaling { scale } else { 1.0 };
        let direction = descent_direction(&plan.lookahead.dweights[i], &dir_spec)?;
        weights.push(decayed(w, plan.lr, lambda).add_scaled(plan.lr * scale, &direction));
    }
    let biases = updated_biases(params, &plan, lambda);

    Ok((
        ModelParams::new(weights, biases)?,
        OptimizerState {
            momentum: plan.momentum_new,
            second_moment: None,
            step: state.step + 1,
        },
    ))
}

fn updated_biases(
    params: &ModelParams,
    plan: &StepPlan,
    lambda: f64,
) -> Vec<crate::linalg::Vector> {
    params
        .biases()
        .iter()
        .zip(&plan.lookahead.dbiases)
        .map(|(b, mb)| {
            let decayed = if lambda > 0.0 {
                b.scale(1.0 - plan.lr * lambda)
            } else {
                b.clone()
            };
            crate::linalg::Vector::from_fn(b.len(), |j| {
                let s = if mb[j] > 0.0 {
                    1.0
                } else if mb[j] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                decayed[j] - plan.lr * s
            })
        })
        .collect()
}

/// One step of the geometry-aware optimizer (row or column normalization per
/// `config.method`, sign if so configured).
pub fn moga_step(
    params: &ModelParams,
    grad: &Perturbation,
    state: &OptimizerState,
    config: &OptimizerConfig,
    roles: &[ParamRole],
) -> Result<(ModelParams, OptimizerState), OptimizerError> {
    let base = config
        .method
        .base_geometry()
        .expect("moga_step requires a geometry method");
    geometry_step(params, grad, state, config, roles, &base)
}

/// One SignSGD-with-momentum step: sign directions with the `1/d_in` weight
/// scale (identical to the geometry step under the sign base).
pub fn signsgd_step(
    params: &ModelParams,
    grad: &Perturbation,
    state: &OptimizerState,
    config: &OptimizerConfig,
    roles: &[ParamRole],
) -> Result<(ModelParams, OptimizerState), OptimizerError> {
    geometry_step(params, grad, state, config, roles, &GeometrySpec::sign())
}

/// One Muon step: Newton-Schulz orthogonalized lookahead momentum per weight
/// block, with the `sqrt(d_in/d_out)` scale (or the `sqrt(max)` variant),
/// sign steps on biases.
pub fn muon_step(
    params: &ModelParams,
    grad: &Perturbation,
    state: &OptimizerState,
    config: &OptimizerConfig,
    roles: &[ParamRole],
) -> Result<(ModelParams, OptimizerState), OptimizerError> {
    let plan = prepare_step(params, grad, state, config, roles)?;
    let lambda = config.weight_decay;

    let mut weights = Vec::with_capacity(params.depth());
    for (i, w) in params.weights().iter().enumerate() {
        let role = &roles[i];
        let scale = if !config.width_scaling {
            1.0
        } else if config.muon_max_dim_scale {
            (role.d_out.max(role.d_in) as f64).sqrt()
        } else {
            (role.d_in as f64 / role.d_out as f64).sqrt()
        };
        let ortho = newton_schulz_sign_with(
            &plan.lookahead.dweights[i],
            config.ns_iters.max(1),
            NsSchedule::Tuned,
        );
        weights.push(decayed(w, plan.lr, lambda).add_scaled(-plan.lr * scale, &ortho.sign));
    }
    let biases = updated_biases(params, &plan, lambda);

    Ok((
        ModelParams::new(weights, biases)?,
        OptimizerState {
            momentum: plan.momentum_new,
            second_moment: None,
            step: state.step + 1,
        },
    ))
}

/// One AdamW step with the usual bias corrections and decoupled decay.
pub fn adamw_step(
    params: &ModelParams,
    grad: &Perturbation,
    state: &OptimizerState,
    config: &OptimizerConfig,
) -> Result<(ModelParams, OptimizerState), OptimizerError> {
    grad.check_shapes(params)?;
    if grad.has_nan() {
        return Err(OptimizerError::NanGradient);
    }
    let t = state.step + 1;
    let lr = lr_at(config, t)?;
    let (b1, b2) = (config.beta1, config.beta2);
    let eps = config.adam_eps;
    let lambda = config.weight_decay;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);

    let zero = Perturbation::zeros_like(params);
    let second_prev = state.second_moment.as_ref().unwrap_or(&zero);
    let momentum_new = state.momentum.scale(b1).add_scaled(1.0 - b1, grad);
    let mut second_new = second_prev.scale(b2);
    for (v, g) in second_new
        .dweights
        .iter_mut()
        .zip(&grad.dweights)
        .map(|(v, g)| (v.as_mut_slice(), g.as_slice()))
        .chain(
            second_new
                .dbiases
                .iter_mut()
                .zip(&grad.dbiases)
                .map(|(v, g)| (v.as_mut_slice(), g.as_slice())),
        )
    {
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj += (1.0 - b2) * gj * gj;
        }
    }

    let adam_update = |param: &[f64], m: &[f64], v: &[f64], out: &mut [f64]| {
        for j in 0..param.len() {
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            let base = if lambda > 0.0 {
                param[j] * (1.0 - lr * lambda)
            } else {
                param[j]
            };
            out[j] = base - lr * mhat / (vhat.sqrt() + eps);
        }
    };

    let mut weights = Vec::with_capacity(params.depth());
    let mut biases = Vec::with_capacity(params.depth());
    for i in 0..params.depth() {
        let w = params.weight(i);
        let mut neww = Matrix::zeros(w.rows(), w.cols());
        adam_update(
            w.as_slice(),
            momentum_new.dweights[i].as_slice(),
            second_new.dweights[i].as_slice(),
            neww.as_mut_slice(),
        );
        weights.push(neww);
        let b = params.bias(i);
        let mut newb = crate::linalg::Vector::zeros(b.len());
        adam_update(
            b.as_slice(),
            momentum_new.dbiases[i].as_slice(),
            second_new.dbiases[i].as_slice(),
            newb.as_mut_slice(),
        );
        biases.push(newb);
    }

    Ok((
        ModelParams::new(weights, biases)?,
        OptimizerState {
            momentum: momentum_new,
            second_moment: Some(second_new),
            step: t,
        },
    ))
}

/// Dispatch on `config.method`.
pub fn step(
    params: &ModelParams,
    grad: &Perturbation,
    state: &OptimizerState,
    config: &OptimizerConfig,
    roles: &[ParamRole],
) -> Result<(ModelParams, OptimizerState), OptimizerError> {
    match config.method {
        Method::MogaRow { .. } | Method::MogaCol { .. } => {
            moga_step(params, grad, state, config, roles)
        }
        Method::SignSgd => signsgd_step(params, grad, state, config, roles),
        Method::Muon => muon_step(params, grad, state, config, roles),
        Method::AdamW => adamw_step(params, grad, state, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{seeded_rng, Vector};
    use alloc::vec;

    fn config(method: Method) -> OptimizerConfig {
        OptimizerConfig::new(method, 0.1, 10)
    }

    fn toy_params() -> ModelParams {
        ModelParams::random_in_ball(2, 4, 2, 2.0, 2.0, 2.0, 5).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = OptimizerConfig::new(Method::SignSgd, 0.4, 100);
        assert_eq!(lr_at(&cfg, 0).unwrap(), 0.0);
        assert_eq!(lr_at(&cfg, 10).unwrap(), 0.4);
        let terminal = lr_at(&cfg, 100).unwrap();
        assert!((terminal - 0.04).abs() < 1e-15);
        assert!(lr_at(&cfg, 101).is_err());
        // Monotone up through warmup, down after.
        let mut prev = 0.0;
        for t in 0..=10 {
            let lr = lr_at(&cfg, t).unwrap();
            assert!(lr >= prev);
            prev = lr;
        }
        for t in 10..100 {
            assert!(lr_at(&cfg, t + 1).unwrap() <= lr_at(&cfg, t).unwrap() + 1e-15);
        }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let params = toy_params();
        let grad = Perturbation::zeros_like(&params);
        let state = OptimizerState::new(&params, Method::MogaRow { p: 2.0 });
        let cfg = config(Method::MogaRow { p: 2.0 }).with_weight_decay(0.5);
        let roles = default_roles(&params);
        let (next, _) = moga_step(&params, &grad, &state, &cfg, &roles).unwrap();
        let lr = lr_at(&cfg, 1).unwrap();
        let shrink = 1.0 - lr * 0.5;
        for (w0, w1) in params.weights().iter().zip(next.weights()) {
            for (a, b) in w0.as_slice().iter().zip(w1.as_slice()) {
                assert!((b - a * shrink).abs() < 1e-15);
            }
        }
        for (b0, b1) in params.biases().iter().zip(next.biases()) {
            for (a, b) in b0.as_slice().iter().zip(b1.as_slice()) {
                assert!((b - a * shrink).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn momentum_off_uses_raw_gradient_direction() {
        let params = toy_params();
        let mut rng = seeded_rng(7);
        let grad = Perturbation::gaussian(&params, &mut rng);
        let state = OptimizerState::new(&params, Method::MogaRow { p: 2.0 });
        let cfg = config(Method::MogaRow { p: 2.0 }).with_momentum(0.0, 0.0);
        let roles = default_roles(&params);
        let (next, _) = moga_step(&params, &grad, &state, &cfg, &roles).unwrap();
        // Scale invariance: multiplying the gradient by c > 0 leaves the
        // normalized update unchanged.
        let (next_scaled, _) =
            moga_step(&params, &grad.scale(42.0), &state, &cfg, &roles).unwrap();
        for (a, b) in next
            .weights()
            .iter()
            .zip(next_scaled.weights())
            .flat_map(|(x, y)| x.as_slice().iter().zip(y.as_slice()))
        {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn lookahead_uses_pre_update_momentum() {
        // With beta1 = 0 the momentum buffer becomes the fresh gradient, so
        // a lookahead built from the POST-update buffer would be the
        // gradient itself. Choose M^{t-1} and G with opposite signs so the
        // two conventions move the weight in opposite directions.
        let params = ModelParams::zeros(2, 1, 1);
        let mut state = OptimizerState::new(&params, Method::SignSgd);
        state.momentum.dweights[0].set(0, 0, 4.0);
        let mut grad = Perturbation::zeros_like(&params);
        grad.dweights[0].set(0, 0, -2.0);
        // Correct lookahead: 0.5 * 4 + 0.5 * (-2) = +1 -> weight decreases.
        // Post-update lookahead would be -2 -> weight increases.
        let cfg = config(Method::SignSgd).with_momentum(0.0, 0.5);
        let roles = default_roles(&params);
        let (next, new_state) = signsgd_step(&params, &grad, &state, &cfg, &roles).unwrap();
        assert!(next.weight(0).get(0, 0) < 0.0, "lookahead must use M^(t-1)");
        // Momentum buffer is the EMA of the gradient, independent of the
        // lookahead channel.
        assert_eq!(new_state.momentum.dweights[0].get(0, 0), -2.0);
    }

    #[test]
    fn nan_gradient_rejected() {
        let params = toy_params();
        let mut grad = Perturbation::zeros_like(&params);
        grad.dweights[0].as_mut_slice()[0] = f64::NAN;
        let state = OptimizerState::new(&params, Method::SignSgd);
        let cfg = config(Method::SignSgd);
        let roles = default_roles(&params);
        assert!(matches!(
            signsgd_step(&params, &grad, &state, &cfg, &roles),
            Err(OptimizerError::NanGradient)
        ));
    }

    #[test]
    fn signsgd_weight_magnitude_is_mu_p_scaled() {
        // d_in = 256 hidden block: per-entry update magnitude lr / 256.
        let params = ModelParams::random_in_ball(2, 256, 256, 2.0, 2.0, 2.0, 9).unwrap();
        let mut rng = seeded_rng(10);
        let grad = Perturbation::gaussian(&params, &mut rng);
        let state = OptimizerState::new(&params, Method::SignSgd);
        let cfg = config(Method::SignSgd).with_momentum(0.0, 0.0);
        let roles = default_roles(&params);
        let (next, _) = signsgd_step(&params, &grad, &state, &cfg, &roles).unwrap();
        let lr = lr_at(&cfg, 1).unwrap();
        let expected = lr / 256.0;
        let w0 = params.weight(0);
        let w1 = next.weight(0);
        for (a, b) in w0.as_slice().iter().zip(w1.as_slice()) {
            let diff = (b - a).abs();
            assert!((diff - expected).abs() < 1e-15, "diff {diff}");
        }
    }

    #[test]
    fn moga_sign_equals_signsgd_exactly() {
        let params = toy_params();
        let mut rng = seeded_rng(11);
        let grad = Perturbation::gaussian(&params, &mut rng);
        let state = OptimizerState::new(&params, Method::SignSgd);
        let cfg = config(Method::SignSgd);
        let roles = default_roles(&params);
        let (a, _) = signsgd_step(&params, &grad, &state, &cfg, &roles).unwrap();
        let (b, _) = geometry_step(&params, &grad, &state, &cfg, &roles, &GeometrySpec::sign())
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn muon_square_block_unit_scale_and_orthogonal_fixed_point() {
        // Orthogonal lookahead: the update direction is -Mt itself.
        let n = 8;
        let params = ModelParams::random_in_ball(2, n, n, 2.0, 2.0, 2.0, 13).unwrap();
        let mut grad = Perturbation::zeros_like(&params);
        // Build an orthogonal gradient block for layer 0 (rotation blocks).
        for i in (0..n).step_by(2) {
            let (c, s) = (0.9_f64.cos(), 0.9_f64.sin());
            grad.dweights[0].set(i, i, c);
            grad.dweights[0].set(i, i + 1, -s);
            grad.dweights[0].set(i + 1, i, s);
            grad.dweights[0].set(i + 1, i + 1, c);
        }
        let state = OptimizerState::new(&params, Method::Muon);
        let cfg = config(Method::Muon).with_momentum(0.0, 0.0);
        let roles = default_roles(&params);
        let (next, _) = muon_step(&params, &grad, &state, &cfg, &roles).unwrap();
        let lr = lr_at(&cfg, 1).unwrap();
        // scale = sqrt(n/n) = 1; W1 <- W1 - lr * Q.
        for r in 0..n {
            for c in 0..n {
                let expect = params.weight(0).get(r, c) - lr * grad.dweights[0].get(r, c);
                let got = next.weight(0).get(r, c);
                assert!((got - expect).abs() < 1e-6, "({r},{c}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn adamw_rmsprop_limit_is_sign_step() {
        // beta1 = 0, beta2 -> 0, eps -> 0 on a single coordinate: the update
        // approaches lr * sign(g).
        let params = ModelParams::zeros(2, 1, 1);
        let mut grad = Perturbation::zeros_like(&params);
        grad.dweights[0].set(0, 0, -3.7);
        let mut cfg = config(Method::AdamW).with_momentum(0.0, 0.0);
        cfg.adam_eps = 0.0;
        cfg.beta2 = 1e-12;
        let state = OptimizerState::new(&params, Method::AdamW);
        let (next, _) = adamw_step(&params, &grad, &state, &cfg).unwrap();
        let lr = lr_at(&cfg, 1).unwrap();
        let got = next.weight(0).get(0, 0);
        assert!((got - lr).abs() < 1e-9, "expected +lr (sign of -g), got {got}");
    }

    #[test]
    fn adamw_zero_gradient_zero_moments_only_decays() {
        let params = toy_params();
        let grad = Perturbation::zeros_like(&params);
        let state = OptimizerState::new(&params, Method::AdamW);
        let cfg = config(Method::AdamW).with_weight_decay(0.1);
        let (next, _) = adamw_step(&params, &grad, &state, &cfg).unwrap();
        let lr = lr_at(&cfg, 1).unwrap();
        for (a, b) in params
            .weights()
            .iter()
            .zip(next.weights())
            .flat_map(|(x, y)| x.as_slice().iter().zip(y.as_slice()))
        {
            assert!((b - a * (1.0 - lr * 0.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn trajectories_bounded_under_decay() {
        // With decay on, per-block norms stay below max(initial, 1/lambda)
        // since every scaled update has unit block norm.
        let (p, q) = (2.0, f64::INFINITY);
        let params0 = ModelParams::random_in_ball(3, 8, 4, 2.0, p, q, 21).unwrap();
        let lambda = 0.05;
        let cfg = OptimizerConfig::new(Method::MogaRow { p }, 0.5, 1000)
            .with_weight_decay(lambda)
            .with_momentum(0.9, 0.95);
        let roles = default_roles(&params0);
        let mut params = params0.clone();
        let mut state = OptimizerState::new(&params, cfg.method);
        let mut rng = seeded_rng(22);
        let bound = params0.block_norm(p, q).unwrap().max(1.0 / lambda) * (1.0 + 1e-9);
        for _ in 0..1000 {
            let grad = Perturbation::gaussian(&params, &mut rng);
            let (next, next_state) = moga_step(&params, &grad, &state, &cfg, &roles).unwrap();
            params = next;
            state = next_state;
            let bn = params.block_norm(p, q).unwrap();
            assert!(bn <= bound, "block norm {bn} exceeded bound {bound}");
        }
    }

    #[test]
    fn deterministic_trajectories() {
        let params = toy_params();
        let cfg = config(Method::MogaRow { p: 2.0 });
        let roles = default_roles(&params);
        let run = || {
            let mut p = params.clone();
            let mut s = OptimizerState::new(&p, cfg.method);
            let mut rng = seeded_rng(99);
            for _ in 0..5 {
                let g = Perturbation::gaussian(&p, &mut rng);
                let (np, ns) = moga_step(&p, &g, &s, &cfg, &roles).unwrap();
                p = np;
                s = ns;
            }
            p
        };
        let a = run();
        let b = run();
        for (x, y) in a
            .weights()
            .iter()
            .zip(b.weights())
            .flat_map(|(m, n)| m.as_slice().iter().zip(n.as_slice()))
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn role_count_validated() {
        let params = toy_params();
        let grad = Perturbation::zeros_like(&params);
        let state = OptimizerState::new(&params, Method::SignSgd);
        let cfg = config(Method::SignSgd);
        let roles = vec![default_roles(&params)[0]];
        assert!(matches!(
            signsgd_step(&params, &grad, &state, &cfg, &roles),
            Err(OptimizerError::RoleCount {
                expected: 2,
                got: 1
            })
        ));
    }
}

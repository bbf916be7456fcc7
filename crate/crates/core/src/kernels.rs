//! Covariance functions, gram matrices, and the sparse inducing-point
//! quantities the rest of the crate consumes.
//!
//! Four leaf kernels (Wiener, Ornstein-Uhlenbeck, squared exponential,
//! Cauchy) plus sum/product combinators. Times are expected on the
//! normalized [ε, 1] scale produced by the corpus module; the Wiener
//! kernel requires strictly nonnegative times.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declarative description of a covariance function κ.
///
/// Serializes to/from a nested key-value fragment, e.g.
/// `{ variant = "ou", sigma2 = 1.0, length_scale = 0.1 }`; combinators
/// nest `left`/`right`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KernelSpec {
    /// κ(τ,τ′) = σ²·min(τ,τ′), the Brownian-motion kernel. Requires τ ≥ 0.
    Wiener { sigma2: f64 },
    /// κ(τ,τ′) = σ²·exp(−|τ−τ′|/l), mean-reverting dynamics.
    #[serde(rename = "ou", alias = "ornstein_uhlenbeck")]
    OrnsteinUhlenbeck { sigma2: f64, length_scale: f64 },
    /// κ(τ,τ′) = σ²·exp(−(τ−τ′)²/(2l²)), smooth short-memory trajectories.
    #[serde(rename = "se", alias = "squared_exponential", alias = "rbf")]
    SquaredExponential { sigma2: f64, length_scale: f64 },
    /// κ(τ,τ′) = σ²·(1 + (τ−τ′)²/l²)⁻¹, polynomially decaying long-range memory.
    Cauchy { sigma2: f64, length_scale: f64 },
    /// Pointwise sum of two kernels.
    Sum {
        left: Box<KernelSpec>,
        right: Box<KernelSpec>,
    },
    /// Pointwise product of two kernels.
    Product {
        left: Box<KernelSpec>,
        right: Box<KernelSpec>,
    },
}

impl KernelSpec {
    pub fn wiener(sigma2: f64) -> Self {
        KernelSpec::Wiener { sigma2 }
    }

    pub fn ou(sigma2: f64, length_scale: f64) -> Self {
        KernelSpec::OrnsteinUhlenbeck { sigma2, length_scale }
    }

    pub fn se(sigma2: f64, length_scale: f64) -> Self {
        KernelSpec::SquaredExponential { sigma2, length_scale }
    }

    pub fn cauchy(sigma2: f64, length_scale: f64) -> Self {
        KernelSpec::Cauchy { sigma2, length_scale }
    }

    pub fn sum(left: KernelSpec, right: KernelSpec) -> Self {
        KernelSpec::Sum {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn product(left: KernelSpec, right: KernelSpec) -> Self {
        KernelSpec::Product {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    /// Short human-readable name used in error messages.
    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Wiener { .. } => "wiener",
            KernelSpec::OrnsteinUhlenbeck { .. } => "ou",
            KernelSpec::SquaredExponential { .. } => "se",
            KernelSpec::Cauchy { .. } => "cauchy",
            KernelSpec::Sum { .. } => "sum",
            KernelSpec::Product { .. } => "product",
        }
    }

    /// Checks σ² > 0 and l > 0 on every leaf.
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Wiener { sigma2 } => {
                if !(*sigma2 > 0.0) {
                    return Err(Error::InvalidKernel(format!(
                        "wiener requires sigma2 > 0, got {sigma2}"
                    )));
                }
            }
            KernelSpec::OrnsteinUhlenbeck { sigma2, length_scale }
            | KernelSpec::SquaredExponential { sigma2, length_scale }
            | KernelSpec::Cauchy { sigma2, length_scale } => {
                if !(*sigma2 > 0.0) {
                    return Err(Error::InvalidKernel(format!(
                        "{} requires sigma2 > 0, got {sigma2}",
                        self.name()
                    )));
                }
                if !(*length_scale > 0.0) {
                    return Err(Error::InvalidKernel(format!(
                        "{} requires length_scale > 0, got {length_scale}",
                        self.name()
                    )));
                }
            }
            KernelSpec::Sum { left, right } | KernelSpec::Product { left, right } => {
                left.validate()?;
                right.validate()?;
            }
        }
        Ok(())
    }

    fn eval_unchecked(&self, tau: f64, tau_prime: f64) -> Result<f64> {
        match self {
            KernelSpec::Wiener { sigma2 } => {
                if tau < 0.0 || tau_prime < 0.0 {
                    return Err(Error::Domain(format!(
                        "wiener kernel requires nonnegative times, got ({tau}, {tau_prime})"
                    )));
                }
                Ok(sigma2 * tau.min(tau_prime))
            }
            KernelSpec::OrnsteinUhlenbeck { sigma2, length_scale } => {
                Ok(sigma2 * (-(tau - tau_prime).abs() / length_scale).exp())
            }
            KernelSpec::SquaredExponential { sigma2, length_scale } => {
                let d = tau - tau_prime;
                Ok(sigma2 * (-d * d / (2.0 * length_scale * length_scale)).exp())
            }
            KernelSpec::Cauchy { sigma2, length_scale } => {
                let d = tau - tau_prime;
                Ok(sigma2 / (1.0 + d * d / (length_scale * length_scale)))
            }
            KernelSpec::Sum { left, right } => {
                Ok(left.eval_unchecked(tau, tau_prime)? + right.eval_unchecked(tau, tau_prime)?)
            }
            KernelSpec::Product { left, right } => {
                Ok(left.eval_unchecked(tau, tau_prime)? * right.eval_unchecked(tau, tau_prime)?)
            }
        }
    }

    /// Evaluates κ(τ, τ′), validating the spec first.
    pub fn eval(&self, tau: f64, tau_prime: f64) -> Result<f64> {
        self.validate()?;
        self.eval_unchecked(tau, tau_prime)
    }
}

/// Free-function form of [`KernelSpec::eval`].
pub fn kernel_eval(spec: &KernelSpec, tau: f64, tau_prime: f64) -> Result<f64> {
    spec.eval(tau, tau_prime)
}

/// Gram matrix with element (i, j) = κ(rows_i, cols_j).
///
/// When `rows` and `cols` are the same sequence the upper triangle is
/// computed and mirrored, so the result is symmetric to bit equality.
pub fn gram_matrix(spec: &KernelSpec, rows: &[f64], cols: &[f64]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let mut out = DMatrix::zeros(rows.len(), cols.len());
    if rows == cols {
        for i in 0..rows.len() {
            for j in i..cols.len() {
                let v = spec.eval_unchecked(rows[i], cols[j])?;
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
    } else {
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                out[(i, j)] = spec.eval_unchecked(r, c)?;
            }
        }
    }
    Ok(out)
}

/// Where to place the inducing timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InducingPlacement {
    /// Empirical quantiles of the training timestamps (default).
    #[default]
    Quantile,
    /// Equidistant grid between the first and last training timestamp.
    Equidistant,
}

/// Picks `count` strictly ascending inducing times from the training times.
pub fn choose_inducing_times(
    train_times: &[f64],
    count: usize,
    placement: InducingPlacement,
) -> Vec<f64> {
    let t = train_times.len();
    if count >= t {
        return train_times.to_vec();
    }
    let mut picked: Vec<f64> = match placement {
        InducingPlacement::Quantile => (0..count)
            .map(|i| {
                let q = i as f64 / (count - 1).max(1) as f64;
                let pos = q * (t - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                let frac = pos - lo as f64;
                train_times[lo] * (1.0 - frac) + train_times[hi] * frac
            })
            .collect(),
        InducingPlacement::Equidistant => {
            let lo = train_times[0];
            let hi = train_times[t - 1];
            (0..count)
                .map(|i| lo + (hi - lo) * i as f64 / (count - 1).max(1) as f64)
                .collect()
        }
    };
    picked.dedup();
    picked
}

/// Precomputed sparse-GP quantities: inverse inducing gram, projection
/// rows A, and the residual variance diagonal k̃.
///
/// Immutable after construction and safe to share across threads.
#[derive(Debug, Clone)]
pub struct InducingKernel {
    pub inducing_times: Vec<f64>,
    pub train_times: Vec<f64>,
    /// (K_T̂T̂ + jitter·I)⁻¹.
    pub kinv: DMatrix<f64>,
    /// Lower-triangular Cholesky factor of the jittered K_T̂T̂.
    pub chol: DMatrix<f64>,
    /// T×T̂ matrix A with row a_t = K_tT̂·K_T̂T̂⁻¹.
    pub proj: DMatrix<f64>,
    /// k̃_t = K_tt − a_t·K_T̂t, clamped at zero.
    pub ktilde: DVector<f64>,
    /// Jitter actually added to the diagonal.
    pub jitter: f64,
}

/// Maximum ×10 escalations after the initial jitter attempt.
const JITTER_RETRIES: usize = 3;

/// Builds the inducing-point quantities for `spec`.
///
/// The T̂×T̂ inducing gram is factored by Cholesky with `jitter` on the
/// diagonal, escalating the jitter ×10 up to three times on failure.
/// Only the diagonal of the residual covariance K̃ is materialized.
pub fn build_inducing(
    spec: &KernelSpec,
    train_times: &[f64],
    inducing_times: &[f64],
    jitter: f64,
) -> Result<InducingKernel> {
    spec.validate()?;
    if jitter < 0.0 {
        return Err(Error::Argument(format!("jitter must be >= 0, got {jitter}")));
    }
    if inducing_times.is_empty() || train_times.is_empty() {
        return Err(Error::Argument("time sequences must be nonempty".into()));
    }
    for times in [train_times, inducing_times] {
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Argument("time sequences must be ascending".into()));
        }
    }

    let khat = gram_matrix(spec, inducing_times, inducing_times)?;
    let t_hat = inducing_times.len();

    let mut chol: Option<Cholesky<f64, nalgebra::Dyn>> = None;
    let mut used_jitter = jitter;
    for attempt in 0..=JITTER_RETRIES {
        used_jitter = jitter * 10f64.powi(attempt as i32);
        let mut jittered = khat.clone();
        for i in 0..t_hat {
            jittered[(i, i)] += used_jitter;
        }
        if let Some(c) = Cholesky::new(jittered) {
            chol = Some(c);
            break;
        }
    }
    let chol = chol.ok_or_else(|| Error::SingularKernel {
        kernel: spec.name().to_string(),
        detail: format!(
            "Cholesky failed for {} inducing times in [{}, {}] after jitter escalation up to {}",
            t_hat,
            inducing_times[0],
            inducing_times[t_hat - 1],
            used_jitter
        ),
    })?;

    let mut kinv = chol.inverse();
    // bitwise symmetry matters downstream: η⁽²⁾ inherits this matrix and
    // is persisted as a packed lower triangle
    for i in 0..kinv.nrows() {
        for j in 0..i {
            kinv[(j, i)] = kinv[(i, j)];
        }
    }
    let cross = gram_matrix(spec, train_times, inducing_times)?; // T × T̂
    let proj = &cross * &kinv;

    let mut ktilde = DVector::zeros(train_times.len());
    for (t, &tau) in train_times.iter().enumerate() {
        let diag = spec.eval_unchecked(tau, tau)?;
        let residual = diag - proj.row(t).dot(&cross.row(t));
        ktilde[t] = residual.max(0.0);
    }

    Ok(InducingKernel {
        inducing_times: inducing_times.to_vec(),
        train_times: train_times.to_vec(),
        kinv,
        chol: chol.l(),
        proj,
        ktilde,
        jitter: used_jitter,
    })
}

impl InducingKernel {
    pub fn num_inducing(&self) -> usize {
        self.inducing_times.len()
    }

    pub fn num_train(&self) -> usize {
        self.train_times.len()
    }

    /// log|K_T̂T̂ + jitter·I| from the Cholesky factor.
    pub fn log_det(&self) -> f64 {
        (0..self.num_inducing())
            .map(|i| self.chol[(i, i)].ln())
            .sum::<f64>()
            * 2.0
    }
}

/// Projection row and residual variance for an arbitrary time τ*.
///
/// Returns (a, k̃*) with a = K_τ*T̂·K_T̂T̂⁻¹ and
/// k̃* = max(0, κ(τ*,τ*) − a·K_T̂τ*).
pub fn cross_row(
    spec: &KernelSpec,
    inducing: &InducingKernel,
    tau_star: f64,
) -> Result<(DVector<f64>, f64)> {
    spec.validate()?;
    let kvec = DVector::from_iterator(
        inducing.num_inducing(),
        inducing
            .inducing_times
            .iter()
            .map(|&ti| spec.eval_unchecked(tau_star, ti))
            .collect::<Result<Vec<_>>>()?,
    );
    let a = &inducing.kinv * &kvec;
    let diag = spec.eval_unchecked(tau_star, tau_star)?;
    let ktilde_star = (diag - a.dot(&kvec)).max(0.0);
    Ok((a, ktilde_star))
}

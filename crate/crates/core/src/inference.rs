//! The variational engine: local coordinate updates (ζ, φ, λ), the ELBO,
//! Euclidean and natural gradients, the SVI step, and the training loop.
//!
//! Update order within a step is ζ → (φ, λ) → global: the Taylor bound is
//! tightened for the batch timestamps before the local fits, and the
//! global natural-gradient step comes last. Document sums are multiplied
//! by D/|batch|; prior and q(u) terms are never scaled.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::corpus::{sample_minibatch, EncodedCorpus, EncodedDoc};
use crate::error::{Error, Result};
use crate::kernels::InducingKernel;
use crate::math::{digamma, ln_gamma, log_sum_exp, softmax_in_place};
use crate::state::{seeded_rng, GlobalState, LocalState, MeanCov, ModelConfig, STREAM_MINIBATCH};

/// Projected means m_kwt = a_t·μ_kw and variances Λ_kwt = a_tᵀΣ_kw a_t,
/// restricted to a set of training time indices.
#[derive(Debug, Clone)]
pub struct ProjectedMoments {
    /// Train-time indices covered, ascending.
    pub time_indices: Vec<usize>,
    slot: HashMap<usize, usize>,
    pub num_topics: usize,
    pub vocab_size: usize,
    /// m, flat layout (k·V + w)·len(time_indices) + slot.
    pub m: Vec<f64>,
    /// Λ, same layout. Nonnegative.
    pub lam: Vec<f64>,
}

impl ProjectedMoments {
    pub fn num_slots(&self) -> usize {
        self.time_indices.len()
    }

    pub fn slot_of(&self, time_index: usize) -> Option<usize> {
        self.slot.get(&time_index).copied()
    }

    #[inline]
    pub fn flat(&self, k: usize, w: usize, slot: usize) -> usize {
        (k * self.vocab_size + w) * self.time_indices.len() + slot
    }

    #[inline]
    pub fn m(&self, k: usize, w: usize, slot: usize) -> f64 {
        self.m[self.flat(k, w, slot)]
    }

    #[inline]
    pub fn lam(&self, k: usize, w: usize, slot: usize) -> f64 {
        self.lam[self.flat(k, w, slot)]
    }
}

/// Computes m and Λ from derived (μ, Σ) for exactly the requested times.
pub fn project_moments(
    mc: &MeanCov,
    inducing: &InducingKernel,
    times: &[usize],
) -> Result<ProjectedMoments> {
    let nt = times.len();
    let k_topics = mc.num_topics;
    let v = mc.vocab_size;
    for &t in times {
        if t >= inducing.num_train() {
            return Err(Error::Argument(format!(
                "time index {t} out of range for {} training times",
                inducing.num_train()
            )));
        }
    }
    let rows: Vec<DVector<f64>> = times
        .iter()
        .map(|&t| inducing.proj.row(t).transpose())
        .collect();
    let mut m = vec![0.0; k_topics * v * nt];
    let mut lam = vec![0.0; k_topics * v * nt];
    let slot: HashMap<usize, usize> = times.iter().enumerate().map(|(j, &t)| (t, j)).collect();
    for k in 0..k_topics {
        for w in 0..v {
            let i = k * v + w;
            let mu = &mc.mu[i];
            let sigma = &mc.sigma[i];
            for (j, a) in rows.iter().enumerate() {
                let base = i * nt + j;
                m[base] = a.dot(mu);
                lam[base] = (sigma * a).dot(a).max(0.0);
            }
        }
    }
    Ok(ProjectedMoments {
        time_indices: times.to_vec(),
        slot,
        num_topics: k_topics,
        vocab_size: v,
        m,
        lam,
    })
}

/// Closed-form Taylor-location update
/// ζ_kt = Σ_w exp(m_kwt + ½(Λ_kwt + k̃_t)), stored as log ζ, for the
/// times covered by `moments` only.
pub fn update_zeta(state: &mut GlobalState, moments: &ProjectedMoments, inducing: &InducingKernel) {
    let v = moments.vocab_size;
    let mut terms = vec![0.0; v];
    for k in 0..moments.num_topics {
        for (j, &t) in moments.time_indices.iter().enumerate() {
            let kt = inducing.ktilde[t];
            for (w, term) in terms.iter_mut().enumerate() {
                *term = moments.m(k, w, j) + 0.5 * (moments.lam(k, w, j) + kt);
            }
            state.log_zeta[(k, t)] = log_sum_exp(&terms);
        }
    }
}

/// One φ update for every distinct word of a document:
/// φ_dwk ∝ exp{m_kwt − log ζ_kt + ψ(λ_k) − ψ(λ₀)}.
pub fn update_phi(
    doc: &EncodedDoc,
    state: &GlobalState,
    moments: &ProjectedMoments,
    lambda: &DVector<f64>,
) -> Vec<(u32, DVector<f64>)> {
    let k_topics = state.num_topics;
    let t = doc.time_index;
    let j = moments
        .slot_of(t)
        .expect("projected moments must cover the document's timestamp");
    let lambda0: f64 = lambda.sum();
    let dig0 = digamma(lambda0);
    let dig: Vec<f64> = lambda.iter().map(|&l| digamma(l) - dig0).collect();
    doc.counts
        .iter()
        .map(|&(w, _)| {
            let mut scores: Vec<f64> = (0..k_topics)
                .map(|k| moments.m(k, w as usize, j) - state.log_zeta[(k, t)] + dig[k])
                .collect();
            softmax_in_place(&mut scores);
            (w, DVector::from_vec(scores))
        })
        .collect()
}

/// Closed-form λ update: λ_k = α_k + Σ_w n_dw·φ_dwk.
pub fn update_lambda(
    doc: &EncodedDoc,
    phi: &[(u32, DVector<f64>)],
    alpha: &DVector<f64>,
) -> DVector<f64> {
    let mut lambda = alpha.clone();
    for (&(_, ref row), &(_, n)) in phi.iter().zip(&doc.counts) {
        lambda.axpy(n as f64, row, 1.0);
    }
    lambda
}

/// Alternates φ/λ updates from λ = α + (N_d/K)·1 until the mean absolute
/// change in λ drops below `local_tol` or `local_max_iters` is reached.
pub fn local_step(
    doc: &EncodedDoc,
    state: &GlobalState,
    moments: &ProjectedMoments,
    config: &ModelConfig,
    alpha: &DVector<f64>,
) -> LocalState {
    let k_topics = state.num_topics;
    let n_total = doc.total_count() as f64;
    let mut lambda = alpha.add_scalar(n_total / k_topics as f64);
    let mut phi = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..config.local_max_iters.max(1) {
        phi = update_phi(doc, state, moments, &lambda);
        let next = update_lambda(doc, &phi, alpha);
        let delta: f64 =
            (0..k_topics).map(|k| (next[k] - lambda[k]).abs()).sum::<f64>() / k_topics as f64;
        lambda = next;
        iterations += 1;
        if delta < config.local_tol {
            converged = true;
            break;
        }
    }
    LocalState {
        lambda,
        phi,
        iterations,
        converged,
    }
}

/// The variational objective with all Dirichlet log-Γ constants included,
/// evaluated from explicit canonical parameters and projected moments.
///
/// `scale` multiplies the document-dependent terms (D/|batch| for
/// minibatch estimates, 1 for the full corpus); the q(u)-to-prior KL is
/// never scaled. ζ is read from `log_zeta` and held fixed.
#[allow(clippy::too_many_arguments)]
pub fn elbo_with(
    corpus: &EncodedCorpus,
    batch: &[usize],
    mc: &MeanCov,
    moments: &ProjectedMoments,
    log_zeta: &DMatrix<f64>,
    locals: &[LocalState],
    inducing: &InducingKernel,
    alpha: &DVector<f64>,
    scale: f64,
) -> Result<f64> {
    if batch.len() != locals.len() {
        return Err(Error::Argument(format!(
            "{} locals for a batch of {}",
            locals.len(),
            batch.len()
        )));
    }
    let k_topics = mc.num_topics;
    let v = mc.vocab_size;

    // log S_kt = log Σ_w exp(m + ½(Λ + k̃)); equals log ζ right after a ζ update.
    let nslots = moments.num_slots();
    let mut log_s = DMatrix::zeros(k_topics, nslots);
    let mut terms = vec![0.0; v];
    for k in 0..k_topics {
        for (j, &t) in moments.time_indices.iter().enumerate() {
            let kt = inducing.ktilde[t];
            for (w, term) in terms.iter_mut().enumerate() {
                *term = moments.m(k, w, j) + 0.5 * (moments.lam(k, w, j) + kt);
            }
            log_s[(k, j)] = log_sum_exp(&terms);
        }
    }

    let alpha0: f64 = alpha.sum();
    let ln_b_alpha: f64 = ln_gamma(alpha0) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>();

    let mut doc_terms = 0.0;
    for (&d, local) in batch.iter().zip(locals) {
        let doc = &corpus.docs[d];
        let t = doc.time_index;
        let j = moments
            .slot_of(t)
            .ok_or_else(|| Error::Argument(format!("moments do not cover time index {t}")))?;
        let lambda = &local.lambda;
        let lambda0: f64 = lambda.sum();
        let dig0 = digamma(lambda0);
        let dig: Vec<f64> = lambda.iter().map(|&l| digamma(l) - dig0).collect();

        for (&(w, n), &(_, ref phi_row)) in doc.counts.iter().zip(&local.phi) {
            let n = n as f64;
            for k in 0..k_topics {
                let p = phi_row[k];
                if p <= 0.0 {
                    continue;
                }
                let lz = log_zeta[(k, t)];
                let bound = moments.m(k, w as usize, j) - lz + 1.0 - (log_s[(k, j)] - lz).exp();
                doc_terms += n * p * (bound + dig[k] - p.ln());
            }
        }

        // −KL(q(θ_d) ‖ Dir(α)), exact.
        doc_terms += ln_b_alpha - ln_gamma(lambda0)
            + (0..k_topics)
                .map(|k| ln_gamma(lambda[k]) + (alpha[k] - lambda[k]) * dig[k])
                .sum::<f64>();
    }

    // −Σ_kw KL(q(u_kw) ‖ p(u_kw)) via Cholesky log-determinants.
    let log_det_prior = inducing.log_det();
    let t_hat = inducing.num_inducing() as f64;
    let mut gp_term = 0.0;
    for i in 0..k_topics * v {
        let sigma = &mc.sigma[i];
        let mu = &mc.mu[i];
        let chol = Cholesky::new(sigma.clone())
            .ok_or_else(|| Error::Numeric(format!("sigma not PD at flat index {i}")))?;
        let log_det_sigma: f64 = (0..sigma.nrows()).map(|r| chol.l()[(r, r)].ln()).sum::<f64>() * 2.0;
        let trace = (&inducing.kinv * sigma).trace();
        let quad = (&inducing.kinv * mu).dot(mu);
        gp_term += 0.5 * (log_det_sigma - log_det_prior + t_hat - trace - quad);
    }

    let total = scale * doc_terms + gp_term;
    if !total.is_finite() {
        return Err(Error::Numeric("non-finite ELBO".into()));
    }
    Ok(total)
}

/// The variational objective evaluated at the current global state.
pub fn elbo(
    corpus: &EncodedCorpus,
    batch: &[usize],
    state: &GlobalState,
    locals: &[LocalState],
    inducing: &InducingKernel,
    alpha: &DVector<f64>,
    scale: f64,
) -> Result<f64> {
    let mc = state.mean_cov()?;
    let times = batch_times(corpus, batch);
    let moments = project_moments(&mc, inducing, &times)?;
    elbo_with(corpus, batch, &mc, &moments, &state.log_zeta, locals, inducing, alpha, scale)
}

/// Ascending unique time indices of the batch documents.
pub fn batch_times(corpus: &EncodedCorpus, batch: &[usize]) -> Vec<usize> {
    let mut times: Vec<usize> = batch.iter().map(|&d| corpus.docs[d].time_index).collect();
    times.sort_unstable();
    times.dedup();
    times
}

/// Natural gradient of the ELBO in the natural parameters of every q(u_kw).
#[derive(Debug, Clone)]
pub struct NaturalGradient {
    pub g1: Vec<DVector<f64>>,
    pub g2: Vec<DMatrix<f64>>,
    pub num_topics: usize,
    pub vocab_size: usize,
}

/// Batch statistics shared by both gradient routes: the scaled
/// word-projection sums Ξ and the per (topic, slot) weights
/// N^φ_kt = Σ_{d:t_d=t} Σ_w n_dw·φ_dwk.
struct BatchStats {
    xi: Vec<DVector<f64>>,
    nphi: DMatrix<f64>,
}

fn batch_stats(
    corpus: &EncodedCorpus,
    batch: &[usize],
    locals: &[LocalState],
    moments: &ProjectedMoments,
    inducing: &InducingKernel,
    scale: f64,
) -> Result<BatchStats> {
    let k_topics = moments.num_topics;
    let v = moments.vocab_size;
    let t_hat = inducing.num_inducing();
    let mut xi = vec![DVector::zeros(t_hat); k_topics * v];
    let mut nphi = DMatrix::zeros(k_topics, moments.num_slots());
    for (&d, local) in batch.iter().zip(locals) {
        let doc = &corpus.docs[d];
        let t = doc.time_index;
        let j = moments
            .slot_of(t)
            .ok_or_else(|| Error::Argument(format!("moments do not cover time index {t}")))?;
        let a = inducing.proj.row(t).transpose();
        for (&(w, n), &(_, ref phi_row)) in doc.counts.iter().zip(&local.phi) {
            for k in 0..k_topics {
                let weight = scale * n as f64 * phi_row[k];
                xi[k * v + w as usize].axpy(weight, &a, 1.0);
                nphi[(k, j)] += weight;
            }
        }
    }
    Ok(BatchStats { xi, nphi })
}

/// Per-slot weight b_kwt = ζ⁻¹·N^φ_kt·exp(m + ½(Λ + k̃)).
#[inline]
fn exp_weight(
    moments: &ProjectedMoments,
    log_zeta: &DMatrix<f64>,
    inducing: &InducingKernel,
    nphi: &DMatrix<f64>,
    k: usize,
    w: usize,
    j: usize,
    t: usize,
) -> f64 {
    nphi[(k, j)]
        * (moments.m(k, w, j) + 0.5 * (moments.lam(k, w, j) + inducing.ktilde[t])
            - log_zeta[(k, t)])
            .exp()
}

/// Euclidean gradients ∂L/∂μ_kw and ∂L/∂Σ_kw (Σ gradient in symmetric
/// matrix convention), with the minibatch scale applied to the data
/// statistics only.
#[allow(clippy::too_many_arguments)]
pub fn euclidean_gradients(
    corpus: &EncodedCorpus,
    batch: &[usize],
    mc: &MeanCov,
    moments: &ProjectedMoments,
    log_zeta: &DMatrix<f64>,
    locals: &[LocalState],
    inducing: &InducingKernel,
    scale: f64,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let stats = batch_stats(corpus, batch, locals, moments, inducing, scale)?;
    let k_topics = mc.num_topics;
    let v = mc.vocab_size;
    let rows: Vec<DVector<f64>> = moments
        .time_indices
        .iter()
        .map(|&t| inducing.proj.row(t).transpose())
        .collect();
    let outers: Vec<DMatrix<f64>> = rows.iter().map(|a| a * a.transpose()).collect();

    let mut out = Vec::with_capacity(k_topics * v);
    for k in 0..k_topics {
        for w in 0..v {
            let i = k * v + w;
            let sigma_inv = Cholesky::new(mc.sigma[i].clone())
                .ok_or_else(|| Error::Numeric(format!("sigma not PD at flat index {i}")))?
                .inverse();
            let mut dmu = stats.xi[i].clone() - &inducing.kinv * &mc.mu[i];
            let mut dsigma = (sigma_inv - &inducing.kinv) * 0.5;
            for (j, &t) in moments.time_indices.iter().enumerate() {
                let b = exp_weight(moments, log_zeta, inducing, &stats.nphi, k, w, j, t);
                if b != 0.0 {
                    dmu.axpy(-b, &rows[j], 1.0);
                    dsigma.zip_apply(&outers[j], |x, o| *x -= 0.5 * b * o);
                }
            }
            out.push((dmu, dsigma));
        }
    }
    Ok(out)
}

/// Closed-form natural gradients:
/// ĝ⁽¹⁾ = Ξ + Σ_t B_t·(m_t − 1) − η⁽¹⁾ and
/// ĝ⁽²⁾ = −½K_T̂T̂⁻¹ − ½C − η⁽²⁾.
#[allow(clippy::too_many_arguments)]
pub fn natural_gradients(
    corpus: &EncodedCorpus,
    batch: &[usize],
    state: &GlobalState,
    moments: &ProjectedMoments,
    locals: &[LocalState],
    inducing: &InducingKernel,
    scale: f64,
) -> Result<NaturalGradient> {
    let stats = batch_stats(corpus, batch, locals, moments, inducing, scale)?;
    let k_topics = state.num_topics;
    let v = state.vocab_size;
    let rows: Vec<DVector<f64>> = moments
        .time_indices
        .iter()
        .map(|&t| inducing.proj.row(t).transpose())
        .collect();
    let outers: Vec<DMatrix<f64>> = rows.iter().map(|a| a * a.transpose()).collect();
    let neg_half_kinv = &inducing.kinv * -0.5;

    let mut g1 = Vec::with_capacity(k_topics * v);
    let mut g2 = Vec::with_capacity(k_topics * v);
    for k in 0..k_topics {
        for w in 0..v {
            let i = k * v + w;
            let mut gv = stats.xi[i].clone() - &state.eta1[i];
            let mut gm = &neg_half_kinv - &state.eta2[i];
            for (j, &t) in moments.time_indices.iter().enumerate() {
                let b = exp_weight(moments, &state.log_zeta, inducing, &stats.nphi, k, w, j, t);
                if b != 0.0 {
                    gv.axpy(b * (moments.m(k, w, j) - 1.0), &rows[j], 1.0);
                    gm.zip_apply(&outers[j], |x, o| *x -= 0.5 * b * o);
                }
            }
            g1.push(gv);
            g2.push(gm);
        }
    }
    Ok(NaturalGradient {
        g1,
        g2,
        num_topics: k_topics,
        vocab_size: v,
    })
}

/// η ← η + step·ĝ. A convex combination with the per-batch target, so
/// η⁽²⁾ stays negative definite for any step in (0, 1].
pub fn svi_step(state: &mut GlobalState, grad: &NaturalGradient, step: f64) -> Result<()> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Argument(format!("step must lie in (0, 1], got {step}")));
    }
    if grad.num_topics != state.num_topics || grad.vocab_size != state.vocab_size {
        return Err(Error::Argument("gradient dimensions do not match state".into()));
    }
    for i in 0..state.eta1.len() {
        state.eta1[i].axpy(step, &grad.g1[i], 1.0);
        state.eta2[i].zip_apply(&grad.g2[i], |x, g| *x += step * g);
    }
    state.check_negative_definite()?;
    state.step_count += 1;
    Ok(())
}

/// ρ_s = (s + τ₀)^(−κ) with s the 1-based step number.
pub fn step_size(step_count: u64, tau0: f64, decay: f64) -> f64 {
    ((step_count + 1) as f64 + tau0).powf(-decay)
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub rho: f64,
    pub elbo_estimate: f64,
    pub seconds: f64,
}

/// Training-loop knobs beyond what `ModelConfig` carries.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub num_steps: u64,
    /// Constant step size in (0, 1] instead of the decaying schedule.
    pub step_override: Option<f64>,
}

impl TrainOptions {
    pub fn new(num_steps: u64) -> Self {
        TrainOptions {
            num_steps,
            step_override: None,
        }
    }
}

/// Runs the SVI loop: sample a minibatch, tighten ζ for the batch times,
/// fit locals in parallel, follow the noisy natural gradient.
///
/// `on_step` runs after every global update (checkpoint cadence lives in
/// the caller); per-document work is reduced in ascending document-index
/// order, so runs are reproducible at any thread count.
pub fn train(
    corpus: &EncodedCorpus,
    config: &ModelConfig,
    inducing: &InducingKernel,
    state: &mut GlobalState,
    options: &TrainOptions,
    mut on_step: impl FnMut(&StepRecord, &GlobalState) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    let alpha = config.alpha.as_vector(config.num_topics)?;
    let num_docs = corpus.num_docs();
    let batch_size = config.batch_size.min(num_docs);
    let mut rng = seeded_rng(config.seed, STREAM_MINIBATCH);
    let start = Instant::now();
    let mut history = Vec::with_capacity(options.num_steps as usize);

    for _ in 0..options.num_steps {
        let mut batch = sample_minibatch(corpus, batch_size, &mut rng)?;
        batch.sort_unstable();
        let times = batch_times(corpus, &batch);
        let scale = num_docs as f64 / batch.len() as f64;

        let mc = state.mean_cov()?;
        let moments = project_moments(&mc, inducing, &times)?;
        update_zeta(state, &moments, inducing);

        let locals: Vec<LocalState> = batch
            .par_iter()
            .map(|&d| local_step(&corpus.docs[d], state, &moments, config, &alpha))
            .collect();

        let elbo_estimate = elbo_with(
            corpus,
            &batch,
            &mc,
            &moments,
            &state.log_zeta,
            &locals,
            inducing,
            &alpha,
            scale,
        )?;
        let grad = natural_gradients(corpus, &batch, state, &moments, &locals, inducing, scale)?;
        let rho = options
            .step_override
            .unwrap_or_else(|| step_size(state.step_count, config.step_tau0, config.step_decay));
        svi_step(state, &grad, rho)?;

        let record = StepRecord {
            step: state.step_count,
            rho,
            elbo_estimate,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_step(&record, state)?;
        history.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_inducing, KernelSpec};
    use crate::state::Alpha;
    use approx::assert_abs_diff_eq;

    fn tiny_inducing(times: &[f64]) -> (KernelSpec, InducingKernel) {
        let spec = KernelSpec::se(1.0, 0.4);
        let ik = build_inducing(&spec, times, times, 1e-10).unwrap();
        (spec, ik)
    }

    fn uniform_moments(k: usize, v: usize, times: &[usize]) -> ProjectedMoments {
        ProjectedMoments {
            time_indices: times.to_vec(),
            slot: times.iter().enumerate().map(|(j, &t)| (t, j)).collect(),
            num_topics: k,
            vocab_size: v,
            m: vec![0.0; k * v * times.len()],
            lam: vec![0.0; k * v * times.len()],
        }
    }

    fn blank_state(k: usize, v: usize, ik: &InducingKernel) -> GlobalState {
        let t_hat = ik.num_inducing();
        GlobalState {
            num_topics: k,
            vocab_size: v,
            eta1: vec![DVector::zeros(t_hat); k * v],
            eta2: vec![&ik.kinv * -0.5; k * v],
            log_zeta: DMatrix::zeros(k, ik.num_train()),
            step_count: 0,
        }
    }

    #[test]
    fn zeta_trivial_cases() {
        let (_, ik) = tiny_inducing(&[0.25, 0.5, 0.75]);
        // V = 1, m = 0, Λ + k̃ = 0 → ζ = 1
        let mut state = blank_state(2, 1, &ik);
        let pm = uniform_moments(2, 1, &[0, 1, 2]);
        update_zeta(&mut state, &pm, &ik);
        for k in 0..2 {
            for t in 0..3 {
                assert_abs_diff_eq!(state.log_zeta[(k, t)], 0.0, epsilon = 1e-6);
            }
        }
        // V = 2 → ζ = 2
        let mut state = blank_state(2, 2, &ik);
        let pm = uniform_moments(2, 2, &[0, 1, 2]);
        update_zeta(&mut state, &pm, &ik);
        assert_abs_diff_eq!(state.log_zeta[(0, 0)], 2.0_f64.ln(), epsilon = 1e-6);
    }

    #[test]
    fn phi_symmetry_and_two_point_softmax() {
        let (_, ik) = tiny_inducing(&[0.25, 0.5, 0.75]);
        let state = blank_state(3, 2, &ik);
        let pm = uniform_moments(3, 2, &[0, 1, 2]);
        let doc = EncodedDoc {
            time_index: 1,
            counts: vec![(0, 3), (1, 2)],
        };
        let lambda = DVector::from_element(3, 1.7);
        let phi = update_phi(&doc, &state, &pm, &lambda);
        for (_, row) in &phi {
            for k in 0..3 {
                assert_abs_diff_eq!(row[k], 1.0 / 3.0, epsilon = 1e-12);
            }
        }

        // K = 2, equal ζ and λ, m = (1, 0)
        let state = blank_state(2, 1, &ik);
        let mut pm = uniform_moments(2, 1, &[0]);
        let flat = pm.flat(0, 0, 0);
        pm.m[flat] = 1.0;
        let doc = EncodedDoc {
            time_index: 0,
            counts: vec![(0, 1)],
        };
        let phi = update_phi(&doc, &state, &pm, &DVector::from_element(2, 1.0));
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(phi[0].1[0], e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(phi[0].1[1], 1.0 / (e + 1.0), epsilon = 1e-12);
    }

    #[test]
    fn lambda_update_closed_form() {
        let alpha = DVector::from_element(2, 1.0);
        let empty = EncodedDoc {
            time_index: 0,
            counts: vec![],
        };
        assert_eq!(update_lambda(&empty, &[], &alpha), alpha);

        let doc = EncodedDoc {
            time_index: 0,
            counts: vec![(0, 1)],
        };
        let phi = vec![(0u32, DVector::from_vec(vec![0.5, 0.5]))];
        let lambda = update_lambda(&doc, &phi, &alpha);
        assert_abs_diff_eq!(lambda[0], 1.5);
        assert_abs_diff_eq!(lambda[1], 1.5);
    }

    fn tiny_config(k: usize) -> ModelConfig {
        ModelConfig {
            num_topics: k,
            alpha: Alpha::Symmetric(0.7),
            kernel: KernelSpec::se(1.0, 0.4),
            num_inducing: 2,
            inducing_placement: Default::default(),
            jitter: Some(1e-10),
            local_max_iters: 25,
            local_tol: 1e-8,
            step_tau0: 1.0,
            step_decay: 0.7,
            batch_size: 4,
            seed: 0,
        }
    }

    #[test]
    fn local_step_iteration_cap_and_symmetric_fixed_point() {
        let (_, ik) = tiny_inducing(&[0.25, 0.5, 0.75]);
        let state = blank_state(2, 3, &ik);
        let pm = uniform_moments(2, 3, &[0, 1, 2]);
        let doc = EncodedDoc {
            time_index: 2,
            counts: vec![(0, 5), (2, 5)],
        };
        let mut config = tiny_config(2);
        config.local_max_iters = 1;
        let alpha = DVector::from_element(2, 0.7);
        let local = local_step(&doc, &state, &pm, &config, &alpha);
        assert_eq!(local.iterations, 1);

        // symmetric model: fixed point at uniform φ, λ = α + N_d/K
        let config = tiny_config(2);
        let local = local_step(&doc, &state, &pm, &config, &alpha);
        assert!(local.converged);
        for (_, row) in &local.phi {
            assert_abs_diff_eq!(row[0], 0.5, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(local.lambda[0], 0.7 + 5.0, epsilon = 1e-9);
    }

    #[test]
    fn projection_trivial_cases() {
        let times = [0.2, 0.5, 0.8];
        let (_, ik) = tiny_inducing(&times);
        let k = 2;
        let v = 2;
        // μ = 0 → m = 0
        let mc = MeanCov {
            mu: vec![DVector::zeros(3); k * v],
            sigma: vec![&ik.chol * ik.chol.transpose(); k * v],
            num_topics: k,
            vocab_size: v,
        };
        let pm = project_moments(&mc, &ik, &[0, 1, 2]).unwrap();
        for i in 0..pm.m.len() {
            assert_abs_diff_eq!(pm.m[i], 0.0, epsilon = 1e-12);
        }
        // inducing == train, Σ = prior → Λ_t ≈ K_tt
        for w in 0..v {
            for j in 0..3 {
                assert_abs_diff_eq!(pm.lam(0, w, j), 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn svi_prior_pull_fixed_point() {
        let (_, ik) = tiny_inducing(&[0.2, 0.5, 0.8]);
        let corpus_empty_batch: Vec<usize> = vec![];
        let corpus = crate::corpus::EncodedCorpus {
            vocab: dummy_vocab(2),
            transform: crate::corpus::TimeTransform { scale: 1.0, shift: 0.0 },
            unique_times: vec![0.2, 0.5, 0.8],
            docs: vec![],
        };
        let mut state = blank_state(2, 2, &ik);
        // perturb eta away from the prior
        state.eta1[0][0] = 0.7;
        state.eta2[1][(0, 0)] -= 0.3;
        let pm = uniform_moments(2, 2, &[]);
        let grad = natural_gradients(&corpus, &corpus_empty_batch, &state, &pm, &[], &ik, 1.0)
            .unwrap();
        // empty batch: g1 = −η⁽¹⁾, g2 = −½K⁻¹ − η⁽²⁾
        for i in 0..4 {
            assert_abs_diff_eq!((&grad.g1[i] + &state.eta1[i]).norm(), 0.0, epsilon = 1e-12);
            let target = &ik.kinv * -0.5;
            assert_abs_diff_eq!(
                (&grad.g2[i] - (&target - &state.eta2[i])).norm(),
                0.0,
                epsilon = 1e-12
            );
        }
        // step 1 lands exactly on the prior
        svi_step(&mut state, &grad, 1.0).unwrap();
        assert_abs_diff_eq!(state.eta1[0].norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((&state.eta2[1] - &ik.kinv * -0.5).norm(), 0.0, epsilon = 1e-12);
        assert_eq!(state.step_count, 1);

        // step 0 is rejected, state untouched
        let before = state.clone();
        assert!(svi_step(&mut state, &grad, 0.0).is_err());
        assert_eq!(state, before);
    }

    fn dummy_vocab(v: usize) -> crate::corpus::Vocabulary {
        let docs: Vec<crate::corpus::RawDocument> = vec![crate::corpus::RawDocument {
            id: "d".into(),
            timestamp: 0.0,
            text: (0..v).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" "),
        }];
        crate::corpus::build_vocabulary(
            &docs,
            &Default::default(),
            1,
            crate::corpus::ScoreFilter::Threshold(f64::MIN),
        )
        .unwrap()
    }

    #[test]
    fn schedule_formula() {
        assert_abs_diff_eq!(step_size(0, 0.0, 1.0), 1.0);
        assert_abs_diff_eq!(step_size(1, 0.0, 1.0), 0.5);
        assert_abs_diff_eq!(step_size(9, 0.0, 1.0), 0.1);
        assert_abs_diff_eq!(step_size(0, 1.0, 0.7), 2.0_f64.powf(-0.7));
    }

    #[test]
    fn elbo_prior_state_is_pure_kl() {
        let (_, ik) = tiny_inducing(&[0.2, 0.5, 0.8]);
        let corpus = crate::corpus::EncodedCorpus {
            vocab: dummy_vocab(2),
            transform: crate::corpus::TimeTransform { scale: 1.0, shift: 0.0 },
            unique_times: vec![0.2, 0.5, 0.8],
            docs: vec![],
        };
        let state = blank_state(2, 2, &ik);
        let alpha = DVector::from_element(2, 0.7);
        let value = elbo(&corpus, &[], &state, &[], &ik, &alpha, 1.0).unwrap();
        // μ = 0, Σ = prior → every KL(q(u)‖p(u)) vanishes
        assert_abs_diff_eq!(value, 0.0, epsilon = 1e-8);
    }
}

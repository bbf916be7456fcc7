//! Test-only companions for `gdtm`: independently coded oracles (naive
//! kernel/ELBO evaluation via matrix inversion and plain summation),
//! synthetic corpora drawn from the generative model, random-state
//! builders, and small numeric helpers.
//!
//! Nothing here shares code paths with the library routines it checks:
//! the oracle uses `try_inverse` instead of Cholesky solves, `statrs`
//! special functions instead of the library's series, and naive sums
//! instead of log-sum-exp.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use statrs::function::gamma::{digamma, ln_gamma};

use gdtm::corpus::{build_vocabulary, encode, EncodedCorpus, RawDocument, ScoreFilter};
use gdtm::kernels::{InducingKernel, KernelSpec};
use gdtm::state::{GlobalState, LocalState, MeanCov};

/// Straight-line kernel evaluation, no validation, no shared code.
pub fn naive_kernel(spec: &KernelSpec, t: f64, t2: f64) -> f64 {
    match spec {
        KernelSpec::Wiener { sigma2 } => sigma2 * if t < t2 { t } else { t2 },
        KernelSpec::OrnsteinUhlenbeck { sigma2, length_scale } => {
            sigma2 * (-(t - t2).abs() / length_scale).exp()
        }
        KernelSpec::SquaredExponential { sigma2, length_scale } => {
            sigma2 * (-(t - t2) * (t - t2) / (2.0 * length_scale * length_scale)).exp()
        }
        KernelSpec::Cauchy { sigma2, length_scale } => {
            sigma2 / (1.0 + (t - t2) * (t - t2) / (length_scale * length_scale))
        }
        KernelSpec::Sum { left, right } => naive_kernel(left, t, t2) + naive_kernel(right, t, t2),
        KernelSpec::Product { left, right } => {
            naive_kernel(left, t, t2) * naive_kernel(right, t, t2)
        }
    }
}

/// Element-by-element gram matrix (no symmetry shortcut).
pub fn naive_gram(spec: &KernelSpec, rows: &[f64], cols: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        naive_kernel(spec, rows[i], cols[j])
    })
}

/// The variational objective recomputed from first principles: jittered
/// gram inverted with `try_inverse`, projection rows and residuals formed
/// per time, plain exponential sums, `statrs` digamma/ln_gamma, and a
/// determinant-based Gaussian KL. ζ is read from `log_zeta` and fixed.
#[allow(clippy::too_many_arguments)]
pub fn naive_elbo(
    corpus: &EncodedCorpus,
    batch: &[usize],
    mu: &[DVector<f64>],
    sigma: &[DMatrix<f64>],
    log_zeta: &DMatrix<f64>,
    locals: &[LocalState],
    spec: &KernelSpec,
    inducing_times: &[f64],
    train_times: &[f64],
    jitter: f64,
    alpha: &DVector<f64>,
    scale: f64,
) -> f64 {
    let t_hat = inducing_times.len();
    let k_topics = log_zeta.nrows();
    let v = corpus.num_terms();
    let gram = naive_gram(spec, inducing_times, inducing_times)
        + DMatrix::<f64>::identity(t_hat, t_hat) * jitter;
    let kinv = gram.clone().try_inverse().expect("oracle gram not invertible");

    // per train time: projection row and residual variance
    let mut a_rows = Vec::with_capacity(train_times.len());
    let mut ktilde = Vec::with_capacity(train_times.len());
    for &t in train_times {
        let kvec = DVector::from_fn(t_hat, |i, _| naive_kernel(spec, t, inducing_times[i]));
        let a = &kinv * &kvec;
        let resid = naive_kernel(spec, t, t) - a.dot(&kvec);
        ktilde.push(if resid > 0.0 { resid } else { 0.0 });
        a_rows.push(a);
    }

    let m = |k: usize, w: usize, t: usize| a_rows[t].dot(&mu[k * v + w]);
    let lam = |k: usize, w: usize, t: usize| {
        let a = &a_rows[t];
        (&sigma[k * v + w] * a).dot(a)
    };

    let alpha0: f64 = alpha.iter().sum();
    let ln_b_alpha = ln_gamma(alpha0) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>();

    let mut doc_terms = 0.0;
    for (&d, local) in batch.iter().zip(locals) {
        let doc = &corpus.docs[d];
        let t = doc.time_index;
        let lambda = &local.lambda;
        let lambda0: f64 = lambda.iter().sum();
        let dig0 = digamma(lambda0);

        // S_kt by plain summation over the whole vocabulary
        let mut s = vec![0.0; k_topics];
        for (k, s_k) in s.iter_mut().enumerate() {
            for w in 0..v {
                *s_k += (m(k, w, t) + 0.5 * (lam(k, w, t) + ktilde[t])).exp();
            }
        }

        for (&(w, n), &(_, ref phi_row)) in doc.counts.iter().zip(&local.phi) {
            for k in 0..k_topics {
                let p = phi_row[k];
                if p <= 0.0 {
                    continue;
                }
                let zeta = log_zeta[(k, t)].exp();
                doc_terms += n as f64
                    * p
                    * (m(k, w as usize, t) - log_zeta[(k, t)] + 1.0 - s[k] / zeta
                        + digamma(lambda[k]) - dig0
                        - p.ln());
            }
        }

        doc_terms += ln_b_alpha - ln_gamma(lambda0);
        for k in 0..k_topics {
            doc_terms +=
                ln_gamma(lambda[k]) + (alpha[k] - lambda[k]) * (digamma(lambda[k]) - dig0);
        }
    }

    let log_det_prior = gram.determinant().ln();
    let mut gp_term = 0.0;
    for i in 0..k_topics * v {
        let s = &sigma[i];
        gp_term += 0.5
            * (s.determinant().ln() - log_det_prior + t_hat as f64
                - (&kinv * s).trace()
                - (&kinv * &mu[i]).dot(&mu[i]));
    }

    scale * doc_terms + gp_term
}

/// A corpus drawn from the generative model, with the true per-time
/// topic-word probabilities aligned to the encoded vocabulary.
pub struct Synthetic {
    pub corpus: EncodedCorpus,
    /// One K×V′ matrix per time index (V′ = encoded vocabulary size).
    /// Rows are the true softmax topics restricted to the words that
    /// survived encoding, so rows can sum to slightly less than 1.
    pub topics: Vec<DMatrix<f64>>,
}

/// Samples topics β from the GP prior, mixes documents with Dir(α)
/// proportions, and pushes the tokens through the real preprocessing
/// pipeline. `doc_len` tokens per document, `docs_per_time` documents at
/// each of `num_times` equispaced raw timestamps 0, 1, ….
#[allow(clippy::too_many_arguments)]
pub fn generate_synthetic(
    num_topics: usize,
    vocab_size: usize,
    num_times: usize,
    docs_per_time: usize,
    doc_len: usize,
    spec: &KernelSpec,
    alpha: f64,
    seed: u64,
) -> Synthetic {
    assert!(vocab_size <= 10_000, "word-name scheme supports V <= 10000");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1.0 / (2.0 * num_times as f64);
    let norm_times: Vec<f64> = (0..num_times)
        .map(|t| {
            if num_times == 1 {
                1.0
            } else {
                eps + (1.0 - eps) * t as f64 / (num_times - 1) as f64
            }
        })
        .collect();

    let gram = naive_gram(spec, &norm_times, &norm_times)
        + DMatrix::<f64>::identity(num_times, num_times) * 1e-8;
    let chol = Cholesky::new(gram).expect("synthetic gram not PD");

    // β_kw· = L·z over the normalized time grid
    let mut beta = vec![DVector::<f64>::zeros(num_times); num_topics * vocab_size];
    for b in beta.iter_mut() {
        let z = DVector::from_fn(num_times, |_, _| rng.sample::<f64, _>(StandardNormal));
        *b = chol.l() * z;
    }

    // true per-time topics, full vocabulary
    let mut pi = Vec::with_capacity(num_times);
    for t in 0..num_times {
        let mut mat = DMatrix::zeros(num_topics, vocab_size);
        for k in 0..num_topics {
            let row: Vec<f64> = (0..vocab_size)
                .map(|w| beta[k * vocab_size + w][t])
                .collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (w, e) in exps.iter().enumerate() {
                mat[(k, w)] = e / sum;
            }
        }
        pi.push(mat);
    }

    let gamma = Gamma::new(alpha, 1.0).expect("alpha must be positive");
    let mut docs = Vec::with_capacity(num_times * docs_per_time);
    for (t, pi_t) in pi.iter().enumerate() {
        for d in 0..docs_per_time {
            let mut theta: Vec<f64> = (0..num_topics).map(|_| rng.sample(gamma)).collect();
            let total: f64 = theta.iter().sum();
            for th in theta.iter_mut() {
                *th /= total;
            }
            let probs: Vec<f64> = (0..vocab_size)
                .map(|w| (0..num_topics).map(|k| theta[k] * pi_t[(k, w)]).sum())
                .collect();
            let dist = WeightedIndex::new(&probs).expect("token distribution degenerate");
            let text = (0..doc_len)
                .map(|_| format!("w{:04}", dist.sample(&mut rng)))
                .collect::<Vec<_>>()
                .join(" ");
            docs.push(RawDocument {
                id: format!("t{t}-d{d}"),
                timestamp: t as f64,
                text,
            });
        }
    }

    let vocab = build_vocabulary(&docs, &Default::default(), 1, ScoreFilter::Threshold(f64::MIN))
        .expect("synthetic vocabulary");
    let (corpus, _) = encode(&docs, &vocab, 1).expect("synthetic encoding");

    // align truth with the encoded vocabulary (unseen words were pruned)
    let kept: Vec<usize> = corpus
        .vocab
        .terms()
        .iter()
        .map(|term| term[1..].parse::<usize>().expect("synthetic term name"))
        .collect();
    let topics = pi
        .iter()
        .map(|mat| {
            DMatrix::from_fn(num_topics, kept.len(), |k, i| mat[(k, kept[i])])
        })
        .collect();

    Synthetic { corpus, topics }
}

/// Random symmetric positive-definite matrix B·Bᵀ + ridge·I.
pub fn random_spd<R: Rng>(dim: usize, entry_scale: f64, ridge: f64, rng: &mut R) -> DMatrix<f64> {
    let b = DMatrix::from_fn(dim, dim, |_, _| {
        entry_scale * rng.sample::<f64, _>(StandardNormal)
    });
    &b * b.transpose() + DMatrix::identity(dim, dim) * ridge
}

/// A valid global state with random means and covariances (η derived via
/// the canonical-to-natural map) and ζ tightened once over all times.
pub fn random_state(
    num_topics: usize,
    vocab_size: usize,
    inducing: &InducingKernel,
    mean_scale: f64,
    seed: u64,
) -> GlobalState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_hat = inducing.num_inducing();
    let t = inducing.num_train();
    let mut state = GlobalState {
        num_topics,
        vocab_size,
        eta1: vec![DVector::zeros(t_hat); num_topics * vocab_size],
        eta2: vec![DMatrix::zeros(t_hat, t_hat); num_topics * vocab_size],
        log_zeta: DMatrix::zeros(num_topics, t),
        step_count: 0,
    };
    let mc = MeanCov {
        mu: (0..num_topics * vocab_size)
            .map(|_| {
                DVector::from_fn(t_hat, |_, _| mean_scale * rng.sample::<f64, _>(StandardNormal))
            })
            .collect(),
        sigma: (0..num_topics * vocab_size)
            .map(|_| random_spd(t_hat, 0.3, 0.05, &mut rng))
            .collect(),
        num_topics,
        vocab_size,
    };
    state.set_from_mean_cov(&mc).expect("random covariances PD");
    let all_times: Vec<usize> = (0..t).collect();
    let moments = gdtm::inference::project_moments(&mc, inducing, &all_times)
        .expect("random state projection");
    gdtm::inference::update_zeta(&mut state, &moments, inducing);
    state
}

/// Random locals for a batch: per-word simplex rows by softmaxed normals,
/// λ consistent with φ (λ = α + Σ n·φ).
pub fn random_locals(
    corpus: &EncodedCorpus,
    batch: &[usize],
    num_topics: usize,
    alpha: &DVector<f64>,
    seed: u64,
) -> Vec<LocalState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batch
        .iter()
        .map(|&d| {
            let doc = &corpus.docs[d];
            let phi: Vec<(u32, DVector<f64>)> = doc
                .counts
                .iter()
                .map(|&(w, _)| {
                    let mut row: Vec<f64> = (0..num_topics)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= sum;
                    }
                    (w, DVector::from_vec(row))
                })
                .collect();
            let mut lambda = alpha.clone();
            for (&(_, ref row), &(_, n)) in phi.iter().zip(&doc.counts) {
                lambda.axpy(n as f64, row, 1.0);
            }
            LocalState {
                lambda,
                phi,
                iterations: 0,
                converged: true,
            }
        })
        .collect()
}

/// Symmetric central difference (f(x+h) − f(x−h)) / 2h.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Greedy cosine matching: repeatedly pairs the highest-similarity
/// (truth, estimate) vectors. Returns (truth index, estimate index,
/// cosine) triples, one per truth vector.
pub fn greedy_cosine_match(
    truth: &[DVector<f64>],
    estimate: &[DVector<f64>],
) -> Vec<(usize, usize, f64)> {
    assert_eq!(truth.len(), estimate.len());
    let n = truth.len();
    let cos = |a: &DVector<f64>, b: &DVector<f64>| {
        let denom = a.norm() * b.norm();
        if denom == 0.0 {
            0.0
        } else {
            a.dot(b) / denom
        }
    };
    let mut used_t = vec![false; n];
    let mut used_e = vec![false; n];
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for i in 0..n {
            if used_t[i] {
                continue;
            }
            for j in 0..n {
                if used_e[j] {
                    continue;
                }
                let c = cos(&truth[i], &estimate[j]);
                if c > best.2 {
                    best = (i, j, c);
                }
            }
        }
        used_t[best.0] = true;
        used_e[best.1] = true;
        pairs.push(best);
    }
    pairs.sort_by_key(|&(i, _, _)| i);
    pairs
}

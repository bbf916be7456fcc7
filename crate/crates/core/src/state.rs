//! Model configuration, variational-parameter containers, initialization,
//! and checkpoint persistence.
//!
//! Memory layout: `eta1` is a K×V array of T̂-vectors and `eta2` a K×V
//! array of T̂×T̂ symmetric matrices (persisted as packed lower triangles).
//! The dominant cost is K·V·T̂² floats; see the README for the sizing
//! formula.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::*;
use crate::corpus::{EncodedCorpus, TimeTransform};
use crate::error::{Error, Result};
use crate::inference;
use crate::kernels::{InducingKernel, InducingPlacement, KernelSpec};

const CHECKPOINT_MAGIC: &str = "GDTMCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// RNG stream selectors, so one seed drives independent deterministic streams.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_MINIBATCH: u64 = 2;
pub(crate) const STREAM_EVAL: u64 = 3;

pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Dirichlet prior: one shared concentration or a full K-vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Alpha {
    Symmetric(f64),
    Vector(Vec<f64>),
}

impl Alpha {
    pub fn as_vector(&self, num_topics: usize) -> Result<DVector<f64>> {
        match self {
            Alpha::Symmetric(a) => {
                if !(*a > 0.0) {
                    return Err(Error::Config(format!("alpha must be positive, got {a}")));
                }
                Ok(DVector::from_element(num_topics, *a))
            }
            Alpha::Vector(v) => {
                if v.len() != num_topics {
                    return Err(Error::Config(format!(
                        "alpha vector has length {}, expected {num_topics}",
                        v.len()
                    )));
                }
                if v.iter().any(|a| !(*a > 0.0)) {
                    return Err(Error::Config("alpha entries must be positive".into()));
                }
                Ok(DVector::from_column_slice(v))
            }
        }
    }
}

fn default_alpha() -> Alpha {
    Alpha::Symmetric(0.5)
}

fn default_num_inducing() -> usize {
    20
}

fn default_local_max_iters() -> usize {
    50
}

fn default_local_tol() -> f64 {
    1e-4
}

fn default_step_tau0() -> f64 {
    1.0
}

fn default_step_decay() -> f64 {
    0.7
}

fn default_batch_size() -> usize {
    64
}

/// Everything the trainer needs to know about the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// K, number of topics.
    pub num_topics: usize,
    #[serde(default = "default_alpha")]
    pub alpha: Alpha,
    pub kernel: KernelSpec,
    /// T̂, number of inducing points.
    #[serde(default = "default_num_inducing")]
    pub num_inducing: usize,
    #[serde(default)]
    pub inducing_placement: InducingPlacement,
    /// Added to the inducing gram diagonal; `None` means
    /// 1e-6 times its mean diagonal.
    #[serde(default)]
    pub jitter: Option<f64>,
    #[serde(default = "default_local_max_iters")]
    pub local_max_iters: usize,
    #[serde(default = "default_local_tol")]
    pub local_tol: f64,
    /// τ₀ in the step schedule ρ_s = (s + τ₀)^(−κ).
    #[serde(default = "default_step_tau0")]
    pub step_tau0: f64,
    /// κ in the step schedule, in (0.5, 1].
    #[serde(default = "default_step_decay")]
    pub step_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_topics < 2 {
            return Err(Error::Config(format!(
                "num_topics must be >= 2, got {}",
                self.num_topics
            )));
        }
        if self.num_inducing < 2 {
            return Err(Error::Config(format!(
                "num_inducing must be >= 2, got {}",
                self.num_inducing
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.step_decay > 0.5 && self.step_decay <= 1.0) {
            return Err(Error::Config(format!(
                "step_decay must lie in (0.5, 1], got {}",
                self.step_decay
            )));
        }
        if self.step_tau0 < 0.0 {
            return Err(Error::Config("step_tau0 must be >= 0".into()));
        }
        self.kernel.validate()?;
        self.alpha.as_vector(self.num_topics).map(|_| ())
    }

    /// Builds the inducing quantities for a corpus, applying the default
    /// jitter rule when none is configured.
    pub fn build_inducing(&self, corpus: &EncodedCorpus) -> Result<InducingKernel> {
        let train_times = &corpus.unique_times;
        let inducing_times = crate::kernels::choose_inducing_times(
            train_times,
            self.num_inducing,
            self.inducing_placement,
        );
        let jitter = match self.jitter {
            Some(j) => j,
            None => {
                let diag: f64 = inducing_times
                    .iter()
                    .map(|&t| self.kernel.eval(t, t))
                    .sum::<Result<f64>>()?;
                1e-6 * diag / inducing_times.len() as f64
            }
        };
        crate::kernels::build_inducing(&self.kernel, train_times, &inducing_times, jitter)
    }
}

/// Per (topic, word) natural parameters of q(u_kw) plus the Taylor
/// locations, stored as log ζ.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub num_topics: usize,
    pub vocab_size: usize,
    /// η⁽¹⁾_kw = Σ⁻¹μ, indexed k·V + w.
    pub eta1: Vec<DVector<f64>>,
    /// η⁽²⁾_kw = −½Σ⁻¹, symmetric negative definite.
    pub eta2: Vec<DMatrix<f64>>,
    /// log ζ_kt, K×T.
    pub log_zeta: DMatrix<f64>,
    pub step_count: u64,
}

/// Derived canonical parameters (μ_kw, Σ_kw) of every q(u_kw).
#[derive(Debug, Clone)]
pub struct MeanCov {
    pub mu: Vec<DVector<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
    pub num_topics: usize,
    pub vocab_size: usize,
}

impl MeanCov {
    pub fn idx(&self, k: usize, w: usize) -> usize {
        k * self.vocab_size + w
    }
}

impl GlobalState {
    pub fn idx(&self, k: usize, w: usize) -> usize {
        k * self.vocab_size + w
    }

    pub fn num_inducing(&self) -> usize {
        self.eta1[0].len()
    }

    pub fn num_times(&self) -> usize {
        self.log_zeta.ncols()
    }

    /// Derives (μ, Σ) from the natural parameters; fails if any η⁽²⁾ has
    /// lost negative definiteness.
    pub fn mean_cov(&self) -> Result<MeanCov> {
        let mut mu = Vec::with_capacity(self.eta1.len());
        let mut sigma = Vec::with_capacity(self.eta2.len());
        for (i, (e1, e2)) in self.eta1.iter().zip(&self.eta2).enumerate() {
            let prec = e2 * -2.0; // Σ⁻¹
            let chol = Cholesky::new(prec).ok_or_else(|| {
                Error::Numeric(format!(
                    "eta2 lost negative definiteness at flat index {i} (step {})",
                    self.step_count
                ))
            })?;
            let cov = chol.inverse();
            mu.push(&cov * e1);
            sigma.push(cov);
        }
        Ok(MeanCov {
            mu,
            sigma,
            num_topics: self.num_topics,
            vocab_size: self.vocab_size,
        })
    }

    /// Rebuilds natural parameters from canonical ones.
    pub fn set_from_mean_cov(&mut self, mc: &MeanCov) -> Result<()> {
        for i in 0..self.eta1.len() {
            let chol = Cholesky::new(mc.sigma[i].clone())
                .ok_or_else(|| Error::Numeric(format!("sigma not PD at flat index {i}")))?;
            let mut prec = chol.inverse();
            // keep η⁽²⁾ bitwise symmetric (persisted as a lower triangle)
            for r in 0..prec.nrows() {
                for c in 0..r {
                    prec[(c, r)] = prec[(r, c)];
                }
            }
            self.eta1[i] = &prec * &mc.mu[i];
            self.eta2[i] = prec * -0.5;
        }
        Ok(())
    }

    /// Verifies −2η⁽²⁾ admits a Cholesky factorization everywhere.
    pub fn check_negative_definite(&self) -> Result<()> {
        for (i, e2) in self.eta2.iter().enumerate() {
            if Cholesky::new(e2 * -2.0).is_none() {
                return Err(Error::Numeric(format!(
                    "eta2 not negative definite at flat index {i} (step {})",
                    self.step_count
                )));
            }
        }
        Ok(())
    }
}

/// Per-document variational parameters.
#[derive(Debug, Clone)]
pub struct LocalState {
    /// λ_d, Dirichlet parameters of q(θ_d).
    pub lambda: DVector<f64>,
    /// φ_dw per distinct word in the document, aligned with the document's
    /// sparse counts: (word index, K-simplex row).
    pub phi: Vec<(u32, DVector<f64>)>,
    pub iterations: usize,
    pub converged: bool,
}

/// Smoothing constant for the frequency-based topic seeds.
const INIT_SMOOTHING: f64 = 0.01;
/// Ridge added to AᵀA when projecting targets onto the inducing space.
const INIT_RIDGE: f64 = 1e-4;

/// Seeds the global state from randomly selected documents.
///
/// For each timestamp, K documents are drawn and their smoothed log
/// frequencies become per-time targets; μ_kw is the ridge least-squares
/// projection of the target trajectory onto the inducing space, Σ_kw the
/// prior covariance, and ζ one closed-form update sweep.
pub fn init_model(
    corpus: &EncodedCorpus,
    config: &ModelConfig,
    inducing: &InducingKernel,
) -> Result<GlobalState> {
    config.validate()?;
    let k_topics = config.num_topics;
    let v = corpus.num_terms();
    let t = corpus.num_times();
    let t_hat = inducing.num_inducing();
    if inducing.num_train() != t {
        return Err(Error::Argument(format!(
            "inducing kernel was built for {} times, corpus has {t}",
            inducing.num_train()
        )));
    }

    let mut rng = seeded_rng(config.seed, STREAM_INIT);
    let by_time = corpus.docs_by_time();

    // Pick K representative documents per time.
    let mut picks = vec![vec![0usize; t]; k_topics];
    for (ti, docs_here) in by_time.iter().enumerate() {
        if docs_here.is_empty() {
            return Err(Error::Pipeline(format!("timestamp index {ti} has no documents")));
        }
        let chosen: Vec<usize> = if docs_here.len() >= k_topics {
            rand::seq::index::sample(&mut rng, docs_here.len(), k_topics)
                .into_iter()
                .map(|i| docs_here[i])
                .collect()
        } else {
            use rand::Rng;
            (0..k_topics)
                .map(|_| docs_here[rng.random_range(0..docs_here.len())])
                .collect()
        };
        for (k, &d) in chosen.iter().enumerate() {
            picks[k][ti] = d;
        }
    }

    // Ridge projector R = (AᵀA + ridge·I)⁻¹Aᵀ, shared across (k, w).
    let ata = inducing.proj.transpose() * &inducing.proj;
    let ridged = &ata + DMatrix::<f64>::identity(t_hat, t_hat) * INIT_RIDGE;
    let chol = Cholesky::new(ridged)
        .ok_or_else(|| Error::Numeric("ridge normal equations not PD".into()))?;
    let projector = chol.inverse() * inducing.proj.transpose(); // T̂ × T

    // Σ init is the (jittered) prior gram, so η⁽²⁾ = −½K_T̂T̂⁻¹ everywhere.
    let neg_half_kinv = &inducing.kinv * -0.5;

    let mut eta1 = Vec::with_capacity(k_topics * v);
    let mut eta2 = Vec::with_capacity(k_topics * v);
    let mut targets = DMatrix::<f64>::zeros(v, t);
    for k in 0..k_topics {
        // Smoothed log-frequency targets for topic k, dense over (w, t).
        for ti in 0..t {
            let doc = &corpus.docs[picks[k][ti]];
            let n_total = doc.total_count() as f64;
            let base = (INIT_SMOOTHING / (n_total + INIT_SMOOTHING * v as f64)).ln();
            for w in 0..v {
                targets[(w, ti)] = base;
            }
            for &(w, n) in &doc.counts {
                targets[(w as usize, ti)] =
                    ((n as f64 + INIT_SMOOTHING) / (n_total + INIT_SMOOTHING * v as f64)).ln();
            }
        }
        for w in 0..v {
            let g = targets.row(w).transpose();
            let mu = &projector * g;
            eta1.push(&inducing.kinv * &mu);
            eta2.push(neg_half_kinv.clone());
        }
    }
    let mut state = GlobalState {
        num_topics: k_topics,
        vocab_size: v,
        eta1,
        eta2,
        log_zeta: DMatrix::zeros(k_topics, t),
        step_count: 0,
    };

    let mc = state.mean_cov()?;
    let all_times: Vec<usize> = (0..t).collect();
    let moments = inference::project_moments(&mc, inducing, &all_times)?;
    inference::update_zeta(&mut state, &moments, inducing);
    Ok(state)
}

/// A trained model plus everything needed to use it standalone.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub state: GlobalState,
    pub inducing: InducingKernel,
    pub transform: TimeTransform,
    pub vocab_terms: Vec<String>,
    pub fingerprint: u64,
}

impl Checkpoint {
    pub fn new(
        config: ModelConfig,
        state: GlobalState,
        inducing: InducingKernel,
        corpus: &EncodedCorpus,
    ) -> Self {
        Checkpoint {
            config,
            state,
            inducing,
            transform: corpus.transform,
            vocab_terms: corpus.vocab.terms().to_vec(),
            fingerprint: corpus.fingerprint(),
        }
    }

    /// Fails with a fingerprint error when the checkpoint was trained
    /// against a different preprocessing run.
    pub fn verify_corpus(&self, corpus: &EncodedCorpus) -> Result<()> {
        let fp = corpus.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                checkpoint: self.fingerprint,
                corpus: fp,
            });
        }
        Ok(())
    }

    /// Checkpoint file: magic bytes, version, fingerprint, config as
    /// embedded key-value text, time transform, vocabulary, inducing
    /// quantities, then little-endian f64 payloads (η⁽¹⁾ dense, η⁽²⁾
    /// packed lower triangles, log ζ) and the step counter.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC.as_bytes())?;
        write_u32(w, CHECKPOINT_VERSION)?;
        write_u64(w, self.fingerprint)?;
        let config_text = toml::to_string(&self.config)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
        write_str(w, &config_text)?;
        write_f64(w, self.transform.scale)?;
        write_f64(w, self.transform.shift)?;
        write_u32(w, self.vocab_terms.len() as u32)?;
        for term in &self.vocab_terms {
            write_str(w, term)?;
        }

        let ik = &self.inducing;
        let t_hat = ik.num_inducing();
        let t = ik.num_train();
        write_u32(w, t_hat as u32)?;
        for &x in &ik.inducing_times {
            write_f64(w, x)?;
        }
        write_u32(w, t as u32)?;
        for &x in &ik.train_times {
            write_f64(w, x)?;
        }
        write_f64(w, ik.jitter)?;
        for m in [&ik.kinv, &ik.chol] {
            for &x in m.as_slice() {
                write_f64(w, x)?;
            }
        }
        for &x in ik.proj.as_slice() {
            write_f64(w, x)?;
        }
        for &x in ik.ktilde.as_slice() {
            write_f64(w, x)?;
        }

        let st = &self.state;
        write_u32(w, st.num_topics as u32)?;
        write_u32(w, st.vocab_size as u32)?;
        for e1 in &st.eta1 {
            for &x in e1.as_slice() {
                write_f64(w, x)?;
            }
        }
        for e2 in &st.eta2 {
            for i in 0..t_hat {
                for j in 0..=i {
                    write_f64(w, e2[(i, j)])?;
                }
            }
        }
        for &x in st.log_zeta.as_slice() {
            write_f64(w, x)?;
        }
        write_u64(w, st.step_count)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, CHECKPOINT_MAGIC)?;
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let fingerprint = read_u64(r)?;
        let config_text = read_str(r)?;
        let config: ModelConfig = toml::from_str(&config_text)
            .map_err(|e| Error::Config(format!("embedded config unreadable: {e}")))?;
        let transform = TimeTransform {
            scale: read_f64(r)?,
            shift: read_f64(r)?,
        };
        let n_terms = read_u32(r)? as usize;
        let vocab_terms = (0..n_terms).map(|_| read_str(r)).collect::<Result<Vec<_>>>()?;

        let t_hat = read_u32(r)? as usize;
        let inducing_times = (0..t_hat).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        let t = read_u32(r)? as usize;
        let train_times = (0..t).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        let jitter = read_f64(r)?;
        let read_matrix = |rows: usize, cols: usize, r: &mut R| -> Result<DMatrix<f64>> {
            let data = (0..rows * cols).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            Ok(DMatrix::from_column_slice(rows, cols, &data))
        };
        let kinv = read_matrix(t_hat, t_hat, r)?;
        let chol = read_matrix(t_hat, t_hat, r)?;
        let proj = read_matrix(t, t_hat, r)?;
        let ktilde = DVector::from_vec((0..t).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?);
        let inducing = InducingKernel {
            inducing_times,
            train_times,
            kinv,
            chol,
            proj,
            ktilde,
            jitter,
        };

        let num_topics = read_u32(r)? as usize;
        let vocab_size = read_u32(r)? as usize;
        let kv = num_topics * vocab_size;
        let mut eta1 = Vec::with_capacity(kv);
        for _ in 0..kv {
            eta1.push(DVector::from_vec(
                (0..t_hat).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?,
            ));
        }
        let mut eta2 = Vec::with_capacity(kv);
        for _ in 0..kv {
            let mut m = DMatrix::zeros(t_hat, t_hat);
            for i in 0..t_hat {
                for j in 0..=i {
                    let x = read_f64(r)?;
                    m[(i, j)] = x;
                    m[(j, i)] = x;
                }
            }
            eta2.push(m);
        }
        let zeta_data = (0..num_topics * t).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        let log_zeta = DMatrix::from_column_slice(num_topics, t, &zeta_data);
        let step_count = read_u64(r)?;

        Ok(Checkpoint {
            config,
            state: GlobalState {
                num_topics,
                vocab_size,
                eta1,
                eta2,
                log_zeta,
                step_count,
            },
            inducing,
            transform,
            vocab_terms,
            fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }
}

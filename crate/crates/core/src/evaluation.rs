//! Model consumption: topic snapshots at arbitrary times, per-word
//! trajectories, top-word rankings, and held-out perplexity by document
//! completion.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::corpus::{EncodedCorpus, TimeTransform};
use crate::error::{Error, Result};
use crate::kernels::{cross_row, InducingKernel, KernelSpec};
use crate::math::{digamma, softmax_in_place};
use crate::state::{seeded_rng, GlobalState, ModelConfig, STREAM_EVAL};

/// Topic-by-word probabilities at one time point.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicSnapshot {
    /// The query time on the original (raw) scale.
    pub time: f64,
    /// K×V, each row a probability simplex.
    pub probs: DMatrix<f64>,
}

/// Posterior means μ_kw = (−2η⁽²⁾)⁻¹η⁽¹⁾, indexed k·V + w.
pub fn posterior_means(state: &GlobalState) -> Result<Vec<DVector<f64>>> {
    state
        .eta1
        .iter()
        .zip(&state.eta2)
        .enumerate()
        .map(|(i, (e1, e2))| {
            let chol = Cholesky::new(e2 * -2.0).ok_or_else(|| {
                Error::Numeric(format!("eta2 lost negative definiteness at flat index {i}"))
            })?;
            Ok(chol.solve(e1))
        })
        .collect()
}

/// The single projection-and-softmax path both `topics_at_time` and
/// `word_trajectory` use, so the two agree bit for bit.
fn snapshot_from_means(
    means: &[DVector<f64>],
    num_topics: usize,
    vocab_size: usize,
    inducing: &InducingKernel,
    kernel: &KernelSpec,
    transform: &TimeTransform,
    raw_time: f64,
) -> Result<TopicSnapshot> {
    let tau = transform.normalize(raw_time);
    let (a, _) = cross_row(kernel, inducing, tau)?;
    let mut probs = DMatrix::zeros(num_topics, vocab_size);
    let mut row = vec![0.0; vocab_size];
    for k in 0..num_topics {
        for (w, r) in row.iter_mut().enumerate() {
            *r = a.dot(&means[k * vocab_size + w]);
        }
        softmax_in_place(&mut row);
        for (w, &p) in row.iter().enumerate() {
            probs[(k, w)] = p;
        }
    }
    Ok(TopicSnapshot {
        time: raw_time,
        probs,
    })
}

/// Softmax of the predictive mean trajectory at `raw_time`
/// (normalized internally; predictive variance is deliberately ignored).
pub fn topics_at_time(
    state: &GlobalState,
    inducing: &InducingKernel,
    kernel: &KernelSpec,
    transform: &TimeTransform,
    raw_time: f64,
) -> Result<TopicSnapshot> {
    let means = posterior_means(state)?;
    snapshot_from_means(
        &means,
        state.num_topics,
        state.vocab_size,
        inducing,
        kernel,
        transform,
        raw_time,
    )
}

/// One row of a trajectory table: each requested word's probability in
/// one topic at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    /// Raw-scale time.
    pub time: f64,
    /// Aligned with the requested word list.
    pub probs: Vec<f64>,
}

/// Resolves a word against the vocabulary or fails with near matches
/// (shared-prefix suggestions, then closest alphabetical neighbors).
pub fn resolve_word(terms: &[String], word: &str) -> Result<usize> {
    if let Ok(i) = terms.binary_search_by(|t| t.as_str().cmp(word)) {
        return Ok(i);
    }
    let prefix: String = word.chars().take(3).collect();
    let mut near: Vec<String> = terms
        .iter()
        .filter(|t| !prefix.is_empty() && t.starts_with(&prefix))
        .take(5)
        .cloned()
        .collect();
    if near.is_empty() {
        let at = terms.partition_point(|t| t.as_str() < word);
        for i in [at.wrapping_sub(1), at] {
            if let Some(t) = terms.get(i) {
                near.push(t.clone());
            }
        }
    }
    Err(Error::UnknownWord {
        word: word.to_string(),
        near,
    })
}

/// Probability series of the requested words within one topic over a time
/// grid (raw scale). Output is sorted by time.
#[allow(clippy::too_many_arguments)]
pub fn word_trajectory(
    state: &GlobalState,
    inducing: &InducingKernel,
    kernel: &KernelSpec,
    transform: &TimeTransform,
    terms: &[String],
    topic: usize,
    words: &[String],
    time_grid: &[f64],
) -> Result<Vec<TrajectoryPoint>> {
    if topic >= state.num_topics {
        return Err(Error::Argument(format!(
            "topic {topic} out of range 0..{}",
            state.num_topics
        )));
    }
    if terms.len() != state.vocab_size {
        return Err(Error::Argument(format!(
            "{} vocabulary terms for a state over {} words",
            terms.len(),
            state.vocab_size
        )));
    }
    let indices = words
        .iter()
        .map(|w| resolve_word(terms, w))
        .collect::<Result<Vec<_>>>()?;
    let means = posterior_means(state)?;
    let mut grid: Vec<f64> = time_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.iter()
        .map(|&raw_time| {
            let snap = snapshot_from_means(
                &means,
                state.num_topics,
                state.vocab_size,
                inducing,
                kernel,
                transform,
                raw_time,
            )?;
            Ok(TrajectoryPoint {
                time: raw_time,
                probs: indices.iter().map(|&w| snap.probs[(topic, w)]).collect(),
            })
        })
        .collect()
}

/// The `n` highest-probability words of one topic, ties broken
/// lexicographically.
pub fn top_words(
    snapshot: &TopicSnapshot,
    terms: &[String],
    topic: usize,
    n: usize,
) -> Result<Vec<(String, f64)>> {
    let v = snapshot.probs.ncols();
    if topic >= snapshot.probs.nrows() {
        return Err(Error::Argument(format!(
            "topic {topic} out of range 0..{}",
            snapshot.probs.nrows()
        )));
    }
    if n == 0 || n > v {
        return Err(Error::Argument(format!("n = {n} out of range 1..={v}")));
    }
    if terms.len() != v {
        return Err(Error::Argument(format!(
            "{} vocabulary terms for a snapshot over {v} words",
            terms.len()
        )));
    }
    let mut ranked: Vec<usize> = (0..v).collect();
    ranked.sort_by(|&a, &b| {
        snapshot.probs[(topic, b)]
            .partial_cmp(&snapshot.probs[(topic, a)])
            .unwrap()
            .then_with(|| terms[a].cmp(&terms[b]))
    });
    Ok(ranked
        .into_iter()
        .take(n)
        .map(|w| (terms[w].clone(), snapshot.probs[(topic, w)]))
        .collect())
}

/// Held-out perplexity result with skip accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub docs_evaluated: usize,
    pub docs_skipped: usize,
    pub eval_tokens: u64,
}

/// Document-completion held-out perplexity.
///
/// Each test document's tokens are shuffled by a per-document seeded RNG
/// and split by alternate interleave; θ̂ is fitted on the observe half by
/// the φ/λ iteration against the topic snapshot at the document's
/// timestamp, and the eval half is scored under
/// p(w) = Σ_k θ̂_k·probs_kw. Documents with fewer than two tokens in
/// either half are skipped and counted.
pub fn heldout_perplexity(
    test: &EncodedCorpus,
    state: &GlobalState,
    inducing: &InducingKernel,
    kernel: &KernelSpec,
    config: &ModelConfig,
    seed: u64,
) -> Result<PerplexityReport> {
    if test.num_docs() == 0 {
        return Err(Error::Argument("test corpus is empty".into()));
    }
    if test.num_terms() != state.vocab_size {
        return Err(Error::Argument(format!(
            "test corpus has {} terms, state expects {}",
            test.num_terms(),
            state.vocab_size
        )));
    }
    let k_topics = state.num_topics;
    let alpha = config.alpha.as_vector(k_topics)?;
    let means = posterior_means(state)?;

    // One log-probability table per distinct test time.
    let log_probs: Vec<DMatrix<f64>> = test
        .unique_times
        .iter()
        .map(|&tau| {
            let snap = snapshot_from_means(
                &means,
                k_topics,
                state.vocab_size,
                inducing,
                kernel,
                // times in EncodedCorpus are already normalized
                &TimeTransform { scale: 1.0, shift: 0.0 },
                tau,
            )?;
            Ok(snap.probs.map(f64::ln))
        })
        .collect::<Result<_>>()?;

    // (log p(eval half), #eval tokens) per doc, or None when skipped.
    let per_doc: Vec<Option<(f64, u64)>> = test
        .docs
        .par_iter()
        .enumerate()
        .map(|(d, doc)| {
            let mut tokens: Vec<u32> = Vec::with_capacity(doc.total_count() as usize);
            for &(w, n) in &doc.counts {
                tokens.extend(std::iter::repeat_n(w, n as usize));
            }
            // distinct stream per document so parallel order is irrelevant
            let mut rng = seeded_rng(seed, STREAM_EVAL + 8 * d as u64);
            tokens.shuffle(&mut rng);
            let observe: Vec<u32> = tokens.iter().copied().step_by(2).collect();
            let eval: Vec<u32> = tokens.iter().copied().skip(1).step_by(2).collect();
            if observe.len() < 2 || eval.len() < 2 {
                return None;
            }
            let lp = &log_probs[doc.time_index];

            // fold-in: φ/λ iteration with fixed log-topic scores
            let mut counts: Vec<(u32, u32)> = Vec::new();
            let mut sorted = observe.clone();
            sorted.sort_unstable();
            for &w in &sorted {
                match counts.last_mut() {
                    Some(last) if last.0 == w => last.1 += 1,
                    _ => counts.push((w, 1)),
                }
            }
            let n_obs: f64 = observe.len() as f64;
            let mut lambda = alpha.add_scalar(n_obs / k_topics as f64);
            for _ in 0..config.local_max_iters.max(1) {
                let lambda0: f64 = lambda.sum();
                let dig0 = digamma(lambda0);
                let dig: Vec<f64> = lambda.iter().map(|&l| digamma(l) - dig0).collect();
                let mut next = alpha.clone();
                for &(w, n) in &counts {
                    let mut scores: Vec<f64> =
                        (0..k_topics).map(|k| lp[(k, w as usize)] + dig[k]).collect();
                    softmax_in_place(&mut scores);
                    for k in 0..k_topics {
                        next[k] += n as f64 * scores[k];
                    }
                }
                let delta: f64 = (0..k_topics)
                    .map(|k| (next[k] - lambda[k]).abs())
                    .sum::<f64>()
                    / k_topics as f64;
                lambda = next;
                if delta < config.local_tol {
                    break;
                }
            }
            let theta = &lambda / lambda.sum();

            let log_lik: f64 = eval
                .iter()
                .map(|&w| {
                    (0..k_topics)
                        .map(|k| theta[k] * lp[(k, w as usize)].exp())
                        .sum::<f64>()
                        .ln()
                })
                .sum();
            Some((log_lik, eval.len() as u64))
        })
        .collect();

    let mut total_log_lik = 0.0;
    let mut eval_tokens = 0u64;
    let mut docs_evaluated = 0;
    let mut docs_skipped = 0;
    for entry in per_doc {
        match entry {
            Some((ll, n)) => {
                total_log_lik += ll;
                eval_tokens += n;
                docs_evaluated += 1;
            }
            None => docs_skipped += 1,
        }
    }
    if eval_tokens == 0 {
        return Err(Error::Pipeline(
            "every test document was skipped (all shorter than 4 tokens)".into(),
        ));
    }
    let perplexity = (-total_log_lik / eval_tokens as f64).exp();
    if !perplexity.is_finite() {
        return Err(Error::Numeric("non-finite perplexity".into()));
    }
    Ok(PerplexityReport {
        perplexity,
        docs_evaluated,
        docs_skipped,
        eval_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, encode, RawDocument, ScoreFilter};
    use crate::kernels::{build_inducing, KernelSpec};
    use crate::state::Alpha;
    use approx::assert_abs_diff_eq;

    fn tiny_inducing(times: &[f64]) -> (KernelSpec, InducingKernel) {
        let spec = KernelSpec::ou(1.0, 0.5);
        let ik = build_inducing(&spec, times, times, 1e-10).unwrap();
        (spec, ik)
    }

    fn zero_mean_state(k: usize, v: usize, ik: &InducingKernel) -> GlobalState {
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

    fn identity_transform() -> TimeTransform {
        TimeTransform { scale: 1.0, shift: 0.0 }
    }

    #[test]
    fn uniform_topics_from_zero_means() {
        let (spec, ik) = tiny_inducing(&[0.2, 0.5, 0.8]);
        let state = zero_mean_state(2, 4, &ik);
        let snap =
            topics_at_time(&state, &ik, &spec, &identity_transform(), 0.5).unwrap();
        for k in 0..2 {
            let mut sum = 0.0;
            for w in 0..4 {
                assert_abs_diff_eq!(snap.probs[(k, w)], 0.25, epsilon = 1e-12);
                sum += snap.probs[(k, w)];
            }
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn snapshot_at_training_time_is_softmax_of_mu() {
        let times = [0.25, 0.5, 0.75];
        let (spec, ik) = tiny_inducing(&times);
        let mut state = zero_mean_state(2, 3, &ik);
        // μ_(0,w) at the second inducing coordinate: set via η¹ = K⁻¹μ
        let mut mu = DVector::zeros(3);
        mu[1] = 1.3;
        state.eta1[0] = &ik.kinv * &mu;
        state.eta1[1] = &ik.kinv * (&mu * 0.4);
        let snap = topics_at_time(&state, &ik, &spec, &identity_transform(), 0.5).unwrap();
        // unit projection row at a training time that is an inducing time
        let mut expect = [1.3, 0.4 * 1.3, 0.0];
        softmax_in_place(&mut expect);
        for w in 0..3 {
            assert_abs_diff_eq!(snap.probs[(0, w)], expect[w], epsilon = 1e-8);
        }
    }

    #[test]
    fn trajectory_matches_snapshot_and_flat_for_constant_mean() {
        let times = [0.25, 0.5, 0.75];
        let (spec, ik) = tiny_inducing(&times);
        let mut state = zero_mean_state(2, 3, &ik);
        let mu = DVector::from_vec(vec![0.3, -0.2, 0.8]);
        state.eta1[2] = &ik.kinv * &mu;
        let terms: Vec<String> = ["aa", "bb", "cc"].map(String::from).to_vec();
        let tr = word_trajectory(
            &state,
            &ik,
            &spec,
            &identity_transform(),
            &terms,
            0,
            &["bb".into(), "aa".into()],
            &[0.5],
        )
        .unwrap();
        let snap = topics_at_time(&state, &ik, &spec, &identity_transform(), 0.5).unwrap();
        assert_eq!(tr[0].probs[0], snap.probs[(0, 1)]);
        assert_eq!(tr[0].probs[1], snap.probs[(0, 0)]);

        // zero (constant) means → flat trajectory
        let flat = word_trajectory(
            &state,
            &ik,
            &spec,
            &identity_transform(),
            &terms,
            1,
            &["cc".into()],
            &[0.3, 0.5, 0.9],
        )
        .unwrap();
        assert!(flat.windows(2).all(|w| w[0].time < w[1].time));
        for p in &flat {
            assert_abs_diff_eq!(p.probs[0], 1.0 / 3.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn unknown_word_lists_near_matches() {
        let terms: Vec<String> = ["market", "mars", "mouse"].map(String::from).to_vec();
        let mut sorted = terms.clone();
        sorted.sort();
        let err = resolve_word(&sorted, "marx").unwrap_err();
        match err {
            Error::UnknownWord { word, near } => {
                assert_eq!(word, "marx");
                assert!(near.contains(&"market".to_string()));
                assert!(near.contains(&"mars".to_string()));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn top_words_tie_break_and_permutation() {
        let (spec, ik) = tiny_inducing(&[0.2, 0.8]);
        let state = zero_mean_state(2, 4, &ik);
        let snap = topics_at_time(&state, &ik, &spec, &identity_transform(), 0.4).unwrap();
        let terms: Vec<String> = ["dd", "bb", "aa", "cc"].map(String::from).to_vec();
        let top = top_words(&snap, &terms, 0, 2).unwrap();
        assert_eq!(top[0].0, "aa");
        assert_eq!(top[1].0, "bb");
        assert_abs_diff_eq!(top[0].1, 0.25, epsilon = 1e-12);
        let all = top_words(&snap, &terms, 1, 4).unwrap();
        let mut words: Vec<String> = all.iter().map(|(w, _)| w.clone()).collect();
        words.sort();
        assert_eq!(words, {
            let mut t = terms.clone();
            t.sort();
            t
        });
        assert!(top_words(&snap, &terms, 0, 0).is_err());
        assert!(top_words(&snap, &terms, 0, 5).is_err());
    }

    #[test]
    fn spiked_word_ranks_first() {
        let (spec, ik) = tiny_inducing(&[0.2, 0.8]);
        let mut state = zero_mean_state(2, 4, &ik);
        let mu = DVector::from_element(2, 3.0);
        let spike = state.idx(0, 2);
        state.eta1[spike] = &ik.kinv * &mu;
        let snap = topics_at_time(&state, &ik, &spec, &identity_transform(), 0.5).unwrap();
        let terms: Vec<String> = ["aa", "bb", "cc", "dd"].map(String::from).to_vec();
        let top = top_words(&snap, &terms, 0, 1).unwrap();
        assert_eq!(top[0].0, "cc");
    }

    fn test_corpus(times: usize, docs_per_time: usize, text: &str) -> EncodedCorpus {
        let docs: Vec<RawDocument> = (0..times)
            .flat_map(|t| {
                (0..docs_per_time).map(move |d| RawDocument {
                    id: format!("{t}-{d}"),
                    timestamp: t as f64,
                    text: text.to_string(),
                })
            })
            .collect();
        let vocab = build_vocabulary(
            &docs,
            &Default::default(),
            1,
            ScoreFilter::Threshold(f64::MIN),
        )
        .unwrap();
        encode(&docs, &vocab, 4).unwrap().0
    }

    fn eval_config(k: usize) -> ModelConfig {
        ModelConfig {
            num_topics: k,
            alpha: Alpha::Symmetric(0.5),
            kernel: KernelSpec::ou(1.0, 0.5),
            num_inducing: 2,
            inducing_placement: Default::default(),
            jitter: Some(1e-10),
            local_max_iters: 30,
            local_tol: 1e-6,
            step_tau0: 1.0,
            step_decay: 0.7,
            batch_size: 4,
            seed: 0,
        }
    }

    #[test]
    fn uniform_topics_give_vocabulary_perplexity() {
        let corpus = test_corpus(3, 2, "aa bb cc dd ee aa bb cc dd ee");
        let v = corpus.num_terms();
        let (spec, ik) = tiny_inducing(&corpus.unique_times.clone());
        let state = zero_mean_state(2, v, &ik);
        let report =
            heldout_perplexity(&corpus, &state, &ik, &spec, &eval_config(2), 7).unwrap();
        assert_abs_diff_eq!(report.perplexity, v as f64, epsilon = 1e-9);
        assert_eq!(report.docs_skipped, 0);
        assert_eq!(report.docs_evaluated, corpus.num_docs());
        assert!(report.perplexity >= 1.0);
    }

    #[test]
    fn single_word_vocabulary_gives_perplexity_one() {
        let corpus = test_corpus(2, 2, "aa aa aa aa aa aa");
        assert_eq!(corpus.num_terms(), 1);
        let (spec, ik) = tiny_inducing(&corpus.unique_times.clone());
        let state = zero_mean_state(2, 1, &ik);
        let report =
            heldout_perplexity(&corpus, &state, &ik, &spec, &eval_config(2), 7).unwrap();
        assert_abs_diff_eq!(report.perplexity, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn short_documents_are_skipped() {
        // 3 tokens: observe half gets 2, eval half gets 1 (< 2) → skipped
        let mut corpus = test_corpus(2, 2, "aa bb cc dd");
        corpus.docs[0].counts = vec![(0, 2), (1, 1)];
        let (spec, ik) = tiny_inducing(&corpus.unique_times.clone());
        let state = zero_mean_state(2, corpus.num_terms(), &ik);
        let report =
            heldout_perplexity(&corpus, &state, &ik, &spec, &eval_config(2), 7).unwrap();
        assert_eq!(report.docs_skipped, 1);
        assert_eq!(report.docs_evaluated, corpus.num_docs() - 1);
    }

    #[test]
    fn perplexity_deterministic_across_runs() {
        let corpus = test_corpus(3, 3, "aa bb cc dd ee ff gg aa bb cc");
        let (spec, ik) = tiny_inducing(&corpus.unique_times.clone());
        let mut state = zero_mean_state(2, corpus.num_terms(), &ik);
        // non-trivial means so θ̂ fitting matters
        for i in 0..state.eta1.len() {
            let mu = DVector::from_fn(ik.num_inducing(), |r, _| ((i + r) as f64 * 0.37).sin());
            state.eta1[i] = &ik.kinv * mu;
        }
        let a = heldout_perplexity(&corpus, &state, &ik, &spec, &eval_config(2), 11).unwrap();
        let b = heldout_perplexity(&corpus, &state, &ik, &spec, &eval_config(2), 11).unwrap();
        assert_eq!(a, b);
        let c = heldout_perplexity(&corpus, &state, &ik, &spec, &eval_config(2), 12).unwrap();
        assert!(a.perplexity != c.perplexity || a.eval_tokens == c.eval_tokens);
    }
}

//! Corpus ingestion: tokenization, vocabulary filtering, bag-of-words
//! encoding, timestamp splits, and minibatch sampling.
//!
//! The filtering order is fixed: stop words → minimum corpus frequency →
//! tf-idf score threshold → document-length filter. Changing the order
//! changes results.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::*;
use crate::error::{Error, Result};

const CORPUS_MAGIC: &str = "GDTMCORP";
const CORPUS_VERSION: u32 = 1;

/// A raw time-stamped input document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub timestamp: f64,
    pub text: String,
}

/// Unicode-aware lowercasing, split on non-alphanumeric, tokens shorter
/// than two characters dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_owned)
        .collect()
}

/// Corpus-level word score: (n_w / M) · ln(D / df_w).
pub fn tfidf_score(n_w: u64, total_tokens: u64, doc_count: u64, df_w: u64) -> Result<f64> {
    if total_tokens == 0 || df_w == 0 {
        return Err(Error::Domain(format!(
            "tfidf_score requires positive counts (M={total_tokens}, df={df_w})"
        )));
    }
    if df_w > doc_count {
        return Err(Error::Domain(format!(
            "document frequency {df_w} exceeds document count {doc_count}"
        )));
    }
    Ok(n_w as f64 / total_tokens as f64 * (doc_count as f64 / df_w as f64).ln())
}

/// How the tf-idf score shrinks the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreFilter {
    /// Keep terms with score ≥ the threshold.
    Threshold(f64),
    /// Keep the highest-scoring `n` terms (ties broken lexicographically).
    TopTerms(usize),
}

impl Default for ScoreFilter {
    fn default() -> Self {
        ScoreFilter::TopTerms(20_000)
    }
}

/// Filtered vocabulary with the corpus statistics behind its scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
    /// M: total token count after stop-word removal.
    pub total_tokens: u64,
    /// D: number of input documents.
    pub doc_count: u64,
    /// n_w per retained term.
    pub term_freq: Vec<u64>,
    /// df_w per retained term.
    pub doc_freq: Vec<u64>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn term(&self, idx: usize) -> &str {
        &self.terms[idx]
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    fn from_terms(
        terms: Vec<String>,
        total_tokens: u64,
        doc_count: u64,
        term_freq: Vec<u64>,
        doc_freq: Vec<u64>,
    ) -> Self {
        let index = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            terms,
            index,
            total_tokens,
            doc_count,
            term_freq,
            doc_freq,
        }
    }
}

/// Builds the vocabulary with the fixed filtering order
/// (stop words → min_count → tf-idf).
pub fn build_vocabulary(
    docs: &[RawDocument],
    stopwords: &HashSet<String>,
    min_count: u64,
    filter: ScoreFilter,
) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::Argument("min_count must be >= 1".into()));
    }
    // Parallel count-reduce; integer merges make the result order-independent.
    let (counts, total_tokens) = docs
        .par_iter()
        .fold(
            || (HashMap::<String, (u64, u64)>::new(), 0u64),
            |(mut counts, mut total), doc| {
                let mut seen: HashMap<String, u64> = HashMap::new();
                for tok in tokenize(&doc.text) {
                    if stopwords.contains(&tok) {
                        continue;
                    }
                    *seen.entry(tok).or_insert(0) += 1;
                }
                for (tok, n) in seen {
                    total += n;
                    let e = counts.entry(tok).or_insert((0, 0));
                    e.0 += n;
                    e.1 += 1;
                }
                (counts, total)
            },
        )
        .reduce(
            || (HashMap::new(), 0),
            |(mut a, ta), (b, tb)| {
                for (tok, (n, df)) in b {
                    let e = a.entry(tok).or_insert((0, 0));
                    e.0 += n;
                    e.1 += df;
                }
                (a, ta + tb)
            },
        );

    let doc_count = docs.len() as u64;
    if total_tokens == 0 {
        return Err(Error::Pipeline("no tokens survive stop-word removal".into()));
    }

    let mut scored: Vec<(String, u64, u64, f64)> = counts
        .into_iter()
        .filter(|(_, (n, _))| *n >= min_count)
        .map(|(term, (n, df))| {
            let score = tfidf_score(n, total_tokens, doc_count, df)?;
            Ok((term, n, df, score))
        })
        .collect::<Result<_>>()?;

    let retained: Vec<(String, u64, u64)> = match filter {
        ScoreFilter::Threshold(th) => scored
            .into_iter()
            .filter(|(_, _, _, s)| *s >= th)
            .map(|(t, n, df, _)| (t, n, df))
            .collect(),
        ScoreFilter::TopTerms(k) => {
            scored.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap().then_with(|| a.0.cmp(&b.0)));
            scored
                .into_iter()
                .take(k)
                .map(|(t, n, df, _)| (t, n, df))
                .collect()
        }
    };

    if retained.is_empty() {
        return Err(Error::Pipeline(
            "vocabulary is empty after frequency and score filters".into(),
        ));
    }

    let mut retained = retained;
    retained.sort_by(|a, b| a.0.cmp(&b.0));
    let (terms, freqs): (Vec<_>, Vec<_>) =
        retained.into_iter().map(|(t, n, df)| (t, (n, df))).unzip();
    let (term_freq, doc_freq) = freqs.into_iter().unzip();
    Ok(Vocabulary::from_terms(
        terms,
        total_tokens,
        doc_count,
        term_freq,
        doc_freq,
    ))
}

/// Affine map from raw timestamps onto [ε, 1] with ε = 1/(2T).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeTransform {
    pub scale: f64,
    pub shift: f64,
}

impl TimeTransform {
    fn fit(raw_min: f64, raw_max: f64, num_times: usize) -> Self {
        let eps = 1.0 / (2.0 * num_times as f64);
        if raw_max > raw_min {
            let scale = (1.0 - eps) / (raw_max - raw_min);
            TimeTransform {
                scale,
                shift: eps - scale * raw_min,
            }
        } else {
            // Degenerate single timestamp: map it to 1.
            TimeTransform {
                scale: 1.0,
                shift: 1.0 - raw_min,
            }
        }
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        self.scale * raw + self.shift
    }

    pub fn denormalize(&self, norm: f64) -> f64 {
        (norm - self.shift) / self.scale
    }
}

/// One encoded document: a time index and sparse word counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDoc {
    pub time_index: usize,
    /// (word index, count), ascending in word index.
    pub counts: Vec<(u32, u32)>,
}

impl EncodedDoc {
    /// N_d, the effective document length.
    pub fn total_count(&self) -> u64 {
        self.counts.iter().map(|&(_, n)| n as u64).sum()
    }
}

/// Counts reported by [`encode`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EncodeStats {
    pub input_docs: usize,
    pub kept_docs: usize,
    pub dropped_short_docs: usize,
    pub tokens_encoded: u64,
    pub tokens_out_of_vocabulary: u64,
    pub pruned_terms: usize,
}

/// Bag-of-words corpus aligned to a sorted list of unique timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCorpus {
    pub vocab: Vocabulary,
    pub transform: TimeTransform,
    /// Normalized, strictly ascending.
    pub unique_times: Vec<f64>,
    pub docs: Vec<EncodedDoc>,
}

impl EncodedCorpus {
    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn num_terms(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_times(&self) -> usize {
        self.unique_times.len()
    }

    /// Document indices grouped by time index.
    pub fn docs_by_time(&self) -> Vec<Vec<usize>> {
        let mut by_time = vec![Vec::new(); self.num_times()];
        for (d, doc) in self.docs.iter().enumerate() {
            by_time[doc.time_index].push(d);
        }
        by_time
    }

    /// FNV-1a over the vocabulary and time transform; identifies the
    /// preprocessing a model was trained against (splits of the same
    /// corpus share it).
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.update(&(self.vocab.len() as u64).to_le_bytes());
        for term in self.vocab.terms() {
            h.update(term.as_bytes());
            h.update(&[0xff]);
        }
        h.update(&self.transform.scale.to_le_bytes());
        h.update(&self.transform.shift.to_le_bytes());
        h.finish()
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x1_0000_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Encodes raw documents against a vocabulary, dropping documents with an
/// effective length below `min_doc_tokens` and pruning vocabulary terms
/// that no retained document uses.
pub fn encode(
    docs: &[RawDocument],
    vocab: &Vocabulary,
    min_doc_tokens: u64,
) -> Result<(EncodedCorpus, EncodeStats)> {
    if vocab.is_empty() {
        return Err(Error::Argument("vocabulary is empty".into()));
    }
    let mut stats = EncodeStats {
        input_docs: docs.len(),
        ..Default::default()
    };

    let mut kept: Vec<(f64, Vec<(u32, u32)>)> = Vec::new();
    for doc in docs {
        let mut counts: HashMap<u32, u32> = HashMap::new();
        let mut oov = 0u64;
        for tok in tokenize(&doc.text) {
            match vocab.index_of(&tok) {
                Some(i) => *counts.entry(i as u32).or_insert(0) += 1,
                None => oov += 1,
            }
        }
        stats.tokens_out_of_vocabulary += oov;
        let total: u64 = counts.values().map(|&n| n as u64).sum();
        if total < min_doc_tokens {
            stats.dropped_short_docs += 1;
            continue;
        }
        stats.tokens_encoded += total;
        let mut sparse: Vec<(u32, u32)> = counts.into_iter().collect();
        sparse.sort_unstable();
        kept.push((doc.timestamp, sparse));
    }
    if kept.is_empty() {
        return Err(Error::Pipeline(format!(
            "no documents survive the length filter (min_doc_tokens = {min_doc_tokens})"
        )));
    }
    stats.kept_docs = kept.len();

    // Prune vocabulary terms unused by the retained documents.
    let mut used = vec![false; vocab.len()];
    for (_, counts) in &kept {
        for &(w, _) in counts {
            used[w as usize] = true;
        }
    }
    let mut remap = vec![u32::MAX; vocab.len()];
    let mut terms = Vec::new();
    let mut term_freq = Vec::new();
    let mut doc_freq = Vec::new();
    for (old, &u) in used.iter().enumerate() {
        if u {
            remap[old] = terms.len() as u32;
            terms.push(vocab.terms[old].clone());
            term_freq.push(vocab.term_freq[old]);
            doc_freq.push(vocab.doc_freq[old]);
        }
    }
    stats.pruned_terms = vocab.len() - terms.len();
    let pruned_vocab = Vocabulary::from_terms(
        terms,
        vocab.total_tokens,
        vocab.doc_count,
        term_freq,
        doc_freq,
    );

    let mut raw_times: Vec<f64> = kept.iter().map(|&(t, _)| t).collect();
    raw_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    raw_times.dedup();
    let transform = TimeTransform::fit(raw_times[0], raw_times[raw_times.len() - 1], raw_times.len());
    let unique_times: Vec<f64> = raw_times.iter().map(|&t| transform.normalize(t)).collect();

    let docs = kept
        .into_iter()
        .map(|(raw_time, counts)| {
            let time_index = raw_times
                .binary_search_by(|probe| probe.partial_cmp(&raw_time).unwrap())
                .expect("timestamp collected above");
            let counts = counts
                .into_iter()
                .map(|(w, n)| (remap[w as usize], n))
                .collect();
            EncodedDoc { time_index, counts }
        })
        .collect();

    Ok((
        EncodedCorpus {
            vocab: pruned_vocab,
            transform,
            unique_times,
            docs,
        },
        stats,
    ))
}

/// Splits by unique timestamps: a seeded uniform subset of
/// ⌈train_fraction·T⌉ timestamps defines the training side; every
/// document at a timestamp goes to the same side.
pub fn split_by_timestamps(
    corpus: &EncodedCorpus,
    train_fraction: f64,
    seed: u64,
) -> Result<(EncodedCorpus, EncodedCorpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let t = corpus.num_times();
    if t < 2 {
        return Err(Error::Argument("need at least 2 unique timestamps to split".into()));
    }
    let n_train = (train_fraction * t as f64).ceil() as usize;
    if n_train == 0 || n_train >= t {
        return Err(Error::Pipeline(format!(
            "split leaves one side without timestamps (T = {t}, train = {n_train})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, t, n_train);
    let mut in_train = vec![false; t];
    for i in chosen {
        in_train[i] = true;
    }

    let take = |want_train: bool| -> EncodedCorpus {
        let mut remap = vec![usize::MAX; t];
        let mut unique_times = Vec::new();
        for (i, &flag) in in_train.iter().enumerate() {
            if flag == want_train {
                remap[i] = unique_times.len();
                unique_times.push(corpus.unique_times[i]);
            }
        }
        let docs = corpus
            .docs
            .iter()
            .filter(|d| in_train[d.time_index] == want_train)
            .map(|d| EncodedDoc {
                time_index: remap[d.time_index],
                counts: d.counts.clone(),
            })
            .collect();
        EncodedCorpus {
            vocab: corpus.vocab.clone(),
            transform: corpus.transform,
            unique_times,
            docs,
        }
    };

    let train = take(true);
    let test = take(false);
    if train.docs.is_empty() || test.docs.is_empty() {
        return Err(Error::Pipeline("split leaves one side without documents".into()));
    }
    Ok((train, test))
}

/// Uniform sample of document indices without replacement.
pub fn sample_minibatch<R: Rng>(
    corpus: &EncodedCorpus,
    size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let d = corpus.num_docs();
    if size == 0 || size > d {
        return Err(Error::Argument(format!(
            "minibatch size {size} out of range 1..={d}"
        )));
    }
    Ok(rand::seq::index::sample(rng, d, size).into_vec())
}

impl EncodedCorpus {
    /// Versioned little-endian binary corpus file.
    ///
    /// Layout: magic `GDTMCORP`, version u32, transform (2×f64),
    /// vocabulary (u32 V, length-prefixed UTF-8 terms, u64 M, u64 D,
    /// V×u64 n_w, V×u64 df_w), u32 T and T×f64 normalized times,
    /// u32 D and per document u32 time index, u32 nnz, nnz×(u32, u32).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CORPUS_MAGIC.as_bytes())?;
        write_u32(w, CORPUS_VERSION)?;
        write_f64(w, self.transform.scale)?;
        write_f64(w, self.transform.shift)?;
        write_u32(w, self.vocab.len() as u32)?;
        for term in self.vocab.terms() {
            write_str(w, term)?;
        }
        write_u64(w, self.vocab.total_tokens)?;
        write_u64(w, self.vocab.doc_count)?;
        for &n in &self.vocab.term_freq {
            write_u64(w, n)?;
        }
        for &df in &self.vocab.doc_freq {
            write_u64(w, df)?;
        }
        write_u32(w, self.unique_times.len() as u32)?;
        for &t in &self.unique_times {
            write_f64(w, t)?;
        }
        write_u32(w, self.docs.len() as u32)?;
        for doc in &self.docs {
            write_u32(w, doc.time_index as u32)?;
            write_u32(w, doc.counts.len() as u32)?;
            for &(word, n) in &doc.counts {
                write_u32(w, word)?;
                write_u32(w, n)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, CORPUS_MAGIC)?;
        let version = read_u32(r)?;
        if version != CORPUS_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CORPUS_VERSION,
            });
        }
        let transform = TimeTransform {
            scale: read_f64(r)?,
            shift: read_f64(r)?,
        };
        let v = read_u32(r)? as usize;
        let terms = (0..v).map(|_| read_str(r)).collect::<Result<Vec<_>>>()?;
        let total_tokens = read_u64(r)?;
        let doc_count = read_u64(r)?;
        let term_freq = (0..v).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
        let doc_freq = (0..v).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_terms(terms, total_tokens, doc_count, term_freq, doc_freq);
        let t = read_u32(r)? as usize;
        let unique_times = (0..t).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        let d = read_u32(r)? as usize;
        let mut docs = Vec::with_capacity(d);
        for _ in 0..d {
            let time_index = read_u32(r)? as usize;
            if time_index >= t {
                return Err(Error::Truncated);
            }
            let nnz = read_u32(r)? as usize;
            let mut counts = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                let word = read_u32(r)?;
                if word as usize >= v {
                    return Err(Error::Truncated);
                }
                counts.push((word, read_u32(r)?));
            }
            docs.push(EncodedDoc { time_index, counts });
        }
        Ok(EncodedCorpus {
            vocab,
            transform,
            unique_times,
            docs,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn doc(id: &str, timestamp: f64, text: &str) -> RawDocument {
        RawDocument {
            id: id.into(),
            timestamp,
            text: text.into(),
        }
    }

    fn no_stopwords() -> HashSet<String> {
        HashSet::new()
    }

    #[test]
    fn tfidf_spec_examples() {
        let s = tfidf_score(10, 100, 8, 2).unwrap();
        assert_abs_diff_eq!(s, 0.1 * 4.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(tfidf_score(5, 100, 8, 8).unwrap(), 0.0);
        assert_abs_diff_eq!(
            tfidf_score(20, 100, 8, 2).unwrap(),
            2.0 * tfidf_score(10, 100, 8, 2).unwrap(),
            epsilon = 1e-12
        );
        assert!(tfidf_score(1, 0, 8, 2).is_err());
        assert!(tfidf_score(1, 10, 8, 0).is_err());
    }

    #[test]
    fn stopwords_removed() {
        let docs = vec![doc("a", 0.0, "the the cat")];
        let stop: HashSet<String> = ["the".to_string()].into_iter().collect();
        let vocab = build_vocabulary(&docs, &stop, 1, ScoreFilter::Threshold(f64::NEG_INFINITY))
            .unwrap();
        assert_eq!(vocab.terms(), &["cat".to_string()]);
    }

    #[test]
    fn min_count_boundary_empties_vocabulary() {
        let text = "apple banana ".repeat(24);
        let docs = vec![doc("a", 0.0, &text)];
        let err = build_vocabulary(&docs, &no_stopwords(), 25, ScoreFilter::default()).unwrap_err();
        assert!(matches!(err, Error::Pipeline(_)));
        // exactly at the boundary the terms survive
        let text = "apple banana ".repeat(25);
        let docs = vec![doc("a", 0.0, &text)];
        let vocab = build_vocabulary(&docs, &no_stopwords(), 25, ScoreFilter::default()).unwrap();
        assert_eq!(vocab.len(), 2);
    }

    #[test]
    fn median_threshold_matches_scan_oracle() {
        // Distinct scores via distinct frequencies and doc frequencies.
        let docs = vec![
            doc("a", 0.0, "alpha alpha alpha beta gamma delta"),
            doc("b", 1.0, "alpha beta beta gamma epsilon"),
            doc("c", 2.0, "alpha beta gamma gamma zeta zeta zeta"),
        ];
        let all = build_vocabulary(&docs, &no_stopwords(), 1, ScoreFilter::Threshold(f64::MIN))
            .unwrap();
        let mut scores: Vec<f64> = (0..all.len())
            .map(|i| {
                tfidf_score(all.term_freq[i], all.total_tokens, all.doc_count, all.doc_freq[i])
                    .unwrap()
            })
            .collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        let filtered =
            build_vocabulary(&docs, &no_stopwords(), 1, ScoreFilter::Threshold(median)).unwrap();
        // independent scan oracle
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect: HashSet<&String> = all
            .terms()
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                tfidf_score(all.term_freq[*i], all.total_tokens, all.doc_count, all.doc_freq[*i])
                    .unwrap()
                    >= median
            })
            .map(|(_, t)| t)
            .collect();
        let got: HashSet<&String> = filtered.terms().iter().collect();
        assert_eq!(got, expect);
        assert!(got.len() < all.len());
    }

    #[test]
    fn top_terms_filter_keeps_best() {
        let docs = vec![
            doc("a", 0.0, "aa aa aa aa bb bb cc"),
            doc("b", 1.0, "aa bb cc dd"),
        ];
        let vocab =
            build_vocabulary(&docs, &no_stopwords(), 1, ScoreFilter::TopTerms(2)).unwrap();
        assert_eq!(vocab.len(), 2);
    }

    #[test]
    fn encode_drops_oov_only_docs() {
        let docs = vec![
            doc("a", 0.0, "cat cat cat cat cat cat cat cat cat cat"),
            doc("b", 1.0, "dog dog dog dog dog dog dog dog dog dog"),
        ];
        let vocab = build_vocabulary(
            &docs[..1],
            &no_stopwords(),
            1,
            ScoreFilter::Threshold(f64::MIN),
        )
        .unwrap();
        let (corpus, stats) = encode(&docs, &vocab, 10).unwrap();
        assert_eq!(corpus.num_docs(), 1);
        assert_eq!(stats.dropped_short_docs, 1);
        assert_eq!(stats.tokens_out_of_vocabulary, 10);
    }

    #[test]
    fn shared_timestamp_shares_time_index() {
        let text = "cat dog bird fish mouse cat dog bird fish mouse";
        let docs = vec![doc("a", 5.0, text), doc("b", 5.0, text), doc("c", 9.0, text)];
        let vocab =
            build_vocabulary(&docs, &no_stopwords(), 1, ScoreFilter::Threshold(f64::MIN)).unwrap();
        let (corpus, _) = encode(&docs, &vocab, 10).unwrap();
        assert_eq!(corpus.num_times(), 2);
        assert_eq!(corpus.docs[0].time_index, corpus.docs[1].time_index);
        assert_ne!(corpus.docs[0].time_index, corpus.docs[2].time_index);
    }

    #[test]
    fn encode_round_trip_multiset() {
        let docs = vec![doc(
            "a",
            0.0,
            "red red green blue blue blue yellow pink pink orange orange orange",
        )];
        let vocab =
            build_vocabulary(&docs, &no_stopwords(), 1, ScoreFilter::Threshold(f64::MIN)).unwrap();
        let (corpus, _) = encode(&docs, &vocab, 10).unwrap();
        // decode counts back to a token multiset
        let mut decoded: Vec<String> = Vec::new();
        for &(w, n) in &corpus.docs[0].counts {
            for _ in 0..n {
                decoded.push(corpus.vocab.term(w as usize).to_string());
            }
        }
        decoded.sort();
        let mut expect = tokenize(docs[0].text.as_str());
        expect.sort();
        assert_eq!(decoded, expect);
    }

    #[test]
    fn time_normalization_range() {
        let text = "one two three four five six seven eight nine ten";
        let docs: Vec<RawDocument> = (0..8)
            .map(|i| doc(&format!("d{i}"), 1900.0 + 10.0 * i as f64, text))
            .collect();
        let vocab =
            build_vocabulary(&docs, &no_stopwords(), 1, ScoreFilter::Threshold(f64::MIN)).unwrap();
        let (corpus, _) = encode(&docs, &vocab, 10).unwrap();
        let eps = 1.0 / 16.0;
        assert_abs_diff_eq!(corpus.unique_times[0], eps, epsilon = 1e-12);
        assert_abs_diff_eq!(corpus.unique_times[7], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(corpus.transform.denormalize(eps), 1900.0, epsilon = 1e-9);
    }

    fn synthetic_corpus(times: usize, docs_per_time: usize) -> EncodedCorpus {
        let text = "cat dog bird fish mouse wolf bear lion tiger horse";
        let docs: Vec<RawDocument> = (0..times)
            .flat_map(|t| {
                (0..docs_per_time)
                    .map(move |d| doc(&format!("{t}-{d}"), t as f64, text))
            })
            .collect();
        let vocab =
            build_vocabulary(&docs, &no_stopwords(), 1, ScoreFilter::Threshold(f64::MIN)).unwrap();
        encode(&docs, &vocab, 10).unwrap().0
    }

    #[test]
    fn split_counts_and_determinism() {
        let corpus = synthetic_corpus(20, 2);
        let (train, test) = split_by_timestamps(&corpus, 0.85, 99).unwrap();
        assert_eq!(train.num_times(), 17);
        assert_eq!(test.num_times(), 3);
        assert_eq!(train.num_docs() + test.num_docs(), corpus.num_docs());
        let (train2, test2) = split_by_timestamps(&corpus, 0.85, 99).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        let (train3, _) = split_by_timestamps(&corpus, 0.85, 100).unwrap();
        assert_ne!(train.unique_times, train3.unique_times);
    }

    #[test]
    fn minibatch_full_size_is_permutation() {
        let corpus = synthetic_corpus(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut batch = sample_minibatch(&corpus, 15, &mut rng).unwrap();
        batch.sort_unstable();
        assert_eq!(batch, (0..15).collect::<Vec<_>>());
        assert!(sample_minibatch(&corpus, 16, &mut rng).is_err());
        assert!(sample_minibatch(&corpus, 0, &mut rng).is_err());
    }

    #[test]
    fn minibatch_reproducible() {
        let corpus = synthetic_corpus(5, 3);
        let mut a = ChaCha8Rng::seed_from_u64(8);
        let mut b = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(
            sample_minibatch(&corpus, 4, &mut a).unwrap(),
            sample_minibatch(&corpus, 4, &mut b).unwrap()
        );
    }

    #[test]
    fn minibatch_uniformity() {
        // size = 1 repeated: empirical frequency within 5σ of 1/D
        let corpus = synthetic_corpus(4, 3);
        let d = corpus.num_docs();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let n = 10_000;
        let mut hits = vec![0u32; d];
        for _ in 0..n {
            hits[sample_minibatch(&corpus, 1, &mut rng).unwrap()[0]] += 1;
        }
        let p = 1.0 / d as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        for &h in &hits {
            let f = h as f64 / n as f64;
            assert!((f - p).abs() <= 5.0 * sd, "frequency {f} vs {p}");
        }
    }

    #[test]
    fn serialization_round_trip_and_determinism() {
        let corpus = synthetic_corpus(6, 2);
        let mut a = Vec::new();
        corpus.write_to(&mut a).unwrap();
        let mut b = Vec::new();
        corpus.write_to(&mut b).unwrap();
        assert_eq!(a, b);
        let back = EncodedCorpus::read_from(&mut a.as_slice()).unwrap();
        assert_eq!(corpus, back);
        // truncation error, not a crash
        let err = EncodedCorpus::read_from(&mut &a[..a.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Truncated));
        let err = EncodedCorpus::read_from(&mut &b"GDTMWRONG-----"[..]).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
    }

    #[test]
    fn fingerprint_tracks_vocabulary() {
        let corpus = synthetic_corpus(6, 2);
        let (train, test) = split_by_timestamps(&corpus, 0.5, 1).unwrap();
        assert_eq!(train.fingerprint(), test.fingerprint());
        let mut modified = corpus.clone();
        modified.vocab.terms.push("extra".into());
        modified.vocab.term_freq.push(1);
        modified.vocab.doc_freq.push(1);
        assert_ne!(corpus.fingerprint(), modified.fingerprint());
    }
}

//! Frozen TF-IDF step encoder.
//!
//! Tokens are lowercase maximal runs of word characters (alphanumerics and
//! `_`) of at least `min_token_len` characters; n-grams join consecutive
//! tokens with a single space. Features are ranked by document frequency,
//! ties broken lexicographically, and capped. IDF is smoothed:
//! `ln((1 + N) / (1 + df)) + 1`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Sparse vector as `(feature index, value)` pairs sorted by index.
pub type SparseVec = Vec<(u32, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub max_features: usize,
    pub min_df: usize,
    pub sublinear_tf: bool,
    pub min_token_len: usize,
}

impl EncoderConfig {
    /// Step encoder of the monitor path: uni+bigrams, 4096 features.
    pub fn main() -> Self {
        EncoderConfig {
            ngram_min: 1,
            ngram_max: 2,
            max_features: 4096,
            min_df: 1,
            sublinear_tf: false,
            min_token_len: 2,
        }
    }

    /// Prefix probe vectorizer: min_df 2, sublinear tf, 50000 features.
    pub fn probe() -> Self {
        EncoderConfig {
            max_features: 50_000,
            min_df: 2,
            sublinear_tf: true,
            ..Self::main()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_features == 0 {
            return Err(Error::Config("max_features must be at least 1".into()));
        }
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(Error::Config(format!(
                "invalid ngram range {}..={}",
                self.ngram_min, self.ngram_max
            )));
        }
        if self.min_df == 0 || self.min_token_len == 0 {
            return Err(Error::Config("min_df and min_token_len must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::main()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub term: String,
    pub df: usize,
    pub idf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorizerModel {
    pub config: EncoderConfig,
    /// Number of documents the model was fitted on.
    pub n_documents: usize,
    /// Features in index order.
    pub vocabulary: Vec<VocabEntry>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

pub fn tokenize(text: &str, min_len: usize) -> Vec<String> {
    let lower = text.to_lowercase();
    lower
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|tok| tok.chars().count() >= min_len)
        .map(str::to_string)
        .collect()
}

fn ngrams(tokens: &[String], lo: usize, hi: usize) -> Vec<String> {
    let mut out = Vec::new();
    for n in lo..=hi {
        if n > tokens.len() {
            break;
        }
        out.extend(tokens.windows(n).map(|w| w.join(" ")));
    }
    out
}

pub fn fit_vectorizer<S: AsRef<str>>(documents: &[S], config: EncoderConfig) -> Result<VectorizerModel> {
    config.validate()?;
    if documents.is_empty() {
        return Err(Error::invalid("cannot fit a vectorizer on an empty corpus"));
    }
    let mut df: HashMap<String, usize> = HashMap::new();
    for doc in documents {
        let mut terms = ngrams(&tokenize(doc.as_ref(), config.min_token_len), config.ngram_min, config.ngram_max);
        terms.sort_unstable();
        terms.dedup();
        for term in terms {
            *df.entry(term).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = df.into_iter().filter(|(_, d)| *d >= config.min_df).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(config.max_features);
    // Index order is lexicographic, independent of the frequency ranking.
    ranked.sort_by(|a, b| a.0.cmp(&b.0));

    let n = documents.len();
    let vocabulary = ranked
        .into_iter()
        .map(|(term, df)| VocabEntry {
            idf: ((1.0 + n as f64) / (1.0 + df as f64)).ln() + 1.0,
            term,
            df,
        })
        .collect();
    Ok(VectorizerModel::from_parts(config, n, vocabulary))
}

pub fn fit_probe_vectorizer<S: AsRef<str>>(documents: &[S]) -> Result<VectorizerModel> {
    fit_vectorizer(documents, EncoderConfig::probe())
}

impl VectorizerModel {
    fn from_parts(config: EncoderConfig, n_documents: usize, vocabulary: Vec<VocabEntry>) -> Self {
        let index = vocabulary
            .iter()
            .enumerate()
            .map(|(i, e)| (e.term.clone(), i as u32))
            .collect();
        VectorizerModel { config, n_documents, vocabulary, index }
    }

    pub fn dim(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn feature_index(&self, term: &str) -> Option<u32> {
        self.index.get(term).copied()
    }

    /// l2-normalized TF-IDF vector. Text with no in-vocabulary term maps to
    /// the zero vector.
    pub fn encode(&self, text: &str) -> SparseVec {
        let mut counts: HashMap<u32, usize> = HashMap::new();
        let terms = ngrams(
            &tokenize(text, self.config.min_token_len),
            self.config.ngram_min,
            self.config.ngram_max,
        );
        for term in terms {
            if let Some(&i) = self.index.get(&term) {
                *counts.entry(i).or_insert(0) += 1;
            }
        }
        let mut v: SparseVec = counts
            .into_iter()
            .map(|(i, c)| {
                let tf = if self.config.sublinear_tf { 1.0 + (c as f64).ln() } else { c as f64 };
                (i, tf * self.vocabulary[i as usize].idf)
            })
            .collect();
        v.sort_unstable_by_key(|&(i, _)| i);
        let norm = v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, x) in &mut v {
                *x /= norm;
            }
        }
        v
    }

    /// Digest of the canonical JSON form; used to bind monitors to their encoder.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("vectorizer serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: VectorizerModel = serde_json::from_str(text)?;
        raw.config.validate()?;
        if raw.vocabulary.iter().any(|e| !(e.idf > 0.0) || e.df == 0) {
            return Err(Error::invalid("vectorizer has non-positive idf or zero df entries"));
        }
        Ok(Self::from_parts(raw.config, raw.n_documents, raw.vocabulary))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn encode_step(model: &VectorizerModel, text: &str) -> SparseVec {
    model.encode(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms(m: &VectorizerModel) -> Vec<&str> {
        m.vocabulary.iter().map(|e| e.term.as_str()).collect()
    }

    #[test]
    fn unigrams_and_bigrams() {
        let single_char = EncoderConfig { min_token_len: 1, ..EncoderConfig::main() };
        let m = fit_vectorizer(&["a b"], single_char).unwrap();
        assert_eq!(terms(&m), vec!["a", "a b", "b"]);
        let m = fit_vectorizer(&["ab cd"], EncoderConfig::main()).unwrap();
        assert_eq!(terms(&m), vec!["ab", "ab cd", "cd"]);
    }

    #[test]
    fn default_tokenizer_drops_single_chars() {
        assert_eq!(tokenize("A b_c, DE-f g1", 2), vec!["b_c", "de", "g1"]);
    }

    #[test]
    fn frequency_cap() {
        let mut docs = Vec::new();
        for i in 0..10 {
            let mut d = vec!["xx"];
            if i < 5 {
                d.push("yy");
            }
            if i == 0 {
                d.push("zz");
            }
            docs.push(d.join("\n"));
        }
        let cfg = EncoderConfig { max_features: 2, ngram_max: 1, ..EncoderConfig::main() };
        let m = fit_vectorizer(&docs, cfg).unwrap();
        assert_eq!(terms(&m), vec!["xx", "yy"]);
    }

    #[test]
    fn ties_broken_lexicographically() {
        let cfg = EncoderConfig { max_features: 1, ngram_max: 1, ..EncoderConfig::main() };
        let m = fit_vectorizer(&["qq pp"], cfg).unwrap();
        assert_eq!(terms(&m), vec!["pp"]);
    }

    #[test]
    fn refit_identical() {
        let docs = ["alpha beta gamma", "beta gamma delta", "gamma"];
        let a = fit_vectorizer(&docs, EncoderConfig::main()).unwrap();
        let b = fit_vectorizer(&docs, EncoderConfig::main()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(fit_vectorizer(&empty, EncoderConfig::main()).is_err());
        assert!(fit_vectorizer(&["x"], EncoderConfig { max_features: 0, ..EncoderConfig::main() }).is_err());
    }

    #[test]
    fn encode_one_hot_and_empty() {
        let m = fit_vectorizer(&["alpha beta", "beta"], EncoderConfig::main()).unwrap();
        let v = m.encode("alpha zzz");
        assert_eq!(v.len(), 1);
        assert_eq!(v[0], (m.feature_index("alpha").unwrap(), 1.0));
        assert!(m.encode("").is_empty());
        assert!(m.encode("unseen words only").is_empty());
    }

    #[test]
    fn self_cosine_is_one() {
        let m = fit_vectorizer(&["alpha beta gamma", "beta beta delta"], EncoderConfig::main()).unwrap();
        let v = m.encode("beta beta gamma alpha");
        let dot: f64 = v.iter().map(|(_, x)| x * x).sum();
        assert!((dot - 1.0).abs() < 1e-12);
    }

    #[test]
    fn idf_formula() {
        let m = fit_vectorizer(&["aa bb", "aa"], EncoderConfig { ngram_max: 1, ..EncoderConfig::main() }).unwrap();
        let idf = |t: &str| m.vocabulary[m.feature_index(t).unwrap() as usize].idf;
        assert!((idf("aa") - 1.0).abs() < 1e-15);
        assert!((idf("bb") - ((3.0f64 / 2.0).ln() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn probe_min_df_and_sublinear() {
        let m = fit_probe_vectorizer(&["aa bb", "aa cc", "aa"]).unwrap();
        assert!(m.feature_index("bb").is_none());
        assert!(m.feature_index("aa").is_some());

        // Two features with equal idf: raw counts 1 and e^1 rounded can't be
        // used, so compare tf weights 1 + ln(1) = 1 and 1 + ln(3) directly.
        let m = fit_probe_vectorizer(&["xx yy", "xx yy"]).unwrap();
        let v = m.encode("xx yy yy yy");
        let (x, y) = (v[0].1, v[2].1);
        assert!((y / x - (1.0 + 3f64.ln())).abs() < 1e-12, "{v:?}");
    }

    #[test]
    fn probe_cap_respected() {
        let docs: Vec<String> = (0..300)
            .map(|i| (0..40).map(|j| format!("w{}", (i * 7 + j * 13) % 500)).collect::<Vec<_>>().join(" "))
            .collect();
        let cfg = EncoderConfig { max_features: 1000, ..EncoderConfig::probe() };
        let m = fit_vectorizer(&docs, cfg).unwrap();
        assert_eq!(m.dim(), 1000);
    }

    #[test]
    fn json_roundtrip_bit_exact() {
        let m = fit_vectorizer(&["alpha beta gamma", "beta delta", "x y z alpha"], EncoderConfig::main()).unwrap();
        let back = VectorizerModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.hash(), back.hash());
        for (a, b) in m.vocabulary.iter().zip(&back.vocabulary) {
            assert_eq!(a.idf.to_bits(), b.idf.to_bits());
        }
    }

    #[test]
    fn json_roundtrip_bit_exact_over_many_idf_values() {
        // Term k appears in the first k+1 of 997 documents, giving 300 distinct idf values.
        let docs: Vec<String> =
            (0..997).map(|d| (0..300).filter(|k| d <= *k).map(|k| format!("w{k}")).collect::<Vec<_>>().join(" ")).collect();
        let m = fit_vectorizer(&docs, EncoderConfig { ngram_max: 1, ..EncoderConfig::main() }).unwrap();
        let back = VectorizerModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m.hash(), back.hash());
        for (a, b) in m.vocabulary.iter().zip(&back.vocabulary) {
            assert_eq!(a.idf.to_bits(), b.idf.to_bits(), "{}", a.term);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::seq::SliceRandom;
        use rand::SeedableRng;

        fn doc() -> impl Strategy<Value = String> {
            prop::collection::vec(prop::sample::select(vec!["ab", "cd", "ef", "gh", "ij", "kl"]), 0..8)
                .prop_map(|w| w.join(" "))
        }

        proptest! {
            #[test]
            fn encoding_does_not_mutate(docs in prop::collection::vec(doc(), 1..10), probe in doc()) {
                let m = fit_vectorizer(&docs, EncoderConfig::main()).unwrap();
                let before = m.hash();
                let _ = m.encode(&probe);
                prop_assert_eq!(before, m.hash());
            }

            #[test]
            fn oov_tokens_ignored(docs in prop::collection::vec(doc(), 1..10), probe in doc()) {
                let m = fit_vectorizer(&docs, EncoderConfig { ngram_max: 1, ..EncoderConfig::main() }).unwrap();
                prop_assert_eq!(m.encode(&probe), m.encode(&format!("{probe} qqqq_unseen")));
            }

            #[test]
            fn order_invariant_fit(docs in prop::collection::vec(doc(), 1..12), seed in any::<u64>()) {
                let mut shuffled = docs.clone();
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let cfg = EncoderConfig { max_features: 5, ..EncoderConfig::main() };
                prop_assert_eq!(fit_vectorizer(&docs, cfg).unwrap(), fit_vectorizer(&shuffled, cfg).unwrap());
            }
        }
    }
}

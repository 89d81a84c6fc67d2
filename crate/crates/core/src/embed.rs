//! Word-embedding enhancement: build an association matrix from sentence
//! co-occurrence, mix embeddings of associated words, and augment the
//! original embeddings with the mixture.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

/// Ordered word list with a dense index.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument {
                    op: "Vocabulary::new",
                    message: format!("duplicate word {w:?}"),
                });
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn require(&self, word: &str) -> Result<usize> {
        self.get(word).ok_or_else(|| Error::UnknownWord(word.into()))
    }
}

/// What to do with corpus tokens outside the vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OovPolicy {
    /// Drop the token and count it.
    Skip,
    Error,
}

/// Row-normalized co-occurrence weights plus the sentence frequencies used
/// to damp frequent words.
#[derive(Clone, Debug)]
pub struct AssociationMatrix {
    /// [V' x V']; every row with any mass sums to one.
    pub weights: Tensor,
    /// Number of sentences containing each word.
    pub sentence_counts: Vec<usize>,
    /// Tokens dropped under [`OovPolicy::Skip`].
    pub skipped_tokens: usize,
}

/// Accumulate symmetric pair counts and normalize.
///
/// Every unordered pair of distinct words co-occurring in a sentence counts
/// once per sentence, regardless of repetition. Each row is then divided by
/// the sentence frequency of its row word and finally normalized by its sum;
/// all-zero rows stay zero.
pub fn build_association(
    corpus: &[Vec<String>],
    vocab: &Vocabulary,
    policy: OovPolicy,
) -> Result<AssociationMatrix> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument {
            op: "build_association",
            message: "empty corpus".into(),
        });
    }
    let v = vocab.len();
    let mut weights = vec![0.0; v * v];
    let mut sentence_counts = vec![0usize; v];
    let mut skipped = 0usize;
    for sentence in corpus {
        let mut ids = BTreeSet::new();
        for token in sentence {
            match vocab.get(token) {
                Some(i) => {
                    ids.insert(i);
                }
                None => match policy {
                    OovPolicy::Skip => skipped += 1,
                    OovPolicy::Error => return Err(Error::UnknownWord(token.clone())),
                },
            }
        }
        let ids: Vec<usize> = ids.into_iter().collect();
        for &i in &ids {
            sentence_counts[i] += 1;
        }
        for (a, &i) in ids.iter().enumerate() {
            for &j in &ids[a + 1..] {
                weights[i * v + j] += 1.0;
                weights[j * v + i] += 1.0;
            }
        }
    }
    for i in 0..v {
        if sentence_counts[i] > 0 {
            let d = sentence_counts[i] as f64;
            for w in &mut weights[i * v..(i + 1) * v] {
                *w /= d;
            }
        }
        let total: f64 = weights[i * v..(i + 1) * v].iter().sum();
        if total > 0.0 {
            for w in &mut weights[i * v..(i + 1) * v] {
                *w /= total;
            }
        }
    }
    Ok(AssociationMatrix {
        weights: Tensor::from_vec(vec![v, v], weights)?,
        sentence_counts,
        skipped_tokens: skipped,
    })
}

/// W' = A W: each mixed row is the association-weighted combination of
/// embedding rows, convex wherever the association row is stochastic.
pub fn mix_embeddings(assoc: &AssociationMatrix, embeddings: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    tape.matmul(&assoc.weights, embeddings)
}

/// Concatenate each model-vocabulary row of `base` with the matching row of
/// the mixed embeddings, doubling the embedding width.
pub fn augment_embeddings(
    base: &Tensor,
    mixed: &Tensor,
    model_vocab: &Vocabulary,
    extended_vocab: &Vocabulary,
) -> Result<Tensor> {
    let e = base.dim(1)?;
    if mixed.dim(1)? != e {
        return Err(Error::ShapeMismatch {
            op: "augment_embeddings",
            lhs: base.shape().to_vec(),
            rhs: mixed.shape().to_vec(),
        });
    }
    if base.dim(0)? != model_vocab.len() {
        return Err(Error::ShapeMismatch {
            op: "augment_embeddings",
            lhs: base.shape().to_vec(),
            rhs: vec![model_vocab.len(), e],
        });
    }
    let v = model_vocab.len();
    let mut data = Vec::with_capacity(v * 2 * e);
    for (i, word) in model_vocab.words().iter().enumerate() {
        let j = extended_vocab.require(word)?;
        data.extend_from_slice(&base.data()[i * e..(i + 1) * e]);
        data.extend_from_slice(&mixed.data()[j * e..(j + 1) * e]);
    }
    Tensor::from_vec(vec![v, 2 * e], data)
}

/// One sentence per line, whitespace tokenized.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab3() -> Vocabulary {
        Vocabulary::new(["red", "ball", "cube"]).unwrap()
    }

    fn sentences(raw: &[&[&str]]) -> Vec<Vec<String>> {
        raw.iter()
            .map(|s| s.iter().map(|w| w.to_string()).collect())
            .collect()
    }

    #[test]
    fn two_word_sentence_hand_case() {
        let vocab = Vocabulary::new(["a", "b"]).unwrap();
        let corpus = sentences(&[&["a", "b"]]);
        let assoc = build_association(&corpus, &vocab, OovPolicy::Error).unwrap();
        // Pre-normalization both cells were 1; each row word appears in one
        // sentence, so rows normalize to a single unit entry.
        assert_eq!(assoc.weights.at2(0, 1), 1.0);
        assert_eq!(assoc.weights.at2(1, 0), 1.0);
        assert_eq!(assoc.weights.at2(0, 0), 0.0);
    }

    #[test]
    fn single_word_sentences_leave_zero_matrix() {
        let vocab = vocab3();
        let corpus = sentences(&[&["red"], &["ball"], &["cube"], &["red"]]);
        let assoc = build_association(&corpus, &vocab, OovPolicy::Error).unwrap();
        assert!(assoc.weights.data().iter().all(|&v| v == 0.0));
        assert_eq!(assoc.sentence_counts, vec![2, 1, 1]);
    }

    #[test]
    fn frequent_word_row_is_damped() {
        // "red" appears in both sentences, so its raw row is divided by 2
        // before the sum normalization; "ball" and "cube" rows divide by 1.
        let vocab = vocab3();
        let corpus = sentences(&[&["red", "ball"], &["red", "cube"]]);
        let assoc = build_association(&corpus, &vocab, OovPolicy::Error).unwrap();
        // Row red: raw [0,1,1] / 2 then normalized -> [0, 0.5, 0.5].
        assert_eq!(assoc.weights.at2(0, 1), 0.5);
        assert_eq!(assoc.weights.at2(0, 2), 0.5);
        // Row ball: raw [1,0,0] -> [1,0,0].
        assert_eq!(assoc.weights.at2(1, 0), 1.0);
    }

    #[test]
    fn repeated_pairs_in_one_sentence_count_once() {
        let vocab = vocab3();
        let one = build_association(
            &sentences(&[&["red", "ball", "red", "ball"]]),
            &vocab,
            OovPolicy::Error,
        )
        .unwrap();
        let two = build_association(&sentences(&[&["red", "ball"]]), &vocab, OovPolicy::Error)
            .unwrap();
        assert_eq!(max_abs_diff(&one.weights, &two.weights), 0.0);
    }

    #[test]
    fn oov_policies() {
        let vocab = vocab3();
        let corpus = sentences(&[&["red", "mystery", "ball"]]);
        let skip = build_association(&corpus, &vocab, OovPolicy::Skip).unwrap();
        assert_eq!(skip.skipped_tokens, 1);
        assert_eq!(skip.weights.at2(0, 1), 1.0);
        assert!(matches!(
            build_association(&corpus, &vocab, OovPolicy::Error),
            Err(Error::UnknownWord(w)) if w == "mystery"
        ));
    }

    #[test]
    fn identity_mixing_preserves_embeddings() {
        let vocab = vocab3();
        let eye = Tensor::from_rows(&[
            &[1.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
            &[0.0, 0.0, 1.0],
        ])
        .unwrap();
        let assoc = AssociationMatrix {
            weights: eye,
            sentence_counts: vec![1; 3],
            skipped_tokens: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let mixed = mix_embeddings(&assoc, &w).unwrap();
        assert_eq!(max_abs_diff(&mixed, &w), 0.0);
        let _ = vocab;
    }

    #[test]
    fn uniform_row_mixes_to_mean() {
        let weights = Tensor::from_rows(&[
            &[0.0, 0.5, 0.5],
            &[1.0, 0.0, 0.0],
            &[1.0, 0.0, 0.0],
        ])
        .unwrap();
        let assoc = AssociationMatrix {
            weights,
            sentence_counts: vec![1; 3],
            skipped_tokens: 0,
        };
        let w = Tensor::from_rows(&[&[2.0, 4.0], &[1.0, 0.0], &[3.0, 2.0]]).unwrap();
        let mixed = mix_embeddings(&assoc, &w).unwrap();
        assert_eq!(mixed.at2(0, 0), 2.0);
        assert_eq!(mixed.at2(0, 1), 1.0);
    }

    #[test]
    fn mixing_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = 6;
        let e = 4;
        let weights = Tensor::uniform(&[v, v], 0.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[v, e], -1.0, 1.0, &mut rng);
        let assoc = AssociationMatrix {
            weights: weights.clone(),
            sentence_counts: vec![1; v],
            skipped_tokens: 0,
        };
        let mixed = mix_embeddings(&assoc, &w).unwrap();
        for i in 0..v {
            for j in 0..e {
                let mut acc = 0.0;
                for k in 0..v {
                    acc += weights.at2(i, k) * w.at2(k, j);
                }
                assert!((mixed.at2(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn augmentation_concatenates_rows() {
        let model = Vocabulary::new(["ball", "red"]).unwrap();
        let extended = Vocabulary::new(["red", "ball", "cube"]).unwrap();
        let base = Tensor::from_rows(&[&[1.0, 2.0], &[5.0, 6.0]]).unwrap();
        let mixed = Tensor::from_rows(&[&[9.0, 8.0], &[3.0, 4.0], &[7.0, 7.0]]).unwrap();
        let out = augment_embeddings(&base, &mixed, &model, &extended).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        // "ball" resolves to extended row 1.
        assert_eq!(out.data()[..4], [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(out.data()[4..], [5.0, 6.0, 9.0, 8.0]);

        let missing = Vocabulary::new(["ball", "ghost"]).unwrap();
        let err = augment_embeddings(&base, &mixed, &missing, &extended);
        assert!(matches!(err, Err(Error::UnknownWord(w)) if w == "ghost"));
    }

    #[test]
    fn rows_are_stochastic_and_deterministic() {
        let vocab = Vocabulary::new(["a", "b", "c", "d", "e"]).unwrap();
        let corpus = sentences(&[
            &["a", "b", "c"],
            &["b", "d"],
            &["a", "c", "d", "e"],
            &["e"],
            &["a", "b"],
        ]);
        let one = build_association(&corpus, &vocab, OovPolicy::Error).unwrap();
        let two = build_association(&corpus, &vocab, OovPolicy::Error).unwrap();
        assert_eq!(one.weights.data(), two.weights.data());
        for i in 0..5 {
            let row: f64 = (0..5).map(|j| one.weights.at2(i, j)).sum();
            assert!(row == 0.0 || (row - 1.0).abs() <= 1e-12);
        }
        // Convexity: mixed coordinates stay within the contributing range.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let mixed = mix_embeddings(&one, &w).unwrap();
        for i in 0..5 {
            let row: f64 = (0..5).map(|j| one.weights.at2(i, j)).sum();
            if (row - 1.0).abs() > 1e-12 {
                continue;
            }
            for j in 0..3 {
                let contributors: Vec<f64> = (0..5)
                    .filter(|&k| one.weights.at2(i, k) > 0.0)
                    .map(|k| w.at2(k, j))
                    .collect();
                let lo = contributors.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = contributors.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = mixed.at2(i, j);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

//! Word-list toxicity classification.
//!
//! A sentence is toxic when one or more lexicon entries are found in it as
//! whole words after whitespace detokenization: an entry matches inside a
//! word only when both neighbours are non-alphanumeric or the word edge, so
//! `ass` never fires on `class` but `putain` fires on `putain.`.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::vocab::Vocabulary;

/// Loaded word list. Entries are single words; morphological variants are
/// listed explicitly rather than stemmed.
#[derive(Clone, Debug)]
pub struct ToxicityLexicon {
    entries: BTreeSet<String>,
    pub language_tag: String,
    pub case_folding: bool,
    /// Graded scoring: tc = min(1, matches / 3) instead of the 0/1 decision.
    pub graded: bool,
}

/// Classifier verdict for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct ToxicityScore {
    /// Toxicity in [0, 1]; zero exactly when no entry matched.
    pub tc: f64,
    /// (word-or-token index, matched entry) per match, in sentence order.
    pub matches: Vec<(usize, String)>,
}

impl ToxicityLexicon {
    pub fn from_entries<I, S>(entries: I, language_tag: &str) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for e in entries {
            let e = e.as_ref().trim();
            if e.is_empty() {
                continue;
            }
            if e.split_whitespace().count() != 1 {
                return Err(Error::Contract(format!(
                    "multiword lexicon entry {e:?} is not supported"
                )));
            }
            set.insert(e.to_lowercase());
        }
        if set.is_empty() {
            return Err(Error::Contract("lexicon has no entries".into()));
        }
        Ok(ToxicityLexicon {
            entries: set,
            language_tag: language_tag.to_string(),
            case_folding: true,
            graded: false,
        })
    }

    /// Loads a lexicon file: UTF-8, one entry per line, `#` starts a
    /// comment line, duplicates collapse.
    pub fn load(path: &Path, language_tag: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut set = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.split_whitespace().count() != 1 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("multiword lexicon entry {line:?}"),
                });
            }
            set.insert(line.to_lowercase());
        }
        if set.is_empty() {
            return Err(Error::Parse {
                line: text.lines().count(),
                msg: "lexicon file has no effective entries".into(),
            });
        }
        Ok(ToxicityLexicon {
            entries: set,
            language_tag: language_tag.to_string(),
            case_folding: true,
            graded: false,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|s| s.as_str())
    }

    fn fold<'a>(&self, w: &'a str) -> std::borrow::Cow<'a, str> {
        if self.case_folding {
            std::borrow::Cow::Owned(w.to_lowercase())
        } else {
            std::borrow::Cow::Borrowed(w)
        }
    }

    /// Number of entry occurrences inside one word, at word-character
    /// boundaries.
    pub fn matches_in_word(&self, word: &str) -> usize {
        let folded = self.fold(word);
        let chars: Vec<char> = folded.chars().collect();
        self.entries
            .iter()
            .map(|entry| boundary_hits(&chars, entry))
            .sum()
    }

    fn score_words<'a, I>(&self, words: I) -> ToxicityScore
    where
        I: IntoIterator<Item = (&'a str, usize)>,
    {
        let mut matches = Vec::new();
        let mut total = 0usize;
        for (word, idx) in words {
            let folded = self.fold(word);
            let chars: Vec<char> = folded.chars().collect();
            for entry in &self.entries {
                let hits = boundary_hits(&chars, entry);
                if hits > 0 {
                    matches.push((idx, entry.clone()));
                    total += hits;
                }
            }
        }
        let tc = if total == 0 {
            0.0
        } else if self.graded {
            (total as f64 / 3.0).min(1.0)
        } else {
            1.0
        };
        ToxicityScore { tc, matches }
    }

    /// Scores a detokenized sentence; match indices are word positions.
    pub fn score_text(&self, text: &str) -> ToxicityScore {
        self.score_words(text.split_whitespace().enumerate().map(|(i, w)| (w, i)))
    }
}

/// Occurrences of `entry` in `chars` with non-alphanumeric (or edge)
/// characters on both sides.
fn boundary_hits(chars: &[char], entry: &str) -> usize {
    let echars: Vec<char> = entry.chars().collect();
    if echars.is_empty() || echars.len() > chars.len() {
        return 0;
    }
    let mut hits = 0;
    for start in 0..=chars.len() - echars.len() {
        if chars[start..start + echars.len()] != echars[..] {
            continue;
        }
        let left_ok = start == 0 || !chars[start - 1].is_alphanumeric();
        let end = start + echars.len();
        let right_ok = end == chars.len() || !chars[end].is_alphanumeric();
        if left_ok && right_ok {
            hits += 1;
        }
    }
    hits
}

/// Scores a token sequence; match indices refer to the first token of each
/// matched surface word.
pub fn tc_score(tokens: &[u32], vocab: &Vocabulary, lex: &ToxicityLexicon) -> ToxicityScore {
    let words = vocab.words_with_first_token(tokens);
    lex.score_words(words.iter().map(|(w, i)| (w.as_str(), *i)))
}

/// Pluggable sentence-level toxicity scorer. Implementations must be pure:
/// the same token sequence always yields the same score in [0, 1].
pub trait ToxicityScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, tokens: &[u32]) -> Result<f64>;
}

/// The lexicon-backed scorer used throughout the pipeline.
pub struct LexiconScorer {
    pub lexicon: ToxicityLexicon,
    pub vocab: Arc<Vocabulary>,
}

impl ToxicityScorer for LexiconScorer {
    fn name(&self) -> &str {
        "lexicon"
    }

    fn score(&self, tokens: &[u32]) -> Result<f64> {
        Ok(tc_score(tokens, &self.vocab, &self.lexicon).tc)
    }
}

/// Scorer that never flags anything; conditional guidance degenerates to
/// plain beam search under it.
pub struct AllCleanScorer;

impl ToxicityScorer for AllCleanScorer {
    fn name(&self) -> &str {
        "all-clean"
    }

    fn score(&self, _tokens: &[u32]) -> Result<f64> {
        Ok(0.0)
    }
}

/// Deterministic stand-in for a neural classifier: flags any sentence
/// containing one of a fixed set of token ids.
pub struct StubScorer {
    pub toxic_ids: std::collections::HashSet<u32>,
}

impl ToxicityScorer for StubScorer {
    fn name(&self) -> &str {
        "stub"
    }

    fn score(&self, tokens: &[u32]) -> Result<f64> {
        Ok(if tokens.iter().any(|t| self.toxic_ids.contains(t)) {
            1.0
        } else {
            0.0
        })
    }
}

/// TC of every candidate continuation of a prefix. The classifier is a
/// fixed oracle here: no gradient flows through these values.
pub fn score_continuations(
    prefix: &[u32],
    candidates: &[u32],
    scorer: &dyn ToxicityScorer,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(candidates.len());
    let mut sentence = Vec::with_capacity(prefix.len() + 1);
    sentence.extend_from_slice(prefix);
    sentence.push(0);
    for &cand in candidates {
        *sentence.last_mut().unwrap() = cand;
        let tc = scorer.score(&sentence)?;
        if !(0.0..=1.0).contains(&tc) {
            return Err(Error::Scorer(format!(
                "scorer {} returned {tc} outside [0, 1]",
                scorer.name()
            )));
        }
        out.push(tc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn french_vocab() -> Vocabulary {
        Vocabulary::from_words([
            "J'ai", "un", "ami", "qui", "est", "gars", "putain", "puant", ".", "class", "merde",
        ])
    }

    #[test]
    fn load_skips_comments_and_dedupes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lex.txt");
        std::fs::write(&path, "putain\n# comment\nmerde\nputain\n").unwrap();
        let lex = ToxicityLexicon::load(&path, "fra").unwrap();
        assert_eq!(lex.len(), 2);
    }

    #[test]
    fn load_rejects_multiword_entries_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lex.txt");
        std::fs::write(&path, "putain\ncon artist\n").unwrap();
        let err = ToxicityLexicon::load(&path, "fra").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn load_rejects_effectively_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lex.txt");
        std::fs::write(&path, "# only a comment\n\n").unwrap();
        assert!(ToxicityLexicon::load(&path, "fra").is_err());
    }

    #[test]
    fn flags_the_toxic_word_in_a_sentence() {
        let vocab = french_vocab();
        let lex = ToxicityLexicon::from_entries(["putain"], "fra").unwrap();
        let tokens = vocab.tokenize("J'ai un ami qui est un gars putain .");
        let score = tc_score(&tokens, &vocab, &lex);
        assert_eq!(score.tc, 1.0);
        assert_eq!(score.matches.len(), 1);
        assert_eq!(score.matches[0].1, "putain");
        assert_eq!(score.matches[0].0, 7);
    }

    #[test]
    fn clean_sentences_score_zero() {
        let vocab = french_vocab();
        let lex = ToxicityLexicon::from_entries(["putain"], "fra").unwrap();
        let tokens = vocab.tokenize("J'ai un ami qui est un gars puant .");
        let score = tc_score(&tokens, &vocab, &lex);
        assert_eq!(score.tc, 0.0);
        assert!(score.matches.is_empty());
    }

    #[test]
    fn matching_respects_word_boundaries() {
        let vocab = french_vocab();
        let lex = ToxicityLexicon::from_entries(["ass"], "eng").unwrap();
        let tokens = vocab.tokenize("class");
        assert_eq!(tc_score(&tokens, &vocab, &lex).tc, 0.0);
        // but punctuation attached to the word is a boundary
        assert_eq!(lex.score_text("ass.").tc, 1.0);
        assert_eq!(lex.score_text("bass").tc, 0.0);
    }

    #[test]
    fn case_folding_makes_scores_case_invariant() {
        let lex = ToxicityLexicon::from_entries(["Putain"], "fra").unwrap();
        assert_eq!(lex.score_text("PUTAIN alors").tc, 1.0);
        assert_eq!(lex.score_text("putain alors").tc, 1.0);
    }

    #[test]
    fn graded_mode_counts_matches() {
        let mut lex = ToxicityLexicon::from_entries(["merde"], "fra").unwrap();
        lex.graded = true;
        assert!((lex.score_text("merde").tc - 1.0 / 3.0).abs() < 1e-12);
        assert!((lex.score_text("merde merde merde merde").tc - 1.0).abs() < 1e-12);
        assert_eq!(lex.score_text("ami").tc, 0.0);
    }

    #[test]
    fn score_continuations_marks_exactly_the_toxic_candidate() {
        let vocab = Arc::new(french_vocab());
        let lex = ToxicityLexicon::from_entries(["putain"], "fra").unwrap();
        let scorer = LexiconScorer {
            lexicon: lex,
            vocab: Arc::clone(&vocab),
        };
        let prefix = vocab.tokenize("un gars");
        let candidates = [
            vocab.id("puant").unwrap(),
            vocab.id("putain").unwrap(),
            vocab.id("ami").unwrap(),
        ];
        let tc = score_continuations(&prefix, &candidates, &scorer).unwrap();
        assert_eq!(tc, vec![0.0, 1.0, 0.0]);

        let clean = score_continuations(
            &prefix,
            &[vocab.id("ami").unwrap(), vocab.id("qui").unwrap()],
            &scorer,
        )
        .unwrap();
        assert!(clean.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn continuation_completing_a_word_piece_is_flagged() {
        // A candidate finishing a word-piece into a toxic surface form is
        // caught because scoring detokenizes before matching.
        let vocab = Arc::new(Vocabulary::from_words(["gars", "put", "##ain", "puant"]));
        let lex = ToxicityLexicon::from_entries(["putain"], "fra").unwrap();
        let scorer = LexiconScorer {
            lexicon: lex,
            vocab: Arc::clone(&vocab),
        };
        let prefix = vocab.tokenize("gars put");
        let candidates = [vocab.id("##ain").unwrap(), vocab.id("puant").unwrap()];
        let tc = score_continuations(&prefix, &candidates, &scorer).unwrap();
        assert_eq!(tc, vec![1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn scoring_is_pure_and_monotone_under_clean_extension(
            words in proptest::collection::vec(
                prop::sample::select(vec!["ami", "gars", "putain", "qui", "est", "un"]),
                0..8,
            ),
            extra in prop::sample::select(vec!["ami", "qui", "est", "un", "gars"]),
        ) {
            let vocab = french_vocab();
            let lex = ToxicityLexicon::from_entries(["putain", "merde"], "fra").unwrap();
            let tokens: Vec<u32> = words.iter().map(|w| vocab.id(w).unwrap()).collect();

            let a = tc_score(&tokens, &vocab, &lex);
            let b = tc_score(&tokens, &vocab, &lex);
            prop_assert_eq!(&a, &b);

            // Existing matches persist under any vocabulary extension.
            let mut extended = tokens.clone();
            extended.push(vocab.id(extra).unwrap());
            let ext = tc_score(&extended, &vocab, &lex);
            if a.tc == 1.0 {
                prop_assert_eq!(ext.tc, 1.0);
            }
            // Appending a clean standalone token never changes the verdict.
            prop_assert_eq!(ext.tc, a.tc);
        }
    }
}

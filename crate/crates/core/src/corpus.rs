//! Text corpus handling: tokenization, vocabulary construction, and the
//! sliding-window stream that feeds the text objective.
//!
//! Vocabulary layout is load-bearing: constituent words of ontology terms
//! occupy the lowest indices (in first-encounter order), followed by corpus
//! tokens sorted by descending frequency. That keeps ontology rows at stable
//! indices whether or not a corpus is attached.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Opens a text file, transparently decompressing when the path ends in
/// `.gz`.
pub fn open_text(path: impl AsRef<Path>) -> Result<Box<dyn BufRead>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|ext| ext == "gz") {
        let gz = flate2::read::MultiGzDecoder::new(file);
        Ok(Box::new(BufReader::new(gz)))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Canonical form of a single token: surrounding punctuation stripped,
/// lowercased. Returns `None` when nothing alphanumeric is left.
pub fn normalize_token(raw: &str) -> Option<String> {
    let core = raw.trim_matches(|c: char| !c.is_alphanumeric());
    if core.is_empty() {
        return None;
    }
    Some(core.to_lowercase())
}

/// Splits one line (one sentence) into normalized tokens.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace()
        .filter_map(normalize_token)
        .collect()
}

/// Token table shared by the hierarchy and the corpus.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    counts: Vec<u64>,
    ontology_tokens: usize,
    total_count: u64,
}

impl Vocabulary {
    /// Builds the vocabulary from ontology term constituents plus, when a
    /// corpus is given, every corpus token that occurs at least `min_count`
    /// times. The frequency floor never applies to ontology constituents.
    pub fn build<'a>(
        ontology_terms: impl IntoIterator<Item = &'a str>,
        corpus: Option<&Path>,
        min_count: u64,
    ) -> Result<Vocabulary> {
        let mut counts_by_token: HashMap<String, u64> = HashMap::new();
        if let Some(path) = corpus {
            let reader = open_text(path)?;
            for line in reader.lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                for token in tokenize(&line) {
                    *counts_by_token.entry(token).or_insert(0) += 1;
                }
            }
        }

        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            counts: Vec::new(),
            ontology_tokens: 0,
            total_count: 0,
        };
        for term in ontology_terms {
            for word in term.split_whitespace() {
                let Some(token) = normalize_token(word) else {
                    continue;
                };
                if !vocab.index.contains_key(&token) {
                    let count = counts_by_token.get(&token).copied().unwrap_or(0);
                    vocab.push(token, count);
                }
            }
        }
        vocab.ontology_tokens = vocab.tokens.len();

        let mut corpus_tokens: Vec<(&String, &u64)> = counts_by_token
            .iter()
            .filter(|(t, &c)| c >= min_count && !vocab.index.contains_key(*t))
            .collect();
        corpus_tokens.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        for (token, &count) in corpus_tokens {
            vocab.push(token.clone(), count);
        }

        Ok(vocab)
    }

    fn push(&mut self, token: String, count: u64) {
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        self.counts.push(count);
        self.total_count += count;
    }

    /// Reassembles a vocabulary from stored `(token, count)` rows, e.g. when
    /// loading a model file. Indices are positional.
    pub fn from_rows(rows: Vec<(String, u64)>, ontology_tokens: usize) -> Result<Vocabulary> {
        if ontology_tokens > rows.len() {
            return Err(Error::Config(format!(
                "ontology token count {ontology_tokens} exceeds vocabulary size {}",
                rows.len()
            )));
        }
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            counts: Vec::new(),
            ontology_tokens,
            total_count: 0,
        };
        for (token, count) in rows {
            if vocab.index.contains_key(&token) {
                return Err(Error::Config(format!(
                    "duplicate vocabulary token `{token}`"
                )));
            }
            vocab.push(token, count);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of leading entries that came from ontology terms.
    pub fn num_ontology_tokens(&self) -> usize {
        self.ontology_tokens
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.tokens
            .iter()
            .map(String::as_str)
            .zip(self.counts.iter().copied())
    }

    /// Maps a multi-word term to the vocabulary ids of its constituents,
    /// silently dropping out-of-vocabulary words. Empty result means the
    /// term cannot be embedded.
    pub fn term_ids(&self, term: &str) -> Vec<u32> {
        term.split_whitespace()
            .filter_map(|w| normalize_token(w).and_then(|t| self.get(&t)))
            .collect()
    }
}

/// One CBOW training example: a target token and the ids of the tokens in a
/// symmetric window around it (out-of-vocabulary tokens already removed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenWindow {
    pub target: u32,
    pub context: Vec<u32>,
}

/// Streaming iterator over windows of a corpus file. One line is one
/// sentence; windows never cross sentence boundaries. Unknown tokens are
/// dropped before windowing, so the remaining tokens close ranks.
pub struct WindowStream<'v> {
    vocab: &'v Vocabulary,
    half: usize,
    lines: Lines<Box<dyn BufRead>>,
    path: std::path::PathBuf,
    sentence: Vec<u32>,
    cursor: usize,
    subsample: Option<(f64, ChaCha8Rng)>,
}

impl<'v> WindowStream<'v> {
    /// `window` is the total window size and must be even and >= 2; the
    /// stream emits up to `window / 2` context tokens on each side.
    pub fn open(path: impl AsRef<Path>, vocab: &'v Vocabulary, window: usize) -> Result<Self> {
        if window < 2 || !window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window must be even and >= 2, got {window}"
            )));
        }
        let path = path.as_ref().to_path_buf();
        let reader = open_text(&path)?;
        Ok(WindowStream {
            vocab,
            half: window / 2,
            lines: reader.lines(),
            path,
            sentence: Vec::new(),
            cursor: 0,
            subsample: None,
        })
    }

    /// Enables frequency subsampling: token `t` with corpus frequency `f`
    /// is kept with probability `sqrt(th / f) + th / f` (clamped to 1).
    /// Off by default; when off the stream is fully deterministic.
    pub fn with_subsampling(mut self, threshold: f64, rng: ChaCha8Rng) -> Self {
        self.subsample = Some((threshold, rng));
        self
    }

    fn keep(&mut self, id: u32) -> bool {
        let Some((threshold, rng)) = self.subsample.as_mut() else {
            return true;
        };
        let total = self.vocab.total_count();
        if total == 0 {
            return true;
        }
        let freq = self.vocab.count(id) as f64 / total as f64;
        if freq <= 0.0 {
            return true;
        }
        let p = (*threshold / freq).sqrt() + *threshold / freq;
        rng.gen::<f64>() < p
    }

    fn next_sentence(&mut self) -> Result<bool> {
        loop {
            let Some(line) = self.lines.next() else {
                return Ok(false);
            };
            let line = line.map_err(|e| Error::io(&self.path, e))?;
            let ids: Vec<u32> = tokenize(&line)
                .into_iter()
                .filter_map(|t| self.vocab.get(&t))
                .filter(|&id| self.keep(id))
                .collect();
            if !ids.is_empty() {
                self.sentence = ids;
                self.cursor = 0;
                return Ok(true);
            }
        }
    }
}

impl Iterator for WindowStream<'_> {
    type Item = Result<TokenWindow>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.cursor >= self.sentence.len() {
                match self.next_sentence() {
                    Ok(true) => {}
                    Ok(false) => return None,
                    Err(e) => return Some(Err(e)),
                }
            }
            let t = self.cursor;
            self.cursor += 1;
            let lo = t.saturating_sub(self.half);
            let hi = (t + self.half + 1).min(self.sentence.len());
            let context: Vec<u32> = (lo..hi)
                .filter(|&i| i != t)
                .map(|i| self.sentence[i])
                .collect();
            if context.is_empty() {
                continue;
            }
            return Some(Ok(TokenWindow {
                target: self.sentence[t],
                context,
            }));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::io::Write as _;

    fn write_corpus(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn tokenizer_strips_punctuation_and_case() {
        assert_eq!(
            tokenize("The dog, the Cat -- and 2 mice!"),
            vec!["the", "dog", "the", "cat", "and", "2", "mice"]
        );
        assert_eq!(tokenize("-- ... !!"), Vec::<String>::new());
        // Interior punctuation survives.
        assert_eq!(tokenize("fantasy_life.n.01"), vec!["fantasy_life.n.01"]);
        assert_eq!(tokenize("don't stop"), vec!["don't", "stop"]);
    }

    #[test]
    fn vocabulary_puts_ontology_tokens_first() {
        let corpus = write_corpus(&[
            "the dog chased the cat",
            "the cat slept",
            "rare appears once",
        ]);
        let vocab =
            Vocabulary::build(["chronic health condition", "dog"], Some(corpus.path()), 2).unwrap();
        // Ontology constituents first, in first-encounter order.
        assert_eq!(vocab.token(0), "chronic");
        assert_eq!(vocab.token(1), "health");
        assert_eq!(vocab.token(2), "condition");
        assert_eq!(vocab.token(3), "dog");
        assert_eq!(vocab.num_ontology_tokens(), 4);
        // Then corpus tokens by descending count: the(4), cat(2).
        assert_eq!(vocab.token(4), "the");
        assert_eq!(vocab.token(5), "cat");
        assert_eq!(vocab.len(), 6);
        // `rare` and `appears` fall under min_count; `dog` keeps its count.
        assert_eq!(vocab.get("rare"), None);
        assert_eq!(vocab.count(3), 1);
    }

    #[test]
    fn vocabulary_without_corpus_has_only_ontology_tokens() {
        let vocab = Vocabulary::build(["dog", "mammal", "dog"], None, 5).unwrap();
        assert_eq!(vocab.len(), 2);
        assert_eq!(vocab.num_ontology_tokens(), 2);
        assert_eq!(vocab.count(0), 0);
    }

    #[test]
    fn ties_in_corpus_counts_break_alphabetically() {
        let corpus = write_corpus(&["b a", "a b"]);
        let vocab = Vocabulary::build([], Some(corpus.path()), 1).unwrap();
        assert_eq!(vocab.token(0), "a");
        assert_eq!(vocab.token(1), "b");
    }

    #[test]
    fn windows_respect_sentence_bounds_and_drop_oov() {
        let corpus = write_corpus(&["a b c d", "e a"]);
        let vocab = Vocabulary::build(["a", "b", "c", "d"], None, 1).unwrap();
        let windows: Vec<TokenWindow> = WindowStream::open(corpus.path(), &vocab, 2)
            .unwrap()
            .map(|w| w.unwrap())
            .collect();
        let a = vocab.get("a").unwrap();
        let b = vocab.get("b").unwrap();
        let c = vocab.get("c").unwrap();
        let d = vocab.get("d").unwrap();
        // Sentence two reduces to the lone in-vocabulary token `a`, which has
        // no context and is skipped.
        assert_eq!(
            windows,
            vec![
                TokenWindow {
                    target: a,
                    context: vec![b]
                },
                TokenWindow {
                    target: b,
                    context: vec![a, c]
                },
                TokenWindow {
                    target: c,
                    context: vec![b, d]
                },
                TokenWindow {
                    target: d,
                    context: vec![c]
                },
            ]
        );
    }

    #[test]
    fn oov_removal_closes_ranks_before_windowing() {
        let corpus = write_corpus(&["a zzz b"]);
        let vocab = Vocabulary::build(["a", "b"], None, 1).unwrap();
        let windows: Vec<TokenWindow> = WindowStream::open(corpus.path(), &vocab, 2)
            .unwrap()
            .map(|w| w.unwrap())
            .collect();
        let a = vocab.get("a").unwrap();
        let b = vocab.get("b").unwrap();
        // `zzz` vanishes, so a and b become adjacent.
        assert_eq!(
            windows,
            vec![
                TokenWindow {
                    target: a,
                    context: vec![b]
                },
                TokenWindow {
                    target: b,
                    context: vec![a]
                },
            ]
        );
    }

    #[test]
    fn window_size_must_be_even() {
        let corpus = write_corpus(&["a b"]);
        let vocab = Vocabulary::build(["a", "b"], None, 1).unwrap();
        assert!(matches!(
            WindowStream::open(corpus.path(), &vocab, 3),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            WindowStream::open(corpus.path(), &vocab, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stream_is_deterministic_without_subsampling() {
        let corpus = write_corpus(&["a b c a b", "c c a"]);
        let vocab = Vocabulary::build(["a", "b", "c"], None, 1).unwrap();
        let pass = || -> Vec<TokenWindow> {
            WindowStream::open(corpus.path(), &vocab, 4)
                .unwrap()
                .map(|w| w.unwrap())
                .collect()
        };
        assert_eq!(pass(), pass());
    }

    #[test]
    fn subsampling_drops_frequent_tokens() {
        let many_a = vec!["a a a a a a a a a a b"; 40].join("\n");
        let corpus = write_corpus(&[&many_a]);
        let vocab = Vocabulary::build([], Some(corpus.path()), 1).unwrap();
        let full: usize = WindowStream::open(corpus.path(), &vocab, 2)
            .unwrap()
            .count();
        let rng = ChaCha8Rng::seed_from_u64(11);
        let kept: usize = WindowStream::open(corpus.path(), &vocab, 2)
            .unwrap()
            .with_subsampling(1e-3, rng)
            .count();
        assert!(kept < full, "subsampling kept {kept} of {full} windows");
    }

    #[test]
    fn gzip_corpus_reads_like_plain_text() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        let dir = tempfile::tempdir().unwrap();
        let gz_path = dir.path().join("corpus.txt.gz");
        let mut enc = GzEncoder::new(File::create(&gz_path).unwrap(), Compression::default());
        enc.write_all(b"a b c\nc b a\n").unwrap();
        enc.finish().unwrap();

        let vocab = Vocabulary::build(["a", "b", "c"], None, 1).unwrap();
        let n = WindowStream::open(&gz_path, &vocab, 2).unwrap().count();
        assert_eq!(n, 6);

        let vocab2 = Vocabulary::build([], Some(gz_path.as_path()), 1).unwrap();
        assert_eq!(vocab2.len(), 3);
        assert_eq!(vocab2.count(vocab2.get("a").unwrap()), 2);
    }
}

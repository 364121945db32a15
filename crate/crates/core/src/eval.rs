//! Binary Is-A evaluation: balanced labeled sets, dev-set threshold tuning,
//! and accuracy reports.
//!
//! Order models score a pair by violation energy (low means positive); the
//! bilinear baseline scores by `x . (W y)` (high means positive). A single
//! threshold tuned on dev scores turns either into a classifier.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model_io::{Model, ModelKind};
use crate::objectives::{bilinear_score, order_energy};
use crate::ontology::{
    sample_negative_pair, NegativeMode, OntologyGraph, Reachability, TripletEdge,
};

/// One labeled evaluation pair, terms as surface strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub child: String,
    pub parent: String,
    pub positive: bool,
}

/// Which side of the threshold counts as a positive prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    LowIsPositive,
    HighIsPositive,
}

impl Polarity {
    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Order => Polarity::LowIsPositive,
            ModelKind::Bilinear => Polarity::HighIsPositive,
        }
    }

    pub fn predicts_positive(self, score: f64, threshold: f64) -> bool {
        match self {
            Polarity::LowIsPositive => score <= threshold,
            Polarity::HighIsPositive => score >= threshold,
        }
    }
}

/// Builds a balanced labeled set from held-out positive edges: every
/// positive is followed by one corrupted negative, the corrupted side
/// alternating, each negative verified absent from the full closure. A side
/// with no valid corruption (e.g. the parent is the root, which everything
/// reaches) falls back to the other side; only when both sides are
/// exhausted does the sampling error propagate.
pub fn build_labeled_set<R: Rng>(
    test_edges: &[TripletEdge],
    g_full: &OntologyGraph,
    reach_full: &Reachability,
    rng: &mut R,
    max_retries: usize,
) -> Result<Vec<LabeledPair>> {
    let mut out = Vec::with_capacity(test_edges.len() * 2);
    for (i, edge) in test_edges.iter().enumerate() {
        out.push(LabeledPair {
            child: g_full.name(edge.child).to_string(),
            parent: g_full.name(edge.parent).to_string(),
            positive: true,
        });
        let (first, second) = if i % 2 == 0 {
            (NegativeMode::CorruptChild, NegativeMode::CorruptParent)
        } else {
            (NegativeMode::CorruptParent, NegativeMode::CorruptChild)
        };
        let positive = (edge.child, edge.parent);
        let (c, p) =
            match sample_negative_pair(g_full, reach_full, positive, first, rng, max_retries) {
                Err(Error::NegativeSamplingExhausted { .. }) => {
                    sample_negative_pair(g_full, reach_full, positive, second, rng, max_retries)?
                }
                other => other?,
            };
        out.push(LabeledPair {
            child: g_full.name(c).to_string(),
            parent: g_full.name(p).to_string(),
            positive: false,
        });
    }
    Ok(out)
}

/// Picks the threshold maximizing accuracy over `(score, label)` pairs.
/// Candidate cuts are the midpoints between adjacent distinct scores plus
/// one cut excluding everything and one including everything; later
/// candidates win ties. Returns `(threshold, accuracy)`.
pub fn tune_threshold(scored: &[(f64, bool)], polarity: Polarity) -> Result<(f64, f64)> {
    if scored.is_empty() {
        return Err(Error::Config(
            "threshold tuning needs a nonempty dev set".to_string(),
        ));
    }
    let mut distinct: Vec<f64> = scored.iter().map(|&(s, _)| s).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    distinct.dedup();

    let mut candidates = Vec::with_capacity(distinct.len() + 1);
    match polarity {
        Polarity::LowIsPositive => {
            candidates.push(distinct[0] - 1.0);
            for w in distinct.windows(2) {
                candidates.push((w[0] + w[1]) / 2.0);
            }
            candidates.push(*distinct.last().expect("nonempty"));
        }
        Polarity::HighIsPositive => {
            candidates.push(distinct.last().expect("nonempty") + 1.0);
            for w in distinct.windows(2).rev() {
                candidates.push((w[0] + w[1]) / 2.0);
            }
            candidates.push(distinct[0]);
        }
    }

    let accuracy_at = |threshold: f64| -> f64 {
        let correct = scored
            .iter()
            .filter(|&&(s, label)| polarity.predicts_positive(s, threshold) == label)
            .count();
        correct as f64 / scored.len() as f64
    };
    let mut best = (candidates[0], accuracy_at(candidates[0]));
    for &cand in &candidates[1..] {
        let acc = accuracy_at(cand);
        if acc >= best.1 {
            best = (cand, acc);
        }
    }
    Ok(best)
}

/// Scores one term pair under a model: phrase embeddings are the mean of
/// in-vocabulary constituent rows. `None` when either side has no
/// in-vocabulary constituent at all.
pub fn score_term_pair(model: &Model, child: &str, parent: &str) -> Result<Option<f64>> {
    let child_ids = model.vocab.term_ids(child);
    let parent_ids = model.vocab.term_ids(parent);
    if child_ids.is_empty() || parent_ids.is_empty() {
        return Ok(None);
    }
    let c = model.table.lookup_phrase(&child_ids)?;
    let p = model.table.lookup_phrase(&parent_ids)?;
    let score = match model.kind {
        ModelKind::Order => order_energy(&c, &p)?,
        ModelKind::Bilinear => {
            let params = model
                .bilinear
                .as_ref()
                .ok_or_else(|| Error::Config("bilinear model is missing its matrix".to_string()))?;
            bilinear_score(&c, &p, params)?
        }
    };
    Ok(Some(score))
}

/// Scores a whole labeled set; `None` entries are unresolvable pairs.
pub fn score_pairs(model: &Model, pairs: &[LabeledPair]) -> Result<Vec<Option<f64>>> {
    pairs
        .iter()
        .map(|p| score_term_pair(model, &p.child, &p.parent))
        .collect()
}

/// Dev-set shortcut: score, drop unresolvable pairs, tune.
pub fn tune_on_dev(model: &Model, dev: &[LabeledPair]) -> Result<(f64, f64)> {
    let scores = score_pairs(model, dev)?;
    let scored: Vec<(f64, bool)> = scores
        .into_iter()
        .zip(dev)
        .filter_map(|(s, p)| s.map(|s| (s, p.positive)))
        .collect();
    tune_threshold(&scored, Polarity::for_kind(model.kind))
}

/// One scored pair inside an [`EvalReport`].
#[derive(Debug, Clone)]
pub struct PairScore {
    pub child: String,
    pub parent: String,
    pub positive: bool,
    pub score: f64,
    pub predicted_positive: bool,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    /// Pairs with no in-vocabulary constituent on one side, not scored.
    pub excluded: usize,
    pub pairs: Vec<PairScore>,
}

impl EvalReport {
    pub fn scored_total(&self) -> usize {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }
}

/// Classifies every resolvable pair against `threshold` and tallies the
/// confusion counts. Pair order in the report follows the input.
pub fn evaluate(model: &Model, test: &[LabeledPair], threshold: f64) -> Result<EvalReport> {
    let polarity = Polarity::for_kind(model.kind);
    let mut report = EvalReport {
        accuracy: 0.0,
        threshold,
        true_positives: 0,
        false_positives: 0,
        true_negatives: 0,
        false_negatives: 0,
        excluded: 0,
        pairs: Vec::with_capacity(test.len()),
    };
    for pair in test {
        let Some(score) = score_term_pair(model, &pair.child, &pair.parent)? else {
            report.excluded += 1;
            continue;
        };
        let predicted = polarity.predicts_positive(score, threshold);
        match (predicted, pair.positive) {
            (true, true) => report.true_positives += 1,
            (true, false) => report.false_positives += 1,
            (false, false) => report.true_negatives += 1,
            (false, true) => report.false_negatives += 1,
        }
        report.pairs.push(PairScore {
            child: pair.child.clone(),
            parent: pair.parent.clone(),
            positive: pair.positive,
            score,
            predicted_positive: predicted,
        });
    }
    let total = report.scored_total();
    if total > 0 {
        report.accuracy = (report.true_positives + report.true_negatives) as f64 / total as f64;
    }
    Ok(report)
}

/// Reads `child\tparent\tlabel` lines, label `1` or `0`.
pub fn read_labeled_pairs(path: impl AsRef<Path>) -> Result<Vec<LabeledPair>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let positive = match fields[2].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::MalformedLine {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("label must be 1 or 0, got `{other}`"),
                })
            }
        };
        out.push(LabeledPair {
            child: fields[0].trim().to_string(),
            parent: fields[1].trim().to_string(),
            positive,
        });
    }
    Ok(out)
}

pub fn write_labeled_pairs(pairs: &[LabeledPair], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        writeln!(
            w,
            "{}\t{}\t{}",
            p.child,
            p.parent,
            if p.positive { 1 } else { 0 }
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use crate::embedding::EmbeddingTable;
    use crate::ontology::{AddOutcome, Provenance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model_with_rows(rows: &[(&str, Vec<f32>)]) -> Model {
        let dim = rows[0].1.len();
        let vocab = Vocabulary::from_rows(
            rows.iter().map(|(t, _)| (t.to_string(), 0u64)).collect(),
            rows.len(),
        )
        .unwrap();
        let data: Vec<f32> = rows.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        Model {
            kind: ModelKind::Order,
            vocab,
            table: EmbeddingTable::from_data(dim, data).unwrap(),
            bilinear: None,
            optimizer: None,
        }
    }

    fn pair(child: &str, parent: &str, positive: bool) -> LabeledPair {
        LabeledPair {
            child: child.to_string(),
            parent: parent.to_string(),
            positive,
        }
    }

    #[test]
    fn labeled_sets_are_balanced_and_closure_free() {
        let mut g = OntologyGraph::new("IsA");
        let root = g.intern("root");
        let mut edges = Vec::new();
        for i in 0..10 {
            let mid = g.intern(&format!("mid{i}"));
            let leaf = g.intern(&format!("leaf{i}"));
            assert_eq!(
                g.add_edge(mid, root, Provenance::Original),
                AddOutcome::Added
            );
            assert_eq!(
                g.add_edge(leaf, mid, Provenance::Original),
                AddOutcome::Added
            );
        }
        let closed = crate::ontology::transitive_closure(&g).unwrap();
        let reach = Reachability::ancestors_only(&closed).unwrap();
        for e in closed.edges().iter().take(10) {
            edges.push(*e);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = build_labeled_set(&edges, &closed, &reach, &mut rng, 100).unwrap();
        assert_eq!(set.len(), 20);
        assert_eq!(set.iter().filter(|p| p.positive).count(), 10);
        for p in set.iter().filter(|p| !p.positive) {
            let c = closed.concept(&p.child).unwrap();
            let q = closed.concept(&p.parent).unwrap();
            assert!(!reach.is_ancestor(c, q), "{} -> {}", p.child, p.parent);
        }
    }

    #[test]
    fn empty_positive_list_builds_empty_set() {
        let mut g = OntologyGraph::new("IsA");
        let a = g.intern("a");
        let b = g.intern("b");
        g.add_edge(a, b, Provenance::Original);
        let reach = Reachability::ancestors_only(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = build_labeled_set(&[], &g, &reach, &mut rng, 10).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn separable_scores_tune_to_the_midpoint() {
        let scored = vec![(0.1, true), (0.2, true), (1.0, false), (2.0, false)];
        let (theta, acc) = tune_threshold(&scored, Polarity::LowIsPositive).unwrap();
        assert_eq!(acc, 1.0);
        assert!((theta - 0.6).abs() < 1e-12, "theta = {theta}");
    }

    #[test]
    fn identical_scores_degenerate_to_majority() {
        let scored = vec![
            (0.5, true),
            (0.5, true),
            (0.5, true),
            (0.5, false),
            (0.5, false),
        ];
        let (theta, acc) = tune_threshold(&scored, Polarity::LowIsPositive).unwrap();
        assert_eq!(theta, 0.5);
        assert_eq!(acc, 0.6);
    }

    #[test]
    fn tuning_matches_exhaustive_sweep_both_polarities() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        use rand::Rng as _;
        for &polarity in &[Polarity::LowIsPositive, Polarity::HighIsPositive] {
            for _ in 0..20 {
                let scored: Vec<(f64, bool)> = (0..200)
                    .map(|_| ((rng.gen::<f64>() * 10.0).round() / 2.0, rng.gen::<bool>()))
                    .collect();
                let (_, acc) = tune_threshold(&scored, polarity).unwrap();
                // Oracle: try a cut at every score and far outside on both
                // sides, in both directions.
                let mut cuts: Vec<f64> = scored.iter().map(|&(s, _)| s).collect();
                cuts.push(-1e9);
                cuts.push(1e9);
                let best = cuts
                    .iter()
                    .map(|&t| {
                        scored
                            .iter()
                            .filter(|&&(s, l)| polarity.predicts_positive(s, t) == l)
                            .count()
                    })
                    .max()
                    .unwrap() as f64
                    / scored.len() as f64;
                assert_eq!(acc, best);
            }
        }
    }

    #[test]
    fn monotone_transforms_preserve_tuned_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        use rand::Rng as _;
        let scored: Vec<(f64, bool)> = (0..120)
            .map(|_| (rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<bool>()))
            .collect();
        let (theta, acc) = tune_threshold(&scored, Polarity::LowIsPositive).unwrap();
        let transformed: Vec<(f64, bool)> = scored.iter().map(|&(s, l)| (s.exp(), l)).collect();
        let (theta2, acc2) = tune_threshold(&transformed, Polarity::LowIsPositive).unwrap();
        assert_eq!(acc, acc2);
        // Classifications agree pair by pair.
        for (&(s, _), &(t, _)) in scored.iter().zip(&transformed) {
            assert_eq!(
                Polarity::LowIsPositive.predicts_positive(s, theta),
                Polarity::LowIsPositive.predicts_positive(t, theta2)
            );
        }
    }

    #[test]
    fn evaluate_counts_and_flips() {
        // child rows dominate parent rows, so positives have zero energy.
        let model = model_with_rows(&[
            ("dog", vec![2.0, 2.0]),
            ("animal", vec![1.0, 1.0]),
            ("car", vec![0.0, 5.0]),
        ]);
        let test = vec![
            pair("dog", "animal", true),
            pair("car", "animal", false),
            pair("animal", "dog", false),
        ];
        let report = evaluate(&model, &test, 0.5).unwrap();
        assert_eq!(report.true_positives, 1);
        assert_eq!(report.true_negatives, 2);
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.scored_total(), 3);

        let flipped: Vec<LabeledPair> = test
            .iter()
            .map(|p| LabeledPair {
                positive: !p.positive,
                ..p.clone()
            })
            .collect();
        let flipped_report = evaluate(&model, &flipped, 0.5).unwrap();
        assert!((flipped_report.accuracy - (1.0 - report.accuracy)).abs() < 1e-12);
    }

    #[test]
    fn unresolvable_pairs_are_excluded_not_failed() {
        let model = model_with_rows(&[("dog", vec![2.0]), ("animal", vec![1.0])]);
        let test = vec![
            pair("dog", "animal", true),
            pair("unicorn", "animal", true),
            // Multi-word phrase with one known constituent still resolves.
            pair("big dog", "animal", true),
        ];
        let report = evaluate(&model, &test, 0.5).unwrap();
        assert_eq!(report.excluded, 1);
        assert_eq!(report.scored_total(), 2);
        assert_eq!(report.pairs.len(), 2);
    }

    #[test]
    fn labeled_pair_file_round_trip() {
        let pairs = vec![
            pair("dog", "animal", true),
            pair("chronic health condition", "disease", false),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        write_labeled_pairs(&pairs, &path).unwrap();
        assert_eq!(read_labeled_pairs(&path).unwrap(), pairs);
    }

    #[test]
    fn bad_labels_are_reported_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        std::fs::write(&path, "dog\tanimal\t1\ncat\tanimal\tmaybe\n").unwrap();
        match read_labeled_pairs(&path) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }
}

//! Seeded synthetic fixtures: balanced trees, random DAGs, closure-based
//! train/dev/test splits, and a sibling co-occurrence corpus. These back the
//! end-to-end tests and the `synth` subcommand.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::{build_labeled_set, LabeledPair};
use crate::ontology::{
    transitive_closure, transitive_reduction, OntologyGraph, Provenance, Reachability, TripletEdge,
};

pub const SYNTH_RELATION: &str = "IsA";

/// Complete binary tree with `depth` edge levels (`2^(depth+1) - 1` nodes).
/// Node `i`'s parent is `(i - 1) / 2`; names are `n0`, `n1`, ...
pub fn balanced_tree(depth: usize) -> OntologyGraph {
    let n = (1usize << (depth + 1)) - 1;
    let mut g = OntologyGraph::new(SYNTH_RELATION);
    let ids: Vec<_> = (0..n).map(|i| g.intern(&format!("n{i}"))).collect();
    for i in 1..n {
        let outcome = g.add_edge(ids[i], ids[(i - 1) / 2], Provenance::Original);
        debug_assert_eq!(outcome, crate::ontology::AddOutcome::Added);
    }
    g
}

/// Random DAG: `edges` distinct pairs drawn uniformly from all `i < j`
/// pairs, each oriented from the larger index (child) to the smaller
/// (parent), which makes acyclicity structural.
pub fn random_dag<R: Rng>(nodes: usize, edges: usize, rng: &mut R) -> Result<OntologyGraph> {
    if nodes < 2 {
        return Err(Error::Config("a DAG needs at least 2 nodes".to_string()));
    }
    let max_edges = nodes * (nodes - 1) / 2;
    if edges > max_edges {
        return Err(Error::Config(format!(
            "{edges} edges requested but {nodes} nodes admit at most {max_edges}"
        )));
    }
    let mut g = OntologyGraph::new(SYNTH_RELATION);
    let ids: Vec<_> = (0..nodes).map(|i| g.intern(&format!("n{i}"))).collect();
    let mut pairs: Vec<(usize, usize)> = (0..nodes)
        .flat_map(|i| ((i + 1)..nodes).map(move |j| (i, j)))
        .collect();
    pairs.shuffle(rng);
    for &(i, j) in pairs.iter().take(edges) {
        g.add_edge(ids[j], ids[i], Provenance::Original);
    }
    Ok(g)
}

/// A train/dev/test split of a hierarchy's transitive closure.
#[derive(Debug)]
pub struct SynthDataset {
    /// The generating graph, untouched.
    pub full: OntologyGraph,
    /// Its transitive closure.
    pub closure: OntologyGraph,
    /// Training graph: the transitive reduction plus a sampled fraction of
    /// the remaining closure edges.
    pub train: OntologyGraph,
    pub dev: Vec<LabeledPair>,
    pub test: Vec<LabeledPair>,
}

/// Splits the closure of `g`: training keeps the whole transitive reduction
/// (so reachability is preserved) plus `closure_fraction` of the remaining
/// closure edges; the held-out remainder is divided evenly between dev and
/// test, each pair coupled with one corrupted negative absent from the full
/// closure.
pub fn split_closure<R: Rng>(
    g: &OntologyGraph,
    closure_fraction: f64,
    rng: &mut R,
) -> Result<SynthDataset> {
    if !(0.0..=1.0).contains(&closure_fraction) {
        return Err(Error::Config(format!(
            "closure fraction must be in [0, 1], got {closure_fraction}"
        )));
    }
    let closure = transitive_closure(g)?;
    let reduction = transitive_reduction(g)?;
    let reach = Reachability::ancestors_only(g)?;

    let mut extra: Vec<TripletEdge> = closure
        .edges()
        .iter()
        .filter(|e| !reduction.has_edge(e.child, e.parent))
        .copied()
        .collect();
    extra.shuffle(rng);
    let take = (closure_fraction * extra.len() as f64).floor() as usize;
    let (into_train, held_out) = extra.split_at(take);

    let mut train = reduction;
    for e in into_train {
        train.add_edge(e.child, e.parent, e.provenance);
    }

    let half = held_out.len() / 2;
    let dev = build_labeled_set(&held_out[..half], &closure, &reach, rng, 1000)?;
    let test = build_labeled_set(&held_out[half..], &closure, &reach, rng, 1000)?;

    Ok(SynthDataset {
        full: g.clone(),
        closure,
        train,
        dev,
        test,
    })
}

/// Generates about `target_bytes` of text in which each sentence is one
/// shuffled parent-with-children group, so co-occurrence mirrors the
/// hierarchy's sibling structure.
pub fn sibling_corpus<R: Rng>(g: &OntologyGraph, target_bytes: usize, rng: &mut R) -> String {
    let mut groups: Vec<Vec<&str>> = Vec::new();
    for i in 0..g.num_concepts() {
        let id = crate::ontology::ConceptId::from_index(i);
        let children = g.children(id);
        if children.is_empty() {
            continue;
        }
        let mut group = Vec::with_capacity(children.len() + 1);
        group.push(g.name(id));
        group.extend(children.iter().map(|&c| g.name(c)));
        groups.push(group);
    }
    let mut out = String::with_capacity(target_bytes + 64);
    if groups.is_empty() {
        return out;
    }
    let mut i = 0;
    while out.len() < target_bytes {
        let mut sentence = groups[i % groups.len()].clone();
        sentence.shuffle(rng);
        out.push_str(&sentence.join(" "));
        out.push('\n');
        i += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn balanced_tree_shape() {
        let g = balanced_tree(3);
        assert_eq!(g.num_concepts(), 15);
        assert_eq!(g.num_edges(), 14);
        let root = g.concept("n0").unwrap();
        assert!(g.parents(root).is_empty());
        assert_eq!(g.children(root).len(), 2);
        // Leaves n7..n14 have no children.
        let leaves = (7..15)
            .filter(|i| g.children(g.concept(&format!("n{i}")).unwrap()).is_empty())
            .count();
        assert_eq!(leaves, 8);
        // Depth 7 is the 255-concept tree the end-to-end tests lean on.
        assert_eq!(balanced_tree(7).num_concepts(), 255);
    }

    #[test]
    fn random_dags_are_acyclic_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let g = random_dag(12, 20, &mut rng).unwrap();
        assert_eq!(g.num_edges(), 20);
        assert!(g.toposort().is_ok());

        let mut rng2 = ChaCha8Rng::seed_from_u64(40);
        let g2 = random_dag(12, 20, &mut rng2).unwrap();
        let edges = |g: &OntologyGraph| -> Vec<(String, String)> {
            g.edges()
                .iter()
                .map(|e| (g.name(e.child).to_string(), g.name(e.parent).to_string()))
                .collect()
        };
        assert_eq!(edges(&g), edges(&g2));

        assert!(random_dag(5, 11, &mut rng).is_err());
        assert!(random_dag(1, 0, &mut rng).is_err());
    }

    #[test]
    fn split_partitions_closure_edges() {
        let g = balanced_tree(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ds = split_closure(&g, 0.5, &mut rng).unwrap();

        // The reduction of a tree is the tree itself.
        assert_eq!(ds.full.num_edges(), 30);
        let closure_only = ds.closure.num_edges() - 30;
        let expected_train = 30 + closure_only / 2;
        assert_eq!(ds.train.num_edges(), expected_train);

        // Dev/test positives are closure edges that did not go to training,
        // and each set is balanced.
        let train_pairs: HashSet<(String, String)> = ds
            .train
            .edges()
            .iter()
            .map(|e| {
                (
                    ds.train.name(e.child).to_string(),
                    ds.train.name(e.parent).to_string(),
                )
            })
            .collect();
        for set in [&ds.dev, &ds.test] {
            let positives: Vec<_> = set.iter().filter(|p| p.positive).collect();
            assert_eq!(positives.len() * 2, set.len());
            for p in positives {
                assert!(!train_pairs.contains(&(p.child.clone(), p.parent.clone())));
                let c = ds.closure.concept(&p.child).unwrap();
                let q = ds.closure.concept(&p.parent).unwrap();
                assert!(ds.closure.has_edge(c, q));
            }
        }

        // Same seed, same split.
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let ds2 = split_closure(&g, 0.5, &mut rng2).unwrap();
        assert_eq!(ds2.train.num_edges(), ds.train.num_edges());
        assert_eq!(ds2.dev, ds.dev);
        assert_eq!(ds2.test, ds.test);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let g = balanced_tree(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(split_closure(&g, 1.5, &mut rng).is_err());
        assert!(split_closure(&g, -0.1, &mut rng).is_err());
    }

    #[test]
    fn sibling_corpus_mentions_families_and_hits_size() {
        let g = balanced_tree(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corpus = sibling_corpus(&g, 4096, &mut rng);
        assert!(corpus.len() >= 4096);
        let first_line = corpus.lines().next().unwrap();
        let tokens: HashSet<&str> = first_line.split(' ').collect();
        // First group is the root family {n0, n1, n2} in some order.
        assert_eq!(tokens, HashSet::from(["n0", "n1", "n2"]));

        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(corpus, sibling_corpus(&g, 4096, &mut rng2));
    }
}

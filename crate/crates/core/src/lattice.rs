//! Mines join/meet training constraints from the hierarchy: for a pair of
//! incomparable concepts, the nearest common descendants (their "join"
//! witnesses) and nearest common ancestors (their "meet" witnesses).
//!
//! A DAG is not a lattice, so a pair may have several incomparable nearest
//! witnesses; one constraint is emitted per antichain member. Comparable
//! pairs are skipped, their relationship is already covered by closure
//! edges.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use fixedbitset::FixedBitSet;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ontology::{ConceptId, OntologyGraph, Reachability};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConstraintKind {
    /// The witness lies below both pair members (nearest common child).
    CommonChild,
    /// The witness lies above both pair members (nearest common parent).
    CommonParent,
}

impl ConstraintKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintKind::CommonChild => "common_child",
            ConstraintKind::CommonParent => "common_parent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "common_child" => Some(ConstraintKind::CommonChild),
            "common_parent" => Some(ConstraintKind::CommonParent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct JoinMeetConstraint {
    pub w1: ConceptId,
    pub w2: ConceptId,
    pub kind: ConstraintKind,
    pub witness: ConceptId,
}

impl JoinMeetConstraint {
    fn sort_key(&self) -> (u32, u32, ConstraintKind, u32) {
        (
            self.w1.index() as u32,
            self.w2.index() as u32,
            self.kind,
            self.witness.index() as u32,
        )
    }
}

/// Number of `(common_child, common_parent)` constraints in a mined set.
pub fn count_by_kind(constraints: &[JoinMeetConstraint]) -> (usize, usize) {
    let children = constraints
        .iter()
        .filter(|c| c.kind == ConstraintKind::CommonChild)
        .count();
    (children, constraints.len() - children)
}

/// Mines constraints over all incomparable pairs (canonicalized `w1 < w2`
/// by id). When the pair space exceeds `max_pairs`, a seeded reservoir
/// sample of exactly `max_pairs` pairs is used instead. The output is sorted,
/// so results are deterministic for a fixed seed regardless of `threads`.
pub fn mine_constraints<R: Rng>(
    graph: &OntologyGraph,
    reach: &Reachability,
    max_pairs: usize,
    rng: &mut R,
    threads: usize,
) -> Result<Vec<JoinMeetConstraint>> {
    if !reach.has_descendants() {
        return Err(Error::Config(
            "mining needs a reachability index built with descendant bitsets".to_string(),
        ));
    }
    let n = graph.num_concepts();
    let mut reservoir: Vec<(u32, u32)> = Vec::with_capacity(max_pairs.min(1 << 20));
    let mut seen = 0usize;
    for i in 0..n as u32 {
        for j in (i + 1)..n as u32 {
            let a = concept(i);
            let b = concept(j);
            if !reach.incomparable(a, b) {
                continue;
            }
            seen += 1;
            if reservoir.len() < max_pairs {
                reservoir.push((i, j));
            } else {
                let slot = rng.gen_range(0..seen);
                if slot < max_pairs {
                    reservoir[slot] = (i, j);
                }
            }
        }
    }

    let mut constraints = if threads <= 1 || reservoir.len() < 2 * threads {
        witnesses_for(&reservoir, reach)
    } else {
        let chunk = reservoir.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = reservoir
                .chunks(chunk)
                .map(|pairs| scope.spawn(move || witnesses_for(pairs, reach)))
                .collect();
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("miner worker panicked"));
            }
            all
        })
    };
    constraints.sort_by_key(JoinMeetConstraint::sort_key);
    Ok(constraints)
}

fn concept(i: u32) -> ConceptId {
    // Reachability and the graph share the same id space.
    ConceptId::from_index(i as usize)
}

fn witnesses_for(pairs: &[(u32, u32)], reach: &Reachability) -> Vec<JoinMeetConstraint> {
    let mut out = Vec::new();
    let mut shared = FixedBitSet::with_capacity(reach.num_concepts());
    for &(i, j) in pairs {
        let a = concept(i);
        let b = concept(j);

        // Nearest common children: maximal elements of the common-descendant
        // set, i.e. those with no ancestor inside the set.
        shared.clone_from(reach.descendants(a));
        shared.intersect_with(reach.descendants(b));
        for z in shared.ones() {
            let zc = concept(z as u32);
            if reach.ancestors(zc).is_disjoint(&shared) {
                out.push(JoinMeetConstraint {
                    w1: a,
                    w2: b,
                    kind: ConstraintKind::CommonChild,
                    witness: zc,
                });
            }
        }

        // Nearest common parents: minimal elements of the common-ancestor
        // set, i.e. those with no descendant inside the set.
        shared.clone_from(reach.ancestors(a));
        shared.intersect_with(reach.ancestors(b));
        for z in shared.ones() {
            let zc = concept(z as u32);
            if reach.descendants(zc).is_disjoint(&shared) {
                out.push(JoinMeetConstraint {
                    w1: a,
                    w2: b,
                    kind: ConstraintKind::CommonParent,
                    witness: zc,
                });
            }
        }
    }
    out
}

/// Writes constraints as TSV `kind\tw1\tw2\twitness` with surface strings.
pub fn emit_constraints(
    constraints: &[JoinMeetConstraint],
    graph: &OntologyGraph,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for c in constraints {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            c.kind.as_str(),
            graph.name(c.w1),
            graph.name(c.w2),
            graph.name(c.witness)
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a constraint TSV back against the same graph. Unknown terms and
/// malformed lines are hard errors since the file is machine-written.
pub fn read_constraints(
    path: impl AsRef<Path>,
    graph: &OntologyGraph,
) -> Result<Vec<JoinMeetConstraint>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let kind = ConstraintKind::parse(fields[0]).ok_or_else(|| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason: format!("unknown constraint kind `{}`", fields[0]),
        })?;
        let resolve = |term: &str| {
            graph.concept(term).ok_or_else(|| Error::UnknownConcept {
                term: term.to_string(),
                path: path.to_path_buf(),
            })
        };
        out.push(JoinMeetConstraint {
            w1: resolve(fields[1])?,
            w2: resolve(fields[2])?,
            kind,
            witness: resolve(fields[3])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{AddOutcome, Provenance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph_from(edges: &[(&str, &str)]) -> OntologyGraph {
        let mut g = OntologyGraph::new("IsA");
        for &(c, p) in edges {
            let c = g.intern(c);
            let p = g.intern(p);
            assert_eq!(g.add_edge(c, p, Provenance::Original), AddOutcome::Added);
        }
        g
    }

    fn mine(g: &OntologyGraph) -> Vec<JoinMeetConstraint> {
        let reach = Reachability::build(g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        mine_constraints(g, &reach, usize::MAX, &mut rng, 1).unwrap()
    }

    #[test]
    fn diamond_yields_one_witness_of_each_kind() {
        // a and b sit between root r and leaf l.
        let g = graph_from(&[("a", "r"), ("b", "r"), ("l", "a"), ("l", "b")]);
        let cs = mine(&g);
        assert_eq!(cs.len(), 2);
        let a = g.concept("a").unwrap();
        let b = g.concept("b").unwrap();
        let r = g.concept("r").unwrap();
        let l = g.concept("l").unwrap();
        assert!(cs.contains(&JoinMeetConstraint {
            w1: a.min(b),
            w2: a.max(b),
            kind: ConstraintKind::CommonChild,
            witness: l
        }));
        assert!(cs.contains(&JoinMeetConstraint {
            w1: a.min(b),
            w2: a.max(b),
            kind: ConstraintKind::CommonParent,
            witness: r
        }));
        assert_eq!(count_by_kind(&cs), (1, 1));
    }

    #[test]
    fn chain_has_no_incomparable_pairs() {
        let g = graph_from(&[("a", "b"), ("b", "c")]);
        assert!(mine(&g).is_empty());
    }

    #[test]
    fn antichain_witnesses_are_all_emitted() {
        // Two leaves below both a and b: both are nearest common children.
        let g = graph_from(&[
            ("a", "r"),
            ("b", "r"),
            ("l1", "a"),
            ("l1", "b"),
            ("l2", "a"),
            ("l2", "b"),
            // A deeper node below l1 must not appear as a witness.
            ("deep", "l1"),
        ]);
        let cs = mine(&g);
        let a = g.concept("a").unwrap();
        let b = g.concept("b").unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        let children: Vec<&str> = cs
            .iter()
            .filter(|c| c.kind == ConstraintKind::CommonChild && c.w1 == lo && c.w2 == hi)
            .map(|c| g.name(c.witness))
            .collect();
        assert_eq!(children, vec!["l1", "l2"]);
        assert!(!children.contains(&"deep"));
    }

    #[test]
    fn pair_without_common_child_contributes_only_parents() {
        let g = graph_from(&[("a", "r"), ("b", "r")]);
        let cs = mine(&g);
        assert_eq!(count_by_kind(&cs), (0, 1));
        assert_eq!(g.name(cs[0].witness), "r");
    }

    #[test]
    fn pairs_are_canonicalized_and_sorted() {
        let g = graph_from(&[("x", "r"), ("y", "r"), ("z", "r")]);
        let cs = mine(&g);
        assert_eq!(cs.len(), 3);
        for c in &cs {
            assert!(c.w1 < c.w2);
        }
        let mut sorted = cs.clone();
        sorted.sort_by_key(JoinMeetConstraint::sort_key);
        assert_eq!(cs, sorted);
    }

    #[test]
    fn reservoir_truncates_the_pair_space_deterministically() {
        let mut g = OntologyGraph::new("IsA");
        let root = g.intern("root");
        for i in 0..30 {
            let leaf = g.intern(&format!("leaf{i}"));
            g.add_edge(leaf, root, Provenance::Original);
        }
        let reach = Reachability::build(&g).unwrap();
        // 30 leaves pairwise incomparable: C(30,2) = 435 pairs, sample 10.
        let sample = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            mine_constraints(&g, &reach, 10, &mut rng, 1).unwrap()
        };
        let a = sample(1);
        assert_eq!(a.len(), 10);
        assert_eq!(a, sample(1));
        assert_ne!(a, sample(2));
    }

    #[test]
    fn parallel_mining_matches_serial() {
        let g = graph_from(&[
            ("a", "r"),
            ("b", "r"),
            ("c", "r"),
            ("l", "a"),
            ("l", "b"),
            ("m", "b"),
            ("m", "c"),
        ]);
        let reach = Reachability::build(&g).unwrap();
        let mut rng1 = ChaCha8Rng::seed_from_u64(4);
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        let serial = mine_constraints(&g, &reach, usize::MAX, &mut rng1, 1).unwrap();
        let parallel = mine_constraints(&g, &reach, usize::MAX, &mut rng2, 4).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn constraint_round_trip() {
        let g = graph_from(&[("a", "r"), ("b", "r"), ("l", "a"), ("l", "b")]);
        let cs = mine(&g);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("constraints.tsv");
        emit_constraints(&cs, &g, &path).unwrap();
        let back = read_constraints(&path, &g).unwrap();
        assert_eq!(back, cs);
    }

    #[test]
    fn empty_constraint_set_writes_empty_file() {
        let g = graph_from(&[("a", "b")]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("constraints.tsv");
        emit_constraints(&[], &g, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
        assert!(read_constraints(&path, &g).unwrap().is_empty());
    }

    #[test]
    fn unknown_terms_in_constraint_files_are_rejected() {
        let g = graph_from(&[("a", "b")]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("constraints.tsv");
        std::fs::write(&path, "common_parent\ta\tnope\tb\n").unwrap();
        assert!(matches!(
            read_constraints(&path, &g),
            Err(Error::UnknownConcept { .. })
        ));
    }
}

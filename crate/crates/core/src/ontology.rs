//! Directed Is-A hierarchy: triplet ingestion, reachability, transitive
//! closure and reduction, and negative pair sampling.
//!
//! Edges point from the more specific concept to the more general one, so
//! `(dog, mammal)` reads "dog Is-A mammal". The graph must stay acyclic;
//! ingestion drops edges that would close a cycle and the analytic passes
//! refuse cyclic input outright.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use fixedbitset::FixedBitSet;
use rand::Rng;

use crate::error::{Error, Result};

/// Index of an interned concept. Stable for the lifetime of a graph and any
/// graph derived from it (closure, reduction).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConceptId(u32);

impl ConceptId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub(crate) fn from_index(index: usize) -> Self {
        ConceptId(index as u32)
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Where an edge came from. Original edges were present in the input file;
/// the other tags mark edges added by the closure pass or the lattice miner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Original,
    Closure,
    JoinMined,
    MeetMined,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Closure => "closure",
            Provenance::JoinMined => "join",
            Provenance::MeetMined => "meet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "original" => Some(Provenance::Original),
            "closure" => Some(Provenance::Closure),
            "join" => Some(Provenance::JoinMined),
            "meet" => Some(Provenance::MeetMined),
            _ => None,
        }
    }
}

/// One directed edge of the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletEdge {
    pub child: ConceptId,
    pub parent: ConceptId,
    pub provenance: Provenance,
}

/// Outcome of trying to add an edge to the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddOutcome {
    Added,
    Duplicate,
    WouldCycle,
}

/// Summary of one ingestion pass. Malformed lines are reported here instead
/// of aborting the whole file.
#[derive(Debug, Default, Clone)]
pub struct IngestReport {
    pub lines: usize,
    pub edges_added: usize,
    pub duplicates: usize,
    pub cycle_edges_dropped: usize,
    pub relation_filtered: usize,
    /// `(line number, reason)` pairs, 1-based.
    pub malformed: Vec<(usize, String)>,
}

/// Canonical form of a concept name: lowercased, surrounding whitespace
/// trimmed, internal whitespace runs collapsed to single spaces.
pub fn normalize_term(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for (i, word) in raw.split_whitespace().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        for ch in word.chars() {
            out.extend(ch.to_lowercase());
        }
    }
    out
}

/// An interned, acyclic Is-A graph.
#[derive(Debug, Clone)]
pub struct OntologyGraph {
    relation: String,
    names: Vec<String>,
    by_name: HashMap<String, ConceptId>,
    edges: Vec<TripletEdge>,
    edge_prov: HashMap<(u32, u32), Provenance>,
    parents: Vec<Vec<ConceptId>>,
    children: Vec<Vec<ConceptId>>,
    /// Generation-stamped scratch for cycle checks, reused across calls.
    visit_stamp: Vec<u64>,
    generation: u64,
}

impl OntologyGraph {
    pub fn new(relation: impl Into<String>) -> Self {
        OntologyGraph {
            relation: relation.into(),
            names: Vec::new(),
            by_name: HashMap::new(),
            edges: Vec::new(),
            edge_prov: HashMap::new(),
            parents: Vec::new(),
            children: Vec::new(),
            visit_stamp: Vec::new(),
            generation: 0,
        }
    }

    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn num_concepts(&self) -> usize {
        self.names.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[TripletEdge] {
        &self.edges
    }

    /// Interns `raw` (normalizing it first) and returns its id.
    pub fn intern(&mut self, raw: &str) -> ConceptId {
        let name = normalize_term(raw);
        if let Some(&id) = self.by_name.get(&name) {
            return id;
        }
        let id = ConceptId(self.names.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.parents.push(Vec::new());
        self.children.push(Vec::new());
        self.visit_stamp.push(0);
        id
    }

    /// Looks up a concept by (raw) name.
    pub fn concept(&self, raw: &str) -> Option<ConceptId> {
        self.by_name.get(&normalize_term(raw)).copied()
    }

    pub fn name(&self, id: ConceptId) -> &str {
        &self.names[id.index()]
    }

    /// All concept names in id order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn parents(&self, id: ConceptId) -> &[ConceptId] {
        &self.parents[id.index()]
    }

    pub fn children(&self, id: ConceptId) -> &[ConceptId] {
        &self.children[id.index()]
    }

    pub fn has_edge(&self, child: ConceptId, parent: ConceptId) -> bool {
        self.edge_prov.contains_key(&(child.0, parent.0))
    }

    pub fn provenance(&self, child: ConceptId, parent: ConceptId) -> Option<Provenance> {
        self.edge_prov.get(&(child.0, parent.0)).copied()
    }

    /// Adds `child -> parent` unless it already exists or would close a
    /// directed cycle (self-loops included).
    pub fn add_edge(
        &mut self,
        child: ConceptId,
        parent: ConceptId,
        provenance: Provenance,
    ) -> AddOutcome {
        if self.has_edge(child, parent) {
            return AddOutcome::Duplicate;
        }
        if child == parent || self.reaches_upward(parent, child) {
            return AddOutcome::WouldCycle;
        }
        self.push_edge_unchecked(child, parent, provenance);
        AddOutcome::Added
    }

    /// Inserts an edge known not to create a cycle or duplicate.
    fn push_edge_unchecked(&mut self, child: ConceptId, parent: ConceptId, prov: Provenance) {
        self.edges.push(TripletEdge {
            child,
            parent,
            provenance: prov,
        });
        self.edge_prov.insert((child.0, parent.0), prov);
        self.parents[child.index()].push(parent);
        self.children[parent.index()].push(child);
    }

    /// Depth-first search along child->parent edges: is `to` an ancestor of
    /// (or equal to) `from`?
    fn reaches_upward(&mut self, from: ConceptId, to: ConceptId) -> bool {
        if from == to {
            return true;
        }
        self.generation += 1;
        let generation = self.generation;
        let mut stack = vec![from];
        self.visit_stamp[from.index()] = generation;
        while let Some(node) = stack.pop() {
            for &p in &self.parents[node.index()] {
                if p == to {
                    return true;
                }
                if self.visit_stamp[p.index()] != generation {
                    self.visit_stamp[p.index()] = generation;
                    stack.push(p);
                }
            }
        }
        false
    }

    /// Concepts in an order where every parent precedes all of its children.
    /// Fails with a witness cycle if the graph is not a DAG.
    pub fn toposort(&self) -> Result<Vec<ConceptId>> {
        let n = self.num_concepts();
        let mut indegree: Vec<usize> = (0..n).map(|i| self.parents[i].len()).collect();
        let mut queue: Vec<ConceptId> = (0..n)
            .filter(|&i| indegree[i] == 0)
            .map(|i| ConceptId(i as u32))
            .collect();
        let mut order = Vec::with_capacity(n);
        let mut head = 0;
        while head < queue.len() {
            let p = queue[head];
            head += 1;
            order.push(p);
            for &c in &self.children[p.index()] {
                indegree[c.index()] -= 1;
                if indegree[c.index()] == 0 {
                    queue.push(c);
                }
            }
        }
        if order.len() == n {
            Ok(order)
        } else {
            Err(Error::CycleDetected(self.find_cycle(&indegree)))
        }
    }

    /// Walks parent links inside the still-cyclic remainder until a node
    /// repeats, then returns that loop as names.
    fn find_cycle(&self, indegree: &[usize]) -> Vec<String> {
        let start = (0..self.num_concepts())
            .find(|&i| indegree[i] > 0)
            .expect("cycle extraction called on acyclic graph");
        let mut seen_at: HashMap<u32, usize> = HashMap::new();
        let mut path = Vec::new();
        let mut node = ConceptId(start as u32);
        loop {
            if let Some(&pos) = seen_at.get(&node.0) {
                let mut cycle: Vec<String> = path[pos..]
                    .iter()
                    .map(|&c| self.name(c).to_string())
                    .collect();
                cycle.push(self.name(node).to_string());
                return cycle;
            }
            seen_at.insert(node.0, path.len());
            path.push(node);
            node = *self.parents[node.index()]
                .iter()
                .find(|p| indegree[p.index()] > 0)
                .expect("node in cyclic remainder has a parent in the remainder");
        }
    }
}

/// Reads tab-separated `child <tab> relation <tab> parent [<tab> provenance]`
/// triplets. Lines starting with `#` and blank lines are skipped; lines whose
/// relation differs from `relation` are counted and ignored; malformed lines
/// are reported per line number. Duplicate edges and edges that would close a
/// cycle are dropped (and counted) rather than treated as fatal.
pub fn ingest_triplets(
    path: impl AsRef<Path>,
    relation: &str,
) -> Result<(OntologyGraph, IngestReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut graph = OntologyGraph::new(relation);
    let mut report = IngestReport::default();

    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        report.lines += 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 && fields.len() != 4 {
            report.malformed.push((
                lineno,
                format!("expected 3 or 4 tab-separated fields, got {}", fields.len()),
            ));
            continue;
        }
        if fields[1].trim() != relation {
            report.relation_filtered += 1;
            continue;
        }
        let provenance = if fields.len() == 4 {
            match Provenance::parse(fields[3].trim()) {
                Some(p) => p,
                None => {
                    report.malformed.push((
                        lineno,
                        format!("unknown provenance tag `{}`", fields[3].trim()),
                    ));
                    continue;
                }
            }
        } else {
            Provenance::Original
        };
        let child_name = normalize_term(fields[0]);
        let parent_name = normalize_term(fields[2]);
        if child_name.is_empty() || parent_name.is_empty() {
            report
                .malformed
                .push((lineno, "empty concept name".to_string()));
            continue;
        }
        let child = graph.intern(&child_name);
        let parent = graph.intern(&parent_name);
        match graph.add_edge(child, parent, provenance) {
            AddOutcome::Added => report.edges_added += 1,
            AddOutcome::Duplicate => report.duplicates += 1,
            AddOutcome::WouldCycle => {
                log::warn!(
                    "{path:?}:{lineno}: dropping edge {child_name} -> {parent_name}, would close a cycle"
                );
                report.cycle_edges_dropped += 1;
            }
        }
    }

    if graph.num_edges() == 0 {
        return Err(Error::EmptyOntology {
            relation: relation.to_string(),
            path: path.to_path_buf(),
        });
    }
    Ok((graph, report))
}

/// Writes the graph back in the triplet format `ingest_triplets` reads.
/// Original edges get three columns; derived edges carry their provenance in
/// a fourth column. Edge order is the graph's stored order.
pub fn write_triplets(graph: &OntologyGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for edge in graph.edges() {
        let child = graph.name(edge.child);
        let parent = graph.name(edge.parent);
        match edge.provenance {
            Provenance::Original => writeln!(w, "{child}\t{}\t{parent}", graph.relation),
            prov => writeln!(
                w,
                "{child}\t{}\t{parent}\t{}",
                graph.relation,
                prov.as_str()
            ),
        }
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-concept ancestor (and optionally descendant) bitsets, built once over
/// a DAG and shared by the closure, reduction, miner, and sampling passes.
pub struct Reachability {
    up: Vec<FixedBitSet>,
    /// Present only when built with `build`; the closure and reduction
    /// passes use `ancestors_only` to halve memory on large graphs.
    down: Option<Vec<FixedBitSet>>,
}

impl Reachability {
    /// Builds both directions. Dynamic programming over a topological
    /// order; `O(V * E / 64)` bit operations, `O(V^2 / 4)` bytes.
    pub fn build(graph: &OntologyGraph) -> Result<Self> {
        let mut reach = Self::ancestors_only(graph)?;
        let n = graph.num_concepts();
        let order = graph.toposort()?;
        let mut down = vec![FixedBitSet::with_capacity(n); n];
        for &node in order.iter().rev() {
            let mut bits = FixedBitSet::with_capacity(n);
            for &c in graph.children(node) {
                bits.insert(c.index());
                bits.union_with(&down[c.index()]);
            }
            down[node.index()] = bits;
        }
        reach.down = Some(down);
        Ok(reach)
    }

    /// Builds ancestor bitsets only; `descendants` is unavailable.
    pub fn ancestors_only(graph: &OntologyGraph) -> Result<Self> {
        let n = graph.num_concepts();
        let order = graph.toposort()?;
        let mut up = vec![FixedBitSet::with_capacity(n); n];
        for &node in &order {
            // Parents are finished before their children arrive.
            let mut bits = FixedBitSet::with_capacity(n);
            for &p in graph.parents(node) {
                bits.insert(p.index());
                bits.union_with(&up[p.index()]);
            }
            up[node.index()] = bits;
        }
        Ok(Reachability { up, down: None })
    }

    pub fn num_concepts(&self) -> usize {
        self.up.len()
    }

    pub fn has_descendants(&self) -> bool {
        self.down.is_some()
    }

    /// True if there is a path of length >= 1 from `child` up to `parent`,
    /// i.e. the pair is in the transitive closure.
    pub fn is_ancestor(&self, child: ConceptId, parent: ConceptId) -> bool {
        self.up[child.index()].contains(parent.index())
    }

    /// Strict ancestors of `id` as a bitset over concept indices.
    pub fn ancestors(&self, id: ConceptId) -> &FixedBitSet {
        &self.up[id.index()]
    }

    /// Strict descendants of `id`.
    ///
    /// # Panics
    /// If this index was built with `ancestors_only`.
    pub fn descendants(&self, id: ConceptId) -> &FixedBitSet {
        let down = self
            .down
            .as_ref()
            .expect("reachability index was built without descendant bitsets");
        &down[id.index()]
    }

    /// True if neither concept is an ancestor of the other.
    pub fn incomparable(&self, a: ConceptId, b: ConceptId) -> bool {
        a != b && !self.is_ancestor(a, b) && !self.is_ancestor(b, a)
    }
}

/// Returns a new graph whose edge set is the transitive closure of `graph`.
/// Existing edges keep their provenance; new edges are tagged `closure`.
/// Edges come out sorted by `(child, parent)` id, so the pass is idempotent
/// up to ordering and deterministic byte-for-byte.
pub fn transitive_closure(graph: &OntologyGraph) -> Result<OntologyGraph> {
    let reach = Reachability::ancestors_only(graph)?;
    let mut closed = clone_concepts(graph);
    for i in 0..graph.num_concepts() {
        let child = ConceptId(i as u32);
        for parent_idx in reach.ancestors(child).ones() {
            let parent = ConceptId(parent_idx as u32);
            let prov = graph
                .provenance(child, parent)
                .unwrap_or(Provenance::Closure);
            closed.push_edge_unchecked(child, parent, prov);
        }
    }
    Ok(closed)
}

/// Returns a new graph keeping only edges that are not implied by a longer
/// path. The result is the unique transitive reduction of the DAG; edges keep
/// their stored order and provenance, so reducing an already-reduced graph is
/// a byte-stable no-op.
pub fn transitive_reduction(graph: &OntologyGraph) -> Result<OntologyGraph> {
    let reach = Reachability::ancestors_only(graph)?;
    let mut reduced = clone_concepts(graph);
    for edge in graph.edges() {
        let redundant = graph
            .parents(edge.child)
            .iter()
            .any(|&w| w != edge.parent && reach.is_ancestor(w, edge.parent));
        if !redundant {
            reduced.push_edge_unchecked(edge.child, edge.parent, edge.provenance);
        }
    }
    Ok(reduced)
}

/// New graph with the same interned concepts and relation but no edges.
fn clone_concepts(graph: &OntologyGraph) -> OntologyGraph {
    OntologyGraph {
        relation: graph.relation.clone(),
        names: graph.names.clone(),
        by_name: graph.by_name.clone(),
        edges: Vec::new(),
        edge_prov: HashMap::new(),
        parents: vec![Vec::new(); graph.num_concepts()],
        children: vec![Vec::new(); graph.num_concepts()],
        visit_stamp: vec![0; graph.num_concepts()],
        generation: 0,
    }
}

/// Which side of a positive pair to corrupt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeMode {
    CorruptChild,
    CorruptParent,
}

/// Draws a corrupted version of `positive` that is false under the full
/// closure: one side is replaced by a uniformly random concept until the
/// resulting pair is neither reflexive nor a closure edge. Gives up after
/// `max_retries` draws.
pub fn sample_negative_pair<R: Rng>(
    graph: &OntologyGraph,
    reach: &Reachability,
    positive: (ConceptId, ConceptId),
    mode: NegativeMode,
    rng: &mut R,
    max_retries: usize,
) -> Result<(ConceptId, ConceptId)> {
    let n = graph.num_concepts() as u32;
    for _ in 0..max_retries {
        let draw = ConceptId(rng.gen_range(0..n));
        let (child, parent) = match mode {
            NegativeMode::CorruptChild => (draw, positive.1),
            NegativeMode::CorruptParent => (positive.0, draw),
        };
        if child != parent && !reach.is_ancestor(child, parent) {
            return Ok((child, parent));
        }
    }
    Err(Error::NegativeSamplingExhausted {
        retries: max_retries,
    })
}

/// Draws a uniformly random non-edge: both endpoints sampled independently.
pub fn sample_free_pair<R: Rng>(
    graph: &OntologyGraph,
    reach: &Reachability,
    rng: &mut R,
    max_retries: usize,
) -> Result<(ConceptId, ConceptId)> {
    let n = graph.num_concepts() as u32;
    for _ in 0..max_retries {
        let child = ConceptId(rng.gen_range(0..n));
        let parent = ConceptId(rng.gen_range(0..n));
        if child != parent && !reach.is_ancestor(child, parent) {
            return Ok((child, parent));
        }
    }
    Err(Error::NegativeSamplingExhausted {
        retries: max_retries,
    })
}

//! Order embeddings for Is-A hierarchies.
//!
//! The crate learns non-negative concept vectors in which a child concept
//! dominates its ancestors coordinatewise, so hierarchy membership becomes a
//! geometric test. It covers the full pipeline: ingesting Is-A triplets into
//! a DAG, transitive closure and reduction, mining join/meet (nearest common
//! child/parent) constraints, a streaming CBOW text objective over L1
//! distance, interleaved training with lazy sparse Adam, a bilinear
//! baseline, threshold-tuned binary evaluation, and a compact binary model
//! format.
//!
//! Typical flow: build an [`OntologyGraph`](ontology::OntologyGraph), mine
//! constraints with [`lattice::mine_constraints`], call
//! [`trainer::train`], then measure with [`eval::evaluate`].

pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod lattice;
pub mod model_io;
pub mod objectives;
pub mod ontology;
pub mod optim;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

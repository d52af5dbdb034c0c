//! Privacy-preserving knowledge-graph question answering.
//!
//! Raw KG facts stay local. A remote Brain model sees only a
//! session-anonymized, literal-coarsened, structurally sanitized view and
//! anonymized candidate paths; a local Hand model grounds, verifies, and
//! answers on the raw subgraph. Verified reasoning experience is stored in
//! an encrypted local memory and reused to skip remote calls and shortcut
//! exploration on similar questions.
//!
//! Modules follow the pipeline: [`kg`] loads the graph, [`grounding`]
//! finds topic entities and the working subgraph, [`anonymize`] builds the
//! session mapping and the exposed view, [`retrieval`] explores and prunes
//! candidate paths, [`memory`] manages experience, [`controller`] runs the
//! dual-LLM loop, [`gateway`] hosts the model backends behind the privacy
//! boundary, and [`eval`] scores batches of questions.

pub mod anonymize;
pub mod boundary;
pub mod config;
pub mod controller;
pub mod eval;
pub mod gateway;
pub mod grounding;
pub mod kg;
pub mod memory;
pub mod retrieval;
pub mod transcript;

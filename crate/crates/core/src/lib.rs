//! Instruction-driven knowledge mining engine.
//!
//! Natural-language mining tasks are compiled into [`plan::Plan`]s built from
//! two primitives, `get_label` (classification) and `get_span` (extraction),
//! and executed over corpora through pluggable inference backends. The
//! [`generator`] module manufactures the weak supervision used to tune the
//! small proxy models that serve those primitives.

pub mod backends;
pub mod corpus;
pub mod eval;
pub mod executor;
pub mod generator;
pub mod plan;
pub mod planner;
pub mod primitives;
pub mod testkit;

//! Communication programs: feature maps, the rule AST, an interpreter, the
//! textual syntax, and communication graphs with their degree metric.

mod ast;
mod features;
mod graph;
mod interp;
mod syntax;

pub use ast::{Affine, Pred, Program, Rule, MAX_PRED_DEPTH};
pub use features::{angle, featurize, featurize_into, FeatureVersion};
pub use graph::{max_degree, CommGraph, DegreeStats};
pub use interp::{build_comm_graph, candidates, eval_program, eval_rule, program_selections, select};
pub use syntax::{parse_program, parse_programs, print_program, print_programs, print_rule, ParseError, ParseErrorKind};

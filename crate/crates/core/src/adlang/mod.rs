//! Attribute-ad expression language shared by both matchmaking stages.
//!
//! Ads are case-insensitive attribute maps whose values are expressions.
//! Evaluation is three-valued (true/false/undefined, plus error) and a
//! job/machine pair matches when each side's gate expression is true against
//! the other.

mod ast;
mod classad;
mod eval;
mod parser;
mod value;

pub use ast::{ArithOp, CmpOp, Expr, Scope};
pub use classad::{AdKind, ClassAd, ClassAdTextError};
pub use eval::{evaluate, evaluate_attr, symmetric_match};
pub use parser::{parse_expression, ParseError};
pub use value::Value;

use std::fmt;

use super::value::{write_real, write_text, Value};

/// Which ad an attribute reference is resolved against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    /// Bare name: the evaluating ad first, then the other one.
    Unqualified,
    My,
    Target,
    /// Whichever side is tagged as the job ad.
    Job,
    /// Whichever side is tagged as the machine ad.
    Machine,
}

impl Scope {
    pub(crate) fn from_keyword(word: &str) -> Option<Scope> {
        match word.to_ascii_lowercase().as_str() {
            "my" => Some(Scope::My),
            "target" => Some(Scope::Target),
            "job" => Some(Scope::Job),
            "machine" => Some(Scope::Machine),
            _ => None,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Scope::Unqualified => "",
            Scope::My => "MY.",
            Scope::Target => "TARGET.",
            Scope::Job => "Job.",
            Scope::Machine => "Machine.",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    /// `==`
    Eq,
    /// `=`, same meaning as `==`; kept distinct so printing preserves the source.
    Assign,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Assign => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ArithOp {
    pub fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "*",
            ArithOp::Div => "/",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            ArithOp::Add | ArithOp::Sub => PREC_ADD,
            ArithOp::Mul | ArithOp::Div => PREC_MUL,
        }
    }
}

/// Expression syntax tree.
///
/// `Paren` nodes are kept so that printing reproduces the parsed structure
/// exactly.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(Value),
    AttrRef {
        scope: Scope,
        name: String,
    },
    Not(Box<Expr>),
    Neg(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Compare(CmpOp, Box<Expr>, Box<Expr>),
    Member {
        needle: Box<Expr>,
        haystack: Box<Expr>,
    },
    Arith(ArithOp, Box<Expr>, Box<Expr>),
    List(Vec<Expr>),
    Paren(Box<Expr>),
}

const PREC_OR: u8 = 1;
const PREC_AND: u8 = 2;
const PREC_NOT: u8 = 3;
const PREC_CMP: u8 = 4;
const PREC_ADD: u8 = 5;
const PREC_MUL: u8 = 6;
const PREC_UNARY: u8 = 7;
const PREC_ATOM: u8 = 8;

impl Expr {
    pub fn literal(v: impl Into<Value>) -> Expr {
        Expr::Literal(v.into())
    }

    pub fn attr(scope: Scope, name: impl Into<String>) -> Expr {
        Expr::AttrRef {
            scope,
            name: name.into(),
        }
    }

    pub fn and(lhs: Expr, rhs: Expr) -> Expr {
        Expr::And(Box::new(lhs), Box::new(rhs))
    }

    pub fn or(lhs: Expr, rhs: Expr) -> Expr {
        Expr::Or(Box::new(lhs), Box::new(rhs))
    }

    pub fn compare(op: CmpOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Compare(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn member(needle: Expr, haystack: Expr) -> Expr {
        Expr::Member {
            needle: Box::new(needle),
            haystack: Box::new(haystack),
        }
    }

    /// Left-nested conjunction of `parts`; `true` when empty.
    pub fn conjunction(parts: impl IntoIterator<Item = Expr>) -> Expr {
        parts
            .into_iter()
            .reduce(Expr::and)
            .unwrap_or(Expr::Literal(Value::Boolean(true)))
    }

    /// Wraps `self` in parentheses when it would otherwise bind looser than a
    /// conjunct, so it can be embedded in a `&&` chain and still print and
    /// re-parse to the same tree.
    pub fn grouped(self) -> Expr {
        if self.precedence() < PREC_NOT {
            Expr::Paren(Box::new(self))
        } else {
            self
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Or(..) => PREC_OR,
            Expr::And(..) => PREC_AND,
            Expr::Not(_) => PREC_NOT,
            Expr::Compare(..) | Expr::Member { .. } => PREC_CMP,
            Expr::Arith(op, ..) => op.precedence(),
            Expr::Neg(_) => PREC_UNARY,
            Expr::Literal(Value::Integer(i)) if *i < 0 => PREC_UNARY,
            Expr::Literal(Value::Real(r)) if r.is_sign_negative() || !r.is_finite() => PREC_UNARY,
            _ => PREC_ATOM,
        }
    }

    fn write_child(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        if self.precedence() < min_prec {
            write!(f, "({})", self)
        } else {
            write!(f, "{}", self)
        }
    }
}

fn write_literal(f: &mut fmt::Formatter<'_>, v: &Value) -> fmt::Result {
    match v {
        Value::Real(r) => write_real(f, *r),
        Value::Text(s) => write_text(f, s),
        // no literal syntax for error; this evaluates to it
        Value::Error => f.write_str("(1 / 0)"),
        other => write!(f, "{}", other),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Literal(v) => write_literal(f, v),
            Expr::AttrRef { scope, name } => write!(f, "{}{}", scope.prefix(), name),
            Expr::Not(e) => {
                f.write_str("!")?;
                e.write_child(f, PREC_NOT)
            }
            Expr::Neg(e) => {
                f.write_str("-")?;
                e.write_child(f, PREC_UNARY)
            }
            Expr::And(l, r) => {
                l.write_child(f, PREC_AND)?;
                f.write_str(" && ")?;
                r.write_child(f, PREC_AND + 1)
            }
            Expr::Or(l, r) => {
                l.write_child(f, PREC_OR)?;
                f.write_str(" || ")?;
                r.write_child(f, PREC_OR + 1)
            }
            Expr::Compare(op, l, r) => {
                l.write_child(f, PREC_ADD)?;
                write!(f, " {} ", op.symbol())?;
                r.write_child(f, PREC_ADD)
            }
            Expr::Member { needle, haystack } => {
                needle.write_child(f, PREC_ADD)?;
                f.write_str(" in ")?;
                haystack.write_child(f, PREC_ADD)
            }
            Expr::Arith(op, l, r) => {
                let p = op.precedence();
                l.write_child(f, p)?;
                write!(f, " {} ", op.symbol())?;
                r.write_child(f, p + 1)
            }
            Expr::List(items) => {
                f.write_str("{")?;
                for (i, e) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{}", e)?;
                }
                f.write_str("}")
            }
            Expr::Paren(e) => write!(f, "({})", e),
        }
    }
}

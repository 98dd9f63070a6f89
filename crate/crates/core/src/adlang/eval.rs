use std::cell::RefCell;
use std::collections::HashMap;

use super::ast::{ArithOp, CmpOp, Expr, Scope};
use super::classad::{AdKind, ClassAd};
use super::value::{text_eq, Value};

/// Attribute values already computed during one evaluation, keyed by the
/// (holding ad, other ad, lowercased name). `None` marks an attribute whose
/// evaluation is in progress, so meeting it again means a reference cycle.
type Memo = RefCell<HashMap<(*const ClassAd, *const ClassAd, String), Option<Value>>>;

#[derive(Clone, Copy)]
struct Ctx<'a> {
    my: &'a ClassAd,
    target: &'a ClassAd,
    memo: &'a Memo,
}

impl<'a> Ctx<'a> {
    fn by_kind(&self, kind: AdKind) -> Option<(&'a ClassAd, &'a ClassAd)> {
        if self.my.kind() == kind {
            Some((self.my, self.target))
        } else if self.target.kind() == kind {
            Some((self.target, self.my))
        } else {
            None
        }
    }

    fn resolve(&self, scope: Scope, name: &str) -> Value {
        let (home, other) = match scope {
            Scope::My => (self.my, self.target),
            Scope::Target => (self.target, self.my),
            Scope::Job => match self.by_kind(AdKind::Job) {
                Some(pair) => pair,
                None => return Value::Undefined,
            },
            Scope::Machine => match self.by_kind(AdKind::Machine) {
                Some(pair) => pair,
                None => return Value::Undefined,
            },
            Scope::Unqualified => {
                if self.my.contains(name) {
                    (self.my, self.target)
                } else {
                    (self.target, self.my)
                }
            }
        };
        let Some(expr) = home.get(name) else {
            return Value::Undefined;
        };
        let key = (
            home as *const ClassAd,
            other as *const ClassAd,
            name.to_lowercase(),
        );
        match self.memo.borrow().get(&key) {
            Some(Some(v)) => return v.clone(),
            Some(None) => return Value::Error,
            None => {}
        }
        self.memo.borrow_mut().insert(key.clone(), None);
        // an attribute's own references resolve relative to the ad holding it
        let inner = Ctx {
            my: home,
            target: other,
            memo: self.memo,
        };
        let v = inner.eval(expr);
        self.memo.borrow_mut().insert(key, Some(v.clone()));
        v
    }

    fn eval(&self, expr: &Expr) -> Value {
        match expr {
            Expr::Literal(v) => v.clone(),
            Expr::AttrRef { scope, name } => self.resolve(*scope, name),
            Expr::Paren(e) => self.eval(e),
            Expr::List(items) => Value::List(items.iter().map(|e| self.eval(e)).collect()),
            Expr::Not(e) => match self.eval(e) {
                Value::Boolean(b) => Value::Boolean(!b),
                Value::Undefined => Value::Undefined,
                _ => Value::Error,
            },
            Expr::Neg(e) => match self.eval(e) {
                Value::Integer(i) => i.checked_neg().map_or(Value::Error, Value::Integer),
                Value::Real(r) => Value::Real(-r),
                Value::Undefined => Value::Undefined,
                _ => Value::Error,
            },
            Expr::And(l, r) => match self.eval(l) {
                Value::Boolean(false) => Value::Boolean(false),
                Value::Boolean(true) => match self.eval(r) {
                    v @ (Value::Boolean(_) | Value::Undefined) => v,
                    _ => Value::Error,
                },
                Value::Undefined => match self.eval(r) {
                    Value::Boolean(false) => Value::Boolean(false),
                    Value::Boolean(true) | Value::Undefined => Value::Undefined,
                    _ => Value::Error,
                },
                _ => Value::Error,
            },
            Expr::Or(l, r) => match self.eval(l) {
                Value::Boolean(true) => Value::Boolean(true),
                Value::Boolean(false) => match self.eval(r) {
                    v @ (Value::Boolean(_) | Value::Undefined) => v,
                    _ => Value::Error,
                },
                Value::Undefined => match self.eval(r) {
                    Value::Boolean(true) => Value::Boolean(true),
                    Value::Boolean(false) | Value::Undefined => Value::Undefined,
                    _ => Value::Error,
                },
                _ => Value::Error,
            },
            Expr::Compare(op, l, r) => compare(*op, self.eval(l), self.eval(r)),
            Expr::Arith(op, l, r) => arith(*op, self.eval(l), self.eval(r)),
            Expr::Member { needle, haystack } => member(self.eval(needle), self.eval(haystack)),
        }
    }
}

fn strict(l: &Value, r: &Value) -> Option<Value> {
    if matches!(l, Value::Error) || matches!(r, Value::Error) {
        Some(Value::Error)
    } else if matches!(l, Value::Undefined) || matches!(r, Value::Undefined) {
        Some(Value::Undefined)
    } else {
        None
    }
}

fn compare(op: CmpOp, l: Value, r: Value) -> Value {
    if let Some(v) = strict(&l, &r) {
        return v;
    }
    let result = match op {
        CmpOp::Eq | CmpOp::Assign => l.loose_eq(&r),
        CmpOp::Ne => l.loose_eq(&r).map(|b| !b),
        CmpOp::Lt => l.loose_cmp(&r).map(|o| o.is_lt()),
        CmpOp::Le => l.loose_cmp(&r).map(|o| o.is_le()),
        CmpOp::Gt => l.loose_cmp(&r).map(|o| o.is_gt()),
        CmpOp::Ge => l.loose_cmp(&r).map(|o| o.is_ge()),
    };
    result.map_or(Value::Error, Value::Boolean)
}

fn arith(op: ArithOp, l: Value, r: Value) -> Value {
    if let Some(v) = strict(&l, &r) {
        return v;
    }
    match (&l, &r) {
        (Value::Integer(a), Value::Integer(b)) => {
            let out = match op {
                ArithOp::Add => a.checked_add(*b),
                ArithOp::Sub => a.checked_sub(*b),
                ArithOp::Mul => a.checked_mul(*b),
                ArithOp::Div => a.checked_div(*b),
            };
            out.map_or(Value::Error, Value::Integer)
        }
        _ => match (l.as_f64(), r.as_f64()) {
            (Some(a), Some(b)) => match op {
                ArithOp::Add => Value::Real(a + b),
                ArithOp::Sub => Value::Real(a - b),
                ArithOp::Mul => Value::Real(a * b),
                ArithOp::Div if b == 0.0 => Value::Error,
                ArithOp::Div => Value::Real(a / b),
            },
            _ => Value::Error,
        },
    }
}

fn member(needle: Value, haystack: Value) -> Value {
    if let Some(v) = strict(&needle, &haystack) {
        return v;
    }
    match (&needle, &haystack) {
        (Value::Text(n), Value::Text(h)) => Value::Boolean(
            h.split(',')
                .map(str::trim)
                .filter(|item| !item.is_empty())
                .any(|item| text_eq(item, n)),
        ),
        (Value::List(_), _) => Value::Error,
        (_, Value::List(items)) => {
            Value::Boolean(items.iter().any(|item| needle.loose_eq(item) == Some(true)))
        }
        _ => Value::Error,
    }
}

/// Evaluates `expr` with `my` as the evaluating ad and `target` as the
/// candidate. Total: problems surface as `Value::Undefined` or
/// `Value::Error`.
pub fn evaluate(expr: &Expr, my: &ClassAd, target: &ClassAd) -> Value {
    Ctx {
        my,
        target,
        memo: &Memo::default(),
    }
    .eval(expr)
}

/// Looks up attribute `name` of `my` and evaluates it against `target`.
pub fn evaluate_attr(name: &str, my: &ClassAd, target: &ClassAd) -> Value {
    Ctx {
        my,
        target,
        memo: &Memo::default(),
    }
    .resolve(Scope::My, name)
}

/// Two-sided match: the job's `Requirements` and the machine's `Start` must
/// both evaluate to boolean true. A missing attribute counts as true.
pub fn symmetric_match(job_ad: &ClassAd, machine_ad: &ClassAd) -> bool {
    let side_ok = |my: &ClassAd, target: &ClassAd, attr: &str| {
        !my.contains(attr) || evaluate_attr(attr, my, target).is_true()
    };
    side_ok(job_ad, machine_ad, "Requirements") && side_ok(machine_ad, job_ad, "Start")
}

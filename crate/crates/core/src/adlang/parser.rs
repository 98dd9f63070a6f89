use thiserror::Error;

use super::ast::{ArithOp, CmpOp, Expr, Scope};
use super::value::Value;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("syntax error at byte {offset}: found {found}, expected one of [{}]", expected.join(", "))]
pub struct ParseError {
    pub offset: usize,
    pub found: String,
    pub expected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Int(i64),
    Real(f64),
    Str(String),
    Ident(String),
    AndAnd,
    OrOr,
    Bang,
    EqEq,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    Dot,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Int(i) => format!("integer {}", i),
            Tok::Real(r) => format!("real {}", r),
            Tok::Str(s) => format!("string {:?}", s),
            Tok::Ident(s) => format!("identifier {}", s),
            Tok::End => "end of input".to_string(),
            other => format!("'{}'", other.symbol()),
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            Tok::AndAnd => "&&",
            Tok::OrOr => "||",
            Tok::Bang => "!",
            Tok::EqEq => "==",
            Tok::Eq => "=",
            Tok::Ne => "!=",
            Tok::Lt => "<",
            Tok::Le => "<=",
            Tok::Gt => ">",
            Tok::Ge => ">=",
            Tok::Plus => "+",
            Tok::Minus => "-",
            Tok::Star => "*",
            Tok::Slash => "/",
            Tok::LParen => "(",
            Tok::RParen => ")",
            Tok::LBrace => "{",
            Tok::RBrace => "}",
            Tok::Comma => ",",
            Tok::Dot => ".",
            _ => "",
        }
    }

    fn keyword(&self, kw: &str) -> bool {
        matches!(self, Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }
}

struct Lexer<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn err(&self, offset: usize, found: impl Into<String>, expected: &[&str]) -> ParseError {
        ParseError {
            offset,
            found: found.into(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn tokenize(mut self) -> Result<Vec<(usize, Tok)>, ParseError> {
        let mut out = Vec::new();
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            let start = self.pos;
            if start >= self.bytes.len() {
                out.push((start, Tok::End));
                return Ok(out);
            }
            let c = self.bytes[start];
            let two = |s: &Self, second: u8| s.bytes.get(start + 1) == Some(&second);
            let (tok, len) = match c {
                b'&' if two(&self, b'&') => (Tok::AndAnd, 2),
                b'|' if two(&self, b'|') => (Tok::OrOr, 2),
                b'=' if two(&self, b'=') => (Tok::EqEq, 2),
                b'!' if two(&self, b'=') => (Tok::Ne, 2),
                b'<' if two(&self, b'=') => (Tok::Le, 2),
                b'>' if two(&self, b'=') => (Tok::Ge, 2),
                b'=' => (Tok::Eq, 1),
                b'!' => (Tok::Bang, 1),
                b'<' => (Tok::Lt, 1),
                b'>' => (Tok::Gt, 1),
                b'+' => (Tok::Plus, 1),
                b'-' => (Tok::Minus, 1),
                b'*' => (Tok::Star, 1),
                b'/' => (Tok::Slash, 1),
                b'(' => (Tok::LParen, 1),
                b')' => (Tok::RParen, 1),
                b'{' => (Tok::LBrace, 1),
                b'}' => (Tok::RBrace, 1),
                b',' => (Tok::Comma, 1),
                b'.' => (Tok::Dot, 1),
                b'"' => {
                    let tok = self.string(start)?;
                    out.push((start, tok));
                    continue;
                }
                b'0'..=b'9' => {
                    let tok = self.number(start)?;
                    out.push((start, tok));
                    continue;
                }
                c if c == b'_' || c.is_ascii_alphabetic() => {
                    let mut end = start + 1;
                    while end < self.bytes.len()
                        && (self.bytes[end] == b'_' || self.bytes[end].is_ascii_alphanumeric())
                    {
                        end += 1;
                    }
                    (Tok::Ident(self.src[start..end].to_string()), end - start)
                }
                _ => {
                    let ch = self.src[start..].chars().next().unwrap_or('?');
                    return Err(self.err(start, format!("character {:?}", ch), &["token"]));
                }
            };
            self.pos = start + len;
            out.push((start, tok));
        }
    }

    fn string(&mut self, start: usize) -> Result<Tok, ParseError> {
        let mut text = String::new();
        let mut chars = self.src[start + 1..].char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    self.pos = start + 1 + i + 1;
                    return Ok(Tok::Str(text));
                }
                '\\' => match chars.next() {
                    Some((_, 'n')) => text.push('\n'),
                    Some((_, 't')) => text.push('\t'),
                    Some((_, 'r')) => text.push('\r'),
                    Some((_, other)) => text.push(other),
                    None => break,
                },
                c => text.push(c),
            }
        }
        Err(self.err(self.bytes.len(), "end of input", &["'\"'"]))
    }

    fn number(&mut self, start: usize) -> Result<Tok, ParseError> {
        let b = self.bytes;
        let mut end = start;
        while end < b.len() && b[end].is_ascii_digit() {
            end += 1;
        }
        let mut real = false;
        if end < b.len() && b[end] == b'.' && b.get(end + 1).is_some_and(|c| c.is_ascii_digit()) {
            real = true;
            end += 1;
            while end < b.len() && b[end].is_ascii_digit() {
                end += 1;
            }
        }
        if end < b.len() && (b[end] == b'e' || b[end] == b'E') {
            let mut exp = end + 1;
            if exp < b.len() && (b[exp] == b'+' || b[exp] == b'-') {
                exp += 1;
            }
            if exp < b.len() && b[exp].is_ascii_digit() {
                real = true;
                end = exp;
                while end < b.len() && b[end].is_ascii_digit() {
                    end += 1;
                }
            }
        }
        let text = &self.src[start..end];
        self.pos = end;
        if real {
            text.parse::<f64>()
                .ok()
                .filter(|r| r.is_finite())
                .map(Tok::Real)
                .ok_or_else(|| self.err(start, format!("real {}", text), &["finite REAL"]))
        } else {
            text.parse::<i64>()
                .map(Tok::Int)
                .map_err(|_| self.err(start, format!("integer {}", text), &["64-bit INT"]))
        }
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

const ATOM_START: &[&str] = &[
    "INT",
    "REAL",
    "STRING",
    "true",
    "false",
    "undefined",
    "IDENT",
    "'('",
    "'{'",
    "'-'",
    "'!'",
];

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].1
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].1.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &[&str]) -> Result<T, ParseError> {
        Err(ParseError {
            offset: self.offset(),
            found: self.peek().describe(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn expect(&mut self, tok: Tok) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            let want = format!("'{}'", tok.symbol());
            self.fail(&[want.as_str()])
        }
    }

    fn or(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.and()?;
        while *self.peek() == Tok::OrOr {
            self.bump();
            lhs = Expr::or(lhs, self.and()?);
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.not()?;
        while *self.peek() == Tok::AndAnd {
            self.bump();
            lhs = Expr::and(lhs, self.not()?);
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Bang {
            self.bump();
            return Ok(Expr::Not(Box::new(self.not()?)));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.add()?;
        let op = match self.peek() {
            Tok::EqEq => CmpOp::Eq,
            Tok::Eq => CmpOp::Assign,
            Tok::Ne => CmpOp::Ne,
            Tok::Lt => CmpOp::Lt,
            Tok::Le => CmpOp::Le,
            Tok::Gt => CmpOp::Gt,
            Tok::Ge => CmpOp::Ge,
            t if t.keyword("in") => {
                self.bump();
                let rhs = self.add()?;
                return Ok(Expr::member(lhs, rhs));
            }
            _ => return Ok(lhs),
        };
        self.bump();
        let rhs = self.add()?;
        Ok(Expr::compare(op, lhs, rhs))
    }

    fn add(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.mul()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => ArithOp::Add,
                Tok::Minus => ArithOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            lhs = Expr::Arith(op, Box::new(lhs), Box::new(self.mul()?));
        }
    }

    fn mul(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => ArithOp::Mul,
                Tok::Slash => ArithOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            lhs = Expr::Arith(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Minus {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::Int(i) => {
                self.bump();
                Ok(Expr::Literal(Value::Integer(i)))
            }
            Tok::Real(r) => {
                self.bump();
                Ok(Expr::Literal(Value::Real(r)))
            }
            Tok::Str(s) => {
                self.bump();
                Ok(Expr::Literal(Value::Text(s)))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.or()?;
                self.expect(Tok::RParen)?;
                Ok(Expr::Paren(Box::new(inner)))
            }
            Tok::LBrace => {
                self.bump();
                let mut items = Vec::new();
                if *self.peek() == Tok::RBrace {
                    self.bump();
                    return Ok(Expr::List(items));
                }
                loop {
                    items.push(self.or()?);
                    match self.peek() {
                        Tok::Comma => {
                            self.bump();
                        }
                        Tok::RBrace => {
                            self.bump();
                            return Ok(Expr::List(items));
                        }
                        _ => return self.fail(&["','", "'}'"]),
                    }
                }
            }
            Tok::Ident(word) => {
                let lower = word.to_ascii_lowercase();
                match lower.as_str() {
                    "true" => {
                        self.bump();
                        return Ok(Expr::Literal(Value::Boolean(true)));
                    }
                    "false" => {
                        self.bump();
                        return Ok(Expr::Literal(Value::Boolean(false)));
                    }
                    "undefined" => {
                        self.bump();
                        return Ok(Expr::Literal(Value::Undefined));
                    }
                    "in" => return self.fail(ATOM_START),
                    _ => {}
                }
                self.bump();
                if let Some(scope) = Scope::from_keyword(&word) {
                    if *self.peek() == Tok::Dot {
                        self.bump();
                        return match self.peek().clone() {
                            Tok::Ident(name) if !is_reserved(&name) => {
                                self.bump();
                                Ok(Expr::attr(scope, name))
                            }
                            _ => self.fail(&["IDENT"]),
                        };
                    }
                }
                Ok(Expr::attr(Scope::Unqualified, word))
            }
            _ => self.fail(ATOM_START),
        }
    }
}

fn is_reserved(word: &str) -> bool {
    ["true", "false", "undefined", "in"]
        .iter()
        .any(|k| word.eq_ignore_ascii_case(k))
}

/// Parses one expression. The whole input must be consumed.
pub fn parse_expression(text: &str) -> Result<Expr, ParseError> {
    let toks = Lexer {
        src: text,
        bytes: text.as_bytes(),
        pos: 0,
    }
    .tokenize()?;
    let mut p = Parser { toks, pos: 0 };
    let expr = p.or()?;
    if *p.peek() != Tok::End {
        return p.fail(&[
            "'||'",
            "'&&'",
            "CMPOP",
            "in",
            "'+'",
            "'-'",
            "'*'",
            "'/'",
            "end of input",
        ]);
    }
    Ok(expr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lit(v: impl Into<Value>) -> Expr {
        Expr::literal(v)
    }

    #[test]
    fn gpu_requirement_example() {
        let e = parse_expression(r#"CUDACapability >= 3 && CUDARuntime = "11.4""#).unwrap();
        let want = Expr::and(
            Expr::compare(
                CmpOp::Ge,
                Expr::attr(Scope::Unqualified, "CUDACapability"),
                lit(3i64),
            ),
            Expr::compare(
                CmpOp::Assign,
                Expr::attr(Scope::Unqualified, "CUDARuntime"),
                lit("11.4"),
            ),
        );
        assert_eq!(e, want);
    }

    #[test]
    fn literal_true() {
        assert_eq!(parse_expression("true").unwrap(), lit(true));
        assert_eq!(parse_expression("  TRUE ").unwrap(), lit(true));
    }

    #[test]
    fn runtime_membership() {
        let e = parse_expression("Job.CUDARuntime in Machine.CMS_CUDA_SUPPORTED_RUNTIMES").unwrap();
        assert_eq!(
            e,
            Expr::member(
                Expr::attr(Scope::Job, "CUDARuntime"),
                Expr::attr(Scope::Machine, "CMS_CUDA_SUPPORTED_RUNTIMES"),
            )
        );
    }

    #[test]
    fn precedence() {
        let e = parse_expression("!a == 1 || b && c + 2 * -d").unwrap();
        assert_eq!(
            e.to_string(),
            "!a == 1 || b && c + 2 * -d",
            "printing reproduces the source without extra parentheses"
        );
        match e {
            Expr::Or(l, r) => {
                assert!(matches!(*l, Expr::Not(ref inner) if matches!(**inner, Expr::Compare(..))));
                assert!(matches!(*r, Expr::And(..)));
            }
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn left_associative_arith() {
        let e = parse_expression("10 - 3 - 2").unwrap();
        assert_eq!(
            e,
            Expr::Arith(
                ArithOp::Sub,
                Box::new(Expr::Arith(
                    ArithOp::Sub,
                    Box::new(lit(10i64)),
                    Box::new(lit(3i64))
                )),
                Box::new(lit(2i64)),
            )
        );
    }

    #[test]
    fn scopes_case_insensitive() {
        for src in ["my.x", "MY.x", "target.x", "JOB.x", "machine.x"] {
            let e = parse_expression(src).unwrap();
            assert!(
                matches!(e, Expr::AttrRef { ref scope, .. } if *scope != Scope::Unqualified),
                "{}",
                src
            );
        }
        // a scope word without a dot is a plain attribute
        assert_eq!(
            parse_expression("Machine").unwrap(),
            Expr::attr(Scope::Unqualified, "Machine")
        );
    }

    #[test]
    fn string_escapes() {
        let e = parse_expression(r#""a\"b\\c""#).unwrap();
        assert_eq!(e, lit("a\"b\\c"));
        assert_eq!(parse_expression(&e.to_string()).unwrap(), e);
    }

    #[test]
    fn reals() {
        assert_eq!(parse_expression("8.0").unwrap(), lit(8.0));
        assert_eq!(parse_expression("1e3").unwrap(), lit(1000.0));
        assert_eq!(parse_expression("2.5E-1").unwrap(), lit(0.25));
    }

    #[test]
    fn lists() {
        let e = parse_expression(r#"{"a", 1, x}"#).unwrap();
        assert!(matches!(e, Expr::List(ref v) if v.len() == 3));
        assert_eq!(parse_expression("{}").unwrap(), Expr::List(vec![]));
    }

    #[test]
    fn errors_carry_offset_and_expectations() {
        let err = parse_expression("a >= ").unwrap_err();
        assert_eq!(err.offset, 5);
        assert!(err.expected.iter().any(|e| e == "INT"));

        let err = parse_expression("a b").unwrap_err();
        assert_eq!(err.offset, 2);
        assert!(err.expected.iter().any(|e| e == "end of input"));

        let err = parse_expression("(a").unwrap_err();
        assert_eq!(err.expected, vec!["')'".to_string()]);

        let err = parse_expression("\"open").unwrap_err();
        assert_eq!(err.offset, 5);

        assert!(parse_expression("a == b == c").is_err());
        assert!(parse_expression("x # y").is_err());
        assert!(parse_expression("99999999999999999999").is_err());
        assert!(parse_expression("MY.").is_err());
        assert!(parse_expression("").is_err());
    }
}

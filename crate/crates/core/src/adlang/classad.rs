use std::fmt;

use indexmap::IndexMap;
use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ast::Expr;
use super::parser::{parse_expression, ParseError};
use super::value::Value;

/// Which side of a match an ad stands for. Resolves the `Job.` and
/// `Machine.` scopes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdKind {
    Job,
    Machine,
    #[default]
    Untagged,
}

/// Attribute record. Lookup is case-insensitive; the spelling used when an
/// attribute was first inserted is preserved, as is insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassAd {
    kind: AdKind,
    attrs: IndexMap<String, (String, Expr)>,
}

impl ClassAd {
    pub fn new(kind: AdKind) -> Self {
        ClassAd {
            kind,
            attrs: IndexMap::new(),
        }
    }

    pub fn job() -> Self {
        Self::new(AdKind::Job)
    }

    pub fn machine() -> Self {
        Self::new(AdKind::Machine)
    }

    pub fn kind(&self) -> AdKind {
        self.kind
    }

    pub fn set_kind(&mut self, kind: AdKind) {
        self.kind = kind;
    }

    /// Inserts or replaces an attribute. Replacing keeps the original
    /// spelling and position.
    pub fn insert(&mut self, name: impl Into<String>, expr: Expr) {
        let name = name.into();
        let key = name.to_lowercase();
        match self.attrs.get_mut(&key) {
            Some(slot) => slot.1 = expr,
            None => {
                self.attrs.insert(key, (name, expr));
            }
        }
    }

    pub fn insert_value(&mut self, name: impl Into<String>, value: impl Into<Value>) {
        self.insert(name, Expr::Literal(value.into()));
    }

    /// Parses `expr_text` and inserts it.
    pub fn insert_expr(
        &mut self,
        name: impl Into<String>,
        expr_text: &str,
    ) -> Result<(), ParseError> {
        let expr = parse_expression(expr_text)?;
        self.insert(name, expr);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<Value>) -> Self {
        self.insert_value(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Expr> {
        self.attrs.get(&name.to_lowercase()).map(|(_, e)| e)
    }

    pub fn remove(&mut self, name: &str) -> Option<Expr> {
        self.attrs
            .shift_remove(&name.to_lowercase())
            .map(|(_, e)| e)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.attrs.contains_key(&name.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    /// Attributes in insertion order, with their original spelling.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Expr)> {
        self.attrs.values().map(|(n, e)| (n.as_str(), e))
    }

    /// Literal value of an attribute, if the attribute is a plain literal.
    pub fn literal(&self, name: &str) -> Option<&Value> {
        match self.get(name) {
            Some(Expr::Literal(v)) => Some(v),
            _ => None,
        }
    }

    /// Parses the line-oriented `Name = expression` form (one attribute per
    /// line, blank lines and `#` comments ignored).
    pub fn parse_lines(kind: AdKind, text: &str) -> Result<ClassAd, ClassAdTextError> {
        let mut ad = ClassAd::new(kind);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let name_end = line
                .find(|c: char| !(c == '_' || c.is_ascii_alphanumeric()))
                .unwrap_or(line.len());
            let name = &line[..name_end];
            let rest = line[name_end..].trim_start();
            if name.is_empty() || !rest.starts_with('=') || rest.starts_with("==") {
                return Err(ClassAdTextError::MissingAssignment { line: lineno + 1 });
            }
            let expr = parse_expression(&rest[1..]).map_err(|source| ClassAdTextError::Expr {
                line: lineno + 1,
                source,
            })?;
            ad.insert(name, expr);
        }
        Ok(ad)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClassAdTextError {
    #[error("line {line}: expected `Name = expression`")]
    MissingAssignment { line: usize },
    #[error("line {line}: {source}")]
    Expr { line: usize, source: ParseError },
}

impl fmt::Display for ClassAd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, expr) in self.iter() {
            writeln!(f, "{} = {}", name, expr)?;
        }
        Ok(())
    }
}

struct Attrs<'a>(&'a ClassAd);

impl Serialize for Attrs<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (name, expr) in self.0.iter() {
            map.serialize_entry(name, &expr.to_string())?;
        }
        map.end()
    }
}

impl Serialize for ClassAd {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(2))?;
        map.serialize_entry("kind", &self.kind)?;
        map.serialize_entry("attributes", &Attrs(self))?;
        map.end()
    }
}

struct AttrsVisitor;

impl<'de> Visitor<'de> for AttrsVisitor {
    type Value = Vec<(String, Expr)>;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a map of attribute name to expression text")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
        let mut out = Vec::new();
        while let Some((name, text)) = access.next_entry::<String, String>()? {
            let expr = parse_expression(&text)
                .map_err(|e| de::Error::custom(format!("attribute {}: {}", name, e)))?;
            out.push((name, expr));
        }
        Ok(out)
    }
}

struct AttrList(Vec<(String, Expr)>);

impl<'de> Deserialize<'de> for AttrList {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_map(AttrsVisitor).map(AttrList)
    }
}

#[derive(Deserialize)]
struct RawAd {
    #[serde(default)]
    kind: AdKind,
    attributes: AttrList,
}

impl<'de> Deserialize<'de> for ClassAd {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawAd::deserialize(d)?;
        let mut ad = ClassAd::new(raw.kind);
        for (name, expr) in raw.attributes.0 {
            if ad.contains(&name) {
                return Err(de::Error::custom(format!("duplicate attribute {}", name)));
            }
            ad.insert(name, expr);
        }
        Ok(ad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_insensitive_lookup_preserves_spelling() {
        let mut ad = ClassAd::machine();
        ad.insert_value("CUDACapability", 8.0);
        ad.insert_value("cudacapability", 7.5);
        assert_eq!(ad.len(), 1);
        assert_eq!(ad.literal("CudaCapability"), Some(&Value::Real(7.5)));
        assert_eq!(ad.iter().next().unwrap().0, "CUDACapability");
        assert!(ad.get("Missing").is_none());
    }

    #[test]
    fn line_format() {
        let ad = ClassAd::parse_lines(
            AdKind::Machine,
            "CPUs = 8\nCUDADeviceName = \"NVIDIA A100-PCIE-40GB\"\n\n# comment\nStart = MY.X == false || TARGET.RequestGPUs > 0\n",
        )
        .unwrap();
        assert_eq!(ad.len(), 3);
        assert_eq!(ad.literal("cpus"), Some(&Value::Integer(8)));
        let back = ClassAd::parse_lines(AdKind::Machine, &ad.to_string()).unwrap();
        assert_eq!(back, ad);
        assert!(ClassAd::parse_lines(AdKind::Machine, "CPUs 8").is_err());
        assert!(ClassAd::parse_lines(AdKind::Machine, "CPUs == 8").is_err());
    }

    #[test]
    fn json_rejects_case_duplicates() {
        let text = r#"{"kind":"job","attributes":{"A":"1","a":"2"}}"#;
        assert!(serde_json::from_str::<ClassAd>(text).is_err());
    }
}

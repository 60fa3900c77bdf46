//! Value paths such as `result.items[0]`. The empty path is the whole value.

use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Key(String),
    Index(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid path {path:?}: {reason}")]
pub struct PathError {
    pub path: String,
    pub reason: String,
}

pub fn parse(path: &str) -> Result<Vec<Segment>, PathError> {
    let err = |reason: &str| PathError { path: path.to_string(), reason: reason.to_string() };
    let mut segments = Vec::new();
    let bytes = path.as_bytes();
    let mut i = 0;
    let mut expect_key = true;
    while i < bytes.len() {
        match bytes[i] {
            b'[' => {
                let close = path[i..].find(']').ok_or_else(|| err("unclosed '['"))? + i;
                let index: usize = path[i + 1..close].parse().map_err(|_| err("index must be a non-negative integer"))?;
                segments.push(Segment::Index(index));
                i = close + 1;
                expect_key = false;
            }
            b'.' => {
                if expect_key {
                    return Err(err("empty key"));
                }
                i += 1;
                expect_key = true;
                if i == bytes.len() {
                    return Err(err("trailing '.'"));
                }
            }
            b']' => return Err(err("unexpected ']'")),
            _ => {
                if !expect_key {
                    return Err(err("missing '.' before key"));
                }
                let end = path[i..].find(['.', '[', ']']).map_or(path.len(), |o| o + i);
                segments.push(Segment::Key(path[i..end].to_string()));
                i = end;
                expect_key = false;
            }
        }
    }
    Ok(segments)
}

/// Looks up `path` in `value`; exact-match semantics, no coercion.
pub fn get<'v>(value: &'v Value, path: &[Segment]) -> Option<&'v Value> {
    path.iter().try_fold(value, |v, seg| match (seg, v) {
        (Segment::Key(k), Value::Object(m)) => m.get(k),
        (Segment::Index(i), Value::Array(a)) => a.get(*i),
        _ => None,
    })
}

/// Writes `new` at `path` inside `target`, creating objects and arrays as
/// needed. Array gaps are filled with null.
pub fn set(target: &mut Value, path: &[Segment], new: Value) -> Result<(), String> {
    let Some((first, rest)) = path.split_first() else {
        *target = new;
        return Ok(());
    };
    match first {
        Segment::Key(k) => {
            if target.is_null() {
                *target = Value::Object(Map::new());
            }
            let Value::Object(m) = target else {
                return Err(format!("cannot set key {k:?} on a non-object"));
            };
            set(m.entry(k.clone()).or_insert(Value::Null), rest, new)
        }
        Segment::Index(i) => {
            if target.is_null() {
                *target = Value::Array(Vec::new());
            }
            let Value::Array(a) = target else {
                return Err(format!("cannot set index {i} on a non-array"));
            };
            if a.len() <= *i {
                a.resize(*i + 1, Value::Null);
            }
            set(&mut a[*i], rest, new)
        }
    }
}

/// True when one path is a prefix of the other (including equality).
pub fn overlaps(a: &[Segment], b: &[Segment]) -> bool {
    a.iter().zip(b).all(|(x, y)| x == y)
}

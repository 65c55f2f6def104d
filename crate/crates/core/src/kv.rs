//! Flat `key=value` text files: one pair per line, `#` starts a comment.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    /// 1-based source line.
    pub line: usize,
}

/// Parses `text`; a repeated key keeps its last value but stays in first-seen order.
pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(Error::Parse {
                line,
                msg: format!("expected key=value, found {body:?}"),
            });
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty key".into(),
            });
        }
        let value = v.trim().to_string();
        match out.iter_mut().find(|e| e.key == key) {
            Some(e) => {
                e.value = value;
                e.line = line;
            }
            None => out.push(Entry { key, value, line }),
        }
    }
    Ok(out)
}

impl Entry {
    pub fn parse<T: FromStr>(&self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e: T::Err| Error::Parse {
            line: self.line,
            msg: format!("{}: {e}", self.key),
        })
    }

    pub fn list<T: FromStr>(&self) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        parse_list(&self.value).map_err(|msg| Error::Parse {
            line: self.line,
            msg: format!("{}: {msg}", self.key),
        })
    }

    pub fn flag(&self) -> Result<bool> {
        match self.value.as_str() {
            "1" | "true" | "yes" | "on" => Ok(true),
            "0" | "false" | "no" | "off" => Ok(false),
            other => Err(Error::Parse {
                line: self.line,
                msg: format!("{}: not a boolean: {other:?}", self.key),
            }),
        }
    }
}

/// Comma-separated list; empty input is an empty list.
pub fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

pub fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

//! Sectioned `key = value` text, used for both run configurations and model
//! files.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Sections and keys may repeat; order is preserved.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| Error::Parse {
                line,
                msg: format!("unterminated section header `{content}`"),
            })?;
            sections.push(Section {
                name: name.trim().to_string(),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected `key = value`, got `{content}`"),
        })?;
        let section = sections.last_mut().ok_or_else(|| Error::Parse {
            line,
            msg: "entry before the first section header".into(),
        })?;
        section.entries.push(Entry {
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(sections)
}

impl Section {
    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }

    /// The single value of `key`, if present; repeated keys are an error.
    pub fn get<'a>(&'a self, key: &'a str) -> Result<Option<&'a Entry>> {
        let mut it = self.all(key);
        let first = it.next();
        if let Some(dup) = it.next() {
            return Err(Error::Parse {
                line: dup.line,
                msg: format!("`{key}` given more than once in [{}]", self.name),
            });
        }
        Ok(first)
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)?.map(|e| e.parse()).transpose()
    }

    pub fn parse_req<T: FromStr>(&self, key: &str) -> Result<T> {
        self.parse_opt(key)?.ok_or_else(|| Error::Parse {
            line: self.line,
            msg: format!("[{}] is missing `{key}`", self.name),
        })
    }

    /// Rejects keys outside `known`.
    pub fn only(&self, known: &[&str]) -> Result<()> {
        match self
            .entries
            .iter()
            .find(|e| !known.contains(&e.key.as_str()))
        {
            Some(e) => Err(Error::Parse {
                line: e.line,
                msg: format!("unknown key `{}` in [{}]", e.key, self.name),
            }),
            None => Ok(()),
        }
    }
}

impl Entry {
    pub fn parse<T: FromStr>(&self) -> Result<T> {
        self.value.parse().map_err(|_| Error::Parse {
            line: self.line,
            msg: format!("cannot parse `{}` for `{}`", self.value, self.key),
        })
    }

    /// Comma-separated list.
    pub fn parse_list<T: FromStr>(&self) -> Result<Vec<T>> {
        self.value
            .split(',')
            .map(|v| {
                v.trim().parse().map_err(|_| Error::Parse {
                    line: self.line,
                    msg: format!("cannot parse `{}` in `{}`", v.trim(), self.key),
                })
            })
            .collect()
    }
}

/// Builds kv text; floats are written in shortest round-trip form.
#[derive(Debug, Default)]
pub struct Writer {
    out: String,
}

impl Writer {
    pub fn comment(&mut self, text: &str) -> &mut Self {
        let _ = writeln!(self.out, "# {text}");
        self
    }

    pub fn section(&mut self, name: &str) -> &mut Self {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        let _ = writeln!(self.out, "[{name}]");
        self
    }

    pub fn float(&mut self, key: &str, v: f64) -> &mut Self {
        let _ = writeln!(self.out, "{key} = {v:?}");
        self
    }

    pub fn raw(&mut self, key: &str, v: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.out, "{key} = {v}");
        self
    }

    pub fn finish(self) -> String {
        self.out
    }
}

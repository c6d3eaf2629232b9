//! Flat `key = value` files used for run configs and compression plans.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys are unique. Every typed read remembers the key, so [`KvFile::finish`]
//! can reject keys nobody asked for.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
    used: RefCell<BTreeSet<String>>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected `key = value`, found {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("invalid key {k:?}"),
                });
            }
            if v.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("missing value for {k}"),
                });
            }
            if let Some((first, _)) = entries.get(k) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate key {k} (first set on line {first})"),
                });
            }
            entries.insert(k.to_string(), (line_no, v.to_string()));
        }
        Ok(KvFile {
            entries,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Typed value, or `default` when absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.used.borrow_mut().insert(key.to_string());
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Parse {
                line: *line,
                msg: format!("invalid value {v:?} for {key}"),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Validation(format!("missing required key {key}")))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.used.borrow_mut().insert(key.to_string());
        let Some((line, v)) = self.entries.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| Error::Parse {
                    line: *line,
                    msg: format!("invalid list item {s:?} for {key}"),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Line on which `key` was set.
    pub fn line_of(&self, key: &str) -> Option<usize> {
        self.entries.get(key).map(|(l, _)| *l)
    }

    /// Keys starting with `prefix`, in sorted order.
    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .keys()
            .filter(move |k| k.starts_with(prefix))
            .map(String::as_str)
    }

    /// Fails on the first key that was never read.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown = self
            .entries
            .iter()
            .filter(|(k, _)| !used.contains(*k))
            .min_by_key(|(_, (line, _))| *line);
        match unknown {
            Some((k, (line, _))) => Err(Error::Parse {
                line: *line,
                msg: format!("unknown key {k}"),
            }),
            None => Ok(()),
        }
    }
}

/// Boolean values accept `true/false`, `yes/no`, `on/off` and `1/0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flag(pub bool);

impl FromStr for Flag {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(Flag(true)),
            "false" | "no" | "off" | "0" => Ok(Flag(false)),
            _ => Err(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = KvFile::parse("# header\n\na = 1   # trailing\n b=two\n").unwrap();
        assert_eq!(kv.get::<u32>("a").unwrap(), Some(1));
        assert_eq!(kv.raw("b"), Some("two"));
        assert_eq!(kv.get::<u32>("c").unwrap(), None);
        kv.finish().unwrap();
    }

    #[test]
    fn errors_carry_line_numbers() {
        match KvFile::parse("a = 1\nnot an assignment\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match KvFile::parse("a = 1\n\na = 2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let kv = KvFile::parse("x = 1\ny = oops\n").unwrap();
        match kv.get::<f64>("y") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let kv = KvFile::parse("known = 1\ntypo = 2\n").unwrap();
        let _ = kv.get::<u32>("known");
        match kv.finish() {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("typo"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lists_and_flags() {
        let kv = KvFile::parse("r = 0.1, 0.5,1.0\nf = yes\n").unwrap();
        assert_eq!(kv.list::<f64>("r").unwrap(), Some(vec![0.1, 0.5, 1.0]));
        assert_eq!(kv.get::<Flag>("f").unwrap(), Some(Flag(true)));
    }
}

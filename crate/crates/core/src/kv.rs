//! `key = value` documents with an optional trailing `[truth]` section.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::MixingMeasure;

pub(crate) struct KvDoc {
    entries: BTreeMap<String, (usize, String)>,
    pub truth: Option<MixingMeasure>,
    lines: usize,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut truth_lines = Vec::new();
        let mut in_truth = false;
        for (idx, raw) in text.lines().enumerate() {
            if in_truth {
                truth_lines.push(raw);
                continue;
            }
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line == "[truth]" {
                in_truth = true;
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(idx + 1, format!("expected key = value, got `{line}`")))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), (idx + 1, v.trim().to_string())).is_some() {
                return Err(Error::parse(idx + 1, format!("duplicate key `{k}`")));
            }
        }
        let truth = if in_truth {
            Some(MixingMeasure::from_text(&truth_lines.join("\n"))?)
        } else {
            None
        };
        Ok(KvDoc {
            entries,
            truth,
            lines: text.lines().count().max(1),
        })
    }

    pub fn require_truth(&mut self) -> Result<MixingMeasure> {
        self.truth
            .take()
            .ok_or_else(|| Error::parse(self.lines, "missing [truth] section"))
    }

    pub fn take_raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::parse(line, format!("invalid value `{v}` for `{key}`"))),
        }
    }

    pub fn set<T: FromStr>(&mut self, key: &str, field: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *field = v;
        }
        Ok(())
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::parse(line, format!("invalid list entry `{}` for `{key}`", s.trim())))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Errors on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            Some((key, (line, _))) => Err(Error::parse(line, format!("unknown key `{key}`"))),
            None => Ok(()),
        }
    }
}

//! Dataset loading: text normalization, record filtering, thread flattening
//! and stratified splitting.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use regex::{NoExpand, Regex};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::fusion::LabelSet;
use crate::rng::{stream, Stream};

pub const URL_TOKEN: &str = "$URL$";
pub const MENTION_TOKEN: &str = "$MENTION$";
pub const DELETED: &str = "[deleted]";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record {id}: unknown label {label:?}")]
    UnknownLabel { id: String, label: String },
    #[error("thread structure: {0}")]
    Structure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub source_text: String,
    pub reply_text: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

fn scheme_url() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"https?://\S+").unwrap())
}

fn www_url() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bwww\.\S+").unwrap())
}

fn mention() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@\w+").unwrap())
}

fn kept(c: char) -> bool {
    c.is_alphanumeric() || c.is_whitespace() || ".,!?'\"#$".contains(c)
}

/// Replaces URLs and @-mentions with placeholder tokens, strips emoji and
/// other symbols, and collapses whitespace. Idempotent.
pub fn normalize_text(raw: &str) -> String {
    let s = scheme_url().replace_all(raw, NoExpand(URL_TOKEN));
    let s = www_url().replace_all(&s, NoExpand(URL_TOKEN));
    let s = mention().replace_all(&s, NoExpand(MENTION_TOKEN));
    let s: String = s.chars().filter(|&c| kept(c)).collect();
    // stripping can expose a new "www." word boundary
    let s = www_url().replace_all(&s, NoExpand(URL_TOKEN));
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadNode {
    pub id: String,
    pub text: String,
    pub label: Option<String>,
    pub children: Vec<ThreadNode>,
}

impl ThreadNode {
    pub fn leaf(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label: None,
            children: Vec::new(),
        }
    }

    pub fn with_children(mut self, children: Vec<ThreadNode>) -> Self {
        self.children = children;
        self
    }

    /// Number of nodes below this one.
    pub fn descendants(&self) -> usize {
        self.children.iter().map(|c| 1 + c.descendants()).sum()
    }
}

/// One (source, reply) pair from a thread. `node` is the deepest reply in
/// the chain that forms `reply`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadPair<'a> {
    pub source: &'a str,
    pub reply: String,
    pub node: &'a ThreadNode,
}

/// Pairs the root with every descendant; the reply text is the chain of
/// reply texts from the first-level ancestor down to that descendant.
pub fn flatten_threads(root: &ThreadNode) -> Vec<ThreadPair<'_>> {
    fn walk<'a>(node: &'a ThreadNode, prefix: Option<&str>, source: &'a str, out: &mut Vec<ThreadPair<'a>>) {
        // deleted replies contribute no text to their descendants' chains
        let own = (node.text.trim() != DELETED).then_some(node.text.as_str());
        let reply = match (prefix, own) {
            (Some(p), Some(t)) => format!("{p} {t}"),
            (Some(p), None) => p.to_string(),
            (None, Some(t)) => t.to_string(),
            (None, None) => String::new(),
        };
        out.push(ThreadPair {
            source,
            reply: reply.clone(),
            node,
        });
        let chain = (!reply.is_empty()).then_some(reply.as_str());
        for child in &node.children {
            walk(child, chain, source, out);
        }
    }
    let mut out = Vec::new();
    for child in &root.children {
        walk(child, None, &root.text, &mut out);
    }
    out
}

/// Builds trees from flat `(id, text, parent_id, label)` records, keeping
/// file order among siblings.
pub fn build_threads(
    records: Vec<(String, String, Option<String>, Option<String>)>,
) -> Result<Vec<ThreadNode>, DataError> {
    let mut index = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        if index.insert(r.0.clone(), i).is_some() {
            return Err(DataError::Structure(format!("duplicate node id {}", r.0)));
        }
    }
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); records.len()];
    let mut roots = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match &r.2 {
            None => roots.push(i),
            Some(p) => {
                let &pi = index
                    .get(p)
                    .ok_or_else(|| DataError::Structure(format!("node {} has unknown parent {p}", r.0)))?;
                children[pi].push(i);
            }
        }
    }
    let mut seen = vec![false; records.len()];
    fn build(
        i: usize,
        records: &[(String, String, Option<String>, Option<String>)],
        children: &[Vec<usize>],
        seen: &mut [bool],
    ) -> ThreadNode {
        seen[i] = true;
        let r = &records[i];
        ThreadNode {
            id: r.0.clone(),
            text: r.1.clone(),
            label: r.3.clone(),
            children: children[i].iter().map(|&c| build(c, records, children, seen)).collect(),
        }
    }
    let trees: Vec<ThreadNode> = roots
        .iter()
        .map(|&r| build(r, &records, &children, &mut seen))
        .collect();
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(DataError::Structure(format!(
            "cycle through node {}",
            records[i].0
        )));
    }
    Ok(trees)
}

fn str_field<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str)
}

fn id_field(v: &Value) -> Option<String> {
    match v.get("id")? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Filters and deduplicates candidate examples in order.
struct Collector<'l> {
    labels: &'l LabelSet,
    seen: HashSet<(String, String)>,
    out: Vec<Example>,
}

impl Collector<'_> {
    fn offer(
        &mut self,
        id: String,
        source: &str,
        reply: &str,
        label: &str,
        split: Option<Split>,
    ) -> Result<(), DataError> {
        if self.labels.index(label).is_none() {
            return Err(DataError::UnknownLabel {
                id,
                label: label.to_string(),
            });
        }
        if reply.trim() == DELETED {
            return Ok(());
        }
        let source_text = normalize_text(source);
        let reply_text = normalize_text(reply);
        if source_text.is_empty() || reply_text.is_empty() {
            return Ok(());
        }
        if !self.seen.insert((source_text.clone(), reply_text.clone())) {
            return Ok(());
        }
        self.out.push(Example {
            id,
            source_text,
            reply_text,
            label: label.to_string(),
            split,
        });
        Ok(())
    }
}

fn parse_split(v: &Value, line: usize) -> Result<Option<Split>, DataError> {
    match v.get("split") {
        None | Some(Value::Null) => Ok(None),
        Some(s) => serde_json::from_value(s.clone())
            .map(Some)
            .map_err(|e| DataError::Parse {
                line,
                message: format!("bad split: {e}"),
            }),
    }
}

/// Parses JSON Lines text in either flat or thread form.
pub fn parse_dataset(text: &str, labels: &LabelSet, flatten: bool) -> Result<Vec<Example>, DataError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !v.is_object() {
            return Err(DataError::Parse {
                line: i + 1,
                message: "expected a JSON object".into(),
            });
        }
        rows.push((i + 1, v));
    }
    let flat = rows.first().is_some_and(|(_, v)| v.get("reply_text").is_some());
    let mut c = Collector {
        labels,
        seen: HashSet::new(),
        out: Vec::new(),
    };
    if flat {
        for (line, v) in &rows {
            let id = id_field(v).unwrap_or_else(|| format!("line{line}"));
            let split = parse_split(v, *line)?;
            let (Some(s), Some(r), Some(l)) = (
                str_field(v, "source_text"),
                str_field(v, "reply_text"),
                str_field(v, "label"),
            ) else {
                continue;
            };
            c.offer(id, s, r, l, split)?;
        }
        return Ok(c.out);
    }
    let mut records = Vec::with_capacity(rows.len());
    for (line, v) in rows {
        let id = id_field(&v).ok_or_else(|| DataError::Parse {
            line,
            message: "thread node without id".into(),
        })?;
        let text = str_field(&v, "text").unwrap_or_default().to_string();
        let parent = match v.get("parent_id") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            Some(_) => {
                return Err(DataError::Parse {
                    line,
                    message: "parent_id must be a string".into(),
                })
            }
        };
        let label = str_field(&v, "label").map(str::to_string);
        records.push((id, text, parent, label));
    }
    for root in build_threads(records)? {
        let pairs = if flatten {
            flatten_threads(&root)
        } else {
            root.children
                .iter()
                .map(|n| ThreadPair {
                    source: &root.text,
                    reply: n.text.clone(),
                    node: n,
                })
                .collect()
        };
        for p in pairs {
            let Some(label) = &p.node.label else { continue };
            if p.node.text.trim() == DELETED {
                continue;
            }
            c.offer(p.node.id.clone(), p.source, &p.reply, label, None)?;
        }
    }
    Ok(c.out)
}

pub fn load_dataset(path: impl AsRef<Path>, labels: &LabelSet, flatten: bool) -> Result<Vec<Example>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_dataset(&text, labels, flatten)
}

/// Assigns a stratified 70/15/15 train/val/test split per label.
pub fn stratified_split(examples: &mut [Example], seed: u64) {
    let mut by_label: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        match by_label.iter_mut().find(|(l, _)| *l == e.label) {
            Some((_, v)) => v.push(i),
            None => by_label.push((e.label.clone(), vec![i])),
        }
    }
    let mut rng = stream(seed, Stream::Split);
    for (_, mut idx) in by_label {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let train = (n as f64 * 0.70).round() as usize;
        let val = ((n as f64 * 0.15).round() as usize).min(n - train);
        for (k, &i) in idx.iter().enumerate() {
            examples[i].split = Some(if k < train {
                Split::Train
            } else if k < train + val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
}

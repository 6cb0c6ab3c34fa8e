//! Keyword decoding graphs.
//!
//! A keyword is a left-to-right chain of classifier states.  Its graph has a
//! start node (0), one emission node per state (1..=S, node i carries state
//! `chain[i-1]`), and a final node (S+1).  Hypotheses are born directly in
//! node 1 — the start node has no outgoing arcs; the decoder injects a fresh
//! token each frame instead.  Every move consumes the state of the node it
//! lands on; arcs landing on the final node consume nothing (`state: None`)
//! and only add weight.  Jump arcs skip up to `max_skip` states at a weight
//! of `-punishment` per skipped state, which lets slightly clipped or
//! coarticulated utterances still reach the final node.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_SKIP: u32 = 1;
pub const DEFAULT_PUNISHMENT: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArcKind {
    SelfLoop,
    Emission,
    Jump,
}

impl ArcKind {
    pub fn name(self) -> &'static str {
        match self {
            ArcKind::SelfLoop => "self",
            ArcKind::Emission => "emission",
            ArcKind::Jump => "jump",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "self" => Some(ArcKind::SelfLoop),
            "emission" => Some(ArcKind::Emission),
            "jump" => Some(ArcKind::Jump),
            _ => None,
        }
    }
}

/// One transition.  `state` is the classifier state consumed on traversal —
/// always the destination node's state, `None` exactly for arcs into the
/// final node.
#[derive(Debug, Clone, PartialEq)]
pub struct Arc {
    pub src: u32,
    pub dst: u32,
    pub kind: ArcKind,
    pub state: Option<u32>,
    pub weight: f64,
}

/// Skip-arc shape: how many states one jump may pass over, and the score
/// penalty per skipped state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpConfig {
    pub max_skip: u32,
    pub punishment: f64,
}

impl Default for JumpConfig {
    fn default() -> Self {
        JumpConfig {
            max_skip: DEFAULT_MAX_SKIP,
            punishment: DEFAULT_PUNISHMENT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeywordGraph {
    pub keyword: String,
    pub chain: Vec<u32>,
    pub max_skip: u32,
    pub punishment: f64,
    pub arcs: Vec<Arc>,
    outgoing: Vec<Vec<usize>>,
}

impl KeywordGraph {
    /// Assemble a graph from explicit parts, checking arc endpoints index
    /// real nodes (semantic checks live in `validate_graph`).
    pub fn from_parts(
        keyword: String,
        chain: Vec<u32>,
        max_skip: u32,
        punishment: f64,
        arcs: Vec<Arc>,
    ) -> Result<Self> {
        if chain.is_empty() {
            return Err(Error::Config(format!(
                "keyword '{keyword}' has no states"
            )));
        }
        let num_nodes = chain.len() as u32 + 2;
        for arc in &arcs {
            if arc.src >= num_nodes || arc.dst >= num_nodes {
                return Err(Error::Config(format!(
                    "arc {} -> {} leaves the graph ({} nodes)",
                    arc.src, arc.dst, num_nodes
                )));
            }
        }
        let mut outgoing = vec![Vec::new(); num_nodes as usize];
        for (i, arc) in arcs.iter().enumerate() {
            outgoing[arc.src as usize].push(i);
        }
        Ok(KeywordGraph {
            keyword,
            chain,
            max_skip,
            punishment,
            arcs,
            outgoing,
        })
    }

    pub fn num_states(&self) -> u32 {
        self.chain.len() as u32
    }

    pub fn num_nodes(&self) -> u32 {
        self.chain.len() as u32 + 2
    }

    pub fn start_node(&self) -> u32 {
        0
    }

    pub fn final_node(&self) -> u32 {
        self.chain.len() as u32 + 1
    }

    /// The classifier state an emission node carries; `None` for start/final.
    pub fn node_state(&self, node: u32) -> Option<u32> {
        if node == 0 || node == self.final_node() {
            None
        } else {
            Some(self.chain[node as usize - 1])
        }
    }

    pub fn arcs_from(&self, node: u32) -> impl Iterator<Item = &Arc> {
        self.outgoing[node as usize].iter().map(|&i| &self.arcs[i])
    }

    pub fn states(&self) -> BTreeSet<u32> {
        self.chain.iter().copied().collect()
    }
}

/// Build the chain graph for one keyword.
///
/// Per emission node i (1..=S): a weight-0 self-loop, a weight-0 emission
/// arc to node i+1, and jump arcs to i+1+k for k in 1..=min(max_skip, S-i)
/// at weight -k*punishment.  Arcs landing on the final node carry no state.
pub fn build_graph(keyword: &str, states: &[u32], jump: &JumpConfig) -> Result<KeywordGraph> {
    if states.is_empty() {
        return Err(Error::Config(format!(
            "keyword '{keyword}' has no states"
        )));
    }
    if !(jump.punishment >= 0.0) {
        return Err(Error::Config(format!(
            "jump punishment must be non-negative, got {}",
            jump.punishment
        )));
    }
    let s = states.len() as u32;
    let final_node = s + 1;
    let land_state = |dst: u32| -> Option<u32> {
        if dst == final_node {
            None
        } else {
            Some(states[dst as usize - 1])
        }
    };
    let mut arcs = Vec::new();
    for i in 1..=s {
        arcs.push(Arc {
            src: i,
            dst: i,
            kind: ArcKind::SelfLoop,
            state: Some(states[i as usize - 1]),
            weight: 0.0,
        });
        arcs.push(Arc {
            src: i,
            dst: i + 1,
            kind: ArcKind::Emission,
            state: land_state(i + 1),
            weight: 0.0,
        });
        let max_k = jump.max_skip.min(s - i);
        for k in 1..=max_k {
            arcs.push(Arc {
                src: i,
                dst: i + 1 + k,
                kind: ArcKind::Jump,
                state: land_state(i + 1 + k),
                weight: -(k as f64) * jump.punishment,
            });
        }
    }
    KeywordGraph::from_parts(
        keyword.to_string(),
        states.to_vec(),
        jump.max_skip,
        jump.punishment,
        arcs,
    )
}

/// A structural defect found by `validate_graph`.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    MissingSelfLoop { node: u32 },
    WeightedSelfLoop { node: u32, weight: f64 },
    ArcStateMismatch { src: u32, dst: u32, got: Option<u32>, want: Option<u32> },
    PositiveArcWeight { src: u32, dst: u32, weight: f64 },
    NoPathToFinal { node: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingSelfLoop { node } => write!(f, "node {node} has no self-loop"),
            Violation::WeightedSelfLoop { node, weight } => {
                write!(f, "self-loop on node {node} has non-zero weight {weight}")
            }
            Violation::ArcStateMismatch { src, dst, got, want } => {
                let fmt_state = |s: &Option<u32>| match s {
                    Some(v) => format!("state {v}"),
                    None => "no state".to_string(),
                };
                write!(
                    f,
                    "arc {src} -> {dst} consumes {} but its destination carries {}",
                    fmt_state(got),
                    fmt_state(want)
                )
            }
            Violation::PositiveArcWeight { src, dst, weight } => {
                write!(f, "arc {src} -> {dst} has positive weight {weight}")
            }
            Violation::NoPathToFinal { node } => {
                write!(f, "node {node} cannot reach the final node")
            }
        }
    }
}

/// Check the invariants decoding relies on; returns every violation found
/// (empty for a healthy graph).
pub fn validate_graph(graph: &KeywordGraph) -> Vec<Violation> {
    let mut violations = Vec::new();
    let final_node = graph.final_node();
    for node in 1..final_node {
        let has_self = graph
            .arcs_from(node)
            .any(|a| a.kind == ArcKind::SelfLoop && a.dst == node);
        if !has_self {
            violations.push(Violation::MissingSelfLoop { node });
        }
    }
    for arc in &graph.arcs {
        if arc.kind == ArcKind::SelfLoop && arc.src == arc.dst && arc.weight != 0.0 {
            violations.push(Violation::WeightedSelfLoop {
                node: arc.src,
                weight: arc.weight,
            });
        }
        let want = graph.node_state(arc.dst);
        if arc.state != want {
            violations.push(Violation::ArcStateMismatch {
                src: arc.src,
                dst: arc.dst,
                got: arc.state,
                want,
            });
        }
        if arc.weight > 0.0 {
            violations.push(Violation::PositiveArcWeight {
                src: arc.src,
                dst: arc.dst,
                weight: arc.weight,
            });
        }
    }
    // Reachability of the final node from every emission node.
    let n = graph.num_nodes() as usize;
    let mut reaches = vec![false; n];
    reaches[final_node as usize] = true;
    // Arcs only go forward or self-loop, so sweeping nodes in reverse once
    // settles reachability.
    for node in (1..final_node).rev() {
        if graph
            .arcs_from(node)
            .any(|a| a.dst != node && reaches[a.dst as usize])
        {
            reaches[node as usize] = true;
        }
    }
    for node in 1..final_node {
        if !reaches[node as usize] {
            violations.push(Violation::NoPathToFinal { node });
        }
    }
    violations
}

// ---------------------------------------------------------------------------
// Lexicon: words to state-id sequences.

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<u32>>,
}

impl Lexicon {
    pub fn new() -> Self {
        Lexicon::default()
    }

    pub fn insert(&mut self, word: impl Into<String>, states: Vec<u32>) {
        self.entries.insert(word.into(), states);
    }

    pub fn get(&self, word: &str) -> Option<&[u32]> {
        self.entries.get(word).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Concatenate the state sequences of a whitespace-separated keyword.
    pub fn keyword_to_states(&self, keyword: &str) -> Result<Vec<u32>> {
        let mut states = Vec::new();
        let mut any = false;
        for word in keyword.split_whitespace() {
            any = true;
            let entry = self.get(word).ok_or_else(|| Error::Oov {
                unit: word.to_string(),
            })?;
            states.extend_from_slice(entry);
        }
        if !any {
            return Err(Error::Config("keyword is empty".into()));
        }
        Ok(states)
    }

    /// Lines of `word state state ...`; duplicates are rejected so silent
    /// shadowing cannot happen.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lex = Lexicon::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut tok = line.split_whitespace();
            let word = tok.next().unwrap();
            let states = tok
                .map(|t| {
                    t.parse::<u32>()
                        .map_err(|_| Error::format(path, format!("line {}: bad state id '{t}'", ln + 1)))
                })
                .collect::<Result<Vec<u32>>>()?;
            if states.is_empty() {
                return Err(Error::format(
                    path,
                    format!("line {}: word '{word}' has no states", ln + 1),
                ));
            }
            if lex.entries.contains_key(word) {
                return Err(Error::format(
                    path,
                    format!("line {}: duplicate word '{word}'", ln + 1),
                ));
            }
            lex.insert(word, states);
        }
        Ok(lex)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (word, states) in &self.entries {
            out.push_str(word);
            for s in states {
                out.push_str(&format!(" {s}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Graph files.

const GRAPH_MAGIC: &str = "BTNNGRAPH v1";

pub fn save_graph(path: impl AsRef<Path>, graph: &KeywordGraph) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(GRAPH_MAGIC);
    out.push('\n');
    out.push_str(&format!("keyword {}\n", graph.keyword));
    out.push_str(&format!("states {} :", graph.chain.len()));
    for s in &graph.chain {
        out.push_str(&format!(" {s}"));
    }
    out.push('\n');
    out.push_str(&format!("max_skip {}\n", graph.max_skip));
    out.push_str(&format!("punishment {}\n", graph.punishment));
    out.push_str(&format!("arcs {}\n", graph.arcs.len()));
    for a in &graph.arcs {
        let state = match a.state {
            Some(s) => s.to_string(),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            a.kind.name(),
            a.src,
            a.dst,
            state,
            a.weight
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<KeywordGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text).map_err(|detail| Error::format(path, detail))
}

fn parse_graph(text: &str) -> std::result::Result<KeywordGraph, String> {
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| {
        lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| format!("file ended early, expected {what}"))
    };
    let (_, magic) = next("magic")?;
    if magic != GRAPH_MAGIC {
        return Err("not a graph file (bad magic or version)".into());
    }
    let (ln, l) = next("keyword")?;
    let keyword = l
        .strip_prefix("keyword ")
        .ok_or(format!("line {ln}: expected keyword"))?
        .to_string();
    let (ln, l) = next("states")?;
    let rest = l
        .strip_prefix("states ")
        .ok_or(format!("line {ln}: expected states"))?;
    let (count_str, ids_str) = rest
        .split_once(" :")
        .ok_or(format!("line {ln}: malformed states line"))?;
    let count: usize = count_str
        .trim()
        .parse()
        .map_err(|_| format!("line {ln}: bad state count"))?;
    let chain = ids_str
        .split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| format!("line {ln}: bad state id '{t}'")))
        .collect::<std::result::Result<Vec<u32>, String>>()?;
    if chain.len() != count {
        return Err(format!(
            "line {ln}: states line declares {count} ids but lists {}",
            chain.len()
        ));
    }
    let (ln, l) = next("max_skip")?;
    let max_skip: u32 = l
        .strip_prefix("max_skip ")
        .and_then(|v| v.parse().ok())
        .ok_or(format!("line {ln}: expected max_skip"))?;
    let (ln, l) = next("punishment")?;
    let punishment: f64 = l
        .strip_prefix("punishment ")
        .and_then(|v| v.parse().ok())
        .ok_or(format!("line {ln}: expected punishment"))?;
    let (ln, l) = next("arcs")?;
    let num_arcs: usize = l
        .strip_prefix("arcs ")
        .and_then(|v| v.parse().ok())
        .ok_or(format!("line {ln}: expected arcs count"))?;
    let mut arcs = Vec::with_capacity(num_arcs);
    for i in 0..num_arcs {
        let (ln, l) = next(&format!("arc {} of {num_arcs}", i + 1))?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        if tok.len() != 5 {
            return Err(format!("line {ln}: expected 'kind src dst state weight'"));
        }
        let kind = ArcKind::parse(tok[0]).ok_or(format!("line {ln}: unknown arc kind '{}'", tok[0]))?;
        let src: u32 = tok[1].parse().map_err(|_| format!("line {ln}: bad src"))?;
        let dst: u32 = tok[2].parse().map_err(|_| format!("line {ln}: bad dst"))?;
        let state = if tok[3] == "-" {
            None
        } else {
            Some(tok[3].parse::<u32>().map_err(|_| format!("line {ln}: bad state"))?)
        };
        let weight: f64 = tok[4].parse().map_err(|_| format!("line {ln}: bad weight"))?;
        arcs.push(Arc {
            src,
            dst,
            kind,
            state,
            weight,
        });
    }
    if lines.next().is_some() {
        return Err("trailing content after the declared arcs".into());
    }
    KeywordGraph::from_parts(keyword, chain, max_skip, punishment, arcs).map_err(|e| e.to_string())
}

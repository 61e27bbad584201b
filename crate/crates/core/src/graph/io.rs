//! Multiplex edge-list text format.
//!
//! ```text
//! # nodes=5 layers=2
//! # layer=1 model=LT theta=0.5
//! 0 0 1
//! 0 1 2 0.25
//! 1 3 4
//! ```
//!
//! Body lines are `<layer_id> <src> <dst> [probability]`. Lines starting with
//! `#` are comments, except the `nodes=`/`layers=` header and the per-layer
//! `layer=<id> model=<IC|LT> [theta=<t>]` directive. Layers default to IC.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{DiffusionModelKind, Edge, Layer, MultiplexGraph, DEFAULT_LT_THRESHOLD};
use crate::error::{RemError, Result};

pub fn load_multiplex(path: impl AsRef<Path>) -> Result<MultiplexGraph> {
    let text = std::fs::read_to_string(path)?;
    parse_multiplex(&text)
}

#[derive(Default)]
struct Header {
    nodes: Option<usize>,
    layers: Option<usize>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> RemError {
    RemError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_model(line: usize, kv: &BTreeMap<&str, &str>) -> Result<DiffusionModelKind> {
    let model = kv.get("model").copied().unwrap_or("IC");
    match model.to_ascii_uppercase().as_str() {
        "IC" => Ok(DiffusionModelKind::IC),
        "LT" => {
            let threshold = match kv.get("theta") {
                Some(t) => t
                    .parse::<f64>()
                    .map_err(|_| parse_err(line, format!("bad theta `{t}`")))?,
                None => DEFAULT_LT_THRESHOLD,
            };
            Ok(DiffusionModelKind::LT { threshold })
        }
        other => Err(parse_err(line, format!("unknown diffusion model `{other}`"))),
    }
}

fn key_values(body: &str) -> Option<BTreeMap<&str, &str>> {
    let mut kv = BTreeMap::new();
    for tok in body.split_whitespace() {
        let (k, v) = tok.split_once('=')?;
        kv.insert(k, v);
    }
    if kv.is_empty() {
        None
    } else {
        Some(kv)
    }
}

fn parse_index(line: usize, tok: &str, what: &str) -> Result<usize> {
    let v: i64 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("{what} `{tok}` is not an integer")))?;
    if v < 0 {
        return Err(parse_err(line, format!("{what} {v} is negative")));
    }
    usize::try_from(v).map_err(|_| parse_err(line, format!("{what} {v} out of range")))
}

pub fn parse_multiplex(text: &str) -> Result<MultiplexGraph> {
    let mut header = Header::default();
    let mut models: BTreeMap<usize, DiffusionModelKind> = BTreeMap::new();
    let mut edges: BTreeMap<usize, Vec<Edge>> = BTreeMap::new();
    let mut max_node: Option<usize> = None;

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(kv) = key_values(rest) {
                if kv.contains_key("layer") {
                    let id = parse_index(lineno, kv["layer"], "layer id")?;
                    models.insert(id, parse_model(lineno, &kv)?);
                } else if kv.contains_key("nodes") || kv.contains_key("layers") {
                    if let Some(n) = kv.get("nodes") {
                        header.nodes = Some(parse_index(lineno, n, "node count")?);
                    }
                    if let Some(l) = kv.get("layers") {
                        header.layers = Some(parse_index(lineno, l, "layer count")?);
                    }
                }
            }
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 && toks.len() != 4 {
            return Err(parse_err(
                lineno,
                format!("expected `<layer> <src> <dst> [prob]`, got {} fields", toks.len()),
            ));
        }
        let layer = parse_index(lineno, toks[0], "layer id")?;
        let src = parse_index(lineno, toks[1], "node index")?;
        let dst = parse_index(lineno, toks[2], "node index")?;
        if src > u32::MAX as usize - 1 || dst > u32::MAX as usize - 1 {
            return Err(parse_err(lineno, "node index exceeds 32-bit range"));
        }
        let prob_override = match toks.get(3) {
            Some(p) => {
                let p: f64 = p
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad probability `{p}`")))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(parse_err(lineno, format!("probability {p} outside [0, 1]")));
                }
                Some(p)
            }
            None => None,
        };
        if src == dst {
            return Err(parse_err(lineno, format!("self-loop on node {src}")));
        }
        max_node = Some(max_node.map_or(src.max(dst), |m| m.max(src).max(dst)));
        edges.entry(layer).or_default().push(Edge {
            src: src as u32,
            dst: dst as u32,
            prob_override,
        });
    }

    let used_max = edges.keys().chain(models.keys()).copied().max();
    let num_layers = match (header.layers, used_max) {
        (Some(l), Some(m)) if m >= l => {
            return Err(RemError::Graph(format!(
                "layer id {m} used but header declares {l} layers"
            )))
        }
        (Some(l), _) => l,
        (None, Some(m)) => m + 1,
        (None, None) => 1,
    };
    if header.layers.is_none() {
        for id in 0..num_layers {
            if !edges.contains_key(&id) && !models.contains_key(&id) {
                return Err(RemError::LayerGap(id));
            }
        }
    }
    let inferred = max_node.map_or(0, |m| m + 1);
    let num_nodes = match header.nodes {
        Some(n) if n < inferred => {
            return Err(RemError::Graph(format!(
                "header declares {n} nodes but node index {} appears",
                inferred - 1
            )))
        }
        Some(n) => n,
        None => inferred,
    };

    let layers = (0..num_layers)
        .map(|id| {
            let es = edges.remove(&id).unwrap_or_default();
            let model = models.get(&id).copied().unwrap_or_default();
            Layer::new(id, model, num_nodes, es)
        })
        .collect::<Result<Vec<_>>>()?;
    MultiplexGraph::new(num_nodes, layers)
}

/// Canonical text form: header, one model directive per layer, edges sorted
/// by `(layer, src, dst)`.
pub fn write_multiplex(g: &MultiplexGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# nodes={} layers={}", g.num_nodes(), g.num_layers());
    for l in g.layers() {
        match l.model {
            DiffusionModelKind::IC => {
                let _ = writeln!(out, "# layer={} model=IC", l.layer_id);
            }
            DiffusionModelKind::LT { threshold } => {
                let _ = writeln!(out, "# layer={} model=LT theta={threshold}", l.layer_id);
            }
        }
    }
    for l in g.layers() {
        for e in l.edges() {
            match e.prob_override {
                Some(p) => {
                    let _ = writeln!(out, "{} {} {} {p}", l.layer_id, e.src, e.dst);
                }
                None => {
                    let _ = writeln!(out, "{} {} {}", l.layer_id, e.src, e.dst);
                }
            }
        }
    }
    out
}

pub fn save_multiplex(g: &MultiplexGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_multiplex(g))?;
    Ok(())
}

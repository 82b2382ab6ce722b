//! Interpretability read directly off a pruned topology.
//!
//! * layer importance: `F[i, j] = |W[i, j]| / Σ_k |W[k, j]|`, where `i` runs
//!   over the previous layer and `j` over the next; pruned weights are 0.
//! * input→output importance: the product `F¹ F² … Fᴸ`.
//! * pathway graph: one edge per retained connection, with reachability and
//!   structural symmetry of inputs.
//! * pattern probe: class frequency among rows where chosen features are all
//!   active.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::train::PrunedNetwork;

/// Column-normalized absolute weights for `w` laid out `(prev, next)`.
/// A column with no retained weight stays all-zero.
pub fn layer_importance(w: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut f = w.mapv(f64::abs);
    for mut col in f.columns_mut() {
        let s: f64 = col.sum();
        if s > 0.0 {
            col.mapv_inplace(|v| v / s);
        }
    }
    f
}

/// Per-layer importance matrices, each `(prev, next)`.
pub fn layer_importances(pruned: &PrunedNetwork) -> Vec<Array2<f64>> {
    pruned.layers.iter().map(|l| layer_importance(l.weights.t())).collect()
}

/// `(inputs, outputs)` importance `I = F¹ · F² · … · Fᴸ`.
pub fn input_output_importance(pruned: &PrunedNetwork) -> Array2<f64> {
    let mut fs = layer_importances(pruned).into_iter();
    let first = fs.next().expect("network has layers");
    fs.fold(first, |acc, f| acc.dot(&f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Input,
    Hidden,
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// DOT/JSON name: `x{i}`, `h{layer}_{i}` or `y{i}`, all 1-based.
    pub name: String,
    /// 0 for inputs, `k` for the outputs of weight layer `k`.
    pub layer: usize,
    /// 0-based position within its layer.
    pub index: usize,
    pub role: NodeRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub weight: f64,
}

/// Retained-connection digraph of a pruned network.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwayGraph {
    pub nodes: Vec<Node>,
    /// `(from, to, weight)` by node id.
    pub edges: Vec<(usize, usize, f64)>,
    layer_start: Vec<usize>,
    widths: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

impl PathwayGraph {
    pub fn n_inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn node_id(&self, layer: usize, index: usize) -> usize {
        self.layer_start[layer] + index
    }

    pub fn input_id(&self, i: usize) -> usize {
        self.node_id(0, i)
    }

    pub fn output_id(&self, o: usize) -> usize {
        self.node_id(self.widths.len() - 1, o)
    }

    fn children(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b, _) in &self.edges {
            adj[a].push(b);
        }
        adj
    }

    fn parents(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b, _) in &self.edges {
            adj[b].push(a);
        }
        adj
    }

    /// Graphviz rendering; every node is listed even when isolated.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph pathways {\n  rankdir=LR;\n");
        for n in &self.nodes {
            let shape = match n.role {
                NodeRole::Input => "box",
                NodeRole::Hidden => "circle",
                NodeRole::Output => "doublecircle",
            };
            let _ = writeln!(out, "  \"{}\" [shape={shape}];", n.name);
        }
        for &(a, b, w) in &self.edges {
            let _ = writeln!(
                out,
                "  \"{}\" -> \"{}\" [weight=\"{:.6}\"];",
                self.nodes[a].name, self.nodes[b].name, w
            );
        }
        out.push_str("}\n");
        out
    }

    /// `{"nodes": [...], "edges": [{"from", "to", "weight"}]}`.
    pub fn to_json(&self) -> serde_json::Value {
        let doc = GraphJson {
            nodes: self.nodes.clone(),
            edges: self
                .edges
                .iter()
                .map(|&(a, b, w)| Edge {
                    from: self.nodes[a].name.clone(),
                    to: self.nodes[b].name.clone(),
                    weight: w,
                })
                .collect(),
        };
        serde_json::to_value(doc).expect("graph serializes")
    }
}

/// One edge per retained connection, annotated with its weight.
pub fn extract_pathways(pruned: &PrunedNetwork) -> PathwayGraph {
    let mut widths = vec![pruned.layers[0].spec.input_size];
    widths.extend(pruned.layers.iter().map(|l| l.spec.output_size));
    let last = widths.len() - 1;
    let mut nodes = Vec::new();
    let mut layer_start = Vec::with_capacity(widths.len());
    for (layer, &w) in widths.iter().enumerate() {
        layer_start.push(nodes.len());
        for index in 0..w {
            let (name, role) = if layer == 0 {
                (format!("x{}", index + 1), NodeRole::Input)
            } else if layer == last {
                (format!("y{}", index + 1), NodeRole::Output)
            } else {
                (format!("h{layer}_{}", index + 1), NodeRole::Hidden)
            };
            nodes.push(Node {
                name,
                layer,
                index,
                role,
            });
        }
    }
    let mut edges = Vec::new();
    for (k, l) in pruned.layers.iter().enumerate() {
        for ((o, i), &keep) in l.mask.indexed_iter() {
            if keep {
                edges.push((layer_start[k] + i, layer_start[k + 1] + o, l.weights[[o, i]]));
            }
        }
    }
    edges.sort_by_key(|&(a, b, _)| (a, b));
    PathwayGraph {
        nodes,
        edges,
        layer_start,
        widths,
    }
}

/// 0-based inputs with a directed path to `output`.
pub fn ancestors_of_output(graph: &PathwayGraph, output: usize) -> Result<BTreeSet<usize>> {
    if output >= graph.n_outputs() {
        return Err(Error::IndexOutOfRange {
            index: output,
            len: graph.n_outputs(),
        });
    }
    let parents = graph.parents();
    let mut seen = vec![false; graph.nodes.len()];
    let mut stack = vec![graph.output_id(output)];
    seen[stack[0]] = true;
    let mut found = BTreeSet::new();
    while let Some(v) = stack.pop() {
        if graph.nodes[v].role == NodeRole::Input {
            found.insert(graph.nodes[v].index);
        }
        for &p in &parents[v] {
            if !seen[p] {
                seen[p] = true;
                stack.push(p);
            }
        }
    }
    Ok(found)
}

/// Structural grouping of input features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryPartition {
    /// Per input: sorted colors of its output-reaching children.
    pub signatures: Vec<Vec<u32>>,
    /// Groups of 0-based inputs with equal signatures, each sorted, ordered by
    /// smallest member.
    pub groups: Vec<Vec<usize>>,
}

/// Colors nodes from the output side: output `o` gets its own color; a
/// hidden node that reaches an output gets the color of the sorted multiset
/// of its reaching children's colors (one refinement per layer); nodes that
/// reach no output are ignored. Inputs with identical child-color multisets
/// form a group, so two inputs wired through distinct but structurally
/// equivalent hidden units to the same outputs are grouped, and every input
/// with no output path lands in one group.
pub fn symmetry_signatures(graph: &PathwayGraph) -> SymmetryPartition {
    let children = graph.children();
    let depth = graph.widths.len();
    let mut color: Vec<Option<u32>> = vec![None; graph.nodes.len()];
    let mut interned: HashMap<(usize, Vec<u32>), u32> = HashMap::new();
    let mut next = 0u32;
    for o in 0..graph.n_outputs() {
        color[graph.output_id(o)] = Some(next);
        next += 1;
    }
    let signature = |v: usize, color: &[Option<u32>]| -> Vec<u32> {
        let mut s: Vec<u32> = children[v].iter().filter_map(|&c| color[c]).collect();
        s.sort_unstable();
        s
    };
    for layer in (1..depth - 1).rev() {
        for i in 0..graph.widths[layer] {
            let v = graph.node_id(layer, i);
            let sig = signature(v, &color);
            if sig.is_empty() {
                continue;
            }
            let id = *interned.entry((layer, sig)).or_insert_with(|| {
                next += 1;
                next - 1
            });
            color[v] = Some(id);
        }
    }
    let signatures: Vec<Vec<u32>> = (0..graph.n_inputs())
        .map(|i| signature(graph.input_id(i), &color))
        .collect();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut index: HashMap<&Vec<u32>, usize> = HashMap::new();
    for (i, sig) in signatures.iter().enumerate() {
        match index.get(sig) {
            Some(&g) => groups[g].push(i),
            None => {
                index.insert(sig, groups.len());
                groups.push(vec![i]);
            }
        }
    }
    SymmetryPartition { signatures, groups }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub pixels: Vec<usize>,
    pub target_label: usize,
    pub threshold: f64,
    /// Rows where every probed feature exceeds the threshold.
    pub support: usize,
    /// Of those, rows carrying the target label.
    pub hits: usize,
    /// `hits / support`; `None` when the support is empty.
    pub conditional_accuracy: Option<f64>,
}

/// `P(label = target | x_p > threshold for every probed p)`.
pub fn pattern_probe(dataset: &Dataset, pixels: &[usize], target_label: usize, threshold: f64) -> Result<ProbeResult> {
    let p = dataset.n_features();
    if let Some(&bad) = pixels.iter().find(|&&i| i >= p) {
        return Err(Error::IndexOutOfRange { index: bad, len: p });
    }
    let width = dataset.targets.output_width();
    if target_label >= width {
        return Err(Error::IndexOutOfRange {
            index: target_label,
            len: width,
        });
    }
    let mut support = 0;
    let mut hits = 0;
    for (r, row) in dataset.features.outer_iter().enumerate() {
        if pixels.iter().all(|&i| row[i] > threshold) {
            support += 1;
            let is_target = match &dataset.targets {
                Targets::Classes { labels, .. } => labels[r] == target_label,
                Targets::Binary(y) => y[[r, target_label]] > 0.5,
            };
            hits += usize::from(is_target);
        }
    }
    Ok(ProbeResult {
        pixels: pixels.to_vec(),
        target_label,
        threshold,
        support,
        hits,
        conditional_accuracy: (support > 0).then(|| hits as f64 / support as f64),
    })
}

/// The `k` inputs with the largest importance for `output`, ties broken by
/// lower index.
pub fn top_inputs(importance: &Array2<f64>, output: usize, k: usize) -> Vec<usize> {
    let col = importance.column(output);
    let mut idx: Vec<usize> = (0..col.len()).collect();
    idx.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-input importance summed over outputs and reshaped row-major to
/// `(rows, cols)`.
pub fn importance_heatmap(importance: &Array2<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    if rows * cols != importance.nrows() {
        return Err(Error::shape(
            "heatmap grid",
            importance.nrows(),
            format!("{rows}x{cols}"),
        ));
    }
    let totals: Vec<f64> = importance.rows().into_iter().map(|r| r.sum()).collect();
    Ok(Array2::from_shape_vec((rows, cols), totals).expect("size checked"))
}

/// `feature,<output names...>` then one row per input.
pub fn importance_csv(importance: &Array2<f64>, feature_names: &[String], output_names: &[String]) -> String {
    let mut out = String::from("feature");
    for o in 0..importance.ncols() {
        out.push(',');
        out.push_str(output_names.get(o).map(String::as_str).unwrap_or("?"));
    }
    out.push('\n');
    for (i, row) in importance.rows().into_iter().enumerate() {
        match feature_names.get(i) {
            Some(name) => out.push_str(name),
            None => out.push_str(&format!("x{}", i + 1)),
        }
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Header `c0,c1,…` then the grid row-major.
pub fn grid_csv(grid: &Array2<f64>) -> String {
    let header: Vec<String> = (0..grid.ncols()).map(|c| format!("c{c}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for row in grid.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

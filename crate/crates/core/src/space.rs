//! Graph-structured search spaces: structure → cells → blocks → nodes.
//!
//! A [`SpaceSpec`] is the declarative description (serializable as JSON). It
//! is validated and compiled by [`build_space`] into a [`SearchSpace`], whose
//! decision slots are the Variable nodes in cell/block/node declaration
//! order. An [`ArchitectureEncoding`] picks one choice per slot and
//! [`decode`] turns it into a framework-neutral [`ArchGraph`].

use std::collections::HashMap;
use std::fmt;

use num_bigint::BigUint;
use num_traits::One;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Linear,
    Softmax,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
            Activation::Softmax => "softmax",
        };
        f.write_str(s)
    }
}

/// Position of a node inside a structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodePath {
    pub cell: usize,
    pub block: usize,
    pub node: usize,
}

impl NodePath {
    pub const fn new(cell: usize, block: usize, node: usize) -> Self {
        Self { cell, block, node }
    }

    fn tag(&self) -> String {
        format!("c{}.b{}.n{}", self.cell, self.block, self.node)
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}.B{}.N{}", self.cell, self.block, self.node)
    }
}

/// A tensor that a block input or a skip connection can name.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TensorRef {
    Input { name: String },
    CellOutput { cell: usize },
    Node { path: NodePath },
}

impl TensorRef {
    pub fn input(name: &str) -> Self {
        TensorRef::Input { name: name.to_string() }
    }

    pub fn cell(cell: usize) -> Self {
        TensorRef::CellOutput { cell }
    }
}

impl fmt::Display for TensorRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorRef::Input { name } => write!(f, "input:{name}"),
            TensorRef::CellOutput { cell } => write!(f, "cell:{cell}"),
            TensorRef::Node { path } => write!(f, "node:{path}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerOp {
    Identity,
    Dense { units: usize, activation: Activation },
    Dropout { rate: f64 },
    #[serde(rename = "conv1d")]
    Conv1D { filters: usize, kernel: usize, stride: usize },
    #[serde(rename = "max_pooling1d")]
    MaxPooling1D { size: usize },
    Activation { function: Activation },
    Add,
    Concatenate,
    /// Skip connection from the named tensors (concatenated). Empty is `Null`.
    Connect { sources: Vec<TensorRef> },
}

impl LayerOp {
    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerOp::Dense { units, activation }
    }

    pub fn null() -> Self {
        LayerOp::Connect { sources: Vec::new() }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, LayerOp::Dense { .. } | LayerOp::Conv1D { .. })
    }

    fn check(&self) -> Result<(), String> {
        match self {
            LayerOp::Dense { units: 0, .. } => Err("dense units must be positive".into()),
            LayerOp::Dropout { rate } if !(*rate > 0.0 && *rate < 1.0) => {
                Err(format!("dropout rate {rate} outside (0, 1)"))
            }
            LayerOp::Conv1D { filters, kernel, stride } if *filters == 0 || *kernel == 0 || *stride == 0 => {
                Err("conv1d sizes must be >= 1".into())
            }
            LayerOp::MaxPooling1D { size: 0 } => Err("pooling size must be >= 1".into()),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for LayerOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerOp::Identity => f.write_str("Identity"),
            LayerOp::Dense { units, activation } => write!(f, "Dense({units}, {activation})"),
            LayerOp::Dropout { rate } => write!(f, "Dropout({rate})"),
            LayerOp::Conv1D { filters, kernel, stride } => write!(f, "Conv1D({filters}, {kernel}, {stride})"),
            LayerOp::MaxPooling1D { size } => write!(f, "MaxPooling1D({size})"),
            LayerOp::Activation { function } => write!(f, "Activation({function})"),
            LayerOp::Add => f.write_str("Add"),
            LayerOp::Concatenate => f.write_str("Concatenate"),
            LayerOp::Connect { sources } if sources.is_empty() => f.write_str("Connect(Null)"),
            LayerOp::Connect { sources } => {
                let names: Vec<String> = sources.iter().map(|s| s.to_string()).collect();
                write!(f, "Connect({})", names.join(" & "))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeSpec {
    Variable {
        choices: Vec<LayerOp>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    Constant { op: LayerOp },
    Mirror { of: NodePath },
}

impl NodeSpec {
    pub fn variable(choices: Vec<LayerOp>) -> Self {
        NodeSpec::Variable { choices, name: None }
    }

    pub fn named(name: &str, choices: Vec<LayerOp>) -> Self {
        NodeSpec::Variable { choices, name: Some(name.to_string()) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeEnd {
    Input(usize),
    Node(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: EdgeEnd,
    pub to: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub inputs: Vec<TensorRef>,
    pub nodes: Vec<NodeSpec>,
    /// Explicit DAG; `None` chains the inputs through the nodes in order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<Edge>>,
}

impl BlockSpec {
    pub fn chain(inputs: Vec<TensorRef>, nodes: Vec<NodeSpec>) -> Self {
        Self { inputs, nodes, edges: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    #[default]
    Concatenate,
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub blocks: Vec<BlockSpec>,
    #[serde(default)]
    pub output: MergeRule,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub units: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureOutput {
    pub cells: Vec<usize>,
    #[serde(default)]
    pub rule: MergeRule,
}

/// Declarative search-space description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub name: String,
    pub inputs: Vec<InputSpec>,
    pub cells: Vec<CellSpec>,
    pub output: StructureOutput,
    pub head: HeadSpec,
}

impl SpaceSpec {
    pub fn from_json(text: &str) -> Result<Self, SpaceError> {
        serde_json::from_str(text).map_err(|e| SpaceError::Json(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("space spec serializes")
    }

    /// Replace input dimensions by name; unknown names are an error.
    pub fn with_input_dims(mut self, dims: &[(String, usize)]) -> Result<Self, SpaceError> {
        for (name, dim) in dims {
            let input = self
                .inputs
                .iter_mut()
                .find(|i| &i.name == name)
                .ok_or_else(|| SpaceError::UnknownInput { at: "input override".into(), name: name.clone() })?;
            input.dim = *dim;
        }
        Ok(self)
    }

    /// One cell, one chained block of Variable nodes with the given arities.
    /// Choice `0` is Identity and choice `i > 0` is `Dense(4·i, relu)`.
    pub fn flat(name: &str, input_dim: usize, arities: &[usize]) -> Self {
        let nodes = arities
            .iter()
            .map(|&a| {
                let mut choices = vec![LayerOp::Identity];
                choices.extend((1..a).map(|i| LayerOp::dense(4 * i, Activation::Relu)));
                NodeSpec::variable(choices)
            })
            .collect();
        SpaceSpec {
            name: name.to_string(),
            inputs: vec![InputSpec { name: "x".into(), dim: input_dim }],
            cells: vec![CellSpec { blocks: vec![BlockSpec::chain(vec![TensorRef::input("x")], nodes)], output: MergeRule::Concatenate }],
            output: StructureOutput { cells: vec![0], rule: MergeRule::Concatenate },
            head: HeadSpec { units: 1, activation: Activation::Linear },
        }
    }

    fn node(&self, p: NodePath) -> Option<&NodeSpec> {
        self.cells.get(p.cell)?.blocks.get(p.block)?.nodes.get(p.node)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("invalid space JSON: {0}")]
    Json(String),
    #[error("space has no cells")]
    NoCells,
    #[error("duplicate input name '{0}'")]
    DuplicateInput(String),
    #[error("{at}: unknown input '{name}'")]
    UnknownInput { at: String, name: String },
    #[error("{at}: reference to cell {cell} which is not an earlier cell")]
    ForwardCellRef { at: String, cell: usize },
    #[error("{at}: mirror referent {referent} does not exist")]
    DanglingMirror { at: NodePath, referent: NodePath },
    #[error("{at}: forward mirror (referent {referent} does not precede it)")]
    ForwardMirror { at: NodePath, referent: NodePath },
    #[error("{at}: mirror referent {referent} is not a variable node")]
    MirrorOfNonVariable { at: NodePath, referent: NodePath },
    #[error("{at}: unresolvable connect target {target}")]
    UnresolvableConnect { at: NodePath, target: String },
    #[error("{at}: variable node has no choices")]
    NoChoices { at: NodePath },
    #[error("{at}: {reason}")]
    InvalidOp { at: NodePath, reason: String },
    #[error("C{cell}.B{block}: edge {edge} is out of range")]
    BadEdge { cell: usize, block: usize, edge: String },
    #[error("C{cell}.B{block}: block graph is cyclic")]
    CyclicBlock { cell: usize, block: usize },
    #[error("{at}: node is not reachable from any block input")]
    Unreachable { at: NodePath },
    #[error("C{cell}.B{block}: block has no nodes")]
    EmptyBlock { cell: usize, block: usize },
    #[error("structure output references unknown cell {0}")]
    BadOutputCell(usize),
    #[error("unknown builtin '{0}'")]
    UnknownBuiltin(String),
    #[error("encoding has {got} entries but the space has {expected} decision slots")]
    LengthMismatch { expected: usize, got: usize },
    #[error("slot {slot}: index {index} out of range for arity {arity}")]
    OutOfRange { slot: usize, index: usize, arity: usize },
    #[error("{at}: operation has no input tensor")]
    EmptyInput { at: String },
    #[error("decoded structure produces no output tensor")]
    EmptyOutput,
}

/// A decision point of the compiled space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub path: NodePath,
    pub arity: usize,
}

/// A validated space with its decision slots.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    spec: SpaceSpec,
    slots: Vec<Slot>,
    slot_of: HashMap<NodePath, usize>,
    size: BigUint,
    /// Per block (cell, block): topological order of its nodes.
    orders: Vec<Vec<Vec<usize>>>,
}

/// One choice index per decision slot.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArchitectureEncoding(pub Vec<usize>);

impl ArchitectureEncoding {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ArchitectureEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

impl SearchSpace {
    pub fn spec(&self) -> &SpaceSpec {
        &self.spec
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn arities(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.arity).collect()
    }

    pub fn size(&self) -> &BigUint {
        &self.size
    }

    /// Choices of decision slot `k`.
    pub fn choices(&self, k: usize) -> &[LayerOp] {
        match self.spec.node(self.slots[k].path) {
            Some(NodeSpec::Variable { choices, .. }) => choices,
            _ => unreachable!("slots always point at variable nodes"),
        }
    }

    pub fn check_encoding(&self, enc: &ArchitectureEncoding) -> Result<(), SpaceError> {
        if enc.len() != self.slots.len() {
            return Err(SpaceError::LengthMismatch { expected: self.slots.len(), got: enc.len() });
        }
        for (k, (&i, s)) in enc.0.iter().zip(&self.slots).enumerate() {
            if i >= s.arity {
                return Err(SpaceError::OutOfRange { slot: k, index: i, arity: s.arity });
            }
        }
        Ok(())
    }
}

/// Validate `spec` and enumerate its decision slots.
pub fn build_space(spec: SpaceSpec) -> Result<SearchSpace, SpaceError> {
    if spec.cells.is_empty() {
        return Err(SpaceError::NoCells);
    }
    let mut names = std::collections::HashSet::new();
    for i in &spec.inputs {
        if !names.insert(i.name.as_str()) {
            return Err(SpaceError::DuplicateInput(i.name.clone()));
        }
    }
    let mut slots = Vec::new();
    let mut orders = Vec::with_capacity(spec.cells.len());
    for (ci, cell) in spec.cells.iter().enumerate() {
        let mut cell_orders = Vec::with_capacity(cell.blocks.len());
        for (bi, block) in cell.blocks.iter().enumerate() {
            if block.nodes.is_empty() {
                return Err(SpaceError::EmptyBlock { cell: ci, block: bi });
            }
            for r in &block.inputs {
                check_ref(&spec, r, ci, bi, &format!("C{ci}.B{bi} input"))?;
            }
            for (ni, node) in block.nodes.iter().enumerate() {
                let at = NodePath::new(ci, bi, ni);
                match node {
                    NodeSpec::Variable { choices, .. } => {
                        if choices.is_empty() {
                            return Err(SpaceError::NoChoices { at });
                        }
                        for op in choices {
                            check_op(&spec, op, at)?;
                        }
                        slots.push(Slot { path: at, arity: choices.len() });
                    }
                    NodeSpec::Constant { op } => check_op(&spec, op, at)?,
                    NodeSpec::Mirror { of } => match spec.node(*of) {
                        None => return Err(SpaceError::DanglingMirror { at, referent: *of }),
                        Some(_) if *of >= at => return Err(SpaceError::ForwardMirror { at, referent: *of }),
                        Some(NodeSpec::Variable { .. }) => {}
                        Some(_) => return Err(SpaceError::MirrorOfNonVariable { at, referent: *of }),
                    },
                }
            }
            cell_orders.push(block_order(block, ci, bi)?);
        }
        orders.push(cell_orders);
    }
    for &c in &spec.output.cells {
        if c >= spec.cells.len() {
            return Err(SpaceError::BadOutputCell(c));
        }
    }
    let size = slots.iter().fold(BigUint::one(), |acc, s| acc * BigUint::from(s.arity));
    let slot_of = slots.iter().enumerate().map(|(k, s)| (s.path, k)).collect();
    Ok(SearchSpace { spec, slots, slot_of, size, orders })
}

/// Exact number of architectures (product of slot arities).
pub fn space_size(space: &SearchSpace) -> BigUint {
    space.size.clone()
}

fn check_ref(spec: &SpaceSpec, r: &TensorRef, ci: usize, bi: usize, at: &str) -> Result<(), SpaceError> {
    match r {
        TensorRef::Input { name } => {
            if spec.inputs.iter().any(|i| &i.name == name) {
                Ok(())
            } else {
                Err(SpaceError::UnknownInput { at: at.to_string(), name: name.clone() })
            }
        }
        TensorRef::CellOutput { cell } if *cell < ci => Ok(()),
        TensorRef::CellOutput { cell } => Err(SpaceError::ForwardCellRef { at: at.to_string(), cell: *cell }),
        TensorRef::Node { path } => {
            let precedes = path.cell < ci || (path.cell == ci && path.block < bi);
            if precedes && spec.node(*path).is_some() {
                Ok(())
            } else {
                Err(SpaceError::UnknownInput { at: at.to_string(), name: path.to_string() })
            }
        }
    }
}

fn check_op(spec: &SpaceSpec, op: &LayerOp, at: NodePath) -> Result<(), SpaceError> {
    op.check().map_err(|reason| SpaceError::InvalidOp { at, reason })?;
    if let LayerOp::Connect { sources } = op {
        for s in sources {
            check_ref(spec, s, at.cell, at.block, &at.to_string())
                .map_err(|_| SpaceError::UnresolvableConnect { at, target: s.to_string() })?;
        }
    }
    Ok(())
}

/// Topological order of a block's nodes (Kahn); also checks reachability.
fn block_order(block: &BlockSpec, ci: usize, bi: usize) -> Result<Vec<usize>, SpaceError> {
    let n = block.nodes.len();
    let Some(edges) = &block.edges else {
        return Ok((0..n).collect());
    };
    let mut indeg = vec![0usize; n];
    let mut fed_by_input = vec![false; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in edges {
        let bad = || SpaceError::BadEdge { cell: ci, block: bi, edge: format!("{:?} -> {}", e.from, e.to) };
        if e.to >= n {
            return Err(bad());
        }
        match e.from {
            EdgeEnd::Input(k) if k < block.inputs.len() => fed_by_input[e.to] = true,
            EdgeEnd::Node(j) if j < n => {
                succ[j].push(e.to);
                indeg[e.to] += 1;
            }
            _ => return Err(bad()),
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).rev().collect();
    let mut order = Vec::with_capacity(n);
    let mut reach = fed_by_input.clone();
    while let Some(i) = ready.pop() {
        order.push(i);
        for &j in &succ[i] {
            reach[j] |= reach[i];
            indeg[j] -= 1;
            if indeg[j] == 0 {
                ready.push(j);
            }
        }
    }
    if order.len() != n {
        return Err(SpaceError::CyclicBlock { cell: ci, block: bi });
    }
    for (i, r) in reach.iter().enumerate() {
        if !r {
            return Err(SpaceError::Unreachable { at: NodePath::new(ci, bi, i) });
        }
    }
    Ok(order)
}

/// Uniform independent sample of every slot.
pub fn sample_random(space: &SearchSpace, seed: u64) -> ArchitectureEncoding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_random_with(space, &mut rng)
}

pub fn sample_random_with(space: &SearchSpace, rng: &mut impl Rng) -> ArchitectureEncoding {
    ArchitectureEncoding(space.slots.iter().map(|s| rng.random_range(0..s.arity)).collect())
}

/// All encodings of a mixed-radix vector in lexicographic order.
pub fn enumerate(arities: &[usize]) -> impl Iterator<Item = Vec<usize>> + '_ {
    let total: Option<usize> = arities.iter().try_fold(1usize, |acc, &a| acc.checked_mul(a));
    let total = total.expect("space too large to enumerate");
    (0..total).map(move |mut idx| {
        let mut out = vec![0; arities.len()];
        for k in (0..arities.len()).rev() {
            out[k] = idx % arities[k];
            idx /= arities[k];
        }
        out
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphNodeKind {
    Input { name: String, dim: usize },
    Layer { op: LayerOp },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    #[serde(flatten)]
    pub kind: GraphNodeKind,
    pub inputs: Vec<usize>,
    /// Nodes with equal tags share one parameter block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<NodePath>,
    #[serde(default)]
    pub mirrored: bool,
}

/// A materialized skip connection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipEdge {
    pub origin: NodePath,
    pub sources: Vec<TensorRef>,
    pub tensor: usize,
}

/// Framework-neutral decoded architecture. Node ids are a topological order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchGraph {
    pub nodes: Vec<GraphNode>,
    pub output: usize,
    pub head: HeadSpec,
    #[serde(default)]
    pub skips: Vec<SkipEdge>,
}

impl ArchGraph {
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.nodes.iter().flat_map(|n| n.inputs.iter().map(move |&i| (i, n.id))).collect()
    }

    pub fn inputs(&self) -> Vec<(String, usize)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                GraphNodeKind::Input { name, dim } => Some((name.clone(), *dim)),
                _ => None,
            })
            .collect()
    }

    pub fn layer_nodes(&self) -> impl Iterator<Item = (&GraphNode, &LayerOp)> {
        self.nodes.iter().filter_map(|n| match &n.kind {
            GraphNodeKind::Layer { op } => Some((n, op)),
            _ => None,
        })
    }

    /// Kahn's algorithm over the edge list; `None` when a cycle exists.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg = vec![0; n];
        let mut succ = vec![Vec::new(); n];
        for (a, b) in self.edges() {
            if a >= n || b >= n {
                return None;
            }
            succ[a].push(b);
            indeg[b] += 1;
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.push(j);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Export<'a> {
            format: &'static str,
            version: u32,
            #[serde(flatten)]
            graph: &'a ArchGraph,
            edges: Vec<(usize, usize)>,
        }
        serde_json::to_string_pretty(&Export { format: "nas-arch-graph", version: 1, graph: self, edges: self.edges() })
            .expect("graph serializes")
    }
}

/// Incremental graph construction used by [`decode`] and the reference networks.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<GraphNode>,
    skips: Vec<SkipEdge>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str, dim: usize) -> usize {
        self.push(GraphNodeKind::Input { name: name.to_string(), dim }, vec![], None, None, false)
    }

    pub fn layer(&mut self, op: LayerOp, inputs: Vec<usize>, tag: Option<String>) -> usize {
        self.push(GraphNodeKind::Layer { op }, inputs, tag, None, false)
    }

    /// Merge several tensors with a Concatenate or Add node; a single tensor passes through.
    pub fn merge(&mut self, rule: MergeRule, parts: Vec<usize>) -> Option<usize> {
        match parts.len() {
            0 => None,
            1 => Some(parts[0]),
            _ => {
                let op = match rule {
                    MergeRule::Concatenate => LayerOp::Concatenate,
                    MergeRule::Add => LayerOp::Add,
                };
                Some(self.layer(op, parts, None))
            }
        }
    }

    fn push(
        &mut self,
        kind: GraphNodeKind,
        inputs: Vec<usize>,
        weight_tag: Option<String>,
        origin: Option<NodePath>,
        mirrored: bool,
    ) -> usize {
        let id = self.nodes.len();
        debug_assert!(inputs.iter().all(|&i| i < id));
        self.nodes.push(GraphNode { id, kind, inputs, weight_tag, origin, mirrored });
        id
    }

    pub fn finish(self, output: usize, head: HeadSpec) -> ArchGraph {
        ArchGraph { nodes: self.nodes, output, head, skips: self.skips }
    }
}

struct DecodeState<'a> {
    b: GraphBuilder,
    inputs: HashMap<&'a str, usize>,
    cell_outputs: Vec<Option<usize>>,
    node_values: HashMap<NodePath, Option<usize>>,
    chosen: HashMap<NodePath, (LayerOp, String)>,
}

impl DecodeState<'_> {
    fn resolve(&self, r: &TensorRef, at: &str) -> Result<Option<usize>, SpaceError> {
        let empty = || SpaceError::EmptyInput { at: at.to_string() };
        match r {
            TensorRef::Input { name } => Ok(Some(self.inputs[name.as_str()])),
            TensorRef::CellOutput { cell } => self.cell_outputs.get(*cell).copied().ok_or_else(empty),
            TensorRef::Node { path } => self.node_values.get(path).copied().ok_or_else(empty),
        }
    }

    fn apply(
        &mut self,
        op: &LayerOp,
        tag: String,
        path: NodePath,
        mirrored: bool,
        preds: Vec<usize>,
    ) -> Result<Option<usize>, SpaceError> {
        let at = path.to_string();
        match op {
            LayerOp::Identity => Ok(self.b.merge(MergeRule::Concatenate, preds)),
            LayerOp::Connect { sources } => {
                if sources.is_empty() {
                    return Ok(None);
                }
                let mut parts = Vec::with_capacity(sources.len());
                for s in sources {
                    if let Some(t) = self.resolve(s, &at)? {
                        parts.push(t);
                    }
                }
                let out = self.b.merge(MergeRule::Concatenate, parts);
                if let Some(t) = out {
                    self.b.skips.push(SkipEdge { origin: path, sources: sources.clone(), tensor: t });
                }
                Ok(out)
            }
            LayerOp::Add | LayerOp::Concatenate => {
                if preds.len() <= 1 {
                    return Ok(preds.first().copied());
                }
                Ok(Some(self.b.push(GraphNodeKind::Layer { op: op.clone() }, preds, None, Some(path), mirrored)))
            }
            _ => {
                if preds.is_empty() {
                    return Err(SpaceError::EmptyInput { at });
                }
                let x = self.b.merge(MergeRule::Concatenate, preds).expect("non-empty");
                let tag = op.has_weights().then_some(tag);
                Ok(Some(self.b.push(GraphNodeKind::Layer { op: op.clone() }, vec![x], tag, Some(path), mirrored)))
            }
        }
    }
}

/// Materialize the architecture selected by `encoding`.
pub fn decode(space: &SearchSpace, encoding: &ArchitectureEncoding) -> Result<ArchGraph, SpaceError> {
    space.check_encoding(encoding)?;
    let spec = &space.spec;
    let mut st = DecodeState {
        b: GraphBuilder::new(),
        inputs: HashMap::new(),
        cell_outputs: Vec::with_capacity(spec.cells.len()),
        node_values: HashMap::new(),
        chosen: HashMap::new(),
    };
    for i in &spec.inputs {
        let id = st.b.input(&i.name, i.dim);
        st.inputs.insert(i.name.as_str(), id);
    }
    for (ci, cell) in spec.cells.iter().enumerate() {
        let mut block_outs = Vec::new();
        for (bi, block) in cell.blocks.iter().enumerate() {
            let at = format!("C{ci}.B{bi}");
            let mut ins = Vec::with_capacity(block.inputs.len());
            for r in &block.inputs {
                ins.push(st.resolve(r, &at)?);
            }
            let n = block.nodes.len();
            let mut vals: Vec<Option<usize>> = vec![None; n];
            for &ni in &space.orders[ci][bi] {
                let path = NodePath::new(ci, bi, ni);
                let (op, tag, mirrored) = match &block.nodes[ni] {
                    NodeSpec::Variable { choices, .. } => {
                        let k = space.slot_of[&path];
                        (choices[encoding.0[k]].clone(), path.tag(), false)
                    }
                    NodeSpec::Constant { op } => (op.clone(), path.tag(), false),
                    NodeSpec::Mirror { of } => {
                        let (op, tag) = st.chosen[of].clone();
                        (op, tag, true)
                    }
                };
                st.chosen.insert(path, (op.clone(), tag.clone()));
                let preds: Vec<usize> = match &block.edges {
                    None if ni == 0 => ins.iter().flatten().copied().collect(),
                    None => vals[ni - 1].into_iter().collect(),
                    Some(edges) => edges
                        .iter()
                        .filter(|e| e.to == ni)
                        .filter_map(|e| match e.from {
                            EdgeEnd::Input(k) => ins[k],
                            EdgeEnd::Node(j) => vals[j],
                        })
                        .collect(),
                };
                let v = st.apply(&op, tag, path, mirrored, preds)?;
                vals[ni] = v;
                st.node_values.insert(path, v);
            }
            let sinks: Vec<usize> = match &block.edges {
                None => vec![n - 1],
                Some(edges) => (0..n).filter(|&i| !edges.iter().any(|e| e.from == EdgeEnd::Node(i))).collect(),
            };
            let outs: Vec<usize> = sinks.into_iter().filter_map(|i| vals[i]).collect();
            if let Some(o) = st.b.merge(MergeRule::Concatenate, outs) {
                block_outs.push(o);
            }
        }
        let out = st.b.merge(cell.output, block_outs);
        st.cell_outputs.push(out);
    }
    let finals: Vec<usize> = spec.output.cells.iter().filter_map(|&c| st.cell_outputs[c]).collect();
    let out = st.b.merge(spec.output.rule, finals).ok_or(SpaceError::EmptyOutput)?;
    Ok(st.b.finish(out, spec.head))
}

/// Recover the encoding from a decoded graph by reading back each slot's op.
pub fn read_encoding(space: &SearchSpace, graph: &ArchGraph) -> Option<ArchitectureEncoding> {
    let mut enc = Vec::with_capacity(space.num_slots());
    for (k, slot) in space.slots.iter().enumerate() {
        let choices = space.choices(k);
        let node_op = graph.layer_nodes().find(|(n, _)| n.origin == Some(slot.path) && !n.mirrored).map(|(_, op)| op.clone());
        let skip_op = graph.skips.iter().find(|s| s.origin == slot.path).map(|s| LayerOp::Connect { sources: s.sources.clone() });
        let op = node_op.or(skip_op);
        let idx = match op {
            Some(op) => choices.iter().position(|c| *c == op)?,
            None => choices.iter().position(|c| matches!(c, LayerOp::Identity) || *c == LayerOp::null())?,
        };
        enc.push(idx);
    }
    Some(ArchitectureEncoding(enc))
}

/// Names of the built-in search spaces.
pub const BUILTIN_SPACES: [&str; 5] = ["combo_small", "combo_large", "uno_small", "uno_large", "nt3_small"];

fn mlp_choices() -> Vec<LayerOp> {
    use Activation::*;
    vec![
        LayerOp::Identity,
        LayerOp::dense(100, Relu),
        LayerOp::dense(100, Tanh),
        LayerOp::dense(100, Sigmoid),
        LayerOp::Dropout { rate: 0.05 },
        LayerOp::dense(500, Relu),
        LayerOp::dense(500, Tanh),
        LayerOp::dense(500, Sigmoid),
        LayerOp::Dropout { rate: 0.1 },
        LayerOp::dense(1000, Relu),
        LayerOp::dense(1000, Tanh),
        LayerOp::dense(1000, Sigmoid),
        LayerOp::Dropout { rate: 0.2 },
    ]
}

fn mlp_block(inputs: Vec<TensorRef>, n: usize) -> BlockSpec {
    BlockSpec::chain(inputs, (0..n).map(|_| NodeSpec::named("MLP_Node", mlp_choices())).collect())
}

fn connect_block(input: TensorRef, options: Vec<Vec<TensorRef>>) -> BlockSpec {
    let choices = options.into_iter().map(|sources| LayerOp::Connect { sources }).collect();
    BlockSpec::chain(vec![input], vec![NodeSpec::named("Connect", choices)])
}

const COMBO_CELL: &str = "cell_expression";
const COMBO_DRUG1: &str = "drug1_descriptors";
const COMBO_DRUG2: &str = "drug2_descriptors";

fn combo_inputs() -> Vec<InputSpec> {
    vec![
        InputSpec { name: COMBO_CELL.into(), dim: 942 },
        InputSpec { name: COMBO_DRUG1.into(), dim: 3820 },
        InputSpec { name: COMBO_DRUG2.into(), dim: 3820 },
    ]
}

/// The nine skip options of the Combo connect node (index 0 is Null).
fn combo_connect_options() -> Vec<Vec<TensorRef>> {
    let (c, d1, d2) = (TensorRef::input(COMBO_CELL), TensorRef::input(COMBO_DRUG1), TensorRef::input(COMBO_DRUG2));
    vec![
        vec![],
        vec![c.clone()],
        vec![d1.clone()],
        vec![d2.clone()],
        vec![TensorRef::cell(0)],
        vec![c.clone(), d1.clone(), d2.clone()],
        vec![c.clone(), d1.clone()],
        vec![c, d2.clone()],
        vec![d1, d2],
    ]
}

fn combo_first_cell() -> CellSpec {
    let mirrors = (0..3).map(|n| NodeSpec::Mirror { of: NodePath::new(0, 1, n) }).collect();
    CellSpec {
        blocks: vec![
            mlp_block(vec![TensorRef::input(COMBO_CELL)], 3),
            mlp_block(vec![TensorRef::input(COMBO_DRUG1)], 3),
            BlockSpec::chain(vec![TensorRef::input(COMBO_DRUG2)], mirrors),
        ],
        output: MergeRule::Concatenate,
    }
}

fn combo(large: bool) -> SpaceSpec {
    let replicas = if large { 8 } else { 1 };
    let mut cells = vec![combo_first_cell()];
    for i in 1..=replicas {
        let mut options = combo_connect_options();
        options.extend((1..i).map(|j| vec![TensorRef::cell(j)]));
        cells.push(CellSpec {
            blocks: vec![mlp_block(vec![TensorRef::cell(i - 1)], 3), connect_block(TensorRef::cell(i - 1), options)],
            output: MergeRule::Concatenate,
        });
    }
    let last = cells.len();
    cells.push(CellSpec { blocks: vec![mlp_block(vec![TensorRef::cell(last - 1)], 3)], output: MergeRule::Concatenate });
    SpaceSpec {
        name: if large { "combo_large" } else { "combo_small" }.into(),
        inputs: combo_inputs(),
        output: StructureOutput { cells: (0..cells.len()).collect(), rule: MergeRule::Concatenate },
        cells,
        head: HeadSpec { units: 1, activation: Activation::Linear },
    }
}

const UNO_INPUTS: [(&str, usize); 4] =
    [("cell_rnaseq", 942), ("dose", 1), ("drug_descriptors", 5270), ("drug_fingerprints", 2048)];

fn uno_first_cell() -> CellSpec {
    CellSpec {
        blocks: UNO_INPUTS.iter().map(|(n, _)| mlp_block(vec![TensorRef::input(n)], 3)).collect(),
        output: MergeRule::Concatenate,
    }
}

fn uno(large: bool) -> SpaceSpec {
    let inputs: Vec<InputSpec> = UNO_INPUTS.iter().map(|(n, d)| InputSpec { name: n.to_string(), dim: *d }).collect();
    let mut cells = vec![uno_first_cell()];
    if !large {
        // N0 → N1 → N2 = Add(N1, N0) → N3 → N4 = Add(N3, N2)
        let e = |from, to| Edge { from, to };
        let edges = vec![
            e(EdgeEnd::Input(0), 0),
            e(EdgeEnd::Node(0), 1),
            e(EdgeEnd::Node(1), 2),
            e(EdgeEnd::Node(0), 2),
            e(EdgeEnd::Node(2), 3),
            e(EdgeEnd::Node(3), 4),
            e(EdgeEnd::Node(2), 4),
        ];
        let mlp = || NodeSpec::named("MLP_Node", mlp_choices());
        let add = || NodeSpec::Constant { op: LayerOp::Add };
        cells.push(CellSpec {
            blocks: vec![BlockSpec {
                inputs: vec![TensorRef::cell(0)],
                nodes: vec![mlp(), mlp(), add(), mlp(), add()],
                edges: Some(edges),
            }],
            output: MergeRule::Concatenate,
        });
    } else {
        let names: Vec<&str> = UNO_INPUTS.iter().map(|(n, _)| *n).collect();
        for i in 1..=8 {
            let mut options: Vec<Vec<TensorRef>> = vec![vec![]];
            for mask in 1u32..16 {
                options.push((0..4).filter(|b| mask & (1 << b) != 0).map(|b| TensorRef::input(names[b])).collect());
            }
            options.extend((0..i).map(|j| vec![TensorRef::cell(j)]));
            options.extend((1..i).map(|j| vec![TensorRef::Node { path: NodePath::new(j, 0, 0) }]));
            cells.push(CellSpec {
                blocks: vec![mlp_block(vec![TensorRef::cell(i - 1)], 1), connect_block(TensorRef::cell(i - 1), options)],
                output: MergeRule::Concatenate,
            });
        }
    }
    let last = cells.len() - 1;
    SpaceSpec {
        name: if large { "uno_large" } else { "uno_small" }.into(),
        inputs,
        cells,
        output: StructureOutput { cells: vec![last], rule: MergeRule::Concatenate },
        head: HeadSpec { units: 1, activation: Activation::Linear },
    }
}

fn nt3_small() -> SpaceSpec {
    use Activation::*;
    let conv = || {
        let mut c = vec![LayerOp::Identity];
        c.extend((3..=6).map(|k| LayerOp::Conv1D { filters: 8, kernel: k, stride: 1 }));
        NodeSpec::named("Conv_Node", c)
    };
    let act = || {
        let mut c = vec![LayerOp::Identity];
        c.extend([Relu, Tanh, Sigmoid].map(|function| LayerOp::Activation { function }));
        NodeSpec::named("Act_Node", c)
    };
    let pool = || {
        let mut c = vec![LayerOp::Identity];
        c.extend((3..=6).map(|size| LayerOp::MaxPooling1D { size }));
        NodeSpec::named("Pool_Node", c)
    };
    let dense = || {
        let mut c = vec![LayerOp::Identity];
        c.extend([10, 50, 100, 200, 250, 500, 750, 1000].map(|u| LayerOp::dense(u, Linear)));
        NodeSpec::named("Dense_Node", c)
    };
    let drop = || {
        let mut c = vec![LayerOp::Identity];
        c.extend([0.5, 0.4, 0.3, 0.2, 0.1, 0.05].map(|rate| LayerOp::Dropout { rate }));
        NodeSpec::named("Drop_Node", c)
    };
    let cell = |input: TensorRef, nodes: Vec<NodeSpec>| CellSpec { blocks: vec![BlockSpec::chain(vec![input], nodes)], output: MergeRule::Concatenate };
    SpaceSpec {
        name: "nt3_small".into(),
        inputs: vec![InputSpec { name: "rnaseq".into(), dim: 60483 }],
        cells: vec![
            cell(TensorRef::input("rnaseq"), vec![conv(), act(), pool()]),
            cell(TensorRef::cell(0), vec![conv(), act(), pool()]),
            cell(TensorRef::cell(1), vec![dense(), act(), drop()]),
            cell(TensorRef::cell(2), vec![dense(), act(), drop()]),
        ],
        output: StructureOutput { cells: vec![3], rule: MergeRule::Concatenate },
        head: HeadSpec { units: 2, activation: Softmax },
    }
}

/// One of the built-in spaces by name.
pub fn builtin_space(name: &str) -> Result<SpaceSpec, SpaceError> {
    match name {
        "combo_small" => Ok(combo(false)),
        "combo_large" => Ok(combo(true)),
        "uno_small" => Ok(uno(false)),
        "uno_large" => Ok(uno(true)),
        "nt3_small" => Ok(nt3_small()),
        other => Err(SpaceError::UnknownBuiltin(other.to_string())),
    }
}

/// Input dimensions of a reference network.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineDims {
    pub inputs: Vec<(String, usize)>,
    pub width: usize,
}

impl BaselineDims {
    pub fn published(name: &str) -> Result<Self, SpaceError> {
        let inputs = match name {
            "combo" => combo_inputs().into_iter().map(|i| (i.name, i.dim)).collect(),
            "uno" => UNO_INPUTS.iter().map(|(n, d)| (n.to_string(), *d)).collect(),
            "nt3" => vec![("rnaseq".to_string(), 60483)],
            other => return Err(SpaceError::UnknownBuiltin(other.to_string())),
        };
        Ok(Self { inputs, width: 1000 })
    }
}

/// The manually designed reference network at its published dimensions.
pub fn builtin_baseline(name: &str) -> Result<ArchGraph, SpaceError> {
    baseline_graph(name, &BaselineDims::published(name)?)
}

/// Reference network topology instantiated with custom input dimensions.
pub fn baseline_graph(name: &str, dims: &BaselineDims) -> Result<ArchGraph, SpaceError> {
    let mut b = GraphBuilder::new();
    let ids: Vec<usize> = dims.inputs.iter().map(|(n, d)| b.input(n, *d)).collect();
    let w = dims.width;
    let dense3 = |b: &mut GraphBuilder, x: usize, tag: &str| {
        (0..3).fold(x, |h, k| b.layer(LayerOp::dense(w, Activation::Relu), vec![h], Some(format!("{tag}.{k}"))))
    };
    let need = |n: usize| {
        if ids.len() == n {
            Ok(())
        } else {
            Err(SpaceError::UnknownInput { at: format!("{name} baseline"), name: format!("expected {n} inputs") })
        }
    };
    let out = match name {
        "combo" => {
            need(3)?;
            let cell = dense3(&mut b, ids[0], "cell");
            let d1 = dense3(&mut b, ids[1], "drug");
            let d2 = dense3(&mut b, ids[2], "drug");
            let cat = b.layer(LayerOp::Concatenate, vec![cell, d1, d2], None);
            dense3(&mut b, cat, "top")
        }
        "uno" => {
            need(4)?;
            let cell = dense3(&mut b, ids[0], "cell");
            let desc = dense3(&mut b, ids[2], "desc");
            let fp = dense3(&mut b, ids[3], "fp");
            let cat = b.layer(LayerOp::Concatenate, vec![cell, ids[1], desc, fp], None);
            dense3(&mut b, cat, "top")
        }
        "nt3" => {
            need(1)?;
            let relu = LayerOp::Activation { function: Activation::Relu };
            let c1 = b.layer(LayerOp::Conv1D { filters: 128, kernel: 20, stride: 1 }, vec![ids[0]], Some("conv1".into()));
            let a1 = b.layer(relu.clone(), vec![c1], None);
            let p1 = b.layer(LayerOp::MaxPooling1D { size: 1 }, vec![a1], None);
            let c2 = b.layer(LayerOp::Conv1D { filters: 128, kernel: 10, stride: 1 }, vec![p1], Some("conv2".into()));
            let a2 = b.layer(relu, vec![c2], None);
            let p2 = b.layer(LayerOp::MaxPooling1D { size: 10 }, vec![a2], None);
            let d1 = b.layer(LayerOp::dense(200, Activation::Relu), vec![p2], Some("dense1".into()));
            let r1 = b.layer(LayerOp::Dropout { rate: 0.1 }, vec![d1], None);
            let d2 = b.layer(LayerOp::dense(20, Activation::Relu), vec![r1], Some("dense2".into()));
            b.layer(LayerOp::Dropout { rate: 0.1 }, vec![d2], None)
        }
        other => return Err(SpaceError::UnknownBuiltin(other.to_string())),
    };
    let head = if name == "nt3" {
        HeadSpec { units: 2, activation: Activation::Softmax }
    } else {
        HeadSpec { units: 1, activation: Activation::Linear }
    };
    Ok(b.finish(out, head))
}

//! Reward estimation: decoded architectures compiled into trainable tensor
//! programs, a budgeted tabular training loop, dataset I/O and synthetic
//! reward landscapes for fast strategy experiments.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{AdamConfig, AdamState};
use crate::space::{Activation, ArchGraph, GraphNodeKind, LayerOp};
use crate::tape::{ConvGeom, PoolGeom, Tape, Var};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn loss(self) -> LossKind {
        match self {
            Task::Regression => LossKind::Mse,
            Task::Classification => LossKind::CrossEntropy,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Per-sample activation shape. Sequences are stored channel-last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Flat { width: usize },
    Seq { len: usize, channels: usize },
}

impl Shape {
    pub fn width(&self) -> usize {
        match *self {
            Shape::Flat { width } => width,
            Shape::Seq { len, channels } => len * channels,
        }
    }

    /// A flat vector is read as a single-channel sequence.
    fn as_seq(&self) -> (usize, usize) {
        match *self {
            Shape::Flat { width } => (width, 1),
            Shape::Seq { len, channels } => (len, channels),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Flat { width } => write!(f, "({width})"),
            Shape::Seq { len, channels } => write!(f, "({len}, {channels})"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: usize, detail: String },
    #[error("unsupported op at node {node}: {op}")]
    Unsupported { node: usize, op: String },
    #[error("no dimension supplied for input {0}")]
    MissingInput(String),
    #[error("graph contains a cycle")]
    Cyclic,
}

/// One trainable weight/bias pair. Weights are `rows × cols`, bias `1 × cols`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub tag: String,
    pub rows: usize,
    pub cols: usize,
    /// Receptive field used by the initializer (1 for dense layers).
    pub kernel: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols + self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StepOp {
    Input { slot: usize },
    Dense { param: usize, activation: Activation },
    Conv1d { param: usize, geom: ConvGeomDef },
    MaxPool1d { geom: PoolGeomDef },
    Dropout { rate: f64 },
    Activation { function: Activation },
    Concat,
    /// Elementwise sum; operands narrower than the widest get a linear projection.
    Add { projections: Vec<Option<usize>> },
}

/// Serializable mirror of [`ConvGeom`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeomDef {
    pub len: usize,
    pub channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl From<ConvGeomDef> for ConvGeom {
    fn from(g: ConvGeomDef) -> Self {
        ConvGeom { len: g.len, channels: g.channels, filters: g.filters, kernel: g.kernel, stride: g.stride }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeomDef {
    pub len: usize,
    pub channels: usize,
    pub size: usize,
}

impl From<PoolGeomDef> for PoolGeom {
    fn from(g: PoolGeomDef) -> Self {
        PoolGeom { len: g.len, channels: g.channels, size: g.size }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub op: StepOp,
    pub inputs: Vec<usize>,
    pub shape: Shape,
    /// Graph node this step came from; `None` for the output head.
    pub node: Option<usize>,
}

/// A topologically ordered, shape-checked program ready for training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorProgram {
    pub steps: Vec<Step>,
    pub params: Vec<ParamSpec>,
    pub inputs: Vec<(String, usize)>,
    pub output: usize,
    pub loss: LossKind,
}

/// Compile a decoded graph. `dims` supplies the width of every graph input by
/// name and overrides the dimension recorded in the graph.
pub fn compile(graph: &ArchGraph, dims: &[(String, usize)], task: Task) -> Result<TensorProgram, CompileError> {
    let order = graph.topological_order().ok_or(CompileError::Cyclic)?;
    // keep only ancestors of the output
    let mut live = vec![false; graph.nodes.len()];
    live[graph.output] = true;
    for &id in order.iter().rev() {
        if live[id] {
            for &i in &graph.nodes[id].inputs {
                live[i] = true;
            }
        }
    }
    let mut c = Compiler { steps: Vec::new(), params: Vec::new(), tags: HashMap::new(), inputs: Vec::new() };
    let mut step_of: HashMap<usize, usize> = HashMap::new();
    for &id in &order {
        if !live[id] {
            continue;
        }
        let node = &graph.nodes[id];
        let ins: Vec<usize> = node.inputs.iter().map(|i| step_of[i]).collect();
        let s = match &node.kind {
            GraphNodeKind::Input { name, .. } => {
                let dim = dims
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, d)| *d)
                    .ok_or_else(|| CompileError::MissingInput(name.clone()))?;
                let slot = c.inputs.len();
                c.inputs.push((name.clone(), dim));
                c.push(StepOp::Input { slot }, vec![], Shape::Flat { width: dim }, Some(id))
            }
            GraphNodeKind::Layer { op } => c.layer(id, op, ins, node.weight_tag.as_deref())?,
        };
        step_of.insert(id, s);
    }
    let body = step_of[&graph.output];
    let width = c.steps[body].shape.width();
    let param = c.param("head", width, graph.head.units, 1, usize::MAX)?;
    let output = c.push(
        StepOp::Dense { param, activation: Activation::Linear },
        vec![body],
        Shape::Flat { width: graph.head.units },
        None,
    );
    Ok(TensorProgram { steps: c.steps, params: c.params, inputs: c.inputs, output, loss: task.loss() })
}

struct Compiler {
    steps: Vec<Step>,
    params: Vec<ParamSpec>,
    tags: HashMap<String, usize>,
    inputs: Vec<(String, usize)>,
}

impl Compiler {
    fn push(&mut self, op: StepOp, inputs: Vec<usize>, shape: Shape, node: Option<usize>) -> usize {
        self.steps.push(Step { op, inputs, shape, node });
        self.steps.len() - 1
    }

    fn param(&mut self, tag: &str, rows: usize, cols: usize, kernel: usize, node: usize) -> Result<usize, CompileError> {
        if let Some(&p) = self.tags.get(tag) {
            let spec = &self.params[p];
            if (spec.rows, spec.cols, spec.kernel) != (rows, cols, kernel) {
                return Err(CompileError::Shape {
                    node,
                    detail: format!(
                        "shared weights {tag} are {}x{} but this use needs {rows}x{cols}",
                        spec.rows, spec.cols
                    ),
                });
            }
            return Ok(p);
        }
        self.params.push(ParamSpec { tag: tag.to_string(), rows, cols, kernel });
        let p = self.params.len() - 1;
        self.tags.insert(tag.to_string(), p);
        Ok(p)
    }

    fn fresh_tag(&self, node: usize, suffix: &str) -> String {
        format!("node{node}.{suffix}")
    }

    fn layer(&mut self, id: usize, op: &LayerOp, ins: Vec<usize>, tag: Option<&str>) -> Result<usize, CompileError> {
        let shape_of = |s: &Self, i: usize| s.steps[i].shape;
        let single = |ins: &[usize]| -> Result<usize, CompileError> {
            match ins {
                [x] => Ok(*x),
                _ => Err(CompileError::Shape { node: id, detail: format!("expected one input, got {}", ins.len()) }),
            }
        };
        let own_tag = tag.map(str::to_string).unwrap_or_else(|| self.fresh_tag(id, "w"));
        match op {
            LayerOp::Identity => single(&ins),
            LayerOp::Dense { units, activation } => {
                let x = single(&ins)?;
                let w = shape_of(self, x).width();
                let param = self.param(&own_tag, w, *units, 1, id)?;
                Ok(self.push(StepOp::Dense { param, activation: *activation }, vec![x], Shape::Flat { width: *units }, Some(id)))
            }
            LayerOp::Conv1D { filters, kernel, stride } => {
                let x = single(&ins)?;
                let (len, channels) = shape_of(self, x).as_seq();
                let geom = ConvGeom { len, channels, filters: *filters, kernel: *kernel, stride: *stride };
                let out = geom.out_len();
                if out == 0 {
                    return Err(CompileError::Shape {
                        node: id,
                        detail: format!("kernel {kernel} longer than sequence of length {len}"),
                    });
                }
                let param = self.param(&own_tag, kernel * channels, *filters, *kernel, id)?;
                let def = ConvGeomDef { len, channels, filters: *filters, kernel: *kernel, stride: *stride };
                Ok(self.push(StepOp::Conv1d { param, geom: def }, vec![x], Shape::Seq { len: out, channels: *filters }, Some(id)))
            }
            LayerOp::MaxPooling1D { size } => {
                let x = single(&ins)?;
                let (len, channels) = shape_of(self, x).as_seq();
                if len / size == 0 {
                    return Err(CompileError::Shape {
                        node: id,
                        detail: format!("pool size {size} larger than sequence of length {len}"),
                    });
                }
                let geom = PoolGeomDef { len, channels, size: *size };
                Ok(self.push(StepOp::MaxPool1d { geom }, vec![x], Shape::Seq { len: len / size, channels }, Some(id)))
            }
            LayerOp::Dropout { rate } => {
                let x = single(&ins)?;
                let s = shape_of(self, x);
                Ok(self.push(StepOp::Dropout { rate: *rate }, vec![x], s, Some(id)))
            }
            LayerOp::Activation { function } => {
                let x = single(&ins)?;
                let s = shape_of(self, x);
                Ok(self.push(StepOp::Activation { function: *function }, vec![x], s, Some(id)))
            }
            LayerOp::Concatenate => {
                if ins.len() == 1 {
                    return Ok(ins[0]);
                }
                let width = ins.iter().map(|&i| shape_of(self, i).width()).sum();
                Ok(self.push(StepOp::Concat, ins, Shape::Flat { width }, Some(id)))
            }
            LayerOp::Add => {
                if ins.len() == 1 {
                    return Ok(ins[0]);
                }
                let shapes: Vec<Shape> = ins.iter().map(|&i| shape_of(self, i)).collect();
                if shapes.iter().all(|s| *s == shapes[0]) {
                    let projections = vec![None; ins.len()];
                    return Ok(self.push(StepOp::Add { projections }, ins, shapes[0], Some(id)));
                }
                let widest = shapes.iter().map(Shape::width).max().unwrap_or(0);
                let mut projections = Vec::with_capacity(ins.len());
                for (k, s) in shapes.iter().enumerate() {
                    if s.width() == widest {
                        projections.push(None);
                    } else {
                        let t = self.fresh_tag(id, &format!("proj{k}"));
                        projections.push(Some(self.param(&t, s.width(), widest, 1, id)?));
                    }
                }
                Ok(self.push(StepOp::Add { projections }, ins, Shape::Flat { width: widest }, Some(id)))
            }
            LayerOp::Connect { .. } => Err(CompileError::Unsupported { node: id, op: op.to_string() }),
        }
    }
}

impl TensorProgram {
    pub fn output_shape(&self) -> Shape {
        self.steps[self.output].shape
    }

    /// Forward FLOPs for a single sample (multiply-add counted as two).
    pub fn flops_per_sample(&self) -> f64 {
        let mut total = 0.0;
        for s in &self.steps {
            let w = s.shape.width() as f64;
            total += match &s.op {
                StepOp::Input { .. } | StepOp::Concat => 0.0,
                StepOp::Dense { param, .. } => {
                    let p = &self.params[*param];
                    2.0 * (p.rows * p.cols) as f64 + 2.0 * w
                }
                StepOp::Conv1d { param, .. } => {
                    let p = &self.params[*param];
                    2.0 * (p.rows as f64) * w + w
                }
                StepOp::MaxPool1d { geom } => (geom.len * geom.channels) as f64,
                StepOp::Dropout { .. } | StepOp::Activation { .. } => w,
                StepOp::Add { projections } => {
                    let proj: f64 = projections
                        .iter()
                        .flatten()
                        .map(|&p| 2.0 * (self.params[p].rows * self.params[p].cols) as f64 + w)
                        .sum();
                    proj + w * projections.len() as f64
                }
            };
        }
        total
    }

    /// Per-step description with resolved shapes and parameter counts. A
    /// shared block is attributed to the first step that uses it.
    pub fn summary(&self) -> ProgramSummary {
        let mut seen = vec![false; self.params.len()];
        let mut layers = Vec::with_capacity(self.steps.len());
        for (i, s) in self.steps.iter().enumerate() {
            let mut owned = 0;
            let mut shared = Vec::new();
            let used: Vec<usize> = match &s.op {
                StepOp::Dense { param, .. } | StepOp::Conv1d { param, .. } => vec![*param],
                StepOp::Add { projections } => projections.iter().flatten().copied().collect(),
                _ => vec![],
            };
            for p in used {
                if seen[p] {
                    shared.push(self.params[p].tag.clone());
                } else {
                    seen[p] = true;
                    owned += self.params[p].len();
                }
            }
            layers.push(LayerSummary {
                step: i,
                node: s.node,
                op: step_label(&s.op, self),
                inputs: s.inputs.clone(),
                shape: s.shape,
                params: owned,
                shares: shared,
            });
        }
        ProgramSummary {
            format: "nas-program-summary".into(),
            version: 1,
            loss: self.loss,
            inputs: self.inputs.clone(),
            total_params: count_params(self),
            flops_per_sample: self.flops_per_sample(),
            layers,
        }
    }

    /// Run the program on one batch. `inputs` are tape variables in the
    /// order of [`TensorProgram::inputs`]; `params` holds one (weight, bias)
    /// pair per parameter block. Dropout is active only when `dropout` is set.
    pub fn forward(&self, tape: &mut Tape, params: &[(Var, Var)], inputs: &[Var], mut dropout: Option<&mut ChaCha8Rng>) -> Var {
        let mut vals: Vec<Var> = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let v = match &s.op {
                StepOp::Input { slot } => inputs[*slot],
                StepOp::Dense { param, activation } => {
                    let (w, b) = params[*param];
                    let h = tape.matmul(vals[s.inputs[0]], w);
                    let h = tape.add_bias(h, b);
                    activate(tape, h, *activation)
                }
                StepOp::Conv1d { param, geom } => {
                    let (w, b) = params[*param];
                    tape.conv1d(vals[s.inputs[0]], w, b, (*geom).into())
                }
                StepOp::MaxPool1d { geom } => tape.max_pool1d(vals[s.inputs[0]], (*geom).into()),
                StepOp::Dropout { rate } => {
                    let x = vals[s.inputs[0]];
                    match dropout.as_deref_mut() {
                        Some(rng) => {
                            let xv = tape.value(x);
                            let keep = 1.0 - rate;
                            let data = (0..xv.len()).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                            let mask = tape.constant(Matrix::from_vec(xv.rows, xv.cols, data));
                            tape.mul(x, mask)
                        }
                        None => x,
                    }
                }
                StepOp::Activation { function } => activate(tape, vals[s.inputs[0]], *function),
                StepOp::Concat => {
                    let parts: Vec<Var> = s.inputs.iter().map(|&i| vals[i]).collect();
                    tape.concat_cols(&parts)
                }
                StepOp::Add { projections } => {
                    let mut acc: Option<Var> = None;
                    for (k, p) in projections.iter().enumerate() {
                        let mut t = vals[s.inputs[k]];
                        if let Some(p) = p {
                            let (w, b) = params[*p];
                            t = tape.matmul(t, w);
                            t = tape.add_bias(t, b);
                        }
                        acc = Some(match acc {
                            None => t,
                            Some(a) => tape.add(a, t),
                        });
                    }
                    acc.expect("add has operands")
                }
            };
            vals.push(v);
        }
        vals[self.output]
    }
}

fn step_label(op: &StepOp, prog: &TensorProgram) -> String {
    match op {
        StepOp::Input { slot } => format!("input({})", prog.inputs[*slot].0),
        StepOp::Dense { param, activation } => format!("dense({}, {activation})", prog.params[*param].cols),
        StepOp::Conv1d { geom, .. } => format!("conv1d({}, {}, {})", geom.filters, geom.kernel, geom.stride),
        StepOp::MaxPool1d { geom } => format!("max_pooling1d({})", geom.size),
        StepOp::Dropout { rate } => format!("dropout({rate})"),
        StepOp::Activation { function } => format!("activation({function})"),
        StepOp::Concat => "concatenate".into(),
        StepOp::Add { .. } => "add".into(),
    }
}

fn activate(tape: &mut Tape, x: Var, a: Activation) -> Var {
    match a {
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Linear => x,
        Activation::Softmax => tape.softmax(x),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub step: usize,
    pub node: Option<usize>,
    pub op: String,
    pub inputs: Vec<usize>,
    pub shape: Shape,
    pub params: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shares: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramSummary {
    pub format: String,
    pub version: u32,
    pub loss: LossKind,
    pub inputs: Vec<(String, usize)>,
    pub total_params: usize,
    pub flops_per_sample: f64,
    pub layers: Vec<LayerSummary>,
}

/// Trainable parameter count; shared blocks are counted once.
pub fn count_params(program: &TensorProgram) -> usize {
    program.params.iter().map(ParamSpec::len).sum()
}

/// Concrete values for every parameter block of a program.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub blocks: Vec<(Matrix, Matrix)>,
}

impl ParamStore {
    /// Glorot-uniform weights, zero biases.
    pub fn init(program: &TensorProgram, rng: &mut impl Rng) -> Self {
        let blocks = program
            .params
            .iter()
            .map(|p| {
                let limit = (6.0 / (p.rows + p.cols * p.kernel) as f64).sqrt();
                let data = (0..p.rows * p.cols).map(|_| rng.random_range(-limit..=limit)).collect();
                (Matrix::from_vec(p.rows, p.cols, data), Matrix::zeros(1, p.cols))
            })
            .collect();
        Self { blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (w, b) in &self.blocks {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(&b.data);
        }
        out
    }

    pub fn on_tape(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.blocks.iter().map(|(w, b)| (tape.param(w.clone()), tape.param(b.clone()))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityBudget {
    pub epochs: usize,
    pub subset_fraction: f64,
    /// Seconds; `None` trains to completion.
    pub timeout: Option<f64>,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for FidelityBudget {
    fn default() -> Self {
        Self { epochs: 1, subset_fraction: 1.0, timeout: None, batch_size: 32, learning_rate: 1e-3 }
    }
}

/// Simulated training time: `overhead + training FLOPs / flops_per_second`,
/// where one training sample costs three forward passes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub flops_per_second: f64,
    #[serde(default)]
    pub overhead: f64,
}

impl CostModel {
    pub fn batch_seconds(&self, program: &TensorProgram, rows: usize) -> f64 {
        3.0 * program.flops_per_sample() * rows as f64 / self.flops_per_second
    }

    /// Cost of a full training run under `budget` with `train_rows` rows available.
    pub fn training_seconds(&self, program: &TensorProgram, train_rows: usize, budget: &FidelityBudget) -> f64 {
        let n = subset_size(train_rows, budget.subset_fraction);
        self.overhead + budget.epochs as f64 * self.batch_seconds(program, n)
    }
}

/// Where training durations come from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Clock {
    Wall,
    Model(CostModel),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStatus {
    Ok,
    Timeout,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub status: EvalStatus,
    pub reward: f64,
    /// Validation R² (unclamped) or accuracy; NaN when training did not finish.
    pub metric: f64,
    pub duration: f64,
    pub params: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("{file}: line {line}: {reason}")]
    Csv { file: PathBuf, line: u64, reason: String },
    #[error("group {group} has {got} rows, expected {expected}")]
    RowMismatch { group: String, expected: usize, got: usize },
    #[error("dataset has no group named {0}")]
    UnknownGroup(String),
    #[error("group {group} has {got} columns, program expects {expected}")]
    DimMismatch { group: String, expected: usize, got: usize },
    #[error("dataset is empty or has no validation rows")]
    Empty,
    #[error("unknown dataset preset {0}")]
    UnknownPreset(String),
}

/// In-memory tabular dataset. The first `train_rows` rows are the training
/// split, the remainder is validation.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    pub name: String,
    pub task: Task,
    pub groups: Vec<(String, Matrix)>,
    pub output: Matrix,
    pub train_rows: usize,
}

impl TabularDataset {
    pub fn rows(&self) -> usize {
        self.output.rows
    }

    pub fn validation_rows(&self) -> usize {
        self.rows() - self.train_rows
    }

    pub fn group(&self, name: &str) -> Option<&Matrix> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn dims(&self) -> Vec<(String, usize)> {
        self.groups.iter().map(|(n, m)| (n.clone(), m.cols)).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.output.rows;
        for (name, m) in &self.groups {
            if m.rows != n {
                return Err(DataError::RowMismatch { group: name.clone(), expected: n, got: m.rows });
            }
        }
        if n == 0 || self.train_rows == 0 || self.train_rows >= n {
            return Err(DataError::Empty);
        }
        Ok(())
    }

    fn bind(&self, program: &TensorProgram) -> Result<Vec<&Matrix>, DataError> {
        program
            .inputs
            .iter()
            .map(|(name, dim)| {
                let m = self.group(name).ok_or_else(|| DataError::UnknownGroup(name.clone()))?;
                if m.cols != *dim {
                    return Err(DataError::DimMismatch { group: name.clone(), expected: *dim, got: m.cols });
                }
                Ok(m)
            })
            .collect()
    }
}

fn subset_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1))
}

fn batch_loss(tape: &mut Tape, loss: LossKind, out: Var, target: &Matrix) -> Var {
    match loss {
        LossKind::Mse => {
            let y = tape.constant(target.clone());
            let d = tape.sub(out, y);
            let sq = tape.square(d);
            tape.mean(sq)
        }
        LossKind::CrossEntropy => {
            let labels: Vec<usize> = target.data.iter().map(|&v| v as usize).collect();
            let ls = tape.log_softmax(out);
            let picked = tape.pick_cols(ls, &labels);
            let m = tape.mean(picked);
            tape.scale(m, -1.0)
        }
    }
}

/// Train a fresh program and return the report plus the final weights.
pub fn train(
    program: &TensorProgram,
    dataset: &TabularDataset,
    budget: &FidelityBudget,
    seed: u64,
    clock: &Clock,
) -> Result<(TrainReport, ParamStore), DataError> {
    dataset.validate()?;
    let groups = dataset.bind(program)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::init(program, &mut rng);
    let params = count_params(program);
    let mut adam: Vec<(AdamState, AdamState)> = store
        .blocks
        .iter()
        .map(|(w, b)| {
            let cfg = AdamConfig::with_lr(budget.learning_rate);
            (AdamState::new(w.len(), cfg), AdamState::new(b.len(), cfg))
        })
        .collect();

    let mut idx: Vec<usize> = (0..dataset.train_rows).collect();
    idx.shuffle(&mut rng);
    idx.truncate(subset_size(dataset.train_rows, budget.subset_fraction));

    let start = Instant::now();
    let mut elapsed = match clock {
        Clock::Model(m) => m.overhead,
        Clock::Wall => 0.0,
    };
    let mut epoch_losses = Vec::with_capacity(budget.epochs);
    let batch = budget.batch_size.max(1);
    let abort = |status: EvalStatus, duration: f64, epoch_losses: Vec<f64>| TrainReport {
        status,
        reward: -1.0,
        metric: f64::NAN,
        duration,
        params,
        epoch_losses,
    };
    for _ in 0..budget.epochs {
        idx.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in idx.chunks(batch) {
            match clock {
                Clock::Model(m) => {
                    let cost = m.batch_seconds(program, chunk.len());
                    if let Some(t) = budget.timeout {
                        if elapsed + cost > t {
                            return Ok((abort(EvalStatus::Timeout, t, epoch_losses), store));
                        }
                    }
                    elapsed += cost;
                }
                Clock::Wall => {
                    if let Some(t) = budget.timeout {
                        if start.elapsed().as_secs_f64() > t {
                            return Ok((abort(EvalStatus::Timeout, t, epoch_losses), store));
                        }
                    }
                }
            }
            let mut tape = Tape::new();
            let pv = store.on_tape(&mut tape);
            let xs: Vec<Var> = groups.iter().map(|g| tape.constant(g.select_rows(chunk))).collect();
            let out = program.forward(&mut tape, &pv, &xs, Some(&mut rng));
            let target = dataset.output.select_rows(chunk);
            let loss = batch_loss(&mut tape, program.loss, out, &target);
            let lv = tape.value(loss).scalar_value();
            if !lv.is_finite() {
                let d = wall_or(clock, start, elapsed);
                return Ok((abort(EvalStatus::Failed, d, epoch_losses), store));
            }
            sum += lv;
            count += 1;
            let mut grads = tape.backward(loss);
            for (k, &(wv, bv)) in pv.iter().enumerate() {
                let (w, b) = &mut store.blocks[k];
                if let Some(g) = grads.take(wv) {
                    adam[k].0.update(&mut w.data, &g.data);
                }
                if let Some(g) = grads.take(bv) {
                    adam[k].1.update(&mut b.data, &g.data);
                }
            }
        }
        epoch_losses.push(sum / count.max(1) as f64);
    }

    let val: Vec<usize> = (dataset.train_rows..dataset.rows()).collect();
    let pred = predict(program, &store, dataset, &val)?;
    let truth = dataset.output.select_rows(&val);
    let metric = match program.loss {
        LossKind::Mse => r_squared(&pred, &truth),
        LossKind::CrossEntropy => accuracy(&pred, &truth),
    };
    let duration = wall_or(clock, start, elapsed);
    let report = if metric.is_finite() && pred.all_finite() {
        let reward = match program.loss {
            LossKind::Mse => metric.clamp(-1.0, 1.0),
            LossKind::CrossEntropy => metric,
        };
        TrainReport { status: EvalStatus::Ok, reward, metric, duration, params, epoch_losses }
    } else {
        abort(EvalStatus::Failed, duration, epoch_losses)
    };
    Ok((report, store))
}

fn wall_or(clock: &Clock, start: Instant, modeled: f64) -> f64 {
    match clock {
        Clock::Wall => start.elapsed().as_secs_f64(),
        Clock::Model(_) => modeled,
    }
}

/// Train under the budget and report reward, duration, size and status.
pub fn train_and_score(
    program: &TensorProgram,
    dataset: &TabularDataset,
    budget: &FidelityBudget,
    seed: u64,
    clock: &Clock,
) -> Result<TrainReport, DataError> {
    train(program, dataset, budget, seed, clock).map(|(r, _)| r)
}

/// Raw program outputs (logits for classification) on the given rows.
pub fn predict(program: &TensorProgram, store: &ParamStore, dataset: &TabularDataset, rows: &[usize]) -> Result<Matrix, DataError> {
    let groups = dataset.bind(program)?;
    let units = program.output_shape().width();
    let mut out = Matrix::zeros(rows.len(), units);
    for (c, chunk) in rows.chunks(256).enumerate() {
        let mut tape = Tape::new();
        let pv: Vec<(Var, Var)> =
            store.blocks.iter().map(|(w, b)| (tape.constant(w.clone()), tape.constant(b.clone()))).collect();
        let xs: Vec<Var> = groups.iter().map(|g| tape.constant(g.select_rows(chunk))).collect();
        let y = program.forward(&mut tape, &pv, &xs, None);
        let yv = tape.value(y);
        out.data[c * 256 * units..(c * 256 + chunk.len()) * units].copy_from_slice(&yv.data);
    }
    Ok(out)
}

/// Mean training loss over the whole training split, without dropout.
pub fn training_loss(program: &TensorProgram, store: &ParamStore, dataset: &TabularDataset) -> Result<f64, DataError> {
    let rows: Vec<usize> = (0..dataset.train_rows).collect();
    let pred = predict(program, store, dataset, &rows)?;
    let truth = dataset.output.select_rows(&rows);
    let mut tape = Tape::new();
    let p = tape.constant(pred);
    let l = batch_loss(&mut tape, program.loss, p, &truth);
    Ok(tape.value(l).scalar_value())
}

/// `1 − SS_res / SS_tot`, pooled over output columns. A constant target
/// gives 0 unless the prediction is exact.
pub fn r_squared(pred: &Matrix, truth: &Matrix) -> f64 {
    assert_eq!((pred.rows, pred.cols), (truth.rows, truth.cols));
    let (n, k) = (truth.rows, truth.cols);
    if n == 0 {
        return f64::NAN;
    }
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for c in 0..k {
        let mean = (0..n).map(|r| truth.get(r, c)).sum::<f64>() / n as f64;
        for r in 0..n {
            let y = truth.get(r, c);
            ss_res += (y - pred.get(r, c)).powi(2);
            ss_tot += (y - mean).powi(2);
        }
    }
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Fraction of rows whose arg-max column equals the integer label.
pub fn accuracy(logits: &Matrix, labels: &Matrix) -> f64 {
    if logits.rows == 0 {
        return f64::NAN;
    }
    let hits = (0..logits.rows)
        .filter(|&r| {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == labels.get(r, 0) as usize
        })
        .count();
    hits as f64 / logits.rows as f64
}

// --- dataset files ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestInput {
    pub name: String,
    pub file: String,
}

/// JSON manifest naming one CSV per input group plus the output CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub task: Task,
    pub inputs: Vec<ManifestInput>,
    pub output: String,
    pub validation_fraction: f64,
}

fn read_csv(path: &Path) -> Result<Matrix, DataError> {
    let file = path.to_path_buf();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| DataError::Io { path: file.clone(), source: std::io::Error::other(e.to_string()) })?;
    let cols = rdr
        .headers()
        .map_err(|e| DataError::Csv { file: file.clone(), line: 1, reason: e.to_string() })?
        .len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            DataError::Csv { file: file.clone(), line, reason: e.to_string() }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != cols {
            return Err(DataError::Csv { file, line, reason: format!("expected {cols} fields, found {}", rec.len()) });
        }
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| DataError::Csv {
                file: file.clone(),
                line,
                reason: format!("not a number: {field:?}"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

fn write_csv(path: &Path, prefix: &str, m: &Matrix) -> Result<(), DataError> {
    let io = |e: csv::Error| DataError::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let header: Vec<String> = if m.cols == 1 { vec![prefix.to_string()] } else { (0..m.cols).map(|j| format!("{prefix}_{j}")).collect() };
    w.write_record(&header).map_err(io)?;
    for r in 0..m.rows {
        w.write_record(m.row(r).iter().map(|v| format!("{v:.6}"))).map_err(io)?;
    }
    w.flush().map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })
}

/// Load and validate a dataset from its manifest. CSV paths are relative to
/// the manifest's directory.
pub fn load_dataset(manifest: &Path) -> Result<TabularDataset, DataError> {
    let text = fs::read_to_string(manifest).map_err(|e| DataError::Io { path: manifest.to_path_buf(), source: e })?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| DataError::Manifest { path: manifest.to_path_buf(), reason: e.to_string() })?;
    if !(0.0..1.0).contains(&m.validation_fraction) {
        return Err(DataError::Manifest {
            path: manifest.to_path_buf(),
            reason: format!("validation_fraction {} outside [0, 1)", m.validation_fraction),
        });
    }
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut groups = Vec::with_capacity(m.inputs.len());
    for g in &m.inputs {
        if groups.iter().any(|(n, _): &(String, Matrix)| n == &g.name) {
            return Err(DataError::Manifest { path: manifest.to_path_buf(), reason: format!("duplicate group {}", g.name) });
        }
        groups.push((g.name.clone(), read_csv(&dir.join(&g.file))?));
    }
    let output = read_csv(&dir.join(&m.output))?;
    let n = output.rows;
    let val = (n as f64 * m.validation_fraction).round() as usize;
    let ds = TabularDataset { name: m.name, task: m.task, groups, output, train_rows: n.saturating_sub(val) };
    ds.validate()?;
    Ok(ds)
}

/// Write `dataset` as CSV files plus `manifest.json` into `dir`.
pub fn write_dataset(dataset: &TabularDataset, dir: &Path) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.to_path_buf(), source: e })?;
    let mut inputs = Vec::new();
    for (name, m) in &dataset.groups {
        let file = format!("{name}.csv");
        write_csv(&dir.join(&file), name, m)?;
        inputs.push(ManifestInput { name: name.clone(), file });
    }
    let out_name = match dataset.task {
        Task::Regression => "response",
        Task::Classification => "label",
    };
    write_csv(&dir.join(format!("{out_name}.csv")), out_name, &dataset.output)?;
    let manifest = Manifest {
        name: dataset.name.clone(),
        task: dataset.task,
        inputs,
        output: format!("{out_name}.csv"),
        validation_fraction: dataset.validation_rows() as f64 / dataset.rows() as f64,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| DataError::Io { path: path.clone(), source: e })?;
    Ok(path)
}

// --- generator ---------------------------------------------------------------

pub const DATASET_PRESETS: [&str; 3] = ["combo-mini", "uno-mini", "nt3-mini"];

/// Shape of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetShape {
    pub name: String,
    pub task: Task,
    pub groups: Vec<(String, usize)>,
    pub rows: usize,
    pub validation_fraction: f64,
}

pub fn preset_shape(preset: &str) -> Result<PresetShape, DataError> {
    let g = |v: &[(&str, usize)]| v.iter().map(|(n, d)| (n.to_string(), *d)).collect();
    let (task, groups, rows) = match preset {
        "combo-mini" => (
            Task::Regression,
            g(&[("cell_expression", 8), ("drug1_descriptors", 16), ("drug2_descriptors", 16)]),
            2000,
        ),
        "uno-mini" => (
            Task::Regression,
            g(&[("cell_rnaseq", 8), ("dose", 1), ("drug_descriptors", 16), ("drug_fingerprints", 8)]),
            2000,
        ),
        "nt3-mini" => (Task::Classification, g(&[("rnaseq", 64)]), 1000),
        other => return Err(DataError::UnknownPreset(other.to_string())),
    };
    Ok(PresetShape { name: preset.to_string(), task, groups, rows, validation_fraction: 0.2 })
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect();
    Matrix::from_vec(rows, cols, data)
}

fn standardize(y: &mut [f64]) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    y.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

/// Seeded synthetic dataset shaped like one of the presets. Both drug groups
/// of `combo-mini` pass through the same response map, so the target is
/// symmetric in the two drugs.
pub fn generate_dataset(preset: &str, seed: u64) -> Result<TabularDataset, DataError> {
    let shape = preset_shape(preset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.rows;
    let k = 4;
    let (groups, output) = match preset {
        "combo-mini" => {
            let wc = normal_matrix(&mut rng, 8, k, 1.0 / 8f64.sqrt());
            let wd = normal_matrix(&mut rng, 16, k, 1.0 / 16f64.sqrt());
            let cell = normal_matrix(&mut rng, n, 8, 1.0);
            let d1 = normal_matrix(&mut rng, n, 16, 1.0);
            let d2 = normal_matrix(&mut rng, n, 16, 1.0);
            let (u, v1, v2) = (crate::tensor::matmul(&cell, &wc), crate::tensor::matmul(&d1, &wd), crate::tensor::matmul(&d2, &wd));
            let mut y: Vec<f64> = (0..n)
                .map(|r| {
                    let mut s = 0.0;
                    for j in 0..k {
                        s += (u.get(r, j) + v1.get(r, j)).tanh() + (u.get(r, j) + v2.get(r, j)).tanh();
                    }
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    s + 0.05 * noise
                })
                .collect();
            standardize(&mut y);
            let names: Vec<String> = shape.groups.iter().map(|(n, _)| n.clone()).collect();
            (vec![(names[0].clone(), cell), (names[1].clone(), d1), (names[2].clone(), d2)], Matrix::from_vec(n, 1, y))
        }
        "uno-mini" => {
            let wc = normal_matrix(&mut rng, 8, k, 1.0 / 8f64.sqrt());
            let wd = normal_matrix(&mut rng, 16, k, 1.0 / 16f64.sqrt());
            let wf = normal_matrix(&mut rng, 8, 1, 0.5);
            let cell = normal_matrix(&mut rng, n, 8, 1.0);
            let dose = Matrix::from_vec(n, 1, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
            let desc = normal_matrix(&mut rng, n, 16, 1.0);
            let fp = Matrix::from_vec(n, 8, (0..n * 8).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect());
            let (u, v, f) = (crate::tensor::matmul(&cell, &wc), crate::tensor::matmul(&desc, &wd), crate::tensor::matmul(&fp, &wf));
            let mut y: Vec<f64> = (0..n)
                .map(|r| {
                    let s: f64 = (0..k).map(|j| (u.get(r, j) + v.get(r, j)).tanh()).sum();
                    let gate = 1.0 / (1.0 + (-3.0 * dose.get(r, 0)).exp());
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    gate * s + f.get(r, 0) + 0.05 * noise
                })
                .collect();
            standardize(&mut y);
            let names: Vec<String> = shape.groups.iter().map(|(n, _)| n.clone()).collect();
            (
                vec![(names[0].clone(), cell), (names[1].clone(), dose), (names[2].clone(), desc), (names[3].clone(), fp)],
                Matrix::from_vec(n, 1, y),
            )
        }
        "nt3-mini" => {
            let len = shape.groups[0].1;
            let mut x = normal_matrix(&mut rng, n, len, 0.5);
            let mut labels = Vec::with_capacity(n);
            for r in 0..n {
                let label = rng.random_range(0..2usize);
                if label == 1 {
                    let centre = rng.random_range(4..len - 4) as f64;
                    for (j, v) in x.row_mut(r).iter_mut().enumerate() {
                        *v += 2.0 * (-((j as f64 - centre) / 2.0).powi(2)).exp();
                    }
                }
                labels.push(label as f64);
            }
            (vec![(shape.groups[0].0.clone(), x)], Matrix::from_vec(n, 1, labels))
        }
        other => return Err(DataError::UnknownPreset(other.to_string())),
    };
    let val = (n as f64 * shape.validation_fraction).round() as usize;
    Ok(TabularDataset { name: shape.name, task: shape.task, groups, output, train_rows: n - val })
}

// --- synthetic landscapes ------------------------------------------------------

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LandscapeError {
    #[error("encoding has {got} slots, landscape has {expected}")]
    Length { expected: usize, got: usize },
    #[error("slot {slot}: index {index} out of range for arity {arity}")]
    Range { slot: usize, index: usize, arity: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub a: usize,
    pub b: usize,
    /// Row-major `arity[a] × arity[b]` table.
    pub table: Vec<f64>,
}

/// Deterministic reward over encodings: per-slot scores plus sparse pairwise
/// terms, affinely normalized into [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLandscape {
    pub arities: Vec<usize>,
    pub slot_scores: Vec<Vec<f64>>,
    pub interactions: Vec<Interaction>,
    pub lo: f64,
    pub hi: f64,
    /// True when `lo`/`hi` are the exact extremes (found by enumeration).
    pub exact: bool,
    pub seed: u64,
}

/// Spaces up to this size are normalized by exhaustive enumeration.
pub const EXHAUSTIVE_LIMIT: u64 = 1_000_000;

impl SyntheticLandscape {
    /// `pairs` random slot pairs get interaction tables with entries in
    /// `[-strength, strength]`.
    pub fn new(arities: &[usize], seed: u64, pairs: usize, strength: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slot_scores: Vec<Vec<f64>> = arities.iter().map(|&a| (0..a).map(|_| rng.random::<f64>()).collect()).collect();
        let mut interactions = Vec::new();
        if arities.len() >= 2 {
            for _ in 0..pairs {
                let a = rng.random_range(0..arities.len());
                let mut b = rng.random_range(0..arities.len() - 1);
                if b >= a {
                    b += 1;
                }
                let (a, b) = (a.min(b), a.max(b));
                let table = (0..arities[a] * arities[b]).map(|_| rng.random_range(-strength..=strength)).collect();
                interactions.push(Interaction { a, b, table });
            }
        }
        let mut l = Self { arities: arities.to_vec(), slot_scores, interactions, lo: 0.0, hi: 1.0, exact: false, seed };
        l.normalize();
        l
    }

    /// No interaction terms: the optimum is the slot-wise arg-max.
    pub fn additive(arities: &[usize], seed: u64) -> Self {
        Self::new(arities, seed, 0, 0.0)
    }

    pub fn size(&self) -> u64 {
        self.arities.iter().try_fold(1u64, |acc, &a| acc.checked_mul(a as u64)).unwrap_or(u64::MAX)
    }

    fn normalize(&mut self) {
        if self.size() <= EXHAUSTIVE_LIMIT {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for enc in crate::space::enumerate(&self.arities) {
                let v = self.raw(&enc);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            self.lo = lo;
            self.hi = hi;
            self.exact = true;
        } else {
            let fold = |f: fn(f64, f64) -> f64, init: f64, xs: &[f64]| xs.iter().copied().fold(init, f);
            let mut lo = 0.0;
            let mut hi = 0.0;
            for s in &self.slot_scores {
                lo += fold(f64::min, f64::INFINITY, s);
                hi += fold(f64::max, f64::NEG_INFINITY, s);
            }
            for i in &self.interactions {
                lo += fold(f64::min, f64::INFINITY, &i.table);
                hi += fold(f64::max, f64::NEG_INFINITY, &i.table);
            }
            self.lo = lo;
            self.hi = hi;
            self.exact = false;
        }
    }

    fn raw(&self, enc: &[usize]) -> f64 {
        let mut s: f64 = enc.iter().zip(&self.slot_scores).map(|(&i, t)| t[i]).sum();
        for it in &self.interactions {
            s += it.table[enc[it.a] * self.arities[it.b] + enc[it.b]];
        }
        s
    }

    pub fn check(&self, enc: &[usize]) -> Result<(), LandscapeError> {
        if enc.len() != self.arities.len() {
            return Err(LandscapeError::Length { expected: self.arities.len(), got: enc.len() });
        }
        for (slot, (&index, &arity)) in enc.iter().zip(&self.arities).enumerate() {
            if index >= arity {
                return Err(LandscapeError::Range { slot, index, arity });
            }
        }
        Ok(())
    }

    pub fn reward(&self, enc: &[usize]) -> Result<f64, LandscapeError> {
        self.check(enc)?;
        let span = self.hi - self.lo;
        if span <= 0.0 {
            return Ok(1.0);
        }
        Ok(((self.raw(enc) - self.lo) / span).clamp(0.0, 1.0))
    }

    /// Best encoding and its reward by exhaustive search; `None` above the
    /// enumeration limit.
    pub fn optimum(&self) -> Option<(Vec<usize>, f64)> {
        if self.size() > EXHAUSTIVE_LIMIT {
            return None;
        }
        let mut best: Option<(Vec<usize>, f64)> = None;
        for enc in crate::space::enumerate(&self.arities) {
            let r = self.reward(&enc).expect("enumerated encodings are valid");
            if best.as_ref().is_none_or(|(_, b)| r > *b) {
                best = Some((enc, r));
            }
        }
        best
    }
}

pub fn synthetic_reward(landscape: &SyntheticLandscape, encoding: &[usize]) -> Result<f64, LandscapeError> {
    landscape.reward(encoding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{baseline_graph, build_space, builtin_baseline, builtin_space, decode, ArchitectureEncoding, BaselineDims, GraphBuilder, HeadSpec};

    fn dense_graph(input: usize, units: &[usize]) -> ArchGraph {
        let mut b = GraphBuilder::new();
        let mut x = b.input("x", input);
        for (i, &u) in units.iter().enumerate() {
            x = b.layer(LayerOp::dense(u, Activation::Tanh), vec![x], Some(format!("d{i}")));
        }
        b.finish(x, HeadSpec { units: 1, activation: Activation::Linear })
    }

    #[test]
    fn dense_parameter_formula() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 4);
        let h = b.layer(LayerOp::dense(3, Activation::Relu), vec![x], None);
        let g = b.finish(h, HeadSpec { units: 1, activation: Activation::Linear });
        let p = compile(&g, &g.inputs(), Task::Regression).unwrap();
        // 15 for the layer plus the 3→1 head
        assert_eq!(p.summary().layers[1].params, 15);
        assert_eq!(count_params(&p), 15 + 4);
    }

    #[test]
    fn conv_arithmetic() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 60483);
        let c = b.layer(LayerOp::Conv1D { filters: 128, kernel: 20, stride: 1 }, vec![x], None);
        let g = b.finish(c, HeadSpec { units: 2, activation: Activation::Softmax });
        let p = compile(&g, &g.inputs(), Task::Classification).unwrap();
        let conv = &p.summary().layers[1];
        assert_eq!(conv.shape, Shape::Seq { len: 60464, channels: 128 });
        assert_eq!(conv.params, 2688);
    }

    #[test]
    fn baseline_counts() {
        for (name, expect) in [("combo", 13_772_001), ("uno", 19_274_001)] {
            let g = builtin_baseline(name).unwrap();
            let p = compile(&g, &g.inputs(), Task::Regression).unwrap();
            assert_eq!(count_params(&p), expect, "{name}");
        }
    }

    #[test]
    fn store_length_matches_count() {
        let dims = BaselineDims { inputs: vec![("cell_expression".into(), 8), ("drug1_descriptors".into(), 16), ("drug2_descriptors".into(), 16)], width: 20 };
        let g = baseline_graph("combo", &dims).unwrap();
        let p = compile(&g, &g.inputs(), Task::Regression).unwrap();
        let s = ParamStore::init(&p, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(s.len(), count_params(&p));
        assert_eq!(s.flatten().len(), count_params(&p));
    }

    fn combo_mini_space() -> crate::space::SearchSpace {
        let dims = preset_shape("combo-mini").unwrap().groups;
        build_space(builtin_space("combo_small").unwrap().with_input_dims(&dims).unwrap()).unwrap()
    }

    #[test]
    fn mirrored_branch_counted_once() {
        let space = combo_mini_space();
        // drug-1 block: Dense(100, relu) ×3; everything else Identity / Null
        let mut enc = vec![0; space.num_slots()];
        for k in 3..6 {
            enc[k] = 1;
        }
        let g = decode(&space, &ArchitectureEncoding(enc)).unwrap();
        let p = compile(&g, &g.inputs(), Task::Regression).unwrap();
        // drug branch 16→100→100→100 counted once; concat width 8+100+100 feeds
        // cell 1 (identity) and the structure output concat(c0, c1, c2)
        let branch = (16 * 100 + 100) + 2 * (100 * 100 + 100);
        let head_in = 3 * (8 + 100 + 100);
        assert_eq!(count_params(&p), branch + head_in + 1);
    }

    #[test]
    fn all_identity_counts_head_only() {
        let spec = crate::space::SpaceSpec::flat("t", 7, &[3, 3]);
        let space = build_space(spec).unwrap();
        let g = decode(&space, &ArchitectureEncoding(vec![0, 0])).unwrap();
        let p = compile(&g, &g.inputs(), Task::Regression).unwrap();
        assert_eq!(count_params(&p), 8);
    }

    #[test]
    fn add_with_mismatched_widths_projects() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 4);
        let h = b.layer(LayerOp::dense(6, Activation::Relu), vec![x], None);
        let a = b.layer(LayerOp::Add, vec![x, h], None);
        let g = b.finish(a, HeadSpec { units: 1, activation: Activation::Linear });
        let p = compile(&g, &g.inputs(), Task::Regression).unwrap();
        assert_eq!(p.output_shape().width(), 1);
        assert_eq!(count_params(&p), (4 * 6 + 6) + (4 * 6 + 6) + 7);
    }

    #[test]
    fn oversized_kernel_is_a_shape_error() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 3);
        let c = b.layer(LayerOp::Conv1D { filters: 2, kernel: 5, stride: 1 }, vec![x], None);
        let g = b.finish(c, HeadSpec { units: 1, activation: Activation::Linear });
        assert!(matches!(compile(&g, &g.inputs(), Task::Regression), Err(CompileError::Shape { .. })));
    }

    #[test]
    fn r_squared_reference_points() {
        let y = Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 6.0]);
        assert_eq!(r_squared(&y, &y), 1.0);
        let mean = Matrix::filled(4, 1, 3.0);
        assert!(r_squared(&mean, &y).abs() < 1e-15);
    }

    fn linear_dataset() -> TabularDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        TabularDataset {
            name: "linear".into(),
            task: Task::Regression,
            groups: vec![("x".into(), Matrix::from_vec(200, 1, x))],
            output: Matrix::from_vec(200, 1, y),
            train_rows: 150,
        }
    }

    #[test]
    fn linear_ground_truth_is_recovered() {
        let ds = linear_dataset();
        let g = dense_graph(1, &[]);
        let p = compile(&g, &ds.dims(), Task::Regression).unwrap();
        let budget = FidelityBudget { epochs: 200, learning_rate: 0.01, ..FidelityBudget::default() };
        let r = train_and_score(&p, &ds, &budget, 7, &Clock::Wall).unwrap();
        assert_eq!(r.status, EvalStatus::Ok);
        assert!(r.metric >= 0.99, "R² = {}", r.metric);
    }

    #[test]
    fn full_subset_training_is_reproducible() {
        let ds = generate_dataset("combo-mini", 1).unwrap();
        let space = combo_mini_space();
        let enc = crate::space::sample_random(&space, 5);
        let g = decode(&space, &enc).unwrap();
        let p = compile(&g, &ds.dims(), Task::Regression).unwrap();
        let budget = FidelityBudget { epochs: 1, ..FidelityBudget::default() };
        let clock = Clock::Model(CostModel { flops_per_second: 1e9, overhead: 0.0 });
        let (a, sa) = train(&p, &ds, &budget, 11, &clock).unwrap();
        let (b, sb) = train(&p, &ds, &budget, 11, &clock).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.flatten(), sb.flatten());
    }

    #[test]
    fn modeled_timeout_reports_budget() {
        let ds = linear_dataset();
        let g = dense_graph(1, &[64, 64]);
        let p = compile(&g, &ds.dims(), Task::Regression).unwrap();
        let clock = Clock::Model(CostModel { flops_per_second: 1e6, overhead: 0.5 });
        let budget = FidelityBudget { epochs: 5, timeout: Some(2.0), ..FidelityBudget::default() };
        let r = train_and_score(&p, &ds, &budget, 1, &clock).unwrap();
        assert_eq!(r.status, EvalStatus::Timeout);
        assert_eq!(r.reward, -1.0);
        assert_eq!(r.duration, 2.0);
        let expect = clock_seconds(&clock, &p, &ds, &budget);
        assert!(expect > 2.0);
    }

    fn clock_seconds(clock: &Clock, p: &TensorProgram, ds: &TabularDataset, b: &FidelityBudget) -> f64 {
        match clock {
            Clock::Model(m) => m.training_seconds(p, ds.train_rows, b),
            Clock::Wall => unreachable!(),
        }
    }

    #[test]
    fn additive_landscape_optimum_is_slotwise_argmax() {
        let l = SyntheticLandscape::additive(&[5, 5, 5, 5], 42);
        let (best, r) = l.optimum().unwrap();
        let argmax: Vec<usize> = l
            .slot_scores
            .iter()
            .map(|s| (0..s.len()).fold(0, |b, j| if s[j] > s[b] { j } else { b }))
            .collect();
        assert_eq!(best, argmax);
        assert_eq!(r, 1.0);
        let mut lo = f64::INFINITY;
        let mut count = 0;
        for enc in crate::space::enumerate(&l.arities) {
            let v = l.reward(&enc).unwrap();
            assert!((0.0..=1.0).contains(&v));
            lo = lo.min(v);
            count += 1;
        }
        assert_eq!(count, 625);
        assert_eq!(lo, 0.0);
    }

    #[test]
    fn landscape_rejects_bad_encodings() {
        let l = SyntheticLandscape::new(&[3, 4], 1, 1, 0.5);
        assert!(matches!(l.reward(&[0]), Err(LandscapeError::Length { .. })));
        assert!(matches!(l.reward(&[0, 4]), Err(LandscapeError::Range { .. })));
        assert_eq!(l.reward(&[1, 2]).unwrap(), l.reward(&[1, 2]).unwrap());
    }
}

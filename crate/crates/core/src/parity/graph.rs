//! Portable graph: a JSON node list stored in the metadata of a tensor file
//! that also carries every weight by name.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::ParityError;
use crate::evaluation::{AgePredictor, PredictError};
use crate::io::TensorFile;
use crate::model::{AgeModel, BoundedAgeMap, ConvBnAct, BACKBONE_PREFIX, HEAD_PREFIX};
use crate::nn::{global_avg_pool, ActivationKind, BatchNorm2d, Conv2d, Linear};
use crate::tensor::Tensor;

pub const GRAPH_FORMAT: &str = "agenet-graph/1";
pub const INPUT_NAME: &str = "input";

pub mod ops {
    pub const CONV: &str = "Conv";
    pub const BATCH_NORM: &str = "BatchNormalization";
    pub const RELU: &str = "Relu";
    pub const HARD_SWISH: &str = "HardSwish";
    pub const HARD_SIGMOID: &str = "HardSigmoid";
    pub const GLOBAL_AVG_POOL: &str = "GlobalAveragePool";
    pub const CHANNEL_MUL: &str = "ChannelMul";
    pub const ADD: &str = "Add";
    pub const GEMM: &str = "Gemm";
    pub const BOUNDED_SIGMOID: &str = "BoundedSigmoid";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub op: String,
    pub name: String,
    pub inputs: Vec<String>,
    pub output: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<String>,
}

impl Node {
    pub fn attr(&self, key: &str) -> Result<f64, ParityError> {
        self.attrs
            .get(key)
            .copied()
            .ok_or_else(|| ParityError::Malformed(format!("node {} lacks attribute {key}", self.name)))
    }

    pub fn attr_usize(&self, key: &str) -> Result<usize, ParityError> {
        self.attr(key).map(|v| v as usize)
    }
}

/// `-1` marks the dynamic batch dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDef {
    pub format: String,
    pub input_shape: [i64; 4],
    pub output: String,
    pub nodes: Vec<Node>,
}

impl GraphDef {
    pub fn input_side(&self) -> usize {
        self.input_shape[2] as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortableGraph {
    pub graph: GraphDef,
    pub weights: BTreeMap<String, Tensor>,
}

struct Builder {
    nodes: Vec<Node>,
    counter: usize,
}

impl Builder {
    fn push(&mut self, op: &str, name: &str, inputs: &[&str], attrs: &[(&str, f64)], params: &[String]) -> String {
        self.counter += 1;
        let output = format!("t{}", self.counter);
        self.nodes.push(Node {
            op: op.to_string(),
            name: name.to_string(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: output.clone(),
            attrs: attrs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            params: params.to_vec(),
        });
        output
    }

    fn activation(&mut self, kind: ActivationKind, name: &str, input: &str) -> String {
        let op = match kind {
            ActivationKind::Relu => ops::RELU,
            ActivationKind::Hardswish => ops::HARD_SWISH,
            ActivationKind::Hardsigmoid => ops::HARD_SIGMOID,
        };
        self.push(op, name, &[input], &[], &[])
    }

    fn conv_bn_act(&mut self, prefix: &str, cba: &ConvBnAct, input: &str) -> String {
        let c = &cba.conv;
        let conv = self.push(
            ops::CONV,
            &format!("{prefix}.0"),
            &[input],
            &[
                ("in_channels", c.in_channels as f64),
                ("out_channels", c.out_channels as f64),
                ("kernel", c.kernel as f64),
                ("stride", c.stride as f64),
                ("padding", c.padding as f64),
                ("groups", c.groups as f64),
            ],
            &[format!("{prefix}.0.weight")],
        );
        let bn = self.push(
            ops::BATCH_NORM,
            &format!("{prefix}.1"),
            &[&conv],
            &[("channels", cba.bn.channels as f64), ("eps", cba.bn.eps as f64)],
            &["weight", "bias", "running_mean", "running_var"]
                .iter()
                .map(|p| format!("{prefix}.1.{p}"))
                .collect::<Vec<_>>(),
        );
        match &cba.act {
            Some(a) => self.activation(a.kind, &format!("{prefix}.2"), &bn),
            None => bn,
        }
    }

    fn gemm(&mut self, prefix: &str, fc: &Linear, input: &str) -> String {
        self.push(
            ops::GEMM,
            prefix,
            &[input],
            &[("in_features", fc.in_features as f64), ("out_features", fc.out_features as f64)],
            &[format!("{prefix}.weight"), format!("{prefix}.bias")],
        )
    }
}

/// Traces the inference path of `model` (dropout omitted, batch norm on
/// running statistics).
pub fn trace(model: &AgeModel) -> PortableGraph {
    let mut b = Builder {
        nodes: Vec::new(),
        counter: 0,
    };
    let net = &model.backbone;
    let mut x = b.conv_bn_act(&format!("{BACKBONE_PREFIX}.0"), &net.stem, INPUT_NAME);
    for (i, block) in net.blocks.iter().enumerate() {
        let prefix = format!("{BACKBONE_PREFIX}.{}.block", i + 1);
        let input = x.clone();
        let mut j = 0;
        if let Some(e) = &block.expand {
            x = b.conv_bn_act(&format!("{prefix}.{j}"), e, &x);
            j += 1;
        }
        x = b.conv_bn_act(&format!("{prefix}.{j}"), &block.depthwise, &x);
        j += 1;
        if let Some(se) = &block.se {
            let p = format!("{prefix}.{j}");
            let pooled = b.push(ops::GLOBAL_AVG_POOL, &format!("{p}.pool"), &[&x], &[], &[]);
            let h = b.gemm(&format!("{p}.fc1"), &se.fc1, &pooled);
            let h = b.activation(ActivationKind::Relu, &format!("{p}.relu"), &h);
            let g = b.gemm(&format!("{p}.fc2"), &se.fc2, &h);
            let g = b.activation(ActivationKind::Hardsigmoid, &format!("{p}.gate"), &g);
            x = b.push(ops::CHANNEL_MUL, &format!("{p}.scale"), &[&x, &g], &[], &[]);
            j += 1;
        }
        x = b.conv_bn_act(&format!("{prefix}.{j}"), &block.project, &x);
        if block.residual() {
            x = b.push(ops::ADD, &format!("{prefix}.residual"), &[&x, &input], &[], &[]);
        }
    }
    x = b.conv_bn_act(&format!("{BACKBONE_PREFIX}.{}", net.blocks.len() + 1), &net.last, &x);
    x = b.push(ops::GLOBAL_AVG_POOL, "pool", &[&x], &[], &[]);
    let head = &model.head;
    x = b.gemm(&format!("{HEAD_PREFIX}.fc1"), &head.fc1, &x);
    x = b.activation(ActivationKind::Hardswish, &format!("{HEAD_PREFIX}.act1"), &x);
    x = b.gemm(&format!("{HEAD_PREFIX}.fc2"), &head.fc2, &x);
    x = b.activation(ActivationKind::Hardswish, &format!("{HEAD_PREFIX}.act2"), &x);
    x = b.gemm(&format!("{HEAD_PREFIX}.out"), &head.out, &x);
    let map = model.bounded_map();
    x = b.push(
        ops::BOUNDED_SIGMOID,
        "age",
        &[&x],
        &[("min", map.min), ("max", map.max)],
        &[],
    );
    let state = model.state_dict();
    let mut weights = BTreeMap::new();
    for n in &b.nodes {
        for p in &n.params {
            weights.insert(p.clone(), state[p].clone());
        }
    }
    let side = model.spec().input_size as i64;
    PortableGraph {
        graph: GraphDef {
            format: GRAPH_FORMAT.to_string(),
            input_shape: [-1, 3, side, side],
            output: x,
            nodes: b.nodes,
        },
        weights,
    }
}

impl PortableGraph {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut file = TensorFile {
            tensors: self.weights.clone(),
            metadata: BTreeMap::new(),
        };
        file.metadata.insert("format".into(), GRAPH_FORMAT.into());
        file.metadata
            .insert("graph".into(), serde_json::to_string(&self.graph).expect("graph json"));
        file.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ParityError> {
        let (file, _) = TensorFile::from_bytes(bytes).map_err(ParityError::Malformed)?;
        if file.metadata.get("format").map(String::as_str) != Some(GRAPH_FORMAT) {
            return Err(ParityError::Malformed(format!("not a {GRAPH_FORMAT} file")));
        }
        let text = file
            .metadata
            .get("graph")
            .ok_or_else(|| ParityError::Malformed("graph metadata missing".into()))?;
        let graph: GraphDef = serde_json::from_str(text).map_err(|e| ParityError::Malformed(e.to_string()))?;
        Ok(PortableGraph {
            graph,
            weights: file.tensors,
        })
    }

    pub fn param_count(&self) -> usize {
        self.graph
            .nodes
            .iter()
            .filter(|n| n.op != ops::BATCH_NORM)
            .flat_map(|n| &n.params)
            .chain(
                self.graph
                    .nodes
                    .iter()
                    .filter(|n| n.op == ops::BATCH_NORM)
                    .flat_map(|n| &n.params[..2]),
            )
            .map(|p| self.weights[p].len())
            .sum()
    }

    pub(crate) fn weight(&self, node: &Node, i: usize) -> Result<&Tensor, ParityError> {
        let name = node
            .params
            .get(i)
            .ok_or_else(|| ParityError::Malformed(format!("node {} lacks parameter {i}", node.name)))?;
        self.weights
            .get(name)
            .ok_or_else(|| ParityError::Malformed(format!("weight {name} missing")))
    }
}

enum Step {
    Conv(Conv2d),
    Norm(BatchNorm2d),
    Act(ActivationKind),
    Pool,
    ChannelMul,
    Add,
    Gemm(Linear),
    Bounded(BoundedAgeMap),
}

struct Compiled {
    step: Step,
    inputs: Vec<usize>,
    output: usize,
}

/// Interpreter for [`PortableGraph`] built on the engine's layers.
pub struct PortableRuntime {
    steps: Vec<Compiled>,
    slots: usize,
    output: usize,
    side: usize,
}

fn set(dst: &mut Tensor, src: &Tensor, what: &str) -> Result<(), ParityError> {
    if dst.len() != src.len() {
        return Err(ParityError::Malformed(format!(
            "{what}: expected {} values, found {}",
            dst.len(),
            src.len()
        )));
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

impl PortableRuntime {
    pub fn new(pg: &PortableGraph) -> Result<Self, ParityError> {
        let mut slot_of: HashMap<String, usize> = HashMap::new();
        slot_of.insert(INPUT_NAME.to_string(), 0);
        let mut steps = Vec::with_capacity(pg.graph.nodes.len());
        for node in &pg.graph.nodes {
            let step = match node.op.as_str() {
                ops::CONV => {
                    let mut conv = Conv2d::new(
                        node.attr_usize("in_channels")?,
                        node.attr_usize("out_channels")?,
                        node.attr_usize("kernel")?,
                        node.attr_usize("stride")?,
                        node.attr_usize("groups")?,
                        false,
                    );
                    conv.padding = node.attr_usize("padding")?;
                    set(&mut conv.weight.value, pg.weight(node, 0)?, &node.name)?;
                    Step::Conv(conv)
                }
                ops::BATCH_NORM => {
                    let mut bn = BatchNorm2d::new(node.attr_usize("channels")?, node.attr("eps")? as f32, 0.0);
                    set(&mut bn.weight.value, pg.weight(node, 0)?, &node.name)?;
                    set(&mut bn.bias.value, pg.weight(node, 1)?, &node.name)?;
                    set(&mut bn.running_mean, pg.weight(node, 2)?, &node.name)?;
                    set(&mut bn.running_var, pg.weight(node, 3)?, &node.name)?;
                    Step::Norm(bn)
                }
                ops::RELU => Step::Act(ActivationKind::Relu),
                ops::HARD_SWISH => Step::Act(ActivationKind::Hardswish),
                ops::HARD_SIGMOID => Step::Act(ActivationKind::Hardsigmoid),
                ops::GLOBAL_AVG_POOL => Step::Pool,
                ops::CHANNEL_MUL => Step::ChannelMul,
                ops::ADD => Step::Add,
                ops::GEMM => {
                    let mut fc = Linear::new(node.attr_usize("in_features")?, node.attr_usize("out_features")?);
                    set(&mut fc.weight.value, pg.weight(node, 0)?, &node.name)?;
                    set(&mut fc.bias.value, pg.weight(node, 1)?, &node.name)?;
                    Step::Gemm(fc)
                }
                ops::BOUNDED_SIGMOID => Step::Bounded(BoundedAgeMap::new(node.attr("min")?, node.attr("max")?)),
                other => return Err(ParityError::UnsupportedOp(other.to_string())),
            };
            let inputs = node
                .inputs
                .iter()
                .map(|i| {
                    slot_of
                        .get(i)
                        .copied()
                        .ok_or_else(|| ParityError::Malformed(format!("node {} reads undefined {i}", node.name)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let output = slot_of.len();
            slot_of.insert(node.output.clone(), output);
            steps.push(Compiled { step, inputs, output });
        }
        let output = *slot_of
            .get(&pg.graph.output)
            .ok_or_else(|| ParityError::Malformed("graph output is never produced".into()))?;
        Ok(PortableRuntime {
            steps,
            slots: slot_of.len(),
            output,
            side: pg.graph.input_side(),
        })
    }

    /// `[n, 3, s, s] -> n` ages.
    pub fn run(&mut self, x: &Tensor) -> Result<Vec<f64>, ParityError> {
        super::check_input(x, self.side)?;
        let mut slots: Vec<Option<Tensor>> = vec![None; self.slots];
        slots[0] = Some(x.clone());
        let mut ages = None;
        for s in &mut self.steps {
            let arg = |k: usize| slots[s.inputs[k]].as_ref().expect("topological order");
            let y = match &mut s.step {
                Step::Conv(c) => c.forward(arg(0), false),
                Step::Norm(bn) => bn.forward(arg(0), false, false),
                Step::Act(kind) => {
                    let mut y = arg(0).clone();
                    y.data_mut().iter_mut().for_each(|v| *v = kind.apply(*v));
                    y
                }
                Step::Pool => global_avg_pool(arg(0)),
                Step::ChannelMul => {
                    let (x, g) = (arg(0), arg(1));
                    let (_, _, h, w) = x.dims4();
                    let mut y = x.clone();
                    for (chunk, &gv) in y.data_mut().chunks_mut(h * w).zip(g.data()) {
                        chunk.iter_mut().for_each(|v| *v *= gv);
                    }
                    y
                }
                Step::Add => {
                    let mut y = arg(0).clone();
                    for (a, b) in y.data_mut().iter_mut().zip(arg(1).data()) {
                        *a += b;
                    }
                    y
                }
                Step::Gemm(fc) => fc.forward(arg(0), false),
                Step::Bounded(map) => {
                    let z = arg(0);
                    ages = Some(z.data().iter().map(|&v| map.apply(v as f64)).collect::<Vec<_>>());
                    z.clone()
                }
            };
            slots[s.output] = Some(y);
        }
        match ages {
            Some(a) if self.output == self.steps.last().map(|s| s.output).unwrap_or(0) => {
                super::check_output(&a, x.shape()[0])?;
                Ok(a)
            }
            _ => Err(ParityError::Malformed("graph does not end in BoundedSigmoid".into())),
        }
    }
}

impl AgePredictor for PortableRuntime {
    fn input_size(&self) -> usize {
        self.side
    }

    fn predict_batch(&mut self, batch: &Tensor) -> Result<Vec<f64>, PredictError> {
        self.run(batch).map_err(|e| PredictError {
            index: None,
            message: e.to_string(),
        })
    }
}

//! Deployment graph: a flat little-endian op list with batch norm folded into
//! the preceding convolution and activations fused where possible, plus a
//! direct-loop runtime that shares no kernels with the training engine.

use std::collections::HashMap;

use super::graph::{ops, Node, PortableGraph, INPUT_NAME};
use super::ParityError;
use crate::evaluation::{AgePredictor, PredictError};
use crate::nn::gemm;
use crate::tensor::Tensor;

pub const DEPLOY_MAGIC: &[u8; 8] = b"AGNDEP01";

const OP_CONV: u32 = 1;
const OP_POOL: u32 = 2;
const OP_DENSE: u32 = 3;
const OP_CHANNEL_MUL: u32 = 4;
const OP_ADD: u32 = 5;
const OP_ACT: u32 = 6;
const OP_BOUNDED: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Act {
    Identity = 0,
    Relu = 1,
    Hardswish = 2,
    Hardsigmoid = 3,
}

impl Act {
    fn from_op(op: &str) -> Option<Act> {
        match op {
            ops::RELU => Some(Act::Relu),
            ops::HARD_SWISH => Some(Act::Hardswish),
            ops::HARD_SIGMOID => Some(Act::Hardsigmoid),
            _ => None,
        }
    }

    fn from_code(c: u32) -> Result<Act, ParityError> {
        Ok(match c {
            0 => Act::Identity,
            1 => Act::Relu,
            2 => Act::Hardswish,
            3 => Act::Hardsigmoid,
            _ => return Err(ParityError::Malformed(format!("unknown activation code {c}"))),
        })
    }

    #[inline]
    fn eval(self, x: f32) -> f32 {
        match self {
            Act::Identity => x,
            Act::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Act::Hardswish => x * relu6(x + 3.0) * (1.0 / 6.0),
            Act::Hardsigmoid => relu6(x + 3.0) * (1.0 / 6.0),
        }
    }
}

#[inline]
fn relu6(x: f32) -> f32 {
    x.clamp(0.0, 6.0)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeployOp {
    Conv {
        input: u32,
        output: u32,
        cin: u32,
        cout: u32,
        kernel: u32,
        stride: u32,
        pad: u32,
        groups: u32,
        act: Act,
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    Pool {
        input: u32,
        output: u32,
    },
    Dense {
        input: u32,
        output: u32,
        fin: u32,
        fout: u32,
        act: Act,
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    ChannelMul {
        x: u32,
        gate: u32,
        output: u32,
    },
    Add {
        a: u32,
        b: u32,
        output: u32,
    },
    Activation {
        input: u32,
        output: u32,
        act: Act,
    },
    Bounded {
        input: u32,
        output: u32,
        min: f32,
        max: f32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeployGraph {
    pub input_side: u32,
    pub slots: u32,
    pub output: u32,
    pub ops: Vec<DeployOp>,
}

/// Lowers a portable graph. Fails on the first operator it cannot map.
pub fn convert(pg: &PortableGraph) -> Result<DeployGraph, ParityError> {
    let nodes = &pg.graph.nodes;
    let mut uses: HashMap<&str, usize> = HashMap::new();
    for n in nodes {
        for i in &n.inputs {
            *uses.entry(i.as_str()).or_default() += 1;
        }
    }
    *uses.entry(pg.graph.output.as_str()).or_default() += 1;
    let sole_consumer = |producer: &Node, next: Option<&Node>| -> bool {
        next.is_some_and(|n| n.inputs.len() == 1 && n.inputs[0] == producer.output)
            && uses.get(producer.output.as_str()) == Some(&1)
    };

    let mut slot_of: HashMap<String, u32> = HashMap::new();
    slot_of.insert(INPUT_NAME.to_string(), 0);
    let slot = |slot_of: &HashMap<String, u32>, name: &str| -> Result<u32, ParityError> {
        slot_of
            .get(name)
            .copied()
            .ok_or_else(|| ParityError::Malformed(format!("tensor {name} read before it is produced")))
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < nodes.len() {
        let node = &nodes[i];
        let mut j = i;
        let op = match node.op.as_str() {
            ops::CONV => {
                let cin = node.attr_usize("in_channels")?;
                let cout = node.attr_usize("out_channels")?;
                let groups = node.attr_usize("groups")?;
                let mut weight: Vec<f32> = pg.weight(node, 0)?.data().to_vec();
                let mut bias = vec![0.0f32; cout];
                if sole_consumer(node, nodes.get(i + 1)) && nodes[i + 1].op == ops::BATCH_NORM {
                    fold_batch_norm(pg, &nodes[i + 1], &mut weight, &mut bias)?;
                    j += 1;
                }
                let mut act = Act::Identity;
                if let Some(next) = nodes.get(j + 1) {
                    if let Some(a) = Act::from_op(&next.op) {
                        if sole_consumer(&nodes[j], Some(next)) {
                            act = a;
                            j += 1;
                        }
                    }
                }
                DeployOp::Conv {
                    input: slot(&slot_of, &node.inputs[0])?,
                    output: 0,
                    cin: cin as u32,
                    cout: cout as u32,
                    kernel: node.attr_usize("kernel")? as u32,
                    stride: node.attr_usize("stride")? as u32,
                    pad: node.attr_usize("padding")? as u32,
                    groups: groups as u32,
                    act,
                    weight,
                    bias,
                }
            }
            ops::GEMM => {
                let mut act = Act::Identity;
                if let Some(next) = nodes.get(i + 1) {
                    if let Some(a) = Act::from_op(&next.op) {
                        if sole_consumer(node, Some(next)) {
                            act = a;
                            j += 1;
                        }
                    }
                }
                DeployOp::Dense {
                    input: slot(&slot_of, &node.inputs[0])?,
                    output: 0,
                    fin: node.attr_usize("in_features")? as u32,
                    fout: node.attr_usize("out_features")? as u32,
                    act,
                    weight: pg.weight(node, 0)?.data().to_vec(),
                    bias: pg.weight(node, 1)?.data().to_vec(),
                }
            }
            ops::GLOBAL_AVG_POOL => DeployOp::Pool {
                input: slot(&slot_of, &node.inputs[0])?,
                output: 0,
            },
            ops::CHANNEL_MUL => DeployOp::ChannelMul {
                x: slot(&slot_of, &node.inputs[0])?,
                gate: slot(&slot_of, &node.inputs[1])?,
                output: 0,
            },
            ops::ADD => DeployOp::Add {
                a: slot(&slot_of, &node.inputs[0])?,
                b: slot(&slot_of, &node.inputs[1])?,
                output: 0,
            },
            ops::RELU | ops::HARD_SWISH | ops::HARD_SIGMOID => DeployOp::Activation {
                input: slot(&slot_of, &node.inputs[0])?,
                output: 0,
                act: Act::from_op(&node.op).expect("activation op"),
            },
            ops::BOUNDED_SIGMOID => DeployOp::Bounded {
                input: slot(&slot_of, &node.inputs[0])?,
                output: 0,
                min: node.attr("min")? as f32,
                max: node.attr("max")? as f32,
            },
            ops::BATCH_NORM => return Err(ParityError::UnsupportedOp(format!("{} (not foldable)", ops::BATCH_NORM))),
            other => return Err(ParityError::UnsupportedOp(other.to_string())),
        };
        let new_slot = slot_of.len() as u32;
        slot_of.insert(nodes[j].output.clone(), new_slot);
        out.push(with_output(op, new_slot));
        i = j + 1;
    }
    Ok(DeployGraph {
        input_side: pg.graph.input_side() as u32,
        slots: slot_of.len() as u32,
        output: slot(&slot_of, &pg.graph.output)?,
        ops: out,
    })
}

fn with_output(mut op: DeployOp, slot: u32) -> DeployOp {
    match &mut op {
        DeployOp::Conv { output, .. }
        | DeployOp::Pool { output, .. }
        | DeployOp::Dense { output, .. }
        | DeployOp::ChannelMul { output, .. }
        | DeployOp::Add { output, .. }
        | DeployOp::Activation { output, .. }
        | DeployOp::Bounded { output, .. } => *output = slot,
    }
    op
}

fn fold_batch_norm(pg: &PortableGraph, bn: &Node, weight: &mut [f32], bias: &mut [f32]) -> Result<(), ParityError> {
    let eps = bn.attr("eps")?;
    let (g, b, m, v) = (
        pg.weight(bn, 0)?.data(),
        pg.weight(bn, 1)?.data(),
        pg.weight(bn, 2)?.data(),
        pg.weight(bn, 3)?.data(),
    );
    let cout = bias.len();
    if [g.len(), b.len(), m.len(), v.len()].iter().any(|&l| l != cout) {
        return Err(ParityError::Malformed(format!("batch norm {} does not match its conv", bn.name)));
    }
    let per = weight.len() / cout;
    for c in 0..cout {
        let scale = g[c] as f64 / (v[c] as f64 + eps).sqrt();
        for w in &mut weight[c * per..(c + 1) * per] {
            *w = (*w as f64 * scale) as f32;
        }
        bias[c] = (b[c] as f64 + (bias[c] as f64 - m[c] as f64) * scale) as f32;
    }
    Ok(())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn record(&mut self, code: u32, ints: &[u32], floats: &[&[f32]]) {
        self.u32(code);
        self.u32(ints.len() as u32);
        ints.iter().for_each(|&v| self.u32(v));
        let n: usize = floats.iter().map(|f| f.len()).sum();
        self.u32(n as u32);
        for f in floats {
            for v in *f {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ParityError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ParityError::Malformed("deployment file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ParityError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn record(&mut self) -> Result<(u32, Vec<u32>, Vec<f32>), ParityError> {
        let code = self.u32()?;
        let ni = self.u32()? as usize;
        let ints = (0..ni).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        let nf = self.u32()? as usize;
        let raw = self.take(nf.checked_mul(4).ok_or_else(|| ParityError::Malformed("size overflow".into()))?)?;
        let floats = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((code, ints, floats))
    }
}

impl DeployGraph {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(DEPLOY_MAGIC.to_vec());
        for v in [self.input_side, self.slots, self.output, self.ops.len() as u32] {
            w.u32(v);
        }
        for op in &self.ops {
            match op {
                DeployOp::Conv {
                    input,
                    output,
                    cin,
                    cout,
                    kernel,
                    stride,
                    pad,
                    groups,
                    act,
                    weight,
                    bias,
                } => w.record(
                    OP_CONV,
                    &[*input, *output, *cin, *cout, *kernel, *stride, *pad, *groups, *act as u32],
                    &[weight, bias],
                ),
                DeployOp::Pool { input, output } => w.record(OP_POOL, &[*input, *output], &[]),
                DeployOp::Dense {
                    input,
                    output,
                    fin,
                    fout,
                    act,
                    weight,
                    bias,
                } => w.record(OP_DENSE, &[*input, *output, *fin, *fout, *act as u32], &[weight, bias]),
                DeployOp::ChannelMul { x, gate, output } => w.record(OP_CHANNEL_MUL, &[*x, *gate, *output], &[]),
                DeployOp::Add { a, b, output } => w.record(OP_ADD, &[*a, *b, *output], &[]),
                DeployOp::Activation { input, output, act } => {
                    w.record(OP_ACT, &[*input, *output, *act as u32], &[])
                }
                DeployOp::Bounded {
                    input,
                    output,
                    min,
                    max,
                } => w.record(OP_BOUNDED, &[*input, *output], &[&[*min, *max]]),
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ParityError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != DEPLOY_MAGIC {
            return Err(ParityError::Malformed("not a deployment graph".into()));
        }
        let (input_side, slots, output, count) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let mut ops = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let (code, ints, mut floats) = r.record()?;
            let need = |n: usize| -> Result<(), ParityError> {
                if ints.len() == n {
                    Ok(())
                } else {
                    Err(ParityError::Malformed(format!("op {code} expects {n} fields, found {}", ints.len())))
                }
            };
            let op = match code {
                OP_CONV => {
                    need(9)?;
                    let cout = ints[3] as usize;
                    let per = (ints[2] / ints[7].max(1)) as usize * (ints[4] * ints[4]) as usize;
                    if floats.len() != cout * per + cout {
                        return Err(ParityError::Malformed("conv weight size mismatch".into()));
                    }
                    let bias = floats.split_off(cout * per);
                    DeployOp::Conv {
                        input: ints[0],
                        output: ints[1],
                        cin: ints[2],
                        cout: ints[3],
                        kernel: ints[4],
                        stride: ints[5],
                        pad: ints[6],
                        groups: ints[7],
                        act: Act::from_code(ints[8])?,
                        weight: floats,
                        bias,
                    }
                }
                OP_POOL => {
                    need(2)?;
                    DeployOp::Pool {
                        input: ints[0],
                        output: ints[1],
                    }
                }
                OP_DENSE => {
                    need(5)?;
                    let (fin, fout) = (ints[2] as usize, ints[3] as usize);
                    if floats.len() != fin * fout + fout {
                        return Err(ParityError::Malformed("dense weight size mismatch".into()));
                    }
                    let bias = floats.split_off(fin * fout);
                    DeployOp::Dense {
                        input: ints[0],
                        output: ints[1],
                        fin: ints[2],
                        fout: ints[3],
                        act: Act::from_code(ints[4])?,
                        weight: floats,
                        bias,
                    }
                }
                OP_CHANNEL_MUL => {
                    need(3)?;
                    DeployOp::ChannelMul {
                        x: ints[0],
                        gate: ints[1],
                        output: ints[2],
                    }
                }
                OP_ADD => {
                    need(3)?;
                    DeployOp::Add {
                        a: ints[0],
                        b: ints[1],
                        output: ints[2],
                    }
                }
                OP_ACT => {
                    need(3)?;
                    DeployOp::Activation {
                        input: ints[0],
                        output: ints[1],
                        act: Act::from_code(ints[2])?,
                    }
                }
                OP_BOUNDED => {
                    need(2)?;
                    if floats.len() != 2 {
                        return Err(ParityError::Malformed("bounded op needs min and max".into()));
                    }
                    DeployOp::Bounded {
                        input: ints[0],
                        output: ints[1],
                        min: floats[0],
                        max: floats[1],
                    }
                }
                other => return Err(ParityError::UnsupportedOp(format!("opcode {other}"))),
            };
            ops.push(op);
        }
        if r.pos != bytes.len() {
            return Err(ParityError::Malformed("trailing bytes after last op".into()));
        }
        let g = DeployGraph {
            input_side,
            slots,
            output,
            ops,
        };
        g.check_slots()?;
        Ok(g)
    }

    fn check_slots(&self) -> Result<(), ParityError> {
        let mut defined = vec![false; self.slots as usize];
        let bad = || ParityError::Malformed("op refers to an undefined slot".into());
        *defined.first_mut().ok_or_else(bad)? = true;
        for op in &self.ops {
            let (ins, out): (Vec<u32>, u32) = match op {
                DeployOp::Conv { input, output, .. }
                | DeployOp::Pool { input, output }
                | DeployOp::Dense { input, output, .. }
                | DeployOp::Activation { input, output, .. }
                | DeployOp::Bounded { input, output, .. } => (vec![*input], *output),
                DeployOp::ChannelMul { x, gate, output } => (vec![*x, *gate], *output),
                DeployOp::Add { a, b, output } => (vec![*a, *b], *output),
            };
            for i in ins {
                if !defined.get(i as usize).copied().unwrap_or(false) {
                    return Err(bad());
                }
            }
            *defined.get_mut(out as usize).ok_or_else(bad)? = true;
        }
        if !defined.get(self.output as usize).copied().unwrap_or(false) {
            return Err(bad());
        }
        Ok(())
    }
}

/// One activation buffer: `c` planes of `h × w`.
#[derive(Clone)]
struct Buf {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

pub struct DeployRuntime {
    graph: DeployGraph,
}

impl DeployRuntime {
    pub fn new(graph: DeployGraph) -> Self {
        DeployRuntime { graph }
    }

    pub fn input_side(&self) -> usize {
        self.graph.input_side as usize
    }

    /// One sample at a time: `[n, 3, s, s] -> n` ages.
    pub fn run(&self, x: &Tensor) -> Result<Vec<f64>, ParityError> {
        let side = self.input_side();
        super::check_input(x, side)?;
        let per = 3 * side * side;
        let ages = x
            .data()
            .chunks(per)
            .map(|s| self.run_one(s, side))
            .collect::<Result<Vec<_>, _>>()?;
        super::check_output(&ages, x.shape()[0])?;
        Ok(ages)
    }

    fn run_one(&self, input: &[f32], side: usize) -> Result<f64, ParityError> {
        let mut slots: Vec<Option<Buf>> = vec![None; self.graph.slots as usize];
        slots[0] = Some(Buf {
            c: 3,
            h: side,
            w: side,
            data: input.to_vec(),
        });
        let get = |slots: &[Option<Buf>], i: u32| slots[i as usize].clone().expect("validated slot");
        let mut age = None;
        for op in &self.graph.ops {
            let (out, buf) = match op {
                DeployOp::Conv {
                    input,
                    output,
                    cin,
                    cout,
                    kernel,
                    stride,
                    pad,
                    groups,
                    act,
                    weight,
                    bias,
                } => {
                    let x = get(&slots, *input);
                    if x.c != *cin as usize {
                        return Err(ParityError::InputShape {
                            expected: format!("{cin} channels"),
                            found: format!("{} channels", x.c),
                        });
                    }
                    let geom = ConvGeom {
                        cout: *cout as usize,
                        k: *kernel as usize,
                        stride: *stride as usize,
                        pad: *pad as usize,
                        groups: *groups as usize,
                    };
                    (*output, conv(&x, &geom, *act, weight, bias))
                }
                DeployOp::Pool { input, output } => {
                    let x = get(&slots, *input);
                    let plane = x.h * x.w;
                    let data = x
                        .data
                        .chunks(plane)
                        .map(|p| p.iter().sum::<f32>() / plane as f32)
                        .collect();
                    (*output, Buf { c: x.c, h: 1, w: 1, data })
                }
                DeployOp::Dense {
                    input,
                    output,
                    fin,
                    fout,
                    act,
                    weight,
                    bias,
                } => {
                    let x = get(&slots, *input);
                    let fin = *fin as usize;
                    if x.data.len() != fin {
                        return Err(ParityError::InputShape {
                            expected: format!("{fin} features"),
                            found: format!("{} features", x.data.len()),
                        });
                    }
                    let data = (0..*fout as usize)
                        .map(|o| {
                            let row = &weight[o * fin..(o + 1) * fin];
                            act.eval(bias[o] + row.iter().zip(&x.data).map(|(a, b)| a * b).sum::<f32>())
                        })
                        .collect();
                    (
                        *output,
                        Buf {
                            c: *fout as usize,
                            h: 1,
                            w: 1,
                            data,
                        },
                    )
                }
                DeployOp::ChannelMul { x, gate, output } => {
                    let mut y = get(&slots, *x);
                    let g = get(&slots, *gate);
                    let plane = y.h * y.w;
                    for (chunk, gv) in y.data.chunks_mut(plane).zip(g.data) {
                        chunk.iter_mut().for_each(|v| *v *= gv);
                    }
                    (*output, y)
                }
                DeployOp::Add { a, b, output } => {
                    let mut y = get(&slots, *a);
                    let r = slots[*b as usize].as_ref().expect("validated slot");
                    y.data.iter_mut().zip(&r.data).for_each(|(p, q)| *p += q);
                    (*output, y)
                }
                DeployOp::Activation { input, output, act } => {
                    let mut y = get(&slots, *input);
                    y.data.iter_mut().for_each(|v| *v = act.eval(*v));
                    (*output, y)
                }
                DeployOp::Bounded {
                    input,
                    output,
                    min,
                    max,
                } => {
                    let z = get(&slots, *input);
                    let s = 1.0f32 / (1.0 + (-z.data[0]).exp());
                    age = Some((min + (max - min) * s) as f64);
                    (*output, z)
                }
            };
            slots[out as usize] = Some(buf);
        }
        age.ok_or_else(|| ParityError::Malformed("deployment graph has no output op".into()))
    }
}

struct ConvGeom {
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

fn conv(x: &Buf, g: &ConvGeom, act: Act, weight: &[f32], bias: &[f32]) -> Buf {
    let ho = (x.h + 2 * g.pad - g.k) / g.stride + 1;
    let wo = (x.w + 2 * g.pad - g.k) / g.stride + 1;
    let cin_g = x.c / g.groups;
    let cout_g = g.cout / g.groups;
    let plane_in = x.h * x.w;
    let plane_out = ho * wo;
    let mut out = vec![0.0f32; g.cout * plane_out];
    if g.groups == 1 {
        // dense convolutions run as one matrix product over unfolded patches
        for (oc, o) in out.chunks_mut(plane_out).enumerate() {
            o.fill(bias[oc]);
        }
        let kk = x.c * g.k * g.k;
        let cols;
        let patches = if g.k == 1 && g.stride == 1 && g.pad == 0 {
            &x.data
        } else {
            cols = unfold(x, g, ho, wo);
            &cols
        };
        gemm(g.cout, kk, plane_out, weight, kk, 1, patches, plane_out, 1, 1.0, &mut out, plane_out, 1);
        if act != Act::Identity {
            out.iter_mut().for_each(|v| *v = act.eval(*v));
        }
        return Buf {
            c: g.cout,
            h: ho,
            w: wo,
            data: out,
        };
    }
    for oc in 0..g.cout {
        let o = &mut out[oc * plane_out..(oc + 1) * plane_out];
        o.iter_mut().for_each(|v| *v = bias[oc]);
        let grp = oc / cout_g;
        for icg in 0..cin_g {
            let ic = grp * cin_g + icg;
            let xin = &x.data[ic * plane_in..(ic + 1) * plane_in];
            let wk = &weight[(oc * cin_g + icg) * g.k * g.k..(oc * cin_g + icg + 1) * g.k * g.k];
            if g.k == 1 && g.stride == 1 && g.pad == 0 {
                let wv = wk[0];
                o.iter_mut().zip(xin).for_each(|(a, &b)| *a += wv * b);
                continue;
            }
            for oy in 0..ho {
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let irow = &xin[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let orow = &mut o[oy * wo..(oy + 1) * wo];
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < x.w {
                                *ov += wv * irow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        if act != Act::Identity {
            o.iter_mut().for_each(|v| *v = act.eval(*v));
        }
    }
    Buf {
        c: g.cout,
        h: ho,
        w: wo,
        data: out,
    }
}

/// `[c·k·k, ho·wo]` patch matrix, zero outside the image.
fn unfold(x: &Buf, g: &ConvGeom, ho: usize, wo: usize) -> Vec<f32> {
    let plane_out = ho * wo;
    let mut cols = vec![0.0f32; x.c * g.k * g.k * plane_out];
    for c in 0..x.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = &x.data[(c * x.h + iy as usize) * x.w..][..x.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < x.w {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

impl AgePredictor for DeployRuntime {
    fn input_size(&self) -> usize {
        self.input_side()
    }

    fn predict_batch(&mut self, batch: &Tensor) -> Result<Vec<f64>, PredictError> {
        self.run(batch).map_err(|e| PredictError {
            index: None,
            message: e.to_string(),
        })
    }
}

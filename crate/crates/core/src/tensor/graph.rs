use std::collections::BTreeMap;

use super::kernels::{self, gemm};
use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Named tensors fed into a graph (inputs) or replacing tap values (overrides).
pub type Feed = BTreeMap<String, Tensor>;

/// Closed set of primitives. Every op is rank 1 or rank 2; row-wise ops act
/// on the last axis.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input(String),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// `[m, n] + [n]`, the bias broadcast over rows.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Softmax(NodeId),
    /// Row gather `table[ids[l]]`; ids are integer-valued and not differentiable.
    Embedding {
        table: NodeId,
        ids: NodeId,
    },
    MeanRows(NodeId),
    Sum(NodeId),
    L2Normalize(NodeId),
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::L2Normalize(a) => vec![a],
            Op::LayerNorm { x, gamma, beta } => vec![x, gamma, beta],
            Op::Embedding { table, ids } => vec![table, ids],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Embedding { .. } => "embedding",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
            Op::L2Normalize(_) => "l2_normalize",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Immutable computation graph. Nodes are stored in topological order.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    taps: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    taps: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        _ => (1, shape.iter().product()),
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::InvalidConfig(format!("input `{name}` must be rank 1 or 2")));
        }
        if self.inputs.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate input `{name}`")));
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", &[0, 0], &s));
        }
        Ok(self.push(Op::Transpose(a), vec![s[1], s[0]]))
    }

    fn same_shape(&self, ctx: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(ctx, sa, sb));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let (_, n) = as_matrix(&s);
        if self.shape(bias).iter().product::<usize>() != n {
            return Err(Error::shape("add_row bias", &[n], self.shape(bias)));
        }
        Ok(self.push(Op::AddRow(a, bias), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::InvalidConfig("non-finite scale".into()));
        }
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::Scale(a, c), s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Relu(a), s)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Gelu(a), s)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let (_, n) = as_matrix(&s);
        for p in [gamma, beta] {
            if self.shape(p).iter().product::<usize>() != n {
                return Err(Error::shape("layer_norm affine", &[n], self.shape(p)));
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, s))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Softmax(a), s)
    }

    pub fn embedding(&mut self, table: NodeId, ids: NodeId) -> Result<NodeId> {
        let st = self.shape(table).to_vec();
        let si = self.shape(ids).to_vec();
        if st.len() != 2 || si.len() != 1 {
            return Err(Error::shape("embedding", &st, &si));
        }
        Ok(self.push(Op::Embedding { table, ids }, vec![si[0], st[1]]))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (_, n) = as_matrix(self.shape(a));
        self.push(Op::MeanRows(a), vec![1, n])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn l2_normalize(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::L2Normalize(a), s)
    }

    pub fn tap(&mut self, name: &str, node: NodeId) -> Result<()> {
        if self.taps.insert(name.to_string(), node).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate tap `{name}`")));
        }
        Ok(())
    }

    pub fn output(&mut self, name: &str, node: NodeId) -> Result<()> {
        if self.outputs.insert(name.to_string(), node).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate output `{name}`")));
        }
        Ok(())
    }

    pub fn build(self) -> Graph {
        Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            taps: self.taps,
            outputs: self.outputs,
        }
    }
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tap_id(&self, name: &str) -> Result<NodeId> {
        self.taps
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownTap(name.to_string()))
    }

    pub fn tap_shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.nodes[self.tap_id(name)?].shape)
    }

    pub fn output_shape(&self, name: &str) -> Result<&[usize]> {
        let id = self.output_id(name)?;
        Ok(&self.nodes[id].shape)
    }

    pub fn input_shape(&self, name: &str) -> Result<&[usize]> {
        let id = self
            .inputs
            .get(name)
            .ok_or_else(|| Error::UnknownName(name.to_string()))?;
        Ok(&self.nodes[*id].shape)
    }

    pub fn tap_names(&self) -> impl Iterator<Item = &str> {
        self.taps.keys().map(String::as_str)
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// Taps shadow inputs of the same name.
    fn resolve(&self, name: &str) -> Result<NodeId> {
        self.taps
            .get(name)
            .or_else(|| self.inputs.get(name))
            .or_else(|| self.outputs.get(name))
            .copied()
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// Evaluates every node needed by the outputs. An overridden tap takes
    /// the supplied value and nothing upstream of it is evaluated unless
    /// another path requires it.
    pub fn forward(&self, inputs: &Feed, overrides: &Feed) -> Result<Forward<'_>> {
        self.forward_layered(&[inputs], overrides)
    }

    /// Like [`Graph::forward`], looking inputs up in several feeds in order
    /// (typically shared weights plus per-call data).
    pub fn forward_layered(&self, feeds: &[&Feed], overrides: &Feed) -> Result<Forward<'_>> {
        let n = self.nodes.len();
        let mut overridden = vec![false; n];
        for (name, value) in overrides {
            let id = self.tap_id(name)?;
            if value.shape() != self.nodes[id].shape.as_slice() {
                return Err(Error::shape(
                    format!("override `{name}`"),
                    &self.nodes[id].shape,
                    value.shape(),
                ));
            }
            overridden[id] = true;
        }

        let mut needed = vec![false; n];
        let mut stack: Vec<NodeId> = self.outputs.values().copied().collect();
        while let Some(id) = stack.pop() {
            if needed[id] {
                continue;
            }
            needed[id] = true;
            if !overridden[id] {
                stack.extend(self.nodes[id].op.operands());
            }
        }

        let mut values: Vec<Option<Tensor>> = vec![None; n];
        for id in 0..n {
            if !needed[id] {
                continue;
            }
            let node = &self.nodes[id];
            let value = if overridden[id] {
                let name = self.taps.iter().find(|(_, &t)| t == id).map(|(k, _)| k);
                let name = name.expect("overridden node is a tap");
                overrides[name].clone()
            } else if let Op::Input(name) = &node.op {
                let v = feeds
                    .iter()
                    .find_map(|f| f.get(name))
                    .ok_or_else(|| Error::MissingInput(name.clone()))?;
                if v.shape() != node.shape.as_slice() {
                    return Err(Error::shape(format!("input `{name}`"), &node.shape, v.shape()));
                }
                v.clone()
            } else {
                let out = eval_op(&node.op, &node.shape, &values)?;
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("node {id} ({})", node.op.name())));
                }
                Tensor::from_parts_unchecked(node.shape.clone(), out)
            };
            values[id] = Some(value);
        }

        Ok(Forward {
            graph: self,
            values,
            overridden,
        })
    }
}

fn val(values: &[Option<Tensor>], id: NodeId) -> &Tensor {
    values[id].as_ref().expect("operand evaluated before use")
}

fn eval_op(op: &Op, shape: &[usize], values: &[Option<Tensor>]) -> Result<Vec<f64>> {
    let numel: usize = shape.iter().product();
    let (rows, cols) = as_matrix(shape);
    let out = match *op {
        Op::Input(_) => unreachable!("inputs are fed, not evaluated"),
        Op::MatMul(a, b) => {
            let (a, b) = (val(values, a), val(values, b));
            let k = a.shape()[1];
            let mut c = vec![0.0; numel];
            gemm(rows, k, cols, a.data(), false, b.data(), false, &mut c, false);
            c
        }
        Op::Transpose(a) => {
            let a = val(values, a);
            let mut c = vec![0.0; numel];
            kernels::transpose(a.shape()[0], a.shape()[1], a.data(), &mut c);
            c
        }
        Op::Add(a, b) => {
            let (a, b) = (val(values, a), val(values, b));
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
        }
        Op::AddRow(a, bias) => {
            let (a, bias) = (val(values, a), val(values, bias));
            let mut c = a.data().to_vec();
            for row in c.chunks_mut(cols) {
                for (v, b) in row.iter_mut().zip(bias.data()) {
                    *v += b;
                }
            }
            c
        }
        Op::Mul(a, b) => {
            let (a, b) = (val(values, a), val(values, b));
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()
        }
        Op::Scale(a, c) => val(values, a).data().iter().map(|x| x * c).collect(),
        Op::Relu(a) => val(values, a).data().iter().map(|x| x.max(0.0)).collect(),
        Op::Gelu(a) => val(values, a).data().iter().map(|&x| kernels::gelu(x)).collect(),
        Op::LayerNorm { x, gamma, beta } => {
            let (x, g, b) = (val(values, x), val(values, gamma), val(values, beta));
            let mut c = vec![0.0; numel];
            for (src, dst) in x.data().chunks(cols).zip(c.chunks_mut(cols)) {
                let (mean, rstd) = kernels::ln_stats(src);
                for j in 0..cols {
                    dst[j] = g.data()[j] * (src[j] - mean) * rstd + b.data()[j];
                }
            }
            c
        }
        Op::Softmax(a) => {
            let a = val(values, a);
            let mut c = vec![0.0; numel];
            for (src, dst) in a.data().chunks(cols).zip(c.chunks_mut(cols)) {
                kernels::softmax_row(src, dst);
            }
            c
        }
        Op::Embedding { table, ids } => {
            let (table, ids) = (val(values, table), val(values, ids));
            let vocab = table.shape()[0];
            let mut c = Vec::with_capacity(numel);
            for &id in ids.data() {
                let idx = id as usize;
                if id < 0.0 || id.fract() != 0.0 || idx >= vocab {
                    return Err(Error::InvalidInput(format!(
                        "embedding id {id} outside vocabulary of {vocab}"
                    )));
                }
                c.extend_from_slice(table.row(idx));
            }
            c
        }
        Op::MeanRows(a) => {
            let a = val(values, a);
            let (m, n) = as_matrix(a.shape());
            let mut c = vec![0.0; n];
            for row in a.data().chunks(n) {
                for (s, v) in c.iter_mut().zip(row) {
                    *s += v;
                }
            }
            c.iter_mut().for_each(|s| *s /= m as f64);
            c
        }
        Op::Sum(a) => vec![val(values, a).data().iter().sum()],
        Op::L2Normalize(a) => {
            let a = val(values, a);
            let mut c = a.data().to_vec();
            for row in c.chunks_mut(cols) {
                let r = kernels::l2_scale(row);
                row.iter_mut().for_each(|v| *v /= r);
            }
            c
        }
    };
    debug_assert_eq!(out.len(), rows * cols);
    Ok(out)
}

/// Result of a forward pass; owns every evaluated node value and supports
/// reverse-mode products against them.
pub struct Forward<'g> {
    graph: &'g Graph,
    values: Vec<Option<Tensor>>,
    overridden: Vec<bool>,
}

impl<'g> Forward<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn output(&self, name: &str) -> Result<&Tensor> {
        let id = self.graph.output_id(name)?;
        self.values[id]
            .as_ref()
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// Value of a tap, if it was evaluated (taps upstream of an override are not).
    pub fn tap(&self, name: &str) -> Result<&Tensor> {
        let id = self.graph.tap_id(name)?;
        self.values[id]
            .as_ref()
            .ok_or_else(|| Error::UnknownTap(format!("{name} (not evaluated)")))
    }

    pub fn taps(&self) -> BTreeMap<String, Tensor> {
        self.graph
            .taps
            .iter()
            .filter_map(|(k, &id)| self.values[id].as_ref().map(|v| (k.clone(), v.clone())))
            .collect()
    }

    pub fn outputs(&self) -> BTreeMap<String, Tensor> {
        self.graph
            .outputs
            .iter()
            .filter_map(|(k, &id)| self.values[id].as_ref().map(|v| (k.clone(), v.clone())))
            .collect()
    }

    /// Vector-Jacobian product of the seeded combination of outputs with
    /// respect to the named inputs and taps.
    pub fn vjp(&self, seeds: &[(&str, &Tensor)], wrt: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        let mut seed_vecs = Vec::with_capacity(seeds.len());
        for (name, seed) in seeds {
            let id = self.graph.output_id(name)?;
            let shape = &self.graph.nodes[id].shape;
            if seed.shape() != shape.as_slice() {
                return Err(Error::shape(format!("seed `{name}`"), shape, seed.shape()));
            }
            seed_vecs.push((id, seed.data().to_vec()));
        }
        let targets = wrt
            .iter()
            .map(|w| self.graph.resolve(w))
            .collect::<Result<Vec<_>>>()?;
        let grads = self.backward(seed_vecs, 1, &targets)?;
        Ok(wrt
            .iter()
            .zip(targets)
            .zip(grads)
            .map(|((name, id), g)| {
                let shape = self.graph.nodes[id].shape.clone();
                (name.to_string(), Tensor::from_parts_unchecked(shape, g))
            })
            .collect())
    }

    /// Runs `seeds.len()` independent vjps of one output in a single reverse
    /// sweep. Returns, per `wrt` name, the gradients stacked as
    /// `[seeds.len(), numel(wrt)]`.
    pub fn vjp_batch(
        &self,
        output: &str,
        seeds: &[Tensor],
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Tensor>> {
        let id = self.graph.output_id(output)?;
        let shape = &self.graph.nodes[id].shape;
        let batch = seeds.len();
        if batch == 0 {
            return Err(Error::Empty("vjp seed batch".into()));
        }
        let mut stacked = Vec::with_capacity(batch * shape.iter().product::<usize>());
        for seed in seeds {
            if seed.shape() != shape.as_slice() {
                return Err(Error::shape(format!("seed `{output}`"), shape, seed.shape()));
            }
            stacked.extend_from_slice(seed.data());
        }
        let targets = wrt
            .iter()
            .map(|w| self.graph.resolve(w))
            .collect::<Result<Vec<_>>>()?;
        let grads = self.backward(vec![(id, stacked)], batch, &targets)?;
        Ok(wrt
            .iter()
            .zip(targets)
            .zip(grads)
            .map(|((name, t), g)| {
                let numel = self.graph.nodes[t].shape.iter().product();
                (name.to_string(), Tensor::from_parts_unchecked(vec![batch, numel], g))
            })
            .collect())
    }

    /// Full Jacobian `[numel(output), numel(wrt)]`, one basis seed per row.
    pub fn jacobian(&self, output: &str, wrt: &str) -> Result<Tensor> {
        let shape = self.graph.output_shape(output)?.to_vec();
        let numel: usize = shape.iter().product();
        let seeds: Vec<Tensor> = (0..numel)
            .map(|k| {
                let mut e = Tensor::zeros(&shape);
                e.data_mut()[k] = 1.0;
                e
            })
            .collect();
        let mut out = self.vjp_batch(output, &seeds, &[wrt])?;
        Ok(out.remove(wrt).expect("requested gradient present"))
    }

    fn backward(
        &self,
        seeds: Vec<(NodeId, Vec<f64>)>,
        batch: usize,
        targets: &[NodeId],
    ) -> Result<Vec<Vec<f64>>> {
        let nodes = &self.graph.nodes;
        let n = nodes.len();
        let mut is_target = vec![false; n];
        for &t in targets {
            is_target[t] = true;
        }
        // Nodes whose cotangent can reach a target.
        let mut feeds_target = vec![false; n];
        for id in 0..n {
            if self.values[id].is_none() {
                continue;
            }
            feeds_target[id] = is_target[id]
                || (!self.overridden[id]
                    && nodes[id].op.operands().iter().any(|&o| feeds_target[o]));
        }

        let mut cot: Vec<Option<Vec<f64>>> = vec![None; n];
        for (id, seed) in seeds {
            accumulate(&mut cot, id, seed);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        for id in (0..n).rev() {
            if !feeds_target[id] {
                continue;
            }
            let Some(g) = cot[id].take() else { continue };
            if is_target[id] {
                grads[id] = Some(g.clone());
            }
            if self.overridden[id] {
                continue;
            }
            self.propagate(id, &g, batch, &feeds_target, &mut cot);
        }

        Ok(targets
            .iter()
            .map(|&t| {
                grads[t]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; batch * nodes[t].shape.iter().product::<usize>()])
            })
            .collect())
    }

    fn propagate(
        &self,
        id: NodeId,
        g: &[f64],
        batch: usize,
        live: &[bool],
        cot: &mut [Option<Vec<f64>>],
    ) {
        let node = &self.graph.nodes[id];
        let v = |i: NodeId| val(&self.values, i);
        let (rows, cols) = as_matrix(&node.shape);
        let numel = rows * cols;
        match node.op {
            Op::Input(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let k = av.shape()[1];
                if live[a] {
                    let mut da = vec![0.0; batch * rows * k];
                    gemm(batch * rows, cols, k, g, false, bv.data(), true, &mut da, false);
                    accumulate(cot, a, da);
                }
                if live[b] {
                    let mut db = vec![0.0; batch * k * cols];
                    for (gb, dst) in g.chunks(numel).zip(db.chunks_mut(k * cols)) {
                        gemm(k, rows, cols, av.data(), true, gb, false, dst, false);
                    }
                    accumulate(cot, b, db);
                }
            }
            Op::Transpose(a) => {
                if live[a] {
                    let mut da = vec![0.0; batch * numel];
                    for (gb, dst) in g.chunks(numel).zip(da.chunks_mut(numel)) {
                        kernels::transpose(rows, cols, gb, dst);
                    }
                    accumulate(cot, a, da);
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if live[x] {
                        accumulate(cot, x, g.to_vec());
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if live[a] {
                    accumulate(cot, a, g.to_vec());
                }
                if live[bias] {
                    let mut db = vec![0.0; batch * cols];
                    for (gb, dst) in g.chunks(numel).zip(db.chunks_mut(cols)) {
                        for row in gb.chunks(cols) {
                            for (d, r) in dst.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                    }
                    accumulate(cot, bias, db);
                }
            }
            Op::Mul(a, b) => {
                for (x, other) in [(a, b), (b, a)] {
                    if live[x] {
                        let ov = v(other).data();
                        let d = g
                            .chunks(numel)
                            .flat_map(|gb| gb.iter().zip(ov).map(|(gi, oi)| gi * oi))
                            .collect();
                        accumulate(cot, x, d);
                    }
                }
            }
            Op::Scale(a, c) => {
                if live[a] {
                    accumulate(cot, a, g.iter().map(|x| x * c).collect());
                }
            }
            Op::Relu(a) | Op::Gelu(a) => {
                if live[a] {
                    let xv = v(a).data();
                    let deriv: Vec<f64> = match node.op {
                        Op::Relu(_) => xv.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect(),
                        _ => xv.iter().map(|&x| kernels::gelu_grad(x)).collect(),
                    };
                    let d = g
                        .chunks(numel)
                        .flat_map(|gb| gb.iter().zip(&deriv).map(|(gi, di)| gi * di))
                        .collect();
                    accumulate(cot, a, d);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (xv, gv) = (v(x).data(), v(gamma).data());
                let stats: Vec<(f64, f64)> = xv.chunks(cols).map(kernels::ln_stats).collect();
                let mut dx = live[x].then(|| vec![0.0; batch * numel]);
                let mut dg = live[gamma].then(|| vec![0.0; batch * cols]);
                let mut dbeta = live[beta].then(|| vec![0.0; batch * cols]);
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for b in 0..batch {
                    for i in 0..rows {
                        let (mean, rstd) = stats[i];
                        let src = &xv[i * cols..(i + 1) * cols];
                        let off = b * numel + i * cols;
                        let gr = &g[off..off + cols];
                        for j in 0..cols {
                            xhat[j] = (src[j] - mean) * rstd;
                            dxhat[j] = gr[j] * gv[j];
                        }
                        if let Some(dg) = dg.as_mut() {
                            for j in 0..cols {
                                dg[b * cols + j] += gr[j] * xhat[j];
                            }
                        }
                        if let Some(db) = dbeta.as_mut() {
                            for j in 0..cols {
                                db[b * cols + j] += gr[j];
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let nf = cols as f64;
                            let m1 = dxhat.iter().sum::<f64>() / nf;
                            let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                            for j in 0..cols {
                                dx[off + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                            }
                        }
                    }
                }
                if let Some(d) = dx {
                    accumulate(cot, x, d);
                }
                if let Some(d) = dg {
                    accumulate(cot, gamma, d);
                }
                if let Some(d) = dbeta {
                    accumulate(cot, beta, d);
                }
            }
            Op::Softmax(a) => {
                if live[a] {
                    let y = val(&self.values, id).data();
                    let mut d = vec![0.0; batch * numel];
                    for b in 0..batch {
                        for i in 0..rows {
                            let off = b * numel + i * cols;
                            let yr = &y[i * cols..(i + 1) * cols];
                            let gr = &g[off..off + cols];
                            let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for j in 0..cols {
                                d[off + j] = yr[j] * (gr[j] - s);
                            }
                        }
                    }
                    accumulate(cot, a, d);
                }
            }
            Op::Embedding { table, ids } => {
                if live[table] {
                    let tshape = v(table).shape();
                    let tnumel = tshape[0] * tshape[1];
                    let mut d = vec![0.0; batch * tnumel];
                    for b in 0..batch {
                        for (l, &id) in v(ids).data().iter().enumerate() {
                            let dst = &mut d[b * tnumel + id as usize * cols..][..cols];
                            let src = &g[b * numel + l * cols..][..cols];
                            for (x, y) in dst.iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    }
                    accumulate(cot, table, d);
                }
                // ids carry no gradient
            }
            Op::MeanRows(a) => {
                if live[a] {
                    let (m, n) = as_matrix(v(a).shape());
                    let inv = 1.0 / m as f64;
                    let mut d = Vec::with_capacity(batch * m * n);
                    for gb in g.chunks(n) {
                        for _ in 0..m {
                            d.extend(gb.iter().map(|x| x * inv));
                        }
                    }
                    accumulate(cot, a, d);
                }
            }
            Op::Sum(a) => {
                if live[a] {
                    let an = v(a).numel();
                    let d = g.iter().flat_map(|&gb| std::iter::repeat_n(gb, an)).collect();
                    accumulate(cot, a, d);
                }
            }
            Op::L2Normalize(a) => {
                if live[a] {
                    let (xv, y) = (v(a).data(), val(&self.values, id).data());
                    let scales: Vec<f64> = xv.chunks(cols).map(kernels::l2_scale).collect();
                    let mut d = vec![0.0; batch * numel];
                    for b in 0..batch {
                        for i in 0..rows {
                            let off = b * numel + i * cols;
                            let yr = &y[i * cols..(i + 1) * cols];
                            let gr = &g[off..off + cols];
                            let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for j in 0..cols {
                                d[off + j] = (gr[j] - yr[j] * s) / scales[i];
                            }
                        }
                    }
                    accumulate(cot, a, d);
                }
            }
        }
    }
}

fn accumulate(cot: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
    match &mut cot[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot => *slot = Some(contribution),
    }
}

/// One entry of a batched forward + vjp evaluation.
#[derive(Clone, Debug)]
pub struct BatchEntry {
    pub inputs: Feed,
    pub overrides: Feed,
    pub seeds: Vec<(String, Tensor)>,
}

impl Graph {
    /// Evaluates forward + vjp for each entry independently. All entries must
    /// feed the same names with the same shapes.
    pub fn batched_forward_vjp(
        &self,
        batch: &[BatchEntry],
        wrt: &[&str],
    ) -> Result<Vec<BTreeMap<String, Tensor>>> {
        let Some(first) = batch.first() else {
            return Ok(Vec::new());
        };
        let signature = |e: &BatchEntry| {
            let shapes = |f: &Feed| {
                f.iter()
                    .map(|(k, v)| (k.clone(), v.shape().to_vec()))
                    .collect::<Vec<_>>()
            };
            let seeds: Vec<_> = e
                .seeds
                .iter()
                .map(|(k, v)| (k.clone(), v.shape().to_vec()))
                .collect();
            (shapes(&e.inputs), shapes(&e.overrides), seeds)
        };
        let reference = signature(first);
        for (i, e) in batch.iter().enumerate().skip(1) {
            if signature(e) != reference {
                return Err(Error::InvalidInput(format!(
                    "batch entry {i} has shapes differing from entry 0"
                )));
            }
        }
        batch
            .iter()
            .map(|e| {
                let fwd = self.forward(&e.inputs, &e.overrides)?;
                let seeds: Vec<(&str, &Tensor)> =
                    e.seeds.iter().map(|(k, v)| (k.as_str(), v)).collect();
                fwd.vjp(&seeds, wrt)
            })
            .collect()
    }
}

//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! A [`Var`] wraps a value and, when any of its inputs requires a gradient,
//! the closure that maps the output gradient back onto those inputs. Graphs
//! are freed when the last `Var` referencing them is dropped.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{self, Conv2dSpec};
use crate::tensor::Tensor;

pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Result<Vec<Option<Tensor>>>>;

struct GradFn {
    op: &'static str,
    inputs: Vec<Var>,
    backward: BackwardFn,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    name: Option<String>,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("name", &self.0.name)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.op))
            .field("shape", &self.0.value.shape())
            .finish()
    }
}

impl Var {
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            value,
            requires_grad: false,
            name: None,
            grad_fn: None,
        }))
    }

    /// A named leaf whose gradient is reported by [`grad_of`].
    pub fn param(name: impl Into<String>, value: Tensor) -> Var {
        Var(Rc::new(Node {
            value,
            requires_grad: true,
            name: Some(name.into()),
            grad_fn: None,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn name(&self) -> Option<&str> {
        self.0.name.as_deref()
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.value().clone())
    }

    pub(crate) fn from_op(
        op: &'static str,
        value: Tensor,
        inputs: Vec<Var>,
        backward: impl Fn(&BackwardCtx) -> Result<Vec<Option<Tensor>>> + 'static,
    ) -> Result<Var> {
        value.ensure_finite(op)?;
        if !inputs.iter().any(Var::requires_grad) {
            return Ok(Var::constant(value));
        }
        Ok(Var(Rc::new(Node {
            value,
            requires_grad: true,
            name: None,
            grad_fn: Some(GradFn {
                op,
                inputs,
                backward: Box::new(backward),
            }),
        })))
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }
}

/// Gradients of a scalar with respect to every named leaf that reached it.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.by_name
            .get(name)
            .ok_or_else(|| Error::Grad(format!("leaf `{name}` is not on the recorded graph")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }
}

fn accumulate(slot: &mut Tensor, g: &Tensor) {
    slot.data_mut()
        .iter_mut()
        .zip(g.data())
        .for_each(|(a, b)| *a += b);
}

fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((var, expanded)) = stack.pop() {
        if expanded {
            order.push(var);
            continue;
        }
        if !seen.insert(var.key()) {
            continue;
        }
        stack.push((var.clone(), true));
        if let Some(gf) = &var.0.grad_fn {
            for inp in gf.inputs.iter().filter(|v| v.requires_grad()) {
                if !seen.contains(&inp.key()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
    }
    order
}

/// Reverse-mode gradients of a one-element `output`.
pub fn grad_of(output: &Var) -> Result<Gradients> {
    if output.value().numel() != 1 {
        return Err(Error::Grad(format!(
            "output must be scalar, shape is {:?}",
            output.shape()
        )));
    }
    let mut result = Gradients::default();
    if !output.requires_grad() {
        return Ok(result);
    }
    let order = topo_order(output);
    let mut grads: HashMap<*const Node, Tensor> = HashMap::new();
    grads.insert(output.key(), Tensor::ones(output.shape()));
    for var in order.iter().rev() {
        let Some(g) = grads.remove(&var.key()) else {
            continue;
        };
        let node = &var.0;
        let Some(gf) = &node.grad_fn else {
            if let Some(name) = &node.name {
                match result.by_name.get_mut(name) {
                    Some(slot) => accumulate(slot, &g),
                    None => {
                        result.by_name.insert(name.clone(), g);
                    }
                }
            }
            continue;
        };
        let ctx = BackwardCtx {
            grad: &g,
            inputs: gf.inputs.iter().map(Var::value).collect(),
            output: &node.value,
            needs: gf.inputs.iter().map(Var::requires_grad).collect(),
        };
        let input_grads = (gf.backward)(&ctx)?;
        debug_assert_eq!(input_grads.len(), gf.inputs.len(), "{}", gf.op);
        for (inp, ig) in gf.inputs.iter().zip(input_grads) {
            let Some(ig) = ig else { continue };
            if !inp.requires_grad() {
                continue;
            }
            if ig.shape() != inp.shape() {
                return Err(Error::Grad(format!(
                    "{}: gradient shape {:?} does not match input {:?}",
                    gf.op,
                    ig.shape(),
                    inp.shape()
                )));
            }
            match grads.get_mut(&inp.key()) {
                Some(slot) => accumulate(slot, &ig),
                None => {
                    grads.insert(inp.key(), ig);
                }
            }
        }
    }
    Ok(result)
}

/// `(outer, len, inner)` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    Ok(())
}

fn flip_data(data: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..len {
            let src = (o * len + i) * inner;
            let dst = (o * len + (len - 1 - i)) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

fn row_len(x: &Tensor, row: &Tensor, op: &'static str) -> Result<usize> {
    let d = *x.shape().last().unwrap_or(&1);
    if row.shape() != [d] {
        return Err(Error::shape(
            op,
            format!(
                "row {:?} does not match trailing dim of {:?}",
                row.shape(),
                x.shape()
            ),
        ));
    }
    Ok(d)
}

impl Var {
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Result<Var> {
        let y = self.value().map(f);
        Var::from_op(op, y, vec![self.clone()], move |c| {
            let gx = c
                .grad
                .data()
                .iter()
                .zip(c.inputs[0].data())
                .zip(c.output.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            Ok(vec![Some(Tensor::from_parts(
                c.inputs[0].shape().to_vec(),
                gx,
            ))])
        })
    }

    fn binary(
        &self,
        other: &Var,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
        df: impl Fn(f32, f32) -> (f32, f32) + 'static,
    ) -> Result<Var> {
        let y = self
            .value()
            .zip_map(other.value(), f)
            .map_err(|_| Error::shape(op, format!("{:?} vs {:?}", self.shape(), other.shape())))?;
        Var::from_op(op, y, vec![self.clone(), other.clone()], move |c| {
            let n = c.grad.numel();
            let (mut ga, mut gb) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for ((&g, &a), &b) in c
                .grad
                .data()
                .iter()
                .zip(c.inputs[0].data())
                .zip(c.inputs[1].data())
            {
                let (da, db) = df(a, b);
                ga.push(g * da);
                gb.push(g * db);
            }
            let shape = c.grad.shape().to_vec();
            Ok(vec![
                c.needs[0].then(|| Tensor::from_parts(shape.clone(), ga)),
                c.needs[1].then(|| Tensor::from_parts(shape, gb)),
            ])
        })
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, "div", |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
    }

    pub fn minimum(&self, other: &Var) -> Result<Var> {
        self.binary(other, "minimum", f32::min, |a, b| {
            if a <= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        })
    }

    pub fn maximum(&self, other: &Var) -> Result<Var> {
        self.binary(other, "maximum", f32::max, |a, b| {
            if a >= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        })
    }

    pub fn scale(&self, c: f32) -> Result<Var> {
        self.unary("scale", |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f32) -> Result<Var> {
        self.unary("add_scalar", |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary("exp", f32::exp, |_, y| y)
    }

    pub fn ln(&self) -> Result<Var> {
        self.unary("ln", f32::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&self) -> Result<Var> {
        self.unary("abs", f32::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(
            "relu",
            |x| x.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary("sigmoid", nn::sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self) -> Result<Var> {
        self.unary("silu", nn::silu_scalar, |x, _| {
            let s = nn::sigmoid_scalar(x);
            s + x * s * (1.0 - s)
        })
    }

    pub fn softplus(&self) -> Result<Var> {
        self.unary("softplus", nn::softplus_scalar, |x, _| {
            nn::sigmoid_scalar(x)
        })
    }

    /// `x + row`, broadcasting `row: [D]` over the trailing axis.
    pub fn add_row(&self, row: &Var) -> Result<Var> {
        let d = row_len(self.value(), row.value(), "add_row")?;
        let mut y = self.value().clone();
        for chunk in y.data_mut().chunks_mut(d) {
            chunk
                .iter_mut()
                .zip(row.value().data())
                .for_each(|(a, b)| *a += b);
        }
        Var::from_op("add_row", y, vec![self.clone(), row.clone()], move |c| {
            let grow = c.needs[1].then(|| {
                let mut acc = vec![0.0f32; d];
                for chunk in c.grad.data().chunks(d) {
                    acc.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                Tensor::from_parts(vec![d], acc)
            });
            Ok(vec![c.needs[0].then(|| c.grad.clone()), grow])
        })
    }

    /// `x ⊙ row`, broadcasting `row: [D]` over the trailing axis.
    pub fn mul_row(&self, row: &Var) -> Result<Var> {
        let d = row_len(self.value(), row.value(), "mul_row")?;
        let mut y = self.value().clone();
        for chunk in y.data_mut().chunks_mut(d) {
            chunk
                .iter_mut()
                .zip(row.value().data())
                .for_each(|(a, b)| *a *= b);
        }
        Var::from_op("mul_row", y, vec![self.clone(), row.clone()], move |c| {
            let (x, r) = (c.inputs[0], c.inputs[1]);
            let gx = c.needs[0].then(|| {
                let mut g = c.grad.clone();
                for chunk in g.data_mut().chunks_mut(d) {
                    chunk.iter_mut().zip(r.data()).for_each(|(a, b)| *a *= b);
                }
                g
            });
            let gr = c.needs[1].then(|| {
                let mut acc = vec![0.0f32; d];
                for (gc, xc) in c.grad.data().chunks(d).zip(x.data().chunks(d)) {
                    for i in 0..d {
                        acc[i] += gc[i] * xc[i];
                    }
                }
                Tensor::from_parts(vec![d], acc)
            });
            Ok(vec![gx, gr])
        })
    }

    pub fn sum(&self) -> Result<Var> {
        let y = Tensor::scalar(self.value().sum());
        Var::from_op("sum", y, vec![self.clone()], |c| {
            Ok(vec![Some(Tensor::full(
                c.inputs[0].shape(),
                c.grad.data()[0],
            ))])
        })
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().numel() as f32;
        self.sum()?.scale(1.0 / n)
    }

    pub fn linear(&self, w: &Var, b: Option<&Var>) -> Result<Var> {
        let y = nn::linear(self.value(), w.value(), b.map(Var::value))?;
        let mut inputs = vec![self.clone(), w.clone()];
        inputs.extend(b.cloned());
        Var::from_op("linear", y, inputs, |c| {
            let needs = [
                c.needs[0],
                c.needs[1],
                c.needs.get(2).copied().unwrap_or(false),
            ];
            let g = nn::linear_backward(c.inputs[0], c.inputs[1], c.grad, needs)?;
            let mut out = vec![g.x, g.w];
            if c.inputs.len() == 3 {
                out.push(g.b);
            }
            Ok(out)
        })
    }

    pub fn conv2d(&self, w: &Var, b: Option<&Var>, spec: Conv2dSpec) -> Result<Var> {
        let y = nn::conv2d(self.value(), w.value(), b.map(Var::value), spec)?;
        let mut inputs = vec![self.clone(), w.clone()];
        inputs.extend(b.cloned());
        Var::from_op("conv2d", y, inputs, move |c| {
            let needs = [
                c.needs[0],
                c.needs[1],
                c.needs.get(2).copied().unwrap_or(false),
            ];
            let g = nn::conv2d_backward(c.inputs[0], c.inputs[1], c.grad, spec, needs)?;
            let mut out = vec![g.x, g.w];
            if c.inputs.len() == 3 {
                out.push(g.b);
            }
            Ok(out)
        })
    }

    pub fn conv_transpose2d(&self, w: &Var, b: Option<&Var>, stride: usize) -> Result<Var> {
        let y = nn::conv_transpose2d(self.value(), w.value(), b.map(Var::value), stride)?;
        let mut inputs = vec![self.clone(), w.clone()];
        inputs.extend(b.cloned());
        Var::from_op("conv_transpose2d", y, inputs, move |c| {
            let needs = [
                c.needs[0],
                c.needs[1],
                c.needs.get(2).copied().unwrap_or(false),
            ];
            let g = nn::conv_transpose2d_backward(c.inputs[0], c.inputs[1], c.grad, stride, needs)?;
            let mut out = vec![g.x, g.w];
            if c.inputs.len() == 3 {
                out.push(g.b);
            }
            Ok(out)
        })
    }

    pub fn conv1d_causal(&self, w: &Var, b: Option<&Var>) -> Result<Var> {
        let y = nn::conv1d_causal(self.value(), w.value(), b.map(Var::value))?;
        let mut inputs = vec![self.clone(), w.clone()];
        inputs.extend(b.cloned());
        Var::from_op("conv1d", y, inputs, |c| {
            let needs = [
                c.needs[0],
                c.needs[1],
                c.needs.get(2).copied().unwrap_or(false),
            ];
            let g = nn::conv1d_causal_backward(c.inputs[0], c.inputs[1], c.grad, needs)?;
            let mut out = vec![g.x, g.w];
            if c.inputs.len() == 3 {
                out.push(g.b);
            }
            Ok(out)
        })
    }

    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f32) -> Result<Var> {
        let y = nn::layer_norm(self.value(), gamma.value(), beta.value(), eps)?;
        Var::from_op(
            "layer_norm",
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |c| {
                let [gx, gg, gb] =
                    nn::layer_norm_backward(c.inputs[0], c.inputs[1], c.inputs[2], c.grad, eps)?;
                Ok(vec![Some(gx), Some(gg), Some(gb)])
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let y = self.value().reshape(shape)?;
        Var::from_op("reshape", y, vec![self.clone()], |c| {
            Ok(vec![Some(c.grad.reshape(c.inputs[0].shape())?)])
        })
    }

    pub fn transpose2d(&self) -> Result<Var> {
        let y = self.value().transpose2d()?;
        Var::from_op("transpose2d", y, vec![self.clone()], |c| {
            Ok(vec![Some(c.grad.transpose2d()?)])
        })
    }

    /// Reverses the order of elements along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Var> {
        check_axis(self.shape(), axis, "flip")?;
        let shape = self.shape().to_vec();
        let y = Tensor::from_parts(shape.clone(), flip_data(self.value().data(), &shape, axis));
        Var::from_op("flip", y, vec![self.clone()], move |c| {
            Ok(vec![Some(Tensor::from_parts(
                shape.clone(),
                flip_data(c.grad.data(), &shape, axis),
            ))])
        })
    }

    /// Elements `start .. start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        check_axis(self.shape(), axis, "narrow")?;
        let in_shape = self.shape().to_vec();
        let (outer, full, inner) = split_axis(&in_shape, axis);
        if len == 0 || start + len > full {
            return Err(Error::shape(
                "narrow",
                format!(
                    "range {start}..{} out of bounds for axis {axis} of {in_shape:?}",
                    start + len
                ),
            ));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.value().data();
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = in_shape.clone();
        shape[axis] = len;
        Var::from_op(
            "narrow",
            Tensor::from_parts(shape, data),
            vec![self.clone()],
            move |c| {
                let mut g = vec![0.0f32; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    g[base..base + len * inner]
                        .copy_from_slice(&c.grad.data()[o * len * inner..(o + 1) * len * inner]);
                }
                Ok(vec![Some(Tensor::from_parts(in_shape.clone(), g))])
            },
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid(OP, "nothing to concatenate"))?;
        check_axis(first.shape(), axis, OP)?;
        for p in &parts[1..] {
            let (a, b) = (first.shape(), p.shape());
            if a.len() != b.len()
                || a.iter()
                    .zip(b)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape(
                    OP,
                    format!("{a:?} and {b:?} differ outside axis {axis}"),
                ));
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.value().data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Var::from_op(
            OP,
            Tensor::from_parts(shape, data),
            parts.iter().map(|&p| p.clone()).collect(),
            move |c| {
                let mut out: Vec<Vec<f32>> = lens
                    .iter()
                    .map(|&l| Vec::with_capacity(outer * l * inner))
                    .collect();
                let g = c.grad.data();
                let mut off = 0;
                for _ in 0..outer {
                    for (buf, &l) in out.iter_mut().zip(&lens) {
                        buf.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                Ok(out
                    .into_iter()
                    .zip(&part_shapes)
                    .zip(&c.needs)
                    .map(|((d, s), &need)| need.then(|| Tensor::from_parts(s.clone(), d)))
                    .collect())
            },
        )
    }

    /// Picks elements by flat row-major index into a `[k]` vector.
    pub fn gather(&self, indices: &[usize]) -> Result<Var> {
        let n = self.value().numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of bounds for {n} elements"),
            ));
        }
        if indices.is_empty() {
            return Err(Error::invalid("gather", "no indices"));
        }
        let src = self.value().data();
        let y = Tensor::from_parts(
            vec![indices.len()],
            indices.iter().map(|&i| src[i]).collect(),
        );
        let idx = indices.to_vec();
        Var::from_op("gather", y, vec![self.clone()], move |c| {
            let mut g = vec![0.0f32; c.inputs[0].numel()];
            for (&i, &gv) in idx.iter().zip(c.grad.data()) {
                g[i] += gv;
            }
            Ok(vec![Some(Tensor::from_parts(
                c.inputs[0].shape().to_vec(),
                g,
            ))])
        })
    }
}

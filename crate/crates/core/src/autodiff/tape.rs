//! Tensor-level reverse-mode tape.
//!
//! Every node holds a flat `Vec<f64>` value. Heavy kernels (field queries,
//! compositing, extraction, rasterization) are recorded as custom nodes
//! that carry their own vector-Jacobian product; the elementwise ops below
//! glue them into losses.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one node: receives the adjoint of the node's
/// output and accumulates into its parents through the [`GradSink`].
pub trait Backward {
    fn backward(&self, grad_out: &[f64], values: &Values<'_>, sink: &mut GradSink<'_>);
}

impl<F> Backward for F
where
    F: Fn(&[f64], &Values<'_>, &mut GradSink<'_>),
{
    fn backward(&self, grad_out: &[f64], values: &Values<'_>, sink: &mut GradSink<'_>) {
        self(grad_out, values, sink)
    }
}

struct Node<'a> {
    value: Vec<f64>,
    len: usize,
    requires_grad: bool,
    backward: Option<Box<dyn Backward + 'a>>,
}

/// Read access to node values during the backward sweep.
pub struct Values<'n> {
    nodes: &'n [Node<'n>],
}

impl Values<'_> {
    pub fn get(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }
}

/// Write access to the adjoints of nodes recorded before the current one.
pub struct GradSink<'g> {
    grads: &'g mut [Vec<f64>],
    lens: &'g [usize],
    requires: &'g [bool],
}

impl GradSink<'_> {
    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.requires.get(id.0).copied().unwrap_or(false)
    }

    /// Mutable adjoint buffer of `id`, or `None` for constants.
    pub fn slot(&mut self, id: NodeId) -> Option<&mut [f64]> {
        if !self.requires_grad(id) {
            return None;
        }
        let g = &mut self.grads[id.0];
        if g.is_empty() {
            *g = vec![0.0; self.lens[id.0]];
        }
        Some(g.as_mut_slice())
    }

    /// Moves an adjoint buffer out so several can be written at once.
    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.slot(id)?;
        Some(std::mem::take(&mut self.grads[id.0]))
    }

    pub fn put(&mut self, id: NodeId, buf: Vec<f64>) {
        self.grads[id.0] = buf;
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable leaf holding `value`.
    pub fn leaf(&mut self, value: Vec<f64>) -> NodeId {
        let len = value.len();
        self.push_node(value, len, true, None)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        let len = value.len();
        self.push_node(value, len, false, None)
    }

    /// Gradient accumulator of `len` entries whose value lives outside the
    /// tape (model parameters read directly by the kernels).
    pub fn grad_leaf(&mut self, len: usize) -> NodeId {
        self.push_node(Vec::new(), len, true, None)
    }

    /// Records a node computed from `parents`.
    pub fn custom(
        &mut self,
        parents: &[NodeId],
        value: Vec<f64>,
        backward: impl Backward + 'a,
    ) -> NodeId {
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let len = value.len();
        let bw: Option<Box<dyn Backward + 'a>> = if requires {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(value, len, requires, bw)
    }

    fn push_node(
        &mut self,
        value: Vec<f64>,
        len: usize,
        requires_grad: bool,
        backward: Option<Box<dyn Backward + 'a>>,
    ) -> NodeId {
        self.nodes.push(Node {
            value,
            len,
            requires_grad,
            backward,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let n = self.nodes[loss.0].len;
        if n != 1 {
            return Err(Error::NonScalarLoss(n));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, lens: self.lens() });
        }
        grads[loss.0] = vec![1.0];
        let lens = self.lens();
        let requires: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let values = Values { nodes: &self.nodes };
        for i in (0..=loss.0).rev() {
            let Some(bw) = &self.nodes[i].backward else {
                continue;
            };
            if grads[i].is_empty() {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let mut sink = GradSink {
                grads: lower,
                lens: &lens[..i],
                requires: &requires[..i],
            };
            bw.backward(&upper[0], &values, &mut sink);
        }
        Ok(Gradients { grads, lens })
    }

    fn lens(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.len).collect()
    }

    // ---- elementwise and reduction ops ----

    fn map_unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'a) -> NodeId {
        let value: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        self.custom(&[x], value, move |g: &[f64], vals: &Values<'_>, sink: &mut GradSink<'_>| {
            let xv = vals.get(x);
            if let Some(gx) = sink.slot(x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * df(xv[i], g[i]);
                }
            }
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = zip_with(self.value(a), self.value(b), |x, y| x + y);
        self.custom(&[a, b], value, move |g: &[f64], _: &Values<'_>, sink: &mut GradSink<'_>| {
            for id in [a, b] {
                if let Some(s) = sink.slot(id) {
                    add_into(s, g);
                }
            }
        })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = zip_with(self.value(a), self.value(b), |x, y| x - y);
        self.custom(&[a, b], value, move |g: &[f64], _: &Values<'_>, sink: &mut GradSink<'_>| {
            if let Some(s) = sink.slot(a) {
                add_into(s, g);
            }
            if let Some(s) = sink.slot(b) {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si -= gi;
                }
            }
        })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = zip_with(self.value(a), self.value(b), |x, y| x * y);
        self.custom(&[a, b], value, move |g: &[f64], vals: &Values<'_>, sink: &mut GradSink<'_>| {
            let (av, bv) = (vals.get(a), vals.get(b));
            if let Some(s) = sink.slot(a) {
                for i in 0..g.len() {
                    s[i] += g[i] * bv[i];
                }
            }
            if let Some(s) = sink.slot(b) {
                for i in 0..g.len() {
                    s[i] += g[i] * av[i];
                }
            }
        })
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        self.map_unary(x, |v| v * k, move |_, _| k)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.map_unary(x, |v| v * v, |v, _| 2.0 * v)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.map_unary(x, f64::exp, |v, _| v.exp())
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.map_unary(x, softplus, |v, _| sigmoid(v))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).iter().sum();
        self.custom(&[x], vec![s], move |g: &[f64], _: &Values<'_>, sink: &mut GradSink<'_>| {
            if let Some(gx) = sink.slot(x) {
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
        })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Copy of `x[range]`.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.value(x)[start..start + len].to_vec();
        self.custom(&[x], value, move |g: &[f64], _: &Values<'_>, sink: &mut GradSink<'_>| {
            if let Some(gx) = sink.slot(x) {
                add_into(&mut gx[start..start + len], g);
            }
        })
    }

    /// `out[i] = x[index[i]]`.
    pub fn gather(&mut self, x: NodeId, index: Vec<usize>) -> NodeId {
        let xv = self.value(x);
        let value = index.iter().map(|&i| xv[i]).collect();
        self.custom(&[x], value, move |g: &[f64], _: &Values<'_>, sink: &mut GradSink<'_>| {
            if let Some(gx) = sink.slot(x) {
                for (gi, &i) in g.iter().zip(&index) {
                    gx[i] += gi;
                }
            }
        })
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, terms: &[NodeId]) -> NodeId {
        let v: f64 = terms.iter().map(|&t| self.scalar(t)).sum();
        let ids = terms.to_vec();
        self.custom(terms, vec![v], move |g: &[f64], _: &Values<'_>, sink: &mut GradSink<'_>| {
            for &t in &ids {
                if let Some(s) = sink.slot(t) {
                    s[0] += g[0];
                }
            }
        })
    }
}

/// Adjoints after a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Adjoint of `id`; nodes the loss does not depend on yield zeros.
    pub fn get(&self, id: NodeId) -> Vec<f64> {
        let g = &self.grads[id.0];
        if g.is_empty() {
            vec![0.0; self.lens[id.0]]
        } else {
            g.clone()
        }
    }

    pub fn take(&mut self, id: NodeId) -> Vec<f64> {
        let g = std::mem::take(&mut self.grads[id.0]);
        if g.is_empty() {
            vec![0.0; self.lens[id.0]]
        } else {
            g
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "elementwise op on mismatched lengths");
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_of_parameter() {
        let mut t = Tape::new();
        let p = t.leaf(vec![3.0]);
        let l = t.square(p);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p), vec![6.0]);
    }

    #[test]
    fn independent_parameter_gets_zero() {
        let mut t = Tape::new();
        let p = t.leaf(vec![3.0]);
        let q = t.leaf(vec![2.0]);
        let l = t.square(q);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p), vec![0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let p = t.leaf(vec![1.0, 2.0]);
        let l = t.square(p);
        assert!(matches!(t.backward(l), Err(Error::NonScalarLoss(2))));
    }

    #[test]
    fn constant_graph_has_no_backward() {
        let mut t = Tape::new();
        let c = t.constant(vec![1.0, 2.0]);
        let s = t.sum(c);
        assert!(!t.requires_grad(s));
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(c), vec![0.0, 0.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut t = Tape::new();
        let p = t.leaf(vec![2.0, -1.0]);
        let a = t.mul(p, p);
        let b = t.add(a, p);
        let s = t.sum(b);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(p), vec![5.0, -1.0]);
    }

    #[test]
    fn summing_two_copies_doubles_gradient() {
        let build = |t: &mut Tape, p: NodeId| {
            let e = t.exp(p);
            let sp = t.softplus(e);
            t.mean(sp)
        };
        let mut t1 = Tape::new();
        let p1 = t1.leaf(vec![0.3, -0.2, 1.1]);
        let l1 = build(&mut t1, p1);
        let g1 = t1.backward(l1).unwrap().get(p1);

        let mut t2 = Tape::new();
        let p2 = t2.leaf(vec![0.3, -0.2, 1.1]);
        let a = build(&mut t2, p2);
        let b = build(&mut t2, p2);
        let l2 = t2.add_scalars(&[a, b]);
        let g2 = t2.backward(l2).unwrap().get(p2);
        for (x, y) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn gather_slice_and_sub() {
        let mut t = Tape::new();
        let p = t.leaf(vec![1.0, 2.0, 3.0]);
        let g = t.gather(p, vec![2, 0, 2]);
        let s = t.slice(p, 1, 2);
        let s2 = t.slice(g, 0, 2);
        let d = t.sub(s2, s);
        let sq = t.square(d);
        let l = t.sum(sq);
        // d = [3 - 2, 1 - 3] = [1, -2]
        assert_eq!(t.value(d), &[1.0, -2.0]);
        let gr = t.backward(l).unwrap().get(p);
        // dl/dd = [2, -4]; p2 via gather gets +2, p0 gets -4, p1 gets -2, p2 via slice gets +4
        assert_eq!(gr, vec![-4.0, -2.0, 6.0]);
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for y in [1e-3, 0.5, 1.0, 7.0, 45.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

use super::ops::{self, ConvGeometry, RoiWindow};
use super::{ParamId, ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeometry,
        patches: Vec<T>,
    },
    Relu(NodeId),
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    Mean(Vec<NodeId>),
    ElemMul {
        x: NodeId,
        s: NodeId,
    },
    ElemSub {
        a: NodeId,
        b: NodeId,
    },
    RoiPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    Fc {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Sigmoid(NodeId),
    SigmoidBce {
        logits: NodeId,
        picks: Vec<(usize, T)>,
    },
    SmoothL1 {
        x: NodeId,
        picks: Vec<(usize, T)>,
        norm: T,
    },
    WeightedSum(Vec<(NodeId, T)>),
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
}

/// A single forward pass recorded for reverse-mode differentiation.
///
/// Parameters are read from the borrowed store; [`Graph::backward`] returns
/// their gradients without touching the store.
pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

/// Parameter gradients produced by one backward pass.
pub struct Gradients<T> {
    pub(crate) by_param: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(id, g)| (*id, g))
    }

    /// Adds these gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.by_param {
            let p = store.get_mut(*id);
            for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *acc += *v;
            }
        }
    }
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match (&self.nodes[id.0].value, &self.nodes[id.0].op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => &self.store.get(*p).value,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.value(id).data()[0]
    }

    /// Hash of every ReLU sign and max-pool winner in the recorded pass. Two
    /// passes with equal signatures lie on the same linear piece of the
    /// non-smooth operations.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } | Op::RoiPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Parameters referenced so far, in id order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.param_nodes.keys().copied().collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let geom = ConvGeometry::new(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let (out, patches) = ops::conv2d_forward(&geom, self.value(x), self.value(w), self.value(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                patches,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, argmax) = ops::maxpool2_forward(self.value(x))?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }

    /// Element-wise mean of equally shaped tensors.
    pub fn mean(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("mean of zero tensors"))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let mut acc = self.value(first).clone();
        for &x in &xs[1..] {
            let v = self.value(x);
            if v.shape() != acc.shape() {
                return Err(Error::Shape {
                    op: "mean",
                    left: acc.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            for (a, b) in acc.data_mut().iter_mut().zip(v.data()) {
                *a += *b;
            }
        }
        let inv = T::one() / T::from_usize(xs.len()).unwrap();
        acc.data_mut().iter_mut().for_each(|a| *a *= inv);
        Ok(self.push(acc, Op::Mean(xs.to_vec())))
    }

    pub fn elem_mul(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let out = ops::elem_mul(self.value(x), self.value(s))?;
        Ok(self.push(out, Op::ElemMul { x, s }))
    }

    pub fn elem_sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::elem_sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::ElemSub { a, b }))
    }

    pub fn roi_pool(&mut self, x: NodeId, windows: &[RoiWindow], out: usize) -> Result<NodeId> {
        let (t, argmax) = ops::roi_pool_forward(self.value(x), windows, out)?;
        Ok(self.push(t, Op::RoiPool { x, argmax }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn fc(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::fc(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Fc { x, w, b }))
    }

    /// Mean binary cross-entropy of `sigmoid(logits[i])` against the picked
    /// labels, evaluated in the numerically stable logit form.
    pub fn sigmoid_bce(&mut self, logits: NodeId, picks: Vec<(usize, T)>) -> Result<NodeId> {
        let z = self.value(logits).data();
        if picks.is_empty() {
            return Err(Error::invalid("sigmoid_bce with no samples"));
        }
        let mut total = T::zero();
        for &(i, y) in &picks {
            let v = *z
                .get(i)
                .ok_or_else(|| Error::invalid(format!("sigmoid_bce index {i} out of range")))?;
            let softplus = v.max(T::zero()) + (-v.abs()).exp().ln_1p();
            total += softplus - y * v;
        }
        let n = T::from_usize(picks.len()).unwrap();
        Ok(self.push(Tensor::new(&[1], vec![total / n])?, Op::SigmoidBce { logits, picks }))
    }

    /// `sum_i smooth_l1(x[i] - target_i) / norm` with unit transition point.
    pub fn smooth_l1(&mut self, x: NodeId, picks: Vec<(usize, T)>, norm: T) -> Result<NodeId> {
        let xv = self.value(x).data();
        let half = T::from_f64_lossy(0.5);
        let mut total = T::zero();
        for &(i, t) in &picks {
            let v = *xv
                .get(i)
                .ok_or_else(|| Error::invalid(format!("smooth_l1 index {i} out of range")))?;
            let d = (v - t).abs();
            total += if d < T::one() { half * d * d } else { d - half };
        }
        Ok(self.push(Tensor::new(&[1], vec![total / norm])?, Op::SmoothL1 { x, picks, norm }))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let mut total = T::zero();
        for &(n, w) in terms {
            let v = self.value(n);
            if v.len() != 1 {
                return Err(Error::Shape {
                    op: "weighted_sum",
                    left: v.shape().to_vec(),
                    right: vec![1],
                });
            }
            total += w * v.data()[0];
        }
        Ok(self.push(Tensor::new(&[1], vec![total])?, Op::WeightedSum(terms.to_vec())))
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.value(id).shape().to_vec()
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: self.shape_of(loss),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(_) => {
                    grads[idx] = Some(dy);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    patches,
                } => {
                    let (dx, dw, db) = ops::conv2d_backward(geom, self.value(*w), patches, &dy);
                    self.acc(&mut grads, *x, &dx);
                    self.acc(&mut grads, *w, &dw);
                    self.acc(&mut grads, *b, &db);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let dx: Vec<T> = dy
                        .iter()
                        .zip(xv)
                        .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                        .collect();
                    self.acc(&mut grads, *x, &dx);
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[idx].value.as_ref().unwrap().data();
                    let dx: Vec<T> = dy
                        .iter()
                        .zip(y)
                        .map(|(g, s)| *g * *s * (T::one() - *s))
                        .collect();
                    self.acc(&mut grads, *x, &dx);
                }
                Op::MaxPool2 { x, argmax } | Op::RoiPool { x, argmax } => {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (g, &src) in dy.iter().zip(argmax) {
                        if src != usize::MAX {
                            dx[src] += *g;
                        }
                    }
                    self.acc(&mut grads, *x, &dx);
                }
                Op::GlobalAvgPool(x) => {
                    let xv = self.value(*x);
                    let (h, w, c) = xv.hwc();
                    let inv = T::one() / T::from_usize(h * w).unwrap();
                    let mut dx = Vec::with_capacity(xv.len());
                    for _ in 0..h * w {
                        dx.extend(dy.iter().take(c).map(|g| *g * inv));
                    }
                    self.acc(&mut grads, *x, &dx);
                }
                Op::Mean(xs) => {
                    let inv = T::one() / T::from_usize(xs.len()).unwrap();
                    let dx: Vec<T> = dy.iter().map(|g| *g * inv).collect();
                    for x in xs {
                        self.acc(&mut grads, *x, &dx);
                    }
                }
                Op::ElemMul { x, s } => {
                    let xv = self.value(*x).data();
                    let sv = self.value(*s).data();
                    let c = sv.len();
                    let mut dx = Vec::with_capacity(xv.len());
                    let mut ds = vec![T::zero(); c];
                    for (cell_g, cell_x) in dy.chunks_exact(c).zip(xv.chunks_exact(c)) {
                        for ch in 0..c {
                            dx.push(cell_g[ch] * sv[ch]);
                            ds[ch] += cell_g[ch] * cell_x[ch];
                        }
                    }
                    self.acc(&mut grads, *x, &dx);
                    self.acc(&mut grads, *s, &ds);
                }
                Op::ElemSub { a, b } => {
                    let blen = self.value(*b).len();
                    let mut db = vec![T::zero(); blen];
                    for chunk in dy.chunks_exact(blen) {
                        for (acc, g) in db.iter_mut().zip(chunk) {
                            *acc -= *g;
                        }
                    }
                    self.acc(&mut grads, *a, &dy);
                    self.acc(&mut grads, *b, &db);
                }
                Op::Reshape(x) => {
                    self.acc(&mut grads, *x, &dy);
                }
                Op::Fc { x, w, b } => {
                    let (n, fin, fout) = ops::fc_dims(self.value(*x), self.value(*w), self.value(*b))?;
                    let mut dw = vec![T::zero(); fin * fout];
                    T::gemm(fin, n, fout, self.value(*x).data(), true, &dy, false, &mut dw, T::zero());
                    let mut db = vec![T::zero(); fout];
                    for row in dy.chunks_exact(fout) {
                        for (acc, g) in db.iter_mut().zip(row) {
                            *acc += *g;
                        }
                    }
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(n, fout, fin, &dy, false, self.value(*w).data(), true, &mut dx, T::zero());
                    self.acc(&mut grads, *x, &dx);
                    self.acc(&mut grads, *w, &dw);
                    self.acc(&mut grads, *b, &db);
                }
                Op::SigmoidBce { logits, picks } => {
                    let z = self.value(*logits).data();
                    let scale = dy[0] / T::from_usize(picks.len()).unwrap();
                    let mut dz = vec![T::zero(); z.len()];
                    for &(i, y) in picks {
                        dz[i] += (ops::sigmoid_scalar(z[i]) - y) * scale;
                    }
                    self.acc(&mut grads, *logits, &dz);
                }
                Op::SmoothL1 { x, picks, norm } => {
                    let xv = self.value(*x).data();
                    let scale = dy[0] / *norm;
                    let mut dx = vec![T::zero(); xv.len()];
                    for &(i, t) in picks {
                        let d = xv[i] - t;
                        let g = if d.abs() < T::one() { d } else { d.signum() };
                        dx[i] += g * scale;
                    }
                    self.acc(&mut grads, *x, &dx);
                }
                Op::WeightedSum(terms) => {
                    for &(n, w) in terms {
                        self.acc(&mut grads, n, &[dy[0] * w]);
                    }
                }
            }
        }

        let by_param = self
            .param_nodes
            .iter()
            .filter_map(|(&pid, &node)| {
                grads[node.0].take().map(|g| {
                    let shape = self.store.get(pid).value.shape().to_vec();
                    (pid, Tensor::new(&shape, g).expect("gradient shape"))
                })
            })
            .collect();
        Ok(Gradients { by_param })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], id: NodeId, g: &[T]) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (a, v) in existing.iter_mut().zip(g) {
                    *a += *v;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fc_gradients_by_hand() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::new(&[2, 1], vec![3.0, -1.0]).unwrap()).unwrap();
        let b = store.add("b", Tensor::new(&[1], vec![0.5]).unwrap()).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(&[1, 2], vec![2.0, 4.0]).unwrap());
        let (wn, bn) = (g.param(w), g.param(b));
        let y = g.fc(x, wn, bn).unwrap();
        assert_eq!(g.scalar(y), 2.5);
        // loss = smooth_l1(y - 0) = 2.5 - 0.5, dloss/dy = 1
        let loss = g.smooth_l1(y, vec![(0, 0.0)], 1.0).unwrap();
        assert_eq!(g.scalar(loss), 2.0);
        let grads = g.backward(loss).unwrap();
        let by: BTreeMap<_, _> = grads.iter().collect();
        assert_eq!(by[&w].data(), &[2.0, 4.0]);
        assert_eq!(by[&b].data(), &[1.0]);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let z = g.input(Tensor::zeros(&[4]));
        let loss = g
            .sigmoid_bce(z, vec![(0, 1.0), (1, 0.0), (2, 1.0), (3, 0.0)])
            .unwrap();
        assert!((g.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn shared_parameter_has_one_node() {
        let mut store = ParamStore::<f32>::new();
        let p = store.add("p", Tensor::zeros(&[1])).unwrap();
        let mut g = Graph::new(&store);
        assert_eq!(g.param(p), g.param(p));
        assert_eq!(g.param_ids(), vec![p]);
    }
}

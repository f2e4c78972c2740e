//! Eager tape-based reverse-mode autodiff.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{concatenate, Axis, IxDyn, Slice};

use crate::store::{ParamId, ParamStore};

pub type Arr = ndarray::ArrayD<f64>;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) type BackFn = Box<dyn Fn(&Arr, &mut Gradients)>;

pub(crate) struct Node {
    pub(crate) value: Arc<Arr>,
    pub(crate) back: Option<BackFn>,
}

/// Per-node gradient buffer produced by [`Graph::backward`].
pub struct Gradients {
    g: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Arr> {
        self.g[id.0].as_ref()
    }

    pub(crate) fn add(&mut self, id: NodeId, contribution: Arr) {
        match &mut self.g[id.0] {
            Some(acc) => *acc += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// Forward tape. Holds computed values and the closures that propagate
/// gradients backwards. Values are computed eagerly as ops are recorded.
pub struct Graph<'s> {
    pub(crate) store: &'s ParamStore,
    mode: Mode,
    record: bool,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
    param_of_node: Vec<(ParamId, NodeId)>,
    buffer_updates: Vec<(ParamId, Arr)>,
}

impl<'s> Graph<'s> {
    pub fn train(store: &'s ParamStore) -> Self {
        Self::new(store, Mode::Train, true)
    }

    pub fn eval(store: &'s ParamStore) -> Self {
        Self::new(store, Mode::Eval, false)
    }

    pub fn new(store: &'s ParamStore, mode: Mode, record: bool) -> Self {
        Graph {
            store,
            mode,
            record,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            param_of_node: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.nodes[id.0].value
    }

    pub fn value_arc(&self, id: NodeId) -> Arc<Arr> {
        Arc::clone(&self.nodes[id.0].value)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().next().copied().unwrap()
    }

    pub(crate) fn push(&mut self, value: Arr, back: Option<BackFn>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: Arc::new(value),
            back: if self.record { back } else { None },
        });
        id
    }

    pub fn constant(&mut self, value: Arr) -> NodeId {
        self.push(value, None)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(Arr::from_elem(IxDyn(&[1]), v))
    }

    /// Insert a parameter as a leaf. Repeated calls for the same parameter
    /// return the same node so gradient contributions accumulate.
    pub fn param(&mut self, p: ParamId) -> NodeId {
        if let Some(id) = self.param_nodes.get(&p.0) {
            return *id;
        }
        let value = self.store.arc(p);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, back: None });
        self.param_nodes.insert(p.0, id);
        self.param_of_node.push((p, id));
        id
    }

    /// Queue a non-trainable buffer update (e.g. batch-norm running stats)
    /// to be applied by the trainer once the graph is dropped.
    pub fn queue_buffer_update(&mut self, p: ParamId, value: Arr) {
        self.buffer_updates.push((p, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Arr)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// reachable from the root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert!(
            self.value(root).len() == 1,
            "backward() requires a scalar root"
        );
        let mut grads = Gradients {
            g: vec![None; self.nodes.len()],
        };
        grads.g[root.0] = Some(Arr::from_elem(self.value(root).raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            if grads.g[i].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[i].back {
                let g = grads.g[i].clone().unwrap();
                back(&g, &mut grads);
            }
        }
        grads
    }

    /// Gradients of trainable parameters used in this graph, keyed by
    /// parameter id.
    pub fn param_grads(&self, grads: &Gradients) -> HashMap<usize, Arr> {
        let mut out = HashMap::new();
        for (p, node) in &self.param_of_node {
            if !self.store.is_trainable(*p) {
                continue;
            }
            if let Some(g) = grads.get(*node) {
                out.insert(p.0, g.clone());
            }
        }
        out
    }

    // ---------------------------------------------------------------
    // Elementwise binary operations with numpy-style broadcasting.
    // ---------------------------------------------------------------

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> NodeId {
        let va = self.value_arc(a);
        let vb = self.value_arc(b);
        let shape = broadcast_shape(va.shape(), vb.shape());
        let bav = va.broadcast(IxDyn(&shape)).expect("broadcast lhs");
        let bbv = vb.broadcast(IxDyn(&shape)).expect("broadcast rhs");
        let mut out = Arr::zeros(IxDyn(&shape));
        ndarray::Zip::from(&mut out)
            .and(&bav)
            .and(&bbv)
            .for_each(|o, &x, &y| *o = f(x, y));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        let back: BackFn = Box::new(move |g, sink| {
            let bav = va.broadcast(g.raw_dim()).unwrap();
            let bbv = vb.broadcast(g.raw_dim()).unwrap();
            let mut ga = g.clone();
            ndarray::Zip::from(&mut ga)
                .and(&bav)
                .and(&bbv)
                .for_each(|gi, &x, &y| *gi *= dfa(x, y));
            sink.add(a, sum_to_shape(&ga, &sa));
            let mut gb = g.clone();
            ndarray::Zip::from(&mut gb)
                .and(&bav)
                .and(&bbv)
                .for_each(|gi, &x, &y| *gi *= dfb(x, y));
            sink.add(b, sum_to_shape(&gb, &sb));
        });
        self.push(out, Some(back))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    // ---------------------------------------------------------------
    // Elementwise unary operations.
    // ---------------------------------------------------------------

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        // derivative as a function of (x, y=f(x))
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> NodeId {
        let va = self.value_arc(a);
        let out = va.mapv(&f);
        let vy = Arc::new(out.clone());
        let back: BackFn = Box::new(move |g, sink| {
            let mut ga = g.clone();
            ndarray::Zip::from(&mut ga)
                .and(&*va)
                .and(&*vy)
                .for_each(|gi, &x, &y| *gi *= df(x, y));
            sink.add(a, ga);
        });
        self.push(out, Some(back))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    pub fn erf(&mut self, a: NodeId) -> NodeId {
        const TWO_OVER_SQRT_PI: f64 = 1.1283791670955126;
        self.unary(a, statrs::function::erf::erf, move |x, _| {
            TWO_OVER_SQRT_PI * (-x * x).exp()
        })
    }

    /// Clamp with pass-through gradient inside the closed interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(
            a,
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    /// `max(x, bound)` with the gradient rule used by learned-compression
    /// likelihood floors: gradients pass when the input is above the bound
    /// or when they push the value upward, so a floored value can recover.
    pub fn lower_bound(&mut self, a: NodeId, bound: f64) -> NodeId {
        let va = self.value_arc(a);
        let out = va.mapv(|x| x.max(bound));
        let back: BackFn = Box::new(move |g, sink| {
            let mut ga = g.clone();
            ndarray::Zip::from(&mut ga).and(&*va).for_each(|gi, &x| {
                if !(x >= bound || *gi < 0.0) {
                    *gi = 0.0;
                }
            });
            sink.add(a, ga);
        });
        self.push(out, Some(back))
    }

    // ---------------------------------------------------------------
    // Composite activations.
    // ---------------------------------------------------------------

    pub fn mish(&mut self, a: NodeId) -> NodeId {
        let sp = self.softplus(a);
        let t = self.tanh(sp);
        self.mul(a, t)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
        let xs = self.scale(a, INV_SQRT2);
        let e = self.erf(xs);
        let phi = self.add_scalar(e, 1.0);
        let half = self.scale(phi, 0.5);
        self.mul(a, half)
    }

    // ---------------------------------------------------------------
    // Matrix products.
    // ---------------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value_arc(a);
        let vb = self.value_arc(b);
        let a2 = va
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul lhs must be 2-d");
        let b2 = vb
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs must be 2-d");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dims");
        let out = a2.dot(&b2).into_dyn();
        let back: BackFn = Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let a2 = va.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let b2 = vb.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            sink.add(a, g2.dot(&b2.t()).into_dyn());
            sink.add(b, a2.t().dot(&g2).into_dyn());
        });
        self.push(out, Some(back))
    }

    /// Batched matmul over the leading axis: (B,m,k) x (B,k,n) -> (B,m,n).
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value_arc(a);
        let vb = self.value_arc(b);
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        assert_eq!(sa.len(), 3, "bmm lhs must be 3-d");
        assert_eq!(sb.len(), 3, "bmm rhs must be 3-d");
        assert_eq!(sa[0], sb[0], "bmm batch dims");
        assert_eq!(sa[2], sb[1], "bmm inner dims");
        let (bsz, m, n) = (sa[0], sa[1], sb[2]);
        let mut out = Arr::zeros(IxDyn(&[bsz, m, n]));
        for i in 0..bsz {
            let ai = va
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let bi = vb
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        let back: BackFn = Box::new(move |g, sink| {
            let mut ga = Arr::zeros(IxDyn(&sa));
            let mut gb = Arr::zeros(IxDyn(&sb));
            for i in 0..bsz {
                let gi = g
                    .index_axis(Axis(0), i)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let ai = va
                    .index_axis(Axis(0), i)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let bi = vb
                    .index_axis(Axis(0), i)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
            }
            sink.add(a, ga);
            sink.add(b, gb);
        });
        self.push(out, Some(back))
    }

    // ---------------------------------------------------------------
    // Softmax and reductions.
    // ---------------------------------------------------------------

    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let va = self.value_arc(a);
        let last = Axis(va.ndim() - 1);
        let mut out = (*va).clone();
        for mut lane in out.lanes_mut(last) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v /= sum;
            }
        }
        let vy = Arc::new(out.clone());
        let back: BackFn = Box::new(move |g, sink| {
            let mut ga = g.clone();
            let last = Axis(ga.ndim() - 1);
            for (mut glane, ylane) in ga.lanes_mut(last).into_iter().zip(vy.lanes(last)) {
                let dot: f64 = glane.iter().zip(ylane.iter()).map(|(gi, yi)| gi * yi).sum();
                for (gi, yi) in glane.iter_mut().zip(ylane.iter()) {
                    *gi = yi * (*gi - dot);
                }
            }
            sink.add(a, ga);
        });
        self.push(out, Some(back))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value_arc(a);
        let out = Arr::from_elem(IxDyn(&[1]), va.sum());
        let shape = va.shape().to_vec();
        let back: BackFn = Box::new(move |g, sink| {
            let gv = g[[0]];
            sink.add(a, Arr::from_elem(IxDyn(&shape), gv));
        });
        self.push(out, Some(back))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the given axes. `keep` retains the reduced axes as size-1.
    pub fn sum_axes(&mut self, a: NodeId, axes: &[usize], keep: bool) -> NodeId {
        let va = self.value_arc(a);
        let in_shape = va.shape().to_vec();
        let mut reduced = (*va).clone();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        for &ax in sorted.iter().rev() {
            reduced = reduced.sum_axis(Axis(ax));
        }
        let mut kept_shape = in_shape.clone();
        for &ax in &sorted {
            kept_shape[ax] = 1;
        }
        let out = if keep {
            reduced
                .into_shape_with_order(IxDyn(&kept_shape))
                .expect("sum_axes reshape")
        } else {
            reduced
        };
        let back: BackFn = Box::new(move |g, sink| {
            let gk = g
                .view()
                .into_shape_with_order(IxDyn(&kept_shape))
                .expect("grad reshape");
            let gb = gk.broadcast(IxDyn(&in_shape)).unwrap().to_owned();
            sink.add(a, gb);
        });
        self.push(out, Some(back))
    }

    pub fn mean_axes(&mut self, a: NodeId, axes: &[usize], keep: bool) -> NodeId {
        let shape = self.shape(a).to_vec();
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_axes(a, axes, keep);
        self.scale(s, 1.0 / count as f64)
    }

    // ---------------------------------------------------------------
    // Shape manipulation.
    // ---------------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let va = self.value_arc(a);
        let in_shape = va.shape().to_vec();
        assert_eq!(
            va.len(),
            shape.iter().product::<usize>(),
            "reshape length mismatch: {:?} -> {:?}",
            in_shape,
            shape
        );
        let out = va
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let back: BackFn = Box::new(move |g, sink| {
            let gr = g
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(&in_shape))
                .expect("reshape grad");
            sink.add(a, gr);
        });
        self.push(out, Some(back))
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> NodeId {
        let va = self.value_arc(a);
        let out = va
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let back: BackFn = Box::new(move |g, sink| {
            let gr = g
                .view()
                .permuted_axes(IxDyn(&inv))
                .as_standard_layout()
                .to_owned();
            sink.add(a, gr);
        });
        self.push(out, Some(back))
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let values: Vec<Arc<Arr>> = parts.iter().map(|&p| self.value_arc(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat shapes");
        let ids = parts.to_vec();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let back: BackFn = Box::new(move |g, sink| {
            let mut start = 0isize;
            for (id, len) in ids.iter().zip(&lens) {
                let piece = g
                    .slice_axis(Axis(axis), Slice::from(start..start + *len as isize))
                    .to_owned();
                sink.add(*id, piece);
                start += *len as isize;
            }
        });
        self.push(out, Some(back))
    }

    pub fn narrow(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let va = self.value_arc(a);
        let in_shape = va.shape().to_vec();
        let out = va
            .slice_axis(
                Axis(axis),
                Slice::from(start as isize..(start + len) as isize),
            )
            .to_owned();
        let back: BackFn = Box::new(move |g, sink| {
            let mut full = Arr::zeros(IxDyn(&in_shape));
            full.slice_axis_mut(
                Axis(axis),
                Slice::from(start as isize..(start + len) as isize),
            )
            .assign(g);
            sink.add(a, full);
        });
        self.push(out, Some(back))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            panic!("incompatible broadcast shapes {:?} vs {:?}", a, b);
        };
    }
    out
}

/// Reduce a broadcasted gradient back to the original operand shape.
pub(crate) fn sum_to_shape(g: &Arr, shape: &[usize]) -> Arr {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && out.shape()[ax] != 1 {
            let mut kept = out.shape().to_vec();
            kept[ax] = 1;
            out = out
                .sum_axis(Axis(ax))
                .into_shape_with_order(IxDyn(&kept))
                .unwrap();
        }
    }
    out
}

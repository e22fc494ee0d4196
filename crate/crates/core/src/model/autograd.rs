//! Minimal reverse-mode autodiff tape over `f64` ndarrays.
//!
//! Nodes are appended in topological order during the forward pass, so the
//! backward sweep is a single reverse iteration. Each op captures what it
//! needs for its gradient by value; arrays at this scale are small enough
//! that cloning beats bookkeeping.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

type BackwardFn = Box<dyn FnOnce(&ArrayD<f64>, &mut [Node])>;

pub struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    backward: Option<BackwardFn>,
}

fn accum(nodes: &mut [Node], idx: usize, g: ArrayD<f64>) {
    match &mut nodes[idx].grad {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Batched matmul over the last two axes; leading axes must match.
/// `ta`/`tb` transpose the respective operand's last two axes.
fn bmm_raw(a: &ArrayD<f64>, b: &ArrayD<f64>, ta: bool, tb: bool) -> ArrayD<f64> {
    let ashape = a.shape();
    let bshape = b.shape();
    let arank = ashape.len();
    let brank = bshape.len();
    assert!(arank >= 2 && brank >= 2, "bmm needs matrices");
    assert_eq!(&ashape[..arank - 2], &bshape[..brank - 2], "leading dims differ");
    let lead: usize = ashape[..arank - 2].iter().product();
    let (am, ak) = (ashape[arank - 2], ashape[arank - 1]);
    let (bk, bn) = (bshape[brank - 2], bshape[brank - 1]);
    let (m, k1) = if ta { (ak, am) } else { (am, ak) };
    let (k2, n) = if tb { (bn, bk) } else { (bk, bn) };
    assert_eq!(k1, k2, "inner dims differ: {k1} vs {k2}");

    let a_std = a.as_standard_layout();
    let b_std = b.as_standard_layout();
    let a3 = a_std.view().into_shape_with_order((lead, am, ak)).unwrap();
    let b3 = b_std.view().into_shape_with_order((lead, bk, bn)).unwrap();
    let mut out = ndarray::Array3::<f64>::zeros((lead, m, n));
    for p in 0..lead {
        let av = a3.index_axis(Axis(0), p);
        let bv = b3.index_axis(Axis(0), p);
        let prod = match (ta, tb) {
            (false, false) => av.dot(&bv),
            (false, true) => av.dot(&bv.t()),
            (true, false) => av.t().dot(&bv),
            (true, true) => av.t().dot(&bv.t()),
        };
        out.index_axis_mut(Axis(0), p).assign(&prod);
    }
    let mut shape: Vec<usize> = ashape[..arank - 2].to_vec();
    shape.push(m);
    shape.push(n);
    out.into_shape_with_order(IxDyn(&shape)).unwrap()
}

fn softmax_last(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = x.clone();
    let last = out.ndim() - 1;
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    debug_assert!(last + 1 == x.ndim());
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: ArrayD<f64>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn take_grad(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.nodes[v.0].grad.take()
    }

    /// Runs the backward sweep from a scalar root.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar");
        self.nodes[root.0].grad = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if node.backward.is_none() {
                continue; // leaf: keep the accumulated grad
            }
            let grad = match node.grad.take() {
                Some(g) => g,
                None => continue, // not on the path to the root
            };
            let f = node.backward.take().expect("checked above");
            f(&grad, before);
        }
    }

    /// `x @ w (+ b)`, flattening any leading axes of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let wv = self.nodes[w.0].value.clone();
        let xshape = xv.shape().to_vec();
        let k = *xshape.last().expect("linear input needs an axis");
        let rows: usize = xshape[..xshape.len() - 1].iter().product();
        let w2 = wv.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        assert_eq!(w2.nrows(), k, "linear: input width {k} vs weight rows {}", w2.nrows());
        let x_std = xv.as_standard_layout();
        let x2 = x_std.view().into_shape_with_order((rows, k)).unwrap();
        let mut out2 = x2.dot(&w2);
        if let Some(bv) = b {
            let bias = self.nodes[bv.0].value.clone();
            let b1 = bias.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
            out2 += &b1;
        }
        let mut out_shape = xshape.clone();
        *out_shape.last_mut().unwrap() = w2.ncols();
        let out = out2.into_shape_with_order(IxDyn(&out_shape)).unwrap();

        let x2_owned = x2.to_owned();
        let backward: BackwardFn = Box::new(move |g, nodes| {
            let n = w2.ncols();
            let g_std = g.as_standard_layout();
            let g2 = g_std.view().into_shape_with_order((rows, n)).unwrap();
            let gx2 = g2.dot(&w2.t());
            accum(nodes, x.0, gx2.into_shape_with_order(IxDyn(&xshape)).unwrap());
            let gw = x2_owned.t().dot(&g2);
            accum(nodes, w.0, gw.into_dyn());
            if let Some(bv) = b {
                let gb = g2.sum_axis(Axis(0));
                accum(nodes, bv.0, gb.into_dyn());
            }
        });
        self.push(out, Some(backward))
    }

    /// `a @ b^T` with leading axes of `a` flattened; `b` is 2-D `[N, K]`.
    /// Used for the tied output projection.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let ashape = av.shape().to_vec();
        let k = *ashape.last().unwrap();
        let rows: usize = ashape[..ashape.len() - 1].iter().product();
        let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        assert_eq!(b2.ncols(), k);
        let a_std = av.as_standard_layout();
        let a2 = a_std.view().into_shape_with_order((rows, k)).unwrap().to_owned();
        let out2 = a2.dot(&b2.t());
        let mut out_shape = ashape.clone();
        *out_shape.last_mut().unwrap() = b2.nrows();
        let out = out2.into_shape_with_order(IxDyn(&out_shape)).unwrap();

        let backward: BackwardFn = Box::new(move |g, nodes| {
            let n = b2.nrows();
            let g_std = g.as_standard_layout();
            let g2 = g_std.view().into_shape_with_order((rows, n)).unwrap();
            let ga = g2.dot(&b2);
            accum(nodes, a.0, ga.into_shape_with_order(IxDyn(&ashape)).unwrap());
            let gb = g2.t().dot(&a2);
            accum(nodes, b.0, gb.into_dyn());
        });
        self.push(out, Some(backward))
    }

    /// Embedding lookup: rows of `table` at `ids` -> `[n, d]`.
    pub fn gather(&mut self, table: Var, ids: &[TokenId]) -> Var {
        let tv = self.nodes[table.0].value.clone();
        let t2 = tv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let d = t2.ncols();
        let vocab = t2.nrows();
        let mut out = Array2::<f64>::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            assert!((id as usize) < vocab, "token id {id} out of range {vocab}");
            out.row_mut(i).assign(&t2.row(id as usize));
        }
        let ids_owned: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let table_dim = tv.raw_dim();
        let backward: BackwardFn = Box::new(move |g, nodes| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut gt = Array2::<f64>::zeros((table_dim[0], table_dim[1]));
            for (i, &id) in ids_owned.iter().enumerate() {
                let mut row = gt.row_mut(id);
                row += &g2.row(i);
            }
            accum(nodes, table.0, gt.into_dyn());
        });
        self.push(out.into_dyn(), Some(backward))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let backward: BackwardFn = Box::new(move |g, nodes| {
            accum(nodes, a.0, g.clone());
            accum(nodes, b.0, g.clone());
        });
        self.push(out, Some(backward))
    }

    /// Adds a constant (broadcast over leading axes); no gradient for it.
    pub fn add_const(&mut self, x: Var, c: &ArrayD<f64>) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = xv + &c.broadcast(xv.raw_dim()).expect("broadcastable constant");
        let backward: BackwardFn = Box::new(move |g, nodes| {
            accum(nodes, x.0, g.clone());
        });
        self.push(out, Some(backward))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = &self.nodes[x.0].value * c;
        let backward: BackwardFn = Box::new(move |g, nodes| {
            accum(nodes, x.0, g * c);
        });
        self.push(out, Some(backward))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let out = xv.mapv(gelu_val);
        let backward: BackwardFn = Box::new(move |g, nodes| {
            accum(nodes, x.0, g * &xv.mapv(gelu_grad));
        });
        self.push(out, Some(backward))
    }

    /// Layer norm over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let gv = self.nodes[gain.0].value.clone();
        let bv = self.nodes[bias.0].value.clone();
        let d = *xv.shape().last().unwrap() as f64;
        let mean = xv.mean_axis(Axis(xv.ndim() - 1)).unwrap();
        let mean_e = mean.insert_axis(Axis(xv.ndim() - 1));
        let centered = &xv - &mean_e;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(xv.ndim() - 1)).unwrap();
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let inv_std_e = inv_std.insert_axis(Axis(xv.ndim() - 1));
        let xhat = &centered * &inv_std_e;
        let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let out = &xhat * &g1 + &b1;

        let backward: BackwardFn = Box::new(move |g, nodes| {
            let last = Axis(g.ndim() - 1);
            // d gain / d bias reduce over every leading axis.
            let gxhat = g * &g1;
            let mut ggain = (&xhat * g).to_owned();
            let mut gbias = g.clone();
            while ggain.ndim() > 1 {
                ggain = ggain.sum_axis(Axis(0));
                gbias = gbias.sum_axis(Axis(0));
            }
            accum(nodes, gain.0, ggain);
            accum(nodes, bias.0, gbias);
            // dx via the standard layer-norm gradient.
            let sum_gxhat = gxhat.sum_axis(last).insert_axis(last);
            let sum_gxhat_xhat = (&gxhat * &xhat).sum_axis(last).insert_axis(last);
            let gx = (&gxhat - &(sum_gxhat / d) - &(&xhat * &(sum_gxhat_xhat / d))) * &inv_std_e;
            accum(nodes, x.0, gx);
        });
        self.push(out, Some(backward))
    }

    /// `[B, L, D]` -> `[B, H, L, D/H]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let (b, l, d) = {
            let s = xv.shape();
            (s[0], s[1], s[2])
        };
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let out = xv
            .into_shape_with_order(IxDyn(&[b, l, heads, dh]))
            .unwrap()
            .permuted_axes(IxDyn(&[0, 2, 1, 3]))
            .as_standard_layout()
            .to_owned();
        let backward: BackwardFn = Box::new(move |g, nodes| {
            let gx = g
                .clone()
                .permuted_axes(IxDyn(&[0, 2, 1, 3]))
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(&[b, l, d]))
                .unwrap();
            accum(nodes, x.0, gx);
        });
        self.push(out, Some(backward))
    }

    /// `[B, H, L, D/H]` -> `[B, L, D]`.
    pub fn merge_heads(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let (b, h, l, dh) = {
            let s = xv.shape();
            (s[0], s[1], s[2], s[3])
        };
        let out = xv
            .permuted_axes(IxDyn(&[0, 2, 1, 3]))
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(&[b, l, h * dh]))
            .unwrap();
        let backward: BackwardFn = Box::new(move |g, nodes| {
            let gx = g
                .clone()
                .into_shape_with_order(IxDyn(&[b, l, h, dh]))
                .unwrap()
                .permuted_axes(IxDyn(&[0, 2, 1, 3]))
                .as_standard_layout()
                .to_owned();
            accum(nodes, x.0, gx);
        });
        self.push(out, Some(backward))
    }

    /// Batched `a @ b^T` over the last two axes (attention scores).
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let out = bmm_raw(&av, &bv, false, true);
        let backward: BackwardFn = Box::new(move |g, nodes| {
            accum(nodes, a.0, bmm_raw(g, &bv, false, false));
            accum(nodes, b.0, bmm_raw(g, &av, true, false));
        });
        self.push(out, Some(backward))
    }

    /// Batched `a @ b` over the last two axes (attention context).
    pub fn bmm_nn(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let out = bmm_raw(&av, &bv, false, false);
        let backward: BackwardFn = Box::new(move |g, nodes| {
            accum(nodes, a.0, bmm_raw(g, &bv, false, true));
            accum(nodes, b.0, bmm_raw(&av, g, true, false));
        });
        self.push(out, Some(backward))
    }

    /// Softmax over the last axis of `scores + bias`. The bias is an
    /// additive mask (0 for visible, large negative for masked keys) and
    /// receives no gradient.
    pub fn masked_softmax(&mut self, scores: Var, bias: &ArrayD<f64>) -> Var {
        let sv = &self.nodes[scores.0].value;
        let biased = sv + &bias.broadcast(sv.raw_dim()).expect("broadcastable mask");
        let soft = softmax_last(&biased);
        let soft_saved = soft.clone();
        let backward: BackwardFn = Box::new(move |g, nodes| {
            // ds = s * (g - sum(g * s, last))
            let last = Axis(g.ndim() - 1);
            let dot = (g * &soft_saved).sum_axis(last).insert_axis(last);
            let gs = &soft_saved * &(g - &dot);
            accum(nodes, scores.0, gs);
        });
        self.push(soft, Some(backward))
    }

    /// Inverted dropout; draws the keep mask from `rng` in row-major order.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut ChaCha20Rng) -> Var {
        assert!((0.0..1.0).contains(&p));
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let xv = &self.nodes[x.0].value;
        let mask = ArrayD::from_shape_fn(xv.raw_dim(), |_| {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                1.0 / keep
            }
        });
        let out = xv * &mask;
        let backward: BackwardFn = Box::new(move |g, nodes| {
            accum(nodes, x.0, g * &mask);
        });
        self.push(out, Some(backward))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let old = xv.shape().to_vec();
        let out = xv
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        let backward: BackwardFn = Box::new(move |g, nodes| {
            let gx = g
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(&old))
                .unwrap();
            accum(nodes, x.0, gx);
        });
        self.push(out, Some(backward))
    }

    /// Builds a zero-padded `[B, L_max, d]` batch from per-row block lists.
    /// Padding cells are constants, so upstream values never leak into them.
    pub fn assemble_rows(&mut self, rows: &[Vec<Var>], d: usize) -> (Var, usize) {
        let lengths: Vec<Vec<usize>> = rows
            .iter()
            .map(|blocks| {
                blocks
                    .iter()
                    .map(|v| self.nodes[v.0].value.shape()[0])
                    .collect()
            })
            .collect();
        let row_totals: Vec<usize> = lengths.iter().map(|l| l.iter().sum()).collect();
        let l_max = row_totals.iter().copied().max().unwrap_or(0);
        let b = rows.len();
        let mut out = ndarray::Array3::<f64>::zeros((b, l_max, d));
        for (i, blocks) in rows.iter().enumerate() {
            let mut offset = 0usize;
            for v in blocks {
                let val = &self.nodes[v.0].value;
                let v2 = val.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                out.slice_mut(ndarray::s![i, offset..offset + v2.nrows(), ..])
                    .assign(&v2);
                offset += v2.nrows();
            }
        }
        let ids: Vec<Vec<usize>> = rows
            .iter()
            .map(|blocks| blocks.iter().map(|v| v.0).collect())
            .collect();
        let backward: BackwardFn = Box::new(move |g, nodes| {
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            for (i, blocks) in ids.iter().enumerate() {
                let mut offset = 0usize;
                for (&node_id, &len) in blocks.iter().zip(&lengths[i]) {
                    let slice = g3.slice(ndarray::s![i, offset..offset + len, ..]).to_owned();
                    accum(nodes, node_id, slice.into_dyn());
                    offset += len;
                }
            }
        });
        (self.push(out.into_dyn(), Some(backward)), l_max)
    }

    /// Sum of all elements as a scalar.
    #[cfg(test)]
    pub fn sum(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let total = xv.sum();
        let shape = xv.raw_dim();
        let backward: BackwardFn = Box::new(move |g, nodes| {
            let gscalar = g.iter().next().copied().unwrap_or(1.0);
            accum(nodes, x.0, ArrayD::from_elem(shape, gscalar));
        });
        self.push(ArrayD::from_elem(IxDyn(&[1]), total), Some(backward))
    }

    /// Mean token cross-entropy over positions where `mask == 1`.
    /// Returns the scalar loss var and the number of scored tokens.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &Array2<TokenId>,
        mask: &Array2<f64>,
    ) -> (Var, usize) {
        let lv = self.nodes[logits.0].value.clone();
        let l3 = lv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (b, l, _v) = l3.dim();
        assert_eq!(labels.dim(), (b, l));
        let count = mask.iter().filter(|&&m| m != 0.0).count();
        assert!(count > 0, "cross_entropy needs at least one scored token");

        let soft = softmax_last(&lv);
        let soft3 = soft.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut total = 0.0;
        for i in 0..b {
            for j in 0..l {
                if mask[[i, j]] == 0.0 {
                    continue;
                }
                let y = labels[[i, j]] as usize;
                let row = l3.slice(ndarray::s![i, j, ..]);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
        }
        let loss = total / count as f64;

        let labels_owned = labels.clone();
        let mask_owned = mask.clone();
        let soft_saved = soft3.to_owned();
        let backward: BackwardFn = Box::new(move |g, nodes| {
            let gscalar = g.iter().next().copied().unwrap_or(1.0);
            let mut glogits = soft_saved.clone();
            for i in 0..b {
                for j in 0..l {
                    if mask_owned[[i, j]] == 0.0 {
                        glogits.slice_mut(ndarray::s![i, j, ..]).fill(0.0);
                        continue;
                    }
                    let y = labels_owned[[i, j]] as usize;
                    glogits[[i, j, y]] -= 1.0;
                }
            }
            glogits *= gscalar / count as f64;
            accum(nodes, logits.0, glogits.into_dyn());
        });
        let loss_var = self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            Some(backward),
        );
        (loss_var, count)
    }
}

//! Reverse-mode differentiation over a recording tape.
//!
//! Each operation records its forward value, its parent node ids, and a
//! closure producing per-parent gradients from the upstream gradient. The
//! reverse sweep visits nodes in exact reverse order of recording, so
//! gradient accumulation order is deterministic.

use crate::error::{Error, Result};
use crate::kernels::{self, LayerNormParams, LinearParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Arguments handed to a node's backward closure.
pub struct VjpArgs<'a, T> {
    pub upstream: &'a Tensor<T>,
    pub value: &'a Tensor<T>,
    pub parents: &'a [&'a Tensor<T>],
}

type VjpFn<T> = Box<dyn Fn(&VjpArgs<'_, T>) -> Vec<Tensor<T>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    vjp: Option<VjpFn<T>>,
}

/// Per-node gradients produced by [`GradTape::backward`]. Nodes the root does
/// not depend on have no entry.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }

    /// Gradient for `id`, or zeros of `shape` when the root never touched it.
    pub fn take_or_zeros(&mut self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        self.take(id).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<usize>, vjp: Option<VjpFn<T>>) -> NodeId {
        self.nodes.push(Node { value, parents, vjp });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input node. Leaves receive gradients but do not propagate.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, vec![], None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "tape::add",
                expected: va.shape().to_vec(),
                got: vb.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += v;
        }
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|args: &VjpArgs<T>| {
                vec![args.upstream.clone(), args.upstream.clone()]
            })),
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "tape::mul",
                expected: va.shape().to_vec(),
                got: vb.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(vb.data()) {
            *o = *o * v;
        }
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|args: &VjpArgs<T>| {
                let (a, b) = (args.parents[0], args.parents[1]);
                let mut ga = args.upstream.clone();
                for (g, &v) in ga.data_mut().iter_mut().zip(b.data()) {
                    *g = *g * v;
                }
                let mut gb = args.upstream.clone();
                for (g, &v) in gb.data_mut().iter_mut().zip(a.data()) {
                    *g = *g * v;
                }
                vec![ga, gb]
            })),
        ))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |args: &VjpArgs<T>| {
                vec![args.upstream.map(|g| g * c)]
            })),
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            Tensor::scalar(acc),
            vec![x.0],
            Some(Box::new(move |args: &VjpArgs<T>| {
                vec![Tensor::filled(&shape, args.upstream.scalar_value())]
            })),
        )
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::silu(self.value(x))?;
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(|args: &VjpArgs<T>| {
                vec![kernels::silu_vjp(args.parents[0], args.upstream)]
            })),
        ))
    }

    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let p = LinearParams::new(
            self.value(weight).clone(),
            bias.map(|b| self.value(b).clone()),
        )?;
        let out = kernels::linear(self.value(x), &p)?;
        let mut parents = vec![x.0, weight.0];
        if let Some(b) = bias {
            parents.push(b.0);
        }
        let has_bias = bias.is_some();
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |args: &VjpArgs<T>| {
                let p = LinearParams {
                    weight: args.parents[1].clone(),
                    bias: if has_bias {
                        Some(args.parents[2].clone())
                    } else {
                        None
                    },
                };
                let (gx, gw, gb) = kernels::linear_vjp(args.parents[0], &p, args.upstream);
                let mut grads = vec![gx, gw];
                if let Some(gb) = gb {
                    grads.push(gb);
                }
                grads
            })),
        ))
    }

    /// Linear map with a frozen weight: no gradient is produced for `weight`.
    pub fn linear_frozen(&mut self, x: NodeId, weight: &Tensor<T>) -> Result<NodeId> {
        let p = LinearParams::new(weight.clone(), None)?;
        let out = kernels::linear(self.value(x), &p)?;
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(move |args: &VjpArgs<T>| {
                let (gx, _, _) = kernels::linear_vjp(args.parents[0], &p, args.upstream);
                vec![gx]
            })),
        ))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        epsilon: T,
    ) -> Result<NodeId> {
        let p = LayerNormParams {
            gamma: self.value(gamma).clone(),
            beta: self.value(beta).clone(),
            epsilon,
        };
        let out = kernels::layer_norm(self.value(x), &p)?;
        Ok(self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |args: &VjpArgs<T>| {
                let p = LayerNormParams {
                    gamma: args.parents[1].clone(),
                    beta: args.parents[2].clone(),
                    epsilon,
                };
                let (gx, gg, gb) = kernels::layer_norm_vjp(args.parents[0], &p, args.upstream);
                vec![gx, gg, gb]
            })),
        ))
    }

    /// Row-wise softmax; `-inf` entries are mask sentinels and yield exactly
    /// zero probability and exactly zero gradient.
    pub fn softmax(&mut self, s: NodeId) -> Result<NodeId> {
        let out = kernels::softmax(self.value(s))?;
        Ok(self.push(
            out,
            vec![s.0],
            Some(Box::new(|args: &VjpArgs<T>| {
                vec![kernels::softmax_vjp(args.value, args.upstream)]
            })),
        ))
    }

    fn masked_vjp() -> VjpFn<T> {
        // Selection is treated as locally constant: gradient passes through
        // retained (finite) entries and is zero at masked ones.
        Box::new(|args: &VjpArgs<T>| {
            let mut g = args.upstream.clone();
            for (g, &v) in g.data_mut().iter_mut().zip(args.value.data()) {
                if v == T::neg_infinity() {
                    *g = T::zero();
                }
            }
            vec![g]
        })
    }

    /// Keep the k largest entries per row, mask the rest to `-inf`.
    pub fn topk_mask(&mut self, s: NodeId, k: usize) -> Result<NodeId> {
        let out = kernels::topk_mask(self.value(s), k)?;
        Ok(self.push(out, vec![s.0], Some(Self::masked_vjp())))
    }

    /// Mask with an explicit per-element support (row-major, true = keep).
    pub fn mask_support(&mut self, s: NodeId, support: &[bool]) -> Result<NodeId> {
        let v = self.value(s);
        if support.len() != v.numel() {
            return Err(Error::ShapeMismatch {
                op: "tape::mask_support",
                expected: vec![v.numel()],
                got: vec![support.len()],
            });
        }
        let mut out = v.clone();
        for (o, &keep) in out.data_mut().iter_mut().zip(support) {
            if !keep {
                *o = T::neg_infinity();
            }
        }
        Ok(self.push(out, vec![s.0], Some(Self::masked_vjp())))
    }

    /// Select rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        let rows = v.n_rows();
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::InvalidConfig(format!(
                "gather_rows: indices must be non-empty and < {rows}"
            )));
        }
        let w = v.last_dim();
        let mut out = Tensor::zeros(&[idx.len(), w]);
        for (j, &i) in idx.iter().enumerate() {
            out.row_mut(j).copy_from_slice(v.row(i));
        }
        let idx = idx.to_vec();
        let src_shape = v.shape().to_vec();
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(move |args: &VjpArgs<T>| {
                let mut gx = Tensor::zeros(&src_shape);
                for (j, &i) in idx.iter().enumerate() {
                    let g = args.upstream.row(j);
                    let dst = gx.row_mut(i);
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                vec![gx]
            })),
        ))
    }

    /// Place row `j` of `x` at row `idx[j]` of a zero `[n_rows x w]` tensor.
    /// Indices must be unique.
    pub fn scatter_rows(&mut self, x: NodeId, idx: &[usize], n_rows: usize) -> Result<NodeId> {
        let v = self.value(x);
        if idx.len() != v.n_rows() || idx.iter().any(|&i| i >= n_rows) {
            return Err(Error::InvalidConfig(format!(
                "scatter_rows: need {} unique indices < {n_rows}",
                v.n_rows()
            )));
        }
        let w = v.last_dim();
        let mut out = Tensor::zeros(&[n_rows, w]);
        for (j, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(v.row(j));
        }
        let idx = idx.to_vec();
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(move |args: &VjpArgs<T>| {
                let mut gx = Tensor::zeros(&[idx.len(), args.upstream.last_dim()]);
                for (j, &i) in idx.iter().enumerate() {
                    gx.row_mut(j).copy_from_slice(args.upstream.row(i));
                }
                vec![gx]
            })),
        ))
    }

    /// Scale row `b` of `x` by `weights[b]` (`weights` is rank-1).
    pub fn scale_rows(&mut self, x: NodeId, weights: NodeId) -> Result<NodeId> {
        let (v, w) = (self.value(x), self.value(weights));
        if w.shape() != [v.n_rows()] {
            return Err(Error::ShapeMismatch {
                op: "tape::scale_rows",
                expected: vec![v.n_rows()],
                got: w.shape().to_vec(),
            });
        }
        let mut out = v.clone();
        for b in 0..out.n_rows() {
            let s = w.data()[b];
            for o in out.row_mut(b) {
                *o = *o * s;
            }
        }
        Ok(self.push(
            out,
            vec![x.0, weights.0],
            Some(Box::new(|args: &VjpArgs<T>| {
                let (x, w) = (args.parents[0], args.parents[1]);
                let mut gx = args.upstream.clone();
                let mut gw = Tensor::zeros(&[x.n_rows()]);
                for b in 0..x.n_rows() {
                    let s = w.data()[b];
                    let mut dot = T::zero();
                    for (g, &xv) in gx.row_mut(b).iter_mut().zip(x.row(b)) {
                        dot += *g * xv;
                        *g = *g * s;
                    }
                    gw.data_mut()[b] = dot;
                }
                vec![gx, gw]
            })),
        ))
    }

    /// Pick scalar entries `m[r, c]` into a rank-1 tensor.
    pub fn gather_elems(&mut self, m: NodeId, coords: &[(usize, usize)]) -> Result<NodeId> {
        let v = self.value(m);
        if v.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "tape::gather_elems",
                expected: vec![0, 0],
                got: v.shape().to_vec(),
            });
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        if coords.is_empty() || coords.iter().any(|&(r, c)| r >= rows || c >= cols) {
            return Err(Error::InvalidConfig(
                "gather_elems: coords out of bounds".to_string(),
            ));
        }
        let data: Vec<T> = coords.iter().map(|&(r, c)| v.at2(r, c)).collect();
        let coords = coords.to_vec();
        let shape = v.shape().to_vec();
        Ok(self.push(
            Tensor::from_vec(data),
            vec![m.0],
            Some(Box::new(move |args: &VjpArgs<T>| {
                let mut gm = Tensor::zeros(&shape);
                let cols = shape[1];
                for (j, &(r, c)) in coords.iter().enumerate() {
                    gm.data_mut()[r * cols + c] += args.upstream.data()[j];
                }
                vec![gm]
            })),
        ))
    }

    /// Mean negative log-likelihood over the batch (scalar node).
    pub fn mean_nll(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let loss = kernels::cross_entropy(self.value(logits), targets)?;
        let targets = targets.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits.0],
            Some(Box::new(move |args: &VjpArgs<T>| {
                vec![kernels::cross_entropy_vjp(
                    args.parents[0],
                    &targets,
                    args.upstream.scalar_value(),
                )]
            })),
        ))
    }

    /// Load-balance penalty over a `[batch x n_experts]` gate matrix:
    /// importance is the column mean of `gates`, load is the fixed selection
    /// frequency, and the penalty is
    /// `n_routable * sum_e importance[e] * load[e]` over `e >= first_routable`.
    /// The selection indicator is treated as constant; gradients flow only
    /// through importance.
    pub fn balance_penalty(
        &mut self,
        gates: NodeId,
        load: &[T],
        first_routable: usize,
    ) -> Result<NodeId> {
        let g = self.value(gates);
        if g.rank() != 2 || g.shape()[1] != load.len() || first_routable >= load.len() {
            return Err(Error::ShapeMismatch {
                op: "tape::balance_penalty",
                expected: vec![g.n_rows(), load.len()],
                got: g.shape().to_vec(),
            });
        }
        let batch = g.shape()[0];
        let n_experts = load.len();
        let inv_b = T::one() / T::from_f64(batch as f64);
        let mut importance = vec![T::zero(); n_experts];
        for b in 0..batch {
            let row = g.row(b);
            for e in 0..n_experts {
                importance[e] += row[e];
            }
        }
        for v in importance.iter_mut() {
            *v = *v * inv_b;
        }
        let penalty = kernels::balance_penalty_from(&importance, load, first_routable);
        let load = load.to_vec();
        Ok(self.push(
            Tensor::scalar(penalty),
            vec![gates.0],
            Some(Box::new(move |args: &VjpArgs<T>| {
                let u = args.upstream.scalar_value();
                let n_routable = T::from_f64((n_experts - first_routable) as f64);
                let mut gg = Tensor::zeros(&[batch, n_experts]);
                for b in 0..batch {
                    let row = gg.row_mut(b);
                    for (e, l) in load.iter().enumerate().skip(first_routable) {
                        row[e] = u * n_routable * *l * inv_b;
                    }
                }
                vec![gg]
            })),
        ))
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "tape::backward root",
                expected: vec![1],
                got: self.value(root).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(vjp) = &node.vjp {
                let parent_values: Vec<&Tensor<T>> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let args = VjpArgs {
                    upstream: &upstream,
                    value: &node.value,
                    parents: &parent_values,
                };
                let parent_grads = vjp(&args);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => {
                            for (a, &g) in acc.data_mut().iter_mut().zip(pg.data()) {
                                *a += g;
                            }
                        }
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(upstream);
        }
        Ok(Gradients { grads })
    }
}

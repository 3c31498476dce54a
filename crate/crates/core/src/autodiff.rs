//! Minimal reverse-mode autodiff over `Array2<f64>` tensors.
//!
//! A [`Graph`] is a tape rebuilt per training step: leaves are registered,
//! ops append nodes, `backward` walks the tape in reverse. The op set is
//! exactly what the training objectives need, including two non-standard
//! edges: a gradient reversal (identity forward, negated backward) and a
//! stop-gradient (identity forward, no backward), plus a Beta-sampling node
//! whose parameter gradients come from implicit reparameterization.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::betadist::{lambda_param_grads, sample_beta};
use crate::error::{Error, Result};

pub type NodeId = usize;

enum Op {
    Leaf,
    /// a (B x I) . w (I x O)
    MatMul(NodeId, NodeId),
    /// x (B x D) + row (1 x D), broadcast over rows
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulEw(NodeId, NodeId),
    DivEw(NodeId, NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    /// m * x + c; only the slope is needed for backward
    Affine(NodeId, f64),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    /// x (B x D) * col (B x 1), broadcast over columns
    MulCol(NodeId, NodeId),
    /// identity forward, gradient negated on the way back
    Grl(NodeId),
    /// identity forward, gradient blocked
    StopGrad,
    MeanAll(NodeId),
    /// lambda ~ Beta(alpha, beta) element-wise; saved pathwise derivatives
    BetaSample {
        alpha: NodeId,
        beta: NodeId,
        dl_da: Array2<f64>,
        dl_db: Array2<f64>,
    },
    /// mean over batch of per-sample weighted soft-target cross entropy
    CrossEntropy {
        logits: NodeId,
        targets: NodeId,
        weights: Option<Array1<f64>>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Leaf that does not require gradients (inputs, labels).
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates gradients (parameters).
    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[[0, 0]]
    }

    /// Gradient of the last `backward` output w.r.t. node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let v = &self.nodes[x].value + &self.nodes[row].value;
        let ng = self.needs(x) || self.needs(row);
        self.push(v, Op::AddRow(x, row), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul_ew(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MulEw(a, b), ng)
    }

    pub fn div_ew(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value / &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::DivEw(a, b), ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        // stable: max(x, 0) + ln(1 + exp(-|x|))
        let v = self.nodes[x]
            .value
            .mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        let ng = self.needs(x);
        self.push(v, Op::Softplus(x), ng)
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|v| mul * v + add);
        let ng = self.needs(x);
        self.push(v, Op::Affine(x, mul), ng)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let v = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).expect("row mismatch");
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatCols(a, b), ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let v = self.nodes[x].value.slice(s![.., from..to]).to_owned();
        let ng = self.needs(x);
        self.push(v, Op::SliceCols(x, from, to), ng)
    }

    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> NodeId {
        let v = &self.nodes[x].value * &self.nodes[col].value;
        let ng = self.needs(x) || self.needs(col);
        self.push(v, Op::MulCol(x, col), ng)
    }

    pub fn grl(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.clone();
        let ng = self.needs(x);
        self.push(v, Op::Grl(x), ng)
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.clone();
        self.push(v, Op::StopGrad, false)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let m = self.nodes[x].value.mean().unwrap_or(0.0);
        let ng = self.needs(x);
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(x), ng)
    }

    /// Element-wise draw lambda_i ~ Beta(alpha_i, beta_i); alpha, beta are
    /// B x 1 nodes. Pathwise parameter derivatives are captured at sampling
    /// time and replayed in backward.
    pub fn beta_sample<R: Rng + ?Sized>(
        &mut self,
        alpha: NodeId,
        beta: NodeId,
        rng: &mut R,
    ) -> Result<NodeId> {
        let a = self.nodes[alpha].value.clone();
        let b = self.nodes[beta].value.clone();
        if a.dim() != b.dim() {
            return Err(Error::Shape(format!(
                "beta_sample: {:?} vs {:?}",
                a.dim(),
                b.dim()
            )));
        }
        let mut lam = Array2::zeros(a.raw_dim());
        let mut dl_da = Array2::zeros(a.raw_dim());
        let mut dl_db = Array2::zeros(a.raw_dim());
        for ((idx, l), (&ai, &bi)) in lam.indexed_iter_mut().zip(a.iter().zip(b.iter())) {
            let draw = sample_beta(ai, bi, rng)?;
            *l = draw;
            let (da, db) = lambda_param_grads(draw, ai, bi);
            dl_da[idx] = da;
            dl_db[idx] = db;
        }
        let ng = self.needs(alpha) || self.needs(beta);
        Ok(self.push(
            lam,
            Op::BetaSample {
                alpha,
                beta,
                dl_da,
                dl_db,
            },
            ng,
        ))
    }

    /// Soft-target cross entropy, meaned over the batch, with optional
    /// per-sample weights. Differentiable in both logits and targets.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: NodeId,
        weights: Option<Array1<f64>>,
    ) -> NodeId {
        let lg = &self.nodes[logits].value;
        let tg = &self.nodes[targets].value;
        let batch = lg.nrows();
        let p = softmax_rows(lg);
        let mut total = 0.0;
        for i in 0..batch {
            let w = weights.as_ref().map_or(1.0, |w| w[i]);
            let mut li = 0.0;
            for c in 0..lg.ncols() {
                li -= tg[[i, c]] * p[[i, c]].max(1e-300).ln();
            }
            total += w * li;
        }
        let v = Array2::from_elem((1, 1), total / batch as f64);
        let ng = self.needs(logits) || self.needs(targets);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar (1x1) output node.
    pub fn backward(&mut self, out: NodeId) {
        assert_eq!(self.nodes[out].value.dim(), (1, 1), "backward needs scalar");
        self.grads = vec![None; self.nodes.len()];
        self.grads[out] = Some(Array2::ones((1, 1)));
        for id in (0..=out).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g);
            self.grads[id] = Some(g);
        }
    }

    fn accum(&mut self, id: NodeId, delta: Array2<f64>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, id: NodeId, g: &Array2<f64>) {
        match &self.nodes[id].op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = g.dot(&self.nodes[b].value.t());
                let gb = self.nodes[a].value.t().dot(g);
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::AddRow(x, row) => {
                let (x, row) = (*x, *row);
                self.accum(x, g.clone());
                let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accum(row, gr);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, -g.clone());
            }
            Op::MulEw(a, b) => {
                let (a, b) = (*a, *b);
                let ga = g * &self.nodes[b].value;
                let gb = g * &self.nodes[a].value;
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::DivEw(a, b) => {
                let (a, b) = (*a, *b);
                let vb = &self.nodes[b].value;
                let ga = g / vb;
                let gb = -(g * &self.nodes[a].value) / (vb * vb);
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::Relu(x) => {
                let x = *x;
                let mask = self.nodes[x].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accum(x, g * &mask);
            }
            Op::Softplus(x) => {
                let x = *x;
                let sig = self.nodes[x].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
                self.accum(x, g * &sig);
            }
            Op::Affine(x, m) => {
                let (x, m) = (*x, *m);
                self.accum(x, g.mapv(|v| v * m));
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (*a, *b);
                let ca = self.nodes[a].value.ncols();
                let ga = g.slice(s![.., ..ca]).to_owned();
                let gb = g.slice(s![.., ca..]).to_owned();
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::SliceCols(x, from, to) => {
                let (x, from, to) = (*x, *from, *to);
                let mut gx = Array2::zeros(self.nodes[x].value.raw_dim());
                gx.slice_mut(s![.., from..to]).assign(g);
                self.accum(x, gx);
            }
            Op::MulCol(x, col) => {
                let (x, col) = (*x, *col);
                let gx = g * &self.nodes[col].value;
                let gcol = (g * &self.nodes[x].value)
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1));
                self.accum(x, gx);
                self.accum(col, gcol);
            }
            Op::Grl(x) => {
                let x = *x;
                self.accum(x, -g.clone());
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = self.nodes[x].value.len() as f64;
                let gx = Array2::from_elem(self.nodes[x].value.raw_dim(), g[[0, 0]] / n);
                self.accum(x, gx);
            }
            Op::BetaSample {
                alpha,
                beta,
                dl_da,
                dl_db,
            } => {
                let (alpha, beta) = (*alpha, *beta);
                let ga = g * dl_da;
                let gb = g * dl_db;
                self.accum(alpha, ga);
                self.accum(beta, gb);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let (logits, targets) = (*logits, *targets);
                let weights = weights.clone();
                let lg = &self.nodes[logits].value;
                let tg = &self.nodes[targets].value;
                let batch = lg.nrows();
                let p = softmax_rows(lg);
                let gs = g[[0, 0]];
                let mut glogits = Array2::zeros(lg.raw_dim());
                let mut gtargets = Array2::zeros(tg.raw_dim());
                for i in 0..batch {
                    let w = weights.as_ref().map_or(1.0, |w| w[i]);
                    let scale = gs * w / batch as f64;
                    let tsum: f64 = tg.row(i).sum();
                    for c in 0..lg.ncols() {
                        glogits[[i, c]] = scale * (p[[i, c]] * tsum - tg[[i, c]]);
                        gtargets[[i, c]] = -scale * p[[i, c]].max(1e-300).ln();
                    }
                }
                self.accum(logits, glogits);
                self.accum(targets, gtargets);
            }
        }
    }
}

/// Central finite differences of `f` w.r.t. a flat parameter vector.
/// Test-side oracle, kept independent of the tape.
pub fn finite_diff_grad<F>(params: &mut [f64], mut f: F, h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let fp = f(params);
        params[i] = orig - h;
        let fm = f(params);
        params[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

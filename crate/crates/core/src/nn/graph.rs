//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves either
//! borrow a parameter matrix (no copy) or own a constant. [`Graph::backward`]
//! walks the tape in reverse and returns one gradient per node.

use std::borrow::Cow;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
}

struct Node<'p> {
    value: Cow<'p, Mat>,
    op: Op,
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-6;

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'p, Mat>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf borrowing a parameter matrix.
    pub fn param(&mut self, m: &'p Mat) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(Cow::Owned(m), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(Cow::Owned(out), Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(Cow::Owned(out), Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(Cow::Owned(out), Op::Add(a, b))
    }

    /// Adds a `1 × c` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let out = self.value(x) + self.value(row);
        self.push(Cow::Owned(out), Op::AddRow(x, row))
    }

    /// Adds a constant matrix (masks); no gradient flows to the constant.
    pub fn add_const(&mut self, x: Var, c: &Mat) -> Var {
        let out = self.value(x) + c;
        self.push(Cow::Owned(out), Op::AddConst(x))
    }

    pub fn scale(&mut self, x: Var, f: f64) -> Var {
        let out = self.value(x) * f;
        self.push(Cow::Owned(out), Op::Scale(x, f))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| {
            let t = (GELU_C * (v + 0.044_715 * v * v * v)).tanh();
            0.5 * v * (1.0 + t)
        });
        self.push(Cow::Owned(out), Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(Cow::Owned(out), Op::SoftmaxRows(x))
    }

    /// Row-wise layer normalization with learned `1 × c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.fold(0.0, |a, &v| a + v * v) / cols;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        let sv = self.value(src);
        let mut out = Mat::zeros((rows.len(), sv.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&sv.row(r));
        }
        self.push(
            Cow::Owned(out),
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(Cow::Owned(out), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + width]).to_owned();
        self.push(Cow::Owned(out), Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Produces a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logit row");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.fold(0.0, |a, &v| a + (v - max).exp()).ln();
            loss += lse - row[t];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        self.push(
            Cow::Owned(Mat::from_elem((1, 1), loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates from a scalar node. Gradients are indexed by [`Var`].
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones(self.value(root).raw_dim()));

        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *x, g);
                }
                Op::AddConst(x) => accumulate(&mut grads, *x, g),
                Op::Scale(x, f) => accumulate(&mut grads, *x, g * *f),
                Op::Gelu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &v| {
                        let u = GELU_C * (v + 0.044_715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044_715 * v * v);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[idx].value;
                    let mut gx = g;
                    for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.dot(&yrow);
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gv, &yv| *gv = yv * (*gv - dot));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let mut dxhat = &g * self.value(*gamma);
                    let n = dxhat.ncols() as f64;
                    for ((mut drow, xrow), &is) in
                        dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let sum = drow.sum();
                        let dot = drow.dot(&xrow);
                        Zip::from(&mut drow)
                            .and(&xrow)
                            .for_each(|d, &xh| *d = is * (*d - sum / n - xh * dot / n));
                    }
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                    accumulate(&mut grads, *x, dxhat);
                }
                Op::GatherRows { src, rows } => {
                    let mut gs = Mat::zeros(self.value(*src).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gs.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        let piece = g.slice(s![start..start + n, ..]).to_owned();
                        accumulate(&mut grads, p, piece);
                        start += n;
                    }
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        let piece = g.slice(s![.., start..start + n]).to_owned();
                        accumulate(&mut grads, p, piece);
                        start += n;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]];
                    let mut gl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[[i, t]] -= 1.0;
                    }
                    if scale != 1.0 {
                        gl *= scale;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient of a leaf, or `None` when the leaf did not influence the root.
    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

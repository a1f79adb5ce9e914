//! Reverse-mode differentiation over 2-D arrays, recorded on a tape.
//!
//! Values are `batch × features`. A [`Var`] is an index into the tape; the
//! tape is consumed once by [`Tape::backward`].

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × n` row to every row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    /// Rows of a parameter matrix.
    Gather(Var, Vec<usize>),
    /// `mask * new + (1 - mask) * old` with a constant `batch × 1` mask.
    Blend(Var, Var, Array2<f64>),
    /// Parts stacked along rows.
    Stack(Vec<Var>),
    /// Dot-product attention of `query` over step-major `keys`/`values`;
    /// stores the weights.
    Attend {
        query: Var,
        keys: Var,
        values: Var,
        weights: Array2<f64>,
    },
    /// Sum over rows of `w_b * -log softmax(logits + mask)[target_b]`;
    /// stores the probabilities.
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Array2<f64>,
    },
    Scale(Var, f64),
    Sum(Vec<Var>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients for parameters, indexed like the parameter list.
pub type Grads = Vec<Option<Array2<f64>>>;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `logits + mask`.
pub fn softmax_rows(logits: ArrayView2<f64>, mask: Option<ArrayView2<f64>>) -> Array2<f64> {
    let mut p = logits.to_owned();
    if let Some(m) = mask {
        p += &m;
    }
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    p
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A parameter leaf; its gradient is reported under `index`.
    pub fn param(&mut self, value: &Array2<f64>, index: usize) -> Var {
        self.push(value.clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat shapes agree");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Columns `from..to`.
    pub fn slice(&mut self, a: Var, from: usize, to: usize) -> Var {
        let v = self.value(a).slice(s![.., from..to]).to_owned();
        self.push(v, Op::Slice(a, from, to))
    }

    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Array2::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).assign(&t.row(r));
        }
        self.push(v, Op::Gather(table, rows.to_vec()))
    }

    pub fn blend(&mut self, new: Var, old: Var, mask: Array2<f64>) -> Var {
        let v = &mask * self.value(new) + (1.0 - &mask) * self.value(old);
        self.push(v, Op::Blend(new, old, mask))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v += self.value(p);
        }
        self.push(v, Op::Sum(parts.to_vec()))
    }

    /// Stacks equally wide parts along rows.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("stack shapes agree");
        self.push(v, Op::Stack(parts.to_vec()))
    }

    /// Attention of each query row `b` over rows `s * batch + b` of `keys`
    /// and `values` (as built by [`Tape::stack`] over steps), with scores
    /// `query · key` masked by `mask` (`batch × steps`, 0 to keep and a
    /// large negative value to drop). Returns the context vectors.
    pub fn attend(&mut self, query: Var, keys: Var, values: Var, mask: &Array2<f64>) -> Var {
        let (q, k, v) = (self.value(query), self.value(keys), self.value(values));
        let (batch, steps) = mask.dim();
        let mut scores = Array2::zeros((batch, steps));
        for ((b, t), o) in scores.indexed_iter_mut() {
            *o = q.row(b).dot(&k.row(t * batch + b));
        }
        let weights = softmax_rows(scores.view(), Some(mask.view()));
        let mut ctx = Array2::zeros((batch, v.ncols()));
        for ((b, t), &w) in weights.indexed_iter() {
            ctx.row_mut(b).scaled_add(w, &v.row(t * batch + b));
        }
        self.push(ctx, Op::Attend { query, keys, values, weights })
    }

    /// Weighted negative log-likelihood of `targets` under
    /// `softmax(logits + mask)`, as a `1 × 1` value.
    pub fn cross_entropy(&mut self, logits: Var, mask: &Array2<f64>, targets: &[usize], weights: &[f64]) -> Var {
        let z = self.value(logits) + mask;
        let probs = softmax_rows(z.view(), None);
        let mut loss = 0.0;
        for (b, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w != 0.0 {
                let row = z.row(b);
                let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
                loss += w * (lse - row[t]);
            }
        }
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates from the `1 × 1` node `root` and returns gradients
    /// for `n_params` parameters.
    pub fn backward(self, root: Var, n_params: usize) -> Grads {
        let Tape { nodes } = self;
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(nodes[root.0].value.dim()));
        let mut out: Grads = vec![None; n_params];
        let acc = |grads: &mut Vec<Option<Array2<f64>>>, v: Var, g: Array2<f64>| match &mut grads[v.0] {
            Some(x) => *x += &g,
            slot @ None => *slot = Some(g),
        };
        // The gradient slot of `v`, zero-filled on first use.
        fn slot<'a>(grads: &'a mut [Option<Array2<f64>>], nodes: &[Node], v: Var) -> &'a mut Array2<f64> {
            grads[v.0].get_or_insert_with(|| Array2::zeros(nodes[v.0].value.dim()))
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => match &mut out[*p] {
                    Some(x) => *x += &g,
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    general_mat_mul(1.0, &g, &val(*b).t(), 1.0, slot(&mut grads, &nodes, *a));
                    general_mat_mul(1.0, &val(*a).t(), &g, 1.0, slot(&mut grads, &nodes, *b));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &g * &(y * &(1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &g * &(1.0 - &(y * y)));
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::Slice(a, from, to) => {
                    let dst = slot(&mut grads, &nodes, *a);
                    let mut part = dst.slice_mut(s![.., *from..*to]);
                    part += &g;
                }
                Op::Gather(t, rows) => {
                    let full = slot(&mut grads, &nodes, *t);
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = full.row_mut(r);
                        dst += &g.row(i);
                    }
                }
                Op::Blend(new, old, mask) => {
                    acc(&mut grads, *new, &g * mask);
                    acc(&mut grads, *old, &g * &(1.0 - mask));
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, g.clone());
                    }
                }
                Op::Stack(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = val(p).nrows();
                        acc(&mut grads, p, g.slice(s![at..at + n, ..]).to_owned());
                        at += n;
                    }
                }
                Op::Attend {
                    query,
                    keys,
                    values,
                    weights,
                } => {
                    let (q, k, v) = (val(*query), val(*keys), val(*values));
                    let batch = weights.nrows();
                    let mut dv = Array2::zeros(v.dim());
                    let mut dw = Array2::zeros(weights.dim());
                    for ((b, t), &w) in weights.indexed_iter() {
                        let r = t * batch + b;
                        dw[[b, t]] = g.row(b).dot(&v.row(r));
                        dv.row_mut(r).scaled_add(w, &g.row(b));
                    }
                    // Softmax backward.
                    let inner = (&dw * weights).sum_axis(Axis(1));
                    let mut dq = Array2::zeros(q.dim());
                    let mut dk = Array2::zeros(k.dim());
                    for ((b, t), &w) in weights.indexed_iter() {
                        let r = t * batch + b;
                        let ds = w * (dw[[b, t]] - inner[b]);
                        dq.row_mut(b).scaled_add(ds, &k.row(r));
                        dk.row_mut(r).scaled_add(ds, &q.row(b));
                    }
                    acc(&mut grads, *values, dv);
                    acc(&mut grads, *keys, dk);
                    acc(&mut grads, *query, dq);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let scale = g[[0, 0]];
                    let mut d = probs.clone();
                    for (b, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let mut row = d.row_mut(b);
                        row[t] -= 1.0;
                        row *= w * scale;
                    }
                    acc(&mut grads, *logits, d);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    /// A graph touching every op, as a function of three parameters.
    fn graph(p: &[Array2<f64>]) -> (Tape, Var) {
        let mut t = Tape::new();
        let w = t.param(&p[0], 0);
        let e = t.param(&p[1], 1);
        let b = t.param(&p[2], 2);
        let x = t.gather(e, &[2, 0, 2]);
        let h = t.matmul(x, w);
        let h = t.add_row(h, b);
        let s = t.sigmoid(h);
        let th = t.tanh(h);
        let m = t.mul(s, th);
        let a = t.add(m, x);
        let k = t.slice(a, 0, 2);
        let mask = arr2(&[[1.0], [0.0], [1.0]]);
        let bl = t.blend(k, x, mask);
        let sc = t.scale(bl, 0.7);
        let sm = t.sum(&[sc, k]);
        let att_mask = arr2(&[[0.0, 0.0], [0.0, -1e9], [0.0, 0.0]]);
        let keys = t.stack(&[k, bl]);
        let values = t.stack(&[x, sc]);
        let ctx = t.attend(sm, keys, values, &att_mask);
        let logits = t.concat(&[ctx, sm]);
        let ce_mask = arr2(&[[0.0, 0.0, 0.0, -1e9], [0.0; 4], [0.0; 4]]);
        let loss = t.cross_entropy(logits, &ce_mask, &[1, 3, 0], &[1.0, 0.5, 2.0]);
        (t, loss)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let params = vec![
            arr2(&[[0.3, -0.2], [0.1, 0.4]]),
            arr2(&[[0.5, -0.3], [0.2, 0.1], [-0.4, 0.6]]),
            arr2(&[[0.05, -0.1]]),
        ];
        let (t, loss) = graph(&params);
        let grads = t.backward(loss, 3);
        let f = |p: &[Array2<f64>]| {
            let (t, l) = graph(p);
            t.value(l)[[0, 0]]
        };
        for (i, g) in grads.iter().enumerate() {
            let g = g.as_ref().unwrap();
            for idx in ndarray::indices(params[i].dim()) {
                let h = 1e-6;
                let mut plus = params.clone();
                plus[i][idx] += h;
                let mut minus = params.clone();
                minus[i][idx] -= h;
                let num = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = g[idx];
                assert!((num - an).abs() <= 1e-6 * (1.0 + num.abs()), "param {i} {idx:?}: {num} vs {an}");
            }
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let p = softmax_rows(arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, -1e9]]).view(), None);
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        assert!(p[[1, 2]] < 1e-300);
    }
}

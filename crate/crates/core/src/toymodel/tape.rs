//! Reverse-mode gradient tape over the toy model's parameters.
//!
//! Nodes hold flat `f64` vectors (scalars have length one) and are appended
//! in evaluation order, so every input of a node has a smaller index.
//! [`Tape::backward`] walks the list once in reverse.

use super::model::{log_softmax, visible_tokens, ModelMode, Params, ToyModel};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    /// Embedding row.
    Lookup(usize),
    /// Mean of embedding rows plus a position row.
    Context { tokens: Vec<usize>, slot: usize },
    /// `hidden_weight · x + hidden_bias`
    Linear(usize),
    Tanh(usize),
    /// `embeddings · h + output_bias`
    TiedLogits(usize),
    LogSoftmax(usize),
    Pick(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Exp(usize),
    Ln(usize),
    Scale(usize, f64),
    /// Sum of every element of one node.
    SumElements(usize),
    Sum(Vec<usize>),
    Mean(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

pub struct Tape<'m> {
    model: &'m ToyModel,
    nodes: Vec<Node>,
}

impl<'m> Tape<'m> {
    pub fn new(model: &'m ToyModel) -> Self {
        Tape {
            model,
            nodes: Vec::new(),
        }
    }

    pub fn model(&self) -> &'m ToyModel {
        self.model
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, x: f64) -> Var {
        self.push(Op::Const, vec![x])
    }

    pub fn lookup(&mut self, id: usize) -> Var {
        let row = self.model.embedding(id).to_vec();
        self.push(Op::Lookup(id), row)
    }

    pub fn context(&mut self, tokens: &[usize], slot: usize) -> Var {
        let value = self.model.context(tokens, slot);
        self.push(
            Op::Context {
                tokens: tokens.to_vec(),
                slot,
            },
            value,
        )
    }

    pub fn linear(&mut self, x: Var) -> Var {
        let m = self.model;
        let d = m.dim;
        let input = &self.nodes[x.0].value;
        let value = (0..d)
            .map(|i| {
                m.params.hidden_weight[i * d..(i + 1) * d]
                    .iter()
                    .zip(input)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
                    + m.params.hidden_bias[i]
            })
            .collect();
        self.push(Op::Linear(x.0), value)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x.0), value)
    }

    pub fn tied_logits(&mut self, h: Var) -> Var {
        let value = self.model.logits(&self.nodes[h.0].value);
        self.push(Op::TiedLogits(h.0), value)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let value = log_softmax(&self.nodes[x.0].value);
        self.push(Op::LogSoftmax(x.0), value)
    }

    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        let value = vec![self.nodes[x.0].value[index]];
        self.push(Op::Pick(x.0, index), value)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "elementwise operands differ in length");
        va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a.0, b.0), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), value)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x / y);
        self.push(Op::Div(a.0, b.0), value)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().map(|v| v.exp()).collect();
        self.push(Op::Exp(x.0), value)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().map(|v| v.ln()).collect();
        self.push(Op::Ln(x.0), value)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.nodes[x.0].value.iter().map(|v| v * factor).collect();
        self.push(Op::Scale(x.0, factor), value)
    }

    pub fn sum_elements(&mut self, x: Var) -> Var {
        let value = vec![self.nodes[x.0].value.iter().sum()];
        self.push(Op::SumElements(x.0), value)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let value = vec![xs.iter().map(|v| self.nodes[v.0].value[0]).sum()];
        self.push(Op::Sum(xs.iter().map(|v| v.0).collect()), value)
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "mean of no values");
        let total: f64 = xs.iter().map(|v| self.nodes[v.0].value[0]).sum();
        let value = vec![total / xs.len() as f64];
        self.push(Op::Mean(xs.iter().map(|v| v.0).collect()), value)
    }

    /// Log-probability of `target` at `slot` given the visible `context`.
    pub fn token_log_prob(&mut self, context: &[usize], slot: usize, target: usize) -> Var {
        let ctx = self.context(context, slot);
        let pre = self.linear(ctx);
        let hidden = self.tanh(pre);
        let logits = self.tied_logits(hidden);
        let log_probs = self.log_softmax(logits);
        self.pick(log_probs, target)
    }

    /// Masked log-probability of the original token at `position`, with the
    /// tokens at `masked` also hidden.
    pub fn masked_log_prob(&mut self, tokens: &[usize], masked: &[usize], position: usize) -> Result<Var> {
        self.model.require_mode(ModelMode::Masked)?;
        self.model.check_slot(position, tokens.len())?;
        let visible = visible_tokens(tokens, masked, position);
        Ok(self.token_log_prob(&visible, position, tokens[position]))
    }

    /// Mean log-likelihood over positions, each masked in turn.
    pub fn pseudo_log_likelihood(&mut self, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("sentence".into()));
        }
        let terms = (0..tokens.len())
            .map(|i| self.masked_log_prob(tokens, &[], i))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.mean(&terms))
    }

    /// Mean next-token negative log-likelihood.
    pub fn alm_sentence_loss(&mut self, tokens: &[usize]) -> Result<Var> {
        self.model.require_mode(ModelMode::Autoregressive)?;
        if tokens.is_empty() {
            return Err(Error::EmptyInput("sentence".into()));
        }
        let mut prefix = vec![Vocabulary::BOS_ID];
        let mut terms = Vec::with_capacity(tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            self.model.check_slot(i, tokens.len())?;
            terms.push(self.token_log_prob(&prefix, i, t));
            prefix.push(t);
        }
        let mean_ll = self.mean(&terms);
        Ok(self.scale(mean_ll, -1.0))
    }

    /// Accumulates d(root)/d(parameter) for every parameter.
    pub fn backward(&self, root: Var) -> Result<Params> {
        let m = self.model;
        let d = m.dim;
        let mut grads = Params::zeros_like(&m.params);
        if root.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("root {} not recorded", root.0)));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Tape("root must be a scalar".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
            adj[i].get_or_insert_with(|| vec![0.0; len])
        }

        for n in (0..=root.0).rev() {
            let Some(g) = adj[n].take() else { continue };
            let node = &self.nodes[n];
            let check = |i: usize| -> Result<usize> {
                if i >= n {
                    Err(Error::Tape(format!("node {n} reads later node {i}")))
                } else {
                    Ok(i)
                }
            };
            let len_of = |i: usize| self.nodes[i].value.len();
            match &node.op {
                Op::Const => {}
                Op::Lookup(id) => {
                    let row = &mut grads.embeddings[id * d..(id + 1) * d];
                    row.iter_mut().zip(&g).for_each(|(r, x)| *r += x);
                }
                Op::Context { tokens, slot } => {
                    if !tokens.is_empty() {
                        let w = 1.0 / tokens.len() as f64;
                        for &t in tokens {
                            let row = &mut grads.embeddings[t * d..(t + 1) * d];
                            row.iter_mut().zip(&g).for_each(|(r, x)| *r += w * x);
                        }
                    }
                    let row = &mut grads.positions[slot * d..(slot + 1) * d];
                    row.iter_mut().zip(&g).for_each(|(r, x)| *r += x);
                }
                Op::Linear(x) => {
                    let x = check(*x)?;
                    let input = &self.nodes[x].value;
                    let gx = acc(&mut adj, x, d);
                    for i in 0..d {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        grads.hidden_bias[i] += gi;
                        let wrow = &m.params.hidden_weight[i * d..(i + 1) * d];
                        let grow = &mut grads.hidden_weight[i * d..(i + 1) * d];
                        for j in 0..d {
                            grow[j] += gi * input[j];
                            gx[j] += gi * wrow[j];
                        }
                    }
                }
                Op::Tanh(x) => {
                    let x = check(*x)?;
                    let y = &node.value;
                    let gx = acc(&mut adj, x, y.len());
                    for k in 0..y.len() {
                        gx[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
                Op::TiedLogits(h) => {
                    let h = check(*h)?;
                    let hv = &self.nodes[h].value;
                    let gh = acc(&mut adj, h, d);
                    for (v, &gv) in g.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        grads.output_bias[v] += gv;
                        let erow = &m.params.embeddings[v * d..(v + 1) * d];
                        let grow = &mut grads.embeddings[v * d..(v + 1) * d];
                        for j in 0..d {
                            grow[j] += gv * hv[j];
                            gh[j] += gv * erow[j];
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    let x = check(*x)?;
                    let total: f64 = g.iter().sum();
                    let y = &node.value;
                    let gx = acc(&mut adj, x, y.len());
                    for k in 0..y.len() {
                        gx[k] += g[k] - y[k].exp() * total;
                    }
                }
                Op::Pick(x, index) => {
                    let x = check(*x)?;
                    let len = len_of(x);
                    acc(&mut adj, x, len)[*index] += g[0];
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let (a, b) = (check(*a)?, check(*b)?);
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let len = g.len();
                    acc(&mut adj, a, len).iter_mut().zip(&g).for_each(|(r, x)| *r += x);
                    acc(&mut adj, b, len)
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(r, x)| *r += sign * x);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (check(*a)?, check(*b)?);
                    let va = self.nodes[a].value.clone();
                    let vb = self.nodes[b].value.clone();
                    let len = g.len();
                    let ga = acc(&mut adj, a, len);
                    for k in 0..len {
                        ga[k] += g[k] * vb[k];
                    }
                    let gb = acc(&mut adj, b, len);
                    for k in 0..len {
                        gb[k] += g[k] * va[k];
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (check(*a)?, check(*b)?);
                    let va = self.nodes[a].value.clone();
                    let vb = self.nodes[b].value.clone();
                    let len = g.len();
                    let ga = acc(&mut adj, a, len);
                    for k in 0..len {
                        ga[k] += g[k] / vb[k];
                    }
                    let gb = acc(&mut adj, b, len);
                    for k in 0..len {
                        gb[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                }
                Op::Exp(x) => {
                    let x = check(*x)?;
                    let y = &node.value;
                    let gx = acc(&mut adj, x, y.len());
                    for k in 0..y.len() {
                        gx[k] += g[k] * y[k];
                    }
                }
                Op::Ln(x) => {
                    let x = check(*x)?;
                    let xv = &self.nodes[x].value;
                    let gx = acc(&mut adj, x, xv.len());
                    for k in 0..xv.len() {
                        gx[k] += g[k] / xv[k];
                    }
                }
                Op::Scale(x, factor) => {
                    let x = check(*x)?;
                    let gx = acc(&mut adj, x, g.len());
                    for k in 0..g.len() {
                        gx[k] += g[k] * factor;
                    }
                }
                Op::SumElements(x) => {
                    let x = check(*x)?;
                    let len = len_of(x);
                    acc(&mut adj, x, len).iter_mut().for_each(|r| *r += g[0]);
                }
                Op::Sum(xs) | Op::Mean(xs) => {
                    let w = if matches!(node.op, Op::Mean(_)) {
                        1.0 / xs.len() as f64
                    } else {
                        1.0
                    };
                    for &x in xs {
                        let x = check(x)?;
                        acc(&mut adj, x, 1)[0] += w * g[0];
                    }
                }
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::model::{alm_sentence_loss_ids, pseudo_log_likelihood_ids};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(mode: ModelMode) -> ToyModel {
        let vocab = Vocabulary::build(["he", "she", "works", "as", "a", "nurse", "."]);
        ToyModel::new(vocab, 6, 8, mode, 5)
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradients() {
        let m = model(ModelMode::Masked);
        let mut tape = Tape::new(&m);
        let ll = tape.pseudo_log_likelihood(&[4, 6, 7, 8]).unwrap();
        let zero = tape.scale(ll, 0.0);
        let grads = tape.backward(zero).unwrap();
        assert!(grads.tensors().iter().all(|(_, t)| t.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn squared_embedding_gradient() {
        let m = model(ModelMode::Masked);
        let mut tape = Tape::new(&m);
        let terms: Vec<Var> = (0..m.vocab_size())
            .map(|id| {
                let row = tape.lookup(id);
                let sq = tape.mul(row, row);
                tape.sum_elements(sq)
            })
            .collect();
        let loss = tape.sum(&terms);
        let grads = tape.backward(loss).unwrap();
        for (g, e) in grads.embeddings.iter().zip(&m.params.embeddings) {
            assert!((g - 2.0 * e).abs() < 1e-15);
        }
        assert!(grads.hidden_weight.iter().all(|x| *x == 0.0));
        assert!(grads.positions.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn tape_values_match_inference() {
        let m = model(ModelMode::Masked);
        let ids = [4, 6, 7, 8, 10];
        let mut tape = Tape::new(&m);
        let v = tape.pseudo_log_likelihood(&ids).unwrap();
        assert_eq!(tape.value(v), pseudo_log_likelihood_ids(&m, &ids).unwrap());

        let a = model(ModelMode::Autoregressive);
        let mut tape = Tape::new(&a);
        let v = tape.alm_sentence_loss(&ids).unwrap();
        assert_eq!(tape.value(v), alm_sentence_loss_ids(&a, &ids).unwrap());
    }

    fn finite_difference_check(m: &ToyModel, f: impl Fn(&ToyModel) -> f64, grads: &Params) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        let mut probe = m.clone();
        for _ in 0..50 {
            let i = rng.random_range(0..m.params.len());
            let orig = probe.params.get(i);
            *probe.params.get_mut(i) = orig + h;
            let up = f(&probe);
            *probe.params.get_mut(i) = orig - h;
            let down = f(&probe);
            *probe.params.get_mut(i) = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(i);
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "coordinate {i}: numeric {numeric} analytic {analytic}"
            );
        }
    }

    #[test]
    fn pseudo_likelihood_gradient_matches_finite_differences() {
        let m = model(ModelMode::Masked);
        let ids = [4, 6, 7, 8, 10, 9];
        let mut tape = Tape::new(&m);
        let v = tape.pseudo_log_likelihood(&ids).unwrap();
        let grads = tape.backward(v).unwrap();
        finite_difference_check(&m, |m| pseudo_log_likelihood_ids(m, &ids).unwrap(), &grads);
    }

    #[test]
    fn sentence_loss_gradient_matches_finite_differences() {
        let m = model(ModelMode::Autoregressive);
        let ids = [4, 6, 7, 8, 10, 9];
        let mut tape = Tape::new(&m);
        let v = tape.alm_sentence_loss(&ids).unwrap();
        let grads = tape.backward(v).unwrap();
        finite_difference_check(&m, |m| alm_sentence_loss_ids(m, &ids).unwrap(), &grads);
    }

    #[test]
    fn tied_coordinate_receives_both_gradient_paths() {
        // The target token is also in the context, so its embedding row gets
        // gradient from the input side and the output projection.
        let m = model(ModelMode::Masked);
        let ids = [8, 8];
        let mut tape = Tape::new(&m);
        let v = tape.masked_log_prob(&ids, &[], 0).unwrap();
        let grads = tape.backward(v).unwrap();
        let i = 8 * m.dim + 2;
        let h = 1e-5;
        let mut probe = m.clone();
        *probe.params.get_mut(i) += h;
        let up = probe.predict_masked(&ids, &[], 0).unwrap()[8].ln();
        *probe.params.get_mut(i) -= 2.0 * h;
        let down = probe.predict_masked(&ids, &[], 0).unwrap()[8].ln();
        let numeric = (up - down) / (2.0 * h);
        assert!((numeric - grads.get(i)).abs() / numeric.abs().max(1e-6) < 1e-6);
    }

    #[test]
    fn malformed_root_is_rejected() {
        let m = model(ModelMode::Masked);
        let mut tape = Tape::new(&m);
        let row = tape.lookup(4);
        assert!(matches!(tape.backward(row), Err(Error::Tape(_))));
        assert!(matches!(tape.backward(Var(99)), Err(Error::Tape(_))));
    }

    #[test]
    fn forward_reference_is_reported() {
        let m = model(ModelMode::Masked);
        let mut tape = Tape::new(&m);
        let c = tape.constant(1.0);
        let root = tape.exp(c);
        // Corrupt the record so the root reads a node recorded after it.
        tape.nodes[root.0].op = Op::Exp(root.0 + 1);
        tape.constant(2.0);
        assert!(matches!(tape.backward(root), Err(Error::Tape(_))));
    }
}

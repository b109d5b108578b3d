//! GRU language decoder conditioned on the attention context.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T = Tensor> {
    /// V × E word embeddings, shared with guide-word lookup.
    pub embedding: T,
    /// D × S, b: S. Initial state from the mean annotation.
    pub w_init: T,
    pub b_init: T,
    /// (E + D) × S input weights per gate.
    pub w_z: T,
    pub w_r: T,
    pub w_n: T,
    /// S × S recurrent weights per gate.
    pub u_z: T,
    pub u_r: T,
    pub u_n: T,
    pub b_z: T,
    pub b_r: T,
    pub b_n: T,
    /// (S + D + E) × V output projection over [state; context; prev embedding].
    pub w_o: T,
    pub b_o: T,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderDims {
    pub vocab: usize,
    pub embed: usize,
    pub feature: usize,
    pub state: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderStep {
    /// 1 × V
    pub logits: Var,
    /// 1 × S
    pub new_state: Var,
}

impl DecoderParams {
    pub fn init<R: Rng>(dims: DecoderDims, rng: &mut R) -> Self {
        let DecoderDims {
            vocab: v,
            embed: e,
            feature: d,
            state: s,
        } = dims;
        let x = e + d;
        let o = s + d + e;
        Self {
            embedding: Tensor::glorot_uniform(&[v, e], v, e, rng),
            w_init: Tensor::glorot_uniform(&[d, s], d, s, rng),
            b_init: Tensor::zeros(&[s]),
            w_z: Tensor::glorot_uniform(&[x, s], x, s, rng),
            w_r: Tensor::glorot_uniform(&[x, s], x, s, rng),
            w_n: Tensor::glorot_uniform(&[x, s], x, s, rng),
            u_z: Tensor::glorot_uniform(&[s, s], s, s, rng),
            u_r: Tensor::glorot_uniform(&[s, s], s, s, rng),
            u_n: Tensor::glorot_uniform(&[s, s], s, s, rng),
            b_z: Tensor::zeros(&[s]),
            b_r: Tensor::zeros(&[s]),
            b_n: Tensor::zeros(&[s]),
            w_o: Tensor::glorot_uniform(&[o, v], o, v, rng),
            b_o: Tensor::zeros(&[v]),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }
}

impl<T> DecoderParams<T> {
    fn fields(&self) -> [(&'static str, &T); 14] {
        [
            ("decoder.embedding", &self.embedding),
            ("decoder.w_init", &self.w_init),
            ("decoder.b_init", &self.b_init),
            ("decoder.w_z", &self.w_z),
            ("decoder.w_r", &self.w_r),
            ("decoder.w_n", &self.w_n),
            ("decoder.u_z", &self.u_z),
            ("decoder.u_r", &self.u_r),
            ("decoder.u_n", &self.u_n),
            ("decoder.b_z", &self.b_z),
            ("decoder.b_r", &self.b_r),
            ("decoder.b_n", &self.b_n),
            ("decoder.w_o", &self.w_o),
            ("decoder.b_o", &self.b_o),
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> DecoderParams<U> {
        let [embedding, w_init, b_init, w_z, w_r, w_n, u_z, u_r, u_n, b_z, b_r, b_n, w_o, b_o] =
            self.fields().map(|(name, t)| f(name, t));
        DecoderParams {
            embedding,
            w_init,
            b_init,
            w_z,
            w_r,
            w_n,
            u_z,
            u_r,
            u_n,
            b_z,
            b_r,
            b_n,
            w_o,
            b_o,
        }
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        vec![
            &mut self.embedding,
            &mut self.w_init,
            &mut self.b_init,
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_n,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_n,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_n,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        f("decoder.embedding", &mut self.embedding);
        f("decoder.w_init", &mut self.w_init);
        f("decoder.b_init", &mut self.b_init);
        f("decoder.w_z", &mut self.w_z);
        f("decoder.w_r", &mut self.w_r);
        f("decoder.w_n", &mut self.w_n);
        f("decoder.u_z", &mut self.u_z);
        f("decoder.u_r", &mut self.u_r);
        f("decoder.u_n", &mut self.u_n);
        f("decoder.b_z", &mut self.b_z);
        f("decoder.b_r", &mut self.b_r);
        f("decoder.b_n", &mut self.b_n);
        f("decoder.w_o", &mut self.w_o);
        f("decoder.b_o", &mut self.b_o);
    }
}

/// s₀ = tanh(mean_i(h_i) · W_init + b_init), as a 1 × S row.
pub fn init_state(tape: &mut Tape, params: &DecoderParams<Var>, annotations: Var) -> Result<Var> {
    let mean = tape.mean_rows(annotations)?;
    let pre = tape.matmul(mean, params.w_init)?;
    let pre = tape.add_bias(pre, params.b_init)?;
    Ok(tape.tanh(pre))
}

/// Embedding row for a word id (the guide-word vector), 1 × E.
pub fn embed(tape: &mut Tape, params: &DecoderParams<Var>, word_id: usize) -> Result<Var> {
    tape.gather_rows(params.embedding, &[word_id])
}

fn gate(tape: &mut Tape, x: Var, w: Var, h: Var, u: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let sum = tape.add(xw, hu)?;
    tape.add_bias(sum, b)
}

/// One GRU step on input [embedding(prev); context]:
///
/// ```text
/// z  = σ(x W_z + s U_z + b_z)
/// r  = σ(x W_r + s U_r + b_r)
/// n  = tanh(x W_n + (r ⊙ s) U_n + b_n)
/// s' = z ⊙ s + (1 − z) ⊙ n
/// logits = [s'; context; embedding(prev)] W_o + b_o
/// ```
pub fn step(tape: &mut Tape, params: &DecoderParams<Var>, prev_word: usize, state: Var, context: Var) -> Result<DecoderStep> {
    let emb = embed(tape, params, prev_word)?;
    step_embedded(tape, params, emb, state, context)
}

pub(crate) fn step_embedded(
    tape: &mut Tape,
    params: &DecoderParams<Var>,
    emb: Var,
    state: Var,
    context: Var,
) -> Result<DecoderStep> {
    let x = tape.concat(&[emb, context])?;
    let z = gate(tape, x, params.w_z, state, params.u_z, params.b_z)?;
    let z = tape.sigmoid(z);
    let r = gate(tape, x, params.w_r, state, params.u_r, params.b_r)?;
    let r = tape.sigmoid(r);
    let rs = tape.mul(r, state)?;
    let n = gate(tape, x, params.w_n, rs, params.u_n, params.b_n)?;
    let n = tape.tanh(n);
    let keep = tape.mul(z, state)?;
    let one_minus_z = tape.one_minus(z);
    let fresh = tape.mul(one_minus_z, n)?;
    let new_state = tape.add(keep, fresh)?;

    let features = tape.concat(&[new_state, context, emb])?;
    let logits = tape.matmul(features, params.w_o)?;
    let logits = tape.add_bias(logits, params.b_o)?;
    Ok(DecoderStep { logits, new_state })
}

//! Attention over annotation vectors, with an optional guide-word bias.
//!
//! Both scoring functions take an extra additive term `g` built from a
//! user-chosen word embedding:
//!
//! * additive (Bahdanau): `e_i = vᵀ tanh(W_hᵀ h_i + W_sᵀ s + g)`, `g = W_uᵀ u`
//! * scaled dot product:  `e_i = ((W_qᵀ s + g) · (W_kᵀ h_i)) / sqrt(A)`, `g = W_ubᵀ u`
//!
//! Without a guide `g` is omitted, so a zero guide vector and an absent
//! guide give the same weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    #[default]
    Bahdanau,
    Dot,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bahdanau" | "additive" => Ok(Self::Bahdanau),
            "dot" => Ok(Self::Dot),
            other => Err(Error::Parameter(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// Only the active scoring function's weights exist.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionParams<T = Tensor> {
    Bahdanau {
        /// D × A
        w_h: T,
        /// S × A
        w_s: T,
        /// E × A
        w_u: T,
        /// A
        v: T,
    },
    Dot {
        /// S × A
        w_q: T,
        /// D × A
        w_k: T,
        /// E × A
        w_ub: T,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionDims {
    pub feature: usize,
    pub state: usize,
    pub embed: usize,
    pub attn: usize,
}

impl AttentionParams {
    pub fn init<R: Rng>(mode: AttentionMode, dims: AttentionDims, rng: &mut R) -> Self {
        let AttentionDims {
            feature: d,
            state: s,
            embed: e,
            attn: a,
        } = dims;
        match mode {
            AttentionMode::Bahdanau => AttentionParams::Bahdanau {
                w_h: Tensor::glorot_uniform(&[d, a], d, a, rng),
                w_s: Tensor::glorot_uniform(&[s, a], s, a, rng),
                w_u: Tensor::glorot_uniform(&[e, a], e, a, rng),
                v: Tensor::glorot_uniform(&[a], a, 1, rng),
            },
            AttentionMode::Dot => AttentionParams::Dot {
                w_q: Tensor::glorot_uniform(&[s, a], s, a, rng),
                w_k: Tensor::glorot_uniform(&[d, a], d, a, rng),
                w_ub: Tensor::glorot_uniform(&[e, a], e, a, rng),
            },
        }
    }
}

impl<T> AttentionParams<T> {
    pub fn mode(&self) -> AttentionMode {
        match self {
            AttentionParams::Bahdanau { .. } => AttentionMode::Bahdanau,
            AttentionParams::Dot { .. } => AttentionMode::Dot,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> AttentionParams<U> {
        match self {
            AttentionParams::Bahdanau { w_h, w_s, w_u, v } => AttentionParams::Bahdanau {
                w_h: f("attention.w_h", w_h),
                w_s: f("attention.w_s", w_s),
                w_u: f("attention.w_u", w_u),
                v: f("attention.v", v),
            },
            AttentionParams::Dot { w_q, w_k, w_ub } => AttentionParams::Dot {
                w_q: f("attention.w_q", w_q),
                w_k: f("attention.w_k", w_k),
                w_ub: f("attention.w_ub", w_ub),
            },
        }
    }

    /// Mutable references in the same order as [`AttentionParams::map`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        match self {
            AttentionParams::Bahdanau { w_h, w_s, w_u, v } => vec![w_h, w_s, w_u, v],
            AttentionParams::Dot { w_q, w_k, w_ub } => vec![w_q, w_k, w_ub],
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        match self {
            AttentionParams::Bahdanau { w_h, w_s, w_u, v } => {
                f("attention.w_h", w_h);
                f("attention.w_s", w_s);
                f("attention.w_u", w_u);
                f("attention.v", v);
            }
            AttentionParams::Dot { w_q, w_k, w_ub } => {
                f("attention.w_q", w_q);
                f("attention.w_k", w_k);
                f("attention.w_ub", w_ub);
            }
        }
    }
}

/// Result of one attention read, all as tape values.
#[derive(Debug, Clone, Copy)]
pub struct AttentionStep {
    /// 1 × L, on the simplex.
    pub weights: Var,
    /// 1 × D, Σ a_i h_i.
    pub context: Var,
    /// 1 × L, pre-softmax.
    pub scores: Var,
}

/// Per-image quantities reused at every decode step.
#[derive(Debug, Clone, Copy)]
pub struct PreparedAnnotations {
    pub annotations: Var,
    /// L × A projected annotations (additive), or A × L transposed keys (dot).
    keys: Var,
}

pub fn prepare(tape: &mut Tape, params: &AttentionParams<Var>, annotations: Var) -> Result<PreparedAnnotations> {
    let keys = match params {
        AttentionParams::Bahdanau { w_h, .. } => tape.matmul(annotations, *w_h)?,
        AttentionParams::Dot { w_k, .. } => {
            let k = tape.matmul(annotations, *w_k)?;
            tape.transpose(k)?
        }
    };
    Ok(PreparedAnnotations { annotations, keys })
}

/// Project a guide embedding (1 × E or E) into the score space: 1 × A.
pub fn guide_bias(tape: &mut Tape, params: &AttentionParams<Var>, guide: Var) -> Result<Var> {
    let w = match params {
        AttentionParams::Bahdanau { w_u, .. } => *w_u,
        AttentionParams::Dot { w_ub, .. } => *w_ub,
    };
    let e = tape.shape(w)[0];
    if tape.value(guide).len() != e {
        return Err(Error::dim(
            "attend",
            format!("guide has {} entries, projection expects {e}", tape.value(guide).len()),
        ));
    }
    let row = if tape.shape(guide).len() == 2 {
        guide
    } else {
        tape.reshape(guide, &[1, e])?
    };
    tape.matmul(row, w)
}

/// One attention read given decoder state `state` (1 × S) and an optional
/// projected guide bias (1 × A, from [`guide_bias`]).
pub fn attend_prepared(
    tape: &mut Tape,
    params: &AttentionParams<Var>,
    prepared: &PreparedAnnotations,
    state: Var,
    bias: Option<Var>,
) -> Result<AttentionStep> {
    let l = tape.shape(prepared.annotations)[0];
    let scores = match params {
        AttentionParams::Bahdanau { w_s, v, .. } => {
            let mut q = tape.matmul(state, *w_s)?;
            if let Some(g) = bias {
                q = tape.add(q, g)?;
            }
            let pre = tape.add_bias(prepared.keys, q)?;
            let act = tape.tanh(pre);
            let a = tape.shape(*v)[0];
            let v_col = tape.reshape(*v, &[a, 1])?;
            let e = tape.matmul(act, v_col)?;
            tape.reshape(e, &[1, l])?
        }
        AttentionParams::Dot { w_q, .. } => {
            let mut q = tape.matmul(state, *w_q)?;
            if let Some(g) = bias {
                q = tape.add(q, g)?;
            }
            let a = tape.shape(q)[1];
            let raw = tape.matmul(q, prepared.keys)?;
            tape.scale(raw, 1.0 / (a as f64).sqrt())
        }
    };
    let weights = tape.softmax(scores)?;
    let context = tape.matmul(weights, prepared.annotations)?;
    Ok(AttentionStep {
        weights,
        context,
        scores,
    })
}

/// Full attention read: annotations (L × D), state (1 × S), optional raw
/// guide embedding (E).
pub fn attend(
    tape: &mut Tape,
    params: &AttentionParams<Var>,
    annotations: Var,
    state: Var,
    guide: Option<Var>,
) -> Result<AttentionStep> {
    let prepared = prepare(tape, params, annotations)?;
    let bias = guide.map(|g| guide_bias(tape, params, g)).transpose()?;
    attend_prepared(tape, params, &prepared, state, bias)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const DIMS: AttentionDims = AttentionDims {
        feature: 5,
        state: 4,
        embed: 3,
        attn: 6,
    };

    fn setup(mode: AttentionMode, seed: u64, annotations: Tensor) -> (Tape, AttentionParams<Var>, Var, Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionParams::init(mode, DIMS, &mut rng);
        let state = Tensor::uniform(&[1, DIMS.state], 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = params.map(|_, t| tape.param(t.clone()));
        let h = tape.constant(annotations);
        let s = tape.constant(state);
        (tape, p, h, s)
    }

    fn random_annotations(l: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[l, DIMS.feature], 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn singleton_gets_all_the_weight() {
        for mode in [AttentionMode::Bahdanau, AttentionMode::Dot] {
            let ann = random_annotations(1, 3);
            let (mut tape, p, h, s) = setup(mode, 1, ann.clone());
            let step = attend(&mut tape, &p, h, s, None).unwrap();
            assert_eq!(tape.value(step.weights).data(), &[1.0]);
            assert_eq!(tape.value(step.context).data(), ann.data());
        }
    }

    #[test]
    fn identical_annotations_give_uniform_weights() {
        for mode in [AttentionMode::Bahdanau, AttentionMode::Dot] {
            let row = [0.3, -0.2, 0.9, 0.0, 1.1];
            let ann = Tensor::new(vec![4, 5], row.repeat(4)).unwrap();
            let (mut tape, p, h, s) = setup(mode, 2, ann);
            let step = attend(&mut tape, &p, h, s, None).unwrap();
            for &w in tape.value(step.weights).data() {
                assert!((w - 0.25).abs() < 1e-15);
            }
            for (c, r) in tape.value(step.context).data().iter().zip(row) {
                assert!((c - r).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_guide_matches_absent_guide() {
        for mode in [AttentionMode::Bahdanau, AttentionMode::Dot] {
            let (mut tape, p, h, s) = setup(mode, 3, random_annotations(7, 4));
            let plain = attend(&mut tape, &p, h, s, None).unwrap();
            let zero = tape.constant(Tensor::zeros(&[DIMS.embed]));
            let guided = attend(&mut tape, &p, h, s, Some(zero)).unwrap();
            assert_eq!(tape.value(plain.weights), tape.value(guided.weights));
            assert_eq!(tape.value(plain.context), tape.value(guided.context));
        }
    }

    #[test]
    fn guide_dimension_is_checked() {
        let (mut tape, p, h, s) = setup(AttentionMode::Bahdanau, 3, random_annotations(7, 4));
        let bad = tape.constant(Tensor::zeros(&[DIMS.embed + 1]));
        assert!(matches!(attend(&mut tape, &p, h, s, Some(bad)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn saturated_scores_select_one_annotation() {
        // v = e_1 and W_h routes feature 0 into that unit, so a large
        // feature-0 value on one row drives its score far above the rest.
        let mut tape = Tape::new();
        let (d, s_dim, e, a) = (3, 2, 2, 2);
        let mut w_h = Tensor::zeros(&[d, a]);
        w_h.data_mut()[0] = 1.0;
        let params = AttentionParams::Bahdanau {
            w_h: tape.constant(w_h),
            w_s: tape.constant(Tensor::zeros(&[s_dim, a])),
            w_u: tape.constant(Tensor::zeros(&[e, a])),
            v: tape.constant(Tensor::new(vec![a], vec![30.0, 0.0]).unwrap()),
        };
        let ann = Tensor::new(vec![3, 3], vec![-20.0, 1.0, 2.0, 20.0, 3.0, 4.0, -20.0, 5.0, 6.0]).unwrap();
        let h = tape.constant(ann);
        let st = tape.constant(Tensor::zeros(&[1, s_dim]));
        let step = attend(&mut tape, &params, h, st, None).unwrap();
        let c = tape.value(step.context).data();
        for (got, want) in c.iter().zip([20.0, 3.0, 4.0]) {
            assert!((got - want).abs() < 1e-8, "{c:?}");
        }
    }

    #[test]
    fn permuting_annotations_permutes_weights() {
        for mode in [AttentionMode::Bahdanau, AttentionMode::Dot] {
            let ann = random_annotations(5, 9);
            let perm = [3, 0, 4, 1, 2];
            let mut shuffled = Vec::new();
            for &i in &perm {
                shuffled.extend_from_slice(ann.row_slice(i));
            }
            let shuffled = Tensor::new(vec![5, DIMS.feature], shuffled).unwrap();
            let (mut tape, p, h, s) = setup(mode, 5, ann);
            let base = attend(&mut tape, &p, h, s, None).unwrap();
            let h2 = tape.constant(shuffled);
            let moved = attend(&mut tape, &p, h2, s, None).unwrap();
            let (wa, wb) = (tape.value(base.weights).data(), tape.value(moved.weights).data());
            for (j, &i) in perm.iter().enumerate() {
                assert!((wb[j] - wa[i]).abs() < 1e-12);
            }
            let diff = tape.value(base.context).max_abs_diff(tape.value(moved.context));
            assert!(diff < 1e-12);
        }
    }
}

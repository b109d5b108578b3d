//! The full encoder–attention–decoder captioner and its training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionDims, AttentionMode, AttentionParams, PreparedAnnotations};
use crate::decoder::{self, DecoderDims, DecoderParams};
use crate::encoder::{self, EncoderParams, DEFAULT_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::{Vocabulary, END, PAD, START};

/// Architecture hyperparameters. Stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub attention_mode: AttentionMode,
    pub encoder_channels: Vec<usize>,
    pub embed_dim: usize,
    pub state_dim: usize,
    pub attn_dim: usize,
    /// Decode length cap (tokens emitted, END included).
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            attention_mode: AttentionMode::Bahdanau,
            encoder_channels: DEFAULT_CHANNELS.to_vec(),
            embed_dim: 64,
            state_dim: 128,
            attn_dim: 64,
            max_len: 20,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        *self.encoder_channels.last().expect("at least one encoder stage")
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() != 3 {
            return Err(Error::Parameter(format!(
                "the encoder has exactly three stages, got {} channel counts",
                self.encoder_channels.len()
            )));
        }
        let dims = [
            ("embed_dim", self.embed_dim),
            ("state_dim", self.state_dim),
            ("attn_dim", self.attn_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::Parameter("encoder channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Every trainable tensor of the model, generic over storage so the same
/// structure holds values, tape handles, gradients or optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub encoder: EncoderParams<T>,
    pub attention: AttentionParams<T>,
    pub decoder: DecoderParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.map(&mut f),
            attention: self.attention.map(&mut f),
            decoder: self.decoder.map(&mut f),
        }
    }

    /// Visit in canonical order (encoder, attention, decoder).
    pub fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        self.map(|n, t| f(n, t));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        self.encoder.for_each_mut(&mut f);
        self.attention.for_each_mut(&mut f);
        self.decoder.for_each_mut(&mut f);
    }

    /// Mutable references in canonical order.
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = self.encoder.values_mut();
        out.extend(self.attention.values_mut());
        out.extend(self.decoder.values_mut());
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _| out.push(n.to_string()));
        out
    }
}

impl ModelParams {
    pub fn num_values(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    /// Put every tensor on `tape` as a trainable leaf or as a constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelParams<Var> {
        self.map(|_, t| tape.leaf(t.clone(), trainable))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

impl CaptionModel {
    /// Fresh parameters drawn from a single seeded stream in canonical order.
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&config.encoder_channels, &mut rng);
        let attention = AttentionParams::init(
            config.attention_mode,
            AttentionDims {
                feature: config.feature_dim(),
                state: config.state_dim,
                embed: config.embed_dim,
                attn: config.attn_dim,
            },
            &mut rng,
        );
        let decoder = DecoderParams::init(
            DecoderDims {
                vocab: vocab.len(),
                embed: config.embed_dim,
                feature: config.feature_dim(),
                state: config.state_dim,
            },
            &mut rng,
        );
        Ok(Self {
            config,
            vocab,
            params: ModelParams {
                encoder,
                attention,
                decoder,
            },
        })
    }

    /// Teacher-forced loss for one image without recording gradients.
    pub fn loss(&self, image: &Tensor, targets: &[usize], guide: Option<usize>) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let img = tape.constant(image.clone());
        let loss = sequence_loss(&mut tape, &p, img, targets, guide)?;
        Ok(tape.value(loss).item())
    }

    /// Loss and the gradient of every parameter.
    pub fn loss_and_grad(&self, image: &Tensor, targets: &[usize], guide: Option<usize>) -> Result<(f64, ModelParams<Vec<f64>>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true);
        let img = tape.constant(image.clone());
        let loss = sequence_loss(&mut tape, &p, img, targets, guide)?;
        tape.backward(loss)?;
        let grads = p.map(|_, v| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(*v).len()])
        });
        Ok((tape.value(loss).item(), grads))
    }
}

/// The decoder's embedding row for `word_id`: the vector injected into
/// attention when the user picks that word.
pub fn guide_embedding(params: &DecoderParams, word_id: usize) -> Result<Tensor> {
    let v = params.vocab_size();
    if word_id >= v {
        return Err(Error::Data(format!("guide word id {word_id} out of range for vocabulary of {v}")));
    }
    Ok(Tensor::row(params.embedding.row_slice(word_id).to_vec()).reshape(&[params.embedding.shape()[1]])?)
}

/// Per-image state shared by every decode step.
#[derive(Debug, Clone, Copy)]
pub struct ImageContext {
    pub prepared: PreparedAnnotations,
    pub initial_state: Var,
}

pub fn begin_image(tape: &mut Tape, params: &ModelParams<Var>, image: Var) -> Result<ImageContext> {
    let annotations = encoder::encode_on(tape, &params.encoder, image)?;
    let prepared = attention::prepare(tape, &params.attention, annotations)?;
    let initial_state = decoder::init_state(tape, &params.decoder, annotations)?;
    Ok(ImageContext {
        prepared,
        initial_state,
    })
}

/// Projected attention bias for a guide word id (1 × A).
pub fn guide_bias_for_word(tape: &mut Tape, params: &ModelParams<Var>, word_id: usize) -> Result<Var> {
    let emb = decoder::embed(tape, &params.decoder, word_id)?;
    attention::guide_bias(tape, &params.attention, emb)
}

fn check_target(targets: &[usize], vocab: usize) -> Result<usize> {
    if targets.len() < 2 || targets[0] != START {
        return Err(Error::Data("target sequence must start with START and have at least two tokens".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Data(format!("target id {bad} out of range for vocabulary of {vocab}")));
    }
    targets
        .iter()
        .position(|&t| t == END)
        .ok_or_else(|| Error::Data("target sequence has no END token".into()))
}

/// Teacher-forced mean cross-entropy: at step t attend with state s_{t-1}
/// (and the guide bias, if any), feed ground-truth token t-1 and score
/// token t. Positions after END, and PAD targets, do not count.
pub fn sequence_loss(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    image: Var,
    targets: &[usize],
    guide: Option<usize>,
) -> Result<Var> {
    let vocab = tape.shape(params.decoder.embedding)[0];
    let end = check_target(targets, vocab)?;
    let ctx = begin_image(tape, params, image)?;
    let bias = guide.map(|g| guide_bias_for_word(tape, params, g)).transpose()?;
    let mut state = ctx.initial_state;
    let mut rows = Vec::with_capacity(end);
    for t in 1..=end {
        let att = attention::attend_prepared(tape, &params.attention, &ctx.prepared, state, bias)?;
        let out = decoder::step(tape, &params.decoder, targets[t - 1], state, att.context)?;
        rows.push(out.logits);
        state = out.new_state;
    }
    let logits = tape.concat_rows(&rows)?;
    let next = &targets[1..=end];
    let mask: Vec<bool> = next.iter().map(|&t| t != PAD).collect();
    tape.cross_entropy_masked(logits, next, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scene, SceneSpec};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            attention_mode: AttentionMode::Bahdanau,
            encoder_channels: vec![2, 3, 4],
            embed_dim: 3,
            state_dim: 5,
            attn_dim: 4,
            max_len: 20,
        }
    }

    fn model(config: ModelConfig) -> CaptionModel {
        let vocab = Vocabulary::build(&["a red circle left of a blue square"], 1).unwrap();
        CaptionModel::init(config, vocab, 7).unwrap()
    }

    #[test]
    fn zero_output_projection_gives_log_v() {
        let mut m = model(tiny_config());
        m.params.decoder.w_o = Tensor::zeros(m.params.decoder.w_o.shape());
        m.params.decoder.b_o = Tensor::zeros(m.params.decoder.b_o.shape());
        let img = generate_scene(&SceneSpec::from_seed(1)).unwrap().pixels;
        let ids = m.vocab.encode("a red circle", 10).unwrap();
        let loss = m.loss(&img, &ids, None).unwrap();
        assert!((loss - (m.vocab.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_prediction_target() {
        let m = model(tiny_config());
        let img = generate_scene(&SceneSpec::from_seed(1)).unwrap().pixels;
        let loss = m.loss(&img, &[START, END], None).unwrap();
        assert!(loss > 0.0 && loss.is_finite());
    }

    #[test]
    fn trailing_pad_does_not_change_loss() {
        let m = model(tiny_config());
        let img = generate_scene(&SceneSpec::from_seed(2)).unwrap().pixels;
        let ids = m.vocab.encode("a blue square", 5).unwrap();
        let mut padded = ids.clone();
        padded.extend([PAD; 6]);
        let a = m.loss(&img, &ids, None).unwrap();
        let b = m.loss(&img, &padded, None).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn malformed_targets_are_data_errors() {
        let m = model(tiny_config());
        let img = generate_scene(&SceneSpec::from_seed(2)).unwrap().pixels;
        for bad in [vec![START], vec![5, 6, END], vec![START, 5, 6], vec![START, 999, END]] {
            assert!(matches!(m.loss(&img, &bad, None), Err(Error::Data(_))), "{bad:?}");
        }
    }

    #[test]
    fn guide_embedding_is_a_row_gather() {
        let m = model(tiny_config());
        let id = m.vocab.id("square").unwrap();
        let g = guide_embedding(&m.params.decoder, id).unwrap();
        assert_eq!(g.data(), m.params.decoder.embedding.row_slice(id));
        assert_eq!(g, guide_embedding(&m.params.decoder, id).unwrap());
        assert!(matches!(guide_embedding(&m.params.decoder, m.vocab.len()), Err(Error::Data(_))));
    }

    #[test]
    fn parameter_names_are_unique_and_mode_specific() {
        let b = model(ModelConfig::default());
        let names = b.params.names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"attention.w_u".to_string()));
        assert!(!names.iter().any(|n| n.contains("w_q")));

        let mut cfg = ModelConfig::default();
        cfg.attention_mode = AttentionMode::Dot;
        let d = model(cfg);
        assert!(d.params.names().contains(&"attention.w_ub".to_string()));
        assert!(!d.params.names().contains(&"attention.v".to_string()));
    }
}

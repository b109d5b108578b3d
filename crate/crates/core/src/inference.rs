//! Greedy caption generation, guided decoding and attention traces.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::attend_prepared;
use crate::dataset::{encode_png, tensor_to_rgb, IMAGE_SIZE};
use crate::decoder;
use crate::encoder::GRID_SIDE;
use crate::error::{Error, Result};
use crate::model::{begin_image, guide_bias_for_word, CaptionModel};
use crate::tensor::{Tape, Tensor};
use crate::vocab::{tokenize, END, START, UNK};

/// Per-token attention grids of one decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub tokens: Vec<String>,
    /// One 8×8 grid per token, row-major cells.
    pub grids: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "guide")]
    pub guide_word: Option<String>,
}

impl AttentionTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("invalid attention trace JSON: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionMode {
    Auto,
    Interactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub caption: String,
    pub trace: AttentionTrace,
    pub mode: CaptionMode,
    /// The guide word was not in the vocabulary and fell back to `<unk>`.
    pub degraded_guide: bool,
}

/// How a guide word steers decoding. Both on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuideOptions {
    /// Add the projected guide embedding to every attention score.
    pub attention_bias: bool,
    /// Emit the guide word as the first token.
    pub force_prefix: bool,
}

impl Default for GuideOptions {
    fn default() -> Self {
        Self {
            attention_bias: true,
            force_prefix: true,
        }
    }
}

/// Greedy decode with no guide.
pub fn caption_auto(model: &CaptionModel, image: &Tensor) -> Result<CaptionResult> {
    decode(model, image, None, GuideOptions::default())
}

/// Sentence completion from a user-chosen word.
pub fn caption_interactive(model: &CaptionModel, image: &Tensor, guide_word: &str) -> Result<CaptionResult> {
    caption_interactive_with(model, image, guide_word, GuideOptions::default())
}

pub fn caption_interactive_with(
    model: &CaptionModel,
    image: &Tensor,
    guide_word: &str,
    options: GuideOptions,
) -> Result<CaptionResult> {
    let tokens = tokenize(guide_word);
    let word = match tokens.as_slice() {
        [] => return Err(Error::Parameter("guide word must not be empty".into())),
        [w] => w.clone(),
        _ => return Err(Error::Parameter(format!("guide must be a single word, got {guide_word:?}"))),
    };
    decode(model, image, Some(word), options)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn to_grid(weights: &[f64]) -> Vec<Vec<f64>> {
    weights.chunks(GRID_SIDE).map(<[f64]>::to_vec).collect()
}

fn decode(model: &CaptionModel, image: &Tensor, guide: Option<String>, options: GuideOptions) -> Result<CaptionResult> {
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape, false);
    let img = tape.constant(image.clone());
    let ctx = begin_image(&mut tape, &params, img)?;

    let guide_id = guide.as_deref().map(|w| model.vocab.id(w).unwrap_or(UNK));
    let degraded = guide_id == Some(UNK);
    let bias = match guide_id {
        Some(id) if options.attention_bias => Some(guide_bias_for_word(&mut tape, &params, id)?),
        _ => None,
    };
    let forced = guide_id.filter(|&id| options.force_prefix && id != UNK);

    let mut state = ctx.initial_state;
    let mut prev = START;
    let mut ids = Vec::new();
    let mut grids = Vec::new();
    for t in 0..model.config.max_len {
        let att = attend_prepared(&mut tape, &params.attention, &ctx.prepared, state, bias)?;
        let out = decoder::step(&mut tape, &params.decoder, prev, state, att.context)?;
        let next = match forced {
            Some(id) if t == 0 => id,
            _ => argmax(tape.value(out.logits).data()),
        };
        if next == END {
            break;
        }
        ids.push(next);
        grids.push(to_grid(tape.value(att.weights).data()));
        prev = next;
        state = out.new_state;
    }
    let tokens: Vec<String> = ids
        .iter()
        .map(|&id| model.vocab.word(id).map(str::to_string).ok_or_else(|| Error::Data(format!("decoded id {id} outside vocabulary"))))
        .collect::<Result<_>>()?;
    Ok(CaptionResult {
        caption: tokens.join(" "),
        mode: if guide.is_some() {
            CaptionMode::Interactive
        } else {
            CaptionMode::Auto
        },
        trace: AttentionTrace {
            tokens,
            grids,
            guide_word: guide,
        },
        degraded_guide: degraded,
    })
}

/// Attention weights of the first decode step (before any token is fed back).
pub fn first_step_attention(model: &CaptionModel, image: &Tensor, guide_word: Option<&str>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape, false);
    let img = tape.constant(image.clone());
    let ctx = begin_image(&mut tape, &params, img)?;
    let bias = match guide_word {
        Some(w) => {
            let id = model.vocab.id(w).unwrap_or(UNK);
            Some(guide_bias_for_word(&mut tape, &params, id)?)
        }
        None => None,
    };
    let att = attend_prepared(&mut tape, &params.attention, &ctx.prepared, ctx.initial_state, bias)?;
    Ok(tape.value(att.weights).data().to_vec())
}

/// Total weight on the given grid cells.
pub fn attention_mass(weights: &[f64], cells: &[usize]) -> f64 {
    cells.iter().map(|&c| weights[c]).sum()
}

/// Bilinear upsampling of a square grid to `size × size` (pixel-centre aligned, edge-clamped).
pub fn upsample_bilinear(grid: &[Vec<f64>], size: usize) -> Vec<f64> {
    let n = grid.len();
    let scale = n as f64 / size as f64;
    let coord = |p: usize| -> (usize, usize, f64) {
        let s = ((p as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let (y0, y1, fy) = coord(y);
        for x in 0..size {
            let (x0, x1, fx) = coord(x);
            let top = grid[y0][x0] * (1.0 - fx) + grid[y0][x1] * fx;
            let bottom = grid[y1][x0] * (1.0 - fx) + grid[y1][x1] * fx;
            out[y * size + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

pub const OVERLAY_ALPHA: f64 = 0.5;

/// One overlay per token: the grid, upsampled and scaled so its peak is 1,
/// blended as a gray heat map over the image with α = 0.5.
pub fn render_trace(trace: &AttentionTrace, image: &Tensor) -> Result<Vec<Tensor>> {
    if image.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(Error::dim("render_trace", format!("expected a 3×64×64 image, got {:?}", image.shape())));
    }
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    trace
        .grids
        .iter()
        .map(|grid| {
            let heat = upsample_bilinear(grid, IMAGE_SIZE);
            let peak = heat.iter().cloned().fold(0.0, f64::max);
            let norm = if peak > 0.0 { peak } else { 1.0 };
            let data = image
                .data()
                .iter()
                .enumerate()
                .map(|(i, &p)| (1.0 - OVERLAY_ALPHA) * p + OVERLAY_ALPHA * heat[i % plane] / norm)
                .collect();
            Tensor::new(vec![3, IMAGE_SIZE, IMAGE_SIZE], data)
        })
        .collect()
}

/// Write `trace.json` and one `NN_word.png` overlay per token into `dir`.
pub fn write_trace(trace: &AttentionTrace, image: &Tensor, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("trace.json");
    std::fs::write(&json, trace.to_json()).map_err(|e| Error::io(&json, e))?;
    for (k, (overlay, token)) in render_trace(trace, image)?.iter().zip(&trace.tokens).enumerate() {
        let safe: String = token.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        let path = dir.join(format!("{k:02}_{safe}.png"));
        std::fs::write(&path, encode_png(&tensor_to_rgb(overlay))).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

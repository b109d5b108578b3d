//! Training loop, optimizer and the three-environment comparison.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CaptionedImage, Color, Darkness, Relation, ShapeKind};
use crate::error::{Error, Result};
use crate::model::{CaptionModel, ModelConfig, ModelParams};
use crate::vocab::{normalize, tokenize, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub model: ModelConfig,
    /// Lighting regime of the corpus; recorded, not applied.
    pub darkness: Darkness,
    pub guided_step_fraction: f64,
    pub heldout_fraction: f64,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-3,
            grad_clip_norm: 5.0,
            seed: 1,
            model: ModelConfig::default(),
            darkness: Darkness::Bright,
            guided_step_fraction: 0.5,
            heldout_fraction: 0.1,
            min_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} is not a finite non-negative number", self.learning_rate)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Parameter(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm)));
        }
        if !(0.0..=1.0).contains(&self.guided_step_fraction) {
            return Err(Error::Parameter("guided_step_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Parameter("heldout_fraction must lie in [0, 1)".into()));
        }
        if self.min_count == 0 {
            return Err(Error::Parameter("min_count must be at least 1".into()));
        }
        self.model.validate()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Moments for tensors of the given lengths.
    pub fn new(learning_rate: f64, sizes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update; `params[i]` and `grads[i]` pair with the i-th size given to [`Adam::new`].
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed under the optimizer");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescale so the global L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// A guide word and the sentence the model should complete from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuidedTarget {
    pub guide: String,
    pub target: String,
}

const STOPWORDS: [&str; 14] = [
    "a", "an", "the", "of", "in", "on", "and", "with", "is", "are", "to", "at", "its", "their",
];

fn parse_template(tokens: &[String]) -> Option<[(Color, ShapeKind); 2]> {
    let t: Vec<&str> = tokens.iter().map(String::as_str).collect();
    let rel_len = match t.len() {
        7 => 1,
        8 => 2,
        _ => return None,
    };
    let rel = t[3..3 + rel_len].join(" ");
    if t[0] != "a" || t[3 + rel_len] != "a" || !["above", "below", "left of", "right of"].contains(&rel.as_str()) {
        return None;
    }
    let color = |w: &str| crate::dataset::COLORS.into_iter().find(|c| c.name() == w);
    let first = (color(t[1])?, ShapeKind::from_name(t[2])?);
    let second = (color(t[4 + rel_len])?, ShapeKind::from_name(t[5 + rel_len])?);
    Some([first, second])
}

/// Colors and shapes of a two-object template caption, in caption order.
pub fn parse_template_caption(caption: &str) -> Option<[(Color, ShapeKind); 2]> {
    parse_template(&tokenize(caption))
}

fn relation_from_phrase(tokens: &[String]) -> Relation {
    match tokens[3].as_str() {
        "above" => Relation::Above,
        "below" => Relation::Below,
        "left" => Relation::LeftOf,
        _ => Relation::RightOf,
    }
}

/// Candidate guided targets for a caption. For a two-object template
/// caption each shape noun yields `"{noun} {relation} a {color} {other}"`,
/// with the relation inverted when the second object leads. Other captions
/// yield, for each content word, the caption suffix starting at that word.
pub fn guided_targets(caption: &str) -> Vec<GuidedTarget> {
    let tokens = tokenize(caption);
    if let Some([(c1, s1), (c2, s2)]) = parse_template(&tokens) {
        let rel = relation_from_phrase(&tokens);
        return vec![
            GuidedTarget {
                guide: s1.name().into(),
                target: format!("{} {} a {} {}", s1.name(), rel.phrase(), c2.name(), s2.name()),
            },
            GuidedTarget {
                guide: s2.name().into(),
                target: format!("{} {} a {} {}", s2.name(), rel.inverse().phrase(), c1.name(), s1.name()),
            },
        ];
    }
    tokens
        .iter()
        .enumerate()
        .filter(|(_, w)| !STOPWORDS.contains(&w.as_str()))
        .map(|(i, w)| GuidedTarget {
            guide: w.clone(),
            target: tokens[i..].join(" "),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// Mean per-sample training loss of each epoch.
    pub train: Vec<f64>,
    /// Unguided loss on the held-out split after each epoch; absent without a split.
    pub heldout: Option<Vec<f64>>,
}

impl LossCurve {
    pub fn final_train(&self) -> f64 {
        *self.train.last().expect("curve has at least one epoch")
    }

    pub fn final_heldout(&self) -> Option<f64> {
        self.heldout.as_ref().and_then(|h| h.last().copied())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,heldout_loss\n");
        for (i, t) in self.train.iter().enumerate() {
            let h = self
                .heldout
                .as_ref()
                .map(|h| format!("{:.17e}", h[i]))
                .unwrap_or_default();
            let _ = writeln!(out, "{},{:.17e},{}", i + 1, t, h);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CaptionModel,
    pub curve: LossCurve,
    pub train_indices: Vec<usize>,
    pub heldout_indices: Vec<usize>,
}

/// Deterministic split of `n` items: (train, held-out).
pub fn split_indices(n: usize, heldout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    idx.shuffle(&mut rng);
    let k = if heldout_fraction > 0.0 && n >= 2 {
        ((n as f64 * heldout_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let heldout = idx.split_off(n - k);
    (idx, heldout)
}

struct Sample {
    image: usize,
    caption: String,
    guided: Vec<(usize, Vec<usize>)>,
}

fn target_len(model: &ModelConfig) -> usize {
    model.max_len + 1
}

fn heldout_loss(model: &CaptionModel, corpus: &[CaptionedImage], indices: &[usize]) -> Result<f64> {
    let len = target_len(&model.config);
    let mut total = 0.0;
    let mut count = 0usize;
    for &i in indices {
        for c in &corpus[i].captions {
            let ids = model.vocab.encode(c, len)?;
            total += model.loss(&corpus[i].pixels, &ids, None)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Train a fresh model on `corpus` with Adam and clipped gradients.
pub fn train(config: &TrainConfig, corpus: &[CaptionedImage]) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("cannot train on an empty corpus".into()));
    }
    let captions: Vec<&str> = corpus.iter().flat_map(|c| c.captions.iter().map(String::as_str)).collect();
    let vocab = Vocabulary::build(&captions, config.min_count)?;
    let mut model = CaptionModel::init(config.model.clone(), vocab, config.seed)?;
    let (train_idx, heldout_idx) = split_indices(corpus.len(), config.heldout_fraction, config.seed);
    let len = target_len(&config.model);

    let mut samples = Vec::new();
    for &i in &train_idx {
        for c in &corpus[i].captions {
            let guided = guided_targets(c)
                .into_iter()
                .filter_map(|g| model.vocab.id(&g.guide).map(|id| (id, g.target)))
                .map(|(id, t)| Ok((id, model.vocab.encode(&t, len)?)))
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                image: i,
                caption: normalize(c),
                guided,
            });
        }
    }
    let encoded: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| model.vocab.encode(&s.caption, len))
        .collect::<Result<_>>()?;

    let mut sizes = Vec::new();
    model.params.for_each(|_, t| sizes.push(t.len()));
    let mut adam = Adam::new(config.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut curve = LossCurve {
        train: Vec::with_capacity(config.epochs),
        heldout: (!heldout_idx.is_empty()).then(|| Vec::with_capacity(config.epochs)),
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &si in batch {
                let s = &samples[si];
                let guided = !s.guided.is_empty() && rng.gen::<f64>() < config.guided_step_fraction;
                let (targets, guide) = if guided {
                    let (g, t) = &s.guided[rng.gen_range(0..s.guided.len())];
                    (t, Some(*g))
                } else {
                    (&encoded[si], None)
                };
                let (loss, grads) = model.loss_and_grad(&corpus[s.image].pixels, targets, guide)?;
                epoch_loss += loss;
                let mut k = 0;
                grads.for_each(|_, g| {
                    acc[k].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    k += 1;
                });
            }
            let inv = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().for_each(|g| *g *= inv);
            let norm = clip_global_norm(&mut acc, config.grad_clip_norm);
            debug!("step {} grad norm {norm:.4}", adam.steps_taken() + 1);
            apply(&mut adam, &mut model.params, &acc);
        }
        let train_loss = epoch_loss / samples.len() as f64;
        curve.train.push(train_loss);
        if let Some(h) = curve.heldout.as_mut() {
            let l = heldout_loss(&model, corpus, &heldout_idx)?;
            h.push(l);
            info!("epoch {epoch}/{}: train {train_loss:.4} heldout {l:.4}", config.epochs);
        } else {
            info!("epoch {epoch}/{}: train {train_loss:.4}", config.epochs);
        }
    }
    Ok(TrainOutcome {
        model,
        curve,
        train_indices: train_idx,
        heldout_indices: heldout_idx,
    })
}

fn apply(adam: &mut Adam, params: &mut ModelParams, grads: &[Vec<f64>]) {
    let mut slices: Vec<&mut [f64]> = params.values_mut().into_iter().map(|t| t.data_mut()).collect();
    adam.update(&mut slices, grads);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentRun {
    pub environment: String,
    pub curve: LossCurve,
    pub final_train_loss: f64,
    pub final_heldout_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossGap {
    pub environment: String,
    pub reference: String,
    /// |L_env − L_ref| / L_ref on held-out loss (training loss without a split).
    pub relative_gap: f64,
    pub train_relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub runs: Vec<EnvironmentRun>,
    pub gaps: Vec<LossGap>,
}

impl ComparisonReport {
    pub fn gap(&self, environment: &str, reference: &str) -> Option<f64> {
        self.gaps
            .iter()
            .find(|g| g.environment == environment && g.reference == reference)
            .map(|g| g.relative_gap)
    }
}

pub struct EnvironmentCorpora<'a> {
    pub bright: &'a [CaptionedImage],
    pub dark: &'a [CaptionedImage],
    pub mixed: &'a [CaptionedImage],
}

pub struct Comparison {
    pub report: ComparisonReport,
    /// Trained models in bright, dark, mixed order.
    pub models: Vec<CaptionModel>,
}

fn relative_gap(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference
}

/// Train three models that differ only in their corpus and report their
/// final losses and pairwise relative gaps.
pub fn compare_environments(base: &TrainConfig, corpora: &EnvironmentCorpora<'_>) -> Result<Comparison> {
    let n = corpora.bright.len();
    if corpora.dark.len() != n || corpora.mixed.len() != n {
        return Err(Error::Parameter(format!(
            "corpora must have equal sizes, got bright {n}, dark {}, mixed {}",
            corpora.dark.len(),
            corpora.mixed.len()
        )));
    }
    let envs = [("bright", corpora.bright), ("dark", corpora.dark), ("mixed", corpora.mixed)];
    let mut runs = Vec::new();
    let mut models = Vec::new();
    for (label, corpus) in envs {
        info!("training {label} environment");
        let out = train(base, corpus)?;
        runs.push(EnvironmentRun {
            environment: label.into(),
            final_train_loss: out.curve.final_train(),
            final_heldout_loss: out.curve.final_heldout(),
            curve: out.curve,
        });
        models.push(out.model);
    }
    let pairs = [(1, 0), (2, 0), (1, 2)];
    let gaps = pairs
        .iter()
        .map(|&(a, b)| {
            let (ra, rb) = (&runs[a], &runs[b]);
            let train_gap = relative_gap(ra.final_train_loss, rb.final_train_loss);
            LossGap {
                environment: ra.environment.clone(),
                reference: rb.environment.clone(),
                relative_gap: match (ra.final_heldout_loss, rb.final_heldout_loss) {
                    (Some(x), Some(y)) => relative_gap(x, y),
                    _ => train_gap,
                },
                train_relative_gap: train_gap,
            }
        })
        .collect();
    Ok(Comparison {
        report: ComparisonReport { runs, gaps },
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_corpus, Darkness};

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 3e-3,
            model: ModelConfig {
                encoder_channels: vec![4, 6, 8],
                embed_dim: 8,
                state_dim: 12,
                attn_dim: 8,
                ..ModelConfig::default()
            },
            heldout_fraction: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut w = vec![1.0, 1.0];
        let mut adam = Adam::new(1e-2, &[2]);
        for _ in 0..2000 {
            let g = vec![w.iter().map(|x| 2.0 * x).collect::<Vec<_>>()];
            adam.update(&mut [&mut w[..]], &g);
        }
        let norm = (w[0] * w[0] + w[1] * w[1]).sqrt();
        assert!(norm < 1e-3, "‖w‖ = {norm}");
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0, 4.0], vec![12.0]];
        let before = clip_global_norm(&mut g, 5.0);
        assert_eq!(before, 13.0);
        assert!(global_norm(&g) <= 5.0 + 1e-9);
        let mut small = vec![vec![0.3, 0.4]];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small, vec![vec![0.3, 0.4]]);
    }

    #[test]
    fn template_guides_reorder_the_caption() {
        let g = guided_targets("a red circle left of a blue square");
        assert_eq!(
            g,
            vec![
                GuidedTarget {
                    guide: "circle".into(),
                    target: "circle left of a blue square".into()
                },
                GuidedTarget {
                    guide: "square".into(),
                    target: "square right of a red circle".into()
                },
            ]
        );
        assert!(parse_template_caption("A red circle left of a blue square.").is_some());
        assert!(parse_template_caption("a red circle near a blue square").is_none());
        let g = guided_targets("a green triangle above a yellow circle");
        assert_eq!(g[1].target, "circle below a green triangle");
    }

    #[test]
    fn free_text_guides_are_suffixes() {
        let g = guided_targets("A dog on the beach.");
        let pairs: Vec<_> = g.iter().map(|t| (t.guide.as_str(), t.target.as_str())).collect();
        assert_eq!(pairs, vec![("dog", "dog on the beach"), ("beach", "beach")]);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(200, 0.1, 5);
        assert_eq!((a.len(), b.len()), (180, 20));
        assert_eq!((a.clone(), b.clone()), split_indices(200, 0.1, 5));
        let mut all: Vec<_> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(split_indices(2, 0.1, 0).1.len(), 1);
        assert!(split_indices(8, 0.0, 0).1.is_empty());
    }

    #[test]
    fn two_epochs_reduce_loss() {
        let corpus = make_corpus(8, Darkness::Bright, 0).unwrap();
        let out = train(&small_config(), &corpus).unwrap();
        assert_eq!(out.curve.train.len(), 2);
        assert!(out.curve.train[1] < out.curve.train[0], "{:?}", out.curve.train);
    }

    #[test]
    fn training_is_reproducible() {
        let corpus = make_corpus(6, Darkness::Dark(0.2), 3).unwrap();
        let cfg = TrainConfig {
            heldout_fraction: 0.2,
            ..small_config()
        };
        let a = train(&cfg, &corpus).unwrap();
        let b = train(&cfg, &corpus).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.heldout.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let corpus = make_corpus(8, Darkness::Bright, 0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            guided_step_fraction: 0.0,
            ..small_config()
        };
        let out = train(&cfg, &corpus).unwrap();
        let fresh = CaptionModel::init(cfg.model.clone(), out.model.vocab.clone(), cfg.seed).unwrap();
        assert_eq!(out.model.params, fresh.params);
        assert!((out.curve.train[0] - out.curve.train[1]).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(train(&small_config(), &[]), Err(Error::Data(_))));
        let corpus = make_corpus(4, Darkness::Bright, 0).unwrap();
        let cfg = TrainConfig {
            guided_step_fraction: 1.5,
            ..small_config()
        };
        assert!(matches!(train(&cfg, &corpus), Err(Error::Parameter(_))));
        let short = make_corpus(3, Darkness::Bright, 0).unwrap();
        let corpora = EnvironmentCorpora {
            bright: &corpus,
            dark: &short,
            mixed: &corpus,
        };
        assert!(matches!(compare_environments(&small_config(), &corpora), Err(Error::Parameter(_))));
    }

    #[test]
    fn identical_environments_have_zero_gaps() {
        let corpus = make_corpus(6, Darkness::Bright, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            heldout_fraction: 0.2,
            ..small_config()
        };
        let cmp = compare_environments(
            &cfg,
            &EnvironmentCorpora {
                bright: &corpus,
                dark: &corpus,
                mixed: &corpus,
            },
        )
        .unwrap();
        assert_eq!(cmp.report.runs.len(), 3);
        assert_eq!(cmp.report.gaps.len(), 3);
        assert!(cmp.report.gaps.iter().all(|g| g.relative_gap == 0.0 && g.train_relative_gap == 0.0));
    }

    #[test]
    fn csv_has_one_row_per_epoch() {
        let c = LossCurve {
            train: vec![2.0, 1.0],
            heldout: Some(vec![2.5, 1.5]),
        };
        let csv = c.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,train_loss,heldout_loss");
        assert!(lines[2].starts_with("2,1."));
    }
}

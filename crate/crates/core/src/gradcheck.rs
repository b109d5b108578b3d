//! Central finite-difference checks of every differentiable operation and
//! of the end-to-end captioning loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{self, AttentionDims, AttentionMode, AttentionParams};
use crate::dataset::{degrade_brightness, generate_scene, SceneSpec};
use crate::decoder::{self, DecoderDims, DecoderParams};
use crate::encoder::{encode_on, EncoderParams};
use crate::error::Result;
use crate::model::{sequence_loss, CaptionModel, ModelConfig, ModelParams};
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::guided_targets;
use crate::vocab::Vocabulary;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients near zero are
/// compared on an absolute scale of `TOLERANCE * FLOOR`.
pub const FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub entries_checked: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.max_relative_error).fold(0.0, f64::max)
    }
}

/// Which entries of each input to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many entries per input, chosen at random.
    Sample(usize),
}

/// Compare the tape gradient of `f(inputs)` with central differences.
/// `f` must build a scalar from the given input handles.
pub fn check_function<F>(name: &str, inputs: &[Tensor], coverage: Coverage, seed: u64, f: F) -> Result<CaseResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let entries: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample(k) if k >= n => (0..n).collect(),
            Coverage::Sample(k) => (0..k).map(|_| rng.gen_range(0..n)).collect(),
        };
        for j in entries {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[i][j], numeric));
            checked += 1;
        }
    }
    Ok(CaseResult {
        name: name.to_string(),
        entries_checked: checked,
        max_relative_error: worst,
        passed: worst <= TOLERANCE,
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

/// Evenly spaced distinct values in [−2, 2], shuffled, so
/// max-pooling has a unique winner well beyond the finite-difference step.
fn distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * (i as f64 + 0.5) / n as f64).collect();
    for i in (1..n).rev() {
        levels.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), levels).expect("shape matches")
}

/// Inputs for ReLU kept away from the kink.
fn off_kink_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..2.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Reduce any tensor to a scalar through a fixed random projection so that
/// every output entry carries a distinct weight.
fn project(tape: &mut Tape, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let m = rng.gen_range(1..5);
    let k = rng.gen_range(1..5);
    let n = rng.gen_range(1..5);
    let ps = rng.gen();
    let mut cases: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),*], $body:expr) => {
            cases.push(($name, vec![$($input),*], Box::new($body)));
        };
    }
    case!("matmul", [rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, ps)
    });
    case!("add", [rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.add(v[0], v[1])?;
        project(t, y, ps)
    });
    case!("sub", [rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, ps)
    });
    case!("mul", [rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, ps)
    });
    case!("add_bias", [rand_tensor(rng, &[m, n]), rand_tensor(rng, &[n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.add_bias(v[0], v[1])?;
        project(t, y, ps)
    });
    let factor = rng.gen_range(-2.0..2.0);
    case!("scale", [rand_tensor(rng, &[m, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.scale(v[0], factor);
        project(t, y, ps)
    });
    case!("one_minus", [rand_tensor(rng, &[m, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.one_minus(v[0]);
        project(t, y, ps)
    });
    case!("tanh", [rand_tensor(rng, &[m, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.tanh(v[0]);
        project(t, y, ps)
    });
    case!("sigmoid", [rand_tensor(rng, &[m, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.sigmoid(v[0]);
        project(t, y, ps)
    });
    case!("relu", [off_kink_tensor(rng, &[m, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.relu(v[0]);
        project(t, y, ps)
    });
    case!("concat", [rand_tensor(rng, &[m, k]), rand_tensor(rng, &[m, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.concat(&[v[0], v[1]])?;
        project(t, y, ps)
    });
    case!("concat_rows", [rand_tensor(rng, &[m, n]), rand_tensor(rng, &[k, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        project(t, y, ps)
    });
    let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..m)).collect();
    case!("gather_rows", [rand_tensor(rng, &[m, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.gather_rows(v[0], &ids)?;
        project(t, y, ps)
    });
    case!("reshape", [rand_tensor(rng, &[m, k, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.reshape(v[0], &[m * k, n])?;
        project(t, y, ps)
    });
    case!("transpose", [rand_tensor(rng, &[m, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.transpose(v[0])?;
        project(t, y, ps)
    });
    case!("sum", [rand_tensor(rng, &[m, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.sum(v[0]);
        let y = t.tanh(y);
        Ok(t.sum(y))
    });
    case!("mean", [rand_tensor(rng, &[m, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.mean(v[0]);
        let y = t.tanh(y);
        Ok(t.sum(y))
    });
    case!("mean_rows", [rand_tensor(rng, &[m, n])], move |t: &mut Tape, v: &[Var]| {
        let y = t.mean_rows(v[0])?;
        project(t, y, ps)
    });
    case!("softmax", [rand_tensor(rng, &[m, n + 1])], move |t: &mut Tape, v: &[Var]| {
        let y = t.softmax(v[0])?;
        project(t, y, ps)
    });
    let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3));
    let size = rng.gen_range(4..7);
    let kk = rng.gen_range(1..4);
    let stride = rng.gen_range(1..3);
    let pad = rng.gen_range(0..2);
    case!(
        "conv2d",
        [
            rand_tensor(rng, &[cin, size, size]),
            rand_tensor(rng, &[cout, cin, kk, kk]),
            rand_tensor(rng, &[cout])
        ],
        move |t: &mut Tape, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, ps)
        }
    );
    let c = rng.gen_range(1..3);
    case!("max_pool2d", [distinct_tensor(rng, &[c, 4, 6])], move |t: &mut Tape, v: &[Var]| {
        let y = t.max_pool2d(v[0], 2)?;
        project(t, y, ps)
    });
    let rows = m + 1;
    let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..n + 1)).collect();
    let mut mask: Vec<bool> = (0..rows).map(|_| rng.gen_bool(0.7)).collect();
    mask[0] = true;
    case!("cross_entropy_masked", [rand_tensor(rng, &[rows, n + 1])], move |t: &mut Tape, v: &[Var]| {
        t.cross_entropy_masked(v[0], &targets, &mask)
    });
    cases
}

/// `rounds` randomized cases of every differentiable tape operation.
pub fn check_ops(seed: u64, rounds: usize) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for r in 0..rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(r as u64));
        for (name, inputs, f) in op_cases(&mut rng) {
            out.push(check_function(&format!("{name}#{r}"), &inputs, Coverage::All, r as u64, f)?);
        }
    }
    Ok(out)
}

fn is_bias(name: &str) -> bool {
    name.ends_with("bias") || name.contains(".b_")
}

/// Freshly initialized biases are exactly zero, which puts ReLU units fed by
/// all-zero patches exactly on their kink. Checks run at a nearby point.
pub fn offset_biases(params: &mut ModelParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.for_each_mut(|name, t| {
        if is_bias(name) {
            t.data_mut().iter_mut().for_each(|b| *b += rng.gen_range(-0.1..0.1));
        }
    });
}

fn unflatten<T: Clone>(template: &ModelParams<T>, vars: &[Var]) -> ModelParams<Var> {
    let mut k = 0;
    template.map(|_, _| {
        k += 1;
        vars[k - 1]
    })
}

fn flatten(params: &ModelParams) -> Vec<Tensor> {
    let mut out = Vec::new();
    params.for_each(|_, t| out.push(t.clone()));
    out
}

/// Mean sequence loss over a two-sample batch (one unguided, one guided),
/// checked against every parameter of the model.
pub fn check_model(name: &str, model: &CaptionModel, seed: u64, coverage: Coverage) -> Result<CaseResult> {
    let specs = [SceneSpec::from_seed(seed), SceneSpec::from_seed(seed + 1)];
    let mut samples = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let scene = degrade_brightness(&generate_scene(spec)?, 0.5)?;
        let caption = &scene.captions[0];
        let (targets, guide) = if i == 1 {
            let g = guided_targets(caption).remove(1);
            (model.vocab.encode(&g.target, 12)?, model.vocab.id(&g.guide))
        } else {
            (model.vocab.encode(caption, 12)?, None)
        };
        samples.push((scene.pixels, targets, guide));
    }
    let mut params = model.params.clone();
    offset_biases(&mut params, seed);
    let template = params.clone();
    check_function(name, &flatten(&params), coverage, seed, move |tape, vars| {
        let p = unflatten(&template, vars);
        let mut losses = Vec::new();
        for (img, targets, guide) in &samples {
            let x = tape.constant(img.clone());
            losses.push(sequence_loss(tape, &p, x, targets, *guide)?);
        }
        let total = tape.add(losses[0], losses[1])?;
        Ok(tape.scale(total, 0.5))
    })
}

fn corpus_vocab() -> Vocabulary {
    let caps: Vec<String> = (0..20).map(|s| SceneSpec::from_seed(s).caption()).collect();
    Vocabulary::build(&caps, 1).expect("non-empty corpus")
}

pub fn tiny_config(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        attention_mode: mode,
        encoder_channels: vec![2, 3, 4],
        embed_dim: 3,
        state_dim: 5,
        attn_dim: 4,
        max_len: 20,
    }
}

/// Module-level checks: encoder features, attention context and one decoder step.
fn check_modules(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut enc = EncoderParams::init(&[2, 3, 4], &mut rng);
    for s in &mut enc.stages {
        s.bias.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    }
    let img = generate_scene(&SceneSpec::from_seed(seed))?.pixels;
    let enc_inputs: Vec<Tensor> = enc.stages.iter().flat_map(|s| [s.kernel.clone(), s.bias.clone()]).collect();
    let image = img.clone();
    out.push(check_function("encoder.sum_features", &enc_inputs, Coverage::All, seed, move |t, v| {
        let params = EncoderParams {
            stages: v
                .chunks(2)
                .map(|c| crate::encoder::ConvStage {
                    kernel: c[0],
                    bias: c[1],
                })
                .collect(),
        };
        let x = t.constant(image.clone());
        let h = encode_on(t, &params, x)?;
        Ok(t.sum(h))
    })?);

    for mode in [AttentionMode::Bahdanau, AttentionMode::Dot] {
        let dims = AttentionDims {
            feature: 4,
            state: 5,
            embed: 3,
            attn: 6,
        };
        let params = AttentionParams::init(mode, dims, &mut rng);
        let mut inputs: Vec<Tensor> = Vec::new();
        params.map(|_, t| inputs.push(t.clone()));
        let n_params = inputs.len();
        inputs.push(rand_tensor(&mut rng, &[7, 4]));
        inputs.push(rand_tensor(&mut rng, &[1, 5]));
        inputs.push(rand_tensor(&mut rng, &[1, 3]));
        let template = params.clone();
        out.push(check_function(
            &format!("attention.{mode:?}.sum_context").to_lowercase(),
            &inputs,
            Coverage::All,
            seed,
            move |t, v| {
                let mut k = 0;
                let p = template.map(|_, _| {
                    k += 1;
                    v[k - 1]
                });
                let step = attention::attend(t, &p, v[n_params], v[n_params + 1], Some(v[n_params + 2]))?;
                Ok(t.sum(step.context))
            },
        )?);
    }

    let dims = DecoderDims {
        vocab: 7,
        embed: 3,
        feature: 4,
        state: 5,
    };
    let params = DecoderParams::init(dims, &mut rng);
    let mut inputs: Vec<Tensor> = Vec::new();
    params.map(|_, t| inputs.push(t.clone()));
    let n_params = inputs.len();
    inputs.push(Tensor::from_fn(&[1, 5], |_| rng.gen_range(-0.9..0.9)));
    inputs.push(rand_tensor(&mut rng, &[1, 4]));
    let template = params.clone();
    let (prev, target) = (rng.gen_range(0..7), rng.gen_range(0..7));
    out.push(check_function("decoder.step_cross_entropy", &inputs, Coverage::All, seed, move |t, v| {
        let mut k = 0;
        let p = template.map(|_, _| {
            k += 1;
            v[k - 1]
        });
        let s = decoder::step(t, &p, prev, v[n_params], v[n_params + 1])?;
        t.cross_entropy_masked(s.logits, &[target], &[true])
    })?);
    Ok(out)
}

/// The full suite: five randomized rounds of every op, module checks, an
/// exhaustive check of a tiny model in both attention modes and a sampled
/// check of the default-size model.
pub fn run(seed: u64) -> Result<GradcheckReport> {
    let mut cases = check_ops(seed, 5)?;
    cases.extend(check_modules(seed)?);
    let vocab = corpus_vocab();
    for mode in [AttentionMode::Bahdanau, AttentionMode::Dot] {
        let tiny = CaptionModel::init(tiny_config(mode), vocab.clone(), seed)?;
        cases.push(check_model(&format!("model.tiny.{mode:?}").to_lowercase(), &tiny, seed, Coverage::All)?);
    }
    let full = CaptionModel::init(ModelConfig::default(), vocab, seed)?;
    cases.push(check_model("model.default.bahdanau", &full, seed, Coverage::Sample(6))?);
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        cases,
    })
}

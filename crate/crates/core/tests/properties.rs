use nightcap_core::attention::AttentionMode;
use nightcap_core::checkpoint::{from_bytes, to_bytes};
use nightcap_core::dataset::{degrade_brightness, generate_scene, SceneSpec, TEMPLATE_WORDS};
use nightcap_core::gradcheck::{check_function, tiny_config, Coverage, TOLERANCE};
use nightcap_core::inference::{caption_auto, caption_interactive, first_step_attention};
use nightcap_core::model::CaptionModel;
use nightcap_core::tensor::{Tape, Tensor, Var};
use nightcap_core::trainer::parse_template_caption;
use nightcap_core::vocab::Vocabulary;
use proptest::prelude::*;

fn tiny_model(mode: AttentionMode, seed: u64) -> CaptionModel {
    let vocab = Vocabulary::build(&[TEMPLATE_WORDS.join(" ")], 1).unwrap();
    CaptionModel::init(tiny_config(mode), vocab, seed).unwrap()
}

/// Weighted sum with fixed non-uniform weights, so every output entry matters.
fn project(t: &mut Tape, x: Var) -> nightcap_core::Result<Var> {
    let shape = t.shape(x).to_vec();
    let w = t.constant(Tensor::from_fn(&shape, |i| 0.3 + ((i * 7919) % 13) as f64 / 10.0));
    let m = t.mul(x, w)?;
    Ok(t.sum(m))
}

fn mode() -> impl Strategy<Value = AttentionMode> {
    prop_oneof![Just(AttentionMode::Bahdanau), Just(AttentionMode::Dot)]
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(3, 7), shift in -50.0..50.0f64) {
        let mut tape = Tape::new();
        let shifted = Tensor::new(vec![3, 7], x.data().iter().map(|v| v * 20.0 + shift).collect()).unwrap();
        let v = tape.constant(shifted);
        let s = tape.softmax(v).unwrap();
        let out = tape.value(s);
        for r in 0..3 {
            let row = out.row_slice(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_tanh_gradient_matches_differences(a in matrix(3, 4), b in matrix(4, 2), seed in any::<u64>()) {
        let case = check_function("tanh(a·b)", &[a, b], Coverage::All, seed, |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let y = t.tanh(m);
            project(t, y)
        })
        .unwrap();
        prop_assert!(case.max_relative_error < TOLERANCE, "{case:?}");
    }

    #[test]
    fn softmax_gradient_matches_differences(x in matrix(2, 5), seed in any::<u64>()) {
        let case = check_function("softmax", &[x], Coverage::All, seed, |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y)
        })
        .unwrap();
        prop_assert!(case.max_relative_error < TOLERANCE, "{case:?}");
    }

    #[test]
    fn brightness_degradation_composes(seed in 0u64..500, f in 0.1..1.0f64, g in 0.1..1.0f64) {
        let img = generate_scene(&SceneSpec::from_seed(seed)).unwrap();
        let twice = degrade_brightness(&degrade_brightness(&img, f).unwrap(), g).unwrap();
        let once = degrade_brightness(&img, f * g).unwrap();
        prop_assert!(twice.pixels.max_abs_diff(&once.pixels) < 1e-12);
        prop_assert_eq!(twice.captions, img.captions);
    }

    #[test]
    fn scenes_are_well_formed(seed in any::<u64>()) {
        let spec = SceneSpec::from_seed(seed);
        let img = generate_scene(&spec).unwrap();
        prop_assert_eq!(&img, &generate_scene(&spec).unwrap());
        prop_assert_eq!(img.captions.len(), 1);
        let parsed = parse_template_caption(&img.captions[0]).unwrap();
        prop_assert_eq!(parsed[0], (spec.objects[0].color, spec.objects[0].shape));
        prop_assert_eq!(parsed[1], (spec.objects[1].color, spec.objects[1].shape));
        prop_assert!(img.captions[0].split(' ').all(|w| TEMPLATE_WORDS.contains(&w)));
        prop_assert_eq!(spec.swapped().relation(), spec.relation().inverse());
        let meta = img.meta.unwrap();
        for o in &meta.objects {
            prop_assert!(o.region.bottom <= 64 && o.region.right <= 64);
            prop_assert!(!o.region.grid_cells().is_empty());
        }
    }

    #[test]
    fn decoding_is_on_the_simplex_and_bounded(mode in mode(), model_seed in 0u64..1000, scene in 0u64..1000) {
        let model = tiny_model(mode, model_seed);
        let img = generate_scene(&SceneSpec::from_seed(scene)).unwrap();
        let r = caption_auto(&model, &img.pixels).unwrap();
        prop_assert!(r.trace.tokens.len() <= model.config.max_len);
        prop_assert_eq!(r.trace.tokens.len(), r.trace.grids.len());
        for g in &r.trace.grids {
            prop_assert!((g.iter().flatten().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(g.iter().flatten().all(|&w| w >= 0.0));
        }
        let w = first_step_attention(&model, &img.pixels, Some("circle")).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn guided_decode_starts_with_guide(mode in mode(), model_seed in 0u64..1000, word in 0usize..TEMPLATE_WORDS.len()) {
        let model = tiny_model(mode, model_seed);
        let img = generate_scene(&SceneSpec::from_seed(model_seed)).unwrap();
        let guide = TEMPLATE_WORDS[word];
        let r = caption_interactive(&model, &img.pixels, guide).unwrap();
        prop_assert_eq!(r.trace.tokens[0].as_str(), guide);
        prop_assert!(!r.degraded_guide);
        prop_assert_eq!(&r, &caption_interactive(&model, &img.pixels, guide).unwrap());
    }

    #[test]
    fn checkpoint_resave_is_byte_identical(mode in mode(), seed in any::<u64>()) {
        let model = tiny_model(mode, seed);
        let bytes = to_bytes(&model);
        let loaded = from_bytes(&bytes).unwrap();
        prop_assert_eq!(to_bytes(&loaded), bytes);
        let mut worst = 0.0f64;
        model.params.for_each(|name, t| {
            let mut other = None;
            loaded.params.for_each(|n, u| if n == name { other = Some(t.max_abs_diff(u)) });
            worst = worst.max(other.unwrap());
        });
        prop_assert!(worst <= 2f64.powi(-20));
    }
}

use fuyu_core::model::{
    decode_greedy, logits, sequence_loss, trace_qk, AttentionKernel, Bound, ModelConfig,
    ModelParams, SequenceInput,
};
use fuyu_core::tensor::{grad_check, ops, ElementSelection, GradCheckConfig, Graph, Tensor};
use fuyu_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        n_heads: 2,
        n_layers: 2,
        vocab: 16,
        patch_dim: 12,
        max_seq: 64,
        init_std: 0.3,
        ..ModelConfig::toy()
    }
}

fn random_input(cfg: &ModelConfig, pattern: &str, seed: u64) -> SequenceInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SequenceInput::new();
    for c in pattern.chars() {
        match c {
            'p' => s.push_patch(
                (0..cfg.patch_dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            ),
            _ => s.push_token(rng.random_range(0..cfg.vocab as u32)),
        }
    }
    s
}

fn params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    // non-trivial gains and biases so their gradients are exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for (name, t) in p.iter_mut() {
        if name.ends_with(".gain") || name.ends_with(".bias") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
    p
}

fn graph_logits(p: &ModelParams, input: &SequenceInput, key_valid: Option<&[bool]>) -> Tensor {
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, p, false);
    let out = b.forward(&mut g, p.config(), input, key_valid).unwrap();
    g.value(out).clone()
}

#[test]
fn graph_and_eager_forward_agree() {
    let cfg = tiny();
    let p = params(&cfg, 1);
    let input = random_input(&cfg, "ppptppptttpt", 2);
    let a = graph_logits(&p, &input, None);
    for kernel in [AttentionKernel::Naive, AttentionKernel::blocked(5)] {
        let b = logits(&p, &input, kernel, None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12, "{kernel:?}");
    }
    let valid = [
        true, true, true, true, true, true, true, true, true, false, false, false,
    ];
    let a = graph_logits(&p, &input, Some(&valid));
    let b = logits(&p, &input, AttentionKernel::blocked(4), Some(&valid)).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}

#[test]
fn text_only_and_patch_only_sequences_run() {
    let cfg = tiny();
    let p = params(&cfg, 3);
    for pattern in ["tttt", "pppp", "t"] {
        let input = random_input(&cfg, pattern, 4);
        let l = logits(&p, &input, AttentionKernel::Naive, None).unwrap();
        assert_eq!(l.shape(), &[pattern.len(), cfg.vocab]);
        assert!(l.max_abs_diff(&graph_logits(&p, &input, None)).unwrap() < 1e-12);
    }
}

#[test]
fn input_validation() {
    let cfg = tiny();
    let p = params(&cfg, 5);
    let long = random_input(&cfg, &"t".repeat(cfg.max_seq + 1), 6);
    assert!(matches!(
        logits(&p, &long, AttentionKernel::Naive, None),
        Err(Error::Capacity {
            len: 65,
            max_seq: 64
        })
    ));
    let mut bad = SequenceInput::new();
    bad.push_patch(vec![0.0; cfg.patch_dim + 1]);
    assert!(matches!(
        logits(&p, &bad, AttentionKernel::Naive, None),
        Err(Error::Shape { .. })
    ));
    let mut oov = SequenceInput::new();
    oov.push_token(cfg.vocab as u32);
    assert!(logits(&p, &oov, AttentionKernel::Naive, None).is_err());
    assert!(logits(&p, &SequenceInput::new(), AttentionKernel::Naive, None).is_err());
}

#[test]
fn checkpoint_roundtrip_preserves_logits_bitwise() {
    let cfg = tiny();
    let p = params(&cfg, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    p.save(&path).unwrap();
    let q = ModelParams::load(&path).unwrap();
    assert_eq!(p.digest(), q.digest());
    let input = random_input(&cfg, "pptpt", 8);
    let a = logits(&p, &input, AttentionKernel::Naive, None).unwrap();
    let b = logits(&q, &input, AttentionKernel::Naive, None).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn greedy_decode_stops_at_eos_and_respects_budget() {
    let cfg = tiny();
    let p = params(&cfg, 9);
    let prompt = random_input(&cfg, "ppt", 10);
    let free = decode_greedy(&p, &prompt, 6, u32::MAX, AttentionKernel::Naive).unwrap();
    assert_eq!(free.len(), 6);
    // pretend the third emitted token is the terminator
    let stop = free[2];
    let first = free.iter().position(|&t| t == stop).unwrap();
    let cut = decode_greedy(&p, &prompt, 6, stop, AttentionKernel::Naive).unwrap();
    assert_eq!(cut, free[..=first].to_vec());
    assert!(decode_greedy(&p, &prompt, 0, 0, AttentionKernel::Naive).is_err());
    let blocked = decode_greedy(&p, &prompt, 6, u32::MAX, AttentionKernel::blocked(2)).unwrap();
    assert_eq!(blocked, free);
}

/// Every element of every parameter tensor of a two-layer model.
#[test]
fn exhaustive_gradient_check_on_two_layer_model() {
    let cfg = tiny();
    let p = params(&cfg, 11);
    let input = random_input(&cfg, "ppptpptttt", 12);
    let labels: Vec<u32> = (0..10).map(|i| (i * 5 % 16) as u32).collect();
    let mask = [
        false, false, false, false, false, false, true, true, true, true,
    ];
    let names: Vec<String> = p.tensors().keys().cloned().collect();
    let values: Vec<Tensor> = p.tensors().values().cloned().collect();
    let report = grad_check(
        |g, vars| {
            let b = Bound::from_vars(&names, vars);
            sequence_loss(g, &b, &cfg, &input, &labels, &mask, None)
        },
        &values,
        &ElementSelection::All,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(report.checked, cfg.parameter_count());
    assert!(report.passed, "{report:?}");
}

#[test]
fn padding_keys_do_not_change_valid_positions() {
    let cfg = tiny();
    let p = params(&cfg, 13);
    let short = random_input(&cfg, "pptt", 14);
    let mut padded = short.clone();
    padded.extend_tokens(&[3, 3, 3]);
    let valid = [true, true, true, true, false, false, false];
    let a = logits(&p, &short, AttentionKernel::Naive, None).unwrap();
    let b = logits(&p, &padded, AttentionKernel::Naive, Some(&valid)).unwrap();
    for r in 0..4 {
        for (x, y) in a.row(r).iter().zip(b.row(r)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Logits at positions `< t` never depend on the input at `t`.
    #[test]
    fn causal(seed in 0u64..10_000, t in 1usize..9) {
        let cfg = tiny();
        let p = params(&cfg, seed);
        let input = random_input(&cfg, "ptptpttptt", seed + 1);
        let mut changed = input.clone().elements().to_vec();
        changed[t] = match &changed[t] {
            fuyu_core::model::Element::Token(id) => fuyu_core::model::Element::Token((id + 1) % 16),
            fuyu_core::model::Element::Patch(_) => {
                fuyu_core::model::Element::Patch(std::sync::Arc::new(vec![0.5; cfg.patch_dim]))
            }
        };
        let changed = SequenceInput::from_elements(changed);
        let a = logits(&p, &input, AttentionKernel::Naive, None).unwrap();
        let b = logits(&p, &changed, AttentionKernel::blocked(3), None).unwrap();
        for r in 0..t {
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
        let moved = a.row(t).iter().zip(b.row(t)).any(|(x, y)| (x - y).abs() > 1e-9);
        prop_assert!(moved);
    }

    /// `<rope(q, m), rope(k, n)>` depends only on `m - n` for the queries and
    /// keys actually produced at every layer.
    #[test]
    fn rope_relative_position_identity(seed in 0u64..10_000, shift in 1usize..2000) {
        let cfg = tiny();
        let p = params(&cfg, seed);
        let input = random_input(&cfg, "pptptt", seed + 2);
        let n = input.len();
        for layer in trace_qk(&p, &input).unwrap() {
            for head in layer {
                let base: Vec<usize> = (0..n).collect();
                let moved: Vec<usize> = (shift..shift + n).collect();
                let q0 = ops::rope(&head.q, &base, cfg.rope_base, false).unwrap();
                let k0 = ops::rope(&head.k, &base, cfg.rope_base, false).unwrap();
                let q1 = ops::rope(&head.q, &moved, cfg.rope_base, false).unwrap();
                let k1 = ops::rope(&head.k, &moved, cfg.rope_base, false).unwrap();
                let s0 = ops::matmul(&q0, &ops::transpose(&k0).unwrap()).unwrap();
                let s1 = ops::matmul(&q1, &ops::transpose(&k1).unwrap()).unwrap();
                prop_assert!(s0.max_abs_diff(&s1).unwrap() < 1e-9);
            }
        }
    }
}

fn toy_six_element_case() -> (ModelParams, SequenceInput, Vec<u32>, Vec<bool>) {
    let cfg = ModelConfig::toy();
    let p = params(&cfg, 21);
    let input = random_input(&cfg, "pptptt", 22);
    let labels = vec![0, 0, 508, 0, 72, 105];
    let mask = vec![false, false, false, false, true, true];
    (p, input, labels, mask)
}

#[test]
fn toy_model_gradients_sampled_and_directional() {
    let (p, input, labels, mask) = toy_six_element_case();
    let plan = fuyu_core::model::ModelGradPlan {
        per_tensor: 16,
        directions: 4,
        config: GradCheckConfig {
            tolerance: 1e-5,
            ..GradCheckConfig::default()
        },
    };
    let report = fuyu_core::model::check_model_gradients(
        &p,
        &input,
        &labels,
        &mask,
        &plan,
        &mut ChaCha8Rng::seed_from_u64(23),
    )
    .unwrap();
    for (name, r) in &report.per_tensor {
        assert!(r.passed, "{name}: {r:?}");
    }
    for d in &report.directional {
        assert!(d.passed, "{d:?}");
    }
    eprintln!(
        "max rel {:.3e} over {} elements",
        report.max_rel_error, report.elements_checked
    );
}

/// Every element of the full toy model. Takes hours on one core.
#[test]
#[ignore]
fn toy_model_gradients_every_element() {
    let (p, input, labels, mask) = toy_six_element_case();
    let cfg = GradCheckConfig {
        tolerance: 1e-5,
        ..GradCheckConfig::default()
    };
    let report =
        fuyu_core::model::sweep_model_gradients(&p, &input, &labels, &mask, &cfg, 4096, None)
            .unwrap();
    assert!(report.complete);
    assert!(
        report.passed,
        "max rel {:.3e} at {:?}",
        report.max_rel_error, report.worst
    );
}

#[test]
fn sweep_visits_every_element_of_a_small_model() {
    let cfg = ModelConfig {
        hidden: 8,
        n_heads: 2,
        n_layers: 1,
        vocab: 16,
        patch_dim: 12,
        max_seq: 32,
        ..ModelConfig::toy()
    };
    let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut input = SequenceInput::new();
    input.push_patch(vec![0.3; 12]);
    input.extend_tokens(&[1, 2, 3]);
    let (labels, mask) = (vec![0, 2, 3, 4], vec![false, true, true, true]);
    let gc = GradCheckConfig {
        tolerance: 1e-5,
        ..GradCheckConfig::default()
    };
    let r =
        fuyu_core::model::sweep_model_gradients(&p, &input, &labels, &mask, &gc, 7, None).unwrap();
    assert!(r.complete && r.passed, "{r:?}");
    assert_eq!(r.elements_checked, cfg.parameter_count());
    // an expired deadline checks nothing and says so
    let past = Some(std::time::Instant::now());
    let r =
        fuyu_core::model::sweep_model_gradients(&p, &input, &labels, &mask, &gc, 7, past).unwrap();
    assert_eq!((r.elements_checked, r.complete), (0, false));
}

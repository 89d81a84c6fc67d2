use super::*;
use crate::attention::{ban_apply, bilinear_attention_map};
use crate::tensor::{grad_check, max_abs_diff, GradCheckOptions};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config(kind: AttentionKind, integration: Integration, glimpses: usize) -> BanStackConfig {
    BanStackConfig {
        vocab: 10,
        embed: 6,
        question_hidden: 8,
        visual_dim: 10,
        joint: 8,
        att_rank: 12,
        uni_hidden: 9,
        classifier_hidden: 16,
        answers: 5,
        glimpses,
        kind,
        integration,
        ..BanStackConfig::toy(kind, integration, glimpses)
    }
}

fn tiny_sample(config: &BanStackConfig, seed: u64) -> (Vec<usize>, Tensor, ChannelMask, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..4).map(|_| rng.gen_range(0..config.vocab)).collect();
    let phi = 5;
    let visual = Tensor::uniform(&[config.visual_dim, phi], -1.0, 1.0, &mut rng);
    let mask = ChannelMask::prefix(4, phi).unwrap();
    let boxes = Tensor::uniform(&[4, phi], 0.0, 1.0, &mut rng);
    (tokens, visual, mask, boxes)
}

fn eval_forward(
    params: &ModelParams,
    config: &BanStackConfig,
    tokens: &[usize],
    visual: &Tensor,
    mask: &ChannelMask,
    boxes: Option<&Tensor>,
) -> ForwardOutput {
    let mut tape = Tape::inference();
    let sample = SampleInput {
        tokens,
        visual,
        mask,
        boxes,
    };
    forward(&mut tape, params, config, &sample, None, &mut Mode::Eval, None).unwrap()
}

#[test]
fn residual_step_with_zero_values_is_identity_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (k, rho, m, phi) = (8, 3, 10, 5);
    let f_i = Tensor::uniform(&[k, rho], -1.0, 1.0, &mut rng);
    let y = Tensor::uniform(&[m, phi], -1.0, 1.0, &mut rng);
    let logits = Tensor::uniform(&[rho, phi], -1.0, 1.0, &mut rng);
    let mut tape = Tape::inference();
    let map =
        bilinear_attention_map(&mut tape, &logits, &ChannelMask::full(phi), MapScope::Joint)
            .unwrap();
    let zero_u = Tensor::zeros(&[k, k]);
    let zero_v = Tensor::zeros(&[k, m]);
    let out = residual_step(&mut tape, &f_i, &y, &map, &zero_u, &zero_v, Form::Relu, None)
        .unwrap();
    assert_eq!(out.shape(), f_i.shape());
    assert_eq!(out.data(), f_i.data());
}

#[test]
fn residual_step_matches_hand_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (k, rho, m, phi) = (6, 4, 9, 5);
    let f_i = Tensor::uniform(&[k, rho], -1.0, 1.0, &mut rng);
    let y = Tensor::uniform(&[m, phi], -1.0, 1.0, &mut rng);
    let val_u = Tensor::uniform(&[k, k], -1.0, 1.0, &mut rng);
    let val_v = Tensor::uniform(&[k, m], -1.0, 1.0, &mut rng);
    let logits = Tensor::uniform(&[rho, phi], -1.0, 1.0, &mut rng);
    let mut tape = Tape::inference();
    let map =
        bilinear_attention_map(&mut tape, &logits, &ChannelMask::full(phi), MapScope::Joint)
            .unwrap();
    let stepped =
        residual_step(&mut tape, &f_i, &y, &map, &val_u, &val_v, Form::Relu, None).unwrap();
    let ban = ban_apply(&mut tape, &f_i, &y, &map, &val_u, &val_v, Form::Relu).unwrap();
    let bb = tape.outer_broadcast(&ban, rho).unwrap();
    let expect = tape.add(&bb, &f_i).unwrap();
    assert_eq!(stepped.data(), expect.data());
}

#[test]
fn counter_zero_stub_reproduces_residual_step_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (k, rho, m, phi, top) = (6, 3, 9, 12, 10);
    let f_i = Tensor::uniform(&[k, rho], -1.0, 1.0, &mut rng);
    let y = Tensor::uniform(&[m, phi], -1.0, 1.0, &mut rng);
    let val_u = Tensor::uniform(&[k, k], -1.0, 1.0, &mut rng);
    let val_v = Tensor::uniform(&[k, m], -1.0, 1.0, &mut rng);
    let boxes = Tensor::uniform(&[4, phi], 0.0, 1.0, &mut rng);
    let logits = Tensor::uniform(&[rho, phi], -1.0, 1.0, &mut rng);
    let mut tape = Tape::inference();
    let map =
        bilinear_attention_map(&mut tape, &logits, &ChannelMask::full(phi), MapScope::Joint)
            .unwrap();
    let plain =
        residual_step(&mut tape, &f_i, &y, &map, &val_u, &val_v, Form::Relu, None).unwrap();
    let embed_w = Tensor::uniform(&[k, top + 1], -1.0, 1.0, &mut rng);
    let embed_b = Tensor::zeros(&[k]);
    let hooked = residual_step_with_counter(
        &mut tape,
        &f_i,
        &y,
        &map,
        &val_u,
        &val_v,
        &boxes,
        &ZeroCounter,
        &embed_w,
        &embed_b,
        top,
        Form::Relu,
        None,
    )
    .unwrap();
    assert_eq!(plain.data(), hooked.data());
}

#[test]
fn counter_threshold_plugin_changes_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (k, rho, m, phi, top) = (6, 3, 9, 12, 10);
    let f_i = Tensor::uniform(&[k, rho], -1.0, 1.0, &mut rng);
    let y = Tensor::uniform(&[m, phi], -1.0, 1.0, &mut rng);
    let val_u = Tensor::uniform(&[k, k], -1.0, 1.0, &mut rng);
    let val_v = Tensor::uniform(&[k, m], -1.0, 1.0, &mut rng);
    let boxes = Tensor::uniform(&[4, phi], 0.0, 1.0, &mut rng);
    let logits = Tensor::uniform(&[rho, phi], 0.5, 2.0, &mut rng);
    let mut tape = Tape::inference();
    let map =
        bilinear_attention_map(&mut tape, &logits, &ChannelMask::full(phi), MapScope::Joint)
            .unwrap();
    let plain =
        residual_step(&mut tape, &f_i, &y, &map, &val_u, &val_v, Form::Relu, None).unwrap();
    let embed_w = Tensor::uniform(&[k, top + 1], 0.5, 1.0, &mut rng);
    let embed_b = Tensor::zeros(&[k]);
    let plugin = ThresholdCounter { threshold: 0.5 };
    let hooked = residual_step_with_counter(
        &mut tape,
        &f_i,
        &y,
        &map,
        &val_u,
        &val_v,
        &boxes,
        &plugin,
        &embed_w,
        &embed_b,
        top,
        Form::Relu,
        None,
    )
    .unwrap();
    assert!(max_abs_diff(&plain, &hooked) > 0.0);
}

#[test]
fn forward_logit_shapes_for_every_mechanism() {
    for kind in [
        AttentionKind::Bilinear,
        AttentionKind::Unitary,
        AttentionKind::Co,
    ] {
        let config = tiny_config(kind, Integration::Residual, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let (tokens, visual, mask, _) = tiny_sample(&config, 6);
        let out = eval_forward(&params, &config, &tokens, &visual, &mask, None);
        assert_eq!(out.logits.shape(), &[config.answers]);
        assert_eq!(out.maps.len(), config.glimpses);
        for map in &out.maps {
            let total: f64 = map.probs.data().iter().sum();
            assert!((total - 1.0).abs() <= 1e-9, "{kind:?}: map sums to {total}");
        }
    }
}

#[test]
fn residual_masked_columns_stay_zero() {
    let config = tiny_config(AttentionKind::Bilinear, Integration::Residual, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = ModelParams::init(&config, &mut rng).unwrap();
    let (tokens, visual, mask, _) = tiny_sample(&config, 8);
    let out = eval_forward(&params, &config, &tokens, &visual, &mask, None);
    for map in &out.maps {
        assert_eq!(map.probs.shape(), &[tokens.len(), 5]);
        for i in 0..tokens.len() {
            assert_eq!(map.probs.at2(i, 4), 0.0);
        }
    }
}

#[test]
fn integration_modes_change_classifier_width() {
    let residual = tiny_config(AttentionKind::Bilinear, Integration::Residual, 4);
    let sum = tiny_config(AttentionKind::Bilinear, Integration::Sum, 4);
    let concat = tiny_config(AttentionKind::Bilinear, Integration::Concat, 4);
    assert_eq!(residual.classifier_input(), 8);
    assert_eq!(sum.classifier_input(), 8);
    assert_eq!(concat.classifier_input(), 32);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p_res = ModelParams::init(&residual, &mut rng).unwrap();
    let p_sum = ModelParams::init(&sum, &mut rng).unwrap();
    let p_cat = ModelParams::init(&concat, &mut rng).unwrap();
    assert_eq!(p_res.parameter_count(), p_sum.parameter_count());
    // The surplus is exactly the widened classifier input block.
    let widened =
        concat.classifier_hidden * (concat.classifier_input() - residual.classifier_input());
    assert_eq!(p_cat.parameter_count() - p_res.parameter_count(), widened);
}

#[test]
fn residual_requires_matching_widths() {
    let mut config = tiny_config(AttentionKind::Bilinear, Integration::Residual, 2);
    config.question_hidden = 9;
    assert!(matches!(config.validate(), Err(crate::Error::Config(_))));
    config.integration = Integration::Sum;
    assert!(config.validate().is_ok());
}

#[test]
fn end_to_end_two_glimpse_gradients_check_out() {
    let config = tiny_config(AttentionKind::Bilinear, Integration::Residual, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let params = ModelParams::init(&config, &mut rng).unwrap();
    let (tokens, visual, mask, _) = tiny_sample(&config, 11);
    let names: Vec<String> = params.entries().iter().map(|(n, _)| n.clone()).collect();
    let inputs: Vec<Tensor> = params.entries().iter().map(|(_, t)| (*t).clone()).collect();
    let target = {
        let mut data = vec![0.0; config.answers];
        data[2] = 1.0;
        Tensor::vector(data)
    };
    let f = {
        let config = config.clone();
        let params = params.clone();
        move |tape: &mut Tape, xs: &[Tensor]| {
            let mut p = params.clone();
            for (slot, x) in p.entries_mut().into_iter().zip(xs) {
                *slot.1 = x.clone();
            }
            let sample = SampleInput {
                tokens: &tokens,
                visual: &visual,
                mask: &mask,
                boxes: None,
            };
            let out = forward(tape, &p, &config, &sample, None, &mut Mode::Eval, None)?;
            crate::train::bce_loss(tape, &out.logits, &target)
        }
    };
    let opts = GradCheckOptions {
        tolerance: 1e-4,
        ..GradCheckOptions::default()
    };
    let report = grad_check(f, &inputs, &opts).unwrap();
    for (i, check) in report.inputs.iter().enumerate() {
        assert!(
            check.failing.is_empty(),
            "{}: max rel err {} ({:?})",
            names[i],
            check.max_rel_err,
            check.worst_pair,
        );
    }
}

#[test]
fn checkpoint_round_trip_restores_parameters() {
    let config = tiny_config(AttentionKind::Bilinear, Integration::Residual, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = ModelParams::init(&config, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    params.save(&path).unwrap();
    let mut other = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    other.load_into(&path).unwrap();
    for ((n1, t1), (n2, t2)) in params.entries().iter().zip(other.entries().iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.data(), t2.data(), "{n1} differs after reload");
    }

    let unitary = tiny_config(AttentionKind::Unitary, Integration::Residual, 2);
    let mut wrong = ModelParams::init(&unitary, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(wrong.load_into(&path).is_err());
}

#[test]
fn entries_and_entries_mut_agree_on_order() {
    for kind in [
        AttentionKind::Bilinear,
        AttentionKind::Unitary,
        AttentionKind::Co,
    ] {
        let mut config = tiny_config(kind, Integration::Residual, 2);
        if kind == AttentionKind::Bilinear {
            config.counter = true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = ModelParams::init(&config, &mut rng).unwrap();
        let names: Vec<String> = params.entries().iter().map(|(n, _)| n.clone()).collect();
        let names_mut: Vec<String> =
            params.entries_mut().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, names_mut);
    }
}

#[test]
fn entropy_examples() {
    let uniform = AttentionMap {
        probs: Tensor::filled(&[3, 4], 1.0 / 12.0),
        logits: Tensor::zeros(&[3, 4]),
        valid_cols: vec![true; 4],
    };
    assert!((attention_entropy(&uniform) - 12.0f64.ln()).abs() <= 1e-12);

    let mut hot = vec![0.0; 12];
    hot[5] = 1.0;
    let one_hot = AttentionMap {
        probs: Tensor::from_vec(vec![3, 4], hot).unwrap(),
        logits: Tensor::zeros(&[3, 4]),
        valid_cols: vec![true; 4],
    };
    assert_eq!(attention_entropy(&one_hot), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let logits = Tensor::uniform(&[3, 4], -3.0, 3.0, &mut rng);
        let mut tape = Tape::inference();
        let map =
            bilinear_attention_map(&mut tape, &logits, &ChannelMask::full(4), MapScope::Joint)
                .unwrap();
        let h = attention_entropy(&map);
        assert!(h >= 0.0 && h <= 12.0f64.ln() + 1e-12);
    }
}

#[test]
fn localization_loss_examples() {
    // Saturated map against the matching one-hot target: the floor keeps the
    // loss near zero instead of NaN.
    let mut spiked = vec![0.0; 6];
    spiked[2] = 1e9;
    let logits = Tensor::from_vec(vec![2, 3], spiked).unwrap();
    let mut tape = Tape::inference();
    let map = bilinear_attention_map(&mut tape, &logits, &ChannelMask::full(3), MapScope::Joint)
        .unwrap();
    let mut target = vec![0.0; 6];
    target[2] = 1.0;
    let target = Tensor::from_vec(vec![2, 3], target).unwrap();
    let loss = phrase_localization_loss(&mut tape, &map, &target).unwrap();
    assert!(loss.item().unwrap() <= 1e-6);

    // All-zero target under a uniform map over n cells: -ln(1 - 1/n) per cell.
    let n = 6.0;
    let uniform = AttentionMap {
        probs: Tensor::filled(&[2, 3], 1.0 / n),
        logits: Tensor::zeros(&[2, 3]),
        valid_cols: vec![true; 3],
    };
    let zeros = Tensor::zeros(&[2, 3]);
    let loss = phrase_localization_loss(&mut tape, &uniform, &zeros).unwrap();
    let expect = -(1.0 - 1.0 / n).ln();
    assert!((loss.item().unwrap() - expect).abs() <= 1e-12);

    // Random case against an elementwise loop oracle with a masked column.
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let logits = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
    let mask = ChannelMask::prefix(3, 4).unwrap();
    let map = bilinear_attention_map(&mut tape, &logits, &mask, MapScope::Joint).unwrap();
    let target = Tensor::from_vec(
        vec![3, 4],
        (0..12).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let loss = phrase_localization_loss(&mut tape, &map, &target).unwrap();
    let mut expect = 0.0;
    let mut count = 0;
    for i in 0..3 {
        for j in 0..3 {
            let p = map.probs.at2(i, j).clamp(1e-7, 1.0 - 1e-7);
            let t = target.at2(i, j);
            expect -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            count += 1;
        }
    }
    expect /= count as f64;
    assert!((loss.item().unwrap() - expect).abs() <= 1e-12);
}

#[test]
fn glimpse_limit_validation() {
    let config = tiny_config(AttentionKind::Bilinear, Integration::Residual, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let params = ModelParams::init(&config, &mut rng).unwrap();
    let (tokens, visual, mask, _) = tiny_sample(&config, 17);
    let sample = SampleInput {
        tokens: &tokens,
        visual: &visual,
        mask: &mask,
        boxes: None,
    };
    let mut tape = Tape::inference();
    assert!(forward(&mut tape, &params, &config, &sample, None, &mut Mode::Eval, Some(0)).is_err());
    assert!(forward(&mut tape, &params, &config, &sample, None, &mut Mode::Eval, Some(3)).is_err());
    assert!(forward(&mut tape, &params, &config, &sample, None, &mut Mode::Eval, Some(2)).is_ok());
}

#[test]
fn mfb_variant_widens_values_and_pools_back() {
    let mut config = tiny_config(AttentionKind::Bilinear, Integration::Residual, 1);
    config.mfb_window = Some(3);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let params = ModelParams::init(&config, &mut rng).unwrap();
    match &params.mech {
        MechanismParams::Bilinear(b) => assert_eq!(b.val_u[0].dir.shape(), &[24, 8]),
        _ => panic!("expected bilinear params"),
    }
    let (tokens, visual, mask, _) = tiny_sample(&config, 19);
    let out = eval_forward(&params, &config, &tokens, &visual, &mask, None);
    assert_eq!(out.logits.shape(), &[config.answers]);
}

#[test]
fn counter_needs_plugin_and_boxes() {
    let mut config = tiny_config(AttentionKind::Bilinear, Integration::Residual, 1);
    config.counter = true;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let params = ModelParams::init(&config, &mut rng).unwrap();
    let (tokens, visual, mask, boxes) = tiny_sample(&config, 21);
    let sample = SampleInput {
        tokens: &tokens,
        visual: &visual,
        mask: &mask,
        boxes: Some(&boxes),
    };
    let mut tape = Tape::inference();
    assert!(matches!(
        forward(&mut tape, &params, &config, &sample, None, &mut Mode::Eval, None),
        Err(crate::Error::Config(_))
    ));
    let out = forward(
        &mut tape,
        &params,
        &config,
        &sample,
        Some(&ZeroCounter),
        &mut Mode::Eval,
        None,
    );
    assert!(out.is_ok());
}

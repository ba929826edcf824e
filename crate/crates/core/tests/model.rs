use hybridwarp::loss::{l_cons, LossWeights};
use hybridwarp::model::{hybrid_forward, init_params, HybridInputs, NetConfig, NetRole, ParameterSet, DESK_WIDTHS};
use hybridwarp::ops::{slice_channels, NormMode};
use hybridwarp::synth::{make_pair, Interval, PhantomConfig};
use hybridwarp::train::{compute_gradients, objective, Mode, TrainConfig};
use hybridwarp::{Graph, Tensor};

const TINY: [usize; 3] = [2, 4, 2];

fn nets(seed: u64) -> (ParameterSet, ParameterSet) {
    (
        init_params(NetRole::Segmentation, &NetConfig::segmentation(seed).with_widths(&TINY)).unwrap(),
        init_params(
            NetRole::Registration,
            &NetConfig::registration(seed + 1).with_widths(&TINY),
        )
        .unwrap(),
    )
}

fn tiny_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        seg_net: NetConfig::segmentation(0).with_widths(&TINY),
        reg_net: NetConfig::registration(1).with_widths(&TINY),
        ..TrainConfig::default()
    }
}

fn perturb(p: &mut ParameterSet) {
    for t in p.learnable_mut() {
        for v in t.data_mut() {
            *v += 0.05;
        }
    }
}

#[test]
fn parameter_count_matches_hand_oracle() {
    // Per stage: two 3^3 convs (weight + bias) and two norms (scale + shift).
    let cfg = NetConfig {
        input_channels: 1,
        output_channels: 2,
        ..NetConfig::segmentation(0)
    }
    .with_widths(&[4, 8, 16, 8, 4]);
    let stage = |cin: usize, c: usize| (cin * c * 27 + c) + (c * c * 27 + c) + 4 * c;
    let expected = stage(1, 4) + stage(4, 8) + stage(8, 16) + stage(16 + 8, 8) + stage(8 + 4, 4) + (4 * 2 * 27 + 2);
    assert_eq!(expected, 22598);
    assert_eq!(cfg.parameter_count(), expected);
    let p = init_params(NetRole::Segmentation, &cfg).unwrap();
    assert_eq!(p.parameter_count(), expected);
}

#[test]
fn initialization_is_seeded_and_finite() {
    let a = init_params(NetRole::Segmentation, &NetConfig::segmentation(5)).unwrap();
    let b = init_params(NetRole::Segmentation, &NetConfig::segmentation(5)).unwrap();
    let c = init_params(NetRole::Segmentation, &NetConfig::segmentation(6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.is_finite());
    assert_eq!(a.config().channel_widths, DESK_WIDTHS.to_vec());
}

#[test]
fn paths_are_separated() {
    let pair = make_pair(&PhantomConfig::cube(8, 0), 3, Interval::Long).unwrap();
    let inputs = HybridInputs {
        tensor_s: &pair.source.tensor,
        fa_s: &pair.source.fa,
        fa_t: &pair.target.fa,
    };
    let (theta, phi) = nets(10);
    let run = |t: &ParameterSet, p: &ParameterSet| {
        let mut g = Graph::new();
        let out = hybrid_forward(&mut g, &inputs, Some(t), Some(p), NormMode::Eval).unwrap();
        (g.value(out.prob_s.unwrap()).clone(), g.value(out.disp.unwrap()).clone())
    };
    let (prob0, disp0) = run(&theta, &phi);
    let mut phi2 = phi.clone();
    perturb(&mut phi2);
    let (prob1, disp1) = run(&theta, &phi2);
    assert_eq!(prob0, prob1, "segmentation must not depend on registration parameters");
    assert_ne!(disp0, disp1);
    let mut theta2 = theta.clone();
    perturb(&mut theta2);
    let (prob2, disp2) = run(&theta2, &phi);
    assert_eq!(disp0, disp2, "field must not depend on segmentation parameters");
    assert_ne!(prob0, prob2);
}

#[test]
fn warped_posterior_still_sums_to_one() {
    let pair = make_pair(&PhantomConfig::cube(8, 0), 4, Interval::Long).unwrap();
    let inputs = HybridInputs {
        tensor_s: &pair.source.tensor,
        fa_s: &pair.source.fa,
        fa_t: &pair.target.fa,
    };
    let (theta, mut phi) = nets(20);
    // Large head weights so the field moves by whole voxels.
    for v in phi.head.weight.data_mut() {
        *v *= 2000.0;
    }
    let mut g = Graph::new();
    let out = hybrid_forward(&mut g, &inputs, Some(&theta), Some(&phi), NormMode::Train).unwrap();
    let disp = g.value(out.disp.unwrap());
    assert!(disp.data().iter().any(|v| v.abs() > 0.5));
    let wp = g.value(out.warped_prob.unwrap());
    let n = wp.numel() / 2;
    for i in 0..n {
        assert!((wp.data()[i] + wp.data()[n + i] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn consistency_gradient_reaches_both_networks() {
    let pair = make_pair(&PhantomConfig::cube(8, 0), 5, Interval::Long).unwrap();
    let inputs = HybridInputs {
        tensor_s: &pair.source.tensor,
        fa_s: &pair.source.fa,
        fa_t: &pair.target.fa,
    };
    let (theta, phi) = nets(30);
    let mut g = Graph::new();
    let out = hybrid_forward(&mut g, &inputs, Some(&theta), Some(&phi), NormMode::Train).unwrap();
    let fg = slice_channels(&mut g, out.warped_prob.unwrap(), 1, 1).unwrap();
    let loss = l_cons(&mut g, fg, &pair.target.label, None).unwrap();
    g.backward(loss).unwrap();
    let norm = |ids: &[hybridwarp::NodeId]| {
        ids.iter()
            .map(|&id| g.grad_or_zeros(id).data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
    };
    assert!(norm(&out.theta.unwrap().params) > 0.0);
    assert!(norm(&out.phi.unwrap().params) > 0.0);
}

#[test]
fn untrained_registration_is_near_identity() {
    let pair = make_pair(&PhantomConfig::cube(16, 0), 6, Interval::Long).unwrap();
    let inputs = HybridInputs {
        tensor_s: &pair.source.tensor,
        fa_s: &pair.source.fa,
        fa_t: &pair.target.fa,
    };
    let phi = init_params(NetRole::Registration, &NetConfig::registration(1)).unwrap();
    let mut g = Graph::new();
    let out = hybrid_forward(&mut g, &inputs, None, Some(&phi), NormMode::Eval).unwrap();
    let max = g
        .value(out.disp.unwrap())
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max < 0.1, "initial field reaches {max} voxels");
}

#[test]
fn shape_audit_follows_config() {
    for widths in [vec![2usize, 4, 2], vec![2, 4, 8, 4, 2], DESK_WIDTHS.to_vec()] {
        let cfg = NetConfig::segmentation(0).with_widths(&widths);
        let depth = (widths.len() - 1) / 2;
        assert_eq!(cfg.depth(), depth);
        let side = 1usize << depth;
        assert!(cfg.check_input(6, [side, 2 * side, side]).is_ok());
        assert!(cfg.check_input(6, [side + 1, side, side]).is_err());
        assert!(cfg.check_input(5, [side, side, side]).is_err());
        let p = init_params(NetRole::Segmentation, &cfg).unwrap();
        assert_eq!(p.blocks.len(), 2 * widths.len());
        let x = Tensor::zeros(hybridwarp::Shape::new([6, side, 2 * side, side]).unwrap());
        let mut g = Graph::new();
        let id = g.input(x);
        let out = hybridwarp::model::unet_forward(&mut g, id, &p, NormMode::Eval).unwrap();
        assert_eq!(g.shape(out.output).dims(), &[2, side, 2 * side, side]);
    }
    assert!(NetConfig::segmentation(0).with_widths(&[2, 4]).validate().is_err());
}

#[test]
fn mode_objectives_pick_their_terms() {
    let pair = make_pair(&PhantomConfig::cube(8, 0), 8, Interval::Long).unwrap();
    let (theta, phi) = nets(40);
    for (mode, seg, reg, cons) in [
        (Mode::Hybrid, true, true, true),
        (Mode::Segnet, true, false, false),
        (Mode::Regnet, false, true, false),
    ] {
        let cfg = tiny_config(mode);
        let mut g = Graph::new();
        let obj = objective(&mut g, &cfg, Some(&theta), Some(&phi), &pair, NormMode::Train).unwrap();
        assert_eq!(obj.terms.seg.is_some(), seg, "{mode}");
        assert_eq!(obj.terms.reg.is_some(), reg, "{mode}");
        assert_eq!(obj.terms.def.is_some(), reg, "{mode}");
        assert_eq!(obj.terms.cons.is_some(), cons, "{mode}");
        let step = compute_gradients(&cfg, Some(&theta), Some(&phi), &pair).unwrap();
        assert_eq!(step.theta_grads.is_some(), mode.uses_theta());
        assert_eq!(step.phi_grads.is_some(), mode.uses_phi());
    }
}

#[test]
fn zero_gamma_decouples_target_label_from_theta() {
    let pair = make_pair(&PhantomConfig::cube(8, 0), 9, Interval::Long).unwrap();
    let (theta, phi) = nets(50);
    let cfg = TrainConfig {
        weights: LossWeights {
            gamma: 0.0,
            ..LossWeights::default()
        },
        ..tiny_config(Mode::Hybrid)
    };
    let a = compute_gradients(&cfg, Some(&theta), Some(&phi), &pair).unwrap();
    let mut other = pair.clone();
    other.target.label = hybridwarp::BinaryMask::from_fn(pair.spatial(), |z, y, x| (z + y + x) % 3 == 0).unwrap();
    let b = compute_gradients(&cfg, Some(&theta), Some(&phi), &other).unwrap();
    assert_eq!(a.theta_grads, b.theta_grads);
}

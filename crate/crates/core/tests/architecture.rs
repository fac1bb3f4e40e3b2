use anchorconv::arch::{count_params, Channels, Family, Layer, Network, NetworkSpec};
use anchorconv::ops::Mode;
use anchorconv::train::{adagrad_step, AdagradState};
use anchorconv::{Graph, Tensor};

const C: usize = 128;
const K: usize = 100;

fn total(spec: &NetworkSpec) -> usize {
    count_params(&Network::build(spec, 0).unwrap()).total
}

/// Closed form for the plain family under the counting convention:
/// expansion, shared kernel, (L + 1) BN groups, classifier.
fn plain_oracle(l: usize, c: usize, k: usize) -> usize {
    3 * c * 9 + c * c * 9 + (l + 1) * 2 * c + c * k + k
}

#[test]
fn plain_counts_match_closed_form() {
    for l in 3..=17 {
        assert_eq!(total(&NetworkSpec::plain(l, C, K)), plain_oracle(l, C, K), "L={l}");
    }
    assert_eq!(plain_oracle(3, C, K), 3456 + 147_456 + 4 * 256 + 12_900);
}

#[test]
fn deeper_plain_nets_add_one_bn_group() {
    let mut prev = total(&NetworkSpec::plain(3, C, K));
    for l in 4..=34 {
        let t = total(&NetworkSpec::plain(l, C, K));
        assert_eq!(t - prev, 2 * C, "L={l}");
        prev = t;
    }
    assert_eq!(total(&NetworkSpec::plain(34, C, K)) - total(&NetworkSpec::plain(18, C, K)), 16 * 256);
}

#[test]
fn free_minus_shared_is_extra_kernels() {
    for l in [3, 5, 7, 9, 11, 14] {
        let plain = total(&NetworkSpec::plain(l, C, K));
        let mut free = NetworkSpec::plain(l, C, K);
        free.family = Family::Free;
        assert_eq!(total(&free) - plain, (l - 1) * C * C * 9, "L={l}");
    }
}

#[test]
fn kernel_group_topology() {
    for l in [3, 6, 11] {
        let plain = count_params(&Network::build(&NetworkSpec::plain(l, C, K), 0).unwrap());
        assert_eq!(plain.conv3x3_groups(), 2);
        let mut free = NetworkSpec::plain(l, C, K);
        free.family = Family::Free;
        let free = count_params(&Network::build(&free, 0).unwrap());
        assert_eq!(free.conv3x3_groups(), l + 1);
    }
    for sections in 2..=4 {
        let mut mixed = NetworkSpec::new(Family::Mixed, 14);
        mixed.sections = sections;
        mixed.channels = Channels::Pattern([64, 128, 256, 512][..sections].to_vec());
        mixed.num_classes = K;
        let r = count_params(&Network::build(&mixed, 0).unwrap());
        assert_eq!(r.conv3x3_groups(), 2 * sections);
    }
}

#[test]
fn shared_kernel_group_reports_every_use() {
    let r = count_params(&Network::build(&NetworkSpec::plain(9, C, K), 0).unwrap());
    let g = r.group("W_conv_G").unwrap();
    assert_eq!(g.count, C * C * 9);
    assert_eq!(g.shared_use_count, 9);
    assert_eq!(r.bn_groups(), 10);
}

#[test]
fn spatial_extent_halves_once_per_section_boundary() {
    for sections in 1..=4 {
        let spec = NetworkSpec::plain(6, 4, 3).with_input(16, 16).with_sections(sections);
        let mut net = Network::build(&spec, 0).unwrap();
        let mut g = Graph::new();
        let f = net.forward_graph(&mut g, Tensor::zeros(&[1, 3, 16, 16]).unwrap(), Mode::Eval).unwrap();
        let last = g.value(*f.taps.last().unwrap()).shape().to_vec();
        assert_eq!(last[2], 16 >> (sections - 1), "sections={sections}");
        let pools = net.layers().iter().filter(|l| matches!(l, Layer::Pool)).count();
        assert_eq!(pools, sections - 1);
    }
}

#[test]
fn forward_is_deterministic_in_eval_mode() {
    let spec = NetworkSpec::plain(5, 6, 4).with_input(8, 8).with_sections(2);
    let mut net = Network::build(&spec, 3).unwrap();
    let x = Tensor::randn(&[3, 3, 8, 8], 4, 1.0).unwrap();
    let a = net.forward(&x, Mode::Eval).unwrap();
    let b = net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(a.data().iter().all(|v| v.is_finite()));

    let again = Network::build(&spec, 3).unwrap();
    assert_eq!(again.params().get("W_conv_G").unwrap(), net.params().get("W_conv_G").unwrap());
}

#[test]
fn zeroed_residual_blocks_pass_the_shortcut_through() {
    let spec = NetworkSpec::plain(20, 4, 3).with_input(8, 8).with_sections(2);
    assert_eq!(spec.family, Family::PlainResidual);
    let mut net = Network::build(&spec, 1).unwrap();
    net.params_mut().get_mut("W_conv_G").unwrap().data_mut().fill(0.0);
    let mut g = Graph::new();
    let x = Tensor::randn(&[2, 3, 8, 8], 5, 1.0).unwrap();
    let f = net.forward_graph(&mut g, x, Mode::Eval).unwrap();

    let mut tap = 0;
    let mut prev_out: Option<usize> = None;
    let mut checked = 0;
    for layer in net.layers() {
        match layer {
            Layer::Unit(_) => {
                prev_out = Some(tap);
                tap += 1;
            }
            Layer::Block(b) => {
                let out = tap + 1;
                if let (Some(p), None) = (prev_out, &b.projection) {
                    let input = g.value(f.taps[p]);
                    let relu_in: Vec<f64> = input.data().iter().map(|v| v.max(0.0)).collect();
                    assert_eq!(g.value(f.taps[out]).data(), relu_in.as_slice());
                    checked += 1;
                }
                prev_out = Some(out);
                tap += 2;
            }
            Layer::Pool => prev_out = None,
            Layer::Head { .. } => {}
        }
    }
    assert!(checked >= 7, "only {checked} blocks checked");
}

#[test]
fn shared_kernel_stays_single_storage_through_training_steps() {
    let spec = NetworkSpec::plain(4, 4, 3).with_input(8, 8).with_sections(2);
    let mut net = Network::build(&spec, 0).unwrap();
    let x = Tensor::randn(&[4, 3, 8, 8], 6, 1.0).unwrap();
    let mut st = AdagradState::new(1e-10);
    let before = net.params().get("W_conv_G").unwrap().clone();
    for _ in 0..3 {
        net.loss_and_grad(x.clone(), &[0, 1, 2, 0], Mode::Train).unwrap();
        adagrad_step(net.params_mut(), &mut st, 0.1).unwrap();
    }
    let shared: Vec<_> = net.params().iter().filter(|(n, _)| n.starts_with("W_conv_G")).collect();
    assert_eq!(shared.len(), 1);
    assert_ne!(shared[0].1.tensor.data(), before.data());
    assert_eq!(net.conv_use_sites()["W_conv_G"], 4);
}

#[test]
fn non_residual_depth_limit() {
    let mut s = NetworkSpec::plain(18, C, K);
    s.family = Family::Plain;
    assert!(Network::build(&s, 0).is_err());
    let mut s = NetworkSpec::plain(18, C, K);
    s.family = Family::Mixed;
    s.channels = Channels::Pattern(vec![64, 128, 256, 512]);
    assert!(Network::build(&s, 0).is_err());
}

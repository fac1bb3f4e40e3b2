//! Anchored-kernel architectures: plain, residual, mixed, regulated and
//! free-weight references.

pub mod network;
pub mod report;
pub mod spec;

pub use network::{build_free, build_mixed, build_plain, ConvUnit, Forward, Layer, Network, ResidualBlock};
pub use report::{count_params, GroupReport, ParamReport};
pub use spec::{Channels, ConfigFile, Family, Layout, NetworkSpec, RunSettings};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Mode;
    use crate::tensor::Tensor;

    #[test]
    fn plain_three_layer_groups() {
        let net = build_plain(&NetworkSpec::plain(3, 128, 100), 0).unwrap();
        let r = count_params(&net);
        assert_eq!(r.group("W_conv_1").unwrap().count, 3456);
        assert_eq!(r.group("W_conv_G").unwrap().count, 147456);
        assert_eq!(r.group("W_conv_G").unwrap().shared_use_count, 3);
        assert_eq!(r.group("classifier").unwrap().count, 12900);
        assert_eq!(r.bn_groups(), 4);
        assert!(r.groups.iter().filter(|g| g.name.starts_with("W_bn_")).all(|g| g.count == 256));
        assert_eq!(r.groups.len(), 7);
        assert_eq!(r.total, 3456 + 147456 + 12900 + 4 * 256);
    }

    #[test]
    fn shared_kernel_shape_is_depth_independent() {
        let a = build_plain(&NetworkSpec::plain(3, 128, 100), 0).unwrap();
        let b = build_plain(&NetworkSpec::plain(14, 128, 100), 0).unwrap();
        assert_eq!(a.params().get("W_conv_G").unwrap().shape(), &[128, 128, 3, 3]);
        assert_eq!(
            a.params().get("W_conv_G").unwrap().shape(),
            b.params().get("W_conv_G").unwrap().shape()
        );
    }

    #[test]
    fn zero_image_gives_finite_logits() {
        let spec = NetworkSpec::plain(3, 8, 5).with_input(16, 16);
        let mut net = build_plain(&spec, 1).unwrap();
        let x = Tensor::zeros(&[2, 3, 16, 16]).unwrap();
        let y = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 5]);
        assert!(y.data().iter().all(|v| v.is_finite()));
        let y = net.forward(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mixed_has_eight_kernels() {
        let net = build_mixed(&NetworkSpec::new(Family::Mixed, 14), 0).unwrap();
        let r = count_params(&net);
        assert_eq!(r.conv3x3_groups(), 8);
        for s in 0..4 {
            assert!(r.group(&format!("W_conv_S{s}")).is_some());
        }
        let res = build_mixed(&NetworkSpec::new(Family::MixedResidual, 18), 0).unwrap();
        let r = count_params(&res);
        assert_eq!(r.conv3x3_groups(), 8);
        assert_eq!(r.groups.iter().filter(|g| g.name.starts_with("W_proj_")).count(), 3);
    }

    #[test]
    fn free_group_counts() {
        for depth in [3, 9, 14, 18] {
            let mut spec = NetworkSpec::plain(depth, 128, 100);
            spec.family = Family::Free;
            let r = count_params(&build_free(&spec, 0).unwrap());
            assert_eq!(r.conv3x3_groups(), depth + 1);
        }
    }

    #[test]
    fn builders_reject_wrong_family() {
        let spec = NetworkSpec::new(Family::Mixed, 14);
        assert!(build_plain(&spec, 0).is_err());
        assert!(build_free(&spec, 0).is_err());
        assert!(build_mixed(&NetworkSpec::plain(3, 8, 4), 0).is_err());
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let mut net = Network::build(&NetworkSpec::plain(3, 4, 3).with_input(8, 8).with_sections(2), 0).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 3, 16, 16]).unwrap(), Mode::Eval).is_err());
        assert!(net.forward(&Tensor::zeros(&[1, 1, 8, 8]).unwrap(), Mode::Eval).is_err());
    }
}

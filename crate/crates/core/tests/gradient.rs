mod common;

use lhcf::trainer::{Architecture, LossKind};

#[test]
fn analytic_gradient_matches_central_differences() {
    for arch in [Architecture::Linear, Architecture::Mlp { hidden: 5 }] {
        for (i, kind) in [LossKind::None, LossKind::Worst, LossKind::Gap].into_iter().enumerate() {
            let (used, worst) = common::gradient_check(arch, kind, 100, 40 + i as u64);
            assert_eq!(used, 100, "{arch:?} {kind:?}: not enough untied points");
            assert!(worst < 1e-4, "{arch:?} {kind:?}: relative error {worst:e}");
        }
    }
}

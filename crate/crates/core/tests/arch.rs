use pdcnn_core::arch::{branch_param_count, build_arch_with, build_pdcnn_with, variant_kernels};
use pdcnn_core::{build_arch, build_pdcnn, param_count, shape_check, ArchConfig, LayerKind, PdcnnSpec};
use proptest::prelude::*;

#[test]
fn full_scale_arch2_has_positive_extents() {
    let spec = build_pdcnn(&[4]).unwrap();
    let table = shape_check(&spec, [3, 224, 224]).unwrap();
    assert!(table.rows.iter().all(|r| r.shape.iter().all(|&d| d > 0)));
    assert_eq!(table.rows[0].shape, vec![64, 56, 56]);
    let conv1 = &spec.branches[0].layers[0];
    assert_eq!(
        conv1.kind,
        LayerKind::Conv {
            filters: 64,
            kernel: 7,
            stride: 4,
            padding: 2
        }
    );
}

#[test]
fn every_depth_and_variant_fits_both_presets() {
    for cfg in [ArchConfig::default(), ArchConfig::desk()] {
        for depth in 3..=5 {
            for variant in 0..4 {
                let spec = build_pdcnn_with(&[depth], Some(&[variant]), &cfg).unwrap();
                shape_check(&spec, cfg.input).unwrap();
            }
        }
    }
}

#[test]
fn single_branch_pdcnn_is_the_plain_network() {
    let cfg = ArchConfig::default();
    for depth in 3..=5 {
        let arch = build_arch(depth, 0).unwrap();
        let single = PdcnnSpec::single(arch.clone(), cfg.clone());
        assert_eq!(build_pdcnn(&[depth]).unwrap(), single);
        let fc_in = shape_check(&single, cfg.input).unwrap().fused;
        assert_eq!(
            param_count(&single).unwrap(),
            branch_param_count(&arch, 3) + 2 * fc_in + 2
        );
    }
}

#[test]
fn repeated_depths_get_distinct_kernels() {
    let spec = build_pdcnn(&[4, 3, 4]).unwrap();
    assert_eq!(spec.variants(), vec![0, 0, 1]);
    assert_ne!(spec.branches[0].conv_kernels(), spec.branches[2].conv_kernels());
    let four = build_pdcnn(&[3, 3, 3, 3]).unwrap();
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(four.branches[i].conv_kernels(), four.branches[j].conv_kernels());
        }
    }
    assert_eq!(variant_kernels(0), [7, 5, 3, 3, 3]);
}

#[test]
fn invalid_compositions() {
    assert!(build_pdcnn(&[]).is_err());
    assert!(build_pdcnn(&[4, 4, 4, 4, 4]).is_err());
    assert!(build_pdcnn(&[2]).is_err());
    assert!(build_pdcnn(&[6]).is_err());
    let mut tiny = ArchConfig::desk();
    tiny.input = [3, 16, 16];
    let spec = build_pdcnn_with(&[5], None, &tiny).unwrap();
    assert!(shape_check(&spec, tiny.input).is_err());
}

proptest! {
    #[test]
    fn param_count_is_additive(depths in proptest::collection::vec(3usize..6, 1..5)) {
        let cfg = ArchConfig::default();
        let spec = build_pdcnn(&depths).unwrap();
        let table = shape_check(&spec, cfg.input).unwrap();
        let branches: usize = spec.branches.iter().map(|b| branch_param_count(b, 3)).sum();
        prop_assert_eq!(param_count(&spec).unwrap(), branches + 2 * table.fused + 2);
        prop_assert_eq!(table.fused, table.branch_features.iter().sum::<usize>());
    }

    #[test]
    fn param_count_ignores_branch_order(depths in proptest::collection::vec(3usize..6, 1..5), rot in 0usize..4) {
        let cfg = ArchConfig::default();
        let variants: Vec<usize> = (0..depths.len()).collect();
        let mut d2 = depths.clone();
        let mut v2 = variants.clone();
        let r = rot % depths.len();
        d2.rotate_left(r);
        v2.rotate_left(r);
        let a = build_pdcnn_with(&depths, Some(&variants), &cfg).unwrap();
        let b = build_pdcnn_with(&d2, Some(&v2), &cfg).unwrap();
        prop_assert_eq!(param_count(&a).unwrap(), param_count(&b).unwrap());
    }

    #[test]
    fn deeper_branch_has_more_conv_layers(depth in 3usize..6, variant in 0usize..4) {
        let arch = build_arch_with(depth, variant, &ArchConfig::default()).unwrap();
        prop_assert_eq!(arch.conv_kernels().len(), depth);
    }
}

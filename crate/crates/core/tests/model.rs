use bnneck::model::{
    count_params, BackboneConfig, Checkpoint, Downsample, Model, ModelConfig, NeckVariant,
};
use bnneck::tensor::{BnMode, Graph, Tensor};
use proptest::prelude::*;

fn backbone(channels: &[usize], pool: bool, size: usize) -> BackboneConfig {
    let mut b = BackboneConfig::with_channels([1, size, size], channels, 6);
    if pool {
        for blk in &mut b.blocks {
            blk.downsample = Downsample::MaxPool;
        }
    }
    b
}

proptest! {
    #[test]
    fn last_stride_changes_extents_not_parameters(
        channels in prop::collection::vec(1usize..6, 1..4),
        pool in any::<bool>(),
        variant in 0usize..7,
    ) {
        let neck = NeckVariant::ALL[variant];
        let mut one = ModelConfig::new(backbone(&channels, pool, 16), neck, 3);
        let mut two = one.clone();
        one.backbone.last_stride = 1;
        two.backbone.last_stride = 2;
        prop_assert_eq!(count_params(&one), count_params(&two));
        let (a, b) = (Model::new(one.clone(), 1).unwrap(), Model::new(two.clone(), 1).unwrap());
        for (p, q) in a.params().iter().zip(b.params()) {
            prop_assert_eq!(p.value.shape(), q.value.shape());
        }
        let [_, h1, w1] = one.backbone.feature_map_shape();
        let [_, h2, w2] = two.backbone.feature_map_shape();
        prop_assert!(h1 >= h2 && w1 >= w2);
    }

    #[test]
    fn block_norm_adds_buffers_but_no_parameters(channels in prop::collection::vec(1usize..6, 1..4)) {
        let plain = ModelConfig::new(backbone(&channels, false, 16), NeckVariant::BnNeck, 4);
        let mut normed = plain.clone();
        normed.backbone.block_norm = true;
        prop_assert_eq!(count_params(&plain), count_params(&normed));
        let m = Model::new(normed, 2).unwrap();
        let widths: Vec<usize> = m.block_bn_states().iter().map(|s| s.channels()).collect();
        prop_assert_eq!(widths, channels);
    }
}

#[test]
fn trained_block_norm_checkpoint_reloads_bit_exactly() {
    let mut cfg = ModelConfig::new(backbone(&[3, 4], false, 8), NeckVariant::BnNeck, 3);
    cfg.backbone.block_norm = true;
    let mut model = Model::new(cfg, 9).unwrap();
    // Train-mode passes move every running statistic off its initial value.
    let images: Vec<f64> = (0..4 * 64)
        .map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0)
        .collect();
    for _ in 0..3 {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![4, 1, 8, 8], images.clone()).unwrap());
        model.forward(&mut g, &vars, x, BnMode::Train).unwrap();
    }
    assert!(model
        .block_bn_states()
        .iter()
        .all(|s| s.running_mean.iter().any(|&m| m != 0.0)));
    let ck = Checkpoint::new(model.clone());
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.model, model);
    assert_eq!(back.to_bytes(), bytes);
    let probe = Tensor::new(vec![4, 1, 8, 8], images).unwrap();
    for kind in [
        bnneck::model::FeatureKind::Ft,
        bnneck::model::FeatureKind::Fi,
    ] {
        let a = model.embed_batch(&probe, kind).unwrap();
        let b = back.model.embed_batch(&probe, kind).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

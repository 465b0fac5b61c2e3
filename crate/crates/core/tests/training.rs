use spacenet_core::dataio::{synthesize_split, SplitKind};
use spacenet_core::nn::{build_model, train, Backbone, LabelledSet, ModelConfig, TrainConfig};
use spacenet_core::spacemask::{build_mask_pair, MaskScheme};

#[test]
fn desk_scale_loss_falls_over_first_five_epochs() {
    let split = synthesize_split(32, (64, 64), 0, SplitKind::Train).unwrap();
    let masks = build_mask_pair((64, 64), 4, MaskScheme::Xy).unwrap();
    let data = LabelledSet::new(&split, &masks).unwrap();
    let mut model = build_model(&ModelConfig::desk_scale(Backbone::Tiny, 5)).unwrap();
    let tcfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let ckpt = train(&mut model, &data, &tcfg, None).unwrap();
    let losses: Vec<f64> = ckpt.metrics_history.iter().map(|m| m.loss).collect();
    // average of the last two epochs against the first
    let late = (losses[3] + losses[4]) / 2.0;
    assert!(late < losses[0], "{losses:?}");
}

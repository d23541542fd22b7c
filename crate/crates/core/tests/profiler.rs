use lightseg::models::{Model, ModelConfig, ModelKind};
use lightseg::profiler::profile_model;

#[test]
fn umbv2_totals_are_in_the_published_range() {
    let cfg = ModelConfig::umbv2(9);
    let r512 = profile_model(&cfg, 512, 512).unwrap();
    let r256 = profile_model(&cfg, 256, 256).unwrap();
    let params = r512.total_params();
    assert!((4_000_000..=9_000_000).contains(&params), "{params}");
    assert_eq!(params, r256.total_params(), "parameters do not depend on resolution");

    let ratio = r512.total_macs() as f64 / r256.total_macs() as f64;
    assert!((ratio - 4.0).abs() <= 0.04, "{ratio}");
    assert_eq!(r512.model_size_bytes(), 4 * params);
    assert!((r512.totals.gops - 2.0 * r512.totals.gmacs).abs() < 1e-9);
}

#[test]
fn profile_matches_the_executable_model() {
    for kind in [ModelKind::UnetBaseline, ModelKind::Umbv2, ModelKind::Umbv3Small] {
        let cfg = ModelConfig::for_kind(kind, 9);
        let report = profile_model(&cfg, 64, 64).unwrap();
        let model = Model::build(cfg).unwrap();
        assert_eq!(report.total_params() as usize, model.learnable_params(), "{kind}");
        assert_eq!(report.layers.len(), model.network.layers().len());
        let last = report.layers.last().unwrap().output_shape;
        assert_eq!((last.c, last.h, last.w), (9, 64, 64));
    }
}

#[test]
fn layer_totals_add_up() {
    let report = profile_model(&ModelConfig::umbv3_small(9), 256, 256).unwrap();
    let sum = |f: fn(&lightseg::profiler::LayerProfile) -> u64| report.layers.iter().map(f).sum::<u64>();
    assert_eq!(sum(|l| l.params), report.total_params());
    assert_eq!(sum(|l| l.macs), report.total_macs());
    assert_eq!(sum(|l| l.cio), report.total_cio());
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["totals"]["params"].as_u64(), Some(report.total_params()));
}

#[test]
fn indivisible_inputs_are_rejected() {
    assert!(profile_model(&ModelConfig::umbv2(9), 500, 512).is_err());
    assert!(profile_model(&ModelConfig::unet(8, 2, 3), 36, 36).is_ok());
    assert!(profile_model(&ModelConfig::unet(8, 2, 3), 34, 36).is_err());
}

use msrt_core::{Graph, ModelConfig, MsrtModel, Param};
use proptest::prelude::*;

fn toy(len: usize, seed: u64) -> MsrtModel {
    MsrtModel::new(ModelConfig {
        seed,
        ..ModelConfig::toy(len, 8)
    })
    .unwrap()
}

fn signal(len: usize, phase: f64) -> Vec<f64> {
    (0..len).map(|i| (i as f64 * 0.17 + phase).sin() + 0.3 * (i as f64 * 0.041).cos()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pyramid_levels_match_backbone_levels(len in 32usize..600, seed in 0u64..1000) {
        let m = toy(len, seed);
        let mut g = Graph::inference();
        let x = g.constant(&[1, len], signal(len, seed as f64)).unwrap();
        let maps = m.pyramid(&mut g, x).unwrap();
        // stride-2 stem with "same" padding, then four cropping stride-2 stages
        let k = m.config.backbone.stem_kernel;
        let mut expect = (len + 2 * (k / 2) - k) / 2 + 1;
        for i in 0..4 {
            expect /= 2;
            let c = g.shape(maps.c[i]).to_vec();
            let p = g.shape(maps.p[i]).to_vec();
            prop_assert_eq!(c[1], expect);
            prop_assert_eq!(p[1], c[1]);
            prop_assert_eq!(p[0], m.config.fpn_channels);
        }
        prop_assert_eq!(g.shape(maps.tokens)[0], m.token_count());
    }

    #[test]
    fn fpn_without_biases_is_linear(len in 32usize..300, a in -4.0f64..4.0, seed in 0u64..1000) {
        let mut m = toy(len, seed);
        for conv in m.msr.fpn.laterals.iter_mut().chain(m.msr.fpn.merges.iter_mut()) {
            conv.bias = Param::zeros(conv.bias.shape());
        }
        let mut g = Graph::inference();
        let x = g.constant(&[1, len], signal(len, 0.5)).unwrap();
        let cs = m.msr.backbone.forward(&mut g, x).unwrap();
        let scaled: Vec<_> = cs
            .iter()
            .map(|&c| {
                let shape = g.shape(c).to_vec();
                let v = g.value(c).iter().map(|x| a * x).collect();
                g.constant(&shape, v).unwrap()
            })
            .collect();
        let scaled: [_; 4] = scaled.try_into().unwrap();
        let p = m.msr.fpn.forward(&mut g, &cs).unwrap();
        let ps = m.msr.fpn.forward(&mut g, &scaled).unwrap();
        for i in 0..4 {
            let peak = g.value(p[i]).iter().fold(1.0f64, |m, v| m.max(v.abs() * a.abs()));
            for (u, v) in g.value(p[i]).iter().zip(g.value(ps[i])) {
                prop_assert!((a * u - v).abs() <= 1e-12 * peak);
            }
        }
    }

    #[test]
    fn top_down_path_never_touches_coarsest_level(len in 64usize..400, seed in 0u64..1000) {
        let m = toy(len, seed);
        let mut g = Graph::inference();
        let x = g.constant(&[1, len], signal(len, 1.0)).unwrap();
        let cs = m.msr.backbone.forward(&mut g, x).unwrap();
        let with = m.msr.fpn.forward_with(&mut g, &cs, true).unwrap();
        let without = m.msr.fpn.forward_with(&mut g, &cs, false).unwrap();
        prop_assert_eq!(g.value(with[3]), g.value(without[3]));
        for i in 0..3 {
            prop_assert_ne!(g.value(with[i]), g.value(without[i]));
        }
    }
}

#[test]
fn default_geometry_for_thousand_samples() {
    let m = MsrtModel::new(ModelConfig::default()).unwrap();
    assert_eq!(m.msr.backbone.level_lengths(1000), [250, 125, 62, 31]);
    assert_eq!(m.token_count(), 468);
}

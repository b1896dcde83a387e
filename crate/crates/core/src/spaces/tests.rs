use super::*;
use crate::autodiff::Tape;
use crate::cost::{synth_lut, LatencyModel, LayerConfig, LayerKind};
use crate::supernet::{ForwardOptions, Stage};
use crate::testutil::random_tensor;
use crate::Tensor;

fn build(spec: MicroBlockSpec, input: Shape3, out: usize, stride: usize) -> CandidateBlock {
    let mut store = ParamStore::new();
    build_block(&spec, &mut store, &mut Rng::new(0), "b", input, out, stride).unwrap()
}

#[test]
fn k3_e1_structure() {
    let b = build(MicroBlockSpec::mbconv(1, 3, 1), (8, 6, 6), 8, 1);
    assert_eq!(b.residual, Residual::Identity);
    let convs: Vec<_> = b
        .body
        .iter()
        .filter_map(|s| match s {
            Stage::Conv {
                out_channels, kernel, groups, ..
            } => Some((*out_channels, *kernel, *groups)),
            _ => None,
        })
        .collect();
    assert_eq!(convs, vec![(8, 1, 1), (8, 3, 8), (8, 1, 1)]);
    assert!(!matches!(b.body.last(), Some(Stage::Relu)));
    assert_eq!(b.key.to_string(), "k3_e1|in=8x6x6|out=8|s=1|e=1|k=3|g=1");
}

#[test]
fn k5_e6_expands() {
    let b = build(MicroBlockSpec::mbconv(6, 5, 1), (16, 8, 8), 24, 2);
    assert_eq!(b.residual, Residual::None);
    assert_eq!(b.output, (24, 4, 4));
    let mids: Vec<_> = b
        .body
        .iter()
        .filter_map(|s| match s {
            Stage::Conv { out_channels, .. } => Some(*out_channels),
            _ => None,
        })
        .collect();
    assert_eq!(mids, vec![96, 96, 24]);
}

#[test]
fn grouped_blocks_shuffle() {
    let b = build(MicroBlockSpec::mbconv(1, 3, 2), (8, 4, 4), 8, 1);
    let n = b.body.iter().filter(|s| matches!(s, Stage::Shuffle { groups: 2 })).count();
    assert_eq!(n, 2);
}

#[test]
fn skip_is_identity_and_needs_matching_shapes() {
    let b = build(MicroBlockSpec::Skip, (4, 4, 4), 4, 1);
    assert!(b.is_identity());
    let mut rng = Rng::new(1);
    let x = random_tensor(&mut rng, &[2, 4, 4, 4]);
    let pool = avgpool_block((4, 4, 4)).unwrap();
    let net = SuperNet::new(
        (4, 4, 4),
        vec![
            Layer::Fixed {
                name: "skip".into(),
                block: b,
            },
            Layer::Fixed {
                name: "pool".into(),
                block: pool,
            },
        ],
        ParamStore::new(),
    )
    .unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let f = net.forward_hard(&mut tape, xv, &[], ForwardOptions::eval()).unwrap();
    let direct = tape.global_avgpool(xv).unwrap();
    assert_eq!(tape.value(f.logits), tape.value(direct));

    let mut store = ParamStore::new();
    assert!(build_block(&MicroBlockSpec::Skip, &mut store, &mut rng, "s", (4, 4, 4), 8, 1).is_err());
    assert!(build_block(&MicroBlockSpec::Skip, &mut store, &mut rng, "s", (4, 4, 4), 4, 2).is_err());
}

#[test]
fn shift_block_counts() {
    let mut store = ParamStore::new();
    let b = build_shift_block(&mut store, &mut Rng::new(0), "c", (8, 6, 6), 8, 1, 1).unwrap();
    let pw = LayerConfig::new(LayerKind::Pointwise, 8, 8, 1, 6);
    assert_eq!(b.metrics().params, 2 * pw.params());
    // two batch norms of 8 channels, scale and shift each
    assert_eq!(b.param_count(&store), 2 * 64 + 2 * 2 * 8);
    assert_eq!(b.flop_bits(), 2.0 * pw.macs() as f64 * 32.0 * 32.0);
    let shift_only = LayerConfig::new(LayerKind::Shift, 8, 8, 3, 6);
    assert_eq!(shift_only.macs(), 0);

    let mb = build(MicroBlockSpec::mbconv(1, 3, 1), (8, 6, 6), 16, 2);
    let sb = build_shift_block(&mut store, &mut Rng::new(0), "c2", (8, 6, 6), 16, 2, 1).unwrap();
    assert_eq!(mb.output, sb.output);
}

#[test]
fn presets_parse() {
    for spec in MicroBlockSpec::standard() {
        assert_eq!(MicroBlockSpec::preset(&spec.name()).unwrap(), spec);
    }
    assert_eq!(MicroBlockSpec::preset("shift_e3").unwrap(), MicroBlockSpec::Shift { expansion: 3 });
    assert!(MicroBlockSpec::preset("k3").is_err());
    assert!(MicroBlockSpec::preset("k3_e1_x2").is_err());
}

#[test]
fn width_scaling() {
    assert_eq!(width_scale(16, 0.5, 1), 8);
    assert_eq!(width_scale(24, 0.5, 1), 12);
    assert_eq!(width_scale(3, 0.5, 1), 2);
    assert_eq!(width_scale(3, 0.5, 2), 2);
    assert_eq!(width_scale(5, 1.0, 4), 8);
}

#[test]
fn imagenet_macro_counts() {
    // full width allocates hundreds of megabytes; the layer structure does
    // not depend on width
    let net = fbnet_space(&MacroSpec::imagenet(), &MicroBlockSpec::standard(), 0.05, &mut Rng::new(0)).unwrap();
    assert_eq!(net.searchable_count(), 22);
    let counts = net.candidate_counts();
    // the six stride-2 or widening layers lose the skip candidate
    assert_eq!(counts.iter().filter(|&&k| k == 9).count(), 16);
    assert_eq!(counts.iter().filter(|&&k| k == 8).count(), 6);
    let size = net.search_space_size();
    assert_eq!(size, 9f64.powi(16) * 8f64.powi(6));
    assert_eq!(size.log10().round(), 21.0);
}

#[test]
fn desk_space_counts() {
    let micro = [MicroBlockSpec::mbconv(1, 3, 1), MicroBlockSpec::mbconv(3, 3, 1), MicroBlockSpec::mbconv(1, 5, 1)];
    let net = fbnet_space(&MacroSpec::desk(10), &micro, 1.0, &mut Rng::new(0)).unwrap();
    assert_eq!(net.searchable_count(), 6);
    assert_eq!(net.search_space_size(), 729.0);
    assert_eq!(net.classes(), 10);

    let half = fbnet_space(&MacroSpec::desk(10), &micro, 0.5, &mut Rng::new(0)).unwrap();
    let widths: Vec<usize> = half.layers().iter().map(|l| l.output().0).collect();
    let full: Vec<usize> = net.layers().iter().map(|l| l.output().0).collect();
    for (h, f) in widths.iter().zip(&full).take(8) {
        assert_eq!(*h, f.div_ceil(2));
    }
}

#[test]
fn builders_are_deterministic_and_lut_total() {
    let micro = MicroBlockSpec::standard();
    let spec = MacroSpec::toy((1, 8, 8), 8, 3, 4);
    let a = fbnet_space(&spec, &micro, 1.0, &mut Rng::new(3)).unwrap();
    let b = fbnet_space(&spec, &micro, 1.0, &mut Rng::new(3)).unwrap();
    let keys = |n: &SuperNet| n.all_blocks().map(|b| b.key.clone()).collect::<Vec<_>>();
    assert_eq!(keys(&a), keys(&b));
    assert_eq!(a.store().snapshot(), b.store().snapshot());
    let lut = synth_lut(a.block_metrics(), LatencyModel::AnalyticMacs, "synth").unwrap();
    assert!(lut.missing(a.all_blocks().map(|b| &b.key)).is_empty());
    assert!(a.latency_coefficients(&lut).is_ok());
}

#[test]
fn shape_closure_on_every_layer() {
    let mut micro = MicroBlockSpec::standard();
    micro.push(MicroBlockSpec::Shift { expansion: 1 });
    let net = fbnet_space(&MacroSpec::desk(4), &micro, 0.5, &mut Rng::new(0)).unwrap();
    for layer in net.layers() {
        if let Layer::Searchable { candidates, .. } = layer {
            let out = candidates[0].output;
            assert!(candidates.iter().all(|c| c.output == out));
        }
    }
    let mut rng = Rng::new(1);
    let x = random_tensor(&mut rng, &[2, 3, 32, 32]);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let noise = net.draw_gumbel(&mut rng);
    let f = net.forward_soft(&mut tape, xv, 1.0, &noise, ForwardOptions::train_all()).unwrap();
    assert_eq!(tape.value(f.logits).shape(), &[2, 4]);
}

#[test]
fn precision_space_counts_and_costs() {
    let bb = ResidualBackbone {
        input: (1, 8, 8),
        classes: 3,
        stem_channels: 4,
        stages: vec![StageSpec {
            channels: 4,
            blocks: 3,
            stride: 1,
        }],
    };
    let prec = PrecisionSpec::WeightOnly(vec![1, 2, 4, 8, 32]);
    let net = mixed_precision_space(&bb, &prec, &mut Rng::new(0)).unwrap();
    assert_eq!(net.search_space_size(), 125.0);

    let size = net.size_coefficients();
    let params: f64 = net
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Searchable { candidates, .. } => Some(candidates[0].metrics().params as f64),
            _ => None,
        })
        .sum();
    assert_eq!(size.hard(&[0, 0, 0]).unwrap(), params);
    assert_eq!(size.hard(&[4, 4, 4]).unwrap() / size.hard(&[2, 2, 2]).unwrap(), 8.0);

    let with_skip = PrecisionSpec::WeightOnly(vec![0, 4, 32]);
    let net = mixed_precision_space(&bb, &with_skip, &mut Rng::new(0)).unwrap();
    assert_eq!(net.size_coefficients().hard(&[0, 0, 0]).unwrap(), 0.0);

    let toy = ResidualBackbone::toy((1, 8, 8), 3);
    assert!(mixed_precision_space(&toy, &with_skip, &mut Rng::new(0)).is_err());
}

#[test]
fn joint_flop_ratio() {
    let bb = ResidualBackbone::toy((1, 8, 8), 3);
    let net = mixed_precision_space(&bb, &PrecisionSpec::Joint(vec![(4, 4), (32, 32)]), &mut Rng::new(0)).unwrap();
    let flop = net.flop_coefficients();
    let r = flop.hard(&[1; 6]).unwrap() / flop.hard(&[0; 6]).unwrap();
    assert_eq!(r, 64.0);
}

/// Direct conv → BN → ReLU → conv → BN → add → ReLU on the tape with the
/// block's own parameters.
fn reference_basic(tape: &mut Tape, store: &ParamStore, b: &CandidateBlock, x: Tensor) -> Tensor {
    let xv = tape.constant(x);
    let mut h = xv;
    for s in &b.body {
        h = match *s {
            Stage::Conv { weight, stride, pad, .. } => {
                let w = tape.constant(store.value(weight).clone());
                tape.conv2d(h, w, stride, pad, 1).unwrap()
            }
            Stage::BatchNorm { gamma, beta, stats, .. } => {
                let g = tape.constant(store.value(gamma).clone());
                let bt = tape.constant(store.value(beta).clone());
                let st = store.stats(stats);
                tape.batchnorm_eval(h, g, bt, &st.mean, &st.var, crate::supernet::BN_EPS).unwrap()
            }
            Stage::Relu => tape.relu(h).unwrap(),
            ref other => panic!("unexpected stage {other:?}"),
        };
    }
    let sum = tape.add(h, xv).unwrap();
    let out = tape.relu(sum).unwrap();
    tape.value(out).clone()
}

#[test]
fn full_precision_block_is_unquantized() {
    let bb = ResidualBackbone {
        input: (2, 6, 6),
        classes: 2,
        stem_channels: 4,
        stages: vec![StageSpec {
            channels: 4,
            blocks: 1,
            stride: 1,
        }],
    };
    let net = mixed_precision_space(&bb, &PrecisionSpec::Joint(vec![(2, 2), (32, 32)]), &mut Rng::new(0)).unwrap();
    let Layer::Searchable { candidates, .. } = &net.layers()[1] else { panic!() };
    let full = &candidates[1];
    assert!(full.body.iter().all(|s| !matches!(s, Stage::ActQuant { .. })));
    let mut rng = Rng::new(2);
    let x = random_tensor(&mut rng, &[2, 4, 6, 6]);
    let want = reference_basic(&mut Tape::new(), net.store(), full, x.clone());
    // run the block alone through the supernet machinery
    let mut store = net.store().clone();
    let mut s = StageBuilder::new(&mut store, &mut rng, "h", (4, 6, 6));
    s.global_avgpool().unwrap();
    let pool = CandidateBlock::new(BlockKey::new("p", (4, 6, 6), 4), s.finish(), Residual::None, vec![], (4, 6, 6), QuantConfig::FULL).unwrap();
    let solo = SuperNet::new(
        (4, 6, 6),
        vec![
            Layer::Fixed {
                name: "b".into(),
                block: full.clone(),
            },
            Layer::Fixed {
                name: "p".into(),
                block: pool,
            },
        ],
        store,
    )
    .unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let f = solo.forward_hard(&mut tape, xv, &[], ForwardOptions::eval()).unwrap();
    // pooled output of the block equals pooled reference
    let mut t2 = Tape::new();
    let r = t2.constant(want);
    let r = t2.global_avgpool(r).unwrap();
    assert_eq!(tape.value(f.logits).data(), t2.value(r).data());
}

#[test]
fn space_file_round_trip() {
    let f = SpaceFile::new(SpaceDef::Fbnet {
        macro_spec: MacroSpec::toy((1, 8, 8), 8, 3, 4),
        micro: vec![MicroBlockSpec::mbconv(1, 3, 1), MicroBlockSpec::Skip],
        width_scale: 1.0,
    });
    let text = f.to_json();
    assert_eq!(SpaceFile::from_json(&text).unwrap(), f);
    assert!(text.contains("\"schema\": 1"));
    let bumped = text.replace("\"schema\": 1", "\"schema\": 2");
    assert!(SpaceFile::from_json(&bumped).is_err());
    let extra = text.replacen("\"schema\": 1", "\"schema\": 1, \"bogus\": 0", 1);
    assert!(SpaceFile::from_json(&extra).is_err());
    let p = SpaceFile::new(SpaceDef::MixedPrecision {
        backbone: ResidualBackbone::toy((1, 8, 8), 4),
        precision: PrecisionSpec::WeightOnly(vec![1, 2, 4, 8, 32]),
    });
    assert_eq!(SpaceFile::from_json(&p.to_json()).unwrap(), p);
}

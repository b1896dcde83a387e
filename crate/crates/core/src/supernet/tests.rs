use super::*;
use crate::quant::QuantConfig;
use crate::testutil::random_tensor;

const INPUT: Shape3 = (2, 4, 4);

fn key(t: &str) -> BlockKey {
    BlockKey::new(t, INPUT, INPUT.0)
}

fn block(store: &mut ParamStore, rng: &mut Rng, name: &str, build: impl FnOnce(&mut StageBuilder) -> Result<()>) -> CandidateBlock {
    let mut b = StageBuilder::new(store, rng, name, INPUT);
    build(&mut b).unwrap();
    CandidateBlock::new(key(name), b.finish(), Residual::None, vec![], INPUT, QuantConfig::FULL).unwrap()
}

fn head(store: &mut ParamStore, rng: &mut Rng) -> Layer {
    let mut b = StageBuilder::new(store, rng, "head", INPUT);
    b.global_avgpool().unwrap().fc(3, 32).unwrap();
    let block = CandidateBlock::new(BlockKey::new("head", INPUT, 3), b.finish(), Residual::None, vec![], INPUT, QuantConfig::FULL).unwrap();
    Layer::Fixed {
        name: "head".into(),
        block,
    }
}

/// One searchable layer {identity, zero map, conv} and a linear head.
fn toy(rng: &mut Rng) -> SuperNet {
    let mut store = ParamStore::new();
    let id = CandidateBlock::identity(key("skip"), INPUT);
    let zero = block(&mut store, rng, "zero", |b| b.scale(0.0).map(|_| ()));
    let conv = block(&mut store, rng, "conv", |b| b.conv(2, 3, 1, 1, 32).map(|_| ()));
    let layers = vec![
        Layer::Searchable {
            name: "l0".into(),
            candidates: vec![id, zero, conv],
            theta: vec![0.0; 3],
        },
        head(&mut store, rng),
    ];
    SuperNet::new(INPUT, layers, store).unwrap()
}

fn logits(net: &SuperNet, x: &Tensor, run: impl FnOnce(&SuperNet, &mut Tape, Var) -> Result<Forward>) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let f = run(net, &mut tape, xv).unwrap();
    tape.value(f.logits).clone()
}

#[test]
fn forced_half_mask_halves_identity() {
    let mut rng = Rng::new(1);
    let net = toy(&mut rng);
    let x = random_tensor(&mut rng, &[2, 2, 4, 4]);
    let half = logits(&net, &x, |n, t, v| n.forward_masks(t, v, &[vec![0.5, 0.5, 0.0]], ForwardOptions::eval()));
    let full = logits(&net, &x, |n, t, v| n.forward_hard(t, v, &[0], ForwardOptions::eval()));
    // the head is linear, so halving its input halves the logits
    for (a, b) in half.data().iter().zip(full.data()) {
        assert!((a - 0.5 * b).abs() < 1e-12);
    }
}

#[test]
fn one_hot_soft_equals_hard() {
    let mut rng = Rng::new(2);
    let net = toy(&mut rng);
    let x = random_tensor(&mut rng, &[3, 2, 4, 4]);
    for i in 0..3 {
        let mut m = vec![0.0; 3];
        m[i] = 1.0;
        for opts in [ForwardOptions::eval(), ForwardOptions::train_theta()] {
            let soft = logits(&net, &x, |n, t, v| n.forward_masks(t, v, &[m.clone()], opts));
            let hard = logits(&net, &x, |n, t, v| n.forward_hard(t, v, &[i], opts));
            assert_eq!(soft, hard);
        }
    }
}

#[test]
fn different_archs_differ() {
    let mut rng = Rng::new(3);
    let net = toy(&mut rng);
    let x = random_tensor(&mut rng, &[2, 2, 4, 4]);
    let a = logits(&net, &x, |n, t, v| n.forward_hard(t, v, &[0], ForwardOptions::eval()));
    let b = logits(&net, &x, |n, t, v| n.forward_hard(t, v, &[2], ForwardOptions::eval()));
    assert!(a.max_abs_diff(&b) > 1e-6);
}

fn theta_grad(net: &SuperNet, x: &Tensor, noise: &[Vec<f64>]) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let f = net.forward_soft(&mut tape, xv, 1.0, noise, ForwardOptions::train_theta()).unwrap();
    let loss = tape.softmax_cross_entropy(f.logits, &[0, 1]).unwrap();
    tape.backward(loss).unwrap().get_or_zero(f.theta[0], 3)
}

#[test]
fn theta_gradient_zero_iff_candidates_agree() {
    let mut rng = Rng::new(4);
    let net = toy(&mut rng);
    let x = random_tensor(&mut rng, &[2, 2, 4, 4]);
    let noise = net.draw_gumbel(&mut rng);
    let g = theta_grad(&net, &x, &noise);
    assert!(g.iter().any(|v| v.abs() > 1e-6), "{g:?}");

    let mut store = ParamStore::new();
    let ids = (0..3).map(|i| CandidateBlock::identity(key(&format!("id{i}")), INPUT)).collect();
    let layers = vec![
        Layer::Searchable {
            name: "l0".into(),
            candidates: ids,
            theta: vec![0.3, -0.2, 0.1],
        },
        head(&mut store, &mut rng),
    ];
    let same = SuperNet::new(INPUT, layers, store).unwrap();
    let g = theta_grad(&same, &x, &noise);
    assert!(g.iter().all(|v| v.abs() < 1e-12), "{g:?}");
}

#[test]
fn theta_gradient_matches_finite_differences() {
    let mut rng = Rng::new(5);
    let mut net = toy(&mut rng);
    net.set_theta(&[vec![0.2, -0.4, 0.1]]).unwrap();
    let x = random_tensor(&mut rng, &[2, 2, 4, 4]);
    let noise = net.draw_gumbel(&mut rng);
    let g = theta_grad(&net, &x, &noise);
    let loss_at = |theta: Vec<f64>| {
        let mut n = net.clone();
        n.set_theta(&[theta]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = n.forward_soft(&mut tape, xv, 1.0, &noise, ForwardOptions::train_theta()).unwrap();
        let l = tape.softmax_cross_entropy(f.logits, &[0, 1]).unwrap();
        tape.value(l).item()
    };
    let base = net.theta()[0].clone();
    for i in 0..3 {
        let (mut p, mut m) = (base.clone(), base.clone());
        p[i] += 1e-5;
        m[i] -= 1e-5;
        let fd = (loss_at(p) - loss_at(m)) / 2e-5;
        assert!((fd - g[i]).abs() < 1e-7 * g[i].abs().max(1.0), "{i}: {fd} vs {}", g[i]);
    }
}

#[test]
fn simplex_and_temperature_limits() {
    let mut rng = Rng::new(6);
    let theta = [0.7, -1.3, 2.2, 0.0];
    for tau in [0.01, 0.1, 1.0, 10.0, 100.0] {
        for _ in 0..200 {
            let m = gumbel_soft_mask(&theta, tau, &mut rng).unwrap();
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    let g: Vec<f64> = (0..4).map(|_| rng.gumbel()).collect();
    let hot = gumbel_softmax(&theta, &g, 1e4).unwrap();
    let spread = hot.iter().cloned().fold(f64::MIN, f64::max) - hot.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 1e-3);
    let cold = gumbel_softmax(&theta, &g, 1e-4).unwrap();
    assert!(cold.iter().cloned().fold(f64::MIN, f64::max) > 1.0 - 1e-3);
}

#[test]
fn sampling_frequencies() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(7);
    let ids: Vec<_> = (0..3).map(|i| CandidateBlock::identity(key(&format!("id{i}")), INPUT)).collect();
    let layers = vec![
        Layer::Searchable {
            name: "l0".into(),
            candidates: ids,
            theta: vec![10.0, 0.0, 0.0],
        },
        head(&mut store, &mut rng),
    ];
    let mut net = SuperNet::new(INPUT, layers, store).unwrap();
    assert_eq!(net.argmax_arch(0).indices(), vec![0]);
    let hits = (0..1000).filter(|_| net.sample_arch(&mut rng).indices()[0] == 0).count();
    assert!(hits > 990);

    net.set_theta(&[vec![0.0; 3]]).unwrap();
    let mut counts = [0usize; 3];
    for _ in 0..10_000 {
        counts[net.sample_arch(&mut rng).indices()[0]] += 1;
    }
    for c in counts {
        assert!((c as f64 / 1e4 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
    }

    let a: Vec<_> = {
        let mut r = Rng::new(99);
        (0..20).map(|_| net.sample_arch(&mut r)).collect()
    };
    let b: Vec<_> = {
        let mut r = Rng::new(99);
        (0..20).map(|_| net.sample_arch(&mut r)).collect()
    };
    assert_eq!(a, b);
}

#[test]
fn construction_checks() {
    let mut rng = Rng::new(8);
    let mut store = ParamStore::new();
    let lone = vec![
        Layer::Searchable {
            name: "l0".into(),
            candidates: vec![CandidateBlock::identity(key("skip"), INPUT)],
            theta: vec![0.0],
        },
        head(&mut store, &mut rng),
    ];
    assert!(SuperNet::new(INPUT, lone, store.clone()).is_err());

    let other = (4, 4, 4);
    let wide = CandidateBlock::identity(BlockKey::new("wide", other, 4), other);
    let mixed = vec![
        Layer::Searchable {
            name: "l0".into(),
            candidates: vec![CandidateBlock::identity(key("skip"), INPUT), wide],
            theta: vec![0.0; 2],
        },
        head(&mut store, &mut rng),
    ];
    assert!(SuperNet::new(INPUT, mixed, store.clone()).is_err());

    let no_head = vec![Layer::Fixed {
        name: "only".into(),
        block: CandidateBlock::identity(key("skip"), INPUT),
    }];
    assert!(SuperNet::new(INPUT, no_head, store).is_err());
}

#[test]
fn arch_json_round_trip() {
    let mut rng = Rng::new(9);
    let net = toy(&mut rng);
    let a = net.sample_arch(&mut rng);
    let back = ArchitectureSample::from_json(&a.to_json()).unwrap();
    assert_eq!(back, a);
    assert_eq!(net.resolve(&back).unwrap(), a.indices());
    let v: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
    assert!(v["layers"][0]["key"].is_string());
    assert!(v["seed"].is_u64());

    let mut forged = a.clone();
    forged.layers[0].key = key("nope");
    assert!(net.resolve(&forged).is_err());
    assert!(net.check_indices(&[3]).is_err());
}

#[test]
fn reinit_changes_weights_deterministically() {
    let mut rng = Rng::new(10);
    let net = toy(&mut rng);
    let a = net.reinitialized(&mut Rng::new(5));
    let b = net.reinitialized(&mut Rng::new(5));
    assert_eq!(a.store().snapshot(), b.store().snapshot());
    assert_ne!(a.store().snapshot(), net.store().snapshot());
}

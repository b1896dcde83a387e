//! Search-loop behaviour seen through the public API.

mod common;

use common::{blob_splits, slow_lut, toy3x3_net};
use dnasforge::engine::{temperature, Checkpoint, LossMode, Search, SearchConfig, SearchSplits};
use dnasforge::supernet::ArchitectureSample;
use proptest::prelude::*;

fn cfg(epochs: usize, warmup: usize, seed: u64) -> SearchConfig {
    SearchConfig {
        epochs,
        warmup: Some(warmup),
        batch_size: 16,
        seed,
        samples_to_draw: 3,
        loss: LossMode::Latency { alpha: 0.2, beta: 0.6 },
        ..SearchConfig::default()
    }
}

#[test]
fn trace_follows_the_temperature_schedule() {
    let net = toy3x3_net(4, 1);
    let lut = slow_lut(&net, "k3_e3");
    let d = blob_splits(48, 8, 4, 8, 0.1, 1);
    let c = cfg(5, 2, 1);
    let mut s = Search::new(net, SearchSplits { w: &d.w, theta: &d.theta }, c.clone(), Some(&lut)).unwrap();
    let start = s.net().theta();
    s.step_epoch().unwrap();
    s.step_epoch().unwrap();
    assert_eq!(s.net().theta(), start, "θ moved during warmup");
    s.run().unwrap();
    assert!(s.is_done());
    assert_ne!(s.net().theta(), start);
    for (i, row) in s.trace().iter().enumerate() {
        assert_eq!(row.epoch, i);
        assert_eq!(row.tau, temperature(i, c.t0, c.eta));
        assert!(row.ce.is_finite() && row.loss.is_finite() && row.expected_cost > 0.0);
    }
}

#[test]
fn checkpoints_survive_json() {
    let net = toy3x3_net(4, 3);
    let lut = slow_lut(&net, "skip");
    let d = blob_splits(48, 8, 4, 8, 0.1, 3);
    let mut s = Search::new(net, SearchSplits { w: &d.w, theta: &d.theta }, cfg(3, 1, 3), Some(&lut)).unwrap();
    s.step_epoch().unwrap();
    s.step_epoch().unwrap();
    let ck = s.checkpoint();
    assert_eq!(ck.epoch, 2);
    assert_eq!(Checkpoint::from_json(&ck.to_json()).unwrap(), ck);
    let mut newer: serde_json::Value = serde_json::from_str(&ck.to_json()).unwrap();
    newer["version"] = serde_json::json!(ck.version + 1);
    assert!(Checkpoint::from_json(&newer.to_string()).is_err());
}

#[test]
fn drawn_samples_resolve_against_the_net() {
    let net = toy3x3_net(4, 5);
    let lut = slow_lut(&net, "k3_e1");
    let d = blob_splits(48, 8, 4, 8, 0.1, 5);
    let mut s = Search::new(net, SearchSplits { w: &d.w, theta: &d.theta }, cfg(2, 1, 5), Some(&lut)).unwrap();
    s.run().unwrap();
    let samples = s.draw_samples();
    assert_eq!(samples.len(), 1 + 3);
    for a in &samples {
        let back = ArchitectureSample::from_json(&a.to_json()).unwrap();
        assert_eq!(&back, a);
        let idx = s.net().resolve(a).unwrap();
        assert_eq!(idx, a.indices());
        assert!(s.net().net_latency(&idx, &lut).unwrap() > 0.0);
    }
}

proptest! {
    #[test]
    fn temperature_decays_from_t0(t0 in 0.1f64..20.0, eta in 0.0f64..1.0, e in 0usize..200) {
        prop_assert_eq!(temperature(0, t0, eta), t0);
        let a = temperature(e, t0, eta);
        let b = temperature(e + 1, t0, eta);
        prop_assert!(b <= a && b > 0.0);
    }
}

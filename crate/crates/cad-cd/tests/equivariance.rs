//! Swap-equivariance and invariance contracts that must hold for any
//! weights, trained or not.

use cad_cd::{
    cd_loss, ChangeDetector, ConcatBaseline, DetectorConfig, InputSpace, PairDownBlock,
    PairUpBlock, SymmetricFusionGate, TemporalPairAttention,
};
use cad_nn::{seeded_rng, Arr, Graph, ParamStore};
use ndarray::IxDyn;
use rand::Rng as _;

fn rand_arr(rng: &mut cad_nn::Rng, shape: &[usize]) -> Arr {
    let n: usize = shape.iter().product();
    Arr::from_shape_vec(
        IxDyn(shape),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn max_abs_diff(a: &Arr, b: &Arr) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn temporal_attention_swap_equivariance_over_many_cases() {
    for case in 0..50 {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1000 + case);
        let att = TemporalPairAttention::new(&mut store, &mut rng, "t", 3);
        let f1 = rand_arr(&mut rng, &[2, 3, 4, 5]);
        let f2 = rand_arr(&mut rng, &[2, 3, 4, 5]);
        let mut g = Graph::eval(&store);
        let a = g.constant(f1.clone());
        let b = g.constant(f2.clone());
        let (o1, o2) = att.forward(&mut g, a, b);
        let (s2, s1) = att.forward(&mut g, b, a);
        assert!(max_abs_diff(g.value(o1), g.value(s1)) <= 1e-6);
        assert!(max_abs_diff(g.value(o2), g.value(s2)) <= 1e-6);
    }
}

#[test]
fn identical_streams_collapse_attention_to_uniform() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(7);
    let att = TemporalPairAttention::new(&mut store, &mut rng, "t", 4);
    let x = rand_arr(&mut rng, &[1, 4, 3, 3]);
    let mut g = Graph::eval(&store);
    let a = g.constant(x.clone());
    let b = g.constant(x.clone());
    let attn = att.attention(&mut g, a, b);
    let v = g.value(attn);
    for i in 0..2 {
        for j in 0..2 {
            assert!((v[[0, i, j]] - 0.5).abs() <= 1e-12);
        }
    }
    let (o1, o2) = att.forward(&mut g, a, b);
    assert_eq!(g.value(o1), g.value(o2));
}

#[test]
fn down_block_equivariance_and_shapes() {
    for case in 0..50 {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(2000 + case);
        let block = PairDownBlock::new(&mut store, &mut rng, "d", 3, 6);
        let f1 = rand_arr(&mut rng, &[1, 3, 8, 8]);
        let f2 = rand_arr(&mut rng, &[1, 3, 8, 8]);
        let mut g = Graph::eval(&store);
        let a = g.constant(f1.clone());
        let b = g.constant(f2.clone());
        let (o1, o2) = block.forward(&mut g, a, b);
        assert_eq!(g.shape(o1), &[1, 6, 4, 4]);
        let (s2, s1) = block.forward(&mut g, b, a);
        assert!(max_abs_diff(g.value(o1), g.value(s1)) <= 1e-6);
        assert!(max_abs_diff(g.value(o2), g.value(s2)) <= 1e-6);
        if case == 0 {
            // weight sharing: identical inputs give identical streams
            let (e1, e2) = block.forward(&mut g, a, a);
            assert_eq!(g.value(e1), g.value(e2));
        }
    }
}

#[test]
fn up_block_equivariance_and_shapes() {
    for case in 0..50 {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(3000 + case);
        let block = PairUpBlock::new(&mut store, &mut rng, "u", 6, 3, 4);
        let f1 = rand_arr(&mut rng, &[1, 6, 4, 4]);
        let f2 = rand_arr(&mut rng, &[1, 6, 4, 4]);
        let s1 = rand_arr(&mut rng, &[1, 3, 8, 8]);
        let s2 = rand_arr(&mut rng, &[1, 3, 8, 8]);
        let mut g = Graph::eval(&store);
        let a = g.constant(f1.clone());
        let b = g.constant(f2.clone());
        let ska = g.constant(s1.clone());
        let skb = g.constant(s2.clone());
        let (o1, o2) = block.forward(&mut g, (a, b), (ska, skb));
        assert_eq!(g.shape(o1), &[1, 4, 8, 8]);
        let (w2, w1) = block.forward(&mut g, (b, a), (skb, ska));
        assert!(max_abs_diff(g.value(o1), g.value(w1)) <= 1e-6);
        assert!(max_abs_diff(g.value(o2), g.value(w2)) <= 1e-6);
        if case == 0 {
            let (e1, e2) = block.forward(&mut g, (a, a), (ska, ska));
            assert_eq!(g.value(e1), g.value(e2));
        }
    }
}

#[test]
fn fusion_gate_is_order_invariant() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(11);
    let gate = SymmetricFusionGate::new(&mut store, &mut rng, "f", 5);
    for _ in 0..20 {
        let z1 = rand_arr(&mut rng, &[2, 5, 6, 6]);
        let z2 = rand_arr(&mut rng, &[2, 5, 6, 6]);
        let mut g = Graph::eval(&store);
        let a = g.constant(z1.clone());
        let b = g.constant(z2.clone());
        let fwd = gate.forward(&mut g, a, b);
        let rev = gate.forward(&mut g, b, a);
        assert!(max_abs_diff(g.value(fwd), g.value(rev)) <= 1e-6);
    }
}

#[test]
fn detector_output_is_order_invariant_for_random_weights() {
    for case in 0..5 {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(4000 + case);
        let det = ChangeDetector::new(
            &mut store,
            &mut rng,
            "cd",
            DetectorConfig::toy(4, InputSpace::Feature),
        )
        .unwrap();
        let a = rand_arr(&mut rng, &[4, 16, 16]);
        let b = rand_arr(&mut rng, &[4, 16, 16]);
        let fwd = det.detect(&store, &a, &b).unwrap();
        let rev = det.detect(&store, &b, &a).unwrap();
        let diff = max_abs_diff(&fwd.prob, &rev.prob);
        assert!(diff <= 1e-6, "case {case}: diff {diff}");
        // on a single platform the eval path is in fact bit-exact
        assert_eq!(fwd.prob, rev.prob);
        assert_eq!(fwd.prob.shape(), &[32, 32]);
        assert!(fwd.prob.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn pixel_mode_detector_is_also_invariant() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(5000);
    let det = ChangeDetector::new(
        &mut store,
        &mut rng,
        "cd",
        DetectorConfig::toy(4, InputSpace::Pixel),
    )
    .unwrap();
    let a = rand_arr(&mut rng, &[3, 32, 32]).mapv(|v| 0.5 + 0.4 * v);
    let b = rand_arr(&mut rng, &[3, 32, 32]).mapv(|v| 0.5 + 0.4 * v);
    let fwd = det.detect(&store, &a, &b).unwrap();
    let rev = det.detect(&store, &b, &a).unwrap();
    assert_eq!(fwd.prob, rev.prob);
    assert_eq!(fwd.prob.shape(), &[32, 32]);
}

#[test]
fn gradient_is_symmetric_under_input_swap() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(6000);
    let det = ChangeDetector::new(
        &mut store,
        &mut rng,
        "cd",
        DetectorConfig::toy(4, InputSpace::Feature),
    )
    .unwrap();
    let a = rand_arr(&mut rng, &[1, 4, 8, 8]);
    let b = rand_arr(&mut rng, &[1, 4, 8, 8]);
    let gt = rand_arr(&mut rng, &[1, 1, 16, 16]).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });

    let grads_for = |first: &Arr, second: &Arr| {
        let mut g = Graph::train(&store);
        let ia = g.constant(first.clone());
        let ib = g.constant(second.clone());
        let it = g.constant(gt.clone());
        let prob = det.forward(&mut g, ia, ib).unwrap();
        let loss = cd_loss(&mut g, prob, it).unwrap();
        let grads = g.backward(loss);
        g.param_grads(&grads)
    };
    let gab = grads_for(&a, &b);
    let gba = grads_for(&b, &a);
    assert_eq!(gab.len(), gba.len());
    for (k, va) in &gab {
        let vb = &gba[k];
        for (x, y) in va.iter().zip(vb.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            assert!(
                (x - y).abs() / denom <= 1e-5,
                "param {k}: {x} vs {y}"
            );
        }
    }
}

#[test]
fn baseline_is_order_sensitive() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(7000);
    let baseline = ConcatBaseline::new(&mut store, &mut rng, "bl", 3, 8);
    let a = rand_arr(&mut rng, &[3, 16, 16]);
    let b = rand_arr(&mut rng, &[3, 16, 16]);
    let fwd = baseline.detect(&store, &a, &b).unwrap();
    let rev = baseline.detect(&store, &b, &a).unwrap();
    assert!(
        max_abs_diff(&fwd.prob, &rev.prob) > 1e-6,
        "concat baseline should not be order-invariant"
    );
}

#[test]
fn pre_fusion_streams_are_exactly_permuted() {
    // run the trunk up to the refinement stage in both orders and check
    // the refined feature streams swap exactly
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(8000);
    let block = PairDownBlock::new(&mut store, &mut rng, "d", 3, 4);
    let refine = cad_cd::RefineBlock::new(&mut store, &mut rng, "r", 4);
    let f1 = rand_arr(&mut rng, &[1, 3, 8, 8]);
    let f2 = rand_arr(&mut rng, &[1, 3, 8, 8]);
    let mut g = Graph::eval(&store);
    let a = g.constant(f1.clone());
    let b = g.constant(f2.clone());
    let (d1, d2) = block.forward(&mut g, a, b);
    let r1 = refine.forward(&mut g, d1);
    let r2 = refine.forward(&mut g, d2);
    let (e2, e1) = block.forward(&mut g, b, a);
    let s1 = refine.forward(&mut g, e1);
    let s2 = refine.forward(&mut g, e2);
    assert_eq!(g.value(r1), g.value(s1));
    assert_eq!(g.value(r2), g.value(s2));
}

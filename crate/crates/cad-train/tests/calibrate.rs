//! Manual calibration runs (ignored by default; used to pick the toy
//! presets). Run with: cargo test -p cad-train --test calibrate -- --ignored --nocapture

use cad_data::{DistortionSpec, ToyDataset, ToyDatasetSpec};
use cad_train::{run_stage, Stage, StageConfig, SystemConfig};
use std::time::Instant;

fn dataset() -> ToyDataset {
    ToyDataset::generate(&ToyDatasetSpec {
        num_pairs: 64,
        image_size: 64,
        seed: 2024,
        distortion: DistortionSpec::toy(),
        ..Default::default()
    })
    .unwrap()
}

#[test]
#[ignore]
fn calibrate_compression() {
    let data = dataset();
    for lambda in [0.01, 0.05, 0.25] {
        let sys = SystemConfig::toy(lambda, 0);
        let cfg = StageConfig::toy(Stage::PretrainCompression, lambda, 1);
        let t0 = Instant::now();
        let out = run_stage(&cfg, &sys, &[], &data).unwrap();
        let last = out.report.epochs.last().unwrap();
        println!(
            "lambda={lambda}: {:?} val={:?} elapsed={:.1}s steps={}",
            last.components,
            last.validation,
            t0.elapsed().as_secs_f64(),
            out.report.step_losses.len(),
        );
    }
}

#[test]
#[ignore]
fn calibrate_registration() {
    let data = dataset();
    let sys = SystemConfig::toy(0.01, 0);
    let cfg = StageConfig::toy(Stage::PretrainRegistration, 0.0, 2);
    let t0 = Instant::now();
    let out = run_stage(&cfg, &sys, &[], &data).unwrap();
    for e in out.report.epochs.iter().filter(|e| e.validation.is_some()) {
        println!("epoch {}: loss={:.5} val={:?}", e.epoch, e.mean_loss, e.validation);
    }
    println!("elapsed={:.1}s", t0.elapsed().as_secs_f64());
}

#[test]
#[ignore]
fn calibrate_cd() {
    let data = dataset();
    let sys = SystemConfig::toy(0.01, 0);
    let cfg = StageConfig::toy(Stage::PretrainCd, 0.0, 3);
    let t0 = Instant::now();
    let out = run_stage(&cfg, &sys, &[], &data).unwrap();
    for e in out.report.epochs.iter().filter(|e| e.validation.is_some()) {
        println!("epoch {}: loss={:.5} val={:?}", e.epoch, e.mean_loss, e.validation);
    }
    println!("elapsed={:.1}s", t0.elapsed().as_secs_f64());
}

/// Supervised probe: can the cascade regress geometry at all when given a
/// direct corner loss? Separates architecture capacity from the
/// photometric objective.
#[test]
#[ignore]
fn calibrate_supervised_probe() {
    use cad_nn::optim::{Adam, AdamConfig};
    use cad_nn::{seeded_rng, Arr, Graph};
    use cad_train::forward::batch_arrays;
    use cad_train::{ModelBundle, Stage};
    use cad_data::{apply_distortion, sample_transform};
    use rand::Rng as _;
    use ndarray::IxDyn;

    let data = dataset();
    let sys = SystemConfig::toy(0.01, 0);
    let bundle = {
        let mut b = ModelBundle::for_stage(Stage::PretrainRegistration, &sys, 0xC0DE ^ 2).unwrap();
        b.lineage.clear();
        b
    };
    let mut bundle = bundle;
    let mut rng = seeded_rng(77);
    let mut adam = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() });
    let spec = DistortionSpec::toy();
    let f = sys.codec.tap_channels;
    let corners: [(f64, f64); 4] = [(0.0, 0.0), (63.0, 0.0), (0.0, 63.0), (63.0, 63.0)];
    for step in 0..600 {
        let idx: Vec<usize> = (0..8).map(|_| rng.random_range(0..24)).collect();
        let refs: Vec<&Arr> = idx.iter().map(|&i| &data.pairs[i].x1.data).collect();
        let mut movs = Vec::new();
        let mut targets = Vec::new();
        for &i in &idx {
            let h = sample_transform(&spec, &mut rng, (64, 64)).unwrap();
            let (m, _) = apply_distortion(&data.pairs[i].x1.data, &h).unwrap();
            movs.push(m);
            targets.push(h.inverse().unwrap());
        }
        let mrefs: Vec<&Arr> = movs.iter().collect();
        let mut g = Graph::train(&bundle.store);
        let a = g.constant(batch_arrays(&refs));
        let b = g.constant(batch_arrays(&mrefs));
        let z1 = cad_reg::pixel_tap(&mut g, a, f);
        let z2 = cad_reg::pixel_tap(&mut g, b, f);
        let out = bundle.reg.as_ref().unwrap().register(&mut g, a, b, z2, z1).unwrap();
        let h_full = cad_reg::rescale_node(&mut g, out.h_feat_node, 2.0);
        // corner transfer in-graph
        let mut cmat = Arr::zeros(IxDyn(&[8, 3, 4]));
        let mut tmat = Arr::zeros(IxDyn(&[8, 2, 4]));
        for n in 0..8 {
            for (k, &(x, y)) in corners.iter().enumerate() {
                cmat[[n, 0, k]] = x;
                cmat[[n, 1, k]] = y;
                cmat[[n, 2, k]] = 1.0;
                let (tx, ty) = targets[n].apply(x, y);
                tmat[[n, 0, k]] = tx / 32.0;
                tmat[[n, 1, k]] = ty / 32.0;
            }
        }
        let c = g.constant(cmat);
        let proj = g.bmm(h_full, c); // (8,3,4)
        let xy = g.narrow(proj, 1, 0, 2);
        let wrow = g.narrow(proj, 1, 2, 1);
        let pred = g.div(xy, wrow);
        let pred = g.scale(pred, 1.0 / 32.0);
        let t = g.constant(tmat);
        let d = g.sub(pred, t);
        let sq = g.square(d);
        let loss = g.mean_all(sq);
        let lv = g.scalar(loss);
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads);
        let buf = g.take_buffer_updates();
        drop(g);
        adam.step(&mut bundle.store, &pg);
        for (pid, v) in buf { bundle.store.set_value(pid, v); }
        if step % 100 == 0 || step == 599 {
            // corner error in px: sqrt(loss)*32 is a rough scalar proxy
            println!("step {step}: corner-mse-loss {lv:.6} (~{:.2} px rms)", (lv.sqrt() * 32.0));
        }
    }
}

#[test]
#[ignore]
fn calibrate_overfit_single_pair() {
    use cad_nn::optim::{Adam, AdamConfig};
    use cad_nn::{seeded_rng, Arr, Graph};
    use cad_train::forward::batch_arrays;
    use cad_train::{ModelBundle, Stage};
    use cad_data::{apply_distortion, sample_transform};
    use ndarray::IxDyn;

    let data = dataset();
    let sys = SystemConfig::toy(0.01, 0);
    let mut bundle = ModelBundle::for_stage(Stage::PretrainRegistration, &sys, 0xC0DE ^ 2).unwrap();
    let mut rng = seeded_rng(5);
    let spec = DistortionSpec::toy();
    let h_gt = sample_transform(&spec, &mut rng, (64, 64)).unwrap();
    let (mov, _) = apply_distortion(&data.pairs[0].x1.data, &h_gt).unwrap();
    let target = h_gt.inverse().unwrap();
    let f = sys.codec.tap_channels;
    let corners: [(f64, f64); 4] = [(0.0, 0.0), (63.0, 0.0), (0.0, 63.0), (63.0, 63.0)];
    let mut adam = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() });
    for step in 0..400 {
        let mut g = Graph::train(&bundle.store);
        let a = g.constant(batch_arrays(&[&data.pairs[0].x1.data]));
        let b = g.constant(batch_arrays(&[&mov]));
        let z1 = cad_reg::pixel_tap(&mut g, a, f);
        let z2 = cad_reg::pixel_tap(&mut g, b, f);
        let out = bundle.reg.as_ref().unwrap().register(&mut g, a, b, z2, z1).unwrap();
        let h_full = cad_reg::rescale_node(&mut g, out.h_feat_node, 2.0);
        let mut cmat = Arr::zeros(IxDyn(&[1, 3, 4]));
        let mut tmat = Arr::zeros(IxDyn(&[1, 2, 4]));
        for (k, &(x, y)) in corners.iter().enumerate() {
            cmat[[0, 0, k]] = x;
            cmat[[0, 1, k]] = y;
            cmat[[0, 2, k]] = 1.0;
            let (tx, ty) = target.apply(x, y);
            tmat[[0, 0, k]] = tx / 32.0;
            tmat[[0, 1, k]] = ty / 32.0;
        }
        let c = g.constant(cmat);
        let proj = g.bmm(h_full, c);
        let xy = g.narrow(proj, 1, 0, 2);
        let wrow = g.narrow(proj, 1, 2, 1);
        let pred = g.div(xy, wrow);
        let pred = g.scale(pred, 1.0 / 32.0);
        let t = g.constant(tmat);
        let d = g.sub(pred, t);
        let sq = g.square(d);
        let loss = g.mean_all(sq);
        let lv = g.scalar(loss);
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads);
        let buf = g.take_buffer_updates();
        drop(g);
        adam.step(&mut bundle.store, &pg);
        for (pid, v) in buf { bundle.store.set_value(pid, v); }
        if step % 50 == 0 || step == 399 {
            println!("step {step}: loss {lv:.8} (~{:.3} px rms)", lv.sqrt() * 32.0);
        }
    }
}

//! The staged training loops.

use std::collections::BTreeMap;

use cad_data::{sample_transform, ToyDataset};
use cad_nn::optim::{Adam, AdamConfig};
use cad_nn::{seeded_rng, Arr, Graph};
use cad_reg::Homography;
use rand::Rng as _;

use crate::bundle::{check_prerequisites, ModelBundle};
use crate::checkpoint::{Checkpoint, LineageRecord, RngState};
use crate::config::{Stage, StageConfig, SystemConfig};
use crate::forward::{
    batch_arrays, batch_masks, cd_step, compression_step, end_to_end_step, eval_end_to_end,
    eval_joint, joint_step, registration_step,
};
use crate::{Result, TrainError};

pub const REG_ALPHAS: (f64, f64, f64) = (0.5, 0.3, 0.2);

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub components: BTreeMap<String, f64>,
    pub validation: Option<BTreeMap<String, f64>>,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    pub aborted_nan: bool,
    pub final_metrics: BTreeMap<String, f64>,
    pub best_metrics: Option<BTreeMap<String, f64>>,
}

pub struct StageOutput {
    pub last: Checkpoint,
    /// Best-validation-F1 weights, for stages that track F1.
    pub best: Option<Checkpoint>,
    pub report: StageReport,
}

/// Tiny confusion counter for in-training validation. The public metric
/// implementation lives in the evaluation crate; this private copy keeps
/// the dependency graph acyclic.
#[derive(Default, Clone, Copy)]
struct Confusion {
    tp: u64,
    fp: u64,
    fn_: u64,
}

impl Confusion {
    fn add(&mut self, prob: &Arr, gt: &Arr, threshold: f64) {
        for (p, t) in prob.iter().zip(gt.iter()) {
            let pred = *p >= threshold;
            let truth = *t >= 0.5;
            match (pred, truth) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => {}
            }
        }
    }

    fn f1(&self) -> f64 {
        if self.tp == 0 && self.fp == 0 && self.fn_ == 0 {
            return 1.0;
        }
        if self.tp == 0 {
            return 0.0;
        }
        let p = self.tp as f64 / (self.tp + self.fp) as f64;
        let r = self.tp as f64 / (self.tp + self.fn_) as f64;
        2.0 * p * r / (p + r)
    }
}

/// Run one training stage from fresh initialization plus any prerequisite
/// checkpoints, per the staged procedure.
pub fn run_stage(
    cfg: &StageConfig,
    sys: &SystemConfig,
    prereqs: &[&Checkpoint],
    data: &ToyDataset,
) -> Result<StageOutput> {
    cfg.validate()?;
    check_prerequisites(cfg.stage, prereqs)?;
    let mut bundle = ModelBundle::for_stage(cfg.stage, sys, cfg.seed ^ 0xC0DE)?;
    for ckpt in prereqs {
        bundle.load_checkpoint(ckpt)?;
    }
    train_loop(cfg, bundle, data)
}

/// End-to-end training from random initialization: the comparison arm for
/// the pretraining-effectiveness study. Same schedule, no warm start.
pub fn train_from_scratch_baseline(
    cfg: &StageConfig,
    sys: &SystemConfig,
    data: &ToyDataset,
) -> Result<StageOutput> {
    if cfg.stage != Stage::EndToEnd {
        return Err(TrainError::InvalidConfig(
            "the scratch baseline is an end-to-end run".into(),
        ));
    }
    cfg.validate()?;
    let bundle = ModelBundle::for_stage(Stage::EndToEnd, sys, cfg.seed ^ 0xC0DE)?;
    train_loop(cfg, bundle, data)
}

fn train_loop(cfg: &StageConfig, mut bundle: ModelBundle, data: &ToyDataset) -> Result<StageOutput> {
    let (train_idx, val_idx, _) = default_split(data);
    if train_idx.is_empty() {
        return Err(TrainError::InvalidConfig("no training pairs".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg
            .learning_rates
            .get("")
            .copied()
            .unwrap_or(1e-3),
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    for (prefix, lr) in &cfg.learning_rates {
        if !prefix.is_empty() {
            adam.set_group_lr(prefix.clone(), *lr);
        }
    }

    let mut report = StageReport {
        stage: cfg.stage,
        step_losses: Vec::new(),
        epochs: Vec::new(),
        aborted_nan: false,
        final_metrics: BTreeMap::new(),
        best_metrics: None,
    };
    let mut snapshot = bundle.store.export();
    let mut best: Option<(f64, Vec<(String, bool, Arr)>, BTreeMap<String, f64>)> = None;

    'epochs: for epoch in 0..cfg.epochs {
        if let Some(s) = cfg.lr_schedule {
            adam.set_lr_scale(if epoch >= s.step_epoch { s.gamma } else { 1.0 });
        }
        let order = shuffled(&train_idx, &mut rng);
        let mut epoch_losses = Vec::new();
        let mut comp_acc: BTreeMap<String, f64> = BTreeMap::new();
        let mut comp_n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss_value, comps, grads, buffers) =
                run_one_step(cfg, &bundle, data, chunk, epoch, &mut rng)?;
            if !loss_value.is_finite() {
                // restore the last epoch snapshot and stop
                restore(&mut bundle, &snapshot);
                report.aborted_nan = true;
                report
                    .final_metrics
                    .insert("aborted_at_epoch".into(), epoch as f64);
                break 'epochs;
            }
            report.step_losses.push(loss_value);
            epoch_losses.push(loss_value);
            for (k, v) in comps {
                *comp_acc.entry(k).or_insert(0.0) += v;
            }
            comp_n += 1;
            adam.step(&mut bundle.store, &grads);
            for (pid, value) in buffers {
                bundle.store.set_value(pid, value);
            }
        }
        let mean_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        let components: BTreeMap<String, f64> = comp_acc
            .into_iter()
            .map(|(k, v)| (k, v / comp_n.max(1) as f64))
            .collect();

        let validation = if (epoch + 1) % cfg.validate_every == 0 || epoch + 1 == cfg.epochs {
            let metrics = validate(cfg, &bundle, data, &val_idx, epoch as u64)?;
            if let Some(f1) = metrics.get("f1") {
                let better = best.as_ref().map_or(true, |(b, _, _)| f1 > b);
                if better {
                    best = Some((*f1, bundle.store.export(), metrics.clone()));
                }
            }
            Some(metrics)
        } else {
            None
        };
        report.epochs.push(EpochLog {
            epoch,
            mean_loss,
            components,
            validation,
        });
        snapshot = bundle.store.export();
    }

    if let Some(last) = report.epochs.last() {
        report.final_metrics.insert("loss".into(), last.mean_loss);
        if let Some(v) = &last.validation {
            for (k, val) in v {
                report.final_metrics.insert(format!("val_{k}"), *val);
            }
        }
    }

    bundle.lineage.push(LineageRecord {
        stage: cfg.stage,
        seed: cfg.seed,
        epochs: cfg.epochs,
        final_loss: report.final_metrics.get("loss").copied(),
    });
    let rng_state = RngState {
        algo: "chacha8".into(),
        seed: cfg.seed,
        word_pos: rng.get_word_pos().to_string(),
    };
    let last = bundle.to_checkpoint(cfg.stage, rng_state.clone(), report.final_metrics.clone());
    let best_ckpt = best.map(|(_, tensors, metrics)| {
        restore(&mut bundle, &tensors);
        report.best_metrics = Some(metrics.clone());
        bundle.to_checkpoint(cfg.stage, rng_state, metrics)
    });
    Ok(StageOutput {
        last,
        best: best_ckpt,
        report,
    })
}

pub fn default_split(data: &ToyDataset) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let n = data.len();
    let test = (n / 5).max(1);
    let val = (n / 5).max(1);
    let train = n.saturating_sub(test + val).max(1);
    data.split(train, val)
}

fn shuffled(indices: &[usize], rng: &mut cad_nn::Rng) -> Vec<usize> {
    let mut v = indices.to_vec();
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v
}

fn restore(bundle: &mut ModelBundle, tensors: &[(String, bool, Arr)]) {
    let items: Vec<(String, Arr)> = tensors
        .iter()
        .map(|(n, _, a)| (n.clone(), a.clone()))
        .collect();
    let missing = bundle.store.import(&items);
    debug_assert!(missing.is_empty());
}

type StepOut = (
    f64,
    BTreeMap<String, f64>,
    std::collections::HashMap<usize, Arr>,
    Vec<(cad_nn::ParamId, Arr)>,
);

fn run_one_step(
    cfg: &StageConfig,
    bundle: &ModelBundle,
    data: &ToyDataset,
    chunk: &[usize],
    epoch: usize,
    rng: &mut cad_nn::Rng,
) -> Result<StepOut> {
    let mut g = Graph::train(&bundle.store);
    let mut comps = BTreeMap::new();
    let loss_node = match cfg.stage {
        Stage::PretrainCompression => {
            // both acquisitions feed the image pool, alternating per slot
            let mut imgs: Vec<&Arr> = Vec::new();
            for (slot, &i) in chunk.iter().enumerate() {
                if (slot + epoch) % 2 == 0 {
                    imgs.push(&data.pairs[i].x1.data);
                } else {
                    imgs.push(&data.pairs[i].x2_clean.data);
                }
            }
            let x = batch_arrays(&imgs);
            let step = compression_step(bundle, &mut g, x, cfg.lambda, rng)?;
            comps.insert("mse".into(), step.mse);
            comps.insert("bpp".into(), step.bpp);
            step.loss
        }
        Stage::PretrainRegistration => {
            // self-pairs streamed from the scene generator: distort each
            // fresh reference image, regress the transform back
            let mut scenes = Vec::new();
            for _ in chunk {
                let virtual_index = 1_000_000 + rng.random_range(0..1_000_000u64) as usize;
                let scene = cad_data::render_reference(&data.spec, virtual_index)
                    .map_err(|e| TrainError::Forward(e.to_string()))?;
                scenes.push(scene.data);
            }
            let mut moving = Vec::new();
            for scene in &scenes {
                let dims = (scene.shape()[1], scene.shape()[2]);
                let h = sample_transform(&cfg.distortion, rng, dims)
                    .map_err(|e| TrainError::Forward(e.to_string()))?;
                let (m, _) = cad_data::apply_distortion(scene, &h)
                    .map_err(|e| TrainError::Forward(e.to_string()))?;
                moving.push(m);
            }
            let refs: Vec<&Arr> = scenes.iter().collect();
            let mrefs: Vec<&Arr> = moving.iter().collect();
            let step = registration_step(
                bundle,
                &mut g,
                batch_arrays(&refs),
                batch_arrays(&mrefs),
                REG_ALPHAS,
            )?;
            step.loss
        }
        Stage::PretrainCd => {
            // aligned pairs, no distortions
            let x1: Vec<&Arr> = chunk.iter().map(|&i| &data.pairs[i].x1.data).collect();
            let x2: Vec<&Arr> = chunk
                .iter()
                .map(|&i| &data.pairs[i].x2_clean.data)
                .collect();
            let gts: Vec<&Arr> = chunk.iter().map(|&i| &data.pairs[i].change).collect();
            let step = cd_step(
                bundle,
                &mut g,
                batch_arrays(&x1),
                batch_arrays(&x2),
                batch_masks(&gts),
            )?;
            step.loss
        }
        Stage::JointRegCd | Stage::EndToEnd => {
            let x1: Vec<&Arr> = chunk.iter().map(|&i| &data.pairs[i].x1.data).collect();
            let mut distorted = Vec::new();
            for &i in chunk {
                let pair = &data.pairs[i];
                let dims = (pair.x1.height(), pair.x1.width());
                let h = sample_transform(&cfg.distortion, rng, dims)
                    .map_err(|e| TrainError::Forward(e.to_string()))?;
                let (m, _) = cad_data::apply_distortion(&pair.x2_clean.data, &h)
                    .map_err(|e| TrainError::Forward(e.to_string()))?;
                distorted.push(m);
            }
            let x2: Vec<&Arr> = distorted.iter().collect();
            let gts: Vec<&Arr> = chunk.iter().map(|&i| &data.pairs[i].change).collect();
            let step = if cfg.stage == Stage::JointRegCd {
                joint_step(
                    bundle,
                    &mut g,
                    batch_arrays(&x1),
                    batch_arrays(&x2),
                    batch_masks(&gts),
                    cfg.alpha,
                    REG_ALPHAS,
                )?
            } else {
                end_to_end_step(
                    bundle,
                    &mut g,
                    batch_arrays(&x1),
                    batch_arrays(&x2),
                    batch_masks(&gts),
                    cfg.alpha,
                    cfg.lambda,
                    REG_ALPHAS,
                    rng,
                )?
            };
            comps.insert("l_cd".into(), step.l_cd);
            comps.insert("l_reg".into(), step.l_reg);
            comps.insert("bpp".into(), step.bpp);
            step.loss
        }
    };
    let _ = epoch;
    let loss_value = g.scalar(loss_node);
    let grads = g.backward(loss_node);
    let pg = g.param_grads(&grads);
    let buffers = g.take_buffer_updates();
    Ok((loss_value, comps, pg, buffers))
}

/// Stage-appropriate validation metrics on the held-out split.
fn validate(
    cfg: &StageConfig,
    bundle: &ModelBundle,
    data: &ToyDataset,
    val_idx: &[usize],
    epoch: u64,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    match cfg.stage {
        Stage::PretrainCompression => {
            let codec = bundle.codec.as_ref().unwrap();
            let mut mse = 0.0;
            let mut bpp = 0.0;
            let mut rng = seeded_rng(0);
            for &i in val_idx {
                let img = &data.pairs[i].x1;
                let lat = codec
                    .encode(&bundle.store, img)
                    .map_err(|e| TrainError::Forward(e.to_string()))?;
                let q = codec.quantize(&lat, cad_codec::QuantizeMode::Eval, &mut rng);
                let bits = codec
                    .estimate_rate(&bundle.store, &q)
                    .map_err(|e| TrainError::Forward(e.to_string()))?;
                let (recon, _) = codec
                    .decode(&bundle.store, &q, &img.tile_id, img.timestamp)
                    .map_err(|e| TrainError::Forward(e.to_string()))?;
                let d = (&recon.data - &img.data).mapv(|v| v * v).mean().unwrap();
                mse += d;
                bpp += bits / (img.height() * img.width()) as f64;
            }
            out.insert("mse".into(), mse / val_idx.len() as f64);
            out.insert("bpp".into(), bpp / val_idx.len() as f64);
        }
        Stage::PretrainRegistration => {
            let (corner, identity_baseline) = validate_registration(cfg, bundle, data, val_idx, epoch)?;
            out.insert("corner_error".into(), corner);
            out.insert("identity_corner_error".into(), identity_baseline);
        }
        Stage::PretrainCd => {
            let cd = bundle.cd.as_ref().unwrap();
            let mut conf = Confusion::default();
            for &i in val_idx {
                let pair = &data.pairs[i];
                let map = cd
                    .detect(&bundle.store, &pair.x1.data, &pair.x2_clean.data)
                    .map_err(|e| TrainError::Forward(e.to_string()))?;
                conf.add(&map.prob, &pair.change, cd.cfg.threshold);
            }
            out.insert("f1".into(), conf.f1());
        }
        Stage::JointRegCd | Stage::EndToEnd => {
            let mut conf = Confusion::default();
            let mut corner = 0.0;
            let mut bpp = 0.0;
            for &i in val_idx {
                let pair = &data.pairs[i];
                let (x2d, h_gt, _) = pair
                    .distort_with(&cfg.distortion, 0x5EED ^ epoch)
                    .map_err(|e| TrainError::Forward(e.to_string()))?;
                let outcome = if cfg.stage == Stage::EndToEnd {
                    eval_end_to_end(bundle, &pair.x1, &x2d)?
                } else {
                    eval_joint(bundle, &pair.x1, &x2d)?
                };
                let dims = (pair.x1.height(), pair.x1.width());
                let target = h_gt
                    .inverse()
                    .map_err(|e| TrainError::Forward(e.to_string()))?;
                corner += outcome.h_full.corner_error(&target, dims);
                bpp += outcome.bpp;
                let threshold = bundle.cd.as_ref().unwrap().cfg.threshold;
                conf.add(&outcome.prob, &pair.change, threshold);
            }
            out.insert("f1".into(), conf.f1());
            out.insert("corner_error".into(), corner / val_idx.len() as f64);
            if cfg.stage == Stage::EndToEnd {
                out.insert("bpp".into(), bpp / val_idx.len() as f64);
            }
        }
    }
    Ok(out)
}

/// Mean corner error of the composed map against the ground-truth inverse,
/// plus the do-nothing baseline, over the validation pairs.
pub fn validate_registration(
    cfg: &StageConfig,
    bundle: &ModelBundle,
    data: &ToyDataset,
    val_idx: &[usize],
    seed: u64,
) -> Result<(f64, f64)> {
    let reg = bundle.reg.as_ref().unwrap();
    let f = bundle.sys.codec.tap_channels;
    let mut corner = 0.0;
    let mut baseline = 0.0;
    for &i in val_idx {
        let pair = &data.pairs[i];
        // solo protocol: self-pairs (distort the reference itself)
        let dims = (pair.x1.height(), pair.x1.width());
        let mut rng = seeded_rng(cad_data::splitmix64((0xA11A ^ seed) ^ pair.seed));
        let h_gt = sample_transform(&cfg.distortion, &mut rng, dims)
            .map_err(|e| TrainError::Forward(e.to_string()))?;
        let (x2d, _) = cad_data::apply_distortion(&pair.x1.data, &h_gt)
            .map_err(|e| TrainError::Forward(e.to_string()))?;
        let mut g = Graph::eval(&bundle.store);
        let a = g.constant(batch_arrays(&[&pair.x1.data]));
        let b = g.constant(batch_arrays(&[&x2d]));
        let z1 = cad_reg::pixel_tap(&mut g, a, f);
        let z2 = cad_reg::pixel_tap(&mut g, b, f);
        let out = reg
            .register(&mut g, a, b, z2, z1)
            .map_err(|e| TrainError::Forward(e.to_string()))?;
        let target = h_gt
            .inverse()
            .map_err(|e| TrainError::Forward(e.to_string()))?;
        corner += out.h_full[0].corner_error(&target, dims);
        baseline += Homography::identity().corner_error(&target, dims);
    }
    let n = val_idx.len() as f64;
    Ok((corner / n, baseline / n))
}


//! Model assembly per stage, plus weight transfer from checkpoints.

use std::collections::BTreeMap;

use cad_cd::{ChangeDetector, InputSpace};
use cad_codec::Codec;
use cad_nn::{seeded_rng, ParamStore};
use cad_reg::CascadeRegistrar;

use crate::checkpoint::{decode_tensor, encode_tensor, Checkpoint, LineageRecord, RngState};
use crate::config::{Stage, SystemConfig};
use crate::{Result, TrainError};

pub struct ModelBundle {
    pub store: ParamStore,
    pub sys: SystemConfig,
    pub stage: Stage,
    pub codec: Option<Codec>,
    pub reg: Option<CascadeRegistrar>,
    pub cd: Option<ChangeDetector>,
    pub lineage: Vec<LineageRecord>,
}

impl ModelBundle {
    /// Fresh initialization of exactly the sub-models the stage touches.
    /// The end-to-end bundle holds everything; pixel-space stages build the
    /// detector with its two stem layers, the end-to-end stage without.
    pub fn for_stage(stage: Stage, sys: &SystemConfig, init_seed: u64) -> Result<ModelBundle> {
        sys.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(init_seed);
        let codec = match stage {
            Stage::PretrainCompression | Stage::EndToEnd => Some(Codec::new(
                &mut store,
                &mut rng,
                "codec",
                sys.codec.clone(),
            )),
            _ => None,
        };
        let reg = match stage {
            Stage::PretrainRegistration | Stage::JointRegCd | Stage::EndToEnd => {
                Some(
                    CascadeRegistrar::new(
                        &mut store,
                        &mut rng,
                        "reg",
                        sys.codec.channels,
                        sys.codec.tap_channels,
                        sys.reg.clone(),
                    )
                    .map_err(|e| TrainError::InvalidConfig(e.to_string()))?,
                )
            }
            _ => None,
        };
        let cd = match stage {
            Stage::PretrainCd | Stage::JointRegCd | Stage::EndToEnd => {
                let mut cfg = sys.cd.clone();
                cfg.input_space = if stage == Stage::EndToEnd {
                    InputSpace::Feature
                } else {
                    InputSpace::Pixel
                };
                Some(
                    ChangeDetector::new(&mut store, &mut rng, "cd", cfg)
                        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?,
                )
            }
            _ => None,
        };
        Ok(ModelBundle {
            store,
            sys: sys.clone(),
            stage,
            codec,
            reg,
            cd,
            lineage: Vec::new(),
        })
    }

    /// Overwrite matching weights by name. Names the bundle does not know
    /// (e.g. the pixel stem when loading into the end-to-end model) are
    /// skipped and reported.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<Vec<String>> {
        let mut tensors = Vec::new();
        for (name, blob) in &ckpt.tensors {
            tensors.push((name.clone(), decode_tensor(blob)?));
        }
        let skipped = self.store.import(&tensors);
        for rec in &ckpt.lineage {
            if !self.lineage.iter().any(|l| l.stage == rec.stage) {
                self.lineage.push(rec.clone());
            }
        }
        if !self.lineage.iter().any(|l| l.stage == ckpt.stage) {
            self.lineage.push(LineageRecord {
                stage: ckpt.stage,
                seed: ckpt.rng.seed,
                epochs: 0,
                final_loss: None,
            });
        }
        Ok(skipped)
    }

    pub fn to_checkpoint(
        &self,
        stage: Stage,
        rng: RngState,
        metrics: BTreeMap<String, f64>,
    ) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (name, trainable, value) in self.store.export() {
            tensors.insert(name, encode_tensor(&value, trainable));
        }
        Checkpoint {
            format: crate::checkpoint::FORMAT.to_string(),
            stage,
            system: self.sys.clone(),
            lineage: self.lineage.clone(),
            rng,
            metrics,
            tensors,
        }
    }
}

/// Prerequisite validation per stage.
pub fn check_prerequisites(stage: Stage, prereqs: &[&Checkpoint]) -> Result<()> {
    let need: &[Stage] = match stage {
        Stage::JointRegCd => &[Stage::PretrainRegistration, Stage::PretrainCd],
        Stage::EndToEnd => &[Stage::PretrainCompression, Stage::JointRegCd],
        _ => &[],
    };
    for want in need {
        if !prereqs.iter().any(|c| c.has_stage(*want)) {
            return Err(TrainError::MissingPrerequisite(format!(
                "stage {} requires a checkpoint from {}",
                stage.name(),
                want.name()
            )));
        }
    }
    Ok(())
}

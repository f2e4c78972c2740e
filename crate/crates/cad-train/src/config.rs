//! Stage descriptions and the composite loss arithmetic.

use std::collections::BTreeMap;

use cad_codec::CodecConfig;
use cad_data::DistortionSpec;
use serde::{Deserialize, Serialize};

use crate::{Result, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainCompression,
    PretrainRegistration,
    PretrainCd,
    JointRegCd,
    EndToEnd,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::PretrainCompression => "pretrain_compression",
            Stage::PretrainRegistration => "pretrain_registration",
            Stage::PretrainCd => "pretrain_cd",
            Stage::JointRegCd => "joint_reg_cd",
            Stage::EndToEnd => "end_to_end",
        }
    }

    pub fn uses_codec(&self) -> bool {
        matches!(self, Stage::PretrainCompression | Stage::EndToEnd)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LrSchedule {
    pub step_epoch: usize,
    pub gamma: f64,
}

/// Declarative stage description; serializes as TOML for the CLI.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rates per sub-model name prefix ("codec", "codec.entropy",
    /// "reg", "cd"). The empty prefix "" sets the default.
    pub learning_rates: BTreeMap<String, f64>,
    pub lr_schedule: Option<LrSchedule>,
    /// Rate weight; only meaningful for compression-bearing stages.
    pub lambda: f64,
    /// Detection/registration mix for the joint and end-to-end stages.
    pub alpha: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Validate every N epochs.
    pub validate_every: usize,
    /// Training-time distortion severity (joint / end-to-end / solo reg).
    pub distortion: DistortionSpec,
    #[serde(default)]
    pub checkpoint_in: Vec<String>,
    #[serde(default)]
    pub checkpoint_out: Option<String>,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::InvalidConfig(format!(
                "alpha {} outside [0,1]",
                self.alpha
            )));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(TrainError::InvalidConfig("lambda must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.lambda > 0.0 && !self.stage.uses_codec() {
            return Err(TrainError::InvalidConfig(format!(
                "lambda set on stage {} which carries no compression",
                self.stage.name()
            )));
        }
        Ok(())
    }

    /// Desk-scale defaults per stage.
    pub fn toy(stage: Stage, lambda: f64, seed: u64) -> StageConfig {
        let mut lr = BTreeMap::new();
        let (epochs, batch_size, alpha, weight_decay, schedule) = match stage {
            Stage::PretrainCompression => {
                lr.insert("codec".into(), 1e-3);
                lr.insert("codec.entropy".into(), 1e-2);
                (60, 8, 0.0, 0.0, None)
            }
            Stage::PretrainRegistration => {
                lr.insert("reg".into(), 1e-3);
                (
                    300,
                    8,
                    0.0,
                    0.0,
                    Some(LrSchedule {
                        step_epoch: 220,
                        gamma: 0.3,
                    }),
                )
            }
            Stage::PretrainCd => {
                lr.insert("cd".into(), 1.5e-3);
                (
                    60,
                    8,
                    1.0,
                    0.0,
                    Some(LrSchedule {
                        step_epoch: 40,
                        gamma: 0.3,
                    }),
                )
            }
            Stage::JointRegCd => {
                lr.insert("reg".into(), 3e-4);
                lr.insert("cd".into(), 3e-4);
                (
                    30,
                    4,
                    0.3,
                    1e-5,
                    Some(LrSchedule {
                        step_epoch: 20,
                        gamma: 0.3,
                    }),
                )
            }
            Stage::EndToEnd => {
                lr.insert("".into(), 1e-4);
                (20, 4, 0.5, 0.0, None)
            }
        };
        StageConfig {
            stage,
            epochs,
            batch_size,
            learning_rates: lr,
            lr_schedule: schedule,
            lambda: if stage.uses_codec() { lambda } else { 0.0 },
            alpha,
            weight_decay,
            seed,
            validate_every: 10,
            distortion: if stage == Stage::PretrainRegistration {
                // solo registration trains and evaluates at full severity;
                // its identity baseline is measured under the same spec
                DistortionSpec::default()
            } else {
                DistortionSpec::toy()
            },
            checkpoint_in: Vec::new(),
            checkpoint_out: None,
        }
    }

    /// The published full-scale schedule, kept as a named preset.
    pub fn paper(stage: Stage, lambda: f64, seed: u64) -> StageConfig {
        let mut lr = BTreeMap::new();
        let (epochs, batch_size, alpha, weight_decay, schedule) = match stage {
            Stage::PretrainCompression => {
                lr.insert("codec".into(), 1e-4);
                lr.insert("codec.entropy".into(), 1e-5);
                (400, 8, 0.0, 0.0, None)
            }
            Stage::PretrainRegistration => {
                lr.insert("reg".into(), 1e-4);
                (500, 24, 0.0, 0.0, None)
            }
            Stage::PretrainCd => {
                lr.insert("cd".into(), 1e-5);
                (
                    1500,
                    8,
                    1.0,
                    0.0,
                    Some(LrSchedule {
                        step_epoch: 1000,
                        gamma: 0.3,
                    }),
                )
            }
            Stage::JointRegCd => {
                lr.insert("reg".into(), 3e-5);
                lr.insert("cd".into(), 3e-5);
                (
                    1500,
                    4,
                    0.3,
                    1e-5,
                    Some(LrSchedule {
                        step_epoch: 1000,
                        gamma: 0.3,
                    }),
                )
            }
            Stage::EndToEnd => {
                lr.insert("".into(), 3e-5);
                (1000, 4, 0.5, 0.0, None)
            }
        };
        StageConfig {
            stage,
            epochs,
            batch_size,
            learning_rates: lr,
            lr_schedule: schedule,
            lambda: if stage.uses_codec() { lambda } else { 0.0 },
            alpha,
            weight_decay,
            seed,
            validate_every: 10,
            distortion: DistortionSpec::default(),
            checkpoint_in: Vec::new(),
            checkpoint_out: None,
        }
    }
}

/// Architecture description shared by every stage of one system.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemConfig {
    pub codec: CodecConfig,
    pub reg: cad_reg::RegressorConfig,
    pub cd: cad_cd::DetectorConfig,
}

impl SystemConfig {
    pub fn toy(lambda: f64, lambda_index: u8) -> SystemConfig {
        let codec = CodecConfig::toy(lambda, lambda_index);
        let cd = cad_cd::DetectorConfig::toy(codec.tap_channels, cad_cd::InputSpace::Feature);
        SystemConfig {
            codec,
            reg: cad_reg::RegressorConfig::toy(),
            cd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cd.tap_channels != self.codec.tap_channels {
            return Err(TrainError::InvalidConfig(format!(
                "detector expects {} feature channels but the codec taps {}",
                self.cd.tap_channels, self.codec.tap_channels
            )));
        }
        self.reg
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.cd
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// Stage-dependent composite objective.
///
/// joint stage: alpha * L_cd + (1 - alpha) * L_reg
/// end-to-end:  alpha * L_cd + (1 - alpha) * L_reg + lambda * rate
/// single-task stages return their own term unchanged.
pub fn joint_loss(
    l_cd: f64,
    l_reg: f64,
    rate: f64,
    alpha: f64,
    lambda: f64,
    stage: Stage,
) -> f64 {
    match stage {
        Stage::PretrainCompression => lambda * rate + l_reg, // l_reg slot carries distortion here
        Stage::PretrainRegistration => l_reg,
        Stage::PretrainCd => l_cd,
        Stage::JointRegCd => alpha * l_cd + (1.0 - alpha) * l_reg,
        Stage::EndToEnd => alpha * l_cd + (1.0 - alpha) * l_reg + lambda * rate,
    }
}

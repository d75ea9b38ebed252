//! Run configuration: every constant of the pipeline, serialized and
//! hashed into run artifacts.

use crate::data::TaskKind;
use crate::fusion::FusionMode;
use crate::{CosaError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn default_exploration_noise() -> f64 {
    0.1
}

fn default_actor_lr_scale() -> f64 {
    0.01
}

/// Module and loss toggles (the ablation surface).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub msd: bool,
    pub dpsr: bool,
    pub sac: bool,
    /// Interval weighting inside the redundancy loss.
    pub eta: bool,
    pub msd_modality: bool,
    pub msd_reconstruct: bool,
    pub msd_contrast: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            msd: true,
            dpsr: true,
            sac: true,
            eta: true,
            msd_modality: true,
            msd_reconstruct: true,
            msd_contrast: true,
        }
    }
}

impl Toggles {
    /// Everything off: prediction path only, with the learned gate in
    /// place of the agents.
    pub fn baseline() -> Self {
        Self {
            msd: false,
            dpsr: false,
            sac: false,
            eta: false,
            msd_modality: false,
            msd_reconstruct: false,
            msd_contrast: false,
        }
    }
}

/// Widths of the learned maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Shared embedding width h of sentiment and modality features.
    pub embed: usize,
    /// Hidden width of encoders and decoders.
    pub enc_hidden: usize,
    pub actor_hidden: usize,
    pub critic_key: usize,
    pub critic_ff: usize,
    pub head_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            embed: 128,
            enc_hidden: 128,
            actor_hidden: 128,
            critic_key: 32,
            critic_ff: 128,
            head_hidden: 64,
        }
    }
}

impl ArchConfig {
    /// Small widths for minutes-scale synthetic runs on one core.
    pub fn desk() -> Self {
        Self {
            embed: 32,
            enc_hidden: 32,
            actor_hidden: 32,
            critic_key: 16,
            critic_ff: 32,
            head_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub fusion: FusionMode,
    /// Loss weights: prediction, disentanglement, redundancy, agents.
    pub alpha: [f64; 4],
    /// Discount factor of the bootstrap target.
    pub gamma: f64,
    /// Soft-update rate of the target networks.
    pub zeta: f64,
    pub learning_rate: f64,
    /// Multiplier applied when the valid loss stalls.
    pub lr_decay: f64,
    /// Epochs of no valid-loss improvement before a decay step.
    pub lr_patience: u32,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub modules: Toggles,
    /// Clamp for the contrast distance; `null` is the unclamped
    /// paper-faithful mode.
    pub contrast_margin: Option<f64>,
    /// Replay capacity in stored batches.
    pub replay_capacity: usize,
    /// Active modality subset, e.g. "VAT", "VA", "T".
    pub modalities: String,
    pub arch: ArchConfig,
    /// Multiplier on the learning rate for actor (and shared
    /// transform) updates. Deterministic policy gradients destabilize
    /// when the actor moves as fast as the critic; the customary
    /// actor/critic rate ratio is well below 1.
    #[serde(default = "default_actor_lr_scale")]
    pub actor_lr_scale: f64,
    /// Row-softmax normalization of the correlation matrix before the
    /// reconstruction product. Off reproduces the raw product; on keeps
    /// reconstructed feature scale bounded.
    #[serde(default)]
    pub normalize_correlation: bool,
    /// Stddev of the seeded exploration jitter applied to the actions
    /// stored in replay records (the policy itself stays deterministic;
    /// rewards are recomputed for the jittered actions). Zero disables
    /// exploration.
    #[serde(default = "default_exploration_noise")]
    pub exploration_noise: f64,
    /// Train the agents once per epoch instead of once per batch.
    #[serde(default)]
    pub alternate_per_epoch: bool,
    /// Dump per-frame weight maps every N epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_export_interval: Option<u32>,
}

impl TrainConfig {
    /// Published constants for a task: loss weights, discount, soft
    /// update, schedule.
    pub fn default_for(task: TaskKind) -> Self {
        let alpha = match task {
            TaskKind::Msa => [10.0, 0.5, 1.0, 1.0],
            TaskKind::Mer => [9.0, 1.0, 30.0, 1.0],
        };
        Self {
            task,
            fusion: FusionMode::Additive,
            alpha,
            gamma: 0.5,
            zeta: 0.01,
            learning_rate: 1e-3,
            lr_decay: 0.95,
            lr_patience: 50,
            epochs: 500,
            batch_size: 32,
            seed: 0,
            modules: Toggles::default(),
            contrast_margin: Some(10.0),
            replay_capacity: 64,
            modalities: "VAT".to_string(),
            arch: ArchConfig::default(),
            actor_lr_scale: default_actor_lr_scale(),
            normalize_correlation: false,
            exploration_noise: default_exploration_noise(),
            alternate_per_epoch: false,
            weights_export_interval: None,
        }
    }

    /// Desk-scale preset: same constants, small widths, 100 epochs,
    /// and the scale-bounded reconstruction variant, which keeps the
    /// agent inputs commensurate with the action channel at these widths.
    pub fn desk(task: TaskKind) -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            arch: ArchConfig::desk(),
            normalize_correlation: true,
            contrast_margin: Some(3.0),
            ..Self::default_for(task)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|&a| a < 0.0) {
            return Err(CosaError::Config("loss weights must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(CosaError::Config("gamma must lie in [0, 1)".into()));
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return Err(CosaError::Config("zeta must lie in (0, 1]".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(CosaError::Config("learning_rate must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(CosaError::Config("lr_decay must lie in (0, 1]".into()));
        }
        if self.lr_patience == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(CosaError::Config(
                "lr_patience, epochs, and batch_size must be positive".into(),
            ));
        }
        if let Some(m) = self.contrast_margin {
            if m <= 0.0 {
                return Err(CosaError::Config("contrast_margin must be positive".into()));
            }
        }
        if self.replay_capacity == 0 {
            return Err(CosaError::Config("replay_capacity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.exploration_noise) {
            return Err(CosaError::Config("exploration_noise must lie in [0, 1]".into()));
        }
        if !(self.actor_lr_scale > 0.0 && self.actor_lr_scale <= 1.0) {
            return Err(CosaError::Config("actor_lr_scale must lie in (0, 1]".into()));
        }
        let a = &self.arch;
        if [a.embed, a.enc_hidden, a.actor_hidden, a.critic_key, a.critic_ff, a.head_hidden]
            .iter()
            .any(|&w| w == 0)
        {
            return Err(CosaError::Config("architecture widths must be positive".into()));
        }
        crate::data::ModalityId::parse_set(&self.modalities)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CosaError::io(path.display().to_string(), e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| CosaError::io(path.display().to_string(), e))
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    pub fn active_modalities(&self) -> [bool; 3] {
        let set = crate::data::ModalityId::parse_set(&self.modalities).expect("validated");
        let mut active = [false; 3];
        for m in set {
            active[m.index()] = true;
        }
        active
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_constants() {
        let msa = TrainConfig::default_for(TaskKind::Msa);
        assert_eq!(msa.alpha, [10.0, 0.5, 1.0, 1.0]);
        assert_eq!(msa.gamma, 0.5);
        assert_eq!(msa.zeta, 0.01);
        assert_eq!(msa.epochs, 500);
        assert_eq!(msa.arch.embed, 128);
        let mer = TrainConfig::default_for(TaskKind::Mer);
        assert_eq!(mer.alpha, [9.0, 1.0, 30.0, 1.0]);
    }

    #[test]
    fn json_round_trip_and_hash_stability() {
        let cfg = TrainConfig::desk(TaskKind::Msa);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.config_hash(), back.config_hash());
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(cfg.config_hash(), other.config_hash());
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let mut cfg = TrainConfig::desk(TaskKind::Msa);
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::desk(TaskKind::Msa);
        cfg.zeta = 0.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::desk(TaskKind::Msa);
        cfg.modalities = "VAX".into();
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::desk(TaskKind::Msa);
        cfg.alpha[2] = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let err = serde_json::from_str::<TrainConfig>("{\"task\":\"msa\",\"bogus\":1}");
        assert!(err.is_err());
    }
}

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{DiscriminatorConfig, GeneratorConfig};
use crate::tensor::AdamHyper;

/// Version of the config file layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Optimisation and sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub iterations: u64,
    pub batch_size: usize,
    pub segment_frames: usize,
    pub max_mask_frames: usize,
    pub lr_initial: f64,
    pub lr_decay_per_epoch: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Trim threshold relative to the normalised peak, applied on ingestion.
    pub silence_threshold_db: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            iterations: 2000,
            batch_size: 4,
            segment_frames: 32,
            max_mask_frames: 25,
            lr_initial: 2e-4,
            lr_decay_per_epoch: 0.999,
            adam_beta1: 0.5,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 500,
            log_every: 10,
            silence_threshold_db: -40.0,
        }
    }
}

/// Component switches that distinguish the model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub enable_masking: bool,
    pub enable_adv2: bool,
    pub enable_glu_encoder: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { enable_masking: true, enable_adv2: true, enable_glu_encoder: true }
    }
}

impl Ablation {
    /// Variants 4 to 7: plain cycle training, then masking, then the second
    /// adversarial loss, then the GLU encoder.
    pub fn variant(n: u8) -> Option<Self> {
        let (enable_masking, enable_adv2, enable_glu_encoder) = match n {
            4 => (false, false, false),
            5 => (true, false, false),
            6 => (true, true, false),
            7 => (true, true, true),
            _ => return None,
        };
        Some(Ablation { enable_masking, enable_adv2, enable_glu_encoder })
    }
}

/// Everything a training run needs; serialised as versioned TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Serialize)]
struct Architecture<'a> {
    ablation: &'a Ablation,
    generator: &'a GeneratorConfig,
    discriminator: &'a DiscriminatorConfig,
}

impl TrainConfig {
    /// CPU-sized defaults.
    pub fn desk() -> Self {
        TrainConfig {
            schema_version: SCHEMA_VERSION,
            train: TrainParams::default(),
            loss: LossWeights::default(),
            ablation: Ablation::default(),
            generator: GeneratorConfig { base_channels: 32, ..GeneratorConfig::default() },
            discriminator: DiscriminatorConfig::default(),
        }
    }

    /// Full-length schedule and full-width networks; long-running on a CPU.
    pub fn full() -> Self {
        TrainConfig {
            schema_version: SCHEMA_VERSION,
            train: TrainParams { iterations: 50_000, batch_size: 8, segment_frames: 64, ..TrainParams::default() },
            loss: LossWeights::default(),
            ablation: Ablation::default(),
            generator: GeneratorConfig::full(),
            discriminator: DiscriminatorConfig::full(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            schema_version: Option<u32>,
        }
        let v: Version = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        match v.schema_version {
            Some(SCHEMA_VERSION) => {}
            Some(other) => return Err(Error::Config(format!("unsupported schema_version {other}"))),
            None => return Err(Error::Config("missing schema_version".into())),
        }
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema_version {}", self.schema_version)));
        }
        if t.batch_size == 0 || t.segment_frames == 0 {
            return bad("batch_size and segment_frames must be positive");
        }
        if t.max_mask_frames > t.segment_frames {
            return bad("max_mask_frames exceeds segment_frames");
        }
        if !(t.lr_initial >= 0.0 && t.lr_initial.is_finite()) {
            return bad("lr_initial must be finite and non-negative");
        }
        if !(t.lr_decay_per_epoch > 0.0 && t.lr_decay_per_epoch <= 1.0) {
            return bad("lr_decay_per_epoch must lie in (0, 1]");
        }
        if !((0.0..1.0).contains(&t.adam_beta1) && (0.0..1.0).contains(&t.adam_beta2) && t.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if t.seed > i64::MAX as u64 {
            return bad("seed must fit in a signed 64-bit integer");
        }
        self.loss.validate()?;
        self.generator_config().validate()?;
        self.discriminator.validate()
    }

    /// Generator layout with the ablation switches applied.
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            use_glu_encoder: self.ablation.enable_glu_encoder,
            mask_input: self.ablation.enable_masking,
            ..self.generator.clone()
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper { beta1: self.train.adam_beta1, beta2: self.train.adam_beta2, eps: self.train.adam_eps }
    }

    /// Mask length bound actually used for sampling.
    pub fn effective_max_mask(&self) -> usize {
        if self.ablation.enable_masking {
            self.train.max_mask_frames
        } else {
            0
        }
    }

    /// SHA-256 over the settings that determine parameter layout.
    pub fn architecture_hash(&self) -> [u8; 32] {
        let arch = Architecture { ablation: &self.ablation, generator: &self.generator, discriminator: &self.discriminator };
        let text = toml::to_string(&arch).expect("architecture serialises");
        Sha256::digest(text.as_bytes()).into()
    }

    pub fn architecture_hash_hex(&self) -> String {
        self.architecture_hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for cfg in [TrainConfig::desk(), TrainConfig::full()] {
            cfg.validate().unwrap();
            assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn full_hyperparameters() {
        let p = TrainConfig::full();
        assert_eq!(p.train.iterations, 50_000);
        assert_eq!(p.train.batch_size, 8);
        assert_eq!(p.train.segment_frames, 64);
        assert_eq!(p.train.max_mask_frames, 25);
        assert_eq!((p.train.lr_initial, p.train.lr_decay_per_epoch), (2e-4, 0.999));
        assert_eq!((p.train.adam_beta1, p.train.adam_beta2), (0.5, 0.99));
        assert_eq!((p.loss.lambda_cyc, p.loss.lambda_id), (10.0, 5.0));
    }

    #[test]
    fn sections_default_when_omitted() {
        let cfg = TrainConfig::from_toml("schema_version = 1\n[train]\niterations = 7\nbatch_size = 1\nsegment_frames = 8\nmax_mask_frames = 4\nlr_initial = 0.001\nlr_decay_per_epoch = 1.0\nadam_beta1 = 0.5\nadam_beta2 = 0.99\nadam_eps = 1e-8\nseed = 3\ncheckpoint_every = 0\nlog_every = 1\nsilence_threshold_db = -40.0\n").unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.generator, GeneratorConfig { base_channels: 64, ..GeneratorConfig::default() });
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(TrainConfig::from_toml("[train]\n"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml("schema_version = 9\n"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml("schema_version = 1\nbogus = 2\n"), Err(Error::Config(_))));
        let mut cfg = TrainConfig::desk();
        cfg.train.lr_decay_per_epoch = 1.5;
        assert!(TrainConfig::from_toml(&cfg.to_toml()).is_err());
    }

    #[test]
    fn hash_tracks_architecture_only() {
        let a = TrainConfig::desk();
        let mut b = a.clone();
        b.train.seed = 99;
        b.train.iterations = 5;
        assert_eq!(a.architecture_hash(), b.architecture_hash());
        b.generator.base_channels = 16;
        assert_ne!(a.architecture_hash(), b.architecture_hash());
        let mut c = a.clone();
        c.ablation.enable_adv2 = false;
        assert_ne!(a.architecture_hash(), c.architecture_hash());
        assert_eq!(a.architecture_hash_hex().len(), 64);
    }

    #[test]
    fn variants() {
        assert_eq!(Ablation::variant(7), Some(Ablation::default()));
        assert_eq!(
            Ablation::variant(4),
            Some(Ablation { enable_masking: false, enable_adv2: false, enable_glu_encoder: false })
        );
        assert_eq!(Ablation::variant(3), None);
    }
}

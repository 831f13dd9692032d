use alloc::format;
use alloc::string::{String, ToString};
use core::fmt;
use core::str::FromStr;

use crate::cal::CalConfig;
use crate::encoder::{EncoderConfig, PromptMode, SeveranceSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::numcore::Optimizer;
use crate::proposals::ProposalNetConfig;
use crate::synth::DatasetSpec;

/// Ablation lattice over prompt learning, patch severance and anchor
/// heatmaps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Frozen encoder, mask pooling, fixed class embeddings.
    Baseline,
    /// Adds visual prompts and learnable seen-class offsets.
    BaselinePlus,
    /// Baseline+ with patch severance.
    Ps,
    /// Baseline+ with anchor-heatmap pooling.
    Cal,
    /// Baseline+ with both.
    Deop,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Baseline,
        Mode::BaselinePlus,
        Mode::Ps,
        Mode::Cal,
        Mode::Deop,
    ];

    pub fn prompts(self) -> bool {
        self != Mode::Baseline
    }

    pub fn severance(self) -> bool {
        matches!(self, Mode::Ps | Mode::Deop)
    }

    pub fn anchors(self) -> bool {
        matches!(self, Mode::Cal | Mode::Deop)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::BaselinePlus => "baseline+",
            Mode::Ps => "+ps",
            Mode::Cal => "+cal",
            Mode::Deop => "deop",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode `{s}` (baseline|baseline+|+ps|+cal|deop)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (sgd|adam)"))),
        }
    }
}

/// Learning-rate decay over a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero at the last step.
    Cosine,
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config(format!(
                "unknown schedule `{s}` (constant|cosine)"
            ))),
        }
    }
}

/// Schedule of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
}

impl StageConfig {
    pub fn new(steps: usize, batch: usize, lr: f64) -> Self {
        Self {
            steps,
            batch,
            lr,
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::Cosine,
        }
    }

    /// Learning-rate multiplier at `step`.
    pub fn decay(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let t = step as f64 / self.steps.max(1) as f64;
                0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
            }
        }
    }

    pub fn optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Sgd => Optimizer::sgd(self.lr),
            OptimizerKind::Adam => Optimizer::adam(self.lr),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "{name}: batch must be positive and lr a positive number"
            )));
        }
        Ok(())
    }
}

/// Where the classification stream gets its masks from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskSource {
    Learned,
    /// Ground-truth segments with boundary jitter.
    Oracle {
        jitter: f64,
    },
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSource::Learned => f.write_str("learned"),
            MaskSource::Oracle { jitter } => write!(f, "oracle:{jitter}"),
        }
    }
}

impl FromStr for MaskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "learned" {
            return Ok(MaskSource::Learned);
        }
        if s == "oracle" {
            return Ok(MaskSource::Oracle { jitter: 0.0 });
        }
        s.strip_prefix("oracle:")
            .and_then(|j| j.parse::<f64>().ok())
            .filter(|j| (0.0..=1.0).contains(j))
            .map(|jitter| MaskSource::Oracle { jitter })
            .ok_or_else(|| {
                Error::Config(format!("bad mask source `{s}` (learned|oracle|oracle:J)"))
            })
    }
}

/// Every knob of a run. Paths live with the command-line front end.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetSpec,
    /// Encoder body; severance and prompts are filled in from `mode`.
    pub encoder: EncoderConfig,
    /// Severance strength used on the last layer when the mode asks for it.
    pub gps_alpha: f64,
    /// Prompt form used when the mode asks for prompts.
    pub prompt: PromptMode,
    pub proposals: ProposalNetConfig,
    pub cal: CalConfig,
    pub mode: Mode,
    pub temperature: f64,
    /// Use raw cosine/τ scores instead of a per-segment softmax.
    pub raw_scores: bool,
    pub loss: LossConfig,
    pub pretrain: StageConfig,
    /// Scenes in the encoder pretraining corpus.
    pub pretrain_images: usize,
    pub proposal_stage: StageConfig,
    pub deop_stage: StageConfig,
    /// Learning-rate multiplier for the seen-class embedding offsets.
    pub offset_lr_scale: f64,
    pub mask_source: MaskSource,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DatasetSpec::default(),
            encoder: EncoderConfig::default(),
            gps_alpha: 1.0,
            prompt: PromptMode::Add,
            proposals: ProposalNetConfig::default(),
            cal: CalConfig::default(),
            mode: Mode::Deop,
            temperature: 0.07,
            raw_scores: false,
            loss: LossConfig::default(),
            pretrain: StageConfig {
                schedule: LrSchedule::Constant,
                ..StageConfig::new(4000, 8, 3e-3)
            },
            pretrain_images: 4000,
            proposal_stage: StageConfig::new(1200, 8, 5e-3),
            deop_stage: StageConfig::new(1000, 8, 1e-3),
            offset_lr_scale: 0.1,
            mask_source: MaskSource::Learned,
            log_every: 50,
        }
    }
}

impl RunConfig {
    /// Encoder configuration with the mode's severance and prompts applied.
    pub fn encoder_config(&self) -> EncoderConfig {
        let layers = self.encoder.num_layers;
        EncoderConfig {
            severance: if self.mode.severance() {
                SeveranceSpec::last_layer_gps(layers, self.gps_alpha)
            } else {
                SeveranceSpec::none(layers)
            },
            prompt: if self.mode.prompts() {
                self.prompt
            } else {
                PromptMode::Off
            },
            ..self.encoder.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let enc = self.encoder_config();
        enc.validate()?;
        self.proposals.validate()?;
        self.cal.validate(enc.embed_dim)?;
        if enc.image_size != self.data.image_size
            || self.proposals.image_size != self.data.image_size
        {
            return Err(Error::Config(
                "encoder, proposal and data image sizes must agree".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gps_alpha) {
            return Err(Error::Config("gps_alpha must lie in [0, 1]".to_string()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".to_string()));
        }
        if !(self.offset_lr_scale >= 0.0) || !self.offset_lr_scale.is_finite() {
            return Err(Error::Config(
                "offset_lr_scale must be a non-negative number".to_string(),
            ));
        }
        self.pretrain.validate("pretrain")?;
        self.proposal_stage.validate("proposal stage")?;
        self.deop_stage.validate("deop stage")?;
        Ok(())
    }

    /// Canonical description of the pretrained encoder body and the class
    /// table it was aligned with.
    pub fn encoder_architecture(&self) -> String {
        let e = &self.encoder;
        format!(
            "enc:{}/{}/{}/{}/{}/{}/{} classes:{}",
            e.image_size,
            e.patch_size,
            e.in_channels,
            e.embed_dim,
            e.num_layers,
            e.num_heads,
            e.mlp_ratio,
            self.data.names().join(","),
        )
    }

    pub fn proposal_architecture(&self) -> String {
        let p = &self.proposals;
        format!(
            "props:{}/{}/{}/{}/{}/{}/{}/{}",
            p.image_size,
            p.in_channels,
            p.stem_channels,
            p.channels,
            p.embed_dim,
            p.queries,
            p.decoder_layers,
            p.heads
        )
    }

    /// Canonical description of everything that shapes the parameters; two
    /// runs whose checkpoints are interchangeable share it.
    pub fn architecture(&self) -> String {
        let c = &self.cal;
        format!(
            "{} {} prompt:{} cal:{}/{}/{}/{}",
            self.encoder_architecture(),
            self.proposal_architecture(),
            if self.mode.prompts() {
                self.prompt.to_string()
            } else {
                "off".to_string()
            },
            if self.mode.anchors() {
                c.kind.to_string()
            } else {
                "none".to_string()
            },
            c.layers,
            c.heads,
            c.conv_channels,
        )
    }
}

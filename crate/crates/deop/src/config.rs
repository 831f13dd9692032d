//! `key = value` run configuration files and `--key value` overrides.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use deop_core::pipeline::RunConfig;
use deop_core::synth::DatasetSpec;

use crate::error::{io_err, Error, Result};

/// Every configuration key with a one-line description (units in
/// brackets). Order is the order of [`to_text`].
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for data, initialisation and shuffling"),
    ("mode", "baseline | baseline+ | +ps | +cal | deop"),
    (
        "mask_source",
        "learned | oracle | oracle:J (ground-truth segments, boundary jitter J)",
    ),
    ("temperature", "cosine-similarity temperature"),
    (
        "raw_scores",
        "true: score segments by cos/temperature without the softmax",
    ),
    (
        "gps_alpha",
        "last-layer severance strength in [0, 1] when the mode severs",
    ),
    (
        "prompt",
        "visual prompt form when the mode uses prompts: off | add | prepend:P",
    ),
    (
        "offset_lr_scale",
        "learning-rate multiplier for the seen-class embedding offsets",
    ),
    (
        "log_every",
        "log the training loss every N steps (0 = never)",
    ),
    ("image_size", "image side [pixels]"),
    ("train_images", "training images"),
    ("val_images", "validation images"),
    (
        "noise",
        "pixel noise standard deviation [intensity in 0..1]",
    ),
    ("min_shapes", "fewest shapes per image"),
    ("max_shapes", "most shapes per image"),
    ("min_radius", "smallest shape half-extent [pixels]"),
    ("max_radius", "largest shape half-extent [pixels]"),
    ("unseen", "comma-separated unseen class names"),
    ("patch_size", "encoder patch side [pixels]"),
    ("embed_dim", "encoder width"),
    ("layers", "encoder transformer blocks"),
    ("heads", "encoder attention heads"),
    (
        "mlp_ratio",
        "encoder MLP hidden width as a multiple of embed_dim",
    ),
    ("queries", "mask proposals per image"),
    (
        "proposal_stem_channels",
        "proposal backbone width at half resolution",
    ),
    (
        "proposal_channels",
        "proposal backbone width at quarter resolution",
    ),
    ("proposal_embed_dim", "proposal mask-embedding width"),
    (
        "proposal_decoder_layers",
        "proposal transformer decoder layers",
    ),
    ("proposal_heads", "proposal decoder attention heads"),
    ("cal", "anchor decoder: query | conv"),
    ("cal_layers", "query-decoder layers or conv blocks"),
    ("cal_heads", "attention heads in the query decoder"),
    ("cal_conv_channels", "hidden channels of the conv decoder"),
    ("cal_momentum", "batch-norm running-statistics momentum"),
    ("dice_weight", "dice loss weight"),
    ("focal_weight", "focal loss weight"),
    ("dice_eps", "dice smoothing"),
    ("focal_gamma", "focal focusing exponent"),
    ("focal_alpha", "focal positive-class weight"),
    (
        "pretrain_images",
        "scenes in the encoder pretraining corpus",
    ),
    ("pretrain_steps", "encoder pretraining optimizer steps"),
    ("pretrain_batch", "images per pretraining step"),
    ("pretrain_lr", "pretraining learning rate"),
    ("pretrain_optimizer", "sgd | adam"),
    ("pretrain_schedule", "constant | cosine"),
    ("proposal_steps", "proposal training optimizer steps"),
    ("proposal_batch", "images per proposal step"),
    ("proposal_lr", "proposal learning rate"),
    ("proposal_optimizer", "sgd | adam"),
    ("proposal_schedule", "constant | cosine"),
    ("deop_steps", "segmentation training optimizer steps"),
    ("deop_batch", "images per segmentation step"),
    ("deop_lr", "segmentation learning rate"),
    ("deop_optimizer", "sgd | adam"),
    ("deop_schedule", "constant | cosine"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_core<T: FromStr<Err = deop_core::Error>>(value: &str) -> Result<T> {
    Ok(value.trim().parse()?)
}

/// Sets one key.
pub fn apply(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    match key {
        "seed" => {
            cfg.seed = parse(key, v)?;
            cfg.data.seed = cfg.seed;
        }
        "mode" => cfg.mode = parse_core(v)?,
        "mask_source" => cfg.mask_source = parse_core(v)?,
        "temperature" => cfg.temperature = parse(key, v)?,
        "raw_scores" => cfg.raw_scores = parse(key, v)?,
        "gps_alpha" => cfg.gps_alpha = parse(key, v)?,
        "prompt" => cfg.prompt = parse_core(v)?,
        "offset_lr_scale" => cfg.offset_lr_scale = parse(key, v)?,
        "log_every" => cfg.log_every = parse(key, v)?,
        "image_size" => {
            let s = parse(key, v)?;
            cfg.data.image_size = s;
            cfg.encoder.image_size = s;
            cfg.proposals.image_size = s;
        }
        "train_images" => cfg.data.train = parse(key, v)?,
        "val_images" => cfg.data.val = parse(key, v)?,
        "noise" => cfg.data.noise = parse(key, v)?,
        "min_shapes" => cfg.data.min_shapes = parse(key, v)?,
        "max_shapes" => cfg.data.max_shapes = parse(key, v)?,
        "min_radius" => cfg.data.min_radius = parse(key, v)?,
        "max_radius" => cfg.data.max_radius = parse(key, v)?,
        "unseen" => {
            let names: Vec<&str> = v
                .split(',')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .collect();
            let fresh = DatasetSpec::with_unseen(&names);
            if let Some(bad) = names
                .iter()
                .find(|n| !fresh.classes.iter().any(|c| c.name == **n))
            {
                return Err(Error::Config(format!("unknown class `{bad}` in `unseen`")));
            }
            cfg.data.classes = fresh.classes;
        }
        "patch_size" => cfg.encoder.patch_size = parse(key, v)?,
        "embed_dim" => cfg.encoder.embed_dim = parse(key, v)?,
        "layers" => cfg.encoder.num_layers = parse(key, v)?,
        "heads" => cfg.encoder.num_heads = parse(key, v)?,
        "mlp_ratio" => cfg.encoder.mlp_ratio = parse(key, v)?,
        "queries" => cfg.proposals.queries = parse(key, v)?,
        "proposal_stem_channels" => cfg.proposals.stem_channels = parse(key, v)?,
        "proposal_channels" => cfg.proposals.channels = parse(key, v)?,
        "proposal_embed_dim" => cfg.proposals.embed_dim = parse(key, v)?,
        "proposal_decoder_layers" => cfg.proposals.decoder_layers = parse(key, v)?,
        "proposal_heads" => cfg.proposals.heads = parse(key, v)?,
        "cal" => cfg.cal.kind = parse_core(v)?,
        "cal_layers" => cfg.cal.layers = parse(key, v)?,
        "cal_heads" => cfg.cal.heads = parse(key, v)?,
        "cal_conv_channels" => cfg.cal.conv_channels = parse(key, v)?,
        "cal_momentum" => cfg.cal.momentum = parse(key, v)?,
        "dice_weight" => cfg.loss.dice_weight = parse(key, v)?,
        "focal_weight" => cfg.loss.focal_weight = parse(key, v)?,
        "dice_eps" => cfg.loss.dice_eps = parse(key, v)?,
        "focal_gamma" => cfg.loss.focal_gamma = parse(key, v)?,
        "focal_alpha" => cfg.loss.focal_alpha = parse(key, v)?,
        "pretrain_images" => cfg.pretrain_images = parse(key, v)?,
        _ => return apply_stage(cfg, key, v),
    }
    Ok(())
}

fn apply_stage(cfg: &mut RunConfig, key: &str, v: &str) -> Result<()> {
    let unknown = || Error::Config(format!("unknown key `{key}`"));
    let (stage, field) = key.split_once('_').ok_or_else(unknown)?;
    let stage = match stage {
        "pretrain" => &mut cfg.pretrain,
        "proposal" => &mut cfg.proposal_stage,
        "deop" => &mut cfg.deop_stage,
        _ => return Err(unknown()),
    };
    match field {
        "steps" => stage.steps = parse(key, v)?,
        "batch" => stage.batch = parse(key, v)?,
        "lr" => stage.lr = parse(key, v)?,
        "optimizer" => stage.optimizer = parse_core(v)?,
        "schedule" => stage.schedule = parse_core(v)?,
        _ => return Err(unknown()),
    }
    Ok(())
}

/// Current value of a key, in the form [`apply`] accepts.
pub fn value(cfg: &RunConfig, key: &str) -> Option<String> {
    let stage = |s: &deop_core::pipeline::StageConfig, field: &str| match field {
        "steps" => s.steps.to_string(),
        "batch" => s.batch.to_string(),
        "lr" => s.lr.to_string(),
        "optimizer" => s.optimizer.to_string(),
        _ => s.schedule.to_string(),
    };
    Some(match key {
        "seed" => cfg.seed.to_string(),
        "mode" => cfg.mode.to_string(),
        "mask_source" => cfg.mask_source.to_string(),
        "temperature" => cfg.temperature.to_string(),
        "raw_scores" => cfg.raw_scores.to_string(),
        "gps_alpha" => cfg.gps_alpha.to_string(),
        "prompt" => cfg.prompt.to_string(),
        "offset_lr_scale" => cfg.offset_lr_scale.to_string(),
        "log_every" => cfg.log_every.to_string(),
        "image_size" => cfg.data.image_size.to_string(),
        "train_images" => cfg.data.train.to_string(),
        "val_images" => cfg.data.val.to_string(),
        "noise" => cfg.data.noise.to_string(),
        "min_shapes" => cfg.data.min_shapes.to_string(),
        "max_shapes" => cfg.data.max_shapes.to_string(),
        "min_radius" => cfg.data.min_radius.to_string(),
        "max_radius" => cfg.data.max_radius.to_string(),
        "unseen" => {
            let names: Vec<String> = cfg
                .data
                .classes
                .iter()
                .filter(|c| !c.seen)
                .map(|c| c.name.clone())
                .collect();
            names.join(",")
        }
        "patch_size" => cfg.encoder.patch_size.to_string(),
        "embed_dim" => cfg.encoder.embed_dim.to_string(),
        "layers" => cfg.encoder.num_layers.to_string(),
        "heads" => cfg.encoder.num_heads.to_string(),
        "mlp_ratio" => cfg.encoder.mlp_ratio.to_string(),
        "queries" => cfg.proposals.queries.to_string(),
        "proposal_stem_channels" => cfg.proposals.stem_channels.to_string(),
        "proposal_channels" => cfg.proposals.channels.to_string(),
        "proposal_embed_dim" => cfg.proposals.embed_dim.to_string(),
        "proposal_decoder_layers" => cfg.proposals.decoder_layers.to_string(),
        "proposal_heads" => cfg.proposals.heads.to_string(),
        "cal" => cfg.cal.kind.to_string(),
        "cal_layers" => cfg.cal.layers.to_string(),
        "cal_heads" => cfg.cal.heads.to_string(),
        "cal_conv_channels" => cfg.cal.conv_channels.to_string(),
        "cal_momentum" => cfg.cal.momentum.to_string(),
        "dice_weight" => cfg.loss.dice_weight.to_string(),
        "focal_weight" => cfg.loss.focal_weight.to_string(),
        "dice_eps" => cfg.loss.dice_eps.to_string(),
        "focal_gamma" => cfg.loss.focal_gamma.to_string(),
        "focal_alpha" => cfg.loss.focal_alpha.to_string(),
        "pretrain_images" => cfg.pretrain_images.to_string(),
        _ => {
            let (s, field) = key.split_once('_')?;
            match s {
                "pretrain" => stage(&cfg.pretrain, field),
                "proposal" => stage(&cfg.proposal_stage, field),
                "deop" => stage(&cfg.deop_stage, field),
                _ => return None,
            }
        }
    })
}

/// Every key with its current value, as a loadable config file.
pub fn to_text(cfg: &RunConfig) -> String {
    KEYS.iter()
        .map(|(k, _)| format!("{k} = {}\n", value(cfg, k).expect("listed key")))
        .collect()
}

/// `(key, value, byte offset of the line)` triples of a config file.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_text(text: &str, path: &Path) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let l = line.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| Error::Parse {
            path: path.into(),
            offset: at,
            reason: "expected `key = value`".into(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string(), at));
    }
    Ok(out)
}

/// Defaults, then the file (if any), then the overrides in order.
pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    load_onto(RunConfig::default(), file, overrides)
}

/// Like [`load`], starting from `cfg` instead of the defaults.
pub fn load_onto(
    mut cfg: RunConfig,
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig> {
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        for (k, v, at) in parse_text(&text, path)? {
            apply(&mut cfg, &k, &v).map_err(|e| Error::Parse {
                path: path.into(),
                offset: at,
                reason: e.to_string(),
            })?;
        }
    }
    for (k, v) in overrides {
        apply(&mut cfg, k, v)?;
    }
    Ok(cfg)
}

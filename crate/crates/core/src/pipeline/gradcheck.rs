//! Finite-difference checks of every trainable module, small enough to run
//! from the command line.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cal::CalKind;
use crate::classify::training_loss;
use crate::encoder::{Encoder, EncoderConfig, PromptMode, SeveranceSpec};
use crate::error::{Error, Result};
use crate::losses::{dice_focal, dice_rows, focal_rows, LossConfig};
use crate::masks::MaskSet;
use crate::metrics::SegLabelMap;
use crate::numcore::{grad_check_many, grad_check_params, ParamStore, Tape, Tensor, Var};
use crate::proposals::{hungarian_match, mask_loss, oracle_masks, ProposalNet, ProposalNetConfig};
use crate::synth::{ClassDef, DatasetSpec, Split};

use super::config::{Mode, RunConfig};
use super::model::DeopModel;

/// Central-difference step used throughout the suite.
pub const GRAD_EPS: f64 = 1e-6;
/// Largest acceptable relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Which checks to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    Losses,
    Encoder,
    Proposals,
    Deop,
    All,
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradTarget::Losses => "losses",
            GradTarget::Encoder => "encoder",
            GradTarget::Proposals => "proposals",
            GradTarget::Deop => "deop",
            GradTarget::All => "all",
        })
    }
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            GradTarget::Losses,
            GradTarget::Encoder,
            GradTarget::Proposals,
            GradTarget::Deop,
            GradTarget::All,
        ]
        .into_iter()
        .find(|t| format!("{t}") == s)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown gradcheck target `{s}` (losses|encoder|proposals|deop|all)"
            ))
        })
    }
}

/// One finished check: what was differentiated and the worst relative error.
#[derive(Clone, Debug, PartialEq)]
pub struct GradResult {
    pub name: String,
    pub max_rel_err: f64,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Runs the checks selected by `target`.
pub fn run_gradchecks(target: GradTarget) -> Result<Vec<GradResult>> {
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| {
        out.push(GradResult {
            name: name.into(),
            max_rel_err: err,
        })
    };
    let all = target == GradTarget::All;
    if all || target == GradTarget::Losses {
        for (name, err) in loss_checks()? {
            push(name, err);
        }
    }
    if all || target == GradTarget::Encoder {
        push("encoder", encoder_check()?);
    }
    if all || target == GradTarget::Proposals {
        push("proposals", proposal_check()?);
    }
    if all || target == GradTarget::Deop {
        push("deop/query", deop_check(CalKind::Query)?);
        push("deop/conv", deop_check(CalKind::Conv)?);
    }
    Ok(out)
}

fn probabilities(rows: usize, cols: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    let p = Tensor::uniform([rows, cols], 0.05, 0.95, &mut r);
    let t: Vec<f64> = (0..rows * cols)
        .map(|_| if r.random::<bool>() { 1.0 } else { 0.0 })
        .collect();
    (p, Tensor::new([rows, cols], t).expect("sized above"))
}

fn loss_checks() -> Result<Vec<(&'static str, f64)>> {
    let cfg = LossConfig::default();
    let (p, t) = probabilities(3, 5, 1);
    let summed = |f: fn(&mut Tape, Var, Var) -> Result<Var>| {
        grad_check_many(
            |tape, v| {
                let tv = tape.constant(t.clone());
                let rows = f(tape, v[0], tv)?;
                tape.sum(rows)
            },
            core::slice::from_ref(&p),
            GRAD_EPS,
        )
    };
    let dice = summed(|tape, p, t| dice_rows(tape, p, t, 1.0))?;
    let focal = summed(|tape, p, t| focal_rows(tape, p, t, 2.0, 0.25))?;
    let combined = grad_check_many(
        |tape, v| {
            let tv = tape.constant(t.clone());
            dice_focal(tape, v[0], tv, &cfg)
        },
        core::slice::from_ref(&p),
        GRAD_EPS,
    )?;

    // matched mask loss over a free prediction tensor
    let mut store = ParamStore::new();
    let pred = store.add("pred", Tensor::uniform([3, 16], 0.05, 0.95, &mut rng(2)));
    let (_, gt) = probabilities(2, 16, 3);
    let pred_set = MaskSet::new(store.get(pred).clone().reshape([3, 4, 4])?)?;
    let gt_set = MaskSet::new(gt.clone().reshape([2, 4, 4])?)?;
    let assignment = hungarian_match(&pred_set, &gt_set, &cfg)?;
    let matched = grad_check_params(&store, &[pred], GRAD_EPS, None, |g| {
        let p = g.param(pred);
        mask_loss(g, p, &gt, &assignment, &cfg)
    })?;

    // per-pixel segmentation loss over class scores, one unseen row
    let scores = store.add("scores", Tensor::randn([3, 16], 1.0, &mut rng(4)));
    let labels: Vec<u8> = (0..16)
        .map(|i| if i % 3 == 0 { 2 } else { (i % 2) as u8 * 2 })
        .collect();
    let gt_map = SegLabelMap::new(4, 4, labels)?;
    let seen = [true, false, true];
    let segmentation = grad_check_params(&store, &[scores], GRAD_EPS, None, |g| {
        let s = g.param(scores);
        training_loss(g, s, &gt_map, &[0, 1, 2], &seen, &cfg)
    })?;
    Ok(vec![
        ("loss/dice", dice),
        ("loss/focal", focal),
        ("loss/dice+focal", combined),
        ("loss/mask", matched),
        ("loss/segmentation", segmentation),
    ])
}

fn encoder_check() -> Result<f64> {
    let cfg = EncoderConfig {
        image_size: 8,
        patch_size: 2,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2,
        severance: SeveranceSpec::last_layer_gps(2, 0.5),
        prompt: PromptMode::Add,
        frozen: false,
        ..EncoderConfig::default()
    };
    let mut store = ParamStore::new();
    let enc = Encoder::new(cfg, &mut store, &mut rng(5))?;
    let image = Tensor::uniform([3, 8, 8], 0.0, 1.0, &mut rng(6));
    let target = Tensor::randn([4, 4, 8], 1.0, &mut rng(7));
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let noise = Tensor::randn(
            store.get(id).shape().to_vec(),
            0.1,
            &mut rng(8 + id.index() as u64),
        );
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .zip(noise.data())
            .for_each(|(v, n)| *v += n);
    }
    grad_check_params(&store, &ids, GRAD_EPS, Some(8), |g| {
        let f = enc.encode(g, &image, None)?;
        let t = g.constant(target.clone());
        let p = g.tape.mul(f, t)?;
        let s = g.tape.sigmoid(p)?;
        g.tape.sum(s)
    })
}

fn proposal_check() -> Result<f64> {
    let cfg = ProposalNetConfig {
        image_size: 8,
        stem_channels: 4,
        channels: 4,
        embed_dim: 4,
        queries: 3,
        decoder_layers: 1,
        heads: 2,
        ..ProposalNetConfig::default()
    };
    let mut store = ParamStore::new();
    let net = ProposalNet::new(cfg, &mut store, &mut rng(9))?;
    let image = Tensor::uniform([3, 8, 8], 0.0, 1.0, &mut rng(10));
    let gt = Tensor::new([2, 4], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0])?;
    let ids = net.params();
    grad_check_params(&store, &ids, GRAD_EPS, Some(6), |g| {
        let out = net.forward(g, &image)?;
        mask_loss(g, out.masks, &gt, &[(2, 0), (0, 1)], &LossConfig::default())
    })
}

/// Two-class 8×8 configuration for the assembled segmentation loss.
fn tiny_deop_config(cal: CalKind) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.mode = Mode::Deop;
    cfg.data = DatasetSpec {
        image_size: 8,
        classes: vec![
            ClassDef::from_name("background", true).expect("known name"),
            ClassDef::from_name("circle_solid", true).expect("known name"),
        ],
        min_shapes: 1,
        max_shapes: 1,
        min_radius: 2,
        max_radius: 3,
        ..DatasetSpec::default()
    };
    cfg.encoder = EncoderConfig {
        image_size: 8,
        patch_size: 2,
        embed_dim: 8,
        num_layers: 2,
        mlp_ratio: 2,
        ..cfg.encoder
    };
    cfg.proposals = ProposalNetConfig {
        image_size: 8,
        stem_channels: 4,
        channels: 4,
        embed_dim: 4,
        queries: 2,
        decoder_layers: 1,
        ..cfg.proposals
    };
    cfg.cal.kind = cal;
    cfg.cal.conv_channels = 4;
    cfg
}

fn deop_check(cal: CalKind) -> Result<f64> {
    let cfg = tiny_deop_config(cal);
    let (mut store, model) = DeopModel::new(&cfg)?;
    let sample = cfg.data.sample(Split::Train, 0)?;
    let masks = model.prepare(oracle_masks(&sample.labels, 0.0, 2, 0)?);
    let image = sample.image();
    let ids = model.segmentation_params(true);
    // move prompts and offsets off their zero initialisation
    let mut r = rng(11);
    for &id in &ids {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += r.random_range(-0.1..0.1));
    }
    let seen = [true, true];
    grad_check_params(&store, &ids, GRAD_EPS, Some(6), |g| {
        let out = model.classify(g, &image, &masks, &[0, 1])?;
        training_loss(g, out.scores, &sample.labels, &[0, 1], &seen, &cfg.loss)
    })
}

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::classify::{assemble_prediction, SegPrediction};
use crate::metrics::{hiou, Confusion};
use crate::numcore::{Graph, ParamStore, Tensor};
use crate::proposals::{label_segments, oracle_masks};
use crate::synth::Split;

fn small_config(mode: Mode) -> RunConfig {
    let mut cfg = RunConfig {
        mode,
        mask_source: MaskSource::Oracle { jitter: 0.0 },
        log_every: 0,
        ..RunConfig::default()
    };
    cfg.data.train = 4;
    cfg.data.val = 2;
    cfg.pretrain_images = 4;
    for stage in [
        &mut cfg.pretrain,
        &mut cfg.proposal_stage,
        &mut cfg.deop_stage,
    ] {
        stage.steps = 2;
        stage.batch = 2;
    }
    cfg
}

fn same_bits(a: &ParamStore, b: &ParamStore) -> bool {
    a.ids().all(|id| {
        a.get(id)
            .data()
            .iter()
            .zip(b.get(id).data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

#[test]
fn gradient_suite_passes() {
    let results = run_gradchecks(GradTarget::All).unwrap();
    assert_eq!(results.len(), 9);
    for r in results {
        assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
    }
}

#[test]
fn zero_steps_keep_the_initialisation() {
    let mut cfg = small_config(Mode::Deop);
    cfg.proposal_stage.steps = 0;
    cfg.pretrain.steps = 0;
    let (mut store, model) = DeopModel::new(&cfg).unwrap();
    let init = store.clone();
    let train = cfg.data.split(Split::Train, cfg.data.train).unwrap();
    pretrain_encoder(&cfg, &mut store, &model).unwrap();
    train_proposals(&cfg, &mut store, &model, &train).unwrap();
    assert!(same_bits(&store, &init));
}

#[test]
fn segmentation_training_leaves_frozen_parameters_alone() {
    let cfg = small_config(Mode::Deop);
    let (mut store, model) = DeopModel::new(&cfg).unwrap();
    let before = store.clone();
    let train = cfg.data.split(Split::Train, cfg.data.train).unwrap();
    let masks = mask_sets(&model, &store, &train, cfg.mask_source, 1).unwrap();
    train_deop(&cfg, &mut store, &model, &train, &masks).unwrap();
    for id in model.frozen_params() {
        assert_eq!(store.get(id), before.get(id), "{}", store.name(id));
    }
    assert_ne!(
        store.get(model.classes.offsets),
        before.get(model.classes.offsets)
    );
}

#[test]
fn every_mode_trains_a_step_and_evaluates() {
    for mode in Mode::ALL {
        let mut cfg = small_config(mode);
        cfg.deop_stage.steps = 1;
        let (mut store, model) = DeopModel::new(&cfg).unwrap();
        let train = cfg.data.split(Split::Train, cfg.data.train).unwrap();
        let val = cfg.data.split(Split::Val, cfg.data.val).unwrap();
        let tm = mask_sets(&model, &store, &train, cfg.mask_source, 1).unwrap();
        let vm = mask_sets(&model, &store, &val, cfg.mask_source, 2).unwrap();
        let log = train_deop(&cfg, &mut store, &model, &train, &tm).unwrap();
        assert_eq!(log.losses.len(), 1, "{mode}");
        let report = evaluate(&model, &store, &val, &vm).unwrap();
        assert_eq!(report.images, 2);
        assert!(
            (report.hiou - hiou(report.miou_seen, report.miou_unseen)).abs() < 1e-15,
            "{mode}"
        );
    }
}

#[test]
fn oracle_masks_with_perfect_scores_label_every_pixel() {
    let spec = RunConfig::default().data;
    let k = spec.num_classes();
    let mut confusion = Confusion::new(k);
    for i in 0..5 {
        let s = spec.sample(Split::Val, i).unwrap();
        let masks = oracle_masks(&s.labels, 0.0, 8, 0).unwrap();
        let (_, classes) = label_segments(&s.labels).unwrap();
        let mut onehot = vec![0.0; 8 * k];
        for (n, &c) in classes.iter().enumerate() {
            onehot[n * k + c as usize] = 1.0;
        }
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let fc = g.constant(Tensor::new([8, k], onehot).unwrap());
        let m = g.constant(masks.flat());
        let o = assemble_prediction(&mut g, fc, m).unwrap();
        let ids: Vec<usize> = (0..k).collect();
        let size = spec.image_size;
        let pred = SegPrediction::from_scores(g.value(o), &ids, size, size).unwrap();
        confusion.add(&pred.labels, &s.labels).unwrap();
    }
    assert_eq!(confusion.pixel_accuracy(), Some(1.0));
}

#[test]
fn seeded_training_is_reproducible() {
    let run = || {
        let cfg = small_config(Mode::Deop);
        let (mut store, model) = DeopModel::new(&cfg).unwrap();
        let train = cfg.data.split(Split::Train, cfg.data.train).unwrap();
        pretrain_encoder(&cfg, &mut store, &model).unwrap();
        train_proposals(&cfg, &mut store, &model, &train).unwrap();
        let masks = mask_sets(&model, &store, &train, MaskSource::Learned, 1).unwrap();
        train_deop(&cfg, &mut store, &model, &train, &masks).unwrap();
        let report = evaluate(&model, &store, &train, &masks).unwrap();
        (store, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert!(same_bits(&a, &b));
    assert_eq!(ra, rb);
}

#[test]
fn schedules_and_targets_parse_their_names() {
    for s in [LrSchedule::Constant, LrSchedule::Cosine] {
        assert_eq!(s.to_string().parse::<LrSchedule>().unwrap(), s);
    }
    for t in [
        GradTarget::Losses,
        GradTarget::Encoder,
        GradTarget::Proposals,
        GradTarget::Deop,
        GradTarget::All,
    ] {
        assert_eq!(t.to_string().parse::<GradTarget>().unwrap(), t);
    }
    assert!("sometimes".parse::<LrSchedule>().is_err());
    let stage = StageConfig::new(10, 1, 1.0);
    assert_eq!(stage.decay(0), 1.0);
    assert!((stage.decay(5) - 0.5).abs() < 1e-12);
    assert!(stage.decay(9) > 0.0);
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use deop::checkpoint::{self, fingerprint};
use deop::{config, dataset, Error};
use deop_core::synth::{DatasetSpec, Split};
use deop_core::{ParamStore, Tensor};

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        train: 5,
        val: 3,
        ..DatasetSpec::default()
    }
}

fn store() -> ParamStore {
    let mut s = ParamStore::new();
    s.add(
        "a.w",
        Tensor::new(
            [2, 3],
            vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 0.1],
        )
        .unwrap(),
    );
    s.add(
        "b",
        Tensor::new([4], vec![0.3, 0.7, -1.0 / 3.0, 2.0]).unwrap(),
    );
    s.add("scale", Tensor::scalar(-2.5));
    s
}

fn file_hashes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["", "train", "val"] {
        let d = dir.join(sub);
        for e in fs::read_dir(&d).unwrap() {
            let e = e.unwrap();
            if e.file_type().unwrap().is_file() {
                out.insert(
                    format!("{sub}/{}", e.file_name().to_string_lossy()),
                    fs::read(e.path()).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.ckpt");
    let s = store();
    let fp = fingerprint("arch v1");
    checkpoint::save(&path, &s, s.ids(), fp).unwrap();
    let back = checkpoint::load(&path, fp).unwrap();
    for id in s.ids() {
        let other = back.find(s.name(id)).expect("every tensor comes back");
        let (a, b) = (s.get(id), back.get(other));
        assert_eq!(a.shape(), b.shape());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    // saving what was loaded reproduces the same bytes
    let again = dir.path().join("again.ckpt");
    checkpoint::save(&again, &back, back.ids(), fp).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn checkpoint_refuses_other_architectures_and_damage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let s = store();
    checkpoint::save(&path, &s, s.ids(), fingerprint("a")).unwrap();
    let err = checkpoint::load(&path, fingerprint("b")).unwrap_err();
    assert!(matches!(err, Error::Fingerprint { .. }), "{err}");

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    match checkpoint::load(&path, fingerprint("a")).unwrap_err() {
        Error::Parse {
            path: p,
            offset,
            reason,
        } => {
            assert_eq!(p, path);
            assert!(offset < bytes.len());
            assert!(reason.contains("truncated"), "{reason}");
        }
        other => panic!("expected a parse error, got {other}"),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(
        checkpoint::load(&path, fingerprint("a")),
        Err(Error::Parse { offset: 0, .. })
    ));

    let missing = checkpoint::load(&dir.path().join("nope.ckpt"), 0).unwrap_err();
    assert!(matches!(missing, Error::MissingCheckpoint(_)));
    assert_eq!(missing.kind(), "missing-checkpoint");
}

#[test]
fn generated_datasets_are_deterministic_and_load_as_generated() {
    let spec = small_spec();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    dataset::generate(&spec, a.path()).unwrap();
    dataset::generate(&spec, b.path()).unwrap();
    let files = file_hashes(a.path());
    assert_eq!(files.len(), 1 + 2 * (spec.train + spec.val));
    assert_eq!(files, file_hashes(b.path()));

    let loaded = dataset::load(a.path()).unwrap();
    assert_eq!(loaded.spec, spec);
    assert_eq!(loaded.spec.num_classes(), 10);
    for split in [Split::Train, Split::Val] {
        for (i, s) in loaded.split(split).iter().enumerate() {
            assert_eq!(s, &spec.sample(split, i).unwrap(), "{split:?} {i}");
        }
    }
}

#[test]
fn training_split_has_no_unseen_pixels() {
    let spec = DatasetSpec {
        train: 40,
        val: 0,
        ..DatasetSpec::default()
    };
    let unseen = spec.unseen_ids();
    assert_eq!(unseen.len(), 3);
    for i in 0..spec.train {
        let s = spec.sample(Split::Train, i).unwrap();
        assert!(
            s.labels
                .labels()
                .iter()
                .all(|&l| !unseen.contains(&(l as usize))),
            "train {i}"
        );
    }
}

#[test]
fn damaged_dataset_files_name_the_file_and_offset() {
    let dir = tempfile::tempdir().unwrap();
    dataset::generate(&small_spec(), dir.path()).unwrap();
    let ppm = dataset::sample_path(dir.path(), Split::Val, 1, "ppm");
    let bytes = fs::read(&ppm).unwrap();
    fs::write(&ppm, &bytes[..bytes.len() / 2]).unwrap();
    match dataset::load(dir.path()).unwrap_err() {
        Error::Parse { path, offset, .. } => {
            assert_eq!(path, ppm);
            assert!(offset > 0 && offset <= bytes.len() / 2);
        }
        other => panic!("expected a parse error, got {other}"),
    }

    let manifest = dir.path().join(dataset::MANIFEST);
    let text = fs::read_to_string(&manifest)
        .unwrap()
        .replace("train 5", "train five");
    fs::write(&manifest, &text).unwrap();
    let err = dataset::load(dir.path()).unwrap_err();
    assert!(
        matches!(err, Error::Parse { offset, .. } if offset == text.find("train five").unwrap()),
        "{err}"
    );
}

#[test]
fn config_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    fs::write(
        &path,
        "# comment\nseed = 11\ndeop_steps = 40\n\ndeop_lr = 0.5\n",
    )
    .unwrap();
    let cfg = config::load(Some(&path), &[("deop_steps".into(), "9".into())]).unwrap();
    assert_eq!(cfg.seed, 11);
    assert_eq!(cfg.data.seed, 11);
    assert_eq!(cfg.deop_stage.steps, 9);
    assert_eq!(cfg.deop_stage.lr, 0.5);

    fs::write(&path, "seed = 1\ndeop_steps = lots\n").unwrap();
    let err = config::load(Some(&path), &[]).unwrap_err();
    assert!(matches!(err, Error::Parse { offset: 9, .. }), "{err}");
}

#[test]
fn documented_defaults_load_back_to_the_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("defaults.cfg");
    fs::write(&path, deop::cli::documented_defaults()).unwrap();
    assert_eq!(
        config::load(Some(&path), &[]).unwrap(),
        config::load(None, &[]).unwrap()
    );
}

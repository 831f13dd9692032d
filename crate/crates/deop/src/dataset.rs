//! On-disk dataset: `manifest.txt` plus `train/` and `val/` directories
//! holding `NNNN.ppm` images and `NNNN.pgm` label maps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use deop_core::metrics::SegLabelMap;
use deop_core::synth::{name_seed, ClassDef, DatasetSpec, Sample, Split};

use crate::error::{io_err, Error, Result};
use crate::pnm;

pub const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "deop-dataset 1";

/// A loaded dataset: the spec recorded in the manifest and both splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            _ => &self.val,
        }
    }
}

pub fn sample_path(dir: &Path, split: Split, index: usize, ext: &str) -> PathBuf {
    dir.join(split.name()).join(format!("{index:04}.{ext}"))
}

pub fn manifest_text(spec: &DatasetSpec) -> String {
    let mut m = String::new();
    let _ = writeln!(m, "{HEADER}");
    let _ = writeln!(m, "image_size {}", spec.image_size);
    let _ = writeln!(m, "train {}", spec.train);
    let _ = writeln!(m, "val {}", spec.val);
    let _ = writeln!(m, "noise {}", spec.noise);
    let _ = writeln!(m, "seed {}", spec.seed);
    let _ = writeln!(m, "shapes {} {}", spec.min_shapes, spec.max_shapes);
    let _ = writeln!(m, "radius {} {}", spec.min_radius, spec.max_radius);
    for (id, c) in spec.classes.iter().enumerate() {
        let seen = if c.seen { "seen" } else { "unseen" };
        let _ = writeln!(
            m,
            "class {id} {} {seen} {:016x}",
            c.name,
            name_seed(&c.name)
        );
    }
    m
}

/// Writes every sample of both splits and the manifest.
pub fn generate(spec: &DatasetSpec, dir: &Path) -> Result<()> {
    spec.validate()?;
    for split in [Split::Train, Split::Val] {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        for i in 0..spec.count(split) {
            let s = spec.sample(split, i)?;
            pnm::write_ppm(&sample_path(dir, split, i, "ppm"), s.size, s.size, &s.rgb)?;
            pnm::write_pgm(
                &sample_path(dir, split, i, "pgm"),
                s.size,
                s.size,
                s.labels.labels(),
            )?;
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest_text(spec)).map_err(io_err(&path))
}

/// Parses a manifest back into the spec that produced it.
pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetSpec> {
    let mut spec = DatasetSpec {
        classes: Vec::new(),
        ..DatasetSpec::default()
    };
    let mut offset = 0;
    let mut header = false;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let fail = |reason: String| Error::Parse {
            path: path.into(),
            offset: at,
            reason,
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header {
            if line != HEADER {
                return Err(fail(format!("expected `{HEADER}`")));
            }
            header = true;
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| -> Result<usize> {
            words
                .get(i)
                .and_then(|w| w.parse().ok())
                .ok_or_else(|| fail(format!("`{}` needs an integer in position {i}", words[0])))
        };
        match words[0] {
            "image_size" => spec.image_size = num(1)?,
            "train" => spec.train = num(1)?,
            "val" => spec.val = num(1)?,
            "seed" => {
                spec.seed = words
                    .get(1)
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| fail("bad seed".into()))?
            }
            "noise" => {
                spec.noise = words
                    .get(1)
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| fail("bad noise".into()))?
            }
            "shapes" => (spec.min_shapes, spec.max_shapes) = (num(1)?, num(2)?),
            "radius" => (spec.min_radius, spec.max_radius) = (num(1)?, num(2)?),
            "class" => {
                let id = num(1)?;
                if id != spec.classes.len() || words.len() < 4 {
                    return Err(fail(format!(
                        "class lines must be numbered from 0 in order, got {id}"
                    )));
                }
                let seen = match words[3] {
                    "seen" => true,
                    "unseen" => false,
                    other => return Err(fail(format!("expected seen|unseen, got `{other}`"))),
                };
                let class = ClassDef::from_name(words[2], seen).map_err(|e| fail(e.to_string()))?;
                spec.classes.push(class);
            }
            other => return Err(fail(format!("unknown manifest key `{other}`"))),
        }
    }
    if !header {
        return Err(Error::Parse {
            path: path.into(),
            offset: 0,
            reason: "empty manifest".into(),
        });
    }
    spec.validate().map_err(|e| Error::Parse {
        path: path.into(),
        offset,
        reason: e.to_string(),
    })?;
    Ok(spec)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetSpec> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    parse_manifest(&text, &path)
}

fn load_sample(
    dir: &Path,
    split: Split,
    index: usize,
    size: usize,
    classes: usize,
) -> Result<Sample> {
    let ppm = sample_path(dir, split, index, "ppm");
    let pgm = sample_path(dir, split, index, "pgm");
    let img = pnm::read_ppm(&ppm)?;
    let lab = pnm::read_pgm(&pgm)?;
    for (path, r) in [(&ppm, &img), (&pgm, &lab)] {
        if (r.width, r.height) != (size, size) {
            return Err(Error::Parse {
                path: path.clone(),
                offset: 0,
                reason: format!(
                    "image is {}x{}, manifest says {size}x{size}",
                    r.width, r.height
                ),
            });
        }
    }
    if let Some(p) = lab
        .data
        .iter()
        .position(|&l| l as usize >= classes && l != deop_core::metrics::IGNORE)
    {
        return Err(Error::Parse {
            path: pgm,
            offset: p,
            reason: format!("label {} outside the class table", lab.data[p]),
        });
    }
    let labels = SegLabelMap::new(size, size, lab.data)?;
    Ok(Sample {
        size,
        rgb: img.data,
        labels,
    })
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let spec = read_manifest(dir)?;
    let classes = spec.num_classes();
    let read = |split: Split| -> Result<Vec<Sample>> {
        (0..spec.count(split))
            .map(|i| load_sample(dir, split, i, spec.image_size, classes))
            .collect()
    };
    let train = read(Split::Train)?;
    let val = read(Split::Val)?;
    let unseen = spec.unseen_ids();
    for (i, s) in train.iter().enumerate() {
        if s.labels
            .labels()
            .iter()
            .any(|&l| unseen.contains(&(l as usize)))
        {
            return Err(Error::Core(deop_core::Error::Protocol(format!(
                "training sample {i} contains unseen-class pixels"
            ))));
        }
    }
    Ok(Dataset { spec, train, val })
}

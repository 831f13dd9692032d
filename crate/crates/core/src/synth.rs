//! Deterministic synthetic segmentation data: textured shapes on a noisy
//! background, with a seen/unseen class split.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::SegLabelMap;
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Solid,
    Stripes,
    Checker,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether `(dx, dy)`, relative to the centre, lies inside a shape of
    /// half-extent `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            // apex at the top, base along the bottom edge
            ShapeKind::Triangle => dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Solid, Texture::Stripes, Texture::Checker];

    pub fn name(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Stripes => "stripes",
            Texture::Checker => "checker",
        }
    }

    /// Whether pixel `(x, y)` takes the bright shade.
    fn bright(self, x: usize, y: usize) -> bool {
        match self {
            Texture::Solid => true,
            Texture::Stripes => (y / 2) % 2 == 0,
            Texture::Checker => ((x / 2) + (y / 2)) % 2 == 0,
        }
    }
}

/// One class of the catalog. Background has no shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDef {
    pub name: String,
    pub look: Option<(ShapeKind, Texture)>,
    pub seen: bool,
}

impl ClassDef {
    /// `background` or `<shape>_<texture>`, e.g. `circle_checker`.
    pub fn from_name(name: &str, seen: bool) -> Result<Self> {
        if name == "background" {
            return Ok(Self {
                name: name.to_string(),
                look: None,
                seen,
            });
        }
        let look = name.split_once('_').and_then(|(s, t)| {
            let shape = ShapeKind::ALL.into_iter().find(|k| k.name() == s)?;
            let texture = Texture::ALL.into_iter().find(|k| k.name() == t)?;
            Some((shape, texture))
        });
        match look {
            Some(look) => Ok(Self {
                name: name.to_string(),
                look: Some(look),
                seen,
            }),
            None => Err(Error::Config(format!("unknown class name `{name}`"))),
        }
    }
}

/// Stable 64-bit FNV-1a hash, used to seed per-class embeddings.
pub fn name_seed(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    /// Scenes over every class, for image-level encoder pretraining.
    Pretrain,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Pretrain => "pretrain",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Pretrain => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub classes: Vec<ClassDef>,
    pub train: usize,
    pub val: usize,
    /// Standard deviation of additive pixel noise, in `[0, 1]` intensity units.
    pub noise: f64,
    pub seed: u64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Half-extent range of a shape, in pixels.
    pub min_radius: usize,
    pub max_radius: usize,
}

/// Saturated hues, one per shape in an image.
const PALETTE: [[f64; 3]; 7] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.92, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
];

const DARK_SHADE: f64 = 0.35;
const PLACEMENT_TRIES: usize = 100;
const LAYOUT_TRIES: usize = 20;

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::with_unseen(&["circle_checker", "square_stripes", "triangle_solid"])
    }
}

impl DatasetSpec {
    /// The 3×3 shape-texture catalog plus background, with the named
    /// classes held out.
    pub fn with_unseen(unseen: &[&str]) -> Self {
        let mut classes = vec![ClassDef {
            name: "background".to_string(),
            look: None,
            seen: true,
        }];
        for s in ShapeKind::ALL {
            for t in Texture::ALL {
                let name = format!("{}_{}", s.name(), t.name());
                let seen = !unseen.contains(&name.as_str());
                classes.push(ClassDef {
                    name,
                    look: Some((s, t)),
                    seen,
                });
            }
        }
        Self {
            image_size: 64,
            classes,
            train: 200,
            val: 50,
            noise: 0.04,
            seed: 0,
            min_shapes: 2,
            max_shapes: 5,
            min_radius: 8,
            max_radius: 12,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&c| self.classes[c].seen)
            .collect()
    }

    pub fn unseen_ids(&self) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&c| !self.classes[c].seen)
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Pretrain => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.classes.len() < 2 || self.classes.len() > 255 {
            return bad("class count must be in 2..=255");
        }
        if self.classes[0].look.is_some() || !self.classes[0].seen {
            return bad("class 0 must be the seen background");
        }
        if self.classes[1..].iter().any(|c| c.look.is_none()) {
            return bad("only class 0 may be background");
        }
        let seen_objects = self.classes[1..].iter().filter(|c| c.seen).count();
        if self.min_shapes < 1 || self.min_shapes > self.max_shapes {
            return bad("need 1 <= min_shapes <= max_shapes");
        }
        if self.max_shapes > seen_objects || self.max_shapes > PALETTE.len() {
            return bad("max_shapes exceeds the distinct seen classes or colours available");
        }
        if self.min_radius < 2
            || self.min_radius > self.max_radius
            || 2 * self.max_radius + 1 > self.image_size
        {
            return bad("radius range does not fit the image");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1]");
        }
        Ok(())
    }

    /// Deterministic sample `index` of `split`.
    pub fn sample(&self, split: Split, index: usize) -> Result<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((split.stream() << 40) | index as u64);
        let objects: Vec<usize> = match split {
            Split::Train => (1..self.classes.len())
                .filter(|&c| self.classes[c].seen)
                .collect(),
            _ => (1..self.classes.len()).collect(),
        };
        let k = rng.random_range(self.min_shapes..=self.max_shapes);
        let (r_lo, r_hi) = (self.min_radius, self.max_radius);
        let mut picked: Vec<usize> = Vec::with_capacity(k);
        if split == Split::Val {
            let unseen: Vec<usize> = objects
                .iter()
                .copied()
                .filter(|&c| !self.classes[c].seen)
                .collect();
            if let Some(&u) = unseen.as_slice().choose(&mut rng) {
                picked.push(u);
            }
        }
        let mut rest: Vec<usize> = objects
            .into_iter()
            .filter(|c| !picked.contains(c))
            .collect();
        rest.shuffle(&mut rng);
        picked.extend(rest.into_iter().take(k - picked.len()));
        let mut colours: Vec<usize> = (0..PALETTE.len()).collect();
        colours.shuffle(&mut rng);

        let size = self.image_size;
        let gray = rng.random_range(0.35..0.65);
        let mut rgb = vec![0.0f64; size * size * 3];
        for px in rgb.chunks_mut(3) {
            px.fill(gray);
        }
        let mut labels = vec![0u8; size * size];
        let layout = (0..LAYOUT_TRIES)
            .find_map(|_| self.layout(picked.len(), r_lo, r_hi, &mut rng))
            .ok_or_else(|| Error::Generation {
                index,
                reason: format!(
                    "could not place {} shapes after {LAYOUT_TRIES} layouts",
                    picked.len()
                ),
            })?;
        for (slot, (&class, &(r, cx, cy))) in picked.iter().zip(&layout).enumerate() {
            let (shape, texture) = self.classes[class].look.expect("object class");
            let b = (cx - r, cy - r, cx + r, cy + r);
            let brightness = rng.random_range(0.8..1.0);
            let hue = PALETTE[colours[slot]];
            for y in b.1..=b.3 {
                for x in b.0..=b.2 {
                    let (dx, dy) = (x as f64 - cx as f64, y as f64 - cy as f64);
                    if !shape.contains(dx, dy, r as f64) {
                        continue;
                    }
                    let shade = if texture.bright(x, y) {
                        brightness
                    } else {
                        brightness * DARK_SHADE
                    };
                    let p = y * size + x;
                    labels[p] = class as u8;
                    for ch in 0..3 {
                        rgb[p * 3 + ch] = hue[ch] * shade;
                    }
                }
            }
        }
        let noise = Normal::new(0.0, self.noise.max(1e-12)).expect("finite std");
        let rgb = rgb
            .into_iter()
            .map(|v| {
                let v = if self.noise > 0.0 {
                    v + noise.sample(&mut rng)
                } else {
                    v
                };
                libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
            })
            .collect();
        Ok(Sample {
            size,
            rgb,
            labels: SegLabelMap::new(size, size, labels)?,
        })
    }

    /// Radius and centre per shape with pairwise-disjoint bounding boxes
    /// (one pixel apart), or `None` if some shape found no room.
    fn layout(
        &self,
        count: usize,
        r_lo: usize,
        r_hi: usize,
        rng: &mut ChaCha8Rng,
    ) -> Option<Vec<(usize, usize, usize)>> {
        let size = self.image_size;
        let mut placed: Vec<(usize, usize, usize)> = Vec::with_capacity(count);
        for _ in 0..count {
            let next = (0..PLACEMENT_TRIES).find_map(|_| {
                let r = rng.random_range(r_lo..=r_hi);
                let cx = rng.random_range(r..size - r);
                let cy = rng.random_range(r..size - r);
                let clear = placed.iter().all(|&(q, ox, oy)| {
                    ox + q + 1 < cx - r
                        || cx + r + 1 < ox - q
                        || oy + q + 1 < cy - r
                        || cy + r + 1 < oy - q
                });
                clear.then_some((r, cx, cy))
            })?;
            placed.push(next);
        }
        Some(placed)
    }

    /// Every sample of a split in index order.
    pub fn split(&self, split: Split, count: usize) -> Result<Vec<Sample>> {
        self.validate()?;
        (0..count).map(|i| self.sample(split, i)).collect()
    }
}

/// An RGB image, stored interleaved as bytes, and its label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub size: usize,
    pub rgb: Vec<u8>,
    pub labels: SegLabelMap,
}

impl Sample {
    /// `[3×H×W]` tensor with values in `[0, 1]`.
    pub fn image(&self) -> Tensor {
        let hw = self.size * self.size;
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[c * hw + p] = self.rgb[p * 3 + c] as f64 / 255.0;
            }
        }
        Tensor::new([3, self.size, self.size], data).expect("sized by construction")
    }

    /// Fraction of pixels per class, over `classes` entries.
    pub fn class_fractions(&self, classes: usize) -> Vec<f64> {
        let mut f = vec![0.0; classes];
        let labels = self.labels.labels();
        for &l in labels {
            if (l as usize) < classes {
                f[l as usize] += 1.0;
            }
        }
        let n = labels.len() as f64;
        f.iter_mut().for_each(|v| *v /= n);
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_catalog_has_ten_classes_and_three_unseen() {
        let spec = DatasetSpec::default();
        assert_eq!(spec.num_classes(), 10);
        assert_eq!(spec.unseen_ids(), vec![3, 5, 7]);
        spec.validate().unwrap();
    }

    #[test]
    fn samples_are_deterministic() {
        let spec = DatasetSpec::default();
        assert_eq!(
            spec.sample(Split::Val, 7).unwrap(),
            spec.sample(Split::Val, 7).unwrap()
        );
        assert_ne!(
            spec.sample(Split::Val, 7).unwrap(),
            spec.sample(Split::Val, 8).unwrap()
        );
        assert_ne!(
            spec.sample(Split::Train, 7).unwrap(),
            spec.sample(Split::Val, 7).unwrap()
        );
    }

    #[test]
    fn training_split_has_no_unseen_pixel() {
        let spec = DatasetSpec::default();
        let unseen = spec.unseen_ids();
        for s in spec.split(Split::Train, spec.train).unwrap() {
            assert!(s
                .labels
                .labels()
                .iter()
                .all(|&l| !unseen.contains(&(l as usize))));
        }
    }

    #[test]
    fn every_validation_image_shows_an_unseen_class() {
        let spec = DatasetSpec::default();
        let unseen = spec.unseen_ids();
        for s in spec.split(Split::Val, spec.val).unwrap() {
            let present = s.labels.present();
            assert!(present.iter().any(|&l| unseen.contains(&(l as usize))));
            assert!(present.len() >= 1 + spec.min_shapes);
        }
    }

    #[test]
    fn impossible_placement_reports_the_sample() {
        let mut spec = DatasetSpec::default();
        spec.image_size = 24;
        spec.min_radius = 10;
        spec.max_radius = 10;
        spec.min_shapes = 3;
        let err = spec.sample(Split::Train, 4).unwrap_err();
        assert!(matches!(err, Error::Generation { index: 4, .. }), "{err:?}");
    }

    #[test]
    fn fnv_hash_matches_reference_vectors() {
        assert_eq!(name_seed(""), 0xcbf29ce484222325);
        assert_eq!(name_seed("a"), 0xaf63dc4c8601ec8c);
    }
}

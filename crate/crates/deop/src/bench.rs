//! One-pass versus multi-pass classification: analytic FLOPs and measured
//! single-threaded wall-clock time.

use std::time::Instant;

use deop_core::cal::CalConfig;
use deop_core::classify::{classify_segments, SegPrediction};
use deop_core::cost::{flops_multi_pass, flops_one_pass};
use deop_core::encoder::{Encoder, EncoderConfig, PromptMode, SeveranceSpec};
use deop_core::masks::{resample_bilinear, MaskSet};
use deop_core::numcore::{Graph, ParamStore, Tensor};
use deop_core::pipeline::DeopModel;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "n_prime,flops_one,flops_multi,ratio_flops,t_one_ms,t_multi_ms,ratio_time";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n_prime: usize,
    pub flops_one: u64,
    pub flops_multi: u64,
    pub t_one_ms: f64,
    pub t_multi_ms: f64,
}

impl BenchRow {
    pub fn ratio_flops(&self) -> f64 {
        self.flops_multi as f64 / self.flops_one as f64
    }

    pub fn ratio_time(&self) -> f64 {
        self.t_multi_ms / self.t_one_ms
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}",
            self.n_prime,
            self.flops_one,
            self.flops_multi,
            self.ratio_flops(),
            self.t_one_ms,
            self.t_multi_ms,
            self.ratio_time()
        )
    }
}

pub fn csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// `key=value` lines per row, keyed by `n_prime`.
pub fn summary(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let n = r.n_prime;
        out.push_str(&format!(
            "flops_one={}\nflops_multi@{n}={}\nratio_flops@{n}={:.4}\nt_one_ms={:.4}\nt_multi_ms@{n}={:.4}\nratio_time@{n}={:.4}\n",
            r.flops_one,
            r.flops_multi,
            r.ratio_flops(),
            r.t_one_ms,
            r.t_multi_ms,
            r.ratio_time()
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub cal: Option<CalConfig>,
    pub n_primes: Vec<usize>,
    /// Timed images per row; fewer than 20 is rejected.
    pub images: usize,
    /// Untimed images run first.
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            cal: None,
            n_primes: vec![1, 5, 20],
            images: 20,
            warmup: 3,
        }
    }
}

pub const MIN_TIMED_IMAGES: usize = 20;

/// The encoder as the multi-pass stream sees it: no severance, no prompts.
pub fn plain_encoder(model: &DeopModel) -> Encoder {
    let mut enc = model.encoder.clone();
    enc.cfg = plain_config(&enc.cfg);
    enc
}

pub fn plain_config(cfg: &EncoderConfig) -> EncoderConfig {
    EncoderConfig {
        severance: SeveranceSpec::none(cfg.num_layers),
        prompt: PromptMode::Off,
        ..cfg.clone()
    }
}

/// Bounding box `(y0, x0, y1, x1)`, exclusive ends, of `mask > 0.5`.
pub fn bbox(mask: &[f64], size: usize) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (p, _) in mask.iter().enumerate().filter(|(_, &v)| v > 0.5) {
        let (y, x) = (p / size, p % size);
        b = Some(match b {
            None => (y, x, y + 1, x + 1),
            Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
        });
    }
    b
}

/// The image inside the proposal's bounding box with pixels outside the
/// proposal zeroed, resized to the full input size. An empty proposal
/// crops nothing and yields the whole image.
pub fn crop(image: &Tensor, mask: &[f64]) -> Tensor {
    let &[c, size, _] = image.shape() else {
        panic!("crop expects [C×H×W]")
    };
    let Some((y0, x0, y1, x1)) = bbox(mask, size) else {
        return image.clone();
    };
    let (h, w) = (y1 - y0, x1 - x0);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let p = (y0 + y) * size + x0 + x;
                if mask[p] > 0.5 {
                    out[(ch * h + y) * w + x] = image.data()[ch * size * size + p];
                }
            }
        }
    }
    resample_bilinear(
        &Tensor::new([c, h, w], out).expect("sized above"),
        size,
        size,
    )
}

/// Class index for each of `n_prime` crops (proposals reused cyclically),
/// each crop through its own encoder pass.
pub fn multi_pass(
    model: &DeopModel,
    plain: &Encoder,
    store: &ParamStore,
    image: &Tensor,
    masks: &MaskSet,
    n_prime: usize,
) -> Result<Vec<usize>> {
    let size = image.shape()[1];
    let masks = masks.resample(size, size);
    let all: Vec<usize> = (0..model.classes.len()).collect();
    let tokens = plain.cfg.num_patches();
    let d = plain.cfg.embed_dim;
    (0..n_prime)
        .map(|i| {
            let cropped = crop(image, masks.mask(i % masks.count()));
            let mut g = Graph::inference(store);
            let f = plain.encode(&mut g, &cropped, None)?;
            let f = g.tape.reshape(f, &[tokens, d])?;
            let pooled = g.tape.col_sums(f)?;
            let pooled = g.tape.reshape(pooled, &[1, d])?;
            let emb = model.classes.embeddings(&mut g, &all)?;
            let s = classify_segments(&mut g, pooled, emb, model.scores)?;
            let row = g.value(s).row(0);
            Ok((0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best }))
        })
        .collect()
}

/// The full one-pass classification of an image.
pub fn one_pass(
    model: &DeopModel,
    store: &ParamStore,
    image: &Tensor,
    masks: &MaskSet,
) -> Result<SegPrediction> {
    Ok(model.predict(store, image, &model.prepare(masks.clone()))?)
}

/// Milliseconds taken by `f`.
pub fn time_ms<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64() * 1e3)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// FLOP columns of one row; `cal` is the anchor decoder's configuration
/// when the model has one.
pub fn flop_row(model: &DeopModel, cal: Option<&CalConfig>, n_prime: usize) -> (u64, u64) {
    let n = model.proposals.cfg.queries as u64;
    let cal = model.cal.as_ref().and(cal);
    let one = flops_one_pass(&model.encoder.cfg, cal, n, model.classes.len() as u64).total();
    (
        one,
        flops_multi_pass(&plain_config(&model.encoder.cfg), n_prime as u64),
    )
}

/// Runs both streams on the same images (cycled if there are fewer than
/// needed) and reports medians over the timed images.
pub fn timed_compare(
    model: &DeopModel,
    store: &ParamStore,
    images: &[(Tensor, MaskSet)],
    opts: &BenchOptions,
) -> Result<Vec<BenchRow>> {
    if images.is_empty() {
        return Err(Error::Failed("bench needs at least one image".into()));
    }
    if opts.images < MIN_TIMED_IMAGES {
        return Err(Error::Config(format!(
            "bench needs at least {MIN_TIMED_IMAGES} timed images"
        )));
    }
    if opts.n_primes.iter().any(|&n| n == 0) {
        return Err(Error::Config("n_prime values must be at least 1".into()));
    }
    let plain = plain_encoder(model);
    let pick = |i: usize| &images[i % images.len()];
    let mut one = Vec::with_capacity(opts.images);
    for i in 0..opts.warmup + opts.images {
        let (img, masks) = pick(i);
        let (out, ms) = time_ms(|| one_pass(model, store, img, masks));
        out?;
        if i >= opts.warmup {
            one.push(ms);
        }
    }
    let t_one_ms = median(&mut one);
    opts.n_primes
        .iter()
        .map(|&n_prime| {
            let mut multi = Vec::with_capacity(opts.images);
            for i in 0..opts.warmup + opts.images {
                let (img, masks) = pick(i);
                let (out, ms) = time_ms(|| multi_pass(model, &plain, store, img, masks, n_prime));
                out?;
                if i >= opts.warmup {
                    multi.push(ms);
                }
            }
            let (flops_one, flops_multi) = flop_row(model, opts.cal.as_ref(), n_prime);
            Ok(BenchRow {
                n_prime,
                flops_one,
                flops_multi,
                t_one_ms,
                t_multi_ms: median(&mut multi),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_zeroes_outside_the_mask_and_fills_the_frame() {
        let image = Tensor::full([1, 4, 4], 1.0);
        let mut mask = vec![0.0; 16];
        for p in [5, 6, 9] {
            mask[p] = 1.0;
        }
        assert_eq!(bbox(&mask, 4), Some((1, 1, 3, 3)));
        let c = crop(&image, &mask);
        assert_eq!(c.shape(), &[1, 4, 4]);
        // pixel 10 is inside the box but outside the mask
        assert_eq!(c.data()[15], 0.0);
        assert_eq!(c.data()[0], 1.0);
        assert_eq!(crop(&image, &[0.0; 16]), image);
    }

    #[test]
    fn medians_of_odd_and_even_counts() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

//! Wall-clock properties of the benchmark. Kept in one test so nothing else
//! in this binary runs concurrently with the timed sections.

use deop::bench::{self, median, multi_pass, plain_encoder, time_ms, BenchOptions};
use deop_core::masks::MaskSet;
use deop_core::pipeline::{mask_sets, DeopModel, MaskSource, RunConfig};
use deop_core::synth::Split;
use deop_core::{Graph, Tensor};

#[test]
fn timing_follows_the_cost_model() {
    let cfg = RunConfig::default();
    let (store, model) = DeopModel::new(&cfg).unwrap();
    let val = cfg.data.split(Split::Val, 20).unwrap();
    let masks = mask_sets(&model, &store, &val, MaskSource::Oracle { jitter: 0.0 }, 0).unwrap();
    let images: Vec<(Tensor, MaskSet)> = val
        .iter()
        .zip(masks)
        .map(|(s, m)| (s.image(), m.set))
        .collect();

    assert!(bench::timed_compare(&model, &store, &[], &BenchOptions::default()).is_err());

    // one crop covering the whole image costs one plain encoder pass
    let plain = plain_encoder(&model);
    let size = cfg.data.image_size;
    let full = MaskSet::new(Tensor::full([1, size, size], 1.0)).unwrap();
    let (mut crop_ms, mut encode_ms) = (Vec::new(), Vec::new());
    for (i, (image, _)) in images.iter().cycle().take(23).enumerate() {
        let (_, c) = time_ms(|| multi_pass(&model, &plain, &store, image, &full, 1).unwrap());
        let (_, e) = time_ms(|| {
            let mut g = Graph::inference(&store);
            plain.encode(&mut g, image, None).unwrap();
        });
        if i >= 3 {
            crop_ms.push(c);
            encode_ms.push(e);
        }
    }
    let (c, e) = (median(&mut crop_ms), median(&mut encode_ms));
    assert!(
        (c - e).abs() <= 0.1 * e,
        "full-image crop {c:.3} ms vs encoder {e:.3} ms"
    );

    let opts = BenchOptions {
        cal: Some(cfg.cal.clone()),
        n_primes: vec![1, 2, 5, 10, 20],
        ..BenchOptions::default()
    };
    let rows = bench::timed_compare(&model, &store, &images, &opts).unwrap();
    for w in rows.windows(2) {
        assert!(
            w[1].ratio_time() > w[0].ratio_time(),
            "{}",
            bench::csv(&rows)
        );
        assert!(w[1].ratio_flops() > w[0].ratio_flops());
        assert_eq!(w[0].flops_one, w[1].flops_one);
    }

    let opts = BenchOptions {
        n_primes: vec![2, 5],
        ..opts
    };
    for run in 0..5 {
        for row in bench::timed_compare(&model, &store, &images, &opts).unwrap() {
            assert!(
                row.t_one_ms < row.t_multi_ms,
                "run {run}: {}",
                row.csv_line()
            );
        }
    }
}

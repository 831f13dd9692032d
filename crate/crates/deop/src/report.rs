//! Plain-text `key=value` rendering of evaluation reports.

use std::fmt::Write as _;

use deop_core::metrics::{EvalReport, Recall};

fn fmt_recall(r: Recall) -> String {
    if r.is_empty() {
        "none".into()
    } else {
        format!("{:.6}", r.value())
    }
}

/// One `key=value` line per figure, in a fixed order.
pub fn eval_text(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "images={}", r.images);
    let _ = writeln!(s, "pixel_accuracy={:.6}", r.pixel_accuracy);
    let _ = writeln!(s, "miou_seen={:.6}", r.miou_seen);
    let _ = writeln!(s, "miou_unseen={:.6}", r.miou_unseen);
    let _ = writeln!(s, "hiou={:.6}", r.hiou);
    for e in &r.recall {
        let t = (e.threshold * 100.0).round() as u32;
        let _ = writeln!(s, "recall@{t}={}", fmt_recall(e.all));
        let _ = writeln!(s, "recall@{t}_seen={}", fmt_recall(e.seen));
        let _ = writeln!(s, "recall@{t}_unseen={}", fmt_recall(e.unseen));
    }
    for ((name, iou), seen) in r.class_names.iter().zip(&r.iou).zip(&r.seen) {
        let tag = if *seen { "seen" } else { "unseen" };
        let v = iou.map_or("none".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "iou.{name}={v} ({tag})");
    }
    if r.empty {
        let _ = writeln!(s, "empty=true");
    }
    s
}

/// Value of `key` in `key=value` text.
pub fn lookup<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|l| l.split_once('=').filter(|(k, _)| *k == key).map(|(_, v)| v))
}

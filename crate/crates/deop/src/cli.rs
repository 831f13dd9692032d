//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};
use deop_core::metrics::EvalReport;
use deop_core::numcore::{ParamId, ParamStore};
use deop_core::pipeline::{
    evaluate, mask_sets, pretrain_encoder, run_gradchecks, train_deop, train_proposals, DeopModel,
    GradTarget, MaskSource, PreparedMasks, RunConfig, TrainLog,
};
use deop_core::synth::{DatasetSpec, Sample};

use crate::bench::{self, BenchOptions};
use crate::checkpoint::{self, fingerprint};
use crate::config;
use crate::dataset::{self, Dataset};
use crate::error::{io_err, Error, Result};
use crate::pnm;
use crate::report;

pub const ENCODER_CKPT: &str = "encoder.ckpt";
pub const PROPOSALS_CKPT: &str = "proposals.ckpt";
pub const DEOP_CKPT: &str = "deop.ckpt";
pub const EFFECTIVE_CONFIG: &str = "config.txt";

/// Mask-seed offsets so train and val jitter differ.
const TRAIN_MASK_STREAM: u64 = 1;
const VAL_MASK_STREAM: u64 = 2;

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value configuration file"),
    );
    config::KEYS.iter().fold(cmd, |cmd, (key, help)| {
        cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .help(*help)
                .help_heading("Configuration"),
        )
    })
}

fn dir_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("DIR")
        .required(true)
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn data_arg() -> Arg {
    dir_arg("data", "dataset directory written by gen-data")
}

fn run_arg() -> Arg {
    dir_arg("run", "directory holding checkpoints")
}

pub fn command() -> Command {
    let sub =
        |name: &'static str, about: &'static str| config_args(Command::new(name).about(about));
    Command::new("deop")
        .about(
            "Zero-shot segmentation on synthetic scenes: data, training, evaluation and benchmarks",
        )
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            sub("gen-data", "Generate a synthetic dataset")
                .arg(
                    Arg::new("spec")
                        .long("spec")
                        .value_name("default|FILE")
                        .default_value("default")
                        .help("`default` or a configuration file with the data keys"),
                )
                .arg(dir_arg("out", "output directory")),
        )
        .subcommand(
            sub(
                "pretrain-encoder",
                "Align the encoder with the class embeddings",
            )
            .arg(data_arg())
            .arg(run_arg()),
        )
        .subcommand(
            sub("train-proposals", "Train the mask proposal network")
                .arg(data_arg())
                .arg(run_arg()),
        )
        .subcommand(
            sub(
                "train-deop",
                "Train prompts, offsets and the anchor decoder",
            )
            .arg(data_arg())
            .arg(run_arg()),
        )
        .subcommand(
            sub("eval", "Evaluate on the validation split")
                .arg(data_arg())
                .arg(run_arg())
                .arg(
                    Arg::new("dump")
                        .long("dump")
                        .value_name("DIR")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("also write predicted label maps as PGM"),
                ),
        )
        .subcommand(
            sub(
                "bench",
                "Compare one-pass and multi-pass classification cost",
            )
            .arg(data_arg())
            .arg(
                Arg::new("run")
                    .long("run")
                    .value_name("DIR")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("checkpoints to benchmark (default: untrained initialisation)"),
            )
            .arg(
                Arg::new("n-prime")
                    .long("n-prime")
                    .value_name("LIST")
                    .default_value("1,5,20")
                    .help("comma-separated crop counts for the multi-pass stream"),
            )
            .arg(
                Arg::new("images")
                    .long("images")
                    .value_name("N")
                    .default_value("20")
                    .value_parser(clap::value_parser!(usize))
                    .help("timed images per row"),
            )
            .arg(
                Arg::new("warmup")
                    .long("warmup")
                    .value_name("N")
                    .default_value("3")
                    .value_parser(clap::value_parser!(usize))
                    .help("untimed images run first"),
            )
            .arg(
                Arg::new("report")
                    .long("report")
                    .value_name("FILE")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("also write a key=value summary"),
            ),
        )
        .subcommand(
            sub("gradcheck", "Finite-difference gradient checks").arg(
                Arg::new("target")
                    .long("target")
                    .value_name("TARGET")
                    .default_value("all")
                    .help("losses | encoder | proposals | deop | all"),
            ),
        )
        .subcommand(
            sub(
                "dump-heatmaps",
                "Write images, predictions and pooling heatmaps as PPM/PGM",
            )
            .arg(data_arg())
            .arg(run_arg())
            .arg(dir_arg("out", "output directory"))
            .arg(
                Arg::new("images")
                    .long("images")
                    .value_name("N")
                    .default_value("4")
                    .value_parser(clap::value_parser!(usize))
                    .help("validation images to dump"),
            ),
        )
        .subcommand(Command::new("config").about("Print every configuration key with its default"))
}

fn load_config(m: &ArgMatches) -> Result<RunConfig> {
    load_config_onto(RunConfig::default(), m)
}

/// `cfg`, then the `--config` file, then every `--key value` option.
fn load_config_onto(cfg: RunConfig, m: &ArgMatches) -> Result<RunConfig> {
    let file = m.get_one::<String>("config").map(PathBuf::from);
    let overrides: Vec<(String, String)> = config::KEYS
        .iter()
        .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    config::load_onto(cfg, file.as_deref(), &overrides)
}

/// Makes the configuration describe the dataset on disk.
fn adopt_dataset(cfg: &mut RunConfig, spec: &DatasetSpec) {
    if cfg.data != *spec {
        log::info!("using the data settings recorded in the dataset manifest");
    }
    cfg.data = spec.clone();
    cfg.encoder.image_size = spec.image_size;
    cfg.proposals.image_size = spec.image_size;
}

/// Configuration, data and a freshly initialised model.
struct Session {
    cfg: RunConfig,
    data: Dataset,
    model: DeopModel,
    store: ParamStore,
}

fn session(m: &ArgMatches) -> Result<Session> {
    let mut cfg = load_config(m)?;
    let dir = m.get_one::<PathBuf>("data").expect("required");
    let data = dataset::load(dir)?;
    adopt_dataset(&mut cfg, &data.spec);
    cfg.validate()?;
    log::info!("seed {}", cfg.seed);
    let (store, model) = DeopModel::new(&cfg)?;
    Ok(Session {
        cfg,
        data,
        model,
        store,
    })
}

fn run_dir(m: &ArgMatches) -> &Path {
    m.get_one::<PathBuf>("run").expect("required")
}

fn encoder_fp(cfg: &RunConfig) -> u64 {
    fingerprint(&cfg.encoder_architecture())
}

fn proposals_fp(cfg: &RunConfig) -> u64 {
    fingerprint(&cfg.proposal_architecture())
}

fn deop_fp(cfg: &RunConfig) -> u64 {
    fingerprint(&cfg.architecture())
}

/// Everything the segmentation checkpoint holds, running statistics included.
fn deop_ids(s: &Session) -> Vec<ParamId> {
    let mut ids = s.model.segmentation_params(s.cfg.mode.prompts());
    ids.extend(
        s.store
            .ids_with_prefix("cal.")
            .filter(|id| !ids.contains(id))
            .collect::<Vec<_>>(),
    );
    ids
}

fn restore(store: &mut ParamStore, path: &Path, fp: u64) -> Result<()> {
    let loaded = checkpoint::load(path, fp)?;
    store.load_matching(&loaded)?;
    log::info!("loaded {}", path.display());
    Ok(())
}

fn needs_proposals(cfg: &RunConfig) -> bool {
    cfg.mask_source == MaskSource::Learned
}

/// Loads the checkpoints a classification run depends on.
fn restore_backbone(s: &mut Session, run: &Path) -> Result<()> {
    restore(&mut s.store, &run.join(ENCODER_CKPT), encoder_fp(&s.cfg))?;
    if needs_proposals(&s.cfg) {
        restore(
            &mut s.store,
            &run.join(PROPOSALS_CKPT),
            proposals_fp(&s.cfg),
        )?;
    }
    Ok(())
}

fn write_log(run: &Path, stage: &str, log: &TrainLog) -> Result<()> {
    let path = run.join(format!("{stage}_loss.txt"));
    let text: String = log
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i} {l:.9}\n"))
        .collect();
    fs::create_dir_all(run).map_err(io_err(run))?;
    fs::write(&path, text).map_err(io_err(&path))
}

fn write_effective_config(run: &Path, cfg: &RunConfig) -> Result<()> {
    let path = run.join(EFFECTIVE_CONFIG);
    fs::create_dir_all(run).map_err(io_err(run))?;
    fs::write(&path, config::to_text(cfg)).map_err(io_err(&path))
}

fn masks_for(s: &Session, samples: &[Sample], stream: u64) -> Result<Vec<PreparedMasks>> {
    Ok(mask_sets(
        &s.model,
        &s.store,
        samples,
        s.cfg.mask_source,
        s.cfg.seed.wrapping_add(stream),
    )?)
}

fn gen_data(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let base = match m.get_one::<String>("spec").map(String::as_str) {
        Some("default") | None => RunConfig::default(),
        Some(file) => config::load(Some(Path::new(file)), &[])?,
    };
    let cfg = load_config_onto(base, m)?;
    let dir = m.get_one::<PathBuf>("out").expect("required");
    dataset::generate(&cfg.data, dir)?;
    writeln!(
        out,
        "wrote {} train and {} val images to {}",
        cfg.data.train,
        cfg.data.val,
        dir.display()
    )
    .map_err(io_err("stdout"))
}

fn pretrain(m: &ArgMatches) -> Result<()> {
    let mut s = session(m)?;
    let run = run_dir(m);
    let log = pretrain_encoder(&s.cfg, &mut s.store, &s.model)?;
    write_log(run, "pretrain", &log)?;
    write_effective_config(run, &s.cfg)?;
    checkpoint::save(
        &run.join(ENCODER_CKPT),
        &s.store,
        s.model.encoder.body_params(),
        encoder_fp(&s.cfg),
    )
}

fn proposals(m: &ArgMatches) -> Result<()> {
    let mut s = session(m)?;
    let run = run_dir(m);
    let log = train_proposals(&s.cfg, &mut s.store, &s.model, &s.data.train)?;
    write_log(run, "proposals", &log)?;
    write_effective_config(run, &s.cfg)?;
    checkpoint::save(
        &run.join(PROPOSALS_CKPT),
        &s.store,
        s.model.proposals.params(),
        proposals_fp(&s.cfg),
    )
}

fn deop(m: &ArgMatches) -> Result<()> {
    let mut s = session(m)?;
    let run = run_dir(m);
    restore_backbone(&mut s, run)?;
    let masks = masks_for(&s, &s.data.train, TRAIN_MASK_STREAM)?;
    let log = train_deop(&s.cfg, &mut s.store, &s.model, &s.data.train, &masks)?;
    write_log(run, "deop", &log)?;
    write_effective_config(run, &s.cfg)?;
    checkpoint::save(
        &run.join(DEOP_CKPT),
        &s.store,
        deop_ids(&s),
        deop_fp(&s.cfg),
    )
}

/// Session with every checkpoint of `--run` loaded.
fn trained_session(m: &ArgMatches) -> Result<Session> {
    let mut s = session(m)?;
    let run = run_dir(m).to_path_buf();
    restore_backbone(&mut s, &run)?;
    restore(&mut s.store, &run.join(DEOP_CKPT), deop_fp(&s.cfg))?;
    Ok(s)
}

fn labels_to_pgm(path: &Path, s: &Sample, labels: &[u8]) -> Result<()> {
    pnm::write_pgm(path, s.size, s.size, labels)
}

fn eval(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let s = trained_session(m)?;
    let masks = masks_for(&s, &s.data.val, VAL_MASK_STREAM)?;
    let report: EvalReport = evaluate(&s.model, &s.store, &s.data.val, &masks)?;
    if let Some(dir) = m.get_one::<PathBuf>("dump") {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (i, (sample, mk)) in s.data.val.iter().zip(&masks).enumerate() {
            let pred = s.model.predict(&s.store, &sample.image(), mk)?;
            labels_to_pgm(
                &dir.join(format!("pred_{i:04}.pgm")),
                sample,
                pred.labels.labels(),
            )?;
        }
    }
    out.write_all(report::eval_text(&report).as_bytes())
        .map_err(io_err("stdout"))
}

fn parse_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad n-prime list `{text}`")))
        })
        .collect()
}

fn bench_cmd(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let mut s = session(m)?;
    if let Some(run) = m.get_one::<PathBuf>("run") {
        restore_backbone(&mut s, run)?;
        restore(&mut s.store, &run.join(DEOP_CKPT), deop_fp(&s.cfg))?;
    }
    let opts = BenchOptions {
        cal: s.cfg.mode.anchors().then(|| s.cfg.cal.clone()),
        n_primes: parse_list(m.get_one::<String>("n-prime").expect("defaulted"))?,
        images: *m.get_one::<usize>("images").expect("defaulted"),
        warmup: *m.get_one::<usize>("warmup").expect("defaulted"),
    };
    let masks = masks_for(&s, &s.data.val, VAL_MASK_STREAM)?;
    let images: Vec<_> = s
        .data
        .val
        .iter()
        .zip(masks)
        .map(|(x, mk)| (x.image(), mk.set))
        .collect();
    let rows = bench::timed_compare(&s.model, &s.store, &images, &opts)?;
    if let Some(path) = m.get_one::<PathBuf>("report") {
        fs::write(path, bench::summary(&rows)).map_err(io_err(path))?;
    }
    out.write_all(bench::csv(&rows).as_bytes())
        .map_err(io_err("stdout"))
}

fn gradcheck(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let target: GradTarget = m.get_one::<String>("target").expect("defaulted").parse()?;
    // the checks use fixed tiny models; configuration is still validated
    load_config(m)?;
    let results = run_gradchecks(target)?;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        writeln!(
            out,
            "{} max_rel_err={:.3e} {verdict}",
            r.name, r.max_rel_err
        )
        .map_err(io_err("stdout"))?;
    }
    match results.iter().filter(|r| !r.passed()).count() {
        0 => Ok(()),
        n => Err(Error::Failed(format!(
            "{n} gradient check(s) above tolerance"
        ))),
    }
}

/// Nearest-neighbour upscale of a `g×g` map in `[0, max]` to `size×size` bytes.
fn heat_bytes(map: &[f64], grid: usize, size: usize) -> Vec<u8> {
    let max = map.iter().copied().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    (0..size * size)
        .map(|p| {
            let (y, x) = (p / size * grid / size, p % size * grid / size);
            (map[y * grid + x].max(0.0) * scale).round() as u8
        })
        .collect()
}

fn dump_heatmaps(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let s = trained_session(m)?;
    let dir = m.get_one::<PathBuf>("out").expect("required");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let count = (*m.get_one::<usize>("images").expect("defaulted")).min(s.data.val.len());
    let samples = &s.data.val[..count];
    let masks = masks_for(&s, samples, VAL_MASK_STREAM)?;
    let grid = s.model.grid();
    let mut files = 0;
    for (i, (sample, mk)) in samples.iter().zip(&masks).enumerate() {
        let image = sample.image();
        pnm::write_ppm(
            &dir.join(format!("{i:04}_image.ppm")),
            sample.size,
            sample.size,
            &sample.rgb,
        )?;
        let pred = s.model.predict(&s.store, &image, mk)?;
        labels_to_pgm(
            &dir.join(format!("{i:04}_pred.pgm")),
            sample,
            pred.labels.labels(),
        )?;
        let heat = s.model.heatmaps(&s.store, &image, mk)?;
        for n in 0..mk.set.count() {
            let map = &heat.data()[n * grid * grid..(n + 1) * grid * grid];
            let bytes = heat_bytes(map, grid, sample.size);
            pnm::write_pgm(
                &dir.join(format!("{i:04}_heat_{n:02}.pgm")),
                sample.size,
                sample.size,
                &bytes,
            )?;
        }
        files += 2 + mk.set.count();
    }
    writeln!(out, "wrote {files} files to {}", dir.display()).map_err(io_err("stdout"))
}

/// Runs a parsed command line, writing results to `out`.
pub fn dispatch(matches: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    match matches.subcommand() {
        Some(("gen-data", m)) => gen_data(m, out),
        Some(("pretrain-encoder", m)) => pretrain(m),
        Some(("train-proposals", m)) => proposals(m),
        Some(("train-deop", m)) => deop(m),
        Some(("eval", m)) => eval(m, out),
        Some(("bench", m)) => bench_cmd(m, out),
        Some(("gradcheck", m)) => gradcheck(m, out),
        Some(("dump-heatmaps", m)) => dump_heatmaps(m, out),
        Some(("config", _)) => out
            .write_all(documented_defaults().as_bytes())
            .map_err(io_err("stdout")),
        _ => unreachable!("subcommand required"),
    }
}

/// The default configuration as a commented, loadable file.
pub fn documented_defaults() -> String {
    let cfg = RunConfig::default();
    config::KEYS
        .iter()
        .map(|(k, help)| {
            format!(
                "# {help}\n{k} = {}\n",
                config::value(&cfg, k).expect("listed key")
            )
        })
        .collect()
}

/// Parses `args` (program name first) and runs them. Usage errors come
/// back as clap errors so the caller can print usage and exit 2.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> std::result::Result<Result<()>, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args)?;
    Ok(dispatch(&matches, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn n_prime_lists_parse() {
        assert_eq!(parse_list("1, 5,20").unwrap(), vec![1, 5, 20]);
        assert!(parse_list("1,x").is_err());
    }

    #[test]
    fn heatmaps_scale_to_bytes() {
        let b = heat_bytes(&[0.0, 0.5, 1.0, 0.25], 2, 4);
        assert_eq!(b.len(), 16);
        assert_eq!((b[0], b[2], b[8], b[15]), (0, 128, 255, 64));
    }
}

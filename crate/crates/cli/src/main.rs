mod error;
mod render;

use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use evobox::config::{schema, RunConfig};
use evobox::data::{
    generate_scene, load_dataset, read_annotations, read_image_ppm, split_dataset, write_dataset, write_image_ppm,
    Condition, Dataset, Sample,
};
use evobox::eval::{bench, detect_all, evaluate, read_detections, write_detections, write_pr_curve, DetectionSet};
use evobox::model::{load_checkpoint, save_checkpoint, Checkpoint, DetectOptions, ModelConfig};
use evobox::train::Trainer;
use evobox::Model;

use error::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn config_args(cmd: Command) -> Command {
    let cmd = cmd
        .arg(Arg::new("config").long("config").value_name("FILE").value_parser(value_parser!(PathBuf)).help("key = value configuration file"))
        .arg(Arg::new("preset").long("preset").value_name("NAME").help("starting preset: desk (default) or paper"));
    schema().into_iter().fold(cmd, |cmd, k| {
        cmd.arg(
            Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .help(k.help)
                .help_heading(format!("Config keys ({})", k.section)),
        )
    })
}

fn split_arg() -> Arg {
    Arg::new("split")
        .long("split")
        .value_parser(["all", "train", "val"])
        .default_value("all")
        .help("dataset subset (train_fraction / split_seed decide the split)")
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PATH").value_parser(value_parser!(PathBuf)).help(help)
}

fn cli() -> Command {
    Command::new("evobox")
        .about("Two-stage cascade vehicle detector: synthetic data, training, detection, evaluation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("gen-data")
                .about("Generate a synthetic dataset directory")
                .arg(path_arg("out", "output directory").required(true))
                .arg(Arg::new("count").long("count").value_parser(value_parser!(u64)).required(true).help("number of images"))
                .arg(Arg::new("start").long("start").value_parser(value_parser!(u64)).default_value("0").help("first scene index")),
        ))
        .subcommand(config_args(
            Command::new("train")
                .about("Train a model and write a checkpoint plus a loss log")
                .arg(path_arg("data", "dataset directory").required(true))
                .arg(path_arg("out", "checkpoint to write").required(true))
                .arg(path_arg("resume", "checkpoint to continue from"))
                .arg(path_arg("log", "loss log (default: <out>.log)"))
                .arg(split_arg()),
        ))
        .subcommand(config_args(
            Command::new("detect")
                .about("Run a checkpoint over images and write a detection CSV")
                .arg(path_arg("ckpt", "checkpoint").required(true))
                .arg(path_arg("image", "single PPM image").conflicts_with("data"))
                .arg(path_arg("data", "dataset directory"))
                .arg(path_arg("out", "detection CSV to write").required(true))
                .arg(split_arg()),
        ))
        .subcommand(config_args(
            Command::new("eval")
                .about("Score detections (from a CSV or a checkpoint) against a dataset")
                .arg(path_arg("data", "dataset directory").required(true))
                .arg(path_arg("dets", "detection CSV").conflicts_with("ckpt"))
                .arg(path_arg("ckpt", "checkpoint to run at eval_score_threshold"))
                .arg(Arg::new("iou").long("iou").value_name("T").value_parser(value_parser!(f64)).help("match IoU (overrides iou_threshold)"))
                .arg(path_arg("pr-out", "PR curve CSV to write").default_value("pr_curve.csv"))
                .arg(Arg::new("pn-only").long("pn-only").action(ArgAction::SetTrue).help("with --ckpt: score PN proposals as final detections"))
                .arg(split_arg()),
        ))
        .subcommand(config_args(
            Command::new("bench")
                .about("Measure per-image detection latency")
                .arg(path_arg("ckpt", "checkpoint").required(true))
                .arg(path_arg("data", "dataset directory").required(true))
                .arg(Arg::new("reps").long("reps").value_parser(value_parser!(usize)).default_value("1").help("passes over the images"))
                .arg(Arg::new("images").long("images").value_parser(value_parser!(usize)).help("use only the first N images"))
                .arg(split_arg()),
        ))
        .subcommand(
            Command::new("render")
                .about("Draw boxes from a detection or annotation CSV onto an image")
                .arg(path_arg("image", "input PPM").required(true))
                .arg(path_arg("dets", "detection CSV").conflicts_with("annotations"))
                .arg(path_arg("annotations", "annotation CSV"))
                .arg(path_arg("out", "output PPM").required(true))
                .arg(Arg::new("id").long("id").help("image id to select rows for (default: image file stem)"))
                .arg(Arg::new("min-score").long("min-score").value_parser(value_parser!(f64)).default_value("0").help("hide detections below this score")),
        )
        .subcommand(config_args(Command::new("show-config").about("Print the resolved configuration")))
}

/// Preset, then (optionally) a checkpoint's architecture, then the config
/// file, then per-key flags.
fn resolve_config(m: &ArgMatches, model: Option<&ModelConfig>) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("preset") {
        Some(name) => RunConfig::preset(name)?,
        None => RunConfig::desk(),
    };
    if let Some(model) = model {
        cfg.model = model.clone();
        cfg.scene.image_w = model.image_w;
        cfg.scene.image_h = model.image_h;
    }
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for k in schema() {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    Ok(cfg)
}

fn select_split(samples: Vec<Sample>, m: &ArgMatches, cfg: &RunConfig) -> Vec<Sample> {
    let split = m.get_one::<String>("split").map(String::as_str).unwrap_or("all");
    if split == "all" || samples.is_empty() {
        return samples;
    }
    let (train, val) = split_dataset(&samples, cfg.eval.train_fraction, cfg.eval.split_seed);
    let mut chosen = if split == "train" { train } else { val };
    // Keep manifest order regardless of the shuffle.
    chosen.sort_by(|a, b| a.id.cmp(&b.id));
    chosen
}

fn load_data(m: &ArgMatches, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let dir = m.get_one::<PathBuf>("data").expect("required");
    let Dataset { spec, samples } = load_dataset(dir)?;
    if (spec.image_w, spec.image_h) != (cfg.model.image_w, cfg.model.image_h) {
        return Err(CliError::Architecture(format!(
            "dataset images are {}x{} but the model expects {}x{}",
            spec.image_w, spec.image_h, cfg.model.image_w, cfg.model.image_h
        )));
    }
    Ok(select_split(samples, m, cfg))
}

/// Loads a checkpoint and builds the model the resolved config describes;
/// a config naming a different architecture is an error.
fn load_model(m: &ArgMatches) -> Result<(Checkpoint, RunConfig, Model)> {
    let path = m.get_one::<PathBuf>("ckpt").expect("required");
    let ck = load_checkpoint(path)?;
    let cfg = resolve_config(m, Some(&ck.config))?;
    let model = ck.to_model_with(&cfg.model)?;
    Ok((ck, cfg, model))
}

fn cmd_gen_data(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(m, None)?;
    let spec = cfg.scene_spec();
    spec.validate().map_err(|e| CliError::Other(format!("invalid scene config: {e}")))?;
    let start = *m.get_one::<u64>("start").expect("default");
    let count = *m.get_one::<u64>("count").expect("required");
    let samples: Vec<Sample> = (start..start + count).map(|i| generate_scene(&spec, i)).collect();
    let out = m.get_one::<PathBuf>("out").expect("required");
    write_dataset(out, &spec, &samples)?;
    let vehicles: usize = samples.iter().map(|s| s.vehicles().count()).sum();
    println!("wrote {} images ({} vehicles) to {}", samples.len(), vehicles, out.display());
    Ok(())
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let resume = m.get_one::<PathBuf>("resume").map(|p| load_checkpoint(p)).transpose()?;
    let cfg = resolve_config(m, resume.as_ref().map(|c| &c.config))?;
    let samples = load_data(m, &cfg)?;
    let (model, start) = match &resume {
        Some(ck) => (ck.to_model_with(&cfg.model)?, ck.iteration),
        None => (Model::new(cfg.model.clone(), cfg.train.seed)?, 0),
    };
    let out = m.get_one::<PathBuf>("out").expect("required").clone();
    let log_path = m.get_one::<PathBuf>("log").cloned().unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".log");
        p.into()
    });
    // A resumed run appends to its log so the file keeps one line per iteration.
    let log_file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", log_path.display())))?;
    let mut log = BufWriter::new(log_file);

    let mut trainer = Trainer::resume(model, cfg.train.clone(), start)?;
    let total = cfg.train.total_iterations;
    eprintln!(
        "training {} parameters on {} images, iterations {}..{}",
        trainer.model().parameter_count(),
        samples.len(),
        start,
        total
    );
    let every = cfg.train.checkpoint_every;
    let clock = Instant::now();
    trainer.run(&samples, &mut log, |t, entry| {
        let i = entry.iteration;
        if i % 100 == 0 || i == total {
            eprintln!("iteration {i}/{total} loss {:.4} ({:.1}s)", entry.loss.total, clock.elapsed().as_secs_f64());
        }
        if every > 0 && i % every == 0 && i < total {
            let path = out.with_extension(format!("{i}.evbx"));
            save_checkpoint(&path, &Checkpoint::from_model(t.model(), i, entry.lr))
                .map_err(|e| evobox::train::TrainError::Config(format!("saving {}: {e}", path.display())))?;
        }
        Ok(())
    })?;
    let iteration = trainer.iteration();
    let lr = cfg.train.lr_at(iteration.saturating_sub(1));
    save_checkpoint(&out, &Checkpoint::from_model(trainer.model(), iteration, lr))?;
    println!("wrote {} (iteration {iteration}); loss log {}", out.display(), log_path.display());
    Ok(())
}

fn cmd_detect(m: &ArgMatches) -> Result<()> {
    let (_, cfg, model) = load_model(m)?;
    let opts = DetectOptions::from_config(&cfg.model);
    let mut dets = DetectionSet::new();
    if let Some(path) = m.get_one::<PathBuf>("image") {
        let image = read_image_ppm(path)?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        dets.insert(id, model.detect(&image, &opts)?);
    } else if m.contains_id("data") {
        let samples = load_data(m, &cfg)?;
        dets = detect_all(&model, &samples, &opts)?;
    } else {
        return Err(CliError::Other("detect needs --image or --data".into()));
    }
    let out = m.get_one::<PathBuf>("out").expect("required");
    write_detections(out, &dets)?;
    let rows: usize = dets.values().map(Vec::len).sum();
    println!("wrote {rows} detections for {} images to {}", dets.len(), out.display());
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let (cfg, dets, samples) = if let Some(path) = m.get_one::<PathBuf>("dets") {
        let cfg = resolve_config(m, None)?;
        let dets = read_detections(path)?;
        let dir = m.get_one::<PathBuf>("data").expect("required");
        let samples = select_split(load_dataset(dir)?.samples, m, &cfg);
        (cfg, dets, samples)
    } else if m.contains_id("ckpt") {
        let (_, cfg, model) = load_model(m)?;
        let samples = load_data(m, &cfg)?;
        let mut opts = DetectOptions::from_config(&cfg.model);
        opts.score_threshold = cfg.eval.eval_score_threshold;
        opts.refine = !m.get_flag("pn-only");
        let dets = detect_all(&model, &samples, &opts)?;
        (cfg, dets, samples)
    } else {
        return Err(CliError::Other("eval needs --dets or --ckpt".into()));
    };
    let iou = m.get_one::<f64>("iou").copied().unwrap_or(cfg.eval.iou_threshold);
    let result = evaluate(&samples, &dets, iou)?;
    println!("images {} IoU {iou}", samples.len());
    println!("overall mAP {:.2}", 100.0 * result.overall_ap);
    for c in Condition::ALL {
        if let Some(ap) = result.per_condition.get(&c) {
            println!("{:<8} mAP {:.2}", c.as_str(), 100.0 * ap);
        }
    }
    println!(
        "TP {} FP {} FN {} excluded {}",
        result.true_positives, result.false_positives, result.false_negatives, result.excluded
    );
    if result.pr_curve.recall_undefined {
        println!("note: no ground-truth vehicles, recall undefined");
    }
    let pr_out = m.get_one::<PathBuf>("pr-out").expect("default");
    write_pr_curve(pr_out, &result.pr_curve.points)?;
    Ok(())
}

fn cmd_bench(m: &ArgMatches) -> Result<()> {
    let (_, cfg, model) = load_model(m)?;
    let mut samples = load_data(m, &cfg)?;
    if let Some(&n) = m.get_one::<usize>("images") {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(CliError::Other("no images to benchmark".into()));
    }
    let reps = *m.get_one::<usize>("reps").expect("default");
    if reps == 0 {
        return Err(CliError::Other("--reps must be at least 1".into()));
    }
    let stats = bench(&model, &samples, reps, cfg.eval.warmup_runs, &DetectOptions::from_config(&cfg.model))?;
    println!("timings {}", stats.count);
    println!("mean {:.2} ms  p50 {:.2} ms  p95 {:.2} ms", stats.mean_ms, stats.p50_ms, stats.p95_ms);
    println!("stages: dcn {:.2} ms  pn {:.2} ms  ftn {:.2} ms", stats.dcn_mean_ms, stats.pn_mean_ms, stats.ftn_mean_ms);
    Ok(())
}

fn cmd_render(m: &ArgMatches) -> Result<()> {
    let image_path = m.get_one::<PathBuf>("image").expect("required");
    let mut image = read_image_ppm(image_path)?;
    let id = m
        .get_one::<String>("id")
        .cloned()
        .unwrap_or_else(|| image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let mut drawn = 0;
    if let Some(path) = m.get_one::<PathBuf>("dets") {
        let min = *m.get_one::<f64>("min-score").expect("default");
        for d in read_detections(path)?.remove(&id).unwrap_or_default() {
            if d.score >= min {
                render::draw_box(&mut image, &d.bbox, render::VEHICLE_COLOR);
                drawn += 1;
            }
        }
    } else if let Some(path) = m.get_one::<PathBuf>("annotations") {
        for row in read_annotations(path)?.into_iter().filter(|r| r.id == id) {
            let color = if row.annotation.ignore { render::IGNORE_COLOR } else { render::VEHICLE_COLOR };
            render::draw_box(&mut image, &row.annotation.bbox, color);
            drawn += 1;
        }
    }
    let out = m.get_one::<PathBuf>("out").expect("required");
    write_image_ppm(out, &image)?;
    println!("drew {drawn} boxes to {}", out.display());
    Ok(())
}

fn run(matches: &ArgMatches) -> Result<()> {
    match matches.subcommand() {
        Some(("gen-data", m)) => cmd_gen_data(m),
        Some(("train", m)) => cmd_train(m),
        Some(("detect", m)) => cmd_detect(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("bench", m)) => cmd_bench(m),
        Some(("render", m)) => cmd_render(m),
        Some(("show-config", m)) => {
            let text = resolve_config(m, None)?.to_text();
            std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
        }
        _ => unreachable!("subcommand required"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line entry point: `train | eval | toy | gradcheck | shapes`.
//!
//! Every run resolves its configuration from built-in defaults, an optional
//! `--config` file, dedicated flags, and repeated `--set section.key=value`
//! overrides — then echoes the resolved configuration (itself a valid
//! config file) before doing anything. Unknown keys are rejected.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::data::{mnist, smallnorb, synth, toy, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::net::{checkpoint, Network, NetworkConfig, RoutingSpec};
use crate::similarity::solve_toy;
use crate::tensor::Scalar;
use crate::train::{evaluate, train, TrainConfig};
use crate::verify::network_gradient_report;

const USAGE: &str = "\
usage: capsule-routing <command> [flags]

commands:
  train       train a capsule network and report test accuracy
  eval        evaluate a checkpoint on a dataset's test split
  toy         run the 2-D toy clustering experiment over a lambda grid
  gradcheck   finite-difference verification of every parameter class
  shapes      print the architecture trace for a configuration

flags:
  --config PATH           load a config file before applying flags
  --seed N                [run.seed]
  --precision 32|64       [run.precision]
  --out-dir PATH          [run.out_dir]
  --workers N             [run.workers]
  --dataset NAME          [data.dataset]  mnist | smallnorb | synthetic
  --data-dir PATH         [data.data_dir]
  --procedure NAME        [model.procedure]  similarity | connectionist
  --iterations N          [model.iterations]
  --arch NAME             [model.arch]  canonical | reduced | tiny
  --epochs N              [train.epochs]
  --batch-size N          [train.batch_size]
  --checkpoint PATH       [eval.checkpoint]
  --lambda1 LIST          [toy.lambda1]  comma-separated values
  --lambda2 LIST          [toy.lambda2]  comma-separated values
  --set section.key=val   override any config key (repeatable)
";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Command {
    Train,
    Eval,
    Toy,
    GradCheck,
    Shapes,
}

impl Command {
    fn parse(s: &str) -> Option<Command> {
        match s {
            "train" => Some(Command::Train),
            "eval" => Some(Command::Eval),
            "toy" => Some(Command::Toy),
            "gradcheck" => Some(Command::GradCheck),
            "shapes" => Some(Command::Shapes),
            _ => None,
        }
    }
}

/// Built-in defaults; doubles as the registry of known keys.
fn template(cmd: Command) -> Config {
    let mut c = Config::new();
    c.set("run", "seed", 7);
    c.set("run", "precision", 32);
    c.set("run", "out_dir", "");
    c.set("run", "workers", 0); // 0: use available parallelism
    c.set("data", "dataset", "mnist");
    c.set("data", "data_dir", "");
    c.set("data", "train_subset", "all");
    c.set("data", "test_subset", "all");
    c.set("data", "synth_train", 10000);
    c.set("data", "synth_test", 2000);
    c.set("model", "procedure", "similarity");
    c.set("model", "arch", "reduced");
    c.set("model", "iterations", 3);
    match cmd {
        Command::Train => {
            c.set("train", "epochs", 3);
            c.set("train", "batch_size", 32);
            c.set("train", "shard_size", 2);
            c.set("train", "lr", 3e-3);
            c.set("train", "decay_rate", 0.96);
            c.set("train", "decay_steps", "epoch");
            c.set("train", "margin_start", 0.2);
            c.set("train", "margin_end", 0.9);
            c.set("train", "clip_norm", 10.0);
            c.set("train", "val_fraction", 0.1);
            c.set("train", "eval_batch", 64);
        }
        Command::Eval => {
            c.set("eval", "checkpoint", "");
            c.set("eval", "eval_batch", 64);
        }
        Command::Toy => {
            c.set("toy", "lambda1", "0.01");
            c.set("toy", "lambda2", "0.0");
            c.set("toy", "votes_per_cluster", 20);
            c.set("toy", "scale", 4.0);
            c.set("toy", "normalize", false);
            c.set("toy", "iterations", 100);
        }
        Command::GradCheck => {
            c.set("gradcheck", "max_coords", 16);
        }
        Command::Shapes => {}
    }
    c
}

struct ParsedArgs {
    command: Command,
    config_file: Option<PathBuf>,
    overrides: Vec<(String, String, String)>,
}

fn parse_args(args: &[String]) -> Result<ParsedArgs> {
    let usage = |msg: String| Error::InvalidArgument { what: msg };
    let command = args
        .first()
        .and_then(|s| Command::parse(s))
        .ok_or_else(|| usage("expected a command: train | eval | toy | gradcheck | shapes".into()))?;
    let mut config_file = None;
    let mut overrides: Vec<(String, String, String)> = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let flag = args[i].as_str();
        let value = args
            .get(i + 1)
            .ok_or_else(|| usage(format!("flag {flag} needs a value")))?;
        let mapped: Option<(&str, &str)> = match flag {
            "--config" => {
                config_file = Some(PathBuf::from(value));
                None
            }
            "--seed" => Some(("run", "seed")),
            "--precision" => Some(("run", "precision")),
            "--out-dir" => Some(("run", "out_dir")),
            "--workers" => Some(("run", "workers")),
            "--dataset" => Some(("data", "dataset")),
            "--data-dir" => Some(("data", "data_dir")),
            "--procedure" => Some(("model", "procedure")),
            "--iterations" => Some(("model", "iterations")),
            "--arch" => Some(("model", "arch")),
            "--epochs" => Some(("train", "epochs")),
            "--batch-size" => Some(("train", "batch_size")),
            "--checkpoint" => Some(("eval", "checkpoint")),
            "--lambda1" => Some(("toy", "lambda1")),
            "--lambda2" => Some(("toy", "lambda2")),
            "--set" => {
                let (key, v) = value
                    .split_once('=')
                    .ok_or_else(|| usage(format!("--set expects section.key=value, got {value}")))?;
                let (section, k) = key
                    .split_once('.')
                    .ok_or_else(|| usage(format!("--set expects section.key=value, got {value}")))?;
                overrides.push((section.to_string(), k.to_string(), v.to_string()));
                None
            }
            other => return Err(usage(format!("unknown flag {other}"))),
        };
        if let Some((section, key)) = mapped {
            overrides.push((section.to_string(), key.to_string(), value.clone()));
        }
        i += 2;
    }
    Ok(ParsedArgs {
        command,
        config_file,
        overrides,
    })
}

fn resolve(parsed: &ParsedArgs) -> Result<Config> {
    let tmpl = template(parsed.command);
    let mut cfg = tmpl.clone();
    if let Some(path) = &parsed.config_file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            detail: format!("cannot read {}: {e}", path.display()),
        })?;
        let file_cfg = Config::parse(&text)?;
        file_cfg.validate_against(&tmpl)?;
        cfg.merge(&file_cfg);
    }
    for (section, key, value) in &parsed.overrides {
        if tmpl.get(section, key).is_none() {
            return Err(Error::Config {
                detail: format!("unknown key {section}.{key}"),
            });
        }
        cfg.set(section, key, value);
    }
    Ok(cfg)
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument { .. } | Error::Config { .. } | Error::Io { .. } => 2,
        _ => 1,
    }
}

/// Run the CLI against already-split arguments, writing output to `out`.
pub fn run_with(args: &[String], out: &mut dyn Write) -> i32 {
    if args.first().map(String::as_str) == Some("--help")
        || args.first().map(String::as_str) == Some("help")
        || args.is_empty()
    {
        let _ = out.write_all(USAGE.as_bytes());
        return if args.is_empty() { 2 } else { 0 };
    }
    let parsed = match parse_args(args) {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(out, "error: {e}\n\n{USAGE}");
            return 2;
        }
    };
    let cfg = match resolve(&parsed) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(out, "error: {e}\n\n{USAGE}");
            return 2;
        }
    };
    let _ = writeln!(out, "# resolved configuration\n{}", cfg.emit());
    if let Some(dir) = out_dir(&cfg) {
        if std::fs::create_dir_all(&dir).is_ok() {
            let _ = std::fs::write(dir.join("resolved-config.txt"), cfg.emit());
        }
    }
    let result = match parsed.command {
        Command::Train => dispatch_precision(&cfg, out, cmd_train::<f32>, cmd_train::<f64>),
        Command::Eval => dispatch_precision(&cfg, out, cmd_eval::<f32>, cmd_eval::<f64>),
        Command::Toy => cmd_toy(&cfg, out),
        Command::GradCheck => cmd_gradcheck(&cfg, out),
        Command::Shapes => cmd_shapes(&cfg, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            exit_code_for(&e)
        }
    }
}

/// Entry point used by the binary.
pub fn run(args: Vec<String>) -> i32 {
    let mut stdout = std::io::stdout();
    run_with(&args, &mut stdout)
}

type CmdFn = fn(&Config, &mut dyn Write) -> Result<i32>;

fn dispatch_precision(
    cfg: &Config,
    out: &mut dyn Write,
    f32_cmd: CmdFn,
    f64_cmd: CmdFn,
) -> Result<i32> {
    match cfg.require("run", "precision")? {
        "32" => f32_cmd(cfg, out),
        "64" => f64_cmd(cfg, out),
        other => Err(Error::Config {
            detail: format!("run.precision must be 32 or 64, got {other}"),
        }),
    }
}

fn out_dir(cfg: &Config) -> Option<PathBuf> {
    match cfg.get("run", "out_dir") {
        Some("") | None => None,
        Some(d) => Some(PathBuf::from(d)),
    }
}

fn workers(cfg: &Config) -> Result<usize> {
    let w: usize = cfg.parse_value("run", "workers")?;
    Ok(if w == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        w
    })
}

fn parse_subset(cfg: &Config, key: &str) -> Result<Option<usize>> {
    match cfg.require("data", key)? {
        "all" => Ok(None),
        n => n.parse().map(Some).map_err(|_| Error::Config {
            detail: format!("data.{key} must be a count or 'all'"),
        }),
    }
}

fn load_dataset(cfg: &Config) -> Result<Dataset> {
    let dataset = cfg.require("data", "dataset")?;
    let data_dir = cfg.require("data", "data_dir")?;
    match dataset {
        "mnist" | "smallnorb" => {
            if data_dir.is_empty() {
                return Err(Error::InvalidArgument {
                    what: format!("--data-dir is required for dataset {dataset}"),
                });
            }
            if dataset == "mnist" {
                mnist::load(Path::new(data_dir))
            } else {
                smallnorb::load(Path::new(data_dir))
            }
        }
        "synthetic" => {
            let dir = if data_dir.is_empty() {
                out_dir(cfg)
                    .map(|d| d.join("synthetic-digits"))
                    .ok_or_else(|| Error::InvalidArgument {
                        what: "dataset synthetic needs --data-dir or --out-dir".into(),
                    })?
            } else {
                PathBuf::from(data_dir)
            };
            let train_n: usize = cfg.parse_value("data", "synth_train")?;
            let test_n: usize = cfg.parse_value("data", "synth_test")?;
            let seed: u64 = cfg.parse_value("run", "seed")?;
            synth::ensure_digit_corpus(&dir, train_n, test_n, seed ^ 0x646967)?;
            mnist::load(&dir)
        }
        other => Err(Error::Config {
            detail: format!("unknown dataset {other}"),
        }),
    }
}

fn routing_spec(cfg: &Config, arch: &str) -> Result<RoutingSpec> {
    let procedure = cfg.require("model", "procedure")?;
    match (procedure, arch) {
        ("similarity", "tiny") => Ok(RoutingSpec::similarity_tiny()),
        ("similarity", _) => Ok(RoutingSpec::similarity_default()),
        ("connectionist", "tiny") => Ok(RoutingSpec::connectionist_tiny()),
        ("connectionist", _) => Ok(RoutingSpec::connectionist_default()),
        (other, _) => Err(Error::Config {
            detail: format!("model.procedure must be similarity or connectionist, got {other}"),
        }),
    }
}

fn network_config(cfg: &Config, classes: usize) -> Result<NetworkConfig> {
    let arch = cfg.require("model", "arch")?;
    let spec = routing_spec(cfg, arch)?;
    let mut nc = match arch {
        "canonical" => NetworkConfig::canonical(classes, spec),
        "reduced" => NetworkConfig::reduced(classes, spec),
        "tiny" => NetworkConfig {
            classes,
            ..NetworkConfig::tiny(spec)
        },
        other => {
            return Err(Error::Config {
                detail: format!("model.arch must be canonical, reduced or tiny, got {other}"),
            })
        }
    };
    nc.iterations = cfg.parse_value("model", "iterations")?;
    Ok(nc)
}

fn checkpoint_meta(cfg: &Config, classes: usize) -> Result<BTreeMap<String, String>> {
    let mut meta = BTreeMap::new();
    meta.insert("procedure".into(), cfg.require("model", "procedure")?.into());
    meta.insert("arch".into(), cfg.require("model", "arch")?.into());
    meta.insert(
        "iterations".into(),
        cfg.require("model", "iterations")?.into(),
    );
    meta.insert("classes".into(), classes.to_string());
    meta.insert("dataset".into(), cfg.require("data", "dataset")?.into());
    meta.insert("precision".into(), cfg.require("run", "precision")?.into());
    Ok(meta)
}

fn train_config(cfg: &Config) -> Result<TrainConfig> {
    let decay_steps = match cfg.require("train", "decay_steps")? {
        "epoch" => None,
        n => Some(n.parse().map_err(|_| Error::Config {
            detail: "train.decay_steps must be a count or 'epoch'".into(),
        })?),
    };
    Ok(TrainConfig {
        seed: cfg.parse_value("run", "seed")?,
        epochs: cfg.parse_value("train", "epochs")?,
        batch_size: cfg.parse_value("train", "batch_size")?,
        shard_size: cfg.parse_value("train", "shard_size")?,
        workers: workers(cfg)?,
        base_lr: cfg.parse_value("train", "lr")?,
        decay_rate: cfg.parse_value("train", "decay_rate")?,
        decay_steps,
        margin_start: cfg.parse_value("train", "margin_start")?,
        margin_end: cfg.parse_value("train", "margin_end")?,
        clip_norm: cfg.parse_value("train", "clip_norm")?,
        val_fraction: cfg.parse_value("train", "val_fraction")?,
        train_subset: parse_subset(cfg, "train_subset")?,
        test_subset: parse_subset(cfg, "test_subset")?,
        eval_batch: cfg.parse_value("train", "eval_batch")?,
        out_dir: out_dir(cfg),
    })
}

fn write_confusion(out: &mut dyn Write, confusion: &[Vec<usize>]) -> std::io::Result<()> {
    writeln!(out, "confusion matrix (rows: true class, columns: predicted):")?;
    for row in confusion {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:6}")).collect();
        writeln!(out, "  {}", cells.join(" "))?;
    }
    Ok(())
}

fn cmd_train<T: Scalar>(cfg: &Config, out: &mut dyn Write) -> Result<i32> {
    let dataset = load_dataset(cfg)?;
    let classes = dataset.kind.classes();
    let nc = network_config(cfg, classes)?;
    let seed: u64 = cfg.parse_value("run", "seed")?;
    let mut net = Network::<T>::build(nc, seed)?;
    let tc = train_config(cfg)?;
    let meta = checkpoint_meta(cfg, classes)?;
    let _ = writeln!(
        out,
        "training {} / {} on {} ({} workers)",
        cfg.require("model", "procedure")?,
        cfg.require("model", "arch")?,
        dataset.kind.name(),
        tc.workers
    );
    let _ = writeln!(out, "epoch\ttrain_loss\tval_acc\tlr\twall_s");
    let report = train(&mut net, &dataset, &tc, &meta)?;
    let mut lines = String::new();
    for m in &report.epochs {
        lines.push_str(&m.line());
        lines.push('\n');
        let _ = writeln!(out, "{}", m.line());
    }
    if let Some(dir) = out_dir(cfg) {
        std::fs::write(dir.join("metrics.log"), &lines)?;
    }
    let _ = writeln!(
        out,
        "best validation accuracy: {:.4}",
        report.best_val_accuracy
    );
    let _ = writeln!(out, "test accuracy: {:.4}", report.test_accuracy);
    let _ = write_confusion(out, &report.test_confusion);
    if let Some(dir) = &report.checkpoint_dir {
        let _ = writeln!(out, "best checkpoint: {}", dir.display());
    }
    Ok(0)
}

fn cmd_eval<T: Scalar>(cfg: &Config, out: &mut dyn Write) -> Result<i32> {
    let ckpt = cfg.require("eval", "checkpoint")?;
    if ckpt.is_empty() {
        return Err(Error::InvalidArgument {
            what: "--checkpoint is required for eval".into(),
        });
    }
    let ckpt = PathBuf::from(ckpt);
    let manifest = checkpoint::read_manifest(&ckpt)?;
    let classes: usize = manifest
        .meta
        .get("classes")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Checkpoint {
            detail: "checkpoint metadata missing classes".into(),
        })?;
    // rebuild the architecture recorded in the checkpoint metadata
    let mut meta_cfg = Config::new();
    for key in ["procedure", "arch", "iterations"] {
        let v = manifest.meta.get(key).ok_or_else(|| Error::Checkpoint {
            detail: format!("checkpoint metadata missing {key}"),
        })?;
        meta_cfg.set("model", key, v);
    }
    let nc = network_config(&meta_cfg, classes)?;
    let mut net = Network::<T>::build(nc, 0)?;
    checkpoint::load_into(&ckpt, &mut net.store)?;
    let dataset = load_dataset(cfg)?;
    if dataset.kind.classes() != classes {
        return Err(Error::Checkpoint {
            detail: format!(
                "checkpoint has {classes} classes but dataset {} has {}",
                dataset.kind.name(),
                dataset.kind.classes()
            ),
        });
    }
    let report = evaluate(
        &net,
        &dataset,
        parse_subset(cfg, "test_subset")?,
        cfg.parse_value("eval", "eval_batch")?,
        workers(cfg)?,
    )?;
    let _ = writeln!(out, "test accuracy: {:.4} ({} samples)", report.accuracy, report.samples);
    let _ = write_confusion(out, &report.confusion);
    Ok(0)
}

fn parse_lambda_grid(cfg: &Config) -> Result<Vec<(f64, f64)>> {
    let parse_list = |key: &str| -> Result<Vec<f64>> {
        cfg.require("toy", key)?
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| Error::Config {
                    detail: format!("toy.{key} has a non-numeric entry {s:?}"),
                })
            })
            .collect()
    };
    let l1 = parse_list("lambda1")?;
    let l2 = parse_list("lambda2")?;
    if l1.len() != l2.len() {
        return Err(Error::Config {
            detail: format!(
                "toy.lambda1 has {} entries but toy.lambda2 has {}",
                l1.len(),
                l2.len()
            ),
        });
    }
    Ok(l1.into_iter().zip(l2).collect())
}

/// Emit the toy table: one row per vote (x, y, activation, then the final
/// compatibility under each lambda pair), followed by one pose row per pair.
pub fn toy_table(
    cloud: &toy::ToyVoteCloud<f64>,
    solutions: &[crate::similarity::ToySolution<f64>],
) -> String {
    let mut s = String::new();
    let mut header = String::from("# x\ty\tactivation");
    for sol in solutions {
        header.push_str(&format!("\tc[l1={},l2={}]", sol.lambda1, sol.lambda2));
    }
    s.push_str(&header);
    s.push('\n');
    for i in 0..cloud.votes.len() {
        let v = cloud.votes.vote(i);
        let mut row = format!(
            "{:.6}\t{:.6}\t{:.6}",
            v[0],
            v[1],
            cloud.votes.activations().data()[i]
        );
        for sol in solutions {
            row.push_str(&format!("\t{:.6}", sol.compatibilities[i]));
        }
        s.push_str(&row);
        s.push('\n');
    }
    for sol in solutions {
        s.push_str(&format!(
            "mu\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}\n",
            sol.lambda1,
            sol.lambda2,
            sol.pose[0],
            sol.pose[1],
            sol.iterations_run,
            if sol.converged { "converged" } else { "capped" }
        ));
    }
    s
}

fn cmd_toy(cfg: &Config, out: &mut dyn Write) -> Result<i32> {
    let grid = parse_lambda_grid(cfg)?;
    let spec = toy::ToySpec {
        votes_per_cluster: cfg.parse_value("toy", "votes_per_cluster")?,
        scale: cfg.parse_value("toy", "scale")?,
        seed: cfg.parse_value("run", "seed")?,
        normalize_activations: cfg.get_bool("toy", "normalize", false)?,
        ..toy::ToySpec::default()
    };
    let cloud = toy::gen_toy_votes::<f64>(&spec)?;
    let iterations: usize = cfg.parse_value("toy", "iterations")?;
    let solutions = solve_toy(&cloud.votes, &grid, &Kernel::cosine(), iterations)?;
    let table = toy_table(&cloud, &solutions);
    match out_dir(cfg) {
        Some(dir) => {
            let path = dir.join("toy-table.tsv");
            std::fs::write(&path, &table)?;
            let _ = writeln!(out, "wrote {}", path.display());
        }
        None => {
            let _ = out.write_all(table.as_bytes());
        }
    }
    // per-pair summary: compatibility mass on each generating cluster
    for sol in &solutions {
        let mut mass = [0.0f64; 2];
        for (i, &c) in sol.compatibilities.iter().enumerate() {
            mass[cloud.assignments[i]] += c;
        }
        let _ = writeln!(
            out,
            "lambda1={} lambda2={}: cluster mass {:.4} / {:.4}, pose ({:.4}, {:.4})",
            sol.lambda1, sol.lambda2, mass[0], mass[1], sol.pose[0], sol.pose[1]
        );
    }
    Ok(0)
}

fn cmd_gradcheck(cfg: &Config, out: &mut dyn Write) -> Result<i32> {
    match cfg.require("run", "precision")? {
        "64" => {}
        other => {
            return Err(Error::InvalidArgument {
                what: format!(
                    "gradcheck requires --precision 64 (finite differences are unreliable at {other})"
                ),
            })
        }
    }
    let arch = "tiny";
    let spec = routing_spec(cfg, arch)?;
    let seed: u64 = cfg.parse_value("run", "seed")?;
    let max_coords: usize = cfg.parse_value("gradcheck", "max_coords")?;
    let report = network_gradient_report(spec, seed, max_coords)?;
    let _ = writeln!(
        out,
        "gradient check, procedure {} (tolerance {:.0e}):",
        cfg.require("model", "procedure")?,
        report.tolerance
    );
    let _ = out.write_all(report.table().as_bytes());
    if report.passes() {
        let _ = writeln!(out, "all parameters pass");
        Ok(0)
    } else {
        let _ = writeln!(out, "verification failure: max rel err {:.3e}", report.max_rel_err());
        Ok(1)
    }
}

fn cmd_shapes(cfg: &Config, out: &mut dyn Write) -> Result<i32> {
    let dataset = cfg.require("data", "dataset")?;
    let classes = match dataset {
        "mnist" | "synthetic" => DatasetKind::Mnist.classes(),
        "smallnorb" => DatasetKind::SmallNorb.classes(),
        other => {
            return Err(Error::Config {
                detail: format!("unknown dataset {other}"),
            })
        }
    };
    let nc = network_config(cfg, classes)?;
    let net = Network::<f32>::build(nc, 0)?;
    let _ = writeln!(out, "{:<42} {:<18} {}", "Layer", "Details", "Output shape");
    for row in net.shape_trace(1) {
        let shape = row
            .output_shape
            .iter()
            .enumerate()
            .map(|(i, d)| {
                if i == 0 {
                    "B".to_string()
                } else {
                    d.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("x");
        let _ = writeln!(out, "{:<42} {:<18} {}", row.layer, row.details, shape);
    }
    let _ = writeln!(
        out,
        "non-routing parameters: {}",
        net.non_routing_param_count()
    );
    Ok(0)
}

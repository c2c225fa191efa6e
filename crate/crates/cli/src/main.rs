//! Command-line front end: dataset conversion, training, evaluation,
//! checkpoint inspection, and dataset verification.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msgn_core::checkpoint::Checkpoint;
use msgn_core::error::Error;
use msgn_core::frame_temporal::{smp_counts, top_joints};
use msgn_core::model::{Model, ModelConfig};
use msgn_core::preprocess::{preprocess_sample, SampleMode, SamplerConfig};
use msgn_core::skeleton::{
    load_canonical, parse_ntu_skeleton, split_protocol, write_canonical_file, IdLists, Protocol,
    SkeletonSequence, Split,
};
use msgn_core::trainer::{EpochMetrics, TrainConfig, Trainer};
use msgn_core::{synth, Graph};

#[derive(Parser)]
#[command(name = "msgn", about = "Skeleton-based action recognition", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config with [model], [train], and [data] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set model.scales=[15,20,25]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Overrides train.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Disable all training-time randomness that is not seed-derived:
    /// rotation augmentation off, first-frame clip sampling at evaluation.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert NTU .skeleton files to the canonical dataset format.
    Convert {
        /// .skeleton files or directories containing them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// Dataset name recorded in each record.
        #[arg(long, default_value = "ntu")]
        dataset: String,
        /// Keep zero-energy ghost tracks instead of dropping them.
        #[arg(long)]
        keep_ghosts: bool,
    },
    /// Generate the synthetic four-class corpus in canonical format.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        per_class: usize,
        #[arg(long, default_value_t = 40)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from scratch.
    Train {
        /// Canonical dataset file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Continue training from a checkpoint.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Inspect a model or its behaviour on a record.
    Inspect {
        #[command(subcommand)]
        what: InspectCmd,
    },
    /// Validate a canonical dataset file and report statistics.
    Verify {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Subcommand)]
enum InspectCmd {
    /// List every parameter tensor and both size totals.
    Params {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Which joints win the spatial max pool for one record.
    Smp {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        record: usize,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// The learned joint adjacency for one frame of one record.
    Graph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        record: usize,
        #[arg(long, default_value_t = 0)]
        frame: usize,
    },
}

/// Everything the config file can set.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
    data: DataConfig,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct DataConfig {
    protocol: String,
    /// Fraction of the train side carved out for validation.
    val_fraction: f64,
    /// Id lists preset: "ntu60", "ntu120", or "all-train".
    ids: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            protocol: "cross-subject".into(),
            val_fraction: 0.1,
            ids: "ntu60".into(),
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<FileConfig, Error> {
    let mut value: toml::Value = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            text.parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Value::Table(Default::default()),
    };
    for set in &args.sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set needs KEY=VALUE, got {set:?}")))?;
        // parse the value as TOML (numbers, bools, arrays); fall back to string
        let parsed: toml::Value = match format!("x = {raw}").parse::<toml::Value>() {
            Ok(toml::Value::Table(t)) => t.get("x").cloned().unwrap(),
            _ => toml::Value::String(raw.to_string()),
        };
        let mut node = &mut value;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("--set path {key:?} crosses a non-table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
    }
    let mut cfg: FileConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if args.deterministic {
        cfg.train.augment = None;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn id_lists(name: &str) -> Result<IdLists, Error> {
    match name {
        "ntu60" => Ok(IdLists::ntu60()),
        "ntu120" => Ok(IdLists::ntu120()),
        // every id seen in the data goes to the train side
        "all-train" => Ok(IdLists {
            train_subjects: (1..=200).collect(),
            test_subjects: Some(vec![]),
            train_cameras: (1..=10).collect(),
            test_cameras: Some(vec![]),
            train_setups: (1..=50).collect(),
            test_setups: Some(vec![]),
        }),
        _ => Err(Error::Config(format!("unknown id list preset {name:?}"))),
    }
}

fn load_data(path: &Path) -> Result<(Option<String>, Vec<SkeletonSequence>), Error> {
    let text = std::fs::read_to_string(path)?;
    load_canonical(&text)
}

fn collect_skeleton_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Error> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            for entry in std::fs::read_dir(input)? {
                let p = entry?.path();
                if p.extension().is_some_and(|e| e == "skeleton") {
                    files.push(p);
                }
            }
        } else {
            files.push(input.clone());
        }
    }
    files.sort();
    Ok(files)
}

fn cmd_convert(
    inputs: &[PathBuf],
    out: &Path,
    dataset: &str,
    keep_ghosts: bool,
) -> Result<(), Error> {
    let files = collect_skeleton_files(inputs)?;
    if files.is_empty() {
        return Err(Error::Data("no .skeleton files found".into()));
    }
    let mut seqs = Vec::new();
    let mut ghosts = 0usize;
    for f in &files {
        let text = std::fs::read_to_string(f)?;
        let name = f.file_name().unwrap().to_string_lossy();
        for s in parse_ntu_skeleton(&text, &name)? {
            if !keep_ghosts && s.is_ghost() {
                ghosts += 1;
                continue;
            }
            seqs.push(s);
        }
    }
    std::fs::write(out, write_canonical_file(&seqs, dataset))?;
    println!(
        "converted {} files -> {} records ({} ghost tracks dropped)",
        files.len(),
        seqs.len(),
        ghosts
    );
    Ok(())
}

fn build_splits(
    data: &[SkeletonSequence],
    cfg: &FileConfig,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), Error> {
    let protocol: Protocol = cfg.data.protocol.parse()?;
    let ids = id_lists(&cfg.data.ids)?;
    let manifest = split_protocol(
        data,
        "dataset",
        cfg.model.classes,
        protocol,
        &ids,
        cfg.data.val_fraction,
        cfg.train.seed,
    )?;
    println!("manifest digest {}", manifest.digest());
    Ok((
        manifest.indices(Split::Train),
        manifest.indices(Split::Val),
        manifest.indices(Split::Test),
    ))
}

fn run_training(
    mut trainer: Trainer,
    data: &[SkeletonSequence],
    cfg: &FileConfig,
    out_dir: &Path,
) -> Result<(), Error> {
    std::fs::create_dir_all(out_dir)?;
    let (train_ids, val_ids, _) = build_splits(data, cfg)?;
    if train_ids.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let metrics_path = out_dir.join("metrics.csv");
    let mut rows: Vec<EpochMetrics> = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        let m = trainer.train_epoch(data, &train_ids)?;
        let mut line = format!("epoch {} lr {} loss {:.6}", m.epoch, m.lr, m.train_loss);
        if !val_ids.is_empty() {
            let r = trainer.evaluate(data, &val_ids)?;
            line.push_str(&format!(" val-acc {:.4}", r.accuracy()));
        }
        println!("{line}");
        rows.push(m);
        let ck = Checkpoint::capture(
            &trainer.model,
            trainer.epoch,
            trainer.cfg.seed,
            Some(&trainer.adam),
        );
        ck.save(&out_dir.join("checkpoint.bin"))?;
        let mut csv = String::from(EpochMetrics::csv_header());
        csv.push('\n');
        for r in &rows {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        std::fs::write(&metrics_path, &csv)?;
    }
    println!("done; checkpoint at {}", out_dir.join("checkpoint.bin").display());
    Ok(())
}

fn cmd_train(data_path: &Path, out_dir: &Path, args: &ConfigArgs) -> Result<(), Error> {
    let cfg = load_config(args)?;
    let (_, data) = load_data(data_path)?;
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let (with_bn, without_bn) = model.param_counts();
    println!("parameters {with_bn} (excluding norm affine: {without_bn})");
    let trainer = Trainer::new(model, cfg.train.clone());
    run_training(trainer, &data, &cfg, out_dir)
}

fn cmd_resume(
    checkpoint: &Path,
    data_path: &Path,
    out_dir: &Path,
    args: &ConfigArgs,
) -> Result<(), Error> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.restore()?;
    let mut cfg = load_config(args)?;
    cfg.model = ck.config.clone();
    if args.seed.is_none() {
        cfg.train.seed = ck.global_seed;
    }
    let adam = ck
        .adam
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
    let (_, data) = load_data(data_path)?;
    println!("resuming from epoch {}", ck.epoch);
    let trainer = Trainer::resume(model, adam, cfg.train.clone(), ck.epoch);
    run_training(trainer, &data, &cfg, out_dir)
}

fn cmd_eval(checkpoint: &Path, data_path: &Path, args: &ConfigArgs) -> Result<(), Error> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.restore()?;
    let mut cfg = load_config(args)?;
    cfg.model = ck.config.clone();
    if args.deterministic {
        cfg.train.eval_views = 1;
    }
    let (_, data) = load_data(data_path)?;
    let (_, _, test_ids) = build_splits(&data, &cfg)?;
    if test_ids.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let mut trainer = Trainer::resume(model, ck.adam.clone().unwrap_or_else(|| {
        msgn_core::AdamState::new(&ck.restore().unwrap().params, 0.0, 0.0)
    }), cfg.train.clone(), ck.epoch);
    let r = trainer.evaluate(&data, &test_ids)?;
    println!("accuracy {:.4} ({}/{})", r.accuracy(), r.correct, r.total);
    for (c, (ok, n)) in r.per_class.iter().enumerate() {
        if *n > 0 {
            println!("class {c}: {:.4} ({ok}/{n})", *ok as f64 / *n as f64);
        }
    }
    Ok(())
}

fn cmd_inspect_params(checkpoint: Option<&Path>, args: &ConfigArgs) -> Result<(), Error> {
    let ck = match checkpoint {
        Some(p) => Checkpoint::load(p)?,
        None => {
            let cfg = load_config(args)?;
            let model = Model::new(cfg.model, cfg.train.seed)?;
            Checkpoint::capture(&model, 0, cfg.train.seed, None)
        }
    };
    print!("{}", ck.manifest());
    Ok(())
}

/// Record + deterministic clips at every model scale.
fn clips_for_record(
    model: &Model,
    data: &[SkeletonSequence],
    record: usize,
) -> Result<Vec<Vec<f64>>, Error> {
    let seq = data
        .get(record)
        .ok_or_else(|| Error::Data(format!("record {record} out of range")))?;
    let mut clips = Vec::new();
    for &t in model.cfg.scales.iter() {
        let sampler = SamplerConfig {
            clip_len: t,
            mode: SampleMode::First,
        };
        clips.push(preprocess_sample(
            seq,
            &sampler,
            model.cfg.reference_joint,
            None,
            0,
        )?);
    }
    Ok(clips)
}

fn cmd_inspect_smp(
    checkpoint: &Path,
    data_path: &Path,
    record: usize,
    top: usize,
) -> Result<(), Error> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut model = ck.restore()?;
    let (_, data) = load_data(data_path)?;
    let clips = clips_for_record(&model, &data, record)?;
    let joints = model.cfg.joints;
    println!("record {record} label {}", data[record].label);
    for si in 0..model.cfg.scales.len() {
        let (g, _, smp) = model.forward_scale(si, &clips[si], 1, false)?;
        let counts = smp_counts(&g, smp, joints)?;
        let ranked = top_joints(&counts[0], top);
        let total: usize = counts[0].iter().sum();
        let desc: Vec<String> = ranked
            .iter()
            .map(|(j, c)| format!("joint {j} x{c}"))
            .collect();
        println!(
            "clip length {}: pool wins {} total; top {}: {}",
            model.cfg.scales[si],
            total,
            top,
            desc.join(", ")
        );
    }
    Ok(())
}

fn cmd_inspect_graph(
    checkpoint: &Path,
    data_path: &Path,
    record: usize,
    frame: usize,
) -> Result<(), Error> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut model = ck.restore()?;
    let (_, data) = load_data(data_path)?;
    let clips = clips_for_record(&model, &data, record)?;
    let t = model.cfg.scales[0];
    if frame >= t {
        return Err(Error::Data(format!(
            "frame {frame} out of range for clip length {t}"
        )));
    }
    // rebuild the adjacency exactly as the first trunk computes it
    let j = model.cfg.joints;
    let adj = adjacency_for(&mut model, &clips[0], t, frame)?;
    println!("record {record} frame {frame} adjacency ({j} x {j}), rows sum to 1:");
    for row in adj.chunks(j) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("{}", cells.join(" "));
    }
    Ok(())
}

fn adjacency_for(model: &mut Model, clip: &[f64], t: usize, frame: usize) -> Result<Vec<f64>, Error> {
    let j = model.cfg.joints;
    // run the full branch once; the adjacency is frame-local, so feeding the
    // single frame of interest as a length-1 batch row gives the same matrix
    let stride = j * 3;
    let one = &clip[frame * stride..(frame + 1) * stride];
    let mut g = Graph::new();
    let _ = t;
    let dr_var = model.trunk_features(&mut g, one, 1, 1)?;
    let adj = model.trunk_adjacency(&mut g, dr_var)?;
    Ok(g.values(adj).to_vec())
}

fn cmd_verify(data_path: &Path) -> Result<(), Error> {
    let (dataset, data) = load_data(data_path)?;
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    let mut ghosts = 0usize;
    let mut frames_min = usize::MAX;
    let mut frames_max = 0usize;
    for s in &data {
        *by_class.entry(s.label).or_insert(0) += 1;
        if s.is_ghost() {
            ghosts += 1;
        }
        frames_min = frames_min.min(s.frames);
        frames_max = frames_max.max(s.frames);
    }
    println!(
        "dataset {} records {} classes {} ghosts {}",
        dataset.as_deref().unwrap_or("?"),
        data.len(),
        by_class.len(),
        ghosts
    );
    if !data.is_empty() {
        println!("frames {frames_min}..{frames_max}");
    }
    for (c, n) in by_class {
        println!("class {c}: {n}");
    }
    Ok(())
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Convert {
            inputs,
            out,
            dataset,
            keep_ghosts,
        } => cmd_convert(&inputs, &out, &dataset, keep_ghosts),
        Cmd::Synth {
            out,
            per_class,
            frames,
            seed,
        } => {
            let seqs = synth::generate(per_class, frames, seed);
            std::fs::write(&out, write_canonical_file(&seqs, "synth"))?;
            println!("wrote {} records to {}", seqs.len(), out.display());
            Ok(())
        }
        Cmd::Train { data, out_dir, cfg } => cmd_train(&data, &out_dir, &cfg),
        Cmd::Resume {
            checkpoint,
            data,
            out_dir,
            cfg,
        } => cmd_resume(&checkpoint, &data, &out_dir, &cfg),
        Cmd::Eval {
            checkpoint,
            data,
            cfg,
        } => cmd_eval(&checkpoint, &data, &cfg),
        Cmd::Inspect { what } => match what {
            InspectCmd::Params { checkpoint, cfg } => {
                cmd_inspect_params(checkpoint.as_deref(), &cfg)
            }
            InspectCmd::Smp {
                checkpoint,
                data,
                record,
                top,
            } => cmd_inspect_smp(&checkpoint, &data, record, top),
            InspectCmd::Graph {
                checkpoint,
                data,
                record,
                frame,
            } => cmd_inspect_graph(&checkpoint, &data, record, frame),
        },
        Cmd::Verify { data } => cmd_verify(&data),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 2,
                Error::Parse { .. } | Error::Data(_) | Error::Protocol(_) | Error::Checkpoint(_) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

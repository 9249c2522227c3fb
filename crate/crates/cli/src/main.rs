use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ofa_core::checkpoint::Checkpoint;
use ofa_core::config::RunConfig;
use ofa_core::dataset::Dataset;
use ofa_core::probe::{compare_runs, probe_classification, probe_segmentation, split_dataset, ProbeReport, TaskKind};
use ofa_core::trainer::{pretrain, DataSource, TrainError};
use ofa_core::{OfaNet, SynthGenerator};

mod output;

use output::Staged;

#[derive(Parser)]
#[command(name = "ofa", version, about = "Shared-backbone multi-sensor masked autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Pretrain,
    Cls,
    Seg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Cls,
    Seg,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Cls => TaskKind::Classification,
            Task::Seg => TaskKind::Segmentation,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        modality: String,
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Number of classes (defaults from the config: 4 for cls, 2 for seg).
        #[arg(long)]
        classes: Option<usize>,
        /// Image side in pixels (defaults to the config input size).
        #[arg(long)]
        size: Option<usize>,
        /// Run config supplying custom modalities and defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pretrain with masked image modeling and write checkpoints.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a linear probe on frozen features and print a report line.
    Probe {
        #[arg(long, value_enum)]
        task: Task,
        /// Checkpoint path, or `random-init` for an untrained net.
        #[arg(long)]
        checkpoint: String,
        /// Labeled dataset; split into train and test unless --eval-data is given.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        /// Config for random-init nets and probe settings (default: the
        /// checkpoint's embedded config).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Method name in the report (default: checkpoint file stem).
        #[arg(long)]
        method: Option<String>,
        /// Also append the report line to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print tensor names, shapes, parameter counts and the embedded config.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render comparison tables from report-line files.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn threads() -> Result<usize> {
    match std::env::var("OFA_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n >= 1).with_context(|| format!("OFA_THREADS must be a positive integer, got '{v}'")),
        Err(_) => Ok(1),
    }
}

fn read_config(path: &Path) -> Result<(String, RunConfig)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg = RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
    Ok((text, cfg))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { modality, kind, count, seed, out, classes, size, config } => {
            let cfg = match &config {
                Some(p) => read_config(p)?.1,
                None => RunConfig::default(),
            };
            gen_data(&cfg, &modality, kind, count, seed, &out, classes, size)
        }
        Command::Pretrain { config, out_dir } => run_pretrain(&config, &out_dir),
        Command::Probe { task, checkpoint, data, eval_data, lr, config, method, out } => {
            run_probe(task.into(), &checkpoint, &data, eval_data.as_deref(), lr, config.as_deref(), method, out.as_deref())
        }
        Command::Inspect { checkpoint } => inspect(&checkpoint),
        Command::Report { inputs } => report(&inputs),
    }
}

#[allow(clippy::too_many_arguments)]
fn gen_data(cfg: &RunConfig, modality: &str, kind: DataKind, count: usize, seed: u64, out: &Path, classes: Option<usize>, size: Option<usize>) -> Result<()> {
    let reg = cfg.registry();
    let spec = reg.lookup(modality)?;
    let size = size.unwrap_or(cfg.train.model.input_size);
    if count == 0 {
        bail!("--count must be at least 1");
    }
    let generator = SynthGenerator::new(size).with_threads(threads()?);
    let samples = match kind {
        DataKind::Pretrain => {
            let idx: Vec<u64> = (0..count as u64).collect();
            generator.pretrain_batch(spec, seed, &idx)
        }
        DataKind::Cls => generator.cls_dataset(spec, count, classes.unwrap_or(cfg.probe.cls_classes), seed)?,
        DataKind::Seg => generator.seg_dataset(spec, count, classes.unwrap_or(cfg.probe.seg_classes), seed)?,
    };
    let ds = Dataset::from_samples(modality, samples)?;
    let staged = Staged::new(out)?;
    ds.save(staged.path())?;
    staged.commit()?;
    println!("wrote {} {} samples of {} ({}x{}x{}) to {}", ds.len(), kind_name(kind), modality, size, size, spec.channels, out.display());
    Ok(())
}

fn kind_name(kind: DataKind) -> &'static str {
    match kind {
        DataKind::Pretrain => "pretrain",
        DataKind::Cls => "cls",
        DataKind::Seg => "seg",
    }
}

fn run_pretrain(config: &Path, out_dir: &Path) -> Result<()> {
    let (text, cfg) = read_config(config)?;
    let threads = threads()?;
    let registry = cfg.registry();
    let source = match &cfg.data_dir {
        None => DataSource::Synthetic,
        Some(dir) => {
            let base = config.parent().unwrap_or(Path::new(".")).join(dir);
            let mut sets = BTreeMap::new();
            for id in &cfg.train.modalities {
                let path = base.join(format!("{id}.ofad"));
                let ds = Dataset::load(&path).with_context(|| format!("loading pretraining data {}", path.display()))?;
                if ds.modality != *id {
                    bail!("{} holds modality '{}', expected '{id}'", path.display(), ds.modality);
                }
                sets.insert(id.clone(), ds);
            }
            DataSource::Files(sets)
        }
    };
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let every = cfg.train.checkpoint_every;
    let result = (|| -> Result<()> {
        let outcome = pretrain(&cfg.train, &registry, &source, threads, |epoch, net, _| {
            if every > 0 && (epoch + 1) % every == 0 {
                let path = out_dir.join(format!("epoch{:03}.ofac", epoch + 1));
                write_checkpoint(net, &text, &path).map_err(|e| TrainError::Callback(format!("{e:#}")))?;
                written.push(path);
            }
            Ok(())
        })?;
        let path = out_dir.join("final.ofac");
        write_checkpoint(&outcome.net, &text, &path)?;
        written.push(path);
        let log_path = out_dir.join("loss.log");
        let staged = Staged::new(&log_path)?;
        let mut w = std::io::BufWriter::new(fs::File::create(staged.path())?);
        for r in &outcome.log {
            writeln!(w, "{r}")?;
        }
        w.flush()?;
        drop(w);
        staged.commit()?;
        written.push(log_path);
        println!("{} steps, {} parameters, outputs in {}", outcome.log.len(), outcome.net.param_count(), out_dir.display());
        Ok(())
    })();
    if result.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
    }
    result
}

fn write_checkpoint(net: &OfaNet<f32>, config_text: &str, path: &Path) -> Result<()> {
    let staged = Staged::new(path)?;
    Checkpoint::from_net(net, config_text).save(staged.path())?;
    staged.commit()
}

#[allow(clippy::too_many_arguments)]
fn run_probe(
    task: TaskKind,
    checkpoint: &str,
    data: &Path,
    eval_data: Option<&Path>,
    lr: Option<f64>,
    config: Option<&Path>,
    method: Option<String>,
    out: Option<&Path>,
) -> Result<()> {
    let threads = threads()?;
    let explicit = config.map(read_config).transpose()?.map(|(_, c)| c);
    let (cfg, mut net, default_method) = if checkpoint == "random-init" {
        let cfg = explicit.unwrap_or_default();
        let specs = cfg.registry().select(&cfg.train.modalities)?;
        let net = OfaNet::new(cfg.train.model.clone(), &specs, cfg.train.seed)?;
        (cfg, net, "random-init".to_string())
    } else {
        let path = Path::new(checkpoint);
        let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let (embedded, net) = ck.restore()?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
        (explicit.unwrap_or(embedded), net, stem)
    };
    let load = |p: &Path| Dataset::load(p).with_context(|| format!("loading dataset {}", p.display()));
    let ds = load(data)?;
    let (train, test) = match eval_data {
        Some(p) => (ds, load(p)?),
        None => split_dataset(&ds, cfg.probe.train_fraction)?,
    };
    if train.modality != test.modality {
        bail!("train data is '{}' but eval data is '{}'", train.modality, test.modality);
    }
    if !net.has_modality(&train.modality) {
        // modality unseen in pretraining: attach a freshly initialized embedder
        net.add_modality(cfg.registry().lookup(&train.modality)?)?;
    }
    let mut pc = cfg.probe.probe_config(task, cfg.train.seed);
    if let Some(lr) = lr {
        pc.lr = lr;
    }
    let outcome = match task {
        TaskKind::Classification => probe_classification(&net, &train, &test, &pc, threads)?,
        TaskKind::Segmentation => probe_segmentation(&net, &train, &test, &pc, threads)?,
    };
    let report = ProbeReport::new(task, train.modality.clone(), method.unwrap_or(default_method), outcome.test_metric);
    println!("{report}");
    if let Some(path) = out {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
        writeln!(f, "{report}")?;
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    let width = ck.tensors.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    for (name, t) in &ck.tensors {
        println!("{name:<width$}  {:<14}  {}", format!("{:?}", t.shape()), t.numel());
        let group = match name.split('.').collect::<Vec<_>>().as_slice() {
            ["backbone", ..] => "backbone".to_string(),
            [kind, id, ..] => format!("{kind}.{id}"),
            _ => name.clone(),
        };
        *groups.entry(group).or_default() += t.numel();
    }
    println!();
    for (g, n) in &groups {
        println!("{g:<24} {n}");
    }
    println!("{:<24} {}", "total", ck.param_count());
    println!("\n# embedded config");
    print!("{}", ck.config_text);
    Ok(())
}

fn report(inputs: &[PathBuf]) -> Result<()> {
    let mut groups: Vec<((TaskKind, String, String), Vec<ProbeReport>)> = Vec::new();
    for path in inputs {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let r: ProbeReport = line.parse().with_context(|| format!("{}:{}", path.display(), i + 1))?;
            let key = (r.task, r.dataset.clone(), r.metric.clone());
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, rows)) => rows.push(r),
                None => groups.push((key, vec![r])),
            }
        }
    }
    if groups.is_empty() {
        bail!("no report lines found");
    }
    let mut first = true;
    for ((task, dataset, _), rows) in &groups {
        let table = compare_runs(rows).with_context(|| format!("{task}/{dataset}"))?;
        if !first {
            println!();
        }
        first = false;
        print!("{table}");
    }
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gcdlab_core::data::{generate, load_dataset, make_split, save_dataset, Dataset, GcdSplit};
use gcdlab_core::eval::{bias_report, EvalReport};
use gcdlab_core::experiment::{
    kmeans_baseline, preset, run_sweep, sweep_csv, Axis, ExperimentConfig, SweepSpec, PRESETS,
};
use gcdlab_core::model::{load_checkpoint, save_checkpoint, CheckpointMeta, Model};
use gcdlab_core::train::{evaluate, pretrain, train_run};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "gcdlab",
    version,
    about = "Adapter-tuned category discovery on synthetic token data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset and its split.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Self-supervised pretraining of the backbone, then freeze it.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Train adapters and heads on a frozen backbone.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        over: Overrides,
        /// Pretrained backbone checkpoint; pretrains from the config if absent.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Score a checkpoint: prototype accuracy and a k-means baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// k-means seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fan out runs over one axis and several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
        /// activation, s_a, d_hat, n or s_d.
        #[arg(long, conflicts_with = "preset")]
        axis: Option<Axis>,
        #[arg(long, value_delimiter = ',', requires = "axis")]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// One of alpha, threshold, beta, scale, bottleneck, blocks, s_d.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Bias and feature-drift trajectories over a run's checkpoints.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Directory holding the run's checkpoints.
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config JSON; built-in defaults if absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "gcdlab-out")]
    out: PathBuf,
}

#[derive(Args)]
struct Inputs {
    /// Dataset file from gen-data; generated from the config if absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    da: Option<Switch>,
    #[arg(long)]
    logit_da: Option<Switch>,
    /// Adapter activation, e.g. linear, relu, leaky_relu:0.5, elu:1.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    contrastive_mode: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(d) = self.da {
            cfg.train.da_enabled = d.on();
        }
        if let Some(d) = self.logit_da {
            cfg.train.logit_da = d.on();
        }
        if let Some(a) = &self.activation {
            cfg.adapter.activation = a.parse()?;
        }
        if let Some(m) = &self.contrastive_mode {
            cfg.train.weights.contrastive_mode = m.parse()?;
        }
        cfg.validate()?;
        Ok(())
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_inputs(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<(Dataset, GcdSplit)> {
    match &inputs.data {
        Some(p) => {
            let (data, split) =
                load_dataset(p).with_context(|| format!("dataset {}", p.display()))?;
            let split = match split {
                Some(s) => s,
                None => make_split(
                    &data,
                    data.spec.num_seen,
                    cfg.labeled_fraction,
                    cfg.split_seed,
                )?,
            };
            Ok((data, split))
        }
        None => {
            let data = generate(&cfg.data)?;
            let split = make_split(
                &data,
                cfg.data.num_seen,
                cfg.labeled_fraction,
                cfg.split_seed,
            )?;
            Ok((data, split))
        }
    }
}

fn pretrained(cfg: &ExperimentConfig, data: &Dataset) -> Result<Model> {
    let mut fresh = Model::new_backbone(&cfg.backbone, cfg.pretrain.seed)?;
    fresh.head = cfg.head.clone();
    Ok(pretrain(fresh, data, &cfg.pretrain)?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn report_json(r: &EvalReport) -> serde_json::Value {
    serde_json::to_value(r).expect("report serializes")
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { common } => {
            let cfg = load_config(&common)?;
            fs::create_dir_all(&common.out)?;
            let (data, split) = load_inputs(&cfg, &Inputs { data: None })?;
            let path = common.out.join("dataset.bin");
            save_dataset(&path, &data, Some(&split))?;
            println!(
                "{} samples, {} labeled, {} unlabeled -> {}",
                data.len(),
                split.labeled.len(),
                split.unlabeled.len(),
                path.display()
            );
        }
        Cmd::Pretrain { common, inputs } => {
            let cfg = load_config(&common)?;
            fs::create_dir_all(&common.out)?;
            let (data, _) = load_inputs(&cfg, &inputs)?;
            let model = pretrained(&cfg, &data)?;
            let path = common.out.join("backbone.ckpt");
            let meta = CheckpointMeta {
                seed: cfg.pretrain.seed,
                epoch: cfg.pretrain.epochs,
            };
            save_checkpoint(&path, &model, &meta)?;
            println!("frozen backbone -> {}", path.display());
        }
        Cmd::Train {
            common,
            inputs,
            over,
            backbone,
        } => {
            let mut cfg = load_config(&common)?;
            over.apply(&mut cfg)?;
            fs::create_dir_all(&common.out)?;
            let (data, split) = load_inputs(&cfg, &inputs)?;
            let mut model = match &backbone {
                Some(p) => {
                    load_checkpoint(p)
                        .with_context(|| format!("backbone {}", p.display()))?
                        .0
                }
                None => pretrained(&cfg, &data)?,
            };
            model.drop_adapters();
            model.drop_heads();
            model.freeze_backbone();
            let seed = cfg.train.seed;
            model.attach_adapters(&cfg.adapter, seed)?;
            model.attach_heads(&cfg.head, seed)?;
            write(
                &common.out.join("config.json"),
                serde_json::to_string_pretty(&cfg)?,
            )?;
            let out = train_run(model, &data, &split, &cfg.train, Some(&common.out))?;
            let e = &out.final_eval;
            let summary = json!({
                "seed": seed,
                "acc_all": e.acc_all,
                "acc_seen": e.acc_seen,
                "acc_novel": e.acc_novel,
                "predicted_seen_ratio": e.predicted_seen_ratio,
                "prior_seen_ratio": split.dataset_seen_ratio(&data.labels),
                "sparsity": e.sparsity,
                "similarity": e.similarity,
                "pi_estimates": out.pi_estimates,
                "pi": out.pi.as_ref().map(|p| p.data().to_vec()),
            });
            write(
                &common.out.join("summary.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
            println!(
                "acc_all {:.4}  acc_seen {:.4}  acc_novel {:.4}  seen_ratio {:.4}",
                e.acc_all, e.acc_seen, e.acc_novel, e.predicted_seen_ratio
            );
        }
        Cmd::Eval {
            common,
            inputs,
            checkpoint,
            seed,
        } => {
            let cfg = load_config(&common)?;
            fs::create_dir_all(&common.out)?;
            let (data, split) = load_inputs(&cfg, &inputs)?;
            let (model, _) = load_checkpoint(&checkpoint)
                .with_context(|| format!("checkpoint {}", checkpoint.display()))?;
            let km = kmeans_baseline(&model, &data, &split, seed)?;
            let gcd = if model.params.contains("head.prototypes") {
                let mut frozen = model.clone();
                frozen.drop_adapters();
                let reference = frozen.infer(&data.samples, None, 256)?.features;
                let snap = evaluate(&model, &data, &split, cfg.train.weights.tau_s, &reference)?;
                let seen = split.seen_mask();
                let upred: Vec<usize> = split
                    .unlabeled
                    .iter()
                    .map(|&i| snap.predictions[i])
                    .collect();
                let utruth: Vec<usize> = split.unlabeled.iter().map(|&i| data.labels[i]).collect();
                let report = gcdlab_core::eval::gcd_accuracy(&upred, &utruth, &seen)?;
                println!("prototype classifier\n{report}");
                Some(report_json(&report))
            } else {
                None
            };
            println!("k-means baseline\n{km}");
            let doc = json!({ "prototypes": gcd, "kmeans": report_json(&km) });
            write(
                &common.out.join("eval.json"),
                serde_json::to_string_pretty(&doc)?,
            )?;
        }
        Cmd::Sweep {
            common,
            over,
            axis,
            values,
            seeds,
            preset: name,
            workers,
        } => {
            let mut cfg = load_config(&common)?;
            over.apply(&mut cfg)?;
            let mut spec = match (&name, axis) {
                (Some(n), _) => preset(n, cfg.backbone.num_blocks).with_context(|| {
                    format!("unknown preset `{n}`; one of {}", PRESETS.join(", "))
                })?,
                (None, Some(axis)) => SweepSpec {
                    axis,
                    values,
                    seeds: vec![0],
                },
                (None, None) => bail!("sweep needs --axis with --values, or --preset"),
            };
            if !seeds.is_empty() {
                spec.seeds = seeds;
            }
            fs::create_dir_all(&common.out)?;
            let rows = run_sweep(&cfg, &spec, workers, Some(&common.out.join("runs")))?;
            let path = common.out.join("sweep.csv");
            write(&path, sweep_csv(&rows))?;
            println!("{} runs -> {}", rows.len(), path.display());
        }
        Cmd::Analyze {
            common,
            inputs,
            run,
        } => {
            let cfg = load_config(&common)?;
            fs::create_dir_all(&common.out)?;
            let (data, split) = load_inputs(&cfg, &inputs)?;
            let mut ckpts: Vec<PathBuf> = fs::read_dir(&run)
                .with_context(|| format!("run directory {}", run.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
                .collect();
            if ckpts.is_empty() {
                bail!("no checkpoints in {}", run.display());
            }
            let mut loaded = Vec::new();
            for p in ckpts.drain(..) {
                let (m, meta) =
                    load_checkpoint(&p).with_context(|| format!("checkpoint {}", p.display()))?;
                loaded.push((meta.epoch, p, m));
            }
            loaded.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
            let seen = split.seen_mask();
            let mut csv = String::from("checkpoint,epoch,predicted_seen_ratio,acc_all,acc_seen,acc_novel,sparsity,similarity\n");
            for (epoch, path, model) in &loaded {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt");
                let mut frozen = model.clone();
                frozen.drop_adapters();
                let reference = frozen.infer(&data.samples, None, 256)?.features;
                let snap = evaluate(model, &data, &split, cfg.train.weights.tau_s, &reference)?;
                csv.push_str(&format!(
                    "{stem},{epoch},{},{},{},{},{},{}\n",
                    snap.predicted_seen_ratio,
                    snap.acc_all,
                    snap.acc_seen,
                    snap.acc_novel,
                    snap.sparsity,
                    snap.similarity
                ));
                let bias = bias_report(&snap.predictions, &seen)?;
                write(
                    &common.out.join(format!("bias_{stem}.csv")),
                    bias.to_csv(&seen),
                )?;
            }
            let path = common.out.join("analysis.csv");
            write(&path, csv)?;
            println!("{} checkpoints -> {}", loaded.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

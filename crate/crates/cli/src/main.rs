use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stylebank::encoder::{Backbone, BackboneConfig};
use stylebank::pipeline::{
    ablate, run_pipeline, stage_evaluate, stage_generate, stage_index, stage_train, stage_warmup, AblationAxis, EvalTask,
    RunConfig, RunPaths, Stage, StageError,
};
use stylebank::promptbank::{BankConfig, InsertionMode, PromptBank};
use stylebank::prototype::{PrototypeConfig, PrototypeEncoder};
use stylebank::retrieval::{measure_latency, Embedder, RetrievalIndex};
use stylebank::synthdata::{Dataset, DatasetConfig, Split, StyleTag};
use stylebank::training::{grad_check, prototype_table, sample_batch, TrainConfig};
use stylebank::Error;

#[derive(Parser)]
#[command(name = "stylebank", version, about = "Style-keyed prompt bank retrieval on a synthetic corpus")]
struct Cli {
    /// Run config (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every stage's artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Inputs {
    /// Dataset directory (default: OUT/data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Backbone file (default: OUT/backbone.bin).
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Prompt bank file (default: OUT/bank.bin).
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Index file (default: OUT/index.bin).
    #[arg(long)]
    index: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus.
    GenerateData {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        instances: Option<usize>,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Warm up the backbone on natural image/caption pairs, then freeze it.
    Warmup {
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Tune the prompt bank against the frozen backbone.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Embed the target styles into the prompted and baseline indexes.
    BuildIndex {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Rank one sample against the index.
    Query {
        #[arg(long)]
        style: StyleTag,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        class: u32,
        #[arg(long, default_value_t = 0)]
        instance: u32,
        /// Restrict hits to one indexed style.
        #[arg(long, default_value = "natural")]
        target: StyleTag,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Score evaluation tasks and write results.json.
    Evaluate {
        /// Tasks such as sketch2image or text+sketch2image (default: config).
        #[arg(long, value_delimiter = ',')]
        task: Vec<EvalTask>,
        /// Cutoffs to print; results.json always carries R@1 and R@5.
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        k: Vec<usize>,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Run every stage in order.
    Run,
    /// Sweep one bank setting, one full run per value.
    Ablate {
        /// insertion_mode, n or N.
        #[arg(long)]
        axis: AblationAxis,
    },
    /// Time the embed and rank stages over the test queries of one style.
    BenchLatency {
        #[arg(long, default_value = "sketch")]
        style: StyleTag,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Compare analytic bank gradients with central differences on a small
    /// float64 model.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn fail(stage: Stage, source: Error) -> StageError {
    StageError { stage, source }
}

fn load_config(cli: &Cli) -> Result<RunConfig, StageError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| fail(Stage::Config, e))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn paths(cfg: &RunConfig, inputs: &Inputs) -> RunPaths {
    let mut p = RunPaths::new(cfg.out.clone().unwrap_or_else(|| PathBuf::from("run")));
    if let Some(d) = &inputs.data {
        p.data = d.clone();
    }
    if let Some(b) = &inputs.backbone {
        p.backbone = b.clone();
    }
    if let Some(b) = &inputs.bank {
        p.bank = b.clone();
    }
    if let Some(i) = &inputs.index {
        p.index = i.clone();
    }
    p
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), StageError> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenerateData {
            classes,
            instances,
            inputs,
        } => {
            if let Some(c) = classes {
                cfg.dataset.num_classes = *c;
            }
            if let Some(i) = instances {
                cfg.dataset.instances_per_class = *i;
            }
            cfg.dataset.validate().map_err(|e| fail(Stage::Config, e))?;
            let p = paths(&cfg, inputs);
            let ds = stage_generate(&cfg, &p)?;
            eprintln!("wrote {} samples to {}", ds.samples().len(), p.data.display());
        }
        Command::Warmup { epochs, inputs } => {
            if let Some(e) = epochs {
                cfg.warmup.epochs = *e;
            }
            cfg.validate().map_err(|e| fail(Stage::Config, e))?;
            let p = paths(&cfg, inputs);
            let (bb, report) = stage_warmup(&cfg, &p)?;
            if let Some(r) = report {
                eprintln!("warmup loss {:?} -> {:?}", r.epoch_loss.first(), r.epoch_loss.last());
            }
            eprintln!("backbone {} hash {}", p.backbone.display(), stylebank::binfile::hex_hash(&bb.content_hash()));
        }
        Command::Train { epochs, lr, inputs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(l) = lr {
                cfg.train.lr = *l;
            }
            cfg.validate().map_err(|e| fail(Stage::Config, e))?;
            let p = paths(&cfg, inputs);
            let (_, report) = stage_train(&cfg, &p)?;
            eprintln!(
                "{} steps, joint loss {:?} -> {:?}, backbone unchanged: {}",
                report.steps,
                report.epoch_joint.first(),
                report.epoch_joint.last(),
                report.backbone_unchanged()
            );
        }
        Command::BuildIndex { inputs } => {
            cfg.validate().map_err(|e| fail(Stage::Config, e))?;
            let p = paths(&cfg, inputs);
            let (index, _) = stage_index(&cfg, &p)?;
            eprintln!("indexed {} records into {}", index.len(), p.index.display());
        }
        Command::Query {
            style,
            k,
            class,
            instance,
            target,
            inputs,
        } => query(&cfg, &paths(&cfg, inputs), *style, *k, *class, *instance, *target)?,
        Command::Evaluate { task, k, inputs } => {
            if !task.is_empty() {
                cfg.eval.tasks = task.clone();
            }
            if let Some(bad) = k.iter().find(|&&k| k != 1 && k != 5) {
                return Err(fail(Stage::Config, Error::InvalidConfig(format!("--k {bad}: only 1 and 5 are reported"))));
            }
            cfg.validate().map_err(|e| fail(Stage::Config, e))?;
            let (results, _) = stage_evaluate(&cfg, &paths(&cfg, inputs))?;
            for (name, t) in &results.tasks {
                let mut line = format!("{name:<20}");
                for &kk in k {
                    let (v, b) = if kk == 1 {
                        (t.r_at_1, t.baseline.r_at_1)
                    } else {
                        (t.r_at_5, t.baseline.r_at_5)
                    };
                    line += &format!("  R@{kk} {v:.3} (baseline {b:.3})");
                }
                println!("{line}  n={}", t.num_queries);
            }
        }
        Command::Run => {
            let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("run"));
            let outcome = run_pipeline(&cfg, &out)?;
            print_json(&outcome.results.tasks);
            eprintln!("total {:.1} s, results in {}", outcome.timings.total_seconds, outcome.paths.results().display());
        }
        Command::Ablate { axis } => {
            let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("run"));
            let table = ablate(&cfg, *axis, &out.join(format!("ablate_{}", axis_name(*axis))))?;
            print!("{}", table.render());
        }
        Command::BenchLatency {
            style,
            repetitions,
            k,
            inputs,
        } => bench(&cfg, &paths(&cfg, inputs), *style, *repetitions, *k)?,
        Command::GradCheck { h, tolerance } => grad(&cfg, *h, *tolerance)?,
    }
    Ok(())
}

fn axis_name(axis: AblationAxis) -> &'static str {
    match axis {
        AblationAxis::InsertionMode => "insertion_mode",
        AblationAxis::N => "n",
        AblationAxis::NumEntries => "num_entries",
    }
}

struct Loaded {
    ds: Dataset,
    bb: Backbone,
    bank: PromptBank,
    enc: PrototypeEncoder,
    index: RetrievalIndex,
}

fn load_all(cfg: &RunConfig, p: &RunPaths, stage: Stage) -> Result<Loaded, StageError> {
    let c = cfg.resolved();
    let f = |e| fail(stage, e);
    Ok(Loaded {
        ds: Dataset::load(&p.data).map_err(f)?,
        bb: Backbone::load(&p.backbone).map_err(f)?,
        bank: PromptBank::load(&p.bank).map_err(f)?,
        enc: PrototypeEncoder::new(c.prototype_config()).map_err(f)?,
        index: RetrievalIndex::load(&p.index).map_err(f)?,
    })
}

fn query(
    cfg: &RunConfig,
    p: &RunPaths,
    style: StyleTag,
    k: usize,
    class: u32,
    instance: u32,
    target: StyleTag,
) -> Result<(), StageError> {
    let st = Stage::Evaluate;
    let l = load_all(cfg, p, st)?;
    let m = &l.ds.manifest;
    if class as usize >= m.num_classes || instance as usize >= m.instances_per_class {
        return Err(fail(st, Error::OutOfRange(format!("sample ({class}, {instance})"))));
    }
    let embedder = Embedder {
        backbone: &l.bb,
        bank: Some(&l.bank),
        prototypes: &l.enc,
    };
    let sample = l.ds.get(style, class, instance);
    let qid = l.ds.sample_id(style, class, instance);
    let result = l.index.query(sample, qid, &embedder, k, Some(target)).map_err(|e| fail(st, e))?;
    let hits: Vec<serde_json::Value> = result
        .hits
        .iter()
        .map(|&(id, score)| {
            let r = l.index.record(id).expect("ranked id is indexed");
            serde_json::json!({
                "id": id,
                "score": score,
                "class_id": r.class_id,
                "instance_id": r.instance_id,
                "style": r.style,
            })
        })
        .collect();
    print_json(&serde_json::json!({ "query_id": qid, "style": style, "hits": hits }));
    Ok(())
}

fn bench(cfg: &RunConfig, p: &RunPaths, style: StyleTag, repetitions: usize, k: usize) -> Result<(), StageError> {
    let st = Stage::Latency;
    let l = load_all(cfg, p, st)?;
    let embedder = Embedder {
        backbone: &l.bb,
        bank: Some(&l.bank),
        prototypes: &l.enc,
    };
    let queries: Vec<_> = l.ds.split_samples(style, Split::Test).collect();
    let report = measure_latency(&l.index, &embedder, &queries, repetitions, k).map_err(|e| fail(st, e))?;
    print_json(&report);
    Ok(())
}

/// Gradient oracle on a small float64 model: two layers, width 8, two
/// heads, a six-entry bank selecting two.
fn grad(cfg: &RunConfig, h: f64, tolerance: f64) -> Result<(), StageError> {
    let st = Stage::GradCheck;
    let f = |e| fail(st, e);
    let seed = cfg.seed;
    let ds = Dataset::generate(&DatasetConfig {
        num_classes: 4,
        instances_per_class: 4,
        seed,
        ..Default::default()
    })
    .map_err(f)?;
    let bb = Backbone::new(BackboneConfig {
        layers: 2,
        d: 8,
        heads: 2,
        seed,
        ..Default::default()
    })
    .map_err(f)?
    .freeze();
    let enc = PrototypeEncoder::new(PrototypeConfig {
        d: 8,
        patch_size: 8,
        image_size: 32,
        vocab_size: 64,
        seed,
    })
    .map_err(f)?;
    let bank = PromptBank::new(
        BankConfig {
            num_entries: 6,
            select_n: 2,
            layers: 2,
            d: 8,
            tokens_per_entry: 1,
            insertion_mode: InsertionMode::Deep,
            seed,
        },
        &[],
    )
    .map_err(f)?;
    let protos = prototype_table(&ds, &enc).map_err(f)?;
    let train = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let batch = sample_batch(&ds, &protos, &train.tasks, 4, seed).map_err(f)?;
    let report = grad_check(&batch, &bank, &bb, &train, h).map_err(f)?;
    print_json(&report);
    if !(report.max_rel_error < tolerance) {
        return Err(fail(
            st,
            Error::OutOfRange(format!("max relative error {:e} >= {tolerance:e}", report.max_rel_error)),
        ));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}

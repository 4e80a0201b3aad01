use std::fs;
use std::path::{Path, PathBuf};

use afa_core::checkpoint;
use afa_core::corpus::{self, load_embeddings, load_jsonl, read_jsonl_records, write_jsonl, PlantedSpec};
use afa_core::evaluation::{self, deletion_curve, evaluate, sweep_k, EVAL_BATCH};
use afa_core::viz::{self, Series};
use afa_core::{AfaError, Example, FitOptions, Mode, TargetModel, TrainConfig, Trainer, Vocab};
use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::{Common, ConfigFailure};

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Defaults to `<out-dir>/checkpoints/best.afa`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to `<out-dir>/vocab.txt`.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Dataset to evaluate; defaults to the config's test set.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Emit a deletion curve for N = 0..=N_MAX.
    #[arg(long, value_name = "N_MAX")]
    deletion: Option<usize>,
    /// Recompute attention after every single deletion.
    #[arg(long)]
    rerank: bool,
    /// Attention heat maps for the first E examples.
    #[arg(long, value_name = "E")]
    viz: Option<usize>,
    /// Planted-signal sidecar; adds attention-on-signal diagnostics.
    #[arg(long)]
    signals: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    k_values: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
}

#[derive(Args, Debug)]
pub struct PlantedArgs {
    #[arg(long, default_value_t = 2500)]
    num_examples: usize,
    #[arg(long, default_value_t = 12)]
    seq_len: usize,
    #[arg(long, default_value_t = 2)]
    num_classes: usize,
    #[arg(long, default_value_t = 1)]
    signal_per_class: usize,
    /// Total vocabulary size including reserved and signal tokens.
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    /// Hold out the last N examples as `test.jsonl`.
    #[arg(long, default_value_t = 0)]
    test_size: usize,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    examples: usize,
}

/// Signal tokens and per-example signal positions of a planted dataset.
#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    signal_tokens: Vec<Vec<String>>,
    positions: Vec<Vec<usize>>,
}

fn config_failure(msg: impl Into<String>) -> anyhow::Error {
    ConfigFailure(msg.into()).into()
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(config_failure(format!("config file {} not found", path.display())));
            }
            TrainConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    println!("# effective config");
    print!("{}", cfg.to_kv_string());
    Ok(cfg)
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| config_failure(format!("invalid configuration: {key}: not set")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn build_vocab(cfg: &TrainConfig) -> Result<Vocab> {
    let train = required(&cfg.train_path, "train")?;
    let records = read_jsonl_records(train)?;
    Ok(Vocab::build(records.iter().map(|(t, _)| t.as_str()), cfg.min_count)?)
}

fn load_split(cfg: &TrainConfig, vocab: &Vocab, path: &Path) -> Result<Vec<Example>> {
    load_jsonl(path, vocab, cfg.max_len, cfg.num_classes).with_context(|| format!("loading {}", path.display()))
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = &common.out_dir;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(out.join("config.txt"), cfg.to_kv_string())?;

    let vocab = build_vocab(&cfg)?;
    vocab.save(&out.join("vocab.txt"))?;
    let train = load_split(&cfg, &vocab, required(&cfg.train_path, "train")?)?;
    let valid = cfg
        .valid_path
        .as_deref()
        .map(|p| load_split(&cfg, &vocab, p))
        .transpose()?;
    let test = cfg
        .test_path
        .as_deref()
        .map(|p| load_split(&cfg, &vocab, p))
        .transpose()?;

    let mut trainer = Trainer::new(cfg.clone(), vocab.len())?;
    if let Some(path) = &cfg.embeddings_path {
        let rows = load_embeddings(path, &vocab, cfg.target.d_model)?;
        let set = trainer.target.apply_embeddings(&rows)?;
        println!("loaded {set} embedding rows from {}", path.display());
    }
    let history = trainer.fit(
        &train,
        FitOptions {
            valid: valid.as_deref(),
            checkpoint_dir: Some(&ckpt_dir),
            supervised_only: false,
        },
    )?;
    history.write_jsonl(&out.join("history.jsonl"))?;

    let (name, eval_set) = match (&test, &valid) {
        (Some(t), _) => ("test", t),
        (None, Some(v)) => ("valid", v),
        _ => ("train", &train),
    };
    let metrics = evaluate(&trainer.target, eval_set, cfg.batch_size)?;
    write_json(&out.join("metrics.json"), &metrics)?;

    println!(
        "{:>5}  {:>9}  {:>9}  {:>9}  {:>9}",
        "epoch", "loss_cls", "loss_adv", "loss_disc", "valid_acc"
    );
    for e in &history.epochs {
        let acc = e
            .valid_accuracy
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:>5}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9}",
            e.epoch, e.mean_loss_cls, e.mean_loss_adv, e.mean_loss_disc, acc
        );
    }
    if let Some(best) = history.best_epoch {
        println!("best epoch: {best}");
    }
    println!(
        "{name}: accuracy {:.4}  macro P {:.4}  macro R {:.4}  macro F1 {:.4}",
        metrics.accuracy, metrics.macro_p, metrics.macro_r, metrics.macro_f1
    );
    Ok(())
}

struct Loaded {
    cfg: TrainConfig,
    vocab: Vocab,
    target: TargetModel,
    data: Vec<Example>,
}

fn load_for_eval(
    common: &Common,
    checkpoint: &Option<PathBuf>,
    vocab: &Option<PathBuf>,
    data: &Option<PathBuf>,
) -> Result<Loaded> {
    let cfg = load_config(common)?;
    let ckpt = checkpoint
        .clone()
        .unwrap_or_else(|| common.out_dir.join("checkpoints").join("best.afa"));
    let vocab_path = vocab.clone().unwrap_or_else(|| common.out_dir.join("vocab.txt"));
    let vocab = Vocab::load(&vocab_path).with_context(|| format!("loading {}", vocab_path.display()))?;
    let target = checkpoint::load_target(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if target.dims.encoder.vocab != vocab.len() {
        return Err(AfaError::Checkpoint(format!(
            "checkpoint vocabulary has {} entries but {} has {}",
            target.dims.encoder.vocab,
            vocab_path.display(),
            vocab.len()
        ))
        .into());
    }
    let data_path = match data {
        Some(p) => p.clone(),
        None => required(&cfg.test_path, "test")?.to_path_buf(),
    };
    let mut cfg = cfg;
    cfg.num_classes = target.dims.num_classes;
    let data = load_split(&cfg, &vocab, &data_path)?;
    Ok(Loaded {
        cfg,
        vocab,
        target,
        data,
    })
}

fn render_examples(loaded: &Loaded, count: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let subset = &loaded.data[..count.min(loaded.data.len())];
    for (i, chunk) in subset.chunks(EVAL_BATCH).enumerate() {
        let batch = afa_core::Batch::from_examples(chunk)?;
        let out = loaded.target.forward(&batch, Mode::Infer)?;
        let preds = out.predictions();
        for (b, ex) in chunk.iter().enumerate() {
            let idx = i * EVAL_BATCH + b;
            let tokens = loaded.vocab.decode(&ex.token_ids);
            let a = out.attention_row(b);
            let (p, y) = (preds[b].to_string(), ex.label.to_string());
            viz::render_attention_html(&tokens, a, &p, &y, &dir.join(format!("example_{idx:04}.html")))?;
            fs::write(
                dir.join(format!("example_{idx:04}.txt")),
                viz::attention_text(&tokens, a, &p, &y)?,
            )?;
        }
    }
    println!("wrote {} heat maps to {}", subset.len(), dir.display());
    Ok(())
}

pub fn eval(common: &Common, args: &EvalArgs) -> Result<()> {
    let mut loaded = load_for_eval(common, &args.checkpoint, &args.vocab, &args.data)?;
    let dir = common.out_dir.join("eval");
    fs::create_dir_all(&dir)?;
    let bs = loaded.cfg.batch_size;

    let metrics = evaluate(&loaded.target, &loaded.data, bs)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    println!(
        "accuracy {:.4}  macro P {:.4}  macro R {:.4}  macro F1 {:.4}",
        metrics.accuracy, metrics.macro_p, metrics.macro_r, metrics.macro_f1
    );

    if let Some(path) = &args.signals {
        let sidecar: Sidecar =
            serde_json::from_str(&fs::read_to_string(path)?).with_context(|| format!("parsing {}", path.display()))?;
        if sidecar.positions.len() != loaded.data.len() {
            return Err(AfaError::Input(format!(
                "{} lists {} examples but the dataset has {}",
                path.display(),
                sidecar.positions.len(),
                loaded.data.len()
            ))
            .into());
        }
        for (ex, pos) in loaded.data.iter_mut().zip(sidecar.positions) {
            ex.signal_positions = Some(pos);
        }
        let mass = evaluation::signal_attention_mass(&loaded.target, &loaded.data, bs)?;
        let top1 = evaluation::signal_top1_rate(&loaded.target, &loaded.data, bs)?;
        write_json(
            &dir.join("signal.json"),
            &serde_json::json!({ "signal_attention_mass": mass, "signal_top1_rate": top1 }),
        )?;
        println!("signal attention mass {mass:.4}  top-1 on signal {top1:.4}");
    }

    if let Some(n_max) = args.deletion {
        let curve = deletion_curve(&loaded.target, &loaded.data, n_max, args.rerank, bs)?;
        write_json(&dir.join("deletion.json"), &curve)?;
        let series = Series::new("deletion", curve.points.iter().map(|&(n, a)| (n as f64, a)).collect());
        viz::render_curve_svg(&[series], "tokens removed", "accuracy", &dir.join("deletion.svg"))?;
        for (n, acc) in &curve.points {
            println!("deleted {n}: accuracy {acc:.4}");
        }
        if curve.skipped > 0 {
            println!("skipped {} examples shorter than {}", curve.skipped, n_max + 1);
        }
    }

    if let Some(count) = args.viz {
        render_examples(&loaded, count, &dir.join("viz"))?;
    }
    Ok(())
}

pub fn viz(common: &Common, args: &VizArgs) -> Result<()> {
    let loaded = load_for_eval(common, &args.checkpoint, &args.vocab, &args.data)?;
    render_examples(&loaded, args.examples, &common.out_dir.join("viz"))
}

pub fn sweep(common: &Common, args: &SweepArgs) -> Result<()> {
    let cfg = load_config(common)?;
    if args.trials < 2 {
        return Err(config_failure("invalid configuration: trials: must be at least 2"));
    }
    if args.k_values.contains(&0) {
        return Err(config_failure(
            "invalid configuration: k-values: every k must be at least 1",
        ));
    }
    fs::create_dir_all(&common.out_dir)?;
    let vocab = build_vocab(&cfg)?;
    let train = load_split(&cfg, &vocab, required(&cfg.train_path, "train")?)?;
    let test = load_split(&cfg, &vocab, required(&cfg.test_path, "test")?)?;
    let result = sweep_k(
        &cfg,
        vocab.len(),
        &train,
        &test,
        &args.k_values,
        args.trials,
        common.jobs,
    )?;
    write_json(&common.out_dir.join("sweep.json"), &result)?;
    let series = Series::new(
        "accuracy",
        result.records.iter().map(|r| (r.k as f64, r.mean_accuracy)).collect(),
    )
    .with_ci(result.records.iter().map(|r| r.ci_half_width).collect());
    let svg = common.out_dir.join("sweep.svg");
    if let Err(e) = viz::render_curve_svg(&[series], "k", "accuracy", &svg) {
        // unsorted k values cannot form a curve; the JSON is still complete
        eprintln!("skipping {}: {e}", svg.display());
    }
    println!("{:>4}  {:>8}  {:>8}  {:>6}", "k", "mean", "ci95", "trials");
    for r in &result.records {
        println!(
            "{:>4}  {:>8.4}  {:>8.4}  {:>6}",
            r.k, r.mean_accuracy, r.ci_half_width, r.trials
        );
    }
    Ok(())
}

pub fn gen_planted(common: &Common, args: &PlantedArgs) -> Result<()> {
    let distractors = PlantedSpec::distractors_for_total(args.vocab_size, args.num_classes, args.signal_per_class)?;
    let spec = PlantedSpec {
        num_examples: args.num_examples,
        seq_len: args.seq_len,
        num_classes: args.num_classes,
        signal_per_class: args.signal_per_class,
        distractor_vocab_size: distractors,
        seed: common.seed.unwrap_or(0),
    };
    if args.test_size > args.num_examples {
        return Err(config_failure(format!(
            "invalid configuration: test-size: {} exceeds {} examples",
            args.test_size, args.num_examples
        )));
    }
    let data = corpus::gen_planted(&spec)?;
    fs::create_dir_all(&common.out_dir)?;
    let signal_tokens: Vec<Vec<String>> = data.signal_tokens.iter().map(|ids| data.vocab.decode(ids)).collect();
    let write = |name: &str, examples: &[Example]| -> Result<()> {
        let path = common.out_dir.join(format!("{name}.jsonl"));
        write_jsonl(&path, examples, &data.vocab)?;
        let sidecar = Sidecar {
            signal_tokens: signal_tokens.clone(),
            positions: examples
                .iter()
                .map(|e| e.signal_positions.clone().unwrap_or_default())
                .collect(),
        };
        write_json(&common.out_dir.join(format!("{name}.signals.json")), &sidecar)?;
        println!("wrote {} examples to {}", examples.len(), path.display());
        Ok(())
    };
    if args.test_size == 0 {
        write("planted", &data.examples)?;
    } else {
        let (train, test) = data.examples.split_at(args.num_examples - args.test_size);
        write("train", train)?;
        write("test", test)?;
    }
    write_json(&common.out_dir.join("planted_spec.json"), &spec)?;
    Ok(())
}

use std::path::{Path, PathBuf};

use embedforge::datasets::{export_rows, metadata_path, LabeledDataset, SyntheticSpec};
use embedforge::error::{Error, Result};
use embedforge::experiment::{
    curve_csv, embed_dataset, evaluate_rank, evaluate_stream, stream_records, sweep_csv, trace_csv,
    DatasetSpec, ExperimentConfig, ThresholdChoice,
};
use embedforge::gradcheck::{check_embedding_gradient, gradcheck as network_gradcheck, GradCheckConfig, GradCheckReport};
use embedforge::losses::{all_triplets, EmbeddingBatch, LossKind};
use embedforge::nn::{Checkpoint, InputBatch, MlpParams};
use embedforge::sampler::draw_rng;
use embedforge::trainer::{evaluate_loss, train_with, TrainConfig};
use ndarray::Array2;
use rand::Rng;
use serde_json::json;

use crate::manifest::{sha256_hex, OutDir};
use crate::{
    ConfigArgs, DatasetKind, EvalInput, ExportArgs, GradcheckArgs, Outcome, Preset, RankArgs, SplitKind,
    StreamArgs, SweepArgs, TrainArgs,
};

/// Config file (or preset) with command-line overrides applied.
fn resolve(args: &ConfigArgs, preset: Preset) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if preset == Preset::FullScale {
        cfg.train = TrainConfig::full_scale();
    }

    let kind = args.dataset.or(if args.features.is_some() {
        Some(DatasetKind::Csv)
    } else if args.images.is_some() || args.labels.is_some() {
        Some(DatasetKind::Idx)
    } else {
        None
    });
    match kind {
        None => {}
        Some(DatasetKind::Synthetic) => {
            if !matches!(cfg.dataset, DatasetSpec::Synthetic(_)) {
                cfg.dataset = DatasetSpec::Synthetic(SyntheticSpec::default());
            }
        }
        Some(DatasetKind::Idx) => {
            let (images, labels) = match (&args.images, &args.labels, &cfg.dataset) {
                (Some(i), Some(l), _) => (i.clone(), l.clone()),
                (None, None, DatasetSpec::Idx { images, labels, .. }) => (images.clone(), labels.clone()),
                _ => return Err(Error::Config("--dataset idx needs both --images and --labels".into())),
            };
            cfg.dataset = DatasetSpec::Idx {
                images,
                labels,
                max_per_identity: None,
            };
        }
        Some(DatasetKind::Csv) => {
            let path = match (&args.features, &cfg.dataset) {
                (Some(p), _) => p.clone(),
                (None, DatasetSpec::Csv { path }) => path.clone(),
                _ => return Err(Error::Config("--dataset csv needs --features".into())),
            };
            cfg.dataset = DatasetSpec::Csv { path };
        }
    }
    if let Some(limit) = args.max_per_identity {
        match &mut cfg.dataset {
            DatasetSpec::Idx { max_per_identity, .. } => *max_per_identity = Some(limit),
            _ => return Err(Error::Config("--max-per-identity applies to IDX datasets only".into())),
        }
    }

    let train = &mut cfg.train;
    if let Some(kind) = args.loss {
        *train = train.clone().with_loss(kind);
    }
    if let Some(v) = args.alpha {
        train.loss_config.alpha = v;
    }
    if let Some(v) = args.beta {
        train.loss_config.beta = v;
    }
    if let Some(v) = args.gamma {
        train.loss_config.gamma = v;
    }
    if let Some(iters) = args.iters {
        *train = train.clone().with_iterations(iters);
    }
    if let Some(lr) = args.lr {
        train.adam.learning_rate = lr;
    }
    if let Some(p) = args.p {
        train.sampler.p = p;
    }
    if let Some(k) = args.k {
        train.sampler.k = k;
    }
    Ok(cfg)
}

fn input_files(args: &ConfigArgs, cfg: &ExperimentConfig) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = args.config.iter().cloned().collect();
    match &cfg.dataset {
        DatasetSpec::Synthetic(_) => {}
        DatasetSpec::Idx { images, labels, .. } => files.extend([images.clone(), labels.clone()]),
        DatasetSpec::Csv { path } => files.push(path.clone()),
    }
    files
}

fn dataset_digest(ds: &LabeledDataset) -> String {
    let mut bytes = Vec::with_capacity(8 * (ds.items.len() + ds.labels.len()));
    for v in ds.items.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        bytes.extend_from_slice(&(l as u64).to_le_bytes());
    }
    sha256_hex(&bytes)
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configuration types serialise")
}

fn pretty<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    Ok(text.into_bytes())
}

pub fn print_config(args: &ConfigArgs, preset: Preset) -> Result<Outcome> {
    let cfg = resolve(args, preset)?;
    print!("{}", String::from_utf8(pretty(&cfg)?).expect("json is utf-8"));
    Ok(Outcome::Ok)
}

pub fn train(args: &TrainArgs) -> Result<Outcome> {
    let mut cfg = resolve(&args.config, Preset::Default)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let (train_set, _) = cfg.splits()?;

    let mut out = OutDir::create(&args.out)?;
    for f in input_files(&args.config, &cfg) {
        out.add_input(&f);
    }
    if let Some(r) = &args.resume {
        out.add_input(r);
    }
    out.write("config.json", &pretty(&cfg)?)?;
    train_set.write_metadata(&out.path("train_set.meta.json"))?;

    let mut last_saved: Option<PathBuf> = None;
    let result = train_with(&cfg.train, &train_set, resume, |ckpt| {
        let numbered = out.path(&format!("checkpoint-{:06}.json", ckpt.step_count()));
        ckpt.save(&numbered)?;
        ckpt.save(&out.path("checkpoint.json"))?;
        last_saved = Some(numbered);
        Ok(())
    });

    let config_json = to_value(&cfg);
    let digest = Some(dataset_digest(&train_set));
    match result {
        Ok(outcome) => {
            outcome.log.write_csv(&out.path("train_log.csv"))?;
            let smoothed = outcome.log.smoothed(50);
            if let (Some(first), Some(last)) = (smoothed.first(), smoothed.last()) {
                println!(
                    "trained {} iterations: smoothed loss {first:.6} -> {last:.6}",
                    outcome.log.records.len()
                );
            }
            println!("checkpoint: {}", args.out.join("checkpoint.json").display());
            out.finish("train", "ok", cfg.train.seed, config_json, digest)?;
            Ok(Outcome::Ok)
        }
        Err(e) => {
            if let Some(p) = &last_saved {
                eprintln!("last good checkpoint: {}", p.display());
            }
            out.finish("train", &format!("error: {e}"), cfg.train.seed, config_json, digest)?;
            Err(e)
        }
    }
}

struct EvalContext {
    cfg: ExperimentConfig,
    dataset: LabeledDataset,
    embeddings: EmbeddingBatch,
    out: OutDir,
}

fn prepare_eval(input: &EvalInput) -> Result<EvalContext> {
    let cfg = resolve(&input.config, Preset::Default)?;
    let checkpoint = Checkpoint::load(&input.checkpoint)?;
    let dataset = match input.split {
        SplitKind::All => embedforge::experiment::load_dataset(&cfg.dataset)?,
        SplitKind::Heldout => cfg.splits()?.1,
        SplitKind::Train => cfg.splits()?.0,
    };
    let embeddings = embed_dataset(&checkpoint.params, &dataset)?;
    let mut out = OutDir::create(&input.out)?;
    for f in input_files(&input.config, &cfg) {
        out.add_input(&f);
    }
    out.add_input(&input.checkpoint);
    Ok(EvalContext {
        cfg,
        dataset,
        embeddings,
        out,
    })
}

fn split_name(s: SplitKind) -> &'static str {
    match s {
        SplitKind::Heldout => "heldout",
        SplitKind::Train => "train",
        SplitKind::All => "all",
    }
}

fn run_stream_command(
    command: &str,
    input: &EvalInput,
    choice: ThresholdChoice,
    seed: Option<u64>,
) -> Result<Outcome> {
    let EvalContext {
        mut cfg,
        dataset,
        embeddings,
        mut out,
    } = prepare_eval(input)?;
    if let Some(s) = seed {
        cfg.eval.stream_seed = s;
    }
    let ev = &cfg.eval;
    let stream = stream_records(&embeddings, ev.group_min, ev.group_max, ev.stream_seed)?;
    let result = evaluate_stream(&stream, &choice, ev)?;

    out.write("curve.csv", curve_csv(&result.run).as_bytes())?;
    out.write("trace.csv", trace_csv(&result.run).as_bytes())?;
    if let Some(sweep) = &result.sweep {
        out.write("sweep.csv", sweep_csv(sweep).as_bytes())?;
    }
    let last = result.run.final_report();
    let report = json!({
        "split": split_name(input.split),
        "records": stream.len(),
        "identities": dataset.num_identities(),
        "stream_seed": ev.stream_seed,
        "threshold": result.threshold,
        "clusters": result.run.state.len(),
        "final": last,
        "swept_thresholds": result.sweep.as_ref().map(|s| s.rows.len()),
    });
    out.write("stream_report.json", &pretty(&report)?)?;
    println!(
        "th={} clusters={} C_q={:.4} rand_index={:.4} ({} records)",
        result.threshold,
        result.run.state.len(),
        last.cluster_quality,
        last.rand_index,
        stream.len()
    );
    let seed = ev.stream_seed;
    out.finish(command, "ok", seed, to_value(&cfg), Some(dataset_digest(&dataset)))?;
    Ok(Outcome::Ok)
}

pub fn eval_stream(args: &StreamArgs) -> Result<Outcome> {
    let choice = match (args.th, args.sweep) {
        (Some(th), false) => ThresholdChoice::Fixed(th),
        (None, true) => ThresholdChoice::Sweep(args.grid.clone()),
        _ => return Err(Error::Config("give either --th or --sweep".into())),
    };
    run_stream_command("eval-stream", &args.input, choice, args.seed)
}

pub fn sweep(args: &SweepArgs) -> Result<Outcome> {
    run_stream_command("sweep", &args.input, ThresholdChoice::Sweep(args.grid.clone()), args.seed)
}

pub fn eval_rank(args: &RankArgs) -> Result<Outcome> {
    let EvalContext {
        mut cfg,
        dataset,
        embeddings,
        mut out,
    } = prepare_eval(&args.input)?;
    if let Some(s) = args.seed {
        cfg.eval.query_seed = s;
    }
    if let Some(r) = args.max_rank {
        cfg.eval.max_rank = r;
    }
    let report = evaluate_rank(&embeddings, cfg.eval.max_rank, cfg.eval.query_seed)?;
    let doc = json!({
        "split": split_name(args.input.split),
        "items": dataset.len(),
        "identities": dataset.num_identities(),
        "query_seed": cfg.eval.query_seed,
        "rank1": report.rank(1),
        "map": report.map,
        "report": report,
    });
    out.write("rank_report.json", &pretty(&doc)?)?;
    println!(
        "rank-1={:.4} mAP={:.4} ({} queries)",
        report.rank(1).unwrap_or(f64::NAN),
        report.map,
        report.queries_evaluated
    );
    let seed = cfg.eval.query_seed;
    out.finish("eval-rank", "ok", seed, to_value(&cfg), Some(dataset_digest(&dataset)))?;
    Ok(Outcome::Ok)
}

fn uniform_rows(rng: &mut impl Rng, n: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, dim), || rng.random_range(-1.0..1.0))
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<Outcome> {
    if args.p < 2 || args.k < 1 || args.dim < 1 || args.batches < 1 {
        return Err(Error::Config("gradcheck needs P ≥ 2, K ≥ 1, dim ≥ 1 and batches ≥ 1".into()));
    }
    let mut loss_cfg = args.loss.default_config();
    if let Some(v) = args.alpha {
        loss_cfg.alpha = v;
    }
    if let Some(v) = args.beta {
        loss_cfg.beta = v;
    }
    if let Some(v) = args.gamma {
        loss_cfg.gamma = v;
    }
    loss_cfg.validate()?;

    let labels: Vec<usize> = (0..args.p * args.k).map(|i| i / args.k).collect();
    let triplets = if args.loss == LossKind::Triplet {
        all_triplets(&labels)
    } else {
        Vec::new()
    };
    let loss_fn = |b: &EmbeddingBatch| evaluate_loss(args.loss, b, &loss_cfg, &triplets);
    let fd = GradCheckConfig::default();

    let mut total: Option<GradCheckReport> = None;
    for b in 0..args.batches {
        let mut rng = draw_rng(args.seed, b as u64);
        let n = labels.len();
        let mut rows = uniform_rows(&mut rng, n, args.dim);
        if args.collapse_means {
            let first = rows.row(0).to_owned();
            rows.rows_mut().into_iter().for_each(|mut r| r.assign(&first));
        }
        let report = if args.network {
            let params = MlpParams::init(&[args.dim, 8, args.dim], &mut rng)?;
            let inputs = InputBatch::new(rows, labels.clone())?;
            network_gradcheck(loss_fn, &params, &inputs, &fd)?
        } else {
            check_embedding_gradient(loss_fn, &EmbeddingBatch::new(rows, labels.clone())?, &fd)?
        };
        println!(
            "batch {b}: max_rel_error={:.3e} checked={} skipped={} worst={:?}",
            report.max_rel_error, report.checked, report.skipped, report.worst_pair
        );
        total = Some(match total {
            None => report,
            Some(t) => t.merge(report),
        });
    }
    let total = total.expect("at least one batch");
    println!(
        "{} {}: max_rel_error={:.3e} checked={} skipped={}",
        if total.pass { "PASS" } else { "FAIL" },
        args.loss,
        total.max_rel_error,
        total.checked,
        total.skipped
    );

    if let Some(dir) = &args.out {
        let settings = json!({
            "loss": args.loss,
            "p": args.p,
            "k": args.k,
            "dim": args.dim,
            "seed": args.seed,
            "batches": args.batches,
            "network": args.network,
            "collapse_means": args.collapse_means,
            "loss_config": loss_cfg,
            "step": fd.step,
            "tolerance": fd.tolerance,
        });
        let mut out = OutDir::create(dir)?;
        out.write(
            "gradcheck.json",
            &pretty(&json!({ "settings": settings, "report": total }))?,
        )?;
        out.finish("gradcheck", "ok", args.seed, settings, None)?;
    }
    Ok(if total.pass {
        Outcome::Ok
    } else {
        Outcome::CheckFailed
    })
}

pub fn export(args: &ExportArgs) -> Result<Outcome> {
    let input = EvalInput {
        config: args.config.clone(),
        checkpoint: args.checkpoint.clone(),
        out: args.out.clone(),
        split: args.split,
    };
    let EvalContext {
        cfg,
        dataset,
        embeddings,
        mut out,
    } = prepare_eval(&input)?;
    let original: Vec<u64> = dataset
        .labels
        .iter()
        .map(|&l| dataset.metadata.original_labels[l])
        .collect();
    let csv_path = out.path("embeddings.csv");
    export_rows(embeddings.vectors(), &original, &csv_path)?;
    dataset.write_metadata(&out.path(&file_name(&metadata_path(&csv_path))))?;
    println!(
        "wrote {} embeddings of dimension {} to {}",
        embeddings.len(),
        embeddings.dim(),
        csv_path.display()
    );
    let seed = cfg.train.seed;
    out.finish("export", "ok", seed, to_value(&cfg), Some(dataset_digest(&dataset)))?;
    Ok(Outcome::Ok)
}

fn file_name(p: &Path) -> String {
    p.file_name().expect("file path").to_string_lossy().into_owned()
}

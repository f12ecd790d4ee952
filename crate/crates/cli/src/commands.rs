use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::Command;

use kgalign::diffmath::gradcheck::{run_op_suite, KINK_TOLERANCE};
use kgalign::diffmath::{Fault, Real};
use kgalign::encoder::embed;
use kgalign::eval::{metrics, rank_all};
use kgalign::kg::{generate_synthetic, load_openea, DatasetBundle, KnowledgeGraph};
use kgalign::rng::{stream_rng, Stream};
use kgalign::train::{composite_loss_check, original_graph, Checkpoint, UnionLayout};
use kgalign::{Error, Result};
use log::info;

use crate::config::{ablation_pair, RunConfig, SEARCHED_PR, SEED_ENV};
use crate::output::{csv_err, write_predictions, History, MetricsRecord};
use crate::{EvalArgs, RunArgs, Split, SweepArgs};

fn degree_summary(kg: &KnowledgeGraph) -> String {
    let mut d = kg.degrees().to_vec();
    if d.is_empty() {
        return "no entities".into();
    }
    d.sort_unstable();
    let isolated = d.iter().filter(|&&x| x == 0).count();
    let low = d.iter().filter(|&&x| x < 2).count();
    format!(
        "degree min {} / median {} / max {}; {} isolated, {} below 2",
        d[0],
        d[d.len() / 2],
        d[d.len() - 1],
        isolated,
        low
    )
}

pub fn validate(data: &Path, fold: u8) -> Result<()> {
    let b = load_openea(data, fold)?;
    for (name, kg, drops) in [
        ("source", &b.source, b.source_drops),
        ("target", &b.target, b.target_drops),
    ] {
        println!(
            "{name}: {} entities, {} relations, {} triples (dropped {} self-loops, {} duplicates)",
            kg.entity_count(),
            kg.relation_count(),
            kg.triples().len(),
            drops.self_loops,
            drops.duplicates
        );
        println!("{name}: {}", degree_summary(kg));
    }
    println!(
        "links: {} total; fold {fold}: {} train, {} valid, {} test",
        b.links.len(),
        b.seeds.train.len(),
        b.seeds.valid.len(),
        b.seeds.test.len()
    );
    Ok(())
}

fn flag_pairs(args: &RunArgs) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for item in &args.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{item}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    push("data", args.data.as_ref().map(|p| p.display().to_string()));
    push("synthetic", args.synthetic.clone());
    push("fold", args.fold.map(|v| v.to_string()));
    push("out", args.out.as_ref().map(|p| p.display().to_string()));
    push("seed", args.seed.map(|v| v.to_string()));
    push("pr", args.pr.map(|v| v.to_string()));
    push("lambda", args.lambda.map(|v| v.to_string()));
    push("max_epochs", args.max_epochs.map(|v| v.to_string()));
    push("precision", args.precision.clone());
    if args.allow_any_pr {
        pairs.push(("allow_any_pr".into(), "true".into()));
    }
    for a in &args.ablation {
        pairs.push(ablation_pair(a).map_err(Error::Config)?);
    }
    // a data source given on the command line replaces the other kind
    if args.data.is_some() && args.synthetic.is_none() {
        pairs.push(("synthetic".into(), String::new()));
    }
    if args.synthetic.is_some() && args.data.is_none() {
        pairs.push(("data".into(), String::new()));
    }
    Ok(pairs)
}

/// Defaults, then the config file, then the environment, then flags.
fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env()?;
    cfg.apply_pairs(&flag_pairs(args)?)?;
    Ok(cfg)
}

fn load_bundle(cfg: &RunConfig) -> Result<DatasetBundle> {
    match (&cfg.synthetic, &cfg.data) {
        (Some(s), _) => generate_synthetic(&s.spec, &mut stream_rng(s.seed.unwrap_or(cfg.train.seed), Stream::Data)),
        (None, Some(dir)) => load_openea(dir, cfg.fold),
        (None, None) => Err(Error::Config("no data source: set `data` or `synthetic`".into())),
    }
}

pub fn train(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    match run_train(&cfg)? {
        Some(m) => println!(
            "test: Hits@1 {:.4}  Hits@5 {:.4}  MRR {:.4}  ({} pairs)",
            m.hits1, m.hits5, m.mrr, m.n_test
        ),
        None => println!("no test links; metrics not written"),
    }
    println!("outputs in {}", cfg.out.display());
    Ok(())
}

/// Trains one configuration into `cfg.out`, returning test metrics when
/// the dataset has test links.
pub fn run_train(cfg: &RunConfig) -> Result<Option<MetricsRecord>> {
    cfg.validate()?;
    match cfg.precision {
        crate::config::Precision::F32 => run_train_typed::<f32>(cfg),
        crate::config::Precision::F64 => run_train_typed::<f64>(cfg),
    }
}

fn run_train_typed<T: Real>(cfg: &RunConfig) -> Result<Option<MetricsRecord>> {
    std::fs::create_dir_all(&cfg.out)?;
    let resolved = cfg.resolved_text();
    std::fs::write(cfg.out.join("config.resolved"), &resolved)?;
    let bundle = load_bundle(cfg)?;
    info!(
        "{} + {} entities, {} train / {} valid / {} test links",
        bundle.source.entity_count(),
        bundle.target.entity_count(),
        bundle.seeds.train.len(),
        bundle.seeds.valid.len(),
        bundle.seeds.test.len()
    );

    let mut history = History::create(&cfg.out.join("history.jsonl"), cfg)?;
    let mut log_err = None;
    let outcome = kgalign::train::train::<T>(&bundle, &cfg.train, |r| {
        info!("epoch {} loss {:.6} val_mrr {:?}", r.epoch, r.loss.total, r.val_mrr);
        if let Err(e) = history.epoch(r) {
            log_err.get_or_insert(e);
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            history.abort(&e)?;
            return Err(e);
        }
    };
    if let Some(e) = log_err {
        return Err(e);
    }
    info!(
        "ran {} epochs, best epoch {:?}, early stop {}",
        outcome.epochs_run, outcome.best_epoch, outcome.stopped_early
    );

    let ck = Checkpoint::from_store(
        &outcome.params.store,
        &resolved,
        outcome.epochs_run as u64,
        outcome.rng_streams.clone(),
    );
    ck.write_to(std::io::BufWriter::new(File::create(cfg.out.join("checkpoint.bin"))?))?;

    if bundle.seeds.test.is_empty() {
        return Ok(None);
    }
    let emb = embed(&outcome.params, &original_graph(&bundle)?)?;
    let (s, t) = UnionLayout::of(&bundle).split(&emb);
    let ranks: Vec<usize> = rank_all(&bundle.seeds.test, &s, &t, 1)?.iter().map(|r| r.rank).collect();
    let record = MetricsRecord::new(&metrics(&ranks, &[1, 5])?, cfg.fold, cfg.train.seed);
    record.write(&cfg.out)?;
    Ok(Some(record))
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let file = File::open(&args.checkpoint)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", args.checkpoint.display())))?;
    let ck = Checkpoint::read_from(BufReader::new(file))?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&ck.config, "checkpoint config")?;
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
        cfg.synthetic = None;
    }
    if let Some(s) = &args.synthetic {
        cfg.set("synthetic", s).map_err(Error::Config)?;
        cfg.data = None;
    }
    if let Some(f) = args.fold {
        cfg.fold = f;
    }
    cfg.validate()?;
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&out)?;
    let record = match ck.precision {
        4 => eval_typed::<f32>(&ck, &cfg, args, &out)?,
        8 => eval_typed::<f64>(&ck, &cfg, args, &out)?,
        p => return Err(Error::Checkpoint(format!("unknown precision byte {p}"))),
    };
    println!(
        "Hits@1 {:.4}  Hits@5 {:.4}  MRR {:.4}  ({} pairs)",
        record.hits1, record.hits5, record.mrr, record.n_test
    );
    Ok(())
}

fn eval_typed<T: Real>(ck: &Checkpoint, cfg: &RunConfig, args: &EvalArgs, out: &Path) -> Result<MetricsRecord> {
    let bundle = load_bundle(cfg)?;
    let mut params = cfg.train.init_params::<T>(&bundle)?;
    ck.load_into(&mut params.store)?;
    let (pairs, name) = match args.split {
        Split::Train => (&bundle.seeds.train, "train"),
        Split::Valid => (&bundle.seeds.valid, "valid"),
        Split::Test => (&bundle.seeds.test, "test"),
    };
    if pairs.is_empty() {
        return Err(Error::Config(format!("the dataset has no {name} links")));
    }
    let emb = embed(&params, &original_graph(&bundle)?)?;
    let (s, t) = UnionLayout::of(&bundle).split(&emb);
    let ranks = rank_all(pairs, &s, &t, 1)?;
    let flat: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
    let record = MetricsRecord::new(&metrics(&flat, &[1, 5])?, cfg.fold, cfg.train.seed);
    record.write(out)?;
    if args.predictions {
        write_predictions(
            &out.join("predictions.tsv"),
            &ranks,
            &bundle.id_maps.source_entities,
            &bundle.id_maps.target_entities,
        )?;
    }
    Ok(record)
}

fn child_failure(dir: &Path, status: std::process::ExitStatus) -> Error {
    let msg = format!("run in {} failed ({status})", dir.display());
    match status.code() {
        Some(1) => Error::Config(msg),
        Some(2) => Error::Io(std::io::Error::other(msg)),
        _ => Error::Numeric(msg),
    }
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let base = resolve(&args.run)?;
    if args.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    if !base.allow_any_pr {
        if let Some(pr) = args.pr_list.iter().find(|p| !SEARCHED_PR.contains(p)) {
            return Err(Error::Config(format!(
                "pr = {pr} is outside the searched set {{0, 0.05, 0.1, 0.15}}; pass --allow-any-pr to use it"
            )));
        }
    }
    let seeds = if args.seeds.is_empty() {
        vec![base.train.seed]
    } else {
        args.seeds.clone()
    };

    let mut runs = Vec::new();
    for &pr in &args.pr_list {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.train.pr = pr;
            cfg.train.seed = seed;
            cfg.out = base.out.join(format!("pr{pr}_seed{seed}"));
            cfg.validate()?;
            std::fs::create_dir_all(&cfg.out)?;
            std::fs::write(cfg.out.join("config.resolved"), cfg.resolved_text())?;
            runs.push(cfg);
        }
    }

    if args.jobs == 1 {
        for cfg in &runs {
            info!("training pr {} seed {}", cfg.train.pr, cfg.train.seed);
            run_train(cfg)?;
        }
    } else {
        let exe = std::env::current_exe()?;
        for batch in runs.chunks(args.jobs) {
            let children = batch
                .iter()
                .map(|cfg| {
                    Command::new(&exe)
                        .arg("train")
                        .arg("--config")
                        .arg(cfg.out.join("config.resolved"))
                        .env_remove(SEED_ENV)
                        .stdout(std::process::Stdio::null())
                        .spawn()
                })
                .collect::<std::io::Result<Vec<_>>>()?;
            for (mut child, cfg) in children.into_iter().zip(batch) {
                let status = child.wait()?;
                if !status.success() {
                    return Err(child_failure(&cfg.out, status));
                }
            }
        }
    }

    let path = base.out.join("sweep.csv");
    let mut csv = csv::Writer::from_path(&path).map_err(csv_err)?;
    csv.write_record(["pr", "seed", "augmentation", "hits1", "hits5", "mrr", "n_test"])
        .map_err(csv_err)?;
    println!("{:>6} {:>6} {:>5} {:>8} {:>8} {:>8}", "pr", "seed", "aug", "hits1", "hits5", "mrr");
    for cfg in &runs {
        let m = MetricsRecord::read(&cfg.out.join("metrics.json"))
            .map_err(|e| Error::Config(format!("run in {} left no test metrics: {e}", cfg.out.display())))?;
        let aug = if cfg.train.pr == 0.0 { "off" } else { "on" };
        csv.write_record([
            cfg.train.pr.to_string(),
            cfg.train.seed.to_string(),
            aug.to_string(),
            m.hits1.to_string(),
            m.hits5.to_string(),
            m.mrr.to_string(),
            m.n_test.to_string(),
        ])
        .map_err(csv_err)?;
        println!(
            "{:>6} {:>6} {:>5} {:>8.4} {:>8.4} {:>8.4}",
            cfg.train.pr, cfg.train.seed, aug, m.hits1, m.hits5, m.mrr
        );
    }
    csv.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn gradcheck(fault: Option<Fault>) -> Result<()> {
    let mut failed = Vec::new();
    for op in run_op_suite(fault)? {
        let ok = op.passed();
        println!(
            "{:<22} max_rel_err {:.3e}  tol {:.0e}  {}",
            op.name,
            op.max_rel_err,
            op.tolerance,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(op.name.to_string());
        }
    }
    let report = composite_loss_check(fault)?;
    let ok = report.max_rel_err < KINK_TOLERANCE;
    println!(
        "{:<22} max_rel_err {:.3e}  tol {:.0e}  {}",
        "composite_loss",
        report.max_rel_err,
        KINK_TOLERANCE,
        if ok { "ok" } else { "FAIL" }
    );
    if !ok {
        failed.push("composite_loss".into());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

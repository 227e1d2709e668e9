//! `vpr`: command-line front end for feature extraction, LLN training,
//! indexing, querying and evaluation.
//!
//! Every failure prints one JSON line `{"error": kind, "message": ...}` on
//! stderr. Exit status is 0 on success, 1 on runtime errors and 2 on usage
//! errors.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use vpr_core::io::{
    dump_activation_map, load_index, read_feature_map, read_model, read_pgm, save_index, toy_extract,
    write_feature_map, write_model, RunConfig,
};
use vpr_core::lln::{lln_forward, LlnParams};
use vpr_core::matcher::{image_similarity, write_matches_csv};
use vpr_core::retrieval::{
    build_index_from_features, describe, evaluate, holistic_precision_vs_topk, query, read_results_csv,
    write_results_csv, DescriptorVariant, GroundTruth,
};
use vpr_core::tensor::FeatureMap;
use vpr_core::trainer::{train, Dataset, Manifest, ManifestEntry};
use vpr_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "vpr", version, about = "Visual place recognition with learned landmarks")]
struct Cli {
    /// Seed for every random choice (toy projection, initialization, tuple
    /// order, RAND cells). Overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Toy dense features from PGM images.
    ExtractToy(ExtractArgs),
    /// Train the landmark localization network.
    Train(TrainArgs),
    /// Describe map images and write an index directory.
    Index(IndexArgs),
    /// Rank the map for every query image.
    Query(QueryArgs),
    /// Precision/recall curve of query results.
    EvalPr(EvalArgs),
    /// Write an LLN activation map as a PGM image.
    DumpActivations(DumpArgs),
    /// Write the weighted landmark matches between two images as CSV.
    ExportMatches(MatchArgs),
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// JSON-lines manifest whose paths point to PGM images.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    manifest: Option<PathBuf>,
    /// Output directory for feature maps and their manifest.
    #[arg(long, requires = "manifest")]
    out_dir: Option<PathBuf>,
    /// Single PGM image.
    #[arg(long, requires = "out")]
    image: Option<PathBuf>,
    /// Output feature-map file for `--image`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    stride: Option<u32>,
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Start from this model instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Per-step loss history as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Run single-threaded.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct DescriptorArgs {
    /// holistic, lln, act, rand or all.
    #[arg(long)]
    variant: Option<DescriptorVariant>,
    /// Landmarks per image.
    #[arg(long)]
    n: Option<usize>,
    /// Required by the lln variant.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Index directory to create.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    descriptor: DescriptorArgs,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Results CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Required for an lln index.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    shortlist_k: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    /// Query manifest with frame indices.
    #[arg(long)]
    queries: PathBuf,
    /// Map manifest with frame indices.
    #[arg(long, required_unless_present = "index")]
    map: Option<PathBuf>,
    /// Take the map frames from an index directory instead.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    vision_offset: Option<i64>,
    /// PR CSV to write; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write precision against ranking depth 1..=K as CSV.
    #[arg(long)]
    topk_out: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    topk_max: usize,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// PGM file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MatchArgs {
    /// Query feature map.
    #[arg(long)]
    query: PathBuf,
    /// Map feature map.
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    descriptor: DescriptorArgs,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn extract(cfg: &RunConfig, args: &ExtractArgs) -> Result<serde_json::Value> {
    let stride = args.stride.unwrap_or(cfg.stride) as usize;
    let channels = args.channels.unwrap_or(cfg.toy_channels);
    if let Some(image) = &args.image {
        let out = args.out.as_ref().expect("clap enforces --out");
        let map = toy_extract(&read_pgm(image)?, stride, channels, cfg.seed)?;
        write_feature_map(out, &map)?;
        return Ok(json!({"written": 1, "grid": [map.height(), map.width(), map.channels()]}));
    }
    let manifest = Manifest::load(args.manifest.as_ref().expect("clap enforces --manifest"))?;
    let out_dir = args
        .out_dir
        .as_ref()
        .ok_or_else(|| Error::Config("--out-dir is required with --manifest".into()))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.clone(),
        source: e,
    })?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for (i, e) in manifest.entries.iter().enumerate() {
        let map = toy_extract(&read_pgm(manifest.resolve(e))?, stride, channels, cfg.seed)?;
        let name = format!("{i:06}.fmap");
        write_feature_map(out_dir.join(&name), &map)?;
        entries.push(ManifestEntry {
            path: name.into(),
            ..e.clone()
        });
    }
    let out_manifest = Manifest::new(entries, out_dir)?;
    let path = out_dir.join("manifest.jsonl");
    out_manifest.save(&path)?;
    Ok(json!({"written": out_manifest.entries.len(), "manifest": path}))
}

fn run_train(cfg: &RunConfig, args: &TrainArgs) -> Result<serde_json::Value> {
    let mut tc = cfg.train.clone();
    if let Some(v) = args.epochs {
        tc.epochs = v;
    }
    if let Some(v) = args.lr {
        tc.learning_rate = v;
    }
    if let Some(v) = args.margin {
        tc.margin = v;
    }
    if let Some(v) = args.negatives {
        tc.num_negatives = v;
    }
    if let Some(v) = args.batch_size {
        tc.batch_size = v;
    }
    if args.sequential {
        tc.parallel = false;
    }
    let dataset = Dataset::from_manifest(&Manifest::load(&args.manifest)?)?;
    let channels = dataset
        .channels()
        .ok_or_else(|| Error::Dataset("training manifest is empty".into()))?;
    let initial = match &args.init {
        Some(p) => read_model(p)?,
        None => LlnParams::seeded(channels, &cfg.lln, cfg.seed)?,
    };
    let outcome = train(&dataset, &tc, &initial)?;
    write_model(&args.out, &outcome.params)?;
    if let Some(p) = &args.loss_csv {
        let mut w = create(p)?;
        outcome.history.write_csv(&mut w).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
        finish(w, p)?;
    }
    let means = outcome.history.epoch_means();
    Ok(json!({
        "model": args.out,
        "epochs": tc.epochs,
        "steps": outcome.history.steps.len(),
        "first_epoch_loss": means.first(),
        "last_epoch_loss": means.last(),
    }))
}

fn descriptor_setup(
    cfg: &RunConfig,
    args: &DescriptorArgs,
    grid_cells: usize,
) -> Result<(vpr_core::retrieval::DescriptorConfig, Option<LlnParams>)> {
    let mut cfg = cfg.clone();
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if args.n.is_some() {
        cfg.n = args.n;
    }
    cfg.validate()?;
    let model = args.model.as_ref().map(read_model).transpose()?;
    if cfg.variant == DescriptorVariant::Lln && model.is_none() {
        return Err(Error::Config("variant lln requires --model".into()));
    }
    Ok((cfg.descriptor_config(grid_cells), model))
}

fn run_index(cfg: &RunConfig, args: &IndexArgs) -> Result<serde_json::Value> {
    let manifest = Manifest::load(&args.manifest)?;
    let features = manifest.load_features()?;
    let cells = features
        .first()
        .map(FeatureMap::cells)
        .ok_or(Error::EmptyIndex)?;
    let (dc, model) = descriptor_setup(cfg, &args.descriptor, cells)?;
    let items: Vec<(&str, Option<i64>, &FeatureMap)> = manifest
        .entries
        .iter()
        .zip(&features)
        .map(|(e, f)| (e.id.as_str(), e.frame, f))
        .collect();
    let index = build_index_from_features(items, model.as_ref(), dc)?;
    save_index(&args.out, &index, &manifest)?;
    Ok(json!({"index": args.out, "images": index.len(), "variant": dc.variant.name(), "n": dc.n}))
}

fn run_query(cfg: &RunConfig, args: &QueryArgs) -> Result<serde_json::Value> {
    let (index, _) = load_index(&args.index)?;
    let model = args.model.as_ref().map(read_model).transpose()?;
    if index.config.variant == DescriptorVariant::Lln && model.is_none() {
        return Err(Error::Config("this index was built with variant lln; pass --model".into()));
    }
    let shortlist_k = args.shortlist_k.unwrap_or(cfg.shortlist_k);
    let queries = Manifest::load(&args.manifest)?;
    let mut results = Vec::with_capacity(queries.entries.len());
    for e in &queries.entries {
        let f = read_feature_map(queries.resolve(e))?;
        let d = describe(&e.id, e.frame, &f, &index.config, model.as_ref())?;
        results.push(query(&d, &index, shortlist_k)?);
    }
    let w = create(&args.out)?;
    write_results_csv(w, &results)?;
    Ok(json!({"results": args.out, "queries": results.len(), "shortlist_k": shortlist_k}))
}

fn run_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<serde_json::Value> {
    let file = File::open(&args.results).map_err(|e| Error::Io {
        path: args.results.clone(),
        source: e,
    })?;
    let results = read_results_csv(file)?;
    let queries = Manifest::load(&args.queries)?;
    let map = match (&args.map, &args.index) {
        (Some(m), _) => Manifest::load(m)?,
        (None, Some(dir)) => load_index(dir)?.1,
        (None, None) => unreachable!("clap requires --map or --index"),
    };
    let gt = GroundTruth::from_manifests(&queries, &map);
    let offset = args.vision_offset.unwrap_or(cfg.vision_offset);
    if offset < 0 {
        return Err(Error::Config("--vision-offset must be >= 0".into()));
    }
    let curve = evaluate(&results, &gt, offset)?;
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e| Error::Io { path, source: e }
    };
    match &args.out {
        Some(p) => {
            let mut w = create(p)?;
            curve.write_csv(&mut w).map_err(io_err(p))?;
            finish(w, p)?;
        }
        None => {
            let stdout = std::io::stdout();
            curve.write_csv(&mut stdout.lock()).map_err(io_err(Path::new("<stdout>")))?;
        }
    }
    if let Some(p) = &args.topk_out {
        let ks: Vec<usize> = (1..=args.topk_max.max(1)).collect();
        let table = holistic_precision_vs_topk(&results, &gt, offset, &ks)?;
        let mut w = create(p)?;
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "k,precision")?;
            for (k, v) in &table {
                writeln!(w, "{k},{v}")?;
            }
            Ok(())
        };
        write().map_err(io_err(p))?;
        finish(w, p)?;
    }
    println!("{}", curve.summary());
    Ok(json!({"precision_at_full_recall": curve.precision_at_full_recall * 100.0, "queries": results.len()}))
}

fn run_dump(args: &DumpArgs) -> Result<serde_json::Value> {
    let features = read_feature_map(&args.features)?;
    let model = read_model(&args.model)?;
    let act = lln_forward(&features, &model)?;
    dump_activation_map(&act, &args.out)?;
    Ok(json!({"image": args.out, "width": act.width(), "height": act.height()}))
}

fn run_matches(cfg: &RunConfig, args: &MatchArgs) -> Result<serde_json::Value> {
    let q = read_feature_map(&args.query)?;
    let m = read_feature_map(&args.map)?;
    let (mut dc, model) = descriptor_setup(cfg, &args.descriptor, q.cells())?;
    if !dc.variant.uses_landmarks() {
        dc.variant = DescriptorVariant::Lln;
        if model.is_none() {
            return Err(Error::Config("matches need a landmark variant".into()));
        }
    }
    let dq = describe("query", None, &q, &dc, model.as_ref())?;
    let dm = describe("map", None, &m, &dc, model.as_ref())?;
    let (Some(lq), Some(lm)) = (&dq.landmarks, &dm.landmarks) else {
        return Err(Error::Config("matches need a landmark variant".into()));
    };
    let result = image_similarity(lq, lm)?;
    let mut w = create(&args.out)?;
    write_matches_csv(&mut w, &result).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    finish(w, &args.out)?;
    Ok(json!({
        "matches": result.matches.len(),
        "score": result.score,
        "mode": result.mode.map(|m| [m.dx, m.dy]),
    }))
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::ExtractToy(a) => extract(&cfg, a),
        Command::Train(a) => run_train(&cfg, a),
        Command::Index(a) => run_index(&cfg, a),
        Command::Query(a) => run_query(&cfg, a),
        Command::EvalPr(a) => run_eval(&cfg, a),
        Command::DumpActivations(a) => run_dump(a),
        Command::ExportMatches(a) => run_matches(&cfg, a),
    }
}

fn error_line(kind: &str, message: &str) -> String {
    json!({"error": kind, "message": message}).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let message = first.trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", message));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            if !matches!(cli.command, Command::EvalPr(_)) {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("{}", error_line(e.kind(), &message));
            if e.kind() == "config" {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn seed_flag_overrides_config_seeds() {
        let cli = Cli::try_parse_from(["vpr", "--seed", "11", "eval-pr", "--results", "r", "--queries", "q", "--map", "m"]).unwrap();
        let cfg = load_config(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed), (11, 11));
    }
}

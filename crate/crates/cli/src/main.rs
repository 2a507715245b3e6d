use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cope::ablation::{ablation_configs, run_ablation, AblationGrid};
use cope::checkpoint::{load_checkpoint, save_checkpoint};
use cope::datamodel::{generate_synthetic_corpus, load_manifest, save_manifest, Domain, DomainCounts, SynthConfig};
use cope::evalsuite::{
    aggregate_triples, bootstrap_filter, export_embeddings, few_shot_eval, match_scores, project2d, retrieval_eval,
    write_projection_csv, EmbeddingTable, DEFAULT_REPEATS, DEFAULT_THRESHOLD,
};
use cope::trainer::{train, TrainConfig};
use cope::{CopeError, Result};

const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Parser)]
#[command(name = "cope", version, about = "Cross-domain product representations for pages, videos and live clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into DIR/manifest.jsonl.
    GenData(GenData),
    /// Train a model and write a checkpoint.
    Train(Train),
    /// Embed every sample of a manifest.
    Export(Export),
    #[command(subcommand)]
    Eval(Eval),
    /// Keep samples whose match score beats the threshold, then keep only
    /// products still present in all three domains.
    Filter(Filter),
    /// Train the two arms of an ablation and compare held-out R@1.
    Ablate(Ablate),
    /// Project embeddings onto their top two principal axes.
    Project2d(Project2d),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    products: usize,
    /// Samples per product as P,V,L.
    #[arg(long, default_value = "2,2,2", value_parser = parse_counts)]
    per_domain: DomainCounts,
    /// Frames per video and live clip.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    manifest: PathBuf,
    /// TOML training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Per-step metrics as JSON lines.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct Export {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Eval {
    /// Retrieval metrics for one direction.
    Retrieval(Retrieval),
    /// One-shot classification against random anchors.
    Fewshot(Fewshot),
}

#[derive(Args)]
struct Retrieval {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    query: Domain,
    #[arg(long)]
    gallery: Domain,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,50")]
    ks: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Fewshot {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    anchor: Domain,
    #[arg(long)]
    query: Domain,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_REPEATS)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Filter {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Manifest the embeddings were exported from.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    grid: AblationGrid,
    /// Samples per product and domain held out for evaluation.
    #[arg(long, default_value_t = 1)]
    holdout: usize,
    /// Directory for the two arm configs and the comparison JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Project2d {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_counts(s: &str) -> std::result::Result<DomainCounts, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [p, v, l] => Ok(DomainCounts::new(p, v, l)),
        _ => Err(format!("expected P,V,L counts, got `{s}`")),
    }
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_toml(&fs::read_to_string(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CopeError::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn gen_data(a: GenData) -> Result<()> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        n_products: a.products,
        n_categories: a.categories.unwrap_or_else(|| defaults.n_categories.min(a.products.max(1))),
        per_domain: a.per_domain,
        frames_video: a.frames,
        frames_live: a.frames,
        image_size: a.image_size.unwrap_or(defaults.image_size),
        noise_level: a.noise.unwrap_or(defaults.noise_level),
        jitter: a.jitter.unwrap_or(defaults.jitter),
        seed: a.seed,
        ..defaults
    };
    let corpus = generate_synthetic_corpus(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(MANIFEST_NAME);
    save_manifest(&corpus, &path)?;
    println!("wrote {} samples of {} products to {}", corpus.len(), corpus.products().len(), path.display());
    Ok(())
}

fn train_cmd(a: Train) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let corpus = load_manifest(&a.manifest)?;
    let mut log = a
        .metrics
        .as_deref()
        .map(|p| fs::File::create(p).map(BufWriter::new))
        .transpose()?;
    let out = train(&cfg, &corpus, log.as_mut().map(|w| w as &mut dyn Write), None)?;
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    save_checkpoint(&out.model, &out.classes, &a.out)?;
    if let Some(last) = out.metrics.last() {
        println!("steps {}  final loss {:.6}", last.step, last.total);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn export(a: Export) -> Result<()> {
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let corpus = load_manifest(&a.manifest)?;
    let table = export_embeddings(&model, &corpus)?;
    table.save(&a.out)?;
    println!("wrote {} rows of width {} to {}", table.len(), table.dim(), a.out.display());
    Ok(())
}

fn retrieval(a: Retrieval) -> Result<()> {
    if a.query == a.gallery {
        return Err(CopeError::Contract(format!(
            "query and gallery are both {}; only cross-domain directions are evaluated",
            a.query
        )));
    }
    let table = EmbeddingTable::load(&a.emb)?;
    let report = retrieval_eval(&table, a.query, a.gallery, &a.ks)?;
    print!("{}", report.to_table());
    if let Some(out) = a.out {
        write_json(&report, &out)?;
    }
    Ok(())
}

fn fewshot(a: Fewshot) -> Result<()> {
    let table = EmbeddingTable::load(&a.emb)?;
    let report = few_shot_eval(&table, a.anchor, a.query, a.seed, a.repeats)?;
    print!("{}", report.to_table());
    if let Some(out) = a.out {
        write_json(&report, &out)?;
    }
    Ok(())
}

fn filter(a: Filter) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(CopeError::Contract(format!("threshold {} is outside [0, 1]", a.threshold)));
    }
    let table = EmbeddingTable::load(&a.emb)?;
    let corpus = load_manifest(&a.manifest)?;
    let kept = aggregate_triples(&bootstrap_filter(&match_scores(&table), a.threshold));
    let filtered = corpus.subset(|s| {
        kept.get(&s.product_id)
            .is_some_and(|by_domain| by_domain[s.domain.index()].contains(&s.sample_id))
    })?;
    save_manifest(&filtered, &a.out)?;
    println!(
        "kept {} of {} samples, {} of {} products",
        filtered.len(),
        corpus.len(),
        filtered.products().len(),
        corpus.products().len()
    );
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let base = read_config(a.config.as_deref())?;
    let corpus = load_manifest(&a.manifest)?;
    let (train_set, test_set) = corpus.holdout_split(a.holdout)?;
    fs::create_dir_all(&a.out)?;
    for (name, cfg) in ablation_configs(&base, a.grid) {
        fs::write(a.out.join(format!("{name}.toml")), cfg.to_toml())?;
    }
    let result = run_ablation(&base, a.grid, &train_set, &test_set)?;
    print!("{}", result.to_table());
    write_json(&result, &a.out.join("comparison.json"))
}

fn project(a: Project2d) -> Result<()> {
    let table = EmbeddingTable::load(&a.emb)?;
    let proj = project2d(&table)?;
    write_projection_csv(&table, &proj, &a.out)?;
    println!("wrote {} points to {}", proj.points.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Export(a) => export(a),
        Command::Eval(Eval::Retrieval(a)) => retrieval(a),
        Command::Eval(Eval::Fewshot(a)) => fewshot(a),
        Command::Filter(a) => filter(a),
        Command::Ablate(a) => ablate(a),
        Command::Project2d(a) => project(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

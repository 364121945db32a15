//! Command line front end for the order embedding pipeline.
//!
//! Subcommands compose through files only: `synth` writes an ontology with
//! train/dev/test splits, `closure` and `reduce` derive graph files, `mine`
//! extracts join/meet constraints, `train` fits a model, `eval` scores
//! labeled pairs, and `export` dumps embeddings as TSV. Logs go to stderr;
//! data goes to files or stdout. Every subcommand that takes `--seed` is
//! bit-deterministic across runs on the same machine.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ordemb::eval::{evaluate, read_labeled_pairs, tune_on_dev, EvalReport};
use ordemb::lattice::{count_by_kind, emit_constraints, mine_constraints, read_constraints};
use ordemb::model_io::{export_tsv, read_model, write_model};
use ordemb::ontology::{
    ingest_triplets, transitive_closure, transitive_reduction, write_triplets, IngestReport,
    OntologyGraph, Reachability,
};
use ordemb::synth::{balanced_tree, random_dag, sibling_corpus, split_closure};
use ordemb::trainer::{stream_rng, train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "ordemb",
    version,
    about = "Order embeddings for Is-A hierarchies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the transitive closure of an ontology
    Closure(GraphArgs),
    /// Write the transitive reduction of an ontology
    Reduce(GraphArgs),
    /// Mine join/meet constraints from incomparable concept pairs
    Mine(MineArgs),
    /// Generate a seeded synthetic ontology with train/dev/test splits
    Synth(SynthArgs),
    /// Train an order embedding or bilinear model
    Train(TrainArgs),
    /// Evaluate a trained model on labeled pairs
    Eval(EvalArgs),
    /// Export embeddings as a TSV dump
    Export(ExportArgs),
}

#[derive(Args)]
struct GraphArgs {
    /// Input triplet TSV (child <tab> relation <tab> parent)
    #[arg(long)]
    input: PathBuf,
    /// Output triplet TSV
    #[arg(long)]
    output: PathBuf,
    /// Relation name to keep when ingesting
    #[arg(long, default_value = "IsA")]
    relation: String,
}

#[derive(Args)]
struct MineArgs {
    /// Input triplet TSV
    #[arg(long)]
    input: PathBuf,
    /// Output constraint TSV (kind, w1, w2, witness)
    #[arg(long)]
    output: PathBuf,
    /// Relation name to keep when ingesting
    #[arg(long, default_value = "IsA")]
    relation: String,
    /// Cap on incomparable pairs examined (seeded reservoir sample)
    #[arg(long)]
    max_pairs: Option<usize>,
    /// Seed for the pair reservoir
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Worker threads for the mining pass
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for ontology.tsv, train.tsv, dev.tsv, test.tsv
    #[arg(long)]
    output_dir: PathBuf,
    /// Depth of a balanced binary tree (2^(d+1)-1 nodes)
    #[arg(long, conflicts_with_all = ["nodes", "edges"])]
    tree_depth: Option<usize>,
    /// Node count for a random DAG (requires --edges)
    #[arg(long, requires = "edges")]
    nodes: Option<usize>,
    /// Edge count for a random DAG (requires --nodes)
    #[arg(long, requires = "nodes")]
    edges: Option<usize>,
    /// Fraction of non-reduction closure edges included in the train split
    #[arg(long, default_value_t = 0.5)]
    closure_fraction: f64,
    /// Also write corpus.txt with roughly this many bytes of sibling text
    #[arg(long)]
    corpus_bytes: Option<usize>,
    /// Seed for graph generation, splitting, and corpus text
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training triplet TSV
    #[arg(long)]
    input: PathBuf,
    /// Output model file
    #[arg(long)]
    model: PathBuf,
    /// Relation name to keep when ingesting
    #[arg(long, default_value = "IsA")]
    relation: String,
    /// Text corpus, one sentence per line (enables use_text)
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Mined constraint TSV (enables use_joinmeet)
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// Labeled dev pairs for per-epoch accuracy and best-epoch selection
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Flat key=value config file, applied before any CLI override
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra config overrides as key=value (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Embedding dimension
    #[arg(long)]
    dim: Option<usize>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Model kind: order or bilinear
    #[arg(long)]
    kind: Option<String>,
    /// Master seed; all randomness derives from it via named sub-streams
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; more than 1 trades determinism for speed
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Labeled pairs to score (child <tab> parent <tab> 1|0)
    #[arg(long)]
    pairs: PathBuf,
    /// Labeled dev pairs; the decision threshold is tuned on these
    #[arg(long, conflicts_with = "threshold")]
    dev: Option<PathBuf>,
    /// Fixed decision threshold, skipping dev tuning
    #[arg(long)]
    threshold: Option<f64>,
    /// Print machine-readable key=value lines instead of the table
    #[arg(long)]
    machine: bool,
}

#[derive(Args)]
struct ExportArgs {
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Output TSV (token, then one column per dimension)
    #[arg(long)]
    output: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Closure(args) => {
            let g = ingest(&args.input, &args.relation)?;
            let closed = transitive_closure(&g)?;
            write_triplets(&closed, &args.output)?;
            log::info!(
                "closure: {} edges from {} input edges -> {}",
                closed.num_edges(),
                g.num_edges(),
                args.output.display()
            );
            Ok(())
        }
        Command::Reduce(args) => {
            let g = ingest(&args.input, &args.relation)?;
            let reduced = transitive_reduction(&g)?;
            write_triplets(&reduced, &args.output)?;
            log::info!(
                "reduction: {} edges from {} input edges -> {}",
                reduced.num_edges(),
                g.num_edges(),
                args.output.display()
            );
            Ok(())
        }
        Command::Mine(args) => cmd_mine(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Export(args) => {
            let model = read_model(&args.model)?;
            export_tsv(&model, &args.output)?;
            log::info!(
                "exported {} rows of dim {} -> {}",
                model.vocab.len(),
                model.table.dim(),
                args.output.display()
            );
            Ok(())
        }
    }
}

fn ingest(path: &Path, relation: &str) -> Result<OntologyGraph> {
    let (graph, report) = ingest_triplets(path, relation)?;
    log_ingest(path, &report);
    Ok(graph)
}

fn log_ingest(path: &Path, report: &IngestReport) {
    log::info!(
        "{}: {} lines, {} edges, {} duplicates, {} off-relation, {} cycle edges dropped",
        path.display(),
        report.lines,
        report.edges_added,
        report.duplicates,
        report.relation_filtered,
        report.cycle_edges_dropped
    );
    for (line, reason) in &report.malformed {
        log::warn!("{}:{line}: {reason}", path.display());
    }
}

fn cmd_mine(args: MineArgs) -> Result<()> {
    let g = ingest(&args.input, &args.relation)?;
    let reach = Reachability::build(&g)?;
    let mut rng = stream_rng(args.seed, "mine");
    let constraints = mine_constraints(
        &g,
        &reach,
        args.max_pairs.unwrap_or(usize::MAX),
        &mut rng,
        args.threads.max(1),
    )?;
    emit_constraints(&constraints, &g, &args.output)?;
    let (children, parents) = count_by_kind(&constraints);
    println!("common_parent: {parents}");
    println!("common_child: {children}");
    log::info!(
        "mined {} constraints -> {}",
        constraints.len(),
        args.output.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.closure_fraction) {
        bail!("--closure-fraction must lie in [0, 1]");
    }
    let full = match (args.tree_depth, args.nodes, args.edges) {
        (Some(depth), None, None) => balanced_tree(depth),
        (None, Some(nodes), Some(edges)) => {
            random_dag(nodes, edges, &mut stream_rng(args.seed, "synth_dag"))?
        }
        _ => bail!("pass either --tree-depth or both --nodes and --edges"),
    };
    let ds = split_closure(
        &full,
        args.closure_fraction,
        &mut stream_rng(args.seed, "split"),
    )?;
    std::fs::create_dir_all(&args.output_dir)
        .with_context(|| format!("creating {}", args.output_dir.display()))?;
    let path = |name: &str| args.output_dir.join(name);
    write_triplets(&ds.full, path("ontology.tsv"))?;
    write_triplets(&ds.train, path("train.tsv"))?;
    ordemb::eval::write_labeled_pairs(&ds.dev, path("dev.tsv"))?;
    ordemb::eval::write_labeled_pairs(&ds.test, path("test.tsv"))?;
    if let Some(bytes) = args.corpus_bytes {
        let text = sibling_corpus(&ds.full, bytes, &mut stream_rng(args.seed, "corpus"));
        std::fs::write(path("corpus.txt"), text)
            .with_context(|| format!("writing {}", path("corpus.txt").display()))?;
    }
    log::info!(
        "synth: {} concepts, {} full edges, {} train edges, {} dev pairs, {} test pairs -> {}",
        ds.full.num_concepts(),
        ds.full.num_edges(),
        ds.train.num_edges(),
        ds.dev.len(),
        ds.test.len(),
        args.output_dir.display()
    );
    Ok(())
}

fn build_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    for pair in &args.set {
        let Some((key, value)) = pair.split_once('=') else {
            bail!("--set expects key=value, got `{pair}`");
        };
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(dim) = args.dim {
        cfg.dim = dim;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(kind) = &args.kind {
        cfg.set("kind", kind)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    cfg.use_text = args.corpus.is_some();
    cfg.use_joinmeet = args.constraints.is_some();
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = build_config(&args)?;
    let g = ingest(&args.input, &args.relation)?;
    let constraints = match &args.constraints {
        Some(path) => Some(read_constraints(path, &g)?),
        None => None,
    };
    let dev = match &args.dev {
        Some(path) => Some(read_labeled_pairs(path)?),
        None => None,
    };
    let out = train(
        &g,
        args.corpus.as_deref(),
        constraints.as_deref(),
        dev.as_deref(),
        &cfg,
    )?;
    for e in &out.report.epochs {
        let mut line = format!("epoch={}", e.epoch);
        if let Some(v) = e.order_loss {
            line.push_str(&format!(" order_loss={v:.6}"));
        }
        if let Some(v) = e.cbow_loss {
            line.push_str(&format!(" cbow_loss={v:.6}"));
        }
        if let Some(v) = e.joinmeet_loss {
            line.push_str(&format!(" joinmeet_loss={v:.6}"));
        }
        if let Some(v) = e.dev_accuracy {
            line.push_str(&format!(" dev_accuracy={v:.4}"));
        }
        log::info!("{line}");
    }
    log::info!(
        "trained {} edges, {} constraints, vocab {}, {} windows/epoch in {:.1}s; kept epoch {}",
        out.report.train_edges,
        out.report.constraints,
        out.report.vocab_size,
        out.report.windows_per_epoch,
        out.report.wall_secs,
        out.report.selected_epoch
    );
    write_model(&out.model, &args.model)?;
    log::info!("model -> {}", args.model.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = read_model(&args.model)?;
    let pairs = read_labeled_pairs(&args.pairs)?;
    let threshold = match (&args.dev, args.threshold) {
        (Some(dev_path), None) => {
            let dev = read_labeled_pairs(dev_path)?;
            let (threshold, dev_accuracy) = tune_on_dev(&model, &dev)?;
            log::info!("dev accuracy {dev_accuracy:.4} at threshold {threshold:.6}");
            threshold
        }
        (None, Some(threshold)) => threshold,
        _ => bail!("pass exactly one of --dev or --threshold"),
    };
    let report = evaluate(&model, &pairs, threshold)?;
    print_report(&report, args.machine);
    Ok(())
}

fn print_report(report: &EvalReport, machine: bool) {
    if machine {
        println!("accuracy={:.6}", report.accuracy);
        println!("threshold={:.6}", report.threshold);
        println!("scored={}", report.scored_total());
        println!("excluded={}", report.excluded);
        println!("tp={}", report.true_positives);
        println!("fp={}", report.false_positives);
        println!("tn={}", report.true_negatives);
        println!("fn={}", report.false_negatives);
    } else {
        println!("{:<12}{:.4}", "accuracy", report.accuracy);
        println!("{:<12}{:.6}", "threshold", report.threshold);
        println!("{:<12}{}", "scored", report.scored_total());
        println!("{:<12}{}", "excluded", report.excluded);
        println!("{:<12}{}", "tp", report.true_positives);
        println!("{:<12}{}", "fp", report.false_positives);
        println!("{:<12}{}", "tn", report.true_negatives);
        println!("{:<12}{}", "fn", report.false_negatives);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_representative_invocations() {
        Cli::try_parse_from(["ordemb", "closure", "--input", "a.tsv", "--output", "b.tsv"])
            .unwrap();
        Cli::try_parse_from([
            "ordemb",
            "synth",
            "--output-dir",
            "out",
            "--tree-depth",
            "3",
            "--seed",
            "7",
        ])
        .unwrap();
        Cli::try_parse_from([
            "ordemb",
            "train",
            "--input",
            "train.tsv",
            "--model",
            "m.bin",
            "--set",
            "negatives=2",
            "--dim",
            "16",
        ])
        .unwrap();
        assert!(Cli::try_parse_from(["ordemb", "closure", "--nope", "x"]).is_err());
        assert!(Cli::try_parse_from([
            "ordemb",
            "synth",
            "--output-dir",
            "o",
            "--tree-depth",
            "2",
            "--nodes",
            "5",
        ])
        .is_err());
        assert!(Cli::try_parse_from([
            "ordemb",
            "eval",
            "--model",
            "m.bin",
            "--pairs",
            "t.tsv",
            "--dev",
            "d.tsv",
            "--threshold",
            "0.5",
        ])
        .is_err());
    }

    #[test]
    fn train_config_layering_applies_cli_last() {
        let dir = tempfile::tempdir().unwrap();
        let conf = dir.path().join("train.conf");
        std::fs::write(&conf, "dim=32\nepochs=9\nlr=0.5\n").unwrap();
        let cli = Cli::try_parse_from([
            "ordemb",
            "train",
            "--input",
            "train.tsv",
            "--model",
            "m.bin",
            "--config",
            conf.to_str().unwrap(),
            "--set",
            "epochs=11",
            "--dim",
            "64",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else {
            panic!("expected train");
        };
        let cfg = build_config(&args).unwrap();
        assert_eq!(cfg.dim, 64);
        assert_eq!(cfg.epochs, 11);
        assert_eq!(cfg.learning_rate, 0.5);
        assert!(!cfg.use_text);
    }
}

//! End-to-end pipeline driver: synthesize a corpus, derive a type
//! hierarchy, embed it, train the projection model and evaluate it.

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use typeball::corpus::{read_dataset, read_word_vectors, write_dataset, write_word_vectors};
use typeball::embedding::{
    reconstruction_map, train_type_embeddings, GraphEmbedConfig, TypeEmbeddingTable,
};
use typeball::encoder::{EncoderConfig, Vocabulary, WordEmbeddingTable};
use typeball::eval::{
    augment_with_coarse, metric_report, neighbor_rank_histogram, predict, write_histogram,
    write_metric_report, RankScope,
};
use typeball::hierarchy::{
    build_freq_graph, build_pmi_graph, load_taxonomy, merge_graphs_with, transitive_closure,
    AnnotatedInstance, EdgeOrientation, Granularity, MergeRule, TypeInventory, WeightedTypeGraph,
};
use typeball::projection::{
    load_checkpoint, save_checkpoint, train, CheckpointMeta, GranularityWeights, StackedProjector,
    TrainConfig, PROJECTION_HIDDEN_DIM,
};
use typeball::synth::{generate, SynthConfig};
use typeball::{LossWeights, SpaceKind};

use config::ConfigMap;

#[derive(Parser)]
#[command(
    name = "typeball",
    about = "Hierarchical entity-type embeddings in hyperbolic or Euclidean space",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (inventory, taxonomy, vectors, splits).
    GenSynthetic(GenSyntheticArgs),
    /// Derive a weighted type graph from a taxonomy or co-occurrences.
    BuildHierarchy(BuildHierarchyArgs),
    /// Embed a type graph into the chosen space.
    EmbedTypes(EmbedTypesArgs),
    /// Train the stacked projection model against a type embedding.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenSyntheticArgs {
    /// Key-value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the generated files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    branching: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// Training instances.
    #[arg(long)]
    train: Option<usize>,
    /// Dev instances.
    #[arg(long)]
    dev: Option<usize>,
    /// Test instances.
    #[arg(long)]
    test: Option<usize>,
    /// Probability of dropping each non-leaf ancestor from a gold set.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    word_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BuildHierarchyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inventory file ("name granularity" per line).
    #[arg(long)]
    inventory: Option<PathBuf>,
    /// taxonomy | freq | pmi | taxonomy+freq
    #[arg(long)]
    method: Option<String>,
    /// JSONL dataset (for freq/pmi counting).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Taxonomy edge file ("child parent" per line).
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// How taxonomy and freq weights combine in taxonomy+freq.
    #[arg(long)]
    merge_rule: Option<MergeRule>,
    /// Output graph file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedTypesArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    inventory: Option<PathBuf>,
    /// Input graph file.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// hyperbolic | euclidean
    #[arg(long)]
    space: Option<SpaceKind>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    burn_in_epochs: Option<usize>,
    #[arg(long)]
    burn_in_lr_factor: Option<f64>,
    /// Negative samples per drawn edge.
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    init_radius: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output embedding file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    inventory: Option<PathBuf>,
    /// Type embedding file from embed-types.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Training dataset (JSONL).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation dataset (JSONL) for coarse macro-F1 model selection.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Word-vector file.
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Target space; defaults to the embedding file's space and must
    /// match it when given.
    #[arg(long)]
    space: Option<SpaceKind>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_grad_norm: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Weight of the metric-distance term (all granularities).
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the cosine term (all granularities).
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    position_dim: Option<usize>,
    #[arg(long)]
    attention_dim: Option<usize>,
    /// Context tokens kept per side of the mention.
    #[arg(long)]
    context_window: Option<usize>,
    #[arg(long)]
    max_mention_tokens: Option<usize>,
    /// Output checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Loss/dev-F1 trace file (default: <checkpoint>.trace).
    #[arg(long)]
    loss_trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    inventory: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Test dataset (JSONL).
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Base metric report path; the coarse-augmented report lands next to
    /// it (default: <report>.augmented) and the rank histogram too
    /// (default: <report>.histogram).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    augmented_report: Option<PathBuf>,
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// Granularity whose gold ranks fill the histogram.
    #[arg(long)]
    histogram_granularity: Option<Granularity>,
    /// within | full: rank against the granularity population or the
    /// whole inventory.
    #[arg(long)]
    rank_scope: Option<RankScope>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenSynthetic(args) => cmd_gen_synthetic(args),
        Command::BuildHierarchy(args) => cmd_build_hierarchy(args),
        Command::EmbedTypes(args) => cmd_embed_types(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| anyhow::anyhow!("missing required option --{flag}"))
}

fn read_inventory(path: &Path) -> Result<TypeInventory> {
    TypeInventory::read_from(open(path)?)
        .with_context(|| format!("parsing inventory {}", path.display()))
}

fn read_instances(path: &Path, inventory: &TypeInventory) -> Result<Vec<AnnotatedInstance>> {
    read_dataset(open(path)?, inventory)
        .with_context(|| format!("parsing dataset {}", path.display()))
}

/// Loads an embedding file and cross-checks its names against the
/// inventory.
fn read_table_checked(path: &Path, inventory: &TypeInventory) -> Result<TypeEmbeddingTable> {
    let (table, names) = TypeEmbeddingTable::read_from(open(path)?)
        .with_context(|| format!("parsing embedding file {}", path.display()))?;
    if table.len() != inventory.len() {
        bail!(
            "embedding file {} holds {} types but the inventory has {}",
            path.display(),
            table.len(),
            inventory.len()
        );
    }
    for (id, name) in names.iter().enumerate() {
        let expect = inventory.name_of(id as u32)?;
        if name != expect {
            bail!("embedding file type {id} is '{name}' but the inventory says '{expect}'");
        }
    }
    Ok(table)
}

fn read_words(path: &Path) -> Result<(Vocabulary, WordEmbeddingTable)> {
    read_word_vectors(open(path)?)
        .with_context(|| format!("parsing word vectors {}", path.display()))
}

fn cmd_gen_synthetic(args: GenSyntheticArgs) -> Result<()> {
    let cfg = ConfigMap::load(args.config.as_deref())?;
    let out_dir = required(cfg.resolve_opt("out-dir", args.out_dir)?, "out-dir")?;
    let synth = SynthConfig {
        branching: cfg.resolve("branching", args.branching, 3)?,
        depth: cfg.resolve("depth", args.depth, 4)?,
        num_train: cfg.resolve("train", args.train, 2000)?,
        num_dev: cfg.resolve("dev", args.dev, 200)?,
        num_test: cfg.resolve("test", args.test, 200)?,
        noise: cfg.resolve("noise", args.noise, 0.0)?,
        word_dim: cfg.resolve("word-dim", args.word_dim, 10)?,
        seed: cfg.resolve("seed", args.seed, 0)?,
    };
    let corpus = generate(&synth).context("generating synthetic corpus")?;

    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    corpus.inventory.write_to(create(&out_dir.join("inventory.txt"))?)?;
    {
        let mut w = create(&out_dir.join("taxonomy.txt"))?;
        for (child, parent) in &corpus.taxonomy {
            writeln!(w, "{child} {parent}")?;
        }
    }
    write_word_vectors(&corpus.word_vectors, create(&out_dir.join("vectors.txt"))?)?;
    write_dataset(&corpus.train, create(&out_dir.join("train.jsonl"))?)?;
    write_dataset(&corpus.dev, create(&out_dir.join("dev.jsonl"))?)?;
    write_dataset(&corpus.test, create(&out_dir.join("test.jsonl"))?)?;

    println!(
        "generated {} types ({} train / {} dev / {} test instances) into {}",
        corpus.inventory.len(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_build_hierarchy(args: BuildHierarchyArgs) -> Result<()> {
    let cfg = ConfigMap::load(args.config.as_deref())?;
    let inventory_path = required(cfg.resolve_opt("inventory", args.inventory)?, "inventory")?;
    let method: String = required(cfg.resolve_opt("method", args.method)?, "method")?;
    let out = required(cfg.resolve_opt("out", args.out)?, "out")?;
    let merge_rule = cfg.resolve("merge-rule", args.merge_rule, MergeRule::Sum)?;
    let dataset = cfg.resolve_opt("dataset", args.dataset)?;
    let taxonomy = cfg.resolve_opt("taxonomy", args.taxonomy)?;

    let inventory = read_inventory(&inventory_path)?;

    let need_dataset = || -> Result<Vec<AnnotatedInstance>> {
        let path: PathBuf = required(dataset.clone(), "dataset")?;
        read_instances(&path, &inventory)
    };
    let need_taxonomy = || -> Result<WeightedTypeGraph> {
        let path: PathBuf = required(taxonomy.clone(), "taxonomy")?;
        let graph = load_taxonomy(open(&path)?, &inventory)
            .with_context(|| format!("parsing taxonomy {}", path.display()))?;
        if graph.num_edges() == 0 {
            eprintln!("warning: taxonomy {} has no edges", path.display());
        }
        Ok(graph)
    };

    let graph = match method.as_str() {
        "freq" => build_freq_graph(&need_dataset()?, &inventory)?,
        "pmi" => build_pmi_graph(&need_dataset()?, &inventory)?,
        "taxonomy" => need_taxonomy()?,
        "taxonomy+freq" => {
            let closed = transitive_closure(&need_taxonomy()?, EdgeOrientation::ChildToParent)?;
            let freq = build_freq_graph(&need_dataset()?, &inventory)?;
            merge_graphs_with(&closed, &freq, merge_rule)?
        }
        other => bail!("unknown method '{other}' (expected taxonomy|freq|pmi|taxonomy+freq)"),
    };

    graph.write_to(create(&out)?)?;
    println!(
        "wrote {} ({} nodes, {} edges, method {method})",
        out.display(),
        graph.num_nodes(),
        graph.num_edges()
    );
    Ok(())
}

fn cmd_embed_types(args: EmbedTypesArgs) -> Result<()> {
    let cfg = ConfigMap::load(args.config.as_deref())?;
    let inventory_path = required(cfg.resolve_opt("inventory", args.inventory)?, "inventory")?;
    let graph_path = required(cfg.resolve_opt("graph", args.graph)?, "graph")?;
    let space = required(cfg.resolve_opt("space", args.space)?, "space")?;
    let out = required(cfg.resolve_opt("out", args.out)?, "out")?;
    let defaults = GraphEmbedConfig::default();
    let embed_cfg = GraphEmbedConfig {
        dim: cfg.resolve("dim", args.dim, defaults.dim)?,
        epochs: cfg.resolve("epochs", args.epochs, defaults.epochs)?,
        learning_rate: cfg.resolve("learning-rate", args.learning_rate, defaults.learning_rate)?,
        burn_in_epochs: cfg.resolve(
            "burn-in-epochs",
            args.burn_in_epochs,
            defaults.burn_in_epochs,
        )?,
        burn_in_lr_factor: cfg.resolve(
            "burn-in-lr-factor",
            args.burn_in_lr_factor,
            defaults.burn_in_lr_factor,
        )?,
        negatives_per_edge: cfg.resolve(
            "negatives",
            args.negatives,
            defaults.negatives_per_edge,
        )?,
        init_radius: cfg.resolve("init-radius", args.init_radius, defaults.init_radius)?,
        seed: cfg.resolve("seed", args.seed, defaults.seed)?,
    };

    let inventory = read_inventory(&inventory_path)?;
    let graph = WeightedTypeGraph::read_from(open(&graph_path)?)
        .with_context(|| format!("parsing graph {}", graph_path.display()))?;

    let outcome = train_type_embeddings(&graph, &inventory, space, &embed_cfg)
        .context("training type embeddings")?;
    let map = reconstruction_map(&outcome.table, &graph)?;

    outcome.table.write_to(&inventory, create(&out)?)?;
    println!(
        "wrote {} (space {space}, dim {}); final loss {:.6}, reconstruction MAP {:.4}",
        out.display(),
        outcome.table.dim(),
        outcome.final_loss(),
        map
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = ConfigMap::load(args.config.as_deref())?;
    let inventory_path = required(cfg.resolve_opt("inventory", args.inventory)?, "inventory")?;
    let embeddings = required(cfg.resolve_opt("embeddings", args.embeddings)?, "embeddings")?;
    let train_path = required(cfg.resolve_opt("train", args.train)?, "train")?;
    let dev_path = required(cfg.resolve_opt("dev", args.dev)?, "dev")?;
    let vectors = required(cfg.resolve_opt("vectors", args.vectors)?, "vectors")?;
    let checkpoint_path = required(cfg.resolve_opt("checkpoint", args.checkpoint)?, "checkpoint")?;
    let trace_path = cfg
        .resolve_opt("loss-trace", args.loss_trace)?
        .unwrap_or_else(|| checkpoint_path.with_extension("trace"));

    let inventory = read_inventory(&inventory_path)?;
    let table = read_table_checked(&embeddings, &inventory)?;
    let space = match cfg.resolve_opt("space", args.space)? {
        Some(space) => space,
        None => table.space(),
    };
    let alpha = cfg.resolve("alpha", args.alpha, 1.0)?;
    let beta = cfg.resolve("beta", args.beta, 1.0)?;
    let weights = GranularityWeights::uniform(
        LossWeights::new(alpha, beta).context("invalid alpha/beta")?,
    );
    let train_cfg = TrainConfig {
        learning_rate: cfg.resolve("learning-rate", args.learning_rate, 0.001)?,
        batch_size: cfg.resolve("batch-size", args.batch_size, 1024)?,
        epochs: cfg.resolve("epochs", args.epochs, 50)?,
        max_grad_norm: cfg.resolve("max-grad-norm", args.max_grad_norm, 10.0)?,
        dropout: cfg.resolve("dropout", args.dropout, 0.3)?,
        weights,
        space,
        seed: cfg.resolve("seed", args.seed, 0)?,
    };
    let encoder_cfg = EncoderConfig {
        position_dim: cfg.resolve("position-dim", args.position_dim, 25)?,
        attention_dim: cfg.resolve("attention-dim", args.attention_dim, 100)?,
        context_window: cfg.resolve("context-window", args.context_window, 10)?,
        max_mention_tokens: cfg.resolve("max-mention-tokens", args.max_mention_tokens, 5)?,
    };

    let (vocab, words) = read_words(&vectors)?;
    let train_set = read_instances(&train_path, &inventory)?;
    let dev_set = read_instances(&dev_path, &inventory)?;

    let model = StackedProjector::init_seeded(
        encoder_cfg,
        words.dim(),
        table.dim(),
        PROJECTION_HIDDEN_DIM,
        train_cfg.dropout,
        train_cfg.seed,
    );
    let outcome = train(
        model, &train_set, &dev_set, &vocab, &words, &table, &inventory, &train_cfg,
    )
    .context("training projection model")?;

    save_checkpoint(
        &outcome.model,
        &CheckpointMeta::from_config(&train_cfg),
        create(&checkpoint_path)?,
    )?;
    {
        let mut w = create(&trace_path)?;
        writeln!(w, "# epoch train_loss dev_coarse_macro_f1")?;
        for (epoch, (loss, f1)) in
            outcome.loss_trace.iter().zip(&outcome.dev_f1_trace).enumerate()
        {
            writeln!(w, "{} {loss:.16e} {f1:.16e}", epoch + 1)?;
        }
    }
    println!(
        "wrote {} (best epoch {}, dev coarse macro-F1 {:.4}); trace in {}",
        checkpoint_path.display(),
        outcome.best_epoch,
        outcome.best_dev_f1,
        trace_path.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = ConfigMap::load(args.config.as_deref())?;
    let inventory_path = required(cfg.resolve_opt("inventory", args.inventory)?, "inventory")?;
    let embeddings = required(cfg.resolve_opt("embeddings", args.embeddings)?, "embeddings")?;
    let checkpoint_path = required(cfg.resolve_opt("checkpoint", args.checkpoint)?, "checkpoint")?;
    let test_path = required(cfg.resolve_opt("test", args.test)?, "test")?;
    let vectors = required(cfg.resolve_opt("vectors", args.vectors)?, "vectors")?;
    let report_path = required(cfg.resolve_opt("report", args.report)?, "report")?;
    let augmented_path = cfg
        .resolve_opt("augmented-report", args.augmented_report)?
        .unwrap_or_else(|| report_path.with_extension("augmented"));
    let histogram_path = cfg
        .resolve_opt("histogram", args.histogram)?
        .unwrap_or_else(|| report_path.with_extension("histogram"));
    let histogram_granularity =
        cfg.resolve("histogram-granularity", args.histogram_granularity, Granularity::Ultra)?;
    let rank_scope =
        cfg.resolve("rank-scope", args.rank_scope, RankScope::WithinGranularity)?;

    let inventory = read_inventory(&inventory_path)?;
    let table = read_table_checked(&embeddings, &inventory)?;
    let (vocab, words) = read_words(&vectors)?;
    let (model, meta) = load_checkpoint(open(&checkpoint_path)?)
        .with_context(|| format!("parsing checkpoint {}", checkpoint_path.display()))?;
    if meta.space != table.space() {
        bail!(
            "checkpoint was trained in {} space but the embedding file is {}",
            meta.space,
            table.space()
        );
    }
    if model.embed_dim != table.dim() {
        bail!("checkpoint embeds {} dims but the table holds {}", model.embed_dim, table.dim());
    }
    if model.encoder.word_dim != words.dim() {
        bail!(
            "checkpoint expects {}-dim word vectors but the file has {}",
            model.encoder.word_dim,
            words.dim()
        );
    }
    let test_set = read_instances(&test_path, &inventory)?;
    if test_set.is_empty() {
        bail!("test set {} is empty", test_path.display());
    }

    let mut predictions = Vec::with_capacity(test_set.len());
    for (i, instance) in test_set.iter().enumerate() {
        predictions.push(predict(i, instance, &model, &vocab, &words, &table, &inventory)?);
    }
    let base = metric_report(&predictions, &test_set, &inventory)?;

    let mut augmented = Vec::with_capacity(predictions.len());
    for prediction in &predictions {
        augmented.push(augment_with_coarse(prediction, &table, &inventory)?);
    }
    let aug = metric_report(&augmented, &test_set, &inventory)?;

    let histogram = neighbor_rank_histogram(
        &test_set,
        &model,
        &vocab,
        &words,
        &table,
        &inventory,
        histogram_granularity,
        rank_scope,
    )?;

    write_metric_report(&base, create(&report_path)?)?;
    write_metric_report(&aug, create(&augmented_path)?)?;
    write_histogram(&histogram, create(&histogram_path)?)?;

    println!(
        "base:      overall macro P {:.4} R {:.4} F1 {:.4} | ultra macro F1 {:.4} | strict {:.4}",
        base.overall_macro.precision,
        base.overall_macro.recall,
        base.overall_macro.f1,
        base.ultra.macro_.f1,
        base.strict
    );
    println!(
        "augmented: overall macro P {:.4} R {:.4} F1 {:.4} | ultra macro F1 {:.4} | strict {:.4}",
        aug.overall_macro.precision,
        aug.overall_macro.recall,
        aug.overall_macro.f1,
        aug.ultra.macro_.f1,
        aug.strict
    );
    println!(
        "wrote {}, {}, {}",
        report_path.display(),
        augmented_path.display(),
        histogram_path.display()
    );
    Ok(())
}

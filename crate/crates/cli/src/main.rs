//! `tjepa`: the trajectory representation pipeline as subcommands sharing
//! one run config.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! abort (NaN or infinity during training).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tjepa_core::cells::{random_walks, train_skipgram, CellGraph, EmbeddingTable};
use tjepa_core::eval::{
    build_query_db, emit_report, finetune_eval, ranking, robustness_eval, search_eval, Embedder, EvalReport,
    Perturbation, ReportFormat,
};
use tjepa_core::jepa::{embedding_distance, write_embeddings, ModelConfig, ModelState};
use tjepa_core::measures::{Measure, MeasureKind};
use tjepa_core::train::{file_sha256, holdout, load_checkpoint, save_checkpoint, train, EpochRecord, TrainEnv};
use tjepa_core::traj::{
    load_trajectories, preprocess, synth_generate, trajectory_to_cells, write_cell_dataset, write_trajectories,
    GridMode, GridSpec, PointMetric, TrajFormat, Trajectory,
};
use tjepa_core::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "tjepa", version, about = "Self-supervised trajectory representation learning pipeline")]
struct Cli {
    /// Worker threads for parallel stages; 1 makes every output bitwise reproducible.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter raw trajectories by length and grid containment, then write a cell-encoded dataset.
    Preprocess {
        /// Run config file.
        #[arg(long)]
        config: PathBuf,
        /// Raw trajectories (.csv or .jsonl).
        #[arg(long)]
        input: PathBuf,
        /// Dataset to write; defaults to `paths.data`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Pretrain per-cell embeddings with biased random walks and skip-gram.
    PretrainCells {
        /// Run config file.
        #[arg(long)]
        config: PathBuf,
        /// Embedding table to write; defaults to `paths.cells`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the encoder with joint-embedding prediction.
    Train {
        /// Run config file.
        #[arg(long)]
        config: PathBuf,
        /// Preprocessed dataset; defaults to `paths.data`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Checkpoint to continue from; overrides `train.warm_start`.
        #[arg(long, value_name = "CKPT")]
        warm_start: Option<PathBuf>,
        /// Checkpoint to write; defaults to `paths.checkpoint`.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Write one embedding vector per input trajectory.
    Embed {
        /// Run config file.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint; defaults to `paths.checkpoint`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Trajectories to embed (.csv or .jsonl).
        #[arg(long)]
        input: PathBuf,
        /// Embedding matrix to write; ids go to `<output>.ids`.
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Rank database trajectories for each query by embedding distance.
    Search {
        /// Run config file.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint; defaults to `paths.checkpoint`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Query trajectories (.csv or .jsonl).
        #[arg(long)]
        queries: PathBuf,
        /// Database trajectories (.csv or .jsonl).
        #[arg(long)]
        db: PathBuf,
        /// Matches kept per query.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// CSV of `query_id,rank,db_id,distance` rows.
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Run an evaluation protocol and write a report.
    Eval {
        /// Run config file.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint; defaults to `paths.checkpoint`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum)]
        protocol: Protocol,
        /// Held-out trajectories; defaults to `paths.data`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Report file; defaults to `<paths.reports>/<protocol>.<format>`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Report format; defaults to `eval.format`.
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Distance between the first trajectory of two files under a heuristic measure.
    Measure {
        #[arg(long, value_enum)]
        measure: MeasureArg,
        /// First trajectory file (.csv or .jsonl).
        #[arg(long)]
        a: PathBuf,
        /// Second trajectory file (.csv or .jsonl).
        #[arg(long)]
        b: PathBuf,
        /// Match threshold for edr and lcss; defaults to `eval.eps` from the config, else 100.
        #[arg(long)]
        eps: Option<f64>,
        /// Treat coordinates as planar units instead of degrees.
        #[arg(long)]
        planar: bool,
        /// Run config supplying the grid mode and threshold.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate synthetic random-walk trajectories over the configured grid.
    Synth {
        /// Run config file.
        #[arg(long)]
        config: PathBuf,
        /// Number of trajectories.
        #[arg(long)]
        count: usize,
        /// Shortest trajectory; defaults to `preprocess.min_len`.
        #[arg(long)]
        min_len: Option<usize>,
        /// Longest trajectory; defaults to `preprocess.max_len`.
        #[arg(long)]
        max_len: Option<usize>,
        /// Output file (.csv or .jsonl).
        #[arg(long)]
        output: PathBuf,
    },
}

/// Ablation toggles applied on top of the `model` section.
#[derive(Args, Clone, Copy)]
struct ModelFlags {
    /// Feed raw cell embeddings to the encoders, skipping neighborhood fusion.
    #[arg(long)]
    no_adjfuse: bool,
    /// Target-ratio set: low {0.05,0.15,0.25}, default from config, high {0.30,0.40,0.50}.
    #[arg(long, value_enum, default_value_t = RatioSet::Default)]
    target_ratios: RatioSet,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum RatioSet {
    Low,
    Default,
    High,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Search,
    Downsample,
    Distort,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeasureArg {
    Edr,
    Lcss,
    Hausdorff,
    Frechet,
}

impl ModelFlags {
    fn apply(self, cfg: &mut RunConfig) {
        if self.no_adjfuse {
            cfg.model.use_adjfuse = false;
        }
        match self.target_ratios {
            RatioSet::Low => cfg.model.target_ratios = ModelConfig::LOW_RATIOS.to_vec(),
            RatioSet::High => cfg.model.target_ratios = ModelConfig::HIGH_RATIOS.to_vec(),
            RatioSet::Default => {}
        }
    }

    fn label(self) -> &'static str {
        match self.target_ratios {
            RatioSet::Low => "low",
            RatioSet::Default => "default",
            RatioSet::High => "high",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Incompatible(_) => 2,
        e if e.is_numerical() => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Loads the config, applies ablation flags and echoes the result into
/// the run directory.
fn setup(path: &Path, flags: Option<ModelFlags>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(f) = flags {
        f.apply(&mut cfg);
        cfg.validate()?;
    }
    cfg.echo(&cfg.paths.run_dir)?;
    Ok(cfg)
}

fn load(path: &Path) -> Result<Vec<Trajectory>> {
    load_trajectories(path, TrajFormat::from_path(path)?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

/// Grid, graph, cell table and checkpoint needed to embed trajectories.
struct Frozen {
    grid: GridSpec,
    graph: CellGraph,
    table: EmbeddingTable,
    state: ModelState,
    sha: String,
}

impl Frozen {
    fn load(cfg: &RunConfig, ckpt: Option<PathBuf>) -> Result<Self> {
        let grid = cfg.grid()?;
        let hash = grid.hash();
        let ckpt = ckpt.unwrap_or_else(|| cfg.paths.checkpoint.clone());
        let state = load_checkpoint(&ckpt, Some(&hash), Some(&cfg.model))?;
        Ok(Frozen {
            graph: CellGraph::from_grid(&grid),
            table: EmbeddingTable::load(&cfg.paths.cells, Some(&hash))?,
            sha: file_sha256(&ckpt)?,
            grid,
            state,
        })
    }

    fn embedder(&self) -> Embedder<'_> {
        Embedder {
            grid: &self.grid,
            table: &self.table,
            graph: &self.graph,
            state: &self.state,
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Preprocess { config, input, output } => {
            let cfg = setup(&config, None)?;
            let grid = cfg.grid()?;
            let raw = load(&input)?;
            let kept = preprocess(&raw, &grid, cfg.preprocess.min_len, cfg.preprocess.max_len)?;
            let cells = kept.iter().map(|t| trajectory_to_cells(t, &grid)).collect::<Result<Vec<_>>>()?;
            let out = output.unwrap_or(cfg.paths.data);
            ensure_parent(&out)?;
            write_cell_dataset(&out, &kept, &cells)?;
            println!("kept {} dropped {}", kept.len(), raw.len() - kept.len());
        }
        Command::PretrainCells { config, output } => {
            let cfg = setup(&config, None)?;
            let grid = cfg.grid()?;
            let graph = CellGraph::from_grid(&grid);
            eprintln!(
                "walking {} cells x {} walks of length {}",
                graph.n_nodes(),
                cfg.node2vec.walks_per_node,
                cfg.node2vec.walk_len
            );
            let walks = random_walks(&graph, &cfg.node2vec)?;
            eprintln!("training skip-gram, d = {}, {} epochs", cfg.model.d, cfg.node2vec.epochs);
            let table = train_skipgram(&walks, &cfg.node2vec, cfg.model.d)?;
            let out = output.unwrap_or(cfg.paths.cells);
            ensure_parent(&out)?;
            table.save(&out, &grid.hash())?;
            println!("wrote {} cell embeddings to {}", table.n_nodes(), out.display());
        }
        Command::Train {
            config,
            input,
            warm_start,
            output,
            model,
        } => {
            let cfg = setup(&config, Some(model))?;
            let grid = cfg.grid()?;
            let hash = grid.hash();
            let data = load(&input.unwrap_or(cfg.paths.data.clone()))?;
            let cells = data.iter().map(|t| trajectory_to_cells(t, &grid)).collect::<Result<Vec<_>>>()?;
            let graph = CellGraph::from_grid(&grid);
            let table = EmbeddingTable::load(&cfg.paths.cells, Some(&hash))?;
            let state = match warm_start.or(cfg.train.warm_start.clone()) {
                Some(p) => {
                    eprintln!("warm start from {}", p.display());
                    load_checkpoint(&p, Some(&hash), Some(&cfg.model))?
                }
                None => ModelState::new(cfg.model.clone(), cfg.seed)?,
            };
            let run_dir = &cfg.paths.run_dir;
            let diagnostic = run_dir.join("diagnostic.ckpt");
            let progress = |r: &EpochRecord| {
                eprintln!(
                    "epoch {} loss {:.6} lr {:.3e} fallbacks {} ({:.1}s)",
                    r.epoch, r.loss, r.lr, r.fallbacks, r.seconds
                )
            };
            let (train_set, validation) = if cfg.train.monitor_validation {
                let n = (cells.len() / 10).max(1);
                let (kept, held) = holdout(&cells, n, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
                (kept, Some(held))
            } else {
                (cells, None)
            };
            let mut env = TrainEnv::new(&table, &graph, &hash);
            env.diagnostic_path = Some(&diagnostic);
            env.validation = validation.as_deref();
            env.on_epoch = Some(&progress);
            let outcome = train(&train_set, state, &env, &cfg.train)?;
            let out = output.unwrap_or(cfg.paths.checkpoint.clone());
            ensure_parent(&out)?;
            save_checkpoint(&out, &outcome.best, &hash)?;
            outcome.log.write_csv(&run_dir.join("train_log.csv"))?;
            println!(
                "wrote {} (best epoch {}, {} epochs run{})",
                out.display(),
                outcome.best_epoch.map_or("none".into(), |e| e.to_string()),
                outcome.log.records.len(),
                if outcome.stopped_early { ", stopped early" } else { "" }
            );
        }
        Command::Embed {
            config,
            ckpt,
            input,
            output,
            model,
        } => {
            let cfg = setup(&config, Some(model))?;
            let frozen = Frozen::load(&cfg, ckpt)?;
            let data = load(&input)?;
            let vectors = frozen.embedder().embed_all(&data)?;
            let ids: Vec<String> = data.iter().map(|t| t.id.clone()).collect();
            ensure_parent(&output)?;
            write_embeddings(&output, &ids, &vectors)?;
            println!("wrote {} embeddings to {}", vectors.len(), output.display());
        }
        Command::Search {
            config,
            ckpt,
            queries,
            db,
            k,
            output,
            model,
        } => {
            let cfg = setup(&config, Some(model))?;
            let frozen = Frozen::load(&cfg, ckpt)?;
            let (queries, db) = (load(&queries)?, load(&db)?);
            if k == 0 || k > db.len() {
                return Err(Error::InvalidArgument(format!("k = {k} with {} database trajectories", db.len())));
            }
            let e = frozen.embedder();
            let (q_embs, d_embs) = (e.embed_all(&queries)?, e.embed_all(&db)?);
            ensure_parent(&output)?;
            let mut w = csv::Writer::from_path(&output).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let csv_err = |e: csv::Error| Error::InvalidArgument(format!("{}: {e}", output.display()));
            w.write_record(["query_id", "rank", "db_id", "distance"]).map_err(csv_err)?;
            for (q, qe) in queries.iter().zip(&q_embs) {
                let dist = d_embs
                    .iter()
                    .map(|de| embedding_distance(qe, de, cfg.eval.distance))
                    .collect::<Result<Vec<f64>>>()?;
                for (rank, &j) in ranking(&dist, None).iter().take(k).enumerate() {
                    w.write_record([&q.id, &(rank + 1).to_string(), &db[j].id, &format!("{:?}", dist[j])])
                        .map_err(csv_err)?;
                }
            }
            w.flush().map_err(|e| Error::io(&output, e))?;
            println!("wrote top-{k} matches for {} queries to {}", queries.len(), output.display());
        }
        Command::Eval {
            config,
            ckpt,
            protocol,
            input,
            output,
            format,
            model,
        } => {
            let cfg = setup(&config, Some(model))?;
            let frozen = Frozen::load(&cfg, ckpt)?;
            let data = load(&input.unwrap_or(cfg.paths.data.clone()))?;
            let e = cfg.eval.clone();
            let embedder = frozen.embedder();
            let qdb = || build_query_db(&data, e.n_queries, e.db_size, cfg.seed);
            let (name, mut reports) = match protocol {
                Protocol::Search => ("search", search_eval(&embedder, &qdb()?, &e.db_fractions, e.distance, cfg.seed)?),
                Protocol::Downsample | Protocol::Distort => {
                    let kind = match protocol {
                        Protocol::Downsample => Perturbation::Downsample,
                        _ => Perturbation::Distort,
                    };
                    let reports = robustness_eval(
                        &embedder,
                        &qdb()?,
                        kind,
                        &e.levels,
                        cfg.distort_magnitude(),
                        e.distance,
                        cfg.seed,
                    )?;
                    (kind.name(), reports)
                }
                Protocol::Finetune => {
                    let subset = finetune_subset(&data, e.finetune_size, cfg.seed)?;
                    let measure = Measure::new(e.measure, e.eps, frozen.grid.metric())?;
                    let fe = finetune_eval(&embedder, &subset, &measure, e.finetune_train_fraction, &e.finetune)?;
                    ("finetune", vec![fe.before, fe.after])
                }
            };
            for r in &mut reports {
                r.checkpoint_sha = frozen.sha.clone();
                r.setting("adjfuse", cfg.model.use_adjfuse).setting("target_ratios", model.label());
            }
            let format = match format {
                Some(FormatArg::Json) => ReportFormat::Json,
                Some(FormatArg::Csv) => ReportFormat::Csv,
                None => e.format,
            };
            let ext = match format {
                ReportFormat::Json => "json",
                ReportFormat::Csv => "csv",
            };
            let out = output.unwrap_or_else(|| cfg.paths.reports.join(format!("{name}.{ext}")));
            ensure_parent(&out)?;
            emit_report(&reports, &out, format)?;
            for r in &reports {
                println!("{}", summary(r));
            }
        }
        Command::Measure {
            measure,
            a,
            b,
            eps,
            planar,
            config,
        } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let metric = match (planar, &cfg) {
                (true, _) => PointMetric::Euclidean,
                (false, Some(c)) if c.grid.mode == GridMode::Planar => PointMetric::Euclidean,
                _ => PointMetric::Haversine,
            };
            let eps = eps.or(cfg.map(|c| c.eval.eps)).unwrap_or(100.0);
            let kind = match measure {
                MeasureArg::Edr => MeasureKind::Edr,
                MeasureArg::Lcss => MeasureKind::Lcss,
                MeasureArg::Hausdorff => MeasureKind::Hausdorff,
                MeasureArg::Frechet => MeasureKind::DiscreteFrechet,
            };
            let first = |p: &Path| -> Result<Trajectory> {
                load(p)?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::InvalidArgument(format!("{} holds no trajectory", p.display())))
            };
            let d = Measure::new(kind, eps, metric)?.distance(&first(&a)?.points, &first(&b)?.points)?;
            println!("{d}");
        }
        Command::Synth {
            config,
            count,
            min_len,
            max_len,
            output,
        } => {
            let cfg = setup(&config, None)?;
            let grid = cfg.grid()?;
            let lens = (
                min_len.unwrap_or(cfg.preprocess.min_len),
                max_len.unwrap_or(cfg.preprocess.max_len),
            );
            let data = synth_generate(count, &grid, lens, cfg.seed)?;
            ensure_parent(&output)?;
            write_trajectories(&output, &data, TrajFormat::from_path(&output)?)?;
            println!("wrote {count} trajectories to {}", output.display());
        }
    }
    Ok(())
}

/// Seeded sample of `n` trajectories, or all of them when fewer exist.
fn finetune_subset(data: &[Trajectory], n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    use rand::seq::SliceRandom;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no trajectories to fine-tune on".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| data[i].clone()).collect())
}

fn summary(r: &EvalReport) -> String {
    let settings: Vec<String> = r.settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let metrics: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    format!("{} [{}] {}", r.protocol, settings.join(" "), metrics.join(" "))
}

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Deserialize;

use progq::harness::{self, GRADCHECK_FLOOR};
use progq::index::{encode_database, EncodedDatabase};
use progq::io::{make_synthetic, DatasetBundle, SyntheticSpec};
use progq::metrics::{
    mean_average_precision, precision_at, precision_recall_curve, recall_at, write_pr_curves, write_report,
    LabelRelevance, ReportRow,
};
use progq::search::search_batch;
use progq::supervised::{ClassifierTap, LabelMode};
use progq::trainer::{train, Hyperparameters, OptimizerKind, TrainingSet};
use progq::ProgressiveModel;

/// Progressive residual quantization: train, encode, search and evaluate.
#[derive(Parser, Debug)]
#[command(name = "progq", version)]
struct Cli {
    /// Worker threads for encoding and search (1 = fully sequential).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Random seed; falls back to the config file, then PROGQ_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on the train split of a dataset directory.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output model file.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        hyper: HyperFlags,
    },
    /// Encode the database split with a trained model.
    Encode {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output code file.
        #[arg(long)]
        codes: Option<PathBuf>,
    },
    /// Rank the database for every query row.
    Search {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        codes: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Codebooks used per code; defaults to all of them.
        #[arg(long)]
        layers: Option<usize>,
        /// Write rankings here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score retrieval at every code length and write a metrics CSV.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        codes: Option<PathBuf>,
        /// Metrics CSV with columns metric,code_bits,value.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Optional precision-recall points CSV.
        #[arg(long)]
        pr_curve: Option<PathBuf>,
        /// mAP cutoff; defaults to the database size.
        #[arg(long)]
        r: Option<usize>,
        /// Precision@R cutoffs.
        #[arg(long, value_delimiter = ',')]
        precision_at: Option<Vec<usize>>,
        /// Neighbours for recall against exact search.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients on tiny models.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        /// Largest tolerated relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Distortion and query throughput against residual and product quantization.
    Bench {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        hyper: HyperFlags,
    },
    /// Write a Gaussian-mixture dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        clusters: usize,
        #[arg(long, default_value_t = 200)]
        points_per_cluster: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
}

#[derive(Args, Debug, Default)]
struct HyperFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    /// Ignore labels and train codebooks only.
    #[arg(long)]
    unsupervised: bool,
    #[arg(long, value_parser = parse_label_mode)]
    label_mode: Option<LabelMode>,
    #[arg(long, value_parser = parse_tap)]
    classifier_tap: Option<ClassifierTap>,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(format!("unknown optimizer {s:?} (adam, sgd)")),
    }
}

fn parse_label_mode(s: &str) -> Result<LabelMode, String> {
    match s {
        "single" => Ok(LabelMode::Single),
        "multi" => Ok(LabelMode::Multi),
        _ => Err(format!("unknown label mode {s:?} (single, multi)")),
    }
}

fn parse_tap(s: &str) -> Result<ClassifierTap, String> {
    match s {
        "semantic" => Ok(ClassifierTap::Semantic),
        "features" => Ok(ClassifierTap::Features),
        _ => Err(format!("unknown classifier tap {s:?} (semantic, features)")),
    }
}

impl HyperFlags {
    fn apply(&self, h: &mut Hyperparameters) {
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag.clone() { h.$field = v; })*
            };
        }
        set!(epochs => epochs, batch => batch_size, lr => eta, layers => layers,
             codebook_size => codebook_size, embed_dim => embed_dim, gamma => gamma,
             lambda => lambda, tau => tau, mu => mu, nu => nu, optimizer => optimizer,
             label_mode => label_mode, classifier_tap => classifier_tap);
        if self.unsupervised {
            h.supervised = false;
        }
    }
}

/// Settings that may come from the `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    hyper: Hyperparameters,
    seed: Option<u64>,
    data: Option<PathBuf>,
    model: Option<PathBuf>,
    codes: Option<PathBuf>,
    report: Option<PathBuf>,
    pr_curve: Option<PathBuf>,
    out: Option<PathBuf>,
    k: Option<usize>,
    r: Option<usize>,
    layers: Option<usize>,
    precision_at: Option<Vec<usize>>,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

fn need(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match flag.or_else(|| file.clone()) {
        Some(p) => Ok(p),
        None => bail!("--{name} is required (flag or config file)"),
    }
}

fn resolve_seed(flag: Option<u64>, cfg: &RunConfig) -> Result<Option<u64>> {
    if let Some(s) = flag.or(cfg.seed) {
        return Ok(Some(s));
    }
    match std::env::var("PROGQ_SEED") {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .with_context(|| format!("PROGQ_SEED={v:?} is not a seed"))?,
        )),
        Err(_) => Ok(None),
    }
}

fn load_data(path: &Path) -> Result<DatasetBundle> {
    DatasetBundle::load_dir(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<ProgressiveModel> {
    ProgressiveModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_codes(path: &Path, model: &ProgressiveModel) -> Result<EncodedDatabase> {
    let db = EncodedDatabase::load(path).with_context(|| format!("loading codes {}", path.display()))?;
    db.verify_model(model)?;
    Ok(db)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = resolve_seed(cli.seed, &cfg)?;
    let hyper_with = |flags: &HyperFlags| -> Result<Hyperparameters> {
        let mut h = cfg.hyper.clone();
        flags.apply(&mut h);
        if let Some(s) = seed {
            h.seed = s;
        }
        h.validate()?;
        Ok(h)
    };

    match cli.command {
        Command::Train { data, model, hyper } => {
            let ds = load_data(&need(data, &cfg.data, "data")?)?;
            let out = need(model, &cfg.model, "model")?;
            let hyper = hyper_with(&hyper)?;
            let x = ds.features.select(&ds.split.train);
            let labels = ds.labels_of(&ds.split.train);
            let set = TrainingSet {
                features: &x,
                labels: labels.as_deref(),
                label_embeddings: ds.label_embeddings.as_ref(),
            };
            info!("training on {} rows of dimension {}", x.rows(), x.cols());
            let m = train(&set, &hyper)?;
            m.save(&out)
                .with_context(|| format!("writing model {}", out.display()))?;
            let h = &m.history;
            println!(
                "trained {} layers x {} codewords; final loss {:.6}, hard distortion {:.6}",
                m.layers(),
                m.codebook_size(),
                h.total.last().copied().unwrap_or(f64::NAN),
                h.hard_distortion.last().copied().unwrap_or(f64::NAN),
            );
        }
        Command::Encode { data, model, codes } => {
            let ds = load_data(&need(data, &cfg.data, "data")?)?;
            let m = load_model(&need(model, &cfg.model, "model")?)?;
            let out = need(codes, &cfg.codes, "codes")?;
            let rows = ds.features.select(&ds.split.database);
            let progress = |done: usize, total: usize| info!("encoded {done}/{total}");
            let db = encode_database(&rows, &m, Some(&progress))?;
            db.save(&out)
                .with_context(|| format!("writing codes {}", out.display()))?;
            println!("encoded {} points at {} bits", db.len(), db.layers() as u32 * db.bits());
        }
        Command::Search {
            data,
            model,
            codes,
            k,
            layers,
            out,
        } => {
            let ds = load_data(&need(data, &cfg.data, "data")?)?;
            let m = load_model(&need(model, &cfg.model, "model")?)?;
            let db = load_codes(&need(codes, &cfg.codes, "codes")?, &m)?;
            let k = k.or(cfg.k).unwrap_or(10);
            let l = layers.or(cfg.layers).unwrap_or(m.layers());
            let queries = ds.features.select(&ds.split.query);
            let results = search_batch(&queries, &db, &m, k, l)?;
            let sink: Box<dyn Write> = match out.or(cfg.out.clone()) {
                Some(p) => Box::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?),
                None => Box::new(std::io::stdout().lock()),
            };
            let mut w = BufWriter::new(sink);
            for (qi, r) in ds.split.query.iter().zip(&results) {
                let hits: Vec<String> = r
                    .ids
                    .iter()
                    .zip(&r.distances)
                    .map(|(&id, d)| format!("{}:{d:.6}", ds.split.database[id]))
                    .collect();
                writeln!(w, "{qi}\t{}", hits.join(" "))?;
            }
            w.flush()?;
        }
        Command::Eval {
            data,
            model,
            codes,
            report,
            pr_curve,
            r,
            precision_at: cutoffs,
            k,
        } => {
            let ds = load_data(&need(data, &cfg.data, "data")?)?;
            let m = load_model(&need(model, &cfg.model, "model")?)?;
            let db = load_codes(&need(codes, &cfg.codes, "codes")?, &m)?;
            let report = need(report, &cfg.report, "report")?;
            let pr_path = pr_curve.or(cfg.pr_curve.clone());
            let n = db.len();
            let r = r.or(cfg.r).unwrap_or(n);
            let cutoffs = cutoffs
                .or(cfg.precision_at.clone())
                .unwrap_or_else(|| vec![100, 500, 1000]);
            let k = k.or(cfg.k).unwrap_or(10);
            evaluate(&ds, &m, &db, &report, pr_path.as_deref(), r, &cutoffs, k)?;
            println!("wrote {}", report.display());
        }
        Command::Gradcheck { cases, tolerance } => {
            let start = seed.unwrap_or(0);
            let rep = harness::gradcheck_suite(start, cases)?;
            println!(
                "gradcheck: {} cases from seed {start}, max relative error {:.3e} (floor {GRADCHECK_FLOOR:e}), {:.2}s",
                rep.cases.len(),
                rep.max_error,
                rep.seconds
            );
            if rep.max_error.is_nan() || rep.max_error >= tolerance {
                let worst = rep.cases.iter().max_by(|a, b| a.1.total_cmp(&b.1)).map(|c| c.0);
                bail!(
                    "max relative error {:.3e} ≥ {tolerance:e} (worst seed {worst:?})",
                    rep.max_error
                );
            }
        }
        Command::Bench { data, k, hyper } => {
            let ds = load_data(&need(data, &cfg.data, "data")?)?;
            let hyper = hyper_with(&hyper)?;
            let k = k.or(cfg.k).unwrap_or(10);
            println!(
                "{:<12} {:>5} {:>12} {:>12}",
                "method", "bits", "distortion", "queries/s"
            );
            for row in harness::bench_compare(&ds, &hyper, k)? {
                println!(
                    "{:<12} {:>5} {:>12.6} {:>12.1}",
                    row.method, row.code_bits, row.distortion, row.queries_per_sec
                );
            }
        }
        Command::Synth {
            out,
            clusters,
            points_per_cluster,
            dim,
            noise,
        } => {
            let spec = SyntheticSpec {
                clusters,
                points_per_cluster,
                dim,
                noise,
                seed: seed.unwrap_or(0),
            };
            let ds = make_synthetic(&spec)?;
            ds.save_dir(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} points to {}", ds.features.rows(), out.display());
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    ds: &DatasetBundle,
    m: &ProgressiveModel,
    db: &EncodedDatabase,
    report: &Path,
    pr_path: Option<&Path>,
    r: usize,
    cutoffs: &[usize],
    k: usize,
) -> Result<()> {
    if db.len() != ds.split.database.len() {
        bail!(
            "code file holds {} points but the database split has {}",
            db.len(),
            ds.split.database.len()
        );
    }
    let queries = ds.features.select(&ds.split.query);
    let database = ds.features.select(&ds.split.database);
    let truth = harness::exact_knn(
        &harness::embed_rows(m, &database)?,
        &harness::embed_rows(m, &queries)?,
        k,
    );
    let q_labels = ds.labels_of(&ds.split.query);
    let d_labels = ds.labels_of(&ds.split.database);
    let rel = match (&q_labels, &d_labels) {
        (Some(q), Some(d)) => Some(LabelRelevance::new(q, d)),
        _ => None,
    };
    let depth = r.max(cutoffs.iter().copied().max().unwrap_or(0)).max(k).min(db.len());
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for l in 1..=m.layers() {
        let bits = l as u32 * m.bits();
        let results = search_batch(&queries, db, m, depth, l)?;
        let mut row = |metric: String, value: f64| {
            rows.push(ReportRow {
                metric,
                code_bits: bits,
                value,
            })
        };
        if let Some(rel) = &rel {
            row(format!("map@{r}"), mean_average_precision(&results, rel, r)?);
            for (c, p) in cutoffs.iter().zip(precision_at(&results, rel, cutoffs)) {
                row(format!("precision@{c}"), p);
            }
            if pr_path.is_some() {
                curves.push((bits, precision_recall_curve(&results, rel)));
            }
        }
        row(format!("recall@{k}"), recall_at(&results, &truth, k));
    }
    if let Some(p) = pr_path {
        let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
        write_pr_curves(&mut w, &curves)?;
        w.flush()?;
    }
    let mut w = BufWriter::new(File::create(report).with_context(|| format!("creating {}", report.display()))?);
    write_report(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

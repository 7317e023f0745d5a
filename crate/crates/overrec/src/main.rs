//! Command-line pipeline: preprocess raw logs, compute Gram matrices,
//! evaluate rankings, and run the Monte-Carlo verification suites.
//!
//! Configuration comes from flags, optionally backed by a `key = value`
//! config file (`--config`); explicit flags win. Exit codes: 0 ok,
//! 2 input error, 3 capacity, 4 consistency, 5 verification failure.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};
use rayon::prelude::*;

use overrec::dataset::{
    build_split, five_core_filter, load_split, parse_events, save_split, DatasetError,
    EventFormat, FiveCoreMode, SplitDataset, DEFAULT_MAX_LEN,
};
use overrec::evaluation::{metrics, rank_of_target, EvalError, EvalReport};
use overrec::gram::{
    check_digest, compute_gram, load_gram, save_gram, GramError, GramMatrix, GramMode,
    DEFAULT_CELL_BUDGET,
};
use overrec::knn::{predict_equal_item, predict_weighted_y, top_k_neighbors_where, ScoreMap};
use overrec::oracle::verify::{self, CheckOutcome, VerifyConfig};
use overrec::oracle::OracleError;
use overrec::rntk::{rntk, rntk_with_shared_padding, FinalScale, ItemSequence, KernelHyperParams, RntkError};

const EXIT_INPUT: i32 = 2;
const EXIT_CAPACITY: i32 = 3;
const EXIT_CONSISTENCY: i32 = 4;
const EXIT_VERIFICATION: i32 = 5;

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }

    fn consistency(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONSISTENCY, message: message.into() }
    }

    fn verification(message: impl Into<String>) -> Self {
        Self { code: EXIT_VERIFICATION, message: message.into() }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<GramError> for CliError {
    fn from(e: GramError) -> Self {
        let code = match &e {
            GramError::Capacity { .. } => EXIT_CAPACITY,
            GramError::DigestMismatch { .. } => EXIT_CONSISTENCY,
            _ => EXIT_INPUT,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<RntkError> for CliError {
    fn from(e: RntkError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        CliError::input(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "overrec", version, about = "Training-free sequential recommendation with infinite-width recurrent-network kernels")]
struct Cli {
    /// Optional `key = value` config file; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores). Outputs do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw interaction log and write the leave-one-out split.
    Preprocess(PreprocessArgs),
    /// Compute a query x corpus Gram matrix from a split.
    Gram(GramArgs),
    /// Rank targets from a Gram matrix and report MRR/NDCG.
    Evaluate(EvaluateArgs),
    /// Run the Monte-Carlo verification suite against the analytic kernels.
    Verify(VerifyArgs),
    /// Run the fast self-contained property suite.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input log file.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output directory for corpus.tsv, queries.tsv and manifest.tsv.
    #[arg(long = "out")]
    output: Option<PathBuf>,
    /// Input format: amazon-csv | movielens-dat.
    #[arg(long)]
    format: Option<String>,
    /// Maximum sequence length (most recent items kept).
    #[arg(long)]
    max_len: Option<usize>,
    /// Occurrence filter: fixedpoint | singlepass.
    #[arg(long)]
    five_core: Option<String>,
}

#[derive(Args)]
struct KernelFlags {
    /// Similarity: rntk | nngp | sknn.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    sigma_w: Option<f64>,
    #[arg(long)]
    sigma_u: Option<f64>,
    #[arg(long)]
    sigma_b: Option<f64>,
    #[arg(long)]
    sigma_v: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Args)]
struct GramArgs {
    /// Split directory produced by `preprocess`.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Output Gram file.
    #[arg(long = "out")]
    output: Option<PathBuf>,
    #[command(flatten)]
    kernel: KernelFlags,
    /// Ceiling on n_query * n_corpus.
    #[arg(long)]
    cell_budget: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Split directory produced by `preprocess`.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Gram file produced by `gram`.
    #[arg(long)]
    gram: Option<PathBuf>,
    #[command(flatten)]
    kernel: KernelFlags,
    /// Neighbour count; defaults to each metric cutoff.
    #[arg(long)]
    k: Option<usize>,
    /// Prediction rule: weighted-y | equal-item.
    #[arg(long)]
    prediction: Option<String>,
    /// Comma-separated metric cutoffs.
    #[arg(long)]
    cutoffs: Option<String>,
    /// Drop the query user's own corpus entry from the neighbour search.
    #[arg(long, action = ArgAction::SetTrue)]
    exclude_self_user: bool,
    /// Whether equal-item prediction also credits the neighbour's target.
    #[arg(long, num_args = 1)]
    include_target_in_equal_item: Option<bool>,
    /// Report output file (key-value lines).
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Network width of the Monte-Carlo estimates.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// Number of random pool sequences.
    #[arg(long)]
    pool_size: Option<usize>,
    /// One-hot vocabulary of the pool.
    #[arg(long)]
    vocab: Option<usize>,
    /// Maximum pool sequence length.
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// Comma-separated widths for the convergence sweep.
    #[arg(long)]
    widths: Option<String>,
    /// Write the per-pair analytic/mean/std_error comparison table here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long)]
    seed: Option<u64>,
}

/// `key = value` file backing the flags.
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CliError::input(format!(
                        "{}: line {}: expected 'key = value'",
                        path.display(),
                        i + 1
                    ))
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| CliError::input(format!("config key '{key}': {e}"))),
        }
    }
}

fn merged<T: FromStr>(
    flag: Option<T>,
    cfg: &FileConfig,
    key: &str,
    default: T,
) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    Ok(flag.or(cfg.get(key)?).unwrap_or(default))
}

fn merged_opt<T: FromStr>(flag: Option<T>, cfg: &FileConfig, key: &str) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    Ok(flag.or(cfg.get(key)?))
}

fn merged_required<T: FromStr>(
    flag: Option<T>,
    cfg: &FileConfig,
    key: &str,
) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    merged_opt(flag, cfg, key)?
        .ok_or_else(|| CliError::input(format!("missing required option --{key}")))
}

fn parse_list<T: FromStr>(raw: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<T>()
                .map_err(|e| CliError::input(format!("bad {what} entry '{tok}': {e}")))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Eq, PartialEq)]
enum Prediction {
    WeightedY,
    EqualItem,
}

impl FromStr for Prediction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weighted-y" => Ok(Prediction::WeightedY),
            "equal-item" => Ok(Prediction::EqualItem),
            other => Err(format!(
                "unknown prediction '{other}' (expected weighted-y|equal-item)"
            )),
        }
    }
}

fn kernel_config(
    flags: &KernelFlags,
    cfg: &FileConfig,
) -> Result<(KernelHyperParams, GramMode), CliError> {
    let mode: String = merged(flags.mode.clone(), cfg, "mode", "rntk".to_string())?;
    let mode = GramMode::from_str(&mode).map_err(CliError::input)?;
    let params = KernelHyperParams {
        sigma_w: merged(flags.sigma_w, cfg, "sigma-w", 1.0)?,
        sigma_u: merged(flags.sigma_u, cfg, "sigma-u", 1.0)?,
        sigma_b: merged(flags.sigma_b, cfg, "sigma-b", 0.0)?,
        sigma_v: merged(flags.sigma_v, cfg, "sigma-v", 1.0)?,
        layers: merged(flags.layers, cfg, "layers", 1)?,
    };
    if matches!(mode, GramMode::Rntk | GramMode::Nngp) {
        params.validate_strict()?;
        if params.sigma_b != 0.0 {
            return Err(CliError::input(format!(
                "mode {mode} requires sigma_b = 0 (padding is active); got {}",
                params.sigma_b
            )));
        }
    }
    Ok((params, mode))
}

fn main() {
    let cli = Cli::parse();
    let threads = cli.threads;
    let result = match threads {
        Some(t) if t > 0 => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| run(cli)),
            Err(e) => Err(CliError::input(format!("cannot build thread pool: {e}"))),
        },
        _ => run(cli),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Preprocess(args) => cmd_preprocess(args, &cfg),
        Command::Gram(args) => cmd_gram(args, &cfg),
        Command::Evaluate(args) => cmd_evaluate(args, &cfg),
        Command::Verify(args) => cmd_verify(args, &cfg),
        Command::Selftest(args) => cmd_selftest(args, &cfg),
    }
}

fn cmd_preprocess(args: PreprocessArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let input: PathBuf = merged_required(args.input, cfg, "in")?;
    let output: PathBuf = merged_required(args.output, cfg, "out")?;
    let format: String = merged_required(args.format, cfg, "format")?;
    let format = EventFormat::from_str(&format).map_err(CliError::input)?;
    let max_len: usize = merged(args.max_len, cfg, "max-len", DEFAULT_MAX_LEN)?;
    let five_core: String = merged(args.five_core, cfg, "five-core", "fixedpoint".to_string())?;
    let five_core = FiveCoreMode::from_str(&five_core).map_err(CliError::input)?;

    let file = File::open(&input)
        .map_err(|e| CliError::input(format!("cannot open {}: {e}", input.display())))?;
    let events = parse_events(BufReader::new(file), format)?;
    let raw_count = events.len();
    let filtered = five_core_filter(events, five_core)?;
    let split = build_split(&filtered, max_len)?;
    save_split(&split, &output)?;

    println!("events\t{raw_count}");
    println!("users\t{}", split.user_count);
    println!("items\t{}", split.item_count);
    println!("actions\t{}", split.action_count);
    println!("queries\t{}", split.queries.len());
    println!("corpus\t{}", split.corpus.len());
    Ok(())
}

fn cmd_gram(args: GramArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let split_dir: PathBuf = merged_required(args.split, cfg, "split")?;
    let output: PathBuf = merged_required(args.output, cfg, "out")?;
    let (params, mode) = kernel_config(&args.kernel, cfg)?;
    let cell_budget: u64 = merged(args.cell_budget, cfg, "cell-budget", DEFAULT_CELL_BUDGET)?;

    let split = load_split(&split_dir)?;
    let queries: Vec<ItemSequence> = split.queries.iter().map(|(q, _)| q.clone()).collect();
    let corpus: Vec<ItemSequence> =
        split.corpus.iter().map(|e| e.sequence.clone()).collect();

    let start = Instant::now();
    let gram = compute_gram(&queries, &corpus, &params, mode, cell_budget)?;
    let secs = start.elapsed().as_secs_f64();
    let pairs = gram.n_query as f64 * gram.n_corpus as f64;
    eprintln!(
        "computed {} x {} {mode} gram in {secs:.2}s ({:.0} pairs/second)",
        gram.n_query,
        gram.n_corpus,
        pairs / secs.max(1e-9)
    );
    save_gram(&gram, &output)?;
    Ok(())
}

struct EvalSetup {
    split: SplitDataset,
    gram: GramMatrix,
    prediction: Prediction,
    include_target: bool,
    exclude_self_user: bool,
}

fn scores_for_query(setup: &EvalSetup, qi: usize, k: usize) -> ScoreMap {
    let row = setup.gram.row(qi);
    let user = &setup.split.queries[qi].0.user;
    let neighbors = top_k_neighbors_where(row, k, |j| {
        !setup.exclude_self_user || setup.split.corpus[j].sequence.user != *user
    });
    match setup.prediction {
        Prediction::WeightedY => predict_weighted_y(&neighbors, &setup.split.corpus),
        Prediction::EqualItem => {
            predict_equal_item(&neighbors, &setup.split.corpus, setup.include_target)
        }
    }
}

fn cmd_evaluate(args: EvaluateArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let split_dir: PathBuf = merged_required(args.split, cfg, "split")?;
    let gram_path: PathBuf = merged_required(args.gram, cfg, "gram")?;
    let (params, mode) = kernel_config(&args.kernel, cfg)?;
    let k: Option<usize> = merged_opt(args.k, cfg, "k")?;
    let prediction_raw: String =
        merged(args.prediction, cfg, "prediction", "weighted-y".to_string())?;
    let prediction = Prediction::from_str(&prediction_raw).map_err(CliError::input)?;
    let cutoffs_raw: String = merged(args.cutoffs, cfg, "cutoffs", "5,10".to_string())?;
    let cutoffs: Vec<usize> = parse_list(&cutoffs_raw, "cutoff")?;
    let exclude_self_user =
        args.exclude_self_user || merged(None, cfg, "exclude-self-user", false)?;
    let include_target: bool =
        merged(args.include_target_in_equal_item, cfg, "include-target-in-equal-item", true)?;
    let report_path = args.output;

    let split = load_split(&split_dir)?;
    let gram = load_gram(&gram_path)?;
    check_digest(&gram, &params, mode)?;

    let query_users: Vec<&String> = split.queries.iter().map(|(q, _)| &q.user).collect();
    let corpus_users: Vec<&String> = split.corpus.iter().map(|e| &e.sequence.user).collect();
    if gram.query_ids.iter().collect::<Vec<_>>() != query_users
        || gram.corpus_ids.iter().collect::<Vec<_>>() != corpus_users
    {
        return Err(CliError::consistency(
            "gram query/corpus ids do not match the split".to_string(),
        ));
    }

    let setup = EvalSetup {
        split,
        gram,
        prediction,
        include_target,
        exclude_self_user,
    };

    let report = match k {
        Some(fixed_k) => {
            let ranks: Vec<usize> = (0..setup.split.queries.len())
                .into_par_iter()
                .map(|qi| {
                    let scores = scores_for_query(&setup, qi, fixed_k);
                    rank_of_target(&scores, setup.split.queries[qi].1, setup.split.item_count)
                })
                .collect();
            metrics(&ranks, &cutoffs)?
        }
        None => {
            // Paper convention: the neighbour count follows the metric
            // cutoff, so each cutoff gets its own rank pass.
            let mut mrr_at = std::collections::BTreeMap::new();
            let mut ndcg_at = std::collections::BTreeMap::new();
            let mut n_queries = 0;
            for &c in &cutoffs {
                let ranks: Vec<usize> = (0..setup.split.queries.len())
                    .into_par_iter()
                    .map(|qi| {
                        let scores = scores_for_query(&setup, qi, c);
                        rank_of_target(&scores, setup.split.queries[qi].1, setup.split.item_count)
                    })
                    .collect();
                let r = metrics(&ranks, &[c])?;
                mrr_at.extend(r.mrr_at);
                ndcg_at.extend(r.ndcg_at);
                n_queries = r.n_queries;
            }
            EvalReport { mrr_at, ndcg_at, n_queries }
        }
    };

    let mut kv = String::new();
    kv.push_str(&format!("mode\t{mode}\n"));
    kv.push_str(&format!(
        "prediction\t{}\n",
        match prediction {
            Prediction::WeightedY => "weighted-y",
            Prediction::EqualItem => "equal-item",
        }
    ));
    kv.push_str(&match k {
        Some(fixed) => format!("k\t{fixed}\n"),
        None => "k\tmetric-cutoff\n".to_string(),
    });
    kv.push_str("tie_break\tsmaller-id-first\n");
    kv.push_str(&format!("exclude_self_user\t{exclude_self_user}\n"));
    kv.push_str(&format!("item_count\t{}\n", setup.split.item_count));
    kv.push_str(&report.render_kv());

    print!("{}", report.render_table());
    if let Some(path) = report_path {
        std::fs::write(&path, kv)
            .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let defaults = VerifyConfig::default();
    let widths = match merged_opt(args.widths, cfg, "widths")? {
        Some(raw) => parse_list(&raw, "width")?,
        None => defaults.widths.clone(),
    };
    if widths.is_empty() || widths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::input("--widths must be strictly ascending"));
    }
    let vcfg = VerifyConfig {
        width: merged(args.width, cfg, "width", defaults.width)?,
        trials: merged(args.trials, cfg, "trials", defaults.trials)?,
        seed: merged(args.seed, cfg, "seed", defaults.seed)?,
        pool_size: merged(args.pool_size, cfg, "pool-size", defaults.pool_size)?,
        vocab: merged(args.vocab, cfg, "vocab", defaults.vocab)?,
        max_seq_len: merged(args.max_seq_len, cfg, "max-seq-len", defaults.max_seq_len)?,
        widths,
    };

    let mut checks = vec![
        verify::closed_form_operators(20, 1_000_000, vcfg.seed),
        verify::gradient_finite_difference(vcfg.seed, 20)?,
    ];
    let (equivalence, rows) = verify::oracle_equivalence_detailed(&vcfg)?;
    checks.push(equivalence);
    checks.push(verify::convergence_trend(&vcfg)?);
    checks.push(verify::tied_untied_equivalence(&vcfg)?);
    checks.push(verify::final_scale_adjudication(&vcfg)?);
    checks.push(verify::tied_untied_single_layer_informational(&vcfg)?);
    let report = verify::VerifyReport { checks };
    print!("{}", report.render());
    if let Some(path) = args.report {
        std::fs::write(&path, verify::render_equivalence_rows(&rows))
            .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::verification("one or more verification checks failed"))
    }
}

fn cmd_selftest(args: SelftestArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let seed: u64 = merged(args.seed, cfg, "seed", 7)?;
    let checks = selftest_checks(seed)?;
    let mut all_ok = true;
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag} {} — {}", c.name, c.detail);
        all_ok &= c.passed;
    }
    if all_ok {
        Ok(())
    } else {
        Err(CliError::verification("selftest failed"))
    }
}

fn selftest_checks(seed: u64) -> Result<Vec<CheckOutcome>, CliError> {
    use overrec::kernel_math::{v_relu, v_relu_prime, CovBlock};
    use rand::{Rng, SeedableRng};

    let mut checks = Vec::new();
    let outcome = |name: &str, passed: bool, detail: String| CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
    };

    // Closed-form operator spot values.
    {
        let b = |k1, k2, k3| CovBlock::new(k1, k2, k3).unwrap();
        let pad = CovBlock::with_padding(1.0, 1.0, 1.0, true, false).unwrap();
        let pi = std::f64::consts::PI;
        let ok = (v_relu(&b(1.0, 1.0, 1.0)) - 0.5).abs() < 1e-12
            && (v_relu(&b(1.0, 1.0, 0.0)) - 1.0 / (2.0 * pi)).abs() < 1e-12
            && v_relu(&b(1.0, 1.0, -1.0)) == 0.0
            && (v_relu_prime(&b(1.0, 1.0, 1.0)) - 0.5).abs() < 1e-12
            && (v_relu_prime(&b(1.0, 1.0, 0.0)) - 0.25).abs() < 1e-12
            && v_relu(&pad) == 0.0;
        checks.push(outcome("operator-spot-values", ok, "five closed-form values + padding".into()));
    }

    // Hand-traced kernel triples.
    {
        let p = KernelHyperParams::default();
        let s = |items: &[u32]| ItemSequence::new("s", items.to_vec()).unwrap();
        let pi = std::f64::consts::PI;
        let k1 = rntk(&s(&[0]), &s(&[0]), &p)?;
        let k2 = rntk(&s(&[0]), &s(&[1]), &p)?;
        let k3 = rntk(&s(&[0, 0]), &s(&[0, 0]), &p)?;
        let ok = (k1.nngp - 0.5).abs() < 1e-12
            && (k1.ntk - 1.0).abs() < 1e-12
            && (k2.nngp - 1.0 / (2.0 * pi)).abs() < 1e-12
            && (k2.ntk - 1.0 / (2.0 * pi)).abs() < 1e-12
            && (k3.nngp - 0.75).abs() < 1e-12
            && (k3.ntk - 1.75).abs() < 1e-12;
        checks.push(outcome("hand-traced-kernels", ok, "three derived kernel pairs to 1e-12".into()));
    }

    // Monte-Carlo agreement of the operators (reduced scale).
    {
        let c = verify::closed_form_operators(5, 200_000, seed);
        checks.push(c);
    }

    // Exact padding invariance and symmetry on random pairs.
    {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b9);
        let mut ok = true;
        for _ in 0..25 {
            let len_x = rng.gen_range(1..=5);
            let len_y = rng.gen_range(1..=5);
            let x = ItemSequence::new("x", (0..len_x).map(|_| rng.gen_range(0..6)).collect())
                .expect("non-empty");
            let y = ItemSequence::new("y", (0..len_y).map(|_| rng.gen_range(0..6)).collect())
                .expect("non-empty");
            let layers = rng.gen_range(1..=2);
            let p = KernelHyperParams { layers, ..KernelHyperParams::default() };
            let base = rntk(&x, &y, &p)?;
            let extra = rng.gen_range(1..=5);
            let padded = rntk_with_shared_padding(&x, &y, &p, FinalScale::default(), extra)?;
            let swapped = rntk(&y, &x, &p)?;
            ok &= base.ntk.to_bits() == padded.ntk.to_bits()
                && base.nngp.to_bits() == padded.nngp.to_bits()
                && base.ntk.to_bits() == swapped.ntk.to_bits();
        }
        checks.push(outcome("padding-and-symmetry", ok, "25 random pairs, zero-ulp agreement".into()));
    }

    // Metric unit values.
    {
        let r5 = metrics(&[1, 3, 7], &[5]).map_err(CliError::from)?;
        let single = |rank: usize| metrics(&[rank], &[5]).unwrap();
        let ok = single(1).mrr_at[&5] == 1.0
            && single(1).ndcg_at[&5] == 1.0
            && single(3).mrr_at[&5] == 1.0 / 3.0
            && single(3).ndcg_at[&5] == 0.5
            && single(7).mrr_at[&5] == 0.0
            && r5.n_queries == 3;
        checks.push(outcome("metric-unit-values", ok, "ranks {1,3,7} at cutoff 5".into()));
    }

    // Gram round-trip and thread-count determinism in a scratch dir.
    {
        let dir = std::env::temp_dir().join(format!("overrec-selftest-{}", std::process::id()));
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))?;
        let seqs: Vec<ItemSequence> = (0..10u32)
            .map(|i| {
                ItemSequence::new(format!("u{i}"), vec![i % 4, (i * 3) % 4, (i * 5) % 4])
                    .expect("non-empty")
            })
            .collect();
        let p = KernelHyperParams::default();
        let run = |threads: usize| -> Result<Vec<u8>, CliError> {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| CliError::input(e.to_string()))?;
            let gram = pool.install(|| {
                compute_gram(&seqs, &seqs, &p, GramMode::Rntk, DEFAULT_CELL_BUDGET)
            })?;
            let path = dir.join(format!("g{threads}.gram"));
            save_gram(&gram, &path)?;
            std::fs::read(&path).map_err(|e| CliError::input(e.to_string()))
        };
        let bytes1 = run(1)?;
        let bytes2 = run(2)?;
        let loaded = load_gram(&dir.join("g1.gram"))?;
        let ok = bytes1 == bytes2 && loaded.n_query == 10;
        let _ = std::fs::remove_dir_all(&dir);
        checks.push(outcome(
            "gram-roundtrip-determinism",
            ok,
            "byte-identical files at 1 and 2 threads".into(),
        ));
    }

    Ok(checks)
}

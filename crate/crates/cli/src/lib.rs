//! Commands behind the `forvalue` binary. Each command writes its report to
//! the given sink and returns a typed result, so the acceptance suite and
//! integration tests drive the same code paths as the binary.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context};
use forvalue::ingest::{self, DumpLayout};
use forvalue::metrics::{self, EvalReport, LabelMode, LabelTable};
use forvalue::synth::{self, BenchSpec, ClassSpec, ToySizes};
use forvalue::toy;
use forvalue::valuation::{self, ScorePath, ValuationConfig, VocabMode};
use forvalue::verify::{self, VerifyHooks, VerifyReport};
use forvalue::{RestrictedVocab, Role, SampleRecord, ScoreTable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exit status classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Failure {
    /// Bad data, failed checks, unknown ids: exit 1.
    Domain,
    /// Unreadable or unwritable paths: exit 2.
    Environment,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Failure,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn domain(error: impl Into<anyhow::Error>) -> Self {
        CliError {
            kind: Failure::Domain,
            error: error.into(),
        }
    }

    pub fn environment(error: impl Into<anyhow::Error>) -> Self {
        CliError {
            kind: Failure::Environment,
            error: error.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Failure::Domain => 1,
            Failure::Environment => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<forvalue::Error> for CliError {
    fn from(e: forvalue::Error) -> Self {
        match e {
            forvalue::Error::Io { .. } => CliError::environment(e),
            _ => CliError::domain(e),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn write_err(e: std::io::Error) -> CliError {
    CliError::environment(anyhow::Error::new(e).context("writing output"))
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(write_err)?
    };
}

fn open_scores(path: &Path) -> CliResult<ScoreTable> {
    let file = File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(CliError::environment)?;
    Ok(valuation::read_scores_csv(BufReader::new(file))?)
}

fn read_labels(path: &Path) -> CliResult<LabelTable> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::environment)?;
    Ok(LabelTable::parse(&text)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidateSummary {
    pub total: usize,
    /// `(sample id, problem)` for every sample that failed.
    pub invalid: Vec<(String, String)>,
}

/// Reads every sample of a dump and reports the ones that fail to decode or
/// validate.
pub fn cmd_validate(dir: &Path, out: &mut dyn Write) -> CliResult<ValidateSummary> {
    let (manifest, reader) = ingest::read_dump(dir)?;
    let mut invalid = Vec::new();
    for (entry, rec) in manifest.samples.iter().zip(reader) {
        if let Err(e) = rec {
            say!(out, "invalid {}: {e}", entry.id);
            invalid.push((entry.id.clone(), e.to_string()));
        }
    }
    let total = manifest.samples.len();
    if invalid.is_empty() {
        say!(out, "{total} samples valid");
        Ok(ValidateSummary { total, invalid })
    } else {
        let ids: Vec<&str> = invalid.iter().map(|(id, _)| id.as_str()).collect();
        Err(CliError::domain(anyhow!(
            "{} of {total} samples invalid: {}",
            invalid.len(),
            ids.join(", ")
        )))
    }
}

#[derive(Clone, Debug, Default)]
pub struct ScoreOptions {
    pub batch_size: Option<usize>,
    pub vocab_mode: VocabMode,
    pub path: ScorePath,
    pub threads: Option<usize>,
    pub normalize_length: bool,
}

/// Scores every training sample of `train_dir` against every valuation
/// sample of `valid_dir` and writes the score CSV to `out_path`.
pub fn cmd_score(
    train_dir: &Path,
    valid_dir: &Path,
    out_path: &Path,
    opts: &ScoreOptions,
    out: &mut dyn Write,
) -> CliResult<ScoreTable> {
    let (train_manifest, train_reader) = ingest::read_dump(train_dir)?;
    let (valid_manifest, valid_reader) = ingest::read_dump(valid_dir)?;
    if train_manifest.embedding_dim != valid_manifest.embedding_dim {
        return Err(CliError::domain(anyhow!(
            "incompatible dumps: training embedding dim {}, valuation embedding dim {}",
            train_manifest.embedding_dim,
            valid_manifest.embedding_dim
        )));
    }
    if train_manifest.restricted_vocab != valid_manifest.restricted_vocab {
        return Err(CliError::domain(anyhow!(
            "incompatible dumps: training vocabulary has {} tokens, valuation vocabulary has {} tokens, contents differ",
            train_manifest.restricted_vocab.len(),
            valid_manifest.restricted_vocab.len()
        )));
    }
    // One shared domain so compatibility checks reduce to pointer equality.
    let domain = train_reader.domain().clone();
    let valuation: Vec<SampleRecord> = valid_reader
        .map(|r| {
            r.map(|mut rec| {
                rec.domain = domain.clone();
                rec
            })
        })
        .collect::<forvalue::Result<_>>()?;

    let mut config = ValuationConfig {
        vocab_mode: opts.vocab_mode,
        path: opts.path,
        threads: opts.threads,
        normalize_length: opts.normalize_length,
        global_vocab_size: train_manifest.global_vocab_size.map(|g| g as usize),
        ..ValuationConfig::default()
    };
    if let Some(b) = opts.batch_size {
        config.batch_size = b;
    }

    let start = Instant::now();
    let table = valuation::run_valuation(train_reader, &valuation, &config)?;
    let secs = start.elapsed().as_secs_f64();

    write_table(&table, out_path)?;
    let pairs = table.n_valuation() * table.n_training();
    say!(
        out,
        "scored {} valuation x {} training = {pairs} pairs in {secs:.3} s ({:.0} pairs/s)",
        table.n_valuation(),
        table.n_training(),
        pairs as f64 / secs.max(1e-9)
    );
    Ok(table)
}

fn write_table(table: &ScoreTable, path: &Path) -> CliResult<()> {
    let file = File::create(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(CliError::environment)?;
    let mut w = BufWriter::new(file);
    valuation::write_scores_csv(table, &mut w)?;
    w.flush()
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::environment)
}

/// Lists the top training samples for one valuation sample.
pub fn cmd_rank(
    scores: &Path,
    valuation_id: &str,
    top_k: Option<usize>,
    out: &mut dyn Write,
) -> CliResult<Vec<(String, f64)>> {
    let table = open_scores(scores)?;
    let mut ranked = valuation::rank(&table, valuation_id)?;
    if let Some(k) = top_k {
        ranked.truncate(k);
    }
    say!(out, "rank,training_id,score");
    for (r, (id, s)) in ranked.iter().enumerate() {
        say!(out, "{},{id},{}", r + 1, valuation::format_score(*s));
    }
    Ok(ranked)
}

/// AUC and recall of a score table against class labels.
pub fn cmd_eval(scores: &Path, labels: &Path, mode: LabelMode, out: &mut dyn Write) -> CliResult<EvalReport> {
    let table = open_scores(scores)?;
    let labels = read_labels(labels)?;
    let report = metrics::evaluate(&table, &labels, mode)?;
    say!(out, "{report}");
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DetectRule {
    /// Flag this fraction of training samples with the lowest value.
    BottomFraction(f64),
    /// Flag samples whose value is strictly below the threshold.
    Below(f64),
}

/// Flags low-value training samples. A sample's value is its mean score
/// over `valuation_ids`, or over every valuation sample when `None`.
pub fn cmd_detect(
    scores: &Path,
    rule: DetectRule,
    valuation_ids: Option<&[String]>,
    out: &mut dyn Write,
) -> CliResult<Vec<(String, f64)>> {
    let table = open_scores(scores)?;
    let ids: Vec<&str> = match valuation_ids {
        Some(ids) => ids.iter().map(String::as_str).collect(),
        None => table.valuation_ids.iter().map(String::as_str).collect(),
    };
    let value = valuation::group_value(&table, &ids)?;
    let flagged = match rule {
        DetectRule::BottomFraction(f) => metrics::bottom_fraction(&table.training_ids, &value, f)?,
        DetectRule::Below(t) => metrics::below_value(&table.training_ids, &value, t),
    };
    say!(out, "training_id,value");
    for (id, v) in &flagged {
        say!(out, "{id},{}", valuation::format_score(*v));
    }
    Ok(flagged.into_iter().map(|(id, v)| (id.to_string(), v)).collect())
}

/// Runs the toy-model property suite; fails if any property fails.
pub fn cmd_toy_verify(seed: u64, sizes: &ToySizes, hooks: VerifyHooks, out: &mut dyn Write) -> CliResult<VerifyReport> {
    let report = verify::run_toy_suite(seed, sizes, hooks)?;
    say!(out, "{report}");
    if report.passed() {
        Ok(report)
    } else {
        let names: Vec<&str> = report.failed().map(|p| p.name).collect();
        Err(CliError::domain(anyhow!("failed properties: {}", names.join(", "))))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyDataset {
    /// Random toy instance with all contexts distinct.
    Random,
    /// Labelled class dataset.
    Classes,
}

#[derive(Clone, Debug)]
pub struct ToyExportOptions {
    pub seed: u64,
    pub dataset: ToyDataset,
    pub sizes: ToySizes,
    pub classes: ClassSpec,
    /// Gradient steps on the valuation samples before export.
    pub train_steps: usize,
    pub learning_rate: f64,
}

impl Default for ToyExportOptions {
    fn default() -> Self {
        ToyExportOptions {
            seed: 0,
            dataset: ToyDataset::Classes,
            sizes: ToySizes::default(),
            classes: ClassSpec::default(),
            train_steps: 0,
            learning_rate: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyExport {
    pub model: toy::ToyModel,
    pub train: Vec<toy::ToySample>,
    pub valid: Vec<toy::ToySample>,
}

/// Writes `train/` and `valid/` dumps and `labels.txt` for a toy dataset
/// under `dir`. Probability rows cover the full toy vocabulary.
pub fn cmd_toy_export(dir: &Path, opts: &ToyExportOptions, out: &mut dyn Write) -> CliResult<ToyExport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let inst = match opts.dataset {
        ToyDataset::Random => synth::toy_instance(&mut rng, &opts.sizes, false),
        ToyDataset::Classes => synth::class_dataset(&mut rng, &opts.classes)?,
    };
    let model = synth::train(&inst.model, &inst.valid, opts.learning_rate, opts.train_steps)?;
    let vocab = Arc::new(RestrictedVocab::full(model.vocab_size));
    let layout = DumpLayout {
        embedding_dim: model.dim,
        global_vocab_size: Some(model.vocab_size as u32),
        vocab: vocab.clone(),
    };
    let train = toy::export_records(&model, &inst.train, Role::Training, Some(&vocab))?;
    let valid = toy::export_records(&model, &inst.valid, Role::Valuation, Some(&vocab))?;
    ingest::write_dump(&dir.join("train"), &layout, train)?;
    ingest::write_dump(&dir.join("valid"), &layout, valid)?;
    let labels = synth::labels_text(&[inst.train.as_slice(), inst.valid.as_slice()].concat());
    let labels_path = dir.join("labels.txt");
    fs::write(&labels_path, labels)
        .with_context(|| format!("writing {}", labels_path.display()))
        .map_err(CliError::environment)?;
    say!(
        out,
        "wrote {} training and {} valuation samples to {}",
        inst.train.len(),
        inst.valid.len(),
        dir.display()
    );
    Ok(ToyExport {
        model,
        train: inst.train,
        valid: inst.valid,
    })
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub n_train: usize,
    pub n_valid: usize,
    pub len: usize,
    pub dim: usize,
    pub vocab: usize,
    pub batch_size: usize,
    pub threads: Option<usize>,
    pub path: ScorePath,
    pub seed: u64,
    /// Timed runs per configuration; the fastest is reported.
    pub repeats: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            n_train: 1000,
            n_valid: 1000,
            len: 32,
            dim: 64,
            vocab: 500,
            batch_size: 64,
            threads: None,
            path: ScorePath::Auto,
            seed: 0,
            repeats: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub n_train: usize,
    pub n_valid: usize,
    pub vocab: usize,
    /// Fastest valuation-sketch build over the dataset vocabulary.
    pub sketch_secs: f64,
    /// Fastest end-to-end scoring run.
    pub score_secs: f64,
}

impl BenchResult {
    pub fn pairs(&self) -> usize {
        self.n_train * self.n_valid
    }

    pub fn pairs_per_sec(&self) -> f64 {
        self.pairs() as f64 / self.score_secs.max(1e-12)
    }
}

impl fmt::Display for BenchResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n_train={} n_valid={} vocab={} pairs={} sketch_build={:.4}s score={:.4}s throughput={:.0} pairs/s",
            self.n_train,
            self.n_valid,
            self.vocab,
            self.pairs(),
            self.sketch_secs,
            self.score_secs,
            self.pairs_per_sec()
        )
    }
}

/// Prepared data for one benchmark configuration, with the fastest times
/// seen so far.
struct BenchCase {
    domain: Arc<RestrictedVocab>,
    valid: Vec<SampleRecord>,
    train: Vec<SampleRecord>,
    config: ValuationConfig,
    result: BenchResult,
}

impl BenchCase {
    /// Every record's targets span the whole vocabulary's support, so the
    /// per-batch restricted vocabulary approaches `vocab` tokens.
    fn prepare(opts: &BenchOptions) -> CliResult<Self> {
        if opts.n_train == 0 || opts.n_valid == 0 || opts.len == 0 || opts.dim == 0 || opts.vocab == 0 {
            return Err(CliError::domain(anyhow!("bench sizes must be positive")));
        }
        let spec = BenchSpec {
            len: opts.len,
            dim: opts.dim,
            vocab: opts.vocab,
        };
        let domain = spec.domain();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let valid = (0..opts.n_valid)
            .map(|n| spec.record(&mut rng, format!("v{n:06}"), Role::Valuation, &domain))
            .collect();
        let train = (0..opts.n_train)
            .map(|n| spec.record(&mut rng, format!("t{n:06}"), Role::Training, &domain))
            .collect();
        Ok(BenchCase {
            domain,
            valid,
            train,
            config: ValuationConfig {
                batch_size: opts.batch_size,
                path: opts.path,
                threads: opts.threads,
                ..ValuationConfig::default()
            },
            result: BenchResult {
                n_train: opts.n_train,
                n_valid: opts.n_valid,
                vocab: opts.vocab,
                sketch_secs: f64::INFINITY,
                score_secs: f64::INFINITY,
            },
        })
    }

    fn time_once(&mut self) -> CliResult<()> {
        let start = Instant::now();
        for v in &self.valid {
            std::hint::black_box(forvalue::sketch::build_sketch(v, &self.domain)?);
        }
        self.result.sketch_secs = self.result.sketch_secs.min(start.elapsed().as_secs_f64());

        let start = Instant::now();
        let table = valuation::run_valuation(self.train.iter().cloned().map(Ok), &self.valid, &self.config)?;
        self.result.score_secs = self.result.score_secs.min(start.elapsed().as_secs_f64());
        std::hint::black_box(table);
        Ok(())
    }
}

/// Times one synthetic scoring run, keeping the fastest of `repeats`.
/// Records are generated before timing starts.
pub fn run_bench(opts: &BenchOptions) -> CliResult<BenchResult> {
    let mut case = BenchCase::prepare(opts)?;
    for _ in 0..opts.repeats.max(1) {
        case.time_once()?;
    }
    Ok(case.result)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Acceptable fitted exponent of runtime against the training count.
pub const N_EXPONENT_RANGE: (f64, f64) = (0.9, 1.3);
/// Acceptable fitted exponent of runtime against the vocabulary size.
pub const VOCAB_EXPONENT_RANGE: (f64, f64) = (0.8, 1.4);

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub by_n: Vec<BenchResult>,
    pub by_vocab: Vec<BenchResult>,
    pub n_exponent: f64,
    pub vocab_exponent: f64,
}

impl ScalingReport {
    pub fn n_ok(&self) -> bool {
        (N_EXPONENT_RANGE.0..=N_EXPONENT_RANGE.1).contains(&self.n_exponent)
    }

    pub fn vocab_ok(&self) -> bool {
        (VOCAB_EXPONENT_RANGE.0..=VOCAB_EXPONENT_RANGE.1).contains(&self.vocab_exponent)
    }
}

/// Runs at `n/4, n/2, n` training samples and at `vocab/4, vocab/2, vocab`
/// tokens, holding everything else fixed, and fits runtime exponents.
/// Repeats cycle through all configurations so slow drift in machine speed
/// affects every size alike.
pub fn run_scaling(opts: &BenchOptions) -> CliResult<ScalingReport> {
    let steps = [4usize, 2, 1];
    let mut cases = Vec::new();
    for &q in &steps {
        cases.push(BenchCase::prepare(&BenchOptions {
            n_train: (opts.n_train / q).max(1),
            ..opts.clone()
        })?);
    }
    for &q in &steps {
        cases.push(BenchCase::prepare(&BenchOptions {
            vocab: (opts.vocab / q).max(1),
            ..opts.clone()
        })?);
    }
    for _ in 0..opts.repeats.max(1) {
        for case in &mut cases {
            case.time_once()?;
        }
    }
    let mut results: Vec<BenchResult> = cases.into_iter().map(|c| c.result).collect();
    let by_vocab = results.split_off(steps.len());
    let by_n = results;
    let fit = |rs: &[BenchResult], x: fn(&BenchResult) -> usize| {
        let xs: Vec<f64> = rs.iter().map(|r| x(r) as f64).collect();
        let ys: Vec<f64> = rs.iter().map(|r| r.score_secs).collect();
        fit_exponent(&xs, &ys)
    };
    Ok(ScalingReport {
        n_exponent: fit(&by_n, |r| r.n_train),
        vocab_exponent: fit(&by_vocab, |r| r.vocab),
        by_n,
        by_vocab,
    })
}

/// Benchmarks one configuration, or with `scaling` the sweeps of
/// [`run_scaling`]; a scaling exponent outside its range is a failure.
pub fn cmd_bench(opts: &BenchOptions, scaling: bool, out: &mut dyn Write) -> CliResult<Option<ScalingReport>> {
    say!(
        out,
        "bench T={} d={} batch={} threads={}",
        opts.len,
        opts.dim,
        opts.batch_size,
        opts.threads.map_or("default".to_string(), |t| t.to_string())
    );
    if !scaling {
        let r = run_bench(opts)?;
        say!(out, "{r}");
        return Ok(None);
    }
    let report = run_scaling(opts)?;
    for r in report.by_n.iter().chain(&report.by_vocab) {
        say!(out, "{r}");
    }
    say!(
        out,
        "exponent vs n_train: {:.3} (accepted {:?})",
        report.n_exponent,
        N_EXPONENT_RANGE
    );
    say!(
        out,
        "exponent vs vocab: {:.3} (accepted {:?})",
        report.vocab_exponent,
        VOCAB_EXPONENT_RANGE
    );
    if report.n_ok() && report.vocab_ok() {
        Ok(Some(report))
    } else {
        Err(CliError::domain(anyhow!("runtime scaling outside the accepted range")))
    }
}

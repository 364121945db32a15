//! Training loop: interleaves hierarchy edges, text windows, and join/meet
//! constraints into one stochastic pass per epoch, steps the optimizer, and
//! keeps embeddings non-negative in order mode.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{TokenWindow, Vocabulary, WindowStream};
use crate::embedding::{EmbeddingTable, GradientMap};
use crate::error::{Error, Result};
use crate::eval::{tune_threshold, LabeledPair, Polarity};
use crate::lattice::{ConstraintKind, JoinMeetConstraint};
use crate::model_io::{Model, ModelKind, OptimizerCheckpoint};
use crate::objectives::{
    bilinear_margin_loss, bilinear_score, cbow_l1_loss, join_margin_loss, join_penalty,
    meet_margin_loss, meet_penalty, order_energy, order_margin_loss, BilinearParams,
};
use crate::ontology::{
    sample_free_pair, sample_negative_pair, transitive_closure, ConceptId, NegativeMode,
    OntologyGraph, Reachability,
};
use crate::optim::{adam_update_row, AdamConfig, AdamState, Optimizer, SgdState};

/// Which update rule drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }
}

/// Everything the training loop needs to know, with defaults suited to the
/// synthetic fixtures. All hyperparameters can also be set from a flat
/// `key=value` config file via [`TrainConfig::set`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub dim: usize,
    pub kind: ModelKind,
    pub order_margin: f64,
    pub cbow_margin: f64,
    pub joinmeet_margin: f64,
    pub alpha_order: f64,
    pub alpha_text: f64,
    /// Weight of the join/meet term; `None` inherits `alpha_order`.
    pub alpha_constraints: Option<f64>,
    pub window: usize,
    pub min_count: u64,
    /// Text windows consumed per hierarchy edge, per epoch.
    pub text_ratio: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub seed: u64,
    pub init_scale: f64,
    pub bilinear_noise: f64,
    /// Frequency subsampling threshold for text windows; `None` disables.
    pub subsample: Option<f64>,
    pub optimizer: OptimizerKind,
    pub threads: usize,
    pub neg_retries: usize,
    pub use_text: bool,
    pub use_joinmeet: bool,
    pub use_closure: bool,
    pub joinmeet_margin_variant: bool,
    pub corrupt_both_cbow: bool,
    pub free_pair_negatives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 50,
            kind: ModelKind::Order,
            order_margin: 1.0,
            cbow_margin: 1.0,
            joinmeet_margin: 1.0,
            alpha_order: 1.0,
            alpha_text: 1.0,
            alpha_constraints: None,
            window: 10,
            min_count: 5,
            text_ratio: 1.0,
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 400,
            batch_size: 1,
            negatives: 4,
            seed: 42,
            init_scale: 0.1,
            bilinear_noise: 0.01,
            subsample: None,
            optimizer: OptimizerKind::Adam,
            threads: 1,
            neg_retries: 100,
            use_text: false,
            use_joinmeet: false,
            use_closure: false,
            joinmeet_margin_variant: false,
            corrupt_both_cbow: false,
            free_pair_negatives: false,
        }
    }
}

impl TrainConfig {
    /// Effective join/meet weight.
    pub fn constraints_weight(&self) -> f64 {
        self.alpha_constraints.unwrap_or(self.alpha_order)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        if self.order_margin <= 0.0 || self.cbow_margin <= 0.0 || self.joinmeet_margin <= 0.0 {
            return bad("margins must be > 0".into());
        }
        if self.alpha_order < 0.0 || self.alpha_text < 0.0 || self.constraints_weight() < 0.0 {
            return bad("loss weights must be >= 0".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.negatives == 0 {
            return bad("negatives must be >= 1".into());
        }
        if self.learning_rate <= 0.0 {
            return bad("learning_rate must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.epsilon <= 0.0 {
            return bad("epsilon must be > 0".into());
        }
        if self.init_scale <= 0.0 {
            return bad("init_scale must be > 0".into());
        }
        if self.use_text && (self.window < 2 || !self.window.is_multiple_of(2)) {
            return bad(format!("window must be even and >= 2, got {}", self.window));
        }
        if self.use_text && self.text_ratio <= 0.0 {
            return bad("text_ratio must be > 0 when text is enabled".into());
        }
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        if self.neg_retries == 0 {
            return bad("neg_retries must be >= 1".into());
        }
        Ok(())
    }

    /// Sets one configuration key from its string form. Unknown keys and
    /// unparsable values are config errors, so typos fail loudly.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!(
                    "bad boolean `{value}` for key `{key}`"
                ))),
            }
        }
        match key {
            "dim" => self.dim = parse(key, value)?,
            "kind" => {
                self.kind = ModelKind::parse(value)
                    .ok_or_else(|| Error::Config(format!("unknown model kind `{value}`")))?
            }
            "order_margin" => self.order_margin = parse(key, value)?,
            "cbow_margin" => self.cbow_margin = parse(key, value)?,
            "joinmeet_margin" => self.joinmeet_margin = parse(key, value)?,
            "alpha_order" => self.alpha_order = parse(key, value)?,
            "alpha_text" => self.alpha_text = parse(key, value)?,
            "alpha_constraints" => self.alpha_constraints = Some(parse(key, value)?),
            "window" => self.window = parse(key, value)?,
            "min_count" => self.min_count = parse(key, value)?,
            "text_ratio" => self.text_ratio = parse(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "negatives" => self.negatives = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "init_scale" => self.init_scale = parse(key, value)?,
            "bilinear_noise" => self.bilinear_noise = parse(key, value)?,
            "subsample" => {
                let t: f64 = parse(key, value)?;
                self.subsample = if t > 0.0 { Some(t) } else { None };
            }
            "optimizer" => {
                self.optimizer = OptimizerKind::parse(value)
                    .ok_or_else(|| Error::Config(format!("unknown optimizer `{value}`")))?
            }
            "threads" => self.threads = parse(key, value)?,
            "neg_retries" => self.neg_retries = parse(key, value)?,
            "use_text" => self.use_text = parse_bool(key, value)?,
            "use_joinmeet" => self.use_joinmeet = parse_bool(key, value)?,
            "use_closure" => self.use_closure = parse_bool(key, value)?,
            "joinmeet_margin_variant" => self.joinmeet_margin_variant = parse_bool(key, value)?,
            "corrupt_both_cbow" => self.corrupt_both_cbow = parse_bool(key, value)?,
            "free_pair_negatives" => self.free_pair_negatives = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Reads a flat `key=value` config file. Blank lines and `#` comments
    /// are ignored.
    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::MalformedLine {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    reason: "expected key=value".to_string(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

fn fnv1a64(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Derives an independent named random stream from the master seed, so
/// enabling one component never perturbs another component's draws.
pub fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(label))
}

/// Number of text windows to process after each edge: slot `k` (0-based)
/// holds `floor((k+1) r) - floor(k r)`, so the running total after edge `k`
/// is exactly `floor((k+1) r)`, capped at `num_windows`.
pub fn interleave_schedule(num_edges: usize, num_windows: usize, ratio: f64) -> Result<Vec<usize>> {
    if ratio <= 0.0 || !ratio.is_finite() {
        return Err(Error::Config(format!(
            "interleave ratio must be positive and finite, got {ratio}"
        )));
    }
    let mut plan = Vec::with_capacity(num_edges);
    let mut emitted = 0usize;
    let mut prev = 0u64;
    for k in 1..=num_edges {
        let cum = (k as f64 * ratio).floor() as u64;
        let slot = ((cum - prev) as usize).min(num_windows.saturating_sub(emitted));
        prev = cum;
        emitted += slot;
        plan.push(slot);
    }
    Ok(plan)
}

/// Per-epoch mean losses (by component) and dev accuracy when available.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub order_loss: Option<f64>,
    pub cbow_loss: Option<f64>,
    pub joinmeet_loss: Option<f64>,
    pub dev_accuracy: Option<f64>,
}

/// Summary of a whole training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub wall_secs: f64,
    /// Epoch whose parameters were kept: the best dev epoch when a dev set
    /// was supplied, the last epoch otherwise.
    pub selected_epoch: usize,
    pub vocab_size: usize,
    pub train_edges: usize,
    pub constraints: usize,
    pub windows_per_epoch: usize,
}

/// A trained model plus its training report.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
}

/// Maps every concept to the vocabulary rows of its constituent words.
fn concept_phrase_rows(graph: &OntologyGraph, vocab: &Vocabulary) -> Result<Vec<Vec<u32>>> {
    let mut rows = Vec::with_capacity(graph.num_concepts());
    for i in 0..graph.num_concepts() {
        let id = ConceptId::from_index(i);
        let ids = vocab.term_ids(graph.name(id));
        if ids.is_empty() {
            return Err(Error::Config(format!(
                "concept `{}` has no embeddable words",
                graph.name(id)
            )));
        }
        rows.push(ids);
    }
    Ok(rows)
}

/// Draws one corrupted negative for a positive edge. The corrupted side
/// alternates with `ordinal`; if one side is exhausted (every candidate is a
/// true pair) the other side is tried, then a free pair.
fn draw_edge_negative<R: Rng>(
    graph: &OntologyGraph,
    reach: &Reachability,
    positive: (ConceptId, ConceptId),
    ordinal: usize,
    free_pairs: bool,
    rng: &mut R,
    retries: usize,
) -> Result<(ConceptId, ConceptId)> {
    if free_pairs {
        return sample_free_pair(graph, reach, rng, retries);
    }
    let (first, second) = if ordinal.is_multiple_of(2) {
        (NegativeMode::CorruptChild, NegativeMode::CorruptParent)
    } else {
        (NegativeMode::CorruptParent, NegativeMode::CorruptChild)
    };
    match sample_negative_pair(graph, reach, positive, first, rng, retries) {
        Err(Error::NegativeSamplingExhausted { .. }) => {
            match sample_negative_pair(graph, reach, positive, second, rng, retries) {
                Err(Error::NegativeSamplingExhausted { .. }) => {
                    sample_free_pair(graph, reach, rng, retries)
                }
                other => other,
            }
        }
        other => other,
    }
}

/// Cycles over a corpus file, reopening it whenever a pass ends. Fails if a
/// full pass yields no usable window.
struct WindowSource<'v> {
    path: PathBuf,
    vocab: &'v Vocabulary,
    window: usize,
    subsample: Option<f64>,
    reseed: ChaCha8Rng,
    stream: WindowStream<'v>,
    yielded_this_pass: bool,
}

impl<'v> WindowSource<'v> {
    fn open(
        path: &Path,
        vocab: &'v Vocabulary,
        window: usize,
        subsample: Option<f64>,
        mut reseed: ChaCha8Rng,
    ) -> Result<Self> {
        let stream = Self::new_stream(path, vocab, window, subsample, &mut reseed)?;
        Ok(WindowSource {
            path: path.to_path_buf(),
            vocab,
            window,
            subsample,
            reseed,
            stream,
            yielded_this_pass: false,
        })
    }

    fn new_stream(
        path: &Path,
        vocab: &'v Vocabulary,
        window: usize,
        subsample: Option<f64>,
        reseed: &mut ChaCha8Rng,
    ) -> Result<WindowStream<'v>> {
        let stream = WindowStream::open(path, vocab, window)?;
        Ok(match subsample {
            Some(t) => stream.with_subsampling(t, ChaCha8Rng::seed_from_u64(reseed.gen())),
            None => stream,
        })
    }

    fn next_window(&mut self) -> Result<TokenWindow> {
        loop {
            match self.stream.next() {
                Some(Ok(w)) => {
                    self.yielded_this_pass = true;
                    return Ok(w);
                }
                Some(Err(e)) => return Err(e),
                None => {
                    if !self.yielded_this_pass {
                        return Err(Error::Config(format!(
                            "corpus {} contains no trainable windows",
                            self.path.display()
                        )));
                    }
                    self.yielded_this_pass = false;
                    self.stream = Self::new_stream(
                        &self.path,
                        self.vocab,
                        self.window,
                        self.subsample,
                        &mut self.reseed,
                    )?;
                }
            }
        }
    }
}

struct ComponentMean {
    sum: f64,
    count: usize,
}

impl ComponentMean {
    fn new() -> Self {
        ComponentMean { sum: 0.0, count: 0 }
    }

    fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

fn check_loss(value: f64, component: &'static str, epoch: usize, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            component,
            epoch,
            step,
        })
    }
}

/// Scores one surface pair against in-progress parameters; `None` when a
/// side has no in-vocabulary word.
fn score_pair_raw(
    kind: ModelKind,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    bilinear: Option<&BilinearParams>,
    child: &str,
    parent: &str,
) -> Result<Option<f64>> {
    let c_ids = vocab.term_ids(child);
    let p_ids = vocab.term_ids(parent);
    if c_ids.is_empty() || p_ids.is_empty() {
        return Ok(None);
    }
    let c = table.lookup_phrase(&c_ids)?;
    let p = table.lookup_phrase(&p_ids)?;
    let score = match kind {
        ModelKind::Order => order_energy(&c, &p)?,
        ModelKind::Bilinear => {
            let params = bilinear.expect("bilinear params present in bilinear mode");
            bilinear_score(&c, &p, params)?
        }
    };
    Ok(Some(score))
}

fn dev_accuracy(
    kind: ModelKind,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    bilinear: Option<&BilinearParams>,
    dev: &[LabeledPair],
) -> Result<Option<f64>> {
    let mut scored = Vec::with_capacity(dev.len());
    for pair in dev {
        if let Some(s) = score_pair_raw(kind, vocab, table, bilinear, &pair.child, &pair.parent)? {
            scored.push((s, pair.positive));
        }
    }
    if scored.is_empty() {
        return Ok(None);
    }
    let (_, acc) = tune_threshold(&scored, Polarity::for_kind(kind))?;
    Ok(Some(acc))
}

/// Shared, read-only state for one training run.
struct RunCtx<'a> {
    graph: &'a OntologyGraph,
    reach: Reachability,
    edges: Vec<(ConceptId, ConceptId)>,
    constraints: &'a [JoinMeetConstraint],
    vocab: &'a Vocabulary,
    concept_rows: Vec<Vec<u32>>,
    dev: Option<&'a [LabeledPair]>,
    cfg: &'a TrainConfig,
    adam_cfg: AdamConfig,
    order_on: bool,
    text_on: bool,
    jm_on: bool,
}

struct LoopResult {
    table: EmbeddingTable,
    bilinear: Option<BilinearParams>,
    epochs: Vec<EpochStats>,
    selected: usize,
    optimizer: Option<OptimizerCheckpoint>,
    windows_per_epoch: usize,
}

/// Tracks the best dev epoch so its parameters can be restored at the end.
struct BestCheckpoint {
    accuracy: f64,
    epoch: usize,
    table: EmbeddingTable,
    bilinear: Option<BilinearParams>,
}

/// Runs the full training loop and returns the selected model with a
/// per-epoch report. See [`TrainConfig`] for the knobs.
pub fn train(
    graph: &OntologyGraph,
    corpus: Option<&Path>,
    constraints: Option<&[JoinMeetConstraint]>,
    dev: Option<&[LabeledPair]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if graph.num_edges() == 0 {
        return Err(Error::Config("ontology has no edges".to_string()));
    }
    if cfg.use_text && corpus.is_none() {
        return Err(Error::Config(
            "use_text is set but no corpus was supplied".to_string(),
        ));
    }
    if cfg.use_joinmeet && constraints.is_none() {
        return Err(Error::Config(
            "use_joinmeet is set but no constraints were supplied".to_string(),
        ));
    }

    let order_on = cfg.alpha_order > 0.0;
    let text_on = cfg.use_text && cfg.alpha_text > 0.0;
    let constraint_list: &[JoinMeetConstraint] = if cfg.use_joinmeet {
        constraints.unwrap_or(&[])
    } else {
        &[]
    };
    let jm_on = !constraint_list.is_empty() && cfg.constraints_weight() > 0.0;

    if cfg.threads > 1 {
        if text_on {
            return Err(Error::Config(
                "multi-threaded training does not support the text objective; set threads=1"
                    .to_string(),
            ));
        }
        if cfg.kind == ModelKind::Bilinear {
            return Err(Error::Config(
                "multi-threaded training supports order mode only; set threads=1".to_string(),
            ));
        }
    }

    let started = Instant::now();
    let vocab = Vocabulary::build(
        graph.names(),
        if text_on { corpus } else { None },
        cfg.min_count,
    )?;
    if text_on && vocab.len() < 2 {
        return Err(Error::Config(
            "text training needs a vocabulary of at least 2 tokens".to_string(),
        ));
    }
    let concept_rows = concept_phrase_rows(graph, &vocab)?;
    let reach = Reachability::ancestors_only(graph)?;
    let closure_graph;
    let train_graph: &OntologyGraph = if cfg.use_closure {
        closure_graph = transitive_closure(graph)?;
        &closure_graph
    } else {
        graph
    };
    let edges: Vec<(ConceptId, ConceptId)> = train_graph
        .edges()
        .iter()
        .map(|e| (e.child, e.parent))
        .collect();

    let mut init_rng = stream_rng(cfg.seed, "init");
    let table = EmbeddingTable::init(vocab.len(), cfg.dim, cfg.init_scale as f32, &mut init_rng);
    let bilinear = match cfg.kind {
        ModelKind::Order => None,
        ModelKind::Bilinear => {
            let mut rng = stream_rng(cfg.seed, "init_bilinear");
            Some(BilinearParams::near_identity(
                cfg.dim,
                cfg.bilinear_noise as f32,
                &mut rng,
            ))
        }
    };
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate as f32,
        beta1: cfg.beta1 as f32,
        beta2: cfg.beta2 as f32,
        epsilon: cfg.epsilon as f32,
    };

    info!(
        "training {} model: dim {}, {} edges, {} constraints, vocab {}, {} epochs",
        cfg.kind.as_str(),
        cfg.dim,
        edges.len(),
        constraint_list.len(),
        vocab.len(),
        cfg.epochs
    );

    let ctx = RunCtx {
        graph,
        reach,
        edges,
        constraints: constraint_list,
        vocab: &vocab,
        concept_rows,
        dev,
        cfg,
        adam_cfg,
        order_on,
        text_on,
        jm_on,
    };
    let result = if cfg.threads > 1 {
        run_racy(&ctx, table)?
    } else {
        run_single(&ctx, corpus, table, bilinear)?
    };

    let report = TrainReport {
        epochs: result.epochs,
        wall_secs: started.elapsed().as_secs_f64(),
        selected_epoch: result.selected,
        vocab_size: vocab.len(),
        train_edges: ctx.edges.len(),
        constraints: constraint_list.len(),
        windows_per_epoch: result.windows_per_epoch,
    };
    let model = Model {
        kind: cfg.kind,
        vocab,
        table: result.table,
        bilinear: result.bilinear,
        optimizer: result.optimizer,
    };
    Ok(TrainOutcome { model, report })
}

/// Batched gradient sink: accumulates per-sample gradients and flushes one
/// optimizer step (plus the non-negativity projection in order mode) every
/// `batch_size` samples.
struct StepSink {
    emb: GradientMap,
    bil: GradientMap,
    filled: usize,
    batch_size: usize,
    project: bool,
}

impl StepSink {
    fn new(dim: usize, batch_size: usize, project: bool) -> Self {
        StepSink {
            emb: GradientMap::new(dim),
            bil: GradientMap::new(dim),
            filled: 0,
            batch_size,
            project,
        }
    }

    fn sample_done(
        &mut self,
        table: &mut EmbeddingTable,
        emb_opt: &mut Optimizer,
        bilinear: &mut Option<BilinearParams>,
        bil_opt: &mut Option<Optimizer>,
    ) -> Result<()> {
        self.filled += 1;
        if self.filled >= self.batch_size {
            self.flush(table, emb_opt, bilinear, bil_opt)?;
        }
        Ok(())
    }

    fn flush(
        &mut self,
        table: &mut EmbeddingTable,
        emb_opt: &mut Optimizer,
        bilinear: &mut Option<BilinearParams>,
        bil_opt: &mut Option<Optimizer>,
    ) -> Result<()> {
        if self.filled == 0 {
            return Ok(());
        }
        if !self.emb.is_empty() {
            emb_opt.step(table, &self.emb)?;
            if self.project {
                table.project_nonneg(self.emb.touched_rows());
            }
        }
        if let (Some(params), Some(opt), false) =
            (bilinear.as_mut(), bil_opt.as_mut(), self.bil.is_empty())
        {
            opt.step(params, &self.bil)?;
        }
        self.emb.clear();
        self.bil.clear();
        self.filled = 0;
        Ok(())
    }
}

fn run_single(
    ctx: &RunCtx,
    corpus: Option<&Path>,
    mut table: EmbeddingTable,
    mut bilinear: Option<BilinearParams>,
) -> Result<LoopResult> {
    let cfg = ctx.cfg;
    let dim = cfg.dim;
    let num_edges = ctx.edges.len();
    let num_constraints = ctx.constraints.len();

    let make_opt = |rows: usize| match cfg.optimizer {
        OptimizerKind::Adam => Optimizer::Adam(AdamState::new(rows, dim, ctx.adam_cfg)),
        OptimizerKind::Sgd => Optimizer::Sgd(SgdState {
            learning_rate: cfg.learning_rate as f32,
        }),
    };
    let mut emb_opt = make_opt(ctx.vocab.len());
    let mut bil_opt = bilinear.as_ref().map(|_| make_opt(dim));

    let mut edge_rng = stream_rng(cfg.seed, "edge_shuffle");
    let mut neg_edge_rng = stream_rng(cfg.seed, "neg_edges");
    let mut neg_text_rng = stream_rng(cfg.seed, "neg_text");
    let mut jm_rng = stream_rng(cfg.seed, "jm_shuffle");
    let mut neg_jm_rng = stream_rng(cfg.seed, "neg_joinmeet");

    let mut source = match (ctx.text_on, corpus) {
        (true, Some(path)) => Some(WindowSource::open(
            path,
            ctx.vocab,
            cfg.window,
            cfg.subsample,
            stream_rng(cfg.seed, "text"),
        )?),
        _ => None,
    };
    let window_plan = if ctx.text_on {
        interleave_schedule(num_edges, usize::MAX, cfg.text_ratio)?
    } else {
        vec![0; num_edges]
    };
    let windows_per_epoch: usize = window_plan.iter().sum();

    let mut edges = ctx.edges.clone();
    let mut constraint_order: Vec<usize> = (0..num_constraints).collect();
    let mut epochs_out = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestCheckpoint> = None;

    let mut ctx_buf: Vec<u32> = Vec::new();
    for epoch in 0..cfg.epochs {
        edges.shuffle(&mut edge_rng);
        if ctx.jm_on {
            constraint_order.shuffle(&mut jm_rng);
        }
        let mut sink = StepSink::new(dim, cfg.batch_size, cfg.kind == ModelKind::Order);
        let mut order_mean = ComponentMean::new();
        let mut cbow_mean = ComponentMean::new();
        let mut jm_mean = ComponentMean::new();
        let mut consumed_constraints = 0usize;
        let mut step = 0usize;

        for (k, &(child, parent)) in edges.iter().enumerate() {
            if ctx.order_on {
                for j in 0..cfg.negatives {
                    let neg = draw_edge_negative(
                        ctx.graph,
                        &ctx.reach,
                        (child, parent),
                        k * cfg.negatives + j,
                        cfg.free_pair_negatives,
                        &mut neg_edge_rng,
                        cfg.neg_retries,
                    )?;
                    let c_rows = &ctx.concept_rows[child.index()];
                    let p_rows = &ctx.concept_rows[parent.index()];
                    let nc_rows = &ctx.concept_rows[neg.0.index()];
                    let np_rows = &ctx.concept_rows[neg.1.index()];
                    let cv = table.lookup_phrase(c_rows)?;
                    let pv = table.lookup_phrase(p_rows)?;
                    let ncv = table.lookup_phrase(nc_rows)?;
                    let npv = table.lookup_phrase(np_rows)?;
                    let alpha = cfg.alpha_order as f32;
                    match (cfg.kind, bilinear.as_ref()) {
                        (ModelKind::Order, _) => {
                            let loss = order_margin_loss(&cv, &pv, &ncv, &npv, cfg.order_margin)?;
                            order_mean.push(check_loss(loss.value, "order", epoch, step)?);
                            if let Some(g) = loss.grads {
                                sink.emb.add_phrase(c_rows, &g.pos_child, alpha);
                                sink.emb.add_phrase(p_rows, &g.pos_parent, alpha);
                                sink.emb.add_phrase(nc_rows, &g.neg_child, alpha);
                                sink.emb.add_phrase(np_rows, &g.neg_parent, alpha);
                            }
                        }
                        (ModelKind::Bilinear, Some(params)) => {
                            let loss = bilinear_margin_loss(
                                &cv,
                                &pv,
                                &ncv,
                                &npv,
                                params,
                                cfg.order_margin,
                            )?;
                            order_mean.push(check_loss(loss.value, "bilinear", epoch, step)?);
                            if let Some(g) = loss.grads {
                                sink.emb.add_phrase(c_rows, &g.pos_child, alpha);
                                sink.emb.add_phrase(p_rows, &g.pos_parent, alpha);
                                sink.emb.add_phrase(nc_rows, &g.neg_child, alpha);
                                sink.emb.add_phrase(np_rows, &g.neg_parent, alpha);
                                sink.bil.merge_scaled(&g.w, alpha);
                            }
                        }
                        (ModelKind::Bilinear, None) => unreachable!("params exist in bilinear"),
                    }
                    sink.sample_done(&mut table, &mut emb_opt, &mut bilinear, &mut bil_opt)?;
                    step += 1;
                }
            }

            if let Some(src) = source.as_mut() {
                for _ in 0..window_plan[k] {
                    let w = src.next_window()?;
                    let target_vec = table.row(w.target).to_vec();
                    let context_avg = table.lookup_phrase(&w.context)?;
                    let neg_target = draw_distinct_token(
                        ctx.vocab.len() as u32,
                        w.target,
                        &mut neg_text_rng,
                        cfg.neg_retries,
                    )?;
                    ctx_buf.clear();
                    ctx_buf.extend_from_slice(&w.context);
                    let neg_context_avg = if cfg.corrupt_both_cbow {
                        let slot = neg_text_rng.gen_range(0..ctx_buf.len());
                        ctx_buf[slot] = draw_distinct_token(
                            ctx.vocab.len() as u32,
                            ctx_buf[slot],
                            &mut neg_text_rng,
                            cfg.neg_retries,
                        )?;
                        table.lookup_phrase(&ctx_buf)?
                    } else {
                        context_avg.clone()
                    };
                    let loss = cbow_l1_loss(
                        &target_vec,
                        &context_avg,
                        table.row(neg_target),
                        &neg_context_avg,
                        cfg.cbow_margin,
                    )?;
                    cbow_mean.push(check_loss(loss.value, "cbow", epoch, step)?);
                    if let Some(g) = loss.grads {
                        let alpha = cfg.alpha_text as f32;
                        sink.emb.add_scaled(w.target, &g.target, alpha);
                        sink.emb.add_phrase(&w.context, &g.context, alpha);
                        sink.emb.add_scaled(neg_target, &g.neg_target, alpha);
                        sink.emb.add_phrase(&ctx_buf, &g.neg_context, alpha);
                    }
                    sink.sample_done(&mut table, &mut emb_opt, &mut bilinear, &mut bil_opt)?;
                    step += 1;
                }
            }

            if ctx.jm_on {
                let quota = ((k + 1) * num_constraints) / num_edges;
                while consumed_constraints < quota {
                    let c = ctx.constraints[constraint_order[consumed_constraints]];
                    consumed_constraints += 1;
                    apply_constraint_sample(
                        ctx,
                        &mut table,
                        &mut sink,
                        c,
                        &mut neg_jm_rng,
                        epoch,
                        step,
                        &mut jm_mean,
                    )?;
                    sink.sample_done(&mut table, &mut emb_opt, &mut bilinear, &mut bil_opt)?;
                    step += 1;
                }
            }
        }
        sink.flush(&mut table, &mut emb_opt, &mut bilinear, &mut bil_opt)?;

        let dev_acc = match ctx.dev {
            Some(dev) if !dev.is_empty() => {
                dev_accuracy(cfg.kind, ctx.vocab, &table, bilinear.as_ref(), dev)?
            }
            _ => None,
        };
        if let Some(acc) = dev_acc {
            let improved = best.as_ref().is_none_or(|b| acc > b.accuracy);
            if improved {
                best = Some(BestCheckpoint {
                    accuracy: acc,
                    epoch,
                    table: table.clone(),
                    bilinear: bilinear.clone(),
                });
            }
        }
        let stats = EpochStats {
            epoch,
            order_loss: order_mean.mean(),
            cbow_loss: cbow_mean.mean(),
            joinmeet_loss: jm_mean.mean(),
            dev_accuracy: dev_acc,
        };
        info!(
            "epoch {}: order {:?} cbow {:?} joinmeet {:?} dev {:?}",
            epoch, stats.order_loss, stats.cbow_loss, stats.joinmeet_loss, stats.dev_accuracy
        );
        epochs_out.push(stats);
    }

    let last_epoch = cfg.epochs - 1;
    let (table, bilinear, selected) = match best {
        Some(b) if b.epoch != last_epoch => (b.table, b.bilinear, b.epoch),
        Some(b) => (table, bilinear, b.epoch),
        None => (table, bilinear, last_epoch),
    };
    let optimizer = if selected == last_epoch {
        match (&emb_opt, &bil_opt) {
            (Optimizer::Adam(emb), _) => Some(OptimizerCheckpoint {
                embeddings: emb.clone(),
                bilinear: bil_opt.as_ref().and_then(|o| o.adam_state().cloned()),
            }),
            _ => None,
        }
    } else {
        None
    };
    Ok(LoopResult {
        table,
        bilinear,
        epochs: epochs_out,
        selected,
        optimizer,
        windows_per_epoch,
    })
}

fn draw_distinct_token<R: Rng>(
    vocab_len: u32,
    avoid: u32,
    rng: &mut R,
    retries: usize,
) -> Result<u32> {
    for _ in 0..retries {
        let draw = rng.gen_range(0..vocab_len);
        if draw != avoid {
            return Ok(draw);
        }
    }
    Err(Error::NegativeSamplingExhausted { retries })
}

#[allow(clippy::too_many_arguments)]
fn apply_constraint_sample(
    ctx: &RunCtx,
    table: &mut EmbeddingTable,
    sink: &mut StepSink,
    c: JoinMeetConstraint,
    neg_rng: &mut ChaCha8Rng,
    epoch: usize,
    step: usize,
    jm_mean: &mut ComponentMean,
) -> Result<()> {
    let cfg = ctx.cfg;
    let alpha = cfg.constraints_weight() as f32;
    let r1 = &ctx.concept_rows[c.w1.index()];
    let r2 = &ctx.concept_rows[c.w2.index()];
    let rw = &ctx.concept_rows[c.witness.index()];
    let v1 = table.lookup_phrase(r1)?;
    let v2 = table.lookup_phrase(r2)?;
    let vw = table.lookup_phrase(rw)?;
    if cfg.joinmeet_margin_variant {
        let neg_id = draw_distinct_token(
            ctx.graph.num_concepts() as u32,
            c.witness.index() as u32,
            neg_rng,
            cfg.neg_retries,
        )?;
        let rn = &ctx.concept_rows[neg_id as usize];
        let vn = table.lookup_phrase(rn)?;
        let loss = match c.kind {
            ConstraintKind::CommonChild => {
                join_margin_loss(&v1, &v2, &vw, &vn, cfg.joinmeet_margin)?
            }
            ConstraintKind::CommonParent => {
                meet_margin_loss(&v1, &v2, &vw, &vn, cfg.joinmeet_margin)?
            }
        };
        jm_mean.push(check_loss(loss.value, "joinmeet", epoch, step)?);
        if let Some(g) = loss.grads {
            sink.emb.add_phrase(r1, &g.w1, alpha);
            sink.emb.add_phrase(r2, &g.w2, alpha);
            sink.emb.add_phrase(rw, &g.witness, alpha);
            sink.emb.add_phrase(rn, &g.neg_witness, alpha);
        }
    } else {
        let loss = match c.kind {
            ConstraintKind::CommonChild => join_penalty(&v1, &v2, &vw)?,
            ConstraintKind::CommonParent => meet_penalty(&v1, &v2, &vw)?,
        };
        jm_mean.push(check_loss(loss.value, "joinmeet", epoch, step)?);
        if let Some(g) = loss.grads {
            sink.emb.add_phrase(r1, &g.w1, alpha);
            sink.emb.add_phrase(r2, &g.w2, alpha);
            sink.emb.add_phrase(rw, &g.witness, alpha);
        }
    }
    Ok(())
}

/// Per-worker mutable state for the racy path.
struct WorkerState {
    adam: Option<AdamState>,
    neg_rng: ChaCha8Rng,
    jm_rng: ChaCha8Rng,
}

struct WorkerTotals {
    order_sum: f64,
    order_count: usize,
    jm_sum: f64,
    jm_count: usize,
}

/// Multi-worker hierarchical training with racy (relaxed, lock-free)
/// parameter updates. Supports order mode without text; workers shard the
/// shuffled edge and constraint lists and update shared rows in place, so
/// results are not bit-reproducible across runs.
fn run_racy(ctx: &RunCtx, table: EmbeddingTable) -> Result<LoopResult> {
    let cfg = ctx.cfg;
    let dim = cfg.dim;
    let threads = cfg.threads;
    let atoms: Vec<AtomicU32> = table
        .data()
        .iter()
        .map(|f| AtomicU32::new(f.to_bits()))
        .collect();

    let mut workers: Vec<WorkerState> = (0..threads)
        .map(|w| WorkerState {
            adam: match cfg.optimizer {
                OptimizerKind::Adam => Some(AdamState::new(ctx.vocab.len(), dim, ctx.adam_cfg)),
                OptimizerKind::Sgd => None,
            },
            neg_rng: stream_rng(cfg.seed, &format!("neg_edges_worker_{w}")),
            jm_rng: stream_rng(cfg.seed, &format!("neg_joinmeet_worker_{w}")),
        })
        .collect();

    let mut edge_rng = stream_rng(cfg.seed, "edge_shuffle");
    let mut jm_shuffle_rng = stream_rng(cfg.seed, "jm_shuffle");
    let mut edges = ctx.edges.clone();
    let mut constraint_order: Vec<usize> = (0..ctx.constraints.len()).collect();
    let mut epochs_out = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestCheckpoint> = None;

    for epoch in 0..cfg.epochs {
        edges.shuffle(&mut edge_rng);
        if ctx.jm_on {
            constraint_order.shuffle(&mut jm_shuffle_rng);
        }
        let edges_ref = &edges;
        let order_ref = &constraint_order;
        let atoms_ref = &atoms[..];

        let totals: Vec<Result<WorkerTotals>> = std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(threads);
            for (w, state) in workers.iter_mut().enumerate() {
                handles.push(scope.spawn(move || {
                    racy_worker(ctx, atoms_ref, edges_ref, order_ref, state, w, epoch)
                }));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect()
        });

        let mut order_mean = ComponentMean::new();
        let mut jm_mean = ComponentMean::new();
        for t in totals {
            let t = t?;
            order_mean.sum += t.order_sum;
            order_mean.count += t.order_count;
            jm_mean.sum += t.jm_sum;
            jm_mean.count += t.jm_count;
        }

        let snapshot = snapshot_table(&atoms, dim)?;
        let dev_acc = match ctx.dev {
            Some(dev) if !dev.is_empty() => {
                dev_accuracy(cfg.kind, ctx.vocab, &snapshot, None, dev)?
            }
            _ => None,
        };
        if let Some(acc) = dev_acc {
            if best.as_ref().is_none_or(|b| acc > b.accuracy) {
                best = Some(BestCheckpoint {
                    accuracy: acc,
                    epoch,
                    table: snapshot,
                    bilinear: None,
                });
            }
        }
        let stats = EpochStats {
            epoch,
            order_loss: order_mean.mean(),
            cbow_loss: None,
            joinmeet_loss: jm_mean.mean(),
            dev_accuracy: dev_acc,
        };
        info!(
            "epoch {} ({} workers): order {:?} joinmeet {:?} dev {:?}",
            epoch, threads, stats.order_loss, stats.joinmeet_loss, stats.dev_accuracy
        );
        epochs_out.push(stats);
    }

    let last_epoch = cfg.epochs - 1;
    let (table, selected) = match best {
        Some(b) if b.epoch != last_epoch => (b.table, b.epoch),
        Some(b) => (snapshot_table(&atoms, dim)?, b.epoch),
        None => (snapshot_table(&atoms, dim)?, last_epoch),
    };
    Ok(LoopResult {
        table,
        bilinear: None,
        epochs: epochs_out,
        selected,
        optimizer: None,
        windows_per_epoch: 0,
    })
}

fn snapshot_table(atoms: &[AtomicU32], dim: usize) -> Result<EmbeddingTable> {
    let data: Vec<f32> = atoms
        .iter()
        .map(|a| f32::from_bits(a.load(Ordering::Relaxed)))
        .collect();
    EmbeddingTable::from_data(dim, data)
}

fn load_row(atoms: &[AtomicU32], dim: usize, row: u32, out: &mut Vec<f32>) {
    let base = row as usize * dim;
    out.clear();
    out.extend(
        atoms[base..base + dim]
            .iter()
            .map(|a| f32::from_bits(a.load(Ordering::Relaxed))),
    );
}

fn store_row(atoms: &[AtomicU32], dim: usize, row: u32, vals: &[f32]) {
    let base = row as usize * dim;
    for (a, &v) in atoms[base..base + dim].iter().zip(vals) {
        a.store(v.to_bits(), Ordering::Relaxed);
    }
}

fn load_phrase(atoms: &[AtomicU32], dim: usize, rows: &[u32], buf: &mut Vec<f32>) -> Vec<f32> {
    let mut acc = vec![0.0f32; dim];
    for &r in rows {
        load_row(atoms, dim, r, buf);
        for (a, &b) in acc.iter_mut().zip(buf.iter()) {
            *a += b;
        }
    }
    let n = rows.len() as f32;
    for a in &mut acc {
        *a /= n;
    }
    acc
}

fn racy_worker(
    ctx: &RunCtx,
    atoms: &[AtomicU32],
    edges: &[(ConceptId, ConceptId)],
    constraint_order: &[usize],
    state: &mut WorkerState,
    worker: usize,
    epoch: usize,
) -> Result<WorkerTotals> {
    let cfg = ctx.cfg;
    let dim = cfg.dim;
    let threads = cfg.threads;
    let mut totals = WorkerTotals {
        order_sum: 0.0,
        order_count: 0,
        jm_sum: 0.0,
        jm_count: 0,
    };
    let mut grads = GradientMap::new(dim);
    let mut row_buf: Vec<f32> = Vec::with_capacity(dim);
    let mut step = 0usize;

    let apply =
        |grads: &GradientMap, state: &mut WorkerState, row_buf: &mut Vec<f32>| -> Result<()> {
            grads.check_finite()?;
            for (row, grad) in grads.iter() {
                load_row(atoms, dim, row, row_buf);
                match state.adam.as_mut() {
                    Some(adam) => {
                        let (m, v, b1, b2) = adam.split_row_state(row as usize);
                        adam_update_row(&ctx.adam_cfg, m, v, b1, b2, row_buf, grad);
                        adam.bump_step(row as usize);
                    }
                    None => {
                        let lr = cfg.learning_rate as f32;
                        for (p, &g) in row_buf.iter_mut().zip(grad) {
                            *p -= lr * g;
                        }
                    }
                }
                for p in row_buf.iter_mut() {
                    *p = p.abs();
                }
                store_row(atoms, dim, row, row_buf);
            }
            Ok(())
        };

    if ctx.order_on {
        let alpha = cfg.alpha_order as f32;
        for (k, &(child, parent)) in edges
            .iter()
            .enumerate()
            .skip(worker)
            .step_by(threads.max(1))
        {
            for j in 0..cfg.negatives {
                let neg = draw_edge_negative(
                    ctx.graph,
                    &ctx.reach,
                    (child, parent),
                    k * cfg.negatives + j,
                    cfg.free_pair_negatives,
                    &mut state.neg_rng,
                    cfg.neg_retries,
                )?;
                let c_rows = &ctx.concept_rows[child.index()];
                let p_rows = &ctx.concept_rows[parent.index()];
                let nc_rows = &ctx.concept_rows[neg.0.index()];
                let np_rows = &ctx.concept_rows[neg.1.index()];
                let cv = load_phrase(atoms, dim, c_rows, &mut row_buf);
                let pv = load_phrase(atoms, dim, p_rows, &mut row_buf);
                let ncv = load_phrase(atoms, dim, nc_rows, &mut row_buf);
                let npv = load_phrase(atoms, dim, np_rows, &mut row_buf);
                let loss = order_margin_loss(&cv, &pv, &ncv, &npv, cfg.order_margin)?;
                totals.order_sum += check_loss(loss.value, "order", epoch, step)?;
                totals.order_count += 1;
                if let Some(g) = loss.grads {
                    grads.clear();
                    grads.add_phrase(c_rows, &g.pos_child, alpha);
                    grads.add_phrase(p_rows, &g.pos_parent, alpha);
                    grads.add_phrase(nc_rows, &g.neg_child, alpha);
                    grads.add_phrase(np_rows, &g.neg_parent, alpha);
                    apply(&grads, state, &mut row_buf)?;
                }
                step += 1;
            }
        }
    }

    if ctx.jm_on {
        let alpha = cfg.constraints_weight() as f32;
        for &ci in constraint_order.iter().skip(worker).step_by(threads.max(1)) {
            let c = ctx.constraints[ci];
            let r1 = &ctx.concept_rows[c.w1.index()];
            let r2 = &ctx.concept_rows[c.w2.index()];
            let rw = &ctx.concept_rows[c.witness.index()];
            let v1 = load_phrase(atoms, dim, r1, &mut row_buf);
            let v2 = load_phrase(atoms, dim, r2, &mut row_buf);
            let vw = load_phrase(atoms, dim, rw, &mut row_buf);
            grads.clear();
            let value = if cfg.joinmeet_margin_variant {
                let neg_id = draw_distinct_token(
                    ctx.graph.num_concepts() as u32,
                    c.witness.index() as u32,
                    &mut state.jm_rng,
                    cfg.neg_retries,
                )?;
                let rn = &ctx.concept_rows[neg_id as usize];
                let vn = load_phrase(atoms, dim, rn, &mut row_buf);
                let loss = match c.kind {
                    ConstraintKind::CommonChild => {
                        join_margin_loss(&v1, &v2, &vw, &vn, cfg.joinmeet_margin)?
                    }
                    ConstraintKind::CommonParent => {
                        meet_margin_loss(&v1, &v2, &vw, &vn, cfg.joinmeet_margin)?
                    }
                };
                if let Some(g) = loss.grads {
                    grads.add_phrase(r1, &g.w1, alpha);
                    grads.add_phrase(r2, &g.w2, alpha);
                    grads.add_phrase(rw, &g.witness, alpha);
                    grads.add_phrase(rn, &g.neg_witness, alpha);
                }
                loss.value
            } else {
                let loss = match c.kind {
                    ConstraintKind::CommonChild => join_penalty(&v1, &v2, &vw)?,
                    ConstraintKind::CommonParent => meet_penalty(&v1, &v2, &vw)?,
                };
                if let Some(g) = loss.grads {
                    grads.add_phrase(r1, &g.w1, alpha);
                    grads.add_phrase(r2, &g.w2, alpha);
                    grads.add_phrase(rw, &g.witness, alpha);
                }
                loss.value
            };
            totals.jm_sum += check_loss(value, "joinmeet", epoch, step)?;
            totals.jm_count += 1;
            if !grads.is_empty() {
                apply(&grads, state, &mut row_buf)?;
            }
            step += 1;
        }
    }

    Ok(totals)
}

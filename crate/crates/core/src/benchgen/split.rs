//! Benchmark splits: candidate sampling, deduplication and train/val/test assignment.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::Cell;
use super::task::{
    build_transduction_examples, classify, eval_transduction_pipeline, fill_classification_examples,
    gen_pathfinding_example, sample_sequence, select_classes, shuffle, Example, Family, GridSettings, Mode,
    PipelineOutput, SamplingLimits, TaskKind, TaskSpec, Token,
};
use super::transforms::{
    ElementwiseKind, ElementwiseTransform, FilterKind, FilterTransform, LabelerTransform, PositionFn,
    RearrangeTransform, SubstitutionTransform,
};
use super::GenError;
use crate::seed::{derive_seed, rng_for};

/// Candidates are built in fixed-size batches so results never depend on
/// the worker count.
const BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub family: Family,
    pub mode: Mode,
    pub seed: u64,
    pub train_tasks: usize,
    pub val_tasks: usize,
    pub test_tasks: usize,
    pub examples_per_task: usize,
    /// Leading examples of every val/test task reserved for k-shot adaptation.
    pub support_size: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    /// Random inputs used to rank raw outputs when picking classes.
    pub frequency_pool: usize,
    /// Input draws per task before a quota failure rejects it.
    pub max_draws: usize,
    pub probe_size: usize,
    pub grid_size: usize,
    pub num_blobs: usize,
    pub path_offset: usize,
    pub max_resample: usize,
    /// Held-out primitives per slot (compositional mode only).
    pub held_out: [usize; 3],
    pub max_candidates: usize,
}

impl GenConfig {
    pub fn new(family: Family, mode: Mode) -> Self {
        let (train, val, test) = match mode {
            Mode::Plain => (500, 16, 64),
            Mode::Compositional => (5000, 100, 100),
        };
        let mut cfg = Self {
            family,
            mode,
            seed: 0,
            train_tasks: train,
            val_tasks: val,
            test_tasks: test,
            examples_per_task: 500,
            support_size: 20,
            vocab_size: 12,
            seq_len: 5,
            num_classes: 4,
            frequency_pool: 20_000,
            max_draws: 20_000,
            probe_size: 512,
            grid_size: 10,
            num_blobs: 8,
            path_offset: 100,
            max_resample: 1000,
            held_out: [0; 3],
            max_candidates: 0,
        };
        cfg.reset_derived();
        cfg
    }

    /// Recomputes the held-out sizes (a tenth of each inventory, rounded up)
    /// and the candidate cap after counts or vocabulary changed.
    pub fn reset_derived(&mut self) {
        self.held_out = match self.mode {
            Mode::Plain => [0; 3],
            Mode::Compositional => {
                let inv = primitive_inventory(self);
                [0, 1, 2].map(|s| inv[s].len().div_ceil(10))
            }
        };
        self.max_candidates = 50 * self.total_tasks().max(1);
    }

    pub fn total_tasks(&self) -> usize {
        self.train_tasks + self.val_tasks + self.test_tasks
    }

    /// Size of the token vocabulary a model needs for this benchmark.
    pub fn model_vocab(&self) -> usize {
        match self.family {
            Family::Pathfinding => self.path_offset + self.grid_size * self.grid_size,
            _ => self.vocab_size,
        }
    }

    /// Lists every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.train_tasks == 0 {
            v.push("train_tasks must be positive".into());
        }
        if self.val_tasks + self.test_tasks > 0 && self.examples_per_task <= self.support_size {
            v.push(format!(
                "examples_per_task ({}) must exceed support_size ({})",
                self.examples_per_task, self.support_size
            ));
        }
        if self.examples_per_task == 0 {
            v.push("examples_per_task must be positive".into());
        }
        if self.probe_size == 0 {
            v.push("probe_size must be positive".into());
        }
        match self.family {
            Family::Classification | Family::Transduction => {
                if self.vocab_size < 2 || self.vocab_size > u16::MAX as usize - 1 {
                    v.push(format!("vocab_size {} outside 2..65534", self.vocab_size));
                }
                if self.seq_len == 0 {
                    v.push("seq_len must be positive".into());
                }
            }
            Family::Pathfinding => {
                let cells = self.grid_size * self.grid_size;
                if self.grid_size < 2 {
                    v.push("grid_size must be at least 2".into());
                }
                if self.path_offset < cells {
                    v.push(format!(
                        "path_offset ({}) must be at least grid_size^2 ({cells})",
                        self.path_offset
                    ));
                }
                if self.max_resample == 0 {
                    v.push("max_resample must be positive".into());
                }
            }
        }
        if self.family == Family::Classification {
            if self.num_classes < 2 {
                v.push("num_classes must be at least 2".into());
            } else if self.examples_per_task % self.num_classes != 0 {
                v.push(format!(
                    "examples_per_task ({}) must be a multiple of num_classes ({})",
                    self.examples_per_task, self.num_classes
                ));
            }
            if self.frequency_pool == 0 {
                v.push("frequency_pool must be positive".into());
            }
        }
        if self.mode == Mode::Compositional && v.is_empty() {
            let inv = primitive_inventory(self);
            for s in 0..3 {
                if self.held_out[s] == 0 || self.held_out[s] >= inv[s].len() {
                    v.push(format!(
                        "held_out[{s}] = {} must lie in 1..{}",
                        self.held_out[s],
                        inv[s].len()
                    ));
                }
            }
        }
        v
    }
}

/// One entry of a primitive inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Primitive {
    Elementwise(ElementwiseTransform),
    Filter(FilterTransform),
    Labeler(LabelerTransform),
    Substitution(SubstitutionTransform),
    Rearrange(RearrangeTransform),
    Cell(Cell),
}

/// The three primitive slots of a family, in a fixed enumeration order.
pub fn primitive_inventory(cfg: &GenConfig) -> [Vec<Primitive>; 3] {
    let vmax = cfg.vocab_size as i64;
    let elementwise: Vec<Primitive> = [
        ElementwiseKind::Mul,
        ElementwiseKind::Add,
        ElementwiseKind::Div,
        ElementwiseKind::Mod,
    ]
    .into_iter()
    .flat_map(|k| (1..vmax).map(move |v| Primitive::Elementwise(ElementwiseTransform { kind: k, v })))
    .collect();
    match cfg.family {
        Family::Classification => {
            let mut filters = Vec::new();
            for kind in [FilterKind::MultipleOf, FilterKind::GreaterThan, FilterKind::ExactDivisorCount] {
                for v in 1..vmax {
                    for negated in [false, true] {
                        filters.push(Primitive::Filter(FilterTransform { kind, v, negated }));
                    }
                }
            }
            let labelers = LabelerTransform::ALL.iter().map(|&l| Primitive::Labeler(l)).collect();
            [elementwise, filters, labelers]
        }
        Family::Transduction => {
            let mut subs = Vec::new();
            for from in 1..vmax {
                for to in 0..vmax {
                    if from != to {
                        subs.push(Primitive::Substitution(SubstitutionTransform::ReplaceValue { from, to }));
                    }
                }
            }
            let mut fns = Vec::new();
            for a in 1..=3 {
                for b in 0..=3 {
                    fns.push(PositionFn::Affine { a, b });
                }
            }
            fns.extend([PositionFn::Other, PositionFn::AbsDiff, PositionFn::Sum]);
            for i in 1..=cfg.seq_len {
                for j in 1..=cfg.seq_len {
                    for &f in &fns {
                        subs.push(Primitive::Substitution(SubstitutionTransform::ReplacePosition { i, j, f }));
                    }
                }
            }
            let mut rearr = vec![
                Primitive::Rearrange(RearrangeTransform::SortAscending),
                Primitive::Rearrange(RearrangeTransform::SortDescending),
                Primitive::Rearrange(RearrangeTransform::Reverse),
            ];
            for i in 1..=cfg.seq_len {
                for j in i + 1..=cfg.seq_len {
                    rearr.push(Primitive::Rearrange(RearrangeTransform::Swap { i, j }));
                }
            }
            for v in 1..cfg.seq_len {
                rearr.push(Primitive::Rearrange(RearrangeTransform::ShiftRight { v }));
            }
            [elementwise, subs, rearr]
        }
        Family::Pathfinding => {
            let n = cfg.grid_size;
            let cells: Vec<Primitive> = (0..n * n).map(|i| Primitive::Cell(Cell::from_raster(i, n))).collect();
            [cells.clone(), cells.clone(), cells]
        }
    }
}

/// Primitive inventory plus the held-out subsets of a compositional benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionalSplit {
    pub inventory: [Vec<Primitive>; 3],
    /// Sorted local indices per slot.
    pub held_out: [Vec<usize>; 3],
}

impl CompositionalSplit {
    /// Global id of local index 0 in each slot.
    pub fn offsets(&self) -> [usize; 3] {
        let a = self.inventory[0].len();
        let b = a + self.inventory[1].len();
        [0, a, b]
    }

    pub fn num_primitives(&self) -> usize {
        self.inventory.iter().map(Vec::len).sum()
    }

    pub fn global_id(&self, slot: usize, local: usize) -> usize {
        self.offsets()[slot] + local
    }

    pub fn is_held_out(&self, slot: usize, local: usize) -> bool {
        self.held_out[slot].binary_search(&local).is_ok()
    }

    /// `true` for every global id a training task may use.
    pub fn seen_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.num_primitives());
        for s in 0..3 {
            mask.extend((0..self.inventory[s].len()).map(|i| !self.is_held_out(s, i)));
        }
        mask
    }

    /// Slots of a global id triple that hold an unseen primitive.
    pub fn unseen_slots(&self, ids: [usize; 3]) -> Vec<usize> {
        let off = self.offsets();
        (0..3)
            .filter(|&s| ids[s] >= off[s] && self.is_held_out(s, ids[s] - off[s]))
            .collect()
    }

    fn seen(&self, slot: usize) -> Vec<usize> {
        (0..self.inventory[slot].len())
            .filter(|&i| !self.is_held_out(slot, i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub spec: TaskSpec,
    pub examples: Vec<Example>,
}

impl Task {
    /// The first `k` examples, the adaptation set of a k-shot evaluation.
    pub fn support(&self, k: usize) -> &[Example] {
        &self.examples[..k.min(self.examples.len())]
    }

    /// Examples after the support pool; disjoint from every `support(k)`
    /// with `k <= support_size`.
    pub fn eval_examples(&self, support_size: usize) -> &[Example] {
        &self.examples[support_size.min(self.examples.len())..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskSet {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenStats {
    pub candidates: usize,
    pub accepted: usize,
    pub duplicates: usize,
    pub rejected: usize,
    pub rejected_by_reason: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub config: GenConfig,
    pub pool_seed: u64,
    pub probe_seed: u64,
    pub compositional: Option<CompositionalSplit>,
    pub stats: GenStats,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSplit {
    pub meta: SplitMeta,
    pub train: Vec<Task>,
    pub val: Vec<Task>,
    pub test: Vec<Task>,
}

impl BenchmarkSplit {
    pub fn tasks(&self, set: TaskSet) -> &[Task] {
        match set {
            TaskSet::Train => &self.train,
            TaskSet::Val => &self.val,
            TaskSet::Test => &self.test,
        }
    }

    pub fn family(&self) -> Family {
        self.meta.config.family
    }

    pub fn mode(&self) -> Mode {
        self.meta.config.mode
    }
}

/// Shared random inputs used to compare tasks.
pub fn probe_inputs(cfg: &GenConfig) -> Vec<Vec<Token>> {
    let mut rng = rng_for(cfg.seed, "probe", 0);
    (0..cfg.probe_size)
        .map(|_| sample_sequence(&mut rng, cfg.vocab_size, cfg.seq_len))
        .collect()
}

fn frequency_pool(cfg: &GenConfig) -> Vec<Vec<Token>> {
    let mut rng = rng_for(cfg.seed, "frequency-pool", 0);
    (0..cfg.frequency_pool)
        .map(|_| sample_sequence(&mut rng, cfg.vocab_size, cfg.seq_len))
        .collect()
}

const DISCARD: u16 = u16::MAX;

/// Behavioural fingerprint of a task: outputs on every probe input (with
/// discards marked) for function families, endpoint identity for paths.
pub fn task_signature(spec: &TaskSpec, probes: &[Vec<Token>], vocab_size: usize) -> Result<Vec<u16>, GenError> {
    let mut sig = Vec::new();
    match &spec.kind {
        TaskKind::Classification { .. } => {
            for x in probes {
                sig.push(match classify(spec, x)? {
                    PipelineOutput::Value(c) => c as u16,
                    PipelineOutput::Discard => DISCARD,
                });
            }
        }
        TaskKind::Transduction { .. } => {
            for x in probes {
                match eval_transduction_pipeline(spec, x, vocab_size)? {
                    PipelineOutput::Value(y) => sig.extend(y.iter().map(|&t| t as u16)),
                    PipelineOutput::Discard => sig.push(DISCARD),
                }
            }
        }
        TaskKind::Pathfinding { start, end, waypoint } => {
            // rasters need a size; any injective encoding works for identity
            sig.extend([start.0, start.1, end.0, end.1].map(|v| v as u16));
            match waypoint {
                Some(w) => sig.extend([w.0 as u16, w.1 as u16]),
                None => sig.push(DISCARD),
            }
        }
    }
    Ok(sig)
}

/// Keeps the first task of every group that agrees on all probe inputs.
pub fn dedup_tasks(
    specs: Vec<TaskSpec>,
    probes: &[Vec<Token>],
    vocab_size: usize,
) -> Result<Vec<TaskSpec>, GenError> {
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    for spec in specs {
        if seen.insert(task_signature(&spec, probes, vocab_size)?) {
            kept.push(spec);
        }
    }
    Ok(kept)
}

/// Which slots a candidate may draw from.
#[derive(Clone, Copy)]
enum Draw {
    Any,
    SeenOnly,
    OneUnseen,
}

struct Context<'a> {
    cfg: &'a GenConfig,
    inventory: [Vec<Primitive>; 3],
    comp: Option<&'a CompositionalSplit>,
    seen: [Vec<usize>; 3],
    pool: Vec<Vec<Token>>,
    probes: Vec<Vec<Token>>,
}

enum Outcome {
    Duplicate,
    Failed { signature: Option<Vec<u16>>, reason: String },
    Built { task: Task, signature: Vec<u16> },
}

fn reason_of(err: &GenError) -> String {
    match err {
        GenError::Rejected(msg) if msg.contains("distinct outputs") => "too-few-classes".into(),
        GenError::Rejected(msg) if msg.contains("class quota") => "class-quota".into(),
        GenError::Rejected(msg) if msg.contains("in-range") => "out-of-range-outputs".into(),
        GenError::ResampleCap { .. } => "obstacle-resample-cap".into(),
        GenError::PositionOutOfRange { .. } => "position-out-of-range".into(),
        _ => "other".into(),
    }
}

impl Context<'_> {
    fn pick(&self, rng: &mut ChaCha8Rng, draw: Draw) -> [usize; 3] {
        match draw {
            Draw::Any => [0, 1, 2].map(|s| rng.random_range(0..self.inventory[s].len())),
            Draw::SeenOnly => [0, 1, 2].map(|s| self.seen[s][rng.random_range(0..self.seen[s].len())]),
            Draw::OneUnseen => {
                let comp = self.comp.expect("held-out draws need a compositional split");
                let unseen = rng.random_range(0..3);
                [0, 1, 2].map(|s| {
                    if s == unseen {
                        comp.held_out[s][rng.random_range(0..comp.held_out[s].len())]
                    } else {
                        self.seen[s][rng.random_range(0..self.seen[s].len())]
                    }
                })
            }
        }
    }

    fn limits(&self) -> SamplingLimits {
        SamplingLimits {
            vocab_size: self.cfg.vocab_size,
            seq_len: self.cfg.seq_len,
            examples: self.cfg.examples_per_task,
            max_draws: self.cfg.max_draws,
        }
    }

    /// Draws a task specification; classification class maps are fixed here.
    fn spec(&self, rng: &mut ChaCha8Rng, draw: Draw) -> Result<TaskSpec, GenError> {
        let compositional = self.cfg.mode == Mode::Compositional;
        let mut locals = self.pick(rng, draw);
        let inv = &self.inventory;
        let kind = match self.cfg.family {
            Family::Classification => {
                let (Primitive::Elementwise(e), Primitive::Filter(f), Primitive::Labeler(l)) =
                    (inv[0][locals[0]], inv[1][locals[1]], inv[2][locals[2]])
                else {
                    unreachable!("classification inventory slots")
                };
                let class_map = select_classes(&e, &f, &l, &self.pool, self.cfg.num_classes)?;
                TaskKind::Classification {
                    elementwise: e,
                    filter: f,
                    labeler: l,
                    class_map,
                }
            }
            Family::Transduction => {
                let (Primitive::Elementwise(e), Primitive::Substitution(s), Primitive::Rearrange(r)) =
                    (inv[0][locals[0]], inv[1][locals[1]], inv[2][locals[2]])
                else {
                    unreachable!("transduction inventory slots")
                };
                TaskKind::Transduction {
                    elementwise: e,
                    substitution: s,
                    rearrange: r,
                }
            }
            Family::Pathfinding => {
                // endpoints (and waypoint) must be pairwise distinct
                let mut tries = 0;
                while locals[0] == locals[1] || (compositional && (locals[2] == locals[0] || locals[2] == locals[1])) {
                    tries += 1;
                    if tries > 10_000 {
                        return Err(GenError::Config("cannot draw distinct path cells".into()));
                    }
                    locals = self.pick(rng, draw);
                }
                let cell = |s: usize| match inv[s][locals[s]] {
                    Primitive::Cell(c) => c,
                    _ => unreachable!("path inventory slots"),
                };
                TaskKind::Pathfinding {
                    start: cell(0),
                    end: cell(1),
                    waypoint: compositional.then(|| cell(2)),
                }
            }
        };
        let primitive_ids = self
            .comp
            .map(|c| [0, 1, 2].map(|s| c.global_id(s, locals[s])));
        Ok(TaskSpec { kind, primitive_ids })
    }

    fn examples(&self, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Example>, GenError> {
        match spec.family() {
            Family::Classification => fill_classification_examples(spec, &self.limits(), rng),
            Family::Transduction => build_transduction_examples(spec, &self.limits(), rng),
            Family::Pathfinding => {
                let settings = GridSettings {
                    size: self.cfg.grid_size,
                    num_blobs: self.cfg.num_blobs,
                    target_offset: self.cfg.path_offset,
                    max_resample: self.cfg.max_resample,
                };
                (0..self.cfg.examples_per_task)
                    .map(|_| gen_pathfinding_example(spec, &settings, rng))
                    .collect()
            }
        }
    }

    fn candidate(&self, stream: &str, index: usize, draw: Draw, seen: &HashSet<Vec<u16>>) -> Outcome {
        let mut rng = rng_for(self.cfg.seed, stream, index as u64);
        let spec = match self.spec(&mut rng, draw) {
            Ok(s) => s,
            Err(e) => {
                return Outcome::Failed {
                    signature: None,
                    reason: reason_of(&e),
                }
            }
        };
        let signature = match task_signature(&spec, &self.probes, self.cfg.vocab_size) {
            Ok(s) => s,
            Err(e) => {
                return Outcome::Failed {
                    signature: None,
                    reason: reason_of(&e),
                }
            }
        };
        if seen.contains(&signature) {
            return Outcome::Duplicate;
        }
        match self.examples(&spec, &mut rng) {
            Ok(examples) => Outcome::Built {
                task: Task { spec, examples },
                signature,
            },
            Err(e) => Outcome::Failed {
                signature: Some(signature),
                reason: reason_of(&e),
            },
        }
    }

    /// Accepts `wanted` unique tasks from candidate stream `stream`.
    fn collect(
        &self,
        stream: &str,
        draw: Draw,
        wanted: usize,
        seen: &mut HashSet<Vec<u16>>,
        stats: &mut GenStats,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<Vec<Task>, GenError> {
        let mut accepted = Vec::with_capacity(wanted);
        let mut next = 0;
        while accepted.len() < wanted {
            if next >= self.cfg.max_candidates {
                return Err(GenError::Shortfall {
                    set: stream.to_string(),
                    wanted,
                    got: accepted.len(),
                    candidates: next,
                });
            }
            let end = (next + BATCH).min(self.cfg.max_candidates);
            let snapshot = &*seen;
            let outcomes: Vec<Outcome> = match pool {
                Some(p) => p.install(|| {
                    (next..end)
                        .into_par_iter()
                        .map(|i| self.candidate(stream, i, draw, snapshot))
                        .collect()
                }),
                None => (next..end).map(|i| self.candidate(stream, i, draw, snapshot)).collect(),
            };
            next = end;
            for outcome in outcomes {
                if accepted.len() == wanted {
                    break;
                }
                stats.candidates += 1;
                match outcome {
                    Outcome::Duplicate => stats.duplicates += 1,
                    Outcome::Failed { signature, reason } => {
                        if signature.is_some_and(|s| seen.contains(&s)) {
                            stats.duplicates += 1;
                        } else {
                            stats.rejected += 1;
                            *stats.rejected_by_reason.entry(reason).or_default() += 1;
                        }
                    }
                    Outcome::Built { task, signature } => {
                        if seen.insert(signature) {
                            stats.accepted += 1;
                            accepted.push(task);
                        } else {
                            stats.duplicates += 1;
                        }
                    }
                }
            }
        }
        Ok(accepted)
    }
}

/// Builds a complete benchmark split. `jobs > 1` builds candidates on a
/// thread pool; the result is identical for every job count.
pub fn build_split(cfg: &GenConfig, jobs: usize) -> Result<BenchmarkSplit, GenError> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(GenError::Config(violations.join("; ")));
    }
    let inventory = primitive_inventory(cfg);
    let comp = match cfg.mode {
        Mode::Plain => None,
        Mode::Compositional => {
            let mut rng = rng_for(cfg.seed, "held-out", 0);
            let held_out = [0, 1, 2].map(|s| {
                let mut idx = sample(&mut rng, inventory[s].len(), cfg.held_out[s]).into_vec();
                idx.sort_unstable();
                idx
            });
            Some(CompositionalSplit {
                inventory: inventory.clone(),
                held_out,
            })
        }
    };
    let seen = match &comp {
        Some(c) => [0, 1, 2].map(|s| c.seen(s)),
        None => [0, 1, 2].map(|s| (0..inventory[s].len()).collect()),
    };
    let needs_pool = cfg.family == Family::Classification;
    let ctx = Context {
        cfg,
        inventory,
        comp: comp.as_ref(),
        seen,
        pool: if needs_pool { frequency_pool(cfg) } else { Vec::new() },
        probes: if cfg.family == Family::Pathfinding {
            Vec::new()
        } else {
            probe_inputs(cfg)
        },
    };
    let thread_pool = if jobs > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| GenError::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let mut signatures = HashSet::new();
    let mut stats = GenStats::default();
    let (train, val, test) = match cfg.mode {
        Mode::Plain => {
            let mut all = ctx.collect(
                "task",
                Draw::Any,
                cfg.total_tasks(),
                &mut signatures,
                &mut stats,
                thread_pool.as_ref(),
            )?;
            shuffle(&mut all, &mut rng_for(cfg.seed, "assign", 0));
            let test = all.split_off(cfg.train_tasks + cfg.val_tasks);
            let val = all.split_off(cfg.train_tasks);
            (all, val, test)
        }
        Mode::Compositional => {
            let train = ctx.collect(
                "train",
                Draw::SeenOnly,
                cfg.train_tasks,
                &mut signatures,
                &mut stats,
                thread_pool.as_ref(),
            )?;
            let mut held = ctx.collect(
                "held-out",
                Draw::OneUnseen,
                cfg.val_tasks + cfg.test_tasks,
                &mut signatures,
                &mut stats,
                thread_pool.as_ref(),
            )?;
            shuffle(&mut held, &mut rng_for(cfg.seed, "assign", 0));
            let test = held.split_off(cfg.val_tasks);
            (train, held, test)
        }
    };
    Ok(BenchmarkSplit {
        meta: SplitMeta {
            config: cfg.clone(),
            pool_seed: derive_seed(cfg.seed, "frequency-pool", 0),
            probe_seed: derive_seed(cfg.seed, "probe", 0),
            compositional: comp,
            stats,
        },
        train,
        val,
        test,
    })
}

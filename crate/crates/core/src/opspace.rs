//! Operator workloads, the tiled schedule space, and generation of schedule
//! candidates (random sampling and genetic reproduction).
//!
//! Every operator is lowered to a batched GEMM loop nest `(batch, m, n, k)`
//! with three spatial loops and one reduction loop. Each spatial loop carries
//! a two-level tiling (elements per thread block, elements per thread) and the
//! reduction loop is split into `k_split` equal steps. Only perfect tilings
//! are legal.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use itertools::iproduct;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Hardware ceiling on threads per block.
pub const MAX_BLOCK_THREADS: u64 = 1024;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpaceError {
    #[error("invalid operator: {0}")]
    InvalidOperator(String),
    #[error("illegal schedule: {0}")]
    IllegalSchedule(String),
    #[error("schedule space exhausted: requested {requested} candidates but only {available} legal schedules exist")]
    SpaceExhausted { requested: usize, available: usize },
    #[error("reproduction needs at least one parent")]
    NoParents,
    #[error("parents belong to different operators")]
    MixedOperators,
    #[error("invalid genetic rates: {0}")]
    InvalidRates(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Mm,
    Mv,
    Conv,
}

/// Shape of one operator workload.
///
/// `Mv` is a matrix-vector product, i.e. an `Mm` whose M extent is 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OperatorSpec {
    Mm {
        batch: u64,
        m: u64,
        n: u64,
        k: u64,
    },
    Mv {
        batch: u64,
        n: u64,
        k: u64,
    },
    Conv {
        batch: u64,
        height: u64,
        width: u64,
        in_channels: u64,
        out_channels: u64,
        kernel_size: u64,
        stride: u64,
        padding: u64,
    },
}

/// Extents of the GEMM loop nest an operator lowers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmShape {
    pub batch: u64,
    pub m: u64,
    pub n: u64,
    pub k: u64,
}

impl GemmShape {
    pub fn volume(&self) -> u64 {
        self.batch * self.m * self.n * self.k
    }

    pub fn extent(&self, dim: Dim) -> u64 {
        match dim {
            Dim::Batch => self.batch,
            Dim::M => self.m,
            Dim::N => self.n,
        }
    }
}

impl OperatorSpec {
    pub fn mm(batch: u64, m: u64, n: u64, k: u64) -> Result<Self, SpaceError> {
        let op = OperatorSpec::Mm { batch, m, n, k };
        op.validate()?;
        Ok(op)
    }

    pub fn mv(batch: u64, n: u64, k: u64) -> Result<Self, SpaceError> {
        let op = OperatorSpec::Mv { batch, n, k };
        op.validate()?;
        Ok(op)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        batch: u64,
        height: u64,
        width: u64,
        in_channels: u64,
        out_channels: u64,
        kernel_size: u64,
        stride: u64,
        padding: u64,
    ) -> Result<Self, SpaceError> {
        let op = OperatorSpec::Conv {
            batch,
            height,
            width,
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
        };
        op.validate()?;
        Ok(op)
    }

    pub fn kind(&self) -> OpKind {
        match self {
            OperatorSpec::Mm { .. } => OpKind::Mm,
            OperatorSpec::Mv { .. } => OpKind::Mv,
            OperatorSpec::Conv { .. } => OpKind::Conv,
        }
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        let bad = |msg: String| Err(SpaceError::InvalidOperator(msg));
        match *self {
            OperatorSpec::Mm { batch, m, n, k } => {
                if [batch, m, n, k].contains(&0) {
                    return bad(format!("{self}: all extents must be >= 1"));
                }
            }
            OperatorSpec::Mv { batch, n, k } => {
                if [batch, n, k].contains(&0) {
                    return bad(format!("{self}: all extents must be >= 1"));
                }
            }
            OperatorSpec::Conv {
                batch,
                height,
                width,
                in_channels,
                out_channels,
                kernel_size,
                stride,
                padding,
            } => {
                if [batch, height, width, in_channels, out_channels, kernel_size, stride]
                    .contains(&0)
                {
                    return bad(format!("{self}: extents and stride must be >= 1"));
                }
                for (name, extent) in [("height", height), ("width", width)] {
                    let padded = extent + 2 * padding;
                    if padded < kernel_size || (padded - kernel_size) % stride != 0 {
                        return bad(format!(
                            "{self}: output {name} ({extent} + 2*{padding} - {kernel_size})/{stride} + 1 is not a positive integer"
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Output spatial extent `(out_height, out_width)` of a convolution.
    pub fn conv_output(&self) -> Option<(u64, u64)> {
        match *self {
            OperatorSpec::Conv {
                height,
                width,
                kernel_size,
                stride,
                padding,
                ..
            } => Some((
                (height + 2 * padding - kernel_size) / stride + 1,
                (width + 2 * padding - kernel_size) / stride + 1,
            )),
            _ => None,
        }
    }

    /// Lowers the operator to its GEMM loop nest. Convolutions use the
    /// implicit-GEMM form: `m = batch*oh*ow`, `n = out_channels`,
    /// `k = in_channels*kernel_size^2`.
    pub fn gemm(&self) -> GemmShape {
        match *self {
            OperatorSpec::Mm { batch, m, n, k } => GemmShape { batch, m, n, k },
            OperatorSpec::Mv { batch, n, k } => GemmShape { batch, m: 1, n, k },
            OperatorSpec::Conv {
                batch,
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => {
                let (oh, ow) = self.conv_output().expect("conv");
                GemmShape {
                    batch: 1,
                    m: batch * oh * ow,
                    n: out_channels,
                    k: in_channels * kernel_size * kernel_size,
                }
            }
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let (tag, dims): (u8, Vec<u64>) = match *self {
            OperatorSpec::Mm { batch, m, n, k } => (1, vec![batch, m, n, k]),
            OperatorSpec::Mv { batch, n, k } => (2, vec![batch, 1, n, k]),
            OperatorSpec::Conv {
                batch,
                height,
                width,
                in_channels,
                out_channels,
                kernel_size,
                stride,
                padding,
            } => (
                3,
                vec![
                    batch,
                    height,
                    width,
                    in_channels,
                    out_channels,
                    kernel_size,
                    stride,
                    padding,
                ],
            ),
        };
        out.push(tag);
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
}

impl fmt::Display for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            OperatorSpec::Mm { batch, m, n, k } => write!(f, "mm:{batch},{m},{n},{k}"),
            OperatorSpec::Mv { batch, n, k } => write!(f, "mv:{batch},1,{n},{k}"),
            OperatorSpec::Conv {
                batch,
                height,
                width,
                in_channels,
                out_channels,
                kernel_size,
                stride,
                padding,
            } => write!(
                f,
                "conv:{batch},{height},{width},{in_channels},{out_channels},{kernel_size},{stride},{padding}"
            ),
        }
    }
}

impl FromStr for OperatorSpec {
    type Err = SpaceError;

    /// Parses `mm:B,M,N,K`, `mv:B,1,N,K` or `conv:B,H,W,Cin,Cout,KS,S,P`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SpaceError::InvalidOperator(format!("cannot parse operator '{s}'"));
        let (kind, rest) = s.trim().split_once(':').ok_or_else(bad)?;
        let nums = rest
            .split(',')
            .map(|t| t.trim().parse::<u64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad())?;
        match (kind.to_ascii_lowercase().as_str(), nums.as_slice()) {
            ("mm", &[b, m, n, k]) => OperatorSpec::mm(b, m, n, k),
            ("mv", &[b, m, n, k]) => {
                if m != 1 {
                    return Err(SpaceError::InvalidOperator(format!(
                        "'{s}': matrix-vector operators need M = 1"
                    )));
                }
                OperatorSpec::mv(b, n, k)
            }
            ("conv", &[b, h, w, ci, co, ks, st, p]) => OperatorSpec::conv(b, h, w, ci, co, ks, st, p),
            _ => Err(bad()),
        }
    }
}

/// One of the three spatial loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dim {
    Batch,
    M,
    N,
}

impl Dim {
    pub const ALL: [Dim; 3] = [Dim::Batch, Dim::M, Dim::N];
}

/// Two-level tiling of one spatial loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Tile {
    /// Elements of the loop covered by one thread block.
    pub block: u64,
    /// Elements of the loop covered by one thread.
    pub thread: u64,
}

impl Tile {
    pub const UNIT: Tile = Tile { block: 1, thread: 1 };

    pub fn new(block: u64, thread: u64) -> Self {
        Tile { block, thread }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Schedule {
    pub batch: Tile,
    pub m: Tile,
    pub n: Tile,
    /// Number of reduction steps the k loop is split into.
    pub k_split: u64,
    /// Unroll depth of the inner reduction loop.
    pub unroll: u64,
    /// Vector width of the innermost (n) thread loop.
    pub vector: u64,
}

impl Schedule {
    /// Every factor 1: one thread per output element, one reduction step.
    pub const TRIVIAL: Schedule = Schedule {
        batch: Tile::UNIT,
        m: Tile::UNIT,
        n: Tile::UNIT,
        k_split: 1,
        unroll: 1,
        vector: 1,
    };

    pub fn tile(&self, dim: Dim) -> Tile {
        match dim {
            Dim::Batch => self.batch,
            Dim::M => self.m,
            Dim::N => self.n,
        }
    }

    pub fn tile_mut(&mut self, dim: Dim) -> &mut Tile {
        match dim {
            Dim::Batch => &mut self.batch,
            Dim::M => &mut self.m,
            Dim::N => &mut self.n,
        }
    }

    /// Thread blocks launched.
    pub fn grid(&self, shape: &GemmShape) -> u64 {
        Dim::ALL
            .iter()
            .map(|&d| shape.extent(d) / self.tile(d).block)
            .product()
    }

    /// Threads per block.
    pub fn block_threads(&self) -> u64 {
        Dim::ALL
            .iter()
            .map(|&d| self.tile(d).block / self.tile(d).thread)
            .product()
    }

    /// Output elements computed by one thread.
    pub fn thread_outputs(&self) -> u64 {
        self.batch.thread * self.m.thread * self.n.thread
    }

    /// Length of one reduction step.
    pub fn k_tile(&self, shape: &GemmShape) -> u64 {
        shape.k / self.k_split
    }

    pub fn reduction_steps(&self) -> u64 {
        self.k_split
    }

    /// Shared-memory elements staged per block per reduction step.
    pub fn shared_footprint(&self, shape: &GemmShape) -> u64 {
        let kt = self.k_tile(shape);
        self.batch.block * kt * (self.m.block + self.n.block)
    }

    /// Checks the structural invariants every schedule must satisfy,
    /// independent of search limits.
    pub fn check(&self, shape: &GemmShape) -> Result<(), SpaceError> {
        let bad = |msg: String| Err(SpaceError::IllegalSchedule(msg));
        for d in Dim::ALL {
            let t = self.tile(d);
            let extent = shape.extent(d);
            if t.block == 0 || t.thread == 0 {
                return bad(format!("{d:?} tile factors must be >= 1"));
            }
            if !extent.is_multiple_of(t.block) {
                return bad(format!("{d:?} block tile {} does not divide extent {extent}", t.block));
            }
            if !t.block.is_multiple_of(t.thread) {
                return bad(format!(
                    "{d:?} thread tile {} does not divide block tile {}",
                    t.thread, t.block
                ));
            }
        }
        if self.k_split == 0 || !shape.k.is_multiple_of(self.k_split) {
            return bad(format!("reduction split {} does not divide k = {}", self.k_split, shape.k));
        }
        let bt = self.block_threads();
        if !(1..=MAX_BLOCK_THREADS).contains(&bt) {
            return bad(format!("block size {bt} outside [1, {MAX_BLOCK_THREADS}]"));
        }
        if ![1, 2, 4].contains(&self.vector) || !self.n.thread.is_multiple_of(self.vector) {
            return bad(format!(
                "vector width {} must be 1, 2 or 4 and divide the innermost tile {}",
                self.vector, self.n.thread
            ));
        }
        if self.unroll == 0 || !self.k_tile(shape).is_multiple_of(self.unroll) {
            return bad(format!(
                "unroll depth {} does not divide the reduction step {}",
                self.unroll,
                self.k_tile(shape)
            ));
        }
        Ok(())
    }

    fn encode(&self, out: &mut Vec<u8>) {
        for v in [
            self.batch.block,
            self.batch.thread,
            self.m.block,
            self.m.thread,
            self.n.block,
            self.n.thread,
            self.k_split,
            self.unroll,
            self.vector,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Search-space limits applied on top of the structural schedule rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceLimits {
    pub max_threads_per_block: u64,
    /// Register budget: output elements one thread may accumulate.
    pub max_thread_outputs: u64,
    /// Shared-memory budget in elements (48 KiB of f32 by default).
    pub max_shared_elems: u64,
    pub vector_widths: Vec<u64>,
    pub unroll_depths: Vec<u64>,
}

impl Default for SpaceLimits {
    fn default() -> Self {
        SpaceLimits {
            max_threads_per_block: MAX_BLOCK_THREADS,
            max_thread_outputs: 64,
            max_shared_elems: 12 * 1024,
            vector_widths: vec![1, 2, 4],
            unroll_depths: vec![1, 2, 4],
        }
    }
}

impl SpaceLimits {
    /// Only the all-ones schedule survives these limits.
    pub fn trivial() -> Self {
        SpaceLimits {
            max_threads_per_block: 1,
            max_thread_outputs: 1,
            max_shared_elems: u64::MAX,
            vector_widths: vec![1],
            unroll_depths: vec![1],
        }
    }

    pub fn admits(&self, s: &Schedule, shape: &GemmShape) -> bool {
        s.check(shape).is_ok() && self.first_violation(s, shape).is_none()
    }

    fn first_violation(&self, s: &Schedule, shape: &GemmShape) -> Option<Violation> {
        for d in Dim::ALL {
            let t = s.tile(d);
            if t.block == 0 || t.thread == 0 || !t.block.is_multiple_of(t.thread) {
                return Some(Violation::ThreadTile(d));
            }
        }
        let kt = s.k_tile(shape);
        if !self.unroll_depths.contains(&s.unroll) || !kt.is_multiple_of(s.unroll) {
            return Some(Violation::Unroll);
        }
        if !self.vector_widths.contains(&s.vector) || !s.n.thread.is_multiple_of(s.vector) {
            return Some(Violation::Vector);
        }
        if s.block_threads() > self.max_threads_per_block.min(MAX_BLOCK_THREADS) {
            return Some(Violation::BlockThreads);
        }
        if s.thread_outputs() > self.max_thread_outputs {
            return Some(Violation::ThreadOutputs);
        }
        if s.shared_footprint(shape) > self.max_shared_elems {
            return Some(Violation::SharedFootprint);
        }
        None
    }
}

#[derive(Debug, Clone, Copy)]
enum Violation {
    ThreadTile(Dim),
    Unroll,
    Vector,
    BlockThreads,
    ThreadOutputs,
    SharedFootprint,
}

impl Violation {
    fn knobs(self) -> &'static [Knob] {
        use Knob::*;
        match self {
            Violation::ThreadTile(Dim::Batch) => &[BatchThread, BatchBlock],
            Violation::ThreadTile(Dim::M) => &[MThread, MBlock],
            Violation::ThreadTile(Dim::N) => &[NThread, NBlock],
            Violation::Unroll => &[Unroll, KSplit],
            Violation::Vector => &[Vector, NThread],
            Violation::BlockThreads => &[BatchThread, MThread, NThread, BatchBlock, MBlock, NBlock],
            Violation::ThreadOutputs => &[BatchThread, MThread, NThread],
            Violation::SharedFootprint => &[KSplit, BatchBlock, MBlock, NBlock],
        }
    }
}

/// Sorted divisors of `n`.
pub fn divisors(n: u64) -> Vec<u64> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n.is_multiple_of(d) {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

/// All `(block, thread)` tilings of one loop of the given extent.
fn tile_pairs(extent: u64) -> Vec<Tile> {
    divisors(extent)
        .into_iter()
        .flat_map(|b| divisors(b).into_iter().map(move |t| Tile::new(b, t)))
        .collect()
}

/// Lazily enumerates every legal schedule of `op` under `limits`, in a fixed
/// nested order (batch, m, n tilings, then reduction split, unroll, vector).
pub fn enumerate_space(op: &OperatorSpec, limits: &SpaceLimits) -> impl Iterator<Item = Schedule> {
    let shape = op.gemm();
    let limits = limits.clone();
    let batch = tile_pairs(shape.batch);
    let m = tile_pairs(shape.m);
    let n = tile_pairs(shape.n);
    let splits = divisors(shape.k);
    let unrolls = limits.unroll_depths.clone();
    let vectors = limits.vector_widths.clone();
    iproduct!(batch, m, n, splits, unrolls, vectors)
        .map(|(batch, m, n, k_split, unroll, vector)| Schedule {
            batch,
            m,
            n,
            k_split,
            unroll,
            vector,
        })
        .filter(move |s| limits.admits(s, &shape))
}

pub fn space_size(op: &OperatorSpec, limits: &SpaceLimits) -> usize {
    enumerate_space(op, limits).count()
}

/// Stable 64-bit identity of an `(operator, schedule)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CandidateId(pub u64);

impl CandidateId {
    pub fn of(op: &OperatorSpec, schedule: &Schedule) -> Self {
        let mut bytes = Vec::with_capacity(160);
        op.encode(&mut bytes);
        schedule.encode(&mut bytes);
        let digest = Sha256::digest(&bytes);
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        CandidateId(u64::from_le_bytes(head))
    }
}

impl fmt::Display for CandidateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: CandidateId,
    pub op: OperatorSpec,
    pub schedule: Schedule,
    #[serde(default)]
    pub lineage: Vec<CandidateId>,
}

impl Candidate {
    pub fn new(op: OperatorSpec, schedule: Schedule) -> Self {
        Candidate {
            id: CandidateId::of(&op, &schedule),
            op,
            schedule,
            lineage: Vec::new(),
        }
    }

    fn with_lineage(mut self, lineage: Vec<CandidateId>) -> Self {
        self.lineage = lineage;
        self
    }
}

/// Probabilities of the three ways an offspring is produced. Whatever is
/// left after mutation and crossover is the copy rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneticRates {
    pub mutation: f64,
    pub crossover: f64,
}

impl Default for GeneticRates {
    fn default() -> Self {
        GeneticRates {
            mutation: 0.85,
            crossover: 0.10,
        }
    }
}

impl GeneticRates {
    pub fn copy(&self) -> f64 {
        (1.0 - self.mutation - self.crossover).max(0.0)
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.mutation) || !ok(self.crossover) || self.mutation + self.crossover > 1.0 + 1e-12 {
            return Err(SpaceError::InvalidRates(format!(
                "mutation {} and crossover {} must be probabilities summing to at most 1",
                self.mutation, self.crossover
            )));
        }
        Ok(())
    }
}

/// A single tunable value of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Knob {
    BatchBlock,
    BatchThread,
    MBlock,
    MThread,
    NBlock,
    NThread,
    KSplit,
    Unroll,
    Vector,
}

impl Knob {
    pub const ALL: [Knob; 9] = [
        Knob::BatchBlock,
        Knob::BatchThread,
        Knob::MBlock,
        Knob::MThread,
        Knob::NBlock,
        Knob::NThread,
        Knob::KSplit,
        Knob::Unroll,
        Knob::Vector,
    ];

    fn get(self, s: &Schedule) -> u64 {
        match self {
            Knob::BatchBlock => s.batch.block,
            Knob::BatchThread => s.batch.thread,
            Knob::MBlock => s.m.block,
            Knob::MThread => s.m.thread,
            Knob::NBlock => s.n.block,
            Knob::NThread => s.n.thread,
            Knob::KSplit => s.k_split,
            Knob::Unroll => s.unroll,
            Knob::Vector => s.vector,
        }
    }

    fn set(self, s: &mut Schedule, v: u64) {
        match self {
            Knob::BatchBlock => s.batch.block = v,
            Knob::BatchThread => s.batch.thread = v,
            Knob::MBlock => s.m.block = v,
            Knob::MThread => s.m.thread = v,
            Knob::NBlock => s.n.block = v,
            Knob::NThread => s.n.thread = v,
            Knob::KSplit => s.k_split = v,
            Knob::Unroll => s.unroll = v,
            Knob::Vector => s.vector = v,
        }
    }

    /// Values the knob may take given the rest of `s`.
    fn domain(self, s: &Schedule, shape: &GemmShape, limits: &SpaceLimits) -> Vec<u64> {
        match self {
            Knob::BatchBlock => divisors(shape.batch),
            Knob::MBlock => divisors(shape.m),
            Knob::NBlock => divisors(shape.n),
            Knob::BatchThread => divisors(s.batch.block),
            Knob::MThread => divisors(s.m.block),
            Knob::NThread => divisors(s.n.block),
            Knob::KSplit => divisors(shape.k),
            Knob::Unroll => limits.unroll_depths.clone(),
            Knob::Vector => limits.vector_widths.clone(),
        }
    }
}

/// Groups of knobs exchanged as a unit by crossover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gene {
    Batch,
    M,
    N,
    Reduction,
    Vector,
}

impl Gene {
    pub const ALL: [Gene; 5] = [Gene::Batch, Gene::M, Gene::N, Gene::Reduction, Gene::Vector];

    pub fn knobs(self) -> &'static [Knob] {
        match self {
            Gene::Batch => &[Knob::BatchBlock, Knob::BatchThread],
            Gene::M => &[Knob::MBlock, Knob::MThread],
            Gene::N => &[Knob::NBlock, Knob::NThread],
            Gene::Reduction => &[Knob::KSplit, Knob::Unroll],
            Gene::Vector => &[Knob::Vector],
        }
    }
}

const REPAIR_ATTEMPTS: usize = 64;

/// Resamples unprotected knobs involved in violated constraints until the
/// schedule is legal. Returns `None` when that fails.
fn repair(
    mut s: Schedule,
    protected: &[Knob],
    shape: &GemmShape,
    limits: &SpaceLimits,
    rng: &mut ChaCha8Rng,
) -> Option<Schedule> {
    for _ in 0..REPAIR_ATTEMPTS {
        let Some(violation) = limits.first_violation(&s, shape) else {
            return Some(s);
        };
        let free: Vec<Knob> = violation
            .knobs()
            .iter()
            .copied()
            .filter(|k| !protected.contains(k))
            .collect();
        let knob = *free.choose(rng)?;
        let values = knob.domain(&s, shape, limits);
        let v = *values.choose(rng)?;
        knob.set(&mut s, v);
    }
    limits.admits(&s, shape).then_some(s)
}

fn sample_schedule(
    pairs: &[Vec<Tile>; 3],
    splits: &[u64],
    limits: &SpaceLimits,
    rng: &mut ChaCha8Rng,
) -> Option<Schedule> {
    Some(Schedule {
        batch: *pairs[0].choose(rng)?,
        m: *pairs[1].choose(rng)?,
        n: *pairs[2].choose(rng)?,
        k_split: *splits.choose(rng)?,
        unroll: *limits.unroll_depths.choose(rng)?,
        vector: *limits.vector_widths.choose(rng)?,
    })
}

/// Draws `n` distinct legal candidates, reproducibly for a fixed seed.
///
/// Knobs are sampled independently and filtered; if that stalls (small or
/// sparse spaces) the remainder is drawn from the full enumeration.
pub fn sample_random(
    op: &OperatorSpec,
    n: usize,
    limits: &SpaceLimits,
    seed: u64,
) -> Result<Vec<Candidate>, SpaceError> {
    op.validate()?;
    let shape = op.gemm();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = [tile_pairs(shape.batch), tile_pairs(shape.m), tile_pairs(shape.n)];
    let splits = divisors(shape.k);

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let budget = 64 * n + 1024;
    for _ in 0..budget {
        if out.len() == n {
            break;
        }
        let Some(s) = sample_schedule(&pairs, &splits, limits, &mut rng) else {
            break;
        };
        if limits.admits(&s, &shape) && seen.insert(s) {
            out.push(s);
        }
    }
    if out.len() < n {
        let rest: Vec<Schedule> = enumerate_space(op, limits).filter(|s| !seen.contains(s)).collect();
        let needed = n - out.len();
        if rest.len() < needed {
            return Err(SpaceError::SpaceExhausted {
                requested: n,
                available: out.len() + rest.len(),
            });
        }
        for i in rand::seq::index::sample(&mut rng, rest.len(), needed) {
            out.push(rest[i]);
        }
    }
    Ok(out.into_iter().map(|s| Candidate::new(*op, s)).collect())
}

/// Child of `a` with gene `gene` taken from `b`, repaired if the mix is illegal.
pub fn crossover(
    a: &Candidate,
    b: &Candidate,
    gene: Gene,
    limits: &SpaceLimits,
    rng: &mut ChaCha8Rng,
) -> Option<Candidate> {
    let shape = a.op.gemm();
    let mut child = a.schedule;
    for &knob in gene.knobs() {
        knob.set(&mut child, knob.get(&b.schedule));
    }
    let child = repair(child, gene.knobs(), &shape, limits, rng)?;
    Some(Candidate::new(a.op, child).with_lineage(vec![a.id, b.id]))
}

/// Resamples one knob of `parent` to a different legal value. Returns a copy
/// of the parent when no knob has a legal alternative.
pub fn mutate(parent: &Candidate, limits: &SpaceLimits, rng: &mut ChaCha8Rng) -> Candidate {
    let shape = parent.op.gemm();
    let mut knobs = Knob::ALL.to_vec();
    knobs.shuffle(rng);
    for knob in knobs {
        let current = knob.get(&parent.schedule);
        let mut values: Vec<u64> = knob
            .domain(&parent.schedule, &shape, limits)
            .into_iter()
            .filter(|&v| v != current)
            .collect();
        values.shuffle(rng);
        for v in values {
            let mut s = parent.schedule;
            knob.set(&mut s, v);
            if let Some(s) = repair(s, &[knob], &shape, limits, rng) {
                if s != parent.schedule {
                    return Candidate::new(parent.op, s).with_lineage(vec![parent.id]);
                }
            }
        }
    }
    Candidate::new(parent.op, parent.schedule).with_lineage(vec![parent.id])
}

const DISTINCT_ATTEMPTS: usize = 8;

/// Produces `n` offspring from `parents` by crossover, mutation and copying.
///
/// Parents are cycled: offspring `i` is derived from `parents[i % len]`.
/// Each offspring is retried a few times to avoid duplicating one already in
/// the generation; duplicates are accepted when that fails.
pub fn reproduce(
    parents: &[Candidate],
    n: usize,
    rates: &GeneticRates,
    limits: &SpaceLimits,
    seed: u64,
) -> Result<Vec<Candidate>, SpaceError> {
    rates.validate()?;
    let first = parents.first().ok_or(SpaceError::NoParents)?;
    if parents.iter().any(|p| p.op != first.op) {
        return Err(SpaceError::MixedOperators);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let a = &parents[i % parents.len()];
        let mut child = None;
        for _ in 0..DISTINCT_ATTEMPTS {
            let c = offspring(a, parents, rates, limits, &mut rng);
            let fresh = !seen.contains(&c.id);
            child = Some(c);
            if fresh {
                break;
            }
        }
        let child = child.expect("at least one attempt");
        seen.insert(child.id);
        out.push(child);
    }
    Ok(out)
}

fn offspring(
    a: &Candidate,
    parents: &[Candidate],
    rates: &GeneticRates,
    limits: &SpaceLimits,
    rng: &mut ChaCha8Rng,
) -> Candidate {
    let u: f64 = rng.random();
    if u < rates.crossover && parents.len() > 1 {
        let others: Vec<&Candidate> = parents.iter().filter(|p| p.id != a.id).collect();
        if let Some(b) = others.choose(rng) {
            let gene = *Gene::ALL.choose(rng).expect("genes");
            if let Some(c) = crossover(a, b, gene, limits, rng) {
                return c;
            }
        }
        mutate(a, limits, rng)
    } else if u < rates.crossover + rates.mutation {
        mutate(a, limits, rng)
    } else {
        Candidate::new(a.op, a.schedule).with_lineage(vec![a.id])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mm(b: u64, m: u64, n: u64, k: u64) -> OperatorSpec {
        OperatorSpec::mm(b, m, n, k).unwrap()
    }

    /// Independent oracle: every integer tuple in range, filtered with `%`.
    fn brute_force(op: &OperatorSpec, limits: &SpaceLimits) -> Vec<Schedule> {
        let g = op.gemm();
        let mut out = Vec::new();
        for bb in 1..=g.batch {
            for bt in 1..=bb {
                for mb in 1..=g.m {
                    for mt in 1..=mb {
                        for nb in 1..=g.n {
                            for nt in 1..=nb {
                                for ks in 1..=g.k {
                                    for &u in &limits.unroll_depths {
                                        for &v in &limits.vector_widths {
                                            let ok = g.batch.is_multiple_of(bb)
                                                && bb % bt == 0
                                                && g.m.is_multiple_of(mb)
                                                && mb % mt == 0
                                                && g.n.is_multiple_of(nb)
                                                && nb % nt == 0
                                                && g.k.is_multiple_of(ks)
                                                && (g.k / ks).is_multiple_of(u)
                                                && nt % v == 0;
                                            if !ok {
                                                continue;
                                            }
                                            let threads = (bb / bt) * (mb / mt) * (nb / nt);
                                            let shared = bb * (g.k / ks) * (mb + nb);
                                            if threads <= limits.max_threads_per_block
                                                && bt * mt * nt <= limits.max_thread_outputs
                                                && shared <= limits.max_shared_elems
                                            {
                                                out.push(Schedule {
                                                    batch: Tile::new(bb, bt),
                                                    m: Tile::new(mb, mt),
                                                    n: Tile::new(nb, nt),
                                                    k_split: ks,
                                                    unroll: u,
                                                    vector: v,
                                                });
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn parse_and_display_round_trip() {
        for s in ["mm:1,512,512,512", "mv:1,1,4096,1024", "conv:16,56,56,64,64,1,1,0"] {
            let op: OperatorSpec = s.parse().unwrap();
            assert_eq!(op.to_string(), s);
        }
        assert_eq!(
            "mv:8,1,4096,1024".parse::<OperatorSpec>().unwrap().gemm(),
            GemmShape { batch: 8, m: 1, n: 4096, k: 1024 }
        );
    }

    #[test]
    fn rejects_bad_operators() {
        assert!("mm:1,0,4,4".parse::<OperatorSpec>().is_err());
        assert!("mv:1,2,4,4".parse::<OperatorSpec>().is_err());
        assert!("mm:1,4,4".parse::<OperatorSpec>().is_err());
        assert!("gemm:1,4,4,4".parse::<OperatorSpec>().is_err());
        // (6 - 3)/2 + 1 is not an integer
        assert!("conv:1,6,6,1,1,3,2,0".parse::<OperatorSpec>().is_err());
        // kernel larger than padded input
        assert!("conv:1,2,2,1,1,5,1,1".parse::<OperatorSpec>().is_err());
        assert!("conv:1,6,6,1,1,3,1,0".parse::<OperatorSpec>().is_ok());
    }

    #[test]
    fn conv_lowers_to_implicit_gemm() {
        let op: OperatorSpec = "conv:16,56,56,64,64,1,1,0".parse().unwrap();
        assert_eq!(op.gemm(), GemmShape { batch: 1, m: 16 * 56 * 56, n: 64, k: 64 });
        let op: OperatorSpec = "conv:2,7,7,3,8,3,2,1".parse().unwrap();
        assert_eq!(op.conv_output(), Some((4, 4)));
        assert_eq!(op.gemm(), GemmShape { batch: 1, m: 32, n: 8, k: 27 });
    }

    #[test]
    fn trivial_shape_has_exactly_one_schedule() {
        let op = mm(1, 1, 1, 1);
        let all: Vec<_> = enumerate_space(&op, &SpaceLimits::trivial()).collect();
        assert_eq!(all, vec![Schedule::TRIVIAL]);
        let all: Vec<_> = enumerate_space(&op, &SpaceLimits::default()).collect();
        assert_eq!(all, vec![Schedule::TRIVIAL]);
    }

    #[test]
    fn enumeration_matches_brute_force_for_small_extents() {
        let limits = SpaceLimits::default();
        let tight = SpaceLimits {
            max_threads_per_block: 16,
            max_thread_outputs: 8,
            max_shared_elems: 40,
            ..SpaceLimits::default()
        };
        for op in [mm(1, 4, 4, 4), mm(2, 8, 4, 6), mm(1, 8, 8, 8), mm(3, 1, 5, 7)] {
            for l in [&limits, &tight] {
                let mut ours: Vec<_> = enumerate_space(&op, l).collect();
                let mut oracle = brute_force(&op, l);
                ours.sort();
                oracle.sort();
                assert_eq!(ours, oracle, "{op}");
            }
        }
    }

    #[test]
    fn enumeration_order_is_deterministic() {
        let op = mm(1, 8, 8, 8);
        let a: Vec<_> = enumerate_space(&op, &SpaceLimits::default()).collect();
        let b: Vec<_> = enumerate_space(&op, &SpaceLimits::default()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn large_shape_respects_block_limit() {
        let op = mm(1, 512, 512, 512);
        let mut n = 0;
        for s in enumerate_space(&op, &SpaceLimits::default()).step_by(97) {
            assert!(s.block_threads() <= 1024);
            n += 1;
        }
        assert!(n > 0);
    }

    #[test]
    fn ids_are_collision_free_on_small_spaces() {
        for op in [mm(1, 8, 8, 8), mm(2, 4, 4, 4), "conv:1,6,6,2,2,3,1,1".parse().unwrap()] {
            let all: Vec<_> = enumerate_space(&op, &SpaceLimits::default()).collect();
            let ids: HashSet<_> = all.iter().map(|s| CandidateId::of(&op, s)).collect();
            assert_eq!(ids.len(), all.len());
        }
        // same schedule on different operators gets different ids
        let s = Schedule::TRIVIAL;
        assert_ne!(CandidateId::of(&mm(1, 2, 2, 2), &s), CandidateId::of(&mm(1, 2, 2, 4), &s));
    }

    #[test]
    fn sample_random_trivial_and_exhaustion() {
        let c = sample_random(&mm(1, 1, 1, 1), 1, &SpaceLimits::default(), 0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].schedule, Schedule::TRIVIAL);

        let op = mm(1, 4, 4, 4);
        let size = brute_force(&op, &SpaceLimits::default()).len();
        let all = sample_random(&op, size, &SpaceLimits::default(), 3).unwrap();
        assert_eq!(all.iter().map(|c| c.id).collect::<HashSet<_>>().len(), size);
        assert_eq!(
            sample_random(&op, size + 1, &SpaceLimits::default(), 3),
            Err(SpaceError::SpaceExhausted { requested: size + 1, available: size })
        );
    }

    #[test]
    fn sample_random_is_reproducible() {
        let op = mm(1, 64, 64, 64);
        let ids = |seed| {
            sample_random(&op, 50, &SpaceLimits::default(), seed)
                .unwrap()
                .into_iter()
                .map(|c| c.id)
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(7), ids(7));
        assert_ne!(ids(7), ids(8));
        assert_eq!(ids(7).into_iter().collect::<HashSet<_>>().len(), 50);
    }

    #[test]
    fn no_genetics_copies_parents_cyclically() {
        let op = mm(1, 64, 64, 64);
        let parents = sample_random(&op, 3, &SpaceLimits::default(), 1).unwrap();
        let rates = GeneticRates { mutation: 0.0, crossover: 0.0 };
        let kids = reproduce(&parents, 7, &rates, &SpaceLimits::default(), 9).unwrap();
        for (i, kid) in kids.iter().enumerate() {
            assert_eq!(kid.schedule, parents[i % 3].schedule);
            assert_eq!(kid.id, parents[i % 3].id);
            assert_eq!(kid.lineage, vec![parents[i % 3].id]);
        }
    }

    #[test]
    fn full_mutation_changes_at_least_one_knob() {
        let op = mm(1, 64, 64, 64);
        let parent = sample_random(&op, 1, &SpaceLimits::default(), 5).unwrap();
        let rates = GeneticRates { mutation: 1.0, crossover: 0.0 };
        let kids = reproduce(&parent, 40, &rates, &SpaceLimits::default(), 2).unwrap();
        for kid in &kids {
            assert_ne!(kid.schedule, parent[0].schedule);
            assert!(SpaceLimits::default().admits(&kid.schedule, &op.gemm()));
        }
        // nowhere to go: the only schedule of a 1x1x1 space mutates to itself
        let only = sample_random(&mm(1, 1, 1, 1), 1, &SpaceLimits::default(), 0).unwrap();
        let kids = reproduce(&only, 3, &rates, &SpaceLimits::default(), 0).unwrap();
        assert!(kids.iter().all(|k| k.schedule == Schedule::TRIVIAL));
    }

    #[test]
    fn reduction_crossover_mixes_parents() {
        let op = mm(1, 16, 16, 16);
        let a = Candidate::new(
            op,
            Schedule {
                batch: Tile::UNIT,
                m: Tile::new(8, 2),
                n: Tile::new(8, 2),
                k_split: 2,
                unroll: 1,
                vector: 2,
            },
        );
        let b = Candidate::new(
            op,
            Schedule {
                batch: Tile::UNIT,
                m: Tile::new(4, 1),
                n: Tile::new(16, 4),
                k_split: 4,
                unroll: 4,
                vector: 4,
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let child = crossover(&a, &b, Gene::Reduction, &SpaceLimits::default(), &mut rng).unwrap();
        assert_eq!(child.schedule.k_split, 4);
        assert_eq!(child.schedule.unroll, 4);
        assert_eq!((child.schedule.m, child.schedule.n), (a.schedule.m, a.schedule.n));
        assert_eq!(child.schedule.vector, a.schedule.vector);
        assert_eq!(child.lineage, vec![a.id, b.id]);
    }

    #[test]
    fn reproduce_rejects_bad_parents() {
        let rates = GeneticRates::default();
        let limits = SpaceLimits::default();
        assert_eq!(reproduce(&[], 3, &rates, &limits, 0), Err(SpaceError::NoParents));
        let a = Candidate::new(mm(1, 2, 2, 2), Schedule::TRIVIAL);
        let b = Candidate::new(mm(1, 4, 2, 2), Schedule::TRIVIAL);
        assert_eq!(reproduce(&[a, b], 3, &rates, &limits, 0), Err(SpaceError::MixedOperators));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn every_emitted_candidate_is_legal(seed in any::<u64>(), which in 0usize..4) {
            let ops = [
                mm(1, 64, 64, 64),
                mm(8, 32, 16, 48),
                "mv:1,1,4096,1024".parse::<OperatorSpec>().unwrap(),
                "conv:2,14,14,16,32,3,1,1".parse::<OperatorSpec>().unwrap(),
            ];
            let op = ops[which];
            let limits = SpaceLimits::default();
            let shape = op.gemm();
            let parents = sample_random(&op, 6, &limits, seed).unwrap();
            for c in &parents {
                prop_assert!(limits.admits(&c.schedule, &shape));
                prop_assert_eq!(c.id, CandidateId::of(&op, &c.schedule));
            }
            let rates = GeneticRates { mutation: 0.6, crossover: 0.35 };
            for c in reproduce(&parents, 32, &rates, &limits, seed ^ 0x5eed).unwrap() {
                prop_assert!(limits.admits(&c.schedule, &shape));
                prop_assert_eq!(c.id, CandidateId::of(&op, &c.schedule));
            }
        }
    }
}

//! The conditional distribution of treatment given the realized match.
//!
//! Characterizes which within-pair treatment permutations would have
//! reproduced the observed design, and samples them with renormalized
//! within-pair odds. Components flip in lockstep; meta-components are
//! screened by recursive chain checks that walk components upward from the
//! nearest unmatched unit below and downward from the nearest one above,
//! rejecting any flip vector under which some unmatched unit could enter
//! the match and improve it. The caliper variant additionally tracks link
//! feasibility, component bypasses, and the possibility that a feasible
//! boundary-to-boundary chain would grow the match by one pair.

use crate::error::{Error, Result};
use crate::propensity::pair_probabilities;
use crate::rng::{keyed_rng, STREAM_META_DRAW, STREAM_REJECTION};
use crate::structure::{
    build_meta_components, build_overlap_graph, bypass_annotations, connected_components,
    Boundary, BypassInfo, ConnectedComponent, DesignView, MetaComponent,
};

/// Absolute guard treated as equality in cost comparisons, in favor of
/// acceptance: a candidate chain must beat the original match by more than
/// this to reject a permutation.
pub const COST_EPS: f64 = 1e-12;

/// Meta-components up to this many connected components are enumerated
/// exactly; larger ones are sampled by rejection.
pub const DEFAULT_ENUM_CAP: usize = 20;

/// Hard limit for exact enumeration of one meta-component.
pub const MAX_ENUM_COMPONENTS: usize = 25;

/// Per-component quantities used by the chain checks and the sampler.
#[derive(Debug, Clone)]
pub struct CompCtx {
    pub q_min: f64,
    pub q_max: f64,
    pub span: f64,
    pub z_low: u8,
    pub z_high: u8,
    /// Probability that the whole component flips (renormalized odds).
    pub flip_prob: f64,
    pub log_flip: f64,
    pub log_keep: f64,
}

/// Everything the permuter needs about one design: components,
/// meta-components, per-component probabilities, and caliper annotations.
#[derive(Debug, Clone)]
pub struct PermuterContext {
    pub components: Vec<ConnectedComponent>,
    pub metas: Vec<MetaComponent>,
    pub caliper: Option<f64>,
    pub n_pairs: usize,
    comp_ctx: Vec<CompCtx>,
    bypass: Vec<BypassInfo>,
}

impl PermuterContext {
    /// Runs the full structural analysis for a design. Pass the caliper the
    /// design was matched under, if any; it changes which permutations are
    /// compatible.
    pub fn build(view: &DesignView, caliper: Option<f64>) -> Result<Self> {
        let graph = build_overlap_graph(view)?;
        let components = connected_components(&graph, view)?;
        let metas = build_meta_components(view, &components);
        let bypass = match caliper {
            Some(c) => bypass_annotations(view, &components, c),
            None => Vec::new(),
        };
        let comp_ctx = components
            .iter()
            .map(|c| comp_ctx(c, view))
            .collect::<Result<Vec<_>>>()?;
        Ok(PermuterContext {
            n_pairs: view.pairs.len(),
            components,
            metas,
            caliper,
            comp_ctx,
            bypass,
        })
    }

    pub fn comp(&self, idx: usize) -> &CompCtx {
        &self.comp_ctx[idx]
    }

    fn meta_len(&self, meta_idx: usize) -> usize {
        self.metas[meta_idx].component_indices.len()
    }
}

fn comp_ctx(comp: &ConnectedComponent, view: &DesignView) -> Result<CompCtx> {
    let flip_prob = component_flip_probability(comp, view)?;
    Ok(CompCtx {
        q_min: comp.q_min,
        q_max: comp.q_max,
        span: comp.span(),
        z_low: comp.z_low(),
        z_high: comp.z_high(),
        flip_prob,
        log_flip: flip_prob.ln(),
        log_keep: (1.0 - flip_prob).ln(),
    })
}

/// Probability that a connected component flips in lockstep: the product of
/// control-side pair probabilities against the product of treated-side
/// ones, renormalized. Accumulated in log space.
pub fn component_flip_probability(comp: &ConnectedComponent, view: &DesignView) -> Result<f64> {
    let mut log_keep = 0.0;
    let mut log_switch = 0.0;
    for &p in &comp.pair_indices {
        let pair = view.pairs[p];
        let probs = pair_probabilities(pair.treated_score, pair.control_score)?;
        log_keep += probs.p1.ln();
        log_switch += probs.p2.ln();
    }
    // switch / (switch + keep), stably.
    Ok(1.0 / (1.0 + (log_keep - log_switch).exp()))
}

/// Support description when the design matched every unit: all lockstep
/// component flips are compatible, a support of size `2^R`.
#[derive(Debug, Clone, Copy)]
pub struct NoUnmatchedSupport {
    pub n_components: usize,
    pub support_size: Option<u128>,
}

pub fn support_no_unmatched(
    view: &DesignView,
    components: &[ConnectedComponent],
) -> Result<NoUnmatchedSupport> {
    if !view.unmatched.is_empty() {
        return Err(Error::UnmatchedPresent);
    }
    let r = components.len();
    Ok(NoUnmatchedSupport {
        n_components: r,
        support_size: (r < 128).then(|| 1u128 << r),
    })
}

#[derive(Debug, Clone, Copy)]
struct ChainState {
    delta: f64,
    frontier: f64,
}

enum StepOutcome {
    Continue(ChainState),
    RejectBranch,
    AcceptSubtree,
}

/// Whether an early "path too poor" acceptance is allowed: under a caliper
/// a feasible boundary-to-boundary chain adds a pair no matter its cost, so
/// the shortcut only applies when the boundary arms rule that out.
fn early_accept_allowed(ctx: &PermuterContext, meta: &MetaComponent) -> bool {
    if ctx.caliper.is_none() {
        return true;
    }
    match (meta.lower.treatment(), meta.upper.treatment()) {
        (Some(a), Some(b)) => a == b,
        _ => true,
    }
}

fn up_step(
    ctx: &PermuterContext,
    meta: &MetaComponent,
    pos: usize,
    flip: bool,
    state: ChainState,
    allow_early: bool,
) -> StepOutcome {
    let comp_id = meta.component_indices[pos];
    let comp = &ctx.comp_ctx[comp_id];
    let h_low = meta
        .lower
        .treatment()
        .expect("up pass runs only with a lower boundary unit");
    let z_low_post = comp.z_low ^ u8::from(flip);

    let next = if z_low_post == h_low {
        // Same arm as the incoming unit: no direct entry.
        match ctx.caliper {
            // Chain jumps the component; the gap rolls into the next entry.
            None => ChainState { ..state },
            Some(c) => {
                let info = &ctx.bypass[comp_id];
                if !info.bypassable || info.entry - state.frontier > c {
                    return StepOutcome::AcceptSubtree;
                }
                let delta = state.delta + (info.exit - state.frontier);
                if delta < -COST_EPS {
                    return StepOutcome::RejectBranch;
                }
                ChainState {
                    delta,
                    frontier: info.exit,
                }
            }
        }
    } else {
        // Pass through: pair the frontier with the component's lowest unit
        // and free its highest same-arm unit.
        let entry_gap = comp.q_min - state.frontier;
        if let Some(c) = ctx.caliper {
            if entry_gap > c {
                return StepOutcome::AcceptSubtree;
            }
        }
        let delta = state.delta + entry_gap - comp.span;
        if delta < -COST_EPS {
            return StepOutcome::RejectBranch;
        }
        ChainState {
            delta,
            frontier: comp.q_max,
        }
    };

    if allow_early {
        let last = &ctx.comp_ctx[*meta.component_indices.last().unwrap()];
        if next.delta - (last.q_max - next.frontier) >= -COST_EPS {
            return StepOutcome::AcceptSubtree;
        }
    }
    StepOutcome::Continue(next)
}

fn up_base(ctx: &PermuterContext, meta: &MetaComponent, state: ChainState) -> bool {
    let Some(c) = ctx.caliper else { return true };
    match (meta.lower.treatment(), meta.upper) {
        (Some(hl), Boundary::Unit { score, treatment }) if hl != treatment => {
            // A feasible final link would complete a chain between opposite
            // unmatched arms and grow the match by one pair.
            score - state.frontier > c
        }
        _ => true,
    }
}

fn down_step(
    ctx: &PermuterContext,
    meta: &MetaComponent,
    pos: usize,
    flip: bool,
    state: ChainState,
    allow_early: bool,
) -> StepOutcome {
    let comp_id = meta.component_indices[pos];
    let comp = &ctx.comp_ctx[comp_id];
    let h_high = meta
        .upper
        .treatment()
        .expect("down pass runs only with an upper boundary unit");
    let z_high_post = comp.z_high ^ u8::from(flip);

    let next = if z_high_post == h_high {
        match ctx.caliper {
            None => ChainState { ..state },
            Some(c) => {
                let info = &ctx.bypass[comp_id];
                if !info.bypassable || state.frontier - info.exit > c {
                    return StepOutcome::AcceptSubtree;
                }
                let delta = state.delta + (state.frontier - info.entry);
                if delta < -COST_EPS {
                    return StepOutcome::RejectBranch;
                }
                ChainState {
                    delta,
                    frontier: info.entry,
                }
            }
        }
    } else {
        let entry_gap = state.frontier - comp.q_max;
        if let Some(c) = ctx.caliper {
            if entry_gap > c {
                return StepOutcome::AcceptSubtree;
            }
        }
        let delta = state.delta + entry_gap - comp.span;
        if delta < -COST_EPS {
            return StepOutcome::RejectBranch;
        }
        ChainState {
            delta,
            frontier: comp.q_min,
        }
    };

    if allow_early {
        let first = &ctx.comp_ctx[meta.component_indices[0]];
        if next.delta - (next.frontier - first.q_min) >= -COST_EPS {
            return StepOutcome::AcceptSubtree;
        }
    }
    StepOutcome::Continue(next)
}

fn down_base(ctx: &PermuterContext, meta: &MetaComponent, state: ChainState) -> bool {
    let Some(c) = ctx.caliper else { return true };
    match (meta.lower, meta.upper.treatment()) {
        (Boundary::Unit { score, treatment }, Some(hu)) if hu != treatment => {
            state.frontier - score > c
        }
        _ => true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Up,
    Down,
}

/// Enumerates the flip vectors accepted by one directional pass, as
/// bitmasks over the meta-component's components. Iterative with an
/// explicit frontier stack; an accepted subtree materializes all
/// completions of its prefix.
fn enumerate_pass(ctx: &PermuterContext, meta_idx: usize, dir: Direction) -> Vec<u32> {
    let meta = &ctx.metas[meta_idx];
    let len = meta.component_indices.len();
    let boundary = match dir {
        Direction::Up => meta.lower,
        Direction::Down => meta.upper,
    };
    let start = match boundary {
        Boundary::Open => return (0..(1u32 << len)).collect(),
        Boundary::Unit { score, .. } => score,
    };
    let allow_early = early_accept_allowed(ctx, meta);

    let mut accepted = Vec::new();
    // (depth, prefix bits, chain state); depth counts processed components.
    let mut stack = vec![(
        0usize,
        0u32,
        ChainState {
            delta: 0.0,
            frontier: start,
        },
    )];
    while let Some((depth, prefix, state)) = stack.pop() {
        if depth == len {
            let ok = match dir {
                Direction::Up => up_base(ctx, meta, state),
                Direction::Down => down_base(ctx, meta, state),
            };
            if ok {
                accepted.push(prefix);
            }
            continue;
        }
        // Up walks components in increasing order, down in decreasing.
        let pos = match dir {
            Direction::Up => depth,
            Direction::Down => len - 1 - depth,
        };
        for flip in [false, true] {
            let outcome = match dir {
                Direction::Up => up_step(ctx, meta, pos, flip, state, allow_early),
                Direction::Down => down_step(ctx, meta, pos, flip, state, allow_early),
            };
            let prefix = prefix | (u32::from(flip) << pos);
            match outcome {
                StepOutcome::Continue(next) => stack.push((depth + 1, prefix, next)),
                StepOutcome::RejectBranch => {}
                StepOutcome::AcceptSubtree => {
                    push_completions(&mut accepted, prefix, depth + 1, pos, len, dir);
                }
            }
        }
    }
    accepted.sort_unstable();
    accepted.dedup();
    accepted
}

/// All vectors extending `prefix` in the positions this pass has not
/// reached yet.
fn push_completions(
    out: &mut Vec<u32>,
    prefix: u32,
    processed: usize,
    _pos: usize,
    len: usize,
    dir: Direction,
) {
    let free = len - processed;
    let free_positions: Vec<usize> = match dir {
        Direction::Up => (processed..len).collect(),
        Direction::Down => (0..len - processed).collect(),
    };
    for bits in 0u32..(1u32 << free) {
        let mut w = prefix;
        for (i, &p) in free_positions.iter().enumerate() {
            w |= ((bits >> i) & 1) << p;
        }
        out.push(w);
    }
}

/// One-vector version of the directional pass; mirrors `enumerate_pass`
/// decision for decision.
fn validate_pass(ctx: &PermuterContext, meta_idx: usize, dir: Direction, flips: &[bool]) -> bool {
    let meta = &ctx.metas[meta_idx];
    let len = meta.component_indices.len();
    let boundary = match dir {
        Direction::Up => meta.lower,
        Direction::Down => meta.upper,
    };
    let start = match boundary {
        Boundary::Open => return true,
        Boundary::Unit { score, .. } => score,
    };
    let allow_early = early_accept_allowed(ctx, meta);
    let mut state = ChainState {
        delta: 0.0,
        frontier: start,
    };
    for depth in 0..len {
        let pos = match dir {
            Direction::Up => depth,
            Direction::Down => len - 1 - depth,
        };
        let outcome = match dir {
            Direction::Up => up_step(ctx, meta, pos, flips[pos], state, allow_early),
            Direction::Down => down_step(ctx, meta, pos, flips[pos], state, allow_early),
        };
        match outcome {
            StepOutcome::Continue(next) => state = next,
            StepOutcome::RejectBranch => return false,
            StepOutcome::AcceptSubtree => return true,
        }
    }
    match dir {
        Direction::Up => up_base(ctx, meta, state),
        Direction::Down => down_base(ctx, meta, state),
    }
}

/// Compatibility of one flip vector for one meta-component: the original
/// match must survive chains from both boundaries.
pub fn vector_compatible(ctx: &PermuterContext, meta_idx: usize, flips: &[bool]) -> bool {
    validate_pass(ctx, meta_idx, Direction::Up, flips)
        && validate_pass(ctx, meta_idx, Direction::Down, flips)
}

/// Exact support of one meta-component: intersection of the upward and
/// downward passes, as sorted bitmasks. Honors the context's caliper mode.
pub fn compatible_vectors(ctx: &PermuterContext, meta_idx: usize) -> Result<Vec<u32>> {
    let len = ctx.meta_len(meta_idx);
    if len > MAX_ENUM_COMPONENTS {
        return Err(Error::SizeCapExceeded {
            what: "meta-component enumeration",
            got: len,
            cap: MAX_ENUM_COMPONENTS,
        });
    }
    let up = enumerate_pass(ctx, meta_idx, Direction::Up);
    let down = enumerate_pass(ctx, meta_idx, Direction::Down);
    // Merge-intersect two sorted vectors.
    let mut out = Vec::with_capacity(up.len().min(down.len()));
    let (mut i, mut j) = (0, 0);
    while i < up.len() && j < down.len() {
        match up[i].cmp(&down[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(up[i]);
                i += 1;
                j += 1;
            }
        }
    }
    Ok(out)
}

/// Caliper-mode support; requires a context built with a caliper.
pub fn compatible_vectors_caliper(ctx: &PermuterContext, meta_idx: usize) -> Result<Vec<u32>> {
    if ctx.caliper.is_none() {
        return Err(Error::Parse(
            "compatible_vectors_caliper needs a context built with a caliper".into(),
        ));
    }
    compatible_vectors(ctx, meta_idx)
}

/// Exact per-meta-component distribution: the compatible flip vectors with
/// renormalized lockstep-flip probabilities.
#[derive(Debug, Clone)]
pub struct MetaComponentDistribution {
    pub support: Vec<Vec<bool>>,
    pub probabilities: Vec<f64>,
}

pub fn meta_component_distribution(
    ctx: &PermuterContext,
    meta_idx: usize,
) -> Result<MetaComponentDistribution> {
    let vectors = compatible_vectors(ctx, meta_idx)?;
    assert!(
        vectors.contains(&0),
        "identity vector missing from a meta-component support"
    );
    let len = ctx.meta_len(meta_idx);
    let probabilities = vector_probabilities(ctx, meta_idx, &vectors);
    Ok(MetaComponentDistribution {
        support: vectors
            .iter()
            .map(|&w| (0..len).map(|j| w >> j & 1 == 1).collect())
            .collect(),
        probabilities,
    })
}

fn vector_log_weight(ctx: &PermuterContext, meta_idx: usize, w: u32) -> f64 {
    ctx.metas[meta_idx]
        .component_indices
        .iter()
        .enumerate()
        .map(|(j, &comp_id)| {
            let c = &ctx.comp_ctx[comp_id];
            if w >> j & 1 == 1 {
                c.log_flip
            } else {
                c.log_keep
            }
        })
        .sum()
}

fn vector_probabilities(ctx: &PermuterContext, meta_idx: usize, vectors: &[u32]) -> Vec<f64> {
    let logs: Vec<f64> = vectors
        .iter()
        .map(|&w| vector_log_weight(ctx, meta_idx, w))
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Per-meta-component sampler.
#[derive(Debug, Clone)]
pub enum MetaSampler {
    /// Open boundaries on both sides: every lockstep flip is compatible, so
    /// components flip independently.
    Unconstrained,
    /// Enumerated support with exact renormalized probabilities.
    Exact { vectors: Vec<u32>, cumulative: Vec<f64> },
    /// Too large to enumerate: draw from the unconstrained distribution and
    /// keep only vectors that survive the chain checks.
    Rejection,
}

/// The sampling plan for a whole design: one sampler per meta-component.
#[derive(Debug, Clone)]
pub struct AssignmentDistribution {
    pub samplers: Vec<MetaSampler>,
}

/// Builds the per-meta-component sampling plan, enumerating exactly up to
/// `enum_cap` components per meta-component.
pub fn build_distribution(ctx: &PermuterContext, enum_cap: usize) -> Result<AssignmentDistribution> {
    let mut samplers = Vec::with_capacity(ctx.metas.len());
    for (meta_idx, meta) in ctx.metas.iter().enumerate() {
        let len = meta.component_indices.len();
        let open = meta.lower == Boundary::Open && meta.upper == Boundary::Open;
        let sampler = if open && ctx.caliper.is_none() {
            MetaSampler::Unconstrained
        } else if len <= enum_cap.min(MAX_ENUM_COMPONENTS) {
            let vectors = compatible_vectors(ctx, meta_idx)?;
            assert!(
                vectors.contains(&0),
                "identity vector missing from a meta-component support"
            );
            if vectors.len() == 1 << len {
                MetaSampler::Unconstrained
            } else {
                let probs = vector_probabilities(ctx, meta_idx, &vectors);
                let mut cumulative = Vec::with_capacity(probs.len());
                let mut acc = 0.0;
                for p in probs {
                    acc += p;
                    cumulative.push(acc);
                }
                MetaSampler::Exact { vectors, cumulative }
            }
        } else {
            let identity = vec![false; len];
            assert!(
                vector_compatible(ctx, meta_idx, &identity),
                "identity vector rejected by the chain checks"
            );
            MetaSampler::Rejection
        };
        samplers.push(sampler);
    }
    Ok(AssignmentDistribution { samplers })
}

/// Exact size of the global support, if it is known; `None` when some
/// meta-component was left to rejection sampling or the product overflows.
pub fn support_size(ctx: &PermuterContext, dist: &AssignmentDistribution) -> Option<u128> {
    let mut total: u128 = 1;
    for (meta_idx, sampler) in dist.samplers.iter().enumerate() {
        let len = ctx.meta_len(meta_idx);
        let size: u128 = match sampler {
            MetaSampler::Unconstrained => {
                if len >= 100 {
                    return None;
                }
                1u128 << len
            }
            MetaSampler::Exact { vectors, .. } => vectors.len() as u128,
            MetaSampler::Rejection => return None,
        };
        total = total.checked_mul(size)?;
    }
    Some(total)
}

fn sample_meta_into(
    ctx: &PermuterContext,
    sampler: &MetaSampler,
    meta_idx: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    flips: &mut [bool],
) {
    use rand::Rng;
    let meta = &ctx.metas[meta_idx];
    let len = meta.component_indices.len();
    match sampler {
        MetaSampler::Unconstrained => {
            for (j, &comp_id) in meta.component_indices.iter().enumerate() {
                flips[j] = rng.gen::<f64>() < ctx.comp_ctx[comp_id].flip_prob;
            }
        }
        MetaSampler::Exact { vectors, cumulative } => {
            let u: f64 = rng.gen();
            let k = cumulative.partition_point(|&c| c <= u).min(vectors.len() - 1);
            let w = vectors[k];
            for (j, f) in flips.iter_mut().enumerate().take(len) {
                *f = w >> j & 1 == 1;
            }
        }
        MetaSampler::Rejection => loop {
            for (j, &comp_id) in meta.component_indices.iter().enumerate() {
                flips[j] = rng.gen::<f64>() < ctx.comp_ctx[comp_id].flip_prob;
            }
            if vector_compatible(ctx, meta_idx, &flips[..len]) {
                break;
            }
        },
    }
}

/// Draws one global assignment as per-pair flip indicators, writing into
/// `pair_flips` (length = number of pairs). Meta-components draw
/// independently, each from its keyed stream.
pub fn sample_pair_flips(
    ctx: &PermuterContext,
    dist: &AssignmentDistribution,
    master_seed: u64,
    draw_idx: u64,
    pair_flips: &mut [bool],
    scratch: &mut Vec<bool>,
) {
    debug_assert_eq!(pair_flips.len(), ctx.n_pairs);
    pair_flips.iter_mut().for_each(|f| *f = false);
    for (meta_idx, sampler) in dist.samplers.iter().enumerate() {
        let meta = &ctx.metas[meta_idx];
        let len = meta.component_indices.len();
        scratch.clear();
        scratch.resize(len, false);
        let mut rng = keyed_rng(master_seed, &[STREAM_META_DRAW, meta_idx as u64, draw_idx]);
        sample_meta_into(ctx, sampler, meta_idx, &mut rng, scratch);
        for (j, &comp_id) in meta.component_indices.iter().enumerate() {
            if scratch[j] {
                for &p in &ctx.components[comp_id].pair_indices {
                    pair_flips[p] = true;
                }
            }
        }
    }
}

/// Draws a full treatment vector for the sample: matched pairs flip
/// according to the sampled assignment, unmatched treatments are unchanged.
pub fn sample_assignment(
    ctx: &PermuterContext,
    dist: &AssignmentDistribution,
    sample: &crate::model::Sample,
    view: &DesignView,
    master_seed: u64,
    draw_idx: u64,
) -> Vec<u8> {
    let mut flips = vec![false; ctx.n_pairs];
    let mut scratch = Vec::new();
    sample_pair_flips(ctx, dist, master_seed, draw_idx, &mut flips, &mut scratch);
    let mut z: Vec<u8> = sample.units.iter().map(|u| u.treatment).collect();
    for (p, &flip) in flips.iter().enumerate() {
        if flip {
            let pv = view.pairs[p];
            z[pv.treated_idx] = 0;
            z[pv.control_idx] = 1;
        }
    }
    z
}

/// Rejection sampler for one meta-component: repeatedly draws from the
/// unconstrained lockstep-flip distribution and keeps vectors that survive
/// the chain checks, until `n_sim` valid draws are collected.
pub fn sample_rejection(
    ctx: &PermuterContext,
    meta_idx: usize,
    n_sim: usize,
    master_seed: u64,
) -> Vec<Vec<bool>> {
    use rand::Rng;
    let meta = &ctx.metas[meta_idx];
    let len = meta.component_indices.len();
    let mut out = Vec::with_capacity(n_sim);
    for draw in 0..n_sim {
        let mut rng = keyed_rng(master_seed, &[STREAM_REJECTION, meta_idx as u64, draw as u64]);
        let mut candidate = vec![false; len];
        loop {
            for (j, &comp_id) in meta.component_indices.iter().enumerate() {
                candidate[j] = rng.gen::<f64>() < ctx.comp_ctx[comp_id].flip_prob;
            }
            if vector_compatible(ctx, meta_idx, &candidate) {
                break;
            }
        }
        out.push(candidate);
    }
    out
}

/// Materialized global support: per-pair flip patterns with exact
/// probabilities. `None` when the support is larger than `cap` or unknown.
#[derive(Debug, Clone)]
pub struct GlobalSupport {
    pub pair_flips: Vec<Vec<bool>>,
    pub probabilities: Vec<f64>,
}

pub fn global_support(
    ctx: &PermuterContext,
    dist: &AssignmentDistribution,
    cap: u128,
) -> Result<Option<GlobalSupport>> {
    let Some(size) = support_size(ctx, dist) else {
        return Ok(None);
    };
    if size > cap {
        return Ok(None);
    }

    // Local supports with probabilities, per meta-component.
    let mut locals: Vec<(Vec<u32>, Vec<f64>)> = Vec::with_capacity(ctx.metas.len());
    for (meta_idx, sampler) in dist.samplers.iter().enumerate() {
        let len = ctx.meta_len(meta_idx);
        let vectors: Vec<u32> = match sampler {
            MetaSampler::Unconstrained => (0..(1u32 << len)).collect(),
            MetaSampler::Exact { vectors, .. } => vectors.clone(),
            MetaSampler::Rejection => unreachable!("support size known"),
        };
        let probs = vector_probabilities(ctx, meta_idx, &vectors);
        locals.push((vectors, probs));
    }

    let mut pair_flips = Vec::with_capacity(size as usize);
    let mut probabilities = Vec::with_capacity(size as usize);
    let mut choice = vec![0usize; locals.len()];
    loop {
        let mut flips = vec![false; ctx.n_pairs];
        let mut prob = 1.0;
        for (meta_idx, &k) in choice.iter().enumerate() {
            let (vectors, probs) = &locals[meta_idx];
            prob *= probs[k];
            let w = vectors[k];
            for (j, &comp_id) in ctx.metas[meta_idx].component_indices.iter().enumerate() {
                if w >> j & 1 == 1 {
                    for &p in &ctx.components[comp_id].pair_indices {
                        flips[p] = true;
                    }
                }
            }
        }
        pair_flips.push(flips);
        probabilities.push(prob);

        // Odometer increment over the local supports.
        let mut done = true;
        for (meta_idx, c) in choice.iter_mut().enumerate() {
            *c += 1;
            if *c < locals[meta_idx].0.len() {
                done = false;
                break;
            }
            *c = 0;
        }
        if done {
            break;
        }
    }
    Ok(Some(GlobalSupport {
        pair_flips,
        probabilities,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::tests::{figure_sample, random_sample, unit};
    use crate::matcher::{optimal_pair_match, MatchProblem};
    use crate::model::Sample;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn figure_ctx(caliper: Option<f64>) -> (Sample, crate::model::MatchedDesign, PermuterContext) {
        let sample = figure_sample();
        let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
        let view = DesignView::from_design(&sample, &design).unwrap();
        let ctx = PermuterContext::build(&view, caliper).unwrap();
        (sample, design, ctx)
    }

    /// Independent arithmetic for the worked example: flip probabilities of
    /// the three components, straight from the printed scores.
    fn figure_flip_probs() -> (f64, f64, f64) {
        let odds = |l: f64| l / (1.0 - l);
        // D-I.
        let p_keep_di = odds(0.35) / (odds(0.35) + odds(0.30));
        let flip_di = 1.0 - p_keep_di;
        // B-G, C-H in lockstep.
        let keep = (odds(0.45) / (odds(0.45) + odds(0.40))) * (odds(0.41) / (odds(0.41) + odds(0.36)));
        let switch =
            (odds(0.40) / (odds(0.45) + odds(0.40))) * (odds(0.36) / (odds(0.41) + odds(0.36)));
        let flip_bgch = switch / (keep + switch);
        // A-E.
        let flip_ae = odds(0.65) / (odds(0.80) + odds(0.65));
        (flip_di, flip_bgch, flip_ae)
    }

    #[test]
    fn component_flip_probabilities_match_direct_arithmetic() {
        let sample = figure_sample();
        let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
        let view = DesignView::from_design(&sample, &design).unwrap();
        let ctx = PermuterContext::build(&view, None).unwrap();
        let (flip_di, flip_bgch, flip_ae) = figure_flip_probs();
        assert!((ctx.comp(0).flip_prob - flip_di).abs() < 1e-12);
        assert!((ctx.comp(1).flip_prob - flip_bgch).abs() < 1e-12);
        assert!((ctx.comp(2).flip_prob - flip_ae).abs() < 1e-12);
        assert!((flip_bgch - 0.397).abs() < 1e-3);
        assert!((flip_ae - 0.317).abs() < 1e-3);
    }

    #[test]
    fn single_pair_even_scores_flip_half() {
        let sample = Sample::new(vec![unit("t", 1, 0.5), unit("c", 0, 0.5000000001)]);
        let design = crate::model::MatchedDesign {
            pairs: vec![crate::model::MatchedPair {
                treated: "t".into(),
                control: "c".into(),
                distance: 1e-10,
            }],
            unmatched: vec![],
            objective: 1e-10,
        };
        let view = DesignView::from_design(&sample, &design).unwrap();
        let graph = build_overlap_graph(&view).unwrap();
        let comps = connected_components(&graph, &view).unwrap();
        let p = component_flip_probability(&comps[0], &view).unwrap();
        assert!((p - 0.5).abs() < 1e-6);
    }

    #[test]
    fn golden_compatible_vectors() {
        let (_, _, ctx) = figure_ctx(None);
        // Meta 0 holds D-I (bit 0) and B-G/C-H (bit 1); both may flip alone
        // but not together, because J could then enter the match.
        assert_eq!(compatible_vectors(&ctx, 0).unwrap(), vec![0b00, 0b01, 0b10]);
        // Meta 1 is A-E alone; its flip admits the E-F pair.
        assert_eq!(compatible_vectors(&ctx, 1).unwrap(), vec![0b0]);
    }

    #[test]
    fn open_boundaries_accept_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let sample = random_sample(&mut rng, 5, 5);
        let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
        let view = DesignView::from_design(&sample, &design).unwrap();
        let ctx = PermuterContext::build(&view, None).unwrap();
        assert_eq!(ctx.metas.len(), 1);
        let len = ctx.metas[0].component_indices.len();
        assert_eq!(
            compatible_vectors(&ctx, 0).unwrap().len(),
            1 << len,
            "no unmatched units leaves every lockstep flip compatible"
        );
        let sup = support_no_unmatched(&view, &ctx.components).unwrap();
        assert_eq!(sup.support_size, Some(1u128 << ctx.components.len()));
    }

    #[test]
    fn support_no_unmatched_rejects_unmatched() {
        let (_, _, ctx) = figure_ctx(None);
        let sample = figure_sample();
        let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
        let view = DesignView::from_design(&sample, &design).unwrap();
        assert!(matches!(
            support_no_unmatched(&view, &ctx.components),
            Err(Error::UnmatchedPresent)
        ));
    }

    #[test]
    fn two_overlapping_pairs_flip_in_lockstep() {
        let sample = Sample::new(vec![
            unit("t1", 1, 0.80),
            unit("c1", 0, 0.60),
            unit("t2", 1, 0.75),
            unit("c2", 0, 0.55),
        ]);
        let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
        let view = DesignView::from_design(&sample, &design).unwrap();
        let ctx = PermuterContext::build(&view, None).unwrap();
        assert_eq!(ctx.components.len(), 1);
        assert_eq!(ctx.components[0].pair_indices.len(), 2);
        let dist = build_distribution(&ctx, DEFAULT_ENUM_CAP).unwrap();
        let global = global_support(&ctx, &dist, 1 << 20).unwrap().unwrap();
        let mut patterns: Vec<Vec<bool>> = global.pair_flips;
        patterns.sort();
        assert_eq!(patterns, vec![vec![false, false], vec![true, true]]);
    }

    #[test]
    fn golden_global_distribution() {
        let (_, design, ctx) = figure_ctx(None);
        let dist = build_distribution(&ctx, DEFAULT_ENUM_CAP).unwrap();
        assert_eq!(support_size(&ctx, &dist), Some(3));
        let global = global_support(&ctx, &dist, 10_000).unwrap().unwrap();

        // Identify patterns by which treated units flip.
        let pattern_name = |flips: &[bool]| -> String {
            let mut ids: Vec<&str> = flips
                .iter()
                .enumerate()
                .filter(|&(_, &f)| f)
                .map(|(p, _)| design.pairs[p].treated.as_str())
                .collect();
            ids.sort();
            ids.join(",")
        };
        let mut by_name = std::collections::HashMap::new();
        for (flips, prob) in global.pair_flips.iter().zip(&global.probabilities) {
            by_name.insert(pattern_name(flips), *prob);
        }
        let (flip_di, flip_bgch, _) = figure_flip_probs();
        let raw = [
            ("".to_string(), (1.0 - flip_di) * (1.0 - flip_bgch)),
            ("D".to_string(), flip_di * (1.0 - flip_bgch)),
            ("B,C".to_string(), (1.0 - flip_di) * flip_bgch),
        ];
        let z: f64 = raw.iter().map(|(_, p)| p).sum();
        for (name, p) in raw {
            let got = by_name[&name];
            assert!((got - p / z).abs() < 1e-12, "{name}: {got} vs {}", p / z);
        }
        // Two-decimal reported values.
        assert!((by_name[""] - 0.41).abs() < 0.005);
        assert!((by_name["B,C"] - 0.27).abs() < 0.005);
        assert!((by_name["D"] - 0.32).abs() < 0.005);
    }

    #[test]
    fn singleton_support_has_probability_one() {
        let (_, _, ctx) = figure_ctx(None);
        let d = meta_component_distribution(&ctx, 1).unwrap();
        assert_eq!(d.support, vec![vec![false]]);
        assert_eq!(d.probabilities, vec![1.0]);
    }

    #[test]
    fn near_equal_scores_give_near_uniform_distribution() {
        // Two singleton components with an unmatched control below, all
        // scores essentially 0.5.
        let sample = Sample::new(vec![
            unit("u0", 0, 0.4999999),
            unit("t1", 1, 0.5000001),
            unit("c1", 0, 0.5000000),
            unit("t2", 1, 0.5000003),
            unit("c2", 0, 0.5000002),
        ]);
        let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
        let view = DesignView::from_design(&sample, &design).unwrap();
        let ctx = PermuterContext::build(&view, None).unwrap();
        assert_eq!(ctx.metas.len(), 1);
        let d = meta_component_distribution(&ctx, 0).unwrap();
        let uniform = 1.0 / d.support.len() as f64;
        for p in &d.probabilities {
            assert!((p - uniform).abs() < 1e-6);
        }
    }

    #[test]
    fn sampling_matches_exact_probabilities() {
        let (_, _, ctx) = figure_ctx(None);
        let dist = build_distribution(&ctx, DEFAULT_ENUM_CAP).unwrap();
        let global = global_support(&ctx, &dist, 100).unwrap().unwrap();

        let n = 50_000usize;
        let mut counts = vec![0usize; global.pair_flips.len()];
        let mut flips = vec![false; ctx.n_pairs];
        let mut scratch = Vec::new();
        for draw in 0..n {
            sample_pair_flips(&ctx, &dist, 17, draw as u64, &mut flips, &mut scratch);
            let k = global
                .pair_flips
                .iter()
                .position(|p| p == &flips)
                .expect("sampled pattern must be in the support");
            counts[k] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let p = global.probabilities[k];
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let freq = c as f64 / n as f64;
            assert!(
                (freq - p).abs() < 3.0 * se + 1e-9,
                "pattern {k}: freq {freq} vs prob {p}"
            );
        }
    }

    #[test]
    fn single_even_pair_samples_half_and_half() {
        let sample = Sample::new(vec![unit("t", 1, 0.49999999), unit("c", 0, 0.50000001)]);
        let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
        let view = DesignView::from_design(&sample, &design).unwrap();
        let ctx = PermuterContext::build(&view, None).unwrap();
        let dist = build_distribution(&ctx, DEFAULT_ENUM_CAP).unwrap();
        let n = 20_000usize;
        let mut flipped = 0usize;
        let mut flips = vec![false; 1];
        let mut scratch = Vec::new();
        for draw in 0..n {
            sample_pair_flips(&ctx, &dist, 5, draw as u64, &mut flips, &mut scratch);
            flipped += usize::from(flips[0]);
        }
        let freq = flipped as f64 / n as f64;
        assert!((freq - 0.5).abs() < 3.0 * (0.25f64 / n as f64).sqrt() + 1e-6);
    }

    #[test]
    fn meta_components_draw_independently() {
        // Two separated singleton metas, each with support {keep, flip}.
        let sample = Sample::new(vec![
            unit("u_lo", 0, 0.10),
            unit("c1", 0, 0.25),
            unit("t1", 1, 0.30),
            unit("u_mid", 0, 0.45),
            unit("c2", 0, 0.70),
            unit("t2", 1, 0.75),
            unit("u_hi", 0, 0.92),
        ]);
        let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
        let view = DesignView::from_design(&sample, &design).unwrap();
        let ctx = PermuterContext::build(&view, None).unwrap();
        assert_eq!(ctx.metas.len(), 2);
        let dist = build_distribution(&ctx, DEFAULT_ENUM_CAP).unwrap();
        let global = global_support(&ctx, &dist, 100).unwrap().unwrap();
        assert_eq!(global.pair_flips.len(), 4);

        let n = 40_000usize;
        let mut joint = std::collections::HashMap::new();
        let mut flips = vec![false; 2];
        let mut scratch = Vec::new();
        let mut marg = [0usize; 2];
        for draw in 0..n {
            sample_pair_flips(&ctx, &dist, 23, draw as u64, &mut flips, &mut scratch);
            *joint.entry(flips.clone()).or_insert(0usize) += 1;
            marg[0] += usize::from(flips[0]);
            marg[1] += usize::from(flips[1]);
        }
        let p0 = marg[0] as f64 / n as f64;
        let p1 = marg[1] as f64 / n as f64;
        for (pattern, count) in joint {
            let expected = (if pattern[0] { p0 } else { 1.0 - p0 })
                * (if pattern[1] { p1 } else { 1.0 - p1 });
            let freq = count as f64 / n as f64;
            let se = (expected * (1.0 - expected) / n as f64).sqrt();
            assert!((freq - expected).abs() < 4.0 * se + 1e-3);
        }
    }

    #[test]
    fn rejection_sampler_matches_exact_distribution() {
        let (_, _, ctx) = figure_ctx(None);
        let exact = meta_component_distribution(&ctx, 0).unwrap();
        let draws = sample_rejection(&ctx, 0, 20_000, 31);
        let mut counts = std::collections::HashMap::new();
        for d in &draws {
            *counts.entry(d.clone()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), exact.support.len());
        for (w, p) in exact.support.iter().zip(&exact.probabilities) {
            let freq = counts[w] as f64 / draws.len() as f64;
            let se = (p * (1.0 - p) / draws.len() as f64).sqrt();
            assert!((freq - p).abs() < 3.5 * se, "{w:?}: {freq} vs {p}");
        }
    }

    #[test]
    fn rejection_path_agrees_with_enumeration() {
        // Force the rejection sampler by setting the enumeration cap to 0.
        let (_, _, ctx) = figure_ctx(None);
        let dist = build_distribution(&ctx, 0).unwrap();
        assert!(matches!(dist.samplers[0], MetaSampler::Rejection));
        let exact = meta_component_distribution(&ctx, 0).unwrap();
        let mut flips = vec![false; ctx.n_pairs];
        let mut scratch = Vec::new();
        for draw in 0..2_000 {
            sample_pair_flips(&ctx, &dist, 3, draw, &mut flips, &mut scratch);
            // Every draw is in the enumerated support.
            let w: Vec<bool> = ctx.metas[0]
                .component_indices
                .iter()
                .map(|&c| flips[ctx.components[c].pair_indices[0]])
                .collect();
            assert!(exact.support.contains(&w));
        }
    }

    #[test]
    fn identity_only_meta_always_draws_identity() {
        let (_, _, ctx) = figure_ctx(None);
        // Meta 1 (A-E) supports only the identity.
        let draws = sample_rejection(&ctx, 1, 500, 9);
        assert!(draws.iter().all(|d| d == &vec![false]));
    }

    #[test]
    fn inactive_caliper_reproduces_uncalipered_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..50 {
            let nt = rng.gen_range(1..=5);
            let nc = rng.gen_range(nt..=nt + 4);
            let sample = random_sample(&mut rng, nt, nc);
            let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
            let view = DesignView::from_design(&sample, &design).unwrap();
            let plain = PermuterContext::build(&view, None).unwrap();
            let caliper = PermuterContext::build(&view, Some(10.0)).unwrap();
            for m in 0..plain.metas.len() {
                assert_eq!(
                    compatible_vectors(&plain, m).unwrap(),
                    compatible_vectors_caliper(&caliper, m).unwrap()
                );
            }
        }
    }

    #[test]
    fn caliper_gates_the_improving_chain() {
        // With c = 0.07 the E-F pair (distance 0.05) is feasible, so the
        // A-E flip is still rejected; with c = 0.03 it is not, and the flip
        // becomes compatible.
        let (_, _, ctx) = figure_ctx(Some(0.07));
        assert_eq!(compatible_vectors_caliper(&ctx, 1).unwrap(), vec![0b0]);
        let (_, _, ctx) = figure_ctx(Some(0.03));
        assert_eq!(compatible_vectors_caliper(&ctx, 1).unwrap(), vec![0b0, 0b1]);
    }

    #[test]
    fn complement_symmetry_without_unmatched_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..30 {
            let k = rng.gen_range(1..=6);
            let sample = random_sample(&mut rng, k, k);
            let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
            let view = DesignView::from_design(&sample, &design).unwrap();
            let ctx = PermuterContext::build(&view, None).unwrap();
            for m in 0..ctx.metas.len() {
                let len = ctx.metas[m].component_indices.len();
                let support = compatible_vectors(&ctx, m).unwrap();
                let full = (1u32 << len) - 1;
                let complemented: std::collections::BTreeSet<u32> =
                    support.iter().map(|w| w ^ full).collect();
                let original: std::collections::BTreeSet<u32> = support.into_iter().collect();
                assert_eq!(original, complemented);
            }
        }
    }

    #[test]
    fn validator_agrees_with_enumerator() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..100 {
            let nt = rng.gen_range(1..=6);
            let nc = rng.gen_range(nt..=nt + 5);
            let sample = random_sample(&mut rng, nt, nc);
            let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
            let view = DesignView::from_design(&sample, &design).unwrap();
            let ctx = PermuterContext::build(&view, None).unwrap();
            for m in 0..ctx.metas.len() {
                let len = ctx.metas[m].component_indices.len();
                let support: std::collections::BTreeSet<u32> =
                    compatible_vectors(&ctx, m).unwrap().into_iter().collect();
                for w in 0..(1u32 << len) {
                    let flips: Vec<bool> = (0..len).map(|j| w >> j & 1 == 1).collect();
                    assert_eq!(
                        vector_compatible(&ctx, m, &flips),
                        support.contains(&w),
                        "meta {m} vector {w:b}"
                    );
                }
            }
        }
    }
}

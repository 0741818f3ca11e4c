//! Structural analysis of a matched design: the overlap graph on pairs, its
//! connected components, and meta-components with boundary information.
//!
//! Two pairs overlap when their score intervals intersect, i.e. some
//! within-pair permutation of treatments would turn them into a crossing
//! match. Components of the overlap graph must flip in lockstep; runs of
//! adjacent components with no unmatched unit between them form
//! meta-components, the unit of entanglement introduced by unmatched
//! controls.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{MatchedDesign, Sample};

/// Scores and unit indices for one matched pair.
#[derive(Debug, Clone, Copy)]
pub struct PairView {
    pub treated_score: f64,
    pub control_score: f64,
    pub treated_idx: usize,
    pub control_idx: usize,
}

/// An unmatched unit with its frozen treatment.
#[derive(Debug, Clone, Copy)]
pub struct UnmatchedView {
    pub score: f64,
    pub treatment: u8,
    pub idx: usize,
}

/// A design resolved against its sample: scores looked up, ids translated
/// to indices.
#[derive(Debug, Clone)]
pub struct DesignView {
    pub pairs: Vec<PairView>,
    pub unmatched: Vec<UnmatchedView>,
}

impl DesignView {
    pub fn from_design(sample: &Sample, design: &MatchedDesign) -> Result<Self> {
        design.validate_against(sample)?;
        let index = sample.id_index();
        let mut pairs = Vec::with_capacity(design.pairs.len());
        for pair in &design.pairs {
            let t = index[pair.treated.as_str()];
            let c = index[pair.control.as_str()];
            pairs.push(PairView {
                treated_score: sample.units[t].score.ok_or_else(|| Error::MissingScore {
                    id: pair.treated.clone(),
                })?,
                control_score: sample.units[c].score.ok_or_else(|| Error::MissingScore {
                    id: pair.control.clone(),
                })?,
                treated_idx: t,
                control_idx: c,
            });
        }
        let mut unmatched = Vec::with_capacity(design.unmatched.len());
        for (id, z) in &design.unmatched {
            let i = index[id.as_str()];
            unmatched.push(UnmatchedView {
                score: sample.units[i].score.ok_or_else(|| Error::MissingScore { id: id.clone() })?,
                treatment: *z,
                idx: i,
            });
        }
        Ok(DesignView { pairs, unmatched })
    }
}

/// Overlap graph: nodes are pair indices, edges the overlapping pairs.
#[derive(Debug, Clone)]
pub struct OverlapGraph {
    pub n_pairs: usize,
    pub edges: Vec<(usize, usize)>,
}

/// Builds the overlap graph by scanning pairs in decreasing treated-score
/// order; the early exits are valid because an optimal match is free of
/// crossing matches.
pub fn build_overlap_graph(view: &DesignView) -> Result<OverlapGraph> {
    let k = view.pairs.len();
    if k == 0 {
        return Err(Error::EmptyDesign);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        view.pairs[b]
            .treated_score
            .partial_cmp(&view.pairs[a].treated_score)
            .unwrap()
    });
    let t = |pos: usize| view.pairs[order[pos]].treated_score;
    let c = |pos: usize| view.pairs[order[pos]].control_score;

    let mut edges = Vec::new();
    for pos in 0..k {
        if t(pos) > c(pos) {
            for j in pos + 1..k {
                if t(pos) > t(j) && t(j) > c(pos) {
                    edges.push((order[pos].min(order[j]), order[pos].max(order[j])));
                } else {
                    break;
                }
            }
        } else {
            for j in (0..pos).rev() {
                if t(pos) < t(j) && t(j) < c(pos) {
                    edges.push((order[pos].min(order[j]), order[pos].max(order[j])));
                } else {
                    break;
                }
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(OverlapGraph { n_pairs: k, edges })
}

/// A maximal set of pairs linked by overlap relations. Members share one
/// orientation and must flip together.
#[derive(Debug, Clone)]
pub struct ConnectedComponent {
    pub pair_indices: Vec<usize>,
    pub q_min: f64,
    pub q_max: f64,
    pub treated_above: bool,
}

impl ConnectedComponent {
    /// Treatment of the lowest-score unit in the component.
    pub fn z_low(&self) -> u8 {
        u8::from(!self.treated_above)
    }

    /// Treatment of the highest-score unit in the component.
    pub fn z_high(&self) -> u8 {
        u8::from(self.treated_above)
    }

    pub fn span(&self) -> f64 {
        self.q_max - self.q_min
    }
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
    }
}

/// Groups pairs into overlap components, annotated with their score
/// interval and orientation, sorted by increasing interval.
pub fn connected_components(
    graph: &OverlapGraph,
    view: &DesignView,
) -> Result<Vec<ConnectedComponent>> {
    let k = graph.n_pairs;
    let mut uf = UnionFind::new(k);
    for &(a, b) in &graph.edges {
        uf.union(a, b);
    }
    let mut groups: std::collections::HashMap<usize, Vec<usize>> = std::collections::HashMap::new();
    for p in 0..k {
        groups.entry(uf.find(p)).or_default().push(p);
    }
    let mut components = Vec::with_capacity(groups.len());
    for (_, mut members) in groups {
        members.sort_by(|&a, &b| {
            pair_min(view, a).partial_cmp(&pair_min(view, b)).unwrap()
        });
        let q_min = members.iter().map(|&p| pair_min(view, p)).fold(f64::INFINITY, f64::min);
        let q_max = members
            .iter()
            .map(|&p| pair_max(view, p))
            .fold(f64::NEG_INFINITY, f64::max);
        let treated_above = view.pairs[members[0]].treated_score > view.pairs[members[0]].control_score;
        for &p in &members {
            if (view.pairs[p].treated_score > view.pairs[p].control_score) != treated_above {
                return Err(Error::MixedOrientation);
            }
        }
        components.push(ConnectedComponent {
            pair_indices: members,
            q_min,
            q_max,
            treated_above,
        });
    }
    components.sort_by(|a, b| a.q_max.partial_cmp(&b.q_max).unwrap());
    Ok(components)
}

fn pair_min(view: &DesignView, p: usize) -> f64 {
    view.pairs[p].treated_score.min(view.pairs[p].control_score)
}

fn pair_max(view: &DesignView, p: usize) -> f64 {
    view.pairs[p].treated_score.max(view.pairs[p].control_score)
}

/// A meta-component boundary: the nearest unmatched unit on that side, or
/// nothing at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    Open,
    Unit { score: f64, treatment: u8 },
}

impl Boundary {
    pub fn score(&self) -> Option<f64> {
        match self {
            Boundary::Open => None,
            Boundary::Unit { score, .. } => Some(*score),
        }
    }

    pub fn treatment(&self) -> Option<u8> {
        match self {
            Boundary::Open => None,
            Boundary::Unit { treatment, .. } => Some(*treatment),
        }
    }
}

/// A maximal run of adjacent components with no unmatched unit strictly
/// between consecutive members.
#[derive(Debug, Clone)]
pub struct MetaComponent {
    pub component_indices: Vec<usize>,
    pub lower: Boundary,
    pub upper: Boundary,
}

#[derive(Debug, Clone, Copy)]
enum UnitKind {
    Matched,
    Unmatched { treatment: u8 },
}

/// All unit scores in the design, sorted, tagged matched or unmatched.
fn sorted_units(view: &DesignView) -> Vec<(f64, UnitKind)> {
    let mut units: Vec<(f64, UnitKind)> = Vec::with_capacity(2 * view.pairs.len() + view.unmatched.len());
    for p in &view.pairs {
        units.push((p.treated_score, UnitKind::Matched));
        units.push((p.control_score, UnitKind::Matched));
    }
    for u in &view.unmatched {
        units.push((u.score, UnitKind::Unmatched { treatment: u.treatment }));
    }
    units.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    units
}

/// Groups the (sorted) components into meta-components and records the
/// nearest unmatched unit below and above each, when one exists.
pub fn build_meta_components(
    view: &DesignView,
    components: &[ConnectedComponent],
) -> Vec<MetaComponent> {
    let units = sorted_units(view);
    let score_at = |i: usize| units[i].0;
    let position = |score: f64| units.partition_point(|&(s, _)| s < score);

    let mut metas: Vec<MetaComponent> = Vec::new();
    for (r, comp) in components.iter().enumerate() {
        let below = position(comp.q_min).checked_sub(1);
        let start_new = match below {
            None => Some(Boundary::Open),
            Some(i) => match units[i].1 {
                UnitKind::Unmatched { treatment } => Some(Boundary::Unit {
                    score: score_at(i),
                    treatment,
                }),
                UnitKind::Matched => None,
            },
        };
        if let Some(lower) = start_new {
            metas.push(MetaComponent {
                component_indices: Vec::new(),
                lower,
                upper: Boundary::Open,
            });
        }
        let current = metas
            .last_mut()
            .expect("first component always starts a meta-component");
        current.component_indices.push(r);

        let above = position(comp.q_max) + 1;
        if above >= units.len() {
            current.upper = Boundary::Open;
        } else if let UnitKind::Unmatched { treatment } = units[above].1 {
            current.upper = Boundary::Unit {
                score: score_at(above),
                treatment,
            };
        }
    }
    metas
}

/// Caliper-mode annotation for one component: whether a same-arm chain can
/// pass through it by re-pairing internally, and the entry/exit scores such
/// a traversal uses.
#[derive(Debug, Clone, Copy)]
pub struct BypassInfo {
    pub bypassable: bool,
    /// Smallest score in the component with arm opposite to its lowest unit.
    pub entry: f64,
    /// Largest score in the component with arm opposite to its highest unit.
    pub exit: f64,
}

/// Computes bypassability of every component under a caliper: the component
/// plus pseudo-units at its nearest neighbours must admit a perfect match
/// within the caliper, which on a line reduces to rank-pairing feasibility.
pub fn bypass_annotations(
    view: &DesignView,
    components: &[ConnectedComponent],
    caliper: f64,
) -> Vec<BypassInfo> {
    let units = sorted_units(view);
    let position = |score: f64| units.partition_point(|&(s, _)| s < score);

    components
        .iter()
        .map(|comp| {
            // Lower arm holds the units sharing the lowest unit's treatment.
            let (mut lower_arm, mut upper_arm): (Vec<f64>, Vec<f64>) = if comp.treated_above {
                (
                    comp.pair_indices.iter().map(|&p| view.pairs[p].control_score).collect(),
                    comp.pair_indices.iter().map(|&p| view.pairs[p].treated_score).collect(),
                )
            } else {
                (
                    comp.pair_indices.iter().map(|&p| view.pairs[p].treated_score).collect(),
                    comp.pair_indices.iter().map(|&p| view.pairs[p].control_score).collect(),
                )
            };
            lower_arm.sort_by(|a, b| a.partial_cmp(b).unwrap());
            upper_arm.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let entry = upper_arm[0];
            let exit = *lower_arm.last().unwrap();

            let below = position(comp.q_min).checked_sub(1).map(|i| units[i].0);
            let above = {
                let i = position(comp.q_max) + 1;
                (i < units.len()).then(|| units[i].0)
            };
            let bypassable = match (below, above) {
                (Some(lo), Some(hi)) => {
                    let mut ok = entry - lo <= caliper && hi - exit <= caliper;
                    for i in 0..lower_arm.len() - 1 {
                        ok &= upper_arm[i + 1] - lower_arm[i] <= caliper;
                    }
                    ok
                }
                _ => false,
            };
            BypassInfo {
                bypassable,
                entry,
                exit,
            }
        })
        .collect()
}

/// Diagnostic export of the structural analysis.
#[derive(Debug, Serialize)]
pub struct StructureReport {
    pub n_pairs: usize,
    pub n_unmatched: usize,
    pub overlap_edges: Vec<(usize, usize)>,
    pub components: Vec<ComponentReport>,
    pub meta_components: Vec<MetaReport>,
}

#[derive(Debug, Serialize)]
pub struct ComponentReport {
    pub size: usize,
    pub pair_indices: Vec<usize>,
    pub interval: [f64; 2],
    pub orientation: &'static str,
}

#[derive(Debug, Serialize)]
pub struct MetaReport {
    pub component_indices: Vec<usize>,
    pub lower_score: Option<f64>,
    pub lower_treatment: Option<u8>,
    pub upper_score: Option<f64>,
    pub upper_treatment: Option<u8>,
}

pub fn structure_report(
    view: &DesignView,
    graph: &OverlapGraph,
    components: &[ConnectedComponent],
    metas: &[MetaComponent],
) -> StructureReport {
    StructureReport {
        n_pairs: view.pairs.len(),
        n_unmatched: view.unmatched.len(),
        overlap_edges: graph.edges.clone(),
        components: components
            .iter()
            .map(|c| ComponentReport {
                size: c.pair_indices.len(),
                pair_indices: c.pair_indices.clone(),
                interval: [c.q_min, c.q_max],
                orientation: if c.treated_above {
                    "treated_above"
                } else {
                    "control_above"
                },
            })
            .collect(),
        meta_components: metas
            .iter()
            .map(|m| MetaReport {
                component_indices: m.component_indices.clone(),
                lower_score: m.lower.score(),
                lower_treatment: m.lower.treatment(),
                upper_score: m.upper.score(),
                upper_treatment: m.upper.treatment(),
            })
            .collect(),
    }
}

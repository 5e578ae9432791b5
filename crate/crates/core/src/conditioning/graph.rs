//! Null exposure graphs and greedy biclique decomposition.

use std::collections::HashSet;
use std::fmt::Write as _;

use fixedbitset::FixedBitSet;

use crate::assignment::AssignmentModel;
use crate::error::{CrtError, Result};
use crate::exec;
use crate::hypothesis::{ExposureMap, UnitSet};

use super::Partition;

/// Remaining-assignment count up to which maximal bicliques are enumerated exactly.
pub const EXACT_BICLIQUE_LIMIT: usize = 4096;

// Closed unit sets explored per greedy round before falling back to the heuristic.
const CLOSURE_CAP: usize = 200_000;
const HEURISTIC_SEEDS: usize = 32;

/// Bipartite graph on units × assignments with an edge `(i, z)` iff `D_i(z) = 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NullExposureGraph {
    n_units: usize,
    /// `adjacency[a]` = units at exposure 0 under assignment `a`.
    adjacency: Vec<FixedBitSet>,
}

impl NullExposureGraph {
    pub fn build(model: &AssignmentModel, exposure: &ExposureMap) -> Result<Self> {
        if !exposure.alphabet().contains(&0) {
            return Err(CrtError::Config(format!(
                "null exposure graph needs level 0 in the alphabet {:?}",
                exposure.alphabet()
            )));
        }
        let len = model.enumerable_len()?;
        let n = exposure.n_units();
        let adjacency = exec::map_range(len, |a| {
            let z = model.get(a);
            let mut s = FixedBitSet::with_capacity(n);
            for i in 0..n {
                if exposure.expose(i, &z) == 0 {
                    s.insert(i);
                }
            }
            s
        });
        Ok(NullExposureGraph {
            n_units: n,
            adjacency,
        })
    }

    /// Graph from explicit `(unit, assignment)` edges.
    pub fn from_edges(
        n_units: usize,
        n_assignments: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut adjacency = vec![FixedBitSet::with_capacity(n_units); n_assignments];
        for (i, a) in edges {
            if i >= n_units || a >= n_assignments {
                return Err(CrtError::Data(format!(
                    "edge ({i}, {a}) outside {n_units} units x {n_assignments} assignments"
                )));
            }
            adjacency[a].insert(i);
        }
        Ok(NullExposureGraph { n_units, adjacency })
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_assignments(&self) -> usize {
        self.adjacency.len()
    }

    pub fn has_edge(&self, unit: usize, assignment: usize) -> bool {
        self.adjacency[assignment].contains(unit)
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(|s| s.count_ones(..)).sum()
    }

    /// Units adjacent to `assignment`.
    pub fn units_of(&self, assignment: usize) -> UnitSet {
        UnitSet::from_indices(self.n_units, self.adjacency[assignment].ones())
    }

    /// All edges ordered by unit, then assignment.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, s)| s.ones().map(move |i| (i, a)))
            .collect();
        e.sort_unstable();
        e
    }

    /// Text edge list: a `units=<N> assignments=<M>` header, then one
    /// `unit<TAB>assignment` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("units={} assignments={}\n", self.n_units, self.n_assignments());
        for (i, a) in self.edges() {
            writeln!(out, "{i}\t{a}").unwrap();
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| CrtError::Data("edge list is empty".into()))?;
        let mut n_units = None;
        let mut n_assignments = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("units", v)) => n_units = v.parse::<usize>().ok(),
                Some(("assignments", v)) => n_assignments = v.parse::<usize>().ok(),
                _ => {}
            }
        }
        let (Some(n_units), Some(n_assignments)) = (n_units, n_assignments) else {
            return Err(CrtError::Data(format!(
                "line 1: expected header `units=<N> assignments=<M>`, got {header:?}"
            )));
        };
        let mut edges = Vec::new();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parsed = line
                .split_once('\t')
                .and_then(|(u, a)| Some((u.trim().parse().ok()?, a.trim().parse().ok()?)));
            match parsed {
                Some(edge) => edges.push(edge),
                None => {
                    return Err(CrtError::Data(format!(
                        "line {}: expected `unit<TAB>assignment`, got {line:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Self::from_edges(n_units, n_assignments, edges)
    }
}

/// Complete bipartite subgraph: every unit in `units` is at exposure 0 under
/// every assignment in `assignments`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Biclique {
    pub units: UnitSet,
    /// Space indices, ascending.
    pub assignments: Vec<usize>,
    /// Unit side smaller than the requested minimum.
    pub low_power: bool,
}

impl Biclique {
    pub fn edge_count(&self) -> usize {
        self.units.len() * self.assignments.len()
    }

    pub fn is_biclique_of(&self, graph: &NullExposureGraph) -> bool {
        self.assignments
            .iter()
            .all(|&a| self.units.iter().all(|i| graph.has_edge(i, a)))
    }
}

struct Candidate {
    units: FixedBitSet,
    assignments: Vec<usize>,
}

impl Candidate {
    fn score(&self) -> (usize, usize) {
        let h = self.units.count_ones(..);
        (h * self.assignments.len(), h)
    }

    /// Larger edge count, then larger unit side, then lexicographically smaller assignment side.
    fn better_than(&self, other: &Candidate) -> bool {
        let (a, b) = (self.score(), other.score());
        a > b || (a == b && self.assignments < other.assignments)
    }
}

fn closure(graph: &NullExposureGraph, remaining: &[usize], units: FixedBitSet) -> Candidate {
    let assignments: Vec<usize> = remaining
        .iter()
        .copied()
        .filter(|&a| units.is_subset(&graph.adjacency[a]))
        .collect();
    let mut h = units;
    for &a in &assignments {
        h.intersect_with(&graph.adjacency[a]);
    }
    Candidate {
        units: h,
        assignments,
    }
}

fn pick_best(candidates: Vec<Candidate>) -> Option<Candidate> {
    candidates
        .into_iter()
        .reduce(|best, c| if c.better_than(&best) { c } else { best })
}

/// Unit sets closed under intersection with assignment neighborhoods; these
/// are exactly the unit sides of maximal bicliques. `None` if the cap is hit.
fn closed_unit_sets(
    graph: &NullExposureGraph,
    remaining: &[usize],
    min_units: usize,
) -> Option<Vec<FixedBitSet>> {
    let mut seen: HashSet<FixedBitSet> = HashSet::new();
    let mut order = Vec::new();
    let mut stack = Vec::new();
    for &a in remaining {
        let s = graph.adjacency[a].clone();
        if s.count_ones(..) >= min_units && seen.insert(s.clone()) {
            order.push(s.clone());
            stack.push(s);
        }
    }
    while let Some(x) = stack.pop() {
        for &a in remaining {
            let mut y = x.clone();
            y.intersect_with(&graph.adjacency[a]);
            if y.count_ones(..) >= min_units && !seen.contains(&y) {
                seen.insert(y.clone());
                order.push(y.clone());
                stack.push(y);
                if seen.len() > CLOSURE_CAP {
                    return None;
                }
            }
        }
    }
    Some(order)
}

fn best_biclique(graph: &NullExposureGraph, remaining: &[usize], min_units: usize) -> Option<Candidate> {
    let exact = if remaining.len() <= EXACT_BICLIQUE_LIMIT {
        closed_unit_sets(graph, remaining, min_units)
    } else {
        None
    };
    let seeds = match exact {
        Some(sets) => sets,
        None => {
            let mut by_degree: Vec<usize> = remaining.to_vec();
            by_degree.sort_by_key(|&a| (std::cmp::Reverse(graph.adjacency[a].count_ones(..)), a));
            by_degree
                .into_iter()
                .take(HEURISTIC_SEEDS)
                .map(|a| graph.adjacency[a].clone())
                .filter(|s| s.count_ones(..) >= min_units)
                .collect()
        }
    };
    pick_best(exec::map_slice(&seeds, |s| closure(graph, remaining, s.clone())))
}

/// Greedy biclique decomposition: repeatedly take the largest biclique (by
/// edge count) among the remaining assignments and remove its assignments.
///
/// Bicliques need at least `max(min_units, 1)` units; once none is left, each
/// remaining assignment becomes its own cell with its full neighborhood as the
/// unit side. Assignment sides always partition the space. Ties are broken by
/// larger unit side, then lexicographically smaller assignment side.
pub fn biclique_decomposition(graph: &NullExposureGraph, min_units: usize) -> Vec<Biclique> {
    let n = graph.n_units();
    let mut remaining: Vec<usize> = (0..graph.n_assignments()).collect();
    let mut out = Vec::new();
    let need = min_units.max(1);
    while !remaining.is_empty() {
        match best_biclique(graph, &remaining, need) {
            Some(c) => {
                let taken: HashSet<usize> = c.assignments.iter().copied().collect();
                remaining.retain(|a| !taken.contains(a));
                let units = UnitSet::from_indices(n, c.units.ones());
                out.push(Biclique {
                    low_power: units.len() < min_units,
                    units,
                    assignments: c.assignments,
                });
            }
            None => {
                for a in remaining.drain(..) {
                    let units = graph.units_of(a);
                    out.push(Biclique {
                        low_power: units.len() < min_units,
                        units,
                        assignments: vec![a],
                    });
                }
            }
        }
    }
    out
}

impl Partition {
    /// Partition whose cells are the assignment sides of a biclique decomposition.
    pub fn from_bicliques(model: &AssignmentModel, bicliques: &[Biclique]) -> Result<Self> {
        let len = model.enumerable_len()?;
        let mut cell_of = vec![usize::MAX; len];
        for (m, b) in bicliques.iter().enumerate() {
            for &a in &b.assignments {
                if a >= len || cell_of[a] != usize::MAX {
                    return Err(CrtError::Argument(format!(
                        "assignment {a} is out of range or covered twice"
                    )));
                }
                cell_of[a] = m;
            }
        }
        if let Some(a) = cell_of.iter().position(|&c| c == usize::MAX) {
            return Err(CrtError::Argument(format!("assignment {a} is not covered")));
        }
        Partition::from_cell_labels(model, cell_of)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::Assignment;

    fn toy() -> (AssignmentModel, ExposureMap) {
        // 3 units on a line; a unit is at level 0 iff neither it nor a neighbour is treated
        let model = AssignmentModel::complete_randomization(4, 1).unwrap();
        let e = ExposureMap::new(3, vec![0, 1], |i, z: &Assignment| {
            let near = (i.saturating_sub(1)..=(i + 1).min(3)).any(|j| z[j] == 1);
            near as i64
        });
        (model, e)
    }

    #[test]
    fn toy_edges_match_hand_enumeration() {
        let (model, e) = toy();
        let g = NullExposureGraph::build(&model, &e).unwrap();
        // assignments in order: 0001, 0010, 0100, 1000
        // 0001: unit 2 adjacent to 3 -> exposed; units 0,1 at 0
        // 0010: units 1,2 exposed; unit 0 at 0
        // 0100: units 0,1,2 exposed
        // 1000: units 0,1 exposed; unit 2 at 0
        assert_eq!(g.edges(), vec![(0, 0), (0, 1), (1, 0), (2, 3)]);
        assert_eq!(g.edge_count(), 4);
    }

    #[test]
    fn complete_and_empty_graphs() {
        let model = AssignmentModel::complete_randomization(4, 2).unwrap();
        let all_zero = ExposureMap::new(3, vec![0, 1], |_, _| 0);
        let g = NullExposureGraph::build(&model, &all_zero).unwrap();
        assert_eq!(g.edge_count(), 18);
        let d = biclique_decomposition(&g, 1);
        assert_eq!(d.len(), 1);
        assert!(d[0].units.is_full());
        assert_eq!(d[0].assignments, (0..6).collect::<Vec<_>>());

        let none = ExposureMap::new(3, vec![0, 1], |_, _| 1);
        let g = NullExposureGraph::build(&model, &none).unwrap();
        assert_eq!(g.edge_count(), 0);
        let d = biclique_decomposition(&g, 1);
        assert_eq!(d.len(), 6);
        assert!(d
            .iter()
            .all(|b| b.units.is_empty() && b.assignments.len() == 1 && b.low_power));
    }

    #[test]
    fn missing_zero_level_is_rejected() {
        let model = AssignmentModel::complete_randomization(3, 1).unwrap();
        let e = ExposureMap::new(3, vec![1, 2], |_, _| 1);
        assert!(NullExposureGraph::build(&model, &e).is_err());
    }

    #[test]
    fn edge_list_round_trip() {
        let (model, e) = toy();
        let g = NullExposureGraph::build(&model, &e).unwrap();
        let text = g.to_edge_list();
        assert!(text.starts_with("units=3 assignments=4\n0\t0\n"));
        assert_eq!(NullExposureGraph::from_edge_list(&text).unwrap(), g);
        let bad = "units=3 assignments=4\n0 1\n";
        let err = NullExposureGraph::from_edge_list(bad).unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert!(NullExposureGraph::from_edge_list("nodes=3\n").is_err());
    }

    #[test]
    fn toy_decomposition() {
        let (model, e) = toy();
        let g = NullExposureGraph::build(&model, &e).unwrap();
        let d = biclique_decomposition(&g, 1);
        // {0,1} x {0001} and {0} x {0001,0010} both have 2 edges; the larger unit side wins
        assert_eq!(d[0].units.to_vec(), vec![0, 1]);
        assert_eq!(d[0].assignments, vec![0]);
        assert_eq!(d[1].units.to_vec(), vec![0]);
        assert_eq!(d[1].assignments, vec![1]);
        assert_eq!(d[2].units.to_vec(), vec![2]);
        assert_eq!(d[2].assignments, vec![3]);
        assert!(d[3].units.is_empty());
        let p = Partition::from_bicliques(&model, &d).unwrap();
        assert_eq!(p.cell_sizes().unwrap().iter().sum::<usize>(), 4);
        assert!(d.iter().all(|b| b.is_biclique_of(&g)));
    }
}

//! Exact and greedy solvers for the label-assignment ILP.
//!
//! A problem assigns each node a set of labels (at most `per_node_cap`, at
//! least one unless `allow_empty`, at most `global_cap` in total) maximizing
//!
//! ```text
//!   sum_u sum_{l in S_u} alpha[u, l]  +  w * sum_{(u,v,l,m) in beta, l in S_u, m in S_v} score
//! ```
//!
//! Three solvers, one contract:
//!
//! * [`solve_enumerate`] — brute force over every feasible assignment. The
//!   referee everything else is tested against; refuses search spaces past
//!   1e8 combinations.
//! * [`solve_branch_bound`] — depth-first search with an admissible bound
//!   (best remaining unary scores plus the positive undecided pairwise mass,
//!   capped per node pair at what can actually fire). Always exact.
//! * [`solve_exact`] — the production entry point: ranking solve when `beta`
//!   is empty (optimal there, and fast for many nodes), branch-and-bound
//!   otherwise.
//!
//! Ties between equal-objective optima are broken identically everywhere:
//! the winner is the assignment whose chosen-label vector is
//! lexicographically smallest, node-major with each node's labels ascending
//! and padded with the sentinel `n_labels`, so "has a label" sorts before
//! "empty" and smaller labels win. [`solve_greedy`] ignores `beta` entirely
//! and serves as the context-free baseline.

use std::collections::BTreeMap;

use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeTuple;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

// ── Problem and assignment types ─────────────────────────────────────────

/// One sparse pairwise term: adds `w * score` to the objective when node `u`
/// selects `l_u` and node `v` selects `l_v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaEntry {
    pub u: usize,
    pub v: usize,
    pub l_u: usize,
    pub l_v: usize,
    pub score: f64,
}

// On the wire a beta entry is the compact tuple [u, v, l_u, l_v, score].
impl Serialize for BetaEntry {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut t = s.serialize_tuple(5)?;
        t.serialize_element(&self.u)?;
        t.serialize_element(&self.v)?;
        t.serialize_element(&self.l_u)?;
        t.serialize_element(&self.l_v)?;
        t.serialize_element(&self.score)?;
        t.end()
    }
}

impl<'de> Deserialize<'de> for BetaEntry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = BetaEntry;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a [u, v, l_u, l_v, score] tuple")
            }
            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<BetaEntry, A::Error> {
                use serde::de::Error as DeError;
                let u = seq.next_element()?.ok_or_else(|| DeError::invalid_length(0, &self))?;
                let v = seq.next_element()?.ok_or_else(|| DeError::invalid_length(1, &self))?;
                let l_u = seq.next_element()?.ok_or_else(|| DeError::invalid_length(2, &self))?;
                let l_v = seq.next_element()?.ok_or_else(|| DeError::invalid_length(3, &self))?;
                let score = seq.next_element()?.ok_or_else(|| DeError::invalid_length(4, &self))?;
                Ok(BetaEntry { u, v, l_u, l_v, score })
            }
        }
        d.deserialize_tuple(5, V)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssignmentProblem {
    pub n_nodes: usize,
    pub n_labels: usize,
    /// Unary scores, row-major `[n_nodes, n_labels]`.
    pub alpha: Vec<f64>,
    /// Sparse pairwise terms; empty means the problem decouples per node.
    #[serde(default)]
    pub beta: Vec<BetaEntry>,
    /// Weight multiplied into every pairwise score.
    #[serde(default = "default_w")]
    pub w: f64,
    /// Maximum labels per node.
    #[serde(default = "default_cap")]
    pub per_node_cap: usize,
    /// Maximum labels in total; `None` is unbounded.
    #[serde(default)]
    pub global_cap: Option<usize>,
    /// Whether a node may end up with no label at all.
    #[serde(default)]
    pub allow_empty: bool,
}

fn default_w() -> f64 {
    1.0
}

fn default_cap() -> usize {
    1
}

/// A solution: per node the chosen labels in ascending order, plus the
/// objective it scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub chosen: Vec<Vec<usize>>,
    pub objective: f64,
}

impl AssignmentProblem {
    pub fn alpha_at(&self, node: usize, label: usize) -> f64 {
        self.alpha[node * self.n_labels + label]
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.n_nodes * self.n_labels {
            return Err(Error::config(format!(
                "alpha has {} entries, expected {} x {}",
                self.alpha.len(),
                self.n_nodes,
                self.n_labels
            )));
        }
        if self.n_nodes > 0 && self.n_labels == 0 && !self.allow_empty {
            return Err(Error::config("no labels to assign and empty nodes are forbidden"));
        }
        if !self.alpha.iter().all(|a| a.is_finite()) || !self.w.is_finite() {
            return Err(Error::config("alpha and w must be finite"));
        }
        if self.per_node_cap == 0 && !self.allow_empty {
            return Err(Error::config("per_node_cap 0 with allow_empty false is unsatisfiable"));
        }
        for (i, b) in self.beta.iter().enumerate() {
            if b.u >= self.n_nodes || b.v >= self.n_nodes {
                return Err(Error::config(format!("beta[{i}] references a node out of range")));
            }
            if b.u == b.v {
                return Err(Error::config(format!("beta[{i}] pairs node {} with itself", b.u)));
            }
            if b.l_u >= self.n_labels || b.l_v >= self.n_labels {
                return Err(Error::config(format!("beta[{i}] references a label out of range")));
            }
            if !b.score.is_finite() {
                return Err(Error::config(format!("beta[{i}] score is not finite")));
            }
        }
        Ok(())
    }

    /// Check an assignment against every structural constraint.
    pub fn check_feasible(&self, asg: &Assignment) -> Result<()> {
        if asg.chosen.len() != self.n_nodes {
            return Err(Error::Infeasible(format!(
                "{} nodes in assignment, problem has {}",
                asg.chosen.len(),
                self.n_nodes
            )));
        }
        let mut total = 0;
        for (u, labels) in asg.chosen.iter().enumerate() {
            if labels.len() > self.per_node_cap {
                return Err(Error::Infeasible(format!(
                    "node {u} has {} labels, cap is {}",
                    labels.len(),
                    self.per_node_cap
                )));
            }
            if labels.is_empty() && !self.allow_empty {
                return Err(Error::Infeasible(format!("node {u} is empty")));
            }
            for pair in labels.windows(2) {
                if pair[1] <= pair[0] {
                    return Err(Error::Infeasible(format!(
                        "node {u} labels must be strictly ascending"
                    )));
                }
            }
            for &l in labels {
                if l >= self.n_labels {
                    return Err(Error::Infeasible(format!("node {u} label {l} out of range")));
                }
            }
            total += labels.len();
        }
        if let Some(cap) = self.global_cap {
            if total > cap {
                return Err(Error::Infeasible(format!("{total} labels exceed global cap {cap}")));
            }
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem serializes")
    }

    pub fn from_json_str(s: &str) -> Result<AssignmentProblem> {
        let p: AssignmentProblem =
            serde_json::from_str(s).map_err(|e| Error::parse("assignment problem", e))?;
        p.validate()?;
        Ok(p)
    }
}

// ── Scoring ──────────────────────────────────────────────────────────────

/// Objective value of an assignment: unary terms in node-major label order,
/// then pairwise terms in `beta` list order, so the result is a stable
/// function of the inputs. Label ranges are checked; caps are not (use
/// [`AssignmentProblem::check_feasible`] for that).
pub fn score(problem: &AssignmentProblem, chosen: &[Vec<usize>]) -> Result<f64> {
    if chosen.len() != problem.n_nodes {
        return Err(Error::Infeasible(format!(
            "{} nodes in assignment, problem has {}",
            chosen.len(),
            problem.n_nodes
        )));
    }
    let mut total = 0.0;
    for (u, labels) in chosen.iter().enumerate() {
        for &l in labels {
            if l >= problem.n_labels {
                return Err(Error::Infeasible(format!("node {u} label {l} out of range")));
            }
            total += problem.alpha_at(u, l);
        }
    }
    for b in &problem.beta {
        if chosen[b.u].contains(&b.l_u) && chosen[b.v].contains(&b.l_v) {
            total += problem.w * b.score;
        }
    }
    Ok(total)
}

// ── Tie-break key ────────────────────────────────────────────────────────

/// Flattened comparison key: per node the ascending labels padded with the
/// sentinel `n_labels` to `per_node_cap` entries. Smaller key wins ties.
fn tie_key(problem: &AssignmentProblem, chosen: &[Vec<usize>]) -> Vec<usize> {
    let mut key = Vec::with_capacity(problem.n_nodes * problem.per_node_cap.max(1));
    for labels in chosen {
        for &l in labels {
            key.push(l);
        }
        for _ in labels.len()..problem.per_node_cap.max(1) {
            key.push(problem.n_labels);
        }
    }
    key
}

/// `candidate` strictly improves on the incumbent `(best_obj, best_key)`.
fn improves(obj: f64, key: &[usize], best_obj: f64, best_key: &[usize]) -> bool {
    obj > best_obj || (obj == best_obj && key < best_key)
}

// ── Enumeration (the referee) ────────────────────────────────────────────

/// Candidate label subsets for one node, in tie-key order (so the first
/// feasible optimum encountered is the lexicographic winner): each subset's
/// extensions come before the subset itself, and the empty set comes last.
fn node_subsets(n_labels: usize, cap: usize, allow_empty: bool) -> Vec<Vec<usize>> {
    fn rec(
        start: usize,
        n_labels: usize,
        cap: usize,
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        for l in start..n_labels {
            cur.push(l);
            if cur.len() < cap {
                rec(l + 1, n_labels, cap, cur, out);
            }
            out.push(cur.clone());
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if cap > 0 {
        let mut cur = Vec::new();
        rec(0, n_labels, cap, &mut cur, &mut out);
    }
    if allow_empty {
        out.push(Vec::new());
    }
    out
}

/// Number of per-node choices, for the search-space bound.
fn choice_count(n_labels: usize, cap: usize, allow_empty: bool) -> u128 {
    let mut count: u128 = if allow_empty { 1 } else { 0 };
    let mut level: u128 = 1;
    for s in 1..=cap.min(n_labels) {
        level = level * (n_labels - s + 1) as u128 / s as u128;
        count += level;
    }
    count
}

const ENUM_SPACE_LIMIT: u128 = 100_000_000;

/// Exhaustive search over all feasible assignments. Exact by construction;
/// rejects problems whose search space exceeds 1e8 combinations.
pub fn solve_enumerate(problem: &AssignmentProblem) -> Result<Assignment> {
    problem.validate()?;
    check_globally_feasible(problem)?;
    let per_node = choice_count(problem.n_labels, problem.per_node_cap, problem.allow_empty);
    let mut space: u128 = 1;
    for _ in 0..problem.n_nodes {
        space = space.saturating_mul(per_node);
        if space > ENUM_SPACE_LIMIT {
            return Err(Error::config(format!(
                "search space exceeds {ENUM_SPACE_LIMIT} combinations; use branch-and-bound"
            )));
        }
    }

    let subsets = node_subsets(problem.n_labels, problem.per_node_cap, problem.allow_empty);
    let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); problem.n_nodes];
    let mut best: Option<(f64, Vec<usize>, Vec<Vec<usize>>)> = None;

    fn rec(
        problem: &AssignmentProblem,
        subsets: &[Vec<usize>],
        depth: usize,
        used: usize,
        chosen: &mut Vec<Vec<usize>>,
        best: &mut Option<(f64, Vec<usize>, Vec<Vec<usize>>)>,
    ) -> Result<()> {
        if depth == problem.n_nodes {
            let obj = score(problem, chosen)?;
            let key = tie_key(problem, chosen);
            let take = match best {
                None => true,
                Some((b_obj, b_key, _)) => improves(obj, &key, *b_obj, b_key),
            };
            if take {
                *best = Some((obj, key, chosen.clone()));
            }
            return Ok(());
        }
        for subset in subsets {
            if let Some(cap) = problem.global_cap {
                if used + subset.len() > cap {
                    continue;
                }
            }
            chosen[depth] = subset.clone();
            rec(problem, subsets, depth + 1, used + subset.len(), chosen, best)?;
        }
        chosen[depth] = Vec::new();
        Ok(())
    }
    rec(problem, &subsets, 0, 0, &mut chosen, &mut best)?;

    let (_, _, winner) =
        best.ok_or_else(|| Error::Infeasible("no feasible assignment exists".into()))?;
    let objective = score(problem, &winner)?;
    Ok(Assignment { chosen: winner, objective })
}

fn check_globally_feasible(problem: &AssignmentProblem) -> Result<()> {
    if !problem.allow_empty {
        if let Some(cap) = problem.global_cap {
            if cap < problem.n_nodes {
                return Err(Error::Infeasible(format!(
                    "global cap {cap} cannot cover {} nodes that each need a label",
                    problem.n_nodes
                )));
            }
        }
    }
    Ok(())
}

// ── Branch and bound ─────────────────────────────────────────────────────

/// Depth-first branch-and-bound, exact for any problem. Nodes are decided in
/// index order; at each depth the bound adds the best still-achievable unary
/// score of every undecided node plus an optimistic pairwise mass: entries
/// sharing one (u, v) pair can fire at most `per_node_cap²` times, so each
/// pair group contributes only its top positive scores rather than all of
/// them — the refinement that keeps dense all-positive priors tractable.
/// Candidates at each node are tried best unary score first (quick, strong
/// incumbents), and an incumbent is only replaced on strict improvement of
/// the `(objective, tie key)` order, so the returned optimum is exactly the
/// lexicographic winner among ties regardless of search order.
pub fn solve_branch_bound(problem: &AssignmentProblem) -> Result<Assignment> {
    problem.validate()?;
    check_globally_feasible(problem)?;
    let n = problem.n_nodes;
    if n == 0 {
        return Ok(Assignment { chosen: Vec::new(), objective: 0.0 });
    }

    let subsets = node_subsets(problem.n_labels, problem.per_node_cap, problem.allow_empty);

    // Best achievable unary score per node, ignoring the global cap.
    let node_best: Vec<f64> = (0..n)
        .map(|u| {
            let row: Vec<f64> =
                (0..problem.n_labels).map(|l| problem.alpha_at(u, l)).collect();
            let mut positives: Vec<f64> = row.iter().copied().filter(|a| *a > 0.0).collect();
            positives.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let take = positives.iter().take(problem.per_node_cap).sum::<f64>();
            if problem.allow_empty || !positives.is_empty() {
                take
            } else {
                // Forced to pick something: the least bad single label.
                row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect();
    // suffix_unary[d] = sum of node_best for nodes >= d.
    let mut suffix_unary = vec![0.0; n + 1];
    for d in (0..n).rev() {
        suffix_unary[d] = suffix_unary[d + 1] + node_best[d];
    }

    // Pairwise entries become decided once their later endpoint is assigned.
    // by_later[u] lists the entries whose later endpoint is u; suffix_beta[d]
    // holds the optimistic mass of everything not yet decided at depth d.
    //
    // Entries with identical (u, v, l_u, l_v) fire together, so they are
    // merged first; within one directed (u, v) pair at most cap·cap merged
    // combinations can fire simultaneously, so each pair contributes only its
    // top positive merged scores. Both maps are ordered so the float sums are
    // reproducible.
    let mut by_later: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, b) in problem.beta.iter().enumerate() {
        by_later[b.u.max(b.v)].push(i);
    }
    let fire_limit = problem.per_node_cap * problem.per_node_cap;
    let mut suffix_beta = vec![0.0; n + 1];
    for d in (0..n).rev() {
        let mut merged: BTreeMap<(usize, usize, usize, usize), f64> = BTreeMap::new();
        for &i in &by_later[d] {
            let b = &problem.beta[i];
            *merged.entry((b.u, b.v, b.l_u, b.l_v)).or_insert(0.0) += problem.w * b.score;
        }
        let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for ((u, v, _, _), s) in merged {
            if s > 0.0 {
                groups.entry((u, v)).or_default().push(s);
            }
        }
        let mut here = 0.0;
        for (_, mut scores) in groups {
            scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
            here += scores.iter().take(fire_limit).sum::<f64>();
        }
        suffix_beta[d] = suffix_beta[d + 1] + here;
    }

    // Remaining nodes that must take at least one label (feasibility prune
    // under a global cap).
    let forced_suffix: Vec<usize> = if problem.allow_empty {
        vec![0; n + 1]
    } else {
        (0..=n).map(|d| n - d).collect()
    };

    // Per node, candidate subsets ordered best unary score first. The sort is
    // stable, so equal scores keep the tie-key order the subsets were
    // generated in; correctness never depends on this ordering (the incumbent
    // comparison below is total), it just produces strong incumbents early.
    let order: Vec<Vec<usize>> = (0..n)
        .map(|u| {
            let sums: Vec<f64> = subsets
                .iter()
                .map(|s| s.iter().map(|&l| problem.alpha_at(u, l)).sum::<f64>())
                .collect();
            let mut idx: Vec<usize> = (0..subsets.len()).collect();
            idx.sort_by(|&a, &b| sums[b].partial_cmp(&sums[a]).unwrap());
            idx
        })
        .collect();

    struct Search<'p> {
        problem: &'p AssignmentProblem,
        subsets: Vec<Vec<usize>>,
        order: Vec<Vec<usize>>,
        suffix_unary: Vec<f64>,
        suffix_beta: Vec<f64>,
        by_later: Vec<Vec<usize>>,
        forced_suffix: Vec<usize>,
        chosen: Vec<Vec<usize>>,
        best: Option<(f64, Vec<usize>, Vec<Vec<usize>>)>,
    }

    impl Search<'_> {
        fn dfs(&mut self, depth: usize, used: usize, cur: f64) {
            let n = self.problem.n_nodes;
            if depth == n {
                let key = tie_key(self.problem, &self.chosen);
                let take = match &self.best {
                    None => true,
                    Some((b_obj, b_key, _)) => improves(cur, &key, *b_obj, b_key),
                };
                if take {
                    self.best = Some((cur, key, self.chosen.clone()));
                }
                return;
            }
            let order: Vec<usize> = self.order[depth].clone();
            for &si in &order {
                let sub_len = self.subsets[si].len();
                if let Some(cap) = self.problem.global_cap {
                    let after = used + sub_len;
                    if after > cap || after + self.forced_suffix[depth + 1] > cap {
                        continue;
                    }
                }
                // Unary gain of this subset.
                let mut gain: f64 = 0.0;
                for &l in &self.subsets[si] {
                    gain += self.problem.alpha_at(depth, l);
                }
                // Pairwise entries decided by fixing this node.
                self.chosen[depth] = self.subsets[si].clone();
                for &i in &self.by_later[depth] {
                    let b = &self.problem.beta[i];
                    let (lo, lo_label, hi_label) = if b.u < b.v {
                        (b.u, b.l_u, b.l_v)
                    } else {
                        (b.v, b.l_v, b.l_u)
                    };
                    if self.chosen[lo].contains(&lo_label)
                        && self.chosen[depth].contains(&hi_label)
                    {
                        gain += self.problem.w * b.score;
                    }
                }
                let cur_next = cur + gain;
                let bound = cur_next + self.suffix_unary[depth + 1] + self.suffix_beta[depth + 1];
                if let Some((b_obj, _, _)) = &self.best {
                    if bound < *b_obj {
                        continue;
                    }
                }
                self.dfs(depth + 1, used + sub_len, cur_next);
            }
            self.chosen[depth] = Vec::new();
        }
    }

    let mut search = Search {
        problem,
        subsets,
        order,
        suffix_unary,
        suffix_beta,
        by_later,
        forced_suffix,
        chosen: vec![Vec::new(); n],
        best: None,
    };
    search.dfs(0, 0, 0.0);

    let (_, _, winner) = search
        .best
        .ok_or_else(|| Error::Infeasible("no feasible assignment exists".into()))?;
    // Recompute through score() so enumeration and branch-and-bound report
    // bit-identical objectives for identical assignments.
    let objective = score(problem, &winner)?;
    Ok(Assignment { chosen: winner, objective })
}

// ── Ranking solve (exact when beta is empty) and greedy baseline ─────────

/// Shared machinery: per node the best labels by unary score, then a global
/// ranking pass to honor the total cap. Exact for decoupled problems, and by
/// definition the greedy baseline everywhere.
fn ranking_solve(problem: &AssignmentProblem) -> Result<Assignment> {
    problem.validate()?;
    check_globally_feasible(problem)?;
    let n = problem.n_nodes;
    let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut budget = problem.global_cap.unwrap_or(usize::MAX);

    // Per node: labels sorted by (alpha desc, label asc), capped.
    let mut optional: Vec<(f64, usize, usize)> = Vec::new(); // (alpha, node, label)
    for u in 0..n {
        let mut order: Vec<usize> = (0..problem.n_labels).collect();
        order.sort_by(|&a, &b| {
            problem
                .alpha_at(u, b)
                .partial_cmp(&problem.alpha_at(u, a))
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut taken = 0;
        for (rank, &l) in order.iter().enumerate() {
            if taken >= problem.per_node_cap {
                break;
            }
            let a = problem.alpha_at(u, l);
            let forced = !problem.allow_empty && rank == 0;
            if forced {
                // The mandatory pick spends budget immediately.
                if budget == 0 {
                    return Err(Error::Infeasible(
                        "global cap exhausted before every node got its mandatory label".into(),
                    ));
                }
                chosen[u].push(l);
                budget -= 1;
                taken += 1;
            } else if a >= 0.0 {
                // Optional picks compete globally; zero-score picks are kept
                // because the tie rule prefers assigning to leaving empty.
                optional.push((a, u, l));
                taken += 1;
            }
        }
    }
    // Highest score first; ties prefer earlier nodes, then smaller labels.
    optional.sort_by(|x, y| {
        y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2))
    });
    for (_, u, l) in optional {
        if budget == 0 {
            break;
        }
        chosen[u].push(l);
        budget -= 1;
    }
    for labels in chosen.iter_mut() {
        labels.sort_unstable();
    }
    let objective = score(problem, &chosen)?;
    Ok(Assignment { chosen, objective })
}

/// Exact solution. Decoupled problems (empty `beta`) go through the ranking
/// solver, which handles hundreds of nodes; coupled ones go through
/// branch-and-bound.
pub fn solve_exact(problem: &AssignmentProblem) -> Result<Assignment> {
    if problem.beta.is_empty() {
        ranking_solve(problem)
    } else {
        solve_branch_bound(problem)
    }
}

/// Context-free baseline: per-node best labels by unary score alone, caps
/// respected, `beta` ignored. Coincides with [`solve_exact`] when `w` is 0
/// or `beta` is empty.
pub fn solve_greedy(problem: &AssignmentProblem) -> Result<Assignment> {
    ranking_solve(problem)
}

// ── Recall@K ─────────────────────────────────────────────────────────────

/// A scored candidate: this (subject, object) pair carries this label.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub pair: (usize, usize),
    pub label: usize,
    pub score: f64,
}

/// An annotated pair the predictions are measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtPair {
    pub pair: (usize, usize),
    pub label: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RecallResult {
    pub value: f64,
    /// Set when there was nothing to recall; the value is then 1.0 by
    /// convention and should be read with this flag in hand.
    pub empty_gt: bool,
}

/// Fraction of ground-truth entries that appear among the top-`k`
/// predictions by score. Ordering ties break by pair then label, so the
/// result never depends on input order.
pub fn recall_topk(predicted: &[ScoredPrediction], gt: &[GtPair], k: usize) -> RecallResult {
    if gt.is_empty() {
        return RecallResult { value: 1.0, empty_gt: true };
    }
    let mut ranked: Vec<&ScoredPrediction> = predicted.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.pair.cmp(&b.pair))
            .then(a.label.cmp(&b.label))
    });
    let top = &ranked[..k.min(ranked.len())];
    let mut hits = 0;
    for g in gt {
        if top.iter().any(|p| p.pair == g.pair && p.label == g.label) {
            hits += 1;
        }
    }
    RecallResult { value: hits as f64 / gt.len() as f64, empty_gt: false }
}

// ── Tests ────────────────────────────────────────────────────────────────

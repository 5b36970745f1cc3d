//! Two-level map-equation community detection over weighted undirected
//! graphs.
//!
//! Node visit rates are the stationary distribution of the weight-
//! proportional random walk with uniform teleportation (power iteration to an
//! infinity-norm residual below 1e-12, capped at 1000 iterations).
//! Teleportation steps are used only to make the walk ergodic; module exit
//! flow counts link steps alone, so an edgeless graph keeps its singleton
//! partition. With `plogp(x) = x log2 x` the objective is
//!
//! ```text
//! L(M) = plogp(q) - 2 sum_m plogp(q_m) + sum_m plogp(q_m + p_m) - sum_i plogp(p_i)
//! ```
//!
//! where `q_m` is module m's exit flow, `q` their sum, `p_m` the module's
//! visit mass, and `p_i` the node visit rates.
//!
//! Optimization is deterministic Louvain-style search: sweep nodes in
//! descending visit-rate order (ties by id) moving each to the candidate
//! module with the largest strict decrease in L (ties to the lowest module
//! id, a fresh singleton module considered last), aggregate modules into
//! super-nodes and recurse, then fine-tune the flat partition at node
//! granularity and re-coarsen until no move improves. Edges with
//! non-positive weight carry no random-walk flow and are ignored.

use std::collections::BTreeMap;

use crate::cluster::{KnnGraph, Partition};
use crate::error::{Error, Result};

const RATE_TOL: f64 = 1e-12;
const RATE_MAX_ITERS: usize = 1000;
const SWEEP_CAP: usize = 1000;
const OUTER_CAP: usize = 50;
/// A move must improve the codelength by more than this to be applied.
const MOVE_EPS: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct InfomapConfig {
    /// Teleportation probability of the random walk, in `[0, 1)`.
    pub teleport: f64,
    /// Reserved for optimizer variants; the deterministic sweep order used
    /// here consumes no randomness, so the result does not depend on it.
    pub seed: u64,
}

impl Default for InfomapConfig {
    fn default() -> Self {
        InfomapConfig {
            teleport: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InfomapResult {
    pub partition: Partition,
    /// Map-equation value of the returned partition, in bits.
    pub codelength: f64,
}

fn plogp(x: f64) -> f64 {
    if x > 0.0 {
        x * x.log2()
    } else {
        0.0
    }
}

/// Nodes with directed flows; level 0 carries one node per graph node.
struct Level {
    mass: Vec<f64>,
    /// Directed link flow between distinct nodes of this level.
    out: Vec<Vec<(usize, f64)>>,
    inn: Vec<Vec<(usize, f64)>>,
    /// Smallest original node index inside each node, for deterministic
    /// ordering across levels.
    min_orig: Vec<usize>,
}

impl Level {
    fn len(&self) -> usize {
        self.mass.len()
    }

    fn from_graph(graph: &KnnGraph, teleport: f64) -> Self {
        let n = graph.node_count();
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(a, b, w) in graph.edges() {
            if w > 0.0 {
                adj[a as usize].push((b as usize, w));
                adj[b as usize].push((a as usize, w));
            }
        }
        let strength: Vec<f64> = adj
            .iter()
            .map(|list| list.iter().map(|&(_, w)| w).sum())
            .collect();

        let p = visit_rates(&adj, &strength, teleport);

        let mut out: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut inn: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for i in 0..n {
            if strength[i] <= 0.0 {
                continue;
            }
            let scale = (1.0 - teleport) * p[i] / strength[i];
            for &(j, w) in &adj[i] {
                let f = scale * w;
                out[i].push((j, f));
                inn[j].push((i, f));
            }
        }
        Level {
            mass: p,
            out,
            inn,
            min_orig: (0..n).collect(),
        }
    }
}

/// Stationary visit rates of the teleporting random walk. Mass on nodes with
/// no positive-weight edges is redistributed uniformly each step.
fn visit_rates(adj: &[Vec<(usize, f64)>], strength: &[f64], teleport: f64) -> Vec<f64> {
    let n = adj.len();
    let uniform = 1.0 / n as f64;
    let mut p = vec![uniform; n];
    let mut next = vec![0.0; n];
    for _ in 0..RATE_MAX_ITERS {
        let dangling: f64 = (0..n).filter(|&i| strength[i] <= 0.0).map(|i| p[i]).sum();
        let base = teleport * uniform + (1.0 - teleport) * dangling * uniform;
        next.iter_mut().for_each(|x| *x = base);
        for i in 0..n {
            if strength[i] > 0.0 {
                let scale = (1.0 - teleport) * p[i] / strength[i];
                for &(j, w) in &adj[i] {
                    next[j] += scale * w;
                }
            }
        }
        let resid = p
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut p, &mut next);
        if resid < RATE_TOL {
            break;
        }
    }
    p
}

/// Codelength of a flat assignment over the level-0 nodes.
fn flat_codelength(base: &Level, module_of: &[usize]) -> f64 {
    let mut mod_mass: BTreeMap<usize, f64> = BTreeMap::new();
    let mut mod_exit: BTreeMap<usize, f64> = BTreeMap::new();
    for (i, &m) in module_of.iter().enumerate() {
        *mod_mass.entry(m).or_insert(0.0) += base.mass[i];
        mod_exit.entry(m).or_insert(0.0);
        for &(j, f) in &base.out[i] {
            if module_of[j] != m {
                *mod_exit.entry(m).or_insert(0.0) += f;
            }
        }
    }
    let q: f64 = mod_exit.values().sum();
    let mut l = plogp(q);
    for (m, &exit) in &mod_exit {
        l -= 2.0 * plogp(exit);
        l += plogp(exit + mod_mass[m]);
    }
    for &p in &base.mass {
        l -= plogp(p);
    }
    l
}

struct Optimizer<'a> {
    level: &'a Level,
    module: Vec<usize>,
    mod_mass: Vec<f64>,
    mod_exit: Vec<f64>,
    mod_size: Vec<usize>,
    q: f64,
    order: Vec<usize>,
}

struct Move {
    delta: f64,
    target: Option<usize>, // None = fresh singleton module
    exit_a: f64,
    exit_b: f64,
    q: f64,
}

impl<'a> Optimizer<'a> {
    /// Start from an existing assignment (identity for the usual
    /// all-singletons start). Module slots are renumbered densely in order of
    /// smallest member index.
    fn new(level: &'a Level, assignment: &[usize]) -> Self {
        let mut slot_of: BTreeMap<usize, usize> = BTreeMap::new();
        let mut module = vec![0usize; level.len()];
        for i in 0..level.len() {
            let next_slot = slot_of.len();
            let slot = *slot_of.entry(assignment[i]).or_insert(next_slot);
            module[i] = slot;
        }
        let slots = slot_of.len();
        let mut mod_mass = vec![0.0; slots];
        let mut mod_size = vec![0usize; slots];
        for i in 0..level.len() {
            mod_mass[module[i]] += level.mass[i];
            mod_size[module[i]] += 1;
        }
        let mut mod_exit = vec![0.0; slots];
        for i in 0..level.len() {
            for &(j, f) in &level.out[i] {
                if module[j] != module[i] {
                    mod_exit[module[i]] += f;
                }
            }
        }
        let q = mod_exit.iter().sum();

        let mut order: Vec<usize> = (0..level.len()).collect();
        order.sort_unstable_by(|&a, &b| {
            level.mass[b]
                .total_cmp(&level.mass[a])
                .then_with(|| level.min_orig[a].cmp(&level.min_orig[b]))
        });

        Optimizer {
            level,
            module,
            mod_mass,
            mod_exit,
            mod_size,
            q,
            order,
        }
    }

    /// Flows from node `u` to each module and back, keyed by module slot.
    fn adjacent_flows(&self, u: usize) -> BTreeMap<usize, (f64, f64)> {
        let mut flows: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for &(j, f) in &self.level.out[u] {
            flows.entry(self.module[j]).or_insert((0.0, 0.0)).0 += f;
        }
        for &(j, f) in &self.level.inn[u] {
            flows.entry(self.module[j]).or_insert((0.0, 0.0)).1 += f;
        }
        flows
    }

    fn eval_move(
        &self,
        u: usize,
        from: usize,
        to: Option<usize>,
        flows: &BTreeMap<usize, (f64, f64)>,
        fout_u: f64,
    ) -> Move {
        let (to_a, from_a) = flows.get(&from).copied().unwrap_or((0.0, 0.0));
        let (to_b, from_b, exit_b, mass_b) = match to {
            Some(b) => {
                let (t, f) = flows.get(&b).copied().unwrap_or((0.0, 0.0));
                (t, f, self.mod_exit[b], self.mod_mass[b])
            }
            None => (0.0, 0.0, 0.0, 0.0),
        };
        let mass_u = self.level.mass[u];
        let exit_a = self.mod_exit[from];
        let mass_a = self.mod_mass[from];

        let exit_a_new = exit_a - (fout_u - to_a) + from_a;
        let exit_b_new = exit_b + (fout_u - to_b) - from_b;
        let q_new = self.q - exit_a - exit_b + exit_a_new + exit_b_new;

        let delta = plogp(q_new) - plogp(self.q)
            - 2.0 * (plogp(exit_a_new) + plogp(exit_b_new) - plogp(exit_a) - plogp(exit_b))
            + plogp(exit_a_new + mass_a - mass_u)
            - plogp(exit_a + mass_a)
            + plogp(exit_b_new + mass_b + mass_u)
            - plogp(exit_b + mass_b);

        Move {
            delta,
            target: to,
            exit_a: exit_a_new,
            exit_b: exit_b_new,
            q: q_new,
        }
    }

    fn apply_move(&mut self, u: usize, mv: &Move) {
        let from = self.module[u];
        let to = match mv.target {
            Some(b) => b,
            None => {
                self.mod_mass.push(0.0);
                self.mod_exit.push(0.0);
                self.mod_size.push(0);
                self.mod_mass.len() - 1
            }
        };
        let mass_u = self.level.mass[u];
        self.mod_mass[from] -= mass_u;
        self.mod_size[from] -= 1;
        self.mod_exit[from] = mv.exit_a;
        self.mod_mass[to] += mass_u;
        self.mod_size[to] += 1;
        self.mod_exit[to] = mv.exit_b;
        self.q = mv.q;
        self.module[u] = to;
    }

    /// Repeated full sweeps until one makes no move; true if anything moved.
    fn optimize(&mut self) -> bool {
        let mut any = false;
        for _ in 0..SWEEP_CAP {
            let mut moved = false;
            for idx in 0..self.order.len() {
                let u = self.order[idx];
                let from = self.module[u];
                let flows = self.adjacent_flows(u);
                let fout_u: f64 = self.level.out[u].iter().map(|&(_, f)| f).sum();

                let mut best: Option<Move> = None;
                for &m in flows.keys() {
                    if m == from {
                        continue;
                    }
                    let mv = self.eval_move(u, from, Some(m), &flows, fout_u);
                    if best.as_ref().is_none_or(|b| mv.delta < b.delta) {
                        best = Some(mv);
                    }
                }
                if self.mod_size[from] > 1 {
                    let mv = self.eval_move(u, from, None, &flows, fout_u);
                    if best.as_ref().is_none_or(|b| mv.delta < b.delta) {
                        best = Some(mv);
                    }
                }
                if let Some(mv) = best {
                    if mv.delta < -MOVE_EPS {
                        self.apply_move(u, &mv);
                        moved = true;
                    }
                }
            }
            if !moved {
                break;
            }
            any = true;
        }
        any
    }

    /// Collapse modules into super-nodes. Returns the new level and the map
    /// from module slot to new node index.
    fn aggregate(&self) -> (Level, BTreeMap<usize, usize>) {
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..self.level.len() {
            members.entry(self.module[i]).or_default().push(i);
        }
        let mut slots: Vec<(usize, usize)> = members
            .iter()
            .map(|(&slot, m)| {
                (
                    m.iter().map(|&i| self.level.min_orig[i]).min().unwrap(),
                    slot,
                )
            })
            .collect();
        slots.sort_unstable();
        let remap: BTreeMap<usize, usize> = slots
            .iter()
            .enumerate()
            .map(|(new, &(_, slot))| (slot, new))
            .collect();

        let n = slots.len();
        let mut mass = vec![0.0; n];
        let mut min_orig = vec![usize::MAX; n];
        for (&slot, m) in &members {
            let g = remap[&slot];
            for &i in m {
                mass[g] += self.level.mass[i];
                min_orig[g] = min_orig[g].min(self.level.min_orig[i]);
            }
        }
        let mut flows: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for i in 0..self.level.len() {
            let a = remap[&self.module[i]];
            for &(j, f) in &self.level.out[i] {
                let b = remap[&self.module[j]];
                if a != b {
                    *flows.entry((a, b)).or_insert(0.0) += f;
                }
            }
        }
        let mut out: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut inn: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (&(a, b), &f) in &flows {
            out[a].push((b, f));
            inn[b].push((a, f));
        }
        (
            Level {
                mass,
                out,
                inn,
                min_orig,
            },
            remap,
        )
    }
}

/// Full multi-level search returning a module id per level-0 node.
fn solve(base: &Level) -> Vec<usize> {
    let n = base.len();
    let mut assignment: Vec<usize> = (0..n).collect();

    for _ in 0..OUTER_CAP {
        // Coarsening: optimize and aggregate until a level stops moving.
        let mut opt = Optimizer::new(base, &assignment);
        let mut improved = opt.optimize();
        let mut to_top: Vec<usize> = opt.module.clone();
        let (mut level, remap) = opt.aggregate();
        for t in to_top.iter_mut() {
            *t = remap[t];
        }
        while level.len() > 1 {
            let identity: Vec<usize> = (0..level.len()).collect();
            let mut opt = Optimizer::new(&level, &identity);
            if !opt.optimize() {
                break;
            }
            improved = true;
            let (next, remap) = opt.aggregate();
            for t in to_top.iter_mut() {
                *t = remap[&opt.module[*t]];
            }
            level = next;
        }
        assignment = to_top;

        // Fine-tuning: sweep original nodes inside the coarse solution.
        let mut tuner = Optimizer::new(base, &assignment);
        let tuned = tuner.optimize();
        if tuned {
            assignment = tuner.module.clone();
        }
        if !improved && !tuned {
            break;
        }
    }

    // Dense module ids ordered by smallest member node.
    let mut first_member: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, &m) in assignment.iter().enumerate() {
        first_member.entry(m).or_insert(i);
    }
    let mut slots: Vec<(usize, usize)> = first_member.iter().map(|(&m, &i)| (i, m)).collect();
    slots.sort_unstable();
    let renumber: BTreeMap<usize, usize> = slots
        .iter()
        .enumerate()
        .map(|(new, &(_, m))| (m, new))
        .collect();
    assignment.iter().map(|m| renumber[m]).collect()
}

fn validate_teleport(teleport: f64) -> Result<()> {
    if !(0.0..1.0).contains(&teleport) {
        return Err(Error::invalid(format!(
            "teleport probability must lie in [0, 1), got {teleport}"
        )));
    }
    Ok(())
}

/// Cluster a graph by greedy map-equation minimization.
///
/// Deterministic for fixed inputs; isolated nodes end up in singleton
/// modules.
pub fn infomap(graph: &KnnGraph, config: &InfomapConfig) -> Result<InfomapResult> {
    validate_teleport(config.teleport)?;
    if graph.node_count() == 0 {
        return Err(Error::invalid("infomap needs a nonempty graph"));
    }
    let base = Level::from_graph(graph, config.teleport);
    let module_of = solve(&base);
    let codelength = flat_codelength(&base, &module_of);
    let assignment: BTreeMap<String, u32> = graph
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), module_of[i] as u32))
        .collect();
    Ok(InfomapResult {
        partition: Partition::from_assignment(assignment),
        codelength,
    })
}

/// Map-equation value (bits) of an arbitrary assignment of the graph's nodes.
///
/// Every node must be assigned; ids outside the graph are rejected.
pub fn map_equation(
    graph: &KnnGraph,
    assignment: &BTreeMap<String, u32>,
    teleport: f64,
) -> Result<f64> {
    validate_teleport(teleport)?;
    if graph.node_count() == 0 {
        return Err(Error::invalid("map equation needs a nonempty graph"));
    }
    for id in assignment.keys() {
        if graph.nodes().binary_search(id).is_err() {
            return Err(Error::UnknownUtterance(id.clone()));
        }
    }
    let module_of: Vec<usize> = graph
        .nodes()
        .iter()
        .map(|id| {
            assignment
                .get(id)
                .map(|&m| m as usize)
                .ok_or_else(|| Error::invalid(format!("node `{id}` missing from assignment")))
        })
        .collect::<Result<_>>()?;
    let base = Level::from_graph(graph, teleport);
    Ok(flat_codelength(&base, &module_of))
}

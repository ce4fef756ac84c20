//! Hierarchical parsing: score node pairs, pick one with a Gumbel-softmax
//! straight-through sample, fuse it, and emit the next level.
//!
//! Pairs are indexed in strict upper-triangular row-major order:
//! `(0,1), (0,2), .., (0,N-1), (1,2), ..`. A fused node replaces the lower
//! index `a` and the node at `b` is dropped, so every other node keeps its
//! relative order and its exact value.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Sketch,
    Photo,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Sketch => "sketch",
            Branch::Photo => "photo",
        })
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sketch" => Ok(Branch::Sketch),
            "photo" => Ok(Branch::Photo),
            other => Err(Error::invalid("branch", format!("unknown branch {other:?}"))),
        }
    }
}

/// One hierarchy level of one branch: `N x d` node features plus stable ids.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub nodes: Var,
    pub node_ids: Vec<u32>,
    pub branch: Branch,
    /// Level index of this set; the input set is level 0.
    pub level: usize,
    next_id: u32,
}

impl FeatureSet {
    /// Wraps level-0 nodes; ids are `0..N`.
    pub fn leaves(g: &Graph, nodes: Var, branch: Branch) -> Self {
        let n = g.shape(nodes).rows as u32;
        FeatureSet {
            nodes,
            node_ids: (0..n).collect(),
            branch,
            level: 0,
            next_id: n,
        }
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    /// Same ids and level, different node values (co-attention output).
    pub fn with_nodes(&self, nodes: Var) -> Self {
        FeatureSet {
            nodes,
            ..self.clone()
        }
    }

    pub fn position_of(&self, id: u32) -> Option<usize> {
        self.node_ids.iter().position(|&x| x == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// Gumbel noise drawn from the seeded stream.
    Sample,
    /// Zero noise; used at evaluation.
    Greedy,
}

/// What downstream ops see in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// Forward one-hot, backward through the soft sample.
    StraightThrough,
    /// Forward and backward through the soft sample. Only used to check
    /// gradients against finite differences.
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub seed: u64,
    pub mode: NoiseMode,
    pub relaxation: Relaxation,
}

impl GumbelConfig {
    pub fn sample(temperature: f64, seed: u64) -> Self {
        GumbelConfig {
            temperature,
            seed,
            mode: NoiseMode::Sample,
            relaxation: Relaxation::StraightThrough,
        }
    }

    pub fn greedy(temperature: f64) -> Self {
        GumbelConfig {
            temperature,
            seed: 0,
            mode: NoiseMode::Greedy,
            relaxation: Relaxation::StraightThrough,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One merge: nodes `a_id` and `b_id` at `level` became `new_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub level: usize,
    pub branch: Branch,
    pub a_id: u32,
    pub b_id: u32,
    pub new_id: u32,
    /// Gumbel-softmax sample that chose this pair, when recorded.
    pub soft: Option<Vec<f64>>,
}

/// Ordered merge record of one or both branches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HierarchyTrace {
    pub entries: Vec<TraceEntry>,
}

impl HierarchyTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, e: TraceEntry) {
        self.entries.push(e);
    }

    /// Entries belonging to one branch, in order.
    pub fn branch(&self, branch: Branch) -> HierarchyTrace {
        HierarchyTrace {
            entries: self
                .entries
                .iter()
                .filter(|e| e.branch == branch)
                .cloned()
                .collect(),
        }
    }

    /// `level,branch,a_id,b_id,new_id` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.level, e.branch, e.a_id, e.b_id, e.new_id
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: "<trace>".into(),
                line: lineno + 1,
                msg,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(err(format!("expected 5 fields, got {}", fields.len())));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|e| err(format!("{s:?}: {e}")));
            entries.push(TraceEntry {
                level: num(fields[0])? as usize,
                branch: fields[1].parse().map_err(|e: Error| err(e.to_string()))?,
                a_id: num(fields[2])? as u32,
                b_id: num(fields[3])? as u32,
                new_id: num(fields[4])? as u32,
                soft: None,
            });
        }
        Ok(HierarchyTrace { entries })
    }

    /// Checks that the entries of a single branch form a binary merge tree
    /// over leaves `0..n_leaves`: levels count up from zero, merged ids are
    /// alive, new ids are fresh. With `complete`, the tree must also reach a
    /// single root.
    pub fn validate(&self, n_leaves: usize, complete: bool) -> Result<()> {
        let mut alive: HashSet<u32> = (0..n_leaves as u32).collect();
        let mut seen: HashSet<u32> = alive.clone();
        let branch = self.entries.first().map(|e| e.branch);
        for (k, e) in self.entries.iter().enumerate() {
            if Some(e.branch) != branch {
                return Err(Error::InvalidTrace("mixed branches".into()));
            }
            if e.level != k {
                return Err(Error::InvalidTrace(format!(
                    "entry {k} has level {}",
                    e.level
                )));
            }
            if e.a_id == e.b_id {
                return Err(Error::InvalidTrace(format!(
                    "level {k} merges node {} with itself",
                    e.a_id
                )));
            }
            for id in [e.a_id, e.b_id] {
                if !alive.remove(&id) {
                    return Err(Error::InvalidTrace(format!(
                        "level {k} consumes id {id}, which is not a live node"
                    )));
                }
            }
            if !seen.insert(e.new_id) {
                return Err(Error::InvalidTrace(format!(
                    "level {k} reuses id {}",
                    e.new_id
                )));
            }
            alive.insert(e.new_id);
        }
        if complete && alive.len() != 1 {
            return Err(Error::InvalidTrace(format!(
                "{} merges over {n_leaves} leaves leave {} roots",
                self.entries.len(),
                alive.len()
            )));
        }
        Ok(())
    }

    /// Leaf-id set produced by each merge, in entry order. Assumes a single
    /// branch over leaves `0..n_leaves`.
    pub fn merge_leaf_sets(&self, n_leaves: usize) -> Vec<BTreeSet<u32>> {
        let mut members: HashMap<u32, BTreeSet<u32>> = (0..n_leaves as u32)
            .map(|i| (i, BTreeSet::from([i])))
            .collect();
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let mut set = members.remove(&e.a_id).unwrap_or_default();
            set.extend(members.remove(&e.b_id).unwrap_or_default());
            members.insert(e.new_id, set.clone());
            out.push(set);
        }
        out
    }
}

/// Differentiable hierarchy weights bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct HierarchyVars {
    /// `d x d_h` compatibility projection.
    pub w_c: Var,
    /// `d x 2d` fusion matrix.
    pub w_f: Var,
}

/// All unordered pairs `(a, b)`, `a < b`, in flattening order.
pub fn upper_tri_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            pairs.push((a, b));
        }
    }
    pairs
}

/// Strict upper-triangular entries of `(X W_C)(X W_C)^T`, flattened into a
/// `1 x N(N-1)/2` row.
pub fn compatibility_scores(g: &mut Graph, x: &FeatureSet, w_c: Var) -> Result<Var> {
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid(
            "compatibility_scores",
            format!("needs at least 2 nodes, got {n}"),
        ));
    }
    let proj = g.matmul(x.nodes, w_c)?;
    let gram = g.matmul_nt(proj, proj)?;
    let flat: Vec<usize> = upper_tri_pairs(n)
        .into_iter()
        .map(|(a, b)| a * n + b)
        .collect();
    g.gather(gram, &flat)
}

/// Standard Gumbel noise `-ln(-ln u)`, or zeros in greedy mode.
pub fn gumbel_noise<R: Rng>(h: usize, mode: NoiseMode, rng: &mut R) -> Vec<f64> {
    match mode {
        NoiseMode::Greedy => vec![0.0; h],
        NoiseMode::Sample => (0..h)
            .map(|_| {
                let u: f64 = loop {
                    let u: f64 = rng.gen();
                    if u > 0.0 {
                        break u;
                    }
                };
                -(-u.ln()).ln()
            })
            .collect(),
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
pub struct Selection {
    /// What downstream ops consume: the straight-through one-hot, or the
    /// soft sample under [`Relaxation::Soft`].
    pub weights: Var,
    pub soft: Var,
    pub index: usize,
}

/// Draws a Gumbel-softmax sample over `logits` (`1 x H`) and discretizes it.
pub fn gumbel_st_select<R: Rng>(
    g: &mut Graph,
    logits: Var,
    cfg: &GumbelConfig,
    rng: &mut R,
) -> Result<Selection> {
    let noise = gumbel_noise(g.shape(logits).numel(), cfg.mode, rng);
    gumbel_st_select_with_noise(g, logits, cfg, noise)
}

/// As [`gumbel_st_select`] with caller-supplied noise.
pub fn gumbel_st_select_with_noise(
    g: &mut Graph,
    logits: Var,
    cfg: &GumbelConfig,
    noise: Vec<f64>,
) -> Result<Selection> {
    cfg.validate()?;
    let shape = g.shape(logits);
    if shape.rows != 1 {
        return Err(Error::invalid("gumbel_st_select", "logits must be a row"));
    }
    if noise.len() != shape.cols {
        return Err(Error::invalid("gumbel_st_select", "noise length mismatch"));
    }
    let noise = g.constant(Tensor::row(noise));
    let perturbed = g.add(logits, noise)?;
    let scaled = g.scalar_mul(perturbed, 1.0 / cfg.temperature);
    let soft = g.softmax_rows(scaled);
    let index = argmax(g.value(soft).data());
    let weights = match cfg.relaxation {
        Relaxation::Soft => soft,
        Relaxation::StraightThrough => {
            let mut hot = vec![0.0; shape.cols];
            hot[index] = 1.0;
            g.straight_through(soft, Tensor::row(hot))?
        }
    };
    Ok(Selection {
        weights,
        soft,
        index,
    })
}

/// Replaces node `a` by `fused` and drops node `b`.
fn place_fused(
    g: &mut Graph,
    x: &FeatureSet,
    fused: Var,
    a: usize,
    b: usize,
) -> Result<(FeatureSet, TraceEntry)> {
    let n = x.len();
    let mut parts = Vec::with_capacity(3);
    if a > 0 {
        parts.push(g.select_rows(x.nodes, &(0..a).collect::<Vec<_>>())?);
    }
    parts.push(fused);
    let rest: Vec<usize> = (a + 1..n).filter(|&i| i != b).collect();
    if !rest.is_empty() {
        parts.push(g.select_rows(x.nodes, &rest)?);
    }
    let nodes = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)?
    };

    let new_id = x.next_id;
    let mut node_ids = x.node_ids.clone();
    let entry = TraceEntry {
        level: x.level,
        branch: x.branch,
        a_id: node_ids[a],
        b_id: node_ids[b],
        new_id,
        soft: None,
    };
    node_ids[a] = new_id;
    node_ids.remove(b);
    Ok((
        FeatureSet {
            nodes,
            node_ids,
            branch: x.branch,
            level: x.level + 1,
            next_id: new_id + 1,
        },
        entry,
    ))
}

fn check_pair(x: &FeatureSet, a: usize, b: usize) -> Result<()> {
    if a >= b || b >= x.len() {
        return Err(Error::invalid(
            "fuse_pair",
            format!("need a < b < {}, got a={a}, b={b}", x.len()),
        ));
    }
    Ok(())
}

/// `ReLU(W_F [x_a, x_b])` placed at `a`; `b` removed.
pub fn fuse_pair(
    g: &mut Graph,
    x: &FeatureSet,
    a: usize,
    b: usize,
    w_f: Var,
) -> Result<(FeatureSet, TraceEntry)> {
    check_pair(x, a, b)?;
    let pair = g.select_rows(x.nodes, &[a, b])?;
    let xa = g.select_rows(pair, &[0])?;
    let xb = g.select_rows(pair, &[1])?;
    let cat = g.concat_cols(xa, xb)?;
    let lin = g.matmul_nt(cat, w_f)?;
    let fused = g.relu(lin);
    place_fused(g, x, fused, a, b)
}

/// Fuses the pair named by two live node ids (explicit-hierarchy replay).
pub fn fuse_ids(
    g: &mut Graph,
    x: &FeatureSet,
    a_id: u32,
    b_id: u32,
    new_id: u32,
    w_f: Var,
) -> Result<(FeatureSet, TraceEntry)> {
    let pa = x
        .position_of(a_id)
        .ok_or_else(|| Error::InvalidTrace(format!("id {a_id} not live at level {}", x.level)))?;
    let pb = x
        .position_of(b_id)
        .ok_or_else(|| Error::InvalidTrace(format!("id {b_id} not live at level {}", x.level)))?;
    if pa == pb {
        return Err(Error::InvalidTrace(format!("id {a_id} merged with itself")));
    }
    let (a, b) = (pa.min(pb), pa.max(pb));
    let mut x = x.clone();
    x.next_id = new_id;
    fuse_pair(g, &x, a, b, w_f)
}

/// One level: score, select, fuse. The fused input is the selection-weighted
/// sum of all candidate pair concatenations, which equals `[x_a, x_b]` in
/// the forward pass under straight-through and lets the selection receive
/// gradients.
pub fn step<R: Rng>(
    g: &mut Graph,
    x: &FeatureSet,
    vars: &HierarchyVars,
    cfg: &GumbelConfig,
    rng: &mut R,
) -> Result<(FeatureSet, TraceEntry)> {
    let n = x.len();
    let logits = compatibility_scores(g, x, vars.w_c)?;
    let sel = gumbel_st_select(g, logits, cfg, rng)?;
    let pairs = upper_tri_pairs(n);
    let (a, b) = pairs[sel.index];

    let lhs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let rhs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let left = g.select_rows(x.nodes, &lhs)?;
    let right = g.select_rows(x.nodes, &rhs)?;
    let candidates = g.concat_cols(left, right)?;
    let mixed = g.matmul(sel.weights, candidates)?;
    let lin = g.matmul_nt(mixed, vars.w_f)?;
    let fused = g.relu(lin);

    let (next, mut entry) = place_fused(g, x, fused, a, b)?;
    entry.soft = Some(g.value(sel.soft).data().to_vec());
    Ok((next, entry))
}

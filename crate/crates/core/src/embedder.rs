//! The full forward pass: project region features, alternate co-attention
//! with one hierarchy step per branch until both branches hold one node,
//! and score the resulting pairs with the paired triplet objective.
//!
//! Co-attention runs at every level, including the final single-node
//! level, so an `N_S = N_P = 1` pair still gets one co-attention pass. A
//! branch that reaches one node stops fusing but keeps participating in
//! co-attention while the other branch finishes.
//!
//! Gallery items have no partner at retrieval time. [`embed_single`] runs
//! the same hierarchy loop with co-attention skipped; this is the embedding
//! that retrieval evaluation ranks by default.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::coattention::{coattend, CoattnVars};
use crate::error::{Error, Result};
use crate::hierarchy::{
    fuse_ids, step, Branch, FeatureSet, GumbelConfig, HierarchyTrace, HierarchyVars,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ModeFlags {
    pub no_coattn: bool,
    pub no_hierarchy: bool,
    pub explicit_hierarchy: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Region feature width before projection.
    pub d_raw: usize,
    pub d: usize,
    /// Shared by the compatibility and affinity projections.
    pub d_h: usize,
    pub tau: f64,
    pub margin: f64,
    pub modes: ModeFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_raw: 32,
            d: 512,
            d_h: 64,
            tau: 1.0,
            margin: 0.5,
            modes: ModeFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_h == 0 || self.d_raw == 0 {
            return Err(Error::Config("d, d_h and d_raw must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!(
                "margin must be nonnegative, got {}",
                self.margin
            )));
        }
        if self.modes.no_hierarchy && self.modes.explicit_hierarchy {
            return Err(Error::Config(
                "no_hierarchy and explicit_hierarchy are exclusive".into(),
            ));
        }
        Ok(())
    }
}

/// Stable parameter names, also used as checkpoint keys.
pub const PARAM_NAMES: [&str; 12] = [
    "proj.w",
    "proj.b",
    "hier.w_c",
    "hier.w_f",
    "coattn.w_s",
    "coattn.w_p",
    "coattn.w_gs",
    "coattn.w_gp",
    "coattn.z_s.w",
    "coattn.z_s.b",
    "coattn.z_p.w",
    "coattn.z_p.b",
];

/// Shrinks the initial Z transforms. Co-attention adds a residual at every
/// hierarchy level, so at full scale the cross-branch terms swamp the
/// region features before training starts.
pub const Z_INIT_SCALE: f64 = 0.01;

/// `(rows, cols)` of each entry of [`PARAM_NAMES`].
pub fn param_shapes(cfg: &ModelConfig) -> [(usize, usize); 12] {
    let (r, d, h) = (cfg.d_raw, cfg.d, cfg.d_h);
    [
        (r, d),
        (1, d),
        (d, h),
        (d, 2 * d),
        (d, h),
        (d, h),
        (2 * d, d),
        (2 * d, d),
        (d, d),
        (1, d),
        (d, d),
        (1, d),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    ids: [ParamId; 12],
}

impl Model {
    /// Uniform `±sqrt(1/fan_in)` weights, the Z transforms shrunk by
    /// [`Z_INIT_SCALE`]; biases start at zero.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, (rows, cols)) in PARAM_NAMES.iter().zip(param_shapes(&cfg)) {
            if name.ends_with(".b") {
                params.insert(*name, Tensor::zeros(rows, cols))?;
            } else {
                // W_F is stored d x 2d and applied transposed, so its fan-in
                // is its column count.
                let fan_in = if *name == "hier.w_f" { cols } else { rows };
                let id = params.insert_uniform(*name, rows, cols, fan_in, &mut rng)?;
                if name.starts_with("coattn.z_") {
                    for v in params.value_mut(id).data_mut() {
                        *v *= Z_INIT_SCALE;
                    }
                }
            }
        }
        Self::from_store(cfg, params)
    }

    /// Adopts an existing store after checking names and shapes.
    pub fn from_store(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let shapes = param_shapes(&cfg);
        let mut ids = Vec::with_capacity(PARAM_NAMES.len());
        for (name, expected) in PARAM_NAMES.iter().zip(shapes) {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let s = params.shape(id);
            if (s.rows, s.cols) != expected {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {s}, config expects [{}x{}]",
                    expected.0, expected.1
                )));
            }
            ids.push(id);
        }
        let ids: [ParamId; 12] = ids.try_into().expect("one id per name");
        Ok(Model { cfg, params, ids })
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        PARAM_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.ids[i])
    }

    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        let v: Vec<Var> = self.ids.iter().map(|&id| g.param(&self.params, id)).collect();
        ModelVars {
            proj_w: v[0],
            proj_b: v[1],
            hier: HierarchyVars {
                w_c: v[2],
                w_f: v[3],
            },
            coattn: CoattnVars {
                w_s: v[4],
                w_p: v[5],
                w_gs: v[6],
                w_gp: v[7],
                z_s_w: v[8],
                z_s_b: v[9],
                z_p_w: v[10],
                z_p_b: v[11],
            },
        }
    }

    /// Greedy-mode gallery/query embedding as a plain vector.
    pub fn embed_single_value(
        &self,
        regions: &Tensor,
        branch: Branch,
        explicit: Option<&HierarchyTrace>,
    ) -> Result<(Tensor, HierarchyTrace)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let gumbel = GumbelConfig::greedy(self.cfg.tau);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (v, trace) = embed_single(
            &mut g, &vars, &self.cfg, regions, branch, &gumbel, &mut rng, explicit,
        )?;
        Ok((g.value(v).clone(), trace))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub proj_w: Var,
    pub proj_b: Var,
    pub hier: HierarchyVars,
    pub coattn: CoattnVars,
}

/// Per-row affine map of raw region features to `d` dimensions.
pub fn project(g: &mut Graph, vars: &ModelVars, regions: &Tensor, branch: Branch) -> Result<FeatureSet> {
    if regions.rows() == 0 {
        return Err(Error::EmptyRegionSet);
    }
    let x = g.constant(regions.clone());
    let lin = g.matmul(x, vars.proj_w)?;
    let out = g.add_row_bias(lin, vars.proj_b)?;
    Ok(FeatureSet::leaves(g, out, branch))
}

/// Final vectors of one sketch/photo pair, as graph nodes.
#[derive(Clone, Debug)]
pub struct PairEmbedding {
    pub sketch_final: Var,
    pub photo_final: Var,
    pub sketch_trace: HierarchyTrace,
    pub photo_trace: HierarchyTrace,
}

/// Explicit merge orders for the two branches of a pair.
#[derive(Clone, Copy, Debug)]
pub struct ExplicitTraces<'a> {
    pub sketch: &'a HierarchyTrace,
    pub photo: &'a HierarchyTrace,
}

struct BranchState<'a> {
    set: FeatureSet,
    trace: HierarchyTrace,
    script: Option<std::slice::Iter<'a, crate::hierarchy::TraceEntry>>,
}

impl<'a> BranchState<'a> {
    fn new(set: FeatureSet, script: Option<&'a HierarchyTrace>) -> Result<Self> {
        if let Some(t) = script {
            t.validate(set.len(), true)?;
            if t.entries.iter().any(|e| e.branch != set.branch) {
                return Err(Error::InvalidTrace(format!(
                    "trace for the {} branch has foreign entries",
                    set.branch
                )));
            }
        }
        Ok(BranchState {
            set,
            trace: HierarchyTrace::new(),
            script: script.map(|t| t.entries.iter()),
        })
    }

    fn advance<R: Rng>(
        &mut self,
        g: &mut Graph,
        hier: &HierarchyVars,
        gumbel: &GumbelConfig,
        rng: &mut R,
    ) -> Result<()> {
        let (next, entry) = match &mut self.script {
            Some(it) => {
                let e = it
                    .next()
                    .ok_or_else(|| Error::InvalidTrace("trace ended early".into()))?;
                fuse_ids(g, &self.set, e.a_id, e.b_id, e.new_id, hier.w_f)?
            }
            None => step(g, &self.set, hier, gumbel, rng)?,
        };
        self.set = next;
        self.trace.push(entry);
        Ok(())
    }
}

/// Paired embedding of one sketch with one photo.
#[allow(clippy::too_many_arguments)]
pub fn embed_pair<R: Rng>(
    g: &mut Graph,
    vars: &ModelVars,
    cfg: &ModelConfig,
    sketch: &Tensor,
    photo: &Tensor,
    gumbel: &GumbelConfig,
    rng: &mut R,
    explicit: Option<ExplicitTraces<'_>>,
) -> Result<PairEmbedding> {
    let s = project(g, vars, sketch, Branch::Sketch)?;
    let p = project(g, vars, photo, Branch::Photo)?;
    let modes = cfg.modes;

    if modes.no_hierarchy {
        let (s, p) = if modes.no_coattn {
            (s, p)
        } else {
            coattend(g, &s, &p, &vars.coattn, cfg.d_h)?
        };
        return Ok(PairEmbedding {
            sketch_final: g.mean_rows(s.nodes),
            photo_final: g.mean_rows(p.nodes),
            sketch_trace: HierarchyTrace::new(),
            photo_trace: HierarchyTrace::new(),
        });
    }

    let scripts = match (modes.explicit_hierarchy, explicit) {
        (true, Some(t)) => (Some(t.sketch), Some(t.photo)),
        (true, None) => {
            return Err(Error::InvalidTrace(
                "explicit hierarchy mode needs a trace for both branches".into(),
            ))
        }
        (false, _) => (None, None),
    };
    let mut sk = BranchState::new(s, scripts.0)?;
    let mut ph = BranchState::new(p, scripts.1)?;

    loop {
        if !modes.no_coattn {
            let (s2, p2) = coattend(g, &sk.set, &ph.set, &vars.coattn, cfg.d_h)?;
            sk.set = s2;
            ph.set = p2;
        }
        if sk.set.len() == 1 && ph.set.len() == 1 {
            break;
        }
        if sk.set.len() > 1 {
            sk.advance(g, &vars.hier, gumbel, rng)?;
        }
        if ph.set.len() > 1 {
            ph.advance(g, &vars.hier, gumbel, rng)?;
        }
    }

    Ok(PairEmbedding {
        sketch_final: sk.set.nodes,
        photo_final: ph.set.nodes,
        sketch_trace: sk.trace,
        photo_trace: ph.trace,
    })
}

/// Partner-free embedding: projection plus the hierarchy loop, no
/// co-attention.
#[allow(clippy::too_many_arguments)]
pub fn embed_single<R: Rng>(
    g: &mut Graph,
    vars: &ModelVars,
    cfg: &ModelConfig,
    regions: &Tensor,
    branch: Branch,
    gumbel: &GumbelConfig,
    rng: &mut R,
    explicit: Option<&HierarchyTrace>,
) -> Result<(Var, HierarchyTrace)> {
    let x = project(g, vars, regions, branch)?;
    if cfg.modes.no_hierarchy {
        return Ok((g.mean_rows(x.nodes), HierarchyTrace::new()));
    }
    let script = if cfg.modes.explicit_hierarchy {
        Some(explicit.ok_or_else(|| {
            Error::InvalidTrace("explicit hierarchy mode needs a trace".into())
        })?)
    } else {
        None
    };
    let mut state = BranchState::new(x, script)?;
    while state.set.len() > 1 {
        state.advance(g, &vars.hier, gumbel, rng)?;
    }
    Ok((state.set.nodes, state.trace))
}

/// `max(0, margin + D(S+, P+) - D(S-, P-))` with `D` the squared distance.
pub fn triplet_loss(g: &mut Graph, pos: &PairEmbedding, neg: &PairEmbedding, margin: f64) -> Result<Var> {
    let d_pos = g.sq_euclidean(pos.sketch_final, pos.photo_final)?;
    let d_neg = g.sq_euclidean(neg.sketch_final, neg.photo_final)?;
    triplet_from_distances(g, d_pos, d_neg, margin)
}

pub fn triplet_from_distances(g: &mut Graph, d_pos: Var, d_neg: Var, margin: f64) -> Result<Var> {
    let diff = g.sub(d_pos, d_neg)?;
    let shifted = g.add_scalar(diff, margin);
    Ok(g.relu(shifted))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_raw: 5,
            d: 4,
            d_h: 3,
            ..ModelConfig::default()
        }
    }

    fn regions(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
        Tensor::new(n, c, (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn project_edge_cases() {
        let cfg = small_cfg();
        let mut model = Model::new(cfg.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = regions(&mut rng, 1, 5);
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let x = project(&mut g, &vars, &r, Branch::Sketch).unwrap();
        assert_eq!(x.len(), 1);

        // affine oracle
        let w = model.params.value(model.id("proj.w").unwrap()).clone();
        for c in 0..4 {
            let v: f64 = (0..5).map(|k| r.get(0, k) * w.get(k, c)).sum();
            assert!((g.value(x.nodes).get(0, c) - v).abs() < 1e-12);
        }

        let wid = model.id("proj.w").unwrap();
        model.params.set_value(wid, Tensor::zeros(5, 4)).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let x = project(&mut g, &vars, &regions(&mut rng, 3, 5), Branch::Photo).unwrap();
        assert!(g.value(x.nodes).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_nodes_need_no_steps() {
        let model = Model::new(small_cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s, p) = (regions(&mut rng, 1, 5), regions(&mut rng, 1, 5));
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let gumbel = GumbelConfig::sample(1.0, 0);
        let e = embed_pair(&mut g, &vars, &model.cfg, &s, &p, &gumbel, &mut rng, None).unwrap();
        assert!(e.sketch_trace.is_empty() && e.photo_trace.is_empty());
        assert_eq!(g.shape(e.sketch_final).rows, 1);
    }

    #[test]
    fn unequal_branches_idle_the_shorter_one() {
        let model = Model::new(small_cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s, p) = (regions(&mut rng, 3, 5), regions(&mut rng, 5, 5));
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let gumbel = GumbelConfig::sample(1.0, 0);
        let e = embed_pair(&mut g, &vars, &model.cfg, &s, &p, &gumbel, &mut rng, None).unwrap();
        assert_eq!(e.sketch_trace.len(), 2);
        assert_eq!(e.photo_trace.len(), 4);
        assert_eq!(e.photo_trace.entries.last().unwrap().level, 3);
    }

    #[test]
    fn triplet_loss_cases() {
        let eval = |dp: f64, dn: f64, m: f64| {
            let mut g = Graph::new();
            let p = g.variable(Tensor::scalar(dp));
            let n = g.variable(Tensor::scalar(dn));
            let l = triplet_from_distances(&mut g, p, n, m).unwrap();
            let grads = g.backward(l).unwrap();
            (
                g.value(l).item(),
                grads.get_or_zeros(&g, p).item(),
                grads.get_or_zeros(&g, n).item(),
            )
        };
        assert_eq!(eval(0.0, 0.5, 0.5).0, 0.0);
        assert_eq!(eval(1.0, 0.5, 0.5).0, 1.0);
        let (_, gp, gn) = eval(1.0, 0.5, 0.5);
        assert_eq!((gp, gn), (1.0, -1.0));
        assert_eq!(eval(0.2, 3.0, 0.5), (0.0, 0.0, 0.0));
    }

    #[test]
    fn embed_single_matches_pair_without_coattention() {
        let mut cfg = small_cfg();
        cfg.modes.no_coattn = true;
        let model = Model::new(cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (s, p) = (regions(&mut rng, 4, 5), regions(&mut rng, 3, 5));
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let gumbel = GumbelConfig::greedy(1.0);
        let e = embed_pair(&mut g, &vars, &model.cfg, &s, &p, &gumbel, &mut rng, None).unwrap();
        let (vs, ts) = model.embed_single_value(&s, Branch::Sketch, None).unwrap();
        let (vp, tp) = model.embed_single_value(&p, Branch::Photo, None).unwrap();
        assert_eq!(g.value(e.sketch_final), &vs);
        assert_eq!(g.value(e.photo_final), &vp);
        assert_eq!(ts.to_text(), e.sketch_trace.to_text());
        assert_eq!(tp.to_text(), e.photo_trace.to_text());
        let (again, _) = model.embed_single_value(&s, Branch::Sketch, None).unwrap();
        assert_eq!(again, vs);
    }

    #[test]
    fn embed_single_two_nodes_by_hand() {
        let model = Model::new(small_cfg(), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = regions(&mut rng, 2, 5);
        let (v, trace) = model.embed_single_value(&r, Branch::Photo, None).unwrap();
        assert_eq!(trace.len(), 1);
        let w = model.params.value(model.id("proj.w").unwrap());
        let wf = model.params.value(model.id("hier.w_f").unwrap());
        let proj: Vec<Vec<f64>> = (0..2)
            .map(|i| (0..4).map(|c| (0..5).map(|k| r.get(i, k) * w.get(k, c)).sum()).collect())
            .collect();
        let cat: Vec<f64> = proj.concat();
        for row in 0..4 {
            let lin: f64 = (0..8).map(|c| wf.get(row, c) * cat[c]).sum();
            assert!((v.get(0, row) - lin.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn explicit_mode_rejects_bad_traces() {
        let mut cfg = small_cfg();
        cfg.modes.explicit_hierarchy = true;
        let model = Model::new(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = regions(&mut rng, 3, 5);
        let short = HierarchyTrace::parse("0,photo,0,1,3\n").unwrap();
        assert!(model.embed_single_value(&r, Branch::Photo, Some(&short)).is_err());
        let wrong = HierarchyTrace::parse("0,photo,0,1,3\n1,photo,3,7,4\n").unwrap();
        assert!(model.embed_single_value(&r, Branch::Photo, Some(&wrong)).is_err());
        let ok = HierarchyTrace::parse("0,photo,0,2,3\n1,photo,1,3,4\n").unwrap();
        assert!(model.embed_single_value(&r, Branch::Photo, Some(&ok)).is_ok());
        assert!(model.embed_single_value(&r, Branch::Photo, None).is_err());
    }
}

//! Cross-modal co-attention between the sketch and photo node sets of one
//! level, with gated residual fusion.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::hierarchy::FeatureSet;

/// Co-attention weights bound into a graph. Row-vector convention: node
/// features are rows, so every projection right-multiplies.
#[derive(Clone, Copy, Debug)]
pub struct CoattnVars {
    /// `d x d_h` sketch affinity projection.
    pub w_s: Var,
    /// `d x d_h` photo affinity projection.
    pub w_p: Var,
    /// `2d x d` sketch gate.
    pub w_gs: Var,
    /// `2d x d` photo gate.
    pub w_gp: Var,
    pub z_s_w: Var,
    pub z_s_b: Var,
    pub z_p_w: Var,
    pub z_p_b: Var,
}

/// `A[i][j] = <S_i W_S, P_j W_P>`, shape `N_S x N_P`.
pub fn affinity(g: &mut Graph, s: Var, p: Var, w_s: Var, w_p: Var) -> Result<Var> {
    if g.shape(s).rows == 0 || g.shape(p).rows == 0 {
        return Err(Error::invalid("affinity", "empty node set"));
    }
    let sp = g.matmul(s, w_s)?;
    let pp = g.matmul(p, w_p)?;
    g.matmul_nt(sp, pp)
}

/// Returns `(S_to_P, P_to_S)`: sketch features aggregated for every photo
/// node (`N_P x d`) and photo features aggregated for every sketch node
/// (`N_S x d`). Both attention maps are scaled by `1/sqrt(d_h)`.
pub fn aggregate(g: &mut Graph, s: Var, p: Var, a: Var, d_h: usize) -> Result<(Var, Var)> {
    let scale = 1.0 / (d_h as f64).sqrt();
    let at = g.transpose(a);
    let at = g.scalar_mul(at, scale);
    let attn_s = g.softmax_rows(at);
    let s_to_p = g.matmul(attn_s, s)?;

    let a_scaled = g.scalar_mul(a, scale);
    let attn_p = g.softmax_rows(a_scaled);
    let p_to_s = g.matmul(attn_p, p)?;
    Ok((s_to_p, p_to_s))
}

/// `Z(G ⊙ (own + other)) + own` with `G = sigmoid([own, other] W_G)` and
/// `Z(x) = ReLU(x W + b)`.
fn gate_branch(
    g: &mut Graph,
    own: Var,
    other: Var,
    w_g: Var,
    z_w: Var,
    z_b: Var,
) -> Result<Var> {
    let cat = g.concat_cols(own, other)?;
    let logits = g.matmul(cat, w_g)?;
    let gate = g.sigmoid(logits);
    let summed = g.add(own, other)?;
    let gated = g.hadamard(gate, summed)?;
    let lin = g.matmul(gated, z_w)?;
    let lin = g.add_row_bias(lin, z_b)?;
    let z = g.relu(lin);
    g.add(z, own)
}

/// Gated residual fusion of both branches. `p_to_s` fuses into the sketch
/// side and `s_to_p` into the photo side.
pub fn gated_fuse(
    g: &mut Graph,
    s: Var,
    p: Var,
    s_to_p: Var,
    p_to_s: Var,
    vars: &CoattnVars,
) -> Result<(Var, Var)> {
    let (ss, sp) = (g.shape(s), g.shape(p));
    if g.shape(p_to_s) != ss {
        return Err(Error::ShapeMismatch {
            op: "gated_fuse",
            lhs: ss,
            rhs: g.shape(p_to_s),
        });
    }
    if g.shape(s_to_p) != sp {
        return Err(Error::ShapeMismatch {
            op: "gated_fuse",
            lhs: sp,
            rhs: g.shape(s_to_p),
        });
    }
    let s_out = gate_branch(g, s, p_to_s, vars.w_gs, vars.z_s_w, vars.z_s_b)?;
    let p_out = gate_branch(g, p, s_to_p, vars.w_gp, vars.z_p_w, vars.z_p_b)?;
    Ok((s_out, p_out))
}

/// One co-attention pass. Node counts, ids and levels are preserved.
pub fn coattend(
    g: &mut Graph,
    s: &FeatureSet,
    p: &FeatureSet,
    vars: &CoattnVars,
    d_h: usize,
) -> Result<(FeatureSet, FeatureSet)> {
    if s.is_empty() || p.is_empty() {
        return Err(Error::invalid("coattend", "empty branch"));
    }
    let a = affinity(g, s.nodes, p.nodes, vars.w_s, vars.w_p)?;
    let (s_to_p, p_to_s) = aggregate(g, s.nodes, p.nodes, a, d_h)?;
    let (s_new, p_new) = gated_fuse(g, s.nodes, p.nodes, s_to_p, p_to_s, vars)?;
    Ok((s.with_nodes(s_new), p.with_nodes(p_new)))
}

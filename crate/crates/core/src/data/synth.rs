//! Deterministic synthetic sketch/photo region features with a planted
//! part hierarchy per identity.
//!
//! Each identity owns a random binary tree over `n_regions_photo` leaf
//! parts. Node vectors descend from an identity prototype: every child is
//! its parent plus a perturbation whose scale shrinks with depth, so
//! siblings are more alike than cousins. Photos expose all leaves in a
//! shuffled order. Sketches expose a prefix of the leaves in drawing order
//! (shallow parts first); the first half of a sketch's strokes are its
//! coarse strokes and the rest are detail strokes. `coarse` drops half of
//! the detail strokes and `coarse++` drops all of them.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::hierarchy::{Branch, HierarchyTrace, TraceEntry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DetailLevel {
    Full,
    Coarse,
    CoarsePlusPlus,
}

impl DetailLevel {
    pub const ALL: [DetailLevel; 3] = [DetailLevel::Full, DetailLevel::Coarse, DetailLevel::CoarsePlusPlus];
}

impl fmt::Display for DetailLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetailLevel::Full => "full",
            DetailLevel::Coarse => "coarse",
            DetailLevel::CoarsePlusPlus => "coarse++",
        })
    }
}

impl FromStr for DetailLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(DetailLevel::Full),
            "coarse" => Ok(DetailLevel::Coarse),
            "coarse++" => Ok(DetailLevel::CoarsePlusPlus),
            other => Err(Error::Config(format!("unknown detail level {other:?}"))),
        }
    }
}

/// A full binary merge tree over leaves `0..n_leaves`, as merges
/// `(a, b) -> new` with fresh ids counting up from `n_leaves`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeTree {
    pub n_leaves: usize,
    pub merges: Vec<(u32, u32, u32)>,
}

impl MergeTree {
    pub fn to_trace(&self, branch: Branch) -> HierarchyTrace {
        HierarchyTrace {
            entries: self
                .merges
                .iter()
                .enumerate()
                .map(|(level, &(a, b, new))| TraceEntry {
                    level,
                    branch,
                    a_id: a,
                    b_id: b,
                    new_id: new,
                    soft: None,
                })
                .collect(),
        }
    }

    /// `a-b>new` items joined by `;`, or `-` for a single leaf.
    pub fn to_text(&self) -> String {
        if self.merges.is_empty() {
            return "-".into();
        }
        self.merges
            .iter()
            .map(|(a, b, n)| format!("{a}-{b}>{n}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn parse(text: &str, n_leaves: usize) -> Result<Self> {
        let mut merges = Vec::new();
        if text != "-" {
            for item in text.split(';') {
                let bad = || Error::Data(format!("bad merge {item:?}"));
                let (pair, new) = item.split_once('>').ok_or_else(bad)?;
                let (a, b) = pair.split_once('-').ok_or_else(bad)?;
                let num = |s: &str| s.parse::<u32>().map_err(|_| bad());
                merges.push((num(a)?, num(b)?, num(new)?));
            }
        }
        let tree = MergeTree { n_leaves, merges };
        tree.to_trace(Branch::Photo)
            .validate(n_leaves, true)
            .map_err(|e| Error::Data(format!("ground-truth tree: {e}")))?;
        Ok(tree)
    }
}

/// Planted tree in nested form; leaves carry their part index.
#[derive(Clone, Debug)]
enum Node {
    Leaf(usize),
    Inner(Box<Node>, Box<Node>),
}

impl Node {
    /// Post-order merges over the leaves present in `position` (part index
    /// to record position), skipping absent parts. Returns the id standing
    /// for this subtree, if any leaf survives.
    fn merges(&self, position: &[Option<u32>], next: &mut u32, out: &mut Vec<(u32, u32, u32)>) -> Option<u32> {
        match self {
            Node::Leaf(part) => position[*part],
            Node::Inner(l, r) => {
                let a = l.merges(position, next, out);
                let b = r.merges(position, next, out);
                match (a, b) {
                    (Some(a), Some(b)) => {
                        let id = *next;
                        *next += 1;
                        out.push((a, b, id));
                        Some(id)
                    }
                    (a, b) => a.or(b),
                }
            }
        }
    }
}

/// Merge tree induced on the parts listed in `parts` (record order).
fn induced_tree(root: &Node, n_parts: usize, parts: &[usize]) -> MergeTree {
    let mut position = vec![None; n_parts];
    for (pos, &p) in parts.iter().enumerate() {
        position[p] = Some(pos as u32);
    }
    let mut next = parts.len() as u32;
    let mut merges = Vec::new();
    root.merges(&position, &mut next, &mut merges);
    MergeTree {
        n_leaves: parts.len(),
        merges,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_identities: usize,
    /// Identities `0..n_train` form the training split, the rest the test
    /// split.
    pub n_train: usize,
    pub d_raw: usize,
    pub n_regions_photo: usize,
    pub strokes_min: usize,
    pub strokes_max: usize,
    /// Detail of the training sketches. Test sketches are emitted at every
    /// level.
    pub detail_level: DetailLevel,
    pub noise_scale: f64,
    /// Perturbation scale of a depth-1 node relative to the prototype;
    /// depth `k` uses `branch_scale * branch_decay^(k-1)`.
    pub branch_scale: f64,
    pub branch_decay: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_identities: 100,
            n_train: 50,
            d_raw: 32,
            n_regions_photo: 16,
            strokes_min: 10,
            strokes_max: 16,
            detail_level: DetailLevel::Full,
            noise_scale: 0.1,
            branch_scale: 1.0,
            branch_decay: 0.7,
            seed: 0,
        }
    }
}

pub const SPEC_KEYS: [&str; 11] = [
    "n_identities",
    "n_train",
    "d_raw",
    "n_regions_photo",
    "strokes_min",
    "strokes_max",
    "detail_level",
    "noise_scale",
    "branch_scale",
    "branch_decay",
    "seed",
];

impl SyntheticSpec {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&SPEC_KEYS)?;
        let d = SyntheticSpec::default();
        let spec = SyntheticSpec {
            n_identities: kv.get_or("n_identities", d.n_identities)?,
            n_train: kv.get_or("n_train", d.n_train)?,
            d_raw: kv.get_or("d_raw", d.d_raw)?,
            n_regions_photo: kv.get_or("n_regions_photo", d.n_regions_photo)?,
            strokes_min: kv.get_or("strokes_min", d.strokes_min)?,
            strokes_max: kv.get_or("strokes_max", d.strokes_max)?,
            detail_level: kv.get_or("detail_level", d.detail_level)?,
            noise_scale: kv.get_or("noise_scale", d.noise_scale)?,
            branch_scale: kv.get_or("branch_scale", d.branch_scale)?,
            branch_decay: kv.get_or("branch_decay", d.branch_decay)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_regions_photo == 0 {
            return fail("n_regions_photo must be at least 1".into());
        }
        if self.d_raw == 0 {
            return fail("d_raw must be positive".into());
        }
        if self.n_train > self.n_identities {
            return fail(format!(
                "n_train {} exceeds n_identities {}",
                self.n_train, self.n_identities
            ));
        }
        if self.strokes_min < 1 || self.strokes_min > self.strokes_max {
            return fail(format!(
                "bad stroke range {}..={}",
                self.strokes_min, self.strokes_max
            ));
        }
        if self.strokes_max > self.n_regions_photo {
            return fail(format!(
                "strokes_max {} exceeds the {} parts per identity",
                self.strokes_max, self.n_regions_photo
            ));
        }
        for (k, v) in [
            ("noise_scale", self.noise_scale),
            ("branch_scale", self.branch_scale),
            ("branch_decay", self.branch_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{k} must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatureRecord {
    pub identity: u32,
    pub modality: Branch,
    pub variant: DetailLevel,
    pub regions: Tensor,
    pub tree: Option<MergeTree>,
}

impl RegionFeatureRecord {
    pub fn n_regions(&self) -> usize {
        self.regions.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d_raw: usize,
    pub records: Vec<RegionFeatureRecord>,
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

impl Dataset {
    pub fn photo(&self, identity: u32) -> Option<&RegionFeatureRecord> {
        self.records
            .iter()
            .find(|r| r.identity == identity && r.modality == Branch::Photo)
    }

    pub fn sketch(&self, identity: u32, variant: DetailLevel) -> Option<&RegionFeatureRecord> {
        self.records.iter().find(|r| {
            r.identity == identity && r.modality == Branch::Sketch && r.variant == variant
        })
    }

    /// The training sketch of an identity, whatever detail level it has.
    pub fn train_sketch(&self, identity: u32) -> Option<&RegionFeatureRecord> {
        self.records
            .iter()
            .find(|r| r.identity == identity && r.modality == Branch::Sketch)
    }
}

struct Planted {
    root: Node,
    leaves: Vec<Vec<f64>>,
    depth: Vec<usize>,
}

/// `N(0, scale^2 / n)` per coordinate, so `scale` is about the vector norm.
fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    let scale = scale / (n as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>()
}

/// Random recursive split of `parts` into a binary tree, assigning node
/// vectors on the way down.
fn plant(
    rng: &mut ChaCha8Rng,
    parts: &[usize],
    vector: Vec<f64>,
    depth: usize,
    spec: &SyntheticSpec,
    out_leaves: &mut [Vec<f64>],
    out_depth: &mut [usize],
) -> Node {
    if parts.len() == 1 {
        out_leaves[parts[0]] = vector;
        out_depth[parts[0]] = depth;
        return Node::Leaf(parts[0]);
    }
    let k = rng.gen_range(1..parts.len());
    let scale = spec.branch_scale * spec.branch_decay.powi(depth as i32);
    let mut child = |rng: &mut ChaCha8Rng, slice: &[usize]| {
        let v: Vec<f64> = vector
            .iter()
            .zip(gaussian(rng, spec.d_raw, scale))
            .map(|(p, n)| p + n)
            .collect();
        plant(rng, slice, v, depth + 1, spec, out_leaves, out_depth)
    };
    let left = child(rng, &parts[..k]);
    let right = child(rng, &parts[k..]);
    Node::Inner(Box::new(left), Box::new(right))
}

fn plant_identity(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Planted {
    let n = spec.n_regions_photo;
    let proto = gaussian(rng, spec.d_raw, 1.0);
    let mut leaves = vec![Vec::new(); n];
    let mut depth = vec![0; n];
    let parts: Vec<usize> = (0..n).collect();
    let root = plant(rng, &parts, proto, 0, spec, &mut leaves, &mut depth);
    Planted {
        root,
        leaves,
        depth,
    }
}

/// Sketch strokes kept at each detail level, given the drawing order.
pub fn sketch_strokes(drawing_order: &[usize], level: DetailLevel) -> Vec<usize> {
    let n = drawing_order.len();
    let coarse = n.div_ceil(2);
    let detail = n - coarse;
    let keep = match level {
        DetailLevel::Full => n,
        DetailLevel::Coarse => coarse + detail / 2,
        DetailLevel::CoarsePlusPlus => coarse,
    };
    drawing_order[..keep].to_vec()
}

fn rows_of(leaves: &[Vec<f64>], parts: &[usize], noise: &[Vec<f64>]) -> Tensor {
    let rows: Vec<Vec<f64>> = parts
        .iter()
        .map(|&p| leaves[p].iter().zip(&noise[p]).map(|(a, b)| a + b).collect())
        .collect();
    Tensor::from_rows(&rows)
}

/// A pure function of `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_regions_photo;
    let mut records = Vec::new();

    for identity in 0..spec.n_identities as u32 {
        let planted = plant_identity(&mut rng, spec);
        let photo_noise: Vec<Vec<f64>> = (0..n)
            .map(|_| gaussian(&mut rng, spec.d_raw, spec.noise_scale))
            .collect();
        let sketch_noise: Vec<Vec<f64>> = (0..n)
            .map(|_| gaussian(&mut rng, spec.d_raw, spec.noise_scale))
            .collect();
        let mut photo_order: Vec<usize> = (0..n).collect();
        photo_order.shuffle(&mut rng);
        let n_strokes = rng.gen_range(spec.strokes_min..=spec.strokes_max);

        let mut drawing: Vec<usize> = (0..n).collect();
        drawing.sort_by_key(|&p| (planted.depth[p], p));
        drawing.truncate(n_strokes);

        records.push(RegionFeatureRecord {
            identity,
            modality: Branch::Photo,
            variant: DetailLevel::Full,
            regions: rows_of(&planted.leaves, &photo_order, &photo_noise),
            tree: Some(induced_tree(&planted.root, n, &photo_order)),
        });

        let is_train = (identity as usize) < spec.n_train;
        let levels: &[DetailLevel] = if is_train {
            std::slice::from_ref(&spec.detail_level)
        } else {
            &DetailLevel::ALL
        };
        for &level in levels {
            let parts = sketch_strokes(&drawing, level);
            records.push(RegionFeatureRecord {
                identity,
                modality: Branch::Sketch,
                variant: level,
                regions: rows_of(&planted.leaves, &parts, &sketch_noise),
                tree: Some(induced_tree(&planted.root, n, &parts)),
            });
        }
    }

    Ok(Dataset {
        d_raw: spec.d_raw,
        records,
        train: (0..spec.n_train as u32).collect(),
        test: (spec.n_train as u32..spec.n_identities as u32).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_identities: 6,
            n_train: 3,
            d_raw: 8,
            n_regions_photo: 8,
            strokes_min: 4,
            strokes_max: 8,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let mut other = small();
        other.seed = 1;
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn detail_levels_shrink_strictly() {
        let ds = generate(&small()).unwrap();
        for &id in &ds.test {
            let n = |l| ds.sketch(id, l).unwrap().n_regions();
            assert!(n(DetailLevel::CoarsePlusPlus) < n(DetailLevel::Coarse));
            assert!(n(DetailLevel::Coarse) < n(DetailLevel::Full));
        }
    }

    #[test]
    fn detail_level_only_changes_exposure() {
        let mut coarse = small();
        coarse.detail_level = DetailLevel::CoarsePlusPlus;
        let a = generate(&small()).unwrap();
        let b = generate(&coarse).unwrap();
        for &id in &a.test {
            assert_eq!(a.photo(id), b.photo(id));
            assert_eq!(a.sketch(id, DetailLevel::Full), b.sketch(id, DetailLevel::Full));
        }
        let tb = b.train_sketch(0).unwrap();
        assert_eq!(tb.variant, DetailLevel::CoarsePlusPlus);
    }

    #[test]
    fn splits_are_disjoint() {
        let ds = generate(&small()).unwrap();
        assert!(ds.train.iter().all(|t| !ds.test.contains(t)));
        assert_eq!(ds.train.len() + ds.test.len(), 6);
    }

    #[test]
    fn planted_trees_are_complete() {
        let ds = generate(&small()).unwrap();
        for r in &ds.records {
            let t = r.tree.as_ref().unwrap();
            assert_eq!(t.n_leaves, r.n_regions());
            t.to_trace(r.modality).validate(r.n_regions(), true).unwrap();
            assert_eq!(MergeTree::parse(&t.to_text(), t.n_leaves).unwrap(), *t);
        }
    }

    #[test]
    fn noiseless_leaves_match_their_own_identity() {
        let mut spec = small();
        spec.noise_scale = 0.0;
        let ds = generate(&spec).unwrap();
        // brute-force nearest photo leaf over every identity
        let photos: Vec<(u32, &[f64])> = ds
            .records
            .iter()
            .filter(|r| r.modality == Branch::Photo)
            .flat_map(|r| (0..r.n_regions()).map(move |i| (r.identity, r.regions.row_slice(i))))
            .collect();
        for s in ds.records.iter().filter(|r| r.modality == Branch::Sketch) {
            for i in 0..s.n_regions() {
                let q = s.regions.row_slice(i);
                let (best, _) = photos
                    .iter()
                    .map(|(id, p)| (*id, q.iter().zip(*p).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
                    .fold((u32::MAX, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
                assert_eq!(best, s.identity);
            }
        }
    }

    #[test]
    fn induced_tree_skips_missing_parts() {
        // ((0,1),(2,3)) restricted to {0,2,3}
        let root = Node::Inner(
            Box::new(Node::Inner(Box::new(Node::Leaf(0)), Box::new(Node::Leaf(1)))),
            Box::new(Node::Inner(Box::new(Node::Leaf(2)), Box::new(Node::Leaf(3)))),
        );
        let t = induced_tree(&root, 4, &[3, 0, 2]);
        assert_eq!(t.merges, vec![(2, 0, 3), (1, 3, 4)]);
    }

    #[test]
    fn bad_specs_rejected() {
        let mut s = small();
        s.strokes_max = 9;
        assert!(s.validate().is_err());
        let mut s = small();
        s.n_train = 7;
        assert!(s.validate().is_err());
        let kv = KeyValues::parse("detail_level = medium\n", "t").unwrap();
        assert!(SyntheticSpec::from_kv(&kv).is_err());
    }
}

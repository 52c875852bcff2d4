//! Skeleton topology and the normalized adjacency used by every graph
//! convolution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How `A + I` is normalized before it multiplies node features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyNorm {
    /// `D̃⁻¹ (A + I)`: every row sums to one.
    #[default]
    Row,
    /// `D̃^{-1/2} (A + I) D̃^{-1/2}`.
    Symmetric,
}

/// Joint names of the 17-joint Human3.6M layout, in index order.
pub const H36M_JOINTS: [&str; 17] = [
    "pelvis",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
];

const H36M_EDGES: [(usize, usize); 16] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (0, 4),
    (4, 5),
    (5, 6),
    (0, 7),
    (7, 8),
    (8, 9),
    (9, 10),
    (8, 11),
    (11, 12),
    (12, 13),
    (8, 14),
    (14, 15),
    (15, 16),
];

/// (left, right)
const H36M_FLIP_PAIRS: [(usize, usize); 6] = [(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)];

/// Bone length in millimetres from each joint to its parent (root entry unused).
const H36M_BONE_MM: [f64; 17] = [
    0.0, 132.0, 442.0, 454.0, 132.0, 442.0, 454.0, 233.0, 257.0, 121.0, 115.0, 151.0, 278.0, 251.0, 151.0, 278.0, 251.0,
];

/// Rest-pose direction of the bone ending at each joint (x lateral, y up, z depth).
const H36M_REST_DIR: [[f64; 3]; 17] = [
    [0.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
];

/// On-disk description of a skeleton.
///
/// ```json
/// {"name": "h36m-17", "joints": ["pelvis", ...], "edges": [[0, 1], ...],
///  "flip_pairs": [[4, 1], ...], "root": 0,
///  "bone_lengths": [0.0, 132.0, ...], "rest_directions": [[0,0,0], ...]}
/// ```
///
/// `bone_lengths` and `rest_directions` are optional and only consulted by the
/// synthetic pose generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub name: String,
    pub joints: Vec<String>,
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub flip_pairs: Vec<[usize; 2]>,
    pub root: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bone_lengths: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rest_directions: Option<Vec<[f64; 3]>>,
}

/// A validated, immutable skeleton graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    name: String,
    joint_names: Vec<String>,
    edges: Vec<(usize, usize)>,
    /// Maps each joint to its mirror image (itself for midline joints).
    mirror: Vec<usize>,
    flip_pairs: Vec<(usize, usize)>,
    root: usize,
    adjacency: Tensor,
    norm: AdjacencyNorm,
    bone_lengths: Option<Vec<f64>>,
    rest_directions: Option<Vec<[f64; 3]>>,
}

impl SkeletonGraph {
    pub fn new(spec: SkeletonSpec, norm: AdjacencyNorm) -> Result<Self> {
        let j = spec.joints.len();
        if j == 0 {
            return Err(Error::Validation("skeleton has no joints".into()));
        }
        if spec.root >= j {
            return Err(Error::Validation(format!("root index {} out of range for {j} joints", spec.root)));
        }
        let mut a = Tensor::zeros([j, j]);
        let mut edges = Vec::with_capacity(spec.edges.len());
        for &[p, q] in &spec.edges {
            if p >= j || q >= j {
                return Err(Error::Validation(format!("edge ({p}, {q}) out of range for {j} joints")));
            }
            if p == q {
                return Err(Error::Validation(format!("self-loop on joint {p}")));
            }
            a.data_mut()[p * j + q] = 1.0;
            a.data_mut()[q * j + p] = 1.0;
            edges.push((p, q));
        }
        let mut mirror: Vec<usize> = (0..j).collect();
        let mut flip_pairs = Vec::with_capacity(spec.flip_pairs.len());
        for &[l, r] in &spec.flip_pairs {
            if l >= j || r >= j || l == r || mirror[l] != l || mirror[r] != r {
                return Err(Error::Validation(format!("invalid flip pair ({l}, {r})")));
            }
            mirror[l] = r;
            mirror[r] = l;
            flip_pairs.push((l, r));
        }
        if let Some(b) = &spec.bone_lengths {
            if b.len() != j {
                return Err(Error::Validation(format!("bone_lengths has {} entries, expected {j}", b.len())));
            }
        }
        if let Some(d) = &spec.rest_directions {
            if d.len() != j {
                return Err(Error::Validation(format!("rest_directions has {} entries, expected {j}", d.len())));
            }
        }
        let adjacency = normalize_adjacency(&a, norm)?;
        Ok(Self {
            name: spec.name,
            joint_names: spec.joints,
            edges,
            mirror,
            flip_pairs,
            root: spec.root,
            adjacency,
            norm,
            bone_lengths: spec.bone_lengths,
            rest_directions: spec.rest_directions,
        })
    }

    /// The conventional 17-joint Human3.6M kinematic tree, rooted at the pelvis.
    pub fn h36m_17() -> Self {
        Self::new(Self::h36m_17_spec(), AdjacencyNorm::Row).expect("built-in skeleton is valid")
    }

    pub fn h36m_17_spec() -> SkeletonSpec {
        SkeletonSpec {
            name: "h36m-17".into(),
            joints: H36M_JOINTS.iter().map(|s| s.to_string()).collect(),
            edges: H36M_EDGES.iter().map(|&(a, b)| [a, b]).collect(),
            flip_pairs: H36M_FLIP_PAIRS.iter().map(|&(a, b)| [a, b]).collect(),
            root: 0,
            bone_lengths: Some(H36M_BONE_MM.to_vec()),
            rest_directions: Some(H36M_REST_DIR.to_vec()),
        }
    }

    pub fn from_json_str(s: &str, norm: AdjacencyNorm) -> Result<Self> {
        Self::new(serde_json::from_str(s)?, norm)
    }

    pub fn from_json_file(path: &Path, norm: AdjacencyNorm) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json_str(&text, norm)
    }

    /// Same topology with a different adjacency normalization.
    pub fn with_norm(&self, norm: AdjacencyNorm) -> Self {
        Self::new(self.spec(), norm).expect("re-normalizing a valid graph")
    }

    pub fn spec(&self) -> SkeletonSpec {
        SkeletonSpec {
            name: self.name.clone(),
            joints: self.joint_names.clone(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            flip_pairs: self.flip_pairs.iter().map(|&(a, b)| [a, b]).collect(),
            root: self.root,
            bone_lengths: self.bone_lengths.clone(),
            rest_directions: self.rest_directions.clone(),
        }
    }

    /// Relabels joints so that old joint `i` becomes joint `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let j = self.num_joints();
        let mut seen = vec![false; j];
        if perm.len() != j || perm.iter().any(|&p| p >= j || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Validation("not a permutation of the joint indices".into()));
        }
        let mut spec = self.spec();
        let mut names = vec![String::new(); j];
        for (i, n) in spec.joints.into_iter().enumerate() {
            names[perm[i]] = n;
        }
        spec.joints = names;
        spec.edges = spec.edges.iter().map(|&[a, b]| [perm[a], perm[b]]).collect();
        spec.flip_pairs = spec.flip_pairs.iter().map(|&[a, b]| [perm[a], perm[b]]).collect();
        spec.root = perm[spec.root];
        spec.bone_lengths = spec.bone_lengths.map(|b| permute_rows(&b, perm));
        spec.rest_directions = spec.rest_directions.map(|d| permute_rows(&d, perm));
        Self::new(spec, self.norm)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn flip_pairs(&self) -> &[(usize, usize)] {
        &self.flip_pairs
    }

    /// Mirror partner of every joint; midline joints map to themselves.
    pub fn mirror(&self) -> &[usize] {
        &self.mirror
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// The normalized `J × J` adjacency with self-connections.
    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn norm(&self) -> AdjacencyNorm {
        self.norm
    }

    /// Raw 0/1 adjacency without self-connections.
    pub fn raw_adjacency(&self) -> Tensor {
        let j = self.num_joints();
        let mut a = Tensor::zeros([j, j]);
        for &(p, q) in &self.edges {
            a.data_mut()[p * j + q] = 1.0;
            a.data_mut()[q * j + p] = 1.0;
        }
        a
    }

    pub fn degree(&self, joint: usize) -> usize {
        self.edges.iter().filter(|&&(p, q)| p == joint || q == joint).count()
    }

    /// Parent of every joint in the tree rooted at `root` (`None` for the root
    /// and for joints unreachable from it), plus a root-first visiting order.
    pub fn tree(&self) -> (Vec<Option<usize>>, Vec<usize>) {
        let j = self.num_joints();
        let mut parent = vec![None; j];
        let mut visited = vec![false; j];
        let mut order = vec![self.root];
        visited[self.root] = true;
        let mut head = 0;
        while head < order.len() {
            let u = order[head];
            head += 1;
            for &(p, q) in &self.edges {
                let v = if p == u {
                    q
                } else if q == u {
                    p
                } else {
                    continue;
                };
                if !visited[v] {
                    visited[v] = true;
                    parent[v] = Some(u);
                    order.push(v);
                }
            }
        }
        (parent, order)
    }

    pub fn bone_lengths(&self) -> Option<&[f64]> {
        self.bone_lengths.as_deref()
    }

    pub fn rest_directions(&self) -> Option<&[[f64; 3]]> {
        self.rest_directions.as_deref()
    }
}

fn permute_rows<T: Clone + Default>(rows: &[T], perm: &[usize]) -> Vec<T> {
    let mut out = vec![T::default(); rows.len()];
    for (i, r) in rows.iter().enumerate() {
        out[perm[i]] = r.clone();
    }
    out
}

/// Adds self-connections to a symmetric 0/1 adjacency and normalizes it.
pub fn normalize_adjacency(a: &Tensor, norm: AdjacencyNorm) -> Result<Tensor> {
    let j = match a.shape() {
        &[r, c] if r == c => r,
        s => return Err(Error::Validation(format!("adjacency must be square, got {s:?}"))),
    };
    let d = a.data();
    for p in 0..j {
        if d[p * j + p] != 0.0 {
            return Err(Error::Validation(format!("adjacency has a self-loop at joint {p}")));
        }
        for q in 0..j {
            let v = d[p * j + q];
            if v != 0.0 && v != 1.0 {
                return Err(Error::Validation(format!("adjacency entry ({p}, {q}) = {v} is not 0/1")));
            }
            if v != d[q * j + p] {
                return Err(Error::Validation(format!("adjacency is not symmetric at ({p}, {q})")));
            }
        }
    }
    let mut with_self = a.clone();
    for p in 0..j {
        with_self.data_mut()[p * j + p] = 1.0;
    }
    let degree: Vec<f64> = (0..j).map(|p| with_self.row(p).iter().sum()).collect();
    let out = with_self.data_mut();
    for p in 0..j {
        for q in 0..j {
            out[p * j + q] /= match norm {
                AdjacencyNorm::Row => degree[p],
                AdjacencyNorm::Symmetric => (degree[p] * degree[q]).sqrt(),
            };
        }
    }
    Ok(with_self)
}

/// Mirrors a pose left-right: negates the lateral (first) coordinate of every
/// joint, then swaps each left/right pair.
pub fn horizontal_flip<const D: usize>(pose: &[[f64; D]], graph: &SkeletonGraph) -> Vec<[f64; D]> {
    let mirror = graph.mirror();
    debug_assert_eq!(pose.len(), mirror.len());
    (0..pose.len())
        .map(|i| {
            let mut p = pose[mirror[i]];
            p[0] = -p[0];
            p
        })
        .collect()
}

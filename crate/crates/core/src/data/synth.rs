use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, PoseSample};
use crate::error::{Error, Result};
use crate::skeleton::SkeletonGraph;

const DEFAULT_BONE_MM: f64 = 200.0;
const DEFAULT_REST: [f64; 3] = [0.0, -1.0, 0.0];
/// Bend of each bone out of its rest direction towards the camera axis.
const MAX_BEND: f64 = std::f64::consts::FRAC_PI_3;
/// In-plane swing of each bone about the camera axis.
const MAX_SWING: f64 = 25.0 * std::f64::consts::PI / 180.0;

fn rig(graph: &SkeletonGraph) -> (Vec<f64>, Vec<[f64; 3]>) {
    let j = graph.num_joints();
    let lengths = graph.bone_lengths().map_or_else(|| vec![DEFAULT_BONE_MM; j], <[f64]>::to_vec);
    let dirs = graph.rest_directions().map_or_else(|| vec![DEFAULT_REST; j], <[[f64; 3]]>::to_vec);
    (lengths, dirs)
}

/// Divisor that maps synthetic x/y coordinates (mm) into `[-1, 1]`: the
/// longest root-to-leaf path of the graph's bone-length table.
pub fn synth_input_scale(graph: &SkeletonGraph) -> f64 {
    let (parent, order) = graph.tree();
    let (lengths, _) = rig(graph);
    let mut reach = vec![0.0f64; graph.num_joints()];
    for &v in &order {
        if let Some(p) = parent[v] {
            reach[v] = reach[p] + lengths[v];
        }
    }
    reach.iter().copied().fold(0.0, f64::max).max(1.0)
}

/// Rotates `d` by `bend` about the lateral axis (tilting it towards `-z`),
/// then by `swing` about the camera axis.
fn pose_bone(d: [f64; 3], bend: f64, swing: f64) -> [f64; 3] {
    let (sb, cb) = bend.sin_cos();
    let (x, y, z) = (d[0], cb * d[1] + sb * d[2], -sb * d[1].abs() + cb * d[2]);
    let (ss, cs) = swing.sin_cos();
    [cs * x - ss * y, ss * x + cs * y, z]
}

/// Synthetic 2D/3D pairs on `graph`.
///
/// Every bone keeps its table length and is bent away from its rest
/// direction by up to 60° towards the camera and swung by up to ±25° in the
/// image plane. The 2D input is the orthographic x/y projection divided by
/// [`synth_input_scale`], so the depth of each bone is recoverable from its
/// foreshortening.
pub fn synth_generate(n: usize, seed: u64, graph: &SkeletonGraph) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Validation("synthetic dataset size must be at least 1".into()));
    }
    let (parent, order) = graph.tree();
    if order.len() != graph.num_joints() {
        return Err(Error::Validation(format!("graph `{}` is not connected", graph.name())));
    }
    let (lengths, dirs) = rig(graph);
    let scale = synth_input_scale(graph);
    let root = graph.root();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut target = vec![[0.0f64; 3]; graph.num_joints()];
        for &v in &order {
            let Some(p) = parent[v] else { continue };
            let bend = rng.random_range(0.0..MAX_BEND);
            let swing = rng.random_range(-MAX_SWING..MAX_SWING);
            let d = pose_bone(dirs[v], bend, swing);
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let len = lengths[v] / norm;
            target[v] = [target[p][0] + d[0] * len, target[p][1] + d[1] * len, target[p][2] + d[2] * len];
        }
        target[root] = [0.0; 3];
        let input = target.iter().map(|p| [p[0] / scale, p[1] / scale]).collect();
        samples.push(PoseSample { input2d: input, target3d: target, action: None, subject: None });
    }
    Dataset::new(graph, samples)
}

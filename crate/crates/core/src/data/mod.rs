//! Pose samples, the `pose-v1` file format, synthetic data and augmentation.

pub mod import;
mod posefile;
mod synth;

use rand::Rng;

use crate::error::{Error, Result};
use crate::skeleton::{horizontal_flip, SkeletonGraph};
use crate::tensor::Tensor;

pub use posefile::{load_dataset, read_pose_file, save_dataset, write_pose_file, Loaded, PoseFileHeader, PoseRecord};
pub use synth::{synth_generate, synth_input_scale};

/// `J` image-plane points, normalized to `[-1, 1]`.
pub type Pose2 = Vec<[f64; 2]>;
/// `J` root-relative points in millimetres.
pub type Pose3 = Vec<[f64; 3]>;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    pub input2d: Pose2,
    pub target3d: Pose3,
    pub action: Option<String>,
    pub subject: Option<String>,
}

impl PoseSample {
    pub fn flipped(&self, graph: &SkeletonGraph) -> PoseSample {
        PoseSample {
            input2d: horizontal_flip(&self.input2d, graph),
            target3d: horizontal_flip(&self.target3d, graph),
            action: self.action.clone(),
            subject: self.subject.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graph_name: String,
    pub num_joints: usize,
    pub samples: Vec<PoseSample>,
}

impl Dataset {
    pub fn new(graph: &SkeletonGraph, samples: Vec<PoseSample>) -> Result<Self> {
        let d = Dataset { graph_name: graph.name().to_string(), num_joints: graph.num_joints(), samples };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks shared `J` and finiteness.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.input2d.len() != self.num_joints || s.target3d.len() != self.num_joints {
                return Err(Error::Validation(format!(
                    "sample {i} has {}/{} joints, dataset has {}",
                    s.input2d.len(),
                    s.target3d.len(),
                    self.num_joints
                )));
            }
            let finite = s.input2d.iter().flatten().chain(s.target3d.iter().flatten()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::Validation(format!("sample {i} has non-finite coordinates")));
            }
        }
        Ok(())
    }

    /// Fails unless the dataset was built for a graph with the same joint
    /// count. A differing name only warns.
    pub fn check_graph(&self, graph: &SkeletonGraph) -> Result<()> {
        if self.num_joints != graph.num_joints() {
            return Err(Error::ShapeMismatch {
                field: "num_joints".into(),
                expected: vec![graph.num_joints()],
                found: vec![self.num_joints],
            });
        }
        if self.graph_name != graph.name() {
            log::warn!("dataset was written for graph `{}`, using `{}`", self.graph_name, graph.name());
        }
        Ok(())
    }

    pub fn inputs(&self) -> Vec<Pose2> {
        self.samples.iter().map(|s| s.input2d.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Pose3> {
        self.samples.iter().map(|s| s.target3d.clone()).collect()
    }
}

/// Flips each sample (input and target together) with probability `p`.
///
/// Exactly one random draw is consumed per sample.
pub fn augment_flip<R: Rng + ?Sized>(
    batch: &[PoseSample],
    graph: &SkeletonGraph,
    p: f64,
    rng: &mut R,
) -> Result<Vec<PoseSample>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!("flip probability {p} outside [0, 1]")));
    }
    Ok(batch
        .iter()
        .map(|s| {
            let u: f64 = rng.random();
            if u < p {
                s.flipped(graph)
            } else {
                s.clone()
            }
        })
        .collect())
}

/// Stacks inputs into `[B, J, 2]` and targets (divided by `scale`) into
/// `[B, J, 3]`.
pub fn batch_tensors(samples: &[PoseSample], scale: f64) -> Result<(Tensor, Tensor)> {
    let j = samples.first().map_or(0, |s| s.input2d.len());
    let mut x = Vec::with_capacity(samples.len() * j * 2);
    let mut y = Vec::with_capacity(samples.len() * j * 3);
    for s in samples {
        x.extend(s.input2d.iter().flatten());
        y.extend(s.target3d.iter().flatten().map(|v| v / scale));
    }
    Ok((Tensor::new([samples.len(), j, 2], x)?, Tensor::new([samples.len(), j, 3], y)?))
}

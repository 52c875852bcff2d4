//! The `pose-v1` text format.
//!
//! ```text
//! #pose-v1 J=17 graph=h36m-17
//! {"in":[[x,y],...],"out":[[x,y,z],...],"action":"walking","subject":"S9"}
//! ...
//! ```
//!
//! One sample per line. `out` may be omitted in files that only feed
//! prediction; `action` and `subject` are optional. Blank lines are skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Pose2, Pose3, PoseSample};
use crate::error::{Error, Result};
use crate::skeleton::SkeletonGraph;

const TAG: &str = "#pose-v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoseFileHeader {
    pub num_joints: usize,
    pub graph: String,
}

impl PoseFileHeader {
    fn parse(line: &str, path: &Path) -> Result<Self> {
        let err = |m: String| Error::Parse { path: path.to_path_buf(), line: 1, message: m };
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some(TAG) {
            return Err(err(format!("expected a `{TAG}` header")));
        }
        let (mut joints, mut graph) = (None, None);
        for tok in tokens {
            match tok.split_once('=') {
                Some(("J", v)) => joints = Some(v.parse::<usize>().map_err(|_| err(format!("bad joint count `{v}`")))?),
                Some(("graph", v)) if !v.is_empty() => graph = Some(v.to_string()),
                _ => return Err(err(format!("unexpected header field `{tok}`"))),
            }
        }
        Ok(Self {
            num_joints: joints.ok_or_else(|| err("header lacks J=<n>".into()))?,
            graph: graph.ok_or_else(|| err("header lacks graph=<name>".into()))?,
        })
    }
}

/// One line of a pose file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    #[serde(rename = "in")]
    pub input: Pose2,
    #[serde(rename = "out", default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Pose3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

/// Reads the header and every record, checking joint counts and finiteness.
/// Returned pairs carry the 1-based line number of each record.
pub fn read_pose_file(path: impl AsRef<Path>) -> Result<(PoseFileHeader, Vec<(usize, PoseRecord)>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?
        .ok_or_else(|| Error::Parse { path: path.to_path_buf(), line: 1, message: "empty file".into() })?;
    let header = PoseFileHeader::parse(&first, path)?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: String| Error::Parse { path: PathBuf::from(path), line: lineno, message: m };
        let rec: PoseRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let j = header.num_joints;
        if rec.input.len() != j {
            return Err(err(format!("`in` has {} joints, header says J={j}", rec.input.len())));
        }
        if let Some(out) = &rec.output {
            if out.len() != j {
                return Err(err(format!("`out` has {} joints, header says J={j}", out.len())));
            }
        }
        let finite = rec.input.iter().flatten().chain(rec.output.iter().flatten().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(err("non-finite coordinate".into()));
        }
        records.push((lineno, rec));
    }
    Ok((header, records))
}

pub fn write_pose_file(path: impl AsRef<Path>, header: &PoseFileHeader, records: &[PoseRecord]) -> Result<()> {
    let path = path.as_ref();
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{TAG} J={} graph={}", header.num_joints, header.graph).map_err(|e| Error::io(ctx(), e))?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

/// A dataset plus the warnings raised while loading it.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

/// Loads a labelled dataset for `graph`.
///
/// Targets whose root joint is not at the origin are re-centred and reported
/// in [`Loaded::warnings`] (and through `log`).
pub fn load_dataset(path: impl AsRef<Path>, graph: &SkeletonGraph) -> Result<Loaded> {
    let path = path.as_ref();
    let (header, records) = read_pose_file(path)?;
    if header.num_joints != graph.num_joints() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("file has J={}, graph `{}` has {}", header.num_joints, graph.name(), graph.num_joints()),
        });
    }
    let mut warnings = Vec::new();
    if header.graph != graph.name() {
        warnings.push(format!("file names graph `{}`, loading with `{}`", header.graph, graph.name()));
    }
    let root = graph.root();
    let mut samples = Vec::with_capacity(records.len());
    let mut out_of_range = 0usize;
    for (lineno, rec) in records {
        let Some(mut target) = rec.output else {
            return Err(Error::Parse { path: path.to_path_buf(), line: lineno, message: "missing `out`".into() });
        };
        let r = target[root];
        if r != [0.0; 3] {
            for p in &mut target {
                for k in 0..3 {
                    p[k] -= r[k];
                }
            }
            warnings.push(format!("line {lineno}: target root at {r:?}, re-centred"));
        }
        if rec.input.iter().flatten().any(|v| v.abs() > 1.0) {
            out_of_range += 1;
        }
        samples.push(PoseSample { input2d: rec.input, target3d: target, action: rec.action, subject: rec.subject });
    }
    if out_of_range > 0 {
        warnings.push(format!("{out_of_range} samples have 2D coordinates outside [-1, 1]"));
    }
    for w in &warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(Loaded { dataset: Dataset { graph_name: header.graph, num_joints: header.num_joints, samples }, warnings })
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    let header = PoseFileHeader { num_joints: dataset.num_joints, graph: dataset.graph_name.clone() };
    let records: Vec<PoseRecord> = dataset
        .samples
        .iter()
        .map(|s| PoseRecord {
            input: s.input2d.clone(),
            output: Some(s.target3d.clone()),
            action: s.action.clone(),
            subject: s.subject.clone(),
        })
        .collect();
    write_pose_file(path, &header, &records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_parsing() {
        let p = Path::new("x");
        let h = PoseFileHeader::parse("#pose-v1 J=17 graph=h36m-17", p).unwrap();
        assert_eq!(h, PoseFileHeader { num_joints: 17, graph: "h36m-17".into() });
        for bad in ["#pose-v2 J=17 graph=a", "#pose-v1 graph=a", "#pose-v1 J=x graph=a", "#pose-v1 J=3 graph=a k=v"] {
            assert!(PoseFileHeader::parse(bad, p).is_err(), "{bad}");
        }
    }
}

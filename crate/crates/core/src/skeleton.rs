//! Kinematic skeleton definition and its structured-text loader.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DESK_SKELETON: &str = include_str!("../data/desk_skeleton.toml");

/// Rotation axis a joint may carry. Composition order is always roll, pitch, yaw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationAxis {
    /// About x.
    Roll,
    /// About y.
    Pitch,
    /// About z.
    Yaw,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Sorted in roll, pitch, yaw order.
    pub axes: Vec<RotationAxis>,
    /// Rest offset from the parent joint, metres.
    pub offset: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    name: String,
    joints: Vec<Joint>,
    /// First DOF index of each joint in the flattened pose vector.
    dof_start: Vec<usize>,
    dof_count: usize,
}

#[derive(Deserialize)]
struct SkeletonFile {
    name: Option<String>,
    #[serde(rename = "joint")]
    joints: Vec<JointEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JointEntry {
    name: String,
    parent: Option<String>,
    #[serde(default)]
    axes: Vec<RotationAxis>,
    offset: [f64; 3],
}

impl Skeleton {
    /// Builds and validates a skeleton from joints listed in topological order.
    pub fn new(name: impl Into<String>, joints: Vec<Joint>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::InvalidSkeleton("no joints".into()));
        }
        let mut roots = 0;
        let mut dof_start = Vec::with_capacity(joints.len());
        let mut dof_count = 0;
        let mut joints = joints;
        for (i, joint) in joints.iter_mut().enumerate() {
            match joint.parent {
                None => roots += 1,
                Some(p) if p >= i => {
                    return Err(Error::InvalidSkeleton(format!(
                        "joint {:?} (index {i}) has parent index {p}; parents must precede children",
                        joint.name
                    )))
                }
                Some(_) => {}
            }
            joint.axes.sort();
            let before = joint.axes.len();
            joint.axes.dedup();
            if joint.axes.len() != before {
                return Err(Error::InvalidSkeleton(format!("joint {:?} repeats an axis", joint.name)));
            }
            if joint.offset.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSkeleton(format!("joint {:?} has a non-finite offset", joint.name)));
            }
            dof_start.push(dof_count);
            dof_count += joint.axes.len();
        }
        if roots != 1 {
            return Err(Error::InvalidSkeleton(format!("expected exactly one root joint, found {roots}")));
        }
        if joints[0].parent.is_some() {
            return Err(Error::InvalidSkeleton("the root must be listed first".into()));
        }
        Ok(Self {
            name: name.into(),
            joints,
            dof_start,
            dof_count,
        })
    }

    /// Parses the TOML skeleton format: `[[joint]]` tables with `name`, optional `parent`
    /// (a previously listed joint name), `axes` and `offset`.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SkeletonFile = toml::from_str(text)?;
        let mut joints: Vec<Joint> = Vec::with_capacity(file.joints.len());
        for entry in file.joints {
            let parent = match &entry.parent {
                None => None,
                Some(p) => Some(joints.iter().position(|j| &j.name == p).ok_or_else(|| {
                    Error::InvalidSkeleton(format!(
                        "joint {:?} refers to parent {p:?} which is not listed before it",
                        entry.name
                    ))
                })?),
            };
            if joints.iter().any(|j| j.name == entry.name) {
                return Err(Error::InvalidSkeleton(format!("duplicate joint name {:?}", entry.name)));
            }
            joints.push(Joint {
                name: entry.name,
                parent,
                axes: entry.axes,
                offset: entry.offset,
            });
        }
        Self::new(file.name.unwrap_or_else(|| "skeleton".into()), joints)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Requires the DOF count to equal `expected_dofs`.
    pub fn load_with_dofs(path: impl AsRef<Path>, expected_dofs: usize) -> Result<Self> {
        let skeleton = Self::load(path)?;
        if skeleton.dof_count() != expected_dofs {
            return Err(Error::InvalidSkeleton(format!(
                "skeleton carries {} rotation angles, configuration expects {expected_dofs}",
                skeleton.dof_count()
            )));
        }
        Ok(skeleton)
    }

    /// The shipped 104-angle stand-in skeleton.
    pub fn desk() -> Self {
        Self::from_toml_str(DESK_SKELETON).expect("bundled skeleton is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn dof_count(&self) -> usize {
        self.dof_count
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Flattened pose index of `axis` on joint `name`.
    pub fn dof_index(&self, name: &str, axis: RotationAxis) -> Option<usize> {
        let j = self.joint_index(name)?;
        let pos = self.joints[j].axes.iter().position(|&a| a == axis)?;
        Some(self.dof_start[j] + pos)
    }

    /// All pose indices owned by joints whose name satisfies `pred`.
    pub fn dofs_where(&self, mut pred: impl FnMut(&str) -> bool) -> Vec<usize> {
        self.joints
            .iter()
            .enumerate()
            .filter(|(_, j)| pred(&j.name))
            .flat_map(|(i, j)| self.dof_start[i]..self.dof_start[i] + j.axes.len())
            .collect()
    }

    pub(crate) fn dof_range(&self, joint: usize) -> std::ops::Range<usize> {
        self.dof_start[joint]..self.dof_start[joint] + self.joints[joint].axes.len()
    }
}

//! Forward kinematics from per-joint relative rotation angles.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::skeleton::{RotationAxis, Skeleton};

type Mat3<T> = [[T; 3]; 3];

fn identity<T: Scalar>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

fn mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn apply<T: Scalar>(m: &Mat3<T>, v: [T; 3]) -> [T; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn axis_rotation<T: Scalar>(axis: RotationAxis, angle: T) -> Mat3<T> {
    let (s, c) = angle.sin_cos();
    let (o, z) = (T::one(), T::zero());
    match axis {
        RotationAxis::Roll => [[o, z, z], [z, c, -s], [z, s, c]],
        RotationAxis::Pitch => [[c, z, s], [z, o, z], [-s, z, c]],
        RotationAxis::Yaw => [[c, -s, z], [s, c, z], [z, z, o]],
    }
}

/// Local rotation of one joint: intrinsic roll, then pitch, then yaw over the joint's allowed axes.
fn local_rotation<T: Scalar>(axes: &[RotationAxis], angles: &[T]) -> Mat3<T> {
    axes.iter()
        .zip(angles)
        .fold(identity(), |acc, (&axis, &angle)| mul(&acc, &axis_rotation(axis, angle)))
}

/// World-space joint positions for one pose vector.
///
/// The root sits at its rest offset. Every child is placed at its parent's position plus the
/// parent's accumulated rotation applied to the child's rest offset.
pub fn forward_kinematics<T: Scalar>(pose: &[T], skeleton: &Skeleton) -> Result<Vec<[T; 3]>> {
    if pose.len() != skeleton.dof_count() {
        return Err(Error::DofMismatch {
            pose: pose.len(),
            skeleton: skeleton.dof_count(),
        });
    }
    let joints = skeleton.joints();
    let mut positions: Vec<[T; 3]> = Vec::with_capacity(joints.len());
    let mut rotations: Vec<Mat3<T>> = Vec::with_capacity(joints.len());
    for (i, joint) in joints.iter().enumerate() {
        let offset = joint.offset.map(T::lit);
        let local = local_rotation(&joint.axes, &pose[skeleton.dof_range(i)]);
        match joint.parent {
            None => {
                positions.push(offset);
                rotations.push(local);
            }
            Some(p) => {
                let d = apply(&rotations[p], offset);
                let base = positions[p];
                positions.push([base[0] + d[0], base[1] + d[1], base[2] + d[2]]);
                rotations.push(mul(&rotations[p], &local));
            }
        }
    }
    Ok(positions)
}

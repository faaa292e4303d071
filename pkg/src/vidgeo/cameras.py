"""Camera poses, Plücker ray maps, and point-map (un)projection.

Conventions (used everywhere in this package):
  * right-handed world, +z is camera forward, +y is down, +x is right;
  * rotation/translation are world->camera: x_cam = R x_world + t;
  * pixel (i, j) covers [j, j+1) x [i, i+1) with center (j+0.5, i+0.5);
  * f_x = (W/2) / tan(fov_x / 2), principal point at (W/2, H/2);
  * point maps live in the camera frame of the clip's first pose, and
    trajectories are normalized so that first pose is the identity.
"""

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if n < 1e-8:
        raise GeometryError("near-zero quaternion cannot be normalized")
    return q / n


def quat_canonical(q):
    """Flip sign so the scalar part is >= 0 (q and -q are the same rotation)."""
    q = np.asarray(q, dtype=np.float64)
    return -q if q[0] < 0 else q


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_rot(q):
    """Unit quaternion (w, x, y, z) -> 3x3 world->camera rotation."""
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(R):
    """3x3 rotation -> unit quaternion (w,x,y,z), scalar part >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return quat_canonical(quat_normalize(q))


@dataclass(frozen=True)
class CameraPose9:
    """9-number camera: unit quaternion (w,x,y,z, world->camera), translation
    (3, world->camera), and (fov_x, fov_y) in radians, each in (0, pi)."""

    quat: np.ndarray
    trans: np.ndarray
    fov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quat", quat_normalize(self.quat))
        object.__setattr__(self, "trans",
                           np.asarray(self.trans, dtype=np.float64).reshape(3))
        object.__setattr__(self, "fov",
                           np.asarray(self.fov, dtype=np.float64).reshape(2))
        if not np.all((self.fov > 0) & (self.fov < np.pi)):
            raise GeometryError("fov must lie in (0, pi), got %s" % (self.fov,))

    def as_9d(self):
        """Pack as [quat(4, scalar >= 0), trans(3), fov(2)]."""
        return np.concatenate([quat_canonical(self.quat), self.trans, self.fov])

    @classmethod
    def from_9d(cls, v):
        v = np.asarray(v, dtype=np.float64).reshape(9)
        return cls(v[:4], v[4:7], v[7:9])

    def rotation(self):
        return quat_to_rot(self.quat)

    def center(self):
        """Camera center in world coordinates: -R^T t."""
        return -self.rotation().T @ self.trans


def pose_to_matrices(pose, H, W):
    """Pose -> (R 3x3, t 3, K 3x3) with f from fov and the W/H at hand."""
    R = pose.rotation()
    fx = (W / 2.0) / np.tan(pose.fov[0] / 2.0)
    fy = (H / 2.0) / np.tan(pose.fov[1] / 2.0)
    K = np.array([[fx, 0.0, W / 2.0],
                  [0.0, fy, H / 2.0],
                  [0.0, 0.0, 1.0]])
    return R, pose.trans.copy(), K


def look_at(position, target, fov, fallback_ref=(0.0, 0.0, 1.0)):
    """Pose looking from `position` toward `target` (+y-down convention)."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    f = target - position
    n = np.linalg.norm(f)
    if n < 1e-12:
        raise GeometryError("look_at target coincides with position")
    f = f / n
    ref = np.array([0.0, 1.0, 0.0])
    if abs(f @ ref) > 0.999:          # looking straight up/down
        ref = np.asarray(fallback_ref, dtype=np.float64)
    right = np.cross(ref, f)
    right = right / np.linalg.norm(right)
    down = np.cross(f, right)
    R = np.stack([right, down, f])
    return CameraPose9(rot_to_quat(R), -R @ position, fov)


def _pixel_dirs_cam(H, W, K):
    # unit-less camera-frame directions through every pixel center (z=1 plane)
    u = (np.arange(W) + 0.5 - K[0, 2]) / K[0, 0]
    v = (np.arange(H) + 0.5 - K[1, 2]) / K[1, 1]
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


def camera_rays(pose, H, W):
    """World-frame rays through all pixel centers.

    Returns (origin (3,), dirs (H,W,3) unit world directions, dz (H,W)) where
    dz is the camera-frame z component of each unit direction: camera-space
    depth of a hit at parameter s along the ray is s*dz.
    """
    R, t, K = pose_to_matrices(pose, H, W)
    d_cam = _pixel_dirs_cam(H, W, K)
    norm = np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_cam = d_cam / norm
    dirs = d_cam @ R            # row-vector form of R^T d
    origin = -R.T @ t
    return origin, np.ascontiguousarray(dirs), np.ascontiguousarray(d_cam[..., 2])


def plucker_encode(pose, H, W):
    """Per-pixel Plücker coordinates (d, m) in world frame, shape (H, W, 6):
    d the unit ray direction, m = o x d its moment about the origin."""
    origin, dirs, _ = camera_rays(pose, H, W)
    m = np.cross(np.broadcast_to(origin, dirs.shape), dirs)
    return np.concatenate([dirs, m], axis=-1)


def unproject_depth(depth, poses, valid=None):
    """Depth maps (T, H, W) + per-frame poses -> point map (T, H, W, 3)
    expressed in the camera frame of poses[0]. Invalid pixels come out 0."""
    depth = np.asarray(depth, dtype=np.float64)
    T, H, W = depth.shape
    if len(poses) != T:
        raise GeometryError("got %d poses for %d frames" % (len(poses), T))
    R0 = poses[0].rotation()
    t0 = poses[0].trans
    out = np.zeros((T, H, W, 3))
    for i, pose in enumerate(poses):
        R, t, K = pose_to_matrices(pose, H, W)
        p_cam = _pixel_dirs_cam(H, W, K) * depth[i][..., None]
        p_world = (p_cam - t) @ R        # R^T (p_cam - t), row vectors
        out[i] = p_world @ R0.T + t0
    if valid is not None:
        out *= (np.asarray(valid) > 0)[..., None]
    return out


def project_points(points, pose, H, W, ref=None):
    """Project points (N, 3) with a pose.

    Points are taken in world coordinates, or — when `ref` is given — in
    ref's camera frame (the point-map convention, with ref the clip's first
    pose). Returns (pix (N,2) continuous image coords with origin at the
    top-left corner, depth (N,) camera-space z, valid (N,) bool for z>0 and
    inside the image). Pixel (i,j)'s center is at pix == (j+0.5, i+0.5).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if ref is not None:
        points = (points - ref.trans) @ ref.rotation()
    R, t, K = pose_to_matrices(pose, H, W)
    p_cam = points @ R.T + t
    z = p_cam[:, 2]
    safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    u = K[0, 0] * p_cam[:, 0] / safe_z + K[0, 2]
    v = K[1, 1] * p_cam[:, 1] / safe_z + K[1, 2]
    pix = np.stack([u, v], axis=-1)
    valid = (z > 1e-9) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
    return pix, z, valid


def pose_rotation_angle_deg(qa, qb):
    """Geodesic rotation angle between two unit quaternions, in degrees:
    2*asin(min(1, |vec(q_a q_b^-1)|)), insensitive to the double cover."""
    qa = quat_canonical(quat_normalize(qa))
    qb = quat_canonical(quat_normalize(qb))
    rel = quat_mul(qa, quat_conj(qb))
    s = min(1.0, float(np.linalg.norm(rel[1:])))
    return float(np.degrees(2.0 * np.arcsin(s)))

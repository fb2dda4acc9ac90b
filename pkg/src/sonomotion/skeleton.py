"""Skeleton definition, 6D rotations, forward kinematics, motion packing.

Conventions used throughout the package: z is up, the ground is the x-y
plane, and a character with an identity root rotation faces the -y axis
(its left side is +x). Positions are meters, velocities meters/second.
"""

from __future__ import annotations

import base64
import csv
import enum
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (ContractError, DataError, DegenerateRotationError,
                     LayoutError, ShapeError)

JOINT_COUNT = 25
POS_WIDTH = JOINT_COUNT * 3        # 75
ROT_WIDTH = JOINT_COUNT * 6        # 150
VEL_WIDTH = JOINT_COUNT * 3        # 75
FRAME_WIDTH = POS_WIDTH + ROT_WIDTH + VEL_WIDTH  # 300

POS_SLICE = slice(0, POS_WIDTH)
ROT_SLICE = slice(POS_WIDTH, POS_WIDTH + ROT_WIDTH)
VEL_SLICE = slice(POS_WIDTH + ROT_WIDTH, FRAME_WIDTH)
ROOT_POS_SLICE = slice(0, 3)

REST_FORWARD = np.array([0.0, -1.0, 0.0])
REST_UP = np.array([0.0, 0.0, 1.0])


class Genre(enum.IntEnum):
    """Reaction-intensity class conditioning how strongly a character reacts."""

    DULL = 0
    NEUTRAL = 1
    SENSITIVE = 2

    @classmethod
    def parse(cls, name) -> "Genre":
        if isinstance(name, Genre):
            return name
        if isinstance(name, (int, np.integer)):
            return cls(int(name))
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise ContractError(f"unknown genre {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass
class SkeletonSpec:
    """Joint hierarchy with rest offsets; topologically sorted, single root."""

    names: list[str]
    parents: np.ndarray          # (J,), root parent = -1
    offsets: np.ndarray          # (J, 3) meters
    left_foot: int = 10
    right_foot: int = 11
    root: int = 0

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        j = len(self.names)
        if self.parents.shape != (j,) or self.offsets.shape != (j, 3):
            raise ShapeError("skeleton arrays inconsistent with name count")
        if not np.all(np.isfinite(self.offsets)):
            raise ContractError("non-finite rest offsets")
        roots = np.flatnonzero(self.parents < 0)
        if roots.size != 1 or roots[0] != self.root:
            raise ContractError("skeleton must have exactly one root joint")
        for child in range(j):
            if 0 <= self.parents[child] and self.parents[child] >= child:
                raise ContractError("parents must precede children (topological order)")

    @property
    def joint_count(self) -> int:
        return len(self.names)

    @property
    def foot_joints(self) -> tuple[int, int]:
        return (self.left_foot, self.right_foot)

    @classmethod
    def default(cls) -> "SkeletonSpec":
        text = resources.files("sonomotion.data").joinpath(
            "skeleton25.txt").read_text()
        return cls.from_text(text)

    @classmethod
    def from_text(cls, text: str) -> "SkeletonSpec":
        names, parents, offsets = [], [], []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataError(f"bad skeleton line: {line!r}")
            idx, name, parent = int(parts[0]), parts[1], int(parts[2])
            if idx != len(names):
                raise DataError(f"skeleton indices out of order at {line!r}")
            names.append(name)
            parents.append(parent)
            offsets.append([float(v) for v in parts[3:6]])
        spec = cls(names, np.array(parents), np.array(offsets))
        spec.left_foot = names.index("left_foot") if "left_foot" in names else 10
        spec.right_foot = names.index("right_foot") if "right_foot" in names else 11
        return spec

    @classmethod
    def load(cls, path) -> "SkeletonSpec":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        lines = ["# index name parent ox oy oz"]
        for i, name in enumerate(self.names):
            ox, oy, oz = self.offsets[i]
            lines.append(f"{i} {name} {self.parents[i]} {ox:.6f} {oy:.6f} {oz:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# rotation utilities


def sixd_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Decode (..., 6) into (..., 3, 3) rotation matrices.

    The two embedded 3-vectors become the first two columns after
    Gram-Schmidt; the third column is their cross product.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape[-1] != 6:
        raise ShapeError(f"expected trailing dim 6, got {r6.shape}")
    a1, a2 = r6[..., 0:3], r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < 1e-8):
        raise DegenerateRotationError("first 6D axis has near-zero norm")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < 1e-8):
        raise DegenerateRotationError("6D axes are parallel or second axis is zero")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_sixd(rot: np.ndarray) -> np.ndarray:
    """Encode (..., 3, 3) rotations as their first two columns, (..., 6)."""
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape[-2:] != (3, 3):
        raise ShapeError(f"expected (..., 3, 3), got {rot.shape}")
    eye = np.eye(3)
    err = np.max(np.abs(np.swapaxes(rot, -1, -2) @ rot - eye))
    if err > 1e-6:
        raise ContractError(f"matrix not orthonormal within 1e-6 (err={err:.2e})")
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def rotation_z(angle) -> np.ndarray:
    """Rotation about +z by ``angle`` (radians); supports array angles."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    out = np.zeros(angle.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def axis_angle_to_matrix(axis: np.ndarray, angle) -> np.ndarray:
    """Rodrigues formula; axis (..., 3) need not be normalized."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    n = np.linalg.norm(axis, axis=-1, keepdims=True)
    k = np.where(n > 1e-12, axis / np.maximum(n, 1e-12), 0.0)
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    km = np.stack([
        np.stack([zero, -kz, ky], axis=-1),
        np.stack([kz, zero, -kx], axis=-1),
        np.stack([-ky, kx, zero], axis=-1),
    ], axis=-2)
    c = np.cos(angle)[..., None, None]
    s = np.sin(angle)[..., None, None]
    eye = np.broadcast_to(np.eye(3), km.shape)
    return eye * c + s * km + (1.0 - c) * (k[..., :, None] @ k[..., None, :])


def matrix_to_axis_angle(rot: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues: (..., 3, 3) -> axis*angle vector (..., 3)."""
    rot = np.asarray(rot, dtype=np.float64)
    tr = np.clip((rot[..., 0, 0] + rot[..., 1, 1] + rot[..., 2, 2] - 1.0) / 2.0,
                 -1.0, 1.0)
    angle = np.arccos(tr)
    skew = np.stack([rot[..., 2, 1] - rot[..., 1, 2],
                     rot[..., 0, 2] - rot[..., 2, 0],
                     rot[..., 1, 0] - rot[..., 0, 1]], axis=-1)
    sin = np.sin(angle)
    small = sin < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        axis = skew / (2.0 * sin[..., None])
    # angle ~ 0: vector ~ skew/2; angle ~ pi: take axis from the diagonal
    axis = np.where(small[..., None], 0.0, axis)
    out = axis * angle[..., None]
    near_pi = np.abs(angle - np.pi) < 1e-6
    if np.any(near_pi):
        rr = np.broadcast_to(rot, rot.shape).reshape(-1, 3, 3)
        aa = out.reshape(-1, 3)
        flags = np.broadcast_to(near_pi, angle.shape).reshape(-1)
        for i in np.flatnonzero(flags):
            m = (rr[i] + np.eye(3)) / 2.0
            ax = np.sqrt(np.maximum(np.diag(m), 0.0))
            # fix signs from off-diagonals
            j = int(np.argmax(ax))
            if ax[j] > 0:
                for k in range(3):
                    if k != j and m[j, k] < 0:
                        ax[k] = -ax[k]
            aa[i] = ax / max(np.linalg.norm(ax), 1e-12) * np.pi
        out = aa.reshape(out.shape)
    small_angle = angle < 1e-8
    out = np.where(small_angle[..., None], skew / 2.0, out)
    return out


def minimal_rotation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector a to unit vector b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axis = np.cross(a, b)
    dot = float(np.clip(np.dot(a, b), -1.0, 1.0))
    n = np.linalg.norm(axis)
    if n < 1e-12:
        if dot > 0:
            return np.eye(3)
        # opposite vectors: rotate pi about any perpendicular axis
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-8:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        return axis_angle_to_matrix(perp, np.pi)
    return axis_angle_to_matrix(axis, np.arctan2(n, dot))


def geodesic_interpolate(r0: np.ndarray, r1: np.ndarray, u: float) -> np.ndarray:
    """Interpolate between rotations along the shortest geodesic."""
    rel = np.swapaxes(r0, -1, -2) @ r1
    vec = matrix_to_axis_angle(rel)
    return r0 @ axis_angle_to_matrix(vec, np.linalg.norm(vec, axis=-1) * u)


# ---------------------------------------------------------------------------
# kinematics


def forward_kinematics(skel: SkeletonSpec, root_translation: np.ndarray,
                       rotations: np.ndarray) -> np.ndarray:
    """Global joint positions from root translation + local rotations.

    root_translation: (..., 3); rotations: (..., J, 3, 3) local, in parent
    frames. Returns (..., J, 3). position(child) = position(parent) +
    globalRot(parent) @ offset(child); the root sits at root_translation.
    """
    root_translation = np.asarray(root_translation, dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    j = skel.joint_count
    if rotations.shape[-3:] != (j, 3, 3):
        raise ShapeError(f"rotations must be (..., {j}, 3, 3), got {rotations.shape}")
    batch = rotations.shape[:-3]
    if root_translation.shape != batch + (3,):
        raise ShapeError(
            f"root translation {root_translation.shape} does not match batch {batch}")
    glob_rot = np.empty_like(rotations)
    pos = np.empty(batch + (j, 3))
    glob_rot[..., skel.root, :, :] = rotations[..., skel.root, :, :]
    pos[..., skel.root, :] = root_translation
    for child in range(j):
        parent = skel.parents[child]
        if parent < 0:
            continue
        pr = glob_rot[..., parent, :, :]
        glob_rot[..., child, :, :] = pr @ rotations[..., child, :, :]
        pos[..., child, :] = pos[..., parent, :] + (
            pr @ skel.offsets[child]).reshape(batch + (3,))
    return pos


def compute_velocities(p: np.ndarray, fps: float) -> np.ndarray:
    """Forward-difference velocities; the last frame repeats the previous one."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[0] < 2:
        raise ContractError("need at least 2 frames to compute velocities")
    v = np.empty_like(p)
    v[:-1] = (p[1:] - p[:-1]) * fps
    v[-1] = v[-2]
    return v


# ---------------------------------------------------------------------------
# motion container and packing


@dataclass
class MotionSequence:
    """T frames of global positions, local 6D rotations, and velocities."""

    fps: float
    p: np.ndarray   # (T, 75)
    r: np.ndarray   # (T, 150)
    v: np.ndarray   # (T, 75)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        t = self.p.shape[0]
        if self.p.shape != (t, POS_WIDTH) or self.r.shape != (t, ROT_WIDTH) \
                or self.v.shape != (t, VEL_WIDTH):
            raise ShapeError(
                f"motion arrays inconsistent: p{self.p.shape} r{self.r.shape} "
                f"v{self.v.shape}")
        if self.fps <= 0:
            raise ContractError("fps must be positive")

    @property
    def frames(self) -> int:
        return self.p.shape[0]

    def joint_positions(self) -> np.ndarray:
        return self.p.reshape(self.frames, JOINT_COUNT, 3)

    def joint_velocities(self) -> np.ndarray:
        return self.v.reshape(self.frames, JOINT_COUNT, 3)

    def rotation_matrices(self) -> np.ndarray:
        return sixd_to_matrix(self.r.reshape(self.frames, JOINT_COUNT, 6))

    def root_positions(self) -> np.ndarray:
        return self.p[:, ROOT_POS_SLICE]

    def validate_rotations(self, tol: float = 1e-6) -> None:
        rot = self.rotation_matrices()
        err = np.max(np.abs(np.swapaxes(rot, -1, -2) @ rot - np.eye(3)))
        if err > tol:
            raise ContractError(f"rotation blocks not orthonormal (err={err:.2e})")

    def copy(self) -> "MotionSequence":
        return MotionSequence(self.fps, self.p.copy(), self.r.copy(), self.v.copy())


@dataclass
class SslTrack:
    """Per-frame 3-vector sound-source location."""

    positions: np.ndarray   # (T, 3)
    frame: str = "local"    # "local" (character space) or "world"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ShapeError(f"SSL track must be (T, 3), got {self.positions.shape}")
        if self.frame not in ("local", "world"):
            raise ContractError(f"unknown SSL frame {self.frame!r}")

    def __len__(self) -> int:
        return self.positions.shape[0]


def assemble_vector(m: MotionSequence) -> np.ndarray:
    """Pack a motion into the (T, 300) layout [p | r | v]."""
    return np.concatenate([m.p, m.r, m.v], axis=1)


def disassemble_vector(x: np.ndarray, fps: float,
                       validate_rotations: bool = False) -> MotionSequence:
    """Inverse of assemble_vector. Raw generative samples may carry rotation
    blocks that are not yet orthonormal, so validation is opt-in."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != FRAME_WIDTH:
        raise LayoutError(f"expected (T, {FRAME_WIDTH}), got {x.shape}")
    m = MotionSequence(fps, x[:, POS_SLICE].copy(), x[:, ROT_SLICE].copy(),
                       x[:, VEL_SLICE].copy())
    if validate_rotations:
        m.validate_rotations()
    return m


# ---------------------------------------------------------------------------
# contacts and normalization


def detect_foot_contacts(p: np.ndarray, fps: float, skel: SkeletonSpec,
                         speed_threshold: float = 0.1,
                         height_threshold: float = 0.06) -> np.ndarray:
    """Boolean (T, 2) contact mask for (left_foot, right_foot).

    A foot is in contact when its speed is below ``speed_threshold`` and its
    height above the sequence's ground level is below ``height_threshold``.
    Ground level is estimated as the minimum foot height over the whole
    sequence, which keeps the detector meaningful after sequences are
    re-anchored to the origin by normalization.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 2 and p.shape[1] == POS_WIDTH:
        p = p.reshape(p.shape[0], JOINT_COUNT, 3)
    feet = p[:, list(skel.foot_joints), :]          # (T, 2, 3)
    vel = compute_velocities(feet.reshape(feet.shape[0], -1), fps)
    speed = np.linalg.norm(vel.reshape(-1, 2, 3), axis=-1)
    ground = feet[..., 2].min()
    height = feet[..., 2] - ground
    return (speed < speed_threshold) & (height < height_threshold)


def facing_direction(root_rot: np.ndarray) -> np.ndarray:
    """Forward axis of a root rotation projected to the ground plane."""
    f = np.asarray(root_rot) @ REST_FORWARD
    f = f.copy()
    f[..., 2] = 0.0
    return f


def normalize_sequence(m: MotionSequence,
                       ssl_world: np.ndarray | SslTrack) -> tuple[MotionSequence, SslTrack]:
    """Re-anchor frame 0 to the origin facing -y; SSL to per-frame local space.

    The applied transform is a yaw rotation plus translation, so ground-plane
    rigid placements of the same motion normalize to identical sequences.
    """
    if isinstance(ssl_world, SslTrack):
        ssl_world = ssl_world.positions
    ssl_world = np.asarray(ssl_world, dtype=np.float64)
    if ssl_world.shape != (m.frames, 3):
        raise ShapeError(f"SSL track shape {ssl_world.shape} != ({m.frames}, 3)")

    rot = m.rotation_matrices()                     # (T, J, 3, 3)
    root_rot = rot[:, 0]
    f = facing_direction(root_rot[0])
    norm = np.linalg.norm(f)
    if norm < 1e-8:
        raise ContractError("frame-0 facing direction is vertical; cannot normalize")
    phi = np.arctan2(f[1], f[0])
    q = rotation_z(-np.pi / 2.0 - phi)
    p0 = m.p[0, ROOT_POS_SLICE].copy()

    pj = m.joint_positions()
    p_new = (pj - p0) @ q.T
    v_new = m.joint_velocities() @ q.T
    root_new = q @ root_rot
    r_new = m.r.copy()
    r_new[:, 0:6] = matrix_to_sixd(root_new)

    out = MotionSequence(m.fps, p_new.reshape(m.frames, -1), r_new,
                         v_new.reshape(m.frames, -1))
    # local SSL is invariant to the global re-anchoring, so compute it from
    # the original data: s_local = R_root^T (s_world - p_root)
    rel = ssl_world - m.p[:, ROOT_POS_SLICE]
    s_local = np.einsum("tij,tj->ti", np.swapaxes(root_rot, -1, -2), rel)
    return out, SslTrack(s_local, frame="local")


# ---------------------------------------------------------------------------
# file formats


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode()


def _decode(blob: str, shape) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(blob), dtype="<f8")
    return arr.reshape(shape).astype(np.float64)


def save_motion(path, m: MotionSequence, ssl: SslTrack | None = None,
                genre: Genre | None = None, joint_names: list[str] | None = None,
                extras: dict | None = None) -> None:
    """Write a motion JSON file (header + base64 float64 blocks)."""
    doc = {
        "format": "sonomotion-motion",
        "version": 1,
        "fps": m.fps,
        "joint_count": JOINT_COUNT,
        "frames": m.frames,
        "joint_names": joint_names or SkeletonSpec.default().names,
        "genre": genre.label if genre is not None else None,
        "ssl_frame": ssl.frame if ssl is not None else None,
        "ssl": _encode(ssl.positions) if ssl is not None else None,
        "extras": extras or {},
        "p": _encode(m.p),
        "r": _encode(m.r),
        "v": _encode(m.v),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))


def load_motion(path) -> tuple[MotionSequence, SslTrack | None, Genre | None, dict]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read motion file {path}: {e}") from e
    if doc.get("format") != "sonomotion-motion":
        raise DataError(f"{path} is not a motion file")
    t = int(doc["frames"])
    m = MotionSequence(float(doc["fps"]),
                       _decode(doc["p"], (t, POS_WIDTH)),
                       _decode(doc["r"], (t, ROT_WIDTH)),
                       _decode(doc["v"], (t, VEL_WIDTH)))
    ssl = None
    if doc.get("ssl") is not None:
        ssl = SslTrack(_decode(doc["ssl"], (t, 3)), frame=doc.get("ssl_frame", "world"))
    genre = Genre.parse(doc["genre"]) if doc.get("genre") else None
    return m, ssl, genre, doc.get("extras", {})


def export_csv(path, m: MotionSequence) -> None:
    """Flat per-frame CSV (frame, time, then the 300 packed columns)."""
    x = assemble_vector(m)
    header = (["frame", "time"]
              + [f"p{i}" for i in range(POS_WIDTH)]
              + [f"r{i}" for i in range(ROT_WIDTH)]
              + [f"v{i}" for i in range(VEL_WIDTH)])
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for t in range(m.frames):
            writer.writerow([t, t / m.fps] + [f"{v:.9g}" for v in x[t]])

"""Desk-scale synthetic body models.

Stands in for licensed whole-body assets. The generator lays out a small
humanoid skeleton (y up, facing +z, units of metres), wraps every bone in a
tube of vertices, and derives a joint regressor, smooth skinning weights,
shape and expression bases, part masks and 68 face landmarks from it.
"""

import numpy as np

from .body_model import BodyModel, validate_parents
from .exceptions import InvalidDims

MIN_JOINTS = 11

# name, parent, position, bone end, radius, part
_BASE = [
    ("pelvis", None, (0.0, 0.0, 0.0), (0.0, 0.22, 0.0), 0.13, "body"),
    ("spine", "pelvis", (0.0, 0.22, 0.0), (0.0, 0.46, 0.0), 0.14, "body"),
    ("neck", "spine", (0.0, 0.50, 0.0), (0.0, 0.58, 0.0), 0.05, "body"),
    ("head", "neck", (0.0, 0.60, 0.0), (0.0, 0.82, 0.0), 0.09, "face"),
    ("jaw", "head", (0.0, 0.63, 0.04), (0.0, 0.60, 0.09), 0.035, "face"),
    ("l_shoulder", "spine", (0.16, 0.46, 0.0), (0.40, 0.46, 0.0), 0.05, "body"),
    ("l_elbow", "l_shoulder", (0.42, 0.46, 0.0), (0.64, 0.46, 0.0), 0.04, "body"),
    ("l_wrist", "l_elbow", (0.66, 0.46, 0.0), (0.74, 0.46, 0.0), 0.03, "left_hand"),
    ("r_shoulder", "spine", (-0.16, 0.46, 0.0), (-0.40, 0.46, 0.0), 0.05, "body"),
    ("r_elbow", "r_shoulder", (-0.42, 0.46, 0.0), (-0.64, 0.46, 0.0), 0.04, "body"),
    ("r_wrist", "r_elbow", (-0.66, 0.46, 0.0), (-0.74, 0.46, 0.0), 0.03, "right_hand"),
]

_LEGS = [
    ("l_hip", "pelvis", (0.10, -0.04, 0.0), (0.10, -0.44, 0.0), 0.07, "body"),
    ("r_hip", "pelvis", (-0.10, -0.04, 0.0), (-0.10, -0.44, 0.0), 0.07, "body"),
]
_KNEES = [
    ("l_knee", "l_hip", (0.10, -0.46, 0.0), (0.10, -0.88, 0.0), 0.05, "body"),
    ("r_knee", "r_hip", (-0.10, -0.46, 0.0), (-0.10, -0.88, 0.0), 0.05, "body"),
]

# iBUG 68-point layout: upper/lower eyelids and inner lips
CLOSURE_PAIRS = np.array(
    [[37, 41], [38, 40], [43, 47], [44, 46], [61, 67], [62, 66], [63, 65]], dtype=np.int64
)

ROLE_NAMES = {
    "pelvis": "root",
    "neck": "neck",
    "head": "head",
    "jaw": "jaw",
    "l_wrist": "left_wrist",
    "r_wrist": "right_wrist",
}


def _finger(side, k):
    sign = 1.0 if side == "l" else -1.0
    offsets = [0.0, 0.02, -0.02, 0.035, -0.035]
    dy = offsets[k % len(offsets)]
    x0 = 0.75 + 0.045 * (k // len(offsets))
    parent = f"{side}_wrist" if k < len(offsets) else f"{side}_finger{k - len(offsets)}"
    return (
        f"{side}_finger{k}",
        parent,
        (sign * x0, 0.46 + dy, 0.0),
        (sign * (x0 + 0.04), 0.46 + dy, 0.0),
        0.012,
        "left_hand" if side == "l" else "right_hand",
    )


def joint_layout(n_joints):
    """Named skeleton table for ``n_joints`` joints (at least 11)."""
    if n_joints < MIN_JOINTS:
        raise InvalidDims(f"synthetic skeleton needs at least {MIN_JOINTS} joints, got {n_joints}")
    table = list(_BASE)
    extras = [_LEGS[0], _LEGS[1], _finger("l", 0), _finger("r", 0), _KNEES[0], _KNEES[1]]
    k = 1
    while len(table) + len(extras) < n_joints:
        extras += [_finger("l", k), _finger("r", k)]
        k += 1
    return table + extras[: n_joints - len(table)]


def _allocate(weights, total, minimum=1):
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.size
    counts = np.full(n, minimum, dtype=np.int64)
    rest = total - counts.sum()
    if rest < 0:
        raise InvalidDims("not enough vertices for the skeleton")
    share = weights / weights.sum() * rest
    add = np.floor(share).astype(np.int64)
    counts += add
    left = rest - add.sum()
    order = np.argsort(-(share - add), kind="stable")
    counts[order[:left]] += 1
    return counts


def _perp_basis(u):
    helper = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    p = np.cross(u, helper)
    p /= np.linalg.norm(p)
    q = np.cross(u, p)
    return p, q


def _tube(start, end, radius, n, rng, offset):
    """``n`` vertices wrapped around the segment plus triangle faces."""
    start, end = np.asarray(start, float), np.asarray(end, float)
    axis = end - start
    length = np.linalg.norm(axis)
    u = axis / length
    p, q = _perp_basis(u)
    if n >= 12:
        n_seg = 6
    elif n >= 6:
        n_seg = 3
    else:
        n_seg = n
    rings = n // n_seg if n_seg >= 3 else 0
    verts, faces = [], []
    for i in range(rings):
        f = (i + 0.5) / rings
        rho = radius * (0.8 + 0.2 * np.sin(np.pi * f))
        for k in range(n_seg):
            ang = 2 * np.pi * k / n_seg + 0.35 * i + 0.2 * rng.uniform(-1, 1)
            r = rho * (1 + 0.08 * rng.uniform(-1, 1))
            verts.append(start + f * axis + r * (np.cos(ang) * p + np.sin(ang) * q))
    for i in range(rings - 1):
        for k in range(n_seg):
            a = offset + i * n_seg + k
            b = offset + i * n_seg + (k + 1) % n_seg
            c = b + n_seg
            d = a + n_seg
            faces += [(a, b, c), (a, c, d)]
    if rings == 1:
        faces += [(offset, offset + k, offset + k + 1) for k in range(1, n_seg - 1)]
    n_left = n - rings * n_seg
    for m in range(n_left):
        f = (m + 1) / (n_left + 1)
        if rings:
            pos = end + 0.3 * radius * (f - 0.5) * p + 0.3 * radius * rng.uniform(-1, 1) * q
        else:
            ang = 2 * np.pi * m / max(n_left, 1)
            pos = start + f * axis + radius * (np.cos(ang) * p + np.sin(ang) * q)
        verts.append(pos)
    if rings and n_left and n_seg >= 3:
        cap = offset + rings * n_seg
        last = offset + (rings - 1) * n_seg
        for k in range(n_seg):
            faces.append((last + k, last + (k + 1) % n_seg, cap))
        # fan the remaining cap points so that every vertex lies on the surface
        for m in range(1, n_left):
            faces.append((last + m % n_seg, cap + m - 1, cap + m))
    return np.array(verts).reshape(-1, 3), faces


def _segment_distance(points, a, b):
    ab = b - a
    t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def _smooth_field(x, rng, n_waves, freq, amp):
    out = np.zeros_like(x)
    for _ in range(n_waves):
        omega = rng.normal(0.0, freq, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        direction = rng.normal(size=3)
        out += np.sin(x @ omega + phase)[:, None] * direction[None, :]
    return amp * out / np.sqrt(n_waves)


def synth_model(seed=0, n_vertices=300, n_joints=17, n_betas=10, n_psi=10):
    """Deterministic synthetic :class:`BodyModel` for a given seed and dims."""
    if n_joints < 2 or n_vertices < n_joints:
        raise InvalidDims("need V >= J >= 2")
    if n_betas < 1 or n_psi < 1:
        raise InvalidDims("need at least one shape and one expression coefficient")
    table = joint_layout(n_joints)
    rng = np.random.default_rng(seed)

    names = [row[0] for row in table]
    index = {name: i for i, name in enumerate(names)}
    parents = np.array([-1 if row[1] is None else index[row[1]] for row in table], dtype=np.int64)
    validate_parents(parents)
    jitter = rng.normal(0.0, 0.004, size=(n_joints, 3))
    positions = np.array([row[2] for row in table]) + jitter
    ends = np.array([row[3] for row in table]) + jitter
    radii = np.array([row[4] for row in table])
    parts = [row[5] for row in table]

    # vertex budget per part: face ~30% so the 68 landmarks have room, hands ~8% each
    lengths = np.linalg.norm(ends - positions, axis=1)
    area = lengths * radii
    part_arr = np.array(parts)
    is_face = part_arr == "face"
    shares = {"face": 0.3, "left_hand": 0.08, "right_hand": 0.08}
    counts = np.zeros(n_joints, dtype=np.int64)
    budget = {}
    for name, share in shares.items():
        sel = part_arr == name
        budget[name] = max(int(round(share * n_vertices)), int(sel.sum()))
    budget["body"] = n_vertices - sum(budget.values())
    if budget["body"] < (part_arr == "body").sum():
        budget = {name: int((part_arr == name).sum()) for name in ("face", "left_hand", "right_hand")}
        budget["body"] = n_vertices - sum(budget.values())
    for name, n in budget.items():
        sel = part_arr == name
        counts[sel] = _allocate(area[sel], n)

    verts, faces, owner = [], [], []
    offset = 0
    for j in range(n_joints):
        v, f = _tube(positions[j], ends[j], radii[j], counts[j], rng, offset)
        verts.append(v)
        faces.extend(f)
        owner.extend([j] * len(v))
        offset += len(v)
    template = np.concatenate(verts)
    owner = np.array(owner)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)

    # joint regressor: inverse-distance blend of the nearest vertices
    K = min(8, n_vertices)
    regressor = np.zeros((n_joints, n_vertices))
    for j in range(n_joints):
        d = np.linalg.norm(template - positions[j], axis=1)
        near = np.argsort(d, kind="stable")[:K]
        w = 1.0 / (d[near] + 0.01)
        regressor[j, near] = w / w.sum()

    # skinning: gaussian falloff around each bone, boosted for the owning bone
    dist = np.stack([_segment_distance(template, positions[j], ends[j]) for j in range(n_joints)], axis=1)
    sigma = np.maximum(radii, 0.03)
    skin = np.exp(-((dist / sigma[None, :]) ** 2))
    skin[np.arange(n_vertices), owner] *= 3.0
    skin[skin < 1e-3 * skin.max(axis=1, keepdims=True)] = 0.0
    skin /= skin.sum(axis=1, keepdims=True)

    # shape space shared by body, face and hands
    shape_basis = np.zeros((n_vertices, 3, n_betas))
    center = template.mean(axis=0)
    for k in range(n_betas):
        if k == 0:
            field = 0.06 * (template - center)
        elif k == 1:
            field = 0.08 * (template - center) * np.array([1.0, 0.0, 1.0])
        else:
            field = _smooth_field(template, rng, 4, 2 * np.pi / 0.9, 0.025)
        shape_basis[:, :, k] = field / (1.0 + 0.15 * k)

    face_vertices = np.flatnonzero(is_face[owner])
    head = np.array(positions[index["head"]])
    expr_basis = np.zeros((n_vertices, 3, n_psi))
    falloff = np.exp(-np.sum((template - (head + [0.0, 0.02, 0.06])) ** 2, axis=1) / (2 * 0.08**2))
    for k in range(n_psi):
        field = _smooth_field(template, rng, 3, 2 * np.pi / 0.15, 0.012)
        expr_basis[face_vertices, :, k] = field[face_vertices] * falloff[face_vertices, None]

    part_masks = {
        "face": face_vertices,
        "left_hand": np.flatnonzero(np.array([parts[o] == "left_hand" for o in owner])),
        "right_hand": np.flatnonzero(np.array([parts[o] == "right_hand" for o in owner])),
        "body": np.flatnonzero(np.array([parts[o] == "body" for o in owner])),
    }

    front = face_vertices[template[face_vertices, 2] >= 0.0]
    pool = front if front.size >= 68 else face_vertices
    landmarks = rng.choice(pool, size=68, replace=pool.size < 68)

    roles = {ROLE_NAMES[n]: index[n] for n in names if n in ROLE_NAMES}

    eval_reg = np.zeros((14, n_vertices))
    picks = np.linspace(0, n_joints - 1, 14).round().astype(int)
    for r, j in enumerate(picks):
        extra = rng.choice(n_vertices, size=min(4, n_vertices), replace=False)
        row = regressor[j].copy()
        row[extra] += 0.05
        eval_reg[r] = row / row.sum()

    return BodyModel(
        template=template,
        faces=faces,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        joint_regressor=regressor,
        skin_weights=skin,
        parents=parents,
        joint_names=tuple(names),
        roles=roles,
        part_masks=part_masks,
        landmark_indices=np.asarray(landmarks, dtype=np.int64),
        closure_pairs=CLOSURE_PAIRS.copy(),
        eval_regressor=eval_reg,
    )


def _swing(R, bone):
    """Part of ``R`` that moves the bone direction, without twist about it."""
    from . import rotations as rot

    u = bone / np.linalg.norm(bone)
    v = R @ u
    axis = np.cross(u, v)
    sin = np.linalg.norm(axis)
    if sin < 1e-12:
        return np.eye(3)
    angle = np.arctan2(sin, float(u @ v))
    return rot.axis_angle_to_matrix(axis / sin * angle)


def sample_parameters(model, rng, pose_scale=0.25, beta=None, expression_scale=1.0, leaf_pose=False):
    """Random parameters: beta ~ N(0, I) unless given, small random pose.

    Joint keypoints cannot see the rotation of a joint without children, nor
    the twist of a joint about the bone to a lone childless child. Unless
    ``leaf_pose`` is set, such rotations are left at the identity (leaves) or
    reduced to their swing part, so the pose is recoverable from keypoints.
    """
    from . import rotations as rot
    from .body_model import Parameters

    params = Parameters.zeros(model)
    params.beta = rng.standard_normal(model.n_betas) if beta is None else np.asarray(beta, float)
    params.psi = expression_scale * rng.standard_normal(model.n_psi)
    children = [[] for _ in range(model.n_joints)]
    for j in range(1, model.n_joints):
        children[model.parents[j]].append(j)
    rest = model.joint_regressor @ model.template
    aa = rng.normal(0.0, pose_scale, size=(model.n_joints, 3))
    for j in range(model.n_joints):
        if j == model.jaw_joint:
            continue
        R = rot.axis_angle_to_matrix(aa[j])
        if not leaf_pose:
            if not children[j]:
                continue
            if len(children[j]) == 1 and not children[children[j][0]]:
                R = _swing(R, rest[children[j][0]] - rest[j])
        params.pose[j] = rot.matrix_to_rot6d(R)
    params.jaw = np.array([rng.normal(0, 0.05), rng.normal(0, 0.05), abs(rng.normal(0, 0.15))])
    return params

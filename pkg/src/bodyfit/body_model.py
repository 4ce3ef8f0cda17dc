"""Differentiable parametric body: shape blendshapes, joint regression,
forward kinematics and linear blend skinning.

Forward kinematics is carried in *delta form*: for every joint we track the
world rotation ``Rw_j`` and the offset ``d_j = X_j - J_j`` of the posed joint
from its rest position. With identity rotations every delta is exactly zero,
so the zero pose reproduces the shaped rest mesh bit for bit.

Pose-corrective blendshapes are deliberately not modelled.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from . import rotations as rot
from ._validation import as_float_array
from .exceptions import DimensionMismatch, InvalidModel

PART_NAMES = ("body", "face", "left_hand", "right_hand")
N_LANDMARKS = 68


def _readonly(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BodyModel:
    template: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int, 0-based
    shape_basis: np.ndarray  # (V, 3, n_beta)
    expr_basis: np.ndarray  # (V, 3, n_psi)
    joint_regressor: np.ndarray  # (J, V)
    skin_weights: np.ndarray  # (V, J)
    parents: np.ndarray  # (J,), parents[0] == -1
    joint_names: tuple
    roles: dict  # role name -> joint index ("head", "jaw", "neck", "left_wrist", ...)
    part_masks: dict  # part name -> sorted vertex indices
    landmark_indices: np.ndarray  # (68,)
    closure_pairs: np.ndarray  # (K, 2) indices into the 68 landmarks
    eval_regressor: np.ndarray = None  # (14, V)

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                object.__setattr__(self, f.name, _readonly(value))
        object.__setattr__(
            self, "part_masks", {k: _readonly(np.asarray(v, dtype=np.int64)) for k, v in self.part_masks.items()}
        )
        object.__setattr__(self, "roles", dict(self.roles))
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        self.validate()

    @property
    def n_vertices(self):
        return self.template.shape[0]

    @property
    def n_joints(self):
        return self.parents.shape[0]

    @property
    def n_betas(self):
        return self.shape_basis.shape[2]

    @property
    def n_psi(self):
        return self.expr_basis.shape[2]

    @property
    def jaw_joint(self):
        return self.roles.get("jaw")

    def descendants(self, joint):
        out = [joint]
        for j in range(joint + 1, self.n_joints):
            if self.parents[j] in out:
                out.append(j)
        return out

    def hand_joints(self, side=None):
        sides = ("left", "right") if side is None else (side,)
        out = []
        for s in sides:
            wrist = self.roles.get(f"{s}_wrist")
            if wrist is not None:
                out.extend(self.descendants(wrist))
        return sorted(out)

    def joint_groups(self):
        """Partition of joint indices by the regressor that owns them."""
        hands = set(self.hand_joints())
        head = {self.roles[r] for r in ("head",) if r in self.roles}
        jaw = {self.jaw_joint} if self.jaw_joint is not None else set()
        body = [j for j in range(1, self.n_joints) if j not in hands | head | jaw]
        return {
            "global_orient": [0],
            "body_pose": body,
            "hand_pose": sorted(hands),
            "head_pose": sorted(head),
        }

    def validate(self):
        V, J = self.n_vertices, self.n_joints
        if self.template.shape != (V, 3):
            raise InvalidModel("template must be V x 3")
        if self.shape_basis.ndim != 3 or self.shape_basis.shape[:2] != (V, 3):
            raise InvalidModel("shape_basis must be V x 3 x n_beta")
        if self.expr_basis.ndim != 3 or self.expr_basis.shape[:2] != (V, 3):
            raise InvalidModel("expr_basis must be V x 3 x n_psi")
        if self.joint_regressor.shape != (J, V):
            raise InvalidModel("joint_regressor must be J x V")
        if self.skin_weights.shape != (V, J):
            raise InvalidModel("skin_weights must be V x J")
        if np.any(self.joint_regressor < 0) or np.any(self.skin_weights < 0):
            raise InvalidModel("regressor and skinning weights must be nonnegative")
        if np.abs(self.joint_regressor.sum(1) - 1).max() > 1e-9:
            raise InvalidModel("joint_regressor rows must sum to 1")
        if np.abs(self.skin_weights.sum(1) - 1).max() > 1e-9:
            raise InvalidModel("skin_weights rows must sum to 1")
        validate_parents(self.parents)
        if len(self.joint_names) != J:
            raise InvalidModel("joint_names length must equal J")
        for role, j in self.roles.items():
            if not 0 <= j < J:
                raise InvalidModel(f"role {role} points outside the skeleton")
        for name, idx in self.part_masks.items():
            if idx.size and (idx.min() < 0 or idx.max() >= V):
                raise InvalidModel(f"part mask {name} is not a subset of [0, V)")
        if self.landmark_indices.shape != (N_LANDMARKS,):
            raise InvalidModel("landmark_indices must hold 68 vertex ids")
        if self.landmark_indices.min() < 0 or self.landmark_indices.max() >= V:
            raise InvalidModel("landmark index out of range")
        cp = self.closure_pairs
        if cp.size and (cp.ndim != 2 or cp.shape[1] != 2 or cp.min() < 0 or cp.max() >= N_LANDMARKS):
            raise InvalidModel("closure pairs must index into the 68 landmarks")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise InvalidModel("face index out of range")
        if self.eval_regressor is not None and self.eval_regressor.shape[1] != V:
            raise InvalidModel("eval_regressor must have V columns")


def validate_parents(parents):
    parents = np.asarray(parents)
    if parents.ndim != 1 or parents.shape[0] < 1:
        raise InvalidModel("parents must be a non-empty 1-d array")
    if parents[0] != -1:
        raise InvalidModel("joint 0 must be the root (parent -1)")
    for j in range(1, parents.shape[0]):
        if not 0 <= parents[j] < j:
            raise InvalidModel(f"parent of joint {j} must precede it, got {parents[j]}")


@dataclass
class Parameters:
    """Shape, pose and expression. The jaw row of ``pose`` is ignored; the jaw
    rotation lives in ``jaw`` as Euler angles."""

    beta: np.ndarray
    pose: np.ndarray  # (J, 6)
    jaw: np.ndarray  # (3,) pitch, roll, yaw
    psi: np.ndarray

    @classmethod
    def zeros(cls, model):
        return cls(
            beta=np.zeros(model.n_betas),
            pose=np.tile(rot.IDENTITY_6D, (model.n_joints, 1)),
            jaw=np.zeros(3),
            psi=np.zeros(model.n_psi),
        )

    def copy(self):
        return Parameters(self.beta.copy(), self.pose.copy(), self.jaw.copy(), self.psi.copy())

    def check(self, model):
        self.beta = as_float_array(self.beta, "beta", shape=(model.n_betas,))
        self.pose = as_float_array(self.pose, "pose", shape=(model.n_joints, 6))
        self.jaw = as_float_array(self.jaw, "jaw", shape=(3,))
        self.psi = as_float_array(self.psi, "psi", shape=(model.n_psi,))
        return self

    def to_vector(self):
        return np.concatenate([self.beta, self.pose.ravel(), self.jaw, self.psi])

    @classmethod
    def from_vector(cls, model, vec):
        vec = np.asarray(vec, dtype=np.float64)
        nb, J, npsi = model.n_betas, model.n_joints, model.n_psi
        if vec.shape != (nb + 6 * J + 3 + npsi,):
            raise DimensionMismatch("parameter vector has the wrong length")
        i = 0
        beta = vec[i : i + nb]
        i += nb
        pose = vec[i : i + 6 * J].reshape(J, 6)
        i += 6 * J
        jaw = vec[i : i + 3]
        i += 3
        psi = vec[i : i + npsi]
        return cls(beta.copy(), pose.copy(), jaw.copy(), psi.copy())


@dataclass
class PosedResult:
    vertices: np.ndarray  # (V, 3) posed mesh
    joints_rest: np.ndarray  # (J, 3)
    joints_posed: np.ndarray  # (J, 3)
    world_transforms: np.ndarray  # (J, 4, 4)
    rest_vertices: np.ndarray = field(repr=False, default=None)
    local_rotations: np.ndarray = field(repr=False, default=None)

    @property
    def world_rotations(self):
        return self.world_transforms[:, :3, :3]


def shape_mesh(model, beta, psi):
    """Rest mesh: template + shape blendshapes + expression blendshapes."""
    beta = as_float_array(beta, "beta", shape=(model.n_betas,))
    psi = as_float_array(psi, "psi", shape=(model.n_psi,))
    return model.template + model.shape_basis @ beta + model.expr_basis @ psi


def regress_joints(model, vertices):
    vertices = as_float_array(vertices, "vertices", shape=(model.n_vertices, 3))
    return model.joint_regressor @ vertices


def local_rotations(model, params):
    R = rot.rot6d_to_matrix(_pose_for_decoding(model, params.pose))
    if model.jaw_joint is not None:
        R[model.jaw_joint] = rot.euler_to_matrix(params.jaw)
    return R


def _pose_for_decoding(model, pose):
    if model.jaw_joint is None:
        return pose
    pose = pose.copy()
    pose[model.jaw_joint] = rot.IDENTITY_6D
    return pose


def _fk(parents, joints_rest, local_R):
    J = parents.shape[0]
    Rw = np.empty((J, 3, 3))
    delta = np.zeros((J, 3))
    Rw[0] = local_R[0]
    eye = np.eye(3)
    for j in range(1, J):
        p = parents[j]
        Rw[j] = Rw[p] @ local_R[j]
        delta[j] = (Rw[p] - eye) @ (joints_rest[j] - joints_rest[p]) + delta[p]
    return Rw, delta


def _to_transforms(Rw, joints_posed):
    J = Rw.shape[0]
    T = np.zeros((J, 4, 4))
    T[:, :3, :3] = Rw
    T[:, :3, 3] = joints_posed
    T[:, 3, 3] = 1.0
    return T


def forward_kinematics(model, joints_rest, rotations):
    """World transforms (J, 4, 4) from rest joints and local rotation matrices.

    ``world[j] = world[parent] @ local(j)`` where ``local(j)`` rotates about
    ``joints_rest[j]``; the translation part of ``world[j]`` is the posed joint.
    """
    joints_rest = as_float_array(joints_rest, "joints_rest", shape=(model.n_joints, 3))
    rotations = as_float_array(rotations, "rotations", shape=(model.n_joints, 3, 3))
    Rw, delta = _fk(model.parents, joints_rest, rotations)
    return _to_transforms(Rw, joints_rest + delta)


def skin(model, vertices_rest, world_transforms, joints_rest):
    """Linear blend skinning of rest vertices by the FK world transforms."""
    vertices_rest = as_float_array(vertices_rest, "vertices_rest", shape=(model.n_vertices, 3))
    world_transforms = as_float_array(world_transforms, "world_transforms", shape=(model.n_joints, 4, 4))
    joints_rest = as_float_array(joints_rest, "joints_rest", shape=(model.n_joints, 3))
    Rw = world_transforms[:, :3, :3]
    delta = world_transforms[:, :3, 3] - joints_rest
    return _skin(model.skin_weights, vertices_rest, Rw, delta, joints_rest)


def _skin(W, v, Rw, delta, joints_rest):
    D = Rw - np.eye(3)
    e = delta - np.einsum("jab,jb->ja", D, joints_rest)
    B = (W @ D.reshape(-1, 9)).reshape(-1, 3, 3)
    return v + np.einsum("vab,vb->va", B, v) + W @ e


def pose_model(model, params):
    """M(beta, theta, psi): shaped, posed and skinned mesh plus posed joints."""
    params = params.check(model)
    v = shape_mesh(model, params.beta, params.psi)
    joints_rest = model.joint_regressor @ v
    R = local_rotations(model, params)
    Rw, delta = _fk(model.parents, joints_rest, R)
    joints_posed = joints_rest + delta
    verts = _skin(model.skin_weights, v, Rw, delta, joints_rest)
    return PosedResult(
        vertices=verts,
        joints_rest=joints_rest,
        joints_posed=joints_posed,
        world_transforms=_to_transforms(Rw, joints_posed),
        rest_vertices=v,
        local_rotations=R,
    )


def pose_model_backward(model, params, result, grad_vertices=None, grad_joints=None, grad_world_rot=None):
    """Reverse-mode pass through :func:`pose_model`.

    Accepts upstream gradients w.r.t. posed vertices (V, 3), posed joints
    (J, 3) and world rotations (J, 3, 3); any may be ``None``. Returns a
    :class:`Parameters` holding dL/dbeta, dL/dpose, dL/djaw and dL/dpsi.
    """
    V, J = model.n_vertices, model.n_joints
    W = model.skin_weights
    v = result.rest_vertices
    Jr = result.joints_rest
    Rw = result.world_rotations
    Rl = result.local_rotations
    delta = result.joints_posed - Jr
    D = Rw - np.eye(3)

    gD = np.zeros((J, 3, 3)) if grad_world_rot is None else np.array(grad_world_rot, dtype=np.float64)
    gJ = np.zeros((J, 3))
    gdelta = np.zeros((J, 3))
    gv = np.zeros((V, 3))

    if grad_vertices is not None:
        G = np.asarray(grad_vertices, dtype=np.float64)
        B = (W @ D.reshape(-1, 9)).reshape(-1, 3, 3)
        gv += G + np.einsum("vba,vb->va", B, G)
        gD += (W.T @ (G[:, :, None] * v[:, None, :]).reshape(V, 9)).reshape(J, 3, 3)
        ge = W.T @ G
        gdelta += ge
        gD -= ge[:, :, None] * Jr[:, None, :]
        gJ -= np.einsum("jba,jb->ja", D, ge)

    if grad_joints is not None:
        GX = np.asarray(grad_joints, dtype=np.float64)
        gJ += GX
        gdelta += GX

    gRl = np.zeros((J, 3, 3))
    parents = model.parents
    for j in range(J - 1, 0, -1):
        p = parents[j]
        off = Jr[j] - Jr[p]
        gD[p] += np.outer(gdelta[j], off)
        back = D[p].T @ gdelta[j]
        gJ[j] += back
        gJ[p] -= back
        gdelta[p] += gdelta[j]
        gD[p] += gD[j] @ Rl[j].T
        gRl[j] = Rw[p].T @ gD[j]
    gRl[0] = gD[0]

    gv += model.joint_regressor.T @ gJ

    g_pose = rot.rot6d_to_matrix_backward(_pose_for_decoding(model, params.pose), gRl)
    g_jaw = np.zeros(3)
    if model.jaw_joint is not None:
        g_pose[model.jaw_joint] = 0.0
        g_jaw = rot.euler_to_matrix_backward(params.jaw, gRl[model.jaw_joint])
    g_beta = np.einsum("vak,va->k", model.shape_basis, gv)
    g_psi = np.einsum("vak,va->k", model.expr_basis, gv)
    return Parameters(beta=g_beta, pose=g_pose, jaw=g_jaw, psi=g_psi)


def global_to_relative(theta_g, ancestor_world):
    """Express an absolute joint rotation relative to its parent's world rotation."""
    theta_g = rot.check_rotation(theta_g, name="theta_g")
    ancestor_world = rot.check_rotation(ancestor_world, name="ancestor_world")
    return np.swapaxes(ancestor_world, -1, -2) @ theta_g


def set_global_rotation(model, params, joint, theta_g):
    """Return new parameters in which ``joint`` has world rotation ``theta_g``.

    The parent chain is posed with ``params``; the joint's local rotation is
    recovered with :func:`global_to_relative`. This is how absolute head and
    wrist predictions are applied to an already posed body.
    """
    if joint == 0:
        parent_world = np.eye(3)
    else:
        res = pose_model(model, params)
        parent_world = res.world_rotations[model.parents[joint]]
    local = global_to_relative(theta_g, parent_world)
    out = params.copy()
    if joint == model.jaw_joint:
        out.jaw = rot.matrix_to_euler(local)
    else:
        out.pose[joint] = rot.matrix_to_rot6d(local)
    return out

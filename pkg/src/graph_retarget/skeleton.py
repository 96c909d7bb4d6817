"""Robot skeleton graphs, URDF ingestion and joint correspondences.

A skeleton is stored as a rooted tree of 1-DoF revolute joints hanging off a
floating base (index 0). All geometry is expressed in the base frame at the
zero pose, so forward kinematics only needs ``link_vectors`` and ``axes``.
"""
from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

KEY_SEMANTICS = ("Hip", "Knee", "Ankle", "Toe", "Shoulder", "Elbow", "Hand")
END_EFFECTORS = ("Toe", "Hand")
SIDES = ("Left", "Right")

NO_RELATION, SELF, PARENT, CHILD = 0, 1, 2, 3


class SkeletonError(ValueError):
    """Invalid skeleton structure (cycles, several roots, bad indices)."""


class URDFParseError(SkeletonError):
    pass


class UnsupportedJointError(SkeletonError):
    pass


class ConfigError(ValueError):
    pass


def base_semantic(name: str) -> str:
    """Strip the side qualifier: ``"LeftKnee" -> "Knee"``."""
    for side in SIDES:
        if name.startswith(side):
            return name[len(side):]
    return name


def is_end_effector(name: str) -> bool:
    return base_semantic(name) in END_EFFECTORS


def _check_semantic(name: str) -> None:
    if base_semantic(name) not in KEY_SEMANTICS:
        raise ConfigError(f"unknown key-joint semantic {name!r}")


def build_relation_matrix(parent_index: Sequence[int]) -> np.ndarray:
    """Relation codes between joints: 1 self, 2 row is parent of column,
    3 row is child of column, 0 otherwise."""
    parents = list(parent_index)
    n = len(parents)
    _check_tree(parents)
    psi = np.zeros((n, n), dtype=np.int64)
    np.fill_diagonal(psi, SELF)
    for child, parent in enumerate(parents):
        if parent >= 0:
            psi[parent, child] = PARENT
            psi[child, parent] = CHILD
    return psi


def _check_tree(parents: list[int]) -> None:
    n = len(parents)
    if n == 0:
        raise SkeletonError("skeleton has no joints")
    if parents[0] != -1:
        raise SkeletonError("joint 0 must be the root (parent -1)")
    roots = [i for i, p in enumerate(parents) if p == -1]
    if len(roots) != 1:
        raise SkeletonError(f"expected exactly one root, found {roots}")
    for i, p in enumerate(parents):
        if p != -1 and not 0 <= p < n:
            raise SkeletonError(f"joint {i} has out-of-range parent {p}")
    for i in range(n):
        seen = set()
        j = i
        while j != -1:
            if j in seen:
                raise SkeletonError(f"cycle detected through joint {i}")
            seen.add(j)
            j = parents[j]


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    """Kinematic tree of one embodiment.

    Attributes:
        joint_names: one name per joint, base first.
        parent_index: parent per joint, -1 for the base.
        axes: (J, 3) unit rotation axes, zero row for the base.
        link_vectors: (J, 3) parent-joint to joint offsets in metres at zero pose.
        relation_matrix: (J, J) relation codes, see ``build_relation_matrix``.
        key_joints: semantic name (e.g. ``"LeftKnee"``) -> joint index or -1.
        name: embodiment identifier.
    """

    joint_names: tuple[str, ...]
    parent_index: tuple[int, ...]
    axes: np.ndarray
    link_vectors: np.ndarray
    relation_matrix: np.ndarray
    key_joints: dict[str, int] = field(default_factory=dict)
    name: str = "robot"

    def __post_init__(self):
        axes = np.asarray(self.axes, dtype=np.float64).reshape(-1, 3)
        links = np.asarray(self.link_vectors, dtype=np.float64).reshape(-1, 3)
        psi = np.asarray(self.relation_matrix, dtype=np.int64)
        for arr in (axes, links, psi):
            arr.setflags(write=False)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "link_vectors", links)
        object.__setattr__(self, "relation_matrix", psi)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "parent_index", tuple(int(p) for p in self.parent_index))
        object.__setattr__(self, "key_joints", {k: int(v) for k, v in self.key_joints.items()})
        self.validate()

    @classmethod
    def from_arrays(cls, joint_names, parent_index, axes, link_vectors,
                    key_joints=None, name="robot") -> "SkeletonGraph":
        """Build a graph, normalising axes and deriving the relation matrix."""
        axes = np.array(axes, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(axes[1:], axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise SkeletonError("zero-length joint axis")
        axes[1:] = axes[1:] / norms
        axes[0] = 0.0
        links = np.array(link_vectors, dtype=np.float64).reshape(-1, 3)
        links[0] = 0.0
        return cls(
            joint_names=tuple(joint_names),
            parent_index=tuple(parent_index),
            axes=axes,
            link_vectors=links,
            relation_matrix=build_relation_matrix(parent_index),
            key_joints=dict(key_joints or {}),
            name=name,
        )

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    def validate(self) -> None:
        n = len(self.joint_names)
        if len(self.parent_index) != n:
            raise SkeletonError("parent_index length differs from joint_names")
        if self.axes.shape != (n, 3) or self.link_vectors.shape != (n, 3):
            raise SkeletonError("axes / link_vectors must have shape (J, 3)")
        _check_tree(list(self.parent_index))
        norms = np.linalg.norm(self.axes[1:], axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise SkeletonError("non-base joint axes must be unit vectors")
        expected = build_relation_matrix(self.parent_index)
        if self.relation_matrix.shape != (n, n) or not np.array_equal(self.relation_matrix, expected):
            raise SkeletonError("relation matrix inconsistent with parent_index")
        for sem, idx in self.key_joints.items():
            _check_semantic(sem)
            if idx != -1 and not 0 <= idx < n:
                raise SkeletonError(f"key joint {sem} index {idx} out of range")

    def children(self, j: int) -> list[int]:
        return [i for i, p in enumerate(self.parent_index) if p == j]

    def path_to_root(self, j: int) -> list[int]:
        path = []
        while j != -1:
            path.append(j)
            j = self.parent_index[j]
        return path

    def key_index(self, semantic: str) -> int:
        return self.key_joints.get(semantic, -1)

    def with_link_vectors(self, link_vectors: np.ndarray) -> "SkeletonGraph":
        return replace(self, link_vectors=np.array(link_vectors, dtype=np.float64))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SkeletonGraph):
            return NotImplemented
        return (
            self.name == other.name
            and self.joint_names == other.joint_names
            and self.parent_index == other.parent_index
            and np.array_equal(self.axes, other.axes)
            and np.array_equal(self.link_vectors, other.link_vectors)
            and np.array_equal(self.relation_matrix, other.relation_matrix)
            and self.key_joints == other.key_joints
        )

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "joint_names": list(self.joint_names),
            "parent_index": list(self.parent_index),
            "axes": self.axes.tolist(),
            "link_vectors": self.link_vectors.tolist(),
            "relation_matrix": self.relation_matrix.tolist(),
            "key_joints": dict(self.key_joints),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonGraph":
        try:
            return cls(
                joint_names=tuple(d["joint_names"]),
                parent_index=tuple(d["parent_index"]),
                axes=np.array(d["axes"], dtype=np.float64),
                link_vectors=np.array(d["link_vectors"], dtype=np.float64),
                relation_matrix=np.array(d["relation_matrix"], dtype=np.int64),
                key_joints=dict(d.get("key_joints", {})),
                name=d.get("name", "robot"),
            )
        except KeyError as exc:
            raise SkeletonError(f"graph file missing field {exc}") from None


def save_graph(g: SkeletonGraph, path) -> None:
    Path(path).write_text(json.dumps(g.to_dict(), indent=1))


def load_graph(path) -> SkeletonGraph:
    return SkeletonGraph.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# URDF
# ---------------------------------------------------------------------------

def _rpy_matrix(rpy) -> np.ndarray:
    r, p, y = rpy
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _floats(text: str | None, default, what: str) -> np.ndarray:
    if text is None:
        return np.array(default, dtype=np.float64)
    try:
        vals = [float(v) for v in text.split()]
    except ValueError:
        raise URDFParseError(f"bad numeric value in {what}: {text!r}") from None
    if len(vals) != 3:
        raise URDFParseError(f"{what} needs 3 values, got {text!r}")
    return np.array(vals, dtype=np.float64)


@dataclass
class _UrdfJoint:
    name: str
    type: str
    parent: str
    child: str
    xyz: np.ndarray
    rot: np.ndarray
    axis: np.ndarray


def parse_urdf(urdf_text: str, key_joints: dict[str, str] | None = None,
               name: str | None = None) -> SkeletonGraph:
    """Parse the revolute/continuous/fixed subset of URDF into a SkeletonGraph.

    Fixed joints are folded into their parent, continuous joints are treated as
    revolute, and a single floating joint (if present) marks the base link.
    ``key_joints`` maps semantics such as ``"LeftKnee"`` to URDF joint names
    (the base link name is accepted for the base).
    """
    try:
        root = ET.fromstring(urdf_text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise URDFParseError(f"malformed XML at line {line}, column {col}: {exc}") from None
    if root.tag != "robot":
        raise URDFParseError(f"expected <robot> root element, got <{root.tag}>")

    links = [ln.get("name") for ln in root.findall("link")]
    joints: list[_UrdfJoint] = []
    for el in root.findall("joint"):
        jname = el.get("name")
        jtype = el.get("type")
        if jtype in ("prismatic", "planar"):
            raise UnsupportedJointError(f"joint {jname!r} has unsupported type {jtype!r}")
        if jtype not in ("revolute", "continuous", "fixed", "floating"):
            raise UnsupportedJointError(f"joint {jname!r} has unknown type {jtype!r}")
        parent_el, child_el = el.find("parent"), el.find("child")
        if parent_el is None or child_el is None:
            raise URDFParseError(f"joint {jname!r} lacks parent or child")
        origin = el.find("origin")
        xyz = _floats(origin.get("xyz") if origin is not None else None, [0, 0, 0], f"{jname} origin xyz")
        rpy = _floats(origin.get("rpy") if origin is not None else None, [0, 0, 0], f"{jname} origin rpy")
        axis_el = el.find("axis")
        axis = _floats(axis_el.get("xyz") if axis_el is not None else None, [1, 0, 0], f"{jname} axis")
        joints.append(_UrdfJoint(jname, jtype, parent_el.get("link"), child_el.get("link"),
                                 xyz, _rpy_matrix(rpy), axis))

    floating = [j for j in joints if j.type == "floating"]
    if len(floating) > 1:
        raise SkeletonError("more than one floating joint")
    if floating:
        base_link = floating[0].child
        joints = [j for j in joints if j.type != "floating"]
    else:
        children = {j.child for j in joints}
        roots = [ln for ln in links if ln not in children]
        if len(roots) != 1:
            raise SkeletonError(f"expected a single root link, found {roots}")
        base_link = roots[0]

    by_parent: dict[str, list[_UrdfJoint]] = {}
    seen_children: set[str] = set()
    for j in joints:
        if j.child in seen_children:
            raise SkeletonError(f"link {j.child!r} has several parents")
        seen_children.add(j.child)
        by_parent.setdefault(j.parent, []).append(j)

    names = [base_link]
    parents = [-1]
    axes = [np.zeros(3)]
    offsets = [np.zeros(3)]
    index_of = {base_link: 0}

    # depth-first in document order; world frame == base frame at zero pose.
    # ``off`` is the offset from the owning joint, accumulated over fixed joints.
    visited = {base_link}

    def visit(link, off, rot, owner):
        for j in by_parent.get(link, []):
            if j.child in visited:
                raise SkeletonError(f"cycle through link {j.child!r}")
            visited.add(j.child)
            joff = off + rot @ j.xyz
            jrot = rot @ j.rot
            if j.type == "fixed":
                visit(j.child, joff, jrot, owner)
                continue
            ax = jrot @ j.axis
            norm = np.linalg.norm(ax)
            if norm < 1e-12:
                raise URDFParseError(f"joint {j.name!r} has zero axis")
            idx = len(names)
            names.append(j.name)
            parents.append(owner)
            offsets.append(joff)
            axes.append(ax / norm)
            index_of[j.name] = idx
            visit(j.child, np.zeros(3), jrot, idx)

    visit(base_link, np.zeros(3), np.eye(3), 0)

    keys = {}
    for sem, jname in (key_joints or {}).items():
        _check_semantic(sem)
        if jname is None or jname == -1:
            keys[sem] = -1
        elif isinstance(jname, int):
            keys[sem] = jname
        elif jname in index_of:
            keys[sem] = index_of[jname]
        else:
            raise ConfigError(f"key joint {sem} refers to unknown joint {jname!r}")

    return SkeletonGraph(
        joint_names=tuple(names),
        parent_index=tuple(parents),
        axes=np.array(axes),
        link_vectors=np.array(offsets),
        relation_matrix=build_relation_matrix(parents),
        key_joints=keys,
        name=name or root.get("name", "robot"),
    )


def graph_to_urdf(g: SkeletonGraph) -> str:
    """Emit a URDF whose parse reproduces ``g`` (identity origin rotations)."""
    lines = [f'<robot name="{g.name}">']
    link_name = lambda j: g.joint_names[0] if j == 0 else f"{g.joint_names[j]}_link"
    for j in range(g.joint_count):
        lines.append(f'  <link name="{link_name(j)}"/>')
    for j in range(1, g.joint_count):
        xyz = " ".join(repr(float(v)) for v in g.link_vectors[j])
        axis = " ".join(repr(float(v)) for v in g.axes[j])
        lines += [
            f'  <joint name="{g.joint_names[j]}" type="revolute">',
            f'    <parent link="{link_name(g.parent_index[j])}"/>',
            f'    <child link="{link_name(j)}"/>',
            f'    <origin xyz="{xyz}" rpy="0 0 0"/>',
            f'    <axis xyz="{axis}"/>',
            "  </joint>",
        ]
    lines.append("</robot>")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Correspondence
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class JointMap:
    """Key-joint correspondence from a source (reference) to a target skeleton.

    ``eta[i, j] == 1`` pairs source joint ``i`` with target joint ``j``.
    ``records`` keeps the semantic label for every candidate pair, with -1
    marking a side that lacks the joint (or a dropped correspondence).
    """

    records: tuple[tuple[str, int, int], ...]
    source_joint_count: int
    target_joint_count: int

    def __post_init__(self):
        recs = tuple((str(s), int(a), int(b)) for s, a, b in self.records)
        object.__setattr__(self, "records", recs)
        rows, cols = set(), set()
        for sem, a, b in recs:
            _check_semantic(sem)
            if a >= self.source_joint_count or b >= self.target_joint_count or a < -1 or b < -1:
                raise SkeletonError(f"joint map record {sem} out of range")
            if a >= 0 and b >= 0:
                if a in rows or b in cols:
                    raise SkeletonError(f"joint used twice in correspondence ({sem})")
                rows.add(a)
                cols.add(b)

    @property
    def eta(self) -> np.ndarray:
        eta = np.zeros((self.source_joint_count, self.target_joint_count), dtype=np.int64)
        for _, a, b in self.records:
            if a >= 0 and b >= 0:
                eta[a, b] = 1
        return eta

    def pairs(self) -> list[tuple[int, int]]:
        """Active (source, target) index pairs in record order."""
        return [(a, b) for _, a, b in self.records if a >= 0 and b >= 0]

    def __eq__(self, other):
        if not isinstance(other, JointMap):
            return NotImplemented
        return (self.records == other.records
                and self.source_joint_count == other.source_joint_count
                and self.target_joint_count == other.target_joint_count)

    def to_dict(self) -> dict:
        return {
            "source_joint_count": self.source_joint_count,
            "target_joint_count": self.target_joint_count,
            "records": [{"semantic": s, "src_index": a, "dst_index": b} for s, a, b in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JointMap":
        return cls(
            records=tuple((r["semantic"], r["src_index"], r["dst_index"]) for r in d["records"]),
            source_joint_count=d["source_joint_count"],
            target_joint_count=d["target_joint_count"],
        )


def save_joint_map(m: JointMap, path) -> None:
    Path(path).write_text(json.dumps(m.to_dict(), indent=1))


def load_joint_map(path) -> JointMap:
    return JointMap.from_dict(json.loads(Path(path).read_text()))


def build_joint_map(src: SkeletonGraph, dst: SkeletonGraph) -> JointMap:
    """Pair every semantic present on both skeletons."""
    semantics = list(src.key_joints)
    semantics += [s for s in dst.key_joints if s not in src.key_joints]
    records = [(s, src.key_index(s), dst.key_index(s)) for s in semantics]
    return JointMap(tuple(records), src.joint_count, dst.joint_count)


def extend_joint_map(jmap: JointMap, frames: int) -> np.ndarray:
    """Block-diagonal (T*J_dst, T*J_src) mask: target token (t, i) sees source
    token (t, j) iff the pair is in the map."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    return np.kron(np.eye(frames, dtype=np.int64), jmap.eta.T)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationPolicy:
    """Link-length scaling and correspondence dropout settings.

    ``key_links`` lists joint names whose incoming link counts as a key link;
    ``None`` selects the thigh and calf, i.e. the links ending at every
    Knee and Ankle key joint.
    """

    key_scale: tuple[float, float] = (0.5, 2.0)
    other_scale: tuple[float, float] = (0.67, 1.5)
    key_links: tuple[str, ...] | None = None
    drop_prob: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        for lo, hi in (self.key_scale, self.other_scale):
            if lo <= 0 or hi <= 0 or lo > hi:
                raise ConfigError(f"scale range ({lo}, {hi}) must be positive and ordered")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ConfigError("drop_prob must lie in [0, 1]")


def key_link_indices(g: SkeletonGraph, policy: AugmentationPolicy) -> set[int]:
    if policy.key_links is not None:
        unknown = [n for n in policy.key_links if n not in g.joint_names]
        if unknown:
            raise ConfigError(f"unknown key links {unknown}")
        return {g.joint_names.index(n) for n in policy.key_links}
    return {idx for sem, idx in g.key_joints.items()
            if idx > 0 and base_semantic(sem) in ("Knee", "Ankle")}


def augment_skeleton(g: SkeletonGraph, seed: int,
                     policy: AugmentationPolicy = AugmentationPolicy()) -> SkeletonGraph:
    """Rescale link lengths, keeping directions, axes and topology."""
    rng = np.random.default_rng(seed)
    keys = key_link_indices(g, policy)
    scales = np.ones(g.joint_count)
    for j in range(1, g.joint_count):
        lo, hi = policy.key_scale if j in keys else policy.other_scale
        scales[j] = rng.uniform(lo, hi)
    return g.with_link_vectors(g.link_vectors * scales[:, None])


def augment_correspondence(jmap: JointMap, seed: int, drop_prob: float) -> JointMap:
    """Independently drop non-end-effector pairs with probability ``drop_prob``."""
    if not 0.0 <= drop_prob <= 1.0:
        raise ConfigError("drop_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    records = []
    for sem, a, b in jmap.records:
        draw = rng.random()
        if not is_end_effector(sem) and a >= 0 and b >= 0 and draw < drop_prob:
            b = -1
        records.append((sem, a, b))
    return JointMap(tuple(records), jmap.source_joint_count, jmap.target_joint_count)


def chain_between(g: SkeletonGraph, ancestor: int, descendant: int) -> list[int]:
    """Joints strictly below ``ancestor`` down to and including ``descendant``."""
    path = []
    j = descendant
    while j != ancestor:
        if j == -1:
            raise ConfigError(f"joint {ancestor} is not an ancestor of {descendant}")
        path.append(j)
        j = g.parent_index[j]
    return path[::-1]


def semantic_sides(g: SkeletonGraph, names: Iterable[str]) -> list[str]:
    """Side prefixes (possibly empty) for which every semantic in ``names`` exists."""
    sides = []
    for side in ("",) + SIDES:
        if all(g.key_index(side + n) >= 0 for n in names):
            sides.append(side)
    return sides

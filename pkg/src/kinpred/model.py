"""Floating-base kinematic tree and its URDF-subset file format.

Only what kinematics needs is kept: links, revolute joints with an origin,
an axis and position limits. A ``<kinpred>`` sidecar element declares the
floating base, the IMU-bearing links, and the upper/lower joint partition.
"""
from __future__ import annotations

import hashlib
import xml.etree.ElementTree as ET
import xml.parsers.expat
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

AXIS_TOL = 1e-9


class ModelError(ValueError):
    pass


class ModelSyntaxError(ModelError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)


class NotATreeError(ModelError):
    pass


class UnknownLinkError(ModelError):
    pass


class AxisError(ModelError):
    pass


class PartitionError(ModelError):
    pass


@dataclass(frozen=True)
class LinkSpec:
    name: str


@dataclass(frozen=True)
class JointSpec:
    name: str
    parent: int
    child: int
    origin_xyz: np.ndarray
    origin_rpy: np.ndarray
    axis: np.ndarray
    lower: float
    upper: float
    kind: str = "revolute"

    @property
    def origin_rotation(self) -> np.ndarray:
        return Rotation.from_euler("xyz", self.origin_rpy).as_matrix()


@dataclass(frozen=True, eq=False)
class RigidBodyModel:
    name: str
    links: tuple[LinkSpec, ...]
    joints: tuple[JointSpec, ...]
    base_link_index: int
    instrumented_links: tuple[int, ...]
    upper_joints: tuple[int, ...]
    lower_joints: tuple[int, ...]
    # derived topology, filled in __post_init__
    joint_order: tuple[int, ...] = field(init=False)
    link_parent_joint: tuple[int, ...] = field(init=False)
    link_paths: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        _validate(self)
        n_links = len(self.links)
        parent_joint = [-1] * n_links
        for j, joint in enumerate(self.joints):
            parent_joint[joint.child] = j
        order: list[int] = []
        frontier = [self.base_link_index]
        children: dict[int, list[int]] = {}
        for j, joint in enumerate(self.joints):
            children.setdefault(joint.parent, []).append(j)
        while frontier:
            link = frontier.pop(0)
            for j in children.get(link, []):
                order.append(j)
                frontier.append(self.joints[j].child)
        paths = []
        for link in range(n_links):
            path = []
            cur = link
            while parent_joint[cur] >= 0:
                j = parent_joint[cur]
                path.append(j)
                cur = self.joints[j].parent
            paths.append(tuple(reversed(path)))
        object.__setattr__(self, "joint_order", tuple(order))
        object.__setattr__(self, "link_parent_joint", tuple(parent_joint))
        object.__setattr__(self, "link_paths", tuple(paths))
        origin_rot = np.array([jt.origin_rotation for jt in self.joints]).reshape(-1, 3, 3)
        object.__setattr__(self, "_origin_rot", origin_rot)
        object.__setattr__(self, "_origin_identity", [bool(np.array_equal(R, np.eye(3))) for R in origin_rot])
        skews = []
        for jt in self.joints:
            x, y, z = jt.axis
            K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
            skews.append((K, K @ K))
        object.__setattr__(self, "_axis_skew", skews)
        # constants for the unbatched frames path and the all-links twist Jacobians
        K = np.array([k for k, _ in skews]).reshape(-1, 3, 3)
        K2 = np.array([k2 for _, k2 in skews]).reshape(-1, 3, 3)
        object.__setattr__(self, "_origin_K", (origin_rot, origin_rot @ K, origin_rot @ K2))
        axes = np.array([jt.axis for jt in self.joints]).reshape(-1, 3)
        object.__setattr__(self, "_origin_axis", np.einsum("jab,jb->ja", origin_rot, axes))
        topo = np.array(order, dtype=int)
        mask = np.zeros((n_links, len(self.joints)))
        for link, path in enumerate(paths):
            mask[link, list(path)] = 1.0
        object.__setattr__(self, "_topo", topo)
        object.__setattr__(self, "_topo_inv", np.argsort(topo))
        object.__setattr__(self, "_path_mask_topo", mask[:, topo])

    @property
    def n(self) -> int:
        return len(self.joints)

    @property
    def D(self) -> int:
        return len(self.instrumented_links)

    @property
    def lower_limits(self) -> np.ndarray:
        return np.array([j.lower for j in self.joints], dtype=float)

    @property
    def upper_limits(self) -> np.ndarray:
        return np.array([j.upper for j in self.joints], dtype=float)

    def link_index(self, name: str) -> int:
        for i, link in enumerate(self.links):
            if link.name == name:
                return i
        raise UnknownLinkError(f"unknown link {name!r}")

    def joint_index(self, name: str) -> int:
        for i, joint in enumerate(self.joints):
            if joint.name == name:
                return i
        raise ModelError(f"unknown joint {name!r}")

    def joint_names(self) -> list[str]:
        return [j.name for j in self.joints]

    def hash(self) -> str:
        """Content hash of the canonical serialization (first 16 hex digits of sha256)."""
        return hashlib.sha256(serialize_model(self).encode()).hexdigest()[:16]

    def on_path(self, link: int) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        mask[list(self.link_paths[link])] = True
        return mask


@dataclass
class Configuration:
    base_position: np.ndarray
    base_rotation: np.ndarray
    joint_positions: np.ndarray


@dataclass
class SystemVelocity:
    base_linear: np.ndarray
    base_angular: np.ndarray
    joint_velocities: np.ndarray


def _validate(model: RigidBodyModel) -> None:
    n_links = len(model.links)
    names = [link.name for link in model.links]
    if len(set(names)) != len(names):
        raise ModelError("duplicate link names")
    if not 0 <= model.base_link_index < n_links:
        raise UnknownLinkError("base link index out of range")
    seen_child: set[int] = set()
    for joint in model.joints:
        for idx in (joint.parent, joint.child):
            if not 0 <= idx < n_links:
                raise UnknownLinkError(f"joint {joint.name!r} references link index {idx}")
        if joint.parent == joint.child:
            raise NotATreeError(f"joint {joint.name!r} connects link {names[joint.child]!r} to itself")
        if joint.child == model.base_link_index:
            raise NotATreeError(f"joint {joint.name!r} has the base link as child")
        if joint.child in seen_child:
            raise NotATreeError(f"link {names[joint.child]!r} has more than one parent joint")
        seen_child.add(joint.child)
        if abs(np.linalg.norm(joint.axis) - 1.0) > AXIS_TOL:
            raise AxisError(f"joint {joint.name!r} axis is not unit length")
        if not joint.lower < joint.upper:
            raise ModelError(f"joint {joint.name!r} has lower >= upper limit")
    # every link must be reachable from the base (rules out cycles disconnected from it)
    reach = {model.base_link_index}
    changed = True
    while changed:
        changed = False
        for joint in model.joints:
            if joint.parent in reach and joint.child not in reach:
                reach.add(joint.child)
                changed = True
    if len(reach) != n_links:
        missing = sorted(names[i] for i in set(range(n_links)) - reach)
        raise NotATreeError(f"links not reachable from base: {missing}")
    n = len(model.joints)
    up, lo = set(model.upper_joints), set(model.lower_joints)
    if up & lo:
        raise PartitionError("upper and lower joint sets overlap")
    if up | lo != set(range(n)) or len(up) != len(model.upper_joints) or len(lo) != len(model.lower_joints):
        raise PartitionError("upper/lower joint sets must partition all joints exactly once")
    inst = model.instrumented_links
    if len(set(inst)) != len(inst) or any(not 0 <= i < n_links for i in inst):
        raise ModelError("instrumented links must be distinct valid link indices")


def _floats(text: str | None, count: int, what: str, elem: ET.Element) -> np.ndarray:
    if text is None:
        raise ModelSyntaxError(f"missing {what} on <{elem.tag}>", *_pos(elem))
    try:
        vals = [float(tok) for tok in text.split()]
    except ValueError:
        raise ModelSyntaxError(f"non-numeric {what}: {text!r}", *_pos(elem)) from None
    if len(vals) != count:
        raise ModelSyntaxError(f"{what} needs {count} numbers, got {len(vals)}", *_pos(elem))
    return np.array(vals, dtype=float)


def _pos(elem: ET.Element):
    return getattr(elem, "_line", None), getattr(elem, "_col", None)


class _Element(ET.Element):
    _line: int | None = None
    _col: int | None = None


def _parse_xml(text: str) -> ET.Element:
    parser = xml.parsers.expat.ParserCreate()
    stack: list[ET.Element] = []
    roots: list[ET.Element] = []

    def start(tag, attrs):
        elem = _Element(tag, attrs)
        elem._line = parser.CurrentLineNumber
        elem._col = parser.CurrentColumnNumber + 1
        if stack:
            stack[-1].append(elem)
        else:
            roots.append(elem)
        stack.append(elem)

    def end(tag):
        stack.pop()

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    try:
        parser.Parse(text, True)
    except xml.parsers.expat.ExpatError as exc:
        raise ModelSyntaxError(
            f"malformed model file: {xml.parsers.expat.ErrorString(exc.code)}", exc.lineno, exc.offset + 1
        ) from None
    return roots[0]


def parse_model(text: str) -> RigidBodyModel:
    root = _parse_xml(text)
    if root.tag != "robot":
        raise ModelSyntaxError("root element must be <robot>", *_pos(root))
    links = []
    for elem in root.findall("link"):
        name = elem.get("name")
        if not name:
            raise ModelSyntaxError("<link> without name", *_pos(elem))
        links.append(LinkSpec(name))
    index = {link.name: i for i, link in enumerate(links)}

    def link_ref(name: str | None, elem: ET.Element) -> int:
        if name is None:
            raise ModelSyntaxError(f"<{elem.tag}> missing link attribute", *_pos(elem))
        if name not in index:
            raise UnknownLinkError(f"unknown link {name!r} (line {_pos(elem)[0]})")
        return index[name]

    joints = []
    for elem in root.findall("joint"):
        name = elem.get("name")
        if not name:
            raise ModelSyntaxError("<joint> without name", *_pos(elem))
        kind = elem.get("type", "revolute")
        if kind != "revolute":
            raise ModelSyntaxError(f"joint {name!r}: only revolute joints are supported", *_pos(elem))
        parent_el, child_el = elem.find("parent"), elem.find("child")
        if parent_el is None or child_el is None:
            raise ModelSyntaxError(f"joint {name!r} needs <parent> and <child>", *_pos(elem))
        origin_el = elem.find("origin")
        xyz, rpy = np.zeros(3), np.zeros(3)
        if origin_el is not None:
            xyz = _floats(origin_el.get("xyz", "0 0 0"), 3, "xyz", origin_el)
            rpy = _floats(origin_el.get("rpy", "0 0 0"), 3, "rpy", origin_el)
        axis_el = elem.find("axis")
        if axis_el is None:
            raise ModelSyntaxError(f"joint {name!r} needs <axis>", *_pos(elem))
        axis = _floats(axis_el.get("xyz"), 3, "axis xyz", axis_el)
        limit_el = elem.find("limit")
        if limit_el is None:
            raise ModelSyntaxError(f"joint {name!r} needs <limit>", *_pos(elem))
        lower = _floats(limit_el.get("lower"), 1, "lower limit", limit_el)[0]
        upper = _floats(limit_el.get("upper"), 1, "upper limit", limit_el)[0]
        joints.append(
            JointSpec(
                name=name,
                parent=link_ref(parent_el.get("link"), parent_el),
                child=link_ref(child_el.get("link"), child_el),
                origin_xyz=xyz,
                origin_rpy=rpy,
                axis=axis,
                lower=float(lower),
                upper=float(upper),
            )
        )
    jindex = {j.name: i for i, j in enumerate(joints)}

    side = root.find("kinpred")
    if side is None:
        raise PartitionError("missing <kinpred> section (base, instrumented links, partition)")
    base = link_ref(side.get("base"), side)
    inst_el = side.find("instrumented")
    instrumented = []
    if inst_el is not None:
        instrumented = [link_ref(tok, inst_el) for tok in inst_el.get("links", "").split()]

    def joint_set(tag: str) -> tuple[int, ...]:
        el = side.find(tag)
        if el is None:
            raise PartitionError(f"missing <{tag}> joint set")
        out = []
        for tok in el.get("joints", "").split():
            if tok not in jindex:
                raise PartitionError(f"<{tag}> names unknown joint {tok!r}")
            out.append(jindex[tok])
        return tuple(out)

    return RigidBodyModel(
        name=root.get("name", "robot"),
        links=tuple(links),
        joints=tuple(joints),
        base_link_index=base,
        instrumented_links=tuple(instrumented),
        upper_joints=joint_set("upper"),
        lower_joints=joint_set("lower"),
    )


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.atleast_1d(values))


def serialize_model(model: RigidBodyModel) -> str:
    names = [link.name for link in model.links]
    lines = ['<?xml version="1.0"?>', f'<robot name="{model.name}">']
    for link in model.links:
        lines.append(f'  <link name="{link.name}"/>')
    for j in model.joints:
        lines += [
            f'  <joint name="{j.name}" type="{j.kind}">',
            f'    <parent link="{names[j.parent]}"/>',
            f'    <child link="{names[j.child]}"/>',
            f'    <origin xyz="{_fmt(j.origin_xyz)}" rpy="{_fmt(j.origin_rpy)}"/>',
            f'    <axis xyz="{_fmt(j.axis)}"/>',
            f'    <limit lower="{_fmt(j.lower)}" upper="{_fmt(j.upper)}"/>',
            "  </joint>",
        ]
    jn = [j.name for j in model.joints]
    lines += [
        f'  <kinpred base="{names[model.base_link_index]}">',
        f'    <instrumented links="{" ".join(names[i] for i in model.instrumented_links)}"/>',
        f'    <upper joints="{" ".join(jn[i] for i in model.upper_joints)}"/>',
        f'    <lower joints="{" ".join(jn[i] for i in model.lower_joints)}"/>',
        "  </kinpred>",
        "</robot>",
    ]
    return "\n".join(lines) + "\n"


def load_model(path) -> RigidBodyModel:
    with open(path, encoding="utf-8") as fh:
        return parse_model(fh.read())


def reference_model_text() -> str:
    return resources.files("kinpred").joinpath("data/humanoid20.urdf").read_text(encoding="utf-8")


def reference_model() -> RigidBodyModel:
    """The bundled 20-DoF humanoid."""
    return parse_model(reference_model_text())


def clamp_to_limits(model: RigidBodyModel, s: np.ndarray) -> np.ndarray:
    return np.clip(s, model.lower_limits, model.upper_limits)


def neutral_configuration(model: RigidBodyModel) -> Configuration:
    return Configuration(
        base_position=np.zeros(3),
        base_rotation=np.eye(3),
        joint_positions=clamp_to_limits(model, np.zeros(model.n)),
    )


def zero_velocity(model: RigidBodyModel) -> SystemVelocity:
    return SystemVelocity(np.zeros(3), np.zeros(3), np.zeros(model.n))


def models_equal(a: RigidBodyModel, b: RigidBodyModel) -> bool:
    return serialize_model(a) == serialize_model(b)


def joint_indices(model: RigidBodyModel, names: Sequence[str]) -> list[int]:
    return [model.joint_index(n) for n in names]

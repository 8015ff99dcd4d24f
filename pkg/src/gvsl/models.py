"""Backbone U-Net, Z-Matching heads and restoration head as graph builders.

Weights are plain ``{name: ndarray}`` maps. Builders take a :class:`Params`
view that turns names into graph parameter nodes, so the same name used
twice (e.g. both members of an image pair) shares one node and the two
branches' gradients add up automatically.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry
from .autodiff import ops
from .autodiff.graph import Graph
from .autodiff.graph import ShapeError

NAMESPACES = ("backbone", "zmatch.affine", "zmatch.deform", "restore")
AFFINE_PARTS = (("rotation", 3), ("translation", 3), ("scaling", 3), ("shearing", 6))


@dataclass(frozen=True)
class BackboneArch:
    levels: int = 2
    base_channels: int = 8
    groups: int = 4
    in_channels: int = 1
    slope: float = 0.01

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        for d in range(self.levels + 1):
            if self.channels(d) % self.groups:
                raise ValueError(f"{self.channels(d)} channels at depth {d} not divisible by {self.groups} groups")

    def channels(self, depth):
        return self.base_channels * 2 ** max(depth - 1, 0)

    @property
    def global_channels(self):
        return self.channels(self.levels)

    @property
    def local_channels(self):
        return self.base_channels

    def check_extent(self, extents):
        k = 2 ** self.levels
        if any(e % k for e in extents):
            raise ShapeError(f"spatial extents {tuple(extents)} must be divisible by {k}")

    def to_dict(self):
        return asdict(self)


@dataclass
class ModelWeights:
    arch: BackboneArch
    params: dict = field(default_factory=dict)

    def namespace(self, ns):
        return {k: v for k, v in self.params.items() if k.startswith(ns + "/")}

    def shapes(self):
        return {k: v.shape for k, v in self.params.items()}

    def copy(self):
        return ModelWeights(self.arch, {k: v.copy() for k, v in self.params.items()})


def namespace_of(name):
    ns = name.split("/", 1)[0]
    if ns not in NAMESPACES:
        raise KeyError(f"parameter {name!r} is outside the known namespaces {NAMESPACES}")
    return ns


class Params:
    """Lazily created parameter nodes for one graph."""

    def __init__(self, graph):
        self.graph = graph
        self.nodes = {}

    def __call__(self, name):
        if name not in self.nodes:
            self.nodes[name] = self.graph.param(name)
        return self.nodes[name]


# -- parameter specs -------------------------------------------------------------

def _conv_group_spec(prefix, cin, cout):
    return {
        f"{prefix}/w": ("conv", (cout, cin, 3, 3, 3)),
        f"{prefix}/b": ("zero", (cout,)),
        f"{prefix}/gn_g": ("one", (cout,)),
        f"{prefix}/gn_b": ("zero", (cout,)),
    }


def param_specs(arch):
    """Name -> (init kind, shape) for every trainable tensor."""
    spec = {}
    c = arch.channels
    spec.update(_conv_group_spec("backbone/enc0/0", arch.in_channels, c(0)))
    spec.update(_conv_group_spec("backbone/enc0/1", c(0), c(0)))
    for d in range(1, arch.levels + 1):
        spec.update(_conv_group_spec(f"backbone/enc{d}/0", c(d - 1), c(d)))
        spec.update(_conv_group_spec(f"backbone/enc{d}/1", c(d), c(d)))
    for d in range(arch.levels - 1, -1, -1):
        spec[f"backbone/dec{d}/up/w"] = ("up", (c(d + 1), c(d), 2, 2, 2))
        spec[f"backbone/dec{d}/up/b"] = ("zero", (c(d),))
        spec.update(_conv_group_spec(f"backbone/dec{d}/0", 2 * c(d), c(d)))
    feat = 2 * arch.global_channels
    for part, n in AFFINE_PARTS:
        spec[f"zmatch.affine/{part}/w"] = ("final", (n, feat))
        spec[f"zmatch.affine/{part}/b"] = ("zero", (n,))
    loc = arch.local_channels
    spec.update(_conv_group_spec("zmatch.deform/0", 2 * loc, loc))
    spec.update(_conv_group_spec("zmatch.deform/1", loc, loc))
    spec["zmatch.deform/out/w"] = ("final", (3, loc, 3, 3, 3))
    spec["zmatch.deform/out/b"] = ("zero", (3,))
    spec.update(_conv_group_spec("restore/0", loc, loc))
    spec["restore/out/w"] = ("conv", (1, loc, 3, 3, 3))
    spec["restore/out/b"] = ("zero", (1,))
    return spec


def init_weights(seed, arch=BackboneArch()):
    """Kaiming fan-in normal weights, zero biases, zero final head layers."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (kind, shape) in sorted(param_specs(arch).items()):
        if kind == "zero" or kind == "final":
            params[name] = np.zeros(shape)
        elif kind == "one":
            params[name] = np.ones(shape)
        elif kind == "conv":
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif kind == "up":
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])
        else:
            raise AssertionError(kind)
    return ModelWeights(arch, params)


# -- builders --------------------------------------------------------------------

def conv_group(P, prefix, x, groups, stride=1, slope=0.01):
    """3x3x3 conv, group norm, leaky ReLU."""
    y = ops.conv3d(x, P(f"{prefix}/w"), P(f"{prefix}/b"), stride=stride)
    y = ops.group_norm(y, P(f"{prefix}/gn_g"), P(f"{prefix}/gn_b"), groups)
    return ops.leaky_relu(y, slope)


def backbone_forward(P, x, arch):
    """Return (global features at the bottleneck, local features at full resolution)."""
    g, s = arch.groups, arch.slope
    h = conv_group(P, "backbone/enc0/0", x, g, slope=s)
    h = conv_group(P, "backbone/enc0/1", h, g, slope=s)
    skips = [h]
    for d in range(1, arch.levels + 1):
        h = conv_group(P, f"backbone/enc{d}/0", h, g, stride=2, slope=s)
        h = conv_group(P, f"backbone/enc{d}/1", h, g, slope=s)
        skips.append(h)
    f_g = h
    for d in range(arch.levels - 1, -1, -1):
        up = ops.conv_transpose3d(h, P(f"backbone/dec{d}/up/w"), P(f"backbone/dec{d}/up/b"))
        h = ops.concat([up, skips[d]], axis=1)
        h = conv_group(P, f"backbone/dec{d}/0", h, g, slope=s)
    return f_g, h


def affine_head_forward(P, f_g_a, f_g_b):
    """Pooled global features of the pair -> [N, 15] affine parameters.

    Scaling is emitted as 1 + raw, so zero output layers mean identity.
    """
    pooled = ops.global_average_pool(ops.concat([f_g_a, f_g_b], axis=1))
    parts = []
    for part, _ in AFFINE_PARTS:
        out = ops.linear(pooled, P(f"zmatch.affine/{part}/w"), P(f"zmatch.affine/{part}/b"))
        if part == "scaling":
            out = ops.add_scalar(out, 1.0)
        parts.append(out)
    return ops.concat(parts, axis=1)


def deformable_head_forward(P, f_l_a_aligned, f_l_b, arch):
    h = ops.concat([f_l_a_aligned, f_l_b], axis=1)
    h = conv_group(P, "zmatch.deform/0", h, arch.groups, slope=arch.slope)
    h = conv_group(P, "zmatch.deform/1", h, arch.groups, slope=arch.slope)
    return ops.conv3d(h, P("zmatch.deform/out/w"), P("zmatch.deform/out/b"))


def restoration_head_forward(P, f_l, arch):
    h = conv_group(P, "restore/0", f_l, arch.groups, slope=arch.slope)
    return ops.sigmoid(ops.conv3d(h, P("restore/out/w"), P("restore/out/b")))


@dataclass
class MatchOutputs:
    affine_params: object
    affine_field: object
    deform: object
    dvf: object


def zmatch_forward(P, f_g_a, f_l_a, f_g_b, f_l_b, extents, arch):
    """Affine head, alignment of A's local features, deformable head, fusion."""
    params = affine_head_forward(P, f_g_a, f_g_b)
    mats = geometry.affine_matrix_node(params)
    aff = geometry.affine_field_node(mats, extents)
    aligned = geometry.warp_node(f_l_a, aff)
    deform = deformable_head_forward(P, aligned, f_l_b, arch)
    dvf = geometry.compose_dvf_node(aff, deform)
    return MatchOutputs(params, aff, deform, dvf)


def local_features(weights: ModelWeights, volumes, dtype=np.float64):
    """Final-layer backbone features [N, C, Z, Y, X] for volumes [N, Z, Y, X], one at a time."""
    vols = np.asarray(volumes, dtype=np.float64)
    if vols.ndim == 3:
        vols = vols[None]
    arch = weights.arch
    arch.check_extent(vols.shape[1:])
    g = Graph(dtype=dtype)
    P = Params(g)
    x = g.input("x")
    _, f_l = backbone_forward(P, x, arch)
    g.output("f_l", f_l)
    used = {n: weights.params[n] for n in g.leaves("param")}
    return np.concatenate([g.evaluate({"x": v[None, None], **used})["f_l"] for v in vols])

"""Segmentation-assisted projector: fusion variants, budgets, freezing, checkpoints.

Shapes used throughout (batch axis ``b`` first):

========  =====================================================
``F_I``   vision tokens ``[b, T_v, D]``
``R``     specialist-model feature vector ``[b, d_R]``
``S``     binary segmentation stack ``[b, n_cls, H, W]``
``C``     learnable class embedding ``[T_c, d]``
``R_I``   mixed auxiliary tokens ``[b, T_c, D]``
``S_I``   segmentation tokens ``[b, T_c, D]``
========  =====================================================

The original projector ``P`` is a two-layer GELU perceptron applied per
token. ``g`` is the fusion function selected by :class:`FusionVariant`.
"""

import enum
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .tensor_core import autograd as ag
from .tensor_core import kernels as K
from .tensor_core.io import FormatError, pack_tensor, unpack_tensor
from .tensor_core.kernels import DimensionError

__all__ = [
    "ConfigError",
    "SequencingError",
    "Dims",
    "PRESETS",
    "preset",
    "Variant",
    "FusionVariant",
    "Stage",
    "ProjectorParams",
    "ParamBudget",
    "param_shapes",
    "init_params",
    "bind",
    "stack_features",
    "mix_base",
    "fuse_replace",
    "fuse_learned_mixing",
    "fuse_weighted_addition",
    "fuse_concat",
    "pool_segmaps",
    "fuse_segmap_tokens",
    "fuse",
    "project_tokens",
    "projector_forward",
    "count_params",
    "freeze_mask",
    "save_checkpoint",
    "load_checkpoint",
]


class ConfigError(ValueError):
    """Inconsistent variant / dims / parameter configuration."""


class SequencingError(RuntimeError):
    """Training stages invoked out of order."""


@dataclass(frozen=True)
class Dims:
    T_v: int
    D: int
    T_c: int
    d: int
    d_R: int
    n_cls: int
    g: int
    D_llm: int
    d_s: int | None = None

    def __post_init__(self):
        if self.d_s is None:
            object.__setattr__(self, "d_s", self.d)
        for k, v in asdict(self).items():
            if not (isinstance(v, int) and v > 0):
                raise ConfigError(f"dimension {k} must be a positive integer, got {v!r}")


# d_R is not reported for the specialist encoder; 4096 for the paper-scale preset
PRESETS = {
    "desk": Dims(T_v=36, D=64, T_c=16, d=32, d_R=48, n_cls=212, g=8, D_llm=64),
    "paper": Dims(T_v=576, D=1024, T_c=256, d=512, d_R=4096, n_cls=212, g=8, D_llm=4096),
}


def preset(name, **overrides):
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides) if overrides else base


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    REPLACE = "replace"
    LEARNED_MIXING = "learned_mixing"
    WEIGHTED_ADDITION = "weighted_addition"
    CONCATENATION = "concatenation"


@dataclass(frozen=True)
class FusionVariant:
    kind: Variant = Variant.CONCATENATION
    alpha_init: float = 0.0
    use_segmaps: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Variant(self.kind))
        if self.use_segmaps and self.kind is not Variant.CONCATENATION:
            raise ConfigError(f"segmentation maps are only fused by concatenation, not {self.kind.value}")

    def to_dict(self):
        return {"kind": self.kind.value, "alpha_init": self.alpha_init, "use_segmaps": self.use_segmaps}


class Stage(str, enum.Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"


# component -> branch; "original" is P, everything else counts as added
_BRANCH = {
    "class_embedding": "features",
    "feature_embed": "features",
    "replace_conv": "features",
    "token_adapter": "features",
    "mix1": "features",
    "mix2": "features",
    "alpha": "features",
    "seg_conv": "segmaps",
    "seg_spatial": "segmaps",
    "seg_mix": "segmaps",
    "projector": "original",
}

REPLACE_KERNEL = 3


def param_shapes(dims, variant):
    """``{name: (component, shape)}`` for every tensor of the configuration."""
    v = FusionVariant(**variant.to_dict()) if isinstance(variant, FusionVariant) else variant
    k = v.kind
    s = {}
    if k is not Variant.BASELINE:
        s["C"] = ("class_embedding", (dims.T_c, dims.d))
        s["feat_w"] = ("feature_embed", (dims.d_R, dims.d))
        s["feat_b"] = ("feature_embed", (dims.d,))
    if k is Variant.REPLACE:
        s["rep_k"] = ("replace_conv", (dims.D, dims.d, REPLACE_KERNEL))
        s["rep_b"] = ("replace_conv", (dims.D,))
    if k in (Variant.LEARNED_MIXING, Variant.WEIGHTED_ADDITION, Variant.CONCATENATION):
        s["mix1_w"] = ("mix1", (2 * dims.d, dims.D))
        s["mix1_b"] = ("mix1", (dims.D,))
    if k is Variant.LEARNED_MIXING:
        s["mix2_w"] = ("mix2", (dims.D, dims.D))
        s["mix2_b"] = ("mix2", (dims.D,))
    if k is Variant.WEIGHTED_ADDITION:
        s["alpha"] = ("alpha", ())
    if k in (Variant.REPLACE, Variant.WEIGHTED_ADDITION):
        s["adapt_w"] = ("token_adapter", (dims.T_c, dims.T_v))
    if v.use_segmaps:
        s["seg_k"] = ("seg_conv", (dims.T_c, dims.n_cls, 1))
        s["seg_kb"] = ("seg_conv", (dims.T_c,))
        s["seg_w"] = ("seg_spatial", (dims.g * dims.g, dims.d_s))
        s["seg_b"] = ("seg_spatial", (dims.d_s,))
        s["segmix_w"] = ("seg_mix", (dims.D + dims.d_s, dims.D))
        s["segmix_b"] = ("seg_mix", (dims.D,))
    s["p1_w"] = ("projector", (dims.D, dims.D_llm))
    s["p1_b"] = ("projector", (dims.D_llm,))
    s["p2_w"] = ("projector", (dims.D_llm, dims.D_llm))
    s["p2_b"] = ("projector", (dims.D_llm,))
    return s


def _fan_in(name, shape):
    if not shape or name.endswith("_b") or name.endswith("_kb"):
        return None
    if len(shape) == 3:
        return shape[1] * shape[2]
    return shape[0]


def _init_tensor(rng, name, shape, bias_fan, variant):
    if name == "C":
        return rng.normal(0.0, 0.02, size=shape)
    if name == "alpha":
        return np.array(float(variant.alpha_init))
    fan = _fan_in(name, shape) or bias_fan
    bound = 1.0 / math.sqrt(fan)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ProjectorParams:
    dims: Dims
    variant: FusionVariant
    tensors: dict
    trainable: dict = field(default_factory=dict)
    stage1_complete: bool = False

    def __post_init__(self):
        shapes = param_shapes(self.dims, self.variant)
        if set(shapes) != set(self.tensors):
            missing = sorted(set(shapes) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(shapes))
            raise ConfigError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, (_, shape) in shapes.items():
            if np.shape(self.tensors[name]) != shape:
                raise ConfigError(f"{name}: shape {np.shape(self.tensors[name])}, expected {shape}")
        for name in self.tensors:
            self.trainable.setdefault(name, True)

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def alpha(self):
        return float(self.tensors["alpha"])

    def component_of(self, name):
        return param_shapes(self.dims, self.variant)[name][0]

    def names_in_branch(self, branch):
        return [n for n, (c, _) in param_shapes(self.dims, self.variant).items() if _BRANCH[c] == branch]

    def copy(self):
        return ProjectorParams(
            self.dims,
            self.variant,
            {k: v.copy() for k, v in self.tensors.items()},
            dict(self.trainable),
            self.stage1_complete,
        )

    def with_segmaps(self, seed):
        """Attach a freshly initialised segmentation branch (Concatenation only)."""
        variant = FusionVariant(self.variant.kind, self.variant.alpha_init, use_segmaps=True)
        shapes = param_shapes(self.dims, variant)
        rng = np.random.default_rng(seed)
        tensors = {k: v.copy() for k, v in self.tensors.items()}
        for name, (comp, shape) in shapes.items():
            if name not in tensors:
                tensors[name] = _init_tensor(rng, name, shape, _bias_fan(shapes, comp), variant)
        trainable = dict(self.trainable)
        return ProjectorParams(self.dims, variant, tensors, trainable, self.stage1_complete)


def _bias_fan(shapes, component):
    for name, (comp, shape) in shapes.items():
        if comp == component and _fan_in(name, shape):
            return _fan_in(name, shape)
    return 1


def init_params(dims, variant, seed=0):
    """Seeded uniform(+-1/sqrt(fan_in)) weights, N(0, 0.02) class embedding."""
    shapes = param_shapes(dims, variant)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, (comp, shape) in shapes.items():
        tensors[name] = _init_tensor(rng, name, shape, _bias_fan(shapes, comp), variant)
    return ProjectorParams(dims, variant, tensors)


def bind(params, tape=None, prefix=""):
    """Put parameters on a tape; returns ``(tape, {name: Node})``."""
    tape = ag.Tape() if tape is None else tape
    nodes = {
        k: tape.param(v, prefix + k, trainable=params.trainable.get(k, True))
        for k, v in params.tensors.items()
    }
    return tape, nodes


def _node(tape, x):
    return x if isinstance(x, ag.Node) else tape.const(x)


def _tape(p):
    return next(iter(p.values())).tape


def stack_features(R, p):
    """Embed ``R[b, d_R]`` linearly and repeat it ``T_c`` times: ``[b, T_c, d]``."""
    tape = _tape(p)
    R = _node(tape, R)
    d_R = p["feat_w"].value.shape[0]
    if R.value.ndim != 2 or R.value.shape[1] != d_R:
        raise DimensionError(f"features R{tuple(R.value.shape)} do not match d_R={d_R}")
    return ag.repeat_tokens(ag.linear(R, p["feat_w"], p["feat_b"]), p["C"].value.shape[0])


def _batched_class_embedding(C, like):
    b = like.value.shape[0]
    return ag.broadcast_to(C, (b,) + C.value.shape)


def mix_base(C, R_stack, p):
    """Concatenate along the embedding axis, then one linear layer to width D."""
    if C.value.shape != R_stack.value.shape[-2:]:
        raise DimensionError(f"class embedding {C.value.shape} vs stacked features {R_stack.value.shape}")
    Cb = _batched_class_embedding(C, R_stack)
    return ag.linear(ag.concat([Cb, R_stack], axis=-1), p["mix1_w"], p["mix1_b"])


def _adapt_tokens(x, p):
    # [b, T_c, D] -> [b, T_v, D] with a bias-free token-axis linear map
    return ag.swapaxes(ag.matmul(ag.swapaxes(x, 1, 2), p["adapt_w"]), 1, 2)


def fuse_replace(C, R_stack, p):
    """AdaIN of class embedding onto stacked features, Conv1D lift d -> D, tokens T_c -> T_v."""
    Cb = _batched_class_embedding(C, R_stack)
    mixed = ag.adain(Cb, R_stack)
    lifted = ag.conv1d(ag.swapaxes(mixed, 1, 2), p["rep_k"], p["rep_b"], stride=1, pad=REPLACE_KERNEL // 2)
    return _adapt_tokens(ag.swapaxes(lifted, 1, 2), p)


def _check_width(F_I, R_I):
    if F_I.value.shape[-1] != R_I.value.shape[-1]:
        raise DimensionError(f"embedding widths differ: F_I{F_I.value.shape} vs R_I{R_I.value.shape}")


def fuse_learned_mixing(F_I, R_I, p):
    tape = _tape(p)
    F_I = _node(tape, F_I)
    _check_width(F_I, R_I)
    return ag.linear(ag.concat([F_I, R_I], axis=1), p["mix2_w"], p["mix2_b"])


def fuse_weighted_addition(F_I, R_I, p):
    tape = _tape(p)
    F_I = _node(tape, F_I)
    _check_width(F_I, R_I)
    return ag.weighted_add(F_I, p["alpha"], _adapt_tokens(R_I, p))


def fuse_concat(F_I, *extra):
    """Token-axis concatenation; the vision tokens come first, untouched."""
    tape = ag._tape_of(F_I, *extra)
    F_I = _node(tape, F_I)
    for x in extra:
        _check_width(F_I, _node(tape, x))
    return ag.concat([F_I, *extra], axis=1)


def pool_segmaps(S, p):
    """``S[b, n_cls, H, W]`` -> ``S_loc[b, T_c, d_s]``.

    Adaptive average pool each map to ``g x g``, mix classes into ``T_c``
    channels with a width-1 convolution, then a linear map over the
    flattened grid.
    """
    tape = _tape(p)
    n_cls = p["seg_k"].value.shape[1]
    g2 = p["seg_w"].value.shape[0]
    g = math.isqrt(g2)
    shape = S.value.shape if isinstance(S, ag.Node) else np.shape(S)
    if len(shape) != 4 or shape[1] != n_cls:
        raise ConfigError(f"segmentation stack {shape} does not have n_cls={n_cls} classes")
    b, _, H, W = shape
    if H < g or W < g:
        raise DimensionError(f"maps {H}x{W} smaller than pooling grid {g}x{g}")
    if isinstance(S, ag.Node):
        pooled = ag.adaptive_avg_pool2d(S, g)
    else:
        # constant maps (the usual case): pool before entering the graph
        pooled = tape.const(K.adaptive_avg_pool2d(S, g))
    pooled = ag.reshape(pooled, (b, n_cls, g2))
    mixed = ag.conv1d(pooled, p["seg_k"], p["seg_kb"])
    return ag.linear(mixed, p["seg_w"], p["seg_b"])


def fuse_segmap_tokens(R_I, S_loc, p):
    if R_I.value.shape[:2] != S_loc.value.shape[:2]:
        raise DimensionError(f"token counts differ: R_I{R_I.value.shape} vs S_loc{S_loc.value.shape}")
    return ag.linear(ag.concat([R_I, S_loc], axis=-1), p["segmix_w"], p["segmix_b"])


def fuse(variant, p, F_I, R=None, S=None):
    """The fusion function ``g``: fused tokens before the original projector."""
    tape = _tape(p)
    F_I = _node(tape, F_I)
    kind = variant.kind
    if variant.use_segmaps and kind is not Variant.CONCATENATION:
        raise ConfigError("segmentation maps require the concatenation variant")
    if (S is not None) != variant.use_segmaps:
        raise ConfigError("segmentation stack must be given exactly when use_segmaps is set")
    if kind is Variant.BASELINE:
        return F_I
    if R is None:
        raise ConfigError(f"variant {kind.value} needs features R")
    R_stack = stack_features(R, p)
    if kind is Variant.REPLACE:
        return fuse_replace(p["C"], R_stack, p)
    R_I = mix_base(p["C"], R_stack, p)
    if kind is Variant.LEARNED_MIXING:
        return fuse_learned_mixing(F_I, R_I, p)
    if kind is Variant.WEIGHTED_ADDITION:
        return fuse_weighted_addition(F_I, R_I, p)
    if variant.use_segmaps:
        S_I = fuse_segmap_tokens(R_I, pool_segmaps(S, p), p)
        return fuse_concat(F_I, R_I, S_I)
    return fuse_concat(F_I, R_I)


def project_tokens(x, p):
    """The original projector ``P``: per-token Linear -> GELU -> Linear."""
    return ag.linear(ag.gelu(ag.linear(x, p["p1_w"], p["p1_b"])), p["p2_w"], p["p2_b"])


def projector_forward(params, F_I, R=None, S=None, p=None):
    """``P(g(F_I, R, S))`` -> ``[b, T_out, D_llm]``.

    With ``p`` (bound nodes) the result is a tape node; otherwise a plain
    array is returned.
    """
    as_array = p is None
    if as_array:
        _, p = bind(params)
    out = project_tokens(fuse(params.variant, p, F_I, R, S), p)
    return out.value if as_array else out


@dataclass
class ParamBudget:
    components: dict
    feature_branch: int
    segmap_branch: int
    original: int
    backbone_size: float

    @property
    def added(self):
        return self.feature_branch + self.segmap_branch

    @property
    def added_fraction(self):
        return self.added / self.backbone_size

    @property
    def segmap_to_feature_ratio(self):
        return self.segmap_branch / self.feature_branch if self.feature_branch else float("nan")


def count_params(variant, dims, backbone_size=7.06e9):
    comps = {}
    for _, (comp, shape) in param_shapes(dims, variant).items():
        comps[comp] = comps.get(comp, 0) + int(np.prod(shape, dtype=np.int64))
    by_branch = {"features": 0, "segmaps": 0, "original": 0}
    for comp, n in comps.items():
        by_branch[_BRANCH[comp]] += n
    return ParamBudget(comps, by_branch["features"], by_branch["segmaps"], by_branch["original"], backbone_size)


def freeze_mask(stage, params, decoder_names=()):
    """Assign trainable flags for a training stage.

    Stage 1 trains everything. Stage 2 trains the projector only (every
    projector tensor, including a freshly attached segmentation branch)
    and freezes the decoder. Returns ``{name: bool}`` covering projector
    tensors and ``decoder_names``; projector flags are also stored on
    ``params``.
    """
    stage = Stage(stage)
    if stage is Stage.STAGE2:
        if not params.stage1_complete:
            raise SequencingError("stage 2 requires a completed stage-1 checkpoint")
        flags = {n: True for n in params.tensors}
        flags.update({n: False for n in decoder_names})
    else:
        flags = {n: True for n in params.tensors}
        flags.update({n: True for n in decoder_names})
    for n in params.tensors:
        params.trainable[n] = flags[n]
    return flags


CKPT_MAGIC = b"ASRG"
CKPT_VERSION = 1


def save_checkpoint(path_or_file, params, extra=None):
    """Write dims, variant and all named tensors (float64, bit-exact).

    ``extra`` holds additional named tensors (e.g. decoder weights) stored
    alongside the projector.
    """
    extra = extra or {}
    header = json.dumps(
        {
            "dims": asdict(params.dims),
            "variant": params.variant.to_dict(),
            "stage1_complete": params.stage1_complete,
            "trainable": params.trainable,
            "projector": list(params.tensors),
        },
        sort_keys=True,
    ).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header)
    named = list(params.tensors.items()) + list(extra.items())
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named:
        enc = name.encode()
        buf.write(struct.pack("<I", len(enc)) + enc + pack_tensor(arr, version=2))
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)


def load_checkpoint(path_or_bytes):
    """Returns ``(ProjectorParams, extra_tensors)``."""
    if isinstance(path_or_bytes, (bytes, bytearray, memoryview)):
        data = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as fh:
            data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(data) < 12:
        raise FormatError("truncated checkpoint header", len(data))
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 12
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode()
        pos += nlen
        tensors[name], pos = unpack_tensor(data, pos)
    proj_names = header["projector"]
    params = ProjectorParams(
        Dims(**header["dims"]),
        FusionVariant(**header["variant"]),
        {n: tensors.pop(n) for n in proj_names},
        dict(header["trainable"]),
        header["stage1_complete"],
    )
    return params, tensors

"""Communication compressors with exact bit accounting.

Supported kinds:

* ``identity``   - full precision, 32 bits per coordinate.
* ``topk``       - per group keep the ``max(1, floor(k * d_i))`` largest
  magnitudes (ties go to the lower index).
* ``sign``       - grouped Sign: per group ``(|x_g|_1 / d_g) * sign(x_g)``.
* ``heavysign``  - TopK followed by grouped Sign on the survivors; the scale
  is still divided by the full group size.
* ``stoc``       - the unbiased ``b``-bit stochastic quantizer used by the
  Stoc baseline (QSGD family, ``2**(b-1)`` levels).

The deterministic kinds are q-deviate: ``|C(x) - x|^2 <= q^2 |x|^2`` with
``q^2`` returned by :func:`deviation_bound`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericInputError, StructuralError, UndefinedRatioError
from .param_space import GroupLayout, ParamVector, sq_norm

FLOAT_BITS = 32

KINDS = ("identity", "topk", "sign", "heavysign", "stoc")
_ALIASES = {"none": "identity", "full": "identity", "qsgd": "stoc", "heavy-sign": "heavysign",
            "heavy_sign": "heavysign", "groupedsign": "sign"}


@dataclass(frozen=True)
class CompressorSpec:
    kind: str
    k: float | None = None
    b: int | None = None

    def __post_init__(self):
        kind = _ALIASES.get(self.kind.lower(), self.kind.lower())
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown compressor kind {self.kind!r}")
        if kind in ("topk", "heavysign"):
            if self.k is None or not (0.0 < float(self.k) <= 1.0):
                raise ValueError(f"{kind} needs 0 < k <= 1, got {self.k}")
            object.__setattr__(self, "k", float(self.k))
        if kind == "stoc":
            if self.b is None or int(self.b) != self.b or int(self.b) < 1:
                raise ValueError(f"stoc needs an integer b >= 1, got {self.b}")
            object.__setattr__(self, "b", int(self.b))

    @classmethod
    def identity(cls) -> "CompressorSpec":
        return cls("identity")

    @classmethod
    def topk(cls, k: float) -> "CompressorSpec":
        return cls("topk", k=k)

    @classmethod
    def sign(cls) -> "CompressorSpec":
        return cls("sign")

    @classmethod
    def heavysign(cls, k: float) -> "CompressorSpec":
        return cls("heavysign", k=k)

    @classmethod
    def stoc(cls, b: int) -> "CompressorSpec":
        return cls("stoc", b=b)

    @classmethod
    def parse(cls, text: str) -> "CompressorSpec":
        """Parse ``identity``, ``sign``, ``topk:0.1``, ``heavysign:0.05``, ``stoc:2``."""
        name, _, arg = text.strip().partition(":")
        name = _ALIASES.get(name.lower(), name.lower())
        if name in ("topk", "heavysign"):
            if not arg:
                raise ValueError(f"{name} requires a rate, e.g. {name}:0.1")
            return cls(name, k=float(arg))
        if name == "stoc":
            if not arg:
                raise ValueError("stoc requires a bit count, e.g. stoc:2")
            return cls(name, b=int(arg))
        if arg:
            raise ValueError(f"{name} takes no parameter")
        return cls(name)

    def __str__(self) -> str:
        if self.kind in ("topk", "heavysign"):
            return f"{self.kind}:{self.k:g}"
        if self.kind == "stoc":
            return f"stoc:{self.b}"
        return self.kind

    @property
    def is_deterministic(self) -> bool:
        return self.kind != "stoc"


def _index_bits(d: int) -> int:
    # ceil(log2 d); a one-coordinate model needs no index field
    return (d - 1).bit_length()


def topk_count(k: float, group_size: int) -> int:
    # the epsilon guards products such as 0.29 * 100 = 28.999999999999996
    return max(1, math.floor(k * group_size + 1e-9))


# --------------------------------------------------------------------------
# Encodings
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dense:
    layout: GroupLayout
    values: np.ndarray

    @property
    def bit_cost(self) -> int:
        return FLOAT_BITS * self.layout.d

    def dense_values(self) -> np.ndarray:
        return self.values

    def materialize(self) -> ParamVector:
        return ParamVector(self.layout, self.values)


@dataclass(frozen=True, eq=False)
class SparseValues:
    layout: GroupLayout
    indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def bit_cost(self) -> int:
        return (FLOAT_BITS + _index_bits(self.layout.d)) * self.nnz

    def materialize(self) -> ParamVector:
        idx = np.asarray(self.indices)
        if idx.shape != np.shape(self.values):
            raise StructuralError("indices and values differ in length")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.layout.d:
                raise StructuralError(f"index out of range for d={self.layout.d}")
            if idx.size > 1 and (idx[1:] <= idx[:-1]).any():
                raise StructuralError("sparse indices must be strictly increasing")
        return ParamVector(self.layout, self.dense_values())

    def dense_values(self) -> np.ndarray:
        out = np.zeros(self.layout.d)
        out[self.indices] = self.values
        return out


@dataclass(frozen=True, eq=False)
class GroupScaledSigns:
    """One float scale per group plus a ternary sign per coordinate.

    Only the nonzero signs are charged (one bit each); zeros are implied.
    """

    layout: GroupLayout
    scales: np.ndarray
    signs: np.ndarray  # int8 in {-1, 0, 1}

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.signs))

    @property
    def bit_cost(self) -> int:
        return FLOAT_BITS * self.layout.num_groups + self.support_size

    def materialize(self) -> ParamVector:
        if len(self.scales) != self.layout.num_groups or len(self.signs) != self.layout.d:
            raise StructuralError("scale/sign arrays do not match the layout")
        if (np.abs(self.signs) > 1).any():
            raise StructuralError("signs must be in {-1, 0, 1}")
        return ParamVector(self.layout, self.dense_values())

    def dense_values(self) -> np.ndarray:
        if self.layout.num_groups == 1:
            return float(self.scales[0]) * self.signs
        return np.repeat(np.asarray(self.scales, dtype=np.float64), self.layout.group_sizes) * self.signs


@dataclass(frozen=True, eq=False)
class QuantLevels:
    layout: GroupLayout
    norm: float
    levels: np.ndarray  # signed integer levels in [-s, s]
    b: int

    @property
    def num_levels(self) -> int:
        return 2 ** (self.b - 1)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.levels))

    @property
    def bit_cost(self) -> int:
        return FLOAT_BITS + (self.b + 1 + _index_bits(self.layout.d)) * self.nnz

    def materialize(self) -> ParamVector:
        if len(self.levels) != self.layout.d:
            raise StructuralError("level array does not match the layout")
        s = self.num_levels
        if np.any(np.abs(self.levels) > s):
            raise StructuralError(f"quantization level exceeds {s}")
        return ParamVector(self.layout, self.dense_values())

    def dense_values(self) -> np.ndarray:
        return self.norm * (self.levels / self.num_levels)


CompressedUpdate = Dense | SparseValues | GroupScaledSigns | QuantLevels


# --------------------------------------------------------------------------
# Compression
# --------------------------------------------------------------------------


def _topk_mask(v: np.ndarray, layout: GroupLayout, k: float) -> np.ndarray:
    mag = -np.abs(v)
    sizes = layout.group_sizes
    if len(set(sizes)) == 1:
        # equal groups: one row per group, sorted in a single call
        size = sizes[0]
        kk = topk_count(k, size)
        if kk >= size:
            return np.ones(v.size, dtype=bool)
        keep = mag.reshape(len(sizes), size).argsort(axis=1, kind="stable")[:, :kk]
        mask = np.zeros(v.size, dtype=bool)
        mask[(keep + np.arange(0, v.size, size)[:, None]).reshape(-1)] = True
        return mask
    mask = np.zeros(v.size, dtype=bool)
    for start, size in zip(layout.offsets, sizes):
        kk = topk_count(k, size)
        if kk >= size:
            mask[start:start + size] = True
            continue
        # stable sort on -|x| keeps the lower index first among equal magnitudes
        order = mag[start:start + size].argsort(kind="stable")[:kk]
        mask[start + order] = True
    return mask


def _signs_with_scales(v: np.ndarray, layout: GroupLayout) -> GroupScaledSigns:
    a = np.abs(v)
    scales = np.array([a[start:start + size].sum() / size
                       for start, size in zip(layout.offsets, layout.group_sizes)])
    return GroupScaledSigns(layout, scales, np.sign(v).astype(np.int8))


def _stoc_quantize(v: np.ndarray, layout: GroupLayout, b: int, rng: np.random.Generator) -> QuantLevels:
    s = 2 ** (b - 1)
    norm = float(np.sqrt(np.dot(v, v)))
    if norm == 0.0:
        return QuantLevels(layout, 0.0, np.zeros(v.size, dtype=np.int64), b)
    a = np.abs(v) / norm
    lower = np.minimum(np.floor(a * s), s - 1)
    p_up = a * s - lower
    u = rng.random(v.size)
    level = lower + (u < p_up)
    return QuantLevels(layout, norm, (np.sign(v) * level).astype(np.int64), b)


def compress(spec: CompressorSpec, x: ParamVector, rng: np.random.Generator | None = None) -> CompressedUpdate:
    """Encode ``x``. Only the ``stoc`` kind draws from ``rng``."""
    v = x.values
    if not np.isfinite(v).all():
        raise NumericInputError("cannot compress a non-finite vector")
    layout = x.layout
    kind = spec.kind
    if kind == "identity":
        return Dense(layout, v.copy())
    if kind == "topk":
        idx = np.flatnonzero(_topk_mask(v, layout, spec.k))
        return SparseValues(layout, idx, v[idx].copy())
    if kind == "sign":
        return _signs_with_scales(v, layout)
    if kind == "heavysign":
        kept = np.where(_topk_mask(v, layout, spec.k), v, 0.0)
        return _signs_with_scales(kept, layout)
    if kind == "stoc":
        if rng is None:
            raise ValueError("stoc compression needs a random generator")
        return _stoc_quantize(v, layout, spec.b, rng)
    raise ValueError(f"unknown compressor kind {kind!r}")


def materialize(c: CompressedUpdate) -> ParamVector:
    return c.materialize()


def bit_cost(c: CompressedUpdate) -> int:
    return c.bit_cost


def deviation_bound(spec: CompressorSpec, layout: GroupLayout) -> float | None:
    """Return the certified ``q_C^2``; ``None`` for the (unbiased) stoc kind.

    For TopK this is ``1 - k``. With the per-group ``max(1, floor(k d_i))``
    count a group can keep fewer than ``k d_i`` entries, so ``1 - k`` can be
    exceeded by adversarial inputs; :func:`topk_floor_bound` is the bound
    that accounts for rounding.
    """
    kind = spec.kind
    if kind == "identity":
        return 0.0
    if kind == "topk":
        return 1.0 - spec.k
    if kind == "sign":
        return 1.0 - min(1.0 / s for s in layout.group_sizes)
    if kind == "heavysign":
        return 1.0 - min(spec.k / s for s in layout.group_sizes)
    return None


def topk_floor_bound(k: float, layout: GroupLayout) -> float:
    """Worst-case TopK deviation once each group's count is rounded."""
    return 1.0 - min(topk_count(k, s) / s for s in layout.group_sizes)


def measure_deviation(spec: CompressorSpec, x: ParamVector, rng: np.random.Generator | None = None) -> float:
    """``|C(x) - x|^2 / |x|^2`` for one draw of the compressor."""
    denom = sq_norm(x)
    if denom == 0.0:
        raise UndefinedRatioError("deviation ratio undefined for the zero vector")
    # the encoding comes straight from compress, so the unchecked decode is safe
    diff = compress(spec, x, rng).dense_values() - x.values
    return float(np.dot(diff, diff)) / denom

"""Weight-space arithmetic: LoRA merging and instruction-residual transfer.

All arithmetic happens in float32 whatever the storage dtype, and tensors are
processed one at a time in storage order, so the streaming ``*_file``
variants never hold more than one tensor (plus its inputs) in memory.
"""
from __future__ import annotations

import logging
import math
import os
import re
import warnings
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .checkpoint import (
    AlignmentReport,
    CheckpointWriter,
    DType,
    NamedTensorMap,
    TensorSpec,
    load_checkpoint,
    narrow,
    validate_alignment,
)

log = logging.getLogger(__name__)

LORA_A_SUFFIX = ".lora_A"
LORA_B_SUFFIX = ".lora_B"
RESIDUAL_LO_SUFFIX = ".irm_lo"
RESIDUAL_FORMAT = "irm-residual"

# (name, dtype, shape, payload) as produced by the tensor pipelines below
_Item = tuple[str, DType, tuple[int, ...], "bytes | memoryview"]


class AlignmentError(ValueError):
    def __init__(self, report: AlignmentReport, what: str = "checkpoints"):
        super().__init__(f"{what} are not elementwise compatible:\n{report}")
        self.report = report


class AdapterError(ValueError):
    pass


class NonFiniteResultError(ArithmeticError):
    pass


class NonFiniteWarning(RuntimeWarning):
    pass


# --------------------------------------------------------------------------- LoRA


@dataclass(frozen=True)
class LoraTarget:
    A: np.ndarray  # (r, k)
    B: np.ndarray  # (d, r)
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def out_shape(self) -> tuple[int, int]:
        return (self.B.shape[0], self.A.shape[1])

    def delta(self) -> np.ndarray:
        """``(alpha / r) * B @ A`` in float32."""
        scale = np.float32(self.alpha / self.rank)
        return scale * (self.B.astype(np.float32) @ self.A.astype(np.float32))


class LoraAdapter:
    """Low-rank updates keyed by the name of the base tensor they modify.

    ``alpha`` defaults to the rank, which makes the update exactly ``B @ A``.
    """

    def __init__(self, targets: Mapping[str, LoraTarget] | None = None):
        self.targets: dict[str, LoraTarget] = dict(targets or {})
        for name, t in self.targets.items():
            if t.A.ndim != 2 or t.B.ndim != 2:
                raise AdapterError(f"{name}: lora factors must be matrices")
            r = t.A.shape[0]
            if r < 1 or t.B.shape[1] != r:
                raise AdapterError(f"{name}: A has {r} rows but B has {t.B.shape[1]} columns")
            d, k = t.out_shape
            if r > min(d, k):
                raise AdapterError(f"{name}: rank {r} exceeds min(d, k) = {min(d, k)}")
            if not (math.isfinite(t.alpha) and t.alpha >= 0):
                raise AdapterError(f"{name}: alpha must be a non-negative number, got {t.alpha}")

    @classmethod
    def from_factors(
        cls, factors: Mapping[str, tuple[np.ndarray, np.ndarray]], alpha: float | None = None
    ) -> "LoraAdapter":
        targets = {}
        for name, (A, B) in factors.items():
            A = np.asarray(A, dtype=np.float32)
            B = np.asarray(B, dtype=np.float32)
            targets[name] = LoraTarget(A, B, float(A.shape[0] if alpha is None else alpha))
        return cls(targets)

    @classmethod
    def from_checkpoint(cls, m: NamedTensorMap, alpha: float | None = None) -> "LoraAdapter":
        """Read an adapter container.

        Factor names are ``<target>.lora_A`` / ``<target>.lora_B``; the
        ``<module>.lora_A.weight`` convention (targeting ``<module>.weight``,
        optional ``base_model.model.`` prefix) is also accepted. ``alpha``
        and ``rank`` come from ``__metadata__`` (per-target ``<target>.alpha``
        overrides the global value) unless ``alpha`` is given explicitly.
        """
        pairs: dict[str, dict[str, str]] = {}
        for name in m:
            target, which = _split_factor_name(name)
            if target is None:
                raise AdapterError(f"tensor {name!r} is not a lora_A/lora_B factor")
            pairs.setdefault(target, {})[which] = name
        meta = m.metadata
        global_alpha = _meta_float(meta, "alpha", "lora_alpha")
        declared_rank = _meta_float(meta, "rank", "r")
        targets = {}
        for target, names in pairs.items():
            if set(names) != {"A", "B"}:
                raise AdapterError(f"target {target!r} is missing its lora_{'B' if 'A' in names else 'A'} factor")
            A, B = m.to_f32(names["A"]), m.to_f32(names["B"])
            r = A.shape[0] if A.ndim == 2 else -1
            if declared_rank is not None and r != int(declared_rank):
                raise AdapterError(f"{target}: factor rank {r} disagrees with metadata rank {int(declared_rank)}")
            if alpha is not None:
                a = float(alpha)
            else:
                a = _meta_float(meta, f"{target}.alpha")
                a = a if a is not None else (global_alpha if global_alpha is not None else float(r))
            targets[target] = LoraTarget(A, B, a)
        return cls(targets)

    def to_checkpoint(self) -> NamedTensorMap:
        tensors: dict[str, np.ndarray] = {}
        meta: dict[str, str] = {}
        for name, t in self.targets.items():
            tensors[name + LORA_A_SUFFIX] = t.A.astype(np.float32)
            tensors[name + LORA_B_SUFFIX] = t.B.astype(np.float32)
            meta[f"{name}.alpha"] = repr(float(t.alpha))
        return NamedTensorMap.from_arrays(tensors, meta)


_PEFT_FACTOR = re.compile(r"^(?:base_model\.model\.)?(?P<module>.+)\.lora_(?P<which>[AB])\.weight$")


def _split_factor_name(name: str) -> tuple[str | None, str]:
    for suffix, which in ((LORA_A_SUFFIX, "A"), (LORA_B_SUFFIX, "B")):
        if name.endswith(suffix):
            return name[: -len(suffix)], which
    m = _PEFT_FACTOR.match(name)
    if m:
        return m["module"] + ".weight", m["which"]
    return None, ""


def _meta_float(meta: Mapping[str, str], *keys: str) -> float | None:
    for key in keys:
        if key in meta:
            try:
                return float(meta[key])
            except ValueError:
                raise AdapterError(f"metadata {key!r}={meta[key]!r} is not a number") from None
    return None


def _merge_items(base: NamedTensorMap, adapter: LoraAdapter) -> Iterator[_Item]:
    for spec in base.specs:
        target = adapter.targets.get(spec.name)
        if target is None:
            yield spec.name, spec.dtype, spec.shape, base.raw(spec.name)
            continue
        W = base.to_f32(spec.name)
        merged = W + target.delta()
        yield spec.name, spec.dtype, spec.shape, narrow(merged, spec.dtype).tobytes()


def _check_adapter(base: NamedTensorMap, adapter: LoraAdapter) -> None:
    unknown = [n for n in adapter.targets if n not in base]
    if unknown:
        raise AdapterError(f"adapter targets not in base checkpoint: {unknown}")
    for name, t in adapter.targets.items():
        shape = base.spec(name).shape
        if shape != t.out_shape:
            raise AdapterError(f"{name}: B@A has shape {list(t.out_shape)} but base tensor is {list(shape)}")


def merge_lora(base: NamedTensorMap, adapter: LoraAdapter) -> NamedTensorMap:
    """``W + (alpha/r) B A`` for every targeted tensor; others are copied byte for byte."""
    _check_adapter(base, adapter)
    return _collect(_merge_items(base, adapter), base.metadata)


def merge_lora_file(base_path, adapter_path, out_path, *, alpha: float | None = None) -> None:
    base = load_checkpoint(base_path)
    adapter = LoraAdapter.from_checkpoint(load_checkpoint(adapter_path), alpha=alpha)
    _check_adapter(base, adapter)
    layout = [(s.name, s.dtype, s.shape) for s in base.specs]
    _stream(out_path, layout, _merge_items(base, adapter), base.metadata)


# --------------------------------------------------------------------------- IRM


@dataclass
class ResidualDelta:
    """Instruction residual ``inst - base`` in float32.

    ``delta`` holds the rounded differences. ``compensation`` holds the exact
    rounding error of each difference (TwoSum), so ``delta + compensation``
    equals ``inst - base`` exactly and re-applying the residual to the
    original base reproduces ``inst`` bit for bit. It may be ``None`` for a
    plain (half-size) residual.
    """

    delta: NamedTensorMap
    compensation: NamedTensorMap | None = None

    def names(self) -> list[str]:
        return self.delta.names()


def _two_diff(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Error-free ``a - b`` in float32: returns ``(s, e)`` with ``s + e == a - b``."""
    nb = -b
    s = a + nb
    bv = s - a
    av = s - bv
    e = (a - av) + (nb - bv)
    return s, e


def _check_irm_alignment(a: NamedTensorMap, b: NamedTensorMap, ignore_missing: bool, what: str) -> set[str]:
    report = validate_alignment(a, b)
    if report.shape_mismatch or ((report.only_in_a or report.only_in_b) and not ignore_missing):
        raise AlignmentError(report, what)
    skipped = set(report.only_in_a) | set(report.only_in_b)
    for name in sorted(skipped):
        log.warning("skipping %s: present in only one checkpoint", name)
    return skipped


def _extract_items(inst: NamedTensorMap, base: NamedTensorMap, skipped: set[str]) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
    for spec in base.specs:
        if spec.name in skipped:
            continue
        hi, lo = _two_diff(inst.to_f32(spec.name), base.to_f32(spec.name))
        yield spec.name, hi, lo


def extract_residual(
    inst: NamedTensorMap,
    base: NamedTensorMap,
    *,
    ignore_missing: bool = False,
    compensated: bool = True,
) -> ResidualDelta:
    skipped = _check_irm_alignment(inst, base, ignore_missing, "instruct and base checkpoints")
    his: dict[str, np.ndarray] = {}
    los: dict[str, np.ndarray] = {}
    for name, hi, lo in _extract_items(inst, base, skipped):
        his[name] = hi
        if compensated:
            los[name] = lo
    return ResidualDelta(
        NamedTensorMap.from_arrays(his),
        NamedTensorMap.from_arrays(los) if compensated else None,
    )


def _apply_items(
    base_adapted: NamedTensorMap,
    residual: ResidualDelta,
    skipped: set[str],
    out_dtype: DType | None,
    strict_finite: bool,
) -> Iterator[_Item]:
    for spec in base_adapted.specs:
        if spec.name in skipped:
            if spec.name in base_adapted:
                yield spec.name, out_dtype or spec.dtype, spec.shape, _recast(base_adapted, spec, out_dtype)
            continue
        w = base_adapted.to_f32(spec.name)
        hi = residual.delta.to_f32(spec.name)
        if residual.compensation is not None and spec.name in residual.compensation:
            lo = residual.compensation.to_f32(spec.name)
            with np.errstate(over="ignore"):  # reported below as NonFiniteWarning
                out = ((w.astype(np.float64) + hi) + lo).astype(np.float32)
        else:
            with np.errstate(over="ignore"):
                out = w + hi
        if not np.isfinite(out).all():
            bad = int(np.count_nonzero(~np.isfinite(out)))
            msg = f"{spec.name}: {bad} non-finite value(s) after applying the residual"
            if strict_finite:
                raise NonFiniteResultError(msg)
            warnings.warn(msg, NonFiniteWarning, stacklevel=3)
        dtype = out_dtype or spec.dtype
        yield spec.name, dtype, spec.shape, narrow(out, dtype).tobytes()


def _recast(m: NamedTensorMap, spec: TensorSpec, out_dtype: DType | None):
    if out_dtype is None or out_dtype is spec.dtype:
        return m.raw(spec.name)
    return narrow(m.to_f32(spec.name), out_dtype).tobytes()


def apply_residual(
    base_adapted: NamedTensorMap,
    residual: ResidualDelta,
    *,
    out_dtype: DType | None = None,
    ignore_missing: bool = False,
    strict_finite: bool = False,
) -> NamedTensorMap:
    """``base_adapted + residual`` per tensor, narrowed to ``out_dtype``.

    ``out_dtype=None`` keeps each tensor's dtype from ``base_adapted``.
    Non-finite results warn (:class:`NonFiniteWarning`) or, with
    ``strict_finite``, raise.
    """
    skipped = _check_irm_alignment(base_adapted, residual.delta, ignore_missing, "adapted base and residual")
    items = _apply_items(base_adapted, residual, skipped, out_dtype, strict_finite)
    return _collect(items, base_adapted.metadata)


def save_residual(residual: ResidualDelta, path) -> None:
    layout = [(s.name, DType.F32, s.shape) for s in residual.delta.specs]
    meta = {"format": RESIDUAL_FORMAT, "compensated": "1" if residual.compensation is not None else "0"}
    items = [(s.name, residual.delta.raw(s.name)) for s in residual.delta.specs]
    if residual.compensation is not None:
        layout += [(s.name + RESIDUAL_LO_SUFFIX, DType.F32, s.shape) for s in residual.compensation.specs]
        items += [(s.name + RESIDUAL_LO_SUFFIX, residual.compensation.raw(s.name)) for s in residual.compensation.specs]
    with CheckpointWriter(path, layout, meta) as writer:
        for name, payload in items:
            writer.write(name, payload)


def split_residual(m: NamedTensorMap) -> ResidualDelta:
    """Interpret a container written by :func:`save_residual` (or a plain delta map)."""
    hi_names = [n for n in m if not n.endswith(RESIDUAL_LO_SUFFIX)]
    lo_names = [n for n in m if n.endswith(RESIDUAL_LO_SUFFIX)]
    delta = _submap(m, hi_names, {})
    if not lo_names:
        return ResidualDelta(delta, None)
    comp = _submap(m, lo_names, {}, strip=RESIDUAL_LO_SUFFIX)
    return ResidualDelta(delta, comp)


def load_residual(path) -> ResidualDelta:
    return split_residual(load_checkpoint(path))


def _submap(m: NamedTensorMap, names: list[str], metadata, strip: str = "") -> NamedTensorMap:
    specs = []
    for n in names:
        s = m.spec(n)
        specs.append(TensorSpec(n[: -len(strip)] if strip else n, s.dtype, s.shape, s.byte_range))
    return NamedTensorMap(specs, m.data, metadata)


def irm_extract_file(inst_path, base_path, out_path, *, ignore_missing=False, compensated=True) -> None:
    inst, base = load_checkpoint(inst_path), load_checkpoint(base_path)
    skipped = _check_irm_alignment(inst, base, ignore_missing, "instruct and base checkpoints")
    kept = [s for s in base.specs if s.name not in skipped]
    layout = [(s.name, DType.F32, s.shape) for s in kept]
    if compensated:
        layout += [(s.name + RESIDUAL_LO_SUFFIX, DType.F32, s.shape) for s in kept]
    meta = {"format": RESIDUAL_FORMAT, "compensated": "1" if compensated else "0"}
    # compensation tensors come after all deltas, so the differences are
    # computed twice rather than buffering every error tensor
    with CheckpointWriter(out_path, layout, meta) as writer:
        for name, hi, _ in _extract_items(inst, base, skipped):
            writer.write(name, hi)
        if compensated:
            for name, _, lo in _extract_items(inst, base, skipped):
                writer.write(name + RESIDUAL_LO_SUFFIX, lo)


def irm_apply_file(
    base_adapted_path,
    residual_path,
    out_path,
    *,
    out_dtype: DType | None = None,
    ignore_missing: bool = False,
    strict_finite: bool = False,
) -> None:
    base = load_checkpoint(base_adapted_path)
    residual = load_residual(residual_path)
    skipped = _check_irm_alignment(base, residual.delta, ignore_missing, "adapted base and residual")
    layout = [(s.name, out_dtype or s.dtype, s.shape) for s in base.specs]
    _stream(out_path, layout, _apply_items(base, residual, skipped, out_dtype, strict_finite), base.metadata)


# --------------------------------------------------------------------------- sinks


def _collect(items, metadata) -> NamedTensorMap:
    specs, chunks, offset = [], [], 0
    for name, dtype, shape, payload in items:
        payload = bytes(payload)
        specs.append(TensorSpec(name, dtype, tuple(shape), (offset, offset + len(payload))))
        chunks.append(payload)
        offset += len(payload)
    return NamedTensorMap(specs, b"".join(chunks), metadata)


def _stream(path: str | os.PathLike, layout, items, metadata) -> None:
    with CheckpointWriter(path, layout, metadata) as writer:
        for name, _dtype, _shape, payload in items:
            writer.write(name, payload)

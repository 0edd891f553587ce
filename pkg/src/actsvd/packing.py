"""Mixed-precision storage of rank-k factors in ``k·max(m, n)`` 16-bit slots.

The taller of the two factors ``Ũ_k = (UΣ)[:, :k]`` (m × k) and ``V_k``
(n × k) has ``max(m, n)`` rows, the shorter one ``min(m, n)``. The first
``min(m, n)`` rows of both are int8-quantized per column and packed as byte
pairs (high byte U, low byte V); the remaining rows of the taller factor are
stored as raw float16 bit patterns. See ``docs/format.md`` for the bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .linalg import svd_full
from .update import UpdatedWeight

CODE_MAX = 127
SECTION_VERSION = 1


class PackError(ValueError):
    """Invalid factors or a malformed packed weight."""


@dataclass(frozen=True)
class QuantBlock:
    codes: np.ndarray  # int8
    scale: np.float32

    def __post_init__(self):
        if self.scale < 0:
            raise PackError("scale must be nonnegative")
        if self.codes.size and np.max(np.abs(self.codes.astype(np.int16))) > CODE_MAX:
            raise PackError("code outside [-127, 127]")

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float32) * np.float32(self.scale)


def _column_quantize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column absmax int8 codes for a 2-D array; returns (codes, f32 scales)."""
    x = np.asarray(x, dtype=np.float64)
    absmax = np.max(np.abs(x), axis=0) if x.shape[0] else np.zeros(x.shape[1])
    scales = (absmax / CODE_MAX).astype(np.float32)
    safe = np.where(scales > 0, scales.astype(np.float64), 1.0)
    codes = np.clip(np.rint(x / safe), -CODE_MAX, CODE_MAX)
    codes[:, scales == 0] = 0
    return codes.astype(np.int8), scales


def quantize_block(v) -> QuantBlock:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise PackError("quantize_block expects a vector")
    if not np.all(np.isfinite(v)):
        raise PackError("cannot quantize non-finite values")
    codes, scales = _column_quantize(v[:, None])
    return QuantBlock(codes[:, 0], scales[0] if scales.size else np.float32(0))


def dequantize_block(block: QuantBlock) -> np.ndarray:
    return block.dequantize()


@dataclass(frozen=True)
class PackedWeight:
    m: int
    n: int
    k: int
    slots: np.ndarray  # uint16, (max(m, n), k)
    u_scales: np.ndarray  # float32, (k,)
    v_scales: np.ndarray  # float32, (k,)
    layout_tag: int  # 0: m >= n, 1: m < n

    def validate(self) -> None:
        m, n, k = self.m, self.n, self.k
        if m < 1 or n < 1 or not 0 <= k <= min(m, n):
            raise PackError(f"invalid dimensions m={m} n={n} k={k}")
        if self.layout_tag not in (0, 1) or self.layout_tag != int(m < n):
            raise PackError(f"layout tag {self.layout_tag} does not match a {m}x{n} weight")
        if self.slots.dtype != np.uint16 or self.slots.shape != (max(m, n), k):
            raise PackError(f"slot array {self.slots.dtype}{self.slots.shape} != uint16({max(m, n)}, {k})")
        for name, sc in (("u_scales", self.u_scales), ("v_scales", self.v_scales)):
            if sc.dtype != np.float32 or sc.shape != (k,):
                raise PackError(f"{name} must be float32 of length {k}")
            if not np.all(np.isfinite(sc)) or np.any(sc < 0):
                raise PackError(f"{name} holds negative or non-finite entries")

    @property
    def slot_count(self) -> int:
        return int(self.slots.size)

    # -- binary section -------------------------------------------------
    def to_bytes(self, name: str) -> bytes:
        self.validate()
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise PackError("layer name too long")
        head = struct.pack(f"<BH{len(raw)}sIIIB", SECTION_VERSION, len(raw), raw, self.m, self.n, self.k, self.layout_tag)
        return b"".join([
            head,
            self.u_scales.astype("<f4").tobytes(),
            self.v_scales.astype("<f4").tobytes(),
            self.slots.astype("<u2").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple[str, "PackedWeight", int]:
        """Parse one section; returns (name, packed, offset just past it)."""
        try:
            version, name_len = struct.unpack_from("<BH", buf, offset)
            if version != SECTION_VERSION:
                raise PackError(f"unsupported packed section version {version}")
            pos = offset + 3
            name = bytes(buf[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            m, n, k, tag = struct.unpack_from("<IIIB", buf, pos)
            pos += 13
            u_sc = np.frombuffer(buf, "<f4", k, pos).astype(np.float32)
            pos += 4 * k
            v_sc = np.frombuffer(buf, "<f4", k, pos).astype(np.float32)
            pos += 4 * k
            rows = max(m, n)
            slots = np.frombuffer(buf, "<u2", rows * k, pos).astype(np.uint16).reshape(rows, k)
            pos += 2 * rows * k
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            if isinstance(exc, PackError):
                raise
            raise PackError(f"truncated or malformed packed section: {exc}") from exc
        p = cls(m, n, k, slots, u_sc, v_sc, tag)
        p.validate()
        return name, p, pos


def pack_factors(w1: np.ndarray, v: np.ndarray) -> PackedWeight:
    """Pack ``w1`` (m × k, i.e. ``UΣ``) and ``v`` (n × k)."""
    w1 = np.asarray(w1, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if w1.ndim != 2 or v.ndim != 2 or w1.shape[1] != v.shape[1]:
        raise PackError(f"factor shapes {w1.shape} and {v.shape} are incompatible")
    if not (np.all(np.isfinite(w1)) and np.all(np.isfinite(v))):
        raise PackError("factors contain non-finite values")
    m, k = w1.shape
    n = v.shape[0]
    short = min(m, n)
    tag = int(m < n)
    u_codes, u_sc = _column_quantize(w1[:short])
    v_codes, v_sc = _column_quantize(v[:short])
    slots = np.empty((max(m, n), k), dtype=np.uint16)
    slots[:short] = (u_codes.view(np.uint8).astype(np.uint16) << 8) | v_codes.view(np.uint8).astype(np.uint16)
    tall = v if tag else w1
    tail = tall[short:].astype(np.float16)
    if not np.all(np.isfinite(tail)):
        raise PackError("tail rows overflow float16")
    slots[short:] = tail.view(np.uint16)
    return PackedWeight(m, n, k, slots, u_sc, v_sc, tag)


def svd_factors(w: UpdatedWeight | np.ndarray, k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(UΣ)[:, :k]`` and ``V[:, :k]`` of ``W̃``."""
    if isinstance(w, UpdatedWeight):
        mat, k = w.w_tilde, w.k if k is None else k
    else:
        mat = w
    mat = np.asarray(mat, dtype=np.float64)
    if not np.all(np.isfinite(mat)):
        raise PackError("weight contains non-finite values")
    f = svd_full(mat)
    if k is None or not 0 <= k <= f.q:
        raise PackError(f"rank {k} invalid for a {mat.shape[0]}x{mat.shape[1]} weight")
    v = f.vt[:k].T.copy()
    v[:, f.s[:k] == 0] = 0.0  # directions with no mass carry no information
    return f.u[:, :k] * f.s[:k], v


def pack(w: UpdatedWeight | np.ndarray, k: int | None = None) -> PackedWeight:
    w1, v = svd_factors(w, k)
    return pack_factors(w1, v)


def unpack(p: PackedWeight) -> tuple[np.ndarray, np.ndarray]:
    """Factored form ``(w1, w2)`` with ``w1`` m × k and ``w2`` k × n."""
    p.validate()
    m, n, k = p.m, p.n, p.k
    short = min(m, n)
    mixed = p.slots[:short]
    u_codes = (mixed >> 8).astype(np.uint8).view(np.int8)
    v_codes = (mixed & 0xFF).astype(np.uint8).view(np.int8)
    u = np.empty((m, k), dtype=np.float32)
    v = np.empty((n, k), dtype=np.float32)
    u[:short] = u_codes.astype(np.float32) * p.u_scales
    v[:short] = v_codes.astype(np.float32) * p.v_scales
    tail = p.slots[short:].view(np.float16).astype(np.float32)
    if p.layout_tag:
        v[short:] = tail
    else:
        u[short:] = tail
    return u.astype(np.float64), v.T.astype(np.float64)


def packed_ratio(p: PackedWeight) -> float:
    return p.k * max(p.m, p.n) / (p.m * p.n)


def quant_error_report(w: UpdatedWeight) -> tuple[float, float]:
    """(MSE, MAE) between ``W̃`` and the product of its unpacked factors."""
    w1, w2 = unpack(pack(w))
    diff = np.asarray(w.w_tilde, dtype=np.float64) - w1 @ w2
    return float(np.mean(diff * diff)), float(np.mean(np.abs(diff)))


def relative_error(w: UpdatedWeight) -> float:
    w1, w2 = unpack(pack(w))
    ref = np.linalg.norm(w.w_tilde)
    err = np.linalg.norm(w.w_tilde - w1 @ w2)
    return float(err / ref) if ref > 0 else float(err)


def storage_report(p: PackedWeight) -> dict:
    """Slot storage plus the f32 scale tables, which sit outside the slot-count law."""
    slot_bytes = 2 * p.slot_count
    scale_bytes = 4 * 2 * p.k
    dense_bytes = 2 * p.m * p.n  # same 16-bit cell size as the slots
    return {
        "slots": p.slot_count,
        "slot_bytes": slot_bytes,
        "scale_bytes": scale_bytes,
        "dense16_bytes": dense_bytes,
        "ratio": packed_ratio(p),
        "scale_overhead": scale_bytes / dense_bytes,
    }

"""Minutiae templates, validation, and ISO/IEC 19794-2 / JSONL serialization."""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
MAX_MINUTIAE = 255
ISO_MAGIC = b"FMR\x00"
ISO_VERSION = b" 20\x00"
_COORD_LIMIT = 1 << 14


class MinutiaKind(str, enum.Enum):
    ENDING = "ending"
    BIFURCATION = "bifurcation"
    OTHER = "other"


_KIND_TO_CODE = {MinutiaKind.OTHER: 0b00, MinutiaKind.ENDING: 0b01, MinutiaKind.BIFURCATION: 0b10}
_CODE_TO_KIND = {v: k for k, v in _KIND_TO_CODE.items()}
KIND_INDEX = {MinutiaKind.ENDING: 0, MinutiaKind.BIFURCATION: 1, MinutiaKind.OTHER: 2}
INDEX_KIND = {v: k for k, v in KIND_INDEX.items()}


class TemplateFormatError(ValueError):
    """Raised for malformed ISO records or JSONL lines."""


def canonical_angle(theta: float) -> float:
    """Wrap an angle into [0, 2*pi)."""
    t = math.fmod(theta, TWO_PI)
    if t < 0.0:
        t += TWO_PI
    # fmod of tiny negatives can land exactly on 2*pi after the shift
    if t >= TWO_PI:
        t = 0.0
    return t


def canonical_angles(theta: np.ndarray) -> np.ndarray:
    t = np.mod(theta, TWO_PI)
    t[t >= TWO_PI] = 0.0
    return t


@dataclass(frozen=True)
class Minutia:
    """A single ridge feature.

    Coordinates are in pixels. They are integer-valued for generated masters
    and perturbed sets but may carry sub-pixel values after rigid or elastic
    warps; the ISO writer rounds them.
    """

    x: float
    y: float
    theta: float
    kind: MinutiaKind = MinutiaKind.ENDING
    quality: int = 60

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", canonical_angle(float(self.theta)))
        if not isinstance(self.kind, MinutiaKind):
            object.__setattr__(self, "kind", MinutiaKind(self.kind))


@dataclass(frozen=True)
class MinutiaeTemplate:
    minutiae: tuple[Minutia, ...]
    width: int = 416
    height: int = 560
    resolution: int = 500
    finger_id: str = ""
    impression_id: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.minutiae, tuple):
            object.__setattr__(self, "minutiae", tuple(self.minutiae))

    def __len__(self) -> int:
        return len(self.minutiae)

    @cached_property
    def array(self) -> np.ndarray:
        """(n, 3) float array of x, y, theta."""
        if not self.minutiae:
            return np.zeros((0, 3))
        return np.array([(m.x, m.y, m.theta) for m in self.minutiae], dtype=float)

    @cached_property
    def kinds(self) -> np.ndarray:
        return np.array([KIND_INDEX[m.kind] for m in self.minutiae], dtype=np.int8)

    @cached_property
    def qualities(self) -> np.ndarray:
        return np.array([m.quality for m in self.minutiae], dtype=np.int16)

    def with_minutiae(self, minutiae: Iterable[Minutia], **changes) -> "MinutiaeTemplate":
        return replace(self, minutiae=tuple(minutiae), **changes)


def template_from_arrays(
    base: MinutiaeTemplate,
    xyt: np.ndarray,
    kinds: Sequence[int] | np.ndarray,
    qualities: Sequence[int] | np.ndarray,
    **changes,
) -> MinutiaeTemplate:
    """Build a template sharing `base` metadata from column arrays."""
    ms = tuple(
        Minutia(float(x), float(y), float(t), INDEX_KIND[int(k)], int(q))
        for (x, y, t), k, q in zip(xyt.tolist(), kinds, qualities)
    )
    return replace(base, minutiae=ms, **changes)


def validate(t: MinutiaeTemplate) -> list[str]:
    """Return human-readable invariant violations; empty when the template is valid."""
    problems: list[str] = []
    if t.width <= 0 or t.height <= 0:
        problems.append(f"template: non-positive size {t.width}x{t.height}")
    if len(t.minutiae) > MAX_MINUTIAE:
        problems.append(f"template: {len(t.minutiae)} minutiae exceeds maximum of {MAX_MINUTIAE}")
    seen: dict[tuple[float, float], int] = {}
    for i, m in enumerate(t.minutiae):
        if not (math.isfinite(m.x) and math.isfinite(m.y)):
            problems.append(f"minutia {i}: non-finite position")
            continue
        if not (0 <= m.x < t.width):
            problems.append(f"minutia {i}: x={m.x} out of bounds [0, {t.width})")
        if not (0 <= m.y < t.height):
            problems.append(f"minutia {i}: y={m.y} out of bounds [0, {t.height})")
        if not (0.0 <= m.theta < TWO_PI):
            problems.append(f"minutia {i}: theta={m.theta} outside [0, 2pi)")
        if not (0 <= m.quality <= 100):
            problems.append(f"minutia {i}: quality={m.quality} outside [0, 100]")
        key = (m.x, m.y)
        if key in seen:
            problems.append(f"minutia {i}: duplicate position of minutia {seen[key]}")
        else:
            seen[key] = i
    return problems


# --- ISO/IEC 19794-2:2005 --------------------------------------------------

def angle_to_byte(theta: float) -> int:
    return int(math.floor(theta * 256.0 / TWO_PI + 0.5)) % 256


def byte_to_angle(b: int) -> float:
    return b * TWO_PI / 256.0


def dpi_to_ppcm(dpi: int) -> int:
    return int(math.floor(dpi / 2.54 + 0.5))


def ppcm_to_dpi(ppcm: int) -> int:
    """Roundest dpi that encodes to `ppcm`, so 1000 dpi survives as 394 ppcm."""
    raw = ppcm * 2.54
    for step in (100, 50, 10, 1):
        dpi = int(math.floor(raw / step + 0.5)) * step
        if dpi > 0 and dpi_to_ppcm(dpi) == ppcm:
            return dpi
    return int(math.floor(raw + 0.5))


def encode_iso19794_2(t: MinutiaeTemplate, finger_position: int = 0, view: int = 0) -> bytes:
    """Serialize a template as a single-view FMR record.

    Positions are rounded to whole pixels, angles to 1.40625 degree units and
    resolution is stored in pixels per centimetre as the 2005 edition requires.
    """
    n = len(t.minutiae)
    if n > MAX_MINUTIAE:
        raise ValueError(f"{n} minutiae do not fit the 8-bit count field")
    for dim, name in ((t.width, "width"), (t.height, "height")):
        if not 0 < dim < 1 << 16:
            raise ValueError(f"{name}={dim} does not fit a u16")
    total = 24 + 4 + 6 * n + 2
    ppcm = dpi_to_ppcm(t.resolution)
    quality = int(round(sum(m.quality for m in t.minutiae) / n)) if n else 0
    out = bytearray()
    out += ISO_MAGIC + ISO_VERSION
    out += struct.pack(">IHHHHHBB", total, 0, t.width, t.height, ppcm, ppcm, 1, 0)
    out += struct.pack(">BBBB", finger_position, view, quality, n)
    for i, m in enumerate(t.minutiae):
        x, y = int(math.floor(m.x + 0.5)), int(math.floor(m.y + 0.5))
        if not (0 <= x < _COORD_LIMIT and 0 <= y < _COORD_LIMIT):
            raise ValueError(f"minutia {i}: ({x}, {y}) exceeds the 14-bit coordinate range")
        if not 0 <= m.quality <= 100:
            raise ValueError(f"minutia {i}: quality {m.quality} outside [0, 100]")
        out += struct.pack(
            ">HHBB",
            (_KIND_TO_CODE[m.kind] << 14) | x,
            y,
            angle_to_byte(m.theta),
            m.quality,
        )
    out += struct.pack(">H", 0)
    return bytes(out)


def decode_iso19794_2(data: bytes, finger_id: str = "", impression_id: str = "") -> MinutiaeTemplate:
    """Parse a record produced by :func:`encode_iso19794_2`.

    Finger and impression identifiers are not carried on the wire and are
    supplied by the caller.
    """
    if len(data) < 30:
        raise TemplateFormatError(f"truncated record: {len(data)} bytes, need at least 30")
    if data[:4] != ISO_MAGIC:
        raise TemplateFormatError(f"bad magic {data[:4]!r}")
    total, _equip, width, height, ppcm, _ppcm_y, views, _rsv = struct.unpack_from(">IHHHHHBB", data, 8)
    if total != len(data):
        raise TemplateFormatError(f"length field says {total} bytes but record has {len(data)}")
    if views != 1:
        raise TemplateFormatError(f"only single-view records are supported, got {views} views")
    _pos, _view, _q, n = struct.unpack_from(">BBBB", data, 24)
    expected = 24 + 4 + 6 * n + 2
    if expected != len(data):
        raise TemplateFormatError(
            f"minutiae count {n} implies {expected} bytes but record has {len(data)}"
        )
    ms = []
    off = 28
    for _ in range(n):
        tx, ry, a, q = struct.unpack_from(">HHBB", data, off)
        off += 6
        code = tx >> 14
        if code == 0b11:
            raise TemplateFormatError(f"reserved minutia type code at byte {off - 6}")
        ms.append(Minutia(float(tx & 0x3FFF), float(ry & 0x3FFF), byte_to_angle(a), _CODE_TO_KIND[code], q))
    (ext,) = struct.unpack_from(">H", data, off)
    if ext != 0:
        raise TemplateFormatError("extended data blocks are not supported")
    return MinutiaeTemplate(tuple(ms), width, height, ppcm_to_dpi(ppcm), finger_id, impression_id)


def write_iso(path: str | Path, t: MinutiaeTemplate) -> None:
    Path(path).write_bytes(encode_iso19794_2(t))


def read_iso(path: str | Path) -> MinutiaeTemplate:
    p = Path(path)
    return decode_iso19794_2(p.read_bytes(), finger_id=p.stem, impression_id=p.stem)


# --- JSONL -----------------------------------------------------------------

def template_to_dict(t: MinutiaeTemplate) -> dict:
    return {
        "finger_id": t.finger_id,
        "impression_id": t.impression_id,
        "width": t.width,
        "height": t.height,
        "resolution": t.resolution,
        "minutiae": [
            {"x": m.x, "y": m.y, "theta": m.theta, "kind": m.kind.value, "quality": m.quality}
            for m in t.minutiae
        ],
    }


def template_from_dict(d: dict) -> MinutiaeTemplate:
    ms = tuple(
        Minutia(float(m["x"]), float(m["y"]), float(m["theta"]), MinutiaKind(m["kind"]), int(m["quality"]))
        for m in d["minutiae"]
    )
    return MinutiaeTemplate(
        ms,
        int(d["width"]),
        int(d["height"]),
        int(d.get("resolution", 500)),
        str(d["finger_id"]),
        str(d["impression_id"]),
    )


def dumps_jsonl(templates: Iterable[MinutiaeTemplate]) -> str:
    return "".join(json.dumps(template_to_dict(t), separators=(",", ":")) + "\n" for t in templates)


def write_jsonl(path: str | Path, templates: Iterable[MinutiaeTemplate]) -> None:
    Path(path).write_text(dumps_jsonl(templates), encoding="utf-8")


def read_jsonl(path: str | Path) -> list[MinutiaeTemplate]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(template_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise TemplateFormatError(f"{path}:{lineno}: {exc}") from exc
    return out

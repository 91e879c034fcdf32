"""Synthetic 2-D control conditions, plain-text PGM I/O, and tokenization.

Conditions live at token resolution (one pixel per token), so the mapping
between condition pixels and transformer tokens is the identity and no
resampling enters the picture. Plain-text PGM keeps fixtures human-readable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError, PgmParseError
from .model import ModelWeights, Tensor2D

EDGE_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConditionMap:
    """Grayscale control map; values clamped to [0, 1]."""

    pixels: np.ndarray  # [height, width] float64

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=float)
        if p.ndim != 2 or p.size == 0:
            raise DimensionError(f"condition map must be 2-D, got shape {p.shape}")
        object.__setattr__(self, "pixels", np.clip(p, 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def edge_mask(cond: ConditionMap, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Flat boolean mask (row-major token order) of pixels above threshold."""
    return (cond.pixels > threshold).ravel()


def sparsity(cond: ConditionMap, threshold: float = EDGE_THRESHOLD) -> float:
    """Fraction of tokens that carry control signal."""
    return float(edge_mask(cond, threshold).mean())


def _check_inside(grid_side: int, *points) -> None:
    for x, y in points:
        if not (0 <= x < grid_side and 0 <= y < grid_side):
            raise ParameterError(f"point ({x}, {y}) outside {grid_side}x{grid_side} grid")


def _rect(params, grid_side: int) -> np.ndarray:
    x0, y0, x1, y1 = (int(v) for v in params)
    if x0 > x1 or y0 > y1:
        raise ParameterError(f"degenerate rectangle corners ({x0},{y0})-({x1},{y1})")
    _check_inside(grid_side, (x0, y0), (x1, y1))
    px = np.zeros((grid_side, grid_side))
    px[y0, x0 : x1 + 1] = 1.0
    px[y1, x0 : x1 + 1] = 1.0
    px[y0 : y1 + 1, x0] = 1.0
    px[y0 : y1 + 1, x1] = 1.0
    return px


def _circle(params, grid_side: int) -> np.ndarray:
    cx, cy, r = params
    if r <= 0:
        raise ParameterError(f"circle radius must be positive, got {r}")
    _check_inside(grid_side, (cx - r, cy - r), (cx + r, cy + r))
    ys, xs = np.mgrid[0:grid_side, 0:grid_side]
    dist = np.hypot(xs - cx, ys - cy)
    # one-pixel-wide annulus: pixel count tracks the circumference 2*pi*r
    return ((dist >= r - 0.5) & (dist < r + 0.5)).astype(float)


def _bresenham(x0: int, y0: int, x1: int, y1: int):
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _default_segments(count: int, grid_side: int) -> list[tuple[int, int, int, int]]:
    # evenly spaced diagonals; deterministic stand-in for line-style guidance
    if count < 1:
        raise ParameterError(f"need at least one line, got {count}")
    segments = []
    for i in range(count):
        y = (i + 1) * grid_side // (count + 1)
        segments.append((0, y, grid_side - 1, min(grid_side - 1, y + grid_side // 2)))
    return segments


def _lines(params, grid_side: int) -> np.ndarray:
    if isinstance(params, int):
        segments = _default_segments(params, grid_side)
    else:
        segments = [tuple(int(v) for v in seg) for seg in params]
    px = np.zeros((grid_side, grid_side))
    for x0, y0, x1, y1 in segments:
        _check_inside(grid_side, (x0, y0), (x1, y1))
        for x, y in _bresenham(x0, y0, x1, y1):
            px[y, x] = 1.0
    return px


def _default_points(count: int, grid_side: int) -> list[tuple[int, int]]:
    # spread along the main diagonal, like sparse pose keypoints
    if count < 1:
        raise ParameterError(f"need at least one point, got {count}")
    if count > grid_side:
        raise ParameterError(f"{count} distinct diagonal points do not fit side {grid_side}")
    coords = []
    for i in range(count):
        c = (i + 1) * grid_side // (count + 1)
        coords.append((c, c))
    if len(set(coords)) != count:
        coords = [(i * grid_side // count, i * grid_side // count) for i in range(count)]
    return coords


def _points(params, grid_side: int) -> np.ndarray:
    if isinstance(params, int):
        coords = _default_points(params, grid_side)
    else:
        coords = [tuple(int(v) for v in pt) for pt in params]
    px = np.zeros((grid_side, grid_side))
    for x, y in coords:
        _check_inside(grid_side, (x, y))
        px[y, x] = 1.0
    return px


_KINDS = {"rect": _rect, "circle": _circle, "lines": _lines, "points": _points}


def synth_condition(kind: str, params, grid_side: int) -> ConditionMap:
    """Deterministic synthetic condition: rect/circle outline, lines, or points."""
    if grid_side < 2:
        raise ParameterError(f"grid_side must be >= 2, got {grid_side}")
    kind = kind.lower()
    if kind not in _KINDS:
        raise ParameterError(f"unknown condition kind {kind!r}, expected one of {sorted(_KINDS)}")
    return ConditionMap(_KINDS[kind](params, grid_side))


def parse_condition_spec(spec: str, grid_side: int) -> ConditionMap:
    """Resolve a CLI condition argument: a PGM path or "synth:kind:p1,p2,...".

    Single-number params are passed as counts (lines/points); otherwise the
    comma-separated numbers go to the shape constructor.
    """
    if not spec.startswith("synth:"):
        return load_pgm(spec)
    parts = spec.split(":")
    if len(parts) not in (2, 3):
        raise ParameterError(f"malformed condition spec {spec!r}")
    kind = parts[1]
    if len(parts) == 2 or parts[2] == "":
        raise ParameterError(f"condition spec {spec!r} is missing parameters")
    raw = parts[2].split(",")
    try:
        numbers = [float(v) for v in raw]
    except ValueError as exc:
        raise ParameterError(f"non-numeric condition parameter in {spec!r}") from exc
    if kind in ("lines", "points") and len(numbers) == 1:
        return synth_condition(kind, int(numbers[0]), grid_side)
    if kind == "points":
        if len(numbers) % 2 != 0:
            raise ParameterError(f"points spec needs x,y pairs, got {spec!r}")
        coords = list(zip(numbers[0::2], numbers[1::2]))
        return synth_condition(kind, coords, grid_side)
    if kind == "lines":
        if len(numbers) % 4 != 0:
            raise ParameterError(f"lines spec needs x0,y0,x1,y1 groups, got {spec!r}")
        segs = [tuple(numbers[i : i + 4]) for i in range(0, len(numbers), 4)]
        return synth_condition(kind, segs, grid_side)
    return synth_condition(kind, numbers, grid_side)


# ---------------------------------------------------------------------------
# Plain-text PGM ("P2", maxval 255). Saving quantizes to 8 bits, so
# load(save(m)) reproduces m exactly after quantization.
# ---------------------------------------------------------------------------


def pgm_text(cond: ConditionMap) -> str:
    levels = np.rint(cond.pixels * 255).astype(int)
    lines = ["P2", f"{cond.width} {cond.height}", "255"]
    for row in levels:
        lines.append(" ".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


def save_pgm(cond: ConditionMap, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(pgm_text(cond))


def quantize(cond: ConditionMap) -> ConditionMap:
    """The 8-bit round-trip a save/load pair applies."""
    return ConditionMap(np.rint(cond.pixels * 255) / 255.0)


def load_pgm(path) -> ConditionMap:
    with open(path, "r", encoding="ascii") as fh:
        raw_lines = fh.read().splitlines()

    tokens: list[tuple[str, int]] = []  # (token, 1-based line number)
    for lineno, line in enumerate(raw_lines, start=1):
        body = line.split("#", 1)[0]
        for tok in body.split():
            tokens.append((tok, lineno))

    if not tokens:
        raise PgmParseError("empty file", line=1)
    magic, magic_line = tokens[0]
    if magic != "P2":
        raise PgmParseError(f"expected plain-text magic 'P2', got {magic!r}", line=magic_line)
    header = tokens[1:4]
    if len(header) < 3:
        raise PgmParseError("truncated header (need width, height, maxval)", line=tokens[-1][1])
    values = []
    for tok, lineno in header:
        if not tok.lstrip("-").isdigit():
            raise PgmParseError(f"non-integer header field {tok!r}", line=lineno)
        values.append(int(tok))
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise PgmParseError(f"bad dimensions {width}x{height}", line=header[0][1])
    if maxval != 255:
        raise PgmParseError(f"expected maxval 255, got {maxval}", line=header[2][1])

    pixel_tokens = tokens[4:]
    if len(pixel_tokens) != width * height:
        last_line = pixel_tokens[-1][1] if pixel_tokens else header[2][1]
        raise PgmParseError(
            f"expected {width * height} pixels for {width}x{height}, got {len(pixel_tokens)}",
            line=last_line,
        )
    pixels = np.empty(width * height)
    for i, (tok, lineno) in enumerate(pixel_tokens):
        if not tok.isdigit():
            raise PgmParseError(f"non-integer pixel {tok!r}", line=lineno)
        value = int(tok)
        if value > maxval:
            raise PgmParseError(f"pixel {value} exceeds maxval {maxval}", line=lineno)
        pixels[i] = value / maxval
    return ConditionMap(pixels.reshape(height, width))


def embed_condition(cond: ConditionMap, weights: ModelWeights) -> Tensor2D:
    """Tokenize a condition: row i of the embedding matrix scaled by pixel i.

    Zero pixels produce exactly zero rows, so uncontrolled regions inject
    nothing into the control branch.
    """
    config = weights.config
    if cond.height != config.grid_side or cond.width != config.grid_side:
        raise DimensionError(
            f"condition {cond.height}x{cond.width} != model grid "
            f"{config.grid_side}x{config.grid_side}"
        )
    flat = cond.pixels.ravel()
    return flat[:, None] * weights.cond_embed

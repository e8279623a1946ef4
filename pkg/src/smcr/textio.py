"""Line-oriented ``key=value`` files and CSV-matrix blocks.

Every artifact written by the package (dataset metadata, configs, encoder and
translator parameters, metrics) uses these two primitives so the files stay
diffable and can be edited by hand in tests.

A *block file* is a ``key=value`` header followed by named numeric blocks::

    kind=translator
    dim=2
    @matrix rotation 2 2
    1,0
    0,1
    @vector scale 2
    2,2
"""

from __future__ import annotations

import os
from typing import Dict, Iterable, Mapping, Tuple

import numpy as np

from .errors import IntegrityError, ParseError


def fmt_float(value: float) -> str:
    # 17 significant digits round-trip every IEEE double exactly
    return format(float(value), ".17g")


def parse_kv_lines(lines: Iterable[str]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw.strip()!r}", lineno)
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ParseError("empty key", lineno)
        out[key] = value.strip()
    return out


def read_kv(path) -> Dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_lines(fh)


def format_kv(values: Mapping[str, object]) -> str:
    parts = []
    for key, value in values.items():
        if isinstance(value, float):
            value = fmt_float(value)
        parts.append(f"{key}={value}\n")
    return "".join(parts)


def write_kv(path, values: Mapping[str, object]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_kv(values))


def write_blocks(path, header: Mapping[str, object], blocks: Mapping[str, np.ndarray]) -> None:
    lines = [format_kv(header)]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            lines.append(f"@vector {name} {arr.shape[0]}\n")
            lines.append(",".join(fmt_float(v) for v in arr) + "\n")
        elif arr.ndim == 2:
            lines.append(f"@matrix {name} {arr.shape[0]} {arr.shape[1]}\n")
            for row in arr:
                lines.append(",".join(fmt_float(v) for v in row) + "\n")
        else:
            raise ValueError(f"block {name!r} must be 1-D or 2-D")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(lines))


def _parse_row(text: str, lineno: int, width: int) -> np.ndarray:
    cells = text.split(",") if text else []
    if len(cells) != width:
        raise IntegrityError(f"line {lineno}: expected {width} values, found {len(cells)}")
    try:
        return np.array([float(c) for c in cells], dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"non-numeric value ({exc})", lineno) from None


def read_blocks(path) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    header_lines = []
    i = 0
    while i < len(lines) and not lines[i].startswith("@"):
        header_lines.append(lines[i])
        i += 1
    header = parse_kv_lines(header_lines)

    blocks: Dict[str, np.ndarray] = {}
    while i < len(lines):
        lineno = i + 1
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        kind = parts[0]
        try:
            if kind == "@vector" and len(parts) == 3:
                name, n = parts[1], int(parts[2])
                if i + 1 >= len(lines):
                    raise IntegrityError(f"line {lineno}: vector {name!r} has no data row")
                blocks[name] = _parse_row(lines[i + 1].strip(), i + 2, n)
                i += 2
            elif kind == "@matrix" and len(parts) == 4:
                name, rows, cols = parts[1], int(parts[2]), int(parts[3])
                if i + rows >= len(lines):
                    raise IntegrityError(f"line {lineno}: matrix {name!r} declares {rows} rows")
                data = np.empty((rows, cols), dtype=np.float64)
                for r in range(rows):
                    data[r] = _parse_row(lines[i + 1 + r].strip(), i + 2 + r, cols)
                blocks[name] = data
                i += 1 + rows
            else:
                raise ParseError(f"malformed block header {lines[i]!r}", lineno)
        except ValueError as exc:
            if isinstance(exc, (ParseError, IntegrityError)):
                raise
            raise ParseError(str(exc), lineno) from None
    return header, blocks

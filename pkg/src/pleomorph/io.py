"""File formats: binary PPM, the CSV schemas, and JSON-lines manifests."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .core import ObserverScore, RaterPanel, parse_confidence
from .errors import InvalidInputError
from .inference import CellDetection, ScoreMap

RATING_FIELDS = ("case_id", "rater_id", "score", "confidence")
DETECTION_FIELDS = ("x", "y", "class", "confidence")
SCOREMAP_FIELDS = ("block_x", "block_y", "count", "mean")


def fmt(value: float) -> str:
    """Shortest round-tripping float repr; stable across runs."""
    return repr(float(value))


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray):
    """Binary P6, maxval 255. Float images are taken to be in [0, 1]."""
    pixels = to_uint8(image)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise InvalidInputError(f"PPM needs an (H, W, 3) image, got {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def read_ppm(path, as_float: bool = True) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise InvalidInputError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise InvalidInputError(f"{path}: only maxval 255 is supported")
    payload = data[pos:pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise InvalidInputError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return pixels.astype(np.float32) / 255.0 if as_float else pixels.copy()


def _open_csv(path, fields):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = [f for f in fields if f not in reader.fieldnames]
        if missing:
            raise InvalidInputError(f"{path}: missing columns {missing}")
        return list(reader)


def _write_csv(path, fields, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue())


def write_detections(path, detections):
    _write_csv(path, DETECTION_FIELDS, [(fmt(d.x), fmt(d.y), d.cls, fmt(d.confidence)) for d in detections])


def read_detections(path) -> list[CellDetection]:
    out = []
    for i, row in enumerate(_open_csv(path, DETECTION_FIELDS)):
        try:
            out.append(CellDetection(float(row["x"]), float(row["y"]), row["class"].strip(),
                                     float(row["confidence"])))
        except (ValueError, InvalidInputError) as exc:
            raise InvalidInputError(f"{path}: row {i + 2}: {exc}") from None
    return out


def write_ratings(path, panels):
    rows = []
    for panel in panels:
        for s in panel.scores:
            rows.append((panel.case_id, s.rater_id, s.score, s.confidence.value if s.confidence else ""))
    _write_csv(path, RATING_FIELDS, rows)


def read_ratings(path) -> dict[str, RaterPanel]:
    """Ratings CSV to panels keyed by case id (case order preserved)."""
    grouped: dict[str, list] = {}
    for i, row in enumerate(_open_csv(path, RATING_FIELDS)):
        try:
            score = ObserverScore(row["rater_id"].strip(), int(row["score"]), parse_confidence(row["confidence"]))
        except (ValueError, InvalidInputError) as exc:
            raise InvalidInputError(f"{path}: row {i + 2}: {exc}") from None
        grouped.setdefault(row["case_id"].strip(), []).append(score)
    return {case: RaterPanel(case, tuple(scores)) for case, scores in grouped.items()}


def write_scoremap(path, score_map: ScoreMap):
    rows = []
    bh, bw = score_map.means.shape
    for by in range(bh):
        for bx in range(bw):
            m = score_map.means[by, bx]
            rows.append((bx, by, int(score_map.counts[by, bx]), "" if math.isnan(m) else fmt(m)))
    _write_csv(path, SCOREMAP_FIELDS, rows)


def read_scoremap_rows(path):
    rows = []
    for row in _open_csv(path, SCOREMAP_FIELDS):
        mean = row["mean"].strip()
        rows.append((int(row["block_x"]), int(row["block_y"]), int(row["count"]), float(mean) if mean else None))
    return rows


def write_jsonl(path, records):
    lines = [json.dumps(r, sort_keys=True) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_jsonl(path):
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines()):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}: line {n + 1}: {exc}") from None
    return out


def write_table(path, header, rows):
    """CSV with stable float formatting."""
    _write_csv(path, header, [[fmt(v) if isinstance(v, float) else v for v in row] for row in rows])


def read_table(path, required=()):
    return _open_csv(path, required)


def aligned_text(header, rows, precision=4) -> str:
    cells = [[str(h) for h in header]]
    for row in rows:
        cells.append([f"{v:.{precision}f}" if isinstance(v, float) else str(v) for v in row])
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells) + "\n"

"""File formats: cross-section JSON, ASCII OBJ, binary PGM masks."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .geometry import Contour2D, CrossSectionSet, GeometryError, Plane, Section, TriMesh, contours_from_mask


class FormatError(ValueError):
    """Malformed input file."""


def sections_to_dict(sections: CrossSectionSet) -> dict:
    planes = []
    for s in sections.sections:
        planes.append(
            {
                "origin": s.plane.origin.tolist(),
                "u": s.plane.u.tolist(),
                "v": s.plane.v.tolist(),
                "contours": [c.vertices.tolist() for c in s.contours],
            }
        )
    return {"planes": planes}


def sections_from_dict(doc: dict) -> CrossSectionSet:
    try:
        planes = doc["planes"]
        out = []
        for p in planes:
            plane = Plane(p["origin"], p["u"], p["v"])
            contours = tuple(Contour2D(c) for c in p.get("contours", []))
            out.append(Section(plane, contours))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad cross-section document: {exc}") from exc
    except GeometryError as exc:
        raise FormatError(str(exc)) from exc
    return CrossSectionSet(tuple(out))


def write_sections(path, sections: CrossSectionSet, extra: dict | None = None) -> None:
    doc = sections_to_dict(sections)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1))


def read_sections(path) -> CrossSectionSet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return sections_from_dict(doc)


def write_obj(path, mesh: TriMesh, header: str | None = None) -> None:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    lines.extend(f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist())
    lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist())
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(t) for t in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(t.split("/")[0]) for t in parts[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    # fan-triangulate polygons
                    faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    try:
        return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except GeometryError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    """Binary (P5) PGM, 8- or 16-bit. Returns the raw pixel array."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos)
    return arr.reshape(h, w)


def write_pgm(path, mask: np.ndarray) -> None:
    img = (np.asarray(mask) > 0).astype(np.uint8) * 255
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_mask_stack(sidecar_path, resolution: int = 512) -> CrossSectionSet:
    """Masks listed in a JSON sidecar, each with its plane.

    Sidecar layout::

        {"slices": [{"mask": "s000.pgm", "origin": [...], "u": [...], "v": [...],
                     "pixel_size": 0.5}, ...]}

    Pixel (row, col) sits at plane coordinates (col, row) * pixel_size.
    """
    sidecar_path = Path(sidecar_path)
    doc = json.loads(sidecar_path.read_text())
    out = []
    for entry in doc["slices"]:
        mask = read_pgm(sidecar_path.parent / entry["mask"]) > 0
        plane = Plane(entry["origin"], entry["u"], entry["v"])
        contours = contours_from_mask(mask, resolution, float(entry.get("pixel_size", 1.0)))
        out.append(Section(plane, tuple(contours)))
    return CrossSectionSet(tuple(out))


def atomic_write_bytes(path, payload: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)

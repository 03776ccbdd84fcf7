"""Shapes, registration pairs and dataset manifests.

Clouds come from ASCII OFF/PLY meshes, from analytic primitives, or from
"composite" shapes made of a few randomly placed primitives (asymmetric, so
their pose is recoverable). Every generator takes an explicit
``numpy.random.Generator`` and is reproducible from its seed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RigidTransform, as_points, random_transform
from .neighbors import SpatialIndex

PRIMITIVES = ("sphere", "box", "cylinder", "torus")
CROP_MODES = ("corresponding", "world")
SPLITS = ("train", "test")


class MeshFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int


# ---------------------------------------------------------------------------
# mesh files
# ---------------------------------------------------------------------------


def _content_lines(text: str):
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line


def _fan(poly: list[int]) -> list[tuple[int, int, int]]:
    return [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


def _finish_mesh(vertices, polygons, path) -> Mesh:
    V = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(V)):
        raise MeshFormatError(f"{path}: non-finite vertex coordinates")
    tris = []
    for poly in polygons:
        if len(poly) < 3:
            raise MeshFormatError(f"{path}: face with {len(poly)} vertices")
        if min(poly) < 0 or max(poly) >= len(V):
            raise MeshFormatError(f"{path}: face index out of range (vertex count {len(V)})")
        tris += _fan(poly)
    return Mesh(V, np.asarray(tris, dtype=np.int64).reshape(-1, 3))


def _parse_off(text: str, path) -> Mesh:
    lines = _content_lines(text)
    head = next(lines, "")
    if not head.startswith("OFF"):
        raise MeshFormatError(f"{path}: missing OFF header")
    rest = head[3:].strip()  # ModelNet writes e.g. "OFF490 518 0" on one line
    try:
        counts = [int(x) for x in (rest or next(lines)).split()]
        nv, nf = counts[0], counts[1]
        vertices = [[float(x) for x in next(lines).split()[:3]] for _ in range(nv)]
        polygons = []
        for _ in range(nf):
            tok = next(lines).split()
            k = int(tok[0])
            polygons.append([int(x) for x in tok[1 : 1 + k]])
            if len(polygons[-1]) != k:
                raise MeshFormatError(f"{path}: truncated face record")
    except (StopIteration, ValueError, IndexError) as exc:
        if isinstance(exc, MeshFormatError):
            raise
        raise MeshFormatError(f"{path}: malformed OFF body ({exc})") from None
    return _finish_mesh(vertices, polygons, path)


def _parse_ply(text: str, path) -> Mesh:
    lines = iter(text.splitlines())
    if next(lines, "").strip() != "ply":
        raise MeshFormatError(f"{path}: missing ply magic")
    elements = []  # [name, count, [property names]]
    for raw in lines:
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise MeshFormatError(f"{path}: only ASCII PLY is supported, got {tok[1]}")
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            break
    else:
        raise MeshFormatError(f"{path}: missing end_header")
    body = (ln for ln in lines if ln.strip())
    vertices, polygons = [], []
    try:
        for name, count, props in elements:
            for _ in range(count):
                tok = next(body).split()
                if name == "vertex":
                    vertices.append([float(tok[props.index(a)]) for a in "xyz"])
                elif name == "face":
                    k = int(tok[0])
                    polygons.append([int(x) for x in tok[1 : 1 + k]])
    except (StopIteration, ValueError, IndexError) as exc:
        raise MeshFormatError(f"{path}: malformed PLY body ({exc})") from None
    return _finish_mesh(vertices, polygons, path)


def load_mesh(path) -> Mesh:
    """Parse an ASCII OFF or PLY triangle mesh; polygons are fan-triangulated."""
    path = Path(path)
    text = path.read_text()
    if text.lstrip().startswith("ply"):
        return _parse_ply(text, path)
    return _parse_off(text.lstrip(), path)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def normalize_cloud(points) -> np.ndarray:
    """Centre on the centroid and scale so the farthest point has norm 1."""
    pts = as_points(points)
    centered = pts - pts.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    return centered / radius if radius > 0 else centered


def triangle_areas(vertices, faces) -> np.ndarray:
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator, normalize: bool = True) -> np.ndarray:
    """``n`` area-uniform surface samples (faces by area, uniform barycentrics)."""
    areas = triangle_areas(mesh.vertices, mesh.faces) if len(mesh.faces) else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise MeshFormatError("mesh has no face with positive area")
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.uniform(size=(n, 1)))
    r2 = rng.uniform(size=(n, 1))
    a, b, c = (mesh.vertices[mesh.faces[face, k]] for k in range(3))
    pts = (1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c
    return normalize_cloud(pts) if normalize else pts


def _sample_sphere(n, rng, radius=1.0):
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_box(n, rng, dims=(1.0, 1.0, 1.0)):
    dims = np.asarray(dims, dtype=np.float64)
    pair_areas = np.array([dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]])
    face = rng.choice(6, size=n, p=np.repeat(pair_areas, 2) / (2 * pair_areas.sum()))
    pts = (rng.uniform(size=(n, 3)) - 0.5) * dims
    axis, side = face // 2, np.where(face % 2 == 0, -0.5, 0.5)
    pts[np.arange(n), axis] = side * dims[axis]
    return pts


def _sample_cylinder(n, rng, radius=0.5, height=1.0):
    side, cap = 2 * np.pi * radius * height, np.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    rho = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(part == 0, rng.uniform(-height / 2, height / 2, size=n), np.where(part == 1, -height / 2, height / 2))
    return np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])


def _sample_torus(n, rng, major=1.0, minor=0.3):
    # area element is proportional to (major + minor cos v): rejection-sample v
    out = np.empty(0)
    while len(out) < n:
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        accept = rng.uniform(size=2 * n) * (major + minor) <= major + minor * np.cos(v)
        out = np.concatenate([out, v[accept]])
    v = out[:n]
    u = rng.uniform(0, 2 * np.pi, size=n)
    ring = major + minor * np.cos(v)
    return np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])


_SAMPLERS = {"sphere": _sample_sphere, "box": _sample_box, "cylinder": _sample_cylinder, "torus": _sample_torus}


def _primitive_area(kind, params) -> float:
    if kind == "sphere":
        return 4 * np.pi * params["radius"] ** 2
    if kind == "box":
        x, y, z = params["dims"]
        return 2 * (x * y + y * z + x * z)
    if kind == "cylinder":
        r, h = params["radius"], params["height"]
        return 2 * np.pi * r * h + 2 * np.pi * r**2
    return 4 * np.pi**2 * params["major"] * params["minor"]


def synth_primitive(kind: str, n: int, rng: np.random.Generator, normalize: bool = True) -> np.ndarray:
    """Area-uniform samples of a unit-scale sphere, box, cylinder or torus."""
    if kind not in _SAMPLERS:
        raise ValueError(f"unknown primitive {kind!r} (expected one of {PRIMITIVES})")
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = _SAMPLERS[kind](n, rng)
    return normalize_cloud(pts) if normalize else pts


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def composite_parts(seed: int) -> list[tuple[str, dict, np.ndarray, np.ndarray]]:
    """Deterministic part list ``(kind, params, rotation, offset)`` of a composite shape."""
    rng = np.random.default_rng([seed, 7])
    parts = []
    for _ in range(int(rng.integers(2, 4))):
        kind = PRIMITIVES[int(rng.integers(len(PRIMITIVES)))]
        if kind == "sphere":
            params = {"radius": rng.uniform(0.2, 0.5)}
        elif kind == "box":
            params = {"dims": rng.uniform(0.2, 1.0, size=3)}
        elif kind == "cylinder":
            params = {"radius": rng.uniform(0.1, 0.4), "height": rng.uniform(0.4, 1.2)}
        else:
            major = rng.uniform(0.3, 0.6)
            params = {"major": major, "minor": rng.uniform(0.08, 0.4) * major}
        parts.append((kind, params, _random_rotation(rng), rng.uniform(-0.5, 0.5, size=3)))
    return parts


def composite_category(seed: int) -> str:
    return "+".join(sorted({kind for kind, *_ in composite_parts(seed)}))


def synth_composite(seed: int, n: int, rng: np.random.Generator, normalize: bool = True) -> np.ndarray:
    """Union of 2-3 randomly sized, posed primitives; points split across parts by surface area."""
    parts = composite_parts(seed)
    areas = np.array([_primitive_area(kind, params) for kind, params, _, _ in parts])
    counts = rng.multinomial(n, areas / areas.sum())
    chunks = []
    for (kind, params, R, offset), k in zip(parts, counts):
        chunks.append(_SAMPLERS[kind](int(k), rng, **params) @ R.T + offset)
    pts = np.concatenate(chunks)[rng.permutation(n)]
    return normalize_cloud(pts) if normalize else pts


def load_shape(entry: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Cloud for a manifest entry: ``prim:<kind>``, ``composite:<seed>`` or a mesh path."""
    if entry.startswith("prim:"):
        return synth_primitive(entry[5:], n, rng)
    if entry.startswith("composite:"):
        return synth_composite(int(entry[10:]), n, rng)
    return sample_surface(load_mesh(entry), n, rng)


# ---------------------------------------------------------------------------
# registration pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairConfig:
    rot_max_deg: float = 45.0
    trans_max: float = 0.5
    crop: bool = True
    crop_size: int = 768
    far_distance: float = 5.0
    # "corresponding": the source is cropped around the far point pulled back through the
    # true transform, so both crops cover the same surface patch; "world": one far point
    # in world coordinates for both clouds, giving partial overlap
    crop_mode: str = "corresponding"
    noise: bool = False
    noise_std: float = 0.01
    noise_clip: float = 0.05


@dataclass
class RegistrationPair:
    source: np.ndarray
    target: np.ndarray
    gt: RigidTransform
    provenance: dict = field(default_factory=dict)


def crop_nearest(points, anchor, count: int) -> np.ndarray:
    """The ``count`` points closest to ``anchor``, in their original order."""
    pts = as_points(points)
    if count > len(pts):
        raise ValueError(f"crop size {count} exceeds cloud size {len(pts)}")
    idx, _ = SpatialIndex(pts).knn_batch(np.asarray(anchor).reshape(1, 3), count)
    return pts[np.sort(idx[0])]


def make_pair(pc, cfg: PairConfig, rng: np.random.Generator, provenance: dict | None = None) -> RegistrationPair:
    """Source = ``pc``; target = random rigid image of it, optionally cropped and noised.

    Cropping keeps the ``crop_size`` points of each cloud nearest a random far
    point (see ``PairConfig.crop_mode``). Target rows are shuffled so row
    order carries no correspondence information.
    """
    src = as_points(pc)
    if cfg.crop_mode not in CROP_MODES:
        raise ValueError(f"unknown crop_mode {cfg.crop_mode!r} (expected one of {CROP_MODES})")
    if cfg.crop and cfg.crop_size > len(src):
        raise ValueError(f"crop size {cfg.crop_size} exceeds cloud size {len(src)}")
    gt = random_transform(cfg.rot_max_deg, cfg.trans_max, rng)
    tgt = gt.apply(src)
    if cfg.crop:
        d = rng.normal(size=3)
        far = cfg.far_distance * d / np.linalg.norm(d)
        src_far = gt.inverse().apply(far[None, :])[0] if cfg.crop_mode == "corresponding" else far
        src = crop_nearest(src, src_far, cfg.crop_size)
        tgt = crop_nearest(tgt, far, cfg.crop_size)
    tgt = tgt[rng.permutation(len(tgt))]
    if cfg.noise:
        src = src + np.clip(rng.normal(0, cfg.noise_std, size=src.shape), -cfg.noise_clip, cfg.noise_clip)
        tgt = tgt + np.clip(rng.normal(0, cfg.noise_std, size=tgt.shape), -cfg.noise_clip, cfg.noise_clip)
    prov = {**(provenance or {}), "crop": cfg.crop, "noise": cfg.noise}
    return RegistrationPair(src, tgt, gt, prov)


def pair_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_pairs(entries, seed: int, cfg: PairConfig = PairConfig(), n_points: int = 1024) -> list[RegistrationPair]:
    """One pair per manifest entry, each from its own derived seed."""
    pairs = []
    for i, e in enumerate(entries):
        rng = pair_rng(seed, i)
        pc = load_shape(e.shape, n_points, rng)
        pairs.append(make_pair(pc, cfg, rng, {"shape": e.shape, "category": e.category, "seed": seed, "index": i}))
    return pairs


def _fmt(x: float) -> str:
    return repr(float(x))


def write_pair(path, pair: RegistrationPair) -> None:
    """Plain-text pair: provenance/gt comment lines, the 12-number gt line, then XYZ rows."""
    lines = ["# idam-pair v1 " + " ".join(f"{k}={v}" for k, v in pair.provenance.items()), "# gt: row-major R then t"]
    lines.append(" ".join(_fmt(x) for x in pair.gt.to_row12()))
    lines.append(f"# source {len(pair.source)}")
    lines += [" ".join(_fmt(x) for x in p) for p in pair.source]
    lines.append(f"# target {len(pair.target)}")
    lines += [" ".join(_fmt(x) for x in p) for p in pair.target]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pair(path) -> RegistrationPair:
    lines = Path(path).read_text().splitlines()
    prov = {}
    if lines and lines[0].startswith("# idam-pair v1"):
        for tok in lines[0][len("# idam-pair v1") :].split():
            k, _, v = tok.partition("=")
            prov[k] = {"True": True, "False": False}.get(v, v)
    sections: dict[str, list] = {}
    current, gt = None, None
    for ln in lines:
        if ln.startswith("# source") or ln.startswith("# target"):
            current = ln.split()[1]
            sections[current] = []
        elif ln.startswith("#") or not ln.strip():
            continue
        elif current is None:
            gt = RigidTransform.from_row12([float(x) for x in ln.split()])
        else:
            sections[current].append([float(x) for x in ln.split()])
    if gt is None or "source" not in sections or "target" not in sections:
        raise ValueError(f"{path}: incomplete pair file")
    return RegistrationPair(as_points(sections["source"]), as_points(sections["target"]), gt, prov)


def write_xyz(path, points) -> None:
    Path(path).write_text("".join(" ".join(_fmt(x) for x in p) + "\n" for p in as_points(points)))


def read_xyz(path) -> np.ndarray:
    rows = [ln.split()[:3] for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    return as_points(np.array(rows, dtype=np.float64).reshape(-1, 3), str(path))


# ---------------------------------------------------------------------------
# manifests: one "<shape>\t<split>\t<category>" line per item
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    shape: str
    split: str
    category: str


def write_manifest(path, entries, header: str | None = None) -> None:
    """Write entries; ``header`` (one line) is stored as a leading ``#`` comment."""
    out = [f"# {header}\n"] if header else []
    for e in entries:
        if e.split not in SPLITS:
            raise ManifestError(f"unknown split {e.split!r} for {e.shape}")
        if any("\t" in s or "\n" in s for s in (e.shape, e.split, e.category)):
            raise ManifestError(f"tab or newline inside manifest field: {e}")
        out.append(f"{e.shape}\t{e.split}\t{e.category}\n")
    Path(path).write_text("".join(out))


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        shape, split, category = fields
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split tag {split!r}")
        entries.append(ManifestEntry(shape, split, category))
    return entries


def synthetic_manifest(count: int, seed: int, test_fraction: float = 0.2) -> list[ManifestEntry]:
    """Composite shapes with derived seeds; the last ``test_fraction`` are tagged ``test``."""
    n_test = int(round(count * test_fraction))
    out = []
    for i in range(count):
        shape_seed = int(np.random.default_rng([seed, i, 1]).integers(2**31))
        out.append(ManifestEntry(f"composite:{shape_seed}", "test" if i >= count - n_test else "train", composite_category(shape_seed)))
    return out


def protocol_split(entries, protocol: str) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Train/test lists for ``unseen-shapes``, ``noisy`` or ``unseen-categories``.

    Unseen categories: sorted category names, the first half train and the
    second half test (each side still restricted to its own split tag).
    """
    entries = list(entries)
    if protocol in ("unseen-shapes", "noisy"):
        return [e for e in entries if e.split == "train"], [e for e in entries if e.split == "test"]
    if protocol == "unseen-categories":
        cats = sorted({e.category for e in entries})
        first = set(cats[: math.ceil(len(cats) / 2)])
        return (
            [e for e in entries if e.split == "train" and e.category in first],
            [e for e in entries if e.split == "test" and e.category not in first],
        )
    raise ValueError(f"unknown protocol {protocol!r}")


def pair_config_for(protocol: str, **overrides) -> PairConfig:
    if protocol not in ("unseen-shapes", "unseen-categories", "noisy"):
        raise ValueError(f"unknown protocol {protocol!r}")
    return PairConfig(**{"noise": protocol == "noisy", **overrides})


def pair_config_dict(cfg: PairConfig) -> dict:
    return asdict(cfg)

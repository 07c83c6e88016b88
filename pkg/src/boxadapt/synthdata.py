"""Synthetic two-domain slice benchmark, box derivation and file formats.

Each patient owns one ellipse geometry; its slices shrink away from the
centre slice and jitter slightly, like adjacent CT slices through an organ.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import BoxMask

BAR_MAGIC = b"BAR1"
BAR_F32, BAR_U8 = 0, 1

ROLES = ("source-labeled", "target-unlabeled", "target-weak", "eval")


class RasterError(Exception):
    pass


class RasterFormatError(RasterError):
    pass


class RasterTruncatedError(RasterError):
    pass


class RasterDtypeError(RasterError):
    pass


class ManifestError(ValueError):
    pass


class DataConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# BAR1 rasters


def raster_write(grid, path) -> None:
    a = np.asarray(grid)
    if a.ndim != 2:
        raise RasterError(f"BAR1 stores rank-2 grids, got shape {a.shape}")
    if a.dtype == np.uint8 or a.dtype == np.bool_:
        code, payload = BAR_U8, a.astype(np.uint8).tobytes()
    else:
        code, payload = BAR_F32, np.ascontiguousarray(a, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(BAR_MAGIC + struct.pack("<IIB", a.shape[0], a.shape[1], code) + payload)


def raster_read(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != BAR_MAGIC:
        raise RasterFormatError(f"{path}: not a BAR1 file")
    if len(data) < 13:
        raise RasterTruncatedError(f"{path}: truncated header")
    h, w, code = struct.unpack_from("<IIB", data, 4)
    if code == BAR_F32:
        dtype, size = np.dtype("<f4"), 4
    elif code == BAR_U8:
        dtype, size = np.dtype(np.uint8), 1
    else:
        raise RasterDtypeError(f"{path}: unknown dtype code {code}")
    need = 13 + h * w * size
    if len(data) < need:
        raise RasterTruncatedError(f"{path}: payload has {len(data) - 13} bytes, need {need - 13}")
    out = np.frombuffer(data, dtype=dtype, count=h * w, offset=13).reshape(h, w)
    return out.astype(np.float32) if code == BAR_F32 else out.copy()


# ---------------------------------------------------------------------------
# manifest


@dataclass
class Manifest:
    """Ordered JSON-lines records; paths are relative to ``root``."""

    records: list[dict]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for r in self.records:
            if r["id"] in seen:
                raise ManifestError(f"duplicate id {r['id']!r}")
            seen.add(r["id"])

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_role(self, role: str) -> list[dict]:
        return [r for r in self.records if r["role"] == role]

    def path(self, rel: str) -> Path:
        return self.root / rel


def write_manifest(manifest: Manifest, path) -> None:
    lines = [json.dumps(r, separators=(",", ":")) for r in manifest.records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc
        if not isinstance(rec, dict) or "id" not in rec or "role" not in rec:
            raise ManifestError(f"{path}:{lineno}: record needs at least 'id' and 'role'")
        records.append(rec)
    m = Manifest(records, path.parent)
    if check_files:
        for r in records:
            for key in ("image_path", "mask_path"):
                if key in r and not m.path(r[key]).is_file():
                    raise ManifestError(f"{path}: record {r['id']!r} references missing file "
                                        f"{m.path(r[key])}")
    return m


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class DomainSpec:
    name: str
    height: int = 64
    width: int = 64
    fg_mean: float = 0.7
    fg_std: float = 0.05
    bg_mean: float = 0.3
    bg_std: float = 0.05
    noise_std: float = 0.08
    radius_range: tuple = (8.0, 14.0)
    distractors: int = 0
    distractor_radius: tuple = (3.0, 5.0)
    seed: int = 0

    def validate(self) -> None:
        for name in ("fg_std", "bg_std", "noise_std"):
            if getattr(self, name) < 0:
                raise DataConfigError(f"{self.name}: {name} must be >= 0")
        rmin, rmax = self.radius_range
        if rmin <= 0 or rmax < rmin:
            raise DataConfigError(f"{self.name}: degenerate radius range {self.radius_range}")
        if 2 * rmax * MAX_SCALE + 4 > min(self.height, self.width):
            raise DataConfigError(f"{self.name}: radius {rmax} does not fit a "
                                  f"{self.height}x{self.width} image")


# the target is 0.25 brighter in both regions with 1.3x larger radii
SOURCE_DOMAIN = DomainSpec("source", fg_mean=0.7, bg_mean=0.1, radius_range=(7.0, 11.0))
TARGET_DOMAIN = DomainSpec("target", fg_mean=0.95, bg_mean=0.35, radius_range=(9.1, 14.3), seed=1)

# per-slice radius scale: MIN_SCALE at the outermost slice, up to MAX_SCALE with jitter
MIN_SCALE, MAX_SCALE = 0.7, 1.03
SECOND_ELLIPSE_P = 0.3


def _ellipse(h, w, cy, cx, ry, rx, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def _patient_geometry(spec: DomainSpec, rng: np.random.Generator) -> list[tuple]:
    rmin, rmax = spec.radius_range
    ry, rx = rng.uniform(rmin, rmax, size=2)
    theta = rng.uniform(0, np.pi)
    reach = max(ry, rx) * MAX_SCALE + 2
    cy = rng.uniform(reach, spec.height - reach)
    cx = rng.uniform(reach, spec.width - reach)
    shapes = [(cy, cx, ry, rx, theta)]
    if rng.random() < SECOND_ELLIPSE_P:
        f = rng.uniform(0.5, 0.8)
        ry2, rx2 = max(ry * f, rmin), max(rx * f, rmin)
        reach2 = max(ry2, rx2) * MAX_SCALE + 2
        ang = rng.uniform(0, 2 * np.pi)
        cy2 = float(np.clip(cy + np.sin(ang) * ry, reach2, spec.height - reach2))
        cx2 = float(np.clip(cx + np.cos(ang) * rx, reach2, spec.width - reach2))
        shapes.append((cy2, cx2, ry2, rx2, rng.uniform(0, np.pi)))
    return shapes


def slice_scale(j: int, n: int) -> float:
    """Radius scale of slice j: 1 at the centre, MIN_SCALE at the ends."""
    if n == 1:
        return 1.0
    d = abs(j - (n - 1) / 2) / ((n - 1) / 2)
    return 1.0 - (1.0 - MIN_SCALE) * d * d


def _distractors(spec: DomainSpec, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Object-intensity discs kept at least 3 px away from the labelled object."""
    out = np.zeros_like(mask)
    if spec.distractors == 0:
        return out
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    fy, fx = np.nonzero(mask)
    for _ in range(spec.distractors):
        r = rng.uniform(*spec.distractor_radius)
        for _attempt in range(100):
            cy = rng.uniform(r + 1, spec.height - r - 1)
            cx = rng.uniform(r + 1, spec.width - r - 1)
            if fy.size == 0 or np.min((fy - cy) ** 2 + (fx - cx) ** 2) > (r + 3) ** 2:
                out |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                break
    return out


def render_patient(spec: DomainSpec, n_slices: int, rng: np.random.Generator):
    """Yield (image float32, mask uint8) for each slice of one patient."""
    shapes = _patient_geometry(spec, rng)
    for j in range(n_slices):
        scale = slice_scale(j, n_slices) * rng.uniform(0.97, 1.03)
        mask = np.zeros((spec.height, spec.width), dtype=bool)
        for cy, cx, ry, rx, th in shapes:
            jy, jx = rng.uniform(-1, 1, size=2)
            mask |= _ellipse(spec.height, spec.width, cy + jy, cx + jx,
                             ry * scale, rx * scale, th)
        fg = rng.normal(spec.fg_mean, spec.fg_std)
        bg = rng.normal(spec.bg_mean, spec.bg_std)
        bright = mask | _distractors(spec, mask, rng)
        img = np.where(bright, fg, bg) + rng.normal(0, spec.noise_std, size=mask.shape)
        yield np.clip(img, 0, 1).astype(np.float32), mask.astype(np.uint8)


def derive_box(mask, margin: int = 1, jitter: int = 2, seed=0) -> BoxMask:
    """Tight rectangle around the foreground, grown by margin plus random outward jitter."""
    m = np.asarray(mask) > 0
    if not m.any():
        raise ValueError("cannot derive a box from an empty mask")
    h, w = m.shape
    rows, cols = np.flatnonzero(m.any(axis=1)), np.flatnonzero(m.any(axis=0))
    rng = np.random.default_rng(seed)
    j = rng.integers(0, jitter + 1, size=4) if jitter > 0 else np.zeros(4, dtype=int)
    r0 = max(int(rows[0]) - margin - int(j[0]), 0)
    c0 = max(int(cols[0]) - margin - int(j[1]), 0)
    r1 = min(int(rows[-1]) + 1 + margin + int(j[2]), h)
    c1 = min(int(cols[-1]) + 1 + margin + int(j[3]), w)
    return BoxMask(((r0, c0, r1, c1),), h, w)


def _box_seed(seed: int, rec: dict) -> list[int]:
    return [seed, 7, int(rec["patient"].rsplit("-", 1)[-1]), int(rec["slice"])]


def generate_dataset(out_dir, source: DomainSpec = SOURCE_DOMAIN, target: DomainSpec = TARGET_DOMAIN,
                     patients: int = 20, slices: int = 7, eval_patients: int = 4,
                     seed: int = 0) -> Manifest:
    """Write images, masks and ``manifest.jsonl`` under ``out_dir``.

    Target training slices start as ``target-unlabeled``; use
    :func:`select_annotated` to hand out boxes.
    """
    if patients < 1 or slices < 1 or eval_patients < 0:
        raise DataConfigError("patients and slices must be >= 1, eval_patients >= 0")
    source.validate()
    target.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    plan = [(source, "src", i, "source-labeled") for i in range(patients)]
    plan += [(target, "tgt", i, "target-unlabeled") for i in range(patients)]
    plan += [(target, "tgt", patients + i, "eval") for i in range(eval_patients)]
    records = []
    for spec, tag, pidx, role in plan:
        rng = np.random.default_rng([seed, spec.seed, pidx])
        pid = f"{tag}-{pidx:03d}"
        for j, (img, mask) in enumerate(render_patient(spec, slices, rng)):
            sid = f"{pid}-s{j:02d}"
            raster_write(img, out / "images" / f"{sid}.bar")
            raster_write(mask, out / "masks" / f"{sid}.bar")
            records.append({"id": sid, "patient": pid, "slice": j, "domain": spec.name,
                            "role": role, "image_path": f"images/{sid}.bar",
                            "mask_path": f"masks/{sid}.bar"})
    manifest = Manifest(records, out)
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def center_slices(n: int, k: int) -> list[int]:
    """The k slice indices closest to the centre, ties toward lower index."""
    if not 0 <= k <= n:
        raise ValueError(f"cannot pick {k} of {n} slices")
    c = (n - 1) / 2
    return sorted(sorted(range(n), key=lambda j: (abs(j - c), j))[:k])


def select_annotated(manifest: Manifest, k: int, seed: int = 0, margin: int = 1,
                     jitter: int = 2) -> Manifest:
    """Give boxes to the k centre-most slices of every target training patient."""
    by_patient: dict[str, list[dict]] = {}
    for r in manifest:
        if r["role"] in ("target-unlabeled", "target-weak"):
            by_patient.setdefault(r["patient"], []).append(r)
    chosen = set()
    for pid, recs in by_patient.items():
        recs = sorted(recs, key=lambda r: r["slice"])
        if k > len(recs):
            raise ValueError(f"patient {pid} has {len(recs)} slices, cannot annotate {k}")
        chosen.update(recs[j]["id"] for j in center_slices(len(recs), k))
    out = []
    for r in manifest:
        r = dict(r)
        if r["role"] in ("target-unlabeled", "target-weak"):
            r.pop("box", None)
            if r["id"] in chosen:
                mask = raster_read(manifest.path(r["mask_path"]))
                box = derive_box(mask, margin, jitter, _box_seed(seed, r))
                r["role"] = "target-weak"
                r["box"] = list(box.rects[0])
            else:
                r["role"] = "target-unlabeled"
        out.append(r)
    return Manifest(out, manifest.root)


# ---------------------------------------------------------------------------
# in-memory splits


@dataclass
class Split:
    """Stacked arrays for one role: images (N, 1, H, W)."""

    ids: list[str]
    images: np.ndarray
    masks: np.ndarray | None = None
    boxes: np.ndarray | None = None

    def __len__(self):
        return len(self.ids)


def load_split(manifest: Manifest, role: str, with_masks: bool | None = None) -> Split:
    """Load one role.  Masks are loaded for source and eval roles by default."""
    recs = manifest.by_role(role)
    if with_masks is None:
        with_masks = role in ("source-labeled", "eval")
    if not recs:
        return Split([], np.zeros((0, 1, 0, 0), np.float32))
    images = np.stack([raster_read(manifest.path(r["image_path"])) for r in recs])[:, None]
    masks = boxes = None
    if with_masks:
        if any("mask_path" not in r for r in recs):
            raise ManifestError(f"role {role!r} has records without masks")
        masks = np.stack([raster_read(manifest.path(r["mask_path"])) for r in recs])
    if role == "target-weak":
        h, w = images.shape[-2:]
        boxes = np.stack([BoxMask((tuple(r["box"]),), h, w).w for r in recs])
    return Split([r["id"] for r in recs], images, masks, boxes)


def domain_spec_dict(spec: DomainSpec) -> dict:
    return asdict(spec)

"""Procedural articulated-figure scenes with masks at three granularities.

Geometry is integer-only (fixed point, 1/4 pixel) so the label masks are
bit-identical on every platform; only the photometric texture uses floats.
Only the fine mask is rasterised; coarser masks are derived from it through
the label hierarchy, which makes them consistent by construction.

Also here: PPM/PGM codecs, dataset manifests, synthetic word embeddings and
on-disk dataset export.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import rng
from .errors import ConfigError, DataError, ParseError
from .taxonomy import (LabelTaxonomy, WordEmbeddingTable, load_taxonomy, projection_lut,
                       save_embeddings)

log = logging.getLogger(__name__)

FP = 4  # fixed-point subdivisions per pixel
FINE, MID, COARSE = "fine", "mid", "coarse"


@dataclass(frozen=True)
class SceneConfig:
    resolution: int = 64
    max_figures: int = 2
    two_figure_prob: float = 0.25
    occlusion: bool = True
    noise: float = 0.03
    stride: int = 4

    def validate(self):
        if self.resolution < 16 or self.resolution % self.stride:
            raise ConfigError(f"resolution {self.resolution} must be >= 16 and divisible by "
                              f"the backbone stride {self.stride}")
        if self.max_figures not in (1, 2):
            raise ConfigError("max_figures must be 1 or 2")


@dataclass
class Sample:
    image: np.ndarray                     # [H, W, 3] float32 in [0, 1]
    masks: Dict[str, np.ndarray]          # dataset -> [H, W] uint8
    seed: int
    meta: dict = field(default_factory=dict)


# ------------------------------------------------------------ rasterising


class _Canvas:
    def __init__(self, size: int):
        ys, xs = np.mgrid[0:size, 0:size]
        self.x = xs.astype(np.int64) * FP + FP // 2
        self.y = ys.astype(np.int64) * FP + FP // 2
        self.size = size

    def ellipse(self, cx, cy, rx, ry):
        dx = (self.x - cx) * ry
        dy = (self.y - cy) * rx
        return dx * dx + dy * dy <= (rx * ry) ** 2

    def capsule(self, ax, ay, bx, by, r):
        """Pixels within distance r of segment a-b (exact integer test)."""
        vx, vy = bx - ax, by - ay
        px, py = self.x - ax, self.y - ay
        len2 = vx * vx + vy * vy
        dot = px * vx + py * vy
        d_a = px * px + py * py
        qx, qy = self.x - bx, self.y - by
        d_b = qx * qx + qy * qy
        cross = px * vy - py * vx
        inside = (dot > 0) & (dot < len2)
        if len2 == 0:
            return d_a <= r * r
        return np.where(inside, cross * cross <= r * r * len2,
                        np.where(dot <= 0, d_a <= r * r, d_b <= r * r))

    def polygon(self, pts):
        """Convex polygon given clockwise-or-counterclockwise integer vertices."""
        inside_pos = np.ones(self.x.shape, bool)
        inside_neg = np.ones(self.x.shape, bool)
        n = len(pts)
        for i in range(n):
            (x0, y0), (x1, y1) = pts[i], pts[(i + 1) % n]
            c = (x1 - x0) * (self.y - y0) - (y1 - y0) * (self.x - x0)
            inside_pos &= c >= 0
            inside_neg &= c <= 0
        return inside_pos | inside_neg

    def rows(self, y0, y1):
        return (self.y >= y0) & (self.y < y1)


def _ri(rs: np.random.Generator, lo: int, hi: int) -> int:
    """Integer uniform on [lo, hi]."""
    return int(rs.integers(lo, hi + 1))


def _figure_geometry(rs, canvas: _Canvas, height: int, cx: int, top: int, lab):
    """Rasterise one figure; returns list of (fine_label_index, mask) in paint order."""
    u = height  # fixed-point units
    layers: List[Tuple[int, np.ndarray]] = []
    meta = {}

    head_rx = u * _ri(rs, 80, 95) // 1000
    head_ry = u * _ri(rs, 95, 110) // 1000
    head_cy = top + head_ry
    head_cx = cx + _ri(rs, -u // 60, u // 60)
    neck_y = head_cy + head_ry
    sh_y = neck_y + u * 30 // 1000
    hip_y = sh_y + u * _ri(rs, 290, 330) // 1000
    half_w = u * _ri(rs, 120, 145) // 1000
    hip_w = u * _ri(rs, 95, 120) // 1000

    # legs
    leg_r = u * _ri(rs, 50, 60) // 1000
    upper_len = u * 210 // 1000
    lower_len = u * 210 // 1000
    hip_off = hip_w - leg_r
    knees, feet = [], []
    for side in (-1, 1):
        hx = cx + side * hip_off
        kx = hx + side * _ri(rs, 0, u * 90 // 1000)
        ky = hip_y + upper_len
        fx = kx + side * _ri(rs, -u * 20 // 1000, u * 80 // 1000)
        fy = ky + lower_len
        knees.append((hx, kx, ky))
        feet.append((fx, fy))
    skirt = rs.random() < 0.35
    for k, side in enumerate((-1, 1)):
        hx, kx, ky = knees[k]
        fx, fy = feet[k]
        # figure's left is image right
        name = "left" if side > 0 else "right"
        layers.append((lab(f"{name}-leg"), canvas.capsule(kx, ky, fx, fy, leg_r)))
        shoe = canvas.ellipse(fx + side * leg_r // 2, fy, leg_r * 3 // 2, leg_r)
        shoe |= canvas.capsule(kx, ky, fx, fy, leg_r) & (canvas.y >= fy - lower_len * 28 // 100)
        layers.append((lab(f"{name}-shoe"), shoe))
    if skirt:
        kl = knees[0][1] - leg_r - u * 25 // 1000
        kr = knees[1][1] + leg_r + u * 25 // 1000
        ky = knees[0][2] + u * 10 // 1000
        layers.append((lab("skirt"), canvas.polygon(
            [(cx - hip_w, hip_y - u * 20 // 1000), (cx + hip_w, hip_y - u * 20 // 1000),
             (kr, ky), (kl, ky)])))
    else:
        pants = canvas.polygon([(cx - hip_w, hip_y - u * 20 // 1000),
                                (cx + hip_w, hip_y - u * 20 // 1000),
                                (cx + hip_off, hip_y + leg_r * 2), (cx - hip_off, hip_y + leg_r * 2)])
        for k in range(2):
            hx, kx, ky = knees[k]
            pants |= canvas.capsule(hx, hip_y, kx, ky, leg_r + u * 8 // 1000)
        layers.append((lab("pants"), pants))

    # torso and garments
    torso = canvas.polygon([(cx - half_w, sh_y), (cx + half_w, sh_y),
                            (cx + hip_w, hip_y), (cx - hip_w, hip_y)])
    torso |= canvas.ellipse(cx - half_w + u * 30 // 1000, sh_y + u * 20 // 1000,
                            u * 50 // 1000, u * 45 // 1000)
    torso |= canvas.ellipse(cx + half_w - u * 30 // 1000, sh_y + u * 20 // 1000,
                            u * 50 // 1000, u * 45 // 1000)
    torso &= canvas.y >= neck_y
    garment = ("coat", "t-shirt", "sweater")[_ri(rs, 0, 2)]
    meta["garment"] = garment
    if garment == "coat":
        layers.append((lab("coat"), torso))
        inner = u * _ri(rs, 35, 55) // 1000
        layers.append((lab("t-shirt"), torso & (np.abs(canvas.x - cx) <= inner)))
    else:
        layers.append((lab(garment), torso))
    if rs.random() < 0.4:
        belt_h = u * _ri(rs, 30, 45) // 1000
        layers.append((lab("belt"), torso & canvas.rows(hip_y - belt_h, hip_y + FP)))
    if rs.random() < 0.4:
        scarf = canvas.polygon([(cx - half_w * 6 // 10, neck_y - u * 15 // 1000),
                                (cx + half_w * 6 // 10, neck_y - u * 15 // 1000),
                                (cx + half_w * 7 // 10, sh_y + u * 55 // 1000),
                                (cx - half_w * 7 // 10, sh_y + u * 55 // 1000)])
        layers.append((lab("scarf"), scarf))

    # arms
    arm_r = u * _ri(rs, 42, 52) // 1000
    for side in (-1, 1):
        name = "left" if side > 0 else "right"
        sx = cx + side * (half_w - arm_r // 2)
        sy = sh_y + arm_r
        ex = sx + side * _ri(rs, u * 20 // 1000, u * 110 // 1000)
        ey = sy + _ri(rs, u * 130 // 1000, u * 175 // 1000)
        hx = ex + side * _ri(rs, -u * 40 // 1000, u * 130 // 1000)
        hy = ey + _ri(rs, u * 60 // 1000, u * 165 // 1000)
        layers.append((lab(f"{name}-arm"), canvas.capsule(sx, sy, ex, ey, arm_r)))
        layers.append((lab(f"{name}-hand"), canvas.capsule(ex, ey, hx, hy, arm_r * 9 // 10)))

    # head
    head = canvas.ellipse(head_cx, head_cy, head_rx, head_ry)
    layers.append((lab("face"), head))
    hair = canvas.ellipse(head_cx, head_cy - head_ry // 8, head_rx + u * 15 // 1000,
                          head_ry + u * 10 // 1000)
    hair &= (canvas.y <= head_cy - head_ry * _ri(rs, 25, 45) // 100) | \
        (np.abs(canvas.x - head_cx) >= head_rx * 85 // 100) & (canvas.y <= head_cy + head_ry // 3)
    layers.append((lab("hair"), hair))
    if rs.random() < 0.35:
        eye_y = head_cy - head_ry // 8
        glasses = head & canvas.rows(eye_y - u * 22 // 1000, eye_y + u * 22 // 1000) & \
            (np.abs(canvas.x - head_cx) <= head_rx * 85 // 100)
        layers.append((lab("sunglasses"), glasses))
    if rs.random() < 0.4:
        brim_y = head_cy - head_ry * _ri(rs, 35, 55) // 100
        hat = canvas.ellipse(head_cx, brim_y, head_rx + u * 35 // 1000, head_ry) & \
            (canvas.y <= brim_y + u * 12 // 1000)
        layers.append((lab("hat"), hat))
    meta.update(skirt=bool(skirt), cx=int(cx), top=int(top), height=int(height))
    return layers, meta


# ------------------------------------------------------------ photometrics


def _hsv(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _palette(rs) -> Dict[str, np.ndarray]:
    skin_v = rs.uniform(0.45, 0.95)
    skin = _hsv(rs.uniform(0.03, 0.09), rs.uniform(0.3, 0.6), skin_v)
    cloth_h = rs.random()
    pal = {
        "face": skin, "left-hand": skin, "right-hand": skin, "left-leg": skin, "right-leg": skin,
        "hair": _hsv(rs.uniform(0.02, 0.12), rs.uniform(0.3, 0.8), rs.uniform(0.08, 0.4)),
        "hat": _hsv(rs.random(), rs.uniform(0.5, 1.0), rs.uniform(0.4, 0.95)),
        "sunglasses": _hsv(0.6, 0.2, rs.uniform(0.0, 0.12)),
        "coat": _hsv(cloth_h, rs.uniform(0.4, 0.9), rs.uniform(0.25, 0.55)),
        "t-shirt": _hsv(cloth_h, rs.uniform(0.2, 0.6), rs.uniform(0.65, 1.0)),
        "sweater": _hsv(cloth_h, rs.uniform(0.4, 0.9), rs.uniform(0.45, 0.85)),
        "scarf": _hsv(rs.random(), rs.uniform(0.5, 1.0), rs.uniform(0.5, 1.0)),
        "belt": _hsv(0.07, rs.uniform(0.5, 0.9), rs.uniform(0.15, 0.35)),
        "pants": _hsv(rs.uniform(0.55, 0.7), rs.uniform(0.3, 0.8), rs.uniform(0.2, 0.6)),
        "skirt": _hsv(rs.random(), rs.uniform(0.4, 0.9), rs.uniform(0.4, 0.9)),
        "left-shoe": _hsv(rs.random(), rs.uniform(0.0, 0.5), rs.uniform(0.05, 0.3)),
    }
    pal["right-shoe"] = pal["left-shoe"]
    # sleeves follow the torso garment
    return pal


def _background(rs, size) -> np.ndarray:
    base = _hsv(rs.random(), rs.uniform(0.0, 0.5), rs.uniform(0.3, 0.9))
    ys, xs = np.mgrid[0:size, 0:size] / size
    tex = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rs.uniform(0.5, 4.0, size=2)
        tex += rs.uniform(0.02, 0.08) * np.sin(2 * np.pi * (fx * xs + fy * ys) + rs.uniform(0, 6.3))
    return np.clip(base[None, None, :] + tex[..., None] * rs.uniform(0.5, 1.5, size=3), 0, 1)


def generate_scene(seed: int, config: SceneConfig = SceneConfig(),
                   taxonomy: Optional[LabelTaxonomy] = None) -> Sample:
    """Render one scene; identical ``(seed, config)`` gives identical output."""
    config.validate()
    taxonomy = taxonomy or _default_taxonomy()
    size = config.resolution
    geo = rng.stream(seed, "scene.geometry")
    photo = rng.stream(seed, "scene.photometry")
    canvas = _Canvas(size)
    fine_names = taxonomy.labels[FINE]
    lab = fine_names.index

    n_fig = 2 if (config.max_figures == 2 and geo.random() < config.two_figure_prob) else 1
    span = size * FP
    fine = np.zeros((size, size), np.uint8)
    image = _background(photo, size)
    figures = []
    for k in range(n_fig):
        if n_fig == 1:
            height = span * _ri(geo, 80, 94) // 100
            cx = span // 2 + _ri(geo, -span // 6, span // 6)
        else:
            height = span * _ri(geo, 62, 74) // 100
            if config.occlusion:
                cx = span // 2 + (k * 2 - 1) * _ri(geo, span // 9, span // 5)
            else:
                cx = span * (1 + 2 * k) // 4 + _ri(geo, -span // 30, span // 30)
        top = _ri(geo, FP, max(FP, span - height - FP))
        layers, meta = _figure_geometry(geo, canvas, height, cx, top, lab)
        pal = _palette(photo)
        sleeve = pal[meta["garment"]] if photo.random() < 0.6 else pal["face"]
        pal["left-arm"] = pal["right-arm"] = sleeve
        stripe = ((canvas.y // (FP * 2)) % 2).astype(float)
        for idx, m in layers:
            name = fine_names[idx]
            color = pal[name]
            shade = 1.0 + photo.uniform(-0.08, 0.08)
            fill = np.broadcast_to(color * shade, (size, size, 3))
            if name == "sweater":
                fill = fill * (0.75 + 0.4 * stripe)[..., None]
            image = np.where(m[..., None], fill, image)
            fine[m] = idx
        figures.append(meta)
    if config.noise:
        image = image + photo.normal(0.0, config.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    masks = {FINE: fine}
    for ds in taxonomy.datasets:
        if ds != FINE:
            masks[ds] = projection_lut(taxonomy, FINE, ds).astype(np.uint8)[fine]
    return Sample(image, masks, int(seed), {"figures": figures})


_TAX_CACHE: Dict[str, LabelTaxonomy] = {}


def _default_taxonomy() -> LabelTaxonomy:
    if "default" not in _TAX_CACHE:
        _TAX_CACHE["default"] = load_taxonomy()
    return _TAX_CACHE["default"]


def sample_seed(seed: int, split: str, dataset: str, index: int) -> int:
    """Per-sample seed, so any sample can be regenerated in isolation."""
    return rng.derive_seed(seed, f"sample.{split}.{dataset}", index)


def generate_split(seed: int, split: str, dataset: str, count: int,
                   config: SceneConfig = SceneConfig(), taxonomy=None) -> List[Sample]:
    return [generate_scene(sample_seed(seed, split, dataset, i), config, taxonomy)
            for i in range(count)]


# ----------------------------------------------------------------- codecs


def encode_image(image: np.ndarray) -> bytes:
    """Binary PPM (P6, maxval 255) from an ``[H, W, 3]`` array in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected [H, W, 3] image, got {image.shape}")
    if image.dtype == np.uint8:
        q = image
    else:
        if np.any(image < 0) or np.any(image > 1) or not np.all(np.isfinite(image)):
            raise DataError("image values must lie in [0, 1]")
        q = np.round(image * 255.0).astype(np.uint8)
    h, w, _ = q.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def encode_mask(mask: np.ndarray) -> bytes:
    """Binary PGM (P5, maxval 255); the gray value is the label index."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"expected [H, W] mask, got {mask.shape}")
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise DataError("mask labels must be in [0, 255]")
    h, w = mask.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + mask.astype(np.uint8).tobytes()


def _parse_pnm(data: bytes, magic: bytes):
    pos = 0
    tokens = []

    def skip_ws(p):
        while p < len(data):
            c = data[p:p + 1]
            if c == b"#":
                while p < len(data) and data[p:p + 1] not in (b"\n", b"\r"):
                    p += 1
            elif c.isspace():
                p += 1
            else:
                break
        return p

    while len(tokens) < 4:
        pos = skip_ws(pos)
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError(f"truncated header at byte {pos}")
        tokens.append((data[start:pos], start))
    if tokens[0][0] != magic:
        raise ParseError(f"bad magic {tokens[0][0]!r} at byte 0, expected {magic!r}")
    vals = []
    for tok, off in tokens[1:]:
        try:
            vals.append(int(tok))
        except ValueError:
            raise ParseError(f"non-integer header field {tok!r} at byte {off}") from None
    w, h, maxval = vals
    if w < 1 or h < 1:
        raise ParseError(f"non-positive image size at byte {tokens[1][1]}")
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval} at byte {tokens[3][1]}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError(f"missing separator after header at byte {pos}")
    return w, h, pos + 1


def decode_image(data: bytes) -> np.ndarray:
    w, h, off = _parse_pnm(data, b"P6")
    need = w * h * 3
    if len(data) - off < need:
        raise ParseError(f"truncated payload at byte {len(data)}: expected {need} bytes from "
                         f"offset {off}")
    q = np.frombuffer(data, np.uint8, count=need, offset=off).reshape(h, w, 3)
    return (q.astype(np.float32) / np.float32(255.0))


def decode_mask(data: bytes) -> np.ndarray:
    w, h, off = _parse_pnm(data, b"P5")
    need = w * h
    if len(data) - off < need:
        raise ParseError(f"truncated payload at byte {len(data)}: expected {need} bytes from "
                         f"offset {off}")
    return np.frombuffer(data, np.uint8, count=need, offset=off).reshape(h, w).copy()


def read_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


def read_mask(path) -> np.ndarray:
    return decode_mask(Path(path).read_bytes())


# --------------------------------------------------------------- manifests


@dataclass
class ManifestRecord:
    image_path: Path
    mask_path: Path
    dataset_id: str


@dataclass
class DatasetManifest:
    records: List[ManifestRecord] = field(default_factory=list)
    split: str = ""

    def __len__(self):
        return len(self.records)

    def datasets(self) -> List[str]:
        return sorted({r.dataset_id for r in self.records})


def load_manifest(path, taxonomy: Optional[LabelTaxonomy] = None, split: str = "") -> DatasetManifest:
    """Read ``image<TAB>mask<TAB>dataset`` lines; relative paths resolve against the file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    taxonomy = taxonomy or _default_taxonomy()
    base = path.parent
    manifest = DatasetManifest(split=split)
    for lineno, line in enumerate(path.read_text("utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
        img, msk, ds = fields
        if ds not in taxonomy.labels:
            raise DataError(f"{path}:{lineno}: unknown dataset {ds!r}")
        img_p, msk_p = base / img, base / msk
        for p in (img_p, msk_p):
            if not p.exists():
                raise DataError(f"{path}:{lineno}: missing file {p}")
        manifest.records.append(ManifestRecord(img_p, msk_p, ds))
    if not manifest.records:
        log.warning("manifest %s is empty", path)
    return manifest


def write_manifest(path, records: Sequence[Tuple[str, str, str]]):
    Path(path).write_text("".join(f"{a}\t{b}\t{c}\n" for a, b, c in records), "utf-8")


def load_manifest_samples(manifest: DatasetManifest) -> List[Tuple[np.ndarray, np.ndarray, str]]:
    return [(read_image(r.image_path), read_mask(r.mask_path), r.dataset_id)
            for r in manifest.records]


# -------------------------------------------------------------- embeddings


def synthetic_embeddings(taxonomy: LabelTaxonomy, seed: int, dim: int = 16) -> WordEmbeddingTable:
    """Hierarchy-shaped word vectors.

    Coarsest labels get orthonormal directions; each finer label is its
    parent's vector plus noise orthogonal to it with 0.3 of the parent norm.
    Labels repeating a coarser name reuse the parent vector.
    """
    if dim < 8:
        raise ConfigError("embedding dimension must be >= 8")
    rs = rng.stream(seed, "embeddings")
    order = sorted(taxonomy.datasets, key=taxonomy.num_labels)
    coarse = order[0]
    n0 = taxonomy.num_labels(coarse)
    if n0 > dim:
        raise ConfigError(f"dimension {dim} too small for {n0} orthogonal root labels")
    q, _ = np.linalg.qr(rs.normal(size=(dim, dim)))
    label_vec: Dict[Tuple[str, str], np.ndarray] = {}
    for i, lab in enumerate(taxonomy.labels[coarse]):
        label_vec[(coarse, lab)] = q[:, i].copy()
    for parent_ds, child_ds in zip(order, order[1:]):
        pairs = taxonomy.hierarchy_pairs(parent_ds, child_ds) or set()
        parent_of = {f: c for c, f in pairs}
        parent_of.setdefault("background", "background")
        for lab in taxonomy.labels[child_ds]:
            pv = label_vec[(parent_ds, parent_of[lab])]
            if lab == parent_of[lab]:
                label_vec[(child_ds, lab)] = pv
                continue
            noise = rs.normal(size=dim)
            noise -= (noise @ pv) / (pv @ pv) * pv
            noise *= 0.3 * np.linalg.norm(pv) / np.linalg.norm(noise)
            label_vec[(child_ds, lab)] = pv + noise
    table = WordEmbeddingTable(dim)
    for ds in order:
        for lab in taxonomy.labels[ds]:
            toks = taxonomy.label_tokens(ds, lab)
            for tok in toks:
                if tok not in table.entries:
                    table.entries[tok] = label_vec[(ds, lab)]
    return table


def emit_embeddings(taxonomy: LabelTaxonomy, seed: int, dim: int, path) -> WordEmbeddingTable:
    table = synthetic_embeddings(taxonomy, seed, dim)
    save_embeddings(table, path)
    return table


def export_dataset(outdir, seed: int, counts: Dict[str, Dict[str, int]],
                   config: SceneConfig = SceneConfig(), taxonomy=None) -> Dict[str, Path]:
    """Write images, masks and one manifest per split and dataset.

    ``counts[split][dataset]`` gives the number of samples.  Returns the
    manifest paths keyed by ``"<split>.<dataset>"``.
    """
    taxonomy = taxonomy or _default_taxonomy()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifests = {}
    for split, per_ds in counts.items():
        for ds, n in per_ds.items():
            d = outdir / split / ds
            d.mkdir(parents=True, exist_ok=True)
            recs = []
            for i in range(n):
                s = generate_scene(sample_seed(seed, split, ds, i), config, taxonomy)
                stem = f"{i:05d}"
                (d / f"{stem}.ppm").write_bytes(encode_image(s.image))
                (d / f"{stem}.pgm").write_bytes(encode_mask(s.masks[ds]))
                recs.append((f"{split}/{ds}/{stem}.ppm", f"{split}/{ds}/{stem}.pgm", ds))
            path = outdir / f"{split}_{ds}.tsv"
            write_manifest(path, recs)
            manifests[f"{split}.{ds}"] = path
    emit_embeddings(taxonomy, seed, 16, outdir / "embeddings.txt")
    return manifests

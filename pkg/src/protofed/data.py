"""Synthetic multi-site datasets with planted lesion glyphs, plus PNM I/O.

Each simulated site draws smooth random backgrounds, applies a site-specific
appearance shift (brightness / contrast / noise), and stamps a bright blob
cluster onto every diseased image.  The stamp's bounding rectangle is kept
as the ground truth for localization checks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, FormatError


@dataclass
class GlyphSpec:
    """Appearance of the planted lesion marker.

    Two components: a saturated core (gain drives blob peaks past 1.0, so
    after the final clip the core is a pure-white mass, the one structure
    that is deterministic regardless of background texture and site
    shifts) and a wide halo whose brightness varies image to image.  The
    deterministic core is what prototypes can match exactly; the variable
    halo spreads activation into neighbouring feature cells without
    offering a second stable template.
    """

    size: int = 28  # stamp working area, pixels
    blobs: int = 2
    gain: float = 1.6
    sigma: float = 7.0
    spread: float = 0.1  # blob centers within (0.5 +- spread) * size
    halo_gain: float = 0.3  # mean halo amplitude; actual amp varies per image


@dataclass
class SiteSpec:
    site_id: int
    num_samples: int
    healthy_fraction: float
    brightness: float = 0.0
    contrast: float = 1.0
    noise_std: float = 0.0
    seed: int = 0

    def validate(self):
        if self.num_samples < 1:
            raise ConfigurationError(f"site {self.site_id}: needs at least one sample")
        if not 0.0 <= self.healthy_fraction <= 1.0:
            raise ConfigurationError(
                f"site {self.site_id}: healthy fraction {self.healthy_fraction} outside [0, 1]"
            )
        if self.noise_std < 0:
            raise ConfigurationError(f"site {self.site_id}: negative noise std")


@dataclass
class SiteDataset:
    images: np.ndarray  # (n, 1, H, W) float64 in [0, 1]
    labels: np.ndarray  # (n,) int, 0 = healthy, 1 = diseased
    boxes: list  # per sample: None or (x, y, w, h) in pixels
    spec: SiteSpec

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx: np.ndarray) -> "SiteDataset":
        return SiteDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            boxes=[self.boxes[i] for i in idx],
            spec=self.spec,
        )


def _bilinear_grid(coarse: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    cells = coarse.shape[0]
    h, w = hw
    ys = np.linspace(0, cells - 1, h)
    xs = np.linspace(0, cells - 1, w)
    y0 = np.clip(ys.astype(int), 0, cells - 2)
    x0 = np.clip(xs.astype(int), 0, cells - 2)
    dy = (ys - y0)[:, None]
    dx = (xs - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    return c00 * (1 - dy) * (1 - dx) + c01 * (1 - dy) * dx + c10 * dy * (1 - dx) + c11 * dy * dx


def _draw_curve(img: np.ndarray, rng: np.random.Generator, amp: float):
    """Vessel-like random walk with momentum; positive amp brightens."""
    h, w = img.shape
    y = rng.uniform(0, h)
    x = rng.uniform(0, w)
    angle = rng.uniform(0, 2 * np.pi)
    radius = rng.integers(1, 3)
    yy, xx = np.mgrid[-2:3, -2:3]
    disk = (yy**2 + xx**2 <= radius**2).astype(float)
    steps = int(rng.integers(h, 2 * h))
    for _ in range(steps):
        angle += rng.normal(0.0, 0.3)
        y += np.sin(angle)
        x += np.cos(angle)
        iy, ix = int(y), int(x)
        if not (2 <= iy < h - 2 and 2 <= ix < w - 2):
            break
        img[iy - 2 : iy + 3, ix - 2 : ix + 3] += amp * disk


def _smooth_field(rng: np.random.Generator, hw: tuple[int, int], cells: int = 8,
                  texture_std: float = 0.06) -> np.ndarray:
    """Structured background: smooth field, vessel-like curves, bright and
    dark blobs, fine texture noise; capped well below the lesion's
    saturation level.

    Healthy content must activate the same channels the lesion does, with
    shape and intensity that vary image to image.  A bland or dark-only
    background collapses to a near-constant (often all-zero) feature
    vector after training, which a prototype then matches more exactly
    than any lesion.
    """
    h, w = hw
    field = _bilinear_grid(rng.uniform(0.25, 0.6, size=(cells, cells)), hw)
    field = field + rng.uniform(-0.08, 0.08)
    for _ in range(int(rng.integers(2, 5))):
        sign = 1.0 if rng.uniform() < 0.6 else -1.0
        _draw_curve(field, rng, sign * rng.uniform(0.1, 0.3))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        amp = rng.uniform(0.1, 0.35) * (1.0 if rng.uniform() < 0.6 else -1.0)
        sig = rng.uniform(2.0, 5.0)
        field += amp * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sig**2)))
    np.minimum(field, 0.88, out=field)  # distractors never saturate
    if texture_std > 0:
        field = field + rng.normal(0.0, texture_std, size=field.shape)
    return field


APERTURE_BAND = 8  # dark border band, pixels; lesions stay inside it


def _aperture_mask(hw: tuple[int, int]) -> np.ndarray:
    """Smooth field-of-view mask fading to 0 at the border (pre-cropped look)."""
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.minimum(np.minimum(yy, h - 1 - yy), np.minimum(xx, w - 1 - xx))
    return np.clip((d - 1) / 4.0, 0.0, 1.0)


# a stamp contribution of >= 1.0 clips to pure white whatever the background,
# so this level bounds exactly the saturated, deterministic lesion core
_GLYPH_SUPPORT_LEVEL = 1.0


def _stamp_glyph(img: np.ndarray, rng: np.random.Generator, glyph: GlyphSpec):
    """Add the lesion at a random position inside the aperture.

    Returns the tight bounding rectangle of the saturated core, not the
    stamp's working area.
    """
    h, w = img.shape
    g = glyph.size
    margin = APERTURE_BAND + 1
    x0 = int(rng.integers(margin, w - g - margin + 1))
    y0 = int(rng.integers(margin, h - g - margin + 1))
    yy, xx = np.mgrid[0:g, 0:g]
    core = np.zeros((g, g))
    lo, hi = (0.5 - glyph.spread) * g, (0.5 + glyph.spread) * g
    centers = []
    for _ in range(glyph.blobs):
        cy = rng.uniform(lo, hi)
        cx = rng.uniform(lo, hi)
        centers.append((cy, cx))
        core += glyph.gain * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * glyph.sigma**2)))
    patch = core
    if glyph.halo_gain > 0:
        amp = glyph.halo_gain * rng.uniform(0.5, 1.5)
        hy = float(np.mean([c[0] for c in centers]))
        hx = float(np.mean([c[1] for c in centers]))
        hsig = 0.45 * g
        patch = core + amp * np.exp(-(((yy - hy) ** 2 + (xx - hx) ** 2) / (2.0 * hsig**2)))
    img[y0 : y0 + g, x0 : x0 + g] += patch
    ys, xs = np.nonzero(core >= _GLYPH_SUPPORT_LEVEL)
    return (x0 + int(xs.min()), y0 + int(ys.min()),
            int(xs.max() - xs.min()) + 1, int(ys.max() - ys.min()) + 1)


def generate_site(spec: SiteSpec, image_hw: tuple[int, int] = (64, 64), num_classes: int = 2,
                  glyph: GlyphSpec | None = None, background_cells: int = 8,
                  texture_std: float = 0.06) -> SiteDataset:
    """Deterministically synthesise one site's labelled images.

    The final clip happens after the site appearance shift and noise, so
    the saturated lesion core stays at exactly 1.0 across sites.
    """
    spec.validate()
    if num_classes != 2:
        raise ConfigurationError("synthetic sites support the binary task only")
    glyph = glyph or GlyphSpec()
    h, w = image_hw
    if h < 32 or w < 32:
        raise ConfigurationError(f"image extents {image_hw} below the 32x32 minimum")
    if glyph.size > h or glyph.size > w:
        raise ConfigurationError(f"glyph size {glyph.size} exceeds image extents {image_hw}")

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, spec.site_id, 0xDA7A]))
    n = spec.num_samples
    n_healthy = int(round(n * spec.healthy_fraction))
    labels = np.concatenate([np.zeros(n_healthy, dtype=int), np.ones(n - n_healthy, dtype=int)])
    rng.shuffle(labels)

    if glyph.size > h - 2 * (APERTURE_BAND + 1) or glyph.size > w - 2 * (APERTURE_BAND + 1):
        raise ConfigurationError(
            f"glyph size {glyph.size} does not fit inside the {image_hw} aperture"
        )
    mask = _aperture_mask((h, w))
    images = np.zeros((n, 1, h, w))
    boxes: list = []
    for i in range(n):
        img = _smooth_field(rng, (h, w), cells=background_cells, texture_std=texture_std)
        img *= mask
        if labels[i] == 1:
            boxes.append(_stamp_glyph(img, rng, glyph))
        else:
            boxes.append(None)
        img = (img - 0.5) * spec.contrast + 0.5 + spec.brightness
        if spec.noise_std > 0:
            img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return SiteDataset(images=images, labels=labels, boxes=boxes, spec=spec)


def split_train_val(ds: SiteDataset, fraction: float = 0.8, seed: int = 0
                    ) -> tuple[SiteDataset, SiteDataset]:
    """Stratified, disjoint, exhaustive split; deterministic per seed."""
    n = len(ds)
    if n < 5:
        raise DataError(f"dataset of {n} samples is too small to split")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117]))
    train_idx: list[int] = []
    val_idx: list[int] = []
    for c in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size < 2:
            raise DataError(f"class {c} has {idx.size} sample(s); need at least 2 to split")
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        k = min(max(k, 1), idx.size - 1)
        train_idx.extend(idx[:k])
        val_idx.extend(idx[k:])
    train_idx = np.sort(np.asarray(train_idx))
    val_idx = np.sort(np.asarray(val_idx))
    return ds.subset(train_idx), ds.subset(val_idx)


@dataclass
class SamplerState:
    """Per-class shuffled index pools with cursors, reshuffled on exhaustion."""

    pools: dict[int, np.ndarray]
    cursors: dict[int, int]
    rng: np.random.Generator

    def draw(self, cls: int, count: int) -> np.ndarray:
        out = np.empty(count, dtype=int)
        filled = 0
        pool = self.pools[cls]
        while filled < count:
            cur = self.cursors[cls]
            take = min(count - filled, pool.size - cur)
            out[filled : filled + take] = pool[cur : cur + take]
            filled += take
            self.cursors[cls] = cur + take
            if self.cursors[cls] == pool.size:
                self.pools[cls] = pool = pool[self.rng.permutation(pool.size)]
                self.cursors[cls] = 0
        return out


def epoch_length(labels: np.ndarray, batch_size: int) -> int:
    """Batches per epoch: the balanced virtual dataset of C * n_minority
    samples, covered at batch_size per step."""
    counts = np.bincount(labels)
    counts = counts[counts > 0]
    n_min = int(counts.min())
    c = counts.size
    return -(-n_min * c // batch_size)


def balanced_batches(ds: SiteDataset, batch_size: int, seed, num_classes: int = 2
                     ) -> list[np.ndarray]:
    """One epoch of class-balanced batches of sample indices.

    Every batch holds floor(B/C) or ceil(B/C) samples per class; smaller
    classes cycle through reshuffled permutations, so each minority index
    appears at least once per epoch.
    """
    classes = np.arange(num_classes)
    counts = {int(c): int((ds.labels == c).sum()) for c in classes}
    empty = [c for c, v in counts.items() if v == 0]
    if empty:
        raise DataError(f"balanced_batches: class {empty[0]} has no samples")
    c = classes.size
    if batch_size < c:
        raise ConfigurationError(f"batch size {batch_size} below the class count {c}")
    rng = np.random.default_rng(seed)
    state = SamplerState(
        pools={int(cl): np.flatnonzero(ds.labels == cl)[rng.permutation(counts[int(cl)])]
               for cl in classes},
        cursors={int(cl): 0 for cl in classes},
        rng=rng,
    )
    base = batch_size // c
    rem = batch_size - base * c
    batches = []
    for b in range(epoch_length(ds.labels, batch_size)):
        per_class = {int(cl): base for cl in classes}
        for k in range(rem):  # rotate the remainder deterministically
            per_class[int(classes[(b + k) % c])] += 1
        idx = np.concatenate([state.draw(int(cl), per_class[int(cl)]) for cl in classes])
        batches.append(idx)
    return batches


# ---------------------------------------------------------------------------
# binary PGM (P5) / PPM (P6), 8-bit only
# ---------------------------------------------------------------------------


def _read_token(data: bytes, offset: int) -> tuple[bytes, int]:
    while offset < len(data):
        ch = data[offset : offset + 1]
        if ch.isspace():
            offset += 1
        elif ch == b"#":
            while offset < len(data) and data[offset : offset + 1] != b"\n":
                offset += 1
        else:
            break
    start = offset
    while offset < len(data) and not data[offset : offset + 1].isspace():
        offset += 1
    if start == offset:
        raise FormatError(f"expected header token at byte offset {start}")
    return data[start:offset], offset


def load_pnm(path) -> np.ndarray:
    """Read an 8-bit binary PGM/PPM into a (channels, H, W) array in [0, 1]."""
    data = Path(path).read_bytes()
    magic, offset = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r} at byte offset 0")
    channels = 1 if magic == b"P5" else 3
    fields = []
    for _ in range(3):
        tok, offset = _read_token(data, offset)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"non-numeric header token {tok!r} before byte offset {offset}")
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        raise FormatError(f"invalid extents {w}x{h}")
    offset += 1  # single whitespace byte after maxval
    need = w * h * channels
    raw = data[offset : offset + need]
    if len(raw) != need:
        raise FormatError(
            f"short pixel data at byte offset {offset}: need {need}, have {len(raw)}"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape(h, w, channels).transpose(2, 0, 1)


def save_pnm(arr: np.ndarray, path):
    """Write a (H, W), (1, H, W) or (3, H, W) array in [0, 1] as PGM/PPM."""
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise FormatError(f"cannot save array of shape {arr.shape} as PNM")
    channels, h, w = arr.shape
    magic = b"P5" if channels == 1 else b"P6"
    pixel = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{w} {h}\n255\n".encode("ascii"))
        f.write(pixel.transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# on-disk site layout: <dir>/site_<id>/img_<i>.pgm plus manifest.csv
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = ("path", "label", "site", "box_x", "box_y", "box_w", "box_h")


def write_site(ds: SiteDataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(ds)):
        name = f"img_{i:05d}.pgm"
        save_pnm(ds.images[i], directory / name)
        box = ds.boxes[i]
        rows.append({
            "path": name,
            "label": int(ds.labels[i]),
            "site": ds.spec.site_id,
            "box_x": "" if box is None else box[0],
            "box_y": "" if box is None else box[1],
            "box_w": "" if box is None else box[2],
            "box_h": "" if box is None else box[3],
        })
    with open(directory / "manifest.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def read_site(directory) -> SiteDataset:
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"no manifest.csv in {directory}")
    images, labels, boxes = [], [], []
    site_id = 0
    with open(manifest, newline="") as f:
        for row in csv.DictReader(f):
            img = load_pnm(directory / row["path"])
            images.append(img)
            labels.append(int(row["label"]))
            site_id = int(row["site"])
            if row["box_x"] == "":
                boxes.append(None)
            else:
                boxes.append((int(row["box_x"]), int(row["box_y"]),
                              int(row["box_w"]), int(row["box_h"])))
    arr = np.stack(images)
    spec = SiteSpec(site_id=site_id, num_samples=len(labels),
                    healthy_fraction=float(np.mean(np.asarray(labels) == 0)))
    return SiteDataset(images=arr, labels=np.asarray(labels), boxes=boxes, spec=spec)


def augmented_copy(ds: SiteDataset, seed: int) -> SiteDataset:
    """Opt-in augmentation: flips, 90-degree rotations, brightness jitter.

    Returned boxes are dropped (augmentation is for training only).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA06]))
    out = ds.images.copy()
    n = len(ds)
    square = ds.images.shape[2] == ds.images.shape[3]
    flips = rng.integers(0, 2, size=n)
    rots = rng.integers(0, 4, size=n) if square else 2 * rng.integers(0, 2, size=n)
    jitter = rng.uniform(-0.05, 0.05, size=n)
    for i in range(n):
        img = out[i, 0]
        if flips[i]:
            img = img[:, ::-1]
        img = np.rot90(img, k=int(rots[i]))
        out[i, 0] = np.clip(img + jitter[i], 0.0, 1.0)
    return SiteDataset(images=out, labels=ds.labels.copy(), boxes=[None] * n,
                       spec=replace(ds.spec))

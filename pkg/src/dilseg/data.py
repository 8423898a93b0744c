"""Dataset handling: synthetic phantom-head generation, netpbm image and
label I/O, center cropping, and palette overlays.

The phantom emulates serially sectioned head imagery at desk scale. A
virtual head axis t in [0, 1] runs through the slice stack; anatomy is
drawn from smooth functions of t (plus seeded smooth wobble), so
neighboring slices are strongly correlated, the structure that label
propagation between slices relies on. Structures per slice:

* elliptical flesh region (labeled background: the label set has no
  flesh class, so tissue color alone cannot separate it from the
  exterior),
* skull ring, cerebrum fill, posterior cerebellum lobe (t > 0.52),
* anterior nasal cavity pair (t < 0.60) and a teeth bar (t < 0.40),
* paired eyeballs with interior lens disks on eye-level slices
  (0.16 <= t <= 0.64).

Small-structure sizes are constant across each presence range, so the
slices a structure appears on show it at the same scale and only its
position drifts with the wobble. That redundancy is what lets a model
trained on a thin slice subset recover the rest of the stack. Teeth,
nasal cavities, and lenses span roughly 8 to 26 pixels, the scale
regime where prediction-map resolution decides how well a model can
score them.

Images are float RGB in [0, 1], quantized to the 1/255 grid in memory so
that disk round trips (binary P6/P5) are byte-exact.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from dilseg.errors import (
    ConfigError,
    DatasetError,
    LabelError,
    PixmapError,
    PixmapHeaderError,
    PixmapTruncatedError,
    ShapeError,
)
from dilseg.tensor import Tensor

CLASS_NAMES = (
    "background",
    "skull",
    "teeth",
    "cerebrum",
    "cerebellum",
    "nasal cavities",
    "eyeballs",
    "lenses",
)
NUM_CLASSES = len(CLASS_NAMES)

# overlay palette, one distinct color per class
PALETTE = (
    (0, 0, 0),
    (255, 255, 255),
    (255, 215, 0),
    (220, 60, 60),
    (150, 60, 200),
    (60, 180, 90),
    (80, 200, 220),
    (40, 80, 255),
)

_BASE_COLORS = {
    "exterior": (30, 34, 44),
    "flesh": (224, 172, 148),
    "skull": (232, 230, 218),
    "teeth": (255, 238, 150),
    "cerebrum": (198, 140, 152),
    "cerebellum": (128, 78, 140),
    "nasal": (96, 40, 36),
    "eyeball": (140, 210, 170),
    "lens": (96, 140, 200),
}

# the distribution-shift variant rescales anatomy and recolors every tissue
_SHIFTED_COLORS = {
    "exterior": (52, 48, 40),
    "flesh": (200, 150, 170),
    "skull": (214, 220, 236),
    "teeth": (240, 222, 128),
    "cerebrum": (174, 150, 136),
    "cerebellum": (108, 66, 120),
    "nasal": (118, 56, 48),
    "eyeball": (124, 196, 182),
    "lens": (120, 126, 188),
}
_SHIFT_SCALE = 1.15

_REGION_LABELS = {
    "exterior": 0,
    "flesh": 0,
    "skull": 1,
    "teeth": 2,
    "cerebrum": 3,
    "cerebellum": 4,
    "nasal": 5,
    "eyeball": 6,
    "lens": 7,
}


@dataclass(frozen=True)
class PhantomParams:
    """Generation settings; the dataset is a pure function of these."""

    image_size: int = 96
    n_slices: int = 16
    seed: int = 0
    scale: float = 1.0
    jitter: float = 0.04
    noise: float = 0.012
    distribution_shift: bool = False

    def __post_init__(self):
        if self.image_size % 8 or self.image_size < 32:
            raise ConfigError(
                f"image_size must be a multiple of 8 and >= 32, got {self.image_size}"
            )
        if self.n_slices < 2:
            raise ConfigError(f"n_slices must be >= 2, got {self.n_slices}")
        if self.scale <= 0:
            raise ConfigError(f"scale must be > 0, got {self.scale}")
        if self.jitter < 0 or self.noise < 0:
            raise ConfigError("jitter and noise amplitudes must be >= 0")


def _ellipse(yy, xx, cy, cx, ry, rx):
    if ry <= 0.0 or rx <= 0.0:
        return np.zeros(yy.shape, dtype=bool)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_phantom(params):
    """Deterministic list of (RGB image Tensor [3,S,S], label map [S,S])."""
    size = params.image_size
    n = params.n_slices
    wobble_ss, noise_ss = np.random.SeedSequence(params.seed).spawn(2)
    phases = np.random.default_rng(wobble_ss).uniform(0.0, 2.0 * np.pi, size=4)
    noise_streams = noise_ss.spawn(n)
    colors = _SHIFTED_COLORS if params.distribution_shift else _BASE_COLORS
    rgb = {k: np.array(v, dtype=float) / 255.0 for k, v in colors.items()}
    scale = params.scale * (_SHIFT_SCALE if params.distribution_shift else 1.0)
    unit = size / 96.0
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    out = []
    for i in range(n):
        t = i / (n - 1)
        jit = params.jitter * size
        cy = size / 2.0 + jit * np.sin(2.0 * np.pi * 0.9 * t + phases[0])
        cx = size / 2.0 + jit * np.sin(2.0 * np.pi * 0.7 * t + phases[1])
        girth = 0.82 + 0.30 * np.sin(np.pi * t)
        b_head = 0.40 * size * girth * scale * (1.0 + 0.5 * params.jitter
                                                * np.sin(2.0 * np.pi * t + phases[2]))
        a_head = 0.36 * size * girth * scale * (1.0 + 0.5 * params.jitter
                                                * np.sin(2.0 * np.pi * t + phases[3]))
        thickness = max(3.0 * unit, 0.042 * size) * scale
        b_skull, a_skull = 0.90 * b_head, 0.90 * a_head
        b_in, a_in = b_skull - thickness, a_skull - thickness

        labels = np.zeros((size, size), dtype=np.int64)
        img = np.empty((3, size, size))
        img[:] = rgb["exterior"][:, None, None]

        def paint(mask, region):
            img[:, mask] = rgb[region][:, None]
            labels[mask] = _REGION_LABELS[region]

        paint(_ellipse(yy, xx, cy, cx, b_head, a_head), "flesh")
        paint(_ellipse(yy, xx, cy, cx, b_skull, a_skull), "skull")
        paint(_ellipse(yy, xx, cy, cx, b_in, a_in), "cerebrum")

        # constant in-range sizes maximize slice-to-slice redundancy;
        # placements stay within the inner ellipse across the full
        # wobble envelope (verified by rasterized scan), and the paint
        # order resolves the few extreme-wobble pixel collisions
        if t > 0.52:
            paint(_ellipse(yy, xx, cy + 0.42 * b_in, cx,
                           0.45 * b_in, 0.58 * a_in), "cerebellum")

        if t < 0.60:
            for sx in (-4.6 * unit * scale, 4.6 * unit * scale):
                paint(_ellipse(yy, xx, cy - 0.27 * b_in, cx + sx,
                               5.6 * unit * scale,
                               4.2 * unit * scale), "nasal")

        if t < 0.40:
            # one scalloped bar standing in for the tooth row
            paint(_ellipse(yy, xx, cy - 0.70 * b_in, cx,
                           4.2 * unit * scale,
                           13.0 * unit * scale), "teeth")

        if 0.16 <= t <= 0.64:
            eye_r = 7.8 * unit * scale
            if eye_r >= 1.5:
                ey = cy - 0.40 * b_in
                for sx in (-0.56 * a_in, 0.56 * a_in):
                    eye = _ellipse(yy, xx, ey, cx + sx, eye_r, eye_r)
                    paint(eye, "eyeball")
                    lens = _ellipse(yy, xx, ey - 0.42 * eye_r, cx + sx,
                                    0.55 * eye_r, 0.55 * eye_r) & eye
                    if not lens.any():
                        # keep at least one lens pixel on thin eye slices
                        ly = min(max(int(round(ey - 0.42 * eye_r)), 0), size - 1)
                        lx = min(max(int(round(cx + sx)), 0), size - 1)
                        lens[ly, lx] = True
                        lens &= eye
                    paint(lens, "lens")

        if params.noise > 0.0:
            rng = np.random.default_rng(noise_streams[i])
            img += rng.normal(0.0, params.noise, size=img.shape)
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        out.append((Tensor(img), labels))
    return out


def _read_pixmap(path, magic):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != magic:
        raise PixmapHeaderError(f"{path}: expected {magic.decode()} magic, got {blob[:2]!r}")
    # header: three whitespace-separated integers, '#' comments allowed
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        token = blob[start:pos]
        if not token.isdigit():
            raise PixmapHeaderError(f"{path}: bad header token {token!r}")
        fields.append(int(token))
    if pos >= len(blob):
        raise PixmapTruncatedError(f"{path}: no payload after header")
    pos += 1  # single whitespace byte separates header from payload
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PixmapHeaderError(f"{path}: bad extents {width}x{height}")
    if maxval != 255:
        raise PixmapHeaderError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = blob[pos:]
    if len(payload) < expected:
        raise PixmapTruncatedError(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    if len(payload) > expected:
        raise PixmapError(f"{path}: {len(payload) - expected} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8), width, height


def _atomic_write(path, blob):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def save_image(image, path):
    """RGB [3,H,W] floats in [0, 1] -> binary P6, one byte per sample."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=float)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"expected [3,H,W] image, got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ShapeError("image values must lie in [0, 1]")
    h, w = arr.shape[1], arr.shape[2]
    bytes_ = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0).tobytes()
    _atomic_write(path, f"P6\n{w} {h}\n255\n".encode("ascii") + bytes_)


def load_image(path):
    """Binary P6 -> RGB Tensor [3,H,W], values k/255."""
    flat, width, height = _read_pixmap(path, b"P6")
    arr = flat.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
    return Tensor(np.ascontiguousarray(arr))


def save_labels(labels, path):
    """Label map [H,W] -> binary P5 with pixel value = class index."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ShapeError(f"expected [H,W] label map, got {arr.shape}")
    if arr.min() < 0 or arr.max() >= NUM_CLASSES:
        raise LabelError(f"labels must lie in 0..{NUM_CLASSES - 1}")
    h, w = arr.shape
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii")
                  + arr.astype(np.uint8).tobytes())


def load_labels(path):
    """Binary P5 -> int label map; values must be valid class indices."""
    flat, width, height = _read_pixmap(path, b"P5")
    arr = flat.reshape(height, width).astype(np.int64)
    if arr.max() >= NUM_CLASSES:
        raise LabelError(
            f"{path}: pixel value {int(arr.max())} exceeds class range 0..{NUM_CLASSES - 1}"
        )
    return arr


def crop_center(image, size):
    """Centered spatial window; offset floor((extent - size) / 2) per axis."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    h, w = arr.shape[-2], arr.shape[-1]
    if size < 1:
        raise ShapeError(f"crop size must be >= 1, got {size}")
    if size > h or size > w:
        raise ShapeError(f"crop size {size} exceeds extents {h}x{w}")
    top = (h - size) // 2
    left = (w - size) // 2
    window = arr[..., top : top + size, left : left + size]
    if isinstance(image, Tensor):
        return Tensor(np.ascontiguousarray(window))
    return window.copy()


def colorize_labels(labels):
    """Label map -> RGB Tensor using the fixed 8-color palette."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ShapeError(f"expected [H,W] label map, got {arr.shape}")
    if arr.min() < 0 or arr.max() >= NUM_CLASSES:
        raise LabelError(f"labels must lie in 0..{NUM_CLASSES - 1}")
    palette = np.array(PALETTE, dtype=float) / 255.0
    return Tensor(np.ascontiguousarray(palette[arr].transpose(2, 0, 1)))


def overlay(image, labels, alpha=0.5):
    """Blend of image and colorized labels, quantized to the 1/255 grid."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=float)
    tinted = (1.0 - alpha) * img + alpha * colorize_labels(labels).data
    return Tensor(np.round(np.clip(tinted, 0.0, 1.0) * 255.0) / 255.0)


def write_dataset(dataset, out_dir):
    """Write image/label pairs plus manifest.csv; every write is atomic."""
    if not dataset:
        raise DatasetError("refusing to write an empty dataset")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, (image, labels) in enumerate(dataset):
        slice_id = f"{i:03d}"
        image_name = f"slice_{slice_id}.ppm"
        label_name = f"slice_{slice_id}.pgm"
        save_image(image, os.path.join(out_dir, image_name))
        save_labels(labels, os.path.join(out_dir, label_name))
        rows.append((slice_id, image_name, label_name))
    lines = ["slice_id,image_path,label_path"]
    lines += [",".join(row) for row in rows]
    _atomic_write(os.path.join(out_dir, "manifest.csv"),
                  ("\n".join(lines) + "\n").encode("ascii"))
    return rows


def load_dataset(path):
    """Read a dataset directory (or manifest path) back into memory.

    Returns a list of (slice_id, image Tensor, label map); pairs with
    mismatched spatial shapes are rejected.
    """
    manifest = path if str(path).endswith(".csv") else os.path.join(path, "manifest.csv")
    if not os.path.exists(manifest):
        raise DatasetError(f"no manifest at {manifest}")
    base = os.path.dirname(manifest)
    out = []
    with open(manifest, newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["slice_id", "image_path", "label_path"]:
            raise DatasetError(f"{manifest}: unexpected header {header}")
        for row in reader:
            if len(row) != 3:
                raise DatasetError(f"{manifest}: malformed row {row}")
            slice_id, image_path, label_path = row
            image = load_image(os.path.join(base, image_path))
            labels = load_labels(os.path.join(base, label_path))
            if image.shape[1:] != labels.shape:
                raise DatasetError(
                    f"slice {slice_id}: image {image.shape[1:]} vs labels {labels.shape}"
                )
            out.append((slice_id, image, labels))
    if not out:
        raise DatasetError(f"{manifest}: manifest lists no slices")
    return out

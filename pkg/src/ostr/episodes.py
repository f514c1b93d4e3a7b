"""Texture banks, class splits, Voronoi collages and episode sampling."""
import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .ops import resize_bilinear

DTD_CLASSES = (
    "banded", "blotchy", "braided", "bubbly", "bumpy", "chequered", "cobwebbed",
    "cracked", "crosshatched", "crystalline", "dotted", "fibrous", "flecked",
    "freckled", "frilly", "gauzy", "grid", "grooved", "honeycombed", "interlaced",
    "knitted", "lacelike", "lined", "marbled", "matted", "meshed", "paisley",
    "perforated", "pitted", "pleated", "polka-dotted", "porous", "potholed",
    "scaly", "smeared", "spiralled", "sprinkled", "stained", "stratified",
    "striped", "studded", "swirly", "veined", "waffled", "woven", "wrinkled",
    "zigzagged",
)

DTD_TEST_SUBSETS = (
    ("perforated", "pitted", "pleated", "polka-dotted", "porous"),
    ("stained", "stratified", "striped", "studded", "swirly"),
    ("veined", "waffled", "woven", "wrinkled", "zigzagged"),
)


@dataclass
class TextureBank:
    """Class name -> list of uint8 (H, W, 3) texture images."""
    classes: list
    images: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("texture class names must be unique")
        for c in self.classes:
            if not self.images.get(c):
                raise ValueError(f"class {c!r} has no images")

    def min_side(self):
        return min(min(im.shape[:2]) for c in self.classes for im in self.images[c])


@dataclass(frozen=True)
class SplitSpec:
    train_classes: tuple
    test_subsets: tuple

    def __post_init__(self):
        object.__setattr__(self, "train_classes", tuple(self.train_classes))
        object.__setattr__(self, "test_subsets", tuple(tuple(s) for s in self.test_subsets))
        overlap = set(self.train_classes) & set(self.test_classes)
        if overlap:
            raise ValueError(f"train and test classes overlap: {sorted(overlap)}")

    @property
    def test_classes(self):
        return tuple(c for subset in self.test_subsets for c in subset)

    def phase_classes(self, phase):
        """``"train"`` or ``("test", i)`` -> class names for that phase."""
        if phase == "train":
            return self.train_classes
        kind, i = phase
        if kind != "test":
            raise ValueError(f"unknown phase {phase!r}")
        return self.test_subsets[i]

    def to_dict(self):
        return {"train_classes": list(self.train_classes),
                "test_subsets": [list(s) for s in self.test_subsets]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["train_classes"], d["test_subsets"])


def dtd_split() -> SplitSpec:
    test = {c for subset in DTD_TEST_SUBSETS for c in subset}
    return SplitSpec([c for c in DTD_CLASSES if c not in test], DTD_TEST_SUBSETS)


def holdout_split(bank: TextureBank, n_test: int, n_subsets: int = 1) -> SplitSpec:
    """Hold out the last `n_test` bank classes, dealt round-robin into subsets."""
    if not 0 < n_test < len(bank.classes):
        raise ValueError(f"n_test must be in (0, {len(bank.classes)})")
    test = bank.classes[-n_test:]
    subsets = [test[i::n_subsets] for i in range(n_subsets)]
    return SplitSpec(bank.classes[:-n_test], subsets)


@dataclass
class CollageSpec:
    size: int
    seeds: list
    class_assignment: list
    image_assignment: list
    crops: list
    rng_seed: object = None

    @property
    def k(self):
        return len(self.seeds)


@dataclass
class Episode:
    """Q and R are float32 (3, S, S) in [0, 1]; T is uint8 (1, S, S)."""
    Q: np.ndarray
    R: np.ndarray
    T: np.ndarray
    class_id: str
    collage: CollageSpec
    reference_source: dict = field(default_factory=dict)


# -- collages ---------------------------------------------------------------

def voronoi_labels(seeds, size):
    """Nearest-seed index per pixel; ties go to the lower seed index."""
    seeds = np.asarray(seeds, dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    d = (yy[None] - seeds[:, 0, None, None]) ** 2 + (xx[None] - seeds[:, 1, None, None]) ** 2
    return d.argmin(axis=0)


def _random_crop(image, size, rng):
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"texture {h}x{w} smaller than crop size {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    flip = bool(rng.integers(0, 2))
    crop = image[top:top + size, left:left + size]
    if flip:
        crop = crop[:, ::-1]
    return crop, {"top": top, "left": left, "flip": flip}


def _to_chw(image_u8):
    return (np.ascontiguousarray(image_u8.transpose(2, 0, 1)).astype(np.float32) / 255.0)


def synthesize_collage(bank: TextureBank, classes, rng, size, k=None, seeds=None):
    """Fill a Voronoi partition of the canvas with random texture crops.

    Returns ``(Q, region_masks, class_assignment, spec)``; Q is uint8
    (size, size, 3), region_masks is uint8 (K, size, size).
    """
    classes = list(classes)
    if not classes:
        raise ValueError("no classes to draw collage regions from")
    if seeds is None:
        if k is None:
            k = int(rng.integers(2, 6))
        if not 2 <= k <= 5:
            raise ValueError(f"region count must be in [2, 5], got {k}")
        flat = rng.choice(size * size, size=k, replace=False)
        seeds = np.stack([flat // size, flat % size], axis=1)
    seeds = np.asarray(seeds, dtype=np.int64)
    k = len(seeds)
    if len({tuple(s) for s in seeds.tolist()}) != k:
        raise ValueError("collage seeds must be distinct")

    labels = voronoi_labels(seeds, size)
    masks = np.stack([(labels == r) for r in range(k)]).astype(np.uint8)
    class_assignment, image_assignment, crops = [], [], []
    canvas = np.zeros((size, size, 3), dtype=np.uint8)
    for r in range(k):
        cls = classes[int(rng.integers(len(classes)))]
        idx = int(rng.integers(len(bank.images[cls])))
        crop, where = _random_crop(bank.images[cls][idx], size, rng)
        canvas[labels == r] = crop[labels == r]
        class_assignment.append(cls)
        image_assignment.append(idx)
        crops.append(where)
    spec = CollageSpec(size, seeds.tolist(), class_assignment, image_assignment, crops)
    return canvas, masks, class_assignment, spec


def sample_episode(bank: TextureBank, split: SplitSpec, phase, rng, size, max_tries=100) -> Episode:
    """Draw one (query, reference, mask) triple from the phase's classes."""
    classes = split.phase_classes(phase)
    missing = [c for c in classes if c not in bank.images]
    if missing:
        raise ValueError(f"bank lacks classes {missing}")
    for _ in range(max_tries):
        canvas, masks, assignment, spec = synthesize_collage(bank, classes, rng, size)
        present = sorted(set(assignment), key=assignment.index)
        target = present[int(rng.integers(len(present)))]
        T = masks[[i for i, c in enumerate(assignment) if c == target]].sum(axis=0).astype(np.uint8)
        n_pos = int(T.sum())
        if 0 < n_pos < size * size:
            break
    else:
        raise RuntimeError("could not sample a non-degenerate episode")
    ref_idx = int(rng.integers(len(bank.images[target])))
    ref, where = _random_crop(bank.images[target][ref_idx], size, rng)
    if phase == "train" and target in split.test_classes:
        raise AssertionError(f"training episode drew held-out class {target!r}")
    return Episode(
        Q=_to_chw(canvas), R=_to_chw(ref), T=T[None], class_id=target, collage=spec,
        reference_source={"class": target, "image": ref_idx, **where},
    )


def episode_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def episodes(bank, split, phase, seed, n, size, start=0):
    """`n` reproducible episodes; episode i depends only on (seed, start + i)."""
    out = []
    for i in range(start, start + n):
        ep = sample_episode(bank, split, phase, episode_rng(seed, i), size)
        ep.collage.rng_seed = [int(seed), i]
        out.append(ep)
    return out


def batch_arrays(eps):
    Q = np.stack([e.Q for e in eps])
    R = np.stack([e.R for e in eps])
    T = np.stack([e.T for e in eps]).astype(np.float32)
    return Q, R, T


# -- reference perturbations -------------------------------------------------

AFFINE_RANGES = {"rotation_deg": 30.0, "shear": 0.2, "log_scale": float(np.log(1.25))}
SCALES = (1.0, 0.5, 0.25)


def affine_matrix(rotation_deg=0.0, shear=0.0, scale=1.0):
    t = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    sh = np.array([[1.0, shear], [0.0, 1.0]])
    return scale * rot @ sh


def sample_affine(rng, ranges=None):
    ranges = AFFINE_RANGES if ranges is None else ranges
    return {
        "rotation_deg": float(rng.uniform(-1, 1) * ranges["rotation_deg"]),
        "shear": float(rng.uniform(-1, 1) * ranges["shear"]),
        "scale": float(np.exp(rng.uniform(-1, 1) * ranges["log_scale"])),
    }


def apply_affine(R, params):
    """Bilinear warp about the image center with reflect padding."""
    m = affine_matrix(**params)
    if np.array_equal(m, np.eye(2)):
        return R.copy()
    # output->input mapping for ndimage
    inv = np.linalg.inv(m)
    c = (np.array(R.shape[1:]) - 1) / 2.0
    offset = c - inv @ c
    out = np.stack([
        ndimage.affine_transform(ch.astype(np.float64), inv, offset=offset, order=1, mode="reflect")
        for ch in R
    ])
    return np.clip(out, 0, 1).astype(R.dtype)


def rescale_reference(R, s):
    """Center-crop to s*S and bilinearly upsample back to S."""
    if s not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got {s}")
    size = R.shape[-1]
    crop = int(round(size * s))
    if crop == size:
        return R.copy()
    lo = (size - crop) // 2
    patch = R[:, lo:lo + crop, lo:lo + crop]
    return resize_bilinear(patch.astype(np.float64), size, size).astype(R.dtype)


def perturb_reference(R, kind, rng=None, *, scale=None, ranges=None, params=None):
    """``kind="affine"`` draws (or takes) affine params; ``kind="scale"`` rescales by `scale`."""
    if kind == "scale":
        return rescale_reference(R, scale)
    if kind == "affine":
        if params is None:
            params = sample_affine(rng, ranges)
        return apply_affine(R, params)
    raise ValueError(f"unknown perturbation {kind!r}")


# -- procedural textures -----------------------------------------------------

FAMILIES = ("stripes", "dots", "checker", "blobs", "zigzag", "grid")


def _rotated_coords(h, w, angle_deg, phase):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = np.deg2rad(angle_deg)
    u = xx * np.cos(t) + yy * np.sin(t) + phase[0]
    v = -xx * np.sin(t) + yy * np.cos(t) + phase[1]
    return u, v


def _soft(x, sharp=4.0):
    return np.clip(0.5 + sharp * x, 0, 1)


def _pattern(family, params, angle, h, w, rng):
    period = params["period"]
    phase = rng.uniform(0, period, size=2)
    u, v = _rotated_coords(h, w, angle, phase)
    if family == "stripes":
        return _soft(np.sin(2 * np.pi * u / period) - params["duty"], 2.0)
    if family == "dots":
        du = (u % period) - period / 2
        dv = (v % period) - period / 2
        r = params["radius"] * period
        return _soft((r - np.hypot(du, dv)) / 2.0, 1.0)
    if family == "checker":
        return _soft(np.sin(2 * np.pi * u / period) * np.sin(2 * np.pi * v / period), 3.0)
    if family == "blobs":
        noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), params["period"] / 4, mode="wrap")
        noise /= noise.std() + 1e-12
        return _soft(noise - params["duty"], 1.5)
    if family == "zigzag":
        tri = np.abs(((v / period) % 1.0) * 2 - 1) * 2 - 1
        return _soft(np.sin(2 * np.pi * (u + params["amplitude"] * period * tri) / period), 2.0)
    if family == "grid":
        width = params["radius"] * period * 0.5
        line = np.minimum(np.abs((u % period) - period / 2), np.abs((v % period) - period / 2))
        return _soft((width - line) / 2.0, 1.0)
    raise ValueError(f"unknown texture family {family!r}")


def _class_params(c, rng, size):
    scale = size / 64.0
    return {
        "family": FAMILIES[c % len(FAMILIES)],
        "angle": float(rng.uniform(0, 180)),
        "period": float(rng.uniform(5, 14) * scale),
        "duty": float(rng.uniform(-0.4, 0.4)),
        "radius": float(rng.uniform(0.2, 0.35)),
        "amplitude": float(rng.uniform(0.3, 0.8)),
        "colors": _class_palette(c, rng),
    }


def _class_palette(c, rng):
    # golden-ratio hue spacing keeps every pair of classes apart in color
    hue = (c * 0.6180339887 + rng.uniform(-0.03, 0.03)) % 1.0
    light = colorsys.hsv_to_rgb(hue, rng.uniform(0.55, 0.9), rng.uniform(0.75, 0.95))
    dark = colorsys.hsv_to_rgb((hue + rng.uniform(0.1, 0.3)) % 1.0, rng.uniform(0.5, 0.9), rng.uniform(0.15, 0.45))
    return np.array([dark, light])


def procedural_bank(n_classes=16, images_per_class=8, size=64, seed=0, image_size=None) -> TextureBank:
    """Parametric texture classes standing in for a natural texture dataset.

    Each class fixes a family, orientation, period and palette; its images
    vary in phase, orientation (within 4.5 degrees) and color jitter.
    """
    if n_classes < len(FAMILIES):
        raise ValueError(f"need at least {len(FAMILIES)} classes, got {n_classes}")
    image_size = 2 * size if image_size is None else image_size
    classes, images, meta = [], {}, {}
    for c in range(n_classes):
        rng = np.random.default_rng([int(seed), c])
        params = _class_params(c, rng, size)
        name = f"{params['family']}_{c:02d}"
        imgs, angles = [], []
        for _ in range(images_per_class):
            angle = params["angle"] + rng.uniform(-4.5, 4.5)
            angles.append(float(angle))
            field_ = _pattern(params["family"], params, angle, image_size, image_size, rng)
            colors = np.clip(params["colors"] + rng.uniform(-0.08, 0.08, size=(2, 3)), 0, 1)
            rgb = colors[0] * (1 - field_[..., None]) + colors[1] * field_[..., None]
            imgs.append(np.round(rgb * 255).astype(np.uint8))
        classes.append(name)
        images[name] = imgs
        meta[name] = {k: v for k, v in params.items() if k != "colors"} | {"image_angles": angles}
    return TextureBank(classes, images, meta)


# -- disk formats ------------------------------------------------------------

def save_bank(bank: TextureBank, root):
    root = Path(root)
    for c in bank.classes:
        d = root / c
        d.mkdir(parents=True, exist_ok=True)
        for i, im in enumerate(bank.images[c]):
            Image.fromarray(im, "RGB").save(d / f"{i:04d}.png")


def load_bank(root, min_size=None) -> TextureBank:
    """Read ``<root>/<class>/*.png``; images smaller than `min_size` are upscaled."""
    root = Path(root)
    classes, images = [], {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(d.glob("*.png")) + sorted(d.glob("*.jpg"))
        if not files:
            continue
        imgs = []
        for f in files:
            im = Image.open(f).convert("RGB")
            if min_size is not None and min(im.size) < min_size:
                ratio = min_size / min(im.size)
                im = im.resize((max(min_size, round(im.width * ratio)),
                                max(min_size, round(im.height * ratio))), Image.BILINEAR)
            imgs.append(np.asarray(im, dtype=np.uint8))
        classes.append(d.name)
        images[d.name] = imgs
    if not classes:
        raise ValueError(f"no texture classes found under {root}")
    return TextureBank(classes, images)


def to_u8(x):
    """float [0, 1] (C, H, W) -> uint8 (H, W, C)."""
    return np.round(np.clip(x, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def save_episode(ep: Episode, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_u8(ep.Q), "RGB").save(directory / "Q.png")
    Image.fromarray(to_u8(ep.R), "RGB").save(directory / "R.png")
    Image.fromarray(ep.T[0] * 255, "L").save(directory / "T.png")
    meta = {"class": ep.class_id, "collage": asdict(ep.collage), "reference": ep.reference_source}
    (directory / "episode.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_episode(directory) -> Episode:
    directory = Path(directory)
    meta = json.loads((directory / "episode.json").read_text())
    Q = _to_chw(np.asarray(Image.open(directory / "Q.png").convert("RGB")))
    R = _to_chw(np.asarray(Image.open(directory / "R.png").convert("RGB")))
    T = (np.asarray(Image.open(directory / "T.png").convert("L")) > 127).astype(np.uint8)[None]
    return Episode(Q, R, T, meta["class"], CollageSpec(**meta["collage"]), meta["reference"])


def load_image(path, size):
    """Load any image file as float32 (3, size, size)."""
    im = Image.open(path).convert("RGB")
    if im.size != (size, size):
        im = im.resize((size, size), Image.BILINEAR)
    return _to_chw(np.asarray(im, dtype=np.uint8))

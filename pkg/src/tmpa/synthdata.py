"""
Procedural two-modality pedestrian dataset.

Each identity is a parametric figure (head, striped torso, legs, optional
bag) with its own colors. Visible images render it in color on a textured
background; infrared images render the same figure through a luminance
collapse, add an identity-specific intensity offset on the body and
Gaussian noise. Pixels are quantized to multiples of 1/255 so that the
PPM export is lossless.
"""

import colorsys
import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import require

LUMA = np.array([0.3, 0.6, 0.1])
VISIBLE, INFRARED = "visible", "infrared"


@dataclass(frozen=True)
class SynthSpec:
    num_ids: int = 32
    num_test_ids: int = 16
    imgs_per_id_per_modality: int = 8
    height: int = 48
    width: int = 24
    seed: int = 0
    noise_sigma: float = 0.05
    patch_size: int = 6

    def __post_init__(self):
        require(self.num_ids >= 2 and self.num_test_ids >= 1, "need at least 2 train identities")
        require(self.imgs_per_id_per_modality >= 2, "need at least 2 images per identity and modality")
        require(self.height % self.patch_size == 0 and self.width % self.patch_size == 0,
                f"{self.height}x{self.width} is not divisible by patch size {self.patch_size}")
        require(self.noise_sigma >= 0, "noise_sigma must be non-negative")


@dataclass
class SynthDataset:
    spec: SynthSpec
    train_v: np.ndarray  # [num_ids, imgs, 3, H, W]
    train_i: np.ndarray
    test_v: np.ndarray  # [num_test_ids, imgs, 3, H, W]
    test_i: np.ndarray

    @property
    def train_ids(self):
        return np.arange(self.spec.num_ids)

    @property
    def test_ids(self):
        return self.spec.num_ids + np.arange(self.spec.num_test_ids)

    def split(self, part, modality):
        """(images [M,3,H,W], identity labels [M]) of one split/modality."""
        require(part in ("train", "test"), f"unknown split {part!r}")
        require(modality in (VISIBLE, INFRARED), f"unknown modality {modality!r}")
        arr = getattr(self, f"{part}_{'v' if modality == VISIBLE else 'i'}")
        ids = self.train_ids if part == "train" else self.test_ids
        m = arr.shape[1]
        return arr.reshape(-1, *arr.shape[2:]), np.repeat(ids, m)


@dataclass
class Batch:
    x_v: np.ndarray  # [N,3,H,W]
    x_i: np.ndarray  # [N,3,H,W]
    labels: np.ndarray  # [N]
    p: int
    k: int


def _identity_params(rng):
    hue = rng.random()
    return dict(
        head_r=rng.uniform(0.055, 0.09),
        torso_top=rng.uniform(0.19, 0.25),
        torso_bot=rng.uniform(0.5, 0.62),
        torso_w=rng.uniform(0.38, 0.7),
        leg_w=rng.uniform(0.12, 0.2),
        leg_gap=rng.uniform(0.02, 0.12),
        upper=np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.5, 1.0), rng.uniform(0.35, 1.0))),
        lower=np.array(colorsys.hsv_to_rgb((hue + rng.uniform(0.2, 0.8)) % 1.0,
                                           rng.uniform(0.3, 1.0), rng.uniform(0.2, 0.9))),
        stripe_freq=rng.uniform(2.0, 6.0),
        stripe_phase=rng.uniform(0, 2 * np.pi),
        stripe_amp=rng.uniform(0.0, 0.35),
        bag=int(rng.integers(3)),  # 0 none, 1 left, 2 right
        ir_offset=rng.uniform(-0.15, 0.15),
    )


def _render(params, h, w, rng, noise_sigma):
    """Visible image plus body mask for one jittered rendering."""
    s = rng.uniform(0.9, 1.1)
    dy = rng.uniform(-0.1, 0.1) * h
    dx = rng.uniform(-0.1, 0.1) * w
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # body coordinates: y in [0,1] top to bottom, x centered at 0 (units of width)
    y = ((yy + 0.5 - dy) / h - 0.5) / s + 0.5
    x = ((xx + 0.5 - dx) / w - 0.5) / s

    head = ((y - 0.12) / params["head_r"]) ** 2 + (x / (params["head_r"] * h / w)) ** 2 <= 1.0
    torso = (y >= params["torso_top"]) & (y <= params["torso_bot"]) & (np.abs(x) <= params["torso_w"] / 2)
    half_gap = params["leg_gap"] / 2
    legs = (y > params["torso_bot"]) & (y <= 0.96) & (np.abs(x) >= half_gap) & (
        np.abs(x) <= half_gap + params["leg_w"])
    bag = np.zeros_like(torso)
    if params["bag"]:
        side = -1.0 if params["bag"] == 1 else 1.0
        cx = side * (params["torso_w"] / 2 + 0.09)
        bag = (np.abs(x - cx) <= 0.08) & (y >= 0.38) & (y <= 0.55)

    # background randomness scales with noise_sigma so a noise-free pair differs
    # only by geometry jitter and the modality transform
    bg_level = 0.42 + 3.0 * noise_sigma * rng.uniform(-1.0, 1.0)
    ripple = 1.6 * noise_sigma * np.sin(yy / 3.0 + rng.uniform(0, 2 * np.pi))
    img = np.empty((3, h, w))
    img[:] = bg_level + ripple[None] * np.array([1.0, 0.9, 1.1])[:, None, None]
    stripes = 1.0 + params["stripe_amp"] * np.sin(2 * np.pi * params["stripe_freq"] * y + params["stripe_phase"])
    img = np.where(torso[None], params["upper"][:, None, None] * stripes[None], img)
    img = np.where(legs[None], params["lower"][:, None, None], img)
    img = np.where(bag[None], np.array([0.35, 0.25, 0.15])[:, None, None], img)
    img = np.where(head[None], np.array([0.85, 0.7, 0.55])[:, None, None], img)
    body = head | torso | legs | bag
    return img, body


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def render_pair(params, h, w, rng_v, rng_i, noise_sigma):
    """One visible and one infrared image of the same identity."""
    vis, _ = _render(params, h, w, rng_v, noise_sigma)
    vis = vis + noise_sigma * rng_v.standard_normal(vis.shape)
    ir_src, body = _render(params, h, w, rng_i, noise_sigma)
    lum = np.tensordot(LUMA, ir_src, axes=1) + params["ir_offset"] * body
    ir = np.repeat(lum[None], 3, axis=0) + noise_sigma * rng_i.standard_normal((1, h, w))
    return _quantize(vis), _quantize(ir)


def generate(spec: SynthSpec = SynthSpec()):
    total = spec.num_ids + spec.num_test_ids
    m = spec.imgs_per_id_per_modality
    vis = np.empty((total, m, 3, spec.height, spec.width))
    ir = np.empty_like(vis)
    for pid in range(total):
        params = _identity_params(np.random.default_rng([spec.seed, 1, pid]))
        for j in range(m):
            vis[pid, j], ir[pid, j] = render_pair(
                params,
                spec.height,
                spec.width,
                np.random.default_rng([spec.seed, 2, pid, 0, j]),
                np.random.default_rng([spec.seed, 2, pid, 1, j]),
                spec.noise_sigma,
            )
    n = spec.num_ids
    return SynthDataset(spec, vis[:n], ir[:n], vis[n:], ir[n:])


def pk_sample(ds: SynthDataset, p=8, k=4, rng=None):
    """P train identities x K images per modality, index-aligned across
    modalities and grouped by identity."""
    rng = rng if rng is not None else np.random.default_rng()
    require(p >= 2, "a batch needs at least 2 identities")
    require(p <= ds.spec.num_ids, f"cannot sample {p} of {ds.spec.num_ids} identities")
    require(1 <= k <= ds.spec.imgs_per_id_per_modality,
            f"cannot sample {k} of {ds.spec.imgs_per_id_per_modality} images per modality")
    m = ds.spec.imgs_per_id_per_modality
    ids = rng.choice(ds.spec.num_ids, size=p, replace=False)
    xv, xi = [], []
    for pid in ids:
        xv.append(ds.train_v[pid, rng.choice(m, size=k, replace=False)])
        xi.append(ds.train_i[pid, rng.choice(m, size=k, replace=False)])
    return Batch(np.concatenate(xv), np.concatenate(xi), np.repeat(ids, k), p, k)


# persistence -------------------------------------------------------------

def write_ppm(path, img):
    """[3,H,W] image in [0,1] -> binary P6."""
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def write_pgm(path, gray):
    """[H,W] array in [0,1] -> binary P5."""
    data = np.round(np.clip(gray, 0, 1) * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def _read_netpbm(path, magic):
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    require(fields[0] == magic, f"{path}: expected {magic.decode()} header")
    w, h, maxval = (int(f) for f in fields[1:])
    require(maxval == 255, f"{path}: only 8-bit images are supported")
    body = np.frombuffer(raw[pos + 1 :], dtype=np.uint8)
    return body, h, w


def read_ppm(path):
    body, h, w = _read_netpbm(path, b"P6")
    return body[: h * w * 3].reshape(h, w, 3).transpose(2, 0, 1) / 255.0


def read_pgm(path):
    body, h, w = _read_netpbm(path, b"P5")
    return body[: h * w].reshape(h, w) / 255.0


def _split_tag(part, modality):
    if part == "train":
        return "train"
    return "query" if modality == INFRARED else "gallery"


def save_dataset(ds: SynthDataset, root):
    """Directory layout: images/*.ppm, labels.csv, spec.txt."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "spec.txt", "w") as fh:
        for key, val in asdict(ds.spec).items():
            fh.write(f"{key} = {val!r}\n")
    with open(root / "labels.csv", "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["path", "identity", "modality", "split"])
        for part, ids in (("train", ds.train_ids), ("test", ds.test_ids)):
            for modality, tag in ((VISIBLE, "v"), (INFRARED, "i")):
                arr = getattr(ds, f"{part}_{tag}")
                for row, pid in enumerate(ids):
                    for j in range(arr.shape[1]):
                        rel = f"images/{pid:04d}_{tag}_{j:02d}.ppm"
                        write_ppm(root / rel, arr[row, j])
                        out.writerow([rel, int(pid), modality, _split_tag(part, modality)])


def load_spec(path):
    vals = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, val = (s.strip() for s in line.split("=", 1))
            vals[key] = float(val) if key == "noise_sigma" else int(val)
    return SynthSpec(**vals)


def load_dataset(root):
    root = Path(root)
    spec = load_spec(root / "spec.txt")
    m = spec.imgs_per_id_per_modality
    shape = (3, spec.height, spec.width)
    arrays = {
        ("train", VISIBLE): np.zeros((spec.num_ids, m, *shape)),
        ("train", INFRARED): np.zeros((spec.num_ids, m, *shape)),
        ("test", VISIBLE): np.zeros((spec.num_test_ids, m, *shape)),
        ("test", INFRARED): np.zeros((spec.num_test_ids, m, *shape)),
    }
    seen = {key: 0 for key in arrays}
    with open(root / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            pid = int(row["identity"])
            part = "train" if row["split"] == "train" else "test"
            key = (part, row["modality"])
            local = pid if part == "train" else pid - spec.num_ids
            j = int(Path(row["path"]).stem.rsplit("_", 1)[1])
            arrays[key][local, j] = read_ppm(root / row["path"])
            seen[key] += 1
    for key, arr in arrays.items():
        require(seen[key] == arr.shape[0] * m, f"labels.csv is missing images for {key}")
    return SynthDataset(
        spec,
        arrays[("train", VISIBLE)],
        arrays[("train", INFRARED)],
        arrays[("test", VISIBLE)],
        arrays[("test", INFRARED)],
    )

"""
Training loop, configuration files and checkpoints.

Every source of randomness in a step is derived from (seed, epoch, step),
so resuming from a checkpoint replays exactly the batches and masks an
uninterrupted run would have drawn.
"""

import csv
import logging
import math
import struct
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ContractViolation, require
from .mfe import DEFAULT_WIDTHS
from .model import LOSS_KEYS, TMPANet
from .objective import LossWeights
from .pedmix import MixRatios, channel_augment, partition_regions, pedmix_batch
from .synthdata import SynthDataset, pk_sample
from .tensor import Tape, backward

logger = logging.getLogger(__name__)

MAGIC = b"TMPA1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    steps_per_epoch: int = 8
    lr0: float = 0.1
    milestones: tuple = ((20, 0.1), (50, 0.01))
    momentum: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    mix: MixRatios = field(default_factory=MixRatios)
    patch_size: int = 6
    phi1: tuple = (2 / 3, 1 / 3)
    phi2: tuple = (5 / 6, 2 / 3)
    p: int = 8
    k: int = 4
    seed: int = 0
    enable_pedmix: bool = True
    enable_mft: bool = True
    enable_channel_aug: bool = False
    widths: tuple = DEFAULT_WIDTHS

    def __post_init__(self):
        epochs = [e for e, _ in self.milestones]
        require(epochs == sorted(epochs), "milestones must be sorted by epoch")
        require(all(0 < f <= 1 for _, f in self.milestones), "milestone factors must lie in (0,1]")
        require(self.epochs >= 0 and self.steps_per_epoch >= 1, "epochs >= 0 and steps_per_epoch >= 1")
        require(self.lr0 >= 0 and self.momentum >= 0, "lr0 and momentum must be non-negative")


# config files --------------------------------------------------------------

def _fmt_bool(v):
    return "true" if v else "false"


def _parse_bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ContractViolation(f"not a boolean: {s!r}")


def _parse_float(s):
    s = s.strip()
    return float(Fraction(s)) if "/" in s else float(s)


def _parse_pair(s):
    parts = [p for p in s.replace(" ", "").split(",") if p]
    require(len(parts) == 2, f"expected two comma-separated numbers, got {s!r}")
    return tuple(_parse_float(p) for p in parts)


def _parse_milestones(s):
    out = []
    for item in s.replace(" ", "").split(","):
        if not item:
            continue
        epoch, factor = item.split(":")
        out.append((int(epoch), _parse_float(factor)))
    return tuple(out)


def _parse_widths(s):
    return tuple(int(p) for p in s.replace(" ", "").split(",") if p)


# key -> (parser, formatter)
_TOP = {
    "epochs": (int, repr),
    "steps_per_epoch": (int, repr),
    "lr0": (_parse_float, repr),
    "milestones": (_parse_milestones, lambda v: ",".join(f"{e}:{f!r}" for e, f in v)),
    "momentum": (_parse_float, repr),
    "patch_size": (int, repr),
    "phi1": (_parse_pair, lambda v: f"{v[0]!r},{v[1]!r}"),
    "phi2": (_parse_pair, lambda v: f"{v[0]!r},{v[1]!r}"),
    "pk.p": (int, repr),
    "pk.k": (int, repr),
    "seed": (int, repr),
    "enable_pedmix": (_parse_bool, _fmt_bool),
    "enable_mft": (_parse_bool, _fmt_bool),
    "enable_channel_aug": (_parse_bool, _fmt_bool),
    "model.widths": (_parse_widths, lambda v: ",".join(str(w) for w in v)),
}
_ATTR = {"pk.p": "p", "pk.k": "k", "model.widths": "widths"}
_LOSS_KEYS = tuple(f"loss.{f.name}" for f in fields(LossWeights))
_MIX_KEYS = tuple(f"mix.{f.name}" for f in fields(MixRatios))
CONFIG_KEYS = tuple(_TOP) + _LOSS_KEYS + _MIX_KEYS


def config_items(cfg: TrainConfig):
    """Ordered (key, text) pairs covering every field."""
    items = []
    for key, (_, fmt) in _TOP.items():
        items.append((key, fmt(getattr(cfg, _ATTR.get(key, key)))))
    items += [(k, repr(getattr(cfg.weights, k.split(".")[1]))) for k in _LOSS_KEYS]
    items += [(k, repr(getattr(cfg.mix, k.split(".")[1]))) for k in _MIX_KEYS]
    return items


def format_config(cfg: TrainConfig):
    return "".join(f"{k} = {v}\n" for k, v in config_items(cfg))


def apply_overrides(cfg: TrainConfig, pairs):
    """Return ``cfg`` with textual ``(key, value)`` overrides applied.

    Unknown keys raise :class:`ContractViolation`.
    """
    top, loss, mix = {}, {}, {}
    for key, text in pairs:
        key = key.strip()
        if key in _TOP:
            top[_ATTR.get(key, key)] = _TOP[key][0](text)
        elif key in _LOSS_KEYS:
            loss[key.split(".")[1]] = _parse_float(text)
        elif key in _MIX_KEYS:
            mix[key.split(".")[1]] = _parse_float(text)
        else:
            raise ContractViolation(f"unknown config key {key!r}")
    if loss:
        top["weights"] = replace(cfg.weights, **loss)
    if mix:
        top["mix"] = replace(cfg.mix, **mix)
    return replace(cfg, **top)


def parse_config_text(text, base: TrainConfig = TrainConfig()):
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        pairs.append((key.strip(), val.strip()))
    return apply_overrides(base, pairs)


def load_config(path, base: TrainConfig = TrainConfig()):
    return parse_config_text(Path(path).read_text(), base)


# schedule & optimizer ------------------------------------------------------

def lr_at(epoch, cfg: TrainConfig):
    require(epoch >= 0, "epoch must be non-negative")
    factor = 1.0
    for start, f in cfg.milestones:
        if epoch >= start:
            factor = f
    return cfg.lr0 * factor


class SGD:
    """SGD with heavy-ball momentum: v <- mu*v + g; p <- p - lr*v.

    Parameters without a gradient in a step are left untouched, buffers
    included.
    """

    def __init__(self, named_params, momentum=0.9):
        self.params = named_params
        self.momentum = momentum
        self.buffers = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            buf = self.buffers.get(name)
            buf = p.grad.copy() if buf is None else self.momentum * buf + p.grad
            self.buffers[name] = buf
            p.data -= lr * buf


# checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict  # name -> ndarray
    stats: dict  # name -> (mean, var)
    momentum: dict  # name -> ndarray
    epoch: int
    config: TrainConfig
    num_classes: int

    @classmethod
    def capture(cls, model: TMPANet, opt: SGD, epoch, cfg):
        return cls(
            params={k: v.data.copy() for k, v in model.named_parameters().items()},
            stats={k: (s.mean.copy(), s.var.copy()) for k, s in model.named_stats().items()},
            momentum={k: v.copy() for k, v in opt.buffers.items()},
            epoch=epoch,
            config=cfg,
            num_classes=model.num_classes,
        )

    def build_model(self):
        model = TMPANet(self.num_classes, self.config.seed, self.config.widths, self.config.enable_mft)
        for name, p in model.named_parameters().items():
            p.data[...] = self.params[name]
        for name, s in model.named_stats().items():
            s.mean, s.var = (a.copy() for a in self.stats[name])
        return model

    def restore_optimizer(self, opt: SGD):
        opt.buffers = {k: v.copy() for k, v in self.momentum.items()}

    def entries(self):
        """Named arrays in file order."""
        cfg_bytes = np.frombuffer(format_config(self.config).encode(), dtype=np.uint8)
        yield "meta.epoch", np.array(float(self.epoch))
        yield "meta.num_classes", np.array(float(self.num_classes))
        yield "meta.config", cfg_bytes.astype(np.float64)
        for k, v in self.params.items():
            yield f"param.{k}", v
        for k, (m, var) in self.stats.items():
            yield f"stat.{k}.mean", m
            yield f"stat.{k}.var", var
        for k, v in self.momentum.items():
            yield f"momentum.{k}", v

    def save(self, path):
        """Little-endian: magic, entry count, then per entry
        (u32 name length, name, u32 ndim, u64 dims..., f64 data)."""
        entries = list(self.entries())
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(entries)))
            for name, arr in entries:
                raw = name.encode()
                arr = np.asarray(arr, dtype="<f8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                fh.write(np.ascontiguousarray(arr).tobytes())

    @classmethod
    def load(cls, path):
        buf = Path(path).read_bytes()
        require(buf[:5] == MAGIC, f"{path}: not a checkpoint (bad magic)")
        pos = 5
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        entries = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            size = math.prod(shape)
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
            entries[name] = arr
        cfg_text = entries.pop("meta.config").astype(np.uint8).tobytes().decode()
        params, stats, momentum = {}, {}, {}
        for name, arr in entries.items():
            kind, _, rest = name.partition(".")
            if kind == "param":
                params[rest] = arr
            elif kind == "momentum":
                momentum[rest] = arr
            elif kind == "stat":
                key, which = rest.rsplit(".", 1)
                m, v = stats.get(key, (None, None))
                stats[key] = (arr, v) if which == "mean" else (m, arr)
        return cls(
            params=params,
            stats=stats,
            momentum=momentum,
            epoch=int(entries["meta.epoch"]),
            config=parse_config_text(cfg_text),
            num_classes=int(entries["meta.num_classes"]),
        )


# training ------------------------------------------------------------------

def step_rng(cfg: TrainConfig, epoch, step):
    return np.random.default_rng([cfg.seed, 7, epoch, step])


def prepare_inputs(batch, cfg: TrainConfig, rng, region_map=None):
    """Apply channel augmentation and PedMix; returns (x_hat, x_v, x_i)."""
    x_v, x_i = batch.x_v, batch.x_i
    if cfg.enable_channel_aug:
        x_v = np.stack([channel_augment(img, rng) for img in x_v])
    if cfg.enable_pedmix:
        if region_map is None:
            region_map = partition_regions(x_v.shape[2], x_v.shape[3], cfg.patch_size, cfg.phi1, cfg.phi2)
        x_hat = pedmix_batch(x_v, x_i, region_map, cfg.mix, rng)
    else:
        x_hat = np.concatenate([x_v, x_i], axis=0)
    return x_hat, x_v, x_i


def loss_values(losses):
    return {k: (0.0 if losses[k] is None else float(losses[k].data)) for k in LOSS_KEYS}


def train_step(model: TMPANet, opt: SGD, batch, cfg: TrainConfig, lr, rng, region_map=None, dump_dir=None):
    """One forward/backward/update. Returns the component losses as floats."""
    model.train()
    x_hat, x_v, x_i = prepare_inputs(batch, cfg, rng, region_map)
    opt.zero_grad()
    with Tape() as tape:
        losses, _ = model.forward_train(x_hat, x_v, x_i, batch.labels, cfg.weights)
    values = loss_values(losses)
    if not all(math.isfinite(v) for v in values.values()):
        msg = f"non-finite loss: {values}"
        if dump_dir is not None:
            path = Path(dump_dir) / "diverged_step.npz"
            np.savez(path, x_hat=x_hat, x_v=x_v, x_i=x_i, labels=batch.labels, **values)
            msg += f" (batch dumped to {path})"
        raise TrainingDiverged(msg)
    backward(losses["l_total"], tape)
    opt.step(lr)
    return values


def init_state(num_classes, cfg: TrainConfig):
    model = TMPANet(num_classes, cfg.seed, cfg.widths, cfg.enable_mft)
    return model, SGD(model.named_parameters(), cfg.momentum)


def train(ds: SynthDataset, cfg: TrainConfig, out_dir=None, resume: Checkpoint = None, log_every=0):
    """Run ``cfg.epochs`` epochs (continuing after ``resume.epoch`` if given).

    With ``out_dir`` set, appends per-step losses to ``losses.csv`` and
    writes ``epoch_XXX.ckpt`` after every epoch.
    """
    require(ds.spec.height % cfg.patch_size == 0 and ds.spec.width % cfg.patch_size == 0,
            "image size must be divisible by the patch size")
    require(cfg.p <= ds.spec.num_ids and cfg.k <= ds.spec.imgs_per_id_per_modality,
            "PK batch does not fit the dataset")
    num_classes = ds.spec.num_ids
    if resume is not None:
        require(resume.num_classes == num_classes, "checkpoint was trained on a different identity count")
        model = resume.build_model()
        opt = SGD(model.named_parameters(), cfg.momentum)
        resume.restore_optimizer(opt)
        start = resume.epoch
    else:
        model, opt = init_state(num_classes, cfg)
        start = 0
    region_map = partition_regions(ds.spec.height, ds.spec.width, cfg.patch_size, cfg.phi1, cfg.phi2)

    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "losses.csv"
        fresh = resume is None or not log_path.exists()
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["epoch", "step", *LOSS_KEYS])
    try:
        for epoch in range(start, cfg.epochs):
            lr = lr_at(epoch, cfg)
            for step in range(cfg.steps_per_epoch):
                rng = step_rng(cfg, epoch, step)
                batch = pk_sample(ds, cfg.p, cfg.k, rng)
                values = train_step(model, opt, batch, cfg, lr, rng, region_map, out_dir)
                if writer is not None:
                    writer.writerow([epoch, step, *(repr(values[k]) for k in LOSS_KEYS)])
                if log_every and step % log_every == 0:
                    logger.info("epoch %d step %d lr %.4g total %.4f", epoch, step, lr, values["l_total"])
            if out_dir is not None:
                Checkpoint.capture(model, opt, epoch + 1, cfg).save(out_dir / f"epoch_{epoch + 1:03d}.ckpt")
    finally:
        if writer is not None:
            fh.close()
    return Checkpoint.capture(model, opt, max(start, cfg.epochs), cfg)

"""Cross-modality retrieval evaluation: embeddings, CMC and mAP."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import require
from .model import INFRARED, VISIBLE, TMPANet

MODES = {"v2i": (VISIBLE, INFRARED), "i2v": (INFRARED, VISIBLE)}
TABLE_RANKS = (1, 10, 20)


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # [M,D], unit rows
    labels: np.ndarray  # [M]
    modalities: np.ndarray  # [M] of str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.modalities = np.asarray(self.modalities)
        require(self.vectors.ndim == 2, "embedding vectors must be [M,D]")
        m = self.vectors.shape[0]
        require(self.labels.shape == (m,) and self.modalities.shape == (m,),
                "one label and one modality tag per vector")
        norms = np.linalg.norm(self.vectors, axis=1)
        require(bool(np.all(np.abs(norms - 1) <= 1e-9)), "embedding rows must have unit norm")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def modality(self):
        tags = set(self.modalities.tolist())
        require(len(tags) == 1, f"expected a single-modality set, got {sorted(tags)}")
        return tags.pop()


@dataclass
class Metrics:
    cmc: np.ndarray  # [K], cmc[k-1] = P(first match at rank <= k)
    map: float
    mode: str

    def rank(self, k):
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def _model_of(checkpoint):
    if isinstance(checkpoint, TMPANet):
        return checkpoint, None
    return checkpoint.build_model(), checkpoint.config.weights


def embed(checkpoint, images, modality, labels=None, weights=None, chunk=64):
    """Embed single-modality images with a trained checkpoint (or model).

    Runs in eval mode so each row depends only on its own image; chunking
    is for memory only and does not change the result.
    """
    require(modality in (VISIBLE, INFRARED), f"unknown modality {modality!r}")
    images = np.asarray(images, dtype=np.float64)
    require(images.ndim == 4, "images must be [M,3,H,W]")
    model, cfg_weights = _model_of(checkpoint)
    weights = weights or cfg_weights
    require(weights is not None, "loss weights needed to fuse the complete feature")
    model.eval()
    parts = [model.embed(images[s : s + chunk], modality, weights) for s in range(0, len(images), chunk)]
    vectors = np.concatenate(parts) if parts else np.zeros((0, model.embed_dim))
    labels = np.zeros(len(images), dtype=np.int64) if labels is None else np.asarray(labels)
    return EmbeddingSet(vectors, labels, np.full(len(images), modality))


def ranked_matches(query, gallery):
    """Boolean [Q,G] match matrix with each row in ranked gallery order.

    Ascending Euclidean distance; stable sort keeps ties in gallery order.
    """
    diff = query.vectors[:, None, :] - gallery.vectors[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    order = np.argsort(dist, axis=1, kind="stable")
    return gallery.labels[order] == query.labels[:, None]


def average_precision(matches):
    """AP of one ranked boolean row: mean of precision at each hit."""
    hits = np.flatnonzero(matches)
    return float(np.mean((np.arange(len(hits)) + 1) / (hits + 1)))


def cmc_map(query: EmbeddingSet, gallery: EmbeddingSet):
    q_mod, g_mod = query.modality, gallery.modality
    require(q_mod != g_mod, "query and gallery must come from different modalities")
    missing = set(query.labels.tolist()) - set(gallery.labels.tolist())
    require(not missing, f"query identities absent from gallery: {sorted(missing)}")
    matches = ranked_matches(query, gallery)
    first = matches.argmax(axis=1)
    cmc = np.array([(first < k).mean() for k in range(1, len(gallery) + 1)])
    ap = np.array([average_precision(row) for row in matches])
    mode = "v2i" if q_mod == VISIBLE else "i2v"
    return Metrics(cmc=cmc, map=float(ap.mean()), mode=mode)


def evaluate(checkpoint, ds, mode, weights=None):
    """Embed the test split and score one search direction."""
    require(mode in MODES, f"mode must be one of {sorted(MODES)}, got {mode!r}")
    q_mod, g_mod = MODES[mode]
    xq, yq = ds.split("test", q_mod)
    xg, yg = ds.split("test", g_mod)
    query = embed(checkpoint, xq, q_mod, yq, weights)
    gallery = embed(checkpoint, xg, g_mod, yg, weights)
    return cmc_map(query, gallery)


def write_embeddings_csv(path, es: EmbeddingSet):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "modality", *(f"v_{j + 1}" for j in range(es.vectors.shape[1]))])
        for label, mod, vec in zip(es.labels, es.modalities, es.vectors):
            w.writerow([int(label), mod, *(repr(float(x)) for x in vec)])


def metrics_row(m: Metrics):
    return {"mode": m.mode, **{f"rank{k}": m.rank(k) for k in TABLE_RANKS}, "map": m.map}


def write_metrics_csv(path, metrics, extra=None):
    rows = [{**(extra or {}), **metrics_row(m)} for m in metrics]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def format_table(metrics):
    head = f"{'mode':<6}" + "".join(f"{f'Rank-{k}':>9}" for k in TABLE_RANKS) + f"{'mAP':>9}"
    lines = [head]
    for m in metrics:
        lines.append(f"{m.mode:<6}" + "".join(f"{100 * m.rank(k):9.2f}" for k in TABLE_RANKS) + f"{100 * m.map:9.2f}")
    return "\n".join(lines)

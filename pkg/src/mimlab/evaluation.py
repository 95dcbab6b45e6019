"""Linear probing and fine-tuning of a pretrained encoder."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import EvalConfig
from .imaging import augment, center_view
from .model import EncoderState, encoder_forward, embed_and_mask, layer_id
from .numerics import ops
from .numerics.optim import AdamW
from .numerics.schedule import ScheduleSpec, lr_at
from .numerics.tape import Tape, Tensor
from .patches import patchify
from .trainer import Dataset, no_decay

RESULTS_HEADER = ("protocol", "seed", "block", "accuracy")


@dataclass
class Split:
    """Model inputs with integer labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def evaluate_accuracy(model: Callable[[np.ndarray], np.ndarray], split: Split) -> float:
    """Top-1 accuracy of ``model`` (returning labels or ``(n, C)`` scores) on ``split``."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    out = np.asarray(model(split.inputs))
    pred = out.argmax(axis=-1) if out.ndim == 2 else out
    return float(np.mean(pred == np.asarray(split.labels)))


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Class-stratified split; asserts no image appears on both sides."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng([seed, 11])
    labels = dataset.labels
    test = []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test.extend(idx[:max(1, int(round(test_fraction * len(idx))))].tolist())
    test = sorted(test)
    held = set(test)
    train = [i for i in range(len(dataset)) if i not in held]
    tr, te = dataset.subset(train), dataset.subset(test)
    check_disjoint(tr, te)
    return tr, te


def check_disjoint(train: Dataset, test: Dataset) -> None:
    overlap = {im.digest() for im in train.images} & {im.digest() for im in test.images}
    if overlap:
        raise ValueError(f"{len(overlap)} images appear in both train and test splits")


def layer_decay_multipliers(depth: int, decay: float) -> tuple[float, ...]:
    """lr multiplier for layer ids 0 (embedding) .. depth+1 (head)."""
    top = depth + 1
    return tuple(decay ** (top - i) for i in range(top + 1))


def _check_labels(dataset: Dataset, num_classes: int) -> None:
    labels = dataset.labels
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes}): {labels.min()}..{labels.max()}")


# -- features ------------------------------------------------------------------

def extract_features(state: EncoderState, dataset: Dataset, batch: int = 64) -> np.ndarray:
    """Mean-pooled token features ``(depth+1, n, d)`` on un-augmented images.

    Layer 0 is the embedding, layer i the output of block i; the last
    layer is taken after the final norm.
    """
    cfg = state.config
    res = cfg.input_resolution
    mean, std = dataset.manifest.mean, dataset.manifest.std
    params = state.constants()
    out = []
    for s in range(0, len(dataset), batch):
        x = np.stack([center_view(im, res, mean, std).normalized for im in dataset.images[s:s + batch]])
        hidden: list = []
        final = encoder_forward(embed_and_mask(patchify(x, cfg.patch_size), None, params), params, cfg,
                                hidden=hidden)
        layers = [h.data.mean(axis=1) for h in hidden[:-1]] + [final.data.mean(axis=1)]
        out.append(np.stack(layers))
    return np.concatenate(out, axis=1)


# -- linear probe -----------------------------------------------------------------

@dataclass
class ProbeResult:
    accuracy: float
    per_class: tuple[float, ...]
    seed: int
    feature_source: int               # layer index of the best block
    per_layer: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


def _per_class(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> tuple[float, ...]:
    return tuple(float(np.mean(pred[labels == c] == c)) if np.any(labels == c) else float("nan")
                 for c in range(num_classes))


def fit_affine(features: np.ndarray, labels: np.ndarray, num_classes: int, cfg: EvalConfig,
               seed: int) -> Callable[[np.ndarray], np.ndarray]:
    """Full-batch AdamW softmax regression on standardized features; returns a scorer."""
    x = np.asarray(features, dtype=np.float64)
    mu, sd = x.mean(0), x.std(0) + 1e-6
    xs = ((x - mu) / sd).astype(np.float32)
    rng = np.random.default_rng([seed, 21])
    params = {"probe.weight": (rng.normal(0, 0.01, size=(num_classes, x.shape[1]))).astype(np.float32),
              "probe.bias": np.zeros(num_classes, dtype=np.float32)}
    opt = AdamW(weight_decay=cfg.probe_weight_decay, decay={"probe.bias": False})
    rows = np.arange(len(labels))
    for _ in range(cfg.probe_epochs):
        tape = Tape()
        w, b = tape.leaf(params["probe.weight"]), tape.leaf(params["probe.bias"])
        logp = ops.log_softmax(ops.linear(xs, w, b), axis=-1)
        loss = -ops.mean(ops.getitem(logp, (rows, labels)))
        gw, gb = tape.grad(loss, [w, b])
        opt.step(params, {"probe.weight": gw, "probe.bias": gb}, cfg.probe_lr)
    w, b = params["probe.weight"].copy(), params["probe.bias"].copy()

    def score(f):
        return ((np.asarray(f, dtype=np.float64) - mu) / sd) @ w.T.astype(np.float64) + b
    return score


def linear_probe(state: EncoderState, train: Dataset, test: Dataset, cfg: EvalConfig | None = None,
                 seed: int = 0) -> ProbeResult:
    """Frozen-encoder affine probe on every layer; reports the best one."""
    cfg = cfg or EvalConfig()
    check_disjoint(train, test)
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    before = state.checksum()
    ftr, fte = extract_features(state, train), extract_features(state, test)
    accs, preds = [], []
    for layer in range(len(ftr)):
        scorer = fit_affine(ftr[layer], train.labels, num_classes, cfg, seed)
        pred = scorer(fte[layer]).argmax(-1)
        preds.append(pred)
        accs.append(evaluate_accuracy(lambda _: pred, Split(fte[layer], test.labels)))
    if state.checksum() != before:
        raise RuntimeError("linear probe modified encoder parameters")
    best = int(np.argmax(accs))
    return ProbeResult(accs[best], _per_class(preds[best], test.labels, num_classes), seed, best,
                       tuple(accs))


# -- fine-tuning -----------------------------------------------------------------

@dataclass
class FinetuneResult:
    accuracy: float
    seed: int
    losses: list[float] = field(default_factory=list)
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def _classify(state: EncoderState, params, x, **kw) -> Tensor:
    cfg = state.config
    feats = encoder_forward(embed_and_mask(patchify(x, cfg.patch_size), None, params), params, cfg, **kw)
    return ops.linear(ops.mean(feats, axis=1), params["cls_head.weight"], params["cls_head.bias"])


def finetune(state: EncoderState, train: Dataset, test: Dataset, cfg: EvalConfig | None = None,
             seed: int = 0, num_classes: int | None = None) -> FinetuneResult:
    """Train encoder and a linear class head jointly with layer-wise lr decay.

    The pretraining head is dropped. ``state`` itself is left untouched.
    """
    cfg = cfg or EvalConfig()
    check_disjoint(train, test)
    num_classes = num_classes or int(train.labels.max()) + 1
    _check_labels(train, num_classes)
    _check_labels(test, num_classes)
    enc = state.config
    rng = np.random.default_rng([seed, 31])
    params = {k: v.copy() for k, v in state.params.items() if not k.startswith("head.")}
    params["cls_head.weight"] = (rng.normal(0, 0.02, size=(num_classes, enc.embed_dim))).astype(np.float32)
    params["cls_head.bias"] = np.zeros(num_classes, dtype=np.float32)
    mult = layer_decay_multipliers(enc.depth, cfg.layer_decay)
    opt = AdamW(weight_decay=0.05,
                lr_scale={k: mult[layer_id(k, enc.depth)] for k in params},
                decay={k: not no_decay(k, v) for k, v in params.items()})

    res = enc.input_resolution
    mean, std = train.manifest.mean, train.manifest.std
    labels = train.labels
    bs = cfg.finetune_batch_size
    per_epoch = math.ceil(len(train) / bs)
    total = cfg.finetune_epochs * per_epoch
    sched = ScheduleSpec("cosine", cfg.finetune_lr, min(per_epoch, total - 1), total)
    losses = []
    for step in range(total):
        epoch, j = divmod(step, per_epoch)
        idx = np.random.default_rng([seed, 32, epoch]).permutation(len(train))[j * bs:(j + 1) * bs]
        srng = np.random.default_rng([seed, 33, step])
        x = np.stack([augment(train.images[i], srng, res, mean, std).normalized for i in idx])
        tape = Tape()
        leaves = {k: tape.leaf(v, dtype=v.dtype) for k, v in params.items()}
        logp = ops.log_softmax(_classify(state, leaves, x, drop_path=cfg.drop_path, rng=srng), axis=-1)
        loss = -ops.mean(ops.getitem(logp, (np.arange(len(idx)), labels[idx])))
        names = list(leaves)
        grads = dict(zip(names, tape.grad(loss, [leaves[k] for k in names])))
        opt.step(params, grads, lr_at(sched, step))
        losses.append(loss.item())

    consts = {k: Tensor(v, dtype=v.dtype) for k, v in params.items()}
    x_test = np.stack([center_view(im, res, mean, std).normalized for im in test.images])

    def model(x):
        return np.concatenate([_classify(state, consts, x[s:s + 64]).data for s in range(0, len(x), 64)])

    return FinetuneResult(evaluate_accuracy(model, Split(x_test, test.labels)), seed, losses, params)


def results_csv(rows) -> str:
    """``(protocol, seed, block, accuracy)`` rows as CSV."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for protocol, seed, block, acc in rows:
        w.writerow([protocol, seed, block, repr(float(acc))])
    return buf.getvalue()

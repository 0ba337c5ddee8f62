"""Two-layer tanh embedding network with identification and Siamese heads.

The base layer plays the role of the pretrained front end, the trunk output
is the speaker embedding, and the two heads are a softmax classifier over
speakers (or clusters) and the pairwise verification head

    p(same | x1, x2) = sigmoid(w . (e1 * e2) + b)

where e1, e2 are the embeddings of both inputs under one shared network.
Every gradient is written out by hand and checked against finite
differences in the test suite.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import ShapeError, format_float, make_rng

log = logging.getLogger(__name__)

GROUPS = ("base", "trunk", "cls", "siam")


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class EmbeddingModel:
    base_W: np.ndarray  # (H, F)
    base_b: np.ndarray  # (H,)
    trunk_W: np.ndarray  # (D, H)
    trunk_b: np.ndarray  # (D,)

    @classmethod
    def init(cls, rng: np.random.Generator, feature_dim=32, hidden_dim=32, embed_dim=16):
        return cls(
            base_W=_uniform(rng, (hidden_dim, feature_dim), feature_dim),
            base_b=_uniform(rng, (hidden_dim,), feature_dim),
            trunk_W=_uniform(rng, (embed_dim, hidden_dim), hidden_dim),
            trunk_b=_uniform(rng, (embed_dim,), hidden_dim),
        )

    @property
    def feature_dim(self) -> int:
        return self.base_W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.base_W.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.trunk_W.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "base.W": self.base_W,
            "base.b": self.base_b,
            "trunk.W": self.trunk_W,
            "trunk.b": self.trunk_b,
        }

    def copy(self) -> "EmbeddingModel":
        return copy.deepcopy(self)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.feature_dim:
            raise ShapeError(f"expected {self.feature_dim} features, got {X.shape[-1]}")
        return X

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (hidden, embedding) activations for a batch."""
        X = self._check(np.atleast_2d(X))
        h = np.tanh(X @ self.base_W.T + self.base_b)
        e = np.tanh(h @ self.trunk_W.T + self.trunk_b)
        return h, e

    def embed(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        _, e = self.forward(X)
        return e[0] if X.ndim == 1 else e

    def backward(self, X, h, e, dE) -> dict[str, np.ndarray]:
        dz2 = dE * (1.0 - e * e)
        dh = dz2 @ self.trunk_W
        dz1 = dh * (1.0 - h * h)
        return {
            "base.W": dz1.T @ X,
            "base.b": dz1.sum(axis=0),
            "trunk.W": dz2.T @ h,
            "trunk.b": dz2.sum(axis=0),
        }


@dataclass
class ClassifierHead:
    W: np.ndarray  # (C, D)
    b: np.ndarray  # (C,)

    @classmethod
    def init(cls, rng: np.random.Generator, n_classes: int, embed_dim: int):
        if n_classes < 2:
            raise ValueError(f"classifier needs at least 2 classes, got {n_classes}")
        return cls(
            W=_uniform(rng, (n_classes, embed_dim), embed_dim),
            b=_uniform(rng, (n_classes,), embed_dim),
        )

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"cls.W": self.W, "cls.b": self.b}

    def logits(self, E: np.ndarray) -> np.ndarray:
        return E @ self.W.T + self.b


@dataclass
class SiameseHead:
    w: np.ndarray  # (D,)
    b: np.ndarray = field(default_factory=lambda: np.zeros(1))

    @classmethod
    def init(cls, rng: np.random.Generator, embed_dim: int):
        return cls(w=_uniform(rng, (embed_dim,), embed_dim), b=_uniform(rng, (1,), embed_dim))

    def parameters(self) -> dict[str, np.ndarray]:
        return {"siam.w": self.w, "siam.b": self.b}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def siamese_logit(head: SiameseHead, E1: np.ndarray, E2: np.ndarray) -> np.ndarray:
    E1 = np.asarray(E1, dtype=np.float64)
    E2 = np.asarray(E2, dtype=np.float64)
    if E1.shape != E2.shape or E1.shape[-1] != head.w.shape[0]:
        raise ShapeError(f"embedding shapes {E1.shape}, {E2.shape} vs head dim {head.w.shape[0]}")
    return (E1 * E2) @ head.w + head.b[0]


def siamese_forward(head: SiameseHead, e1, e2):
    """Same-speaker probability for one pair (or row-aligned batches)."""
    p = sigmoid(siamese_logit(head, e1, e2))
    return float(p) if p.ndim == 0 else p


def _check_labels(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{y.min()}, {y.max()}]")
    return y.astype(np.int64)


def si_loss(model: EmbeddingModel, head: ClassifierHead, X, y):
    """Mean softmax cross-entropy and gradients for every parameter."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = _check_labels(y, head.n_classes)
    n = X.shape[0]
    h, e = model.forward(X)
    logits = head.logits(e)
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), y].mean()

    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = model.backward(X, h, e, dlogits @ head.W)
    grads["cls.W"] = dlogits.T @ e
    grads["cls.b"] = dlogits.sum(axis=0)
    return float(loss), grads


def siamese_loss(model: EmbeddingModel, head: SiameseHead, Xa, Xb, y):
    """Mean binary cross-entropy of the pair head; both branches share weights."""
    Xa = np.atleast_2d(np.asarray(Xa, dtype=np.float64))
    Xb = np.atleast_2d(np.asarray(Xb, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    n = Xa.shape[0]
    ha, ea = model.forward(Xa)
    hb, eb = model.forward(Xb)
    prod = ea * eb
    z = prod @ head.w + head.b[0]
    # softplus(z) - y z, evaluated without overflow
    loss = np.mean(np.logaddexp(0.0, z) - y * z)

    dz = (sigmoid(z) - y) / n
    ga = model.backward(Xa, ha, ea, dz[:, None] * head.w * eb)
    gb = model.backward(Xb, hb, eb, dz[:, None] * head.w * ea)
    grads = {k: ga[k] + gb[k] for k in ga}
    grads["siam.w"] = prod.T @ dz
    grads["siam.b"] = np.array([dz.sum()])
    return float(loss), grads


# ---------------------------------------------------------------- gradients

def gradient_check(loss_and_grad: Callable, params: dict[str, np.ndarray], epsilon=1e-5) -> float:
    """Largest per-block relative error between analytic and numeric gradients.

    ``loss_and_grad()`` must read the arrays in ``params`` in place. The error
    for a block is ||analytic - numeric|| / ||numeric||; blocks where both
    gradients vanish count as exact.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    _, analytic = loss_and_grad()
    worst = 0.0
    for name, arr in params.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up, _ = loss_and_grad()
            flat[i] = orig - epsilon
            down, _ = loss_and_grad()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * epsilon)
        diff = np.linalg.norm(analytic[name] - numeric)
        scale = np.linalg.norm(numeric)
        if scale < 1e-12:
            err = 0.0 if diff < 1e-10 else np.inf
        else:
            err = diff / scale
        worst = max(worst, err)
    return float(worst)


def gradient_check_si(model, head, X, y, epsilon=1e-5) -> float:
    params = {**model.parameters(), **head.parameters()}
    return gradient_check(lambda: si_loss(model, head, X, y), params, epsilon)


def gradient_check_siamese(model, head, Xa, Xb, y, epsilon=1e-5) -> float:
    params = {**model.parameters(), **head.parameters()}
    return gradient_check(lambda: siamese_loss(model, head, Xa, Xb, y), params, epsilon)


# ----------------------------------------------------------------- training

@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 40
    batch_size: int = 32
    init_mode: str = "finetune"  # or "scratch"
    freeze: Optional[frozenset] = None
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.init_mode not in ("finetune", "scratch"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if self.freeze is not None:
            self.freeze = frozenset(self.freeze)
            unknown = self.freeze - set(GROUPS)
            if unknown:
                raise ValueError(f"unknown parameter groups {sorted(unknown)}")

    @property
    def frozen(self) -> frozenset:
        return self.freeze if self.freeze is not None else frozenset()


@dataclass
class SiameseConfig:
    head_lr: float = 0.01
    full_lr: float = 0.001
    epochs: int = 20
    head_epochs: Optional[int] = None  # defaults to half of epochs
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.head_epochs is None:
            self.head_epochs = self.epochs // 2
        if not 0 <= self.head_epochs <= self.epochs:
            raise ValueError("head_epochs must lie in [0, epochs]")


@dataclass
class TrainResult:
    model: EmbeddingModel
    head: object
    history: list[dict]
    best_epoch: int

    @property
    def best_val_error(self) -> float:
        return self.history[self.best_epoch - 1]["val_error"]


def _sgd_step(params: dict, grads: dict, lr: float, frozen: frozenset) -> None:
    if lr == 0.0:
        return
    for name, arr in params.items():
        if name.split(".")[0] in frozen:
            continue
        arr -= lr * grads[name]


def classification_error(model: EmbeddingModel, head: ClassifierHead, X, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("validation set is empty")
    pred = np.argmax(head.logits(model.embed(np.atleast_2d(X))), axis=1)
    return float(np.mean(pred != y))


def train_si(model: EmbeddingModel, X, y, X_val, y_val, cfg: TrainConfig,
             n_classes: Optional[int] = None) -> TrainResult:
    """Mini-batch SGD on softmax cross-entropy.

    ``scratch`` re-draws every weight from ``cfg.seed``; ``finetune`` keeps the
    incoming network and attaches a freshly drawn classifier head. The input
    model is never mutated. Returns the weights of the epoch with the lowest
    validation error; ties go to the lower validation cross-entropy.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    if n_classes is None:
        n_classes = int(max(y.max(), np.max(y_val, initial=0))) + 1
    y = _check_labels(y, n_classes)
    y_val = _check_labels(y_val, n_classes)

    rng = make_rng(cfg.seed)
    if cfg.init_mode == "scratch":
        net = EmbeddingModel.init(rng, model.feature_dim, model.hidden_dim, model.embed_dim)
    else:
        net = model.copy()
    head = ClassifierHead.init(rng, n_classes, net.embed_dim)
    params = {**net.parameters(), **head.parameters()}
    frozen = cfg.frozen

    history = []
    best = ((np.inf, np.inf), 0, None)
    n = X.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = si_loss(net, head, X[idx], y[idx])
            _sgd_step(params, grads, cfg.learning_rate, frozen)
        train_loss, _ = si_loss(net, head, X, y)
        val_error = classification_error(net, head, X_val, y_val)
        val_loss, _ = si_loss(net, head, X_val, y_val)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_error": val_error,
                        "val_loss": val_loss})
        if (val_error, val_loss) < best[0]:
            best = ((val_error, val_loss), epoch, (net.copy(), copy.deepcopy(head)))
    log.debug("train_si: best epoch %d val_error %.4f", best[1], best[0][0])
    best_net, best_head = best[2]
    return TrainResult(best_net, best_head, history, best[1])


def train_siamese(model: EmbeddingModel, pairs_a, pairs_b, labels, val_a, val_b, val_labels,
                  cfg: SiameseConfig, head: Optional[SiameseHead] = None) -> TrainResult:
    """Two-phase Siamese fine-tuning with tied branch weights.

    Phase one trains only the pair head with ``cfg.head_lr`` while the
    network stays frozen; phase two updates every weight with ``cfg.full_lr``.
    The returned weights are those of the epoch with the lowest validation
    cross-entropy.
    """
    Xa = np.atleast_2d(np.asarray(pairs_a, dtype=np.float64))
    Xb = np.atleast_2d(np.asarray(pairs_b, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64)
    if Xa.shape[0] == 0:
        raise ValueError("empty pair list")
    if len(val_labels) == 0:
        raise ValueError("empty validation pair list")

    rng = make_rng(cfg.seed)
    net = model.copy()
    head = copy.deepcopy(head) if head is not None else SiameseHead.init(rng, net.embed_dim)
    params = {**net.parameters(), **head.parameters()}
    val_y = np.asarray(val_labels, dtype=np.float64)

    history = []
    best = (np.inf, 0, None)
    n = Xa.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        head_phase = epoch <= cfg.head_epochs
        lr = cfg.head_lr if head_phase else cfg.full_lr
        frozen = frozenset({"base", "trunk", "cls"}) if head_phase else frozenset()
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = siamese_loss(net, head, Xa[idx], Xb[idx], y[idx])
            _sgd_step(params, grads, lr, frozen)
        train_loss, _ = siamese_loss(net, head, Xa, Xb, y)
        val_loss, _ = siamese_loss(net, head, val_a, val_b, val_y)
        p = siamese_forward(head, net.embed(np.atleast_2d(val_a)), net.embed(np.atleast_2d(val_b)))
        val_error = float(np.mean((p >= 0.5) != (val_y == 1)))
        history.append({
            "epoch": epoch, "phase": 1 if head_phase else 2, "train_loss": train_loss,
            "val_loss": val_loss, "val_error": val_error,
        })
        if val_loss < best[0]:
            best = (val_loss, epoch, (net.copy(), copy.deepcopy(head)))
    best_net, best_head = best[2]
    return TrainResult(best_net, best_head, history, best[1])


# --------------------------------------------------------------- checkpoint

def save_checkpoint(path, model: EmbeddingModel, cls_head: Optional[ClassifierHead] = None,
                    siam_head: Optional[SiameseHead] = None) -> None:
    C = cls_head.n_classes if cls_head is not None else 0
    blocks = dict(model.parameters())
    if cls_head is not None:
        blocks.update(cls_head.parameters())
    if siam_head is not None:
        blocks.update(siam_head.parameters())
    with open(path, "w") as fh:
        fh.write(f"dims {model.feature_dim} {model.hidden_dim} {model.embed_dim} {C}\n")
        for name, arr in blocks.items():
            mat = np.atleast_2d(arr) if arr.ndim < 2 else arr
            fh.write(f"{name} {' '.join(str(s) for s in arr.shape)}\n")
            for row in mat:
                fh.write(" ".join(format_float(v) for v in row) + "\n")


def load_checkpoint(path):
    """Return (model, classifier head or None, siamese head or None)."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("dims "):
        raise ValueError(f"{path}: not a checkpoint (missing dims header)")
    F, H, D, C = (int(v) for v in lines[0].split()[1:])
    blocks: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        name, shape = parts[0], tuple(int(s) for s in parts[1:])
        n_rows = shape[0] if len(shape) == 2 else 1
        rows = [[float(v) for v in lines[i + 1 + r].split()] for r in range(n_rows)]
        blocks[name] = np.asarray(rows, dtype=np.float64).reshape(shape)
        i += 1 + n_rows
    model = EmbeddingModel(blocks["base.W"], blocks["base.b"], blocks["trunk.W"], blocks["trunk.b"])
    if (model.feature_dim, model.hidden_dim, model.embed_dim) != (F, H, D):
        raise ValueError(f"{path}: dims header disagrees with parameter blocks")
    cls_head = ClassifierHead(blocks["cls.W"], blocks["cls.b"]) if "cls.W" in blocks else None
    if (cls_head.n_classes if cls_head else 0) != C:
        raise ValueError(f"{path}: class count disagrees with header")
    siam = SiameseHead(blocks["siam.w"], blocks["siam.b"]) if "siam.w" in blocks else None
    return model, cls_head, siam

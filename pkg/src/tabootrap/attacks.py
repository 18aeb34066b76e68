"""White-box gradient attacks: FGSM, PGD (L-inf) and multiclass DeepFool (L2)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

METHODS = ("fgsm", "pgd", "deepfool")


@dataclass(frozen=True)
class AttackConfig:
    method: str
    eps: float = 0.0
    step: float | None = None
    iters: int = 1
    overshoot: float = 0.02
    random_start: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack {self.method!r}; choose from {METHODS}")
        if self.eps < 0:
            raise ValueError(f"eps must be non-negative, got {self.eps}")
        if self.iters < 1:
            raise ValueError(f"iteration count must be at least 1, got {self.iters}")
        if self.step is not None and self.step <= 0:
            raise ValueError(f"step must be positive, got {self.step}")

    @classmethod
    def create(cls, method: str, eps: float | None = None, iters: int | None = None, step=None):
        """Fill in the defaults: PGD step eps/4 with 10 iterations, DeepFool 5 iterations."""
        method = method.lower()
        if method == "fgsm":
            return cls("fgsm", eps=0.1 if eps is None else eps)
        if method == "pgd":
            eps = 0.07 if eps is None else eps
            return cls("pgd", eps=eps, step=step or eps / 4, iters=iters or 10)
        if method == "deepfool":
            return cls("deepfool", iters=iters or 5)
        raise ValueError(f"unknown attack {method!r}; choose from {METHODS}")

    @property
    def theta(self) -> str:
        if self.method == "fgsm":
            return f"eps={self.eps:g}"
        if self.method == "pgd":
            return f"eps={self.eps:g};i={self.iters};step={self.effective_step:g}"
        return f"i={self.iters};overshoot={self.overshoot:g}"

    @property
    def effective_step(self) -> float:
        return self.step if self.step is not None else self.eps / 4


def _frozen_forward(model, images):
    g = T.Graph()
    x = g.input(images.astype(T.DTYPE, copy=False))
    consts = {n: g.constant(v) for n, v in model.params.items()}
    logits, _, _ = model.forward(g, x, consts)
    return g, x, logits


def input_gradient(model, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(summed cross-entropy)/d(images); the model's weights are held fixed."""
    g, x, logits = _frozen_forward(model, images)
    loss = T.softmax_cross_entropy(logits, labels, reduction="sum")
    return T.backward(g, loss)[x.id]


def class_gradients(model, images: np.ndarray):
    """Logits (N, K) and per-class input gradients (K, N, ...) from one forward trace."""
    g, x, logits = _frozen_forward(model, images)
    n, k = logits.shape
    grads = np.empty((k,) + images.shape, dtype=T.DTYPE)
    for c in range(k):
        onehot = np.zeros((n, k), dtype=T.DTYPE)
        onehot[:, c] = 1
        grads[c] = T.backward(g, T.weighted_sum(logits, onehot))[x.id]
    return logits.value, grads


def fgsm(model, images, labels, eps: float) -> np.ndarray:
    images = np.asarray(images, dtype=T.DTYPE)
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    if eps == 0:
        return images.copy()
    grad = input_gradient(model, images, labels)
    return np.clip(images + T.DTYPE(eps) * np.sign(grad), 0, 1).astype(T.DTYPE)


def project_linf(x, origin, eps):
    """Clip into the eps-ball around ``origin`` and then into the [0, 1] pixel box."""
    return np.clip(np.clip(x, origin - eps, origin + eps), 0, 1).astype(T.DTYPE)


def pgd(model, images, labels, eps: float, step: float, iters: int, seed: int = 0, random_start: bool = True):
    if step <= 0 or iters < 1:
        raise ValueError(f"need step > 0 and iters >= 1, got {step}, {iters}")
    origin = np.asarray(images, dtype=T.DTYPE)
    eps = T.DTYPE(eps)
    x = origin.copy()
    if random_start and eps > 0:
        rng = np.random.default_rng(seed)
        x = project_linf(origin + rng.uniform(-eps, eps, size=origin.shape).astype(T.DTYPE), origin, eps)
    for _ in range(iters):
        grad = input_gradient(model, x, labels)
        x = project_linf(x + T.DTYPE(step) * np.sign(grad), origin, eps)
    return x


def deepfool(model, images, labels=None, iters: int = 5, overshoot: float = 0.02):
    """Multiclass DeepFool.

    Each iteration linearises every class margin around the current point
    and steps to the nearest linearised boundary, ignoring gradient
    components that would push a pixel already at 0 or 1 out of the box.
    The accumulated step is
    applied as ``x0 + (1 + overshoot) * r_total``, clipped to the pixel box
    (the clipped-away part is not carried forward).  Samples whose reference
    label (``labels``, or the clean prediction when omitted) is already
    wrong are returned untouched.

    Returns ``(adversarial images, degenerate mask)``; a sample is
    degenerate when every margin gradient vanishes, in which case it is
    left unchanged.
    """
    if iters < 1:
        raise ValueError(f"iters must be at least 1, got {iters}")
    x0 = np.asarray(images, dtype=T.DTYPE)
    n = len(x0)
    clean = model.predict(x0)
    ref = clean if labels is None else np.asarray(labels)
    active = clean == ref
    degenerate = np.zeros(n, dtype=bool)
    r_total = np.zeros_like(x0, dtype=np.float64)
    x_adv = x0.copy()
    rows = np.arange(n)
    for _ in range(iters):
        idx = rows[active]
        if idx.size == 0:
            break
        logits, grads = class_gradients(model, x_adv[idx])
        own = ref[idx]
        flipped = logits.argmax(axis=1) != own
        local = np.arange(idx.size)
        f = logits.astype(np.float64) - logits[local, own][:, None]
        w = grads.reshape(grads.shape[0], idx.size, -1).astype(np.float64)
        w = w - w[own, local][None]
        # pixels pinned at a box face cannot move outward; linearise on the free coordinates
        cur = x_adv[idx].reshape(1, idx.size, -1)
        w[((cur <= 0) & (w < 0)) | ((cur >= 1) & (w > 0))] = 0.0
        norms = np.linalg.norm(w, axis=2).T  # (n, K)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.abs(f) / norms
        ratio[local, own] = np.inf
        ratio[~np.isfinite(ratio)] = np.inf
        target = ratio.argmin(axis=1)
        stuck = ~np.isfinite(ratio[local, target]) & ~flipped
        move = ~flipped & ~stuck
        k, loc = target[move], local[move]
        coef = np.abs(f[loc, k]) / norms[loc, k] ** 2
        step = coef[:, None] * w[k, loc]
        r_total[idx[move]] += step.reshape((move.sum(),) + x0.shape[1:])
        degenerate[idx[stuck]] = True
        active[idx[flipped | stuck]] = False
        moved = idx[move]
        x_adv[moved] = np.clip(x0[moved] + (1 + overshoot) * r_total[moved], 0, 1)
        # drop the part of the accumulated step the pixel box clipped away
        r_total[moved] = (x_adv[moved] - x0[moved]) / (1 + overshoot)
    return x_adv.astype(T.DTYPE), degenerate


@dataclass
class AdversarialBatch:
    original: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    pred_clean: np.ndarray
    pred_adv: np.ndarray
    degenerate: np.ndarray
    config: AttackConfig

    @property
    def linf(self) -> np.ndarray:
        d = (self.perturbed - self.original).reshape(len(self.labels), -1)
        return np.abs(d).max(axis=1)

    @property
    def l2(self) -> np.ndarray:
        d = (self.perturbed - self.original).reshape(len(self.labels), -1).astype(np.float64)
        return np.linalg.norm(d, axis=1)

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "original": self.original,
            "perturbed": self.perturbed,
            "labels": self.labels.astype(np.float32),
            "pred_clean": self.pred_clean.astype(np.float32),
            "pred_adv": self.pred_adv.astype(np.float32),
            "degenerate": self.degenerate.astype(np.float32),
        }

    @classmethod
    def from_tensors(cls, tensors, config: AttackConfig) -> "AdversarialBatch":
        return cls(
            tensors["original"],
            tensors["perturbed"],
            tensors["labels"].astype(np.int64),
            tensors["pred_clean"].astype(np.int64),
            tensors["pred_adv"].astype(np.int64),
            tensors["degenerate"].astype(bool),
            config,
        )


def run_attack(model, images, labels, cfg: AttackConfig, seed: int = 0, chunk: int = 250) -> AdversarialBatch:
    images = np.asarray(images, dtype=T.DTYPE)
    labels = np.asarray(labels)
    out, degen = [], []
    for start in range(0, len(images), chunk):
        x, y = images[start : start + chunk], labels[start : start + chunk]
        if cfg.method == "fgsm":
            adv, d = fgsm(model, x, y, cfg.eps), np.zeros(len(x), dtype=bool)
        elif cfg.method == "pgd":
            adv = pgd(
                model, x, y, cfg.eps, cfg.effective_step, cfg.iters,
                seed=seed + start, random_start=cfg.random_start,
            )
            d = np.zeros(len(x), dtype=bool)
        else:
            adv, d = deepfool(model, x, y, cfg.iters, cfg.overshoot)
        out.append(adv)
        degen.append(d)
    perturbed = np.concatenate(out)
    return AdversarialBatch(
        images,
        perturbed,
        labels,
        model.predict(images),
        model.predict(perturbed),
        np.concatenate(degen),
        cfg,
    )

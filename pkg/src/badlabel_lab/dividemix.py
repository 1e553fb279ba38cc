"""Robust DivideMix: co-trained network pair with perturbation-guided sample division.

Stage I warms both networks up on the noisy labels (with a confidence
penalty), perturbs the one-hot labels along their loss gradient, and fits a
two-component mixture to the losses of the hardened perturbed labels. Each
network's mixture posterior picks a labeled set for its peer, and one MixMatch
epoch per network initialises the pair.

Stage II repeats mixture fitting on plain per-sample losses every epoch. A
division is only replaced when the fit converged within the iteration budget;
otherwise the cached one is reused. Stage III predicts with the summed softmax
outputs of both networks.

The two networks of an epoch may train on separate worker threads: every
network draws from its own random stream and, when co-guessing is enabled,
reads a snapshot of its peer taken at the epoch boundary, so results do not
depend on scheduling.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import gmm, nn
from .errors import ConfigError, NumericError
from .metrics import EpochRecord, RunMetrics, division_quality

log = logging.getLogger(__name__)


@dataclass
class DivideConfig:
    hidden: tuple[int, ...] = (64, 64)
    warmup_epochs: int = 2
    cp_weight: float = 0.25
    perturb_step: float = 0.4
    tau_p: float = 0.5
    tau_c: float = 0.5
    epochs: int = 30
    vb: gmm.VbConfig = field(default_factory=gmm.VbConfig)
    sharpen_temperature: float = 0.5
    n_augment: int = 2
    mixup_alpha: float = 4.0
    lambda_u: float = 25.0
    rampup_epochs: int = 16
    jitter_std: float = 0.1
    prior_weight: float = 3.0
    co_guess: bool = False
    refine_labels: bool = True
    sgd: nn.SgdConfig = field(default_factory=lambda: nn.SgdConfig(
        learning_rate=0.02, momentum=0.9, weight_decay=5e-4, batch_size=64,
    ))
    fallback_fraction: float = 0.1
    seed: int = 0
    use_bayes_gmm: bool = True
    use_perturbation: bool = True
    use_filtering: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("tau_p", "tau_c"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.warmup_epochs < 1:
            raise ConfigError(f"warmup_epochs must be >= 1, got {self.warmup_epochs}")
        if self.cp_weight < 0 or self.perturb_step < 0:
            raise ConfigError("cp_weight and perturb_step must be >= 0")
        if self.sharpen_temperature <= 0 or self.mixup_alpha <= 0 or self.n_augment < 1:
            raise ConfigError("invalid MixMatch settings")
        if self.prior_weight < 0:
            raise ConfigError(f"prior_weight must be >= 0, got {self.prior_weight}")
        if not 0 < self.fallback_fraction <= 1:
            raise ConfigError(f"fallback_fraction must lie in (0, 1], got {self.fallback_fraction}")


@dataclass
class Division:
    labeled: np.ndarray
    unlabeled: np.ndarray
    weights: np.ndarray
    threshold: float
    fallback: bool = False

    @property
    def empty(self) -> bool:
        return self.labeled.size == 0


@dataclass
class PairState:
    models: list[nn.MlpModel]
    states: list[nn.SgdState]
    rngs: list[np.random.Generator]
    epoch: int = 0
    cached: list[np.ndarray | None] = field(default_factory=lambda: [None, None])
    stage1: dict = field(default_factory=dict)

    @classmethod
    def create(cls, layer_dims, seed: int) -> "PairState":
        models = [nn.init_mlp(layer_dims, [seed, k]) for k in (1, 2)]
        return cls(
            models,
            [nn.SgdState.for_model(m) for m in models],
            [np.random.default_rng([seed, k, 7]) for k in (1, 2)],
        )


def _each(fn, items, n_jobs: int = 1) -> list:
    """``[fn(*item) for item in items]``, on up to ``n_jobs`` threads."""
    items = list(items)
    if n_jobs <= 1 or len(items) <= 1:
        return [fn(*item) for item in items]
    with ThreadPoolExecutor(max_workers=min(n_jobs, len(items))) as pool:
        return list(pool.map(lambda item: fn(*item), items))


def warmup(pair: PairState, X, noisy, epochs: int, cp_weight: float, sgd: nn.SgdConfig,
           n_jobs: int = 1) -> PairState:
    """Standard training of both networks on the noisy labels, ``CE - cp_weight * H``."""
    if epochs < 1:
        raise ConfigError(f"warm-up needs at least one epoch, got {epochs}")
    Y = nn.one_hot(noisy, pair.models[0].n_classes)

    def train(model, state, rng):
        for e in range(epochs):
            nn.train_epoch(model, X, Y, state, sgd, e, rng, cp_weight)

    _each(train, zip(pair.models, pair.states, pair.rngs), n_jobs)
    pair.epoch = epochs
    return pair


def perturb_labels(Y, P, step: float) -> np.ndarray:
    """One signed-free gradient-ascent step on the labels: ``Y + step * (-log P)``."""
    return np.asarray(Y, dtype=np.float64) + step * nn.label_gradient(Y, P)


def harden(Y) -> np.ndarray:
    """Row argmax; ties go to the lowest class index."""
    return np.asarray(Y).argmax(axis=1)


def divide(weights, threshold: float) -> Division:
    w = np.asarray(weights, dtype=np.float64)
    mask = w >= threshold
    return Division(np.flatnonzero(mask), np.flatnonzero(~mask), w, threshold)


def _with_fallback(div: Division, fraction: float) -> Division:
    if not div.empty:
        return div
    n = div.weights.size
    k = max(1, math.ceil(fraction * n))
    top = np.sort(np.argsort(-div.weights, kind="stable")[:k])
    rest = np.setdiff1d(np.arange(n), top)
    log.warning("empty labeled set; falling back to the top %d samples by weight", k)
    return Division(top, rest, div.weights, div.threshold, fallback=True)


def sharpen(P, temperature: float) -> np.ndarray:
    Pt = np.asarray(P, dtype=np.float64) ** (1.0 / temperature)
    return Pt / Pt.sum(axis=1, keepdims=True)


def mixup(inputs, targets, rng: np.random.Generator, alpha: float):
    """Convex mix of each row with a random partner; coefficient ``max(b, 1 - b)``, ``b ~ Beta``."""
    lam = rng.beta(alpha, alpha)
    lam = max(lam, 1.0 - lam)
    perm = rng.permutation(len(inputs))
    mixed_x = lam * inputs + (1.0 - lam) * inputs[perm]
    mixed_y = lam * targets + (1.0 - lam) * targets[perm]
    return mixed_x, mixed_y, lam


def rampup_weight(progress: float, cfg: DivideConfig) -> float:
    if cfg.rampup_epochs <= 0:
        return cfg.lambda_u
    return cfg.lambda_u * float(np.clip(progress / cfg.rampup_epochs, 0.0, 1.0))


def _semi_loss_grad(logits, targets, n_labeled: int, lambda_u: float, prior_weight: float = 0.0):
    """MixMatch loss and its logit gradient.

    CE on the first ``n_labeled`` rows, ``lambda_u`` times the MSE on the rest,
    plus ``prior_weight`` times KL(uniform || batch-mean prediction), which keeps
    the network from collapsing onto one class.
    """
    P = nn.softmax(logits)
    N, C = P.shape
    gP = np.zeros_like(P)  # gradient w.r.t. P for the MSE and prior terms
    grad = np.zeros_like(P)
    Px, Tx = P[:n_labeled], targets[:n_labeled]
    lx = float(nn.cross_entropy_soft(Tx, Px).mean()) if n_labeled else 0.0
    if n_labeled:
        grad[:n_labeled] = (Px * Tx.sum(axis=1, keepdims=True) - Tx) / n_labeled
    Pu, Tu = P[n_labeled:], targets[n_labeled:]
    lu = 0.0
    if len(Pu):
        lu = float(((Pu - Tu) ** 2).mean())
        gP[n_labeled:] = lambda_u * 2.0 * (Pu - Tu) / Pu.size
    penalty = 0.0
    if prior_weight > 0:
        prior = np.full(C, 1.0 / C)
        p_mean = np.maximum(P.mean(axis=0), nn.EPS)
        penalty = float(np.sum(prior * np.log(prior / p_mean)))
        gP -= prior_weight * prior / (N * p_mean)
    grad += P * (gP - (gP * P).sum(axis=1, keepdims=True))
    return lx + lambda_u * lu + prior_weight * penalty, grad


def mixmatch_epoch(
    student: nn.MlpModel,
    state: nn.SgdState,
    division: Division,
    X: np.ndarray,
    noisy: np.ndarray,
    cfg: DivideConfig,
    epoch: int,
    rng: np.random.Generator,
    peer: nn.MlpModel | None = None,
) -> float:
    """One semi-supervised epoch for ``student`` on a division made by its peer.

    Labeled rows keep their noisy one-hot labels; unlabeled rows get the sharpened
    average prediction over ``n_augment`` jittered copies (from both networks
    when ``peer`` is given and ``cfg.co_guess`` is set). Everything is mixed up
    and the loss is CE on the labeled part plus a ramped MSE on the unlabeled part.
    """
    C = student.n_classes
    B, M = cfg.sgd.batch_size, cfg.n_augment
    lab = rng.permutation(division.labeled)
    unl = rng.permutation(division.unlabeled)
    n_batches = max(1, math.ceil(lab.size / B))
    lr = cfg.sgd.lr_at(cfg.warmup_epochs + epoch)
    Y = nn.one_hot(noisy, C)
    total = 0.0
    u_pos = 0
    for b in range(n_batches):
        idx_x = lab[b * B:(b + 1) * B]
        xs = [X[idx_x] + cfg.jitter_std * rng.standard_normal((idx_x.size, X.shape[1])) for _ in range(M)]
        tx = Y[idx_x]
        if cfg.refine_labels:
            w = division.weights[idx_x][:, None]
            px = np.mean([nn.predict_proba(student, x) for x in xs], axis=0)
            tx = sharpen(w * tx + (1.0 - w) * px, cfg.sharpen_temperature)
        ts = [tx] * M
        n_lab = M * idx_x.size
        if unl.size:
            take = np.arange(u_pos, u_pos + B) % unl.size
            u_pos = (u_pos + B) % unl.size
            idx_u = unl[take]
            us = [X[idx_u] + cfg.jitter_std * rng.standard_normal((idx_u.size, X.shape[1])) for _ in range(M)]
            guessers = [student, peer] if (cfg.co_guess and peer is not None) else [student]
            guess = np.mean([nn.predict_proba(g, u) for g in guessers for u in us], axis=0)
            guess = sharpen(guess, cfg.sharpen_temperature)
            xs += us
            ts += [guess] * M
        inputs, targets, _ = mixup(np.concatenate(xs), np.concatenate(ts), rng, cfg.mixup_alpha)
        logits, cache = nn.forward(student, inputs, return_cache=True)
        lam_u = rampup_weight(epoch + b / n_batches, cfg)
        loss, dlogits = _semi_loss_grad(logits, targets, n_lab, lam_u, cfg.prior_weight)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite MixMatch loss at epoch {epoch}, batch {b}")
        nn.sgd_update(student, nn.backward(student, cache, dlogits), state, cfg.sgd, lr)
        total += loss
    return total / n_batches


def joint_predict_proba(pair: PairState, X) -> np.ndarray:
    return sum(nn.predict_proba(m, X) for m in pair.models)


def joint_predict(pair: PairState, X) -> np.ndarray:
    return harden(joint_predict_proba(pair, X))


def _fit_weights(losses: np.ndarray, cfg: DivideConfig):
    fit = gmm.fit_mixture(losses, cfg.vb, bayes=cfg.use_bayes_gmm)
    return gmm.posterior_low_mean(fit, losses), fit


def _record(metrics, epoch, loss, pair, divisions, fits, test, clean_mask):
    rec = EpochRecord(epoch=epoch, train_loss=float(loss))
    if test is not None:
        rec.test_acc = float(np.mean(joint_predict(pair, test[0]) == test[1]))
    if clean_mask is not None:
        q = [division_quality(d.labeled, clean_mask) for d in divisions]
        rec.labeled_precision = float(np.mean([p for p, _ in q]))
        rec.labeled_recall = float(np.mean([r for _, r in q]))
    if fits:
        rec.gmm_converged = bool(all(f.converged for f in fits))
        rec.gmm_iters = int(max(f.iterations_used for f in fits))
    metrics.add(rec)
    return rec


def _cross_epoch(pair: PairState, divisions, X, noisy, cfg: DivideConfig, epoch: int, n_jobs: int):
    peers = [m.copy() for m in pair.models[::-1]]
    return _each(
        lambda m, s, d, r, peer: mixmatch_epoch(m, s, d, X, noisy, cfg, epoch, r, peer),
        zip(pair.models, pair.states, divisions, pair.rngs, peers), n_jobs,
    )


@nn.single_threaded
def run(X, noisy, cfg: DivideConfig | None = None, test=None, clean_mask=None, n_classes=None,
        n_jobs: int = 1):
    """Train a network pair on features ``X`` with noisy labels.

    ``test`` is an optional ``(X_test, y_test)`` pair evaluated after every epoch;
    ``clean_mask`` (ground truth, for auditing only) enables precision/recall.
    ``n_jobs`` caps the worker threads and never changes the result.
    Returns ``(PairState, RunMetrics)``.
    """
    cfg = cfg or DivideConfig()
    X = np.asarray(X, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.int64)
    C = int(n_classes or noisy.max() + 1)
    pair = PairState.create([X.shape[1], *cfg.hidden, C], cfg.seed)
    metrics = RunMetrics()
    Y = nn.one_hot(noisy, C)

    # Stage I
    warmup(pair, X, noisy, cfg.warmup_epochs, cfg.cp_weight, cfg.sgd, n_jobs)
    step = cfg.perturb_step if cfg.use_perturbation else 0.0
    perturbed_losses = []
    for model in pair.models:
        P = nn.predict_proba(model, X)
        hard = harden(perturb_labels(Y, P, step))
        perturbed_losses.append(nn.cross_entropy_soft(nn.one_hot(hard, C), P))
    # division k comes from the peer's losses and trains network k
    w1, fit1 = _fit_weights(perturbed_losses[1], cfg)
    w2, fit2 = _fit_weights(perturbed_losses[0], cfg)
    divisions = [
        _with_fallback(divide(w1, cfg.tau_p), cfg.fallback_fraction),
        _with_fallback(divide(w2, cfg.tau_p), cfg.fallback_fraction),
    ]
    pair.stage1 = {
        "warm_models": [m.copy() for m in pair.models],
        "perturbed_losses": perturbed_losses,
        "weights": [w1, w2],
        "fits": [fit1, fit2],
        "divisions": divisions,
    }
    losses = _cross_epoch(pair, divisions, X, noisy, cfg, 0, n_jobs)
    _record(metrics, 0, np.mean(losses), pair, divisions, [fit1, fit2], test, clean_mask)

    # Stage II
    pair.cached = [w2, w1]
    for e in range(1, cfg.epochs + 1):
        fitted = _each(lambda peer: _fit_weights(nn.per_sample_loss(peer, X, noisy), cfg),
                       [(m,) for m in pair.models[::-1]], n_jobs)
        fits = [fit for _, fit in fitted]
        for k, (w, fit) in enumerate(fitted):
            if fit.converged or not cfg.use_filtering:
                pair.cached[k] = w
        divisions = [_with_fallback(divide(w, cfg.tau_c), cfg.fallback_fraction) for w in pair.cached]
        losses = _cross_epoch(pair, divisions, X, noisy, cfg, e, n_jobs)
        pair.epoch = cfg.warmup_epochs + e
        rec = _record(metrics, e, np.mean(losses), pair, divisions, fits, test, clean_mask)
        log.debug("epoch %d: %s", e, rec)
    return pair, metrics

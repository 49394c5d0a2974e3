"""Self-supervised objectives (NT-Xent, Barlow Twins) and the label-free pre-training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import SSL_AUGMENTATION, AugmentationConfig, augment_batch, channel_stats, derive_rng
from .encoders import Adam, Encoder, ProjectionHead, checkpoint_bytes
from .tensor import NumericContractError, Tensor

__all__ = [
    "SslConfig",
    "PretrainResult",
    "nt_xent_loss",
    "barlow_twins_loss",
    "ssl_loss",
    "pretrain",
    "DEFAULT_MILESTONES",
]

log = logging.getLogger(__name__)

DEFAULT_MILESTONES = (1, 5, 10, 25, 50, 100)


@dataclass(frozen=True)
class SslConfig:
    method: str = "simclr"
    temperature: float = 0.5
    lam: float = 5e-3
    epochs: int = 25
    batch_size: int = 128
    lr: float = 1e-3
    proj_dim: int = 64
    milestones: tuple[int, ...] = DEFAULT_MILESTONES
    augmentation: AugmentationConfig = field(default_factory=lambda: SSL_AUGMENTATION)

    def __post_init__(self):
        if self.method not in ("simclr", "barlow_twins"):
            raise ValueError(f"unknown SSL method {self.method!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("need epochs >= 0 and batch_size >= 2")


def _rows(z) -> Tensor:
    z = T.as_tensor(z)
    if z.data.ndim != 2:
        raise T.ShapeError(f"embeddings must be n x P, got {z.shape}")
    return z


def nt_xent_loss(zA, zB, tau: float = 0.5) -> Tensor:
    """Normalized-temperature cross entropy over 2n views.

    Rows are l2-normalized internally. Anchor a's positive is its twin view;
    the softmax runs over the other 2n - 1 embeddings.
    """
    zA, zB = _rows(zA), _rows(zB)
    if zA.shape != zB.shape:
        raise T.ShapeError(f"nt_xent_loss: view shapes differ, {zA.shape} vs {zB.shape}")
    n = zA.shape[0]
    if n == 0:
        raise ValueError("nt_xent_loss needs at least one pair")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.concatenate([zA.data, zB.data])
    m = 2 * n
    norm = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    u = z / norm
    s = (u @ u.T) / tau
    s[np.diag_indices(m)] = -np.inf
    pos = np.concatenate([np.arange(n, m), np.arange(n)])
    rows = np.arange(m)
    smax = s.max(axis=1, keepdims=True)
    e = np.exp(s - smax)
    lse = np.log(e.sum(axis=1)) + smax[:, 0]
    loss = np.mean(lse - s[rows, pos])

    def vjp(g):
        ds = e / e.sum(axis=1, keepdims=True)
        ds[rows, pos] -= 1.0
        ds *= float(g) / m
        du = (ds + ds.T) @ u / tau
        dz = (du - u * np.sum(du * u, axis=1, keepdims=True)) / norm
        return dz[:n], dz[n:]

    return T.record_op("nt_xent", np.array(loss), (zA, zB), vjp)


def barlow_twins_loss(zA, zB, lam: float = 5e-3, eps: float = 1e-9,
                      diagnostics: dict | None = None) -> Tensor:
    """Invariance plus weighted redundancy-reduction terms of the batch
    cross-correlation between column-standardized embeddings.

    Columns are standardized with the population std. Zero-variance columns
    are kept finite by ``eps`` and reported under
    ``diagnostics["zero_variance_columns"]``.
    """
    zA, zB = _rows(zA), _rows(zB)
    if zA.shape != zB.shape:
        raise T.ShapeError(f"barlow_twins_loss: view shapes differ, {zA.shape} vs {zB.shape}")
    n, p = zA.shape
    if n < 2:
        raise ValueError("barlow_twins_loss needs a batch of at least 2")

    def standardize(x):
        d = x - x.mean(axis=0)
        sigma = np.sqrt(np.mean(d * d, axis=0))
        return d, sigma, d / (sigma + eps)

    dA, sA, a = standardize(zA.data)
    dB, sB, b = standardize(zB.data)
    flat = np.flatnonzero((sA == 0) | (sB == 0))
    if flat.size:
        log.warning("barlow_twins_loss: zero-variance columns %s", flat.tolist())
    if diagnostics is not None:
        diagnostics["zero_variance_columns"] = flat.tolist()

    c = a.T @ b / n
    diag = np.diag(c)
    off = c.copy()
    off[np.diag_indices(p)] = 0.0
    loss = np.sum((1.0 - diag) ** 2) + lam * np.sum(off * off)

    def unstandardize(gx, d, sigma):
        s = sigma + eps
        gs = -np.sum(gx * d, axis=0) / (s * s)
        safe = np.where(sigma > 0, sigma, 1.0)
        dsig = np.where(sigma > 0, d / (n * safe), 0.0)
        direct = gx / s
        return direct - direct.mean(axis=0) + gs * dsig

    def vjp(g):
        gc = 2.0 * lam * off
        gc[np.diag_indices(p)] = -2.0 * (1.0 - diag)
        gc *= float(g)
        ga = b @ gc.T / n
        gb = a @ gc / n
        return unstandardize(ga, dA, sA), unstandardize(gb, dB, sB)

    return T.record_op("barlow_twins", np.array(loss), (zA, zB), vjp)


def ssl_loss(cfg: SslConfig, zA, zB) -> Tensor:
    if cfg.method == "simclr":
        return nt_xent_loss(zA, zB, cfg.temperature)
    return barlow_twins_loss(zA, zB, cfg.lam)


@dataclass
class PretrainResult:
    encoder: Encoder
    head: ProjectionHead
    checkpoints: dict[int, bytes]
    loss_trace: list[float]

    def loss_rows(self, run_id: str) -> list[tuple[str, int, float]]:
        return [(run_id, e + 1, v) for e, v in enumerate(self.loss_trace)]


def _label_free_images(data) -> np.ndarray:
    # only pixels cross this boundary; labels of any kind never reach the loop
    images = getattr(data, "images", data)
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError(f"pretrain expects n x H x W x 3 images, got {images.shape}")
    return images


def pretrain(encoder: Encoder, head: ProjectionHead | None, data, cfg: SslConfig,
             seed: int) -> PretrainResult:
    """Train ``encoder`` (+ projection head) on two augmented views per image.

    ``data`` may be a NoisySplit, a LabeledDataset or a bare image array; only
    its images are read. Checkpoints of the encoder are kept at epoch 0 and at
    every milestone up to ``cfg.epochs`` (the final epoch is always included).
    """
    images = _label_free_images(data)
    if head is None:
        head = ProjectionHead(encoder.feature_dim, cfg.proj_dim, seed)
    mean, std = channel_stats(images)
    aug = cfg.augmentation.with_stats(mean, std)
    params = encoder.parameters() + head.parameters()
    opt = Adam(params, lr=cfg.lr)
    meta = {"ssl": {"method": cfg.method, "seed": int(seed)}}
    wanted = {m for m in cfg.milestones if 0 < m <= cfg.epochs} | {cfg.epochs}

    def snapshot(epoch):
        return checkpoint_bytes(encoder.state_dict(),
                                {"encoder": encoder.config.to_dict(), **meta, "epoch": epoch})

    checkpoints = {0: snapshot(0)}
    trace: list[float] = []
    n = len(images)
    for epoch in range(cfg.epochs):
        order = derive_rng(seed, "ssl-shuffle", epoch).permutation(n)
        total, seen = 0.0, 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            va = augment_batch(images, idx, aug, seed, "ssl", epoch, "a")
            vb = augment_batch(images, idx, aug, seed, "ssl", epoch, "b")
            try:
                with T.Graph() as g:
                    za = head(encoder(va, "train"))
                    zb = head(encoder(vb, "train"))
                    loss = ssl_loss(cfg, za, zb)
                g.backward(loss, params)
                opt.step()
            except NumericContractError as exc:
                raise NumericContractError(f"pretrain epoch {epoch + 1} batch {bi}: {exc}") from None
            total += loss.item() * len(idx)
            seen += len(idx)
        trace.append(total / max(seen, 1))
        log.info("pretrain %s epoch %d loss %.4f", cfg.method, epoch + 1, trace[-1])
        if epoch + 1 in wanted:
            checkpoints[epoch + 1] = snapshot(epoch + 1)
    return PretrainResult(encoder, head, checkpoints, trace)

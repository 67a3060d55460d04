"""Prototype classification: episodic loss, training loop, 5-shot inference.

The loss for an episode is the mean over query points of
d(f(x), c_true) + log sum_k exp(-d(f(x), c_k)), i.e. cross-entropy on
the softmax over negated squared distances. Gradients flow through both
the query and the support embeddings.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass

import numpy as np

from .dataset import (
    Annotation,
    EmptyClass,
    Episode,
    Segment,
    interval_to_frames,
    sample_episode,
)
from .frontend import FeatureMatrix
from .tensornet import (
    Encoder,
    PlateauScheduler,
    SGDMomentum,
    save_checkpoint,
)

W_INFER_MIN = 8
W_INFER_MAX = 128


class DimensionMismatch(ValueError):
    """Embedding dimensions disagree."""


class EmptyNegativePool(ValueError):
    """Inference needs at least one negative window."""


class NonFiniteLoss(FloatingPointError):
    """Loss left the reals; training aborted."""


@dataclass
class Prototype:
    vector: np.ndarray
    class_id: int


@dataclass
class InferenceTask:
    shots: list[Segment]
    negative_pool: list[Segment]
    query_stream: list[Segment]
    width: int
    query_start: int  # first query frame
    n_frames: int  # file length in frames
    iterations: int = 5
    threshold: float = 0.5

    def __post_init__(self):
        if len(self.shots) != 5:
            raise ValueError(f"need exactly 5 shots, got {len(self.shots)}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")


@dataclass
class TrainConfig:
    epochs: int = 150
    episodes_per_epoch: int = 100
    val_episodes: int = 20
    n_way: int = 5
    n_shot: int = 5
    n_query: int = 5
    learning_rate: float = 0.01
    momentum: float = 0.85
    patience: int = 5
    improvement_threshold: float = 0.01
    lr_factor: float = 0.5
    seed: int = 0
    config_hash: str = ""


def euclid_sq(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    diff = a - b
    return float(diff @ diff)


def pairwise_sq(q: np.ndarray, protos: np.ndarray) -> np.ndarray:
    """(N, D) x (K, D) -> (N, K) squared distances."""
    if q.shape[1] != protos.shape[1]:
        raise DimensionMismatch(f"{q.shape} vs {protos.shape}")
    diff = q[:, None, :] - protos[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def prototypes(support: list[np.ndarray]) -> np.ndarray:
    """Per-class mean of (n_i, D) embedding stacks -> (K, D)."""
    if not support or any(len(s) == 0 for s in support):
        raise EmptyClass("every class needs at least one support embedding")
    return np.stack([np.asarray(s).mean(axis=0) for s in support])


def loss_from_embeddings(
    z_support: np.ndarray,  # (n_c, n_shot, D)
    z_query: np.ndarray,  # (n_q_total, D)
    labels: np.ndarray,  # (n_q_total,) class indices into the episode
    n_c: int,
    n_q: int,
):
    """Episode loss and its gradients w.r.t. both embedding sets.

    The divisor is n_c*n_q by contract even if fewer query rows are
    passed (degenerate episodes used in tests).
    """
    n_shot = z_support.shape[1]
    protos = z_support.mean(axis=1)  # (n_c, D)
    d = pairwise_sq(z_query, protos)  # (n_q_total, n_c)

    logits = -d
    logits -= logits.max(axis=1, keepdims=True)
    expd = np.exp(logits)
    sums = expd.sum(axis=1, keepdims=True)
    p = expd / sums

    # -log p in the log domain, so an underflowing p never yields inf
    rows = np.arange(len(labels))
    scale = 1.0 / (n_c * n_q)
    neg_log_p = np.log(sums[:, 0]) - logits[rows, labels]
    loss = float(scale * neg_log_p.sum())

    # d(loss)/d(d[q,k]) = scale * (1{k=label} - p[q,k])
    gd = -p
    gd[rows, labels] += 1.0
    gd *= scale

    diff = z_query[:, None, :] - protos[None, :, :]  # (n_q_total, n_c, D)
    grad_q = 2.0 * np.einsum("nk,nkd->nd", gd, diff)
    grad_protos = -2.0 * np.einsum("nk,nkd->kd", gd, diff)
    grad_support = np.repeat(grad_protos[:, None, :], n_shot, axis=1) / n_shot
    return loss, grad_support, grad_q, p


def episode_loss(model: Encoder, episode: Episode):
    """Embed an episode in one train-mode batch; return (loss, param grads)."""
    n_c = len(episode.classes)
    n_shot = len(episode.support[0])
    n_query = len(episode.query[0])
    stack = [s.features for group in episode.support for s in group]
    stack += [s.features for group in episode.query for s in group]
    x = np.stack(stack).astype(model.dtype)[:, None, :, :]

    z = model.encode(x, train=True)
    n_sup = n_c * n_shot
    z_support = z[:n_sup].reshape(n_c, n_shot, -1)
    z_query = z[n_sup:]
    labels = np.repeat(np.arange(n_c), n_query)

    loss, grad_support, grad_query, _ = loss_from_embeddings(
        z_support, z_query, labels, n_c, n_query
    )
    grad_z = np.concatenate(
        [grad_support.reshape(n_sup, -1), grad_query], axis=0
    ).astype(z.dtype)
    model.backward(grad_z, model.last_feature_shape())
    return loss, model.gradients()


def _mean_val_loss(model: Encoder, val_pool, cfg: TrainConfig, rng) -> float:
    total = 0.0
    for _ in range(cfg.val_episodes):
        ep = sample_episode(val_pool, cfg.n_way, cfg.n_shot, cfg.n_query, rng)
        loss, _ = episode_loss(model, ep)
        total += loss
    return total / cfg.val_episodes


def train(
    model: Encoder,
    train_pool: dict[int, list[Segment]],
    val_pool: dict[int, list[Segment]],
    cfg: TrainConfig,
    checkpoint_path: str,
    metrics_path: str,
) -> dict:
    """Episodic training; keeps the epoch with minimum validation loss.

    Writes one metrics row per epoch and the best checkpoint on exit.
    Returns a history dict with per-epoch losses and the best epoch.
    """
    rng = np.random.default_rng(cfg.seed)
    optimizer = SGDMomentum(lr=cfg.learning_rate, momentum=cfg.momentum)
    scheduler = PlateauScheduler(
        patience=cfg.patience, threshold=cfg.improvement_threshold, factor=cfg.lr_factor
    )
    history = {"train_loss": [], "val_loss": [], "lr": [], "best_epoch": -1}
    best_val = math.inf
    best_state = None

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for epoch in range(1, cfg.epochs + 1):
            ep_losses = []
            for _ in range(cfg.episodes_per_epoch):
                ep = sample_episode(train_pool, cfg.n_way, cfg.n_shot, cfg.n_query, rng)
                loss, grads = episode_loss(model, ep)
                if not math.isfinite(loss):
                    raise NonFiniteLoss(f"epoch {epoch}: loss = {loss}")
                optimizer.step(model.parameters(), grads)
                ep_losses.append(loss)
            train_loss = float(np.mean(ep_losses))
            val_loss = _mean_val_loss(model, val_pool, cfg, rng)
            if not math.isfinite(val_loss):
                raise NonFiniteLoss(f"epoch {epoch}: val loss = {val_loss}")
            optimizer.lr = scheduler.step(val_loss, optimizer.lr)

            writer.writerow([epoch, f"{train_loss:.6f}", f"{val_loss:.6f}", optimizer.lr])
            history["train_loss"].append(train_loss)
            history["val_loss"].append(val_loss)
            history["lr"].append(optimizer.lr)
            if val_loss < best_val:
                best_val = val_loss
                history["best_epoch"] = epoch
                best_state = (
                    copy.deepcopy({**model.parameters(), **model.buffers()}),
                    copy.deepcopy(optimizer),
                    copy.deepcopy(scheduler),
                )

    params, best_opt, best_sched = best_state
    model.set_parameters(params)
    save_checkpoint(
        checkpoint_path,
        model,
        best_opt,
        best_sched,
        epoch=history["best_epoch"],
        seed=cfg.seed,
        config_hash=cfg.config_hash,
    )
    return history


def embed_segments(model: Encoder, segments: list[Segment]) -> np.ndarray:
    """Eval-mode embeddings, batched to bound im2col memory."""
    if not segments:
        return np.zeros((0, 0), dtype=np.float32)
    h, w = segments[0].features.shape
    batch = max(1, 32768 // max(1, (h // 2) * (w // 2)))
    outs = []
    for i in range(0, len(segments), batch):
        x = np.stack([s.features for s in segments[i : i + batch]])
        outs.append(model.encode(x.astype(np.float32)[:, None, :, :]))
    return np.concatenate(outs, axis=0)


def query_probability(
    pos_proto: np.ndarray, neg_proto: np.ndarray, query_embedding: np.ndarray
) -> float:
    """Softmax over negated squared distances to the two prototypes."""
    d_pos = euclid_sq(query_embedding, pos_proto)
    d_neg = euclid_sq(query_embedding, neg_proto)
    m = max(-d_pos, -d_neg)
    e_pos = math.exp(-d_pos - m)
    return e_pos / (e_pos + math.exp(-d_neg - m))


def _window_probs_to_frames(
    starts: list[int], width: int, probs: np.ndarray, query_start: int, n_frames: int
) -> np.ndarray:
    """Per-frame probability = mean over the windows covering the frame."""
    acc = np.zeros(n_frames - query_start)
    cnt = np.zeros(n_frames - query_start)
    for s, p in zip(starts, probs):
        lo = s - query_start
        hi = min(lo + width, len(acc))
        acc[lo:hi] += p
        cnt[lo:hi] += 1
    return np.where(cnt > 0, acc / np.maximum(cnt, 1), 0.0)


def detect(
    model: Encoder, task: InferenceTask, rng: np.random.Generator
) -> tuple[np.ndarray, int]:
    """Per-frame event probabilities for the query region of one file.

    The positive prototype is the mean of the 5 shot embeddings and is
    fixed; each of the 5 iterations re-estimates the negative prototype
    from a fresh sample of the negative pool, and the per-window
    probabilities are averaged across iterations.

    Returns (probabilities, query_start_frame).
    """
    if not task.negative_pool:
        raise EmptyNegativePool("no negative windows before the query region")
    z_shots = embed_segments(model, task.shots)
    pos_proto = z_shots.mean(axis=0)
    z_neg = embed_segments(model, task.negative_pool)
    z_query = embed_segments(model, task.query_stream)

    sample_size = min(len(task.negative_pool), 5 * task.width)
    win_probs = np.zeros(len(task.query_stream))
    for _ in range(task.iterations):
        idx = rng.choice(len(task.negative_pool), sample_size, replace=False)
        neg_proto = z_neg[idx].mean(axis=0)
        d = pairwise_sq(z_query, np.stack([pos_proto, neg_proto]))
        logits = -d
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        win_probs += e[:, 0] / e.sum(axis=1)
    win_probs /= task.iterations

    starts = [s.source[1] for s in task.query_stream]
    frame_probs = _window_probs_to_frames(
        starts, task.width, win_probs, task.query_start, task.n_frames
    )
    return frame_probs, task.query_start


def shot_intervals(anns: list[Annotation], class_name: str, hop_s: float):
    """Frame ranges of the first five POS events of the class."""
    pos = sorted(
        (a for a in anns if a.labels.get(class_name) == "POS"),
        key=lambda a: a.onset_s,
    )[:5]
    return [interval_to_frames(a.onset_s, a.offset_s, hop_s) for a in pos]


def adaptive_width(shots_frames: list[tuple[int, int]]) -> int:
    """Median shot length in frames, clamped to [8, 128]."""
    lengths = sorted(hi - lo for lo, hi in shots_frames)
    med = lengths[len(lengths) // 2]
    return int(min(W_INFER_MAX, max(W_INFER_MIN, med)))


def _cut(values: np.ndarray, start: int, width: int, n: int) -> np.ndarray:
    chunk = values[:, max(0, start) : min(start + width, n)]
    if chunk.shape[1] < width:
        pad = np.zeros((values.shape[0], width - chunk.shape[1]), dtype=values.dtype)
        chunk = np.concatenate([chunk, pad], axis=1)
    return chunk.copy()


def assemble_task(
    m: FeatureMatrix,
    anns: list[Annotation],
    class_name: str,
    file_id: str = "",
    iterations: int = 5,
    threshold: float = 0.5,
) -> InferenceTask:
    """Build the 5-shot inference task for one annotated file.

    Shots are centre-cropped (or right-padded) to the adaptive width.
    The negative pool tiles everything before the end of the 5th shot
    that intersects no shot; the query stream tiles (hop W/2, tail
    right-aligned) from the end of the 5th shot to the end of the file.
    """
    shots_f = shot_intervals(anns, class_name, m.frame_hop_s)
    if len(shots_f) < 5:
        raise ValueError(f"need 5 annotated shots, found {len(shots_f)}")
    n = m.n_frames
    w = adaptive_width(shots_f)

    shots = []
    for lo, hi in shots_f:
        start = lo + max(0, (hi - lo - w) // 2) if hi - lo > w else lo
        shots.append(Segment(_cut(m.values, start, w, min(hi, n)), 1, (file_id, start)))

    query_start = min(shots_f[-1][1], n)
    blocked = np.zeros(query_start, dtype=bool)
    for lo, hi in shots_f:
        blocked[max(0, lo) : min(hi, query_start)] = True
    negative_pool = []
    run = None
    for i in range(query_start + 1):
        if i < query_start and not blocked[i]:
            if run is None:
                run = i
        elif run is not None:
            for s in range(run, i - w + 1, w):
                negative_pool.append(Segment(_cut(m.values, s, w, n), 0, (file_id, s)))
            run = None

    query_stream = []
    hop = max(1, w // 2)
    s = query_start
    while s + w <= n:
        query_stream.append(Segment(_cut(m.values, s, w, n), -1, (file_id, s)))
        s += hop
    covered_to = query_stream[-1].source[1] + w if query_stream else query_start
    if covered_to < n:
        s = max(query_start, n - w)
        query_stream.append(Segment(_cut(m.values, s, w, n), -1, (file_id, s)))

    return InferenceTask(
        shots=shots,
        negative_pool=negative_pool,
        query_stream=query_stream,
        width=w,
        query_start=query_start,
        n_frames=n,
        iterations=iterations,
        threshold=threshold,
    )

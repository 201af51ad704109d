"""Episodic training and evaluation loops."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import losses
from ..model import SSCFNet
from ..tensor import no_grad
from .data import Dataset, NoiseSpec
from .episodes import Episode, sample_episode

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    episodes: int = 2000
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 5
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    cosine_decay: bool = True
    lam: float = 0.7
    tau_c: float = 0.2
    seed: int = 0


@dataclass
class EvalResult:
    mean: float
    ci95: float
    accuracies: np.ndarray = field(repr=False)

    def __str__(self) -> str:
        return f"{100 * self.mean:.1f}±{100 * self.ci95:.1f}"


class SGD:
    """SGD with momentum and L2 weight decay."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total, 1)))


def model_input(items: np.ndarray) -> np.ndarray:
    """Dataset items -> network input (events become ``[T, B, C, H, W]``)."""
    if items.ndim == 5:
        return np.ascontiguousarray(items.transpose(1, 0, 2, 3, 4))
    return items


def episode_loss(model: SSCFNet, episode: Episode, train_index: np.ndarray, lam: float, tau_c: float):
    """Forward one episode; returns ``(total, l_tet, l_info, accuracy)``.

    ``train_index`` maps dataset class ids to TET head outputs.  An endpoint
    lambda keeps the unused term off the tape; it is still computed for
    reporting.
    """
    out = model(
        model_input(episode.support),
        episode.support_labels,
        model_input(episode.query),
        episode.way,
        with_embeddings=lam < 1.0,
    )
    head_targets = train_index[np.concatenate([episode.support_class_ids, episode.query_class_ids])]
    if lam > 0.0:
        l_tet = losses.tet_loss(out.logits, head_targets)
    else:
        with no_grad():
            l_tet = losses.tet_loss(out.logits.detach(), head_targets)
    if out.embeddings is None:
        ns = len(episode.support)
        with no_grad():
            emb = model.embed(
                out.features[:, :ns].detach(), episode.support_labels,
                out.features[:, ns:].detach(), episode.way,
            )
    else:
        emb = out.embeddings
    emb.query_labels = episode.query_labels
    l_info = losses.infonce_loss(emb, tau_c)
    total = losses.total_loss(l_tet, l_info, lam)
    pred = losses.classify_query(emb)
    acc = float(np.mean(pred == episode.query_labels))
    return total, l_tet, l_info, acc


def train(
    model: SSCFNet,
    dataset: Dataset,
    train_classes,
    config: TrainConfig,
    metrics_file=None,
    timing_file=None,
    log_every: int = 0,
) -> list[dict]:
    """Single-stage episodic training with the blended loss.

    One metrics record per episode is returned and, when ``metrics_file`` is
    given, written as a JSON line.  Wall-clock timings go to ``timing_file``
    so the metrics stream stays reproducible.
    """
    rng = np.random.default_rng(config.seed)
    train_classes = np.asarray(train_classes, dtype=np.int64)
    train_index = np.full(dataset.num_classes, -1, dtype=np.int64)
    train_index[train_classes] = np.arange(len(train_classes))
    if len(train_classes) != model.config.num_classes_train:
        raise ValueError(
            f"model head has {model.config.num_classes_train} outputs but the split has "
            f"{len(train_classes)} training classes"
        )
    opt = SGD(model.parameters(), config.lr, config.momentum, config.weight_decay)
    model.train()
    records = []
    for ep in range(config.episodes):
        t0 = time.perf_counter()
        if config.cosine_decay:
            opt.lr = cosine_lr(config.lr, ep, config.episodes)
        episode = sample_episode(dataset, train_classes, config.n_way, config.k_shot, config.q_query, rng)
        total, l_tet, l_info, acc = episode_loss(model, episode, train_index, config.lam, config.tau_c)
        if not np.isfinite(total.item()):
            raise TrainingDiverged(
                f"non-finite loss at episode {ep}: total={total.item()} tet={l_tet.item()} "
                f"info={l_info.item()} lr={opt.lr:.4g}"
            )
        opt.zero_grad()
        total.backward()
        opt.step()
        rec = {
            "episode": ep,
            "loss_tet": l_tet.item(),
            "loss_info": l_info.item(),
            "loss_total": total.item(),
            "accuracy": acc,
        }
        records.append(rec)
        if metrics_file is not None:
            metrics_file.write(json.dumps(rec) + "\n")
        if timing_file is not None:
            elapsed = (time.perf_counter() - t0) * 1000.0
            timing_file.write(json.dumps({"episode": ep, "elapsed_ms": round(elapsed, 3)}) + "\n")
        if log_every and (ep + 1) % log_every == 0:
            window = records[-log_every:]
            logger.info(
                "episode %d  loss %.4f  acc %.3f",
                ep + 1,
                np.mean([r["loss_total"] for r in window]),
                np.mean([r["accuracy"] for r in window]),
            )
    return records


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SSCF_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(
    model: SSCFNet,
    dataset: Dataset,
    test_classes,
    episodes: int,
    n_way: int = 5,
    k_shot: int = 1,
    q_query: int = 5,
    seed: int = 0,
    noise: NoiseSpec | None = None,
    noise_queries_only: bool = False,
) -> EvalResult:
    """Mean query accuracy over sampled test episodes with a 95% normal CI.

    Episode ``i`` draws from its own generator spawned from ``seed``, so the
    result does not depend on the number of workers.
    """
    test_classes = np.asarray(test_classes, dtype=np.int64)
    seeds = np.random.SeedSequence(seed).spawn(episodes)
    model.eval()

    def run(i: int) -> float:
        rng = np.random.default_rng(seeds[i])
        ep = sample_episode(dataset, test_classes, n_way, k_shot, q_query, rng)
        if noise is not None:
            ep = ep.with_noise(noise, rng, noise_queries_only)
        with no_grad():
            emb = model(
                model_input(ep.support), ep.support_labels, model_input(ep.query), ep.way
            ).embeddings
        return float(np.mean(losses.classify_query(emb) == ep.query_labels))

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            accs = np.array(list(pool.map(run, range(episodes))))
    else:
        accs = np.array([run(i) for i in range(episodes)])
    model.train()
    if episodes > 1:
        ci = 1.96 * accs.std(ddof=1) / math.sqrt(episodes)
    else:
        ci = 0.0
    return EvalResult(float(accs.mean()), float(ci), accs)

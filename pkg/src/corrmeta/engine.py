"""Episodic training, evaluation with 95% confidence intervals, and inference."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from typing import IO, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset, assert_class_disjoint
from .episodes import Episode, check_episode_support, sample_episode
from .head import build_prototype, attention_weights, PrototypeSet, classify, mean_prototype
from .model import ModelConfig, clamp_temperature, embed, embed_array, episode_forward, init_params
from .optim import AdamState, adam_step
from .tensor import NonFiniteError, ParamStore, Tensor, backward, mean, mul, no_grad, reshape, stack, tsum

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    episodes_total: int = 10000
    val_every: int = 500
    batch_episodes: int = 8
    lr0: float = 1e-3
    lr_decay: float = 0.5
    decay_every: int = 2000
    n_way: int = 5
    k_shot: int = 5
    q_queries: int = 15
    seed: int = 0
    val_episodes: int = 600
    use_pyramid: bool = True
    use_accm: bool = True
    use_corr_meta: bool = True
    chunk: int = 25

    def __post_init__(self):
        counts = (self.episodes_total, self.val_every, self.batch_episodes, self.decay_every,
                  self.n_way, self.k_shot, self.q_queries, self.val_episodes, self.chunk)
        if any(c < 1 for c in counts):
            raise ValueError("all TrainConfig counts must be positive")
        if self.val_episodes < 2:
            raise ValueError("validation needs at least 2 episodes for a confidence interval")

    def model_config(self, base: Optional[ModelConfig] = None) -> ModelConfig:
        base = base or ModelConfig()
        return dataclasses.replace(
            base, use_pyramid=self.use_pyramid, use_accm=self.use_accm, use_corr_meta=self.use_corr_meta
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Step-decayed rate for an update whose episode counter reaches ``step``.

    A batch that carries the counter across a multiple of ``decay_every``
    already uses the decayed rate.
    """
    return cfg.lr0 * cfg.lr_decay ** (step // cfg.decay_every)


@dataclass
class EvalReport:
    mean_accuracy: float
    ci95: float
    episode_count: int
    per_episode_accuracies: np.ndarray
    mean_loss: float = float("nan")

    def as_dict(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "ci95": self.ci95,
            "episode_count": self.episode_count,
            "mean_loss": self.mean_loss,
        }

    def __str__(self) -> str:
        return f"{self.mean_accuracy:.2f} ± {self.ci95:.2f} ({self.episode_count} episodes)"


def summarize(accuracies: Sequence[float], losses: Optional[Sequence[float]] = None) -> EvalReport:
    """Mean and 1.96*s/sqrt(E) (sample std) over per-episode accuracies, reported in percent."""
    acc = np.asarray(accuracies, dtype=np.float64)
    e = acc.size
    ci = 1.96 * acc.std(ddof=1) / np.sqrt(e) if e > 1 else float("nan")
    ml = float(np.mean(losses)) if losses is not None and len(losses) else float("nan")
    return EvalReport(float(acc.mean() * 100.0), float(ci * 100.0), e, acc, ml)


class MetricSink:
    """Line-delimited JSON records ``{step, split, loss, accuracy, ci95, lr, wall_ms}``."""

    FIELDS = ("step", "split", "loss", "accuracy", "ci95", "lr", "wall_ms")

    def __init__(self, stream: Optional[IO[str]] = None):
        self.stream = stream
        self.records: list[dict] = []

    def write(self, **rec) -> None:
        row = {k: rec.get(k) for k in self.FIELDS}
        self.records.append(row)
        if self.stream is not None:
            self.stream.write(json.dumps(row) + "\n")
            self.stream.flush()


# ---------------------------------------------------------------------------


def _episode_tensors(z: Tensor, ep: Episode, pos: np.ndarray) -> tuple[Tensor, Tensor]:
    d = z.shape[-1]
    s = z[pos[ep.support_index.reshape(-1)]]
    q = z[pos[ep.query_index.reshape(-1)]]
    return reshape(s, (ep.n_way, ep.k_shot, d)), q


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def batch_loss(
    z: Tensor, episodes: Sequence[Episode], pos: np.ndarray, params: ParamStore, cfg: ModelConfig
) -> tuple[Tensor, list[float], list[float]]:
    """Arithmetic mean of per-episode losses over a batch sharing one embedding table."""
    losses, accs, vals = [], [], []
    for ep in episodes:
        s, q = _episode_tensors(z, ep, pos)
        loss, logits = episode_forward(s, q, ep.query_labels, params, cfg)
        losses.append(loss)
        vals.append(loss.item())
        accs.append(_accuracy(logits.data, ep.query_labels))
    return mean(stack(losses)), vals, accs


def train_step(
    images: np.ndarray,
    episodes: Sequence[Episode],
    params: ParamStore,
    cfg: ModelConfig,
    opt: AdamState,
    lr: float,
    chunk: int = 25,
) -> tuple[float, float]:
    """One optimizer update on a batch of episodes.

    Each distinct image of the batch is embedded once. A tape-free pass gives
    the embedding table and d(loss)/d(table); the backbone gradient is then
    accumulated chunk by chunk by re-running the forward pass on the tape and
    back-propagating <table_chunk, d(loss)/d(table_chunk)>, which is exact by
    the chain rule and keeps peak memory at one chunk's tape.
    """
    pos_of, uniq = _unique_positions(episodes, len(images))
    z_data = embed_array(images[uniq], params, cfg, chunk=chunk)
    z = Tensor(z_data, requires_grad=True)
    params.zero_grad()
    loss, _, accs = batch_loss(z, episodes, pos_of, params, cfg)
    backward(loss)
    gz = z.grad
    for s in range(0, len(uniq), chunk):
        zc = embed(images[uniq[s:s + chunk]], params, cfg)
        backward(tsum(mul(zc, Tensor(gz[s:s + chunk]))))
    adam_step(params, opt, lr)
    clamp_temperature(params, cfg)
    return loss.item(), float(np.mean(accs))


def _unique_positions(episodes: Sequence[Episode], total: int) -> tuple[np.ndarray, np.ndarray]:
    used = np.concatenate([np.concatenate([e.support_index.ravel(), e.query_index.ravel()]) for e in episodes])
    uniq = np.unique(used)
    pos = np.full(total, -1, dtype=np.int64)
    pos[uniq] = np.arange(uniq.size)
    return pos, uniq


def evaluate_params(
    params: ParamStore,
    cfg: ModelConfig,
    ds: Dataset,
    episodes: int,
    n: int,
    k: int,
    q: int,
    seed,
    embeddings: Optional[np.ndarray] = None,
) -> EvalReport:
    """Per-episode query accuracy over freshly sampled episodes.

    Embeddings only depend on the image, so the whole split is embedded once
    and episodes index into that table.
    """
    if episodes < 2:
        raise ValueError("evaluation needs at least 2 episodes")
    check_episode_support(ds, n, k, q)
    if embeddings is None:
        embeddings = embed_array(ds.flat().astype(cfg.np_dtype), params, cfg)
    rng = np.random.default_rng(seed)
    table = Tensor(embeddings)
    ident = np.arange(len(embeddings))
    accs, losses = [], []
    with no_grad():
        for _ in range(episodes):
            ep = sample_episode(ds, n, k, q, rng)
            s, qr = _episode_tensors(table, ep, ident)
            loss, logits = episode_forward(s, qr, ep.query_labels, params, cfg)
            accs.append(_accuracy(logits.data, ep.query_labels))
            losses.append(loss.item())
    return summarize(accs, losses)


def evaluate(ckpt: Checkpoint, test_set: Dataset, episodes: int = 600, n: int = 5, k: int = 5, q: int = 15, seed: int = 0) -> EvalReport:
    return evaluate_params(ckpt.params, ckpt.model_config, test_set, episodes, n, k, q, seed)


def train(
    cfg: TrainConfig,
    train_set: Dataset,
    val_set: Dataset,
    sink: Optional[MetricSink] = None,
    model_config: Optional[ModelConfig] = None,
) -> Checkpoint:
    """Episodic training; returns the checkpoint with the best validation accuracy."""
    sink = sink or MetricSink()
    mcfg = cfg.model_config(model_config)
    assert_class_disjoint(train_set, val_set)
    check_episode_support(train_set, cfg.n_way, cfg.k_shot, cfg.q_queries)
    check_episode_support(val_set, cfg.n_way, cfg.k_shot, cfg.q_queries)

    params = init_params(mcfg, seed=cfg.seed)
    opt = AdamState()
    rng = np.random.default_rng([cfg.seed, 1])
    val_seed = [cfg.seed, 2]
    images = train_set.flat().astype(mcfg.np_dtype)
    val_images = val_set.flat().astype(mcfg.np_dtype)

    best: Optional[Checkpoint] = None
    done = 0
    while done < cfg.episodes_total:
        t0 = time.perf_counter()
        nb = min(cfg.batch_episodes, cfg.episodes_total - done)
        eps = [sample_episode(train_set, cfg.n_way, cfg.k_shot, cfg.q_queries, rng) for _ in range(nb)]
        lr = lr_at(done + nb, cfg)
        try:
            loss, acc = train_step(images, eps, params, mcfg, opt, lr, chunk=cfg.chunk)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite value at episode {done} (optimizer step {opt.step + 1}): {exc}") from exc
        prev, done = done, done + nb
        sink.write(step=done, split="train", loss=loss, accuracy=acc * 100.0, ci95=None, lr=lr,
                   wall_ms=(time.perf_counter() - t0) * 1000.0)
        logger.info("episode %d loss %.4f acc %.3f lr %.2e", done, loss, acc, lr)

        if done // cfg.val_every > prev // cfg.val_every or done == cfg.episodes_total:
            t0 = time.perf_counter()
            try:
                z = embed_array(val_images, params, mcfg)
                report = evaluate_params(params, mcfg, val_set, cfg.val_episodes, cfg.n_way, cfg.k_shot,
                                         cfg.q_queries, val_seed, embeddings=z)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value in validation after episode {done}: {exc}") from exc
            sink.write(step=done, split="val", loss=report.mean_loss, accuracy=report.mean_accuracy,
                       ci95=report.ci95, lr=lr, wall_ms=(time.perf_counter() - t0) * 1000.0)
            logger.info("validation at %d: %s", done, report)
            if best is None or report.mean_accuracy > best.best_val_accuracy:
                best = Checkpoint(
                    model_config=mcfg,
                    train_config=cfg.to_dict(),
                    params=params.copy(),
                    opt_state=_copy_state(opt),
                    step=done,
                    best_val_accuracy=report.mean_accuracy,
                    best_val_ci95=report.ci95,
                )
    assert best is not None
    return best


def _copy_state(s: AdamState) -> AdamState:
    return AdamState(s.beta1, s.beta2, s.eps, s.step,
                     {k: v.copy() for k, v in s.m.items()}, {k: v.copy() for k, v in s.v.items()})


# ---------------------------------------------------------------------------


@dataclass
class InferenceResult:
    label: int
    class_name: str
    probabilities: np.ndarray
    class_names: list[str]
    wall_ms: float = 0.0


def support_prototypes(ckpt: Checkpoint, support: Dataset) -> PrototypeSet:
    """One prototype per support class; classes may have different shot counts."""
    if support.n_classes < 2:
        raise ValueError("inference needs support images from at least 2 classes")
    cfg, params = ckpt.model_config, ckpt.params
    tau = params["head.tau"]
    protos = []
    with no_grad():
        for imgs in support.images:
            z = embed(imgs.astype(cfg.np_dtype), params, cfg)
            if cfg.use_corr_meta:
                protos.append(build_prototype(z, attention_weights(z, tau)))
            else:
                protos.append(mean_prototype(z))
    return PrototypeSet(stack(protos), list(support.class_names), Tensor(tau.data))


def infer_one(ckpt: Checkpoint, protos: PrototypeSet, image: np.ndarray) -> InferenceResult:
    cfg = ckpt.model_config
    t0 = time.perf_counter()
    with no_grad():
        z = embed(np.asarray(image, dtype=cfg.np_dtype), ckpt.params, cfg)
        probs = classify(z, protos).data
    wall = (time.perf_counter() - t0) * 1000.0
    label = int(np.argmax(probs))
    return InferenceResult(label, protos.class_ids[label], probs, list(protos.class_ids), wall)


def infer(ckpt: Checkpoint, support: Dataset, query: np.ndarray) -> InferenceResult:
    return infer_one(ckpt, support_prototypes(ckpt, support), query)

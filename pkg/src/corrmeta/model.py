"""Model assembly: configuration, parameter initialisation, embedding and episode loss."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .accm import AccmParams, accm_forward, init_accm
from .backbone import BackboneConfig, build_pyramid, extract_features, init_backbone, init_pyramid
from .head import build_prototypes, cosine_logits, episode_loss
from .tensor import ParamStore, Tensor, concat, global_avg_pool, no_grad

logger = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fused_channels: int = 256
    attn_reduction: int = 4
    tau_init: float = 10.0
    tau_min: float = 0.01
    tau_max: float = 100.0
    use_pyramid: bool = True
    use_accm: bool = True
    use_corr_meta: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.use_accm and not self.use_pyramid:
            raise ValueError("the correlation module runs on pyramid levels; disable it together with the pyramid")
        if not self.tau_min <= self.tau_init <= self.tau_max:
            raise ValueError("tau_init outside [tau_min, tau_max]")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    @property
    def embed_dim(self) -> int:
        if self.use_accm:
            return self.fused_channels
        if self.use_pyramid:
            return self.backbone.proj_channels * len(self.backbone.dilations)
        return self.backbone.feature_channels

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """16x16 input, C=16, C'=8, C_z=32 in double precision."""
        bb = BackboneConfig(input_size=16, block_channels=(8, 16, 16, 16), proj_channels=8)
        kw = dict(backbone=bb, fused_channels=32, dtype="float64")
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("backbone").items()}
        return cls(backbone=BackboneConfig(**bb), **d)


def ablation_config(base: ModelConfig, variant: str) -> ModelConfig:
    """Cumulative component switches: backbone < +pyramid < +accm < full."""
    flags = {
        "backbone": (False, False, False),
        "pyramid": (True, False, False),
        "accm": (True, True, False),
        "full": (True, True, True),
    }[variant]
    return dataclasses.replace(base, use_pyramid=flags[0], use_accm=flags[1], use_corr_meta=flags[2])


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    arrays = init_backbone(cfg.backbone, rng, dt)
    if cfg.use_pyramid:
        arrays.update(init_pyramid(cfg.backbone, rng, dt))
    if cfg.use_accm:
        arrays.update(
            init_accm(
                len(cfg.backbone.dilations),
                cfg.backbone.proj_channels,
                cfg.fused_channels,
                cfg.attn_reduction,
                rng,
                dt,
            )
        )
    arrays["head.tau"] = np.asarray(cfg.tau_init, dtype=dt)
    return ParamStore(arrays)


def embed(images, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Images [B,3,H,W] (or one [3,H,W]) to embeddings [B,D] (or [D])."""
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=cfg.np_dtype))
    if x.dtype != cfg.np_dtype:
        x = Tensor(x.data.astype(cfg.np_dtype))
    F = extract_features(x, params, cfg.backbone)
    if not cfg.use_pyramid:
        return global_avg_pool(F)
    pyr = build_pyramid(F, params, cfg.backbone)
    if not cfg.use_accm:
        return concat([global_avg_pool(lv) for lv in pyr.levels], axis=-1)
    ap = AccmParams.from_store(params, len(pyr))
    return accm_forward(pyr, ap).embedding


def embed_array(images: np.ndarray, params: ParamStore, cfg: ModelConfig, chunk: int = 32) -> np.ndarray:
    """Tape-free embedding of a stack of images, in fixed-size chunks."""
    out = []
    with no_grad():
        for s in range(0, len(images), chunk):
            out.append(embed(images[s:s + chunk], params, cfg).data)
    if not out:
        return np.zeros((0, cfg.embed_dim), dtype=cfg.np_dtype)
    return np.concatenate(out, axis=0)


def episode_forward(
    support: Tensor,
    query: Tensor,
    query_labels,
    params: ParamStore,
    cfg: ModelConfig,
) -> tuple[Tensor, Tensor]:
    """Loss and logits of one episode given embeddings.

    ``support`` is [N, K, D] (class-major), ``query`` is [NQ, D].
    """
    tau = params["head.tau"]
    protos = build_prototypes(support, tau, weighted=cfg.use_corr_meta)
    logits = cosine_logits(query, protos)
    return episode_loss(logits, query_labels), logits


def clamp_temperature(params: ParamStore, cfg: ModelConfig) -> None:
    t = params["head.tau"]
    np.clip(t.data, cfg.tau_min, cfg.tau_max, out=t.data)


def config_snapshot(model_cfg: ModelConfig, extra: Optional[dict] = None) -> str:
    """Human-readable key=value block (values JSON-encoded)."""
    flat = _flatten(model_cfg.to_dict(), "model")
    if extra:
        flat.update(_flatten(extra, "train"))
    return "".join(f"{k}={json.dumps(v)}\n" for k, v in sorted(flat.items()))


def parse_snapshot(text: str) -> dict:
    nested: dict = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        node = nested
        *path, leaf = key.split(".")
        for p in path:
            node = node.setdefault(p, {})
        node[leaf] = json.loads(raw)
    return nested


def _flatten(d: dict, prefix: str) -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}.{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out

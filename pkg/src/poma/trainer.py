"""Two-stage pretraining loop: alignment warm-up, then alignment + masked-embedding prediction."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from pathlib import Path
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import geometry, losses, masking
from .dataset import ReferenceEncoder, SceneRecord, embed_text
from .encoder import (EncoderConfig, PointMapEncoder, Predictor, build_encoder, build_predictor,
                      effective_weights, ema_update, seeded, view_features)
from .errors import ConfigError, CorruptionError, InvalidArgumentError, NonFiniteError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "main"
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-4
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.05
    ema_momentum: float = 0.996
    seed: int = 0
    jepa_mode: str = "chamfer"
    precision: str = "float32"

    def validate(self) -> None:
        if self.stage not in ("warmup", "main"):
            raise ConfigError(f"stage must be warmup or main, got {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1 or self.warmup_steps < 0:
            raise ConfigError("steps, batch size and warmup steps must be non-negative counts")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if not 0 <= self.ema_momentum <= 1:
            raise ConfigError("EMA momentum must lie in [0, 1]")
        if self.jepa_mode not in ("chamfer", "chamfer_mean", "mse"):
            raise ConfigError(f"unknown jepa mode {self.jepa_mode!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32


# --------------------------------------------------------------------------
# schedule and optimiser


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``cfg.lr`` then cosine decay to zero at ``total_steps``."""
    if total_steps <= cfg.warmup_steps:
        raise ConfigError(f"total steps ({total_steps}) must exceed warm-up steps ({cfg.warmup_steps})")
    if not 0 <= step <= total_steps:
        raise InvalidArgumentError(f"step {step} outside [0, {total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps if cfg.warmup_steps else cfg.lr
    progress = (step - cfg.warmup_steps) / (total_steps - cfg.warmup_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


@torch.no_grad()
def adamw_update(params: Mapping[str, torch.Tensor], grads: Mapping[str, Optional[torch.Tensor]],
                 state: OptimizerState, lr: float, cfg: TrainConfig) -> OptimizerState:
    """One decoupled-weight-decay Adam step, applied in place to ``params``."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name} at step {state.step}")
    state.step += 1
    t = state.step
    bc1 = 1 - cfg.beta1 ** t
    bc2 = 1 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if p.shape != g.shape:
            raise InvalidArgumentError(f"gradient shape mismatch for {name}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(cfg.beta1).add_((1 - cfg.beta1) * g)
        v.mul_(cfg.beta2).add_((1 - cfg.beta2) * g * g)
        update = (m / bc1) / ((v / bc2).sqrt() + cfg.eps) + cfg.weight_decay * p
        p.sub_(lr * update)
    return state


# --------------------------------------------------------------------------
# model bundle


class ModelBundle(nn.Module):
    """Context encoder, EMA target, frozen image stand-in, predictor and log temperature."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, tau: float = losses.TAU_INIT,
                 text_seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.text_seed = text_seed
        self.image = build_encoder(cfg, seed, rank=0)
        for p in self.image.parameters():
            p.requires_grad_(False)
        self.context = build_encoder(cfg, seed + 1)
        # the context encoder starts from the frozen image encoder's weights
        self.context.load_state_dict(self.image.state_dict(), strict=False)
        self.context.configure_trainable()
        self.predictor = build_predictor(cfg, seed + 2)
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau)))
        self.target: Optional[PointMapEncoder] = None

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    @property
    def text_encoder(self) -> ReferenceEncoder:
        return ReferenceEncoder(self.cfg.dim, self.text_seed)

    def start_main_stage(self) -> None:
        """Initialise the target encoder from the current context encoder."""
        self.target = effective_weights(self.context)

    def trainable(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def frozen(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if not p.requires_grad}


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().to(torch.float64).contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedScene:
    scene_id: str
    feats: torch.Tensor  # (V, G, token_dim)
    view_text: torch.Tensor  # (V, C, d) caption candidate embeddings
    scene_text: torch.Tensor  # (C, d)
    image_emb: Optional[torch.Tensor] = None  # (V, d) frozen stand-in image embeddings


def scene_features(point_maps: Sequence[np.ndarray], patch: int) -> np.ndarray:
    normed, _ = geometry.normalize_views(point_maps)
    return view_features(normed, patch)


def prepare_scene(rec: SceneRecord, cfg: EncoderConfig, text: ReferenceEncoder,
                  dtype=torch.float32, single_view: bool = False) -> list[PreparedScene]:
    """Tensorise a record; ``single_view`` splits it into independently normalised views."""
    def emb(texts):
        return torch.as_tensor(np.stack([embed_text(text, t) for t in texts]), dtype=dtype)

    scene_text = emb(rec.scene_captions) if rec.scene_captions else torch.zeros(1, cfg.dim, dtype=dtype)
    pms = [v.point_map for v in rec.views]
    if single_view:
        return [PreparedScene(f"{rec.scene_id}/{i}",
                              torch.as_tensor(scene_features([pm], cfg.patch), dtype=dtype),
                              emb(v.captions)[None], scene_text)
                for i, (pm, v) in enumerate(zip(pms, rec.views))]
    n_cap = min(len(v.captions) for v in rec.views)
    view_text = torch.stack([emb(v.captions[:n_cap]) for v in rec.views])
    return [PreparedScene(rec.scene_id, torch.as_tensor(scene_features(pms, cfg.patch), dtype=dtype),
                          view_text, scene_text)]


@torch.no_grad()
def attach_image_embeddings(bundle: ModelBundle, items: Sequence[PreparedScene]) -> None:
    for it in items:
        it.image_emb = bundle.image(it.feats.to(bundle.log_tau.dtype))[0]


@dataclass
class Batch:
    feats: torch.Tensor  # (S, V, G, token_dim)
    z_image: torch.Tensor  # (S, V, d)
    z_view_text: torch.Tensor  # (S, V, d)
    z_scene_text: torch.Tensor  # (S, d)
    partitions: list[masking.MaskPartition]


def make_batch(items: Sequence[PreparedScene], rng: np.random.Generator, grid: int,
               with_masks: bool) -> Batch:
    feats = torch.stack([it.feats for it in items])
    z_img = torch.stack([it.image_emb for it in items])
    vt, st = [], []
    for it in items:
        picks = rng.integers(it.view_text.shape[1], size=it.view_text.shape[0])
        vt.append(it.view_text[torch.arange(len(picks)), torch.as_tensor(picks)])
        st.append(it.scene_text[int(rng.integers(len(it.scene_text)))])
    parts = [masking.sample_partition(it.feats.shape[0], grid, grid, rng) for it in items] \
        if with_masks else []
    return Batch(feats, z_img, torch.stack(vt), torch.stack(st), parts)


def _key_mask(keys, n_views: int, grid: int) -> torch.Tensor:
    m = torch.zeros(n_views, grid * grid, dtype=torch.bool)
    for v, r, c in keys:
        m[v, r * grid + c] = True
    return m


def batch_losses(bundle: ModelBundle, batch: Batch, stage: str, jepa_mode: str = "chamfer"
                 ) -> dict[str, torch.Tensor]:
    """Loss components for one batch; keys ``view``, ``scene``, ``pjepa`` and ``total``."""
    S, V, G, D = batch.feats.shape
    tau = losses.clamp_log_tau(bundle.log_tau).exp()
    flat = batch.feats.reshape(S * V, G, D)
    z_p, _ = bundle.context(flat)
    parts = {"view": losses.view_alignment_loss(
        z_p, batch.z_image.reshape(S * V, -1), batch.z_view_text.reshape(S * V, -1), tau)}
    if stage == "main":
        zbar_p = F.normalize(z_p.reshape(S, V, -1).mean(dim=1), dim=-1)
        zbar_i = F.normalize(batch.z_image.mean(dim=1), dim=-1)
        parts["scene"] = losses.scene_alignment_loss(zbar_p, zbar_i, batch.z_scene_text, tau)
        if bundle.target is None:
            raise InvalidArgumentError("main stage needs a target encoder; call start_main_stage()")
        grid = bundle.cfg.grid
        visible = torch.cat([_key_mask(p.visible, V, grid) for p in batch.partitions])
        _, ctx_patches = bundle.context(flat, visible)
        with torch.no_grad():
            _, tgt_patches = bundle.target(flat)
        ctx_patches = ctx_patches.reshape(S, V, G, -1)
        tgt_patches = tgt_patches.reshape(S, V, G, -1)
        per_scene = []
        for s, part in enumerate(batch.partitions):
            vi = [k[0] for k in part.visible]
            vs = [k[1] * grid + k[2] for k in part.visible]
            mi = [k[0] for k in part.masked]
            ms = [k[1] * grid + k[2] for k in part.masked]
            pred = bundle.predictor(ctx_patches[s, vi, vs], part.visible, part.masked)
            per_scene.append(losses.jepa_loss(pred, tgt_patches[s, mi, ms], jepa_mode))
        parts["pjepa"] = torch.stack(per_scene).mean()
    parts["total"] = losses.total_loss(stage, parts)
    return parts


# --------------------------------------------------------------------------
# gradient checking


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
               eps: float = 1e-4, samples_per_param: int = 8, seed: int = 0,
               details: Optional[dict] = None) -> float:
    """Max relative error between autograd and central differences on sampled coordinates.

    ``params`` must be leaf tensors that ``loss_fn`` reads; they are perturbed in
    place and restored. Relative error is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    rng = np.random.default_rng(seed)
    names = list(params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    worst = 0.0
    for name, g in zip(names, grads):
        p = params[name]
        if g is None:
            g = torch.zeros_like(p)
        flat = p.data.view(-1)
        picks = rng.choice(flat.numel(), size=min(samples_per_param, flat.numel()), replace=False)
        for i in picks:
            i = int(i)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
            numeric = (up - down) / (2 * eps)
            analytic = g.view(-1)[i].item()
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            if details is not None:
                details.setdefault(name, []).append((i, analytic, numeric, err))
            worst = max(worst, err)
    return worst


def gradcheck_setup(seed: int = 0, cfg: Optional[EncoderConfig] = None, n_scenes: int = 2,
                    n_views: int = 2) -> tuple[ModelBundle, Batch]:
    """A float64 d=16, one-block model with non-zero adapters and a fixed random batch."""
    cfg = cfg or EncoderConfig(dim=16, depth=1, heads=2, patch=8, image_size=32,
                               max_views=n_views, lora_rank=4, lora_alpha=8.0, predictor_depth=2)
    bundle = ModelBundle(cfg, seed=seed).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in bundle.context.named_parameters():
            if name.endswith("lora_B"):
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    bundle.start_main_stage()
    with torch.no_grad():
        # move the target away from the context so the JEPA loss is generic
        for p in bundle.target.parameters():
            p.add_(0.01 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    G = cfg.grid ** 2
    feats = torch.randn(n_scenes, n_views, G, cfg.token_dim, generator=gen, dtype=torch.float64)
    feats[..., -1] = 1.0

    def unit(*shape):
        return F.normalize(torch.randn(*shape, generator=gen, dtype=torch.float64), dim=-1)

    rng = np.random.default_rng(seed)
    parts = [masking.sample_partition(n_views, cfg.grid, cfg.grid, rng, (0.2, 0.3))
             for _ in range(n_scenes)]
    batch = Batch(feats, unit(n_scenes, n_views, cfg.dim), unit(n_scenes, n_views, cfg.dim),
                  unit(n_scenes, cfg.dim), parts)
    return bundle, batch


def gradcheck_report(seed: int = 0, eps: float = 1e-4, samples_per_param: int = 6,
                     cfg: Optional[EncoderConfig] = None) -> dict[str, float]:
    """Max relative error per loss component on the small float64 fixture."""
    bundle, batch = gradcheck_setup(seed, cfg)
    params = bundle.trainable()
    out = {}
    checks = [("view", "chamfer"), ("scene", "chamfer"), ("pjepa", "chamfer"),
              ("pjepa_mse", "mse"), ("total", "chamfer")]
    for key, mode in checks:
        part = "pjepa" if key == "pjepa_mse" else key
        used = {n: p for n, p in params.items()
                if part in ("pjepa", "total") or not n.startswith("predictor.")}
        out[key] = grad_check(lambda: batch_losses(bundle, batch, "main", mode)[part], used,
                              eps, samples_per_param, seed)
    return out


# --------------------------------------------------------------------------
# stage loop


@dataclass
class TrainReport:
    stage: str
    loss_view: list[float] = field(default_factory=list)
    loss_scene: list[float] = field(default_factory=list)
    loss_pjepa: list[float] = field(default_factory=list)
    loss_total: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    digest: str = ""
    wall_time: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.loss_total)

    def to_lines(self) -> list[str]:
        """Line-delimited JSON: a header then one record per step."""
        head = {"stage": self.stage, "steps": self.steps, "digest": self.digest,
                "wall_time": self.wall_time}
        lines = [json.dumps(head)]
        for i in range(self.steps):
            lines.append(json.dumps({"step": i, "lr": self.lr[i], "view": self.loss_view[i],
                                     "scene": self.loss_scene[i], "pjepa": self.loss_pjepa[i],
                                     "total": self.loss_total[i]}))
        return lines

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "TrainReport":
        head = json.loads(lines[0])
        rep = cls(head["stage"], digest=head["digest"], wall_time=head["wall_time"])
        for line in lines[1:]:
            rec = json.loads(line)
            rep.lr.append(rec["lr"])
            rep.loss_view.append(rec["view"])
            rep.loss_scene.append(rec["scene"])
            rep.loss_pjepa.append(rec["pjepa"])
            rep.loss_total.append(rec["total"])
        return rep

    def moving_average(self, window: int = 50) -> np.ndarray:
        x = np.asarray(self.loss_total)
        if len(x) < window:
            return np.array([x.mean()]) if len(x) else x
        return np.convolve(x, np.ones(window) / window, mode="valid")


def _batches(n_items: int, batch_size: int, rng: np.random.Generator) -> Iterator[list[int]]:
    """Endless drop-last batches with a fresh shuffle each epoch."""
    if n_items < batch_size:
        return
    while True:
        perm = rng.permutation(n_items)
        for start in range(0, n_items - batch_size + 1, batch_size):
            yield [int(i) for i in perm[start:start + batch_size]]


def prepare_items(bundle: ModelBundle, records: Sequence[SceneRecord], stage: str) -> list[PreparedScene]:
    dtype = bundle.log_tau.dtype
    items = [it for rec in records
             for it in prepare_scene(rec, bundle.cfg, bundle.text_encoder, dtype, stage == "warmup")]
    attach_image_embeddings(bundle, items)
    return items


def run_stage(bundle: ModelBundle, records: Sequence[SceneRecord] | Sequence[PreparedScene],
              cfg: TrainConfig, opt_state: Optional[OptimizerState] = None,
              on_step: Optional[Callable[[int, dict], None]] = None
              ) -> tuple[ModelBundle, TrainReport, OptimizerState]:
    """Run ``cfg.steps`` optimisation steps of one stage in place on ``bundle``."""
    cfg.validate()
    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    report = TrainReport(cfg.stage)
    opt_state = opt_state or OptimizerState()
    if cfg.steps == 0:
        report.digest = parameter_digest(bundle)
        return bundle, report, opt_state
    if cfg.stage == "main" and bundle.target is None:
        bundle.start_main_stage()
    items = list(records)
    if items and isinstance(items[0], SceneRecord):
        items = prepare_items(bundle, items, cfg.stage)
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(len(items), cfg.batch_size, rng)
    params = bundle.trainable()
    for step in range(cfg.steps):
        idx = next(batches, None)
        if idx is None:
            log.warning("dataset of %d items cannot fill a batch of %d; stage ends at step %d",
                        len(items), cfg.batch_size, step)
            break
        if cfg.stage == "warmup":
            # single-view items: treat each as a one-view scene and flatten
            batch = make_batch([items[i] for i in idx], rng, bundle.cfg.grid, with_masks=False)
        else:
            batch = make_batch([items[i] for i in idx], rng, bundle.cfg.grid, with_masks=True)
        parts = batch_losses(bundle, batch, cfg.stage, cfg.jepa_mode)
        if not torch.isfinite(parts["total"]):
            raise NonFiniteError(f"non-finite loss at step {step}: {float(parts['total'])}")
        names = list(params)
        grads = torch.autograd.grad(parts["total"], [params[n] for n in names], allow_unused=True)
        lr = lr_at(step, cfg.steps, cfg)
        adamw_update(params, dict(zip(names, grads)), opt_state, lr, cfg)
        with torch.no_grad():
            bundle.log_tau.copy_(losses.clamp_log_tau(bundle.log_tau))
        if bundle.target is not None and cfg.stage == "main":
            ema_update(bundle.target, bundle.context, cfg.ema_momentum)
        report.lr.append(lr)
        vals = {k: float(v.detach()) for k, v in parts.items()}
        report.loss_view.append(vals["view"])
        report.loss_scene.append(vals.get("scene", 0.0))
        report.loss_pjepa.append(vals.get("pjepa", 0.0))
        report.loss_total.append(vals["total"])
        if on_step:
            on_step(step, vals)
    report.digest = parameter_digest(bundle)
    report.wall_time = time.perf_counter() - t0
    return bundle, report, opt_state


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(bundle: ModelBundle, opt_state: Optional[OptimizerState], path) -> None:
    from .formats import encode_checkpoint

    tensors: dict[str, torch.Tensor] = {}
    for name, t in bundle.state_dict().items():
        tensors[name] = t
    tensors["meta.text_seed"] = torch.tensor(float(bundle.text_seed))
    if opt_state is not None:
        tensors["opt.step"] = torch.tensor(float(opt_state.step))
        for name in opt_state.m:
            tensors[f"opt.m.{name}"] = opt_state.m[name]
            tensors[f"opt.v.{name}"] = opt_state.v[name]
    Path(path).write_bytes(encode_checkpoint(bundle.cfg, tensors))


def load_checkpoint(path) -> tuple[ModelBundle, Optional[OptimizerState]]:
    from .formats import decode_checkpoint

    cfg, tensors = decode_checkpoint(Path(path).read_bytes(), str(path))
    bundle = ModelBundle(cfg, text_seed=int(tensors.pop("meta.text_seed", torch.tensor(0.0)).item()))
    if any(n.startswith("target.") for n in tensors):
        bundle.start_main_stage()
    opt_state = None
    if "opt.step" in tensors:
        opt_state = OptimizerState(step=int(tensors.pop("opt.step").item()))
        for name in [n for n in tensors if n.startswith("opt.m.")]:
            key = name[len("opt.m."):]
            opt_state.m[key] = tensors.pop(name)
            opt_state.v[key] = tensors.pop(f"opt.v.{key}")
    expected = set(bundle.state_dict())
    if set(tensors) != expected:
        missing, extra = expected - set(tensors), set(tensors) - expected
        raise CorruptionError(f"{path}: parameter table mismatch (missing {sorted(missing)[:3]}, "
                              f"unexpected {sorted(extra)[:3]})")
    try:
        bundle.load_state_dict(tensors)
    except RuntimeError as exc:
        raise CorruptionError(f"{path}: {exc}") from exc
    return bundle, opt_state


def config_fields() -> dict[str, type]:
    return {f.name: f.type for f in fields(TrainConfig)}


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)

"""Point-map patch encoder, low-rank adapters, EMA target and masked predictor.

The encoder is a small pre-norm transformer over the P x P patches of one
view plus a learned summary token. The summary output goes through a head and
is L2-normalised for the alignment losses; patch outputs stay raw for the
masked-embedding objective. Views are encoded independently and only meet
inside the predictor.
"""

from __future__ import annotations

import copy
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import AdapterError, InvalidArgumentError, ShapeError
from .masking import PatchKey


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 4
    patch: int = 16
    image_size: int = 64
    max_views: int = 8
    lora_rank: int = 32
    lora_alpha: float = 64.0
    predictor_depth: int = 2
    mlp_ratio: int = 4

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def token_dim(self) -> int:
        # xyz per pixel plus the patch validity fraction
        return 3 * self.patch * self.patch + 1

    def validate(self) -> None:
        if self.image_size % self.patch:
            raise ShapeError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise InvalidArgumentError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.lora_rank < 0 or self.depth < 1 or self.predictor_depth < 1:
            raise InvalidArgumentError("rank must be >= 0 and depths >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@contextmanager
def seeded(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


# --------------------------------------------------------------------------
# tokens


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (n, 3 P^2), invalid coordinates zero-filled
    validity: np.ndarray  # (n,) fraction of valid pixels per patch
    positions: list[PatchKey]

    def __len__(self) -> int:
        return len(self.positions)

    def features(self) -> np.ndarray:
        return np.concatenate([self.tokens, self.validity[:, None]], axis=1)


def patchify(pm: np.ndarray, P: int, view: int = 0) -> TokenSequence:
    """Split an (H, W, 3) point map into row-major P x P patch tokens."""
    H, W, _ = pm.shape
    if H % P or W % P:
        raise ShapeError(f"point map {H}x{W} is not divisible by patch size {P}")
    gh, gw = H // P, W // P
    valid = ~np.any(np.isnan(pm), axis=-1)
    filled = np.where(valid[..., None], pm, 0.0)
    tokens = filled.reshape(gh, P, gw, P, 3).transpose(0, 2, 1, 3, 4).reshape(gh * gw, P * P * 3)
    validity = valid.reshape(gh, P, gw, P).transpose(0, 2, 1, 3).reshape(gh * gw, -1).mean(axis=1)
    positions = [(view, r, c) for r in range(gh) for c in range(gw)]
    return TokenSequence(tokens, validity, positions)


def view_features(point_maps: Sequence[np.ndarray], P: int) -> np.ndarray:
    """Stack token features of several views into (V, G, 3 P^2 + 1)."""
    return np.stack([patchify(pm, P, v).features() for v, pm in enumerate(point_maps)])


# --------------------------------------------------------------------------
# layers


class LoRALinear(nn.Module):
    """Frozen dense layer plus a trainable low-rank delta ``(alpha / r) B A``."""

    def __init__(self, d_in: int, d_out: int, rank: int = 0, alpha: float = 1.0):
        super().__init__()
        base = nn.Linear(d_in, d_out)
        self.weight = nn.Parameter(base.weight.detach().clone(), requires_grad=False)
        self.bias = nn.Parameter(base.bias.detach().clone(), requires_grad=False)
        self.rank = rank
        self.alpha = alpha
        if rank > 0:
            self.lora_A = nn.Parameter(torch.randn(rank, d_in) / math.sqrt(d_in))
            self.lora_B = nn.Parameter(torch.zeros(d_out, rank))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank if self.rank > 0 else 0.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.linear(x, self.weight, self.bias)
        if self.rank > 0:
            y = y + self.scaling * F.linear(F.linear(x, self.lora_A), self.lora_B)
        return y

    def effective_weight(self) -> torch.Tensor:
        if self.rank == 0:
            return self.weight
        return self.weight + self.scaling * (self.lora_B @ self.lora_A)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, rank: int = 0, alpha: float = 1.0):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.q = LoRALinear(dim, dim, rank, alpha)
        # no key bias: softmax is invariant to it, so it would be a dead parameter
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = LoRALinear(dim, dim, rank, alpha)
        self.o = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def attend(self, x: torch.Tensor, key_mask: Optional[torch.Tensor]) -> torch.Tensor:
        B, N, D = x.shape
        h = self.heads

        def split(t):
            return t.view(B, N, h, D // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // h)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(B, N, D))

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.attend(self.norm1(x), key_mask)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


# --------------------------------------------------------------------------
# encoder


class PointMapEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, rank: Optional[int] = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        r = cfg.lora_rank if rank is None else rank
        d = cfg.dim
        self.patch_embed = nn.Linear(cfg.token_dim, d)
        self.pos_embed = nn.Parameter(0.02 * torch.randn(cfg.grid * cfg.grid, d))
        self.summary_token = nn.Parameter(0.02 * torch.randn(d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_ratio, r, cfg.lora_alpha) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, d)

    @property
    def rank(self) -> int:
        return self.blocks[0].q.rank

    def forward(self, feats: torch.Tensor, key_mask: Optional[torch.Tensor] = None
                ) -> tuple[torch.Tensor, torch.Tensor]:
        """``feats`` (V, G, token_dim) -> (unit summaries (V, d), patch embeddings (V, G, d)).

        ``key_mask`` (V, G) marks the tokens that take part in attention; rows
        for excluded tokens are still returned but carry no meaning.
        """
        V, G, _ = feats.shape
        x = self.patch_embed(feats) + self.pos_embed[:G]
        x = torch.cat([self.summary_token.expand(V, 1, -1), x], dim=1)
        mask = None
        if key_mask is not None:
            mask = torch.cat([torch.ones(V, 1, dtype=torch.bool), key_mask], dim=1)
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.norm(x)
        summary = F.normalize(self.head(x[:, 0]), dim=-1)
        return summary, x[:, 1:]

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if p.requires_grad]

    def configure_trainable(self) -> None:
        """Adapters, positional table, summary token and head train; the rest stays frozen."""
        for name, p in self.named_parameters():
            p.requires_grad_(name.startswith(("pos_embed", "summary_token", "head."))
                             or ".lora_" in name)


def build_encoder(cfg: EncoderConfig, seed: int, rank: Optional[int] = None) -> PointMapEncoder:
    with seeded(seed):
        return PointMapEncoder(cfg, rank)


def encode(tokens: TokenSequence | Sequence[TokenSequence], model: PointMapEncoder,
           restrict: Optional[Iterable[PatchKey]] = None
           ) -> tuple[torch.Tensor, list[PatchKey], torch.Tensor]:
    """Encode one or more views given as token sequences.

    Returns per-view unit summaries (V, d), the keys of the returned patch
    embeddings and the embeddings themselves (n, d). With ``restrict`` only the
    listed tokens participate and are returned.
    """
    seqs = [tokens] if isinstance(tokens, TokenSequence) else list(tokens)
    if not seqs or any(len(s) == 0 for s in seqs):
        raise InvalidArgumentError("cannot encode an empty token set")
    G = model.cfg.grid ** 2
    dtype = next(model.parameters()).dtype
    feats = torch.zeros(len(seqs), G, model.cfg.token_dim, dtype=dtype)
    present = torch.zeros(len(seqs), G, dtype=torch.bool)
    keys_by_slot: dict[tuple[int, int], PatchKey] = {}
    for vi, s in enumerate(seqs):
        f = torch.as_tensor(s.features(), dtype=dtype)
        for ti, (view, r, c) in enumerate(s.positions):
            if not (0 <= r < model.cfg.grid and 0 <= c < model.cfg.grid):
                raise InvalidArgumentError(f"position {(view, r, c)} outside positional table")
            slot = r * model.cfg.grid + c
            feats[vi, slot] = f[ti]
            present[vi, slot] = True
            keys_by_slot[(vi, slot)] = (view, r, c)
    allowed = present.clone()
    if restrict is not None:
        wanted = set(restrict)
        for (vi, slot), key in keys_by_slot.items():
            allowed[vi, slot] = key in wanted
        if not allowed.any():
            raise InvalidArgumentError("restriction leaves no tokens")
    summary, patches = model(feats, allowed)
    slots = sorted(k for k in keys_by_slot if allowed[k])
    out = torch.stack([patches[vi, slot] for vi, slot in slots]) if slots else patches.new_zeros(0, model.cfg.dim)
    return summary, [keys_by_slot[k] for k in slots], out


# --------------------------------------------------------------------------
# adapters and EMA


def effective_state(model: nn.Module) -> dict[str, torch.Tensor]:
    """State with every adapted matrix replaced by ``W + (alpha/r) B A`` and adapters dropped."""
    state = {}
    lora = {name: m for name, m in model.named_modules() if isinstance(m, LoRALinear)}
    for name, t in model.state_dict().items():
        if ".lora_" in name:
            continue
        owner, _, leaf = name.rpartition(".")
        if leaf == "weight" and owner in lora:
            t = lora[owner].effective_weight().detach()
        state[name] = t.detach().clone()
    return state


def effective_weights(model: PointMapEncoder) -> PointMapEncoder:
    """Adapter-free copy of ``model`` with the low-rank deltas merged in."""
    with seeded(0):
        merged = PointMapEncoder(model.cfg, rank=0).to(next(model.parameters()).dtype)
    state = effective_state(model)
    if set(state) != set(merged.state_dict()):
        raise AdapterError("adapter merge produced an unexpected parameter set")
    merged.load_state_dict(state)
    for p in merged.parameters():
        p.requires_grad_(False)
    return merged


@torch.no_grad()
def ema_update(target: Mapping[str, torch.Tensor] | nn.Module,
               context: Mapping[str, torch.Tensor] | nn.Module, m: float):
    """In-place ``theta_T <- m theta_T + (1 - m) theta_C`` over matching names.

    Modules are compared through their effective (adapter-merged) state.
    """
    if not 0.0 <= m <= 1.0:
        raise InvalidArgumentError(f"momentum must lie in [0, 1], got {m}")
    tgt = dict(target.named_parameters()) | dict(target.named_buffers()) \
        if isinstance(target, nn.Module) else target
    ctx = effective_state(context) if isinstance(context, nn.Module) else context
    if set(tgt) != set(ctx):
        raise ShapeError("target and context parameter names differ")
    for name, t in tgt.items():
        c = ctx[name]
        if t.shape != c.shape:
            raise ShapeError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(c.shape)}")
        t.mul_(m).add_((1.0 - m) * c.to(t.dtype))
    return target


def make_target(context: PointMapEncoder) -> PointMapEncoder:
    return effective_weights(context)


# --------------------------------------------------------------------------
# predictor


class Predictor(nn.Module):
    """Fills masked patch slots from the visible context of all views jointly."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.dim
        self.cfg = cfg
        self.pos_embed = nn.Parameter(0.02 * torch.randn(cfg.max_views, cfg.grid, cfg.grid, d))
        self.mask_token = nn.Parameter(0.02 * torch.randn(d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.predictor_depth))
        self.norm = nn.LayerNorm(d)
        self.proj = nn.Linear(d, d)

    def _pos(self, keys: Sequence[PatchKey]) -> torch.Tensor:
        idx = torch.as_tensor(keys, dtype=torch.long).reshape(-1, 3)
        if len(idx) and (idx[:, 0].max() >= self.cfg.max_views or idx.min() < 0
                         or idx[:, 1:].max() >= self.cfg.grid):
            raise InvalidArgumentError("patch key outside the predictor positional table")
        return self.pos_embed[idx[:, 0], idx[:, 1], idx[:, 2]]

    def forward(self, context: torch.Tensor, context_keys: Sequence[PatchKey],
                query_keys: Sequence[PatchKey]) -> torch.Tensor:
        if len(set(query_keys)) != len(query_keys):
            raise InvalidArgumentError("duplicate mask query keys")
        if set(query_keys) & set(context_keys):
            raise InvalidArgumentError("mask queries overlap context keys")
        if not query_keys:
            return context.new_zeros(0, self.cfg.dim)
        ctx = context + self._pos(context_keys)
        qry = self.mask_token + self._pos(query_keys)
        x = torch.cat([ctx, qry], dim=0)[None]
        for blk in self.blocks:
            x = blk(x)
        return self.proj(self.norm(x[0, len(context_keys):]))


def build_predictor(cfg: EncoderConfig, seed: int) -> Predictor:
    with seeded(seed):
        return Predictor(cfg)


def predict_masked(context_embeddings: torch.Tensor, context_keys: Sequence[PatchKey],
                   mask_queries: Sequence[PatchKey], predictor: Predictor) -> torch.Tensor:
    return predictor(context_embeddings, context_keys, mask_queries)


def clone_module(m: nn.Module) -> nn.Module:
    return copy.deepcopy(m)

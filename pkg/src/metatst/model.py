"""The forecasting network: patch, series, and metadata tokens fused by a Transformer encoder.

Token layout is fixed: N patch-wise endogenous tokens, then C series-wise exogenous
tokens, then M metadata tokens. Only endogenous tokens carry (learned) positional
encodings; exogenous and metadata tokens are set-like, which makes the prediction
invariant to exogenous variate order. The linear forecasting head reads the
endogenous rows only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .encoding import ModalAlign, RouterAggregator
from .metadata import N_META_LEVELS, TEMPLATE_VERSION
from .tokens import TokenBlock, concat_blocks

CHECKPOINT_FORMAT = "metatst-checkpoint-v1"


def patch_count(t_en: int, patch_len: int) -> int:
    """Number of non-overlapping patches; at least one full patch must fit."""
    if patch_len <= 0:
        raise ValueError("patch_len must be positive")
    if t_en < patch_len:
        raise ValueError(f"input length {t_en} shorter than patch length {patch_len}")
    return t_en // patch_len


class PatchEmbed(nn.Module):
    """Linear projection of non-overlapping history patches plus learned positions.

    When the patch length does not divide the history, the oldest remainder
    values are dropped so the most recent observations are kept.
    """

    def __init__(self, t_en: int, patch_len: int, d_model: int):
        super().__init__()
        self.t_en = t_en
        self.patch_len = patch_len
        self.n_patches = patch_count(t_en, patch_len)
        self.proj = nn.Linear(patch_len, d_model)
        self.position = nn.Parameter(torch.randn(self.n_patches, d_model) * 0.02)

    def forward(self, x_en: torch.Tensor) -> torch.Tensor:
        if x_en.shape[-1] != self.t_en:
            raise ValueError(f"expected history length {self.t_en}, got {x_en.shape[-1]}")
        used = self.n_patches * self.patch_len
        patches = x_en[..., self.t_en - used:].reshape(*x_en.shape[:-1], self.n_patches, self.patch_len)
        return self.proj(patches) + self.position


class SeriesEmbed(nn.Module):
    """One shared linear map turning each whole exogenous series into one token."""

    def __init__(self, t_ex: int, d_model: int):
        super().__init__()
        self.t_ex = t_ex
        self.proj = nn.Linear(t_ex, d_model)

    def forward(self, x_ex: torch.Tensor) -> torch.Tensor:
        if x_ex.shape[-2] != self.t_ex:
            raise ValueError(f"expected exogenous length {self.t_ex}, got {x_ex.shape[-2]}")
        return self.proj(x_ex.transpose(-1, -2))


class EncoderBlock(nn.Module):
    """Post-norm Transformer block: self-attention and feed-forward with dropout."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float):
        super().__init__()
        self.attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)
        self.act = nn.GELU()
        self.dropout = nn.Dropout(dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, h: torch.Tensor, need_weights: bool = False):
        attn_out, attn_weights = self.attn(
            h, h, h, need_weights=need_weights, average_attn_weights=False
        )
        h = self.norm1(h + self.dropout(attn_out))
        ff = self.dropout(self.fc2(self.dropout(self.act(self.fc1(h)))))
        h = self.norm2(h + ff)
        return h, attn_weights


class EncoderStack(nn.Module):
    """L stacked blocks with full self-attention over all tokens; L=0 is the identity."""

    def __init__(self, n_layers: int, d_model: int, n_heads: int, d_ff: int, dropout: float):
        super().__init__()
        self.blocks = nn.ModuleList(
            EncoderBlock(d_model, n_heads, d_ff, dropout) for _ in range(n_layers)
        )

    def __len__(self) -> int:
        return len(self.blocks)

    def forward(self, h: torch.Tensor, collect_attention: bool = False):
        maps = [] if collect_attention else None
        for i, block in enumerate(self.blocks):
            h, weights = block(h, need_weights=collect_attention)
            if not torch.isfinite(h).all():
                raise RuntimeError(f"non-finite values in encoder layer {i} output")
            if collect_attention:
                maps.append(weights)
        return h, maps


class Forecaster(nn.Module):
    """Linear head over the flattened endogenous token representations."""

    def __init__(self, n_tokens: int, d_model: int, output_len: int):
        super().__init__()
        self.n_tokens = n_tokens
        self.proj = nn.Linear(n_tokens * d_model, output_len)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-2] < self.n_tokens:
            raise ValueError(f"need at least {self.n_tokens} tokens, got {h.shape[-2]}")
        flat = h[..., : self.n_tokens, :].flatten(start_dim=-2)
        return self.proj(flat)


def informative_concat(endo: TokenBlock, exo: TokenBlock, meta: TokenBlock) -> TokenBlock:
    """Concatenate the three token families in fixed order with segment labels."""
    for block, kind in ((endo, "endo"), (exo, "exo"), (meta, "meta")):
        if any(label != kind for label in block.segments):
            raise ValueError(f"block in {kind} position carries labels {set(block.segments)}")
    return concat_blocks(endo, exo, meta)


class MetaTST(nn.Module):
    """Metadata-informed Transformer forecaster.

    ``forward`` takes the endogenous history (batch, input_len), exogenous series
    (batch, t_ex, C) and metadata features. Metadata arrives either aggregated at
    the encoder's native width, ``meta_agg`` of shape (batch, M, E), or for router
    aggregation as padded word tokens ``meta_words`` (batch, M, W, E) with a
    validity ``meta_mask`` (batch, M, W).
    """

    def __init__(
        self,
        config: ModelConfig,
        meta_dim: int | None = None,
        t_ex: int | None = None,
        n_meta: int = N_META_LEVELS,
    ):
        super().__init__()
        self.config = config
        self.t_ex = config.input_len if t_ex is None else t_ex
        if self.t_ex > config.input_len:
            raise ValueError("t_ex cannot exceed input_len")
        self.n_meta = 0 if config.drop_meta else n_meta
        self.meta_dim = meta_dim

        if config.drop_endo:
            # Single trainable stand-in token keeps the forecasting head well-defined.
            self.endo_placeholder = nn.Parameter(torch.randn(1, config.d_model) * 0.02)
            self.n_endo_tokens = 1
        else:
            self.patch_embed = PatchEmbed(config.input_len, config.patch_len, config.d_model)
            self.n_endo_tokens = self.patch_embed.n_patches
        if not config.drop_exo:
            self.series_embed = SeriesEmbed(self.t_ex, config.d_model)
        if not config.drop_meta:
            if meta_dim is None:
                raise ValueError("meta_dim is required unless metadata tokens are dropped")
            self.modal_align = ModalAlign(meta_dim, config.d_model)
            if config.aggregation.kind == "router":
                self.router = RouterAggregator(
                    meta_dim, config.aggregation.router_count, config.n_heads
                )
        self.encoder = EncoderStack(
            config.e_layers, config.d_model, config.n_heads, config.d_ff, config.dropout
        )
        self.head = Forecaster(self.n_endo_tokens, config.d_model, config.output_len)

    def embed_meta(
        self,
        meta_agg: torch.Tensor | None = None,
        meta_words: torch.Tensor | None = None,
        meta_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if self.config.drop_meta:
            raise RuntimeError("metadata tokens are dropped in this configuration")
        if self.config.aggregation.kind == "router":
            if meta_words is None:
                raise ValueError("router aggregation needs word-level metadata tokens")
            batch, n_meta, n_words, dim = meta_words.shape
            flat_words = meta_words.reshape(batch * n_meta, n_words, dim)
            flat_mask = None if meta_mask is None else meta_mask.reshape(batch * n_meta, n_words)
            native = self.router(flat_words, flat_mask).reshape(batch, n_meta, dim)
        else:
            if meta_agg is None:
                raise ValueError("aggregated metadata vectors are required")
            native = meta_agg
        return self.modal_align(native)

    def token_counts(self, n_exo: int) -> tuple[int, int, int]:
        """Effective (endo, exo, meta) token counts for a batch with C exogenous variates."""
        return (
            self.n_endo_tokens,
            0 if self.config.drop_exo else n_exo,
            self.n_meta,
        )

    def forward(
        self,
        x_en: torch.Tensor | None = None,
        x_ex: torch.Tensor | None = None,
        meta_agg: torch.Tensor | None = None,
        meta_words: torch.Tensor | None = None,
        meta_mask: torch.Tensor | None = None,
        collect_attention: bool = False,
    ):
        cfg = self.config
        pieces = []
        if cfg.drop_endo:
            for ref in (x_ex, meta_agg, meta_words):
                if ref is not None:
                    batch = ref.shape[0]
                    break
            else:
                raise ValueError("cannot infer batch size with every input missing")
            pieces.append(self.endo_placeholder.expand(batch, -1, -1))
        else:
            if x_en is None:
                raise ValueError("x_en is required unless endogenous tokens are dropped")
            pieces.append(self.patch_embed(x_en))
        if not cfg.drop_exo and x_ex is not None and x_ex.shape[-1] > 0:
            pieces.append(self.series_embed(x_ex))
        if not cfg.drop_meta:
            pieces.append(self.embed_meta(meta_agg, meta_words, meta_mask))
        h = torch.cat(pieces, dim=-2)
        h, attention = self.encoder(h, collect_attention=collect_attention)
        prediction = self.head(h)
        if collect_attention:
            return prediction, attention
        return prediction


def head_parameter_names(model: MetaTST) -> set[str]:
    return {name for name, _ in model.named_parameters() if name.startswith("head.")}


def trainable_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _state_digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(
    path: str | Path,
    model: MetaTST,
    backend_model_id: str = "",
    template_version: str = TEMPLATE_VERSION,
    extra: dict | None = None,
) -> Path:
    """Write a named-tensor archive with a manifest and content digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()}
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "dims": {"meta_dim": model.meta_dim, "t_ex": model.t_ex, "n_meta": model.n_meta or N_META_LEVELS},
        "template_version": template_version,
        "backend_model_id": backend_model_id,
        "digest": _state_digest(arrays),
    }
    if extra:
        manifest["extra"] = extra
    payload = dict(arrays)
    payload["__manifest__"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with path.open("wb") as fh:
        np.savez(fh, **payload)
    return path


@dataclass
class Checkpoint:
    """A verified named-tensor archive plus its manifest."""

    manifest: dict
    arrays: dict[str, np.ndarray]

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.manifest["config"])


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Load and verify a checkpoint; a digest or format mismatch is an error."""
    path = Path(path)
    with np.load(path) as npz:
        if "__manifest__" not in npz:
            raise ValueError(f"{path}: not a model checkpoint (no manifest)")
        manifest = json.loads(bytes(npz["__manifest__"]).decode("utf-8"))
        arrays = {name: npz[name] for name in npz.files if name != "__manifest__"}
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    digest = _state_digest(arrays)
    if digest != manifest.get("digest"):
        raise ValueError(f"{path}: content digest mismatch; checkpoint corrupt or tampered")
    return Checkpoint(manifest=manifest, arrays=arrays)


def model_from_checkpoint(source: str | Path | Checkpoint) -> MetaTST:
    """Rebuild the network a checkpoint was saved from and restore its weights."""
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    dims = ckpt.manifest["dims"]
    model = MetaTST(
        ckpt.config,
        meta_dim=dims.get("meta_dim"),
        t_ex=dims.get("t_ex"),
        n_meta=dims.get("n_meta", N_META_LEVELS),
    )
    state = {name: torch.from_numpy(np.array(arr)) for name, arr in ckpt.arrays.items()}
    model.load_state_dict(state)
    return model

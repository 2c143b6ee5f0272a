"""Interval-aware token fusion and the transformer classifier built on it.

Token layout per fusion mode (N windows, Q query intervals, embed width D):

* ``temporal``    - per-modality feature tokens plus per-modality CLS tokens,
  ``(2N + 2Q) x 2D``; rows are ``[token || interval_embedding] + modality``.
* ``spatial``     - per-window cross-modal concatenation, ``(N + Q) x 3D``.
* ``visual_only`` / ``brain_only`` - one modality, ``(N + Q) x 2D``.

No positional encoding is added anywhere: all temporal information enters
through the interval MLP, so the encoder is exactly permutation-equivariant
over tokens.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .timeline import N_ACTIONS, N_VERBS, QuerySchedule, WindowSchedule

__all__ = [
    "BRANCHES",
    "FUSION_MODES",
    "TASKS",
    "LossResult",
    "ModelConfig",
    "ModelParams",
    "TokenSequence",
    "build_batch",
    "build_sequence",
    "classify",
    "classify_batch",
    "embed_tokens",
    "encoder_forward",
    "interval_embedding",
    "interval_embeddings",
    "load_checkpoint",
    "save_checkpoint",
    "sequence_loss",
]

FUSION_MODES = ("temporal", "spatial", "visual_only", "brain_only")
BRANCHES = ("visual", "brain")
TASKS = ("verb", "action")

_CHECKPOINT_MAGIC = b"TFCP"
_CHECKPOINT_VERSION = 1

#: Additive attention bias for padded key positions.
_MASK_BIAS = -1e9


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; immutable and checkpointed alongside weights."""

    token_dim: int = 16
    encoder_layers: int = 2
    attention_heads: int = 4
    ffn_dim: int = 64
    query_count: int = 4
    visual_feature_dim: int = 32
    brain_feature_dim: int = 16
    fusion: str = "temporal"
    use_embedding_layer: bool = True
    use_interval_mlp: bool = True
    use_modality_embedding: bool = True
    verb_classes: int = N_VERBS
    action_classes: int = N_ACTIONS

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        for name in ("token_dim", "attention_heads", "ffn_dim", "query_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.encoder_layers < 0:
            raise ValueError(f"encoder_layers must be >= 0, got {self.encoder_layers}")
        if self.verb_classes < 2 or self.action_classes < 2:
            raise ValueError("class counts must be >= 2")
        if self.token_width % self.attention_heads != 0:
            raise ValueError(
                f"token width {self.token_width} not divisible by {self.attention_heads} heads"
            )
        if not self.use_embedding_layer:
            for modality, dim in (("visual", self.visual_feature_dim), ("brain", self.brain_feature_dim)):
                if modality in self.branches and dim != self.token_dim:
                    raise ValueError(
                        "identity embedding (use_embedding_layer=False) needs "
                        f"{modality}_feature_dim == token_dim, got {dim} vs {self.token_dim}"
                    )

    @property
    def token_width(self) -> int:
        return 3 * self.token_dim if self.fusion == "spatial" else 2 * self.token_dim

    @property
    def branches(self) -> tuple[str, ...]:
        if self.fusion == "visual_only":
            return ("visual",)
        if self.fusion == "brain_only":
            return ("brain",)
        return BRANCHES

    @property
    def has_modality_embedding(self) -> bool:
        # The additive modality embedding only exists in temporal fusion;
        # spatial rows already carry both modalities and unimodal rows have
        # nothing to disambiguate.
        return self.fusion == "temporal" and self.use_modality_embedding

    def class_count(self, task: str) -> int:
        if task == "verb":
            return self.verb_classes
        if task == "action":
            return self.action_classes
        raise ValueError(f"unknown task {task!r}")

    def feature_dim(self, modality: str) -> int:
        if modality == "visual":
            return self.visual_feature_dim
        if modality == "brain":
            return self.brain_feature_dim
        raise ValueError(f"unknown modality {modality!r}")


def _name_entropy(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("ascii")).digest()[:8], "little")


def _group_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter group the config enables."""
    width = config.token_width
    dim = config.token_dim
    specs: list[tuple[str, tuple[int, ...], str]] = []
    if config.use_embedding_layer:
        for modality in config.branches:
            specs.append((f"embed_{modality}.weight", (config.feature_dim(modality), dim), "weight"))
            specs.append((f"embed_{modality}.bias", (dim,), "bias"))
    if config.use_interval_mlp:
        specs.extend(
            [
                ("interval_mlp.w1", (2, dim), "weight"),
                ("interval_mlp.b1", (dim,), "bias"),
                ("interval_mlp.w2", (dim, dim), "weight"),
                ("interval_mlp.b2", (dim,), "bias"),
                ("interval_mlp.w3", (dim, dim), "weight"),
                ("interval_mlp.b3", (dim,), "bias"),
                ("interval_mlp.norm_gain", (dim,), "gain"),
                ("interval_mlp.norm_bias", (dim,), "bias"),
            ]
        )
    if config.has_modality_embedding:
        specs.append(("modality_visual", (width,), "embedding"))
        specs.append(("modality_brain", (width,), "embedding"))
    for modality in config.branches:
        specs.append((f"cls_{modality}", (config.query_count, dim), "embedding"))
    for layer in range(config.encoder_layers):
        prefix = f"encoder.{layer}"
        specs.append((f"{prefix}.norm1_gain", (width,), "gain"))
        specs.append((f"{prefix}.norm1_bias", (width,), "bias"))
        for proj in ("attn_query", "attn_key", "attn_value", "attn_out"):
            specs.append((f"{prefix}.{proj}.weight", (width, width), "weight"))
            specs.append((f"{prefix}.{proj}.bias", (width,), "bias"))
        specs.append((f"{prefix}.norm2_gain", (width,), "gain"))
        specs.append((f"{prefix}.norm2_bias", (width,), "bias"))
        specs.append((f"{prefix}.ffn_in.weight", (width, config.ffn_dim), "weight"))
        specs.append((f"{prefix}.ffn_in.bias", (config.ffn_dim,), "bias"))
        specs.append((f"{prefix}.ffn_out.weight", (config.ffn_dim, width), "weight"))
        specs.append((f"{prefix}.ffn_out.bias", (width,), "bias"))
    for branch in config.branches:
        for task in TASKS:
            classes = config.class_count(task)
            specs.append((f"head_{branch}_{task}.weight", (width, classes), "weight"))
            specs.append((f"head_{branch}_{task}.bias", (classes,), "bias"))
    return specs


class ModelParams:
    """Named parameter tensors for one :class:`ModelConfig`.

    Each group is drawn from its own name-derived stream, so removing a group
    (by flipping a toggle off) never shifts the initial values of the rest.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "ModelParams":
        tensors: dict[str, Tensor] = {}
        for name, shape, kind in _group_specs(config):
            rng = np.random.default_rng([int(seed) & (2**63 - 1), _name_entropy(name)])
            if kind == "weight":
                bound = 1.0 / math.sqrt(shape[0])
                data = rng.uniform(-bound, bound, size=shape)
            elif kind == "embedding":
                data = rng.standard_normal(shape) * 0.02
            elif kind == "gain":
                data = np.ones(shape)
            else:  # bias
                data = np.zeros(shape)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config=config, tensors=tensors)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"parameter group {name!r} is not enabled under this config") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self):
        for tensor in self.tensors.values():
            tensor.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {name: Tensor(t.data.copy(), requires_grad=True) for name, t in self.tensors.items()},
        )


# ---------------------------------------------------------------------------
# Checkpoints: versioned named-tensor container, self-describing via the
# embedded config (little-endian, float64 payloads).
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    config_blob = json.dumps(asdict(params.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", _CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name, tensor in params.tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.data.ndim))
            fh.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(offset: int, count: int) -> tuple[bytes, int]:
        if offset + count > len(blob):
            raise ValueError("checkpoint truncated")
        return blob[offset : offset + count], offset + count

    magic, off = take(0, 4)
    if magic != _CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file (magic {magic!r})")
    raw, off = take(off, 2)
    version = struct.unpack("<H", raw)[0]
    if version != _CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    raw, off = take(off, 4)
    config_len = struct.unpack("<I", raw)[0]
    raw, off = take(off, config_len)
    config = ModelConfig(**json.loads(raw.decode("utf-8")))
    raw, off = take(off, 4)
    count = struct.unpack("<I", raw)[0]
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        raw, off = take(off, 2)
        name_len = struct.unpack("<H", raw)[0]
        raw, off = take(off, name_len)
        name = raw.decode("utf-8")
        raw, off = take(off, 1)
        ndim = raw[0]
        raw, off = take(off, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw, off = take(off, 8 * size)
        data = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = Tensor(data, requires_grad=True)
    expected = {name for name, _, _ in _group_specs(config)}
    if set(tensors) != expected:
        raise ValueError("checkpoint tensors do not match the embedded config")
    return ModelParams(config=config, tensors=tensors)


# ---------------------------------------------------------------------------
# Forward pieces.
# ---------------------------------------------------------------------------


def interval_embeddings(params: ModelParams, intervals: np.ndarray) -> Tensor:
    """Interval MLP applied to (M, 2) rows of (start, end) seconds."""
    intervals = np.asarray(intervals, dtype=np.float64)
    if intervals.ndim != 2 or intervals.shape[1] != 2:
        raise ValueError(f"intervals must be (M, 2), got {intervals.shape}")
    if np.any(intervals[:, 0] >= intervals[:, 1]):
        raise ValueError("invalid interval: start must be strictly before end")
    if "interval_mlp.w1" not in params:
        raise ValueError("interval MLP is disabled under this config")
    h = ad.relu(Tensor(intervals) @ params["interval_mlp.w1"] + params["interval_mlp.b1"])
    h = ad.relu(h @ params["interval_mlp.w2"] + params["interval_mlp.b2"])
    h = h @ params["interval_mlp.w3"] + params["interval_mlp.b3"]
    return ad.layer_norm(h, params["interval_mlp.norm_gain"], params["interval_mlp.norm_bias"])


def interval_embedding(params: ModelParams, start_s: float, end_s: float) -> Tensor:
    """Embedding of a single (start, end) interval, shape (D,)."""
    return interval_embeddings(params, np.array([[start_s, end_s]])).reshape(params.config.token_dim)


def embed_tokens(config: ModelConfig, params: ModelParams, features: np.ndarray, modality: str) -> Tensor:
    """Map raw per-window features (N, d) to embedded tokens (N, D)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"features must be (N, d), got {features.shape}")
    expected = config.feature_dim(modality)
    if features.shape[1] != expected:
        raise ValueError(
            f"{modality} features have dim {features.shape[1]}, config expects {expected}"
        )
    if not config.use_embedding_layer:
        # Identity embedding: the config guarantees d == D here.
        return Tensor(features)
    return Tensor(features) @ params[f"embed_{modality}.weight"] + params[f"embed_{modality}.bias"]


@dataclass
class TokenSequence:
    """A fused token matrix plus the row bookkeeping needed downstream."""

    x: Tensor
    fusion: str
    n_windows: int
    query_count: int
    cls_rows: dict[str, np.ndarray]
    feature_rows: dict[str, np.ndarray]

    @property
    def length(self) -> int:
        return self.x.shape[-2]

    @property
    def width(self) -> int:
        return self.x.shape[-1]


def _query_embeddings(config: ModelConfig, params: ModelParams, queries: QuerySchedule) -> Tensor:
    if config.use_interval_mlp:
        return interval_embeddings(params, queries.intervals())
    return Tensor(np.zeros((queries.query_count, config.token_dim)))


def _window_embeddings(config: ModelConfig, params: ModelParams, windows: WindowSchedule) -> Tensor:
    if config.use_interval_mlp:
        return interval_embeddings(params, windows.intervals())
    return Tensor(np.zeros((windows.count, config.token_dim)))


def build_sequence(
    config: ModelConfig,
    params: ModelParams,
    tokens_visual: Tensor | None,
    tokens_brain: Tensor | None,
    windows: WindowSchedule,
    queries: QuerySchedule,
) -> TokenSequence:
    """Assemble the fused token matrix for one session.

    ``tokens_visual`` / ``tokens_brain`` are embedded (N, D) tokens; pass
    ``None`` for a modality the fusion mode does not use.
    """
    if queries.query_count != config.query_count:
        raise ValueError(
            f"query schedule has Q={queries.query_count}, config expects {config.query_count}"
        )
    n = windows.count
    dim = config.token_dim
    for name, tokens in (("visual", tokens_visual), ("brain", tokens_brain)):
        needed = name in config.branches
        if needed and tokens is None:
            raise ValueError(f"fusion {config.fusion!r} needs {name} tokens")
        if tokens is not None and tuple(tokens.shape) != (n, dim):
            raise ValueError(f"{name} tokens must be ({n}, {dim}), got {tokens.shape}")

    window_emb = _window_embeddings(config, params, windows)
    query_emb = _query_embeddings(config, params, queries)

    if config.fusion == "temporal":
        vis = ad.concat([tokens_visual, window_emb], axis=1)
        brain = ad.concat([tokens_brain, window_emb], axis=1)
        vis_cls = ad.concat([params["cls_visual"], query_emb], axis=1)
        brain_cls = ad.concat([params["cls_brain"], query_emb], axis=1)
        if config.has_modality_embedding:
            vis = vis + params["modality_visual"]
            brain = brain + params["modality_brain"]
            vis_cls = vis_cls + params["modality_visual"]
            brain_cls = brain_cls + params["modality_brain"]
        x = ad.concat([vis, brain, vis_cls, brain_cls], axis=0)
        rows = np.arange(2 * n + 2 * queries.query_count)
        return TokenSequence(
            x=x,
            fusion=config.fusion,
            n_windows=n,
            query_count=queries.query_count,
            cls_rows={
                "visual": rows[2 * n : 2 * n + queries.query_count],
                "brain": rows[2 * n + queries.query_count :],
            },
            feature_rows={"visual": rows[:n], "brain": rows[n : 2 * n]},
        )

    if config.fusion == "spatial":
        feats = ad.concat([tokens_visual, tokens_brain, window_emb], axis=1)
        cls = ad.concat([params["cls_visual"], params["cls_brain"], query_emb], axis=1)
        x = ad.concat([feats, cls], axis=0)
        rows = np.arange(n + queries.query_count)
        shared_cls = rows[n:]
        return TokenSequence(
            x=x,
            fusion=config.fusion,
            n_windows=n,
            query_count=queries.query_count,
            cls_rows={"visual": shared_cls, "brain": shared_cls},
            feature_rows={"visual": rows[:n], "brain": rows[:n]},
        )

    # Unimodal: one feature block and one CLS block.
    modality = config.branches[0]
    tokens = tokens_visual if modality == "visual" else tokens_brain
    feats = ad.concat([tokens, window_emb], axis=1)
    cls = ad.concat([params[f"cls_{modality}"], query_emb], axis=1)
    x = ad.concat([feats, cls], axis=0)
    rows = np.arange(n + queries.query_count)
    return TokenSequence(
        x=x,
        fusion=config.fusion,
        n_windows=n,
        query_count=queries.query_count,
        cls_rows={modality: rows[n:]},
        feature_rows={modality: rows[:n]},
    )


# ---------------------------------------------------------------------------
# Transformer encoder (pre-norm, no positional encoding).
# ---------------------------------------------------------------------------


def _attention(config: ModelConfig, params: ModelParams, prefix: str, x: Tensor, mask_bias) -> Tensor:
    width = config.token_width
    heads = config.attention_heads
    head_dim = width // heads
    seq_len = x.shape[-2]
    lead = tuple(x.shape[:-2])

    def split(t: Tensor) -> Tensor:
        return t.reshape(*lead, seq_len, heads, head_dim).swapaxes(-3, -2)

    q = split(x @ params[f"{prefix}.attn_query.weight"] + params[f"{prefix}.attn_query.bias"])
    k = split(x @ params[f"{prefix}.attn_key.weight"] + params[f"{prefix}.attn_key.bias"])
    v = split(x @ params[f"{prefix}.attn_value.weight"] + params[f"{prefix}.attn_value.bias"])
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(head_dim))
    if mask_bias is not None:
        scores = scores + Tensor(mask_bias)
    weights = ad.softmax(scores, axis=-1)
    context = (weights @ v).swapaxes(-3, -2).reshape(*lead, seq_len, width)
    return context @ params[f"{prefix}.attn_out.weight"] + params[f"{prefix}.attn_out.bias"]


def encoder_stack(config: ModelConfig, params: ModelParams, x: Tensor, mask_bias=None) -> Tensor:
    """Pre-norm encoder blocks over (S, W) or (B, S, W) tokens."""
    if x.shape[-1] != config.token_width:
        raise ValueError(f"token width {x.shape[-1]} does not match config ({config.token_width})")
    for layer in range(config.encoder_layers):
        prefix = f"encoder.{layer}"
        normed = ad.layer_norm(x, params[f"{prefix}.norm1_gain"], params[f"{prefix}.norm1_bias"])
        x = x + _attention(config, params, prefix, normed, mask_bias)
        normed = ad.layer_norm(x, params[f"{prefix}.norm2_gain"], params[f"{prefix}.norm2_bias"])
        hidden = ad.relu(normed @ params[f"{prefix}.ffn_in.weight"] + params[f"{prefix}.ffn_in.bias"])
        x = x + (hidden @ params[f"{prefix}.ffn_out.weight"] + params[f"{prefix}.ffn_out.bias"])
    return x


def encoder_forward(config: ModelConfig, params: ModelParams, sequence: TokenSequence) -> TokenSequence:
    """Encode one token sequence; with zero layers this is the identity."""
    return TokenSequence(
        x=encoder_stack(config, params, sequence.x),
        fusion=sequence.fusion,
        n_windows=sequence.n_windows,
        query_count=sequence.query_count,
        cls_rows=sequence.cls_rows,
        feature_rows=sequence.feature_rows,
    )


# ---------------------------------------------------------------------------
# Heads and loss.
# ---------------------------------------------------------------------------


def _head_logits(config: ModelConfig, params: ModelParams, rows: Tensor, branch: str, task: str) -> Tensor:
    return rows @ params[f"head_{branch}_{task}.weight"] + params[f"head_{branch}_{task}.bias"]


def classify(config: ModelConfig, params: ModelParams, encoded: TokenSequence) -> dict:
    """Per-branch, per-task logits and probabilities over the CLS rows."""
    seq_len, width = encoded.x.shape
    x3 = encoded.x.reshape(1, seq_len, width)
    out: dict[str, dict[str, dict[str, object]]] = {}
    for branch in config.branches:
        idx = encoded.cls_rows[branch][None, :]
        rows = ad.gather_rows(x3, idx).reshape(encoded.query_count, width)
        out[branch] = {}
        for task in TASKS:
            logits = _head_logits(config, params, rows, branch, task)
            shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
            exp = np.exp(shifted)
            out[branch][task] = {
                "logits": logits,
                "probs": exp / exp.sum(axis=-1, keepdims=True),
            }
    return out


@dataclass
class LossResult:
    """Total training loss plus detached per-branch values for logging."""

    total: Tensor
    branch_values: dict[str, float]
    task_values: dict[str, dict[str, float]]


def _masked_cross_entropy(logits: Tensor, labels: np.ndarray, classes: int) -> Tensor | None:
    """Mean cross-entropy over non-background labels; None if all masked."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != tuple(logits.shape[:-1]):
        raise ValueError(f"labels shaped {labels.shape} do not match logits {logits.shape}")
    if np.any(labels >= classes):
        raise ValueError(f"label id out of range for {classes} classes")
    mask = labels >= 0
    count = int(mask.sum())
    if count == 0:
        return None
    onehot = np.zeros(logits.shape, dtype=np.float64)
    onehot[mask, labels[mask]] = 1.0
    log_probs = ad.log_softmax(logits, axis=-1)
    picked = (log_probs * Tensor(onehot)).sum()
    return picked * (-1.0 / count)


def sequence_loss(
    config: ModelConfig,
    logits_map: dict,
    labels: dict[str, np.ndarray],
    brain_loss_weight: float = 1.0,
) -> LossResult:
    """Total loss: visual branch + brain_loss_weight * brain branch.

    Each branch loss sums the verb-task and action-task mean cross-entropies
    over unmasked (non-background) queries.  ``logits_map`` is the structure
    returned by :func:`classify` (or its batched variant); labels may carry a
    leading batch axis matching the logits.
    """
    if brain_loss_weight < 0:
        raise ValueError(f"brain_loss_weight must be >= 0, got {brain_loss_weight}")
    branch_terms: dict[str, Tensor] = {}
    task_values: dict[str, dict[str, float]] = {}
    for branch in config.branches:
        parts = []
        task_values[branch] = {}
        for task in TASKS:
            term = _masked_cross_entropy(
                logits_map[branch][task]["logits"], labels[task], config.class_count(task)
            )
            if term is not None:
                parts.append(term)
                task_values[branch][task] = float(term.data)
        if parts:
            total = parts[0]
            for extra in parts[1:]:
                total = total + extra
            branch_terms[branch] = total

    weights = {"visual": 1.0, "brain": float(brain_loss_weight)}
    total: Tensor | None = None
    branch_values: dict[str, float] = {}
    for branch, term in branch_terms.items():
        branch_values[branch] = float(term.data)
        if weights[branch] == 0.0:
            continue  # exact zero contribution, keeps its gradients identically zero
        weighted = term if weights[branch] == 1.0 else term * weights[branch]
        total = weighted if total is None else total + weighted
    if total is None:
        total = Tensor(np.zeros(()))
    return LossResult(total=total, branch_values=branch_values, task_values=task_values)


# ---------------------------------------------------------------------------
# Batched forward over padded sessions.
# ---------------------------------------------------------------------------


@dataclass
class SequenceBatch:
    """Padded stack of per-session token sequences plus masks and CLS indices."""

    x: Tensor
    mask_bias: np.ndarray
    valid: np.ndarray
    cls_index: dict[str, np.ndarray]
    query_count: int


def build_batch(config: ModelConfig, sequences: list[TokenSequence]) -> SequenceBatch:
    """Pad variable-length sequences with masked zero rows and stack them.

    Padding rows receive a large negative attention bias so they contribute
    nothing as keys; because the encoder has no positional encoding, where
    the padding sits is irrelevant.
    """
    if not sequences:
        raise ValueError("cannot batch zero sequences")
    width = config.token_width
    max_len = max(seq.length for seq in sequences)
    rows = []
    valid = np.zeros((len(sequences), max_len), dtype=bool)
    cls_index = {branch: np.zeros((len(sequences), config.query_count), dtype=np.intp) for branch in config.branches}
    for b, seq in enumerate(sequences):
        if seq.width != width:
            raise ValueError("sequences in one batch must share the token width")
        pad = max_len - seq.length
        x = seq.x
        if pad:
            x = ad.concat([x, Tensor(np.zeros((pad, width)))], axis=0)
        rows.append(x.reshape(1, max_len, width))
        valid[b, : seq.length] = True
        for branch in config.branches:
            cls_index[branch][b] = seq.cls_rows[branch]
    mask_bias = np.where(valid, 0.0, _MASK_BIAS)[:, None, None, :]
    return SequenceBatch(
        x=ad.concat(rows, axis=0),
        mask_bias=mask_bias,
        valid=valid,
        cls_index=cls_index,
        query_count=config.query_count,
    )


def classify_batch(config: ModelConfig, params: ModelParams, encoded: Tensor, batch: SequenceBatch) -> dict:
    """Per-branch, per-task logits (B, Q, classes) over batched CLS rows."""
    out: dict[str, dict[str, dict[str, object]]] = {}
    for branch in config.branches:
        rows = ad.gather_rows(encoded, batch.cls_index[branch])
        out[branch] = {}
        for task in TASKS:
            logits = _head_logits(config, params, rows, branch, task)
            shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
            exp = np.exp(shifted)
            out[branch][task] = {
                "logits": logits,
                "probs": exp / exp.sum(axis=-1, keepdims=True),
            }
    return out


def forward_batch(
    config: ModelConfig,
    params: ModelParams,
    feature_pairs: list[tuple[np.ndarray | None, np.ndarray | None, WindowSchedule, QuerySchedule]],
) -> tuple[SequenceBatch, dict]:
    """Embed, fuse, encode and classify a list of sessions in one padded batch."""
    sequences = []
    for visual, brain, windows, queries in feature_pairs:
        tokens_v = (
            embed_tokens(config, params, visual, "visual") if "visual" in config.branches else None
        )
        tokens_b = (
            embed_tokens(config, params, brain, "brain") if "brain" in config.branches else None
        )
        sequences.append(build_sequence(config, params, tokens_v, tokens_b, windows, queries))
    batch = build_batch(config, sequences)
    encoded = encoder_stack(config, params, batch.x, batch.mask_bias)
    return batch, classify_batch(config, params, encoded, batch)

"""Natural-language guide: frozen word embedding -> GRU -> linear
projection onto guiding parameters.

Only the GRU, the projection, and (in residual mode) the wrapper block
train; the embedding table and the backbone never change.  An empty or
unparseable hint maps to zero parameters, i.e. explicit no-op guidance.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneModel
from .guiding import (GuideMode, GuidingParams, ResidualGuideBlock,
                      apply_guidance)

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace.

    Held fixed across training and serving; changing it invalidates
    trained guides.
    """
    return text.lower().translate(_PUNCT_TABLE).split()


def _hash_vector(word: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(word.encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "big"))
    return (rng.standard_normal(dim) / np.sqrt(dim)).astype(np.float32)


@dataclass
class EmbeddingTable:
    """Frozen word -> vector lookup with a deterministic hashed fallback
    for out-of-vocabulary tokens (lookup is total)."""

    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)
    source: str = "hashed"
    oov_scale: float = 1.0

    def lookup(self, word: str) -> np.ndarray:
        vec = self.vectors.get(word)
        if vec is not None:
            return vec
        return _hash_vector(word, self.dim) * self.oov_scale

    def embed_tokens(self, tokens: list[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([self.lookup(t) for t in tokens])

    def checksum(self) -> str:
        digest = hashlib.blake2b(digest_size=16)
        digest.update(f"{self.source}:{self.dim}:{self.oov_scale:.8f}".encode())
        for word in sorted(self.vectors):
            digest.update(word.encode())
            digest.update(self.vectors[word].tobytes())
        return digest.hexdigest()


def load_embeddings(source: str | Path, dim: int) -> EmbeddingTable:
    """Load a whitespace "word v1 .. v_dim" table, or build the hashed
    fallback table when source is the string "hashed"."""
    if str(source) == "hashed":
        return EmbeddingTable(dim=dim, source="hashed")
    path = Path(source)
    vectors: dict[str, np.ndarray] = {}
    with path.open() as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            word, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ValueError(
                    f"{path}:{lineno}: expected {dim} values for {word!r}, "
                    f"got {len(values)}")
            try:
                vec = np.array([float(v) for v in values], dtype=np.float32)
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            vectors[word] = vec
    norms = [float(np.linalg.norm(v)) for v in vectors.values()]
    oov_scale = float(np.mean(norms)) if norms else 1.0
    return EmbeddingTable(dim=dim, vectors=vectors, source=str(path),
                          oov_scale=oov_scale)


class GuideModel(nn.Module):
    """GRU sentence encoder plus the linear map onto alpha/beta/gamma.

    The projection output is laid out alpha ++ beta ++ gamma_s ++ gamma_b
    for the guided feature geometry (h, w, channels).  Projection weight
    and bias start at zero: the untrained guide is the exact identity.
    """

    def __init__(self, feature_shape: tuple[int, int, int], split: str,
                 mode: GuideMode | None = None, gru_hidden: int = 128,
                 embedding_dim: int = 50):
        super().__init__()
        if mode is None:
            mode = GuideMode()
        c, h, w = feature_shape
        self.split = split
        self.mode = mode
        self.feature_shape = tuple(feature_shape)
        self.guide_h = h
        self.guide_w = w
        self.guide_c = mode.guided_channels(c)
        self.gru_hidden = gru_hidden
        self.embedding_dim = embedding_dim
        self.gru = nn.GRU(embedding_dim, gru_hidden, batch_first=True)
        out_dim = h + w + 2 * self.guide_c
        self.proj = nn.Linear(gru_hidden, out_dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        if mode.wrapping == "residual_block":
            self.block = ResidualGuideBlock(c, mode.residual_channels)
        else:
            self.block = None

    def zero_params(self, batch: int | None = None) -> GuidingParams:
        p = GuidingParams.zeros(self.guide_h, self.guide_w, self.guide_c)
        if batch is None:
            return p
        return GuidingParams(*[t.expand(batch, -1) for t in p.tensors()])

    def encode_batch(self, token_lists: list[list[str]],
                     table: EmbeddingTable) -> torch.Tensor:
        """Final GRU hidden state per query, (B, gru_hidden).

        Empty token lists are not allowed here; callers route empty
        hints to zero_params instead.
        """
        if any(not t for t in token_lists):
            raise ValueError("cannot encode an empty token list")
        lengths = [len(t) for t in token_lists]
        t_max = max(lengths)
        batch = np.zeros((len(token_lists), t_max, table.dim), dtype=np.float32)
        for i, tokens in enumerate(token_lists):
            batch[i, : len(tokens)] = table.embed_tokens(tokens)
        out, _ = self.gru(torch.from_numpy(batch).to(self.proj.weight.dtype))
        idx = torch.tensor(lengths) - 1
        return out[torch.arange(len(token_lists)), idx]

    def params_from_hidden(self, hidden: torch.Tensor) -> GuidingParams:
        if hidden.shape[-1] != self.gru_hidden:
            raise ValueError(
                f"hidden state length {hidden.shape[-1]} != {self.gru_hidden}")
        flat = self.proj(hidden)
        return GuidingParams.from_flat(flat, self.guide_h, self.guide_w,
                                       self.guide_c)

    def params_from_text(self, text: str, table: EmbeddingTable) -> GuidingParams:
        tokens = tokenize(text)
        if not tokens:
            return self.zero_params()
        with torch.no_grad():
            hidden = self.encode_batch([tokens], table)
            params = self.params_from_hidden(hidden)
        return GuidingParams(*[t.squeeze(0) for t in params.tensors()])

    def params_from_texts(self, texts: list[str],
                          table: EmbeddingTable) -> GuidingParams:
        """Batched text -> params, (B, ...) per tensor.  Empty texts map
        to zero rows (explicit no-op guidance); gradients flow only
        through the non-empty rows."""
        token_lists = [tokenize(t) for t in texts]
        live = [i for i, t in enumerate(token_lists) if t]
        out_dim = self.guide_h + self.guide_w + 2 * self.guide_c
        flat = torch.zeros(len(texts), out_dim, dtype=self.proj.weight.dtype)
        if live:
            hidden = self.encode_batch([token_lists[i] for i in live], table)
            flat = flat.index_copy(0, torch.tensor(live), self.proj(hidden))
        return GuidingParams.from_flat(flat, self.guide_h, self.guide_w,
                                       self.guide_c)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def parameters_checksum(self) -> str:
        digest = hashlib.blake2b(digest_size=16)
        state = self.state_dict()
        for key in sorted(state):
            digest.update(key.encode())
            digest.update(state[key].detach().cpu().numpy().tobytes())
        return digest.hexdigest()


def encode_query(tokens: list[str], table: EmbeddingTable,
                 model: GuideModel) -> torch.Tensor:
    """Run the GRU over one token sequence from the zero state; returns
    the final hidden state."""
    if not tokens:
        raise ValueError("cannot encode an empty token list")
    return model.encode_batch([tokens], table).squeeze(0)


def project_guidance(hidden: torch.Tensor, model: GuideModel) -> GuidingParams:
    """Affine map from a hidden state to guiding parameters."""
    return model.params_from_hidden(hidden)


@dataclass
class GuidedResult:
    labels: torch.Tensor
    posteriors: torch.Tensor
    params: GuidingParams
    heatmap: np.ndarray


def guide_with_text(backbone: BackboneModel, guide: GuideModel,
                    table: EmbeddingTable, x: torch.Tensor,
                    text: str) -> GuidedResult:
    """head -> text-predicted guidance -> tail; also returns the
    guidance heatmap of the induced feature change."""
    from .evaluation import guidance_heatmap

    params = guide.params_from_text(text, table)
    with torch.no_grad():
        a = backbone.forward_head(x, guide.split)
        a_guided = apply_guidance(a, params, guide.mode, guide.block)
        logits = backbone.forward_tail(a_guided, guide.split)
        posteriors = torch.softmax(logits, dim=-3)
        labels = posteriors.argmax(dim=-3)
        heatmap = guidance_heatmap(a, a_guided, out_size=backbone.config.input_size)
    return GuidedResult(labels, posteriors, params, heatmap)


def save_guide(guide: GuideModel, table: EmbeddingTable,
               path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(guide.state_dict(), path)
    sidecar = {
        "gru_hidden": guide.gru_hidden,
        "split": guide.split,
        "mode": guide.mode.to_json(),
        "embedding_dim": guide.embedding_dim,
        "embedding_source": table.source,
        "vocab_hash": table.checksum(),
        "feature_shape": list(guide.feature_shape),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_guide(path: str | Path, table: EmbeddingTable,
               strict_vocab: bool = True) -> GuideModel:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    if strict_vocab and sidecar["vocab_hash"] != table.checksum():
        raise ValueError(
            "embedding table does not match the one this guide was trained "
            f"with (checksum {sidecar['vocab_hash']} expected)")
    guide = GuideModel(
        feature_shape=tuple(sidecar["feature_shape"]),
        split=sidecar["split"],
        mode=GuideMode.from_json(sidecar["mode"]),
        gru_hidden=sidecar["gru_hidden"],
        embedding_dim=sidecar["embedding_dim"],
    )
    guide.load_state_dict(torch.load(path, weights_only=True))
    guide.eval()
    return guide

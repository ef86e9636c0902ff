"""Tiny scene+question -> answer model.

The merged embedding ``e`` holds scene-token rows followed by question-token
rows, each plus a positional row. The decoder pools ``e`` into a context
vector and predicts every answer token from that context and the previous
token (with its position), so per-position logits are available for
token-level distillation and the model stays small enough to gradient-check.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ParameterStore, Tensor
from .taskstream import Sample, TaskDataset

PAD, BOS, EOS = 0, 1, 2
RESERVED = ("<pad>", "<bos>", "<eos>")

PARAM_NAMES = ("scene_emb", "text_emb", "pos_emb", "dec.W_h", "dec.b_h", "dec.W_o", "dec.b_o")


class TruncationError(ContractError):
    """Input longer than the positional table."""


class VocabularyMismatch(ValueError):
    pass


class Vocabulary:
    """Token <-> id map shared by every task; ids 0-2 are reserved."""

    def __init__(self, tokens):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                continue
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    @classmethod
    def from_datasets(cls, datasets: list[TaskDataset]) -> "Vocabulary":
        tokens: set[str] = set()
        for ds in datasets:
            for split in (ds.train, ds.val, ds.test):
                for s in split:
                    tokens.update(s.scene)
                    tokens.update(s.question)
                    tokens.update(s.answer)
        return cls(sorted(tokens))

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens) -> list[int]:
        try:
            return [self.stoi[t] for t in tokens]
        except KeyError as exc:
            raise VocabularyMismatch(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, tok in enumerate(self.itos):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def read(cls, path: str | Path) -> "Vocabulary":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                tok, _, idx = line.rstrip("\n").partition("\t")
                if not idx.isdigit():
                    raise ValueError(f"{path}:{lineno}: malformed vocabulary line")
                pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))) or tuple(t for _, t in pairs[:3]) != RESERVED:
            raise ValueError(f"{path}: vocabulary ids must be contiguous with reserved tokens first")
        return cls([t for _, t in pairs[3:]])


@dataclass(frozen=True)
class ModelConfig:
    d_e: int = 64
    d_h: int = 128
    max_len: int = 32
    init_scale: float = 0.1


def init_params(vocab_size: int, cfg: ModelConfig, rng: np.random.Generator) -> ParameterStore:
    d, h = cfg.d_e, cfg.d_h
    lim_h = 1.0 / np.sqrt(2 * d)
    lim_o = 1.0 / np.sqrt(h)
    return ParameterStore({
        "scene_emb": rng.normal(0.0, cfg.init_scale, (vocab_size, d)),
        "text_emb": rng.normal(0.0, cfg.init_scale, (vocab_size, d)),
        "pos_emb": rng.normal(0.0, cfg.init_scale, (cfg.max_len, d)),
        "dec.W_h": rng.uniform(-lim_h, lim_h, (2 * d, h)),
        "dec.b_h": np.zeros(h),
        "dec.W_o": rng.uniform(-lim_o, lim_o, (h, vocab_size)),
        "dec.b_o": np.zeros(vocab_size),
    })


def model_arrays(params: ParameterStore) -> dict[str, np.ndarray]:
    return {n: params[n].data for n in PARAM_NAMES}


# -- batching ---------------------------------------------------------------


@dataclass
class Batch:
    """Padded id grids for a list of samples.

    ``inputs``/``is_scene``/``input_mask`` describe the merged scene+question
    sequence; ``prefix``/``targets``/``target_mask`` the teacher-forced answer.
    """

    inputs: np.ndarray
    is_scene: np.ndarray
    input_mask: np.ndarray
    prefix: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)


def encode_batch(samples: list[Sample], vocab: Vocabulary, max_len: int) -> Batch:
    if not samples:
        raise ContractError("cannot encode an empty batch")
    n = len(samples)
    merged = [(vocab.encode(s.scene), vocab.encode(s.question)) for s in samples]
    answers = [vocab.encode(s.answer) for s in samples]
    L = max(len(a) + len(b) for a, b in merged)
    if L > max_len:
        raise TruncationError(f"input of length {L} exceeds max_len {max_len}")
    La = max(len(a) for a in answers) + 1
    if La > max_len:
        raise TruncationError(f"answer of length {La - 1} exceeds max_len {max_len}")
    inputs = np.zeros((n, max(L, 1)), dtype=np.int64)
    is_scene = np.zeros_like(inputs, dtype=bool)
    mask = np.zeros(inputs.shape)
    prefix = np.zeros((n, La), dtype=np.int64)
    targets = np.zeros((n, La), dtype=np.int64)
    tmask = np.zeros((n, La))
    for i, ((sc, qu), ans) in enumerate(zip(merged, answers)):
        seq = sc + qu
        inputs[i, :len(seq)] = seq
        is_scene[i, :len(sc)] = True
        mask[i, :len(seq)] = 1.0
        prefix[i, :len(ans) + 1] = [BOS] + ans
        targets[i, :len(ans) + 1] = ans + [EOS]
        tmask[i, :len(ans) + 1] = 1.0
    return Batch(inputs, is_scene, mask, prefix, targets, tmask, list(samples))


# -- forward ----------------------------------------------------------------


def _cols(weights: np.ndarray, d: int) -> np.ndarray:
    """Repeat per-position weights across a trailing feature axis of size ``d``."""
    return np.broadcast_to(weights[..., None], weights.shape + (d,))


@dataclass
class MergedEmbedding:
    vectors: Tensor  # [N, L, d_e]; masked positions are zero
    mask: np.ndarray  # [N, L]

    def __len__(self) -> int:
        return self.vectors.shape[1]


def embed(params: ParameterStore, inputs: np.ndarray, is_scene: np.ndarray, mask: np.ndarray) -> MergedEmbedding:
    """Scene/text embedding lookup plus positional rows, zeroed where ``mask`` is 0."""
    inputs = np.asarray(inputs, dtype=np.int64)
    L = inputs.shape[1]
    max_len = params["pos_emb"].shape[0]
    if L > max_len:
        raise TruncationError(f"input of length {L} exceeds max_len {max_len}")
    mask = np.asarray(mask, dtype=np.float64)
    scene_sel = np.asarray(is_scene, dtype=np.float64) * mask
    text_sel = (1.0 - np.asarray(is_scene, dtype=np.float64)) * mask
    vec_dim = params["scene_emb"].shape[1]
    scene_ids = np.where(scene_sel > 0, inputs, PAD)
    text_ids = np.where(text_sel > 0, inputs, PAD)
    vec = ad.mul(ad.gather(params["scene_emb"], scene_ids), _cols(scene_sel, vec_dim))
    vec = ad.add(vec, ad.mul(ad.gather(params["text_emb"], text_ids), _cols(text_sel, vec_dim)))
    pos = ad.gather(params["pos_emb"], np.arange(L))
    vec = ad.add(vec, ad.mul(ad.repeat_axis(pos, 0, inputs.shape[0]), _cols(mask, vec_dim)))
    return MergedEmbedding(vec, mask)


def embed_batch(params: ParameterStore, batch: Batch) -> MergedEmbedding:
    return embed(params, batch.inputs, batch.is_scene, batch.input_mask)


def embed_sample(sample: Sample, params: ParameterStore, vocab: Vocabulary) -> MergedEmbedding:
    sc, qu = vocab.encode(sample.scene), vocab.encode(sample.question)
    seq = sc + qu
    if not seq:
        raise ContractError("sample has no scene or question tokens")
    return embed(params, np.array([seq]), np.array([[True] * len(sc) + [False] * len(qu)]),
                 np.ones((1, len(seq))))


def pooled_context(e: MergedEmbedding) -> Tensor:
    counts = e.mask.sum(axis=1)
    if np.any(counts <= 0):
        raise ContractError("every sample needs at least one valid input position")
    return ad.mul(ad.sum(e.vectors, axis=1), _cols(1.0 / counts, e.vectors.shape[-1]))


def decode_logits(e: MergedEmbedding, prefix, params: ParameterStore) -> Tensor:
    """Per-position logits ``[N, Lp, K]`` for a teacher-forced answer prefix."""
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim == 1:
        prefix = prefix[None, :]
    if prefix.shape[1] == 0:
        raise ContractError("decoder prefix must not be empty")
    if np.any(prefix[:, 0] != BOS):
        raise ContractError("decoder prefix must start with BOS")
    n, Lp = prefix.shape
    if Lp > params["pos_emb"].shape[0]:
        raise TruncationError(f"prefix of length {Lp} exceeds max_len {params['pos_emb'].shape[0]}")
    ctx = ad.repeat_axis(pooled_context(e), 1, Lp)
    tok = ad.add(ad.gather(params["text_emb"], prefix), ad.gather(params["pos_emb"], np.arange(Lp)))
    hidden = ad.tanh(ad.add(ad.matmul(ad.concat([ctx, tok], axis=-1), params["dec.W_h"]), params["dec.b_h"]))
    return ad.add(ad.matmul(hidden, params["dec.W_o"]), params["dec.b_o"])


def forward_batch(params: ParameterStore, batch: Batch) -> tuple[MergedEmbedding, Tensor]:
    e = embed_batch(params, batch)
    return e, decode_logits(e, batch.prefix, params)


def loss_gt(logits: Tensor, targets, mask) -> Tensor:
    return ad.masked_cross_entropy(logits, targets, mask)


def generate(e: MergedEmbedding, params: ParameterStore, max_len: int) -> list[list[int]]:
    """Greedy decoding from BOS; stops at EOS (not returned) or after ``max_len`` tokens.

    Ties resolve to the lowest token id.
    """
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    W_h, b_h = params["dec.W_h"].data, params["dec.b_h"].data
    W_o, b_o = params["dec.W_o"].data, params["dec.b_o"].data
    text, pos = params["text_emb"].data, params["pos_emb"].data
    max_len = min(max_len, pos.shape[0])
    counts = e.mask.sum(axis=1)
    ctx = e.vectors.data.sum(axis=1) / counts[:, None]
    n = ctx.shape[0]
    tok = np.full(n, BOS, dtype=np.int64)
    out: list[list[int]] = [[] for _ in range(n)]
    alive = np.ones(n, dtype=bool)
    for t in range(max_len):
        x = np.concatenate([ctx, text[tok] + pos[t]], axis=-1)
        logits = np.tanh(x @ W_h + b_h) @ W_o + b_o
        tok = np.argmax(logits, axis=-1)
        for i in np.flatnonzero(alive):
            if tok[i] == EOS:
                alive[i] = False
            else:
                out[i].append(int(tok[i]))
        if not alive.any():
            break
    return out


def predict_answers(params: ParameterStore, vocab: Vocabulary, samples: list[Sample],
                    max_len: int = 16, batch_size: int = 256) -> list[tuple[str, ...]]:
    answers: list[tuple[str, ...]] = []
    seq_len = params["pos_emb"].shape[0]
    for start in range(0, len(samples), batch_size):
        batch = encode_batch(samples[start:start + batch_size], vocab, seq_len)
        e = embed_batch(params, batch)
        for ids in generate(e, params, max_len):
            answers.append(tuple(vocab.decode(ids)))
    return answers


def token_entropy(params: ParameterStore, vocab: Vocabulary, samples: list[Sample],
                  batch_size: int = 256) -> float:
    """Mean entropy (nats) of the teacher-forced next-token distribution over answer tokens."""
    total, count = 0.0, 0.0
    seq_len = params["pos_emb"].shape[0]
    for start in range(0, len(samples), batch_size):
        batch = encode_batch(samples[start:start + batch_size], vocab, seq_len)
        _, logits = forward_batch(params, batch)
        logp = ad.log_softmax_temp(logits).data
        h = -(np.exp(logp) * logp).sum(axis=-1)
        total += float((h * batch.target_mask).sum())
        count += float(batch.target_mask.sum())
    return total / count

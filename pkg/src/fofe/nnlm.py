"""Feedforward neural language models fed by FOFE codes or by n-gram windows.

Architecture: embedding (projection) layer ``U``, a stack of ReLU layers and
a full-vocabulary softmax.  The context vector for predicting ``w_t`` is

* ``fofe1``: the FOFE code of ``w_1 .. w_{t-1}`` projected through ``U``;
* ``fofe2``: the projected codes ``z_{t-1}`` and ``z_{t-2}`` side by side;
* ``ngram``: the embeddings of the previous ``order - 1`` words.

Histories never cross sentence boundaries and start from the zero code, so the
first word of a sentence is predicted from an all-zero context.  FOFE codes
are built from embedding rows (``M (V U)``), which makes the decay
coefficients constants of a linear map: plain back-propagation reaches ``U``
with no unrolling through time.
"""

from __future__ import annotations

import contextlib
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import TokenSequence, as_factor, forgetting_scan
from .corpus import TokenizedCorpus, make_minibatches
from .errors import (BadMagicError, ModelFormatError, NonFiniteError, ShapeMismatchError, TrainingDiverged,
                     TruncatedModelError, VersionMismatchError, VocabMismatchError)

MODES = ("fofe1", "fofe2", "ngram")


@dataclass(frozen=True)
class ModelConfig:
    mode: str
    vocab_size: int
    embed_dim: int
    hidden_dims: tuple[int, ...]
    alpha: float | None = None
    order: int = 2  # n of an n-gram model: the context holds n - 1 words

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError("at least one hidden layer of positive width is required")
        if self.vocab_size < 2 or self.embed_dim < 1:
            raise ValueError("vocab_size must be >= 2 and embed_dim >= 1")
        if self.mode == "ngram":
            if self.order < 2:
                raise ValueError(f"an n-gram model needs order >= 2, got {self.order}")
            object.__setattr__(self, "alpha", None)
        else:
            object.__setattr__(self, "alpha", as_factor(self.alpha).value)
            object.__setattr__(self, "order", 2)  # unused by FOFE inputs

    @property
    def context_slots(self) -> int:
        if self.mode == "fofe1":
            return 1
        if self.mode == "fofe2":
            return 2
        return self.order - 1

    @property
    def input_width(self) -> int:
        return self.context_slots * self.embed_dim

    @property
    def name(self) -> str:
        if self.mode == "ngram":
            return f"{self.order}-gram"
        return f"{self.mode}(alpha={self.alpha:g})"


@dataclass
class ModelParams:
    embedding: np.ndarray
    hidden: list[tuple[np.ndarray, np.ndarray]]
    output: tuple[np.ndarray, np.ndarray]

    def named(self) -> list[tuple[str, np.ndarray]]:
        """Tensors in declaration order: U, W1, b1, ..., W_out, b_out."""
        out = [("U", self.embedding)]
        for k, (W, b) in enumerate(self.hidden, start=1):
            out += [(f"W{k}", W), (f"b{k}", b)]
        out += [("W_out", self.output[0]), ("b_out", self.output[1])]
        return out

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named()]

    @property
    def dtype(self):
        return self.embedding.dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.embedding.copy(), [(W.copy(), b.copy()) for W, b in self.hidden],
                           (self.output[0].copy(), self.output[1].copy()))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.embedding.astype(dtype), [(W.astype(dtype), b.astype(dtype)) for W, b in self.hidden],
                           (self.output[0].astype(dtype), self.output[1].astype(dtype)))

    def check_shapes(self, config: ModelConfig) -> None:
        expected = expected_shapes(config)
        got = [a.shape for a in self.arrays()]
        if got != [s for _, s in expected]:
            raise ValueError(f"parameter shapes {got} do not match config {[s for _, s in expected]}")


def expected_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = [("U", (config.vocab_size, config.embed_dim))]
    fan_in = config.input_width
    for k, h in enumerate(config.hidden_dims, start=1):
        shapes += [(f"W{k}", (fan_in, h)), (f"b{k}", (h,))]
        fan_in = h
    shapes += [("W_out", (fan_in, config.vocab_size)), ("b_out", (config.vocab_size,))]
    return shapes


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Normalized (Glorot) uniform weights, zero biases; a pure function of ``(config, seed)``."""
    rng = np.random.default_rng(seed)
    arrays = []
    for name, shape in expected_shapes(config):
        if name.startswith("b"):
            arrays.append(np.zeros(shape, dtype=dtype))
        else:
            bound = glorot_bound(*shape)
            arrays.append(rng.uniform(-bound, bound, size=shape).astype(dtype))
    return _from_arrays(arrays)


def _from_arrays(arrays: Sequence[np.ndarray]) -> ModelParams:
    arrays = list(arrays)
    U = arrays[0]
    hidden = [(arrays[i], arrays[i + 1]) for i in range(1, len(arrays) - 2, 2)]
    return ModelParams(U, hidden, (arrays[-2], arrays[-1]))


# --- inputs -----------------------------------------------------------------


@dataclass
class Batch:
    """Sentences laid out as a padded ``N x T_max`` id matrix."""

    ids: np.ndarray
    lengths: np.ndarray
    mask: np.ndarray = field(repr=False)
    targets: np.ndarray = field(repr=False)

    @classmethod
    def from_sentences(cls, sentences: Sequence[TokenSequence | Sequence[int]]) -> "Batch":
        seqs = [s.ids if isinstance(s, TokenSequence) else tuple(s) for s in sentences]
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        T = int(lengths.max()) if len(seqs) else 0
        ids = np.zeros((len(seqs), T), dtype=np.int64)
        for n, s in enumerate(seqs):
            ids[n, : len(s)] = s
        mask = np.arange(T)[None, :] < lengths[:, None]
        return cls(ids, lengths, mask, ids[mask])

    @property
    def n_tokens(self) -> int:
        return int(self.lengths.sum())


def _shift(A: np.ndarray, k: int) -> np.ndarray:
    """``out[:, t] = A[:, t - k]`` with zeros for ``t < k``."""
    out = np.zeros_like(A)
    if k < A.shape[1]:
        out[:, k:] = A[:, : A.shape[1] - k]
    return out


def _unshift(G: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of :func:`_shift`."""
    out = np.zeros_like(G)
    if k < G.shape[1]:
        out[:, : G.shape[1] - k] = G[:, k:]
    return out


def _context(U: np.ndarray, config: ModelConfig, batch: Batch):
    E = U[batch.ids]  # N x T x D
    if config.mode == "ngram":
        parts = [_shift(E, k) for k in range(1, config.order)]
        source = E
    else:
        Z = forgetting_scan(E, config.alpha, axis=1)  # Z[:, t] = code of w_0..w_t
        parts = [_shift(Z, k) for k in range(1, config.context_slots + 1)]
        source = Z
    X = np.concatenate(parts, axis=2)[batch.mask]
    return X, source


def build_inputs(sentences: Sequence[TokenSequence], config: ModelConfig, embedding: np.ndarray):
    """Context rows and target ids for every position of every sentence, in reading order."""
    batch = Batch.from_sentences(sentences)
    if batch.ids.size == 0:
        return np.zeros((0, config.input_width), dtype=np.asarray(embedding).dtype), batch.targets
    X, _ = _context(np.asarray(embedding), config, batch)
    return X, batch.targets


# --- forward / backward -------------------------------------------------------


def _check_finite(a: np.ndarray, layer: int | str) -> None:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"non-finite activation in layer {layer}", layer=layer)


def logits_from_rows(params: ModelParams, X: np.ndarray, keep: bool = False):
    acts = [X]
    h = X
    # overflow shows up as inf and is reported by _check_finite
    with np.errstate(over="ignore", invalid="ignore"):
        for k, (W, b) in enumerate(params.hidden, start=1):
            h = h @ W
            h += b
            np.maximum(h, 0, out=h)
            _check_finite(h, k)
            acts.append(h)
        W_out, b_out = params.output
        logits = h @ W_out
        logits += b_out
    _check_finite(logits, "output")
    return (logits, acts) if keep else logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    e /= e.sum(axis=1, keepdims=True)
    return e


def forward_rows(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return softmax(logits_from_rows(params, X))


def forward(params: ModelParams, config: ModelConfig, batch: Batch) -> np.ndarray:
    """Next-word distributions, one row per target position of ``batch``."""
    X, _ = _context(params.embedding, config, batch)
    return forward_rows(params, X)


def loss_and_grads(params: ModelParams, config: ModelConfig, batch: Batch) -> tuple[float, ModelParams]:
    """Mean negative log-likelihood (natural log) over the batch targets and its gradients."""
    U = params.embedding
    X, source = _context(U, config, batch)
    logits, acts = logits_from_rows(params, X, keep=True)
    B = X.shape[0]
    rows = np.arange(B)
    logp = _log_softmax(logits)
    loss = float(-logp[rows, batch.targets].astype(np.float64).mean())

    d = np.exp(logp)
    d[rows, batch.targets] -= 1.0
    d /= B
    W_out = params.output[0]
    g_out = (acts[-1].T @ d, d.sum(axis=0))
    dh = d @ W_out.T
    g_hidden = [None] * len(params.hidden)
    for k in range(len(params.hidden) - 1, -1, -1):
        W, _ = params.hidden[k]
        dh = dh * (acts[k + 1] > 0)
        g_hidden[k] = (acts[k].T @ dh, dh.sum(axis=0))
        dh = dh @ W.T

    # scatter context-row gradients back onto sequence positions
    N, T = batch.ids.shape
    D = U.shape[1]
    dparts = np.zeros((N, T, config.input_width), dtype=dh.dtype)
    dparts[batch.mask] = dh
    dsource = np.zeros((N, T, D), dtype=dh.dtype)
    for k in range(1, config.context_slots + 1):
        dsource += _unshift(dparts[:, :, (k - 1) * D: k * D], k)
    if config.mode == "ngram":
        dE = dsource
    else:
        dE = forgetting_scan(dsource, config.alpha, axis=1, reverse=True)
    dU = np.zeros_like(U)
    np.add.at(dU, batch.ids[batch.mask], dE[batch.mask])
    return loss, ModelParams(dU, g_hidden, g_out)


# --- evaluation -----------------------------------------------------------------


@dataclass(frozen=True)
class PerplexityReport:
    dataset: str
    tokens: int
    nll: float
    perplexity: float

    def tsv_row(self) -> tuple[str, ...]:
        return (self.dataset, str(self.tokens), f"{self.nll:.4f}", f"{self.perplexity:.2f}")


REPORT_HEADER = ("dataset", "tokens", "nll", "ppl")


def _chunks(sentences, words):
    chunk, used = [], 0
    for s in sentences:
        chunk.append(s)
        used += len(s)
        if used >= words:
            yield chunk
            chunk, used = [], 0
    if chunk:
        yield chunk


def total_nll(params: ModelParams, config: ModelConfig, sentences: Sequence[TokenSequence],
              chunk_words: int = 4000) -> tuple[float, int]:
    nll, tokens = 0.0, 0
    for chunk in _chunks(sentences, chunk_words):
        batch = Batch.from_sentences(chunk)
        X, _ = _context(params.embedding, config, batch)
        logp = _log_softmax(logits_from_rows(params, X))
        nll -= float(logp[np.arange(X.shape[0]), batch.targets].astype(np.float64).sum())
        tokens += X.shape[0]
    return nll, tokens


def perplexity(params: ModelParams, config: ModelConfig, corpus: TokenizedCorpus | Sequence[TokenSequence],
               name: str = "data") -> PerplexityReport:
    """``exp(total NLL / tokens)``; every token, end-of-sentence included, is predicted once."""
    sentences = corpus.sentences if isinstance(corpus, TokenizedCorpus) else corpus
    if isinstance(corpus, TokenizedCorpus) and corpus.vocab_size != config.vocab_size:
        raise VocabMismatchError(f"corpus vocabulary has {corpus.vocab_size} tokens, model expects {config.vocab_size}")
    nll, tokens = total_nll(params, config, sentences)
    if tokens == 0:
        raise ValueError(f"{name}: cannot compute perplexity of an empty split")
    return PerplexityReport(name, tokens, nll, math.exp(nll / tokens))


# --- training ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.4
    batch_capacity_words: int = 200
    seed: int = 42
    min_valid_ppl_gain: float = 1.0
    final_halving_epochs: int = 6
    max_epochs: int | None = None
    deterministic: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if self.batch_capacity_words < 1:
            raise ValueError("batch_capacity_words must be >= 1")
        if self.final_halving_epochs < 0:
            raise ValueError("final_halving_epochs must be >= 0")


class HalvingSchedule:
    """Hold the learning rate while validation perplexity keeps improving, then halve it.

    The rate stays at ``initial_lr`` as long as every epoch lowers validation
    perplexity by at least ``min_gain`` points.  The first epoch that falls
    short ends that phase; training then runs ``halving_epochs`` more epochs
    at ``lr/2, lr/4, ...`` and stops.
    """

    def __init__(self, initial_lr: float, min_gain: float = 1.0, halving_epochs: int = 6,
                 initial_ppl: float = math.inf):
        self.initial_lr = initial_lr
        self.min_gain = min_gain
        self.halving_epochs = halving_epochs
        self.best = initial_ppl
        self.plateau = False
        self.halvings = 0

    def observe(self, valid_ppl: float) -> None:
        """Record the validation perplexity of the epoch that just finished."""
        if not self.plateau and self.best - valid_ppl < self.min_gain:
            self.plateau = True
        self.best = min(self.best, valid_ppl)
        if self.plateau:
            self.halvings += 1

    def next_lr(self) -> float | None:
        """Rate for the next epoch, or None when training is over."""
        if self.halvings > self.halving_epochs:
            return None
        return self.initial_lr / 2 ** self.halvings


def simulate_schedule(valid_ppls: Sequence[float], initial_lr: float, min_gain: float = 1.0,
                      halving_epochs: int = 6, initial_ppl: float = math.inf) -> list[float]:
    """Rates the schedule would use, epoch by epoch, given the validation perplexity after each epoch."""
    sched = HalvingSchedule(initial_lr, min_gain, halving_epochs, initial_ppl)
    lrs = []
    for ppl in valid_ppls:
        lr = sched.next_lr()
        if lr is None:
            break
        lrs.append(lr)
        sched.observe(ppl)
    return lrs


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    lr: float
    train_nll: float
    valid_ppl: float


LOG_HEADER = ("epoch", "lr", "train_nll", "valid_ppl")


def write_log_tsv(rows: Sequence[EpochLog], out) -> None:
    out.write("\t".join(LOG_HEADER) + "\n")
    for r in rows:
        out.write(f"{r.epoch}\t{r.lr:.10g}\t{r.train_nll:.6f}\t{r.valid_ppl:.4f}\n")


def _threads() -> int | None:
    raw = os.environ.get("FOFE_THREADS", "0").strip() or "0"
    n = int(raw)
    return None if n <= 0 else n


@contextlib.contextmanager
def blas_threads(deterministic: bool):
    """Pin BLAS to one thread in deterministic mode, else to ``FOFE_THREADS`` (0 = library default)."""
    from threadpoolctl import threadpool_limits

    limit = 1 if deterministic else _threads()
    if limit is None:
        yield
        return
    with threadpool_limits(limits=limit):
        yield


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> None:
    for (name, p), g in zip(params.named(), grads.arrays()):
        p -= p.dtype.type(lr) * g
        if not np.isfinite(p).all():
            raise NonFiniteError(f"parameter {name} became non-finite after an update", layer=name)


def train(model_config: ModelConfig, train_config: TrainConfig, train_corpus: TokenizedCorpus,
          valid_corpus: TokenizedCorpus, callback: Callable[[EpochLog], None] | None = None
          ) -> tuple[ModelParams, list[EpochLog]]:
    """Mini-batch SGD with per-epoch shuffling and the halving schedule.

    Returns the parameters after the final epoch and one log row per epoch.
    """
    if len(train_corpus) == 0 or len(valid_corpus) == 0:
        raise ValueError("train and valid splits must be nonempty")
    for name, c in (("train", train_corpus), ("valid", valid_corpus)):
        if c.vocab_size != model_config.vocab_size:
            raise VocabMismatchError(f"{name} vocabulary has {c.vocab_size} tokens, model expects {model_config.vocab_size}")
    longest = max(len(s) for s in train_corpus.sentences)
    if train_config.batch_capacity_words < longest:
        raise ValueError(f"batch capacity {train_config.batch_capacity_words} is below the longest "
                         f"training sentence ({longest} tokens)")
    dtype = np.dtype(train_config.dtype)
    K = model_config.vocab_size
    log: list[EpochLog] = []
    with blas_threads(train_config.deterministic):
        params = init_params(model_config, train_config.seed, dtype)
        rng = np.random.default_rng(train_config.seed + 1)
        initial = perplexity(params, model_config, valid_corpus, "valid").perplexity
        sched = HalvingSchedule(train_config.initial_lr, train_config.min_valid_ppl_gain,
                                train_config.final_halving_epochs, initial)
        epoch = 0
        while True:
            lr = sched.next_lr()
            if lr is None or (train_config.max_epochs is not None and epoch >= train_config.max_epochs):
                break
            epoch += 1
            nll_sum, n_tok = 0.0, 0
            for batch_sents in make_minibatches(train_corpus, train_config.batch_capacity_words, rng):
                batch = Batch.from_sentences(batch_sents)
                loss, grads = loss_and_grads(params, model_config, batch)
                sgd_step(params, grads, lr)
                nll_sum += loss * batch.n_tokens
                n_tok += batch.n_tokens
            valid_ppl = perplexity(params, model_config, valid_corpus, "valid").perplexity
            row = EpochLog(epoch, lr, nll_sum / n_tok, valid_ppl)
            log.append(row)
            if callback is not None:
                callback(row)
            if not math.isfinite(valid_ppl) or valid_ppl > 10 * K:
                raise TrainingDiverged(f"epoch {epoch}: validation perplexity {valid_ppl:.4g} exceeds "
                                       f"10 x vocabulary size ({10 * K}) at lr={lr:g}")
            sched.observe(valid_ppl)
    return params, log


# --- model files ---------------------------------------------------------------
#
# Layout (little-endian):
#   b"FOFE", u8 version,
#   u8 mode tag, u8 n-gram order, u64 K, u64 D, u64 number of hidden layers,
#   u64 width of each hidden layer, f64 alpha (0 for n-gram models),
#   then every tensor of ModelParams.named() in order as
#   u64 rows, u64 cols, rows*cols float32 values in row-major order.
# Bias vectors are stored as 1 x n tensors.

MAGIC = b"FOFE"
FORMAT_VERSION = 1
_MODE_TAGS = {"fofe1": 1, "fofe2": 2, "ngram": 3}
_TAG_MODES = {v: k for k, v in _MODE_TAGS.items()}


def _header(config: ModelConfig) -> bytes:
    parts = [MAGIC, struct.pack("<BBB", FORMAT_VERSION, _MODE_TAGS[config.mode], config.order if config.mode == "ngram" else 0),
             struct.pack("<QQQ", config.vocab_size, config.embed_dim, len(config.hidden_dims))]
    parts += [struct.pack("<Q", h) for h in config.hidden_dims]
    parts.append(struct.pack("<d", config.alpha if config.alpha is not None else 0.0))
    return b"".join(parts)


def model_bytes(params: ModelParams, config: ModelConfig) -> bytes:
    params.check_shapes(config)
    out = [_header(config)]
    for _, a in params.named():
        a2 = a.reshape(1, -1) if a.ndim == 1 else a
        out.append(struct.pack("<QQ", *a2.shape))
        out.append(np.ascontiguousarray(a2, dtype="<f4").tobytes())
    return b"".join(out)


def save_model(path, params: ModelParams, config: ModelConfig) -> None:
    """Write the model; parameters are stored as float32."""
    data = model_bytes(params, config)
    with open(path, "wb") as f:
        f.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str, tensor: str | None = None) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedModelError(f"file ends inside {what} ({len(self.data) - self.pos} of {n} bytes left)",
                                      tensor=tensor)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str, tensor: str | None = None):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what, tensor))


def parse_model(data: bytes) -> tuple[ModelParams, ModelConfig]:
    r = _Reader(data)
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"not a model file: expected magic {MAGIC!r}, found {data[:len(MAGIC)]!r}")
    r.pos = len(MAGIC)
    (version,) = r.unpack("<B", "header")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"model format version {version} is not supported (expected {FORMAT_VERSION})")
    tag, order = r.unpack("<BB", "header")
    if tag not in _TAG_MODES:
        raise ModelFormatError(f"unknown model mode tag {tag}")
    K, D, n_hidden = r.unpack("<QQQ", "header")
    if n_hidden > 64:
        raise ModelFormatError(f"implausible number of hidden layers: {n_hidden}")
    hidden = tuple(r.unpack("<Q", "header")[0] for _ in range(n_hidden))
    (alpha,) = r.unpack("<d", "header")
    mode = _TAG_MODES[tag]
    try:
        config = ModelConfig(mode, K, D, hidden, alpha=alpha if mode != "ngram" else None, order=order or 2)
    except ValueError as exc:
        raise ModelFormatError(f"invalid model configuration: {exc}") from None
    arrays = []
    for name, shape in expected_shapes(config):
        want = shape if len(shape) == 2 else (1, shape[0])
        rows, cols = r.unpack("<QQ", f"the shape of tensor {name}", name)
        if (rows, cols) != want:
            raise ShapeMismatchError(f"tensor {name} is {rows}x{cols}, the configuration implies {want[0]}x{want[1]}")
        raw = r.take(4 * rows * cols, f"the values of tensor {name}", name)
        arrays.append(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape))
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} unexpected trailing bytes after the last tensor")
    return _from_arrays(arrays), config


def load_model(path) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as f:
        return parse_model(f.read())

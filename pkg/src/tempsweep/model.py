"""LSTM language model (generator), random oracle and recurrent discriminator.

All computation is float64 numpy with hand-written backpropagation through
time. Output logits are tied to the embedding matrix: ``logits = o_t @ W.T``
where ``o_t`` is the top hidden state, projected to the embedding width
when the two widths differ.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import BOS, EOS, PAD

FORMAT_MAGIC = b"TSWPARAM"
FORMAT_VERSION = 1
ORACLE_HIDDEN = 32


class ModelError(ValueError):
    pass


class NumericalOverflow(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class RecurrentParams:
    """Named float64 blocks plus the dims needed to interpret them."""

    blocks: dict[str, np.ndarray]
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    num_layers: int = 1
    kind: str = "generator"
    lineage: dict = field(default_factory=dict)

    @property
    def W(self) -> np.ndarray:
        return self.blocks["W"]

    def layer(self, idx: int) -> tuple[np.ndarray, np.ndarray]:
        return self.blocks[f"lstm{idx}.w"], self.blocks[f"lstm{idx}.b"]

    def copy(self) -> "RecurrentParams":
        return type(self)(
            {k: v.copy() for k, v in self.blocks.items()},
            self.vocab_size, self.embed_dim, self.hidden_dim, self.num_layers,
            self.kind, json.loads(json.dumps(self.lineage)),
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.blocks.items()}

    def n_weights(self) -> int:
        return sum(v.size for v in self.blocks.values())

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.blocks.values())

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return _expected_shapes(self.kind, self.vocab_size, self.embed_dim,
                                self.hidden_dim, self.num_layers)


class LstmLmParams(RecurrentParams):
    """Generator G: embedding W (tied output), LSTM stack, optional projection."""


class DiscriminatorParams(RecurrentParams):
    """Discriminator D: embedding, LSTM encoder, scalar sigmoid head."""


def _expected_shapes(kind, vocab_size, embed_dim, hidden_dim, num_layers):
    shapes: dict[str, tuple[int, ...]] = {"W": (vocab_size, embed_dim)}
    for layer in range(num_layers):
        d_in = embed_dim if layer == 0 else hidden_dim
        shapes[f"lstm{layer}.w"] = (d_in + hidden_dim, 4 * hidden_dim)
        shapes[f"lstm{layer}.b"] = (4 * hidden_dim,)
    if kind == "discriminator":
        shapes["head.w"] = (hidden_dim,)
        shapes["head.b"] = (1,)
    elif hidden_dim != embed_dim:
        shapes["proj"] = (hidden_dim, embed_dim)
    return shapes


def _check_dims(vocab_size, embed_dim, hidden_dim, num_layers):
    if vocab_size < 5:
        raise ModelError(f"vocab_size must be >= 5, got {vocab_size}")
    if embed_dim < 1 or hidden_dim < 1:
        raise ModelError("embed_dim and hidden_dim must be positive")
    if num_layers not in (1, 2):
        raise ModelError("num_layers must be 1 or 2")


def init_params(
    vocab_size: int,
    hidden_dim: int,
    embed_dim: int | None = None,
    num_layers: int = 1,
    seed: int = 0,
    scale: float = 0.1,
    kind: str = "generator",
) -> RecurrentParams:
    """Every weight i.i.d. Normal(0, scale**2) from ``default_rng(seed)``."""
    embed_dim = hidden_dim if embed_dim is None else embed_dim
    _check_dims(vocab_size, embed_dim, hidden_dim, num_layers)
    if not scale > 0:
        raise ModelError("scale must be > 0 (a zero-scale model is degenerate)")
    rng = np.random.default_rng(seed)
    shapes = _expected_shapes(kind, vocab_size, embed_dim, hidden_dim, num_layers)
    blocks = {name: rng.normal(0.0, scale, size=shape) for name, shape in shapes.items()}
    cls = DiscriminatorParams if kind == "discriminator" else LstmLmParams
    return cls(blocks, vocab_size, embed_dim, hidden_dim, num_layers, kind,
               {"init_seed": int(seed), "init_scale": float(scale)})


def zero_params(vocab_size: int, hidden_dim: int, embed_dim: int | None = None,
                num_layers: int = 1, kind: str = "generator") -> RecurrentParams:
    embed_dim = hidden_dim if embed_dim is None else embed_dim
    _check_dims(vocab_size, embed_dim, hidden_dim, num_layers)
    shapes = _expected_shapes(kind, vocab_size, embed_dim, hidden_dim, num_layers)
    cls = DiscriminatorParams if kind == "discriminator" else LstmLmParams
    return cls({k: np.zeros(s) for k, s in shapes.items()}, vocab_size, embed_dim,
               hidden_dim, num_layers, kind, {})


def make_oracle(vocab_size: int, seed: int, hidden_dim: int = ORACLE_HIDDEN) -> LstmLmParams:
    """Standard-normal LSTM used as the synthetic data distribution."""
    params = init_params(vocab_size, hidden_dim, hidden_dim, 1, seed, 1.0, "oracle")
    return params  # type: ignore[return-value]


def init_discriminator(vocab_size: int, hidden_dim: int, embed_dim: int | None = None,
                       seed: int = 0, scale: float = 0.1) -> DiscriminatorParams:
    return init_params(vocab_size, hidden_dim, embed_dim, 1, seed, scale,  # type: ignore[return-value]
                       "discriminator")


# ---------------------------------------------------------------------------
# elementwise pieces


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_grad(s: np.ndarray) -> np.ndarray:
    return s * (1.0 - s)


def _tanh_grad(t: np.ndarray) -> np.ndarray:
    return 1.0 - t * t


def conditional_dist(logits: np.ndarray, alpha: float) -> np.ndarray:
    """softmax(logits / alpha) over the last axis; alpha == 0 is the argmax one-hot.

    Ties at alpha == 0 go to the lowest index.
    """
    if alpha < 0:
        raise ModelError(f"temperature must be >= 0, got {alpha}")
    logits = np.asarray(logits, dtype=np.float64)
    if alpha == 0:
        out = np.zeros_like(logits)
        np.put_along_axis(out, np.argmax(logits, axis=-1)[..., None], 1.0, axis=-1)
        return out
    z = logits if alpha == 1 else logits / alpha
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    if not alpha > 0:
        raise ModelError(f"log-probabilities need temperature > 0, got {alpha}")
    z = np.asarray(logits, dtype=np.float64)
    if alpha != 1:
        z = z / alpha
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats over the last axis."""
    p = np.asarray(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


# ---------------------------------------------------------------------------
# single-step and batched-step inference


@dataclass
class RnnState:
    h: np.ndarray  # (num_layers, hidden_dim)
    c: np.ndarray

    @classmethod
    def zeros(cls, params: RecurrentParams) -> "RnnState":
        shape = (params.num_layers, params.hidden_dim)
        return cls(np.zeros(shape), np.zeros(shape))


def initial_state(params: RecurrentParams, batch: int) -> tuple[np.ndarray, np.ndarray]:
    shape = (params.num_layers, batch, params.hidden_dim)
    return np.zeros(shape), np.zeros(shape)


def _cell(w, b, x, h_prev, c_prev):
    H = h_prev.shape[-1]
    z = x @ w[: x.shape[-1]] + h_prev @ w[x.shape[-1]:] + b
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def output_features(params: RecurrentParams, h_top: np.ndarray) -> np.ndarray:
    proj = params.blocks.get("proj")
    return h_top if proj is None else h_top @ proj


def step_batch(
    params: RecurrentParams, h: np.ndarray, c: np.ndarray, tokens: np.ndarray, step: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Advance a batch of states by one input token each.

    Returns new ``(h, c)`` of shape (layers, B, H) and logits (B, V).
    """
    x = params.W[tokens]
    new_h = np.empty_like(h)
    new_c = np.empty_like(c)
    for layer in range(params.num_layers):
        w, b = params.layer(layer)
        x, cc = _cell(w, b, x, h[layer], c[layer])
        new_h[layer], new_c[layer] = x, cc
    logits = output_features(params, x) @ params.W.T
    if not (np.isfinite(logits).all() and np.isfinite(new_c).all()):
        raise NumericalOverflow(f"numerical overflow at step {step}")
    return new_h, new_c, logits


def forward_step(
    params: RecurrentParams, state: RnnState, token_id: int, step: int = 0
) -> tuple[RnnState, np.ndarray]:
    """One LSTM step for a single sequence; returns (new state, logits o_t . W)."""
    if not 0 <= token_id < params.vocab_size:
        raise ModelError(f"token id {token_id} out of range")
    h, c, logits = step_batch(params, state.h[:, None, :], state.c[:, None, :],
                              np.array([token_id]), step)
    return RnnState(h[:, 0], c[:, 0]), logits[0]


# ---------------------------------------------------------------------------
# teacher-forced sequence passes with caches for backprop


def pad_batch(sentences: Sequence[Sequence[int]], prepend_bos: bool = True):
    """Inputs, targets and mask arrays of shape (B, T) for teacher forcing.

    With ``prepend_bos`` inputs are ``BOS x1 .. x_{T-1}`` and targets
    ``x1 .. x_T``; without it inputs are the sentence itself (discriminator).
    """
    T = max(len(s) for s in sentences)
    B = len(sentences)
    inputs = np.full((B, T), PAD, dtype=np.int64)
    targets = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T))
    for r, s in enumerate(sentences):
        n = len(s)
        if prepend_bos:
            inputs[r, 0] = BOS
            inputs[r, 1:n] = s[:-1]
        else:
            inputs[r, :n] = s
        targets[r, :n] = s
        mask[r, :n] = 1.0
    return inputs, targets, mask


def _lstm_forward(params: RecurrentParams, inputs: np.ndarray):
    B, T = inputs.shape
    H = params.hidden_dim
    x_seq = params.W[inputs]  # (B, T, E)
    caches = []
    for layer in range(params.num_layers):
        w, b = params.layer(layer)
        D = x_seq.shape[-1]
        xw = x_seq @ w[:D] + b
        wh = w[D:]
        hs = np.zeros((B, T + 1, H))
        cs = np.zeros((B, T + 1, H))
        gates = np.empty((B, T, 4 * H))
        tcs = np.empty((B, T, H))
        for t in range(T):
            z = xw[:, t] + hs[:, t] @ wh
            ifo_i = _sigmoid(z[:, :2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = _sigmoid(z[:, 3 * H:])
            c = ifo_i[:, H:] * cs[:, t] + ifo_i[:, :H] * g
            tc = np.tanh(c)
            cs[:, t + 1] = c
            hs[:, t + 1] = o * tc
            gates[:, t, :2 * H] = ifo_i
            gates[:, t, 2 * H:3 * H] = g
            gates[:, t, 3 * H:] = o
            tcs[:, t] = tc
        caches.append((x_seq, hs, cs, gates, tcs))
        x_seq = hs[:, 1:]
    if not np.isfinite(x_seq).all():
        bad = int(np.argmax(~np.isfinite(x_seq).all(axis=(0, 2))))
        raise NumericalOverflow(f"numerical overflow at step {bad}")
    return x_seq, caches


def _lstm_backward(params: RecurrentParams, caches, d_top: np.ndarray, grads: dict):
    """Backprop ``d_top`` (B, T, H) through the LSTM stack; accumulates into grads.

    Returns the gradient w.r.t. the bottom-layer input embeddings (B, T, E).
    """
    H = params.hidden_dim
    d_out = d_top
    for layer in reversed(range(params.num_layers)):
        w, _ = params.layer(layer)
        x_seq, hs, cs, gates, tcs = caches[layer]
        B, T, D = x_seq.shape
        wh = w[D:]
        dz_all = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(T)):
            i = gates[:, t, :H]
            f = gates[:, t, H:2 * H]
            g = gates[:, t, 2 * H:3 * H]
            o = gates[:, t, 3 * H:]
            tc = tcs[:, t]
            dh = d_out[:, t] + dh_next
            dc = dc_next + dh * o * _tanh_grad(tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc * g * _sigmoid_grad(i)
            dz[:, H:2 * H] = dc * cs[:, t] * _sigmoid_grad(f)
            dz[:, 2 * H:3 * H] = dc * i * _tanh_grad(g)
            dz[:, 3 * H:] = dh * tc * _sigmoid_grad(o)
            dh_next = dz @ wh.T
            dc_next = dc * f
        flat_dz = dz_all.reshape(B * T, 4 * H)
        gw = grads[f"lstm{layer}.w"]
        gw[:D] += x_seq.reshape(B * T, D).T @ flat_dz
        gw[D:] += hs[:, :-1].reshape(B * T, H).T @ flat_dz
        grads[f"lstm{layer}.b"] += flat_dz.sum(axis=0)
        d_out = (flat_dz @ w[:D].T).reshape(B, T, D)
    return d_out


def _scatter_embedding(grads: dict, inputs: np.ndarray, d_emb: np.ndarray) -> None:
    np.add.at(grads["W"], inputs.reshape(-1), d_emb.reshape(-1, d_emb.shape[-1]))


def lm_logits(params: RecurrentParams, inputs: np.ndarray):
    h_top, caches = _lstm_forward(params, inputs)
    feats = output_features(params, h_top)
    return feats @ params.W.T, (h_top, feats, caches)


def lm_backward(params: RecurrentParams, inputs: np.ndarray, cache, d_logits: np.ndarray) -> dict:
    """Gradients of a scalar loss given its gradient w.r.t. logits (B, T, V)."""
    h_top, feats, caches = cache
    grads = params.zeros_like()
    V, E = params.W.shape
    B, T, _ = d_logits.shape
    flat_dl = d_logits.reshape(B * T, V)
    grads["W"] += flat_dl.T @ feats.reshape(B * T, E)
    d_feats = (flat_dl @ params.W).reshape(B, T, E)
    proj = params.blocks.get("proj")
    if proj is not None:
        grads["proj"] += h_top.reshape(B * T, -1).T @ d_feats.reshape(B * T, E)
        d_top = d_feats @ proj.T
    else:
        d_top = d_feats
    d_emb = _lstm_backward(params, caches, d_top, grads)
    _scatter_embedding(grads, inputs, d_emb)
    return grads


def nll_loss_and_grads(
    params: RecurrentParams, sentences: Sequence[Sequence[int]], alpha: float = 1.0
) -> tuple[float, dict]:
    """Mean per-token NLL of a batch (teacher forced, logits / alpha) and its gradient."""
    inputs, targets, mask = pad_batch(sentences)
    logits, cache = lm_logits(params, inputs)
    logp = log_softmax(logits, alpha)
    n_tok = mask.sum()
    tok_lp = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(tok_lp * mask).sum() / n_tok)
    d_logits = np.exp(logp)
    np.put_along_axis(
        d_logits, targets[..., None],
        np.take_along_axis(d_logits, targets[..., None], axis=-1) - 1.0, axis=-1)
    d_logits *= (mask / (n_tok * alpha))[..., None]
    return loss, lm_backward(params, inputs, cache, d_logits)


# ---------------------------------------------------------------------------
# likelihoods


def token_logprobs(
    params: RecurrentParams, sentences: Sequence[Sequence[int]], alpha: float = 1.0,
    batch_size: int = 512,
) -> list[np.ndarray]:
    """Per-token log-probabilities of each sentence (EOS prediction included)."""
    out: list[np.ndarray] = []
    for start in range(0, len(sentences), batch_size):
        chunk = sentences[start:start + batch_size]
        inputs, targets, mask = pad_batch(chunk)
        logits, _ = lm_logits(params, inputs)
        logp = log_softmax(logits, alpha)
        tok = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        out.extend(tok[r, : len(s)] for r, s in enumerate(chunk))
    return out


def sentence_nlls(
    params: RecurrentParams, sentences: Sequence[Sequence[int]], alpha: float = 1.0
) -> np.ndarray:
    """Per-sentence NLL in nats per token."""
    return np.array([-lp.mean() for lp in token_logprobs(params, sentences, alpha)])


def sequence_nll(params: RecurrentParams, sentence: Sequence[int], alpha: float = 1.0) -> float:
    """-(1/T) sum_t log p(x_t | x_<t) with logits / alpha, T counting the EOS prediction."""
    if not alpha > 0:
        raise ModelError("sequence_nll needs temperature > 0")
    if len(sentence) < 1 or sentence[-1] != EOS:
        raise ModelError("sentence must end with EOS")
    return float(sentence_nlls(params, [sentence], alpha)[0])


# ---------------------------------------------------------------------------
# discriminator


def _disc_forward(disc: DiscriminatorParams, sentences: Sequence[Sequence[int]]):
    inputs, _, mask = pad_batch(sentences, prepend_bos=False)
    h_top, caches = _lstm_forward(disc, inputs)
    last = mask.sum(axis=1).astype(int) - 1
    h_last = h_top[np.arange(len(sentences)), last]
    logit = h_last @ disc.blocks["head.w"] + disc.blocks["head.b"][0]
    return logit, (inputs, h_top, caches, last, h_last)


def _prob_from_logit(logit: np.ndarray) -> np.ndarray:
    return np.clip(_sigmoid(logit), np.finfo(float).tiny, 1.0 - np.finfo(float).eps)


def discriminate_batch(disc: DiscriminatorParams, sentences: Sequence[Sequence[int]],
                       batch_size: int = 1024) -> np.ndarray:
    out = []
    for start in range(0, len(sentences), batch_size):
        logit, _ = _disc_forward(disc, sentences[start:start + batch_size])
        out.append(_prob_from_logit(logit))
    return np.concatenate(out) if out else np.zeros(0)


def discriminate(disc: DiscriminatorParams, sentence: Sequence[int]) -> float:
    """Probability in (0, 1) that ``sentence`` is real."""
    return float(discriminate_batch(disc, [sentence])[0])


def disc_loss_and_grads(
    disc: DiscriminatorParams, sentences: Sequence[Sequence[int]], labels: np.ndarray
) -> tuple[float, dict]:
    """Mean binary cross-entropy of real(1)/fake(0) labels and its gradient."""
    logit, (inputs, h_top, caches, last, h_last) = _disc_forward(disc, sentences)
    labels = np.asarray(labels, dtype=np.float64)
    B = len(sentences)
    # log(1 + exp(-|z|)) form keeps the loss finite for saturated logits
    loss = float(np.mean(np.maximum(logit, 0) - logit * labels + np.log1p(np.exp(-np.abs(logit)))))
    d_logit = (_sigmoid(logit) - labels) / B
    grads = disc.zeros_like()
    grads["head.w"] += h_last.T @ d_logit
    grads["head.b"][0] += d_logit.sum()
    d_top = np.zeros_like(h_top)
    d_top[np.arange(B), last] = d_logit[:, None] * disc.blocks["head.w"][None, :]
    d_emb = _lstm_backward(disc, caches, d_top, grads)
    _scatter_embedding(grads, inputs, d_emb)
    return loss, grads


# ---------------------------------------------------------------------------
# serialization


def save_params(params: RecurrentParams, path: str | Path) -> None:
    """Write the versioned container: magic, version, JSON header, float64 blocks."""
    names = sorted(params.blocks)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": params.kind,
        "dims": {
            "vocab_size": params.vocab_size,
            "embed_dim": params.embed_dim,
            "hidden_dim": params.hidden_dim,
            "num_layers": params.num_layers,
        },
        "lineage": params.lineage,
        "blocks": [[n, list(params.blocks[n].shape)] for n in names],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for n in names:
            fh.write(np.ascontiguousarray(params.blocks[n], dtype="<f8").tobytes())


def load_params(path: str | Path) -> RecurrentParams:
    data = Path(path).read_bytes()
    if data[: len(FORMAT_MAGIC)] != FORMAT_MAGIC:
        raise ModelError(f"{path}: not a parameter file")
    off = len(FORMAT_MAGIC)
    if len(data) < off + 8:
        raise ModelError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", data, off)
    if version != FORMAT_VERSION:
        raise ModelError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    off += 8
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ModelError(f"{path}: corrupt or truncated header") from None
    off += hlen
    dims = header["dims"]
    kind = header["kind"]
    expected = _expected_shapes(kind, dims["vocab_size"], dims["embed_dim"],
                                dims["hidden_dim"], dims["num_layers"])
    blocks = {}
    for name, shape in header["blocks"]:
        shape = tuple(shape)
        if expected.get(name) != shape:
            raise ModelError(f"{path}: block {name} has shape {shape}, expected {expected.get(name)}")
        nbytes = 8 * int(np.prod(shape))
        if off + nbytes > len(data):
            raise ModelError(f"{path}: truncated while reading block {name}")
        blocks[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if set(blocks) != set(expected):
        raise ModelError(f"{path}: missing blocks {sorted(set(expected) - set(blocks))}")
    if off != len(data):
        raise ModelError(f"{path}: {len(data) - off} trailing bytes")
    cls = DiscriminatorParams if kind == "discriminator" else LstmLmParams
    return cls(blocks, dims["vocab_size"], dims["embed_dim"], dims["hidden_dim"],
               dims["num_layers"], kind, header.get("lineage", {}))

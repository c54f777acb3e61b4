"""Neural parameterization of the factored grammar, plus checkpoints.

Row-vector convention throughout: a batch of embeddings is ``(n, d)`` and a
layer computes ``x @ W``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .grammar import BINDINGS, DEFAULT_BINDING, NblParams
from .inside import as_batch, inside_nbl

MAGIC = b"NBLPCFG1"
MLP_NAMES = ("h1", "h2", "h3", "h4")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 256
    n_nt: int = 15
    n_pt: int = 30
    d_h: int = 300
    vocab_size: int = 10001
    binding: str = DEFAULT_BINDING
    seed: int = 0

    def __post_init__(self):
        for name in ("embed_dim", "n_nt", "n_pt", "d_h", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.binding not in BINDINGS:
            raise ConfigError(f"unknown binding {self.binding!r}")

    @property
    def n_sym(self):
        return self.n_nt + self.n_pt


@dataclass
class Model:
    config: ModelConfig
    weights: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.weights[name]

    def parameters(self):
        return list(self.weights.values())

    def numpy_weights(self):
        return {k: v.value.copy() for k, v in self.weights.items()}


def xavier_bound(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def weight_shapes(config):
    """Name -> (shape, (fan_in, fan_out)) for every weight of the model."""
    d, M = config.embed_dim, config.n_sym
    emb = (1, d)
    shapes = {
        "u_S": ((1, d), emb),
        "u_A": ((config.n_nt, d), emb),
        "u_H": ((config.d_h, d), emb),
        "sym_emb": ((M, d), emb),
        "word_emb": ((config.vocab_size, d), emb),
    }
    if config.binding in ("D_with_C", "D_with_B"):
        shapes["pair_emb"] = ((2 * M, d), emb)
    else:
        shapes["dir_emb"] = ((2, d), emb)
    for h in MLP_NAMES:
        shapes[f"{h}.W"] = ((d, d), (d, d))
        for g in ("g1", "g2"):
            shapes[f"{h}.{g}.U"] = ((d, d), (d, d))
            shapes[f"{h}.{g}.V"] = ((d, d), (d, d))
    shapes["f.W"] = ((2 * d, d), (2 * d, d))
    return shapes


def init_model(config):
    """Xavier-uniform initialization, deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    weights = {}
    for name, (shape, fans) in weight_shapes(config).items():
        bound = xavier_bound(*fans)
        weights[name] = ad.leaf(rng.uniform(-bound, bound, size=shape))
    return Model(config, weights)


# ---------------------------------------------------------------------------
# networks


def residual_block(y, U, V):
    """``ReLU(ReLU(y U) V) + y``."""
    return ad.add(ad.relu(ad.matmul(ad.relu(ad.matmul(y, U)), V)), y)


def mlp_h(model, name, x):
    """``g1(g2(x W))`` for the network ``name``."""
    w = model.weights
    y = ad.matmul(x, w[f"{name}.W"])
    y = residual_block(y, w[f"{name}.g2.U"], w[f"{name}.g2.V"])
    return residual_block(y, w[f"{name}.g1.U"], w[f"{name}.g1.V"])


def fuse(model, x, y):
    """``h4(ReLU([x; y] W) + y)``; the residual path carries only ``y``."""
    z = ad.relu(ad.matmul(ad.concat([x, y], axis=1), model.weights["f.W"]))
    return mlp_h(model, "h4", ad.add(z, y))


def _nt_emb(model):
    return ad.getitem(model["sym_emb"], slice(0, model.config.n_nt))


def _scores(u, e):
    """``u e^T``: rows of ``u`` against rows of ``e``."""
    return ad.matmul(u, ad.transpose(e))


@dataclass
class GlobalDistributions:
    """Sentence-independent log distributions (autodiff nodes)."""

    log_root: ad.Node
    log_emit: ad.Node
    log_head: ad.Node
    log_nonhead: ad.Node
    log_word: ad.Node
    log_dir: ad.Node = None


def compute_global_distributions(model):
    cfg = model.config
    M, H, V = cfg.n_sym, cfg.d_h, cfg.vocab_size
    w = model.weights
    root = ad.reshape(_scores(mlp_h(model, "h1", _nt_emb(model)), w["u_S"]), (cfg.n_nt,))
    log_root = ad.log_softmax(root)
    log_emit = ad.log_softmax(_scores(w["u_A"], mlp_h(model, "h2", w["word_emb"])))
    sym = ad.log_softmax(_scores(w["u_H"], w["sym_emb"]))
    log_dir = None
    if cfg.binding in ("D_with_C", "D_with_B"):
        # pair rows are ordered (symbol, direction)
        pair = ad.reshape(ad.log_softmax(_scores(w["u_H"], w["pair_emb"])), (H, M, 2))
        head, nonhead = (sym, pair) if cfg.binding == "D_with_C" else (pair, sym)
        log_word = ad.log_softmax(_scores(w["u_H"], mlp_h(model, "h3", w["word_emb"])))
    else:
        head = nonhead = sym
        if cfg.binding == "D_alone":
            log_dir = ad.log_softmax(_scores(w["u_H"], w["dir_emb"]))
            log_word = ad.log_softmax(_scores(w["u_H"], mlp_h(model, "h3", w["word_emb"])))
        else:
            # additive direction logits would factorize under the joint softmax,
            # so the direction enters the word network instead; rows are (w, D)
            x = ad.add(ad.gather_rows(w["word_emb"], np.repeat(np.arange(V), 2)),
                       ad.gather_rows(w["dir_emb"], np.tile([0, 1], V)))
            joint = _scores(w["u_H"], mlp_h(model, "h3", x))
            log_word = ad.reshape(ad.log_softmax(joint), (H, V, 2))
    return GlobalDistributions(log_root, log_emit, head, nonhead, log_word, log_dir)


def compute_sentence_conditionals(model, words):
    """``log p(H | A, w_p)`` for a batch of word ids ``(b, L)``: ``(b, n_N, L, d_H)``.

    The fused network runs once per distinct word in the batch.
    """
    cfg = model.config
    words = np.asarray(words, dtype=np.int64)
    if words.ndim == 1:
        words = words[None]
    if words.size and (words.min() < 0 or words.max() >= cfg.vocab_size):
        raise IndexError(f"word id out of range for vocabulary of size {cfg.vocab_size}")
    uniq, inv = np.unique(words, return_inverse=True)
    U, A = len(uniq), cfg.n_nt
    x = ad.gather_rows(model["sym_emb"], np.repeat(np.arange(A), U))
    y = ad.gather_rows(model["word_emb"], np.tile(uniq, A))
    logits = _scores(fuse(model, x, y), model["u_H"])  # (A*U, H)
    lat = ad.reshape(ad.log_softmax(logits), (A, U, cfg.d_h))
    lat = ad.take(lat, inv.reshape(-1), axis=1)
    lat = ad.reshape(lat, (A,) + words.shape + (cfg.d_h,))
    return ad.transpose(lat, (1, 0, 2, 3))


def grammar_params(model, dists=None):
    """NblParams view of the global distributions (latent supplied per sentence)."""
    g = compute_global_distributions(model) if dists is None else dists
    return NblParams(g.log_root, g.log_emit, None, g.log_head, g.log_nonhead, g.log_word,
                     g.log_dir, model.config.binding)


def sentence_log_likelihood(model, sentences, lengths=None, dists=None, **kw):
    """Differentiable inside pass of the neural grammar; returns an InsideResult."""
    words, lengths, _ = as_batch(sentences, lengths)
    latent = compute_sentence_conditionals(model, words)
    return inside_nbl(grammar_params(model, dists), words, lengths=lengths, latent=latent, **kw)


def full_params(model):
    """Materialize ``p(H | A, w)`` over the whole vocabulary (small vocabularies only)."""
    g = compute_global_distributions(model)
    lat = compute_sentence_conditionals(model, np.arange(model.config.vocab_size))
    lat = ad.getitem(lat, 0)  # (A, V, H)
    return NblParams(g.log_root, g.log_emit, lat, g.log_head, g.log_nonhead, g.log_word,
                     g.log_dir, model.config.binding).numpy()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, vocab=None):
    """Write named float32 arrays; ``vocab`` goes to a ``.vocab`` sidecar."""
    path = Path(path)
    arrays = dict(model.numpy_weights())
    arrays[f"binding.{model.config.binding}"] = np.zeros(0)
    arrays["seed"] = np.asarray([model.config.seed])
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if vocab is not None:
        Path(str(path) + ".vocab").write_text("\n".join(vocab) + "\n", encoding="utf-8")


def _read(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(f"unexpected end of checkpoint (wanted {n} bytes, got {len(data)})")
    return data


def read_arrays(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointMagicError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (count,) = struct.unpack("<Q", _read(fh, 8))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<Q", _read(fh, 8))
            name = _read(fh, nlen).decode("utf-8")
            (rank,) = struct.unpack("<Q", _read(fh, 8))
            shape = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank))
            size = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(_read(fh, 4 * size), dtype="<f4").reshape(shape).astype(np.float64)
        return out


def load_checkpoint(path, config=None):
    """Rebuild a model; with ``config``, shapes must match it exactly."""
    arrays = read_arrays(path)
    binding = next((k.split(".", 1)[1] for k in arrays if k.startswith("binding.")), None)
    try:
        inferred = ModelConfig(
            embed_dim=arrays["u_S"].shape[1],
            n_nt=arrays["u_A"].shape[0],
            n_pt=arrays["sym_emb"].shape[0] - arrays["u_A"].shape[0],
            d_h=arrays["u_H"].shape[0],
            vocab_size=arrays["word_emb"].shape[0],
            binding=binding,
            seed=int(arrays["seed"][0]) if "seed" in arrays else 0,
        )
    except (KeyError, IndexError, ConfigError) as exc:
        raise CheckpointMismatchError(f"{path}: incomplete checkpoint ({exc})") from None
    if config is not None:
        config = replace(config, seed=inferred.seed)
        if config != inferred:
            raise CheckpointMismatchError(f"{path}: checkpoint config {inferred} does not match {config}")
    cfg = config or inferred
    weights = {}
    for name, (shape, _) in weight_shapes(cfg).items():
        if name not in arrays or arrays[name].shape != shape:
            got = arrays[name].shape if name in arrays else None
            raise CheckpointMismatchError(f"{path}: weight {name} has shape {got}, expected {shape}")
        weights[name] = ad.leaf(arrays[name])
    return Model(cfg, weights)


def load_vocab(path):
    side = Path(str(path) + ".vocab")
    if not side.exists():
        return None
    return side.read_text(encoding="utf-8").rstrip("\n").split("\n")


__all__ = [
    "CheckpointError", "CheckpointMagicError", "CheckpointMismatchError", "CheckpointTruncatedError",
    "ConfigError", "GlobalDistributions", "Model", "ModelConfig", "compute_global_distributions",
    "compute_sentence_conditionals", "full_params", "fuse", "grammar_params", "init_model",
    "load_checkpoint", "load_vocab", "mlp_h", "residual_block", "save_checkpoint",
    "sentence_log_likelihood", "weight_shapes", "xavier_bound",
]

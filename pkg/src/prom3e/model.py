"""Masked variational autoencoder over modality embedding tokens.

Token order inside the encoder is ``[mu], [sigma], registers..., then one
token per visible modality in modality order``. Masked modalities are dropped
before projection, so nothing about them reaches the encoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import LossConfig, ModelConfig, RunConfig, run_config_from_text
from .numerics import Tensor

CHECKPOINT_MAGIC = b"PM3C"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@dataclass(frozen=True)
class VisibleSet:
    visible: tuple[int, ...]
    targets: tuple[int, ...]

    def __post_init__(self):
        if not self.visible:
            raise ValueError("visible set must be nonempty")
        if not self.targets:
            raise ValueError("target set must be nonempty")
        object.__setattr__(self, "visible", tuple(sorted(set(self.visible))))
        object.__setattr__(self, "targets", tuple(sorted(set(self.targets))))

    @classmethod
    def of(cls, visible, modality_count: int, masked_only: bool = False) -> "VisibleSet":
        visible = tuple(sorted(set(visible)))
        targets = tuple(m for m in range(modality_count) if not masked_only or m not in visible)
        return cls(visible, targets)


@dataclass
class EncodeOutput:
    mu: Tensor  # (B, E)
    log_var: Tensor  # (B, E)
    hidden: Tensor  # (B, 2 + R + |visible|, E)


@dataclass
class ForwardOutput:
    reconstructions: dict[int, Tensor]  # modality -> (B, D_in)
    encoded: EncodeOutput
    epsilons: dict[int, np.ndarray]


class ModelParams:
    """Named learnable tensors in a fixed order (see :meth:`names`)."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()},
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    @classmethod
    def init(cls, config: ModelConfig, loss: LossConfig | None, rng: np.random.Generator) -> "ModelParams":
        """Gaussian weights with std 1/sqrt(fan_in), token std 0.02, zero biases."""
        config.validate()
        loss = loss or LossConfig()
        E, D, M = config.encoder_dim, config.d_in, config.modality_count
        H = E * config.ff_mult
        t: dict[str, np.ndarray] = {}

        def w(fan_in, fan_out):
            return rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

        for m in range(M):
            t[f"proj.{m}.w1"] = w(D, E)
            t[f"proj.{m}.b1"] = np.zeros(E)
            t[f"proj.{m}.w2"] = w(E, E)
            t[f"proj.{m}.b2"] = np.zeros(E)
            t[f"modality_id.{m}"] = rng.normal(scale=0.02, size=E)
        t["mu_token"] = rng.normal(scale=0.02, size=E)
        t["sigma_token"] = rng.normal(scale=0.02, size=E)
        if config.registers:
            t["registers"] = rng.normal(scale=0.02, size=(config.registers, E))
        for b in range(config.depth):
            p = f"block.{b}."
            t[p + "ln1.gain"], t[p + "ln1.bias"] = np.ones(E), np.zeros(E)
            for k in "qkvo":
                t[p + f"attn.w{k}"] = w(E, E)
                t[p + f"attn.b{k}"] = np.zeros(E)
            t[p + "ln2.gain"], t[p + "ln2.bias"] = np.ones(E), np.zeros(E)
            t[p + "ff.w1"], t[p + "ff.b1"] = w(E, H), np.zeros(H)
            t[p + "ff.w2"], t[p + "ff.b2"] = w(H, E), np.zeros(E)
        for m in range(M):
            t[f"decoder.{m}.w1"], t[f"decoder.{m}.b1"] = w(E, E), np.zeros(E)
            t[f"decoder.{m}.w2"], t[f"decoder.{m}.b2"] = w(E, D), np.zeros(D)
        t["alpha"] = np.array(loss.alpha_init)
        t["beta"] = np.array(loss.beta_init)

        tensors = {}
        for name, arr in t.items():
            learnable = loss.alpha_beta_learnable or name not in ("alpha", "beta")
            tensors[name] = Tensor(arr, requires_grad=learnable, name=name)
        return cls(config, tensors)


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only, not tokens, norms, biases or alpha/beta."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("w") and (name.startswith(("proj.", "decoder.", "block.")))


# forward pieces -----------------------------------------------------------------


def _mlp(x: Tensor, w1, b1, w2, b2, activation=nx.gelu) -> Tensor:
    return nx.matmul(activation(nx.matmul(x, w1) + b1), w2) + b2


def project(params: ModelParams, embedding: np.ndarray | Tensor, m: int) -> Tensor:
    """Projected token plus modality identifier, shape (B, 1, E)."""
    x = embedding if isinstance(embedding, Tensor) else nx.constant(embedding)
    x = nx.reshape(x, (x.shape[0], 1, x.shape[-1]))
    p = f"proj.{m}."
    tok = _mlp(x, params[p + "w1"], params[p + "b1"], params[p + "w2"], params[p + "b2"])
    return tok + params[f"modality_id.{m}"]


def assemble_tokens(params: ModelParams, embeddings: Sequence[np.ndarray | None], visible: Sequence[int]) -> Tensor:
    """Build the (B, 2 + R + |visible|, E) encoder input.

    ``embeddings[m]`` is the (B, D_in) batch for modality ``m``; masked
    entries may be None and are never read.
    """
    visible = sorted(set(visible))
    if not visible:
        raise ValueError("visible set must be nonempty")
    for m in visible:
        if m >= len(embeddings) or embeddings[m] is None:
            raise ValueError(f"visible modality {m} has no embedding in the batch")
    B = np.shape(embeddings[visible[0]].data if isinstance(embeddings[visible[0]], Tensor) else embeddings[visible[0]])[0]
    E = params.config.encoder_dim
    parts = [
        nx.broadcast_to(nx.reshape(params["mu_token"], (1, 1, E)), (B, 1, E)),
        nx.broadcast_to(nx.reshape(params["sigma_token"], (1, 1, E)), (B, 1, E)),
    ]
    if params.config.registers:
        R = params.config.registers
        parts.append(nx.broadcast_to(nx.reshape(params["registers"], (1, R, E)), (B, R, E)))
    parts += [project(params, embeddings[m], m) for m in visible]
    return nx.concat(parts, axis=1)


def encoder_block(params: ModelParams, x: Tensor, b: int, activation=nx.gelu) -> Tensor:
    p = f"block.{b}."
    h = nx.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
    attn_args = [params[p + f"attn.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
    x = x + nx.self_attention(h, *attn_args, heads=params.config.heads)
    h = nx.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
    return x + _mlp(h, params[p + "ff.w1"], params[p + "ff.b1"], params[p + "ff.w2"], params[p + "ff.b2"], activation)


def encode(params: ModelParams, tokens: Tensor, activation=nx.gelu) -> EncodeOutput:
    x = tokens
    for b in range(params.config.depth):
        x = encoder_block(params, x, b, activation)
        if not np.all(np.isfinite(x.data)):
            raise NonFiniteError(f"non-finite activations after encoder block {b}")
    return EncodeOutput(mu=nx.take(x, 0, axis=1), log_var=nx.take(x, 1, axis=1), hidden=x)


def reparameterize(mu: Tensor, log_var: Tensor, epsilon: np.ndarray) -> Tensor:
    """Latent sample ``mu + exp(log_var / 2) * epsilon``."""
    if np.shape(epsilon) != mu.shape:
        raise nx.ShapeError(f"reparameterize: epsilon {np.shape(epsilon)} vs mu {mu.shape}")
    sigma = nx.exp(nx.scale(log_var, 0.5))
    return mu + sigma * nx.constant(epsilon)


def decode(params: ModelParams, z: Tensor, m: int, activation=nx.gelu) -> Tensor:
    """Raw (unnormalized) reconstruction of modality ``m``, shape (B, D_in)."""
    B, E = z.shape
    p = f"decoder.{m}."
    out = _mlp(nx.reshape(z, (B, 1, E)), params[p + "w1"], params[p + "b1"], params[p + "w2"], params[p + "b2"], activation)
    return nx.reshape(out, (B, out.shape[-1]))


def draw_epsilons(rng: np.random.Generator | None, targets: Sequence[int], shape, shared: bool = False) -> dict[int, np.ndarray]:
    """One standard-normal draw per target (ascending order); zeros when ``rng`` is None."""
    if rng is None:
        return {m: np.zeros(shape) for m in targets}
    if shared:
        e = rng.standard_normal(shape)
        return {m: e for m in targets}
    return {m: rng.standard_normal(shape) for m in targets}


def forward(
    params: ModelParams,
    embeddings: Sequence[np.ndarray | None],
    visible_set: VisibleSet,
    rng: np.random.Generator | None = None,
    epsilons: dict[int, np.ndarray] | None = None,
    activation=nx.gelu,
) -> ForwardOutput:
    """assemble -> encode -> reparameterize -> decode for each target modality.

    Pass ``rng=None`` (and no ``epsilons``) for the deterministic mean
    reconstruction used at inference.
    """
    tokens = assemble_tokens(params, embeddings, visible_set.visible)
    enc = encode(params, tokens, activation)
    if epsilons is None:
        epsilons = draw_epsilons(rng, visible_set.targets, enc.mu.shape, params.config.shared_epsilon)
    recons = {}
    for m in visible_set.targets:
        z = reparameterize(enc.mu, enc.log_var, epsilons[m])
        recons[m] = decode(params, z, m, activation)
    return ForwardOutput(recons, enc, epsilons)


# checkpoints -----------------------------------------------------------------------
#
# b"PM3C" | u16 version | u32 n | n bytes of UTF-8 config text (key = value lines)
# | u32 tensor_count | per tensor in ModelParams order:
#   u16 name_len, name bytes, u8 ndim, ndim x u32 dims, prod(dims) x f64


def checkpoint_bytes(params: ModelParams, run_config: RunConfig) -> bytes:
    text = run_config.to_text().encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(text)), text]
    out.append(struct.pack("<I", len(params.tensors)))
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(path, params: ModelParams, run_config: RunConfig) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, run_config))


def checkpoint_from_bytes(buf: bytes) -> tuple[ModelParams, RunConfig]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    try:
        version, n = struct.unpack_from("<HI", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version}, reader supports {CHECKPOINT_VERSION}")
        pos = 10
        run_config = run_config_from_text(buf[pos : pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + ln].decode("utf-8")
            pos += 2 + ln
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(buf):
                raise CheckpointError(f"tensor {name!r} truncated")
            data = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
            learnable = run_config.loss.alpha_beta_learnable or name not in ("alpha", "beta")
            tensors[name] = Tensor(data, requires_grad=learnable, name=name)
    except struct.error as exc:
        raise CheckpointError(f"checkpoint truncated: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes in checkpoint: {len(buf) - pos}")
    expected = ModelParams.init(run_config.model, run_config.loss, np.random.default_rng(0))
    layout = [(k, t.shape) for k, t in expected.tensors.items()]
    if layout != [(k, t.shape) for k, t in tensors.items()]:
        raise CheckpointError("checkpoint tensors do not match the model configuration")
    return ModelParams(run_config.model, tensors), run_config


def load_checkpoint(path) -> tuple[ModelParams, RunConfig]:
    return checkpoint_from_bytes(Path(path).read_bytes())

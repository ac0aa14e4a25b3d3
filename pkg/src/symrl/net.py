"""Parametric policy/value network with flat-parameter access and exact gradients.

One shared trunk produces 7 action logits and a scalar value. Parameters live
in a single flat float64 vector whose values always sit on the float32 grid,
so the float32 checkpoint format is lossless for anything the training loop
produces and resumed runs replay bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env import N_ACTIONS, N_CHANNELS, N_SCALARS, Observation

CKPT_HEADER = "SYMRL-CKPT v1"

DEFAULT_DESCRIPTOR = "m={m};in=5;sc=2;conv=8,16;k=3;stride=2;pad=1;fc=128,128;act=tanh"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    m: int
    in_channels: int
    n_scalars: int
    conv: tuple[int, ...]
    k: int
    stride: int
    pad: int
    fc: tuple[int, ...]
    act: str

    def descriptor(self) -> str:
        conv = ",".join(str(c) for c in self.conv)
        fc = ",".join(str(c) for c in self.fc)
        return (
            f"m={self.m};in={self.in_channels};sc={self.n_scalars};conv={conv};"
            f"k={self.k};stride={self.stride};pad={self.pad};fc={fc};act={self.act}"
        )

    @classmethod
    def parse(cls, descriptor: str) -> "ArchSpec":
        fields = {}
        for part in descriptor.strip().split(";"):
            key, _, val = part.partition("=")
            if not val:
                raise CheckpointError(f"malformed architecture field {part!r}")
            fields[key] = val
        try:
            ints = lambda s: tuple(int(x) for x in s.split(",")) if s else ()
            spec = cls(
                m=int(fields["m"]),
                in_channels=int(fields["in"]),
                n_scalars=int(fields["sc"]),
                conv=ints(fields["conv"]),
                k=int(fields["k"]),
                stride=int(fields["stride"]),
                pad=int(fields["pad"]),
                fc=ints(fields["fc"]),
                act=fields["act"],
            )
        except (KeyError, ValueError) as err:
            raise CheckpointError(f"bad architecture descriptor {descriptor!r}: {err}") from err
        if spec.act != "tanh":
            raise CheckpointError(f"unsupported activation {spec.act!r}")
        if not spec.fc:
            raise CheckpointError("at least one fully connected layer is required")
        return spec

    def conv_out(self) -> tuple[int, int]:
        """(side, flattened feature count) after the conv stack."""
        side = self.m
        ch = self.in_channels
        for _ in self.conv:
            side = (side + 2 * self.pad - self.k) // self.stride + 1
            if side < 1:
                raise CheckpointError(f"map size {self.m} too small for the conv stack")
        ch = self.conv[-1] if self.conv else self.in_channels
        return side, side * side * ch


def default_descriptor(m: int) -> str:
    return DEFAULT_DESCRIPTOR.format(m=m)


class ParamNet:
    """Observation -> (7 logits, value), differentiable, flat parameters."""

    def __init__(self, descriptor: str, seed: int | None = 0, params: np.ndarray | None = None):
        self.arch = ArchSpec.parse(descriptor)
        self.descriptor = self.arch.descriptor()
        self.layout: list[tuple[str, tuple[int, ...], int]] = []  # (name, shape, offset)
        offset = 0
        ch = self.arch.in_channels
        for i, f in enumerate(self.arch.conv):
            offset = self._add(f"conv{i}.w", (f, ch, self.arch.k, self.arch.k), offset)
            offset = self._add(f"conv{i}.b", (f,), offset)
            ch = f
        _, flat = self.arch.conv_out()
        width = flat + self.arch.n_scalars
        for i, f in enumerate(self.arch.fc):
            offset = self._add(f"fc{i}.w", (width, f), offset)
            offset = self._add(f"fc{i}.b", (f,), offset)
            width = f
        offset = self._add("policy.w", (width, N_ACTIONS), offset)
        offset = self._add("policy.b", (N_ACTIONS,), offset)
        offset = self._add("value.w", (width, 1), offset)
        offset = self._add("value.b", (1,), offset)
        self.n_params = offset
        if params is not None:
            if params.shape != (self.n_params,):
                raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
            self.params = np.asarray(params, dtype=np.float64).copy()
        else:
            self.params = self._init(seed if seed is not None else 0)

    def _add(self, name: str, shape: tuple[int, ...], offset: int) -> int:
        self.layout.append((name, shape, offset))
        return offset + int(np.prod(shape))

    def _init(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        params = np.zeros(self.n_params, dtype=np.float64)
        for name, shape, offset in self.layout:
            size = int(np.prod(shape))
            if name.endswith(".b"):
                continue
            fan_in = int(np.prod(shape[:-1])) if name.startswith(("fc", "policy", "value")) else int(
                np.prod(shape[1:])
            )
            scale = 1.0 / np.sqrt(fan_in)
            if name.startswith("value"):
                scale *= 0.5
            params[offset : offset + size] = rng.normal(0.0, scale, size)
        # keep every value exactly representable in float32 (checkpoint grid)
        return np.float64(np.float32(params))

    # -- flat parameter access -------------------------------------------------

    def get_params(self) -> np.ndarray:
        return self.params.copy()

    def set_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {vec.shape}")
        self.params = vec.copy()

    def clone(self) -> "ParamNet":
        return ParamNet(self.descriptor, params=self.params)

    def param_tensors(self) -> list[Tensor]:
        """Leaf tensors viewing the current parameters, tagged with their flat slices."""
        out = []
        for name, shape, offset in self.layout:
            size = int(np.prod(shape))
            t = Tensor(self.params[offset : offset + size].reshape(shape), requires_grad=True)
            t._param_slice = (offset, size)
            out.append(t)
        return out

    # -- forward ----------------------------------------------------------------

    def forward_t(
        self, pt: list[Tensor], layers: np.ndarray, scalars: np.ndarray
    ) -> tuple[Tensor, Tensor]:
        """Differentiable batched forward: (N,C,m,m), (N,sc) -> logits (N,7), values (N,)."""
        arch = self.arch
        n, c, h, w = layers.shape
        if (c, h, w) != (arch.in_channels, arch.m, arch.m) or scalars.shape != (n, arch.n_scalars):
            raise ValueError(
                f"observation shape {(c, h, w)}/{scalars.shape} does not match "
                f"architecture {self.descriptor!r}"
            )
        it = iter(pt)
        x = Tensor(layers)
        for _ in arch.conv:
            x = ad.tanh(ad.conv2d(x, next(it), next(it), arch.stride, arch.pad))
        x = ad.reshape(x, (n, -1))
        x = ad.concat([x, Tensor(scalars)], axis=1)
        for _ in arch.fc:
            x = ad.tanh(x @ next(it) + next(it))
        logits = x @ next(it) + next(it)
        values = ad.reshape(x @ next(it) + next(it), (n,))
        return logits, values

    def forward_batch(self, layers: np.ndarray, scalars: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        logits, values = self.forward_t(self.param_tensors(), layers, scalars)
        return logits.data, values.data

    def forward(self, obs: Observation) -> tuple[np.ndarray, float]:
        """Single-observation forward: (7 logits, value)."""
        logits, values = self.forward_batch(obs.layers[None], obs.scalars[None])
        return logits[0], float(values[0])

    # -- gradients ----------------------------------------------------------------

    def gradient(self, loss: Tensor) -> "GradientTape":
        """Backward pass; returns the loss value and a flat gradient over all parameters."""
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite loss {loss.data!r}")
        loss.backward()
        grad = np.zeros(self.n_params, dtype=np.float64)
        seen = set()
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._param_slice is not None and node.grad is not None:
                offset, size = node._param_slice
                grad[offset : offset + size] += node.grad.ravel()
                node.grad = None
            stack.extend(node.parents)
        return GradientTape(loss=float(loss.data), grad=grad)


@dataclass
class GradientTape:
    loss: float
    grad: np.ndarray


# -- masked policy ---------------------------------------------------------------


def masked_policy(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax restricted to permitted actions; exact zeros elsewhere."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("mask permits no action")
    shifted = logits - np.max(np.where(mask, logits, -np.inf), axis=-1, keepdims=True)
    e = np.exp(shifted) * mask
    return e / e.sum(axis=-1, keepdims=True)


def masked_log_softmax(logits: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Graph version; returns (log-probs, probs).

    Probabilities are exactly zero on masked entries; the log-prob entries of
    masked actions are finite but meaningless and must be multiplied by the
    mask by the caller.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("mask permits no action")
    maskf = Tensor(mask.astype(np.float64))
    mmax = np.max(np.where(mask, logits.data, -np.inf), axis=-1, keepdims=True)
    shifted = logits - Tensor(mmax)
    e = ad.exp(shifted) * maskf
    total = ad.tsum(e, axis=-1, keepdims=True)
    return shifted - ad.log(total), e / total


def masked_entropy(logp: Tensor, p: Tensor, mask: np.ndarray) -> Tensor:
    """Entropy per row, counting only permitted actions."""
    maskf = Tensor(np.asarray(mask, dtype=np.float64))
    return -ad.tsum(p * logp * maskf, axis=-1)


# -- checkpoint io ---------------------------------------------------------------


def save_checkpoint(net: ParamNet, path) -> None:
    with open(path, "wb") as f:
        f.write(f"{CKPT_HEADER}\n{net.descriptor}\n{net.n_params}\n".encode("utf-8"))
        f.write(net.params.astype("<f4").tobytes())


def load_checkpoint(path) -> ParamNet:
    with open(path, "rb") as f:
        blob = f.read()
    try:
        header, descriptor, count, rest = blob.split(b"\n", 3)
    except ValueError as err:
        raise CheckpointError(f"truncated checkpoint {path}") from err
    if header.decode("utf-8") != CKPT_HEADER:
        raise CheckpointError(f'checkpoint must start with "{CKPT_HEADER}"')
    n = int(count)
    if len(rest) != 4 * n:
        raise CheckpointError(f"expected {n} float32 parameters, file holds {len(rest)} bytes")
    params = np.frombuffer(rest, dtype="<f4", count=n)
    return ParamNet(descriptor.decode("utf-8"), params=params.astype(np.float64))


# -- optimizer --------------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer over the flat parameter vector.

    Updates are computed in float64 and re-quantized to the float32 grid so
    checkpointed parameters round-trip exactly.
    """

    def __init__(self, n_params: int, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(n_params, dtype=np.float64)
        self.v = np.zeros(n_params, dtype=np.float64)

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        if lr is None:
            lr = self.lr
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        out = params - lr * mhat / (np.sqrt(vhat) + self.eps)
        return np.float64(np.float32(out))

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m.copy(), "v": self.v.copy(), "lr": self.lr}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = np.asarray(state["m"], dtype=np.float64).copy()
        self.v = np.asarray(state["v"], dtype=np.float64).copy()
        self.lr = float(state["lr"])


def sgd_adam_step(net: ParamNet, tape: GradientTape, opt: Adam, lr: float | None = None) -> ParamNet:
    """Apply one optimizer step to the net's parameters in place."""
    net.params = opt.step(net.params, tape.grad, lr=lr)
    return net

"""Named parameter storage with Adam state and global-norm gradient clipping."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .errors import ContractError
from .tensor import Tensor

INIT_SCALE = 0.08


class ParamStore:
    """An ordered collection of named trainable tensors plus Adam moments.

    Gradients live on the tensors (``param.grad``) and start as zeros, so a
    parameter unreachable from the loss keeps a zero gradient.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float | None = 5.0):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.frozen = False

    # -- registration -------------------------------------------------------------

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        t.zero_grad()
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def add_weight(self, name: str, shape, rng: np.random.Generator) -> Tensor:
        return self.add(name, rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape))

    def add_bias(self, name: str, size: int) -> Tensor:
        return self.add(name, np.zeros(size))

    def add_gru(self, prefix: str, input_size: int, hidden_size: int, rng) -> dict[str, Tensor]:
        h = hidden_size
        return {
            "W_x": self.add_weight(f"{prefix}.W_x", (3 * h, input_size), rng),
            "U_zr": self.add_weight(f"{prefix}.U_zr", (2 * h, h), rng),
            "U_c": self.add_weight(f"{prefix}.U_c", (h, h), rng),
            "b": self.add_bias(f"{prefix}.b", 3 * h),
        }

    # -- mapping protocol -----------------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def scope(self, prefix: str) -> dict[str, Tensor]:
        """Sub-mapping of ``prefix.*`` parameters keyed by the remaining suffix."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self._params.items() if k.startswith(p)}

    def moments(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self._m[name], self._v[name]

    # -- gradients --------------------------------------------------------------------

    def zero_grad(self, set_to_none: bool = False) -> None:
        for t in self._params.values():
            if set_to_none:
                t.grad = None
            else:
                t.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (None if t.grad is None else t.grad.copy()) for k, t in self._params.items()}

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in self._params.values()
                                 if t.grad is not None)))

    def adam_update(self, learning_rate: float) -> None:
        """One Adam step from the current gradients, then zero them."""
        if self.frozen:
            raise ContractError("adam_update on a frozen parameter store")
        missing = [k for k, t in self._params.items() if t.grad is None]
        if missing:
            raise ContractError(f"adam_update: no gradient for {missing}")
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, t in self._params.items():
            g = t.grad * scale
            m, v = self._m[k], self._v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t.data -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            t.zero_grad()

    # -- identity -----------------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            raise ContractError("state dict keys do not match registered parameters")
        for k, arr in state.items():
            if arr.shape != self._params[k].shape:
                raise ContractError(f"shape mismatch for {k}: {arr.shape} vs {self._params[k].shape}")
            self._params[k].data[...] = arr

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, t in self._params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

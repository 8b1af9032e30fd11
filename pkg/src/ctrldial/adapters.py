"""Residual adapters: per-layer bottleneck blocks trained on a frozen base model.

Each block computes ``ReLU(LN(H) W_E + b_E) W_D + b_D + H``.  ``W_D`` and
``b_D`` start at zero so a freshly spawned adapter leaves the base model's
outputs untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError

LAYER_FIELDS = ("ln_scale", "ln_shift", "w_down", "b_down", "w_up", "b_up")


def adapter_param_count(d: int, b: int, n_layers: int) -> int:
    """Exact parameter count: per layer W_E, b_E, W_D, b_D and LN scale/shift."""
    if d < 1 or b < 1 or n_layers < 1:
        raise ConfigError("adapter dimensions must be positive (bottleneck b >= 1)")
    return n_layers * (d * b + b + b * d + d + 2 * d)


@dataclass
class AdapterLayer:
    ln_scale: Tensor
    ln_shift: Tensor
    w_down: Tensor  # W_E, d x b
    b_down: Tensor
    w_up: Tensor  # W_D, b x d
    b_up: Tensor

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f) for f in LAYER_FIELDS]


@dataclass
class AdapterParams:
    label: str
    d_model: int
    bottleneck: int
    layers: list[AdapterLayer] = field(default_factory=list)

    @classmethod
    def spawn(cls, label: str, d_model: int, bottleneck: int, n_layers: int,
              rng: np.random.Generator) -> "AdapterParams":
        if bottleneck < 1:
            raise ConfigError("adapter bottleneck must be >= 1")
        layers = []
        for _ in range(n_layers):
            layers.append(AdapterLayer(
                ln_scale=Tensor(np.ones(d_model), requires_grad=True),
                ln_shift=Tensor(np.zeros(d_model), requires_grad=True),
                w_down=Tensor(rng.normal(0.0, d_model ** -0.5, (d_model, bottleneck)), requires_grad=True),
                b_down=Tensor(np.zeros(bottleneck), requires_grad=True),
                w_up=Tensor(np.zeros((bottleneck, d_model)), requires_grad=True),
                b_up=Tensor(np.zeros(d_model), requires_grad=True),
            ))
        return cls(label, d_model, bottleneck, layers)

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer.tensors()]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {f"adapter.{i}.{f}": getattr(layer, f).data
                for i, layer in enumerate(self.layers) for f in LAYER_FIELDS}

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def save(self, path) -> None:
        from .checkpoint import save_arrays

        config = {"label": self.label, "d_model": self.d_model,
                  "bottleneck": self.bottleneck, "n_layers": len(self.layers)}
        save_arrays(path, "adapter", config, self.named_arrays())

    @classmethod
    def load(cls, path) -> "AdapterParams":
        from .checkpoint import load_arrays

        kind, config, arrays = load_arrays(path)
        if kind != "adapter":
            raise ValueError(f"{path}: expected an adapter checkpoint, found {kind!r}")
        layers = []
        for i in range(config["n_layers"]):
            layers.append(AdapterLayer(**{f: Tensor(arrays[f"adapter.{i}.{f}"], requires_grad=True)
                                          for f in LAYER_FIELDS}))
        return cls(config["label"], config["d_model"], config["bottleneck"], layers)


def adapter_forward(h: Tensor, layer: AdapterLayer, eps: float = 1e-5) -> Tensor:
    if h.shape[-1] != layer.w_down.shape[0]:
        raise DimensionError(f"adapter expects width {layer.w_down.shape[0]}, got {h.shape[-1]}")
    z = ad.relu(ad.layer_norm(h, layer.ln_scale, layer.ln_shift, eps) @ layer.w_down + layer.b_down)
    return z @ layer.w_up + layer.b_up + h


class AdapterRegistry:
    """Label -> adapter map; insertion order is the task index order."""

    def __init__(self):
        self._adapters: dict[str, AdapterParams] = {}
        self.active: str | None = None

    def __contains__(self, label: str) -> bool:
        return label in self._adapters

    def __getitem__(self, label: str) -> AdapterParams:
        return self._adapters[label]

    def __len__(self) -> int:
        return len(self._adapters)

    def __iter__(self):
        return iter(self._adapters)

    def labels(self) -> list[str]:
        return list(self._adapters)

    def add(self, adapter: AdapterParams) -> None:
        if adapter.label in self._adapters:
            raise ContractError(f"adapter label {adapter.label!r} already exists")
        self._adapters[adapter.label] = adapter

    def remove(self, label: str) -> AdapterParams:
        if self.active == label:
            self.active = None
        return self._adapters.pop(label)


def spawn_adapter(model, label: str, bottleneck: int, seed: int = 0) -> str:
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    model.adapters.add(AdapterParams.spawn(label, cfg.d_model, bottleneck, cfg.n_layers, rng))
    return label


def train_adapter(model, label: str, data, config, valid=None, **fit_kwargs):
    """Fit only the adapter ``label``; the base model must come out bitwise unchanged."""
    from .model import fit

    if label not in model.adapters:
        raise ContractError(f"no adapter named {label!r}")
    before = model.checksum()
    result = fit(model, data, config, valid=valid, params=model.adapters[label].parameters(),
                 adapter=label, **fit_kwargs)
    if model.checksum() != before:
        raise AssertionError("base model parameters changed during adapter training")
    return result

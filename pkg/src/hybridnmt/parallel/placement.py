"""Assignment of model parts to virtual devices."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from ..model import ATTN_PARAMS, ModelConfig, lstm_names, param_shapes


class Strategy(str, Enum):
    SERIAL = "serial"
    DATA_PARALLEL = "data_parallel"
    MODEL_PARALLEL = "model_parallel"
    HYBRID = "hybrid"
    HYBRID_IF = "hybrid_if"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        key = text.strip().lower().replace("-", "_")
        aliases = {"dataparallel": "data_parallel", "modelparallel": "model_parallel",
                   "hybridif": "hybrid_if", "dp": "data_parallel", "mp": "model_parallel"}
        return cls(aliases.get(key, key))


class PlacementError(ValueError):
    pass


N_LAYER_DEVICES = 3  # devices that hold LSTM layers under model parallelism


def default_layer_split(depth: int, n_layer_devices: int = N_LAYER_DEVICES) -> list[int]:
    """Contiguous blocks of layers, extra layers going to the later devices.

    Depth 4 over 3 devices gives ``[1, 1, 2]``: {emb + layer 1 | layer 2 | layers 3-4}.
    """
    n = min(depth, n_layer_devices)
    base, extra = divmod(depth, n)
    return [base + (1 if k >= n - extra else 0) for k in range(n)]


@dataclass(frozen=True)
class PlacementPlan:
    strategy: Strategy
    n_devices: int
    layer_to_device: dict = field(default_factory=dict)  # layer (1..L) -> device
    attn_devices: tuple = (0,)
    root: int = 0
    state_owner: int = 0

    @property
    def embedding_device(self) -> int:
        return self.layer_to_device.get(1, 0)

    def owners(self, config: ModelConfig) -> dict[str, tuple[int, ...]]:
        """Parameter name -> devices holding it (more than one means replicas)."""
        all_devices = tuple(range(self.n_devices))
        out = {}
        for name in param_shapes(config):
            if self.strategy is Strategy.DATA_PARALLEL:
                out[name] = all_devices
            elif self.strategy is Strategy.SERIAL:
                out[name] = (0,)
            elif name in ATTN_PARAMS:
                out[name] = tuple(self.attn_devices)
            elif name.endswith("_emb"):
                out[name] = (self.embedding_device,)
            else:
                layer = int(name.split(".")[0][3:])
                out[name] = (self.layer_to_device[layer],)
        return out

    def replicated(self, config: ModelConfig) -> list[str]:
        return [n for n, devs in self.owners(config).items() if len(devs) > 1]

    def device_params(self, config: ModelConfig, device: int) -> list[str]:
        return [n for n, devs in self.owners(config).items() if device in devs]


def build_placement(strategy, n_devices: int, config: ModelConfig,
                    layer_split: list[int] | None = None) -> PlacementPlan:
    strategy = Strategy(strategy)
    if n_devices < 1:
        raise PlacementError("n_devices must be >= 1")
    if strategy is Strategy.SERIAL:
        if n_devices != 1:
            raise PlacementError("serial runs on exactly 1 device")
        return PlacementPlan(strategy, 1, {l: 0 for l in range(1, config.depth + 1)})
    if strategy is Strategy.DATA_PARALLEL:
        return PlacementPlan(strategy, n_devices, {}, tuple(range(n_devices)), 0, 0)
    if n_devices != 4:
        raise PlacementError(f"{strategy.value} needs exactly 4 devices, got {n_devices}")
    split = layer_split or default_layer_split(config.depth)
    if sum(split) != config.depth or len(split) > N_LAYER_DEVICES or min(split) < 1:
        raise PlacementError(f"layer split {split} does not cover depth {config.depth}"
                             f" on at most {N_LAYER_DEVICES} devices")
    layer_to_device, layer = {}, 1
    for dev, count in enumerate(split):
        for _ in range(count):
            layer_to_device[layer] = dev
            layer += 1
    state_owner = n_devices - 1
    if strategy is Strategy.MODEL_PARALLEL:
        attn = (state_owner,)
    else:
        attn = tuple(range(n_devices))
    return PlacementPlan(strategy, n_devices, layer_to_device, attn, 0, state_owner)


def lstm_device(plan: PlacementPlan, layer: int) -> int:
    return plan.layer_to_device.get(layer, 0)


__all__ = ["Strategy", "PlacementPlan", "PlacementError", "build_placement",
           "default_layer_split", "lstm_device", "lstm_names"]

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import ContractViolation
from ..numerics import Tensor, uniform_init
from ..relation import RelationParams

MODES = ("base_model", "mega")


class ConfigError(ContractViolation):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class PipelineConfig:
    """Scalar hyperparameters of the streaming detector.

    Defaults are desk-scale; :meth:`full_scale` gives the full-size
    structural values (window sizes, stack depths, box counts).
    ``T`` is the video length; ``None`` means "take it from the source".
    Offline, the local window is ``2*tau + 1`` frames centred on the key
    frame. Online, it is the ``T_l`` frames ending at the key frame.
    """

    T: int | None = None
    tau: int = 2
    T_l: int | None = None
    T_g: int = 3
    T_m: int = 4
    N_g: int = 1
    N_l: int = 2
    K_l: int = 8
    K_g: int = 6
    K_d: int = 4
    N: int = 12
    dim: int = 16
    heads: int = 4
    embed_dim: int = 20
    num_classes: int = 3
    seed: int = 0
    mode: str = "mega"
    online: bool = False
    nms_iou: float = 0.5

    def __post_init__(self):
        if self.T_l is None:
            self.T_l = 2 * self.tau + 1

    @classmethod
    def full_scale(cls, **overrides) -> "PipelineConfig":
        base = dict(tau=12, T_l=25, T_g=10, T_m=25, N_g=1, N_l=3, K_l=80, K_g=80, K_d=20, N=300)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def single_frame(cls, **overrides) -> "PipelineConfig":
        """Still-image baseline: key frame only, no global stage, no memory."""
        base = dict(tau=0, T_l=1, N_g=0, T_m=0, mode="base_model")
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "PipelineConfig":
        if "tau" in changes and "T_l" not in changes and not changes.get("online", self.online):
            changes["T_l"] = 2 * changes["tau"] + 1
        return dataclasses.replace(self, **changes)

    @property
    def memory_capacity(self) -> int:
        return self.T_m if self.mode == "mega" else 0

    def validate(self) -> "PipelineConfig":
        def need(ok: bool, name: str, msg: str):
            if not ok:
                raise ConfigError(name, msg)

        need(self.mode in MODES, "mode", f"must be one of {MODES}, got {self.mode!r}")
        need(self.T is None or self.T >= 1, "T", "video length must be >= 1")
        need(self.tau >= 0, "tau", "must be >= 0")
        need(self.T_l >= 1, "T_l", "must be >= 1")
        if not self.online:
            need(self.T_l == 2 * self.tau + 1, "T_l", f"offline window must equal 2*tau+1 = {2 * self.tau + 1}")
        need(self.T_g >= 0, "T_g", "must be >= 0")
        need(self.T_m >= 0, "T_m", "must be >= 0")
        need(self.N_g >= 0, "N_g", "must be >= 0")
        need(self.N_l >= 1, "N_l", "must be >= 1")
        need(self.N_g == 0 or self.T_g >= 1, "T_g", "global stage needs at least one global frame")
        need(1 <= self.K_d <= self.K_l, "K_d", "need 1 <= K_d <= K_l")
        need(self.K_l <= self.N, "K_l", "need K_l <= N")
        need(self.K_g >= 1, "K_g", "must be >= 1")
        need(self.heads >= 1 and self.dim % self.heads == 0, "heads", "must divide dim")
        need(self.embed_dim >= 8 and self.embed_dim % 2 == 0, "embed_dim", "must be even and >= 8")
        need(self.num_classes >= 1, "num_classes", "must be >= 1")
        need(0.0 < self.nms_iou <= 1.0, "nms_iou", "must lie in (0, 1]")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class HeadParams:
    """Linear classifier (background is class 0) and class-agnostic box regressor."""

    w_cls: Tensor
    b_cls: Tensor
    w_reg: Tensor
    b_reg: Tensor

    @classmethod
    def init(cls, dim: int, num_classes: int, rng: np.random.Generator) -> "HeadParams":
        return cls(
            w_cls=uniform_init(rng, (num_classes + 1, dim), dim, "w_cls"),
            b_cls=uniform_init(rng, (num_classes + 1,), dim, "b_cls"),
            w_reg=uniform_init(rng, (4, dim), dim, "w_reg"),
            b_reg=uniform_init(rng, (4,), dim, "b_reg"),
        )

    @classmethod
    def zeros(cls, dim: int, num_classes: int) -> "HeadParams":
        z = lambda *s: Tensor(np.zeros(s), requires_grad=True)
        return cls(z(num_classes + 1, dim), z(num_classes + 1), z(4, dim), z(4))

    def parameters(self) -> list[Tensor]:
        return [self.w_cls, self.b_cls, self.w_reg, self.b_reg]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).data.tolist() for k in ("w_cls", "b_cls", "w_reg", "b_reg")}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadParams":
        return cls(**{k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True, name=k)
                      for k, v in d.items()})


@dataclass
class MegaParams:
    global_stacks: list[RelationParams] = field(default_factory=list)
    local_stacks: list[RelationParams] = field(default_factory=list)
    head: HeadParams | None = None

    @classmethod
    def init(cls, config: PipelineConfig, seed: int | None = None) -> "MegaParams":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        mk = lambda: RelationParams.init(config.dim, config.heads, config.embed_dim, rng)
        glob = [mk() for _ in range(config.N_g)]
        loc = [mk() for _ in range(config.N_l)]
        return cls(glob, loc, HeadParams.init(config.dim, config.num_classes, rng))

    def parameters(self) -> list[Tensor]:
        out = []
        for p in self.global_stacks + self.local_stacks:
            out.extend(p.parameters())
        out.extend(self.head.parameters())
        return out

    def copy(self) -> "MegaParams":
        return MegaParams.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "global_stacks": [p.to_dict() for p in self.global_stacks],
            "local_stacks": [p.to_dict() for p in self.local_stacks],
            "head": self.head.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MegaParams":
        return cls(
            [RelationParams.from_dict(p) for p in d["global_stacks"]],
            [RelationParams.from_dict(p) for p in d["local_stacks"]],
            HeadParams.from_dict(d["head"]),
        )

    def check(self, config: PipelineConfig) -> None:
        if len(self.global_stacks) != config.N_g:
            raise ConfigError("N_g", f"params hold {len(self.global_stacks)} global stacks")
        if len(self.local_stacks) != config.N_l:
            raise ConfigError("N_l", f"params hold {len(self.local_stacks)} local stacks")

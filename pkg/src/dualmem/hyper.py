"""Scalar knobs for case retrieval, value-net training and skill retrieval."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from dualmem.errors import InvalidInputError


@dataclass(frozen=True)
class HyperParams:
    # case recall and policy
    K0: int = 20
    k: int = 5
    alpha_start: float = 0.9
    alpha_end: float = 0.35
    T_decay: int = 400
    tau_c: float = 0.8
    epsilon: float = 0.05
    # value-net objective
    beta: float = 0.03
    N_bottom: int = 20
    n_neg: int = 5
    # skill track
    eta: float = 0.1
    U_min: float = 0.5
    U_prune: float = 0.5
    n_min: int = 5
    lambda_sem: float = 0.7
    lambda_U: float = 0.3
    K_skill: int = 15
    k_skill: int = 3
    U_init: float = 0.5
    dispose: str = "freeze"
    # carried in the MDP tuple; terminal binary reward means it is never applied
    gamma: float = 1.0
    # optimizer / network
    lr: float = 1e-3
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    d: int = 64
    p_drop: float = 0.1
    hidden: tuple = (512, 128)

    def __post_init__(self):
        if not (self.K0 >= self.k >= 1):
            raise InvalidInputError(f"need K0 >= k >= 1, got K0={self.K0} k={self.k}")
        if self.tau_c <= 0:
            raise InvalidInputError("tau_c must be positive")
        if self.T_decay <= 0:
            raise InvalidInputError("T_decay must be positive")
        for name in ("epsilon", "eta", "U_min", "U_prune", "alpha_start", "alpha_end", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidInputError(f"{name}={v} outside [0, 1]")
        if not 0.0 <= self.p_drop < 1.0:
            raise InvalidInputError("p_drop must be in [0, 1)")
        if self.beta < 0:
            raise InvalidInputError("beta must be >= 0")
        if self.dispose not in ("freeze", "delete"):
            raise InvalidInputError("dispose must be 'freeze' or 'delete'")
        if self.d < 2 or self.K_skill < 1 or self.k_skill < 1 or self.n_min < 0:
            raise InvalidInputError("d >= 2, K_skill >= 1, k_skill >= 1, n_min >= 0 required")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "HyperParams":
        return dataclasses.replace(self, **changes)

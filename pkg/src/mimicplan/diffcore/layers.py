"""Declarative MLP stacks over the autodiff core.

A network is a list of ``LayerSpec`` records; parameters live in a flat
name-to-array mapping so the same forward code runs on raw ndarrays (inference)
or on lifted ``Tensor`` parameters (training). Parameter arrays may carry an
extra leading ensemble axis; ``linear`` broadcasting handles the rest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as dc

__all__ = ["LayerSpec", "param_names", "init_params", "mlp_forward"]


@dataclass(frozen=True)
class LayerSpec:
    """One layer of an MLP stack.

    kind: "linear" | "layernorm" | "mish" | "simnorm" | "dropout".
    in_dim/out_dim describe the feature axis; for shape-preserving kinds they
    must match. ``arg`` is the group size for simnorm and the drop probability
    for dropout.
    """

    kind: str
    in_dim: int
    out_dim: int
    arg: float = 0.0

    def __post_init__(self):
        if self.kind not in ("linear", "layernorm", "mish", "simnorm", "dropout"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be positive")
        if self.kind != "linear" and self.in_dim != self.out_dim:
            raise ValueError(f"{self.kind} must preserve the feature dim")
        if self.kind == "simnorm":
            group = int(self.arg)
            if group <= 0 or self.out_dim % group != 0:
                raise ValueError(f"group {self.arg} does not divide dim {self.out_dim}")
        if self.kind == "dropout" and not 0.0 <= self.arg < 1.0:
            raise ValueError(f"dropout prob {self.arg} outside [0, 1)")


def _validate_chain(specs):
    for prev, cur in zip(specs, specs[1:]):
        if prev.out_dim != cur.in_dim:
            raise ValueError(
                f"layer chain mismatch: {prev.kind}({prev.out_dim}) feeds {cur.kind}({cur.in_dim})"
            )


def param_names(specs, prefix):
    """Flat parameter keys for a spec list, in declaration order."""
    _validate_chain(specs)
    names = []
    for i, spec in enumerate(specs):
        if spec.kind == "linear":
            names += [f"{prefix}.{i}.w", f"{prefix}.{i}.b"]
        elif spec.kind == "layernorm":
            names += [f"{prefix}.{i}.gain", f"{prefix}.{i}.bias"]
    return names


def init_params(specs, prefix, rng, ensemble=None, scale=0.02):
    """Initial parameter arrays for a spec list.

    Linear weights are truncated-normal (std ``scale``, clipped at two
    standard deviations), biases zero; layernorm gains one, biases zero.
    ``ensemble`` prepends a head axis to every array.
    """
    _validate_chain(specs)
    lead = () if ensemble is None else (ensemble,)
    params = {}
    for i, spec in enumerate(specs):
        if spec.kind == "linear":
            w = rng.standard_normal(lead + (spec.in_dim, spec.out_dim)) * scale
            np.clip(w, -2.0 * scale, 2.0 * scale, out=w)
            params[f"{prefix}.{i}.w"] = w
            params[f"{prefix}.{i}.b"] = np.zeros(lead + (1, spec.out_dim))
        elif spec.kind == "layernorm":
            params[f"{prefix}.{i}.gain"] = np.ones(lead + (1, spec.out_dim))
            params[f"{prefix}.{i}.bias"] = np.zeros(lead + (1, spec.out_dim))
    return params


def mlp_forward(specs, prefix, pmap, x, train=False, rng=None):
    """Run ``x`` through the stack, reading parameters from ``pmap``.

    Dropout draws its mask from ``rng`` and is active only when ``train`` is
    set; otherwise the layer is the identity (no rng consumed).
    """
    h = x
    for i, spec in enumerate(specs):
        if spec.kind == "linear":
            h = dc.linear(h, pmap[f"{prefix}.{i}.w"], pmap[f"{prefix}.{i}.b"])
        elif spec.kind == "layernorm":
            h = dc.layernorm(h, pmap[f"{prefix}.{i}.gain"], pmap[f"{prefix}.{i}.bias"])
        elif spec.kind == "mish":
            h = dc.mish(h)
        elif spec.kind == "simnorm":
            h = dc.simnorm(h, int(spec.arg))
        elif spec.kind == "dropout":
            if train and spec.arg > 0.0:
                if rng is None:
                    raise ValueError("dropout in train mode needs an rng")
                keep = 1.0 - spec.arg
                mask = (rng.random(dc._shape(h)) < keep) / keep
                h = dc.mul(h, mask)
    return h

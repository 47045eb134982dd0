"""Adam over named parameter groups, and warm-up densification of the 3D set."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import Gaussian3DSet, quaternion_to_rotation

LOG_SCALE_RANGE = (-12.0, 6.0)


@dataclass
class AdamState:
    lrs: dict[str, float]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lrs: dict[str, float]):
        st = cls(lrs=dict(lrs))
        for name in lrs:
            st.m[name] = np.zeros_like(getattr(params, name))
            st.v[name] = np.zeros_like(getattr(params, name))
        return st

    def copy(self):
        return AdamState(dict(self.lrs), {k: v.copy() for k, v in self.m.items()},
                         {k: v.copy() for k, v in self.v.items()}, self.step, self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, params, grads: dict[str, np.ndarray], rows=None):
    """One bias-corrected Adam update, in place on ``params`` attributes; returns ``params``.

    ``rows`` (bool mask or index array) restricts the update -- moments included --
    to those rows, so gated-out parameters do not drift on stale momentum.
    Afterwards quaternions are renormalized, log-scales clamped and colors kept in [0,1].
    """
    for name, g in grads.items():
        if name not in state.lrs:
            continue
        bad = ~np.isfinite(g)
        if bad.any():
            where = np.argwhere(bad)[0]
            raise FloatingPointError(f"non-finite gradient in group '{name}' at index {tuple(int(i) for i in where)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, lr in state.lrs.items():
        if name not in grads:
            continue
        p = getattr(params, name)
        g = grads[name]
        m, v = state.m[name], state.v[name]
        if rows is None:
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        else:
            r = rows
            m[r] = b1 * m[r] + (1 - b1) * g[r]
            v[r] = b2 * v[r] + (1 - b2) * g[r] * g[r]
            p[r] -= lr * (m[r] / bc1) / (np.sqrt(v[r] / bc2) + state.eps)
    _hygiene(params)
    return params


def _hygiene(params):
    if hasattr(params, "rotations") and len(params.rotations):
        params.rotations /= np.linalg.norm(params.rotations, axis=1, keepdims=True)
    if hasattr(params, "log_scales"):
        np.clip(params.log_scales, *LOG_SCALE_RANGE, out=params.log_scales)
    if hasattr(params, "colors"):
        np.clip(params.colors, 0.0, 1.0, out=params.colors)


@dataclass
class DensifyStats:
    cloned: int = 0
    split: int = 0
    pruned: int = 0


def densify_and_prune(g3d: Gaussian3DSet, grad_accum, denom, state: AdamState, *, grad_threshold: float,
                      scale_threshold: float, prune_opacity: float, rng: np.random.Generator,
                      split_divisor: float = 1.6):
    """Clone small / split large high-gradient Gaussians, then prune transparent ones.

    ``grad_accum / denom`` is the mean screen-space position-gradient norm;
    ``scale_threshold`` is absolute (already multiplied by the scene extent).
    Returns ``(g3d, state, stats)``; moments of new rows are zero.
    """
    n = len(g3d)
    avg = np.where(denom > 0, grad_accum / np.maximum(denom, 1), 0.0)
    hot = avg > grad_threshold
    max_scale = np.max(g3d.scales, axis=1) if n else np.zeros(0)
    clone = hot & (max_scale <= scale_threshold)
    split = hot & (max_scale > scale_threshold)

    new_sets = [g3d.subset(~split), g3d.subset(clone)]
    split_idx = np.nonzero(split)[0]
    if len(split_idx):
        children = g3d.subset(np.repeat(split_idx, 2))
        R = quaternion_to_rotation(children.rotations)
        offsets = rng.normal(size=(len(children), 3)) * children.scales
        children.positions = children.positions + np.einsum("nij,nj->ni", R, offsets)
        children.log_scales = children.log_scales - np.log(split_divisor)
        new_sets.append(children)
    out = _concat(new_sets)

    n_new = len(out) - int((~split).sum())
    for name in state.m:
        pad = np.zeros((n_new,) + state.m[name].shape[1:])
        state.m[name] = np.concatenate([state.m[name][~split], pad])
        state.v[name] = np.concatenate([state.v[name][~split], pad])

    alive = out.opacities >= prune_opacity
    out = out.subset(alive)
    for name in state.m:
        state.m[name] = state.m[name][alive]
        state.v[name] = state.v[name][alive]
    stats = DensifyStats(cloned=int(clone.sum()), split=len(split_idx), pruned=int((~alive).sum()))
    return out, state, stats


def _concat(sets):
    return Gaussian3DSet(**{name: np.concatenate([getattr(s, name) for s in sets]) for name in Gaussian3DSet.PARAM_NAMES})

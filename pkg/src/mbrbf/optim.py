"""Parameter update rules: Adam and plain SGD.

Parameters and gradients travel as ``{name: float64 array}`` dicts, the same
naming scheme used by model checkpoints.  Frozen parameters are simply never
present in these dicts, so optimizer state cannot touch them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, FormatError, ShapeError
from .tensorio import read_tensor, write_tensor


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    hyper: AdamHyper
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def init_adam(params: dict[str, np.ndarray], hyper: AdamHyper | None = None) -> AdamState:
    hyper = hyper or AdamHyper()
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(a) for k, a in params.items()}
    return AdamState(hyper=hyper, m=m, v=v)


def _check_grads(params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ShapeError(f"params and grads disagree on keys: {sorted(missing)}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}; update rejected")


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> dict[str, np.ndarray]:
    """One Adam update; returns new parameters and advances ``state``.

    m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2, bias-corrected, then
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).  A non-finite
    gradient rejects the whole update and leaves ``state`` untouched.
    """
    _check_grads(params, grads)
    h = state.hyper
    state.t += 1
    corr1 = 1.0 - h.beta1**state.t
    corr2 = 1.0 - h.beta2**state.t
    out = {}
    for name, theta in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * np.square(g)
        m_hat = m / corr1
        v_hat = v / corr2
        out[name] = theta - h.lr * m_hat / (np.sqrt(v_hat) + h.eps)
    return out


def sgd_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
) -> dict[str, np.ndarray]:
    """Plain gradient step theta <- theta - lr * g."""
    _check_grads(params, grads)
    return {name: theta - lr * grads[name] for name, theta in params.items()}


def save_adam_state(state: AdamState, out_dir) -> None:
    """Serialize moments as ``.mbrt`` files plus a flat text record."""
    out_dir = Path(out_dir)
    for sub, moments in (("m", state.m), ("v", state.v)):
        d = out_dir / sub
        d.mkdir(parents=True, exist_ok=True)
        for name, arr in moments.items():
            write_tensor(np.atleast_1d(arr), d / f"{name}.mbrt")
    h = state.hyper
    lines = [
        f"t = {state.t}",
        f"lr = {h.lr!r}",
        f"beta1 = {h.beta1!r}",
        f"beta2 = {h.beta2!r}",
        f"eps = {h.eps!r}",
        "names = " + ",".join(sorted(state.m)),
        "shapes = " + ";".join("x".join(str(d) for d in state.m[k].shape) for k in sorted(state.m)),
    ]
    (out_dir / "state.txt").write_text("\n".join(lines) + "\n")


def load_adam_state(in_dir) -> AdamState:
    in_dir = Path(in_dir)
    path = in_dir / "state.txt"
    if not path.exists():
        raise FormatError(f"{in_dir}: missing state.txt")
    fields = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    hyper = AdamHyper(
        lr=float(fields["lr"]),
        beta1=float(fields["beta1"]),
        beta2=float(fields["beta2"]),
        eps=float(fields["eps"]),
    )
    names = [n for n in fields.get("names", "").split(",") if n]
    shapes = [s for s in fields.get("shapes", "").split(";") if s]
    state = AdamState(hyper=hyper, t=int(fields["t"]))
    for name, shape_txt in zip(names, shapes):
        shape = tuple(int(d) for d in shape_txt.split("x"))
        for sub, moments in (("m", state.m), ("v", state.v)):
            arr = read_tensor(in_dir / sub / f"{name}.mbrt")
            moments[name] = arr.reshape(shape)
    return state

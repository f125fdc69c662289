"""Projected Adam with a tangent-plane update for unit normals."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, NumericalError
from .gradients import PARAM_CLASSES, tangent_frame

STAGES = ("illumination", "svbrdf", "joint")
DEFAULT_ITERATIONS = {"illumination": 2000, "svbrdf": 5000, "joint": 2000}


@dataclass
class FitConfig:
    stage: str = "svbrdf"
    learning_rate: float = 2e-4
    iterations: int = None
    smoothness_weight: float = 0.01
    halve_at: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.iterations is None:
            self.iterations = DEFAULT_ITERATIONS[self.stage]
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ContractError(f"iterations must be a non-negative integer, got {self.iterations}")
        self.iterations = int(self.iterations)
        if not self.learning_rate > 0:
            raise ContractError(f"learning rate must be positive, got {self.learning_rate}")
        if self.smoothness_weight < 0:
            raise ContractError("smoothness weight must be non-negative")
        if not 0.0 <= self.halve_at <= 1.0:
            raise ContractError("halve_at is a fraction of the iteration budget")

    def rate(self, step):
        """Learning rate at zero-based ``step``; halved once the budget is ``halve_at`` spent."""
        if self.iterations and step >= int(self.halve_at * self.iterations):
            return 0.5 * self.learning_rate
        return self.learning_rate


@dataclass
class FitResult:
    params: object
    final: object
    losses: list = field(default_factory=list)
    best_loss: float = float("inf")
    best_step: int = -1

    @property
    def best_so_far(self):
        return list(np.minimum.accumulate(self.losses)) if self.losses else []


def _check_finite(step, loss, grads, active):
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {step}", step=step, parameter="loss")
    for name in active:
        if not np.all(np.isfinite(getattr(grads, name))):
            raise NumericalError(f"non-finite gradient for {name} at step {step}", step=step,
                                 parameter=name)


def adam_fit(initial, grad_fn, config: FitConfig, active=PARAM_CLASSES) -> FitResult:
    """Minimise ``grad_fn`` with Adam, projecting after every step.

    ``grad_fn(params) -> (loss, grads)`` where ``grads`` has the same
    attributes as ``params``. Normals move in a 2-D tangent frame of the
    current normal and are re-normalised. The returned ``params`` is the
    best iterate seen (losses are recorded before each step and once at the
    end), ``final`` the last one.
    """
    active = tuple(a for a in PARAM_CLASSES if a in active)
    params = initial.copy()
    if config.iterations == 0:
        return FitResult(params, params.copy())
    moments = {}
    for name in active:
        shape = getattr(params, name).shape
        if name == "normals":
            shape = shape[:-1] + (2,)
        moments[name] = (np.zeros(shape), np.zeros(shape))
    b1, b2 = config.beta1, config.beta2
    result = FitResult(params.copy(), None)

    def record(step, loss):
        result.losses.append(float(loss))
        if loss < result.best_loss:
            result.best_loss = float(loss)
            result.best_step = step
            result.params = params.copy()

    for step in range(config.iterations):
        loss, grads = grad_fn(params)
        _check_finite(step, loss, grads, active)
        record(step, loss)
        lr = config.rate(step)
        c1 = 1.0 - b1 ** (step + 1)
        c2 = 1.0 - b2 ** (step + 1)
        for name in active:
            g = getattr(grads, name)
            value = getattr(params, name)
            if name == "normals":
                shp = value.shape
                n = value.reshape(-1, 3)
                t1, t2 = tangent_frame(n)
                gf = g.reshape(-1, 3)
                g = np.stack([np.sum(gf * t1, axis=1), np.sum(gf * t2, axis=1)], axis=-1).reshape(shp[:-1] + (2,))
            m, v = moments[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            delta = lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
            if name == "normals":
                d = delta.reshape(-1, 2)
                moved = n - d[:, :1] * t1 - d[:, 1:] * t2
                value[...] = moved.reshape(value.shape)
            else:
                value -= delta
        params.project()
    loss, grads = grad_fn(params)
    _check_finite(config.iterations, loss, grads, active)
    record(config.iterations, loss)
    result.final = params
    return result

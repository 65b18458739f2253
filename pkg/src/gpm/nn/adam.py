"""Bias-corrected Adam over flat parameter vectors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gpm.errors import ConfigurationError


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    first_moment: np.ndarray = field(default=None)
    second_moment: np.ndarray = field(default=None)
    step_count: int = 0

    @classmethod
    def for_params(cls, n: int, lr: float, betas=(0.9, 0.999), epsilon=1e-8):
        return cls(lr=lr, beta1=betas[0], beta2=betas[1], epsilon=epsilon,
                   first_moment=np.zeros(n), second_moment=np.zeros(n))


def adam_step(state: AdamState, params, grads: np.ndarray, ascent: bool = False):
    """One in-place Adam update; ``ascent`` negates the step direction.

    ``params`` is any object with a flat ``values`` array (NetworkParams)
    or a bare ndarray updated in place.
    """
    values = params.values if hasattr(params, "values") else params
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != values.shape:
        raise ConfigurationError(
            f"gradient shape {grads.shape} does not match parameters {values.shape}")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    state.first_moment *= b1
    state.first_moment += (1.0 - b1) * grads
    state.second_moment *= b2
    state.second_moment += (1.0 - b2) * grads * grads
    m_hat = state.first_moment / (1.0 - b1 ** state.step_count)
    v_hat = state.second_moment / (1.0 - b2 ** state.step_count)
    step = state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    if ascent:
        values += step
    else:
        values -= step
    return params, state

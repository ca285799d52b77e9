import numpy as np

from neural.state import ModelState


def adamw_step(state: ModelState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0) -> ModelState:
    """
    One AdamW update of every trainable param, in place.

    Decoupled decay (theta <- theta - lr*wd*theta) is applied before the
    bias-corrected Adam step. Params that received no gradient are treated
    as having a zero gradient.
    """
    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t

    for param in state.trainable():
        theta = param.value.data
        grad = param.grad.astype(theta.dtype, copy=False)
        if param.name not in state.opt_moments:
            state.opt_moments[param.name] = (np.zeros_like(theta), np.zeros_like(theta))
        m, v = state.opt_moments[param.name]

        if weight_decay:
            theta -= lr * weight_decay * theta
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        theta -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state

import numpy as np

from semantic_smoothing.errors import StructuralError
from semantic_smoothing.models.state import AdamHyper, AdamState, ParameterSet


def adam_step(
    params: ParameterSet,
    grads: dict[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
) -> tuple[ParameterSet, AdamState]:
    """
    One bias-corrected Adam update of every trainable tensor.

    Tensors without a gradient entry (frozen ones) are left untouched. Inputs
    are not mutated.

    Raises:
        StructuralError: if a gradient is unknown or its shape differs from its tensor.
    """
    trainable = params.trainable()
    unknown = set(grads) - set(trainable)
    if unknown:
        raise StructuralError(f"gradients for unknown or frozen parameters: {sorted(unknown)}")

    step = state.step + 1
    first_moment = dict(state.first_moment)
    second_moment = dict(state.second_moment)
    correction1 = 1.0 - hyper.beta1**step
    correction2 = 1.0 - hyper.beta2**step

    updates = {}
    for name, value in trainable.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != value.shape:
            raise StructuralError(f"gradient for {name} has shape {grad.shape}, parameter has {value.shape}")
        m = first_moment.get(name, np.zeros_like(value))
        v = second_moment.get(name, np.zeros_like(value))
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * grad
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * grad * grad
        first_moment[name] = m
        second_moment[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        updates[name] = value - hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.eps)

    new_state = AdamState(step=step, first_moment=first_moment, second_moment=second_moment)
    return params.replace(updates), new_state

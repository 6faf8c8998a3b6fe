"""Adam optimizer, cosine-annealed learning rate, and the flow-freeze rule."""

import math
import warnings

import numpy as np

from .errors import ConfigError


def cosine_lr(step, total_steps, lr_base):
    """Half-cosine decay from lr_base at step 0 to exactly 0 at total_steps."""
    if total_steps <= 0:
        raise ConfigError("cosine_lr: total_steps must be positive")
    if step < 0:
        raise ConfigError("cosine_lr: step must be non-negative")
    if step > total_steps:
        warnings.warn(f"cosine_lr: step {step} beyond schedule end "
                      f"{total_steps}, clamping lr to 0", stacklevel=2)
        return 0.0
    return lr_base * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def flow_frozen(step, freeze_steps):
    """True while the flow network must not be updated (initial warm-up)."""
    return step < freeze_steps


class ParamGroup:
    """Named parameters sharing one base learning rate."""

    def __init__(self, name, params, lr_base):
        self.name = name
        self.params = dict(params)  # name -> Tensor, insertion-ordered
        self.lr_base = lr_base


class Adam:
    """Standard Adam with bias correction over one or more parameter groups.

    Moments live per parameter in the parameter's dtype; the update is
    deterministic and purely in-place on each parameter's ``data``.
    """

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = list(groups)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {}
        self._v = {}
        for group in self.groups:
            for name, p in group.params.items():
                self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for group in self.groups:
            for p in group.params.values():
                p.grad = None

    def step(self, grads, lr_now, skip_groups=()):
        """Apply one update.

        Args:
            grads: mapping param name -> gradient array, keyed exactly like
                the parameters; a missing key raises.
            lr_now: mapping group name -> current learning rate.
            skip_groups: group names left untouched this step (their moments
                and parameters do not change).
        """
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for group in self.groups:
            if group.name in skip_groups:
                continue
            try:
                lr = lr_now[group.name]
            except (KeyError, TypeError):
                raise ConfigError(f"adam: no learning rate for group '{group.name}'")
            for name, p in group.params.items():
                if name not in grads:
                    raise KeyError(f"adam: missing gradient for parameter '{name}'")
                g = grads[name]
                m = self._m[name]
                v = self._v[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                m_hat = m / bc1
                v_hat = v / bc2
                p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def collect_grads(groups, skip_groups=()):
    """Gather ``.grad`` arrays from parameter groups into a flat dict.

    Parameters with no accumulated gradient contribute zeros, which keeps the
    optimizer contract (grads keyed identically to parameters) satisfied even
    when a branch of the network did not run.
    """
    grads = {}
    for group in groups:
        if group.name in skip_groups:
            continue
        for name, p in group.params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return grads

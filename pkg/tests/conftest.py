import numpy as np

from lmfnet import tensor as T

# Gradients that vanish identically: a bias added uniformly across channels
# right before a channel layer norm, and a key bias (softmax shift invariance).
STRUCTURAL_ZERO = ("reproject.linear.bias", "mfsaf.k.bias", "mfsaf.out.bias")


def jitter(module, seed=5, std=0.3):
    """Move parameters off their init so no gradient is accidentally tiny."""
    rng = np.random.default_rng(seed)
    for p in module.parameters():
        p.data = p.data + rng.normal(0, std, size=p.shape)
    return module


def checked_grad_error(f, module, extra=(), max_entries=10):
    """Max relative error over non-structural parameters; structural ones must be ~0 analytically."""
    named = dict(module.named_parameters())
    params = list(extra) + list(named.values())
    errs = T.grad_errors(f, params, max_entries=max_entries)
    worst = 0.0
    for name, err in errs.items():
        if name.endswith(STRUCTURAL_ZERO):
            g = [p for n, p in named.items() if n == name][0].grad
            assert g is None or np.abs(g).max() < 1e-10, name
            continue
        worst = max(worst, err)
    return worst

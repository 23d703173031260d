"""Shared test utilities: finite-difference gradient checking and stubs."""

import numpy as np
import torch


def analytic_grads(loss_fn, params):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [g if g is not None else torch.zeros_like(p)
            for g, p in zip(grads, params)]


def finite_diff_grads(loss_fn, params, step=1e-5):
    """Central finite differences of loss_fn w.r.t. every parameter entry.

    loss_fn must be deterministic (reseed any sampling inside it).
    """
    out = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            out.append(g)
    return out


def max_rel_error(analytic, fd, atol=1e-8):
    """Worst relative disagreement.

    Entries whose absolute difference sits below the finite-difference noise
    floor `atol` (roundoff eps*|loss|/step plus O(step^2) truncation) count
    as exact; everything else is judged relatively.
    """
    worst = 0.0
    for a, f in zip(analytic, fd):
        a = a.detach().numpy().ravel()
        f = f.detach().numpy().ravel()
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-300)
        rel = np.abs(a - f) / denom
        rel[np.abs(a - f) < atol] = 0.0
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst


def check_gradients(loss_fn, params, step=1e-5, tol=1e-4, atol=1e-8):
    err = max_rel_error(analytic_grads(loss_fn, params),
                        finite_diff_grads(loss_fn, params, step=step), atol=atol)
    assert err < tol, f"max relative gradient error {err:.3e} >= {tol}"
    return err

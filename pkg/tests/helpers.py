"""Shared oracles for the test suite."""
import torch

from silt.imaging import from_network
from silt.training import Trainer


def fd_check_params(objective, params, step=1e-3, per_tensor=8, seed=0, floor=1e-3):
    """Worst relative error between autograd and central differences.

    Checks up to ``per_tensor`` randomly chosen entries of every parameter
    tensor; the error is measured on the sampled sub-vector as
    ``|g_auto - g_fd| / max(|g_auto|, |g_fd|, floor)`` in the 2-norm. The
    floor keeps analytically-zero gradients (biases feeding an instance norm)
    from being judged on roundoff alone.
    """
    for p in params:
        p.grad = None
    objective().backward()
    rng = torch.Generator().manual_seed(seed)
    worst = 0.0
    for p in params:
        n = p.numel()
        idx = torch.randperm(n, generator=rng)[:per_tensor]
        auto = p.grad.reshape(-1)[idx].clone()
        fd = torch.empty_like(auto)
        flat = p.data.view(-1)
        with torch.no_grad():
            for j, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = objective().item()
                flat[i] = orig - step
                lo = objective().item()
                flat[i] = orig
                fd[j] = (hi - lo) / (2 * step)
        scale = max(auto.norm().item(), fd.norm().item(), floor)
        worst = max(worst, (auto - fd).norm().item() / scale)
    return worst


def fd_check_input(fn, x, step=1e-3, piecewise=False):
    """Relative 2-norm error of d fn(x) / dx against central differences.

    ``piecewise=True`` is for piecewise-linear objectives (L1, ReLU). A step
    that crosses a kink makes the central difference an average of two
    slopes, so each entry's deviation is discounted by half the gap between
    its forward and backward differences. In linear regions that gap is
    zero and the check is the plain one.
    """
    x = x.detach().clone().requires_grad_(True)
    f0 = fn(x)
    f0.backward()
    f0 = f0.item()
    auto = x.grad.reshape(-1).clone()
    fd = torch.empty_like(auto)
    slack = torch.zeros_like(auto)
    flat = x.detach().view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = fn(x).item()
            flat[i] = orig - step
            lo = fn(x).item()
            flat[i] = orig
            fd[i] = (hi - lo) / (2 * step)
            if piecewise:
                slack[i] = abs((hi - f0) - (f0 - lo)) / (2 * step)
    err = ((auto - fd).abs() - slack).clamp(min=0)
    return err.norm().item() / max(auto.norm().item(), fd.norm().item(), 1e-12)


def fingerprints(t):
    t = t.detach()
    if t.ndim != 4:
        return set()
    return {item.contiguous().numpy().tobytes() for item in t.float()}


def run_style_audit(train, steps, cfg):
    """Count style-image sightings per loss term over ``steps`` iterations.

    Every tensor handed to a loss is checked against the style references
    both by identity (style batches are kept alive, so addresses stay
    unique) and by value in the network and [0, 1] domains.
    """
    t = Trainer(cfg, train)
    style = torch.cat([t.store.tensor(p) for p in train.style_references().paths])
    style_values = fingerprints(style) | fingerprints(from_network(style))
    seen_batches, sightings = [], {}

    def hook(term, tensors):
        if term == "style_batch":
            seen_batches.append(tensors[0])
            return
        ptrs = {b.data_ptr() for b in seen_batches}
        for x in tensors:
            if x.data_ptr() in ptrs or fingerprints(x) & style_values:
                sightings[term] = sightings.get(term, 0) + 1

    t.loss_hooks.append(hook)
    for _ in range(steps):
        t.step()
    pair_paths = {str(p) for it in range(steps) for pair in t.batch_for(it) for p in (pair.path_a, pair.path_b)}
    leaked = pair_paths & {str(p) for p in train.style_references().paths}
    return sightings, leaked

"""Central finite differences against autograd, per parameter tensor."""

import torch


def numeric_grad(loss_fn, param: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    out = torch.zeros_like(param)
    flat = param.data.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = loss_fn().item()
        flat[i] = old - h
        down = loss_fn().item()
        flat[i] = old
        out.view(-1)[i] = (up - down) / (2 * h)
    return out


def relative_errors(loss_fn, params: dict, h: float = 1e-5) -> dict:
    """max|analytic - numeric| / max|numeric| for every named tensor."""
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    errors = {}
    with torch.no_grad():
        for name, p in params.items():
            analytic = p.grad.clone()
            numeric = numeric_grad(loss_fn, p, h)
            scale = max(numeric.abs().max().item(), analytic.abs().max().item(), 1e-10)
            errors[name] = (analytic - numeric).abs().max().item() / scale
    return errors

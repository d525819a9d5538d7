import numpy as np
import torch


def central_diff(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``f()`` w.r.t. ``x`` (perturbed in place, restored)."""
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def write_pair(root, split, sid, image, mask):
    from foodseg.dataset import write_sample
    write_sample(root, split, sid, image, mask)


def blank_image(h, w, value=0.5):
    return np.full((h, w, 3), value, dtype=np.float32)

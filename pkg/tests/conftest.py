import numpy as np

from ebmkit.tensor import Tensor


def central_difference(make_loss, tensor, h=1e-5):
    """Finite-difference gradient of a scalar loss w.r.t. one tensor.

    ``make_loss`` must rebuild the loss from scratch (fresh graph) so that
    perturbing ``tensor.data`` in place is observed. Returns an array shaped
    like the tensor.
    """
    flat = tensor.data.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = float(make_loss().data)
        flat[i] = keep - h
        down = float(make_loss().data)
        flat[i] = keep
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(tensor.data.shape)


def assert_grad_close(make_loss, tensor, rel_tol=1e-4, h=1e-5):
    """Backward once and compare every component against central differences."""
    tensor.zero_grad()
    loss = make_loss()
    loss.backward()
    numeric = central_difference(make_loss, tensor, h=h)
    analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
    scale = np.maximum(np.abs(numeric), np.maximum(np.abs(analytic), 1e-8))
    rel = np.abs(analytic - numeric) / scale
    assert rel.max() < rel_tol, f"gradient mismatch, worst rel err {rel.max():.3e}"


def tensor_of(values, requires_grad=False):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)

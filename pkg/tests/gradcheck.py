"""Central finite-difference gradient check over every U-Net parameter.

Perturbing one weight of a convolution by ``h`` changes that layer's output by
an exactly known tensor (the layer is linear in its weights).  Each batch entry
carries a different perturbation, injected with a forward hook, so thousands
of finite differences run as one ordinary batched forward pass.  Layers
before the perturbed one run on a single entry.
"""

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def _conv_delta(module: nn.Conv2d, inp: torch.Tensor, name: str, idx: torch.Tensor, h: float, out_shape):
    k = idx.numel()
    delta = torch.zeros((k,) + tuple(out_shape[1:]), dtype=inp.dtype)
    rows = torch.arange(k)
    if name == "bias":
        delta[rows, idx] = h
        return delta
    cout, cin, kh, kw = module.weight.shape
    co, rem = idx // (cin * kh * kw), idx % (cin * kh * kw)
    ci, rem = rem // (kh * kw), rem % (kh * kw)
    ky, kx = rem // kw, rem % kw
    p = module.padding[0]
    padded = F.pad(inp[0], (p, p, p, p))
    H, W = out_shape[2], out_shape[3]
    # windows[ci, ky, kx] is the input patch a weight at (ci, ky, kx) multiplies
    windows = torch.stack([torch.stack([padded[:, a:a + H, b:b + W] for b in range(kw)], 1)
                           for a in range(kh)], 1)
    delta[rows, co] = h * windows[ci, ky, kx]
    return delta


def _tconv_delta(module: nn.ConvTranspose2d, inp: torch.Tensor, name: str, idx: torch.Tensor, h: float,
                 out_shape):
    k = idx.numel()
    delta = torch.zeros((k,) + tuple(out_shape[1:]), dtype=inp.dtype)
    rows = torch.arange(k)
    if name == "bias":
        delta[rows, idx] = h
        return delta
    if module.kernel_size != (2, 2) or module.padding != (0, 0):
        raise NotImplementedError("only 2x2 stride-2 transposed convolutions")
    cin, cout, kh, kw = module.weight.shape
    ci, rem = idx // (cout * kh * kw), idx % (cout * kh * kw)
    co, rem = rem // (kh * kw), rem % (kh * kw)
    ky, kx = rem // kw, rem % kw
    H, W = out_shape[2], out_shape[3]
    placed = torch.zeros((cin, kh, kw, H, W), dtype=inp.dtype)
    for a in range(kh):
        for b in range(kw):
            placed[:, a, b, a::2, b::2] = inp[0]
    delta[rows, co] = h * placed[ci, ky, kx]
    return delta


def _forward(net, x):
    """``UNet.forward`` with skips broadcast along the batch.

    Layers before the injected one run on a single entry; the hook widens the
    batch, so earlier skip tensors are expanded when concatenated.
    """
    skips = []
    for j, block in enumerate(net.encoder):
        x = block(x)
        if j < len(net.encoder) - 1:
            skips.append(x)
            x = net.pool(x)
    for up, block in zip(net.upsamplers, net.decoder):
        x = up(x)
        skip = skips.pop()
        if skip.shape[0] != x.shape[0]:
            skip = skip.expand(x.shape[0], *skip.shape[1:])
        x = block(torch.cat([x, skip], dim=1))
    weight = net.head.weight.reshape(1, -1, 1, 1)
    return torch.sum(x * weight, dim=1, keepdim=True) + net.head.bias.reshape(1, 1, 1, 1)


def finite_difference_check(net: nn.Module, x: torch.Tensor, y: torch.Tensor, h: float = 1e-6,
                            chunk: int = 64, floor: float = 1e-6) -> tuple[float, int]:
    """Return ``(max relative error, number of parameters checked)``.

    ``net`` must be float64 and in eval mode; ``x`` holds a single entry.  The
    relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``:
    gradients below ``floor`` sit at the finite-difference roundoff level.
    """
    loss = lambda out: torch.mean((out - y) ** 2, dim=(1, 2, 3))  # noqa: E731
    with torch.no_grad():
        if not torch.equal(_forward(net, x), net(x)):
            raise AssertionError("helper forward does not reproduce the model")
    net.zero_grad()
    loss(net(x)).sum().backward()
    worst, checked = 0.0, 0
    convs = [m for m in net.modules() if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) and m is not net.head]
    for module in convs:
        for name, param in module.named_parameters(recurse=False):
            grad = param.grad.reshape(-1).clone()
            n = grad.numel()
            for start in range(0, n, chunk):
                idx = torch.arange(start, min(start + chunk, n))
                state = {}

                def hook(mod, inputs, output, sign=1.0):
                    fn = _tconv_delta if isinstance(mod, nn.ConvTranspose2d) else _conv_delta
                    if "delta" not in state:
                        state["delta"] = fn(mod, inputs[0], name, idx, h, output.shape)
                    return output + state["sign"] * state["delta"]

                handle = module.register_forward_hook(hook)
                try:
                    with torch.no_grad():
                        state["sign"] = 1.0
                        plus = loss(_forward(net, x))
                        state["sign"] = -1.0
                        minus = loss(_forward(net, x))
                finally:
                    handle.remove()
                numeric = (plus - minus) / (2 * h)
                analytic = grad[idx]
                denom = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=floor)
                worst = max(worst, float(torch.max((analytic - numeric).abs() / denom)))
                checked += idx.numel()
    # the 1x1 head is a plain channel sum; perturb its few scalars directly
    with torch.no_grad():
        for param in net.head.parameters():
            flat = param.view(-1)
            grad = param.grad.reshape(-1)
            for i in range(flat.numel()):
                v = flat[i].item()
                flat[i] = v + h
                plus = loss(net(x)).item()
                flat[i] = v - h
                minus = loss(net(x)).item()
                flat[i] = v
                numeric = (plus - minus) / (2 * h)
                a = grad[i].item()
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
                checked += 1
    total = sum(p.numel() for p in net.parameters())
    if checked != total:
        raise AssertionError(f"checked {checked} of {total} parameters")
    return worst, checked


def tiny_double_unet(base_filters: int = 4, seed: int = 0):
    from liver4d import model

    cfg = model.UNetConfig(input_shape=(16, 16, 3), base_filters=base_filters, dropout_rate=0.0, seed=seed)
    net = model.build(cfg).double().eval().to(memory_format=torch.contiguous_format)
    rng = np.random.default_rng(seed)
    x = torch.tensor(rng.normal(size=(1, 3, 16, 16)))
    y = torch.tensor(rng.normal(size=(1, 1, 16, 16)))
    return net, x, y

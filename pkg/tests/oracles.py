"""Slow, independent reference implementations used as test oracles."""
import math

import torch


def loop_attention(block, tokens):
    """Attention map of ``block`` on ``tokens [T, D]`` with explicit loops over head, query and key."""
    x = tokens.detach()
    if not isinstance(block.norm1, torch.nn.Identity):
        ln = block.norm1
        mean = x.mean(-1, keepdim=True)
        var = ((x - mean) ** 2).mean(-1, keepdim=True)
        x = ((x - mean) / torch.sqrt(var + ln.eps) * ln.weight + ln.bias).detach()
    attn = block.attn
    T, D = x.shape
    H, d = attn.num_heads, attn.head_dim
    q = (x @ attn.q.weight.T + attn.q.bias).detach()
    k = (x @ attn.k.weight.T + attn.k.bias).detach()
    bias = attn.rel_pos().detach() if attn.rel_pos is not None else None
    out = torch.zeros(H, T, T, dtype=x.dtype)
    for h in range(H):
        for i in range(T):
            logits = []
            for j in range(T):
                s = 0.0
                for c in range(h * d, (h + 1) * d):
                    s += float(q[i, c]) * float(k[j, c])
                s /= math.sqrt(d)
                if bias is not None:
                    s += float(bias[h, i, j])
                logits.append(s)
            m = max(logits)
            exps = [math.exp(v - m) for v in logits]
            z = sum(exps)
            for j in range(T):
                out[h, i, j] = exps[j] / z
    return out


def kl_rows(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def js_rows(p, q):
    m = [(a + b) / 2 for a, b in zip(p, q)]
    return 0.5 * kl_rows(p, m) + 0.5 * kl_rows(q, m)


def _keys(t, a=-0.75):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def cubic_resize_1d(values, dst):
    """Keys cubic convolution with half-pixel centres and clamped borders."""
    src = len(values)
    out = []
    for i in range(dst):
        x = (i + 0.5) * src / dst - 0.5
        base = math.floor(x)
        acc = 0.0
        for m in range(base - 1, base + 3):
            acc += values[min(max(m, 0), src - 1)] * _keys(x - m)
        out.append(acc)
    return out


def cubic_resize_2d(plane, dst):
    rows = [cubic_resize_1d(list(r), dst) for r in plane]
    cols = [cubic_resize_1d([rows[y][x] for y in range(len(rows))], dst) for x in range(dst)]
    return [[cols[x][y] for x in range(dst)] for y in range(dst)]


def central_difference(f, x, h=1e-3):
    """Numerical gradient of scalar ``f`` at float64 tensor ``x``."""
    grad = torch.zeros_like(x)
    flat, g = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        keep = flat[i].item()
        flat[i] = keep + h
        up = f(x).item()
        flat[i] = keep - h
        down = f(x).item()
        flat[i] = keep
        g[i] = (up - down) / (2 * h)
    return grad


def check_logit_gradient(kind, instances=20, seed=0, tokens=4, heads=2):
    """Worst normwise relative error between autograd and central differences over random instances.

    The loss is differentiated w.r.t. the student's pre-softmax logits. For L1
    an instance is redrawn while any |s - t| is within 1e-2 of the kink.
    """
    from atl.transfer import attention_map_loss
    from atl.vit import AttentionTrace, TokenLayout

    gen = torch.Generator().manual_seed(seed)
    layout = TokenLayout(0, tokens)

    def loss_of(z, teacher):
        trace = AttentionTrace([z.softmax(-1)], layout, [z.log_softmax(-1)])
        return attention_map_loss(trace, [teacher], kind)[1]

    worst = 0.0
    done = 0
    while done < instances:
        z = torch.randn(1, heads, tokens, tokens, generator=gen, dtype=torch.float64) * 1.5
        teacher = (torch.randn(1, heads, tokens, tokens, generator=gen, dtype=torch.float64) * 1.5).softmax(-1)
        if kind == "L1" and (z.softmax(-1) - teacher).abs().min() < 1e-2:
            continue
        z.requires_grad_(True)
        (analytic,) = torch.autograd.grad(loss_of(z, teacher), z)
        with torch.no_grad():
            numeric = central_difference(lambda v: loss_of(v, teacher), z.detach().clone())
        err = (analytic - numeric).norm() / max(analytic.norm().item(), numeric.norm().item(), 1e-300)
        worst = max(worst, err.item())
        done += 1
    return worst

"""Shared test oracles and helpers.

The reference implementations here are deliberately structured differently
from the library code (bounds-checked indexing instead of padded arrays,
explicit python loops instead of vectorization) so they stay independent
of the paths they check.
"""

from __future__ import annotations

import numpy as np

from phantomnet.tensor import ConvAttrs, ConvParams, Tensor4, conv2d_fast, conv2d_naive


def ref_conv(
    x: np.ndarray,
    w: np.ndarray,
    stride: int,
    padding: int,
    groups: int,
    scale: np.ndarray,
    bias: np.ndarray,
) -> np.ndarray:
    """Textbook grouped convolution with bounds-checked indexing."""
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    opg = cout // groups
    y = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for b in range(n):
        for oc in range(cout):
            g = oc // opg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(cpg):
                        for u in range(kh):
                            ih = i * stride + u - padding
                            if ih < 0 or ih >= h:
                                continue
                            for v in range(kw):
                                iw = j * stride + v - padding
                                if iw < 0 or iw >= wd:
                                    continue
                                acc += float(x[b, g * cpg + ic, ih, iw]) * float(w[oc, ic, u, v])
                    y[b, oc, i, j] = float(scale[oc]) * acc + float(bias[oc])
    return y


def counting_conv(x: Tensor4, p: ConvParams, counter: list[int]) -> Tensor4:
    """Naive conv that counts every multiplication it executes."""
    a = p.attrs
    pad = a.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, _, hp, wp = xp.shape
    cout, cpg, kh, kw = p.weights.shape
    ho = (hp - kh) // a.stride + 1
    wo = (wp - kw) // a.stride + 1
    opg = cout // a.groups
    y = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for b in range(n):
        for oc in range(cout):
            g = oc // opg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(cpg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, g * cpg + ic, i * a.stride + u, j * a.stride + v] * float(
                                    p.weights[oc, ic, u, v]
                                )
                                counter[0] += 1
                    y[b, oc, i, j] = acc
    y = y.astype(np.float32) * p.scale[None, :, None, None] + p.bias[None, :, None, None]
    return Tensor4(y)


def max_rel_err(got: np.ndarray, want: np.ndarray) -> float:
    """Max elementwise |got - want| / max(|want|, 1)."""
    return float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1.0)))


def rand_conv_params(
    rng: np.random.Generator,
    in_channels: int,
    out_channels: int,
    kernel: int,
    stride: int,
    padding: int,
    groups: int,
) -> ConvParams:
    attrs = ConvAttrs(kernel, kernel, stride, padding, groups, out_channels)
    return ConvParams(
        attrs=attrs,
        weights=rng.uniform(-0.5, 0.5, (out_channels, in_channels // groups, kernel, kernel)).astype(
            np.float32
        ),
        scale=rng.uniform(0.5, 1.5, out_channels).astype(np.float32),
        bias=rng.uniform(-0.5, 0.5, out_channels).astype(np.float32),
    )


def rand_case(rng: np.random.Generator, category: str):
    """One random (input, params) pair for the oracle-equivalence sweep."""
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.choice([1, 2]))
    h = int(rng.integers(max(k, 4), 11))
    w = int(rng.integers(max(k, 4), 11))
    n = int(rng.integers(1, 3))
    if category == "dense":
        groups = 1
        cin = int(rng.integers(1, 7))
        cout = int(rng.integers(1, 9))
        padding = int(rng.integers(0, k // 2 + 1))
    elif category == "grouped":
        groups = int(rng.choice([2, 4]))
        cin = groups * int(rng.integers(1, 3))
        cout = groups * int(rng.integers(1, 3))
        padding = int(rng.integers(0, k // 2 + 1))
    elif category == "depthwise":
        cin = cout = groups = int(rng.integers(2, 9))
        padding = k // 2
    elif category == "pointwise":
        k, stride, padding, groups = 1, 1, 0, 1
        cin = int(rng.integers(1, 9))
        cout = int(rng.integers(1, 9))
    else:
        raise ValueError(category)
    x = Tensor4(rng.uniform(-0.5, 0.5, (n, cin, h, w)).astype(np.float32))
    p = rand_conv_params(rng, cin, cout, k, stride, padding, groups)
    return x, p


TINY_CONFIG = {
    "num_classes": 2,
    "input_size": 32,
    "layers": [
        {"index": 0, "from": -1, "kind": "Conv", "args": {"out_channels": 4, "kernel": 3, "stride": 2}},
        {"index": 1, "from": -1, "kind": "Conv", "args": {"out_channels": 4, "kernel": 3, "stride": 2}},
        {"index": 2, "from": -1, "kind": "Conv", "args": {"out_channels": 4, "kernel": 3, "stride": 2}},
        {"index": 3, "from": -1, "kind": "Conv", "args": {"out_channels": 8, "kernel": 3, "stride": 2}},
        {"index": 4, "from": -1, "kind": "Conv", "args": {"out_channels": 8, "kernel": 3, "stride": 2}},
        {"index": 5, "from": [2, 3, 4], "kind": "Detect", "args": {"reg_max": 2}},
    ],
}


def tiny_graph():
    import json

    from phantomnet.netgraph import parse_config

    return parse_config(json.dumps(TINY_CONFIG))


def oracle_sweep(n_cases: int = 112, seed: int = 7) -> float:
    """conv2d_fast vs conv2d_naive across randomized configs covering the
    dense, grouped, depthwise, and pointwise paths; returns the worst
    relative error seen."""
    rng = np.random.default_rng(seed)
    categories = ("dense", "grouped", "depthwise", "pointwise")
    worst = 0.0
    for i in range(n_cases):
        x, p = rand_case(rng, categories[i % len(categories)])
        want = conv2d_naive(x, p)
        got = conv2d_fast(x, p)
        assert got.shape == want.shape
        worst = max(worst, max_rel_err(got.data, want.data))
    return worst

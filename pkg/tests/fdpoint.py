"""Construct model states where a full-model finite-difference check is valid.

Central differences are only meaningful where the loss is smooth in the
parameters.  ReLU kinks and 2x2-max argmax flips break that, so the
evaluation point is built deliberately:

* encoder kernels are channel-routing deltas plus small noise, and the
  input carries one checkerboard per pooling scale, which keeps every
  pool window's top-2 gap large and stable under +-eps perturbations;
* decoder/bottleneck weights are ordinary random draws (nothing pooled
  depends on them);
* biases are lifted until every ReLU preactivation clears a margin;
* head weights are rescaled so logits stay unsaturated.

The achieved margins are returned so tests can assert them before
trusting the comparison.
"""

import numpy as np

from vegcat import autodiff as ad
from vegcat.unet import UNetConfig, build, forward


def relu_bias_names(depth):
    names = []
    for s in range(depth + 1):
        names += [f"enc{s}_conv1_b", f"enc{s}_conv2_b"]
    for s in reversed(range(depth)):
        names += [f"dec{s}_conv1_b", f"dec{s}_conv2_b"]
    return names


def capture_smoothness(model, x):
    """Forward pass recording ReLU preactivations and pool top-2 gaps."""
    relu_inputs, gaps = [], []
    orig_relu, orig_pool = ad.relu, ad.maxpool2

    def relu_rec(t):
        relu_inputs.append(t.values)
        return orig_relu(t)

    def pool_rec(t):
        c, h, w = t.values.shape
        win = t.values.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(-1, 4)
        s = np.sort(win, axis=1)
        gaps.append(float((s[:, 3] - s[:, 2]).min()))
        return orig_pool(t)

    ad.relu, ad.maxpool2 = relu_rec, pool_rec
    try:
        with ad.no_grad():
            forward(model, ad.Tensor(x))
    finally:
        ad.relu, ad.maxpool2 = orig_relu, orig_pool
    return relu_inputs, gaps


def checkerboard(n, half_period, amplitudes):
    yy, xx = np.mgrid[0:n, 0:n]
    phase = ((yy // half_period) % 2) * 2 + ((xx // half_period) % 2)
    return np.asarray(amplitudes)[phase]


def build_fd_check_point(config: UNetConfig, size: int, seed: int, relu_margin=0.25, logit_cap=8.0):
    model = build(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)

    pooled_convs = [f"enc{s}_conv{i}_w" for s in range(config.depth) for i in (1, 2)]
    for name in pooled_convs:
        t = model.params[name]
        co, ci, _, _ = t.values.shape
        w = 0.01 * rng.standard_normal(t.values.shape)
        for o in range(co):
            w[o, o % ci, 1, 1] += 1.0
        t.values[...] = w
    for name, t in model.params.items():
        if name.endswith("_w") and name not in pooled_convs:
            fan_in = int(np.prod(t.values.shape[1:]))
            t.values[...] = 0.5 * np.sqrt(2.0 / fan_in) * rng.standard_normal(t.values.shape)

    levels = np.array([-1.0, -1 / 3, 1 / 3, 1.0])
    amps = [0.25 * 0.8**s for s in range(config.depth)]
    if config.depth >= 2:
        amps[1] = 0.2
    x = 0.5 + 0.02 * rng.random((size, size))
    for s, amp in enumerate(amps):
        x = x + amp * checkerboard(size, 2**s, levels)
    x = np.broadcast_to(x, (config.in_channels, size, size)).copy()

    names = relu_bias_names(config.depth)
    for i, name in enumerate(names):
        z = capture_smoothness(model, x)[0][i]
        model.params[name].values += np.maximum(relu_margin - z.min(axis=(1, 2)), 0.0)

    with ad.no_grad():
        logits = forward(model, ad.Tensor(x)).values
    scale = logit_cap / np.abs(logits).max()
    model.params["head_w"].values *= scale
    model.params["head_b"].values *= scale

    relu_inputs, gaps = capture_smoothness(model, x)
    min_preact = min(float(z.min()) for z in relu_inputs)
    return model, x, min_preact, min(gaps)

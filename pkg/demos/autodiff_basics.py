"""Fit a tiny two-layer net with the in-package autodiff engine.

Shows the Tensor tape, the finite-difference checker, and the AdamW loop
that every training routine in the package runs on.
"""

import numpy as np

from fepcross.numcore import (Tensor, adam_init, adam_step, grad_check,
                              matmul, relu, tanh)

SEED = 0
STEPS = 300
LR = 1e-2


def target_fn(x):
    return np.sin(3.0 * x) + 0.5 * x


def model_forward(params, x):
    h = tanh(matmul(x, params["w1"]) + params["b1"])
    return matmul(h, params["w2"]) + params["b2"]


def main():
    rng = np.random.default_rng(SEED)
    x = rng.uniform(-1.0, 1.0, size=(256, 1))
    y = target_fn(x)

    params = {
        "w1": Tensor(rng.normal(0.0, 0.5, size=(1, 16)), requires_grad=True),
        "b1": Tensor(np.zeros(16), requires_grad=True),
        "w2": Tensor(rng.normal(0.0, 0.5, size=(16, 1)), requires_grad=True),
        "b2": Tensor(np.zeros(1), requires_grad=True),
    }

    # sanity: reverse-mode gradients agree with central differences
    def loss_of(w1):
        swapped = dict(params, w1=w1)
        diff = model_forward(swapped, Tensor(x)) - Tensor(y)
        return (diff * diff).mean()

    err = grad_check(loss_of, [params["w1"]])
    print(f"grad check on w1: max relative error {err:.2e}")

    state = adam_init(list(params.values()), lr=LR)
    for step in range(1, STEPS + 1):
        for p in params.values():
            p.zero_grad()
        diff = model_forward(params, Tensor(x)) - Tensor(y)
        loss = (diff * diff).mean()
        loss.backward()
        adam_step(list(params.values()),
                  [p.grad for p in params.values()], state)
        if step % 100 == 0 or step == 1:
            print(f"step {step:4d}  mse {float(loss.data):.5f}")

    pred = model_forward(params, Tensor(x)).data
    print(f"final max abs error {np.abs(pred - y).max():.3f} "
          f"(started around {np.abs(y).max():.3f})")


if __name__ == "__main__":
    main()

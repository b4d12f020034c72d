"""Tape-based reverse-mode autodiff in a nutshell: fit a tiny MLP to XOR."""

import numpy as np

from slotworld import tensor as T


def main():
    rng = np.random.default_rng(0)
    x = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.float64)
    y = np.array([[0], [1], [1], [0]], dtype=np.float64)

    store = T.ParameterStore()
    store.add("w1", rng.normal(0, 0.8, size=(2, 8)))
    store.add("b1", np.zeros(8))
    store.add("w2", rng.normal(0, 0.8, size=(8, 1)))
    store.add("b2", np.zeros(1))

    def forward():
        h = T.tanh(T.add(T.matmul(T.Tensor(x), store["w1"]), store["b1"]))
        out = T.sigmoid(T.add(T.matmul(h, store["w2"]), store["b2"]))
        err = T.sub(out, y)
        return T.tmean(T.mul(err, err))

    # every op inside the context lands on the tape; backward replays it
    for step in range(1, 2001):
        with T.Tape() as tape:
            loss = forward()
            T.backward(loss, tape)
        T.adam_step(store, lr=3e-2)
        if step % 500 == 0:
            print(f"step {step:4d}  loss {float(loss.values):.6f}")

    worst, name = T.grad_check(forward, store)
    print(f"grad check: max relative error {worst:.2e} at {name}")

    h = T.tanh(T.add(T.matmul(T.Tensor(x), store["w1"]), store["b1"]))
    out = T.sigmoid(T.add(T.matmul(h, store["w2"]), store["b2"]))
    print("predictions:", np.round(out.values.ravel(), 3))


if __name__ == "__main__":
    main()

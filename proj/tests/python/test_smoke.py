"""Smoke tests for the python bindings; run by ctest with PYTHONPATH set to the
module build directory."""
import math
import os
import sys
import tempfile

import numpy as np

import _dfatrain as dfa


def test_matmul():
    a = np.random.RandomState(0).randn(4, 3)
    b = np.random.RandomState(1).randn(3, 2)
    got = dfa.matmul(a, b)
    assert np.allclose(got, a @ b, rtol=1e-12)


def test_conv_identity():
    x = np.random.RandomState(2).randn(2, 3, 5, 5)
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    y = dfa.conv2d(x, w)
    assert np.allclose(y, x)


def test_channel_shuffle_permutation():
    x = np.arange(4.0).reshape(1, 4, 1, 1)
    y = dfa.channel_shuffle(x, 2)
    assert list(y.ravel()) == [0.0, 2.0, 1.0, 3.0]


def test_dilate_and_flip():
    w = np.random.RandomState(3).randn(1, 1, 3, 3)
    d = dfa.dilate_kernel(w, 2)
    assert d.shape == (1, 1, 5, 5)
    assert np.count_nonzero(d) == 9
    f = dfa.flip180(w)
    assert np.allclose(dfa.flip180(f), w)


def test_activation_derivative():
    x = np.array([[0.0]])
    assert dfa.apply_activation(x, "tanh", True)[0, 0] == 1.0


def test_cost_anchors():
    bp = dfa.cost_bp("rnn")
    assert abs(bp["weight_bytes"] / 1e6 - 26.94) < 0.03
    orig = dfa.cost_dfa_original("rnn")
    assert abs(orig["weight_bytes"] / 1e6 - 1863.6) < 1.0
    rev = dfa.cost_dfa_revised("rnn")
    assert abs(rev["weight_bytes"] / 1e6 - 1032.6) < 1.0


def test_feedback_ratio():
    r = dfa.feedback_ratio(w=32, h=32, k=3, och=64, classes=10)
    assert abs(r - (1024 / 9) * (10 / 64)) < 1e-9


def test_latency_speedup():
    bp = dfa.ep_latency("rnn", "bp", time_steps=35)
    fa = dfa.ep_latency("rnn", "dfa", time_steps=35)
    assert bp / fa == 35.0


def test_tiny_experiment(tmpdir):
    data = os.path.join(tmpdir, "data")
    dfa.make_synthetic_cifar(data, 120, 7)
    out = dfa.run_experiment(overrides={
        "plan": "mlp", "mlp_dims": "3072,16,10", "strategy": "dfa_original",
        "optimizer": "momentum", "lr": "0.02", "epochs": "1", "batch": "32",
        "dataset": data, "subset_train": "128", "subset_test": "64",
        "augment": "0", "out_dir": os.path.join(tmpdir, "run"),
    })
    assert len(out["epochs"]) == 1
    assert 0.0 <= out["epochs"][0]["train_acc"] <= 100.0
    assert os.path.exists(out["csv"])


def main():
    failures = 0
    with tempfile.TemporaryDirectory() as tmpdir:
        for name, fn in sorted(globals().items()):
            if not name.startswith("test_"):
                continue
            try:
                fn(tmpdir) if fn.__code__.co_argcount else fn()
                print(f"{name}: ok")
            except Exception as exc:  # noqa: BLE001
                failures += 1
                print(f"{name}: FAIL ({exc})")
    sys.exit(1 if failures else 0)


if __name__ == "__main__":
    main()

"""Smoke test for the reflow_py extension.

Build and run from the repository root:

    cargo build -p reflow-py --release --features extension-module
    cp target/release/libreflow_py.so python/reflow_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import reflow_py as rf

TINY = """
task = "toy2d"
seed = 1

[data]
toy_train = 512
toy_val = 32
toy_test = 256

[model]
n_blocks = 1
channels = 16
step_hidden = 16

[optim]
iters = 200
batch = 64
"""


def main():
    cfg = rf.RunConfig(TINY)
    assert cfg.task == "toy2d" and cfg.iters == 200
    assert "toy_train = 512" in cfg.to_toml()

    try:
        rf.RunConfig("[optim]\nlearning_rate = 1.0\n")
    except ValueError as e:
        assert "learning_rate" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    data = rf.gen_data(cfg)
    assert data.kind == "points" and len(data) == 800
    test = data.frames("test")
    assert len(test) == 256 and len(test[0]) == 2

    model = rf.Model.train(cfg, data)
    assert model.generation == 1 and not model.conditional
    v = model.velocity([[0.0, 0.0], [1.0, -1.0]], 0.5)
    assert len(v) == 2 and all(math.isfinite(x) for row in v for x in row)

    euler = model.sample(data, solver="euler", steps=8, seed=3)
    assert len(euler) == 256 and euler.nfe == [8] * 256
    again = model.sample(data, solver="euler", steps=8, seed=3)
    assert euler.frames() == again.frames()

    report = euler.evaluate(data)
    assert report["n_gen"] == 256 and math.isfinite(report["fd"])
    assert report["mean_nfe"] == 8.0

    with tempfile.TemporaryDirectory() as d:
        ck = os.path.join(d, "m.rftt")
        model.save(ck)
        back = rf.Model.load(ck)
        assert back.velocity([[0.3, 0.1]], 0.2) == model.velocity([[0.3, 0.1]], 0.2)
        path = os.path.join(d, "toy.rfds")
        data.save(path)
        assert rf.Dataset.load(path).frames("test") == test
        try:
            rf.Dataset.load(os.path.join(d, "missing.rfds"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file accepted")

    z1, nfe = rf.solve(lambda z, t: [1.0, 2.0 * t], [0.0, 0.0], solver="rk45")
    assert abs(z1[0] - 1.0) < 1e-9 and abs(z1[1] - 1.0) < 1e-9 and nfe > 0
    z1, nfe = rf.solve(lambda z, t: [-x for x in z], [1.0], solver="euler", steps=10)
    assert nfe == 10 and abs(z1[0] - 0.9 ** 10) < 1e-12

    def boom(z, t):
        raise KeyError("boom")

    try:
        rf.solve(boom, [0.0])
    except KeyError:
        pass
    else:
        raise AssertionError("callback error swallowed")

    same = [[math.sin(i), math.cos(3 * i)] for i in range(50)]
    assert rf.frechet_distance(same, same) < 1e-10

    s = model.straightness(n_paths=32, time_points=4)
    assert s >= 0.0
    child = model.reflow(data, pairs=64, iters=20, seed=5)
    assert child.generation == 2

    print("smoke test ok")


if __name__ == "__main__":
    main()

"""Smoke test for the pyrdfcil extension.

Build first with `cargo build -p rdfcil-python --features extension-module`;
the script picks up target/{release,debug}/libpyrdfcil.so if the module is not
already importable.
"""

import importlib.machinery
import importlib.util
import itertools
import pathlib
import sys
import tempfile

import numpy as np

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import pyrdfcil

        return pyrdfcil
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libpyrdfcil.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("pyrdfcil", str(lib))
            spec = importlib.util.spec_from_loader("pyrdfcil", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("pyrdfcil not built")


def angle_loss(t, s):
    def cos(x, a, b, c):
        e1 = x[a] - x[b]
        e2 = x[c] - x[b]
        n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
        if n1 < 1e-6 or n2 < 1e-6:
            return None
        return np.clip(e1 @ e2 / ((n1 + 1e-8) * (n2 + 1e-8)), -1, 1)

    total, count = 0.0, 0
    for a, b, c in itertools.permutations(range(len(t)), 3):
        count += 1
        ct, cs = cos(t, a, b, c), cos(s, a, b, c)
        if ct is not None and cs is not None:
            total += abs(ct - cs)
    return total / count


def main():
    m = load()
    rng = np.random.default_rng(0)

    f = m.adaptive_factors(10, 2)
    assert f["alpha"] == 1.0
    assert abs(f["beta"] - np.sqrt(5)) < 1e-12

    t = rng.normal(size=(5, 4))
    s = rng.normal(size=(5, 4))
    value, grad = m.hkd_loss(t.tolist(), s.tolist())
    assert abs(value - np.abs(t - s).mean()) < 1e-12
    assert np.allclose(grad, np.sign(s - t) / s.size)

    value, grad = m.rkd_angle_loss(t.tolist(), s.tolist())
    assert abs(value - angle_loss(t, s)) < 1e-9
    h = 1e-6
    i, j = 2, 1
    up, down = s.copy(), s.copy()
    up[i, j] += h
    down[i, j] -= h
    numeric = (angle_loss(t, up) - angle_loss(t, down)) / (2 * h)
    assert abs(numeric - grad[i][j]) < 1e-4 * max(1.0, abs(numeric))

    logits = rng.normal(size=(6, 3))
    labels = [0, 1, 2, 0, 1, 2]
    value, _ = m.lce_loss(logits.tolist(), labels)
    log_p = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    assert abs(value + log_p[np.arange(6), labels].mean()) < 1e-12

    sched = m.TaskSchedule.split_half_then_equal(100, 6, 0)
    assert sched.task_sizes == [50, 10, 10, 10, 10, 10]
    assert sorted(sched.class_order) == list(range(100))

    model = m.Model(2, input_shape=(8, 8, 3), widths=(4, 8, 8), blocks_per_stage=1)
    model.expand(3, 1)
    assert model.task_sizes == [2, 3] and model.class_count == 5
    images = rng.normal(size=4 * 3 * 8 * 8).astype(np.float32).tolist()
    assert len(model.logits(images, 4)[0]) == 5
    assert all(0 <= p < 5 for p in model.predict(images, 4))

    assert m.accuracy([1, 2, 3, 4], [1, 2, 0, 4]) == 0.75
    assert m.average_incremental([0.5, 0.25]) == 0.375

    try:
        m.Config.load(overrides=["trainer.bogus=1"])
        raise AssertionError("bad override accepted")
    except m.ConfigError:
        pass

    with tempfile.TemporaryDirectory() as tmp:
        cfg = m.Config.load(overrides=["preset=toy"])
        cfg.out = tmp
        cfg.seeds = [0]
        reports = m.run_experiment(cfg)
        assert len(reports) == 1 and reports[0].is_complete()
        again = m.RunReport.load(str(pathlib.Path(tmp) / "seed_0" / "report.json"))
        assert again.accuracies == reports[0].accuracies
        print(reports[0])
        assert "full" in m.report([tmp], str(pathlib.Path(tmp) / "report"))
        assert m.run_cli(["report", str(pathlib.Path(tmp) / "missing")]) == 1

    print("smoke test ok")


if __name__ == "__main__":
    main()

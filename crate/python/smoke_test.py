"""Smoke test of the Python bindings.

Build and install first:

    pip install --no-build-isolation -e crates/py

then run with ``pytest python/smoke_test.py`` or ``python python/smoke_test.py``.
"""

import math
import tempfile
from pathlib import Path

import demonstrate_py as dm


def _train(tmp: Path):
    demos = tmp / "demos.jsonl"
    model = tmp / "model.bin"
    assert dm.generate_demos(str(demos), tasks=30, per_task=10, seed=0) == 30
    losses = dm.train(str(demos), str(model), z=10)
    assert losses and all(math.isfinite(x) for x in losses)
    return dm.Model.load(str(model))


def test_embedding_is_deterministic():
    a = dm.embed_mock("0.08 meters above of object two")
    assert len(a) == 64
    assert a == dm.embed_mock("0.08 meters above of object two")


def test_train_validate_and_run():
    with tempfile.TemporaryDirectory() as d:
        m = _train(Path(d))
        assert (m.z, m.p) == (10, 26)
        assert len(m.examples) == 30
        assert m.rho is None

        coverage, residual, passed = m.validate(m.examples[0])
        assert passed and coverage <= 3.0 and residual < 1e-6
        assert not m.validate("paint the whole table purple please")[2]
        assert len(m.theta(m.examples[0])) == m.p

        objects = [[0.1, 0.0, 0.0225], [-0.1, 0.1, 0.0225]]
        path = m.solve("0.12 meters above of object one", objects, [0.0, 0.0, 0.25])
        end = path[-1]
        assert math.dist(end, [0.1, 0.0, 0.1425]) < 0.01

        ep = m.run("stack all cubes", seed=7)
        assert ep["status"] == "completed"
        report = m.benchmark("stack", runs=1, seed=0)
        assert report["sr"] + report["tp"] + report["od"] + report["co"] == 100.0


def test_errors_surface_as_python_exceptions():
    with tempfile.TemporaryDirectory() as d:
        missing = Path(d) / "missing.bin"
        try:
            dm.Model.load(str(missing))
        except (RuntimeError, ValueError, OSError):
            pass
        else:
            raise AssertionError("loading a missing model must fail")


if __name__ == "__main__":
    test_embedding_is_deterministic()
    test_train_validate_and_run()
    test_errors_surface_as_python_exceptions()
    print("python smoke test: OK")

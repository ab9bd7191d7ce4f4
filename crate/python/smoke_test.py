"""Smoke test for the `moc` extension module.

Expects moc.so (built from crates/py) next to this file or on PYTHONPATH.
Runs a tiny generate/train/evaluate cycle through the bindings.
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import moc  # noqa: E402

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SMOKE = os.path.join(ROOT, "configs", "smoke.toml")


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def check_geometry():
    box = moc.zwhere_to_box((0.5, 0.25, 0.0, 0.0))
    assert box == (0.25, 0.375, 0.75, 0.625), box
    z = moc.box_to_zwhere(box)
    assert all(close(x, y) for x, y in zip(z, (0.5, 0.25, 0.0, 0.0))), z
    assert close(moc.iou(box, box), 1.0)
    assert moc.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert close(moc.center_divergence(box, box), 0.0)


def check_scores():
    a = [0, 0, 1, 1, 2, 2]
    assert close(moc.mutual_information(a, a), math.log(3), 1e-9)
    assert close(moc.adjusted_mutual_information(a, [5, 5, 7, 7, 9, 9]), 1.0, 1e-9)
    try:
        moc.adjusted_mutual_information(a, a, "median")
    except ValueError:
        pass
    else:
        raise AssertionError("bad normalizer accepted")
    try:
        moc.mutual_information([0, 1], [0])
    except ValueError:
        pass
    else:
        raise AssertionError("length mismatch accepted")


def check_schedule():
    full = (0.0, 0.0, 1.0, 1.0)
    assert close(moc.bbms([full], [full]), 0.0)
    assert close(moc.bbms([full], []), 0.0)
    assert moc.bbms([(0.0, 0.0, 0.5, 0.5)], [full]) > 0.0
    assert moc.lambda_align(0.0) == 1.0
    assert close(moc.lambda_align(3.0), 0.125)
    assert moc.delta_align(0.0, 2.0, 2.0) == 0.0
    assert moc.delta_align(0.9, 2.0, 2.0) > 0.0


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        run = os.path.join(tmp, "run")
        code, out = moc.run_cli(["generate", "--config", SMOKE, "--seed", "3", "--out", data, "--json"])
        assert code == 0, out
        assert json.loads(out)["seed"] == 3
        code, out = moc.run_cli(
            ["train", data, "--config", SMOKE, "--mode", "full-moc", "--steps", "10", "--out", run]
        )
        assert code == 0, out
        det = moc.Detector.load(os.path.join(run, "checkpoint.json"))
        assert det.mode == "full-moc" and det.step == 10, repr(det)
        metrics = det.evaluate(data)
        for key, value in metrics.items():
            assert 0.0 <= value <= 1.0 or key == "ami", (key, value)
        dets = det.detect(data, 0, 0)
        for d in dets:
            assert set(d) == {"cell", "box", "pres", "enc"}
            assert 0.0 <= d["pres"] <= 1.0
        try:
            det.detect(data, 99, 0)
        except ValueError:
            pass
        else:
            raise AssertionError("out-of-range sequence accepted")
        code, out = moc.run_cli(["evaluate", os.path.join(tmp, "missing.json"), data])
        assert code == 2, (code, out)
        code, _ = moc.run_cli(["no-such-command"])
        assert code == 2
        try:
            moc.Detector.load(os.path.join(tmp, "missing.json"))
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint loaded")


def main():
    check_geometry()
    check_scores()
    check_schedule()
    check_pipeline()
    print("python smoke test: ok")


if __name__ == "__main__":
    main()

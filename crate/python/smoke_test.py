"""Smoke test for the ffstack_py extension.

Build and install first:  pip install --no-build-isolation ./crates/py
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import ffstack_py as ff

TINY = {
    "sampler": {"n_frames": 40, "stride": 5},
    "bases": [
        {"id": "r", "hidden": [6]},
        {"id": "p", "kind": "perturbed_analytic", "perturbation": {"epsilon_scale": 1.03, "sigma_scale": 1.0}},
    ],
    "base_training": {"epochs": 2, "batch_size": 8},
    "meta_direct": {"layers": 1, "hidden": 8, "heads": 2, "head_hidden": 8, "training": {"epochs": 2}},
    "meta_conserv": {"layers": 1, "hidden": 8, "n_rbf": 4, "energy_embed_dim": 4, "training": {"epochs": 2}},
    "md": {"run": {"n_steps": 50, "record_stride": 10}, "replicas": 1},
}

METHANE = (
    [6, 1, 1, 1, 1],
    [[0.0, 0.0, 0.0], [0.63, 0.63, 0.63], [-0.63, -0.63, 0.63], [-0.63, 0.63, -0.63], [0.63, -0.63, -0.63]],
)


def check(cond, what):
    if not cond:
        sys.exit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    ref = ff.Reference("pseudo_methane")
    e, f = ref.compute(*METHANE)
    check(math.isfinite(e) and len(f) == 5, "reference energy and forces")
    net = [sum(fi[c] for fi in f) for c in range(3)]
    check(max(abs(x) for x in net) < 1e-10, "reference forces sum to zero")

    rmse, mae = ff.residual_rmse_mae([3.0, 4.0])
    check(abs(mae - 3.5) < 1e-15 and abs(rmse - math.sqrt(12.5)) < 1e-15, "rmse/mae arithmetic")

    h = ff.distance_histogram([1, 1], [[[0, 0, 0], [1.05, 0, 0]]], 2.0, 4)
    check(abs(h[2] - 2.0) < 1e-12 and ff.histogram_mae(h, h, 2.0) == 0.0, "distance histogram")

    with tempfile.TemporaryDirectory() as tmp:
        cfg = dict(TINY, paths={"workdir": str(Path(tmp) / "run")})
        path = Path(tmp) / "config.json"
        path.write_text(json.dumps(cfg))
        try:
            ff.Model.load("direct", str(path))
            check(False, "missing checkpoint raises")
        except FileNotFoundError:
            check(True, "missing checkpoint raises FileNotFoundError")
        try:
            ff.run("train", str(path), "nonsense")
            check(False, "bad target raises")
        except ValueError:
            check(True, "bad target raises ValueError")

        for cmd, target in [("gen-data", None), ("train", "ensemble"), ("train", "conserv"), ("md", "conserv")]:
            ff.run(cmd, str(path), target)
        frames = ff.read_extxyz((Path(tmp) / "run" / "dataset.extxyz").read_text())
        check(len(frames) == 40 and all(n == 5 for n, _ in frames), "generated dataset")

        model = ff.Model.load("conserv", str(path))
        energy, forces = model.compute(*METHANE)
        check(model.name == "ensemble_conserv" and energy is not None and len(forces) == 5, "conservative ensemble")
        stab = json.loads((Path(tmp) / "run" / "md" / "ensemble_conserv" / "stability.json").read_text())
        check(stab["runs"] == 1, "md stability report")
    print("smoke test passed")


if __name__ == "__main__":
    main()

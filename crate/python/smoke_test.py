"""Smoke test for the latseg extension module.

Build and install first:  maturin develop --release -m crates/py/Cargo.toml
"""

import json

import numpy as np

import latseg


def main():
    spec = json.dumps({"seed": 3, "size": [64, 96]})
    image, gt, noisy = latseg.generate(0, spec)
    assert image.shape == (3, 64, 96) and image.dtype == np.float64
    assert gt.shape == (64, 96) and gt.dtype == np.uint8
    assert 0.0 <= image.min() and image.max() <= 1.0
    again, _, _ = latseg.generate(0, spec)
    assert np.array_equal(image, again)

    report = json.loads(latseg.evaluate_masks(gt, gt))
    assert report["miou"] == report["aacc"] == report["biou"] == 1.0

    logits = np.random.default_rng(0).normal(size=(6, 8, 8))
    margins = latseg.margin_map(logits)
    assert margins.shape == (8, 8)
    picked = latseg.select_topk(margins, 5)
    order = sorted(range(64), key=lambda i: (margins.flat[i], i))
    assert sorted(picked) == sorted(order[:5])

    fine = np.array([[23, 10], [19, 7]], dtype=np.uint8)
    assert latseg.remap(fine, "rugd").tolist() == [[0, 0], [3, 5]]

    tiny = {
        "encoder": {"in_channels": 3, "stage_channels": [4, 6, 8, 10], "stage_depths": [1, 1, 1, 1],
                    "heads_per_stage": [1, 2, 2, 2], "mlp_ratio": 2},
        "decoder": {"width": 8, "heads": 2, "dilations": [1, 2, 3], "num_classes": 6},
        "capr": {"k": 48, "iterations": 1, "hidden": 8},
        "epochs": 1,
        "batch_size": 2,
        "data": {"train": {"source": "synthetic", "count": 2, "spec": {"seed": 1}},
                 "val": {"source": "synthetic", "count": 1, "spec": {"seed": 2}}},
    }
    model = latseg.Model(json.dumps(tiny), seed=0)
    labels, out, gate, evals = model.predict(image)
    assert labels.shape == (64, 96) and out.shape == (6, 64, 96)
    assert abs(sum(gate) - 1.0) < 1e-12 and evals == 48

    base = model.predict(image)[1]
    model.set_components(capr=False)
    assert json.loads(model.components)["capr"] is False
    _, plain, _, evals = model.predict(image)
    assert evals == 0
    assert np.array_equal(plain, base)  # refinement output layer starts at zero

    trained, log = latseg.Model.train(json.dumps(tiny))
    assert len(log) == 1 and "val_miou" in json.loads(log[0])
    print(trained, json.loads(trained.evaluate(2, spec))["miou"])
    print("smoke test ok")


if __name__ == "__main__":
    main()

"""Smoke test for the `slm` extension module.

Build and install the module first, e.g.

    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml

then run `python python/smoke_test.py` (or `pytest python/smoke_test.py`).
"""

import math
import os
import tempfile

import slm


def small_config(seed=0):
    cfg = slm.Config()
    cfg.seed = seed
    cfg.set("train.steps", "200")
    cfg.set("train.eval_every", "0")
    return cfg


def test_config_roundtrip():
    cfg = small_config()
    again = slm.Config(cfg.to_text())
    assert again.to_text() == cfg.to_text()
    assert "select.lambda_s" in slm.Config.keys()
    try:
        cfg.set("no.such.key", "1")
    except ValueError as e:
        assert "no.such.key" in str(e)
    else:
        raise AssertionError("unknown key accepted")


def test_ops():
    assert slm.average_hausdorff([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0
    d = slm.average_hausdorff([[0.0, 0.0], [1.0, 0.0]], [[0.0, 1.0]])
    assert abs(d - 0.5 * ((1 + math.sqrt(2)) / 2 + 1)) < 1e-12
    p = slm.sharpen([0.7, 0.3], 0.5)
    assert abs(p[0] - 0.49 / 0.58) < 1e-12
    rate = slm.gumbel_select_rate([math.log(0.8), math.log(0.2)], 0.05, 20000, seed=1)
    assert 0.78 < rate < 0.82
    x = [[float(i), 0.0] for i in range(5)]
    assert slm.sliced_wasserstein(x, x, projections=16) == 0.0


def test_grad_check():
    rows = slm.grad_check(seed=0)
    assert rows and all(err < slm.TOLERANCE for _, _, err in rows)


def test_train_and_reload():
    cfg = small_config()
    task = slm.Task.synthetic(cfg)
    assert task.num_classes == 8 and task.dim == 2
    report, model = slm.train(cfg, task)
    assert 0.0 <= report["final_accuracy"] <= 1.0
    assert model.step == 200

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.bin")
        model.save(path)
        loaded = slm.Model.load(path)
    x = task.target_features[:10]
    assert loaded.logits(x) == model.logits(x)
    assert len(loaded.select(task.source_features)) == len(task.source_labels)
    assert slm.Model.from_bytes(model.to_bytes()).predict(x) == model.predict(x)

    ev = loaded.evaluate(task)
    assert abs(ev["target_accuracy"] - report["final_accuracy"]) < 1e-12


def test_stepwise_matches_full_run():
    cfg = small_config(seed=3)
    task = slm.Task.synthetic(cfg)
    trainer = slm.Trainer(cfg, task)
    for _ in range(200):
        rec = trainer.step()
    assert rec["step"] == 199 and math.isfinite(rec["total"])
    _, model = slm.train(cfg, task)
    assert trainer.model().to_bytes() == model.to_bytes()


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok  {name}")

"""Smoke test for the monoprobe extension module.

Build and install first:

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""

import json
import pathlib
import random
import tempfile

import monoprobe


def check_quartiles():
    values = {f"p{i}": float(i) for i in range(8)}
    q = monoprobe.quartiles(values)
    assert q["p7"] == "Q1" and q["p6"] == "Q1"
    assert q["p0"] == "Q4" and q["p1"] == "Q4"
    print("quartiles ok")


def check_prompt():
    text = monoprobe.render_prompt("A Title", "An abstract.")
    assert text.startswith("Write a three sentence summary")
    assert "Title: A Title\nAbstract: An abstract." in text
    base = monoprobe.render_prompt("T", "A", variant="base_completion")
    assert base.endswith("A three sentence summary of the topics in the paper above:")
    print("render_prompt ok")


def check_encoder_and_pooling():
    w = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    assert monoprobe.sae_encode(w, [0.0] * 3, [0.5] * 3, [1.0, -1.0]) == [1.0, 0.0, 0.0]
    rows = [[1.0, 0.0, 2.0], [3.0, 0.0, 0.0]]
    assert monoprobe.pool_features(rows) == [2.0, 0.0, 1.0]
    print("sae_encode / pool_features ok")


def check_tree():
    rng = random.Random(0)
    x, y = [], []
    for _ in range(40):
        signal = rng.random()
        x.append([rng.random(), signal, rng.random()])
        y.append("High" if signal > 0.5 else "Low")
    tree = monoprobe.TreeProbe.train(x, y, max_leaf_nodes=4)
    assert tree.importances() == {1: 1.0}, tree.importances()
    assert all(tree.predict(row) == label for row, label in zip(x, y))
    again = monoprobe.TreeProbe.from_json(tree.to_json())
    assert again.to_json() == tree.to_json()
    print(f"tree ok: {tree!r}")


RUN = """papers = "papers.jsonl"
venues = "venues.jsonl"
output_dir = "out"
seed = 3
tasks = ["citation_count"]

[generators.mock]
kind = "mock"

[saes.mock]
kind = "mock"
model_id = "mock-lm"
layer_index = 20
feature_count = 256
sae_id = "mock-lm/layer_20/width_256"

[[saes.mock.planted]]
feature_index = 9
trigger_words = ["breakthrough", "landmark", "pioneering"]
strength = 1.0

[[settings]]
id = "setting-1"
generator = "mock"
sae = "mock"
"""


def check_pipeline():
    with tempfile.TemporaryDirectory() as d:
        root = pathlib.Path(d)
        monoprobe.synthesize_corpus(str(root), papers=200, seed=3)
        (root / "run.toml").write_text(RUN)
        stats = monoprobe.run_pipeline(str(root / "run.toml"))
        assert stats["tasks"]["citation_count"]["high"] == 50
        report = json.loads((root / "out" / "report" / "report.json").read_text())
        top = report["tasks"][0]["settings"][0]["findings"][0]
        assert top["feature_index"] == 9 and top["importance"] == 1.0, top
        rerun = monoprobe.run_pipeline(str(root / "run.toml"))
        assert rerun["tree_cache"]["misses"] == 0
    print("run_pipeline ok")


if __name__ == "__main__":
    check_quartiles()
    check_prompt()
    check_encoder_and_pooling()
    check_tree()
    check_pipeline()
    print("all smoke checks passed")

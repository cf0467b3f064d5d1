"""Smoke test for the _corpusalign extension module.

Build the module first (see README), then run:  python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import _corpusalign as ca  # noqa: E402

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
GOLDEN = os.path.join(ROOT, "crates", "core", "tests", "fixtures", "golden")


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    assert all(close(x, y) for x, y in zip(ca.rank_weights(3), [0.5, 1 / 3, 1 / 6]))
    assert close(ca.cosine([1.0, 0.0], [1.0, 1.0]), 1 / math.sqrt(2))
    assert ca.jaccard(["A1", "A2"], ["A2"]) == 0.5
    pairs = [(["A1"], ["A1"]), (["A2", "B1"], ["A2"])]
    assert close(ca.micro_f1(pairs), 0.8)
    value, degenerate = ca.kappa(pairs, ["A1", "A2", "B1"])
    assert not degenerate and -1.0 <= value <= 1.0
    lo, hi = ca.bootstrap(pairs * 10, "jaccard", rounds=200, seed=1)
    assert (lo, hi) == ca.bootstrap(pairs * 10, "jaccard", rounds=200, seed=1)
    assert 0.0 <= lo <= hi <= 1.0

    label, _ = ca.normalize_topic_label("Climate Change:   Sea Level Rise", "Rising oceans")
    assert label == "Climate Change: Sea Level Rise"
    try:
        ca.normalize_topic_label("Sea Level", "x")
        raise AssertionError("missing prefix accepted")
    except ValueError:
        pass

    mean, mx = ca.spread_stats([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert mx >= mean
    assert ca.spread_stats([[1.0, 0.0]]) is None
    assert ca.dedup(["a  b", "a b", "c"]) == ["a  b", "c"]
    assert ca.extract_first_turn([("assistant", "hi"), ("user", "why is it hot?")]) == "why is it hot?"

    parsed = ca.parse_structured_output('```json\n{"intent": ["INTENT_1a. Fact Lookup"], "form": "FORM_1a"}\n```', "question_type_object")
    assert parsed["QuestionType"]["intents"] == ["INTENT_1a. Fact Lookup"]

    with tempfile.TemporaryDirectory() as work:
        reports = ca.run_stage(os.path.join(GOLDEN, "config.json"), "all", workdir=work)
        assert [r["status"] for r in reports] == ["ran"] * len(reports)
        with open(os.path.join(work, "bundle", "manifest.json")) as f:
            manifest = json.load(f)
        assert manifest["schema_version"] == 1
        again = ca.run_stage(os.path.join(GOLDEN, "config.json"), "export", workdir=work)
        assert again[0]["status"] == "up_to_date"

    print("smoke test ok")


if __name__ == "__main__":
    main()

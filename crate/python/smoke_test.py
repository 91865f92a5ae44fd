"""Exercises the Python bindings end to end on a generated fixture.

    pip install --no-build-isolation -e crates/py
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import revcore_py as rc


def check_utilities():
    assert rc.tokenize("I loved @m12, really!") == ["i", "loved", "@m12", ",", "really", "!"]
    assert rc.label_from_rating(9) == "positive"
    assert rc.label_from_rating(2) == "negative"
    try:
        rc.label_from_rating(11)
    except ValueError:
        pass
    else:
        raise AssertionError("rating 11 accepted")

    s = rc.parse_strategy("C-S-W", 20)
    assert s["code"] == "C-S-W" and s["budget"] == 20 and s["source"] == "items"
    assert rc.parse_strategy("iCorpus")["source"] == "irrelevant"

    assert abs(rc.recall_at_k([list(range(12))] * 3, [3, 9, 11], 10) - 2 / 3) < 1e-9
    assert abs(rc.distinct_n([["a", "a", "a", "a"]], 2) - 1 / 3) < 1e-9
    assert abs(rc.perplexity([[0.5, 0.5, 0.25]]) - 2.5198) < 1e-4
    assert abs(rc.gen_loss([[0.5, 0.1]]) - 1.4979) < 1e-4
    assert abs(rc.rec_loss([[0.25] * 4], [2]) - math.log(4)) < 1e-9


def check_training_and_service(root: Path):
    config = rc.write_fixture(str(root / "data"), seed=42, dialogues=20)
    text = Path(config).read_text()
    # Keep the run short.
    text = text.replace("epochs = 30", "epochs = 1")
    Path(config).write_text(text)

    report = rc.train(str(config))
    rec = report["train"]["recommendation"]
    assert 0.0 <= rec["recall@1"] <= rec["recall@10"] <= rec["recall@50"] <= 1.0
    assert report["train"]["generation"]["ppl"] >= 1.0

    svc = rc.Service(str(config), top_k=5)
    sid = svc.open()
    reply = svc.step(sid, "hi , i loved @m1 and want a fantasy movie")
    assert isinstance(reply["response"], str)
    assert len(reply["recommendations"]) == 5
    assert [r["item"] for r in reply["reviews"]] == ["m1"]
    assert len(svc.recommendations(sid, 1)) == 1
    assert len(svc) == 1
    try:
        svc.step("no-such-session", "hello")
    except KeyError:
        pass
    else:
        raise AssertionError("unknown session accepted")
    return reply


def main():
    check_utilities()
    with tempfile.TemporaryDirectory() as tmp:
        reply = check_training_and_service(Path(tmp))
    print("ok:", reply["response"][:60])


if __name__ == "__main__":
    main()

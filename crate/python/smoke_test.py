"""Smoke test for the deep_pipeline extension module.

Build first with `cargo build -p deep-py --features extension-module`, then run
`python3 python/smoke_test.py`. The built library is copied to a temporary
directory under the importable name `deep_pipeline.so`.
"""

import importlib
import json
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    for profile in ("release", "debug"):
        for name in ("libdeep_pipeline.so", "libdeep_pipeline.dylib", "deep_pipeline.dll"):
            lib = ROOT / "target" / profile / name
            if lib.exists():
                tmp = pathlib.Path(tempfile.mkdtemp())
                suffix = ".pyd" if name.endswith(".dll") else ".so"
                shutil.copy(lib, tmp / ("deep_pipeline" + suffix))
                sys.path.insert(0, str(tmp))
                return importlib.import_module("deep_pipeline")
    sys.exit("deep_pipeline library not found; build the deep-py crate first")


def main():
    dp = load_module()

    records = [
        {"id": "Q3646", "surfaces": {"en": ["Krasnodar"], "ru": ["Краснодар"]}},
        {"id": "Q159", "surfaces": {"en": ["Russia"], "ru": ["России", "Россия"]}},
    ]
    kb = dp.KnowledgeBase.from_jsonl("\n".join(json.dumps(r) for r in records), ["en", "ru"])
    assert len(kb) == 2
    assert kb.lookup("Q3646", "en") == "Krasnodar"
    assert kb.index("ru")["России"] == {"Q159"}

    gaz = dp.Gazetteer(kb, "ru")
    sentence = "Краснодар город на юге России".split()
    spans = gaz.link(sentence)
    assert [(s[1], s[2], s[3]) for s in spans] == [(0, 1, "Q3646"), (4, 5, "Q159")], spans

    sentences = [sentence, "он стоит на реке Кубань".split()]
    dae = dp.g_dae(sentences, seed=7)
    assert dae.task == "DAE" and dae.tgt == [w for s in sentences for w in s]
    assert dae.masked_words >= 4  # ceil(0.35 * 11)

    deep = dp.f_deep(sentences, [(0, 0, 1, "Q3646"), (0, 4, 5, "Q159")], kb, "en", seed=7)
    assert deep.task == "DEEP"
    assert "Krasnodar" in deep.src and "Russia" in deep.src
    assert deep.replaced_words == 2
    assert sorted(deep.order) == [0, 1]

    ref = "the cat sat on the mat".split()
    assert abs(dp.corpus_bleu([ref], [ref]) - 100.0) < 1e-9

    macro, per = dp.entity_accuracy([["Краснодар"]], [sentence], gaz)
    assert per["Q3646"] == (1, 1, 1.0) and per["Q159"] == (1, 0, 0.0)
    assert abs(macro - 0.5) < 1e-12

    groups = dp.partition({"a", "b"}, {"a", "c"}, {"a", "b", "c", "d"})
    assert groups == {"a": "PFT", "b": "PT", "c": "FT", "d": "other"}

    vocab = dp.Vocab(["ab", "a", "b", "c"])
    assert vocab.pieces("abc") == ["ab", "c"]
    assert dp.parallel_budget([("ab c", "a b c")], vocab) == 3

    print("deep_pipeline smoke test: ok")


if __name__ == "__main__":
    main()

"""Smoke test for the Python bindings.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o target/wheels
    pip install --force-reinstall target/wheels/rule_exec-*.whl
"""

import json
import tempfile

import rule_exec as rx


def main():
    v = rx.Vocab(64)
    f = rx.Formula("copy(car) & copy(snow) & len(9)", v)
    assert f.atoms() == ["Copy(car)", "Copy(snow)", "Len(9)"], f.atoms()

    y = v.encode("the dog was in the . car on the snow </s>")
    tr = rx.Tracker(f)
    grid = tr.state_matrix(y)
    assert len(grid) == len(tr.x) and len(grid[0]) == len(y) + 1
    assert tr.final_satisfaction(y) == {"satisfied": True, "atoms": [True, True, True]}

    inc = tr.start()
    for t in y:
        inc.push(t)
    assert inc.ended and inc.state_matrix() == grid

    report = rx.check("copy(car) & len(9)", y)
    assert report["satisfied"] and not report["truncated"]
    short = rx.check("len(3)", v.encode("car snow </s>"))
    assert not short["satisfied"] and short["satisfied_pm1"]

    spec = {"task": "copy_set", "train": 64, "dev": 8, "test": 8, "seed": 3}
    data = rx.generate_data(json.dumps(spec))
    assert len(data["train"]) == 64 and data["train"][0]["tgt"][-1] == rx.EOS

    items = [(ex["expr"], ex["src"], ex["tgt"]) for ex in data["test"]]
    assert rx.evaluate(items)["csr"] == 1.0

    cfg = {
        "model": {"d_model": 16, "heads": 2, "enc_layers": 1, "dec_layers": 1, "ffn": 32, "flag_ffn": 32},
        "task": spec,
        "train": {"steps": 20, "batch_size": 8},
        "decode": {"max_len": 12},
    }
    with tempfile.TemporaryDirectory() as d:
        summary = rx.train(json.dumps(cfg), d)
        assert summary["steps"] == 20 and len(summary["losses"]) == 20
        m = rx.Model.load(f"{d}/last.ckpt")
        out = m.decode("copy(car)", max_len=12, beam=2)
        assert 1 <= len(out["tokens"]) <= 12 and isinstance(out["satisfied"], bool)

    try:
        rx.Formula("copy(", v)
    except ValueError:
        pass
    else:
        raise AssertionError("malformed formula accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()

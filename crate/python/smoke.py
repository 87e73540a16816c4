"""Smoke test for the tutor_py extension.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/tutor_py-*.whl
"""

import tutor_py


def main():
    # greedy linking takes the largest entry first
    assert tutor_py.nms_one_hot([[0.9, 0.8], [0.85, 0.1]]) == [0, 1]
    assert tutor_py.hungarian([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0]]) == [1, 0]

    assert tutor_py.flop_count("global", 8, 8, 2, 32) == 1_572_864
    assert tutor_py.flop_count("irregular-window", 8, 8, 2, 32) == 999_424

    text = tutor_py.config_text(["tau=0.5"])
    assert "tau = 0.5" in text

    shape, frames, ann = tutor_py.synth_clip(3)
    t, h, w, c = shape
    assert len(frames) == t * h * w * c
    assert 1 <= len(ann) <= 2
    for human, obj, cls, actions in ann:
        assert all(0.0 <= v <= 1.0 for v in human + obj)
        assert 0 <= cls < 4 and actions

    rows = tutor_py.gradcheck(["softmax", "giou"])
    for name, tol, err, ok in rows:
        print(f"{name:12} tol {tol:.0e} max rel err {err:.3e} {'pass' if ok else 'FAIL'}")
    assert all(ok for *_, ok in rows)

    try:
        tutor_py.nms_one_hot([[1.0, 2.0]])
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("ragged matrix accepted")
    print("smoke ok")


if __name__ == "__main__":
    main()

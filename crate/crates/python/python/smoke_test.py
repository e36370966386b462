"""Smoke test for the extension: build with `maturin develop` first."""

import math

import crfkd_py

NEG = -1e9


def transitions(k, fill=0.0):
    t = [[fill] * (k + 2) for _ in range(k + 2)]
    for row in t:
        row[k] = NEG
    for j in range(k + 2):
        t[k + 1][j] = NEG
    t[k][k + 1] = NEG
    return t


def test_viterbi_follows_emissions():
    em = [[0.0, 2.0], [3.0, 0.0], [0.0, 1.0]]
    tags, score = crfkd_py.viterbi(em, transitions(2))
    assert tags == [1, 0, 1]
    assert score == 6.0


def test_masked_position():
    em = [[0.0, 2.0], [9.0, 0.0]]
    tags, score = crfkd_py.viterbi(em, transitions(2), [True, False])
    assert tags == [1, 0]
    assert score == 2.0


def test_log_partition_uniform():
    em = [[0.0, 0.0, 0.0]] * 4
    z = crfkd_py.log_partition(em, transitions(3))
    assert math.isclose(z, 4 * math.log(3), rel_tol=1e-12)


def test_strict_spans():
    s = crfkd_py.span_scores(
        ["A", "B"],
        [["B-A", "I-A", "O", "B-B"]],
        [["B-A", "O", "O", "B-B"]],
    )
    assert s["micro_precision"] == 0.5
    assert s["micro_recall"] == 0.5
    assert s["macro_f1"] == 0.5


def test_quantize():
    q, scale = crfkd_py.quantize([0.5, -1.0, 0.25])
    assert q == [64, -127, 32]
    assert math.isclose(scale, 1.0 / 127)


def test_errors_raise_value_error():
    for call in (
        lambda: crfkd_py.viterbi([[0.0], [0.0, 1.0]], transitions(2)),
        lambda: crfkd_py.span_scores(["A"], [["B-X"]], [["O"]]),
    ):
        try:
            call()
        except ValueError:
            continue
        raise AssertionError("expected ValueError")


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_"):
            fn()
    print("ok")

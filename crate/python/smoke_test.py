"""Smoke test for the `bana` extension module.

Build and install first:

    pip install maturin
    maturin develop -m crates/py/Cargo.toml

then run `python python/smoke_test.py`.
"""

import json
import math
import random
import tempfile
from pathlib import Path

import bana


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def test_feature_map_roundtrip(tmp):
    data = [float(i % 7) - 3.0 for i in range(2 * 3 * 4)]
    f = bana.FeatureMap(2, 3, 4, data)
    assert f.shape == (2, 3, 4)
    path = tmp / "f.btf"
    f.write(str(path))
    g = bana.FeatureMap.read(str(path))
    assert g.data() == f.data()
    assert g.pixel(1, 2) == [data[6], data[18]]
    dims, flat = bana.read_tensor(str(path))
    assert dims == [2, 3, 4] and flat == f.data()


def test_attention_and_pooling():
    rng = random.Random(0)
    c, h, w = 4, 8, 8
    f = bana.FeatureMap(c, h, w, [rng.uniform(-1, 1) for _ in range(c * h * w)])
    boxes = [(1, 2, 2, 5, 5)]
    a, j = bana.attention(f, boxes, 4)
    assert j > 0
    for y in range(h):
        for x in range(w):
            inside = 2 <= x < 5 and 2 <= y < 5
            v = a[y * w + x]
            assert 0.0 <= v <= 1.0
            if not inside:
                assert v == 1.0
    # Scaling the features leaves attention unchanged.
    b, _ = bana.attention(f.scaled(3.0), boxes, 4)
    assert max(abs(x - y) for x, y in zip(a, b)) < 1e-6
    # With A = 0 inside the box, pooling is the plain box mean.
    zero = [0.0] * (h * w)
    pooled = bana.bap_pool(f, zero, boxes[0])
    mean = [
        sum(f.pixel(y, x)[k] for y in range(2, 5) for x in range(2, 5)) / 9.0
        for k in range(c)
    ]
    assert all(close(p, m) for p, m in zip(pooled, mean))


def test_head_gradient():
    rng = random.Random(1)
    head = bana.ClassifierHead(2, 3, mode="cosine", scale=15.0, seed=3)
    xs = [[rng.uniform(-1, 1) for _ in range(3)] for _ in range(4)]
    ys = [0, 1, 2, 1]
    loss, grad = head.ce_loss_and_grad(xs, ys)
    w = head.weights
    h = 1e-6
    for i in range(len(w)):
        plus = list(w)
        minus = list(w)
        plus[i] += h
        minus[i] -= h
        lp, _ = bana.ClassifierHead.from_weights(2, 3, plus, "cosine", 15.0).ce_loss_and_grad(xs, ys)
        lm, _ = bana.ClassifierHead.from_weights(2, 3, minus, "cosine", 15.0).ce_loss_and_grad(xs, ys)
        assert abs((lp - lm) / (2 * h) - grad[i]) < 1e-4 * max(1.0, abs(grad[i]))
    losses = head.fit(xs, ys, lr=0.05, epochs=20, batch_size=4)
    assert losses[-1] < losses[0]
    assert head.predict(xs[0]) in (0, 1, 2)
    assert close(sum(head.probabilities(xs[0])), 1.0)


def test_confidence():
    # D = 1 + cos: class 0 scores 2, class 1 scores 1 + 1/sqrt(2).
    phi = bana.FeatureMap(2, 1, 1, [1.0, 0.0])
    head = bana.ClassifierHead.from_weights(1, 2, [1.0, 0.0, 1.0, 1.0], "cosine", 15.0)
    sigma = bana.confidence(phi, head, [1], 7.0)
    assert close(sigma[0], ((1 + 1 / math.sqrt(2)) / 2) ** 7)
    assert bana.confidence(phi, head, [0], 7.0) == [1.0]


def test_crf_and_metrics():
    h, w = 4, 6
    unary = []
    for k in range(2):
        unary += [0.9 if (p % w < 2) == (k == 0) else 0.1 for p in range(h * w)]
    rgb = [100] * (h * w * 3)
    labels, marginals = bana.dense_crf(unary, 2, h, w, rgb, iterations=5, w1=0.0, w2=0.0)
    assert list(labels) == [0 if p % w < 2 else 1 for p in range(h * w)]
    # On a flat image the appearance kernel pulls everything to the majority label.
    smoothed, _ = bana.dense_crf(unary, 2, h, w, rgb, iterations=5)
    assert set(smoothed) == {1}
    assert len(marginals) == 2 * h * w
    for p in range(h * w):
        assert close(marginals[p] + marginals[h * w + p], 1.0)

    m, per_class = bana.miou([0, 1, 1, 1], [0, 0, 1, 1], 1)
    assert close(m, 7 / 12)
    assert per_class == [0.5, 2 / 3]
    rates = bana.filling_rate([0, 1, 1, 0], 4, 1, [(1, 0, 0, 4, 1)])
    assert rates == [0.5]


def test_pipeline(tmp):
    corpus = tmp / "corpus"
    names = bana.synth_corpus(str(corpus), seed=2, n_images=2, size=32, n_classes=2)
    assert names == ["img0000", "img0001"]
    cfg = json.loads(bana.corpus_config(str(corpus), str(tmp / "out"), 2))
    cfg["head"]["schedule"]["epochs"] = 5
    cfg["nal"]["schedule"]["epochs"] = 3
    summary = json.loads(bana.run_pipeline(json.dumps(cfg)))
    assert summary["labels"]["images"] == 2
    assert 0.0 <= summary["eval"]["miou"] <= 1.0
    assert (tmp / "out" / "eval" / "metrics.json").is_file()
    head = bana.ClassifierHead.load(str(tmp / "out" / "seg" / "head.btf"))
    assert head.num_classes == 2

    try:
        bana.run_pipeline(json.dumps({**cfg, "features_dir": str(tmp / "missing")}))
    except ValueError as e:
        assert "missing" in str(e)
    else:
        raise AssertionError("missing features directory was accepted")


def main():
    with tempfile.TemporaryDirectory() as d:
        tmp = Path(d)
        test_feature_map_roundtrip(tmp)
        test_attention_and_pooling()
        test_head_gradient()
        test_confidence()
        test_crf_and_metrics()
        test_pipeline(tmp)
    print("ok")


if __name__ == "__main__":
    main()

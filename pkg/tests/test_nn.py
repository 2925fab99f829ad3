import csv

import numpy as np
import pytest

from icogauge.checks import classifier_invariance, suite_gradcheck
from icogauge.errors import ContractViolation, FormatError, NumericalError, ShapeError
from icogauge.fields import FieldType, IcoSignal, random_signal, signal_to_pixels
from icogauge.geometry import NUM_CORNERS
from icogauge.nn import (
    ARCHS,
    BatchNorm,
    GlobalPool,
    SGD,
    backward,
    build_model,
    forward,
    forward_with_logits,
    load_model,
    save_model,
    sgd_step,
    softmax_xent,
)
from icogauge.ops import act
from icogauge.train import fit, step_schedule

SMALL = dict(channels=(4, 6), strides=(1, 2), head=(12,))


def small(arch="r2r", r=2, dtype=np.float32, seed=0, classes=10):
    return build_model(arch, r, num_classes=classes, seed=seed, dtype=dtype, **SMALL)


def inputs(geo, r=2, batch=3, seed=0, dtype=np.float32):
    g, a, _ = geo(r)
    return random_signal(g, a, FieldType.scalar(1), batch, seed, dtype=dtype).data


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_shapes(geo, arch):
    m = small(arch)
    logits, _ = forward(m, inputs(geo))
    assert logits.shape == (3, 10) and logits.dtype == np.float32
    assert np.all(np.isfinite(logits))


def test_paper_architecture_widths():
    m = build_model("r2r", 4)
    convs = [layer for layer in m.layers if layer.kind == "gconv"]
    assert [c.field_out.num_fields for c in convs] == [8, 16, 16, 24, 24, 32, 64]
    assert all(c.field_out.homogeneous.dim == 6 for c in convs)
    assert convs[0].field_in == FieldType.scalar(1)
    assert [layer.n_out for layer in m.layers if layer.kind == "dense"] == [64, 32, 10]


@pytest.mark.parametrize("arch", ["r2r", "s2r", "s2s"])
def test_classifier_invariance(geo, arch):
    m = small(arch)
    flips, dev = classifier_invariance(m, inputs(geo, batch=4), 2)
    assert flips == 0 and dev <= 1e-4


@pytest.mark.parametrize("arch", ["np", "ne", "np+ne"])
def test_baselines_not_invariant(geo, arch):
    m = small(arch)
    _, dev = classifier_invariance(m, inputs(geo, batch=4), 2)
    assert dev > 1e-4


def test_zero_input_gives_head_bias_image(geo):
    m = small()
    logits, _ = forward(m, np.zeros_like(inputs(geo)))
    start = next(i for i, layer in enumerate(m.layers) if isinstance(layer, GlobalPool))
    h = np.zeros((3, m.layers[start + 1].params["w"].shape[1]), dtype=np.float32)
    for layer in m.layers[start + 1 :]:
        h, _ = layer.forward(h, False)
    assert np.array_equal(logits, h)


def test_batch_independence(geo):
    m = small()
    x = inputs(geo, batch=5)
    whole = m.predict(x, batch_size=5)
    single = np.concatenate([m.predict(x[i : i + 1]) for i in range(5)])
    assert np.array_equal(whole, single)


def test_forward_rejects_wrong_input(geo):
    m = small()
    with pytest.raises(ShapeError):
        forward(m, inputs(geo, r=3))
    g, a, _ = geo(2)
    with pytest.raises(ShapeError):
        forward(m, random_signal(g, a, FieldType.regular(1), 1, 0))


def test_backward_checks_cache(geo):
    m1, m2 = small(), small()
    x = inputs(geo)
    _, cache = forward_with_logits(m1, x, True)
    with pytest.raises(ContractViolation):
        m2.backward(cache, np.zeros((3, 10), dtype=np.float32))
    _, plain = forward(m1, x, True)
    with pytest.raises(ContractViolation):
        backward(m1, plain, [0, 1, 2])


def test_zero_upstream_gives_zero_grads(geo):
    m = small(dtype=np.float64)
    _, cache = forward(m, inputs(geo, dtype=np.float64), True)
    grads, _ = m.backward(cache, np.zeros((3, 10)))
    assert set(grads) == set(m.param_dict())
    assert all(not np.any(v) for v in grads.values())


def test_duplicated_item_doubles_gradient(geo):
    m = small(dtype=np.float64)
    x = inputs(geo, batch=1, dtype=np.float64)
    _, c1 = forward_with_logits(m, x, True)
    l1, g1 = backward(m, c1, [3], reduction="sum")
    _, c2 = forward_with_logits(m, np.concatenate([x, x]), True)
    l2, g2 = backward(m, c2, [3, 3], reduction="sum")
    assert l2 == pytest.approx(2 * l1, rel=1e-12)
    for k in g1:
        assert np.allclose(g2[k], 2 * g1[k], rtol=1e-9, atol=1e-12)


def test_gradcheck_suite_r1():
    rows = suite_gradcheck(1)
    assert all(row.ok for row in rows), [row.line() for row in rows if not row.ok]


# --------------------------------------------------------------------------
# batch norm


def _field_stats(y, r, geo):
    a = geo(r)[1]
    pix = signal_to_pixels(a, IcoSignal(y, r, FieldType.regular(y.shape[1] // 6)))[:, NUM_CORNERS:]
    f = pix.reshape(pix.shape[0], pix.shape[1], -1, 6)
    return f.mean(axis=(0, 1, 3)), f.var(axis=(0, 1, 3))


def test_bn_normalizes_per_field(geo):
    ft = FieldType.regular(3)
    bn = BatchNorm(2, ft, np.float64)
    g, a, _ = geo(2)
    scale = np.array([2.0, 3.0, 0.2])
    x = random_signal(g, a, ft, 4, 0).data * np.repeat(scale, 6)[None, :, None, None] + 2.0
    _, var_in = _field_stats(x, 2, geo)
    y, _ = bn.forward(x, True)
    mean, var = _field_stats(y, 2, geo)
    assert np.abs(mean).max() <= 1e-5
    # the eps-regularised variance is var / (var + eps) exactly
    assert np.allclose(var, var_in / (var_in + 1e-5), rtol=1e-12)
    # and within 1e-5 of one once var_in dwarfs eps
    assert np.abs(var[:2] - 1).max() <= 1e-5
    # corners and borders stay zero
    assert np.all(signal_to_pixels(a, IcoSignal(y, 2, ft))[:, :NUM_CORNERS] == 0)


def test_bn_one_statistic_per_field(geo):
    ft = FieldType.regular(1)
    bn = BatchNorm(2, ft, np.float64)
    g, a, _ = geo(2)
    x = random_signal(g, a, ft, 2, 0).data
    x[:, 0] += 5.0  # offset one orientation channel only
    y, _ = bn.forward(x, True)
    m, _ = _field_stats(y, 2, geo)
    assert abs(m[0]) < 1e-12
    # a per-channel norm would centre channel 0 itself; per-field keeps the offset
    per_chan = signal_to_pixels(a, IcoSignal(y, 2, ft))[:, NUM_CORNERS:].mean(axis=(0, 1))
    assert per_chan[0] > 1.0


def test_bn_constant_field(geo):
    ft = FieldType.regular(2)
    bn = BatchNorm(2, ft, np.float64)
    g, a, _ = geo(2)
    x = random_signal(g, a, ft, 2, 0).data
    x[a.interior_non_corner.reshape(-1, a.shape[1])[None, None].repeat(2, 0).repeat(12, 1)] = 4.0
    y, _ = bn.forward(x, True)
    assert np.abs(y).max() == 0.0


def test_bn_equivariance(geo):
    ft = FieldType.regular(2)
    g, a, grp = geo(2)
    bn = BatchNorm(2, ft, np.float64)
    bn.params["gamma"][:] = [0.5, 2.0]
    bn.params["beta"][:] = [0.1, -0.3]
    x = random_signal(g, a, ft, 2, 0)
    y = IcoSignal(bn.forward(x.data, True)[0], 2, ft)
    for el in grp:
        lhs = act(el, y, a).data
        rhs = bn.forward(act(el, x, a).data, True)[0]
        assert np.abs(lhs - rhs).max() <= 1e-5


def test_bn_running_stats_and_empty_batch(geo):
    ft = FieldType.regular(1)
    bn = BatchNorm(2, ft, np.float64)
    g, a, _ = geo(2)
    x = random_signal(g, a, ft, 2, 0).data * 2 + 0  # variance 4/3
    bn.forward(x, True)
    assert bn.buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * 4 / 3, rel=0.05)
    with pytest.raises(ShapeError):
        bn.forward(x[:0], True)


# --------------------------------------------------------------------------
# loss and optimizer


def test_softmax_uniform_logits():
    loss, grad = softmax_xent(np.zeros((4, 7)), [0, 1, 2, 6])
    assert loss == pytest.approx(np.log(7))
    assert np.allclose(grad.sum(axis=1), 0)


def test_softmax_confident_logits():
    logits = np.full((2, 10), -1e4)
    logits[[0, 1], [3, 8]] = 1e4
    loss, _ = softmax_xent(logits, [3, 8])
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_softmax_errors():
    with pytest.raises(NumericalError):
        softmax_xent(np.array([[np.nan, 0.0]]), [0])
    with pytest.raises(ValueError):
        softmax_xent(np.zeros((1, 2)), [0], reduction="max")


def test_sgd_momentum_rule():
    w = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.5])}
    vel = sgd_step(w, g, lr=0.1, momentum=0.9)
    assert np.allclose(w["w"], [0.95, -2.05])
    sgd_step(w, g, lr=0.1, momentum=0.9, velocity=vel)
    # v = 0.9 * 0.5 + 0.5 = 0.95
    assert np.allclose(w["w"], [0.95 - 0.095, -2.05 - 0.095])
    with pytest.raises(NumericalError):
        sgd_step(w, {"w": np.array([np.inf, 0.0])}, 0.1)


def test_overfit_small_batch(geo):
    m = small(seed=1)
    x = inputs(geo, batch=8, seed=7)
    y = np.arange(8) % 10
    opt = SGD(0.05, 0.9)
    params = m.param_dict()
    for _ in range(200):
        _, cache = forward_with_logits(m, x, True)
        loss, grads = backward(m, cache, y)
        opt.step(params, grads)
    assert loss < 0.01


def test_step_schedule():
    assert [step_schedule(e, 20, 1.0) for e in (0, 11, 12, 16, 17, 19)] == pytest.approx([1, 1, 0.1, 0.1, 0.01, 0.01])
    assert step_schedule(1, 2, 0.5) == 0.5


def test_fit_writes_log(geo, tmp_path):
    m = small(r=2)
    x = inputs(geo, batch=6)
    y = np.arange(6) % 3
    rows = fit(m, x, y, epochs=2, batch=4, lr=0.01, test=(x, y), log_path=tmp_path / "log.csv", verbose=False)
    with open(tmp_path / "log.csv") as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["epoch", "split", "loss", "accuracy"]
    assert len(got) == 1 + len(rows) == 5
    assert [r[1] for r in got[1:]] == ["train", "test", "train", "test"]


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(geo, tmp_path):
    m = small("s2r")
    x = inputs(geo)
    fit(m, x, np.array([0, 1, 2]), epochs=1, batch=3, lr=0.01, verbose=False)  # moves running stats
    m.meta = {"note": "x"}
    save_model(m, tmp_path / "ck")
    m2 = load_model(tmp_path / "ck")
    assert m2.arch == "s2r" and m2.meta == {"note": "x"}
    for (k1, v1), (k2, v2) in zip(list(m.named_params()) + list(m.named_buffers()),
                                  list(m2.named_params()) + list(m2.named_buffers())):
        assert k1 == k2 and v1.dtype == v2.dtype and v1.tobytes() == v2.tobytes()
    assert np.array_equal(m.predict(x), m2.predict(x))


def test_checkpoint_truncated(tmp_path):
    m = small()
    save_model(m, tmp_path / "ck")
    blob = tmp_path / "ck" / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-10])
    with pytest.raises(FormatError):
        load_model(tmp_path / "ck")


def test_checkpoint_manifest_mismatch(tmp_path):
    import json

    m = small()
    save_model(m, tmp_path / "ck")
    man = tmp_path / "ck" / "manifest.json"
    doc = json.loads(man.read_text())
    doc["tensors"][0]["shape"] = [1, 2, 3]
    man.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_model(tmp_path / "ck")

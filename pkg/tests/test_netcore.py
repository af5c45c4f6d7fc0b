import numpy as np
import pytest
import torch

from lwm.errors import CheckpointVersionError, FormatError, FrozenModelError, InputShapeError, NumericalFailure
from lwm.netcore import (MomentumSGD, NetworkModel, extend_head, forward, grad, load_checkpoint, save_checkpoint,
                         sgd_step, small_convnet, snapshot)

from conftest import images


def loop_forward(arch, params, x):
    """Plain-loop conv/relu/maxpool/flatten/dense evaluation of one image."""
    a = np.asarray(x, dtype=np.float64)
    for layer in arch:
        kind = layer["type"]
        if kind == "conv":
            w = params[layer["name"] + ".weight"].numpy()
            b = params[layer["name"] + ".bias"].numpy()
            pad, k = layer["padding"], layer["kernel"]
            c_in, h, wd = a.shape
            padded = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
            padded[:, pad:pad + h, pad:pad + wd] = a
            out = np.zeros((w.shape[0], h + 2 * pad - k + 1, wd + 2 * pad - k + 1))
            for o in range(out.shape[0]):
                for i in range(out.shape[1]):
                    for j in range(out.shape[2]):
                        s = b[o]
                        for c in range(c_in):
                            for di in range(k):
                                for dj in range(k):
                                    s += w[o, c, di, dj] * padded[c, i + di, j + dj]
                        out[o, i, j] = s
            a = out
        elif kind == "relu":
            a = np.where(a > 0, a, 0.0)
        elif kind == "maxpool":
            n = layer["size"]
            out = np.zeros((a.shape[0], a.shape[1] // n, a.shape[2] // n))
            for c in range(out.shape[0]):
                for i in range(out.shape[1]):
                    for j in range(out.shape[2]):
                        out[c, i, j] = max(a[c, i * n + u, j * n + v] for u in range(n) for v in range(n))
            a = out
        elif kind == "flatten":
            a = a.reshape(-1)
        elif kind == "dense":
            w = params[layer["name"] + ".weight"].numpy()
            b = params[layer["name"] + ".bias"].numpy()
            a = np.array([sum(w[r, q] * a[q] for q in range(w.shape[1])) + b[r] for r in range(w.shape[0])])
    return a


def test_forward_shapes(rng):
    m = NetworkModel.small_convnet(10, image_size=16, seed=0)
    logits, feats = forward(m, images(rng, 4, s=16))
    assert logits.shape == (4, 10)
    assert feats.shape == (4, 32, 8, 8)


def test_zero_input_bias_free_gives_zero_maps():
    arch = small_convnet(3, in_channels=1, image_size=8, channels=(2, 3))
    for layer in arch:
        if layer["type"] in ("conv", "dense"):
            layer["bias"] = False
    m = NetworkModel.initialize(arch, (1, 8, 8), seed=1)
    _, feats = forward(m, torch.zeros(2, 1, 8, 8, dtype=torch.float64))
    assert torch.count_nonzero(feats) == 0


def test_forward_matches_loop_oracle(rng):
    arch = small_convnet(3, in_channels=2, image_size=8, channels=(2, 3))
    m = NetworkModel.initialize(arch, (2, 8, 8), seed=7)
    # nonzero biases so they are exercised too
    with torch.no_grad():
        for n, p in m.params.items():
            if n.endswith("bias"):
                p.copy_(torch.as_tensor(rng.normal(size=p.shape)))
    x = rng.random((2, 8, 8))
    logits, _ = forward(m, torch.as_tensor(x[None]))
    params = {n: p.detach() for n, p in m.params.items()}
    expected = loop_forward(arch, params, x)
    assert np.max(np.abs(logits[0].detach().numpy() - expected)) < 1e-10


def test_forward_rejects_bad_shape(tiny_net):
    with pytest.raises(InputShapeError):
        forward(tiny_net, torch.zeros(2, 1, 8, 8, dtype=torch.float64))


def test_forward_nonfinite_is_hard_failure(tiny_net, rng):
    x = images(rng, 1)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalFailure):
        forward(tiny_net, x)


def test_nonfinite_parameters_refused():
    m = NetworkModel.small_convnet(3, image_size=8)
    params = {n: p.detach().clone() for n, p in m.params.items()}
    params["fc.bias"][0] = float("inf")
    with pytest.raises(NumericalFailure):
        NetworkModel(m.arch, m.input_shape, params, m.tap_layer)


def test_extend_head_copies_old_rows(rng):
    m = NetworkModel.small_convnet(10, image_size=8, seed=2)
    x = images(rng, 3)
    before = forward(m, x)[0].detach()
    m2 = extend_head(m, 10, seed=5)
    after = forward(m2, x)[0].detach()
    assert m2.head_size == 20
    assert torch.equal(after[:, :10], before)


def test_extend_head_zero_init(rng):
    m = extend_head(NetworkModel.small_convnet(4, image_size=8), 1, init_scale=0.0)
    assert torch.count_nonzero(forward(m, images(rng, 5))[0][:, 4]) == 0


def test_extend_head_nine_steps_reaches_100():
    m = NetworkModel.small_convnet(10, image_size=8)
    for s in range(9):
        m = extend_head(m, 10, seed=s)
    assert m.head_size == 100


def test_snapshot_isolated_from_source(tiny_net, rng):
    x = images(rng, 2)
    snap = snapshot(tiny_net)
    before = forward(snap, x)[0].detach().clone()
    with torch.no_grad():
        for p in tiny_net.params.values():
            p.add_(1.0)
    assert torch.equal(forward(snap, x)[0].detach(), before)


def test_fresh_student_matches_teacher_on_base(tiny_net, rng):
    x = images(rng, 3)
    teacher = snapshot(tiny_net)
    student = extend_head(teacher.to_student(), 2, seed=1)
    assert torch.equal(forward(student, x)[0][:, :5].detach(), forward(teacher, x)[0].detach())


def test_two_snapshots_identical_bytes(tiny_net):
    assert snapshot(tiny_net).parameter_bytes() == snapshot(tiny_net).parameter_bytes()


def test_snapshot_forward_gives_no_parameter_grads(tiny_net, rng):
    snap = snapshot(tiny_net)
    logits, feats = forward(snap, images(rng, 2))
    assert all(not p.requires_grad for p in snap.params.values())
    assert feats.requires_grad and feats.is_leaf
    with pytest.raises(FrozenModelError):
        grad(logits.sum(), snap)


def test_sgd_zero_gradient_is_fixed_point(tiny_net):
    opt = MomentumSGD(0.5, 0.9)
    before = tiny_net.parameter_bytes()
    zeros = {n: torch.zeros_like(p) for n, p in tiny_net.params.items()}
    sgd_step(tiny_net, zeros, 0.5, 0.9, opt)
    sgd_step(tiny_net, zeros, 0.5, 0.9, opt)
    assert tiny_net.parameter_bytes() == before
    assert all(torch.count_nonzero(v) == 0 for v in opt.velocity.values())


def test_plain_sgd_update(tiny_net, rng):
    old = {n: p.detach().clone() for n, p in tiny_net.params.items()}
    g = {n: torch.as_tensor(rng.normal(size=p.shape)) for n, p in tiny_net.params.items()}
    sgd_step(tiny_net, g, 0.01, 0.0)
    for n, p in tiny_net.params.items():
        assert torch.equal(p.detach(), old[n] - 0.01 * g[n])


def _oracle_quadratic(lr, mu=0.9, steps=50):
    p, v = 1.0, 0.0
    for _ in range(steps):
        v = mu * v + 2.0 * p
        p = p - lr * v
    return p


def test_momentum_quadratic_recurrence():
    # the learning rate is left open; take the first grid lr at which the scalar oracle lands inside 1e-3
    lr = next(lr for lr in np.round(np.arange(0.05, 0.1, 1e-4), 4) if abs(_oracle_quadratic(lr)) < 1e-3)
    arch = [{"type": "flatten"}, {"type": "dense", "name": "fc", "in": 1, "out": 1, "bias": False}]
    m = NetworkModel(arch, (1, 1, 1), {"fc.weight": torch.ones(1, 1, dtype=torch.float64)}, None)
    opt = MomentumSGD(lr, 0.9)
    for _ in range(50):
        w = m.params["fc.weight"]
        opt.step(m, grad((w ** 2).sum(), m))
    p = m.params["fc.weight"].item()
    assert abs(p) < 1e-3
    assert abs(p - _oracle_quadratic(lr)) < 1e-12


def test_sgd_refuses_nonfinite_and_snapshots(tiny_net):
    g = {n: torch.zeros_like(p) for n, p in tiny_net.params.items()}
    g["fc.bias"][0] = float("nan")
    with pytest.raises(NumericalFailure):
        MomentumSGD().step(tiny_net, g)
    with pytest.raises(FrozenModelError):
        MomentumSGD().step(snapshot(tiny_net), g)


def test_grad_linear_layer_is_column_sums(rng):
    w = torch.as_tensor(rng.normal(size=(4, 3)))
    x = torch.as_tensor(rng.normal(size=(1, 3)), dtype=torch.float64).requires_grad_(True)
    g = grad((x @ w.T).sum(), x)
    assert torch.allclose(g[0], w.sum(0), atol=1e-15)


def test_grad_unconnected_is_zero(tiny_net):
    extra = torch.ones(3, dtype=torch.float64, requires_grad=True)
    g = grad(tiny_net.params["fc.bias"].sum(), {"a": extra, "b": tiny_net.params["fc.bias"]})
    assert torch.count_nonzero(g["a"]) == 0
    assert torch.equal(g["b"], torch.ones(5, dtype=torch.float64))


def test_grad_matches_finite_differences(rng):
    arch = [{"type": "flatten"}, {"type": "dense", "name": "d1", "in": 6, "out": 5}, {"type": "sigmoid"},
            {"type": "dense", "name": "d2", "in": 5, "out": 3}]
    m = NetworkModel.initialize(arch, (6, 1, 1), tap_layer=None, seed=4)
    x = torch.as_tensor(rng.normal(size=(4, 6, 1, 1)))
    target = torch.as_tensor(rng.normal(size=(4, 3)))

    def loss():
        return ((forward(m, x)[0] - target) ** 2).sum() * 0.5 + forward(m, x)[0].exp().sum() * 0.01

    g = grad(loss(), m)
    h, worst = 1e-5, 0.0
    with torch.no_grad():
        for name, p in m.params.items():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                an = g[name].view(-1)[i].item()
                worst = max(worst, abs(an - fd) / max(abs(fd), abs(an), 1e-8))
    assert worst < 1e-4


def test_checkpoint_round_trip(tmp_path, tiny_net):
    opt = MomentumSGD(0.1, 0.9)
    opt.step(tiny_net, {n: torch.ones_like(p) for n, p in tiny_net.params.items()})
    path = tmp_path / "c.npz"
    save_checkpoint(path, tiny_net, [3, 1, 4], opt, {"step": 2}, {"note": "x"})
    ck = load_checkpoint(path)
    assert ck.model.parameter_bytes() == tiny_net.parameter_bytes()
    assert ck.class_labels == [3, 1, 4]
    assert ck.rng_state == {"step": 2} and ck.extra == {"note": "x"}
    for n, v in opt.velocity.items():
        assert torch.equal(ck.optimizer_state["velocity"][n], v)


def test_checkpoint_version_and_corruption(tmp_path, tiny_net):
    import json
    import zipfile

    path = tmp_path / "c.npz"
    save_checkpoint(path, tiny_net)
    data = dict(np.load(path))
    meta = json.loads(bytes(data["__meta__"]).decode())
    meta["schema_version"] = 99
    data["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp_path / "v.npz", **data)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.npz")
    (tmp_path / "bad.npz").write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.npz")
    assert zipfile.is_zipfile(path)

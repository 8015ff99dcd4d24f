import numpy as np
import pytest

from gvsl import geometry, models
from gvsl.autodiff import Graph, ShapeError, check_gradients, ops

ARCH = models.BackboneArch()


def run(build, bindings, dtype=np.float64):
    g = Graph(dtype=dtype)
    P = models.Params(g)
    nodes = {k: g.input(k) for k in bindings if not k.startswith(models.NAMESPACES)}
    outs = build(g, P, nodes)
    for k, v in outs.items():
        g.output(k, v)
    return g, g.evaluate(bindings)


def test_backbone_shapes(rng):
    w = models.init_weights(0)
    x = rng.uniform(size=(1, 1, 32, 32, 32))
    _, out = run(lambda g, P, n: dict(zip(("fg", "fl"), models.backbone_forward(P, n["x"], ARCH))),
                 {"x": x, **w.params})
    assert out["fl"].shape == (1, 8, 32, 32, 32)
    assert out["fg"].shape == (1, 16, 8, 8, 8)


def test_backbone_deterministic(rng):
    w = models.init_weights(0)
    x = rng.uniform(size=(1, 1, 16, 16, 16))
    b = {"x": x, **w.params}
    _, o1 = run(lambda g, P, n: {"fl": models.backbone_forward(P, n["x"], ARCH)[1]}, b)
    _, o2 = run(lambda g, P, n: {"fl": models.backbone_forward(P, n["x"], ARCH)[1]}, b)
    assert o1["fl"].tobytes() == o2["fl"].tobytes()


def test_zero_weights_give_constant_maps(rng):
    w = models.init_weights(0)
    params = {k: (np.zeros_like(v) if k.endswith("/w") else v) for k, v in w.params.items()}
    params = {k: (np.full_like(v, 0.3) if k.endswith("/b") else v) for k, v in params.items()}
    _, out = run(lambda g, P, n: {"fl": models.backbone_forward(P, n["x"], ARCH)[1]},
                 {"x": rng.uniform(size=(1, 1, 16, 16, 16)), **params})
    fl = out["fl"][0]
    assert np.all(np.ptp(fl.reshape(8, -1), axis=1) == 0)


def test_indivisible_extent():
    with pytest.raises(ShapeError):
        ARCH.check_extent((30, 32, 32))
    with pytest.raises(ValueError):
        models.BackboneArch(base_channels=6, groups=4)


def test_init_is_seeded():
    a, b, c = models.init_weights(1), models.init_weights(1), models.init_weights(2)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params)
    assert all(models.namespace_of(k) in models.NAMESPACES for k in a.params)


def heads(g, P, n, arch=ARCH):
    fg_a, fl_a = models.backbone_forward(P, n["a"], arch)
    fg_b, fl_b = models.backbone_forward(P, n["b"], arch)
    m = models.zmatch_forward(P, fg_a, fl_a, fg_b, fl_b, n["a_ext"], arch)
    r = models.restoration_head_forward(P, fl_a, arch)
    return {"affine": m.affine_params, "deform": m.deform, "dvf": m.dvf, "restored": r,
            "x_ab": geometry.warp_node(n["a"], m.dvf)}


def forward_pair(params, a, b):
    ext = a.shape[2:]

    def build(g, P, n):
        n = dict(n, a_ext=ext)
        return heads(g, P, n)

    return run(build, {"a": a, "b": b, **params})


def test_identity_at_init(rng):
    w = models.init_weights(0)
    a, b = rng.uniform(size=(2, 2, 1, 16, 16, 16))
    _, out = forward_pair(w.params, a, b)
    np.testing.assert_array_equal(out["affine"], np.tile(geometry.AffineParams().to_vector(), (2, 1)))
    assert not out["deform"].any() and not out["dvf"].any()
    assert out["x_ab"].tobytes() == a.tobytes()
    assert out["restored"].shape == a.shape
    assert out["restored"].min() > 0 and out["restored"].max() < 1


def generic_weights(seed=0):
    w = models.init_weights(seed)
    r = np.random.default_rng(seed + 100)
    for k in w.params:
        if k.startswith("zmatch") and (k.endswith("/w") or "/out/" in k):
            w.params[k] = r.standard_normal(w.params[k].shape) * 0.05
    return w


def test_swapping_pair_changes_affine(rng):
    w = generic_weights()
    a, b = rng.uniform(size=(2, 1, 1, 16, 16, 16))
    _, ab = forward_pair(w.params, a, b)
    _, ba = forward_pair(w.params, b, a)
    assert not np.allclose(ab["affine"], ba["affine"])


def test_affine_head_gradient_reaches_features(rng):
    w = generic_weights()

    def build(g, n):
        P = models.Params(g)
        for k, v in w.params.items():
            if k.startswith("zmatch.affine"):
                P.nodes[k] = g.constant(v)
        return models.affine_head_forward(P, n["fa"], n["fb"])

    rep = check_gradients(build, {"fa": rng.standard_normal((1, 16, 2, 2, 2)),
                                  "fb": rng.standard_normal((1, 16, 2, 2, 2))}, seed=0)
    assert rep.passed
    g = Graph()
    P = models.Params(g)
    fa = g.input("fa", requires_grad=True)
    loss = ops.sum(models.affine_head_forward(P, fa, g.input("fb")))
    g.evaluate({"fa": rng.standard_normal((1, 16, 2, 2, 2)), "fb": rng.standard_normal((1, 16, 2, 2, 2)),
                **{k: v for k, v in w.params.items() if k.startswith("zmatch.affine")}})
    assert np.abs(g.backpropagate(loss)["fa"]).max() > 0


def test_deform_head_gradient_wrt_affine_params(rng):
    # spot check on 8^3: d(sum of deform map)/d(affine params) flows through the alignment warp
    w = generic_weights()
    fl_a = rng.standard_normal((1, 8, 8, 8, 8))
    fl_b = rng.standard_normal((1, 8, 8, 8, 8))
    theta0 = geometry.AffineParams(rotation=(0.03, -0.02, 0.05), translation=(0.31, -0.22, 0.17)).to_vector()[None]

    def build(g, n):
        P = models.Params(g)
        for k, v in w.params.items():
            if k.startswith("zmatch.deform"):
                P.nodes[k] = g.constant(v)
        aff = geometry.affine_field_node(geometry.affine_matrix_node(n["theta"]), (8, 8, 8))
        aligned = geometry.warp_node(g.constant(fl_a), aff)
        return models.deformable_head_forward(P, aligned, g.constant(fl_b), ARCH)

    # the warp and leaky ReLU are piecewise linear; a tiny step keeps probes off the kinks
    rep = check_gradients(build, {"theta": theta0}, seed=0, h=1e-6)
    print("deform head wrt affine params", rep.max_rel_err)
    assert rep.passed
    g = Graph()
    theta = g.input("theta", requires_grad=True)
    loss = ops.sum(ops.square(build(g, {"theta": theta})))
    g.evaluate({"theta": theta0})
    assert np.abs(g.backpropagate(loss)["theta"]).max() > 1e-6


def test_zero_init_heads(rng):
    w = models.init_weights(3)
    for k, v in w.params.items():
        if k.startswith("zmatch.") and ("/out/" in k or k.startswith("zmatch.affine")):
            assert not v.any(), k


def test_backbone_gradients_nonzero_for_generic_batch(rng):
    w = generic_weights()
    a, b = rng.uniform(size=(2, 1, 1, 16, 16, 16))
    g, _ = forward_pair(w.params, a, b)
    loss = ops.mean(ops.square(g.outputs["x_ab"] - g.constant(b))) + ops.mean(g.outputs["restored"])
    g.evaluate({"a": a, "b": b, **w.params})
    grads = g.backpropagate(loss)
    assert all(np.abs(grads[k]).max() > 0 for k in grads if k.startswith("backbone/") and k.endswith("/w"))


def test_local_features_shape(rng):
    w = models.init_weights(0)
    f = models.local_features(w, rng.uniform(size=(2, 16, 16, 16)))
    assert f.shape == (2, 8, 16, 16, 16)

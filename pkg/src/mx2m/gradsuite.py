"""Finite-difference gradient checks for every encoder and head.

Each case is small enough that central differences over all parameters run in
well under a second; the whole suite backs the ``grad-check`` command.
"""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .model import ModelConfig, Mx2MModel, dxmf, linear, mlp
from .numcore import Tensor

TOLERANCE = 1e-4


def _probe(out, rng):
    # random projection turns any output into a scalar with a generic gradient
    return nc.sum(nc.mul(out, Tensor(rng.normal(size=out.shape))))


def _cases(seed=0):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_classes=4, f2d=3, f3d=3, conv_layers=2, xmrp_mid=5)
    model = Mx2MModel(cfg, seed=seed)
    p = {k: t.data for k, t in model.params.items()}
    image = rng.normal(size=(1, 8, 8, 3))
    feats3d = rng.normal(size=(8, cfg.in3d))
    segments = [np.array([0, 0, 1, 2, 1, 3, 3, 0]), np.array([0, 0, 1, 1, 1, 0, 0, 0])]
    h2 = rng.uniform(0.1, 1.0, size=(8, 3))
    h3 = rng.uniform(0.1, 1.0, size=(8, 3))
    enc2 = {k: v for k, v in p.items() if k.startswith("enc2d.")}
    enc3 = {k: v for k, v in p.items() if k.startswith("enc3d.")}
    probe_seed = int(rng.integers(1 << 31))

    def encode2d(image, **params):
        m = Mx2MModel(cfg, params={**model.params, **params})
        return _probe(m.encode2d(image), np.random.default_rng(probe_seed))

    def encode3d(feats, **params):
        m = Mx2MModel(cfg, params={**model.params, **params})
        return _probe(m.encode3d(feats, segments, [4, 2]), np.random.default_rng(probe_seed))

    def dxmf_head(h_self, h_other, gen_w, gen_b):
        return _probe(dxmf(h_self, h_other, gen_w, gen_b, 4), np.random.default_rng(probe_seed))

    def mimic_head(h_self, w, b):
        return _probe(linear(h_self, w, b), np.random.default_rng(probe_seed))

    def xmrp_head(h_self, w1, b1, w2, b2):
        return _probe(mlp(h_self, w1, b1, w2, b2), np.random.default_rng(probe_seed))

    yield "encode2d", encode2d, {"image": image, **enc2}
    yield "encode3d", encode3d, {"feats": feats3d, **enc3}
    for mod, (hs, ho) in {"2d": (h2, h3), "3d": (h3, h2)}.items():
        yield f"dxmf{mod}", dxmf_head, {"h_self": hs, "h_other": ho,
                                        "gen_w": p[f"seg{mod}.gen.w"], "gen_b": p[f"seg{mod}.gen.b"]}
        yield f"mimic{mod}", mimic_head, {"h_self": hs, "w": p[f"mimic{mod}.w"], "b": p[f"mimic{mod}.b"]}
        yield f"xmrp{mod}", xmrp_head, {"h_self": hs, **{k: p[f"xmrp{mod}.{k}"] for k in ("w1", "b1", "w2", "b2")}}


def run_suite(h=1e-6, seed=0):
    """Return ``{case: max relative error over its inputs}``."""
    return {name: max(nc.gradcheck(fn, inputs, h=h).values()) for name, fn, inputs in _cases(seed)}

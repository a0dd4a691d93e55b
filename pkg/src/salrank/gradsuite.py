"""Finite-difference verification of every primitive and of the composed modules.

Each case builds ``(f, x)`` from a generator; ``run_suite`` checks it over many
seeds and keeps the worst relative error per case.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from . import ocor, sos
from .autograd import Tensor, grad_check
from .params import map_tensors, named_tensors

Case = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _readout(case):
    """Reduce a tensor-valued primitive to a scalar with a fixed random linear read-out."""

    def build(rng: np.random.Generator):
        x0 = rng.uniform(-2, 2, (3, 4))
        const_seed = int(rng.integers(2**32))
        w_seed = int(rng.integers(2**32))
        weights = {}

        def f(x):
            out = case(x, np.random.default_rng(const_seed))
            if "w" not in weights:
                weights["w"] = np.random.default_rng(w_seed).normal(size=out.shape)
            return ag.total_sum(out * weights["w"])

        return f, x0

    return build


PRIMITIVE_CASES: dict[str, Case] = {
    name: _readout(fn)
    for name, fn in {
        "matmul": lambda x, r: ag.matmul(x, Tensor(r.uniform(-2, 2, (4, 2)))),
        "matmul_right": lambda x, r: ag.matmul(Tensor(r.uniform(-2, 2, (2, 3))), x),
        "matmul_batched": lambda x, r: ag.matmul(ag.reshape(x, (3, 2, 2)), Tensor(r.uniform(-2, 2, (3, 2, 2)))),
        "add": lambda x, r: ag.add(x, Tensor(r.uniform(-2, 2, x.shape))),
        "sub": lambda x, r: ag.sub(Tensor(r.uniform(-2, 2, x.shape)), x),
        "mul_elementwise": lambda x, r: ag.mul_elementwise(x, x),
        "scalar_mul": lambda x, r: ag.scalar_mul(x, -1.7),
        "transpose": lambda x, r: ag.transpose(x),
        "reshape": lambda x, r: ag.reshape(x, (4, 3)),
        "concat_lastdim": lambda x, r: ag.concat_lastdim([x, x * 2.0, Tensor(np.ones((3, 1)))]),
        "slice": lambda x, r: x[1:, ::2],
        "mean_axis": lambda x, r: ag.mean_axis(x, 0),
        "sum_axis": lambda x, r: ag.sum_axis(x, 1, keepdims=True),
        "sum_axis_sorted": lambda x, r: ag.sum_axis(x, 1, order_invariant=True),
        "relu": lambda x, r: ag.relu(x),
        "sigmoid": lambda x, r: ag.sigmoid(x),
        "softmax_axis": lambda x, r: ag.softmax_axis(x, 1),
        "layer_norm_lastdim": lambda x, r: ag.layer_norm_lastdim(x),
        "max_elementwise_pair": lambda x, r: ag.max_elementwise_pair(x, Tensor(r.uniform(-2, 2, x.shape))),
        "broadcast_to": lambda x, r: ag.broadcast_to(ag.sum_axis(x, 0, keepdims=True), (2, 3, 4)),
        "div": lambda x, r: ag.div(x, Tensor(r.uniform(0.5, 2, x.shape))),
        "log": lambda x, r: ag.log(x * x + 0.5),
        "sqrt": lambda x, r: ag.sqrt(x * x + 0.5),
        "abs": lambda x, r: ag.abs_(x),
        "log_softmax_axis": lambda x, r: ag.log_softmax_axis(x, 0),
    }.items()
}


def sos_case(rng: np.random.Generator):
    c = int(rng.choice([4, 8]))
    p = sos.RectifyParams.init(c, rng)
    p = sos.RectifyParams(p.fc1_w, Tensor(rng.normal(0, 0.3, p.fc1_b.shape)), p.fc2_w, p.fc2_b)
    x0 = rng.uniform(-2, 2, (3, 3, c))
    w = rng.normal(size=x0.shape)
    return (lambda x: ag.total_sum(sos.sos_forward(x, p) * w)), x0


def ocor_case(rng: np.random.Generator):
    n = int(rng.integers(2, 4))
    heads = int(rng.choice([1, 2, 4]))
    p = ocor.OcorParams.init(8, heads, rng)
    p = ocor.OcorParams(p.w_k, p.w_q, p.w_v, p.w_o, Tensor(rng.uniform(0.5, 1.5, 8)), Tensor(rng.normal(0, 0.3, 8)))
    x0 = rng.normal(size=(n, 2, 2, 8))
    w = rng.normal(size=x0.shape)
    return (lambda x: ag.total_sum(ocor.ocor_forward(x, p) * w)), x0


# The end-to-end loss is probed through tensors upstream of every module: the
# stem feeds ROI, SOS, OCOR, both heads and the mask decoder; the initial
# queries feed self-attention, the ranking head and the mask decoder. Some
# SOS/OCOR parameter components have gradients near 1e-10, below the roundoff
# floor of central differences on a loss of order 10, so those parameters are
# checked at module level instead (sos_params, ocor_params).
END_TO_END_TARGETS = ("stem_w", "init_queries")


def sos_params_case(rng: np.random.Generator):
    c = int(rng.choice([4, 8]))
    p = sos.RectifyParams.init(c, rng)
    p = sos.RectifyParams(p.fc1_w, Tensor(rng.normal(0, 0.3, p.fc1_b.shape)), p.fc2_w, p.fc2_b)
    fmap = Tensor(rng.uniform(-2, 2, (3, 3, c)))
    w = rng.normal(size=fmap.shape)

    def f(x):
        q = sos.RectifyParams(x, p.fc1_b, p.fc2_w, p.fc2_b)
        return ag.total_sum(sos.sos_forward(fmap, q) * w)

    return f, p.fc1_w.data


def ocor_params_case(rng: np.random.Generator):
    heads = int(rng.choice([1, 2, 4]))
    p = ocor.OcorParams.init(8, heads, rng)
    feats = Tensor(rng.normal(size=(int(rng.integers(2, 4)), 2, 2, 8)))
    w = rng.normal(size=feats.shape)
    which = int(rng.integers(4))

    def f(x):
        mats = [p.w_k, p.w_q, p.w_v, p.w_o]
        mats[which] = x
        q = ocor.OcorParams(*mats, p.ln_scale, p.ln_shift)
        return ag.total_sum(ocor.ocor_forward(feats, q) * w)

    return f, [p.w_k, p.w_q, p.w_v, p.w_o][which].data


def end_to_end_case(rng: np.random.Generator):
    """Total training loss of the toy pipeline (N=3, C=8, T=1) w.r.t. an upstream parameter tensor."""
    from .rankpipe.model import PipelineConfig, PipelineParams, forward
    from .rankpipe.scenes import SceneConfig, generate_scene
    from .rankpipe.train import TrainConfig, total_loss

    cfg = PipelineConfig(channels=8, num_queries=3, stages=1, heads=4, image_size=16, grid=8,
                         roi_size=4, mask_size=8)
    seed = int(rng.integers(2**32))
    params = PipelineParams.init(cfg, seed=seed)
    scene_cfg = SceneConfig(seed=seed, image_size=16, min_objects=1, max_objects=3, min_radius=2.0, max_radius=4.0)
    batch = [generate_scene(scene_cfg, 0)]
    images = np.stack([s.image for s in batch])
    target = END_TO_END_TARGETS[int(rng.integers(len(END_TO_END_TARGETS)))]
    tcfg = TrainConfig()
    x0 = named_tensors(params)[target].data

    def f(x):
        swapped = map_tensors(params, lambda name, t: x if name == target else t)
        return total_loss(forward(images, swapped, cfg), batch, cfg, tcfg)

    return f, x0


@dataclass
class SuiteRow:
    name: str
    seeds: int
    max_relative_error: float
    tol: float
    worst_seed: int  # index k of the worst draw

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tol


def check_case(name: str, case: Case, seed: int, n_seeds: int, tol: float, eps: float = 1e-5) -> SuiteRow:
    worst, worst_seed = -1.0, 0
    for k in range(n_seeds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k, *name.encode()]))
        f, x0 = case(rng)
        rep = grad_check(f, x0, eps=eps, tol=tol)
        if rep.max_relative_error > worst:
            worst, worst_seed = float(rep.max_relative_error), k
    return SuiteRow(name, n_seeds, worst, tol, worst_seed)


def run_suite(seed: int = 0, n_seeds: int = 20, tol: float = 1e-3,
              primitive_tol: float = 1e-4) -> list[SuiteRow]:
    """Primitives at ``min(tol, primitive_tol)``; composed modules and the full loss at ``tol``."""
    rows = [check_case(name, case, seed, n_seeds, min(tol, primitive_tol))
            for name, case in sorted(PRIMITIVE_CASES.items())]
    rows.append(check_case("sos_forward", sos_case, seed, n_seeds, tol))
    rows.append(check_case("ocor_forward", ocor_case, seed, n_seeds, tol))
    rows.append(check_case("sos_params", sos_params_case, seed, n_seeds, tol))
    rows.append(check_case("ocor_params", ocor_params_case, seed, n_seeds, tol))
    rows.append(check_case("end_to_end_loss", end_to_end_case, seed, n_seeds, tol))
    return rows


def format_table(rows: list[SuiteRow]) -> str:
    lines = [f"{'case':<24} {'seeds':>5} {'max_rel_err':>12} {'tol':>8}  result"]
    for r in rows:
        lines.append(f"{r.name:<24} {r.seeds:>5} {r.max_relative_error:>12.3e} {r.tol:>8.1e}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"


if __name__ == "__main__":  # pragma: no cover
    t0 = time.perf_counter()
    print(format_table(run_suite()), f"{time.perf_counter() - t0:.1f}s")

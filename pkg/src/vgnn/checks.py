"""Self-check suites run by ``vgnn check``: gradient checks of every
differentiable op and of the whole model, plus the graph-generation oracles."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import graphgen
from .ingest import GridSpec
from .model import DMVSTVGNN, ModelConfig
from .oracles import naive_aggregate, pearson_two_pass
from .trainer import smooth_l1


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def op_gradient_cases(rng: np.random.Generator):
    """``(name, fn, x)`` triples covering each differentiable op.

    Each ``fn`` contracts the op output with fixed random weights so every
    output element reaches the scalar. relu/leaky_relu inputs are kept at
    least 0.1 away from the kink.
    """
    def leaf(*shape):
        return dc.Tensor(rng.normal(size=shape), requires_grad=True)

    def off_kink(*shape):
        x = np.sign(rng.normal(size=shape)) * rng.uniform(0.1, 2.0, size=shape)
        return dc.Tensor(x, requires_grad=True)

    def w(*shape):
        return dc.Tensor(rng.normal(size=shape))

    def dot(t, weights):
        return dc.sum(dc.mul(t, weights))

    mask = rng.random((5, 5)) < 0.5
    np.fill_diagonal(mask, True)
    bn = dc.BatchNormState(rng.normal(size=3) * 0.1, rng.uniform(0.5, 2.0, size=3))
    gamma, beta = w(3), w(3)
    B, C, W = w(4, 3), w(2, 5), w(3, 4, 2)
    Wmm, W23, W43, W52, W10 = w(2, 3), w(2, 3), w(4, 3), w(5, 2), w(10)
    W55, W5 = w(5, 5), w(5)
    return [
        ("matmul", lambda x: dot(dc.matmul(x, B), Wmm), leaf(2, 4)),
        ("add", lambda x: dot(dc.add(x, W5), C), leaf(2, 5)),
        ("hadamard", lambda x: dc.sum(dc.mul(x, x)), leaf(3, 4)),
        ("concat", lambda x: dot(dc.concat([x, dc.scale(x, 2.0)], axis=0), W43), leaf(2, 3)),
        ("sigmoid", lambda x: dot(dc.sigmoid(x), C), leaf(2, 5)),
        ("relu", lambda x: dot(dc.relu(x), C), off_kink(2, 5)),
        ("leaky_relu", lambda x: dot(dc.leaky_relu(x, 0.2), C), off_kink(2, 5)),
        ("softmax_masked", lambda x: dot(dc.softmax(x, -1, mask), W55), leaf(5, 5)),
        ("conv1d_same", lambda x: dot(dc.conv1d_same(x, W), W52), leaf(5, 4)),
        ("batchnorm_train", lambda x: dot(dc.batchnorm(x, gamma, beta, bn, True), W43), leaf(4, 3)),
        ("batchnorm_eval", lambda x: dot(dc.batchnorm(x, gamma, beta, bn, False), W43), leaf(4, 3)),
        ("sum_mean", lambda x: dot(dc.mean(dc.mul(x, x), axis=0), W5), leaf(2, 5)),
        ("reshape_transpose", lambda x: dot(dc.reshape(dc.transpose(x, (1, 0)), (10,)), W10), leaf(2, 5)),
        ("getitem", lambda x: dot(x[:, 1:4], W23), leaf(2, 5)),
    ]


def check_op_gradients(seed: int = 0, tol: float = 1e-4) -> CheckResult:
    t = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = ("", 0.0)
    for name, fn, x in op_gradient_cases(rng):
        err = dc.grad_check(fn, x, 1e-5)
        if err > worst[1]:
            worst = (name, err)
    return CheckResult("op gradients", worst[1] < tol,
                       f"max rel err {worst[1]:.2e} ({worst[0] or '-'})", time.perf_counter() - t)


@dataclass
class ModelGradReport:
    errors: dict[str, float]
    skipped: int        # coordinates whose probe crossed an activation kink
    checked: int

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def model_gradient_errors(seed: int = 0, cfg: ModelConfig | None = None, batch: int = 3,
                          h: float = 1e-5, target_offset: float = 0.1) -> ModelGradReport:
    """Relative error of every parameter gradient of the Smooth-L1 loss.

    Batchnorm runs in eval mode with random running statistics. Targets are
    the current predictions plus uniform noise of width ``target_offset``,
    i.e. the small-loss regime a trained model sits in; this keeps the
    central-difference roundoff (about eps*|f|/h) well under the 1e-8 floor
    of the relative error for coordinates whose true gradient is zero.
    Coordinates whose +-h probe flips an activation pattern are excluded
    and counted.
    """
    cfg = cfg or ModelConfig(N=6, M=4, C1=6, C3=3, L=2, d_k=4)
    rng = np.random.default_rng(seed)
    model = DMVSTVGNN(cfg, seed=seed)
    adj = {}
    for kind in cfg.graphs:
        scores = rng.normal(size=(cfg.N, cfg.N))
        adj[kind] = graphgen.build_adjacency(scores + scores.T, 0.3)
    x = rng.normal(size=(batch, cfg.M, cfg.N))
    model.bn_state.mean = rng.normal(size=cfg.d_f1) * 0.1
    model.bn_state.var = rng.uniform(0.5, 2.0, size=cfg.d_f1)
    y = model.forward(x, adj).data + rng.uniform(-target_offset, target_offset, size=(batch, cfg.N))

    def loss():
        return smooth_l1(model.forward(x, adj, training=False), y)

    errs, skipped, checked = {}, 0, 0
    for name, p in model.named_parameters():
        model.zero_grad()
        loss().backward()
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric, crossed = dc.numerical_grad(lambda: loss().data, p, h, return_crossings=True)
        errs[name] = dc.relative_error(analytic, numeric, ~crossed)
        skipped += int(crossed.sum())
        checked += int((~crossed).sum())
    return ModelGradReport(errs, skipped, checked)


def check_model_gradient(seed: int = 0, tol: float = 1e-4) -> CheckResult:
    t = time.perf_counter()
    rep = model_gradient_errors(seed)
    name, err = rep.worst
    return CheckResult("model gradient", err < tol,
                       f"max rel err {err:.2e} ({name}); {rep.checked} checked, "
                       f"{rep.skipped} skipped at kinks", time.perf_counter() - t)


def random_aggregation_instance(rng: np.random.Generator, max_cells: int = 12):
    """Random grid, retained cells and float series with planted similarity."""
    rows, cols = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    n_cells = rows * cols
    k = int(rng.integers(1, min(max_cells, n_cells) + 1))
    cells = np.sort(rng.choice(n_cells, size=k, replace=False))
    T = int(rng.integers(8, 40))
    latent = rng.normal(size=(3, T))
    series = np.zeros((T, n_cells))
    for c in range(n_cells):
        series[:, c] = latent[rng.integers(0, 3)] + rng.uniform(0.2, 1.5) * rng.normal(size=T)
    spec = GridSpec(0.0, 1.0, 0.0, 1.0, rows, cols)
    eps = float(rng.uniform(-0.3, 0.8))
    return spec, [int(c) for c in cells], series, eps


def aggregation_matches_oracle(spec, cells, series, eps) -> bool:
    nodes = graphgen.aggregate_regions(cells, series, eps, spec)
    got = [n.member_cells for n in nodes]
    by_cell = {c: list(series[:, c]) for c in cells}
    return got == naive_aggregate(cells, by_cell, spec.cols, eps)


def check_aggregation(n: int = 50, seed: int = 0) -> CheckResult:
    t = time.perf_counter()
    rng = np.random.default_rng(seed)
    bad = sum(not aggregation_matches_oracle(*random_aggregation_instance(rng)) for _ in range(n))
    return CheckResult("aggregation oracle", bad == 0, f"{n - bad}/{n} instances agree",
                       time.perf_counter() - t)


def check_pearson(n: int = 200, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    t = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        m = int(rng.integers(2, 50))
        a, b = rng.normal(size=m) * 10, rng.normal(size=m) + rng.normal() * np.arange(m)
        worst = max(worst, abs(graphgen.pearson(a, b) - pearson_two_pass(a, b)))
    return CheckResult("pearson oracle", worst < tol, f"max abs diff {worst:.2e}",
                       time.perf_counter() - t)


def check_adjacency(n: int = 30, seed: int = 0) -> CheckResult:
    t = time.perf_counter()
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(n):
        N = int(rng.integers(20, 61))
        s = rng.normal(size=(N, N))
        A = graphgen.build_adjacency(s, 0.1)
        k = graphgen.neighbor_count(N, 0.1)
        ok &= bool((A == A.T).all() and (np.diag(A) == 0).all() and (A.sum(axis=1) >= k).all())
    return CheckResult("adjacency invariants", ok, f"{n} random score matrices",
                       time.perf_counter() - t)


def run_all(seed: int = 0) -> list[CheckResult]:
    return [check_op_gradients(seed), check_model_gradient(seed), check_aggregation(seed=seed),
            check_pearson(seed=seed), check_adjacency(seed=seed)]

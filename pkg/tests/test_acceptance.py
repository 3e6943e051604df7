"""Acceptance gate: one test per criterion, each at its stated tolerance.

Every test collects all of its sub-checks before asserting, records a
PASS/FAIL line (printed in the terminal summary) and then fails with the
list of violated checks.
"""

import json
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE, gradcheck
from nasb.autograd import Tensor, backward, ops
from nasb.autograd.ops import ConvSpec
from nasb.binarize import (
    binarize_activations,
    pack_input,
    pack_weight,
    scaling_coefficients,
    sign,
    xnor_conv2d,
)
from nasb.cell import ALL_KINDS, Genotype, OperationKind, RetainSpec, derive, toy_plan
from nasb.cell.supercell import CellArch, NetArch
from nasb.checkpoint import load_checkpoint
from nasb.cli import main as cli
from nasb.costmodel import model_cost, nasb_resnet18_genotype, op_cost
from nasb.data import load_dataset_dir
from nasb.nasgate import gate_grad_to_alpha, path_weights, sample_gates
from nasb.trainer import arch_from_checkpoint, evaluate, model_from_checkpoint

K = OperationKind


class Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.failures: list[str] = []
        self.notes: list[str] = []

    def check(self, ok, what: str) -> None:
        if not ok:
            self.failures.append(what)

    def note(self, text: str) -> None:
        self.notes.append(text)

    def finish(self) -> None:
        ok = not self.failures
        detail = "; ".join(self.notes if ok else self.failures[:3] + ([f"+{len(self.failures) - 3} more"] if len(self.failures) > 3 else []))
        line = f"{self.title} ({detail})" if detail else self.title
        ACCEPTANCE[self.number] = (ok, line)
        print(f"criterion {self.number}: {'PASS' if ok else 'FAIL'}  {line}")
        assert ok, "\n".join(self.failures)


def sq(t):
    return t * t


def cube(t):
    return t * t * t


def within(value, target, tol):
    return abs(value / target - 1) < tol


# ----------------------------------------------------------------------------


def test_criterion_1_cost_table():
    c = Criterion(1, "cost table reproduction")
    rows = [
        ("resnet18", 374.1, 1.81e9, 0.02),
        ("resnet34", 697.3, 3.66e9, 0.02),
        ("resnet50", 817.8, 3.86e9, 0.02),
        ("bireal-resnet18", 33.6, 1.63e8, 0.02),
        ("bireal-resnet34", 43.7, 1.93e8, 0.02),
        ("bireal-resnet50", 176.8, 5.45e8, 0.02),
        ("nasb-resnet18", 33.8, 1.71e8, 0.05),
    ]
    slowest = 0.0
    for name, mbit, flops, tol in rows:
        t = time.perf_counter()
        r = model_cost(name)
        elapsed = time.perf_counter() - t
        slowest = max(slowest, elapsed)
        c.check(within(r.memory_mbit, mbit, tol), f"{name} memory {r.memory_mbit:.2f} vs {mbit} Mbit")
        c.check(within(r.flops, flops, tol), f"{name} Flops {r.flops:.4g} vs {flops:.3g}")
        c.check(elapsed < 1.0, f"{name} took {elapsed:.2f}s")
    c.check(nasb_resnet18_genotype().op_counts() == {K.MAX_POOL3: 12, K.IDENTITY: 4}, "NASB ResNet18 composition")
    c.note(f"{len(rows)} rows, slowest {slowest * 1e3:.0f} ms")
    c.finish()


def test_criterion_2_unit_costs():
    c = Criterion(2, "unit-cost table")

    def cost(kind, c_in, c_out=16, hw=7):
        spec = ConvSpec.square(c_in, c_out, max(kind.kernel, 1), 1, kind.dilation)
        return op_cost(kind, spec, hw, hw, d=32)

    for c_in in (1, 3, 16, 64, 512):
        for field in ("bitwise_ops", "binary_params"):
            def ratio(a, b):
                return Fraction(getattr(cost(a, c_in), field), getattr(cost(b, c_in), field))

            c.check(ratio(K.CONV1, K.DIL_CONV1) == 1 and ratio(K.CONV1, K.CONV3) == Fraction(1, 9), f"Conv1 {field} C_in={c_in}")
            c.check(ratio(K.CONV3, K.DIL_CONV3) == 1, f"Conv3 vs DilConv3 {field} C_in={c_in}")
            c.check(ratio(K.CONV5, K.DIL_CONV5) == 1 and ratio(K.CONV5, K.CONV3) == Fraction(25, 9), f"Conv5 {field} C_in={c_in}")
            c.check(ratio(K.DIL_CONV1, K.CONV3) == Fraction(1, 9), f"DilConv1 {field} C_in={c_in}")
            c.check(ratio(K.DIL_CONV5, K.CONV3) == Fraction(25, 9), f"DilConv5 {field} C_in={c_in}")
    for kind in (K.AVG_POOL3, K.MAX_POOL3):
        c.check(all(cost(kind, ci).binary_params == 0 for ci in (1, 15, 300)), f"{kind.tag} Bp")
        above = [ci for ci in range(15, 1025) if Fraction(cost(kind, ci, ci).bitwise_ops, cost(K.CONV3, ci, ci).bitwise_ops) >= 1]
        c.check(not above, f"{kind.tag} Bo >= 1 unit for C_in {above[0]}..{above[-1]}" if above else "")
    c.note("Bo/Bp ratios exact; pooling Bp = 0; pooling Bo < 1 unit for C_in in [15, 1024]")
    c.finish()


def test_criterion_3_gradients():
    c = Criterion(3, "gradient suite")
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 6))
    x[np.abs(x) < 1e-2] = 0.25
    w = rng.standard_normal((4, 3, 3, 3))
    gamma, beta = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
    fc = rng.standard_normal((5, 3))
    labels = np.array([0, 4])
    probes = {
        "conv2d": (lambda a, b: sq(ops.conv2d(a, b, stride=2, padding=1)).sum(), [x, w]),
        "conv2d dilated": (lambda a, b: sq(ops.conv2d(a, b, padding=2, dilation=2)).sum(), [x, w]),
        "batch_norm train": (lambda a, g, b: cube(ops.batch_norm(a, g, b, np.zeros(3), np.ones(3), True)).sum(), [x, gamma, beta]),
        "batch_norm eval": (lambda a, g, b: cube(ops.batch_norm(a, g, b, np.full(3, 0.1), np.full(3, 2.0), False)).sum(), [x, gamma, beta]),
        "max_pool": (lambda a: sq(ops.max_pool2d(a, 3, 2, 1)).sum(), [x]),
        "avg_pool": (lambda a: sq(ops.avg_pool2d(a, 3, 1, 1)).sum(), [x]),
        "linear + cross_entropy": (lambda a, b: ops.softmax_cross_entropy(ops.linear(ops.global_avg_pool(a), b), labels), [x, fc]),
        "tanh": (lambda a: (ops.tanh(a) * a).sum(), [x]),
        "relu": (lambda a: (ops.relu(a) * a).sum(), [x]),
        "add / mul": (lambda a, b: (ops.mul(ops.add(a, b), a)).sum(), [x, x[::-1].copy()]),
        "subsample / adapt_channels": (lambda a: sq(ops.adapt_channels(ops.subsample(a, 2), 5)).sum(), [x]),
    }
    worst = 0.0
    for name, (fn, arrays) in probes.items():
        err = gradcheck(fn, arrays)
        worst = max(worst, err)
        c.check(err < 1e-4, f"{name} rel err {err:.2e}")

    max_dev = 0.0
    for _ in range(1000):
        m = int(rng.integers(1, 11))
        p = path_weights(rng.standard_normal(m) * 2)
        gg = rng.standard_normal(m)
        dense = np.array([[p[j] * ((i == j) - p[i]) for i in range(m)] for j in range(m)])
        max_dev = max(max_dev, float(np.abs(gate_grad_to_alpha(gg, p) - dense.T @ gg).max()))
    c.check(max_dev <= 1e-12, f"alpha estimator deviates by {max_dev:.2e}")

    grid = np.linspace(-2.0, 2.0, 10001)
    grid[[2500, 5000, 7500]] = [-1.0, 0.0, 1.0]
    leaf = Tensor(grid.copy(), requires_grad=True)
    backward(binarize_activations(leaf).sum())

    def piecewise(v):
        if -1 <= v < 0:
            return 2 + 2 * v
        if 0 <= v < 1:
            return 2 - 2 * v
        return 0.0

    expected = np.array([piecewise(float(v)) for v in grid])
    c.check(np.array_equal(leaf.grad, expected), f"activation STE differs at {np.count_nonzero(leaf.grad != expected)} grid points")
    c.note(f"{len(probes)} primitives, worst rel err {worst:.1e}; estimator max dev {max_dev:.1e}; STE exact on 10001 points")
    c.finish()


def test_criterion_4_binarization():
    c = Criterion(4, "binarization suite")
    rng = np.random.default_rng(4)
    x = rng.standard_normal(10_000)
    x[:3] = [0.0, -0.0, 1e-300]
    b = sign(x)
    c.check(set(np.unique(b)) == {-1.0, 1.0}, "sign range")
    c.check(np.array_equal(sign(b), b), "sign idempotence")
    for _ in range(20):
        w = rng.standard_normal((int(rng.integers(1, 9)), int(rng.integers(1, 5)), 3, 3))
        direct = [sum(abs(float(v)) for v in f.ravel()) / f.size for f in w]
        c.check(np.abs(scaling_coefficients(w) - direct).max() <= 1e-12, "per-filter s vs direct sum")

    mismatched = 0
    for _ in range(200):
        n, c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 150)), int(rng.integers(1, 5))
        kernel, stride, dilation = int(rng.choice([1, 3, 5])), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        size = int(rng.integers(kernel + (kernel - 1) * (dilation - 1), 10))
        spec = ConvSpec.square(c_in, c_out, kernel, stride, dilation)
        xb = sign(rng.standard_normal((n, c_in, size, size)))
        wb = sign(rng.standard_normal((c_out, c_in, kernel, kernel)))
        s = rng.integers(1, 64, c_out) / 32.0  # dyadic, so the float reference is exact
        fast = xnor_conv2d(pack_input(xb), pack_weight(wb), s, spec)
        ref = ops.conv2d(Tensor(xb), Tensor(wb * s[:, None, None, None]), spec).data
        mismatched += not np.array_equal(fast, ref)
    c.check(mismatched == 0, f"xnor conv differs from float conv on {mismatched}/200 shapes")
    c.note("sign range and idempotence; s = mean|W| to 1e-12; xnor bit-exact on 200 shapes")
    c.finish()


def test_criterion_5_sampling():
    c = Criterion(5, "sampling suite")
    rng = np.random.default_rng(5)
    pvalues = []
    for alpha in ([0.3, -1.0, 1.2, 0.0, 0.5], [0.0, 0.0], [2.0, -2.0, 0.5, 0.1, 0.0, -0.3, 1.1, 0.7, -1.5, 0.2]):
        p = path_weights(alpha)
        counts = np.bincount([sample_gates(p, rng).index for _ in range(100_000)], minlength=len(p))
        pv = stats.chisquare(counts, 100_000 * p).pvalue
        pvalues.append(pv)
        c.check(pv > 0.01, f"chi-square p-value {pv:.3g} for M={len(p)}")
    for m in (1, 2, 10):
        for hot in range(m):
            p = np.eye(m)[hot]
            c.check(all(sample_gates(p, rng).index == hot for _ in range(1000)), f"one-hot p index {hot} of {m}")
    c.note("min p-value " + f"{min(pvalues):.3g}")
    c.finish()


def _random_arch(rng, n_nodes=5, n_cells=2):
    plan = toy_plan(width=8, n_nodes=n_nodes, n_cells=n_cells)
    cells = [CellArch(cp, ALL_KINDS, [rng.standard_normal(len(ALL_KINDS)) * 2 for _ in cp.edges()]) for cp in plan.cells]
    return NetArch(plan, cells)


def test_criterion_6_derivation():
    c = Criterion(6, "derivation suite")
    rng = np.random.default_rng(6)
    expected = {"NASB": (1, 1, False), "V1": (1, 1, False), "V2": (1, 4, False), "V3": (1, 1, False),
                "V4": (4, 4, True), "V5": (6, 8, False)}
    for trial in range(50):
        arch = _random_arch(rng, n_nodes=int(rng.integers(2, 6)))
        for variant, (inner, output, no_identity) in expected.items():
            geno = derive(arch, RetainSpec.for_variant(variant))
            for gene in geno.cells:
                for j, node in enumerate(gene.nodes, start=1):
                    want = output if j == gene.plan.n_nodes - 1 else inner
                    c.check(len(node.ops) == want, f"{variant} node {j} keeps {len(node.ops)} ops, expected {want}")
                    c.check(len({k for _, k in node.ops}) == len(node.ops), f"{variant} duplicate ops")
                    c.check(all(s == node.pred for s, _ in node.ops), f"{variant} ops off the predecessor edge")
                    if no_identity:
                        c.check(all(k != K.IDENTITY for _, k in node.ops), f"{variant} kept an identity")
            c.check(len(geno.cells) == len(arch.cells) * (2 if variant == "V3" else 1), f"{variant} branch count")
            text = geno.to_json()
            c.check(Genotype.from_json(text).to_json() == text, f"{variant} JSON round trip")
            shifted = NetArch(arch.plan, [CellArch(ca.plan, ca.kinds, [a + rng.normal() * 5 for a in ca.alphas]) for ca in arch.cells])
            c.check(derive(shifted, RetainSpec.for_variant(variant)) == geno, f"{variant} alpha-shift invariance (trial {trial})")

    cp = toy_plan(n_nodes=4).cells[0]
    tied = CellArch(cp, ALL_KINDS, [np.zeros(len(ALL_KINDS)) for _ in cp.edges()])
    genes = {derive(tied, RetainSpec.for_variant("NASB")) for _ in range(5)}
    c.check(len(genes) == 1, "tie-break not deterministic")
    gene = genes.pop()
    c.check(all(node.ops == ((j - 1, K.ZERO),) for j, node in enumerate(gene.nodes, start=1)),
            "ties resolve to the lowest op index on the nearest source")
    c.note("50 random architectures x 6 variants")
    c.finish()


# ----------------------------------------------------------------------------
# end-to-end


SEARCH_FLAGS = ["--epochs", 4, "--lr", 0.02, "--arch-lr", 0.1, "--op-mask", "Zero,Identity,MaxPool3,Conv3", "--seed", 0]


def _pipeline(root: Path, data: Path) -> dict:
    """search -> derive -> pretrain -> finetune -> eval through the command line."""
    steps = {
        "search": ["search", "--data", data / "D", "--out", root / "search.ckpt", *SEARCH_FLAGS],
        "derive": ["derive", "--in", root / "search.ckpt", "--variant", "NASB", "--out", root / "geno.json"],
        "pretrain": ["pretrain", "--genotype", root / "geno.json", "--data", data / "Dp", "--out", root / "mp.ckpt",
                     "--epochs", 10, "--lr", 0.05, "--seed", 0],
        "finetune": ["finetune", "--in", root / "mp.ckpt", "--genotype", root / "geno.json", "--data", data / "Dp",
                     "--out", root / "mf.ckpt", "--epochs", 5, "--finetune-lr", 1e-3, "--seed", 0],
        "eval": ["eval", "--in", root / "mf.ckpt", "--data", data / "Dp", "--out", root / "eval.json"],
    }
    codes = {}
    for name, argv in steps.items():
        codes[name] = cli([str(a) for a in argv])
    return codes


@pytest.fixture(scope="module")
def end_to_end(tmp_path_factory):
    data = tmp_path_factory.mktemp("data")
    t = time.perf_counter()
    gen = [cli(["gen-data", "--out", str(data / "D"), "--samples", "1000", "--seed", "0"]),
           cli(["gen-data", "--out", str(data / "Dp"), "--samples", "2000", "--seed", "1"])]
    root = tmp_path_factory.mktemp("run1")
    codes = _pipeline(root, data)
    return {"data": data, "root": root, "codes": {"gen-data": max(gen), **codes}, "seconds": time.perf_counter() - t}


@pytest.mark.slow
def test_criterion_7_end_to_end(end_to_end):
    c = Criterion(7, "end-to-end desk-scale run")
    root, data = end_to_end["root"], end_to_end["data"]
    failed = {k: v for k, v in end_to_end["codes"].items() if v != 0}
    c.check(not failed, f"stages exited nonzero: {failed}")
    if not failed:
        arch = arch_from_checkpoint(load_checkpoint(root / "search.ckpt"))
        cell = arch.cells[0]
        p = cell.probabilities()[0]  # the single edge (0, 1) is the decisive one
        best = int(np.argmax(p))
        c.check(cell.kinds[best] != K.ZERO, f"search kept Zero (p={p[best]:.3f})")
        c.check(p[best] > 0.9, f"decisive edge p={p[best]:.3f} for {cell.kinds[best].tag}")

        ds = load_dataset_dir(data / "Dp")
        mp = model_from_checkpoint(load_checkpoint(root / "mp.ckpt"))
        mf = model_from_checkpoint(load_checkpoint(root / "mf.ckpt"))
        acc_p, acc_f = evaluate(mp, ds)[0], evaluate(mf, ds)[0]
        c.check(acc_p >= 0.95, f"M_p train accuracy {acc_p:.3f}")
        c.check(abs(acc_p - acc_f) <= 0.05, f"M_f {acc_f:.3f} vs M_p {acc_p:.3f}")
        c.check(json.loads((root / "eval.json").read_text())["top1"] == acc_f, "eval command disagrees with evaluate()")
        c.note(f"{cell.kinds[best].tag} p={p[best]:.3f}; M_p {acc_p:.3f}; M_f {acc_f:.3f}")
    c.check(end_to_end["seconds"] < 1800, f"run took {end_to_end['seconds']:.0f}s")
    c.note(f"{end_to_end['seconds']:.0f}s single core")
    c.finish()


def _strip_wall_clock(path: Path) -> dict:
    summary = json.loads(path.read_text())
    summary.pop("wall_clock_seconds")
    return summary


@pytest.mark.slow
def test_criterion_8_determinism(end_to_end, tmp_path):
    c = Criterion(8, "determinism")
    root, data = end_to_end["root"], end_to_end["data"]
    again = _pipeline(tmp_path, data)
    c.check(all(v == 0 for v in again.values()), f"repeat run exited nonzero: {again}")
    for name in ["search.ckpt", "geno.json", "mp.ckpt", "mf.ckpt", "eval.json", "search_log.csv", "mp_log.csv", "mf_log.csv"]:
        a, b = root / name, tmp_path / name
        if name == "eval.json":
            same = {**json.loads(a.read_text()), "checkpoint": ""} == {**json.loads(b.read_text()), "checkpoint": ""}
        else:
            same = a.read_bytes() == b.read_bytes()
        c.check(same, f"{name} differs between runs")
    for name in ["search_summary.json", "mp_summary.json", "mf_summary.json"]:
        c.check(_strip_wall_clock(root / name) == _strip_wall_clock(tmp_path / name), f"{name} differs beyond wall clock")
    regen = tmp_path / "D"
    cli(["gen-data", "--out", str(regen), "--samples", "1000", "--seed", "0"])
    for f in ("images.ntsr", "labels.nlbl", "meta.json"):
        c.check((regen / f).read_bytes() == (data / "D" / f).read_bytes(), f"gen-data {f} differs")
    c.note("search, derive, pretrain, finetune, eval and gen-data repeat bit for bit")
    c.finish()

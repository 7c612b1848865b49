"""Command-line front end: ``spgm run | suite | hardgen | verify``.

Settings come from an optional INI file (section named after the
subcommand, with ``[DEFAULT]`` as fallback); command-line flags override
the file. Exit codes: 0 ok, 1 usage, 2 verification failure, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import os
import re
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datasets import normalize_dataset, parse_libsvm
from .methods import GradientDescent, SPGMStepper, drive
from .problems import SUITE_FAMILIES, Family, gen_random, make_instance, quadratic_1d, reference_optimum

log = logging.getLogger("spgm")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_ABORT = 0, 1, 2, 3

CSV_COLUMNS = ("run_id", "method", "family", "d", "m", "seed", "iter", "f_gap_norm",
               "grad_norm", "tau_bound_inv", "subqp_status", "wall_ms")
THRESHOLDS = (1e-3, 1e-6, 1e-9)
VERIFY_TARGETS = ("hardgen", "subqp", "interpolation")


class UsageError(Exception):
    pass


class VerificationFailure(Exception):
    pass


class RunAbort(Exception):
    pass


# ------------------------------------------------------------------ configuration

@dataclass
class ExperimentConfig:
    methods: list = field(default_factory=lambda: ["ogm", "spgm"])
    family: str | None = None
    d: int = 8
    m: int | None = None
    seed: int = 0
    N: int = 100
    k: int = 10
    dataset: str | None = None
    thresholds: tuple = THRESHOLDS
    out: str = "out"
    svg: bool = False
    dims_max: int = 128
    seeds: int = 1
    workers: int = 0
    switch: int | None = None
    count: int = 100
    target: str | None = None

    def __post_init__(self):
        if self.N < 1:
            raise UsageError("iters must be at least 1")
        if self.d < 1 or (self.m is not None and self.m < 1):
            raise UsageError("d and m must be positive")
        th = tuple(float(t) for t in self.thresholds)
        if not th or any(t <= 0 for t in th) or any(a <= b for a, b in zip(th, th[1:])):
            raise UsageError("thresholds must be positive and decreasing")
        self.thresholds = th
        for meth in self.methods:
            parse_method(meth, self.k)

    @property
    def m_eff(self):
        return 4 * self.d if self.m is None else self.m


_INT_KEYS = {"d": "d", "m": "m", "seed": "seed", "iters": "N", "k": "k", "dims_max": "dims_max",
             "seeds": "seeds", "workers": "workers", "switch": "switch", "count": "count"}
_STR_KEYS = {"family": "family", "dataset": "dataset", "out": "out", "target": "target"}


def load_config(args) -> ExperimentConfig:
    values = {}
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        parser = configparser.ConfigParser()
        try:
            parser.read(args.config, encoding="utf-8")
        except configparser.Error as exc:
            raise UsageError(f"bad config file: {exc}") from None
        section = parser[args.command] if parser.has_section(args.command) else parser.defaults()
        for key, raw in section.items():
            try:
                if key in _INT_KEYS:
                    values[_INT_KEYS[key]] = int(raw)
                elif key in _STR_KEYS:
                    values[_STR_KEYS[key]] = raw.strip() or None
                elif key in ("method", "methods"):
                    values["methods"] = _split(raw)
                elif key == "thresholds":
                    values["thresholds"] = [float(t) for t in _split(raw)]
                elif key == "svg":
                    values["svg"] = section.getboolean(key)
                else:
                    raise UsageError(f"unknown config key {key!r}")
            except ValueError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
    flags = {"family": args.family, "d": args.d, "m": args.m, "seed": args.seed, "N": args.iters,
             "k": args.k, "dataset": args.dataset, "out": args.out}
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.method:
        values["methods"] = _split(args.method)
    if args.svg:
        values["svg"] = True
    if getattr(args, "target", None):
        values["target"] = args.target
    if args.command == "hardgen":
        values.setdefault("N", 10)
        values.setdefault("family", Family.LS_PLAIN.value)
    if args.command == "verify":
        values.setdefault("N", 10)
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def _split(raw):
    return [t for t in re.split(r"[,\s]+", raw.strip()) if t]


def parse_method(name: str, k_default: int = 10):
    """``(kind, k)`` for ``gd``, ``ogm``, ``spgm``, ``kspgm`` or ``kspgm:k``."""
    head, _, tail = name.partition(":")
    if head not in ("gd", "ogm", "spgm", "kspgm"):
        raise UsageError(f"unknown method {name!r}")
    if head != "kspgm":
        if tail:
            raise UsageError(f"method {head} takes no parameter")
        return head, None
    try:
        k = int(tail) if tail else k_default
    except ValueError:
        raise UsageError(f"bad memory size in {name!r}") from None
    if k < 1:
        raise UsageError("k must be at least 1")
    return head, k


def make_stepper(method: str, p, N: int, k_default: int = 10):
    kind, k = parse_method(method, k_default)
    if kind == "gd":
        st = GradientDescent(p.L, p.x0, N)
    elif kind == "ogm":
        st = SPGMStepper(p.L, p.x0, N, mode="ogm", keep_history=False)
    elif kind == "spgm":
        st = SPGMStepper(p.L, p.x0, N)
    else:
        st = SPGMStepper(p.L, p.x0, N, memory=k, keep_history=False)
    label = kind if k is None else f"kspgm:{k}"
    return st, label


# ------------------------------------------------------------------ instances and rows

def load_dataset(path: str, family: str | None):
    if not os.path.exists(path):
        raise UsageError(f"dataset not found: {path}")
    fam = Family(family or Family.LOGISTIC_L2.value)
    try:
        A, b = parse_libsvm(path)
    except ValueError as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from None
    if A.size == 0:
        raise UsageError(f"dataset {path} is empty")
    A, b = normalize_dataset(A, b, classification=fam is Family.LOGISTIC_L2)
    name = os.path.splitext(os.path.basename(path))[0]
    return make_instance(fam, A, b, np.zeros(A.shape[1]), name=name)


def build_instance(cfg: ExperimentConfig):
    if cfg.dataset:
        return load_dataset(cfg.dataset, cfg.family)
    fam = Family(cfg.family or Family.LS_PLAIN.value)
    if fam is Family.QUADRATIC_1D:
        return quadratic_1d()
    return gen_random(fam, cfg.d, cfg.m_eff, cfg.seed)


def _num(v):
    return repr(float(v))


def run_id(method: str, p) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "", f"{method}-{p.name or p.family.value}")


def trace_rows(trace, method, p, seed):
    rid = run_id(method, p)
    rows = []
    for r in trace.records:
        rows.append([rid, method, p.family.value, p.d, p.m, seed, r.n, _num(r.gap_norm),
                     _num(r.grad_norm), _num(r.bound_inv), r.status, f"{r.wall_ms:.3f}"])
    if trace.error is not None:
        nxt = trace.records[-1].n + 1 if trace.records else 0
        rows.append([rid, method, p.family.value, p.d, p.m, seed, nxt, "nan", "nan", "nan",
                     "abort: " + trace.error.replace("\n", " "), "0.000"])
    return rows


def write_csv(path, rows, columns=CSV_COLUMNS):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)


def run_instance(p, methods, N, k, seed, reference=None):
    """Run every method on ``p``; returns ``[(method, trace)]``."""
    if reference is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            reference = reference_optimum(p)
    out = []
    for meth in methods:
        st, label = make_stepper(meth, p, N, k)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RuntimeWarning)
            trace = drive(st, p, N, reference, keep_iterates=False, method=label, partial=True)
        for wmsg in caught:
            log.warning("%s on %s: %s", label, p.name, wmsg.message)
        out.append((label, trace))
    return out


# ------------------------------------------------------------------ SVG

def svg_plot(series: dict, title: str = "", width=640, height=400) -> str:
    """Polylines on a log-scale y axis; ``series`` maps label -> (x, y)."""
    pad = 50
    pts = {k: [(float(a), float(b)) for a, b in zip(*v) if b > 0 and math.isfinite(b)]
           for k, v in series.items()}
    xs = [a for v in pts.values() for a, _ in v] or [0.0, 1.0]
    ys = [math.log10(b) for v in pts.values() for _, b in v] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
    y0, y1 = math.floor(min(ys)), math.ceil(max(ys))
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(a):
        return pad + (a - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(b):
        return height - pad - (math.log10(b) - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<text x="{pad}" y="20" font-size="12">{title}</text>',
           f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
           'fill="none" stroke="black"/>']
    for e in range(int(y0), int(y1) + 1):
        y = sy(10.0 ** e)
        out.append(f'<text x="5" y="{y:.1f}" font-size="10">1e{e}</text>')
    for idx, (label, v) in enumerate(pts.items()):
        if not v:
            continue
        c = colors[idx % len(colors)]
        path = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in v)
        out.append(f'<polyline fill="none" stroke="{c}" points="{path}"/>')
        out.append(f'<text x="{width - pad + 4}" y="{pad + 14 * idx}" font-size="10" fill="{c}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ------------------------------------------------------------------ subcommands

def cmd_run(cfg: ExperimentConfig) -> int:
    p = build_instance(cfg)
    results = run_instance(p, cfg.methods, cfg.N, cfg.k, cfg.seed)
    aborted = False
    series = {}
    for label, trace in results:
        path = os.path.join(cfg.out, run_id(label, p) + ".csv")
        write_csv(path, trace_rows(trace, label, p, cfg.seed))
        print(f"{label}: wrote {path}")
        if trace.error is not None:
            print(f"{label}: aborted ({trace.error})", file=sys.stderr)
            aborted = True
        it = trace.column("n")
        series[f"{label} gap"] = (it, trace.column("gap_norm"))
        if label != "gd":
            series[f"{label} 1/tau"] = (it, trace.column("bound_inv"))
    if cfg.svg:
        path = os.path.join(cfg.out, f"{p.name or p.family.value}.svg")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(svg_plot(series, title=p.name))
        print(f"wrote {path}")
    return EXIT_ABORT if aborted else EXIT_OK


def _suite_job(job):
    fam, d, seed, methods, N, k, thresholds = job
    p = gen_random(fam, d, 4 * d, seed)
    results = run_instance(p, methods, N, k, seed)
    rows, solved, errors = [], {}, []
    for label, trace in results:
        rows.extend(trace_rows(trace, label, p, seed))
        gaps = trace.column("gap_norm")
        first = {}
        for t in thresholds:
            hit = np.flatnonzero(gaps <= t)
            first[t] = int(hit[0]) if hit.size else None
        solved[label] = first
        if trace.error is not None:
            errors.append(f"{label} on {p.name}: {trace.error}")
    return (fam, d, seed), rows, solved, errors


def suite_dims(cfg):
    dims, d = [], 8
    while d <= cfg.dims_max:
        dims.append(d)
        d *= 2
    return dims


def cmd_suite(cfg: ExperimentConfig) -> int:
    fams = [Family(cfg.family)] if cfg.family else list(SUITE_FAMILIES)
    dims = suite_dims(cfg)
    if not dims:
        raise UsageError("dims_max must be at least 8")
    seeds = [cfg.seed + s for s in range(cfg.seeds)]
    jobs = [(f.value, d, s, cfg.methods, cfg.N, cfg.k, cfg.thresholds)
            for f in fams for d in dims for s in seeds]
    workers = cfg.workers or min(len(jobs), os.cpu_count() or 1)
    print(f"suite: {len(jobs)} instances, methods {', '.join(cfg.methods)}, {workers} workers")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_suite_job, jobs))
    else:
        results = [_suite_job(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    # single collector: all CSV writes happen here
    trace_all = [row for _, rows, _, _ in results for row in rows]
    write_csv(os.path.join(cfg.out, "suite_traces.csv"), trace_all)
    labels = [make_stepper(m, gen_random(Family.LS_PLAIN, 1, 1, 0), 1, cfg.k)[1] for m in cfg.methods]
    table = fraction_solved([r[2] for r in results], labels, cfg.thresholds, cfg.N)
    agg = [[lab, repr(t), it, repr(frac), len(results)] for (lab, t), col in table.items()
           for it, frac in enumerate(col)]
    path = os.path.join(cfg.out, "suite.csv")
    write_csv(path, agg, ("method", "threshold", "iter", "fraction_solved", "instances"))
    print(f"wrote {path}")
    for lab in labels:
        print("  " + lab + ": " + ", ".join(f"{t:g} -> {table[(lab, t)][-1]:.3f}" for t in cfg.thresholds))
    if "spgm" in labels and "ogm" in labels:
        t = cfg.thresholds[0]
        behind = [i for i, (a, b) in enumerate(zip(table[("spgm", t)], table[("ogm", t)])) if a < b]
        msg = "holds" if not behind else f"does not hold at {len(behind)} iterations (first {behind[0]})"
        print(f"  soft check spgm >= ogm at {t:g}: {msg}")
    errors = [e for r in results for e in r[3]]
    for e in errors:
        print("aborted: " + e, file=sys.stderr)
    return EXIT_ABORT if errors else EXIT_OK


def fraction_solved(solved_list, labels, thresholds, N):
    """``{(method, threshold): fraction of instances solved by iteration n}``."""
    table = {}
    total = len(solved_list)
    for lab in labels:
        for t in thresholds:
            firsts = [s[lab][t] for s in solved_list]
            col = []
            for n in range(N + 1):
                col.append(sum(1 for f in firsts if f is not None and f <= n) / total if total else 0.0)
            table[(lab, t)] = col
    return table


def cmd_hardgen(cfg: ExperimentConfig) -> int:
    from .hardgen import BoundViolation, play_continuations, verify_all

    N = cfg.N
    n = cfg.switch if cfg.switch is not None else math.ceil(N / 2)
    if not 1 <= n <= N:
        raise UsageError("switch round must satisfy 1 <= n <= N")
    p = build_instance(cfg)
    st = SPGMStepper(p.L, p.x0, N, on_solver_failure="raise")
    for _ in range(n):
        f, g = p.evaluate(st.x)
        st.tell(f, g)
        if st.terminal is not None:
            raise RunAbort(f"SPGM located a minimizer before round {n}; no hard instance exists")
    try:
        inst, gaps = play_continuations(st, N, d=max(N + 2, p.d), seed=cfg.seed)
    except BoundViolation as exc:
        print(f"lower bound violated: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "hard_instance.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(inst.dumps())
    reports = verify_all(inst)
    lines = [f"hard instance N={N} n={n} d={inst.d} from {p.name}"]
    for rep in reports:
        lines.extend(rep.lines())
    rows = []
    for meth, (gap, bound) in gaps.items():
        lines.append(f"continuation {meth}: gap {gap:.17g} bound {bound:.17g} ratio {gap / bound:.12f}")
        rows.append([meth, _num(gap), _num(bound), _num(gap / bound)])
    write_csv(os.path.join(cfg.out, "continuations.csv"), rows, ("method", "final_gap", "bound", "ratio"))
    with open(os.path.join(cfg.out, "hardgen_report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote {path}")
    return EXIT_OK if all(r.ok for r in reports) else EXIT_VERIFY


# verify targets each return a list of (label, ok) pairs

def verify_hardgen(cfg):
    from .hardgen import BoundViolation, play_continuations, verify_all

    N = cfg.N
    n = cfg.switch if cfg.switch is not None else 3
    p = gen_random(Family(cfg.family or Family.LS_PLAIN.value), cfg.d, cfg.m_eff, cfg.seed)
    st = SPGMStepper(p.L, p.x0, N, on_solver_failure="raise")
    for _ in range(n):
        f, g = p.evaluate(st.x)
        st.tell(f, g)
    out = []
    try:
        inst, gaps = play_continuations(st, N, d=max(N + 2, p.d), seed=cfg.seed)
    except BoundViolation as exc:
        return [(f"continuation lower bound: {exc}", False)]
    for rep in verify_all(inst):
        for line in rep.lines():
            print("  " + line)
        out.append((rep.title, rep.ok))
    for meth, (gap, bound) in gaps.items():
        ok = gap >= (1 - 1e-6) * bound and (meth != "spgm" or abs(gap / bound - 1) <= 1e-5)
        out.append((f"{meth} continuation gap/bound = {gap / bound:.12f}", ok))
    return out


def verify_subqp(cfg):
    from .oracle import brute_force_subproblem, random_small_history
    from .subqp import SubproblemStatus

    bad = 0
    for s in range(cfg.seed, cfg.seed + cfg.count):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            p, st = random_small_history(s)
        n = len(st.history)
        sol = st.rounds[-1].solution
        X, F, G = st.history.arrays()
        ref = brute_force_subproblem(X, F, G, st.L, st.taus[:n], st.zs[:n])
        mine_unb = sol.status is SubproblemStatus.UNBOUNDED
        if ref.bounded != (not mine_unb):
            ok = False
        else:
            ok = mine_unb or abs(sol.tau - ref.tau) <= 1e-4
        if not ok:
            bad += 1
            print(f"  seed {s}: solver {sol.status} {sol.tau!r} vs brute force {ref.tau!r}")
    return [(f"subproblem oracle equivalence on {cfg.count} seeds ({bad} mismatches)", bad == 0)]


def verify_interpolation(cfg):
    from .fo_core import FirstOrderTriple, is_interpolable
    from .problems import make_rng

    rng = make_rng(cfg.seed)
    failures = 0
    for _ in range(cfg.count):
        d = int(rng.integers(1, 6))
        B = rng.standard_normal((d, d))
        H = B @ B.T
        c = rng.standard_normal(d)
        L = max(float(np.linalg.eigvalsh(H)[-1]), 1e-12)
        pts = rng.standard_normal((int(rng.integers(2, 8)), d)) * 3.0
        triples = [FirstOrderTriple(x, 0.5 * x @ H @ x + c @ x, H @ x + c) for x in pts]
        if not is_interpolable(triples, L):
            failures += 1
    return [(f"interpolation on {cfg.count} sampled quadratics ({failures} rejected)", failures == 0)]


def cmd_verify(cfg: ExperimentConfig) -> int:
    if cfg.target not in VERIFY_TARGETS:
        raise UsageError(f"verify target must be one of {', '.join(VERIFY_TARGETS)}")
    fn = {"hardgen": verify_hardgen, "subqp": verify_subqp, "interpolation": verify_interpolation}
    t0 = time.perf_counter()
    results = fn[cfg.target](cfg)
    for label, ok in results:
        print(f"{'PASS' if ok else 'FAIL'} {label}")
    print(f"verify {cfg.target}: {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if all(ok for _, ok in results) else EXIT_VERIFY


# ------------------------------------------------------------------ entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file; section named after the subcommand")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--iters", type=int, help="iteration budget N")
    common.add_argument("--method", help="comma list of gd, ogm, spgm, kspgm[:k]")
    common.add_argument("--family", choices=[f.value for f in Family])
    common.add_argument("--d", type=int)
    common.add_argument("--m", type=int)
    common.add_argument("--k", type=int, help="memory of kspgm when not given inline")
    common.add_argument("--dataset", help="LIBSVM file")
    common.add_argument("--svg", action="store_true", help="also write an SVG plot")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="spgm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("run", parents=[common], help="run methods on one instance")
    sub.add_parser("suite", parents=[common], help="fraction-solved suite over random families")
    sub.add_parser("hardgen", parents=[common], help="build and check a hard instance")
    v = sub.add_parser("verify", parents=[common], help="run an invariant suite")
    v.add_argument("target", nargs="?", choices=VERIFY_TARGETS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "suite": cmd_suite, "hardgen": cmd_hardgen, "verify": cmd_verify}
    try:
        cfg = load_config(args)
        return handlers[args.command](cfg)
    except UsageError as exc:
        print(f"spgm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailure as exc:
        print(f"spgm: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (RunAbort, Exception) as exc:  # noqa: BLE001 - any failure is a runtime abort
        print(f"spgm: aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())

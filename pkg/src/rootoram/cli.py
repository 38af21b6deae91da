"""Command-line entry point: ``rootoram <subcommand> [flags]``.

Exit status is 0 on success, 1 on a domain error (bad parameters, failed
verification, broken invariant) and 2 on an I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import random
import sys
from fractions import Fraction
from typing import Optional, Sequence

from rootoram import netserve, oracle, privacy, simharness
from rootoram.core import INFINITE, Params, ParameterError, parse_probability, parse_rate
from rootoram.metrics import (
    InfiniteDivergence,
    k_anonymity,
    kl_divergence,
    min_entropy,
    read_channel_csv,
    read_distribution_csv,
    shannon_entropy,
    uniform,
)
from rootoram.protocol import InvariantViolation, ORAMClient
from rootoram.storage import (
    AesGcmCipher,
    AuthenticationError,
    MemoryBackend,
    NullCipher,
    load_snapshot,
    save_snapshot,
)

log = logging.getLogger("rootoram")


class UsageError(ParameterError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class VerificationFailed(ParameterError):
    pass


# -- output -------------------------------------------------------------------


def _fmt(value):
    if isinstance(value, Fraction):
        return str(value)
    if value is INFINITE:
        return "inf"
    if isinstance(value, float):
        return repr(value)
    return value


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Fraction) or value is INFINITE or value is oracle.NONE:
        return str(value)
    return value


def render(rows: Sequence[dict], fmt: str, columns: Optional[Sequence[str]] = None) -> str:
    if fmt == "json":
        return json.dumps(_jsonable(list(rows)), indent=2) + "\n"
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def render_pairs(pairs: dict, fmt: str) -> str:
    """Key/value report: ``name,value`` lines, or one JSON object."""
    if fmt == "json":
        return json.dumps(_jsonable(pairs), indent=2) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "value"])
    for key, value in pairs.items():
        writer.writerow([key, _fmt(value)])
    return buf.getvalue()


def emit(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- argument helpers ---------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _params(args, k: Optional[int] = None, B: Optional[int] = None) -> Params:
    L = args.L
    if args.p is not None:
        p = parse_probability(args.p)
    elif args.p_index is not None:
        p = min(simharness.p_from_index(args.p_index), 1 - 1 / (1 << L))
    else:
        p = 1 - Fraction(1, 1 << L)
    return Params(L=L, k=args.k if k is None else k, p=p, Z=args.Z,
                  B=args.B if B is None else B, lam=args.lam)


def _add_protocol_flags(sp, k_list: bool = False, B_list: bool = False) -> None:
    sp.add_argument("--L", type=int, default=10, help="N = 2**L blocks")
    if k_list:
        sp.add_argument("--k", type=_int_list, default=[1, 4, 7, 10], help="comma list")
    else:
        sp.add_argument("--k", type=int, default=None, help="tree depth (default L)")
    sp.add_argument("--Z", type=int, default=4)
    if B_list:
        sp.add_argument("--B", type=_int_list, default=[1024], help="comma list")
    else:
        sp.add_argument("--B", type=int, default=16)
    grp = sp.add_mutually_exclusive_group()
    grp.add_argument("--p", default=None, help="remap probability, number or a/b")
    grp.add_argument("--p-index", type=int, default=None, help="p = 1 - 2**-i")
    sp.add_argument("--lambda", dest="lam", type=parse_rate, default=INFINITE,
                    help="fake-access rate or inf")


def _cipher(name: str, key_hex: Optional[str] = None):
    if name == "null":
        return NullCipher()
    return AesGcmCipher(bytes.fromhex(key_hex) if key_hex else None)


# -- subcommands --------------------------------------------------------------


def cmd_simulate(args) -> str:
    if args.k is None:
        args.k = args.L
    params = _params(args)
    stats = simharness.run_sim(params, args.M, args.seed, audit_every=args.audit_every)
    row = simharness.sweep_row(params, args.M, args.seed, stats, C=args.C)
    row["blocks_per_access"] = repr(stats.blocks_per_access)
    row["fake_accesses"] = stats.fake_accesses
    return render([row], args.format, simharness.SWEEP_COLUMNS + ["blocks_per_access",
                                                                  "fake_accesses"])


def cmd_sweep(args) -> str:
    with open(args.grid) as fh:
        grid = simharness.SweepGrid.from_json(fh.read())
    rows = simharness.sweep(grid, audit_every=args.audit_every or None)
    return render(rows, args.format, simharness.SWEEP_COLUMNS)


def cmd_mgrowth(args) -> str:
    N = 1 << args.L
    Ms = args.M if args.M else [N * f for f in (1, 2, 4, 8, 16, 32, 64, 100)]
    rows = []
    for k in args.k:
        params = simharness.appendix_params(k, L=args.L, Z=args.Z, lam=args.lam)
        for seed in args.seeds or [args.seed]:
            rows.extend(simharness.m_growth(params, Ms, seed))
    return render(rows, args.format, simharness.MGROWTH_COLUMNS)


def cmd_accountant(args) -> str:
    out: dict = {}
    if args.N is not None and args.p is not None:
        p = parse_probability(args.p)
        out["epsilon"] = privacy.epsilon_of(args.N, p)
        if args.k is not None:
            out["delta"] = privacy.delta_of(p, args.C, args.Z, args.k)
            out["capacity"] = privacy.CapacityModel(args.C, args.Z, args.k).capacity
    if args.k is not None:
        out["bandwidth"] = privacy.bandwidth_of(args.Z, args.k, args.lam)
    if not out:
        raise ParameterError("give --N and --p for epsilon, and/or --k for bandwidth")
    if args.compose or args.recursion:
        spec = privacy.PrivacySpec(out.get("epsilon", 0.0), out.get("delta", 0.0))
        if args.compose:
            composed = privacy.compose(args.compose, spec)
            out["composed_epsilon"] = composed.epsilon
            out["composed_delta"] = composed.delta
        if args.recursion:
            if args.R is None:
                raise ParameterError("--recursion needs --R")
            plan = privacy.recursion_plan(args.recursion, spec, out.get("bandwidth", 0.0), args.R)
            out["recursion_epsilon"] = plan.spec.epsilon
            out["recursion_delta"] = plan.spec.delta
            out["recursion_bandwidth"] = plan.bandwidth
            out["recursion_R"] = plan.outsourcing_ratio
    return render_pairs(out, args.format)


def cmd_solve(args) -> str:
    out: dict = {}
    if args.epsilon is not None:
        if args.N is None:
            raise ParameterError("--epsilon needs --N")
        out["p"] = privacy.solve_p_for_epsilon(args.N, args.epsilon)
    if args.budget is not None:
        out["k"] = privacy.solve_k_for_bandwidth(args.budget, args.Z, args.lam)
    if not out:
        raise ParameterError("give --N with --epsilon, and/or --budget")
    return render_pairs(out, args.format)


def verify_report(N: int, p, M: int, capacity: int, elements: Optional[int] = None) -> dict:
    model = oracle.ModelParams(N, parse_probability(p), capacity)
    res = oracle.max_ratio_bruteforce(model, M, elements or M)
    dw = oracle.delta_witness(model)
    relation = "=" if res.attains_bound else ("<" if res.within_bound else ">")
    status = "PASS" if res.within_bound else "FAIL"
    w = res.witness
    return {
        "N": N, "p": model.p, "M": M, "capacity": capacity, "elements": elements or M,
        "max_ratio": res.max_ratio, "bound": res.bound,
        "attains_bound": res.attains_bound, "within_bound": res.within_bound,
        "witness_r1": w.r1 if w else None, "witness_r2": w.r2 if w else None,
        "witness_observed": w.observed if w else None,
        "pattern_witness": (res.pattern_witness.r1, res.pattern_witness.r2,
                            res.pattern_witness.observed) if res.pattern_witness else None,
        "delta_r1_prob": dw.prob1, "delta_r2_prob": dw.prob2,
        "summary": f"max ratio {res.max_ratio} {relation} bound {res.bound}, {status}",
    }


def cmd_verify(args) -> str:
    report = verify_report(args.N, args.p, args.M, args.capacity, args.elements)
    if args.format == "json":
        text = render_pairs(report, "json")
    else:
        text = render_pairs({k: (" ".join(map(str, v)) if isinstance(v, tuple) else v)
                             for k, v in report.items() if k != "pattern_witness"}, "csv")
    print(report["summary"], file=sys.stderr)
    if not report["within_bound"]:
        emit(text, args.out)
        raise VerificationFailed(report["summary"])
    return text


def cmd_metrics(args) -> str:
    out: dict = {}
    if args.dist:
        with open(args.dist, newline="") as fh:
            dist = read_distribution_csv(fh)
        out["support"] = len(dist)
        out["shannon_entropy"] = shannon_entropy(dist, bits=args.bits)
        out["min_entropy"] = min_entropy(dist, bits=args.bits)
        out["kl_to_uniform"] = kl_divergence(list(dist.values()), uniform(len(dist)), bits=args.bits)
        if args.against:
            with open(args.against, newline="") as fh:
                q = read_distribution_csv(fh)
            try:
                out["kl_divergence"] = kl_divergence(dist, q, bits=args.bits)
            except InfiniteDivergence:
                out["kl_divergence"] = "inf"
    if args.channel:
        with open(args.channel, newline="") as fh:
            channel = read_channel_csv(fh)
        out["inputs"] = len(channel)
        out["k_anonymity"] = k_anonymity(channel)
    if not out:
        raise ParameterError("give --dist and/or --channel")
    return render_pairs(out, args.format)


def _store_for(args, params: Params):
    if args.snapshot:
        store = load_snapshot(args.snapshot, p=params.p, lam=params.lam)
        if (store.params.L, store.params.k, store.params.Z, store.params.B) != (
                params.L, params.k, params.Z, params.B):
            raise ParameterError("snapshot geometry does not match the given parameters")
        return store
    return MemoryBackend(params, params.B + _cipher(args.cipher).overhead)


def cmd_serve(args) -> str:
    if args.k is None:
        args.k = args.L
    params = _params(args)
    store = _store_for(args, params)
    throttle = (netserve.ThrottleConfig(args.rate_bps, args.burst_bytes)
                if args.rate_bps else None)
    server = netserve.serve(params, store, args.listen, throttle)
    host, port = server.endpoint
    print(f"listening on {host}:{port}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return ""


def cmd_bench(args) -> str:
    rates = [r or None for r in args.rate_bps]
    rows = []
    if args.connect:
        if len(args.k) != 1 or len(args.B) != 1:
            raise ParameterError("--connect benchmarks a single (k, B) cell")
        params = _params(args, k=args.k[0], B=args.B[0])
        cipher = _cipher(args.cipher)
        remote = netserve.remote_backend(args.connect, params, cipher)
        try:
            client = ORAMClient.setup(params, remote, seed=args.seed, cipher=cipher)
            for rate in rates:
                rows.append(netserve.measure_latency(client, remote, args.accesses, args.seed,
                                                     rate, args.burst_bytes))
        finally:
            remote.close()
    else:
        for k in args.k:
            for B in args.B:
                params = _params(args, k=k, B=B)
                for rate in rates:
                    rows.append(netserve.bench_cell(params, rate, args.accesses, seed=args.seed,
                                                    burst=args.burst_bytes,
                                                    cipher=_cipher(args.cipher)))
    return render(rows, args.format, netserve.BENCH_COLUMNS)


def cmd_snapshot_save(args) -> str:
    if args.k is None:
        args.k = args.L
    params = _params(args)
    cipher = _cipher(args.cipher)
    client = ORAMClient.setup(params, seed=args.seed, cipher=cipher)
    rng = random.Random(args.seed)
    for _ in range(args.M):
        client.write(rng.randrange(params.N), rng.randbytes(params.B))
    save_snapshot(client.store, args.path)
    state_path = args.state or args.path + ".state.json"
    with open(state_path, "w") as fh:
        json.dump(client.state_dict(), fh)
    return render_pairs({"snapshot": args.path, "state": state_path,
                         "bytes": client.store.serialized_size()}, args.format)


def cmd_snapshot_load(args) -> str:
    state = None
    if args.state:
        with open(args.state) as fh:
            state = json.load(fh)
    p = state["params"]["p"] if state else 0.5
    lam = state["params"]["lam"] if state else INFINITE
    store = load_snapshot(args.input, p=parse_probability(p), lam=lam)
    sp = store.params
    out = {"L": sp.L, "k": sp.k, "Z": sp.Z, "B": sp.B, "envelope_size": store.envelope_size}
    if state is not None:
        client = ORAMClient.from_state(state, store)
        problems = client.audit()
        out["stash"] = len(client.stash)
        out["audit"] = "ok" if not problems else "; ".join(problems[:5])
        if problems:
            emit(render_pairs(out, args.format), None)
            raise InvariantViolation(out["audit"])
    return render_pairs(out, args.format)


# -- parser -------------------------------------------------------------------


def _global_flags(parser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default,
                        help="RNG seed (default $ROOTORAM_SEED or 0)")
    parser.add_argument("--out", default=default, help="write output here instead of stdout")
    parser.add_argument("--format", choices=("csv", "json"),
                        default=argparse.SUPPRESS if suppress else "csv")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rootoram", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(func=func)
        return sp

    sp = add("simulate", cmd_simulate, "run one stash simulation")
    _add_protocol_flags(sp)
    sp.add_argument("--M", type=int, default=1024, help="real accesses")
    sp.add_argument("--C", type=int, default=0, help="stash allowance used for delta")
    sp.add_argument("--audit-every", type=int, default=None)

    sp = add("sweep", cmd_sweep, "run a JSON parameter grid")
    sp.add_argument("--grid", required=True, help="JSON grid file")
    sp.add_argument("--audit-every", type=int, default=simharness.AUDIT_EVERY,
                    help="0 disables audits")

    sp = add("mgrowth", cmd_mgrowth, "max stash as a function of M")
    sp.add_argument("--L", type=int, default=10)
    sp.add_argument("--k", type=_int_list, default=[1, 5, 10])
    sp.add_argument("--Z", type=int, default=4)
    sp.add_argument("--lambda", dest="lam", type=parse_rate, default=1.0)
    sp.add_argument("--M", type=_int_list, default=None, help="increasing comma list")
    sp.add_argument("--seeds", type=_int_list, default=None)

    sp = add("accountant", cmd_accountant, "epsilon, delta and bandwidth")
    sp.add_argument("--N", type=int)
    sp.add_argument("--p")
    sp.add_argument("--C", type=int, default=0)
    sp.add_argument("--Z", type=int, default=4)
    sp.add_argument("--k", type=int)
    sp.add_argument("--lambda", dest="lam", type=parse_rate, default=INFINITE)
    sp.add_argument("--compose", type=int, help="inputs differing in m accesses")
    sp.add_argument("--recursion", type=int, help="levels t")
    sp.add_argument("--R", type=float, help="per-level outsourcing ratio")

    sp = add("solve", cmd_solve, "pick p from epsilon or k from a bandwidth budget")
    sp.add_argument("--N", type=int)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--budget", type=float, help="blocks per real access")
    sp.add_argument("--Z", type=int, default=4)
    sp.add_argument("--lambda", dest="lam", type=parse_rate, default=INFINITE)

    sp = add("verify", cmd_verify, "exact brute-force check of the epsilon bound")
    sp.add_argument("--N", type=int, required=True)
    sp.add_argument("--p", required=True, help="use a/b for exact arithmetic")
    sp.add_argument("--M", type=int, default=3)
    sp.add_argument("--capacity", type=int, default=2)
    sp.add_argument("--elements", type=int, default=None, help="distinct elements (default M)")

    sp = add("metrics", cmd_metrics, "entropy, KL divergence and k-anonymity")
    sp.add_argument("--dist", help="CSV outcome,mass")
    sp.add_argument("--against", help="second distribution for KL")
    sp.add_argument("--channel", help="CSV input,output,mass")
    sp.add_argument("--bits", action="store_true")

    sp = add("serve", cmd_serve, "run a bucket store server")
    _add_protocol_flags(sp)
    sp.add_argument("--listen", default="127.0.0.1:7070")
    sp.add_argument("--cipher", choices=("aes", "null"), default="aes")
    sp.add_argument("--snapshot", help="start from a saved store")
    sp.add_argument("--rate-bps", type=float, default=None)
    sp.add_argument("--burst-bytes", type=int, default=4096)

    sp = add("bench", cmd_bench, "access latency under a bandwidth throttle")
    _add_protocol_flags(sp, k_list=True, B_list=True)
    sp.add_argument("--rate-bps", type=_float_list, default=[1_000_000.0],
                    help="comma list, 0 = unthrottled")
    sp.add_argument("--burst-bytes", type=int, default=4096)
    sp.add_argument("--accesses", type=int, default=10)
    sp.add_argument("--cipher", choices=("aes", "null"), default="aes")
    sp.add_argument("--connect", help="benchmark against a running server")

    snap = sub.add_parser("snapshot", help="save or load a store snapshot")
    snap_sub = snap.add_subparsers(dest="action", required=True, parser_class=_Parser)
    sp = snap_sub.add_parser("save", parents=[common], help="run writes, then save the store")
    sp.set_defaults(func=cmd_snapshot_save)
    sp.add_argument("path", help="snapshot file to write")
    _add_protocol_flags(sp)
    sp.add_argument("--M", type=int, default=256, help="random writes before saving")
    sp.add_argument("--cipher", choices=("aes", "null"), default="aes")
    sp.add_argument("--state", help="client state JSON (default <path>.state.json)")
    sp = snap_sub.add_parser("load", parents=[common], help="load and audit a snapshot")
    sp.set_defaults(func=cmd_snapshot_load)
    sp.add_argument("input")
    sp.add_argument("--state", help="client state JSON to audit against")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.seed is None:
            args.seed = int(os.environ.get("ROOTORAM_SEED", "0"))
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = args.func(args)
        if text:
            emit(text, args.out)
        return 0
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except (ParameterError, InvariantViolation, AuthenticationError, InfiniteDivergence,
            ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
